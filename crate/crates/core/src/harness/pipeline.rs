//! Group → estimate → fuse → prune → recover → evaluate.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};
use super::corpus::{evenly_spaced_windows, ingest_corpus, synthetic_text, Corpus};
use super::eval::EvalReport;
use super::train::{lora_finetune, pretrain, TrainReport};
use crate::artifact::ArtifactHeader;
use crate::error::{Error, Result, StageExt};
use crate::fusion::{fuse_groups, init_projections, write_fusion_csv, FusionOutcome, FusionProjections, FEATURE_DIM};
use crate::grouping::{discover_groups, DependencyGroup};
use crate::importance::{accumulate, GradAccumulator, ImportanceTable};
use crate::model::{load_checkpoint, save_checkpoint, DecoderModel};
use crate::pruning::{allocation_report, apply, make_plan, write_allocation_csv, Mask, PlanOptions, PruningPlan};

/// Seed of the synthetic corpus; fixed so that data does not vary with the run seed.
pub const SYNTHETIC_CORPUS_SEED: u64 = 0x5eed_c0de;

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.corpus {
        Some(p) => ingest_corpus(p),
        None => Corpus::from_bytes(&synthetic_text(cfg.synthetic_bytes, SYNTHETIC_CORPUS_SEED)),
    }
    .stage("corpus")
}

pub fn header(cfg: &RunConfig) -> ArtifactHeader {
    ArtifactHeader::new(cfg, cfg.seed)
}

/// A model to prune: loaded from `checkpoint`, or freshly initialised and pretrained.
pub fn prepare_model(cfg: &RunConfig, corpus: &Corpus, checkpoint: Option<&Path>) -> Result<(DecoderModel, Option<TrainReport>)> {
    if let Some(path) = checkpoint {
        let (model, _) = load_checkpoint(path).stage("checkpoint")?;
        return Ok((model, None));
    }
    let seeds = cfg.seeds();
    let mut mcfg = cfg.model.clone();
    mcfg.seed = seeds.model;
    let mut model = DecoderModel::init(&mcfg).stage("model")?;
    check_vocab(&model)?;
    let report = pretrain(&mut model, &corpus.train, &cfg.pretrain, seeds.pretrain).stage("pretrain")?;
    log::info!(
        "pretrain: loss {:.4} -> {:.4}, final grad norm {:.4}",
        report.initial_loss,
        report.final_loss,
        report.final_grad_norm
    );
    Ok((model, Some(report)))
}

fn check_vocab(model: &DecoderModel) -> Result<()> {
    if model.config.vocab_size < 256 {
        return Err(Error::Config(format!(
            "byte-level corpora need vocab_size >= 256, got {}",
            model.config.vocab_size
        )))
        .stage("model");
    }
    Ok(())
}

/// Groups, accumulated gradients and importance scores of one model.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub groups: Vec<DependencyGroup>,
    pub acc: GradAccumulator,
    pub table: ImportanceTable,
}

pub fn estimate(cfg: &RunConfig, model: &DecoderModel, corpus: &Corpus) -> Result<Estimate> {
    let groups = discover_groups(model).stage("grouping")?;
    let len = (model.config.max_seq + 1).min(corpus.estimation.len());
    let samples = evenly_spaced_windows(&corpus.estimation, cfg.samples, len).stage("estimation")?;
    let acc = accumulate(model, &samples).stage("estimation")?;
    let table = ImportanceTable::estimate(&acc, &groups, cfg.coarse_unit).stage("estimation")?;
    Ok(Estimate { groups, acc, table })
}

pub fn projections(cfg: &RunConfig) -> Result<FusionProjections> {
    init_projections(FEATURE_DIM, FEATURE_DIM, cfg.fusion_dim, cfg.seeds().projections).stage("fusion")
}

/// Fusion and planning for one method.
pub fn plan_for(
    cfg: &RunConfig,
    method: Method,
    est: &Estimate,
    proj: &FusionProjections,
) -> Result<(FusionOutcome, PruningPlan)> {
    let protected = cfg.protected();
    let fusion = fuse_groups(&est.acc, &est.groups, &est.table, proj, cfg.fusion_mode(method), &protected)
        .stage("fusion")?;
    let opts = PlanOptions {
        target_ratio: cfg.target_ratio,
        protected_layers: protected,
        uniform_per_layer: cfg.uniform_per_layer,
    };
    let plan = make_plan(&fusion.group_scores, &est.groups, &opts).stage("planning")?;
    Ok((fusion, plan))
}

/// Output of the prune stage.
#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub dense: DecoderModel,
    pub pruned: DecoderModel,
    pub plan: PruningPlan,
    pub mask: Mask,
    pub fusion: FusionOutcome,
    pub dense_report: EvalReport,
    pub pruned_report: EvalReport,
}

pub fn prune_model(cfg: &RunConfig, model: DecoderModel, corpus: &Corpus, proj: &FusionProjections) -> Result<PruneOutcome> {
    cfg.validate().stage("config")?;
    check_vocab(&model)?;
    let dense_alloc = allocation_report(&Mask::keep_all(&model), &model).stage("evaluation")?;
    let dense_report = EvalReport::evaluate("dense", &model, &corpus.eval, dense_alloc).stage("evaluation")?;
    let est = estimate(cfg, &model, corpus)?;
    let (fusion, plan) = plan_for(cfg, cfg.method, &est, proj)?;
    let (pruned, mask) = apply(&model, &plan).stage("pruning")?;
    let alloc = allocation_report(&mask, &pruned).stage("pruning")?;
    let mut pruned_report = EvalReport::evaluate("pruned", &pruned, &corpus.eval, alloc).stage("evaluation")?;
    pruned_report.fusion_seconds = fusion.resources.iter().map(|(_, _, u)| u.seconds).sum();
    pruned_report.fusion_mem_bytes = fusion.resources.iter().map(|(_, _, u)| u.mem_bytes).max().unwrap_or(0);
    Ok(PruneOutcome {
        dense: model,
        pruned,
        plan,
        mask,
        fusion,
        dense_report,
        pruned_report,
    })
}

/// LoRA recovery of a pruned model followed by evaluation.
pub fn recover(cfg: &RunConfig, pruned: &DecoderModel, mask: &Mask, corpus: &Corpus) -> Result<(DecoderModel, TrainReport, EvalReport)> {
    let mut model = pruned.clone();
    let report = lora_finetune(&mut model, &corpus.train, &cfg.lora, cfg.seeds().lora).stage("finetune")?;
    let alloc = allocation_report(mask, &model).stage("evaluation")?;
    let eval = EvalReport::evaluate("pruned+lora", &model, &corpus.eval, alloc).stage("evaluation")?;
    Ok((model, report, eval))
}

/// Everything a full run produces.
#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub dense: EvalReport,
    pub pruned: EvalReport,
    pub recovered: EvalReport,
    pub pretrain: Option<TrainReport>,
    pub finetune: TrainReport,
    pub plan: PruningPlan,
    pub mask: Mask,
    pub fusion: FusionOutcome,
    pub projections: FusionProjections,
    pub pruned_model: DecoderModel,
    pub recovered_model: DecoderModel,
}

#[derive(Serialize, Deserialize)]
struct ReportFile<'a> {
    header: ArtifactHeader,
    reports: Vec<std::borrow::Cow<'a, EvalReport>>,
}

pub fn write_reports(path: &Path, header: &ArtifactHeader, reports: &[&EvalReport]) -> Result<()> {
    let file = ReportFile {
        header: header.clone(),
        reports: reports.iter().map(|r| std::borrow::Cow::Borrowed(*r)).collect(),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<(ArtifactHeader, Vec<EvalReport>)> {
    let f: ReportFile<'static> = serde_json::from_slice(&std::fs::read(path)?)?;
    Ok((f.header, f.reports.into_iter().map(|c| c.into_owned()).collect()))
}

/// Writes mask, allocation and fusion reports of a prune stage into `out`.
pub fn write_prune_artifacts(out: &Path, header: &ArtifactHeader, p: &PruneOutcome) -> Result<()> {
    std::fs::create_dir_all(out)?;
    p.mask.save(&out.join("mask.json"), header)?;
    write_allocation_csv(&out.join("allocation.csv"), header, &p.pruned_report.allocation)?;
    write_fusion_csv(&out.join("fusion.csv"), header, &p.fusion.records)?;
    save_checkpoint(&p.pruned, &out.join("pruned.json"), header.clone())?;
    Ok(())
}

/// Full run; artifacts go to `out` when given.
pub fn run_pipeline(cfg: &RunConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<PipelineResult> {
    cfg.validate().stage("config")?;
    let corpus = load_corpus(cfg)?;
    let (model, pretrain) = prepare_model(cfg, &corpus, checkpoint)?;
    let proj = projections(cfg)?;
    let p = prune_model(cfg, model, &corpus, &proj)?;
    let (recovered_model, finetune, mut recovered) = recover(cfg, &p.pruned, &p.mask, &corpus)?;
    recovered.fusion_seconds = p.pruned_report.fusion_seconds;
    recovered.fusion_mem_bytes = p.pruned_report.fusion_mem_bytes;
    if let Some(out) = out {
        let h = header(cfg);
        write_prune_artifacts(out, &h, &p).stage("artifacts")?;
        save_checkpoint(&recovered_model, &out.join("finetuned.json"), h.clone()).stage("artifacts")?;
        write_reports(&out.join("eval.json"), &h, &[&p.dense_report, &p.pruned_report, &recovered])
            .stage("artifacts")?;
    }
    Ok(PipelineResult {
        dense: p.dense_report,
        pruned: p.pruned_report,
        recovered,
        pretrain,
        finetune,
        plan: p.plan,
        mask: p.mask,
        fusion: p.fusion,
        projections: proj,
        pruned_model: p.pruned,
        recovered_model,
    })
}

/// Retained block parameters per layer under each granularity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub layer: usize,
    pub fine: usize,
    pub coarse: usize,
    pub hybrid: usize,
}

/// Prunes the same model with fine, coarse and hybrid scores.
pub fn compare(cfg: &RunConfig, model: &DecoderModel, corpus: &Corpus) -> Result<Vec<CompareRow>> {
    cfg.validate().stage("config")?;
    let est = estimate(cfg, model, corpus)?;
    let proj = projections(cfg)?;
    let mut retained: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for method in [Method::Fine, Method::Coarse, Method::Hybrid] {
        let (_, plan) = plan_for(cfg, method, &est, &proj)?;
        let (pruned, mask) = apply(model, &plan).stage("pruning")?;
        let alloc = allocation_report(&mask, &pruned).stage("pruning")?;
        retained.insert(method.name(), alloc.iter().map(|a| a.retained_params).collect());
    }
    Ok((0..model.blocks.len())
        .map(|l| CompareRow {
            layer: l,
            fine: retained["fine"][l],
            coarse: retained["coarse"][l],
            hybrid: retained["hybrid"][l],
        })
        .collect())
}

pub fn write_compare_csv(path: &Path, header: &ArtifactHeader, rows: &[CompareRow]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{}", header.csv_comment())?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["layer", "fine", "coarse", "hybrid"]).map_err(crate::fusion::csv_err)?;
    for r in rows {
        w.write_record([r.layer.to_string(), r.fine.to_string(), r.coarse.to_string(), r.hybrid.to_string()])
            .map_err(crate::fusion::csv_err)?;
    }
    w.flush()?;
    Ok(())
}
