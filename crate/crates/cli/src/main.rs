//! `hyprune`: command-line front end for the pruning toolkit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybrid_prune::artifact::ArtifactHeader;
use hybrid_prune::harness::pipeline::{
    header, load_corpus, prepare_model, projections, prune_model, recover, write_compare_csv, write_prune_artifacts,
    write_reports,
};
use hybrid_prune::harness::{compare, parse_layer_spec, run_pipeline, EvalReport, Method, RunConfig};
use hybrid_prune::model::{load_checkpoint, save_checkpoint};
use hybrid_prune::pruning::{allocation_report, write_allocation_csv, Mask};
use hybrid_prune::resources::TrackingAllocator;
use hybrid_prune::{Error, Result, StageExt};
use serde::Serialize;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "hyprune", version, about = "Hybrid-grained structured pruning of a toy decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model and save a checkpoint.
    Train(Common),
    /// Score, plan and physically prune a model.
    Prune(Common),
    /// LoRA recovery of a (pruned) checkpoint, merged on completion.
    Finetune(Common),
    /// Evaluate a checkpoint.
    Eval(Common),
    /// Prune with fine, coarse and hybrid scores and compare allocations.
    Compare(Common),
    /// Full pipeline: prune, recover, and report all three stages.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fraction of prunable parameters to remove.
    #[arg(long)]
    ratio: Option<f64>,
    /// Calibration samples for gradient accumulation.
    #[arg(long)]
    samples: Option<usize>,
    /// fine | coarse | hybrid | fixed-alpha | literal-attention
    #[arg(long)]
    method: Option<String>,
    /// Blend factor for the fixed-alpha method.
    #[arg(long)]
    fixed_alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Protected layers: `default`, `none`, or a list such as `0,3-5`.
    #[arg(long)]
    layers: Option<String>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Start from this checkpoint instead of pretraining.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Mask file from `prune`, used for allocation rows after `finetune`.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Text corpus; a synthetic one is generated when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

impl Common {
    /// Config file, then the seed environment variable, then flags.
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        }
        .with_env_seed()?;
        if let Some(r) = self.ratio {
            cfg.target_ratio = r;
        }
        if let Some(n) = self.samples {
            cfg.samples = n;
        }
        if let Some(m) = &self.method {
            cfg.method = m.parse::<Method>()?;
        }
        if let Some(a) = self.fixed_alpha {
            cfg.fixed_alpha = Some(a);
        }
        if cfg.method == Method::FixedAlpha && cfg.fixed_alpha.is_none() && self.method.is_some() {
            cfg.fixed_alpha = Some(0.5);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(spec) = &self.layers {
            cfg.protected_layers = parse_layer_spec(spec)?;
        }
        if let Some(c) = &self.corpus {
            cfg.corpus = Some(c.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    header: &'a ArtifactHeader,
    #[serde(flatten)]
    body: &'a T,
}

fn write_json<T: Serialize>(path: &Path, header: &ArtifactHeader, body: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(&Stamped { header, body })?)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    let (common, kind) = match &command {
        Command::Train(c) => (c, "train"),
        Command::Prune(c) => (c, "prune"),
        Command::Finetune(c) => (c, "finetune"),
        Command::Eval(c) => (c, "eval"),
        Command::Compare(c) => (c, "compare"),
        Command::Report(c) => (c, "report"),
    };
    let cfg = common.run_config().stage("config")?;
    let out = common.out.as_path();
    std::fs::create_dir_all(out).map_err(Error::from).stage("artifacts")?;
    let h = header(&cfg);
    let checkpoint = common.checkpoint.as_deref();
    match kind {
        "train" => {
            let corpus = load_corpus(&cfg)?;
            let (model, report) = prepare_model(&cfg, &corpus, None)?;
            save_checkpoint(&model, &out.join("model.json"), h.clone()).stage("artifacts")?;
            write_json(&out.join("train.json"), &h, &report).stage("artifacts")?;
            let eval = EvalReport::evaluate("dense", &model, &corpus.eval, allocation_report(&Mask::keep_all(&model), &model)?)
                .stage("evaluation")?;
            write_reports(&out.join("eval.json"), &h, &[&eval]).stage("artifacts")?;
            println!("trained: eval perplexity {:.4}", eval.perplexity);
        }
        "prune" => {
            let corpus = load_corpus(&cfg)?;
            let (model, _) = prepare_model(&cfg, &corpus, checkpoint)?;
            let proj = projections(&cfg)?;
            let p = prune_model(&cfg, model, &corpus, &proj)?;
            write_prune_artifacts(out, &h, &p).stage("artifacts")?;
            write_reports(&out.join("eval.json"), &h, &[&p.dense_report, &p.pruned_report]).stage("artifacts")?;
            println!(
                "pruned {} groups: achieved ratio {:.4} (whole model {:.4}), perplexity {:.4} -> {:.4}",
                p.plan.removals.len(),
                p.plan.achieved_ratio,
                p.mask.whole_model_ratio,
                p.dense_report.perplexity,
                p.pruned_report.perplexity
            );
        }
        "finetune" => {
            let path = checkpoint
                .ok_or_else(|| Error::Config("finetune needs --checkpoint".into()))
                .stage("config")?;
            let (model, _) = load_checkpoint(path).stage("checkpoint")?;
            let corpus = load_corpus(&cfg)?;
            let mask = match &common.mask {
                Some(m) => Mask::load(m).stage("checkpoint")?.0,
                None => Mask::keep_all(&model),
            };
            let before = EvalReport::evaluate("pruned", &model, &corpus.eval, allocation_report(&mask, &model)?)
                .stage("evaluation")?;
            let (tuned, report, eval) = recover(&cfg, &model, &mask, &corpus)?;
            save_checkpoint(&tuned, &out.join("finetuned.json"), h.clone()).stage("artifacts")?;
            write_json(&out.join("finetune.json"), &h, &report).stage("artifacts")?;
            write_reports(&out.join("eval.json"), &h, &[&before, &eval]).stage("artifacts")?;
            println!("finetuned: perplexity {:.4} -> {:.4}", before.perplexity, eval.perplexity);
        }
        "eval" => {
            let path = checkpoint
                .ok_or_else(|| Error::Config("eval needs --checkpoint".into()))
                .stage("config")?;
            let (model, _) = load_checkpoint(path).stage("checkpoint")?;
            let corpus = load_corpus(&cfg)?;
            let mask = match &common.mask {
                Some(m) => Mask::load(m).stage("checkpoint")?.0,
                None => Mask::keep_all(&model),
            };
            let alloc = allocation_report(&mask, &model).stage("evaluation")?;
            let eval = EvalReport::evaluate("checkpoint", &model, &corpus.eval, alloc.clone()).stage("evaluation")?;
            write_reports(&out.join("eval.json"), &h, &[&eval]).stage("artifacts")?;
            write_allocation_csv(&out.join("allocation.csv"), &h, &alloc).stage("artifacts")?;
            println!("perplexity {:.4}, {} parameters", eval.perplexity, eval.param_count);
        }
        "compare" => {
            let corpus = load_corpus(&cfg)?;
            let (model, _) = prepare_model(&cfg, &corpus, checkpoint)?;
            let rows = compare(&cfg, &model, &corpus)?;
            write_compare_csv(&out.join("compare.csv"), &h, &rows).stage("artifacts")?;
            println!("layer,fine,coarse,hybrid");
            for r in rows {
                println!("{},{},{},{}", r.layer, r.fine, r.coarse, r.hybrid);
            }
        }
        _ => {
            let r = run_pipeline(&cfg, checkpoint, Some(out))?;
            for e in [&r.dense, &r.pruned, &r.recovered] {
                println!(
                    "{:<12} ppl {:>9.4}  params {:>8}  MACs/token {:>8}",
                    e.label, e.perplexity, e.param_count, e.mac_estimate
                );
            }
            println!(
                "fusion: {:.3e}s, peak {} bytes",
                r.pruned.fusion_seconds, r.pruned.fusion_mem_bytes
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
