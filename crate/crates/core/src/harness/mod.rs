//! Corpus handling, training loops, evaluation and the end-to-end pipeline.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod optim;
pub mod pipeline;
pub mod train;

pub use config::{parse_layer_spec, Method, RunConfig, SEED_ENV};
pub use corpus::{ingest_corpus, synthetic_text, Corpus, MIN_CORPUS_BYTES};
pub use eval::{mac_estimate, perplexity, EvalReport};
pub use pipeline::{compare, run_pipeline, CompareRow, PipelineResult};
pub use train::{lora_finetune, pretrain, LoraConfig, PretrainConfig, TrainReport};
