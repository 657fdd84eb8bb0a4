//! Toy-model generation, byte tokenizer, prompt corpora and report suites.

mod corpus;
mod report;
mod suites;
pub mod tokenizer;
mod toy;

pub use corpus::{corpus_from_text, toy_corpus};
pub use report::{BenchReport, Flag, Metric, REPORT_SCHEMA};
pub use suites::{run_suite, table7_regimes, SuiteOptions, UseCase, SUITES};
pub use tokenizer::{byte_tokenize, detokenize, detokenize_lossy, EOS, PAD, VOCAB_SIZE};
pub use toy::{bundle_digests, load_adapters, load_toy, make_toy_model, save_toy, ToyArtifacts, ToySpec};
