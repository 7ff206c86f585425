//! Corpus ingestion, premise construction, annotation-candidate sampling,
//! corpus revision with weak labels, many-to-many statistics and the
//! synthetic planted-cluster corpus.

mod candidates;
mod corpus;
mod examples;
mod revise;
mod stats;
mod synth;

pub use candidates::{generate_candidates, CandidateConfig, CandidatePair, CandidateSource};
pub use corpus::{load_corpus, save_corpus, ImageGeometry, ManifestRecord, RetrievalCorpus, Split, WeakEdge};
pub use examples::{entailment_examples, ExampleSpec};
pub use revise::{revise_corpus, AuditRecord, ModelClassifier, PairClassifier};
pub use stats::{corpus_stats, CorpusStats};
pub use synth::{synth_generate, SyntheticOracle, SyntheticSpec};
