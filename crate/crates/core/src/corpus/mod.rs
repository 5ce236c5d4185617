//! Interaction data pipeline: ingestion, triple-sequence construction,
//! leave-one-out splits, negative sampling, batching, synthetic data, and
//! the on-disk prepared-corpus format.

mod batch;
mod build;
mod records;
mod sample;
mod store;
mod synth;

pub use batch::{pad_left, unpad, Batch, PaddedSeq};
pub use build::{
    build_triple_sequences, leave_one_out_split, BuildOptions, BuildStats, Built, LooSplit,
    MixedEvent, SeqEvent, TripleSequence, Vocabulary,
};
pub use records::{parse_domain_file, parse_interactions, Domain, InteractionRecord, Parsed};
pub use sample::sample_negatives;
pub use store::{load_corpus, prepare_corpus, save_corpus, CorpusManifest, PreparedCorpus};
pub use synth::{generate_synthetic, SynthConfig};
