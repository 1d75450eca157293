//! Question data model, corpus files, vocabulary, batching and the
//! synthetic generator.

pub mod batch;
pub mod io;
pub mod synthetic;
pub mod types;
pub mod vocab;

pub use batch::{batch_iter, Batch};
pub use io::{load_corpus, parse_corpus, save_corpus};
pub use synthetic::{
    count_entropy, generate_synthetic, write_synthetic, EntropyReport, SyntheticCorpus, SyntheticSpec, SyntheticTruth,
};
pub use types::*;
pub use vocab::{build_vocabulary, EncodedOption, EncodedQuestion, EncodedToken, Vocabulary, PAD, UNK};
