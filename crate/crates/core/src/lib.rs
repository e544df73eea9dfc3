pub mod corpus;
pub mod error;
pub mod eval;
pub mod generate;
pub mod model;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use tokenizer::{train_bpe, Specials, Vocab, DEFAULT_SPECIALS};
