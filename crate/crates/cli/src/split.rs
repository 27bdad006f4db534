//! Deterministic 80/10/10 corpus split by utterance-index hash.
//!
//! Bucket of utterance `i` is `splitmix64(i) % 10`: 0-7 train, 8
//! validation, 9 test. The assignment depends only on the index, so the
//! same corpus always splits the same way.

use clap::ValueEnum;
use distill_core::rng::splitmix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }
}

pub fn split_corpus(n_utterances: usize) -> Splits {
    let mut splits = Splits {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for i in 0..n_utterances {
        match splitmix64(i as u64) % 10 {
            0..=7 => splits.train.push(i),
            8 => splits.validation.push(i),
            _ => splits.test.push(i),
        }
    }
    splits
}
