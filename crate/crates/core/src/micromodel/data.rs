//! Seeded synthetic classification tasks.
//!
//! `pretrain_majority` (4 classes): the vocabulary is cut into four
//! contiguous subsets of `vocab/4` tokens. For class `c`, each token comes
//! from subset `c` with probability [`MAJORITY_P`] and is uniform over the
//! vocabulary otherwise; draws whose subset counts do not have `c` as their
//! unique maximum are rejected. The label is the subset with the highest count.
//!
//! `finetune_bigram` (2 classes): tokens are uniform over the vocabulary.
//! Class 1 plants one designated bigram (chosen uniformly from [`BIGRAMS`])
//! at a uniform position; class 0 draws are rejected until they contain no
//! designated bigram. The label is the presence of a designated ordered
//! bigram, so single tokens carry little signal and order matters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::numkit::RngStream;

pub const MAJORITY_P: f64 = 0.4;
pub const BIGRAMS: [(usize, usize); 3] = [(3, 17), (9, 26), (21, 5)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PretrainMajority,
    FinetuneBigram,
}

impl Task {
    pub fn n_classes(self) -> usize {
        match self {
            Task::PretrainMajority => 4,
            Task::FinetuneBigram => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub task: Task,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Probability of class 1 for the bigram task; ignored by the 4-class task,
    /// whose classes are uniform.
    pub balance: f64,
    pub seq_len: usize,
    pub vocab: usize,
}

impl SynthTaskSpec {
    pub fn new(task: Task, seed: u64, n_train: usize, n_val: usize, n_test: usize) -> Self {
        Self {
            task,
            seed,
            n_train,
            n_val,
            n_test,
            balance: 0.5,
            seq_len: 16,
            vocab: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(LabError::config("seq_len", "must be >= 2"));
        }
        if self.vocab < 4 || self.vocab % 4 != 0 {
            return Err(LabError::config("vocab", "must be a positive multiple of 4"));
        }
        if self.task == Task::FinetuneBigram {
            let max_tok = BIGRAMS.iter().map(|&(a, b)| a.max(b)).max().unwrap_or(0);
            if max_tok >= self.vocab {
                return Err(LabError::config("vocab", format!("must exceed {max_tok}")));
            }
        }
        if !(0.0..=1.0).contains(&self.balance) {
            return Err(LabError::config("balance", "must lie in [0, 1]"));
        }
        if self.n_train == 0 {
            return Err(LabError::config("n_train", "must be >= 1"));
        }
        Ok(())
    }

    /// Short content hash used to key cache files.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(bytes)[..8])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Split {
        Split {
            tokens: idx.iter().map(|&i| self.tokens[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: SynthTaskSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

pub fn majority_label(seq: &[usize], vocab: usize) -> usize {
    let counts = subset_counts(seq, vocab);
    (0..4).fold(0, |best, c| if counts[c] > counts[best] { c } else { best })
}

fn subset_counts(seq: &[usize], vocab: usize) -> [usize; 4] {
    let width = vocab / 4;
    let mut counts = [0; 4];
    for &t in seq {
        counts[(t / width).min(3)] += 1;
    }
    counts
}

pub fn has_bigram(seq: &[usize]) -> bool {
    seq.windows(2).any(|w| BIGRAMS.contains(&(w[0], w[1])))
}

fn majority_example(rng: &mut RngStream, c: usize, spec: &SynthTaskSpec) -> Vec<usize> {
    let width = spec.vocab / 4;
    loop {
        let seq: Vec<usize> = (0..spec.seq_len)
            .map(|_| {
                if rng.bernoulli(MAJORITY_P) {
                    c * width + rng.below(width)
                } else {
                    rng.below(spec.vocab)
                }
            })
            .collect();
        let counts = subset_counts(&seq, spec.vocab);
        if (0..4).all(|o| o == c || counts[o] < counts[c]) {
            return seq;
        }
    }
}

fn bigram_example(rng: &mut RngStream, positive: bool, spec: &SynthTaskSpec) -> Vec<usize> {
    loop {
        let mut seq: Vec<usize> = (0..spec.seq_len).map(|_| rng.below(spec.vocab)).collect();
        if positive {
            let (a, b) = BIGRAMS[rng.below(BIGRAMS.len())];
            let at = rng.below(spec.seq_len - 1);
            seq[at] = a;
            seq[at + 1] = b;
            return seq;
        }
        if !has_bigram(&seq) {
            return seq;
        }
    }
}

fn gen_split(spec: &SynthTaskSpec, n: usize, stream: u64) -> Split {
    let mut rng = RngStream::with_stream(spec.seed, stream);
    let mut split = Split::default();
    for _ in 0..n {
        let (seq, label) = match spec.task {
            Task::PretrainMajority => {
                let c = rng.below(4);
                (majority_example(&mut rng, c, spec), c)
            }
            Task::FinetuneBigram => {
                let pos = rng.bernoulli(spec.balance);
                (bigram_example(&mut rng, pos, spec), pos as usize)
            }
        };
        split.tokens.push(seq);
        split.labels.push(label);
    }
    split
}

/// Pure function of the spec: train, val and test use streams 0, 1, 2.
pub fn gen_dataset(spec: &SynthTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        spec: spec.clone(),
        train: gen_split(spec, spec.n_train, 0),
        val: gen_split(spec, spec.n_val, 1),
        test: gen_split(spec, spec.n_test, 2),
    })
}

pub fn cache_path(dir: &Path, spec: &SynthTaskSpec) -> PathBuf {
    dir.join(format!("dataset-{}.json", spec.hash()))
}

/// Loads `dataset-<hash>.json` from `dir`, generating and writing it on a miss.
pub fn load_or_generate(spec: &SynthTaskSpec, dir: &Path) -> Result<Dataset> {
    let path = cache_path(dir, spec);
    if let Ok(text) = std::fs::read_to_string(&path) {
        let ds: Dataset = serde_json::from_str(&text)?;
        if &ds.spec == spec {
            return Ok(ds);
        }
    }
    let ds = gen_dataset(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    std::fs::write(&path, serde_json::to_string(&ds)?).map_err(|e| LabError::io(&path, e))?;
    Ok(ds)
}
