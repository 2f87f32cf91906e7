//! Character vocabularies, corpus splits, input corruption, batching and a
//! synthetic linear-regression generator.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::flow::TokenSample;
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataError {
    #[error("text is empty")]
    EmptyText,
    #[error("character {ch:?} at position {pos} is not in the vocabulary")]
    UnknownChar { ch: char, pos: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    UnknownId { id: usize, size: usize },
    #[error("split would leave an empty part ({train} train, {test} test tokens)")]
    EmptySplit { train: usize, test: usize },
    #[error("sequence of {len} tokens is too short for context {n_ctx}")]
    TooShort { len: usize, n_ctx: usize },
    #[error("corruption rate {0} outside [0, 1]")]
    BadRate(String),
}

/// Sorted unique characters; ids are positions in that order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Vocab {
    pub fn from_chars(mut chars: Vec<char>) -> Result<Self, DataError> {
        chars.sort_unstable();
        chars.dedup();
        if chars.is_empty() {
            return Err(DataError::EmptyText);
        }
        let index = chars.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        Ok(Self { chars, index })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }

    /// The vocabulary as one string, in id order.
    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }
}

pub fn build_vocab(text: &str) -> Result<Vocab, DataError> {
    if text.is_empty() {
        return Err(DataError::EmptyText);
    }
    Vocab::from_chars(text.chars().collect())
}

pub fn encode(text: &str, vocab: &Vocab) -> Result<Vec<usize>, DataError> {
    text.chars()
        .enumerate()
        .map(|(pos, ch)| vocab.id(ch).ok_or(DataError::UnknownChar { ch, pos }))
        .collect()
}

pub fn decode(ids: &[usize], vocab: &Vocab) -> Result<String, DataError> {
    ids.iter()
        .map(|&id| {
            vocab.char(id).ok_or(DataError::UnknownId {
                id,
                size: vocab.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub const DEFAULT_TEST_FRACTION: f64 = 0.1;

/// Contiguous split; the final `test_fraction` of the ids is the test part.
pub fn split_corpus(ids: &[usize], test_fraction: f64) -> Result<CorpusSplit, DataError> {
    let n_test = crate::math::round(ids.len() as f64 * test_fraction) as usize;
    let n_train = ids.len().saturating_sub(n_test);
    if n_train == 0 || n_test == 0 {
        return Err(DataError::EmptySplit {
            train: n_train,
            test: n_test,
        });
    }
    Ok(CorpusSplit {
        train: ids[..n_train].to_vec(),
        test: ids[n_train..].to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub rate: f64,
    pub seed: u64,
}

/// Replaces each position with probability `rate` by a uniform draw from
/// the whole vocabulary, which may equal the original symbol.
///
/// Every position consumes the same two draws whatever the rate, so for a
/// fixed seed the corrupted positions at a lower rate are a subset of those
/// at a higher rate.
pub fn corrupt_replace(ids: &[usize], vocab_size: usize, spec: CorruptionSpec) -> Result<Vec<usize>, DataError> {
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(DataError::BadRate(alloc::format!("{}", spec.rate)));
    }
    let mut rng = RngState::new(spec.seed);
    Ok(ids
        .iter()
        .map(|&id| {
            let u = rng.uniform();
            let replacement = rng.below(vocab_size);
            if u < spec.rate {
                replacement
            } else {
                id
            }
        })
        .collect())
}

fn window(ids: &[usize], start: usize, n_ctx: usize) -> TokenSample {
    TokenSample {
        input: ids[start..start + n_ctx].to_vec(),
        target: ids[start + 1..start + n_ctx + 1].to_vec(),
    }
}

/// Random contiguous windows with next-token targets.
pub fn sample_batch(ids: &[usize], n_ctx: usize, batch_size: usize, rng: &mut RngState) -> Result<Vec<TokenSample>, DataError> {
    if ids.len() <= n_ctx {
        return Err(DataError::TooShort { len: ids.len(), n_ctx });
    }
    let starts = ids.len() - n_ctx;
    Ok((0..batch_size)
        .map(|_| window(ids, rng.below(starts), n_ctx))
        .collect())
}

/// `count` evenly spaced windows; the first starts at 0 and the last ends
/// at the final token.
pub fn eval_windows(ids: &[usize], n_ctx: usize, count: usize) -> Result<Vec<TokenSample>, DataError> {
    if ids.len() <= n_ctx {
        return Err(DataError::TooShort { len: ids.len(), n_ctx });
    }
    let last = ids.len() - n_ctx - 1;
    Ok((0..count)
        .map(|i| {
            let start = if count <= 1 { 0 } else { i * last / (count - 1) };
            window(ids, start, n_ctx)
        })
        .collect())
}

/// Windows whose inputs come from `inputs` and targets from `targets`,
/// at the same positions as [`eval_windows`].
pub fn eval_windows_with_inputs(
    inputs: &[usize],
    targets: &[usize],
    n_ctx: usize,
    count: usize,
) -> Result<Vec<TokenSample>, DataError> {
    let clean = eval_windows(targets, n_ctx, count)?;
    let last = targets.len() - n_ctx - 1;
    Ok(clean
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let start = if count <= 1 { 0 } else { i * last / (count - 1) };
            TokenSample {
                input: inputs[start..start + n_ctx].to_vec(),
                target: w.target,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundTruth {
    /// `A* = I` and `ψ* = I`, so `y = vec(X₀)`.
    Identity,
    /// Gaussian `A*` (`d × d`) and `ψ*` (`out_dim × dn`), entries scaled by
    /// the inverse square root of the fan-in.
    Random { out_dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRegression {
    pub a_star: Tensor,
    pub psi_star: Tensor,
    pub pairs: Vec<(Tensor, Tensor)>,
}

/// `N` pairs `(X₀, y)` with `X₀ ~ N(0, 1)` entrywise and
/// `y = ψ*·vec(A*·X₀) + noise·ε`.
pub fn synth_regression(
    count: usize,
    d: usize,
    n: usize,
    noise: f64,
    truth: GroundTruth,
    rng: &mut RngState,
) -> SynthRegression {
    assert!(count >= 1, "at least one pair");
    let (a_star, psi_star) = match truth {
        GroundTruth::Identity => (Tensor::identity(d), Tensor::identity(d * n)),
        GroundTruth::Random { out_dim } => (
            Tensor::randn(d, d, 1.0 / crate::math::sqrt(d as f64), rng),
            Tensor::randn(out_dim, d * n, 1.0 / crate::math::sqrt((d * n) as f64), rng),
        ),
    };
    let pairs = (0..count)
        .map(|_| {
            let x0 = Tensor::randn(d, n, 1.0, rng);
            let clean = psi_star
                .matmul(&a_star.matmul(&x0).expect("d x d by d x n").vec_cols())
                .expect("psi matches vec");
            let y = if noise == 0.0 {
                clean
            } else {
                let eps = Tensor::randn(clean.rows(), 1, noise, rng);
                clean.add(&eps).expect("same shape")
            };
            (x0, y)
        })
        .collect();
    SynthRegression {
        a_star,
        psi_star,
        pairs,
    }
}
