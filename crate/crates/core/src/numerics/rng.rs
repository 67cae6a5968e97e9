use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Matrix;
use crate::error::{Error, Result};

/// Caller-owned deterministic generator.
///
/// Backed by ChaCha8, a counter-based stream cipher, so the same seed and
/// call sequence give the same numbers on every platform. Substreams share the
/// seed but use a distinct ChaCha stream id, which lets tokens be routed in
/// parallel without sharing a generator.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `stream` (e.g. a token index).
    pub fn substream(&self, stream: u64) -> RngState {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        // stream 0 is the parent itself
        inner.set_stream(stream.wrapping_add(1));
        RngState {
            seed: self.seed,
            inner,
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    Zeros,
    /// Uniform in `[-1/sqrt(cols), 1/sqrt(cols)]`.
    UniformScaled,
    /// Normal with std `1/sqrt(cols)`, resampled outside two standard
    /// deviations, so entries are bounded by `2/sqrt(cols)`.
    NormalScaled,
}

impl InitScheme {
    /// Largest absolute entry the scheme can produce for a given fan-in.
    pub fn bound(self, cols: usize) -> f64 {
        let scale = 1.0 / (cols.max(1) as f64).sqrt();
        match self {
            InitScheme::Zeros => 0.0,
            InitScheme::UniformScaled => scale,
            InitScheme::NormalScaled => 2.0 * scale,
        }
    }
}

pub fn seeded_init(rows: usize, cols: usize, scheme: InitScheme, rng: &mut RngState) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyShape);
    }
    Ok(fill(rows, cols, scheme, rng))
}

/// Like [`seeded_init`] but allows zero-sized shapes (empty mixers, zero router dims).
pub(crate) fn fill(rows: usize, cols: usize, scheme: InitScheme, rng: &mut RngState) -> Matrix {
    let scale = 1.0 / (cols.max(1) as f64).sqrt();
    match scheme {
        InitScheme::Zeros => Matrix::zeros(rows, cols),
        InitScheme::UniformScaled => Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-scale, scale)),
        InitScheme::NormalScaled => Matrix::from_fn(rows, cols, |_, _| loop {
            let z = rng.normal();
            if z.abs() <= 2.0 {
                break z * scale;
            }
        }),
    }
}
