//! Reproducible random draws for masking.
//!
//! The generator is SplitMix64: state advances by the golden-ratio increment
//! `0x9E3779B97F4A7C15` and each output is the state passed through the
//! finalizer `z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9; z = (z ^ (z >> 27)) *
//! 0x94D049BB133111EB; z ^ (z >> 31)`.
//!
//! Bounded draws use Lemire's multiply-shift with rejection, so a draw in
//! `[0, n)` is unbiased and consumes one or more 64-bit outputs. Sampling `k`
//! of `n` without replacement is a partial Fisher-Yates shuffle over `0..n`:
//! step `i` draws `j = i + below(n - i)` and swaps positions `i` and `j`.
//! Any implementation following these three rules reproduces the same draws.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRng {
    seed: u64,
    state: u64,
    draws: u64,
}

impl MaskRng {
    pub fn new(seed: u64) -> Self {
        MaskRng {
            seed,
            state: seed,
            draws: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit outputs consumed so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let mut m = (self.next_u64() as u128) * (n as u128);
        let mut low = m as u64;
        if low < n {
            let threshold = n.wrapping_neg() % n;
            while low < threshold {
                m = (self.next_u64() as u128) * (n as u128);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }

    /// A full-length partial Fisher-Yates permutation of `0..n`, lazily drawn.
    ///
    /// Yields the elements in draw order; stopping early consumes only the
    /// draws that were needed.
    pub fn draw_without_replacement(&mut self, n: usize) -> WithoutReplacement<'_> {
        WithoutReplacement {
            rng: self,
            pool: (0..n).collect(),
            next: 0,
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample(&mut self, n: usize, k: usize) -> Vec<usize> {
        self.draw_without_replacement(n).take(k).collect()
    }
}

pub struct WithoutReplacement<'a> {
    rng: &'a mut MaskRng,
    pool: Vec<usize>,
    next: usize,
}

impl Iterator for WithoutReplacement<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let n = self.pool.len();
        let i = self.next;
        if i >= n {
            return None;
        }
        let j = i + self.rng.below((n - i) as u64) as usize;
        self.pool.swap(i, j);
        self.next += 1;
        Some(self.pool[i])
    }
}
