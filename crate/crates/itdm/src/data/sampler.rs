//! The dual mini-batch sampler: per step it yields the index pair (S1, S2).
//! S1 walks an epoch permutation and drives the classification loss; S2 comes
//! from an independently shuffled stream and only feeds the matching loss.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct DualBatchSampler {
    n: usize,
    batch_size: usize,
    rng: Rng,
    perm1: Vec<usize>,
    pos1: usize,
    perm2: Vec<usize>,
    pos2: usize,
}

impl DualBatchSampler {
    pub fn new(n: usize, batch_size: usize, rng: Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput("sampler dataset"));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(DualBatchSampler {
            n,
            batch_size,
            rng,
            perm1: Vec::new(),
            pos1: 0,
            perm2: Vec::new(),
            pos2: 0,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Reshuffle stream 1 for a fresh epoch. Stream 2 keeps running; it
    /// reshuffles on its own whenever it runs out.
    pub fn start_epoch(&mut self) {
        self.perm1 = (0..self.n).collect();
        self.rng.shuffle(&mut self.perm1);
        self.pos1 = 0;
    }

    fn next_from_stream2(&mut self) -> usize {
        if self.pos2 >= self.perm2.len() {
            self.perm2 = (0..self.n).collect();
            self.rng.shuffle(&mut self.perm2);
            self.pos2 = 0;
        }
        let idx = self.perm2[self.pos2];
        self.pos2 += 1;
        idx
    }

    /// Next (S1, S2) index pair, or `None` when the epoch is exhausted.
    /// The final S1 of an epoch may be short; S2 always matches S1's length.
    pub fn next_pair(&mut self) -> Option<(Vec<usize>, Vec<usize>)> {
        if self.pos1 >= self.perm1.len() {
            return None;
        }
        let end = (self.pos1 + self.batch_size).min(self.perm1.len());
        let s1 = self.perm1[self.pos1..end].to_vec();
        self.pos1 = end;
        let s2 = (0..s1.len()).map(|_| self.next_from_stream2()).collect();
        Some((s1, s2))
    }
}
