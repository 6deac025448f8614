//! Per-stream sample order.
//!
//! An epoch is defined by the longest stream. A stream whose batch count
//! equals the epoch length is "aligned": it is reshuffled at every epoch
//! start and visits each sample exactly once (the final batch may be short).
//! Every other stream cycles through successive shuffled permutations and
//! always yields full batches.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamCursor {
    pub len: usize,
    pub batch: usize,
    pub aligned: bool,
    perm: Vec<usize>,
    pos: usize,
    rng: Rng,
}

/// `ceil(len / batch)`.
pub fn batches_per_pass(len: usize, batch: usize) -> usize {
    len.div_ceil(batch)
}

impl StreamCursor {
    pub fn new(len: usize, batch: usize, steps_per_epoch: usize, rng: Rng) -> Self {
        assert!(len > 0 && batch > 0, "stream cursor over an empty stream");
        StreamCursor {
            len,
            batch,
            aligned: batches_per_pass(len, batch) == steps_per_epoch,
            perm: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn reshuffle(&mut self) {
        self.perm = (0..self.len).collect();
        self.perm.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn start_epoch(&mut self) {
        if self.aligned || self.perm.is_empty() {
            self.reshuffle();
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.perm.is_empty() {
            self.reshuffle();
        }
        if self.aligned {
            let end = (self.pos + self.batch).min(self.len);
            let out = self.perm[self.pos..end].to_vec();
            self.pos = end;
            return out;
        }
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.len {
                self.reshuffle();
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn aligned_stream_covers_each_sample_once_per_epoch() {
        let mut c = StreamCursor::new(10, 4, 3, rng::stream(0, 1));
        for _ in 0..3 {
            c.start_epoch();
            let mut seen: Vec<usize> = (0..3).flat_map(|_| c.next_batch()).collect();
            seen.sort();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn short_stream_cycles_with_full_batches() {
        let mut c = StreamCursor::new(3, 2, 5, rng::stream(0, 1));
        c.start_epoch();
        let all: Vec<usize> = (0..6).flat_map(|_| c.next_batch()).collect();
        assert_eq!(all.len(), 12);
        for chunk in all.chunks(3) {
            let mut s = chunk.to_vec();
            s.sort();
            assert_eq!(s, vec![0, 1, 2]);
        }
    }
}
