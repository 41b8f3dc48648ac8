use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

fn permutation(n: usize, seed: u64, tag: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Domain::Batching, &[tag, epoch]));
    idx
}

/// Shuffled batches covering `0..n` exactly once; the last batch may be short.
pub fn batch_iter(n: usize, b: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if b == 0 || b > n {
        return Err(Error::config("batch_size", format!("batch size {b} outside 1..={n}")));
    }
    Ok(permutation(n, seed, 0, epoch).chunks(b).map(<[usize]>::to_vec).collect())
}

/// Endless stream of full batches: walks one shuffled pass after another,
/// so each pass visits every index once.
#[derive(Clone, Debug)]
pub struct BatchStream {
    n: usize,
    b: usize,
    seed: u64,
    tag: u64,
    pass: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(n: usize, b: usize, seed: u64, tag: u64) -> Result<Self> {
        if b == 0 || b > n {
            return Err(Error::config("batch_size", format!("batch size {b} outside 1..={n}")));
        }
        Ok(BatchStream {
            n,
            b,
            seed,
            tag,
            pass: 0,
            perm: permutation(n, seed, tag + 1, 0),
            pos: 0,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.b);
        while out.len() < self.b {
            if self.pos == self.n {
                self.pass += 1;
                self.perm = permutation(self.n, self.seed, self.tag + 1, self.pass);
                self.pos = 0;
            }
            let take = (self.b - out.len()).min(self.n - self.pos);
            out.extend_from_slice(&self.perm[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}
