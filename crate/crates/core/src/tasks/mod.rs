//! Experiment-level models and training loops.

pub mod forecast;
pub mod node_class;
pub mod particles;

use rand::seq::SliceRandom;
use rand::Rng;

/// Shuffled minibatch index lists covering `0..n`.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}
