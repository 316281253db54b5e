use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ActivationStore;
use crate::error::{Result, SaeError};

/// One epoch over a store through a fixed-size shuffle buffer. Yields
/// batches of row indices; the final batch may be short.
#[derive(Debug)]
pub struct ShuffleStream {
    n_rows: usize,
    batch_size: usize,
    buffer: Vec<usize>,
    next_input: usize,
    rng: ChaCha8Rng,
}

impl ShuffleStream {
    fn new(n_rows: usize, batch_size: usize, buffer_tokens: usize, rng: ChaCha8Rng) -> Self {
        let fill = buffer_tokens.min(n_rows);
        Self {
            n_rows,
            batch_size,
            buffer: (0..fill).collect(),
            next_input: fill,
            rng,
        }
    }

    fn next_row(&mut self) -> Option<usize> {
        if self.buffer.is_empty() {
            return None;
        }
        let slot = self.rng.random_range(0..self.buffer.len());
        let row = self.buffer[slot];
        if self.next_input < self.n_rows {
            self.buffer[slot] = self.next_input;
            self.next_input += 1;
        } else {
            self.buffer.swap_remove(slot);
        }
        Some(row)
    }
}

impl Iterator for ShuffleStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            match self.next_row() {
                Some(r) => batch.push(r),
                None => break,
            }
        }
        (!batch.is_empty()).then_some(batch)
    }
}

pub fn shuffle_stream(
    store: &ActivationStore,
    batch_size: usize,
    buffer_tokens: usize,
    seed: u64,
) -> Result<ShuffleStream> {
    if batch_size == 0 {
        return Err(SaeError::invalid("batch size must be positive"));
    }
    if buffer_tokens < batch_size {
        return Err(SaeError::invalid(format!(
            "shuffle buffer ({buffer_tokens}) must hold at least one batch ({batch_size})"
        )));
    }
    Ok(ShuffleStream::new(
        store.n_rows(),
        batch_size,
        buffer_tokens,
        ChaCha8Rng::seed_from_u64(seed),
    ))
}

/// Endless sequence of full batches: epoch after epoch of buffered
/// shuffles, each epoch on its own RNG stream, with leftovers carried into
/// the next epoch.
#[derive(Debug)]
pub struct BatchCycler {
    n_rows: usize,
    batch_size: usize,
    buffer_tokens: usize,
    seed: u64,
    epoch: u64,
    current: ShuffleStream,
}

impl BatchCycler {
    pub fn new(
        store: &ActivationStore,
        batch_size: usize,
        buffer_tokens: usize,
        seed: u64,
    ) -> Result<Self> {
        if store.n_rows() == 0 {
            return Err(SaeError::invalid("activation store is empty"));
        }
        let current = shuffle_stream(store, batch_size, buffer_tokens, seed)?;
        Ok(Self {
            n_rows: store.n_rows(),
            batch_size,
            buffer_tokens,
            seed,
            epoch: 0,
            current,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            match self.current.next_row() {
                Some(r) => batch.push(r),
                None => {
                    self.epoch += 1;
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                    rng.set_stream(self.epoch);
                    self.current =
                        ShuffleStream::new(self.n_rows, self.batch_size, self.buffer_tokens, rng);
                }
            }
        }
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(rows: usize) -> ActivationStore {
        ActivationStore::new(1, (0..rows).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn full_buffer_is_a_permutation() {
        let s = store(50);
        let rows: Vec<usize> = shuffle_stream(&s, 7, 50, 1).unwrap().flatten().collect();
        let mut sorted = rows.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(rows, sorted);
    }

    #[test]
    fn small_buffer_conserves_rows() {
        let s = store(103);
        let batches: Vec<Vec<usize>> = shuffle_stream(&s, 10, 16, 9).unwrap().collect();
        assert_eq!(batches.len(), 11);
        assert_eq!(batches.last().unwrap().len(), 3);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
    }

    #[test]
    fn seeds_differ_and_repeat() {
        let s = store(100);
        let a: Vec<usize> = shuffle_stream(&s, 10, 100, 1).unwrap().flatten().collect();
        let b: Vec<usize> = shuffle_stream(&s, 10, 100, 2).unwrap().flatten().collect();
        let a2: Vec<usize> = shuffle_stream(&s, 10, 100, 1).unwrap().flatten().collect();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }

    #[test]
    fn buffer_must_hold_a_batch() {
        assert!(shuffle_stream(&store(10), 8, 4, 0).is_err());
    }

    #[test]
    fn cycler_spans_epochs() {
        let s = store(25);
        let mut c = BatchCycler::new(&s, 10, 25, 4).unwrap();
        let first: Vec<usize> = (0..5).flat_map(|_| c.next_batch()).collect();
        assert_eq!(first.len(), 50);
        assert_eq!(c.epoch(), 1);
        let mut epoch0 = first[..25].to_vec();
        epoch0.sort();
        assert_eq!(epoch0, (0..25).collect::<Vec<_>>());
        let mut epoch1 = first[25..].to_vec();
        epoch1.sort();
        assert_eq!(epoch1, (0..25).collect::<Vec<_>>());
    }
}
