//! Balanced mini-batch sampling.

use rand::seq::SliceRandom;

use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::seed::rng_for;

const TAG_TARGET: u64 = 0xBA7C_0000;
const TAG_OTHER: u64 = 0xBA7C_0001;

/// One group of items drawn without replacement, reshuffled each time it is exhausted.
#[derive(Clone, Debug)]
struct Group {
    items: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    tag: u64,
}

impl Group {
    fn new(items: Vec<usize>, seed: u64, tag: u64) -> Self {
        let mut g = Self {
            items,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            seed,
            tag,
        };
        g.reshuffle();
        g
    }

    fn reshuffle(&mut self) {
        self.order = self.items.clone();
        self.order.shuffle(&mut rng_for(&[self.seed, self.tag, self.epoch]));
        self.pos = 0;
        self.epoch += 1;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.reshuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Endless iterator of batches, each holding `batch_size / 2` target-accent
/// items followed by `batch_size / 2` other-accent items (manifest entry indices).
#[derive(Clone, Debug)]
pub struct BatchIter {
    target: Group,
    other: Group,
    half: usize,
}

impl BatchIter {
    /// Batches needed to visit every other-accent item once.
    pub fn epoch_len(&self) -> usize {
        self.other.items.len().div_ceil(self.half)
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let mut batch = Vec::with_capacity(2 * self.half);
        batch.extend((0..self.half).map(|_| self.target.next()));
        batch.extend((0..self.half).map(|_| self.other.next()));
        Some(batch)
    }
}

/// Balanced batches over the train split of `manifest`.
pub fn make_batches(manifest: &DatasetManifest, batch_size: usize, seed: u64) -> Result<BatchIter> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Config(format!("batch_size must be even and positive, got {batch_size}")));
    }
    let (mut target, mut other) = (Vec::new(), Vec::new());
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.split == Split::Train {
            if e.accent_label == 0 {
                target.push(i);
            } else {
                other.push(i);
            }
        }
    }
    if target.is_empty() {
        return Err(Error::Dataset("no target-accent training data".into()));
    }
    if other.is_empty() {
        return Err(Error::Dataset("no other-accent training data".into()));
    }
    Ok(BatchIter {
        target: Group::new(target, seed, TAG_TARGET),
        other: Group::new(other, seed, TAG_OTHER),
        half: batch_size / 2,
    })
}
