use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug)]
struct Entry {
    name: String,
    value: Matrix,
    trainable: bool,
    reads: AtomicUsize,
}

/// Named parameter and buffer storage.
///
/// Values are kept exactly representable in `f32` (see [`ParamStore::add`] and
/// the optimizer), so float32 checkpoints reload bit-exactly. Every read made
/// while building a graph is counted, which lets callers verify which
/// sub-networks a computation touched.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.clone(),
                    trainable: e.trainable,
                    reads: AtomicUsize::new(0),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a value under a unique name. The value is rounded to `f32`.
    pub fn add(&mut self, name: impl Into<String>, mut value: Matrix, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "parameter {name} registered twice"
        );
        value.round_to_f32();
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            trainable,
            reads: AtomicUsize::new(0),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Value access that counts as a read by the model.
    pub fn read(&self, id: ParamId) -> &Matrix {
        let e = &self.entries[id.0];
        e.reads.fetch_add(1, Ordering::Relaxed);
        &e.value
    }

    /// Value access that is not counted (optimizer, serialization).
    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    /// Replace a value, rounding to `f32`. Panics on shape mismatch.
    pub fn set(&mut self, id: ParamId, mut value: Matrix) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.value.shape(), value.shape(), "shape of {}", e.name);
        value.round_to_f32();
        e.value = value;
    }

    pub fn reads(&self, id: ParamId) -> usize {
        self.entries[id.0].reads.load(Ordering::Relaxed)
    }

    /// Total reads of every entry whose name starts with `prefix`.
    pub fn reads_under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.reads.load(Ordering::Relaxed))
            .sum()
    }

    pub fn reset_reads(&self) {
        for e in &self.entries {
            e.reads.store(0, Ordering::Relaxed);
        }
    }

    /// Number of trainable scalars under `prefix`.
    pub fn scalar_count_under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn names_under<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .map(|e| e.name.as_str())
            .filter(move |n| n.starts_with(prefix))
    }

    /// Bitwise equality of names, flags and values.
    pub fn bits_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.trainable == b.trainable && a.value.bits_eq(&b.value)
            })
    }
}

/// Uniform in `±1/√fan_in`.
pub fn uniform_fan_in(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Random `[n × n]` orthogonal matrix (QR of a Gaussian, sign-corrected).
pub fn orthogonal(rng: &mut impl Rng, n: usize) -> Matrix {
    let g = normal(rng, n, n, 1.0);
    let dm = nalgebra::DMatrix::from_row_slice(n, n, g.data());
    let qr = dm.qr();
    let q = qr.q();
    let r = qr.r();
    Matrix::from_fn(n, n, |i, j| {
        let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * s
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let q = orthogonal(&mut rng, 6);
        let qtq = q.transpose().matmul(&q);
        assert!(qtq.max_abs_diff(&Matrix::identity(6)) < 1e-12);
    }

    #[test]
    fn reads_are_counted_per_prefix() {
        let mut s = ParamStore::new();
        let a = s.add("x.a", Matrix::zeros(1, 2), true);
        let _b = s.add("y.b", Matrix::zeros(2, 2), true);
        s.read(a);
        s.read(a);
        assert_eq!(s.reads_under("x."), 2);
        assert_eq!(s.reads_under("y."), 0);
        assert_eq!(s.scalar_count_under("y."), 4);
        s.reset_reads();
        assert_eq!(s.reads_under(""), 0);
    }

    #[test]
    fn values_are_rounded_to_f32() {
        let mut s = ParamStore::new();
        let a = s.add("a", Matrix::scalar(0.1), true);
        assert_eq!(s.value(a).get(0, 0), 0.1f32 as f64);
    }
}
