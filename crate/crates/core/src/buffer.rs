//! Fixed-capacity rehearsal memory maintained by reservoir sampling.

use std::io::{Read, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config, contract, Error, Result};
use crate::main_net::MainNet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One stored sample with the logits the model produced when it was inserted.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry<S> {
    pub input: Vec<S>,
    pub label: usize,
    pub stored_logits: Vec<S>,
    pub task_id: usize,
}

/// Slot overwritten by a full buffer given a uniform draw in `0..=N`.
fn replacement_slot(capacity: usize, draw: u64) -> Option<usize> {
    usize::try_from(draw).ok().filter(|&j| j < capacity)
}

#[derive(Debug, Clone)]
pub struct ReservoirBuffer<S> {
    capacity: usize,
    seen: u64,
    entries: Vec<BufferEntry<S>>,
    seed: u64,
    rng: ChaCha8Rng,
}

/// A batch gathered from the buffer, in sampling order.
#[derive(Debug, Clone)]
pub struct BufferBatch<S> {
    pub indices: Vec<usize>,
    pub inputs: Tensor<S>,
    pub labels: Vec<usize>,
    pub stored_logits: Tensor<S>,
}

impl<S: Scalar> ReservoirBuffer<S> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            seen: 0,
            entries: Vec::with_capacity(capacity),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of stream items offered so far.
    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry<S>] {
        &self.entries
    }

    /// Offers one stream item. While the buffer is filling it is appended;
    /// afterwards it replaces a uniform slot with probability `M / (N + 1)`.
    pub fn insert(&mut self, entry: BufferEntry<S>) {
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else if self.capacity > 0 {
            let draw = self.rng.random_range(0..=self.seen);
            if let Some(j) = replacement_slot(self.capacity, draw) {
                self.entries[j] = entry;
            }
        }
        self.seen += 1;
    }

    /// `b` indices from `pool`: without replacement when the pool has at
    /// least `b` entries, uniformly with replacement otherwise.
    fn draw_from<R: Rng + ?Sized>(pool: &[usize], b: usize, rng: &mut R) -> Result<Vec<usize>> {
        if pool.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if pool.len() >= b {
            Ok(index::sample(rng, pool.len(), b).into_iter().map(|i| pool[i]).collect())
        } else {
            Ok((0..b).map(|_| pool[rng.random_range(0..pool.len())]).collect())
        }
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Vec<usize>> {
        let pool: Vec<usize> = (0..self.entries.len()).collect();
        Self::draw_from(&pool, b, rng)
    }

    /// Samples from a subset of slots (a split view).
    pub fn sample_indices_in<R: Rng + ?Sized>(&self, view: &[usize], b: usize, rng: &mut R) -> Result<Vec<usize>> {
        if view.iter().any(|&i| i >= self.entries.len()) {
            return contract("view refers to slots outside the buffer");
        }
        Self::draw_from(view, b, rng)
    }

    /// Samples a batch whose index set differs from `avoid` whenever the pool
    /// is larger than the batch; identical draws are redrawn.
    pub fn sample_indices_distinct<R: Rng + ?Sized>(
        &self,
        view: Option<&[usize]>,
        b: usize,
        avoid: &[usize],
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let all: Vec<usize>;
        let pool = match view {
            Some(v) => v,
            None => {
                all = (0..self.entries.len()).collect();
                &all
            }
        };
        let mut avoid_sorted = avoid.to_vec();
        avoid_sorted.sort_unstable();
        loop {
            let draw = Self::draw_from(pool, b, rng)?;
            if pool.len() <= b {
                return Ok(draw);
            }
            let mut s = draw.clone();
            s.sort_unstable();
            if s != avoid_sorted {
                return Ok(draw);
            }
        }
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<BufferBatch<S>> {
        let idx = self.sample_indices(b, rng)?;
        Ok(self.gather(&idx))
    }

    pub fn gather(&self, indices: &[usize]) -> BufferBatch<S> {
        let dim = self.entries.first().map_or(0, |e| e.input.len());
        let slots = self.entries.first().map_or(0, |e| e.stored_logits.len());
        let mut x = Vec::with_capacity(indices.len() * dim);
        let mut z = Vec::with_capacity(indices.len() * slots);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = &self.entries[i];
            x.extend_from_slice(&e.input);
            z.extend_from_slice(&e.stored_logits);
            labels.push(e.label);
        }
        BufferBatch {
            indices: indices.to_vec(),
            inputs: Tensor::new(vec![indices.len(), dim], x).expect("entries share a feature dim"),
            labels,
            stored_logits: Tensor::new(vec![indices.len(), slots], z).expect("entries share a logit width"),
        }
    }

    /// Recomputes every stored logit vector under `net`. Not part of the
    /// default training path, where logits stay as captured at insertion.
    pub fn refresh_logits(&mut self, net: &MainNet<S>) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let idx: Vec<usize> = (0..self.entries.len()).collect();
        let batch = self.gather(&idx);
        let pred = net.predict(&batch.inputs)?;
        for (r, e) in self.entries.iter_mut().enumerate() {
            e.stored_logits = pred.logits.row(r).to_vec();
        }
        Ok(())
    }

    /// Disjoint `(inner, outer)` slot sets, with `outer` holding
    /// `round(outer_fraction * len)` slots. The assignment is a deterministic
    /// function of the buffer seed and `epoch`.
    pub fn split_partition(&self, outer_fraction: f64, epoch: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(outer_fraction > 0.0 && outer_fraction < 1.0) {
            return config(format!("outer fraction {outer_fraction} must lie in (0, 1)"));
        }
        let n = self.entries.len();
        let n_outer = (outer_fraction * n as f64).round() as usize;
        if n_outer == 0 || n_outer >= n {
            return config(format!("buffer of {n} entries cannot be split with fraction {outer_fraction}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let outer_set = index::sample(&mut rng, n, n_outer);
        let mut is_outer = vec![false; n];
        for i in outer_set {
            is_outer[i] = true;
        }
        let outer = (0..n).filter(|&i| is_outer[i]).collect();
        let inner = (0..n).filter(|&i| !is_outer[i]).collect();
        Ok((inner, outer))
    }

    /// Writes every entry as `u32 task_id, u32 label, f64 features..., f64 logits...`,
    /// little-endian.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            let task = u32::try_from(e.task_id).map_err(|_| Error::Config("task id exceeds u32".into()))?;
            let label = u32::try_from(e.label).map_err(|_| Error::Config("label exceeds u32".into()))?;
            w.write_all(&task.to_le_bytes())?;
            w.write_all(&label.to_le_bytes())?;
            for v in e.input.iter().chain(&e.stored_logits) {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a record stream written by [`dump`](Self::dump). Entries are
    /// re-offered in order, so the result is exact when the stream holds at
    /// most `capacity` records.
    pub fn load<R: Read>(
        mut r: R,
        feature_dim: usize,
        logit_slots: usize,
        capacity: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let rec = 8 + 8 * (feature_dim + logit_slots);
        if bytes.len() % rec != 0 {
            return Err(Error::Format {
                offset: (bytes.len() - bytes.len() % rec) as u64,
                message: format!("truncated record (record size {rec} bytes)"),
            });
        }
        let mut buf = Self::new(capacity, seed);
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        for start in (0..bytes.len()).step_by(rec) {
            let task_id = u32::from_le_bytes(bytes[start..start + 4].try_into().expect("4 bytes")) as usize;
            let label = u32::from_le_bytes(bytes[start + 4..start + 8].try_into().expect("4 bytes")) as usize;
            let vals: Vec<f64> = (0..feature_dim + logit_slots).map(|k| f64_at(start + 8 + 8 * k)).collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format {
                    offset: start as u64,
                    message: "non-finite value in record".into(),
                });
            }
            let conv: Vec<S> = vals.into_iter().map(S::lit).collect();
            let (input, logits) = conv.split_at(feature_dim);
            buf.insert(BufferEntry {
                input: input.to_vec(),
                label,
                stored_logits: logits.to_vec(),
                task_id,
            });
        }
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(i: usize) -> BufferEntry<f64> {
        BufferEntry {
            input: vec![i as f64, -(i as f64)],
            label: i % 3,
            stored_logits: vec![0.5 * i as f64; 3],
            task_id: i / 10,
        }
    }

    #[test]
    fn fill_phase_keeps_everything() {
        let mut b = ReservoirBuffer::new(5, 1);
        for i in 0..5 {
            b.insert(entry(i));
        }
        assert_eq!(b.len(), 5);
        assert_eq!(b.entries().iter().map(|e| e.input[0] as usize).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        b.insert(entry(5));
        assert_eq!(b.len(), 5);
        assert_eq!(b.seen_count(), 6);
    }

    #[test]
    fn single_slot_exhaustive_enumeration() {
        // Every draw sequence (d_1..d_{N-1}), d_k uniform in 0..=k, is equally
        // likely; count which item survives in each.
        fn walk(n: usize, k: usize, kept: usize, counts: &mut [usize]) {
            if k == n {
                counts[kept] += 1;
                return;
            }
            for d in 0..=k as u64 {
                let next = if replacement_slot(1, d).is_some() { k } else { kept };
                walk(n, k + 1, next, counts);
            }
        }
        for n in 1..=6usize {
            let mut counts = vec![0usize; n];
            walk(n, 1, 0, &mut counts);
            let total: usize = counts.iter().sum();
            assert!(counts.iter().all(|&c| c * n == total), "n={n} {counts:?}");
        }
    }

    #[test]
    fn single_slot_keeps_uniform_item() {
        // Exact law: P(item i kept) = 1/N. Enumerate the sequence of decisions
        // over seeds and compare against 1/N with a loose Monte Carlo bound.
        for n in 1..=6usize {
            let mut counts = vec![0usize; n];
            let trials = 30_000;
            for t in 0..trials {
                let mut b = ReservoirBuffer::new(1, t as u64);
                for i in 0..n {
                    b.insert(entry(i));
                }
                counts[b.entries()[0].input[0] as usize] += 1;
            }
            for c in counts {
                let p = c as f64 / trials as f64;
                assert!((p - 1.0 / n as f64).abs() < 0.015, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn exhaustive_draw_is_permutation() {
        let mut b = ReservoirBuffer::new(8, 2);
        for i in 0..8 {
            b.insert(entry(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut idx = b.sample_indices(8, &mut rng).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn empty_buffer_signals() {
        let b = ReservoirBuffer::<f64>::new(4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample_indices(2, &mut rng), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn small_buffer_samples_with_replacement() {
        let mut b = ReservoirBuffer::new(10, 2);
        for i in 0..3 {
            b.insert(entry(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = b.sample_indices(16, &mut rng).unwrap();
        assert_eq!(idx.len(), 16);
        assert!(idx.iter().all(|&i| i < 3));
    }

    #[test]
    fn distinct_sampler_never_repeats_the_avoided_set() {
        let mut b = ReservoirBuffer::new(3, 2);
        for i in 0..3 {
            b.insert(entry(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mut d = b.sample_indices_distinct(None, 2, &[2, 0], &mut rng).unwrap();
            d.sort_unstable();
            assert_ne!(d, vec![0, 2]);
        }
    }

    #[test]
    fn refresh_is_noop_on_empty_buffer() {
        use crate::main_net::MainNetConfig;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = MainNet::<f64>::new(
            &MainNetConfig {
                input_dim: 2,
                hidden: vec![3],
                total_classes: 3,
                hidden_activation: crate::tensor::Activation::Relu,
            },
            &mut rng,
        )
        .unwrap();
        let mut b = ReservoirBuffer::<f64>::new(4, 0);
        b.refresh_logits(&net).unwrap();
        assert!(b.is_empty());
        for i in 0..3 {
            b.insert(entry(i));
        }
        b.refresh_logits(&net).unwrap();
        for e in b.entries() {
            let x = Tensor::new(vec![1, 2], e.input.clone()).unwrap();
            assert_eq!(net.predict(&x).unwrap().logits.row(0), e.stored_logits.as_slice());
        }
    }

    #[test]
    fn split_partition_laws() {
        let mut b = ReservoirBuffer::new(100, 5);
        for i in 0..100 {
            b.insert(entry(i));
        }
        let (inner, outer) = b.split_partition(0.2, 0).unwrap();
        assert_eq!((inner.len(), outer.len()), (80, 20));
        let mut all: Vec<usize> = inner.iter().chain(&outer).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(b.split_partition(0.2, 0).unwrap(), (inner.clone(), outer.clone()));
        assert_ne!(b.split_partition(0.2, 1).unwrap().1, outer);
        assert!(b.split_partition(0.0, 0).is_err());
        assert!(b.split_partition(1.0, 0).is_err());

        let mut tiny = ReservoirBuffer::new(10, 5);
        tiny.insert(entry(0));
        tiny.insert(entry(1));
        assert!(tiny.split_partition(0.2, 0).is_err());
    }

    #[test]
    fn dump_load_roundtrip() {
        let mut b = ReservoirBuffer::new(4, 3);
        for i in 0..4 {
            b.insert(entry(i));
        }
        let mut bytes = Vec::new();
        b.dump(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 4 * (8 + 8 * 5));
        assert_eq!(&bytes[0..8], &[0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[48..56], &[0, 0, 0, 0, 1, 0, 0, 0]);
        let back = ReservoirBuffer::<f64>::load(bytes.as_slice(), 2, 3, 4, 3).unwrap();
        assert_eq!(back.entries(), b.entries());
        let err = ReservoirBuffer::<f64>::load(&bytes[..50], 2, 3, 4, 3).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 48, .. }));
    }
}
