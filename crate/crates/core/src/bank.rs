//! FIFO memory bank of (frequency key, prompt) pairs with cosine-similarity
//! retrieval and similarity-weighted prompt initialization.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Error, Result};
use crate::prompt::FrequencyKey;
use crate::tensor::Tensor;

/// `⟨a, b⟩ / (‖a‖·‖b‖)`, or 0 when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine similarity of unequal lengths");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub key: FrequencyKey,
    pub value: Vec<Tensor>,
    pub insert_index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub key: FrequencyKey,
    pub value: Vec<Tensor>,
    pub similarity: f64,
    pub weight: f64,
    pub insert_index: u64,
}

/// Retrieved entries, most similar first; weights sum to one when non-empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SupportSet {
    pub entries: Vec<Support>,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }

    /// `Σ w_k · v_k` per value tensor.
    pub fn weighted_value(&self) -> Option<Vec<Tensor>> {
        let first = self.entries.first()?;
        let mut acc: Vec<Tensor> = first.value.iter().map(|t| Tensor::zeros(t.dims())).collect();
        for e in &self.entries {
            for (a, v) in acc.iter_mut().zip(&e.value) {
                a.data_mut()
                    .iter_mut()
                    .zip(v.data())
                    .for_each(|(a, v)| *a += e.weight * v);
            }
        }
        Some(acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<BankEntry>,
    inserted: u64,
    evicted: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    capacity: usize,
    order: Vec<u64>,
    values_per_entry: usize,
    inserted: u64,
    evicted: u64,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
            inserted: 0,
            evicted: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    /// Appends an entry and drops the oldest one past capacity.
    pub fn enqueue(&mut self, key: FrequencyKey, value: Vec<Tensor>) -> Result<()> {
        if let Some(first) = self.entries.front() {
            if first.key.dims() != key.dims() {
                return Err(config(format!(
                    "key shape {:?} does not match bank keys {:?}",
                    key.dims(),
                    first.key.dims()
                )));
            }
            let layout = |v: &[Tensor]| v.iter().map(|t| t.dims().to_vec()).collect::<Vec<_>>();
            if layout(&first.value) != layout(&value) {
                return Err(config("prompt layout does not match bank values"));
            }
        }
        self.entries.push_back(BankEntry {
            key,
            value,
            insert_index: self.inserted,
        });
        self.inserted += 1;
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
            self.evicted += 1;
        }
        Ok(())
    }

    /// Top-`k` entries by cosine similarity to `query`. Ties go to the newer
    /// entry. Weights are clamped similarities normalized to sum to one, or
    /// uniform when every clamped similarity is zero.
    pub fn retrieve(&self, query: &FrequencyKey, k: usize) -> Result<SupportSet> {
        if k == 0 {
            return Err(config("support size K must be positive"));
        }
        let mut scored = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.key.dims() != query.dims() {
                return Err(shape(format!(
                    "query {:?} vs bank key {:?}",
                    query.dims(),
                    e.key.dims()
                )));
            }
            scored.push((cosine_similarity(query.as_slice(), e.key.as_slice()), e));
        }
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| b.1.insert_index.cmp(&a.1.insert_index))
        });
        scored.truncate(k);
        let clamped: Vec<f64> = scored.iter().map(|(s, _)| s.max(0.0)).collect();
        let total: f64 = clamped.iter().sum();
        let n = scored.len();
        let entries = scored
            .into_iter()
            .zip(clamped)
            .map(|((sim, e), c)| Support {
                key: e.key.clone(),
                value: e.value.clone(),
                similarity: sim,
                weight: if total > 0.0 { c / total } else { 1.0 / n as f64 },
                insert_index: e.insert_index,
            })
            .collect();
        Ok(SupportSet { entries })
    }

    /// `default` while the bank holds fewer than `k` entries, otherwise the
    /// similarity-weighted sum of the retrieved prompts.
    pub fn initialize(&self, query: &FrequencyKey, k: usize, default: &[Tensor]) -> Result<Vec<Tensor>> {
        if k == 0 {
            return Err(config("support size K must be positive"));
        }
        if self.entries.len() < k {
            return Ok(default.to_vec());
        }
        let support = self.retrieve(query, k)?;
        support
            .weighted_value()
            .ok_or_else(|| Error::Contract("empty support set from a full bank".into()))
    }

    /// Writes numbered `key_NNNN.vpt` / `value_NNNN_M.vpt` files and `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let values_per_entry = self.entries.front().map_or(0, |e| e.value.len());
        for (slot, e) in self.entries.iter().enumerate() {
            e.key.values.save(dir.join(format!("key_{slot:04}.vpt")))?;
            for (m, v) in e.value.iter().enumerate() {
                v.save(dir.join(format!("value_{slot:04}_{m}.vpt")))?;
            }
        }
        let manifest = Manifest {
            capacity: self.capacity,
            order: self.entries.iter().map(|e| e.insert_index).collect(),
            values_per_entry,
            inserted: self.inserted,
            evicted: self.evicted,
        };
        let f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(f, &manifest)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest =
            serde_json::from_reader(std::fs::File::open(dir.join("manifest.json"))?)?;
        let mut entries = VecDeque::with_capacity(manifest.capacity + 1);
        for (slot, &insert_index) in manifest.order.iter().enumerate() {
            let key = FrequencyKey {
                values: Tensor::load(dir.join(format!("key_{slot:04}.vpt")))?,
                source_id: None,
            };
            let value = (0..manifest.values_per_entry)
                .map(|m| Tensor::load(dir.join(format!("value_{slot:04}_{m}.vpt"))))
                .collect::<Result<Vec<_>>>()?;
            entries.push_back(BankEntry {
                key,
                value,
                insert_index,
            });
        }
        if entries.len() > manifest.capacity {
            return Err(config("bank snapshot holds more entries than its capacity"));
        }
        Ok(Self {
            capacity: manifest.capacity,
            entries,
            inserted: manifest.inserted,
            evicted: manifest.evicted,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn key(v: &[f64]) -> FrequencyKey {
        FrequencyKey {
            values: Tensor::new(&[v.len()], v.to_vec()).unwrap(),
            source_id: None,
        }
    }

    fn val(x: f64) -> Vec<Tensor> {
        vec![Tensor::full(&[2], x)]
    }

    #[test]
    fn cosine_cases() {
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]), 1.0, epsilon = 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_abs_diff_eq!(
            cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-15
        );
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn fifo_eviction() {
        let mut b = MemoryBank::new(2);
        b.enqueue(key(&[1.0, 0.0]), val(1.0)).unwrap();
        assert_eq!(b.len(), 1);
        b.enqueue(key(&[0.0, 1.0]), val(2.0)).unwrap();
        b.enqueue(key(&[1.0, 1.0]), val(3.0)).unwrap();
        let kept: Vec<f64> = b.entries().map(|e| e.value[0].data()[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0]);
        assert_eq!(b.evicted(), 1);
    }

    #[test]
    fn capacity_forty_after_hundred() {
        let mut b = MemoryBank::new(40);
        for i in 0..100 {
            b.enqueue(key(&[i as f64, 1.0]), val(i as f64)).unwrap();
        }
        assert_eq!(b.len(), 40);
        assert_eq!(b.evicted(), 60);
    }

    #[test]
    fn rejects_mismatched_key_and_zero_k() {
        let mut b = MemoryBank::new(3);
        b.enqueue(key(&[1.0, 0.0]), val(1.0)).unwrap();
        assert!(matches!(b.enqueue(key(&[1.0]), val(1.0)), Err(Error::Config(_))));
        assert!(b.retrieve(&key(&[1.0, 0.0]), 0).is_err());
    }

    #[test]
    fn self_retrieval_and_small_bank() {
        let mut b = MemoryBank::new(40);
        b.enqueue(key(&[1.0, 0.2, 0.0]), val(1.0)).unwrap();
        b.enqueue(key(&[0.0, 1.0, 0.3]), val(2.0)).unwrap();
        b.enqueue(key(&[0.5, 0.5, 0.5]), val(3.0)).unwrap();
        let s = b.retrieve(&key(&[0.0, 1.0, 0.3]), 1).unwrap();
        assert_eq!(s.entries[0].value, val(2.0));
        assert_abs_diff_eq!(s.entries[0].similarity, 1.0, epsilon = 1e-15);
        assert_eq!(s.entries[0].weight, 1.0);
        assert_eq!(b.retrieve(&key(&[1.0, 1.0, 1.0]), 16).unwrap().len(), 3);
    }

    #[test]
    fn weights_follow_similarity_ratio() {
        // Unit query e1; keys chosen so cosines are exactly 0.9 and 0.3.
        let mut b = MemoryBank::new(4);
        let s09 = (1.0f64 - 0.81).sqrt();
        let s03 = (1.0f64 - 0.09).sqrt();
        b.enqueue(key(&[0.9, s09]), val(10.0)).unwrap();
        b.enqueue(key(&[0.3, s03]), val(20.0)).unwrap();
        let s = b.retrieve(&key(&[1.0, 0.0]), 2).unwrap();
        assert_abs_diff_eq!(s.entries[0].weight, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(s.entries[1].weight, 0.25, epsilon = 1e-12);
        let init = b.initialize(&key(&[1.0, 0.0]), 2, &val(1.0)).unwrap();
        assert_abs_diff_eq!(init[0].data()[0], 0.75 * 10.0 + 0.25 * 20.0, epsilon = 1e-12);
    }

    #[test]
    fn cold_start_and_dominant_match() {
        let mut b = MemoryBank::new(4);
        assert_eq!(b.initialize(&key(&[1.0, 0.0]), 2, &val(1.0)).unwrap(), val(1.0));
        b.enqueue(key(&[1.0, 0.0]), val(5.0)).unwrap();
        b.enqueue(key(&[-1.0, 0.0]), val(9.0)).unwrap();
        // The second key has negative similarity and clamps to weight 0.
        let init = b.initialize(&key(&[1.0, 0.0]), 2, &val(1.0)).unwrap();
        assert_eq!(init, val(5.0));
    }

    #[test]
    fn all_nonpositive_similarities_give_uniform_weights() {
        let mut b = MemoryBank::new(4);
        b.enqueue(key(&[-1.0, 0.0]), val(2.0)).unwrap();
        b.enqueue(key(&[0.0, 1.0]), val(4.0)).unwrap();
        let s = b.retrieve(&key(&[1.0, 0.0]), 2).unwrap();
        assert_eq!(s.weights(), vec![0.5, 0.5]);
    }

    #[test]
    fn ties_prefer_newer_entries() {
        let mut b = MemoryBank::new(4);
        b.enqueue(key(&[1.0, 1.0]), val(1.0)).unwrap();
        b.enqueue(key(&[2.0, 2.0]), val(2.0)).unwrap();
        let s = b.retrieve(&key(&[1.0, 1.0]), 1).unwrap();
        assert_eq!(s.entries[0].insert_index, 1);
    }

    #[test]
    fn zero_capacity_never_stores() {
        let mut b = MemoryBank::new(0);
        b.enqueue(key(&[1.0]), val(1.0)).unwrap();
        assert!(b.is_empty());
        assert_eq!(b.initialize(&key(&[1.0]), 1, &val(7.0)).unwrap(), val(7.0));
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = MemoryBank::new(3);
        for i in 0..5 {
            b.enqueue(key(&[i as f64, 1.0]), vec![Tensor::full(&[2], i as f64), Tensor::ones(&[3])])
                .unwrap();
        }
        b.save(dir.path()).unwrap();
        assert_eq!(MemoryBank::load(dir.path()).unwrap(), b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn capacity_and_weights(
            cap in 1usize..12,
            keys in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 1..40),
            query in proptest::collection::vec(-1.0f64..1.0, 4),
            k in 1usize..10,
        ) {
            let mut b = MemoryBank::new(cap);
            for (i, kv) in keys.iter().enumerate() {
                b.enqueue(key(kv), vec![Tensor::new(&[4], kv.clone()).unwrap()]).unwrap();
                prop_assert!(b.len() <= cap);
                prop_assert_eq!(b.evicted() as usize, (i + 1).saturating_sub(cap));
            }
            let s = b.retrieve(&key(&query), k).unwrap();
            let total: f64 = s.weights().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.weights().iter().all(|&w| w >= 0.0));
            prop_assert!(s.entries.windows(2).all(|w| w[0].similarity >= w[1].similarity));
            // Convexity of the weighted prompt.
            let init = s.weighted_value().unwrap();
            for d in 0..4 {
                let lo = s.entries.iter().map(|e| e.value[0].data()[d]).fold(f64::INFINITY, f64::min);
                let hi = s.entries.iter().map(|e| e.value[0].data()[d]).fold(f64::NEG_INFINITY, f64::max);
                let x = init[0].data()[d];
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }
}
