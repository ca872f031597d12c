//! Factor-tagged samples, partitions `P_k`, differ-in-one-factor pair sets,
//! batch tuple assembly, plus the synthetic generator and on-disk format.

mod io;
mod synth;

use std::cmp::Ordering;
use std::fmt;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vae::ImageTensor;

pub use io::{load_image, manifest_digest, read_dataset, save_image, write_dataset, DiskDataset, MANIFEST};
pub use synth::{
    clean_scene, generate_synthetic, render, GeneratorConfig, GeneratorFactor, StreakBand, SyntheticDataset, SCENES,
    STREAK_PERIOD,
};

/// A generative factor: its observed (in-distribution) value ids, optional
/// bin edges for continuous sources, and the latent dims reserved for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub values: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<f64>>,
    pub dims: Vec<usize>,
}

impl FactorSpec {
    pub fn new(name: impl Into<String>, values: &[&str], dims: &[usize]) -> Self {
        FactorSpec {
            name: name.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
            edges: None,
            dims: dims.to_vec(),
        }
    }

    pub fn value_index(&self, id: &str) -> Option<usize> {
        self.values.iter().position(|v| v == id)
    }

    pub fn is_observed(&self, id: &str) -> bool {
        self.value_index(id).is_some()
    }

    /// Maps a raw continuous value to its value id through `edges`.
    pub fn discretize(&self, value: f64) -> Result<&str> {
        let edges = self
            .edges
            .as_ref()
            .ok_or_else(|| Error::Config(format!("factor `{}` has no bin edges", self.name)))?;
        if edges.len() != self.values.len() + 1 {
            return Err(Error::Config(format!(
                "factor `{}`: {} edges for {} values",
                self.name,
                edges.len(),
                self.values.len()
            )));
        }
        Ok(&self.values[discretize_factor(value, edges)?])
    }
}

/// Checks factor declarations against each other and against latent size
/// `n` (when given).
pub fn validate_factors(factors: &[FactorSpec], n: Option<usize>) -> Result<()> {
    if factors.is_empty() {
        return Err(Error::Config("at least one factor is required".into()));
    }
    let mut seen_dims = Vec::new();
    for (i, f) in factors.iter().enumerate() {
        if factors[..i].iter().any(|g| g.name == f.name) {
            return Err(Error::Config(format!("duplicate factor `{}`", f.name)));
        }
        if f.values.is_empty() {
            return Err(Error::Config(format!("factor `{}` has no observed values", f.name)));
        }
        if f.values.iter().enumerate().any(|(j, v)| f.values[..j].contains(v)) {
            return Err(Error::Config(format!("factor `{}` repeats a value id", f.name)));
        }
        if f.dims.is_empty() {
            return Err(Error::Config(format!("factor `{}` reserves no latent dims", f.name)));
        }
        for &d in &f.dims {
            if seen_dims.contains(&d) {
                return Err(Error::Config(format!("latent dim {d} is reserved by two factors")));
            }
            if let Some(n) = n {
                if d >= n {
                    return Err(Error::Config(format!("factor `{}` reserves dim {d} but latent size is {n}", f.name)));
                }
            }
            seen_dims.push(d);
        }
    }
    if let Some(n) = n {
        if n < seen_dims.len() + 1 {
            return Err(Error::Config(format!(
                "latent size {n} leaves no free dims beyond {} reserved",
                seen_dims.len()
            )));
        }
    }
    Ok(())
}

/// Index of the half-open bin `[e_i, e_{i+1})` holding `value`; the last bin
/// is closed on the right.
pub fn discretize_factor(value: f64, edges: &[f64]) -> Result<usize> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Domain("bin edges must be strictly increasing with at least two entries".into()));
    }
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    if !(value >= lo && value <= hi) {
        return Err(Error::OutOfRange { value, low: lo, high: hi });
    }
    let bin = edges.partition_point(|&e| e <= value);
    Ok(bin.saturating_sub(1).min(edges.len() - 2))
}

/// A factor-tagged image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    /// Factor name to value id.
    pub assignment: IndexMap<String, String>,
}

impl Sample {
    pub fn value(&self, factor: &str) -> Option<&str> {
        self.assignment.get(factor).map(String::as_str)
    }
}

/// Value indices in factor order. Keys sort with the first factor varying
/// fastest, so for factors (streak, scene) the order is
/// `(a, x), (b, x), (a, y), (b, y)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartitionKey(pub Vec<usize>);

impl Ord for PartitionKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.iter().rev().cmp(other.0.iter().rev())
    }
}

impl PartialOrd for PartitionKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartitionKey {
    pub fn label(&self, factors: &[FactorSpec]) -> String {
        self.0
            .iter()
            .zip(factors)
            .map(|(&i, f)| f.values[i].as_str())
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Samples grouped by full factor-value tuple, keys in [`PartitionKey`]
/// order. Partition `k` here is `P_{k+1}`.
#[derive(Clone, Debug)]
pub struct PartitionedDataset {
    factors: Vec<FactorSpec>,
    partitions: Vec<(PartitionKey, Vec<Sample>)>,
}

impl fmt::Display for PartitionedDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, (key, samples)) in self.partitions.iter().enumerate() {
            writeln!(f, "P{} {} ({} samples)", k + 1, key.label(&self.factors), samples.len())?;
        }
        Ok(())
    }
}

impl PartitionedDataset {
    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn factor(&self, name: &str) -> Result<(usize, &FactorSpec)> {
        self.factors
            .iter()
            .enumerate()
            .find(|(_, f)| f.name == name)
            .ok_or_else(|| Error::Config(format!("unknown factor `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }

    pub fn key(&self, k: usize) -> &PartitionKey {
        &self.partitions[k].0
    }

    pub fn samples(&self, k: usize) -> &[Sample] {
        &self.partitions[k].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PartitionKey, &[Sample])> {
        self.partitions.iter().map(|(k, s)| (k, s.as_slice()))
    }

    pub fn total_samples(&self) -> usize {
        self.partitions.iter().map(|(_, s)| s.len()).sum()
    }

    pub fn min_partition_size(&self) -> usize {
        self.partitions.iter().map(|(_, s)| s.len()).min().unwrap_or(0)
    }

    /// Splits every partition, moving the last `fraction` of each into a
    /// second dataset with the same keys.
    pub fn split_tail(self, fraction: f64) -> Result<(PartitionedDataset, PartitionedDataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("holdout fraction {fraction} outside [0, 1)")));
        }
        let mut head = Vec::new();
        let mut tail = Vec::new();
        for (key, mut samples) in self.partitions {
            let cut = samples.len() - (samples.len() as f64 * fraction).round() as usize;
            let rest = samples.split_off(cut);
            head.push((key.clone(), samples));
            tail.push((key, rest));
        }
        Ok((
            PartitionedDataset { factors: self.factors.clone(), partitions: head },
            PartitionedDataset { factors: self.factors, partitions: tail },
        ))
    }
}

/// Groups samples by their factor-value tuple. Empty groups are omitted.
pub fn build_partitions(samples: Vec<Sample>, factors: &[FactorSpec]) -> Result<PartitionedDataset> {
    validate_factors(factors, None)?;
    let mut groups: IndexMap<PartitionKey, Vec<Sample>> = IndexMap::new();
    for s in samples {
        let mut key = Vec::with_capacity(factors.len());
        for f in factors {
            let v = s
                .value(&f.name)
                .ok_or_else(|| Error::Validation(format!("sample `{}` has no value for factor `{}`", s.id, f.name)))?;
            let idx = f.value_index(v).ok_or_else(|| {
                Error::Validation(format!("sample `{}` uses undeclared value `{v}` for factor `{}`", s.id, f.name))
            })?;
            key.push(idx);
        }
        groups.entry(PartitionKey(key)).or_default().push(s);
    }
    let mut partitions: Vec<(PartitionKey, Vec<Sample>)> = groups.into_iter().collect();
    partitions.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(PartitionedDataset { factors: factors.to_vec(), partitions })
}

/// Unordered partition pairs `(k, k')`, `k < k'`, whose keys differ only in
/// `factor`, in lexicographic order.
pub fn pair_set(ds: &PartitionedDataset, factor: &str) -> Result<Vec<(usize, usize)>> {
    let (fi, _) = ds.factor(factor)?;
    let mut pairs = Vec::new();
    for a in 0..ds.len() {
        for b in a + 1..ds.len() {
            let (ka, kb) = (&ds.key(a).0, &ds.key(b).0);
            let differ: Vec<usize> = (0..ka.len()).filter(|&i| ka[i] != kb[i]).collect();
            if differ == [fi] {
                pairs.push((a, b));
            }
        }
    }
    Ok(pairs)
}

/// One aligned batch: `indices[k]` holds `B` sample indices into partition
/// `k`; position `i` across partitions forms tuple `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TupleBatch {
    pub indices: Vec<Vec<usize>>,
}

/// One epoch of aligned batches. Each partition is shuffled independently,
/// so the cross-partition pairing is random per `seed`.
pub fn batch_tuples(ds: &PartitionedDataset, batch: usize, seed: u64) -> Result<Vec<TupleBatch>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if ds.is_empty() {
        return Err(Error::Config("dataset has no partitions".into()));
    }
    if let Some((k, (key, s))) = ds.partitions.iter().enumerate().find(|(_, (_, s))| s.len() < batch) {
        return Err(Error::Config(format!(
            "partition P{} ({}) has {} samples, fewer than batch size {batch}",
            k + 1,
            key.label(&ds.factors),
            s.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let orders: Vec<Vec<usize>> = ds
        .partitions
        .iter()
        .map(|(_, s)| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();
    let count = ds.min_partition_size() / batch;
    Ok((0..count)
        .map(|t| TupleBatch { indices: orders.iter().map(|o| o[t * batch..(t + 1) * batch].to_vec()).collect() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> ImageTensor {
        ImageTensor::new(2, 2, 1, vec![0.5; 4]).unwrap()
    }

    fn sample(id: &str, streak: &str, scene: &str) -> Sample {
        Sample {
            id: id.into(),
            image: img(),
            assignment: [("streak".to_string(), streak.to_string()), ("scene".to_string(), scene.to_string())]
                .into_iter()
                .collect(),
        }
    }

    fn factors() -> Vec<FactorSpec> {
        vec![FactorSpec::new("streak", &["LR", "MR"], &[3]), FactorSpec::new("scene", &["SC3", "SC4"], &[6])]
    }

    fn reference() -> PartitionedDataset {
        let mut samples = Vec::new();
        for (i, (r, c)) in [("MR", "SC4"), ("LR", "SC3"), ("LR", "SC4"), ("MR", "SC3")].iter().enumerate() {
            for j in 0..3 {
                samples.push(sample(&format!("{i}-{j}"), r, c));
            }
        }
        build_partitions(samples, &factors()).unwrap()
    }

    #[test]
    fn reference_partitions_and_pairs() {
        let ds = reference();
        assert_eq!(ds.len(), 4);
        let labels: Vec<String> = (0..4).map(|k| ds.key(k).label(ds.factors())).collect();
        assert_eq!(labels, ["LR|SC3", "MR|SC3", "LR|SC4", "MR|SC4"]);
        assert_eq!(pair_set(&ds, "streak").unwrap(), vec![(0, 1), (2, 3)]);
        assert_eq!(pair_set(&ds, "scene").unwrap(), vec![(0, 2), (1, 3)]);
        assert!(pair_set(&ds, "weather").is_err());
    }

    #[test]
    fn single_assignment_gives_one_partition() {
        let samples = (0..5).map(|i| sample(&i.to_string(), "LR", "SC3")).collect();
        let ds = build_partitions(samples, &factors()).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(pair_set(&ds, "streak").unwrap().is_empty());
    }

    #[test]
    fn single_observed_value_has_no_pairs() {
        let f = vec![FactorSpec::new("streak", &["LR"], &[0]), FactorSpec::new("scene", &["SC3", "SC4"], &[1])];
        let ds = build_partitions(vec![sample("a", "LR", "SC3"), sample("b", "LR", "SC4")], &f).unwrap();
        assert!(pair_set(&ds, "streak").unwrap().is_empty());
        assert_eq!(pair_set(&ds, "scene").unwrap().len(), 1);
    }

    #[test]
    fn unknown_value_names_the_sample() {
        let err = build_partitions(vec![sample("odd-one", "HR", "SC3")], &factors()).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("odd-one"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn discretize_examples() {
        let mut f = FactorSpec::new("rain", &["LR"], &[3]);
        f.edges = Some(vec![0.002, 0.003]);
        assert_eq!(f.discretize(0.0025).unwrap(), "LR");
        assert_eq!(discretize_factor(0.0, &[0.0, 1.0, 2.0]).unwrap(), 0);
        assert_eq!(discretize_factor(1.0, &[0.0, 1.0, 2.0]).unwrap(), 1);
        assert_eq!(discretize_factor(2.0, &[0.0, 1.0, 2.0]).unwrap(), 1);
        assert!(matches!(discretize_factor(-0.1, &[0.0, 1.0]), Err(Error::OutOfRange { .. })));
        assert!(matches!(discretize_factor(1.1, &[0.0, 1.0]), Err(Error::OutOfRange { .. })));
        assert!(discretize_factor(0.5, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn batch_tuple_counting_and_determinism() {
        let mut samples = Vec::new();
        for (r, c) in [("LR", "SC3"), ("MR", "SC3"), ("LR", "SC4"), ("MR", "SC4")] {
            for j in 0..100 {
                samples.push(sample(&format!("{r}{c}{j}"), r, c));
            }
        }
        let ds = build_partitions(samples, &factors()).unwrap();
        let epoch = batch_tuples(&ds, 10, 5).unwrap();
        assert_eq!(epoch.len(), 10);
        assert!(epoch.iter().all(|b| b.indices.len() == 4 && b.indices.iter().all(|v| v.len() == 10)));
        assert_eq!(epoch, batch_tuples(&ds, 10, 5).unwrap());
        assert_ne!(epoch, batch_tuples(&ds, 10, 6).unwrap());
        for k in 0..4 {
            let mut all: Vec<usize> = epoch.iter().flat_map(|b| b.indices[k].clone()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
        }
        assert!(matches!(batch_tuples(&ds, 101, 0), Err(Error::Config(_))));
    }

    #[test]
    fn factor_validation() {
        let mut f = factors();
        f[1].dims = vec![3];
        assert!(validate_factors(&f, Some(16)).is_err());
        assert!(validate_factors(&factors(), Some(6)).is_err());
        assert!(validate_factors(&factors(), Some(7)).is_ok());
        assert!(validate_factors(&factors()[..1], Some(1)).is_err());
    }
}
