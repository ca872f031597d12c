//! The rule-based loss: reconstruction and regularization rules per
//! partition, adaptation and isolation rules per factor over partition
//! pairs, combined as a weighted mean.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, Bound, NormGrad, Real, Tape, Var};
use crate::data::{pair_set, PartitionedDataset};
use crate::error::{Error, Result};
use crate::logic::{AggregatorConfig, NORMALIZE_EPS};
use crate::vae::{complement, klt_graph, klu_graph, rec_graph, Mode, Vae};

/// Scope of the batch min-max normalization of raw predicate values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// One normalization over all `K * B` samples (for adapt/iso: over all
    /// pairs of the factor).
    #[default]
    Joint,
    /// Separate normalization per partition sub-batch (per pair).
    PerPartition,
}

/// Relative rule weights. `adapt` and `iso` apply to every factor; the
/// weights are rescaled to sum to 1 over all `2 + 2|F|` components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleWeights {
    pub rec: f64,
    pub reg: f64,
    pub adapt: f64,
    pub iso: f64,
}

impl Default for RuleWeights {
    fn default() -> Self {
        RuleWeights { rec: 1.0, reg: 1.0, adapt: 1.0, iso: 1.0 }
    }
}

impl RuleWeights {
    /// Reconstruction and regularization only.
    pub fn without_disentanglement() -> Self {
        RuleWeights { adapt: 0.0, iso: 0.0, ..Default::default() }
    }
}

/// Adaptation/isolation wiring for one factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorRule {
    pub name: String,
    pub dims: Vec<usize>,
    pub complement: Vec<usize>,
    /// Partition index pairs differing only in this factor.
    pub pairs: Vec<(usize, usize)>,
}

/// Compiled rules for a fixed partition layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub factors: Vec<FactorRule>,
    pub partitions: usize,
    pub latent_size: usize,
    pub aggregator: AggregatorConfig,
    pub normalization: Normalization,
    pub norm_grad: NormGrad,
    raw_weights: RuleWeights,
    coef: Coefficients,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Coefficients {
    rec: f64,
    reg: f64,
    adapt: f64,
    iso: f64,
}

impl RuleSet {
    pub fn new(
        factors: Vec<FactorRule>,
        partitions: usize,
        latent_size: usize,
        aggregator: AggregatorConfig,
        weights: RuleWeights,
    ) -> Result<Self> {
        aggregator.validate()?;
        if partitions == 0 {
            return Err(Error::Config("rules need at least one partition".into()));
        }
        for f in &factors {
            if f.dims.is_empty() || f.pairs.is_empty() {
                return Err(Error::Config(format!("factor `{}` needs latent dims and partition pairs", f.name)));
            }
            if f.complement.is_empty() {
                return Err(Error::Config(format!("factor `{}` reserves every latent dim", f.name)));
            }
            if f.dims.iter().chain(&f.complement).any(|&d| d >= latent_size) {
                return Err(Error::Config(format!("factor `{}` dims exceed latent size {latent_size}", f.name)));
            }
            if f.pairs.iter().any(|&(a, b)| a >= partitions || b >= partitions || a == b) {
                return Err(Error::Config(format!("factor `{}` has an invalid partition pair", f.name)));
            }
        }
        let w = weights;
        if [w.rec, w.reg, w.adapt, w.iso].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("rule weights must be finite and >= 0".into()));
        }
        let nf = factors.len() as f64;
        let sum = w.rec + w.reg + nf * (w.adapt + w.iso);
        if !(sum > 0.0) {
            return Err(Error::Config("rule weights sum to zero".into()));
        }
        let coef = Coefficients { rec: w.rec / sum, reg: w.reg / sum, adapt: w.adapt / sum, iso: w.iso / sum };
        Ok(RuleSet {
            factors,
            partitions,
            latent_size,
            aggregator,
            normalization: Normalization::Joint,
            norm_grad: NormGrad::Full,
            raw_weights: weights,
            coef,
        })
    }

    /// Rules for every declared factor of `ds`, pairs from [`pair_set`].
    pub fn from_dataset(
        ds: &PartitionedDataset,
        latent_size: usize,
        aggregator: AggregatorConfig,
        weights: RuleWeights,
    ) -> Result<Self> {
        crate::data::validate_factors(ds.factors(), Some(latent_size))?;
        let factors = ds
            .factors()
            .iter()
            .map(|f| {
                Ok(FactorRule {
                    name: f.name.clone(),
                    dims: f.dims.clone(),
                    complement: complement(&f.dims, latent_size),
                    pairs: pair_set(ds, &f.name)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        RuleSet::new(factors, ds.len(), latent_size, aggregator, weights)
    }

    pub fn with_normalization(mut self, normalization: Normalization, norm_grad: NormGrad) -> Self {
        self.normalization = normalization;
        self.norm_grad = norm_grad;
        self
    }

    pub fn weights(&self) -> RuleWeights {
        self.raw_weights
    }

    /// Normalized coefficients `(rec, reg, adapt per factor, iso per factor)`.
    pub fn coefficients(&self) -> (f64, f64, f64, f64) {
        (self.coef.rec, self.coef.reg, self.coef.adapt, self.coef.iso)
    }

    /// Weighted mean of components, as used for `total`.
    pub fn combine(&self, rec: f64, reg: f64, adapt: &[f64], iso: &[f64]) -> f64 {
        let c = &self.coef;
        c.rec * rec + c.reg * reg + c.adapt * adapt.iter().sum::<f64>() + c.iso * iso.iter().sum::<f64>()
    }
}

/// Per-rule satisfaction values for one batch, all in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recloss: f64,
    pub regloss: f64,
    pub adaptloss: IndexMap<String, f64>,
    pub isoloss: IndexMap<String, f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Component-wise mean of several breakdowns with the same factors.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(LossBreakdown {
            recloss: avg(&|b| b.recloss),
            regloss: avg(&|b| b.regloss),
            adaptloss: first.adaptloss.keys().map(|k| (k.clone(), avg(&|b| b.adaptloss[k]))).collect(),
            isoloss: first.isoloss.keys().map(|k| (k.clone(), avg(&|b| b.isoloss[k]))).collect(),
            total: avg(&|b| b.total),
        })
    }

    /// `(name, value)` pairs in a fixed column order.
    pub fn columns(&self) -> Vec<(String, f64)> {
        let mut out = vec![("recloss".to_string(), self.recloss), ("regloss".to_string(), self.regloss)];
        out.extend(self.adaptloss.iter().map(|(k, v)| (format!("adaptloss_{k}"), *v)));
        out.extend(self.isoloss.iter().map(|(k, v)| (format!("isoloss_{k}"), *v)));
        out.push(("total".to_string(), self.total));
        out
    }
}

/// Graph handles of every rule output.
pub struct LossVars {
    /// `[K*B]` unnormalized reconstruction errors and prior KLs.
    pub rec_raw: Var,
    pub klu_raw: Var,
    pub recloss: Var,
    pub regloss: Var,
    pub adaptloss: Vec<Var>,
    pub isoloss: Vec<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, t: &Tape<T>, rules: &RuleSet) -> LossBreakdown {
        let v = |x: Var| t.scalar(x).to_f64().unwrap_or(f64::NAN);
        LossBreakdown {
            recloss: v(self.recloss),
            regloss: v(self.regloss),
            adaptloss: rules.factors.iter().zip(&self.adaptloss).map(|(f, &x)| (f.name.clone(), v(x))).collect(),
            isoloss: rules.factors.iter().zip(&self.isoloss).map(|(f, &x)| (f.name.clone(), v(x))).collect(),
            total: v(self.total),
        }
    }
}

fn normalize_groups<T: Real>(t: &mut Tape<T>, raw: Var, groups: usize, per_group: bool, mode: NormGrad) -> Result<Var> {
    let eps = T::lit(NORMALIZE_EPS);
    if !per_group || groups == 1 {
        return t.minmax_normalize(raw, eps, mode);
    }
    let b = t.shape(raw)[0] / groups;
    let parts = (0..groups)
        .map(|g| {
            let r = t.rows(raw, g * b, b)?;
            t.minmax_normalize(r, eps, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    t.concat(&parts)
}

/// `exists_k forall_{i in P_k} truth[k*B + i]` over `K` equal sub-batches.
pub fn partition_aggregate<T: Real>(t: &mut Tape<T>, truth: Var, partitions: usize, p: f64) -> Result<Var> {
    let n = t.shape(truth)[0];
    if partitions == 0 || n % partitions != 0 || n == 0 {
        return Err(Error::Contract(format!("{n} truth values do not split into {partitions} sub-batches")));
    }
    let b = n / partitions;
    let per = (0..partitions)
        .map(|k| {
            let r = t.rows(truth, k * b, b)?;
            t.forall(r, T::lit(p))
        })
        .collect::<Result<Vec<_>>>()?;
    let all = t.concat(&per)?;
    t.exists(all, T::lit(p))
}

/// Product over pairs of `forall` (optionally negated) over each pair's
/// `B` truth values, laid out pair-major.
pub fn pair_aggregate<T: Real>(t: &mut Tape<T>, truth: Var, pairs: usize, p: f64, negate: bool) -> Result<Var> {
    let n = t.shape(truth)[0];
    if pairs == 0 || n % pairs != 0 || n == 0 {
        return Err(Error::Contract(format!("{n} truth values do not split into {pairs} pairs")));
    }
    let b = n / pairs;
    let mut acc: Option<Var> = None;
    for q in 0..pairs {
        let r = t.rows(truth, q * b, b)?;
        let f = t.forall(r, T::lit(p))?;
        let v = if negate { t.one_minus(f) } else { f };
        acc = Some(match acc {
            None => v,
            Some(a) => t.mul(a, v)?,
        });
    }
    Ok(acc.expect("pairs >= 1"))
}

/// Raw per-sample predicate values for a batch of `K` sub-batches of `B`.
pub struct RawPredicates {
    /// `[K*B]` reconstruction errors.
    pub rec: Var,
    /// `[K*B]` KL to the prior over all dims.
    pub klu: Var,
    /// `[K*B, n]` posterior means and log-variances.
    pub mu: Var,
    pub logvar: Var,
}

fn pair_klt<T: Real>(t: &mut Tape<T>, raw: &RawPredicates, pairs: &[(usize, usize)], dims: &[usize], b: usize) -> Result<Var> {
    let mut parts = Vec::with_capacity(pairs.len());
    for &(k, k2) in pairs {
        let mut slice = |src: Var, part: usize| -> Result<Var> {
            let r = t.rows(src, part * b, b)?;
            t.cols(r, dims)
        };
        let (ma, la) = (slice(raw.mu, k)?, slice(raw.logvar, k)?);
        let (mb, lb) = (slice(raw.mu, k2)?, slice(raw.logvar, k2)?);
        parts.push(klt_graph(t, ma, la, mb, lb)?);
    }
    t.concat(&parts)
}

/// Builds every rule and the weighted total from raw predicate values.
pub fn compose<T: Real>(t: &mut Tape<T>, rules: &RuleSet, raw: &RawPredicates) -> Result<LossVars> {
    let n = t.shape(raw.rec)[0];
    let k = rules.partitions;
    if n == 0 || n % k != 0 {
        return Err(Error::Contract(format!("batch of {n} does not hold {k} equal non-empty sub-batches")));
    }
    let b = n / k;
    let p = rules.aggregator.p;
    let per = rules.normalization == Normalization::PerPartition;
    let mode = rules.norm_grad;

    let rec_n = normalize_groups(t, raw.rec, k, per, mode)?;
    let recloss = partition_aggregate(t, rec_n, k, p)?;
    let klu_n = normalize_groups(t, raw.klu, k, per, mode)?;
    let regloss = partition_aggregate(t, klu_n, k, p)?;

    let mut adaptloss = Vec::new();
    let mut isoloss = Vec::new();
    for f in &rules.factors {
        let np = f.pairs.len();
        let on = pair_klt(t, raw, &f.pairs, &f.dims, b)?;
        let on = normalize_groups(t, on, np, per, mode)?;
        adaptloss.push(pair_aggregate(t, on, np, p, true)?);
        let off = pair_klt(t, raw, &f.pairs, &f.complement, b)?;
        let off = normalize_groups(t, off, np, per, mode)?;
        isoloss.push(pair_aggregate(t, off, np, p, false)?);
    }

    let c = rules.coef;
    let mut terms = vec![t.scale(recloss, T::lit(c.rec)), t.scale(regloss, T::lit(c.reg))];
    for (&a, &i) in adaptloss.iter().zip(&isoloss) {
        terms.push(t.scale(a, T::lit(c.adapt)));
        terms.push(t.scale(i, T::lit(c.iso)));
    }
    let mut total = terms[0];
    for &term in &terms[1..] {
        total = t.add(total, term)?;
    }
    Ok(LossVars { rec_raw: raw.rec, klu_raw: raw.klu, recloss, regloss, adaptloss, isoloss, total })
}

/// Full forward graph for one tuple batch: encode, sample, decode, raw
/// predicates, rules. `x` is `[K*B, C, H, W]` partition-major, `noise` is
/// `[K*B, n]` standard normal.
pub fn loss_graph<T: Real>(
    t: &mut Tape<T>,
    bound: &Bound,
    vae: &Vae<T>,
    rules: &RuleSet,
    x: Var,
    noise: Var,
    mode: Mode,
) -> Result<(LossVars, Vec<(usize, BnStats<f64>)>)> {
    if rules.latent_size != vae.latent_size() {
        return Err(Error::Contract(format!(
            "rules expect latent size {}, model has {}",
            rules.latent_size,
            vae.latent_size()
        )));
    }
    let enc = vae.encode_graph(t, bound, x, mode)?;
    let z = Vae::sample_graph(t, enc.mu, enc.logvar, noise)?;
    let xhat = vae.decode_graph(t, bound, z)?;
    let raw = RawPredicates {
        rec: rec_graph(t, x, xhat)?,
        klu: klu_graph(t, enc.mu, enc.logvar)?,
        mu: enc.mu,
        logvar: enc.logvar,
    };
    Ok((compose(t, rules, &raw)?, enc.bn_stats))
}

/// Constant `[rows, cols]` tensor from row-major `f64` data.
pub fn constant_matrix<T: Real>(t: &mut Tape<T>, rows: usize, cols: usize, data: &[f64]) -> Result<Var> {
    if data.len() != rows * cols {
        return Err(Error::shape("constant_matrix", format!("{} values for {rows}x{cols}", data.len())));
    }
    let v: Vec<T> = data.iter().map(|&x| T::lit(x)).collect();
    Ok(t.constant(ArrayD::from_shape_vec(IxDyn(&[rows, cols]), v).expect("checked length")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::{exists, forall, TruthTensor};

    fn vec1(t: &mut Tape<f64>, v: &[f64]) -> Var {
        t.constant(ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap())
    }

    fn two_factor_rules(n: usize) -> RuleSet {
        let f = |name: &str, d: usize, pairs: Vec<(usize, usize)>| FactorRule {
            name: name.into(),
            dims: vec![d],
            complement: complement(&[d], n),
            pairs,
        };
        RuleSet::new(
            vec![f("streak", 0, vec![(0, 1), (2, 3)]), f("scene", 1, vec![(0, 2), (1, 3)])],
            4,
            n,
            AggregatorConfig::default(),
            RuleWeights::default(),
        )
        .unwrap()
    }

    #[test]
    fn default_coefficient_is_one_sixth_for_two_factors() {
        let r = two_factor_rules(3);
        let (a, b, c, d) = r.coefficients();
        for v in [a, b, c, d] {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
        assert!((r.combine(0.6, 0.6, &[0.6, 0.6], &[0.6, 0.6]) - 0.6).abs() < 1e-12);
        assert_eq!(r.combine(0.0, 0.0, &[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn ablation_weights_renormalize() {
        let mut r = two_factor_rules(3);
        r = RuleSet::new(r.factors, 4, 3, AggregatorConfig::default(), RuleWeights::without_disentanglement()).unwrap();
        assert_eq!(r.coefficients(), (0.5, 0.5, 0.0, 0.0));
        let zero = RuleWeights { rec: 0.0, reg: 0.0, adapt: 0.0, iso: 0.0 };
        assert!(RuleSet::new(vec![], 4, 3, AggregatorConfig::default(), zero).is_err());
    }

    #[test]
    fn partition_aggregate_matches_hand_composition() {
        let mut t = Tape::<f64>::new();
        let vals = [0.1, 0.9, 0.4, 0.4, 0.0, 1.0, 0.7, 0.2];
        let v = vec1(&mut t, &vals);
        let got_var = partition_aggregate(&mut t, v, 4, 2.0).unwrap();
        let got = t.scalar(got_var);
        let cfg = AggregatorConfig::default();
        let per: Vec<f64> = vals
            .chunks(2)
            .map(|c| forall(&TruthTensor::new(c.to_vec()).unwrap(), cfg).unwrap())
            .collect();
        let mean_sq = per.iter().map(|a| a * a).sum::<f64>() / 4.0;
        assert!((got - mean_sq.sqrt()).abs() < 1e-12);
        assert!((got - exists(&TruthTensor::new(per).unwrap(), cfg).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pair_aggregate_examples() {
        let mut t = Tape::<f64>::new();
        let ones = vec1(&mut t, &[1.0; 6]);
        let zeros = vec1(&mut t, &[0.0; 6]);
        // No adaptation: everything at the batch minimum.
        let a = pair_aggregate(&mut t, zeros, 2, 2.0, true).unwrap();
        assert_eq!(t.scalar(a), 1.0);
        // Full adaptation.
        let a = pair_aggregate(&mut t, ones, 2, 2.0, true).unwrap();
        assert_eq!(t.scalar(a), 0.0);
        // Isolation examples.
        let i = pair_aggregate(&mut t, zeros, 2, 2.0, false).unwrap();
        assert_eq!(t.scalar(i), 0.0);
        let i = pair_aggregate(&mut t, ones, 3, 2.0, false).unwrap();
        assert_eq!(t.scalar(i), 1.0);
        // Product over two pairs.
        let vals = [0.2, 0.6, 0.5, 0.9];
        let v = vec1(&mut t, &vals);
        let got_var = pair_aggregate(&mut t, v, 2, 2.0, false).unwrap();
        let got = t.scalar(got_var);
        let cfg = AggregatorConfig::default();
        let v1 = forall(&TruthTensor::new(vals[..2].to_vec()).unwrap(), cfg).unwrap();
        let v2 = forall(&TruthTensor::new(vals[2..].to_vec()).unwrap(), cfg).unwrap();
        assert!((got - v1 * v2).abs() < 1e-12);
        let negated_var = pair_aggregate(&mut t, v, 2, 2.0, true).unwrap();
        let negated = t.scalar(negated_var);
        assert!((negated - (1.0 - v1) * (1.0 - v2)).abs() < 1e-12);
    }

    fn raw(t: &mut Tape<f64>, rec: &[f64], klu: &[f64], mu: &[f64], lv: &[f64], n: usize) -> RawPredicates {
        let rows = rec.len();
        RawPredicates {
            rec: vec1(t, rec),
            klu: vec1(t, klu),
            mu: constant_matrix(t, rows, n, mu).unwrap(),
            logvar: constant_matrix(t, rows, n, lv).unwrap(),
        }
    }

    #[test]
    fn perfect_reconstruction_and_prior_codes_give_zero() {
        let mut t = Tape::<f64>::new();
        let rules = two_factor_rules(3);
        let r = raw(&mut t, &[0.0; 8], &[0.0; 8], &[0.0; 24], &[0.0; 24], 3);
        let l = compose(&mut t, &rules, &r).unwrap();
        let b = l.breakdown(&t, &rules);
        assert_eq!(b.recloss, 0.0);
        assert_eq!(b.regloss, 0.0);
        // Identical codes everywhere: adaptation fully unsatisfied, isolation perfect.
        assert_eq!(b.adaptloss["streak"], 1.0);
        assert_eq!(b.isoloss["scene"], 0.0);
        assert!((b.total - rules.combine(0.0, 0.0, &[1.0, 1.0], &[0.0, 0.0])).abs() < 1e-12);
    }

    #[test]
    fn singleton_batch_normalizes_to_zero() {
        let rules = RuleSet::new(vec![], 1, 2, AggregatorConfig::default(), RuleWeights::default()).unwrap();
        let mut t = Tape::<f64>::new();
        let r = raw(&mut t, &[0.37], &[1.2], &[0.3, -0.1], &[0.2, 0.0], 2);
        let b = compose(&mut t, &rules, &r).unwrap().breakdown(&t, &rules);
        assert_eq!((b.recloss, b.regloss, b.total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn regloss_matches_hand_composition() {
        let rules = RuleSet::new(vec![], 2, 1, AggregatorConfig::default(), RuleWeights::default()).unwrap();
        let mut t = Tape::<f64>::new();
        let klu = [0.5, 1.5, 2.5, 4.5];
        let r = raw(&mut t, &[1.0, 1.0, 1.0, 1.0], &klu, &[0.0; 4], &[0.0; 4], 1);
        let b = compose(&mut t, &rules, &r).unwrap().breakdown(&t, &rules);
        // Normalized: {0, 0.25, 0.5, 1}.
        let f1 = 1.0 - ((1.0 + 0.75f64.powi(2)) / 2.0).sqrt();
        let f2 = 1.0 - ((0.25 + 0.0) / 2.0f64).sqrt();
        let want = ((f1 * f1 + f2 * f2) / 2.0).sqrt();
        assert!((b.regloss - want).abs() < 1e-7, "{} vs {want}", b.regloss);
        assert_eq!(b.recloss, 0.0);
    }

    #[test]
    fn adapt_is_monotone_in_designated_separation() {
        let rules = two_factor_rules(3);
        let mut prev = f64::INFINITY;
        for shift in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let base = [0.1, 0.3, -0.2, 0.05, 0.0, 0.25, -0.1, 0.15];
            let mut mu = vec![0.0; 24];
            for (i, b) in base.iter().enumerate() {
                // Sample i sits in partition i / 2; partitions 1 and 3 are the
                // second member of each streak pair and move on dim 0.
                mu[i * 3] = b + if (i / 2) % 2 == 1 { shift } else { 0.0 };
                mu[i * 3 + 2] = b * 0.5;
            }
            let mut t = Tape::<f64>::new();
            let r = raw(&mut t, &[0.1; 8], &[0.1; 8], &mu, &[0.0; 24], 3);
            let b = compose(&mut t, &rules, &r).unwrap().breakdown(&t, &rules);
            assert!(b.adaptloss["streak"] <= prev + 1e-12, "shift {shift}: {} > {prev}", b.adaptloss["streak"]);
            prev = b.adaptloss["streak"];
        }
    }

    #[test]
    fn iso_is_monotone_in_complement_drift() {
        let rules = two_factor_rules(3);
        let mut prev = -1.0;
        for drift in [0.0, 0.5, 1.0, 2.0] {
            let mut mu = vec![0.0; 24];
            for i in 0..8 {
                mu[i * 3] = 0.1 * i as f64;
                // Dim 2 is in the streak factor's complement; the second
                // partition of pair (0, 1) drifts, one sample more than the rest.
                let extra = if i == 2 { drift } else { 0.0 };
                mu[i * 3 + 2] = 0.05 * (i % 2) as f64 + if (i / 2) == 1 { drift * 0.5 + extra } else { 0.0 };
            }
            let mut t = Tape::<f64>::new();
            let r = raw(&mut t, &[0.1; 8], &[0.1; 8], &mu, &[0.0; 24], 3);
            let b = compose(&mut t, &rules, &r).unwrap().breakdown(&t, &rules);
            assert!(b.isoloss["streak"] >= prev - 1e-12, "drift {drift}: {} < {prev}", b.isoloss["streak"]);
            prev = b.isoloss["streak"];
        }
    }

    #[test]
    fn uneven_batch_is_a_contract_error() {
        let rules = two_factor_rules(3);
        let mut t = Tape::<f64>::new();
        let r = raw(&mut t, &[0.1; 6], &[0.1; 6], &[0.0; 18], &[0.0; 18], 3);
        assert!(matches!(compose(&mut t, &rules, &r), Err(Error::Contract(_))));
    }

    #[test]
    fn breakdown_mean_and_columns() {
        let mk = |v: f64| LossBreakdown {
            recloss: v,
            regloss: v,
            adaptloss: [("a".to_string(), v)].into_iter().collect(),
            isoloss: [("a".to_string(), v)].into_iter().collect(),
            total: v,
        };
        let m = LossBreakdown::mean(&[mk(0.2), mk(0.4)]).unwrap();
        assert!((m.adaptloss["a"] - 0.3).abs() < 1e-15);
        let names: Vec<String> = m.columns().into_iter().map(|(k, _)| k).collect();
        assert_eq!(names, ["recloss", "regloss", "adaptloss_a", "isoloss_a", "total"]);
        assert!(LossBreakdown::mean(&[]).is_none());
    }
}
