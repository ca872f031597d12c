//! Per-factor OOD reasoners: k-means over calibration means on the factor's
//! latent dims, a diagonal Gaussian mixture built from the clusters, and a
//! density threshold.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FactorSpec, Sample};
use crate::error::{Error, Result};
use crate::train::stream_rng;
use crate::vae::{LatentCode, Vae};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_QUANTILE: f64 = 0.05;
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Inertia after every assignment step.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's algorithm from k-means++ seeding. Stops at an assignment
/// fixpoint or after `max_iters` updates. Fails if the inertia ever rises.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Domain("k must be >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::Domain(format!("{} points cannot form {k} clusters", points.len())));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Domain("points must be finite vectors of one non-zero length".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let w: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let next = match WeightedIndex::new(&w) {
            Ok(dist) => dist.sample(&mut rng),
            // Every point already coincides with a center.
            Err(_) => rng.random_range(0..points.len()),
        };
        centers.push(points[next].clone());
    }

    let mut assignments = vec![usize::MAX; points.len()];
    let mut inertia = Vec::new();
    for _ in 0..=max_iters {
        let mut changed = false;
        let mut total = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (c, dist) = nearest(p, &centers);
            total += dist;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if let Some(&prev) = inertia.last() {
            if total > prev * (1.0 + 1e-12) + 1e-300 {
                return Err(Error::Contract(format!("k-means inertia rose from {prev} to {total}")));
            }
        }
        inertia.push(total);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centers.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    Ok(KMeans { centers, assignments, inertia })
}

/// One diagonal Gaussian of a mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub center: Vec<f64>,
    pub variance: Vec<f64>,
    pub weight: f64,
}

impl Component {
    pub fn density(&self, x: &[f64]) -> f64 {
        self.center
            .iter()
            .zip(&self.variance)
            .zip(x)
            .map(|((c, v), x)| (-(x - c).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt())
            .product()
    }
}

/// One component per center: per-dimension variance of the points nearest
/// to it (floored), weight equal to its share of points. Centers that own no
/// point are dropped.
pub fn fit_gmm(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Result<Vec<Component>> {
    if points.is_empty() || centers.is_empty() {
        return Err(Error::Domain("mixture fit needs points and centers".into()));
    }
    let d = centers[0].len();
    let mut members: Vec<Vec<&Vec<f64>>> = vec![Vec::new(); centers.len()];
    for p in points {
        if p.len() != d {
            return Err(Error::shape("fit_gmm", format!("point of length {} vs centers of {d}", p.len())));
        }
        members[nearest(p, centers).0].push(p);
    }
    let n = points.len() as f64;
    let mut out = Vec::new();
    for (c, m) in centers.iter().zip(&members) {
        if m.is_empty() {
            log::warn!("dropping empty mixture component at {c:?}");
            continue;
        }
        let cnt = m.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| m.iter().map(|p| p[j]).sum::<f64>() / cnt).collect();
        let variance = (0..d)
            .map(|j| (m.iter().map(|p| (p[j] - mean[j]).powi(2)).sum::<f64>() / cnt).max(VARIANCE_FLOOR))
            .collect();
        out.push(Component { center: c.clone(), variance, weight: cnt / n });
    }
    let total: f64 = out.iter().map(|c| c.weight).sum();
    for c in &mut out {
        c.weight /= total;
    }
    Ok(out)
}

/// Mixture density at `x`.
pub fn mixture_density(components: &[Component], x: &[f64]) -> f64 {
    components.iter().map(|c| c.weight * c.density(x)).sum()
}

/// Linear-interpolated `q`-quantile (`q` in `[0, 1]`) of `values`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("quantile of an empty set".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("quantile {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_digest: Option<String>,
    pub checkpoint_digest: Option<String>,
    pub seed: u64,
    pub calibration_samples: usize,
}

/// A calibrated reasoner for one factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasonerModel {
    pub factor: String,
    pub dims: Vec<usize>,
    pub components: Vec<Component>,
    pub threshold: f64,
    pub quantile: f64,
    pub provenance: Provenance,
}

impl ReasonerModel {
    pub fn validate(&self) -> Result<()> {
        let w: f64 = self.components.iter().map(|c| c.weight).sum();
        if self.components.is_empty() || (w - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("reasoner `{}` weights sum to {w}", self.factor)));
        }
        if self.components.iter().any(|c| {
            c.center.len() != self.dims.len()
                || c.variance.len() != self.dims.len()
                || c.variance.iter().any(|&v| !(v >= VARIANCE_FLOOR))
        }) {
            return Err(Error::Validation(format!("reasoner `{}` has a malformed component", self.factor)));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Validation(format!("reasoner `{}` threshold must be >= 0", self.factor)));
        }
        Ok(())
    }

    /// Mixture density at the code's mean restricted to the factor dims.
    pub fn score(&self, code: &LatentCode) -> Result<f64> {
        if let Some(&d) = self.dims.iter().find(|&&d| d >= code.len()) {
            return Err(Error::Domain(format!("code of length {} lacks dim {d}", code.len())));
        }
        let x: Vec<f64> = self.dims.iter().map(|&d| code.mu[d]).collect();
        Ok(mixture_density(&self.components, &x))
    }

    /// `(density < threshold, density)`.
    pub fn is_ood(&self, code: &LatentCode) -> Result<(bool, f64)> {
        let d = self.score(code)?;
        Ok((d < self.threshold, d))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable reasoner")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: ReasonerModel = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        r.validate()?;
        Ok(r)
    }
}

/// Fits a reasoner from calibration codes. `k` defaults to the number of
/// observed values of the factor.
pub fn calibrate_codes(
    codes: &[LatentCode],
    factor: &FactorSpec,
    k: Option<usize>,
    q: f64,
    seed: u64,
) -> Result<ReasonerModel> {
    let k = k.unwrap_or(factor.values.len());
    if codes.len() < k {
        return Err(Error::Domain(format!("{} calibration points for {k} clusters", codes.len())));
    }
    let points: Vec<Vec<f64>> = codes
        .iter()
        .map(|c| crate::vae::project(c, &factor.dims).map(|p| p.mu))
        .collect::<Result<_>>()?;
    let km = kmeans(&points, k, seed, DEFAULT_MAX_ITERS)?;
    let components = fit_gmm(&points, &km.centers)?;
    let densities: Vec<f64> = points.iter().map(|p| mixture_density(&components, p)).collect();
    let model = ReasonerModel {
        factor: factor.name.clone(),
        dims: factor.dims.clone(),
        components,
        threshold: quantile(&densities, q)?,
        quantile: q,
        provenance: Provenance { seed, calibration_samples: codes.len(), ..Default::default() },
    };
    model.validate()?;
    Ok(model)
}

/// Encodes the calibration samples and fits a reasoner for `factor`.
pub fn calibrate(
    vae: &Vae<f32>,
    samples: &[Sample],
    factor: &FactorSpec,
    k: Option<usize>,
    q: f64,
    seed: u64,
) -> Result<ReasonerModel> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let codes = vae.encode(&images)?;
    calibrate_codes(&codes, factor, k, q, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn kmeans_examples() {
        let r = kmeans(&pts(&[0.0, 0.0, 10.0, 10.0]), 2, 0, 100).unwrap();
        let mut c: Vec<f64> = r.centers.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);

        let p = pts(&[1.0, 2.0, 6.0]);
        assert_eq!(kmeans(&p, 1, 3, 100).unwrap().centers, vec![vec![3.0]]);
        assert!(kmeans(&p, 4, 0, 10).is_err());
        assert!(kmeans(&p, 0, 0, 10).is_err());
    }

    #[test]
    fn kmeans_handles_duplicates() {
        let p = pts(&[1.0, 1.0, 5.0, 5.0, 5.0, 9.0]);
        for seed in 0..20 {
            let r = kmeans(&p, 3, seed, 100).unwrap();
            let mut c: Vec<f64> = r.centers.iter().map(|c| c[0]).collect();
            c.sort_by(f64::total_cmp);
            assert_eq!(c, vec![1.0, 5.0, 9.0], "seed {seed}");
        }
    }

    #[test]
    fn gmm_examples() {
        let mut rng = stream_rng(7, 0);
        let p: Vec<Vec<f64>> = (0..1000).map(|_| vec![StandardNormal.sample(&mut rng)]).collect();
        let g = fit_gmm(&p, &[vec![0.0]]).unwrap();
        assert!((g[0].variance[0] - 1.0).abs() < 0.1);

        let p = pts(&[0.0, 1.0, 10.0, 11.0]);
        let g = fit_gmm(&p, &[vec![0.5], vec![10.5]]).unwrap();
        assert_eq!(g.iter().map(|c| c.weight).collect::<Vec<_>>(), vec![0.5, 0.5]);

        let g = fit_gmm(&pts(&[0.0, 5.0, 6.0]), &[vec![0.0], vec![5.5]]).unwrap();
        assert_eq!(g[0].variance, vec![VARIANCE_FLOOR]);

        let g = fit_gmm(&pts(&[0.0, 1.0]), &[vec![0.5], vec![100.0]]).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].weight, 1.0);
    }

    fn model(components: Vec<Component>, threshold: f64) -> ReasonerModel {
        ReasonerModel {
            factor: "f".into(),
            dims: vec![0],
            components,
            threshold,
            quantile: 0.05,
            provenance: Provenance::default(),
        }
    }

    fn unit(center: f64, weight: f64) -> Component {
        Component { center: vec![center], variance: vec![1.0], weight }
    }

    #[test]
    fn score_examples() {
        let peak = 1.0 / (2.0 * PI).sqrt();
        let code = |m: f64| LatentCode::new(vec![m], vec![0.0]).unwrap();
        let m = model(vec![unit(0.0, 1.0)], 0.0);
        assert!((m.score(&code(0.0)).unwrap() - 0.39894).abs() < 1e-5);

        let two = model(vec![unit(-50.0, 0.5), unit(50.0, 0.5)], 0.0);
        assert!((two.score(&code(50.0)).unwrap() - 0.5 * peak).abs() < 1e-12);
        let swapped = model(vec![unit(50.0, 0.5), unit(-50.0, 0.5)], 0.0);
        assert_eq!(two.score(&code(3.0)).unwrap(), swapped.score(&code(3.0)).unwrap());

        assert!(m.score(&LatentCode::new(vec![], vec![]).unwrap_or(LatentCode::prior(0))).is_err());
    }

    #[test]
    fn is_ood_boundaries() {
        let code = |m: f64| LatentCode::new(vec![m], vec![0.0]).unwrap();
        let base = model(vec![unit(0.0, 1.0)], 0.0);
        let tau = base.score(&code(1.0)).unwrap();
        let m = model(vec![unit(0.0, 1.0)], tau);
        assert!(!m.is_ood(&code(1.0)).unwrap().0);
        assert!(m.is_ood(&code(40.0)).unwrap().0);
        assert!(!base.is_ood(&code(40.0)).unwrap().0);
    }

    #[test]
    fn quantile_boundaries() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&v, 1.0).unwrap(), 4.0);
        assert!((quantile(&v, 0.5).unwrap() - 2.5).abs() < 1e-15);
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn calibration_is_deterministic_and_q0_flags_nothing() {
        let mut rng = stream_rng(1, 0);
        let codes: Vec<LatentCode> = (0..200)
            .map(|i| {
                let c = if i % 2 == 0 { -2.0 } else { 2.0 };
                let x: f64 = StandardNormal.sample(&mut rng);
                LatentCode::new(vec![0.0, c + 0.3 * x], vec![0.0, 0.0]).unwrap()
            })
            .collect();
        let f = FactorSpec::new("f", &["a", "b"], &[1]);
        let a = calibrate_codes(&codes, &f, None, 0.0, 3).unwrap();
        let b = calibrate_codes(&codes, &f, None, 0.0, 3).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.components.len(), 2);
        assert!(codes.iter().all(|c| !a.is_ood(c).unwrap().0));
        assert!(calibrate_codes(&codes[..1], &f, None, 0.05, 0).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        a.save(&p).unwrap();
        assert_eq!(ReasonerModel::load(&p).unwrap(), a);
    }
}
