//! Detection and disentanglement metrics, plus latent export.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{FactorSpec, Sample};
use crate::error::{Error, Result};
use crate::vae::LatentCode;

pub const DEFAULT_MI_BINS: usize = 20;

/// Area under the ROC curve for detecting positives (OOD) as the samples
/// with the *lowest* scores. Ties count one half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::shape("auroc", format!("{} scores vs {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("auroc scores contain NaN".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Domain(format!("auroc needs both classes ({n_pos} positive, {n_neg} negative)")));
    }
    // Rank by descending score so that low scores get high ranks.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mutual information in nats between a discrete label and a continuous
/// value discretized into `bins` equal-width bins over its range.
pub fn mutual_information<L: Eq + std::hash::Hash>(labels: &[L], values: &[f64], bins: usize) -> Result<f64> {
    if labels.len() != values.len() {
        return Err(Error::shape("mutual_information", format!("{} labels vs {} values", labels.len(), values.len())));
    }
    if bins == 0 || values.is_empty() {
        return Err(Error::Domain("mutual information needs values and at least one bin".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("mutual information values must be finite".into()));
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi <= lo {
        return Ok(0.0);
    }
    let bin = |v: f64| (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
    let mut label_ids: HashMap<&L, usize> = HashMap::new();
    for l in labels {
        let next = label_ids.len();
        label_ids.entry(l).or_insert(next);
    }
    let nl = label_ids.len();
    let mut joint = vec![0usize; nl * bins];
    for (l, &v) in labels.iter().zip(values) {
        joint[label_ids[l] * bins + bin(v)] += 1;
    }
    let n = values.len() as f64;
    let pl: Vec<f64> = (0..nl).map(|i| joint[i * bins..(i + 1) * bins].iter().sum::<usize>() as f64 / n).collect();
    let pb: Vec<f64> = (0..bins).map(|b| (0..nl).map(|i| joint[i * bins + b]).sum::<usize>() as f64 / n).collect();
    let mut mi = 0.0;
    for i in 0..nl {
        for b in 0..bins {
            let c = joint[i * bins + b];
            if c > 0 {
                let p = c as f64 / n;
                mi += p * (p / (pl[i] * pb[b])).ln();
            }
        }
    }
    let h_label: f64 = -pl.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    Ok(mi.clamp(0.0, h_label))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorMi {
    pub factor: String,
    /// Designated dims of the factor.
    pub dims: Vec<usize>,
    /// `(dim, mi)` for every latent dim, most informative first.
    pub ranking: Vec<(usize, f64)>,
    pub most_informative: usize,
    pub runner_up: Option<usize>,
    /// MI of the most informative dim.
    pub top: f64,
    /// MI of the runner-up dim.
    pub second: f64,
    /// Whether the most informative dim is one of the factor's dims.
    pub designated_is_top: bool,
}

impl FactorMi {
    /// `top >= ratio * second`.
    pub fn separated(&self, ratio: f64) -> bool {
        self.top >= ratio * self.second
    }
}

/// Ranks every latent dim by its MI with each factor, using the means.
pub fn mi_report(codes: &[LatentCode], samples: &[Sample], factors: &[FactorSpec], bins: usize) -> Result<Vec<FactorMi>> {
    if codes.len() != samples.len() {
        return Err(Error::shape("mi_report", format!("{} codes vs {} samples", codes.len(), samples.len())));
    }
    let Some(n) = codes.first().map(LatentCode::len) else {
        return Err(Error::Domain("mi report needs at least one sample".into()));
    };
    let mut out = Vec::new();
    for f in factors {
        let labels: Vec<&str> = samples
            .iter()
            .map(|s| s.value(&f.name).ok_or_else(|| Error::Validation(format!("sample `{}` lacks factor `{}`", s.id, f.name))))
            .collect::<Result<_>>()?;
        let mut ranking = (0..n)
            .map(|d| {
                let v: Vec<f64> = codes.iter().map(|c| c.mu[d]).collect();
                Ok((d, mutual_information(&labels, &v, bins)?))
            })
            .collect::<Result<Vec<_>>>()?;
        ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let (most_informative, top) = ranking[0];
        let runner = ranking.get(1).copied();
        out.push(FactorMi {
            factor: f.name.clone(),
            dims: f.dims.clone(),
            most_informative,
            runner_up: runner.map(|r| r.0),
            top,
            second: runner.map_or(0.0, |r| r.1),
            designated_is_top: f.dims.contains(&most_informative),
            ranking,
        });
    }
    Ok(out)
}

/// CSV with one row per sample: id, factor values, `mu_*` and `logvar_*`.
pub fn export_latents(codes: &[LatentCode], samples: &[Sample], factors: &[FactorSpec]) -> Result<String> {
    if codes.len() != samples.len() {
        return Err(Error::shape("export_latents", format!("{} codes vs {} samples", codes.len(), samples.len())));
    }
    let n = codes.first().map_or(0, LatentCode::len);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend(factors.iter().map(|f| f.name.clone()));
    header.extend((0..n).map(|d| format!("mu_{d}")));
    header.extend((0..n).map(|d| format!("logvar_{d}")));
    w.write_record(&header).map_err(|e| Error::Validation(e.to_string()))?;
    for (c, s) in codes.iter().zip(samples) {
        let mut row = vec![s.id.clone()];
        row.extend(factors.iter().map(|f| s.value(&f.name).unwrap_or("").to_string()));
        row.extend(c.mu.iter().chain(&c.logvar).map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| Error::Validation(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

/// SVG scatter of latent means on dims `(x, y)`, colored by `factor`.
pub fn scatter_svg(codes: &[LatentCode], samples: &[Sample], x: usize, y: usize, factor: &str) -> Result<String> {
    if codes.len() != samples.len() || codes.is_empty() {
        return Err(Error::shape("scatter_svg", format!("{} codes vs {} samples", codes.len(), samples.len())));
    }
    if let Some(&d) = [x, y].iter().find(|&&d| d >= codes[0].len()) {
        return Err(Error::Domain(format!("dim {d} outside a code of length {}", codes[0].len())));
    }
    let range = |d: usize| {
        let (lo, hi) = codes.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), c| (l.min(c.mu[d]), h.max(c.mu[d])));
        (lo, (hi - lo).max(1e-12))
    };
    let ((x0, xs), (y0, ys)) = (range(x), range(y));
    let (size, pad) = (400.0, 20.0);
    let mut colors: Vec<&str> = Vec::new();
    let mut svg = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}">"#, w = size + 2.0 * pad);
    for (c, s) in codes.iter().zip(samples) {
        let v = s.value(factor).unwrap_or("?");
        let idx = colors.iter().position(|&c| c == v).unwrap_or_else(|| {
            colors.push(v);
            colors.len() - 1
        });
        let px = pad + (c.mu[x] - x0) / xs * size;
        let py = pad + size - (c.mu[y] - y0) / ys * size;
        let _ = write!(svg, r#"<circle cx="{px:.2}" cy="{py:.2}" r="2" fill="{}"><title>{v}</title></circle>"#, PALETTE[idx % PALETTE.len()]);
    }
    for (i, v) in colors.iter().enumerate() {
        let _ = write!(svg, r#"<text x="{pad}" y="{}" fill="{}" font-size="12">{v}</text>"#, pad + 14.0 * (i as f64 + 1.0), PALETTE[i % PALETTE.len()]);
    }
    svg.push_str("</svg>");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        let labels = [true, true, false, false];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn mi_examples() {
        let labels: Vec<u8> = (0..1000).map(|i| (i % 2) as u8).collect();
        let same: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let mi = mutual_information(&labels, &same, DEFAULT_MI_BINS).unwrap();
        assert!((mi - 2f64.ln()).abs() < 1e-9);

        let constant = vec![3.0; 1000];
        assert_eq!(mutual_information(&labels, &constant, DEFAULT_MI_BINS).unwrap(), 0.0);

        let alternating: Vec<f64> = (0..1000).map(|i| ((i / 2) % 2) as f64).collect();
        assert!(mutual_information(&labels, &alternating, DEFAULT_MI_BINS).unwrap() < 1e-9);
    }

    fn sample(id: &str, f: &str) -> Sample {
        Sample {
            id: id.into(),
            image: crate::vae::ImageTensor::new(1, 1, 1, vec![0.0]).unwrap(),
            assignment: [("f".to_string(), f.to_string())].into_iter().collect(),
        }
    }

    #[test]
    fn report_ranks_the_informative_dim_first() {
        let samples: Vec<Sample> = (0..200).map(|i| sample(&i.to_string(), if i % 2 == 0 { "a" } else { "b" })).collect();
        let codes: Vec<LatentCode> = (0..200)
            .map(|i| LatentCode::new(vec![((i * 7) % 13) as f64, (i % 2) as f64 * 5.0], vec![0.0; 2]).unwrap())
            .collect();
        let f = FactorSpec::new("f", &["a", "b"], &[1]);
        let r = mi_report(&codes, &samples, &[f], DEFAULT_MI_BINS).unwrap();
        assert_eq!(r[0].most_informative, 1);
        assert!(r[0].designated_is_top);
        assert!(r[0].separated(3.0));

        let csv = export_latents(&codes[..2], &samples[..2], &[FactorSpec::new("f", &["a", "b"], &[1])]).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "id,f,mu_0,mu_1,logvar_0,logvar_1");
        assert_eq!(csv.lines().count(), 3);
        let svg = scatter_svg(&codes, &samples, 0, 1, "f").unwrap();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>"));
    }
}
