//! Two-factor synthetic images: additive diagonal streaks of banded
//! amplitude over one of three deterministic background scenes.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{build_partitions, validate_factors, FactorSpec, PartitionedDataset, Sample};
use crate::error::{Error, Result};
use crate::vae::ImageTensor;

pub const SCENES: [&str; 3] = ["stripes-h", "checker", "stripes-v"];
pub const STREAK_PERIOD: usize = 8;
const STREAK_WIDTH: usize = 2;
const SCENE_LOW: f64 = 0.1;
const SCENE_HIGH: f64 = 0.4;

/// Amplitude band `[low, high]` for one streak intensity level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreakBand {
    pub name: String,
    pub low: f64,
    pub high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorFactor {
    pub name: String,
    pub observed: Vec<String>,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    /// Std of the per-pixel Gaussian jitter.
    pub jitter: f64,
    /// Draw the streak offset uniformly per image instead of fixing it.
    pub random_phase: bool,
    pub streak_bands: Vec<StreakBand>,
    pub factors: Vec<GeneratorFactor>,
    pub train_per_partition: usize,
    pub calib_per_partition: usize,
    /// ID (and OOD) sample count of each per-factor test split.
    pub test_per_side: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let band = |name: &str, low, high| StreakBand { name: name.into(), low, high };
        GeneratorConfig {
            height: 32,
            width: 32,
            jitter: 0.02,
            random_phase: true,
            streak_bands: vec![
                band("none", 0.0, 0.0),
                band("low", 0.15, 0.25),
                band("moderate", 0.35, 0.45),
                band("heavy", 0.6, 0.7),
            ],
            factors: vec![
                GeneratorFactor { name: "streak".into(), observed: vec!["low".into(), "moderate".into()], dims: vec![3] },
                GeneratorFactor { name: "scene".into(), observed: vec!["stripes-h".into(), "checker".into()], dims: vec![6] },
            ],
            train_per_partition: 500,
            calib_per_partition: 100,
            test_per_side: 600,
        }
    }
}

impl GeneratorConfig {
    fn domain(&self, factor: &str) -> Result<Vec<String>> {
        match factor {
            "streak" => Ok(self.streak_bands.iter().map(|b| b.name.clone()).collect()),
            "scene" => Ok(SCENES.iter().map(|s| s.to_string()).collect()),
            other => Err(Error::Config(format!("unknown generator factor `{other}` (expected streak or scene)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image extents must be >= 1".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        for b in &self.streak_bands {
            if !(0.0 <= b.low && b.low <= b.high && b.high <= 1.0) {
                return Err(Error::Config(format!("streak band `{}` must satisfy 0 <= low <= high <= 1", b.name)));
            }
        }
        let mut sorted: Vec<&StreakBand> = self.streak_bands.iter().collect();
        sorted.sort_by(|a, b| a.low.total_cmp(&b.low));
        if sorted.windows(2).any(|w| w[0].high >= w[1].low) {
            return Err(Error::Config("streak bands must be disjoint".into()));
        }
        if sorted.iter().enumerate().any(|(i, b)| sorted[..i].iter().any(|o| o.name == b.name)) {
            return Err(Error::Config("streak band names must be unique".into()));
        }
        let names: Vec<&str> = self.factors.iter().map(|f| f.name.as_str()).collect();
        if names.len() != 2 || !names.contains(&"streak") || !names.contains(&"scene") {
            return Err(Error::Config(format!("generator needs exactly the factors streak and scene, got {names:?}")));
        }
        for f in &self.factors {
            let domain = self.domain(&f.name)?;
            if let Some(v) = f.observed.iter().find(|v| !domain.contains(v)) {
                return Err(Error::Config(format!("factor `{}` has no value `{v}`", f.name)));
            }
            if f.observed.len() == domain.len() {
                return Err(Error::Config(format!("factor `{}` leaves no out-of-distribution value", f.name)));
            }
        }
        validate_factors(&self.factor_specs(), None)?;
        if self.train_per_partition == 0 || self.calib_per_partition == 0 || self.test_per_side == 0 {
            return Err(Error::Config("split sizes must be >= 1".into()));
        }
        Ok(())
    }

    /// Factor declarations as seen by training (observed values only).
    pub fn factor_specs(&self) -> Vec<FactorSpec> {
        self.factors
            .iter()
            .map(|f| FactorSpec { name: f.name.clone(), values: f.observed.clone(), edges: None, dims: f.dims.clone() })
            .collect()
    }

    fn band(&self, name: &str) -> Result<&StreakBand> {
        self.streak_bands
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Config(format!("unknown streak level `{name}`")))
    }
}

/// Generated splits: `train`, `calib`, and one `test:<factor>` per factor.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub factors: Vec<FactorSpec>,
    pub splits: IndexMap<String, Vec<Sample>>,
}

impl SyntheticDataset {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("dataset has no `{name}` split")))
    }

    pub fn partitioned(&self, split: &str) -> Result<PartitionedDataset> {
        build_partitions(self.split(split)?.to_vec(), &self.factors)
    }
}

/// Background pattern for `scene`, values in `{0.1, 0.4}`.
pub fn clean_scene(scene: &str, height: usize, width: usize) -> Result<Vec<f64>> {
    let half = STREAK_PERIOD / 2;
    let f: fn(usize, usize, usize) -> bool = match scene {
        "stripes-h" => |y, _, h| y % (2 * h) < h,
        "checker" => |y, x, h| (y / h + x / h) % 2 == 0,
        "stripes-v" => |_, x, h| x % (2 * h) < h,
        other => return Err(Error::Config(format!("unknown scene `{other}`"))),
    };
    Ok((0..height)
        .flat_map(|y| (0..width).map(move |x| if f(y, x, half) { SCENE_HIGH } else { SCENE_LOW }))
        .collect())
}

/// Scene plus diagonal streaks of `amplitude` at offset `phase`, plus
/// jitter, clamped to `[0, 1]` and quantized to 8-bit levels.
pub fn render<R: Rng>(
    scene: &str,
    amplitude: f64,
    phase: usize,
    height: usize,
    width: usize,
    jitter: f64,
    rng: &mut R,
) -> Result<ImageTensor> {
    let base = clean_scene(scene, height, width)?;
    let noise = Normal::new(0.0, jitter.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(base.len());
    for y in 0..height {
        for x in 0..width {
            let streak = (x + y + phase) % STREAK_PERIOD < STREAK_WIDTH;
            let mut v = base[y * width + x] + if streak { amplitude } else { 0.0 };
            if jitter > 0.0 {
                v += noise.sample(rng);
            }
            data.push(((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32);
        }
    }
    ImageTensor::new(height, width, 1, data)
}

fn draw(cfg: &GeneratorConfig, streak: &str, scene: &str, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let band = cfg.band(streak)?;
    let amp = if band.high > band.low { rng.random_range(band.low..=band.high) } else { band.low };
    let phase = if cfg.random_phase { rng.random_range(0..STREAK_PERIOD) } else { 0 };
    render(scene, amp, phase, cfg.height, cfg.width, cfg.jitter, rng)
}

/// Generates every split from `seed`. Each (split, combination) pair draws
/// from its own random stream, so split sizes do not perturb each other.
pub fn generate_synthetic(cfg: &GeneratorConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let factors = cfg.factor_specs();
    let (si, ci) = (
        cfg.factors.iter().position(|f| f.name == "streak").expect("validated"),
        cfg.factors.iter().position(|f| f.name == "scene").expect("validated"),
    );
    let streaks = cfg.domain("streak")?;
    let combos: Vec<(String, String)> = SCENES
        .iter()
        .flat_map(|c| streaks.iter().map(move |s| (s.clone(), c.to_string())))
        .collect();
    let is_id = |f: &FactorSpec, s: &str, c: &str| f.is_observed(if f.name == "streak" { s } else { c });

    let mut plan: Vec<(String, Vec<(usize, usize)>)> = Vec::new();
    for split in ["train", "calib"] {
        let n = if split == "train" { cfg.train_per_partition } else { cfg.calib_per_partition };
        let items = combos
            .iter()
            .enumerate()
            .filter(|(_, (s, c))| factors.iter().all(|f| is_id(f, s, c)))
            .map(|(i, _)| (i, n))
            .collect();
        plan.push((split.to_string(), items));
    }
    for f in &factors {
        let id: Vec<usize> = (0..combos.len()).filter(|&i| is_id(f, &combos[i].0, &combos[i].1)).collect();
        let ood: Vec<usize> = (0..combos.len()).filter(|i| !id.contains(i)).collect();
        let mut items: Vec<(usize, usize)> = id.iter().map(|&i| (i, cfg.test_per_side / id.len())).collect();
        items.extend(ood.iter().map(|&i| (i, cfg.test_per_side / ood.len())));
        items.sort_unstable();
        plan.push((format!("test:{}", f.name), items));
    }

    let mut splits = IndexMap::new();
    for (split_idx, (split, items)) in plan.into_iter().enumerate() {
        let mut samples = Vec::new();
        for (combo_idx, count) in items {
            let (s, c) = &combos[combo_idx];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((split_idx as u64) << 16) | combo_idx as u64);
            for i in 0..count {
                let mut assignment = IndexMap::new();
                for (fi, f) in cfg.factors.iter().enumerate() {
                    let v = if fi == si { s } else if fi == ci { c } else { unreachable!() };
                    assignment.insert(f.name.clone(), v.clone());
                }
                samples.push(Sample {
                    id: format!("{}_{s}_{c}_{i:04}", split.replace(':', "-")),
                    image: draw(cfg, s, c, &mut rng)?,
                    assignment,
                });
            }
        }
        splits.insert(split, samples);
    }
    Ok(SyntheticDataset { config: cfg.clone(), seed, factors, splits })
}
