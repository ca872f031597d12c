//! The five pipeline stages over a [`RunConfig`] and an output directory.
//! Each stage validates its inputs before writing anything.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::{build_partitions, generate_synthetic, load_image, read_dataset, write_dataset, DiskDataset, FactorSpec, Sample, MANIFEST};
use crate::error::{Error, Result};
use crate::metrics::{auroc, export_latents, mi_report, scatter_svg, FactorMi};
use crate::reasoner::{calibrate, ReasonerModel};
use crate::rules::RuleSet;
use crate::train::{train, write_history_csv, EpochRecord};
use crate::vae::{LatentCode, Vae};

pub const CHECKPOINT_FILE: &str = "model.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const REASONER_DIR: &str = "reasoners";
pub const REPORT_DIR: &str = "report";
pub const CALIB_SPLIT: &str = "calib";
pub const TRAIN_SPLIT: &str = "train";

/// Name of the test split for `factor`.
pub fn test_split(factor: &str) -> String {
    format!("test:{factor}")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn encode_samples(vae: &Vae<f32>, samples: &[Sample]) -> Result<Vec<LatentCode>> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    vae.encode(&images)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenSummary {
    pub dir: PathBuf,
    pub digest: String,
    pub counts: IndexMap<String, usize>,
}

pub fn gen_data(cfg: &RunConfig) -> Result<GenSummary> {
    cfg.validate()?;
    let ds = generate_synthetic(&cfg.data.generator, cfg.seed)?;
    let dir = cfg.data_dir();
    create_dir(&dir)?;
    let digest = write_dataset(&dir, &ds)?;
    let counts = ds.splits.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    Ok(GenSummary { dir, digest, counts })
}

/// Reads the configured dataset and applies dim overrides.
pub fn load_data(cfg: &RunConfig) -> Result<DiskDataset> {
    let dir = cfg.data_dir();
    if !dir.join(MANIFEST).is_file() {
        return Err(Error::Config(format!("no dataset at {} (run gen-data first)", dir.display())));
    }
    let mut ds = read_dataset(&dir)?;
    ds.factors = cfg.apply_dims(ds.factors)?;
    crate::data::validate_factors(&ds.factors, Some(cfg.model.latent_size))?;
    Ok(ds)
}

fn split<'a>(ds: &'a DiskDataset, name: &str) -> Result<&'a [Sample]> {
    ds.splits
        .get(name)
        .map(Vec::as_slice)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("dataset has no (or an empty) `{name}` split")))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub last: Option<EpochRecord>,
}

/// Trains on the `train` split. The checkpoint is rewritten whenever the
/// monitored loss improves, so after a divergence the last good one stays.
pub fn train_run(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = load_data(cfg)?;
    let parts = build_partitions(split(&ds, TRAIN_SPLIT)?.to_vec(), &ds.factors)?;
    let rules = RuleSet::from_dataset(&parts, cfg.model.latent_size, cfg.rules.aggregator, cfg.rules.weights)?
        .with_normalization(cfg.rules.normalization, cfg.rules.norm_grad);
    let out = cfg.out_dir();
    create_dir(&out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let history_path = out.join(HISTORY_FILE);
    let info = |epoch| CheckpointInfo {
        seed: cfg.seed,
        factors: ds.factors.clone(),
        training: serde_json::json!({ "training": cfg.training, "rules": cfg.rules }),
        dataset_digest: Some(ds.digest.clone()),
        config_digest: Some(cfg.digest()),
        epoch,
    };

    let mut best = f64::INFINITY;
    let mut history = Vec::new();
    let mut io_error = None;
    let outcome = train(&parts, &rules, &cfg.model, &cfg.training, cfg.seed, |rec, vae| {
        history.push(rec.clone());
        let mut step = || -> Result<()> {
            write_history_csv(&history_path, &history)?;
            if rec.monitored() < best {
                best = rec.monitored();
                save_checkpoint(&ckpt, vae, info(Some(rec.epoch)))?;
            }
            Ok(())
        };
        if io_error.is_none() {
            io_error = step().err();
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    if outcome.history.is_empty() {
        save_checkpoint(&ckpt, &outcome.model, info(None))?;
        write_history_csv(&history_path, &[])?;
    }
    if let Some(e) = outcome.diverged {
        return Err(e);
    }
    Ok(TrainSummary {
        checkpoint: ckpt,
        history: history_path,
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
        last: outcome.history.last().cloned(),
    })
}

fn checkpoint_path(cfg: &RunConfig, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir().join(CHECKPOINT_FILE))
}

/// Calibrates one reasoner per factor on the `calib` split and writes them
/// to `<out_dir>/reasoners/<factor>.json`.
pub fn calibrate_run(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let (vae, meta) = load_checkpoint(&checkpoint_path(cfg, checkpoint))?;
    let ds = load_data(cfg)?;
    let calib = split(&ds, CALIB_SPLIT)?;
    let factors = model_factors(&meta, &ds);
    let mut models = Vec::new();
    for f in &factors {
        let mut m = calibrate(&vae, calib, f, cfg.reasoner.k, cfg.reasoner.quantile, cfg.seed)?;
        m.provenance.dataset_digest = Some(ds.digest.clone());
        m.provenance.checkpoint_digest = Some(meta.blob_sha256.clone());
        models.push(m);
    }
    let dir = cfg.out_dir().join(REASONER_DIR);
    create_dir(&dir)?;
    let mut paths = Vec::new();
    for m in models {
        let p = dir.join(format!("{}.json", m.factor));
        m.save(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

fn model_factors(meta: &CheckpointMeta, ds: &DiskDataset) -> Vec<FactorSpec> {
    if meta.info.factors.is_empty() {
        ds.factors.clone()
    } else {
        meta.info.factors.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorEval {
    pub factor: String,
    pub auroc: f64,
    pub id_samples: usize,
    pub ood_samples: usize,
    pub threshold: f64,
    /// Fraction of ID test samples flagged OOD.
    pub id_flag_rate: f64,
    /// Fraction of OOD test samples flagged OOD.
    pub ood_flag_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: Option<String>,
    pub dataset_digest: Option<String>,
    pub checkpoint_digest: Option<String>,
    pub factors: Vec<FactorEval>,
    pub mi: Vec<FactorMi>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for f in &self.factors {
            s += &format!(
                "{:<10} auroc {:.4}  id {} / ood {}  flagged id {:.3} ood {:.3}\n",
                f.factor, f.auroc, f.id_samples, f.ood_samples, f.id_flag_rate, f.ood_flag_rate
            );
        }
        for m in &self.mi {
            s += &format!(
                "{:<10} dims {:?}  most informative {} ({:.4} nats)  runner-up {:?} ({:.4})  designated top: {}\n",
                m.factor, m.dims, m.most_informative, m.top, m.runner_up, m.second, m.designated_is_top
            );
        }
        for w in &self.warnings {
            s += &format!("warning: {w}\n");
        }
        s
    }
}

/// AUROC and flag rates per reasoner on its factor's test split, plus the
/// MI report on the training split.
pub fn evaluate_model(
    vae: &Vae<f32>,
    reasoners: &[ReasonerModel],
    splits: &IndexMap<String, Vec<Sample>>,
    factors: &[FactorSpec],
    bins: usize,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for r in reasoners {
        let f = factors
            .iter()
            .find(|f| f.name == r.factor)
            .ok_or_else(|| Error::Config(format!("reasoner for unknown factor `{}`", r.factor)))?;
        let name = test_split(&f.name);
        let test = splits.get(&name).filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty or missing `{name}` split")))?;
        let codes = encode_samples(vae, test)?;
        let mut scores = Vec::with_capacity(codes.len());
        let mut ood = Vec::with_capacity(codes.len());
        for (c, s) in codes.iter().zip(test.iter()) {
            let v = s.value(&f.name).ok_or_else(|| Error::Validation(format!("sample `{}` lacks `{}`", s.id, f.name)))?;
            scores.push(r.score(c)?);
            ood.push(!f.is_observed(v));
        }
        let n_ood = ood.iter().filter(|&&o| o).count();
        let n_id = ood.len() - n_ood;
        if n_id != n_ood {
            report.warnings.push(format!("`{name}` is unbalanced: {n_id} ID vs {n_ood} OOD"));
        }
        let rate = |want: bool| {
            let (hit, total) = scores.iter().zip(&ood).filter(|(_, &o)| o == want).fold((0, 0), |(h, t), (&s, _)| {
                (h + usize::from(s < r.threshold), t + 1)
            });
            if total == 0 { 0.0 } else { hit as f64 / total as f64 }
        };
        report.factors.push(FactorEval {
            factor: f.name.clone(),
            auroc: auroc(&scores, &ood)?,
            id_samples: n_id,
            ood_samples: n_ood,
            threshold: r.threshold,
            id_flag_rate: rate(false),
            ood_flag_rate: rate(true),
        });
    }
    let train = splits.get(TRAIN_SPLIT).filter(|s| !s.is_empty()).ok_or_else(|| Error::Config("empty or missing `train` split".into()))?;
    report.mi = mi_report(&encode_samples(vae, train)?, train, factors, bins)?;
    Ok(report)
}

/// Evaluates and writes `report.json`, `summary.txt`, `latents.csv` and
/// optional scatter plots under `<out_dir>/report`.
pub fn evaluate_run(cfg: &RunConfig, checkpoint: Option<&Path>, reasoners: &[PathBuf]) -> Result<EvalReport> {
    cfg.validate()?;
    let (vae, meta) = load_checkpoint(&checkpoint_path(cfg, checkpoint))?;
    let ds = load_data(cfg)?;
    let factors = model_factors(&meta, &ds);
    let paths: Vec<PathBuf> = if reasoners.is_empty() {
        factors.iter().map(|f| cfg.out_dir().join(REASONER_DIR).join(format!("{}.json", f.name))).collect()
    } else {
        reasoners.to_vec()
    };
    let models = paths.iter().map(|p| ReasonerModel::load(p)).collect::<Result<Vec<_>>>()?;
    let mut report = evaluate_model(&vae, &models, &ds.splits, &factors, cfg.eval.bins)?;
    report.config_digest = Some(cfg.digest());
    report.dataset_digest = Some(ds.digest.clone());
    report.checkpoint_digest = Some(meta.blob_sha256.clone());
    for m in &models {
        if m.provenance.checkpoint_digest.as_deref().is_some_and(|d| d != meta.blob_sha256) {
            report.warnings.push(format!("reasoner `{}` was calibrated against a different checkpoint", m.factor));
        }
    }

    let dir = cfg.out_dir().join(REPORT_DIR);
    create_dir(&dir)?;
    let train = split(&ds, TRAIN_SPLIT)?;
    let codes = encode_samples(&vae, train)?;
    write(&dir.join("latents.csv"), export_latents(&codes, train, &factors)?)?;
    if cfg.eval.scatter && factors.len() >= 2 {
        let (x, y) = (factors[0].dims[0], factors[1].dims[0]);
        for f in &factors {
            write(&dir.join(format!("scatter_{}.svg", f.name)), scatter_svg(&codes, train, x, y, &f.name)?)?;
        }
    }
    write(&dir.join("report.json"), serde_json::to_string_pretty(&report).expect("serializable report"))?;
    write(&dir.join("summary.txt"), report.summary())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorVerdict {
    pub factor: String,
    pub density: f64,
    pub threshold: f64,
    pub ood: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub path: PathBuf,
    pub result: std::result::Result<Vec<FactorVerdict>, String>,
}

impl Verdict {
    pub fn line(&self) -> String {
        match &self.result {
            Ok(fs) => {
                let parts: Vec<String> = fs
                    .iter()
                    .map(|f| format!("{} density={:.6e} tau={:.6e} ood={}", f.factor, f.density, f.threshold, f.ood))
                    .collect();
                format!("{}\t{}", self.path.display(), parts.join("\t"))
            }
            Err(e) => format!("{}\terror: {e}", self.path.display()),
        }
    }
}

/// Image files under `inputs`: files as given, directories expanded to
/// their `.png` entries in name order.
pub fn expand_inputs(inputs: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .into_iter()
                .flatten()
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            entries.sort();
            out.extend(entries);
        } else {
            out.push(p.clone());
        }
    }
    out
}

/// One verdict per input image; unreadable or mis-shaped images yield an
/// error verdict instead of failing the batch.
pub fn reason(vae: &Vae<f32>, reasoners: &[ReasonerModel], inputs: &[PathBuf]) -> Vec<Verdict> {
    expand_inputs(inputs)
        .into_iter()
        .map(|path| {
            let result = (|| -> Result<Vec<FactorVerdict>> {
                let img = load_image(&path)?;
                let code = vae.encode(&[&img])?.remove(0);
                reasoners
                    .iter()
                    .map(|r| {
                        let (ood, density) = r.is_ood(&code)?;
                        Ok(FactorVerdict { factor: r.factor.clone(), density, threshold: r.threshold, ood })
                    })
                    .collect()
            })()
            .map_err(|e| e.to_string());
            Verdict { path, result }
        })
        .collect()
}

pub fn reason_run(cfg: &RunConfig, checkpoint: Option<&Path>, reasoners: &[PathBuf], inputs: &[PathBuf]) -> Result<Vec<Verdict>> {
    let (vae, meta) = load_checkpoint(&checkpoint_path(cfg, checkpoint))?;
    let paths: Vec<PathBuf> = if reasoners.is_empty() {
        meta.info.factors.iter().map(|f| cfg.out_dir().join(REASONER_DIR).join(format!("{}.json", f.name))).collect()
    } else {
        reasoners.to_vec()
    };
    if paths.is_empty() {
        return Err(Error::Config("no reasoner files given".into()));
    }
    let models = paths.iter().map(|p| ReasonerModel::load(p)).collect::<Result<Vec<_>>>()?;
    Ok(reason(&vae, &models, inputs))
}
