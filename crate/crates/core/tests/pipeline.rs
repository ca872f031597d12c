use std::fs;
use std::path::Path;

use factor_ood::config::RunConfig;
use factor_ood::data::{generate_synthetic, save_image, GeneratorConfig};
use factor_ood::metrics::mi_report;
use factor_ood::pipeline::{self, EvalReport};
use factor_ood::vae::{ArchitectureConfig, Vae};

fn small_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out_dir = Some(out.to_path_buf());
    cfg.data.generator = GeneratorConfig {
        height: 8,
        width: 8,
        train_per_partition: 16,
        calib_per_partition: 6,
        test_per_side: 24,
        ..Default::default()
    };
    cfg.model = ArchitectureConfig { height: 8, width: 8, latent_size: 8, conv_depths: vec![2], dense_widths: vec![8], ..Default::default() };
    cfg.training.epochs = 2;
    cfg.training.batch_size = 4;
    cfg.training.holdout_fraction = 0.25;
    cfg
}

#[test]
fn gen_data_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = pipeline::gen_data(&small_config(a.path())).unwrap();
    let sb = pipeline::gen_data(&small_config(b.path())).unwrap();
    assert_eq!(sa.digest, sb.digest);
    assert_eq!(sa.counts["train"], 4 * 16);
    assert_eq!(sa.counts["calib"], 4 * 6);
    assert_eq!(sa.counts["test:streak"], 48);
    assert_eq!(sa.counts["test:scene"], 48);
    let again = pipeline::gen_data(&small_config(a.path())).unwrap();
    assert_eq!(again.digest, sa.digest);

    let mut other = small_config(b.path());
    other.seed = 1;
    assert_ne!(pipeline::gen_data(&other).unwrap().digest, sa.digest);
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert!(pipeline::train_run(&cfg).unwrap_err().is_config());
    assert!(pipeline::calibrate_run(&cfg, None).is_err());
    assert!(pipeline::evaluate_run(&cfg, None, &[]).is_err());
}

#[test]
fn invalid_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = small_config(&out);
    cfg.model.latent_size = 4;
    assert!(pipeline::gen_data(&cfg).unwrap_err().is_config());
    assert!(pipeline::train_run(&cfg).unwrap_err().is_config());
    assert!(!out.exists());
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = small_config(&out);
    let gen = pipeline::gen_data(&cfg).unwrap();

    let t = pipeline::train_run(&cfg).unwrap();
    assert_eq!(t.epochs_run, 2);
    assert!(t.checkpoint.is_file());
    assert_eq!(fs::read_to_string(&t.history).unwrap().lines().count(), 3);

    let reasoners = pipeline::calibrate_run(&cfg, None).unwrap();
    assert_eq!(reasoners.len(), 2);
    for p in &reasoners {
        let text = fs::read_to_string(p).unwrap();
        assert!(text.contains(&gen.digest), "reasoner lacks dataset digest");
    }

    let report = pipeline::evaluate_run(&cfg, None, &[]).unwrap();
    assert_eq!(report.factors.len(), 2);
    for f in &report.factors {
        assert!((0.0..=1.0).contains(&f.auroc));
        assert_eq!((f.id_samples, f.ood_samples), (24, 24));
    }
    assert_eq!(report.dataset_digest.as_deref(), Some(gen.digest.as_str()));
    assert_eq!(report.config_digest.as_deref(), Some(cfg.digest().as_str()));
    assert!(report.warnings.is_empty(), "{:?}", report.warnings);

    let rdir = out.join(pipeline::REPORT_DIR);
    let parsed: EvalReport = serde_json::from_str(&fs::read_to_string(rdir.join("report.json")).unwrap()).unwrap();
    assert_eq!(parsed, report);
    assert_eq!(fs::read_to_string(rdir.join("latents.csv")).unwrap().lines().count(), 1 + 4 * 16);
    assert!(rdir.join("scatter_streak.svg").is_file());
    assert_eq!(fs::read_to_string(rdir.join("summary.txt")).unwrap(), report.summary());

    let imgs = dir.path().join("imgs");
    fs::create_dir(&imgs).unwrap();
    let ds = generate_synthetic(&cfg.data.generator, 5).unwrap();
    for s in &ds.split("calib").unwrap()[..5] {
        save_image(&imgs.join(format!("{}.png", s.id)), &s.image).unwrap();
    }
    fs::write(imgs.join("broken.png"), b"not a png").unwrap();
    fs::write(imgs.join("notes.txt"), b"ignored").unwrap();
    let verdicts = pipeline::reason_run(&cfg, None, &[], std::slice::from_ref(&imgs)).unwrap();
    assert_eq!(verdicts.len(), 6);
    assert_eq!(verdicts.iter().filter(|v| v.result.is_err()).count(), 1);
    for v in verdicts.iter().filter_map(|v| v.result.as_ref().ok()) {
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|f| f.density >= 0.0));
    }

    let rerun = pipeline::evaluate_run(&cfg, None, &[]).unwrap();
    assert_eq!(rerun, report);
}

#[test]
fn empty_test_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut ds = generate_synthetic(&cfg.data.generator, 0).unwrap();
    let vae = Vae::<f32>::new(cfg.model.clone(), 0).unwrap();
    let reasoners: Vec<_> = ds
        .factors
        .iter()
        .map(|f| factor_ood::reasoner::calibrate(&vae, ds.split("calib").unwrap(), f, None, 0.05, 0).unwrap())
        .collect();
    ds.splits.insert("test:scene".into(), Vec::new());
    let err = pipeline::evaluate_model(&vae, &reasoners, &ds.splits, &ds.factors, 20).unwrap_err();
    assert!(err.to_string().contains("test:scene"));
}

#[test]
fn unbalanced_test_split_is_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut ds = generate_synthetic(&cfg.data.generator, 0).unwrap();
    let vae = Vae::<f32>::new(cfg.model.clone(), 0).unwrap();
    let reasoners: Vec<_> = ds
        .factors
        .iter()
        .map(|f| factor_ood::reasoner::calibrate(&vae, ds.split("calib").unwrap(), f, None, 0.05, 0).unwrap())
        .collect();
    ds.splits.get_mut("test:streak").unwrap().pop();
    let report = pipeline::evaluate_model(&vae, &reasoners, &ds.splits, &ds.factors, 20).unwrap();
    assert_eq!(report.warnings.len(), 1);
    assert!(report.warnings[0].contains("test:streak"));
}

#[test]
fn untrained_model_mi_is_bounded_and_unfocused() {
    let g = GeneratorConfig { train_per_partition: 100, calib_per_partition: 1, test_per_side: 1, ..Default::default() };
    let ds = generate_synthetic(&g, 0).unwrap();
    let vae = Vae::<f32>::new(ArchitectureConfig::default(), 0).unwrap();
    let train = ds.split("train").unwrap();
    let codes = pipeline::encode_samples(&vae, train).unwrap();
    for m in mi_report(&codes, train, &ds.factors, 20).unwrap() {
        assert!(m.ranking.iter().all(|&(_, v)| (0.0..=std::f64::consts::LN_2 + 1e-12).contains(&v)));
        assert!(m.top < 0.6, "{}: dim {} carries {:.3} nats", m.factor, m.most_informative, m.top);
        assert!(m.top < 3.0 * m.second, "{}: {:.3} vs {:.3}", m.factor, m.top, m.second);
    }
}
