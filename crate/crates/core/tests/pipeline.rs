//! End-to-end runs of the pipeline commands on tiny budgets.

use std::fs;
use std::path::{Path, PathBuf};

use latentts::benchmark::{mnar_records, mnar_spec};
use latentts::data::io::write_observations;
use latentts::data::{fit_schema, Mode};
use latentts::eval::downstream::{Classifier, DownstreamSpec, Scaling};
use latentts::eval::PredictiveConfig;
use latentts::pipeline::config::DataFormat;
use latentts::pipeline::{cmd_evaluate, cmd_generate, cmd_prepare, cmd_report, cmd_train, train_with_halt, ModelBundle, RunConfig};
use latentts::Error;

fn write_mnar(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let records = mnar_records(n, 11, "p");
    let spec = mnar_spec();
    let schema = fit_schema(&records, &spec).unwrap();
    let obs = dir.join("obs.csv");
    write_observations(&obs, &records, &schema).unwrap();
    let spec_path = dir.join("schema.toml");
    fs::write(&spec_path, spec.to_toml()).unwrap();
    (obs, spec_path)
}

fn tiny_config(dir: &Path, out: &str) -> RunConfig {
    let (obs, spec) = write_mnar(dir, 60);
    let mut cfg = RunConfig::from_toml("[data]\nformat = \"table\"\ntrain = \"x\"\nwindow_steps = 2\n").unwrap();
    cfg.seed = 3;
    cfg.out_dir = dir.join(out);
    cfg.data.format = DataFormat::Observations;
    cfg.data.train = obs;
    cfg.data.schema = Some(spec);
    cfg.data.window_steps = None;
    cfg.data.test_fraction = 0.25;
    cfg.model.layers = 2;
    cfg.model.hidden = Some(8);
    cfg.model.decide_layers = 1;
    cfg.model.embed_dim = Some(4);
    cfg.train.ae_epochs = Some(4);
    cfg.train.ae_batch_size = Some(16);
    cfg.gan.iterations = 6;
    cfg.gan.batch_size = 16;
    cfg.gan.critic_steps = 2;
    cfg.checkpoint.ae_every_epochs = 2;
    cfg.checkpoint.gan_every_iterations = 3;
    cfg.eval.seeds = vec![0];
    cfg.eval.projection_sample = 20;
    let mut spec = DownstreamSpec::new(Classifier::ZeroRnn, Scaling::MinMax);
    spec.net.epochs = 2;
    spec.net.hidden = 4;
    cfg.eval.downstream = Some(vec![spec, DownstreamSpec::new(Classifier::Lr, Scaling::Standard)]);
    cfg.validate().unwrap();
    cfg
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn prepare_is_deterministic_and_reports_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_config(dir.path(), "a");
    let mut b = a.clone();
    b.out_dir = dir.path().join("b");
    let stats = cmd_prepare(&a).unwrap();
    cmd_prepare(&b).unwrap();
    assert_eq!(read_dir_bytes(&a.out_dir.join("prepared")), read_dir_bytes(&b.out_dir.join("prepared")));
    assert_eq!((stats[0].instances, stats[1].instances), (45, 15));
    assert_eq!(stats[0].feature_rates.len(), 8);
    let table = fs::read_to_string(a.out_dir.join("prepared/stats.md")).unwrap();
    assert!(table.contains("Avg.Len") && table.contains("| x3 |"));

    let mut missing = a.clone();
    missing.data.schema = Some(dir.path().join("absent.toml"));
    match cmd_prepare(&missing) {
        Err(Error::Config(m)) => assert!(m.contains("absent.toml"), "{m}"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = tiny_config(dir.path(), "full");
    cmd_prepare(&full).unwrap();
    cmd_train(&full, false).unwrap();
    let reference = fs::read(full.out_dir.join("train/model.bundle")).unwrap();

    for (name, stop) in [("ae", (2usize, None)), ("gan", (4, Some(3usize)))] {
        let mut cfg = full.clone();
        cfg.out_dir = dir.path().join(name);
        cmd_prepare(&cfg).unwrap();
        let halt = move |p: &latentts::pipeline::Progress| p.fit.epoch == stop.0 && p.gan.as_ref().map(|g| g.iteration) == stop.1;
        let err = train_with_halt(&cfg, false, &halt).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
        assert!(!cfg.out_dir.join("train/model.bundle").exists());
        cmd_train(&cfg, true).unwrap();
        assert_eq!(fs::read(cfg.out_dir.join("train/model.bundle")).unwrap(), reference, "{name}");
    }

    let trace = fs::read_to_string(full.out_dir.join("train/gan_losses.csv")).unwrap();
    assert_eq!(trace.lines().count(), 7);
    let mut other = full.clone();
    other.gan.iterations = 7;
    assert!(matches!(cmd_train(&other, true), Err(Error::Config(_))));
}

#[test]
fn generation_is_reproducible_and_checks_the_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "run");
    cmd_prepare(&cfg).unwrap();
    cmd_train(&cfg, false).unwrap();
    let bundle = cfg.out_dir.join("train/model.bundle");
    let a = dir.path().join("g1/syn.csv");
    let b = dir.path().join("g2/syn.csv");
    let ma = cmd_generate(&bundle, 30, 9, &a).unwrap();
    let mb = cmd_generate(&bundle, 30, 9, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(ma, mb);
    let c = dir.path().join("g3/syn.csv");
    cmd_generate(&bundle, 30, 10, &c).unwrap();
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let empty = dir.path().join("g4/syn.csv");
    cmd_generate(&bundle, 0, 9, &empty).unwrap();
    let text = fs::read_to_string(&empty).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("id,time,x0,"));

    let loaded = ModelBundle::load(&bundle).unwrap();
    assert_eq!(loaded.ae.schema().mode, Mode::Incomplete);
    let ae_only = cfg.out_dir.join("train/ae.bundle");
    assert!(matches!(cmd_generate(&ae_only, 5, 0, &dir.path().join("g5/x.csv")), Err(Error::Bundle(_))));

    let report = cmd_evaluate(&cfg, &a).unwrap();
    assert_eq!(report.downstream.len(), 2);
    assert!(report.downstream.iter().all(|d| d.tstr.std == 0.0 && (0.0..=1.0).contains(&d.tstr.mean)));
    assert!(cfg.out_dir.join("eval/missing_pearson_synthetic.png").exists());
    let text = cmd_report(&cfg).unwrap();
    assert!(text.contains("## Data") && text.contains("## Training") && text.contains("zeroRNN/min-max"));

    let mut bad = cfg.clone();
    bad.eval.predictive = Some(PredictiveConfig::default());
    assert!(matches!(cmd_evaluate(&bad, &a), Err(Error::Config(_))));
}

#[test]
fn complete_tables_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("prices.csv");
    let mut text = String::from("a,b\n");
    for i in 0..60 {
        let t = i as f64 * 0.3;
        text.push_str(&format!("{},{}\n", t.sin(), (t * 0.5).cos() * 10.0));
    }
    fs::write(&csv, text).unwrap();
    let cfg_text = format!(
        "seed = 1\nout_dir = \"run\"\n[data]\nformat = \"table\"\ntrain = \"prices.csv\"\nwindow_steps = 6\ntest_fraction = 0.0\n\
         [train]\nae_epochs = 2\nae_batch_size = 16\n[gan]\niterations = 2\nbatch_size = 16\n\
         [eval]\nseeds = [0, 1]\nprojection_sample = 30\n\
         [eval.discriminative]\ntrain_fraction = 0.8\nnet = {{ cell = \"lstm\", layers = 1, hidden = 4, epochs = 1, batch_size = 32, lr = 0.001 }}\n\
         [eval.predictive]\nnet = {{ cell = \"lstm\", layers = 1, hidden = 4, epochs = 1, batch_size = 32, lr = 0.001 }}\n"
    );
    let path = dir.path().join("run.toml");
    fs::write(&path, cfg_text).unwrap();
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.out_dir = dir.path().join("run");
    let stats = cmd_prepare(&cfg).unwrap();
    assert_eq!(stats[0].instances, 55);
    assert_eq!(stats[1].instances, 55);
    let bundle = cmd_train(&cfg, false).unwrap();
    assert_eq!(bundle.latent_dim(), 3 * 8 + 8);
    let syn = cfg.out_dir.join("synthetic/synthetic.csv");
    cmd_generate(&cfg.out_dir.join("train/model.bundle"), 40, 0, &syn).unwrap();
    let report = cmd_evaluate(&cfg, &syn).unwrap();
    let d = report.discriminative.unwrap();
    assert_eq!(d.values.len(), 2);
    assert!(d.values.iter().all(|v| (0.0..=0.5).contains(v)));
    assert!(report.predictive_oracle.is_some());
    assert!(fs::read_to_string(cfg.out_dir.join("eval/report.md")).unwrap().contains("| Original |"));
}
