mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{config, parse, workspace, write_config, write_data};
use dcr_cli::{
    cmd_analyze_layers, cmd_evaluate, cmd_generate, cmd_train, parse_data_spec, CliError, ExperimentConfig, Metric,
    Overrides, EVAL_CSV, EVAL_JSON,
};
use dcr_datagen::{materialize, Dataset, DatasetCache};
use dcr_nets::Architecture;
use dcr_trainer::RunLog;
use serde_json::json;

fn dcr(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcr"))
        .arg("--workdir")
        .arg(root)
        .args(args)
        .env("DCR_CACHE", root.join("cache"))
        .env_remove("DCR_DATA")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    dir
}

#[test]
fn generate_writes_one_cache_entry_that_reloads_identically() {
    let dir = fixture();
    let spec = r#"{"generator": "striped-mnist", "split": "train", "subset": 100}"#;
    let first = dcr(dir.path(), &["generate", spec, "--seed", "5"]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("generated"));
    let again = dcr(dir.path(), &["generate", spec, "--seed", "5"]);
    assert!(again.status.success());
    assert!(stdout(&again).contains("cached"));
    let cache = DatasetCache::new(dir.path().join("cache"));
    assert_eq!(cache.entries().unwrap().len(), 1);

    let parsed = parse_data_spec(spec).unwrap();
    let fresh = materialize(&parsed, 5, &dir.path().join("data"), None).unwrap().dataset;
    let cached = cmd_generate(&workspace(dir.path()), &parsed, 5).unwrap();
    assert!(cached.from_cache);
    let reloaded = materialize(&parsed, 5, &dir.path().join("data"), Some(&cache)).unwrap();
    assert!(reloaded.from_cache);
    match (fresh, reloaded.dataset) {
        (Dataset::Labeled(a), Dataset::Labeled(b)) => {
            assert_eq!(a.labels, b.labels);
            assert!(a.images.iter().zip(&b.images).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        other => panic!("unexpected kinds {other:?}"),
    }
}

#[test]
fn generate_reads_spec_files() {
    let dir = fixture();
    std::fs::write(dir.path().join("spec.json"), r#"{"generator": "concept-mnist", "size": 40}"#).unwrap();
    let o = dcr(dir.path(), &["generate", "spec.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("concept"));
}

#[test]
fn generate_rejects_bad_specs_with_validation_exit() {
    let dir = fixture();
    let o = dcr(dir.path(), &["generate", r#"{"generator": "cmnist", "split": "train", "color_corr": 1.2}"#]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("color_corr"));
    let o = dcr(dir.path(), &["generate", r#"{"generator": "plaid-mnist"}"#]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown generator 'plaid-mnist'"));
}

#[test]
fn config_round_trips_through_json() {
    let cfg = parse(&config("runs/x"));
    let again = ExperimentConfig::from_json(&cfg.to_json().unwrap(), "again").unwrap();
    assert_eq!(cfg, again);
    cfg.validate().unwrap();
}

#[test]
fn config_errors_carry_line_numbers() {
    let text = "{\n  \"schema_version\": 1,\n  \"model\": 7\n}";
    let err = ExperimentConfig::from_json(text, "bad.json").unwrap_err().to_string();
    assert!(err.contains("bad.json") && err.contains("line 3"), "{err}");
    let mut v = config("runs/x");
    v["trainer"]["gama"] = json!(1.0);
    let err = ExperimentConfig::from_json(&serde_json::to_string_pretty(&v).unwrap(), "typo.json").unwrap_err();
    assert!(err.to_string().contains("gama"), "{err}");
}

#[test]
fn missing_probe_layer_is_named() {
    let dir = fixture();
    let mut v = config("runs/x");
    v["model"]["probe_points"] = json!([{"layer": 9, "lambda": 0.1}]);
    write_config(dir.path(), "exp.json", &v);
    let o = dcr(dir.path(), &["train", "exp.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("layer 9"), "{}", stderr(&o));
    assert!(!dir.path().join("runs/x").exists());
}

#[test]
fn validation_catches_inconsistent_methods() {
    let mut v = config("runs/x");
    v["data"].as_object_mut().unwrap().remove("concept");
    assert!(matches!(parse(&v).validate(), Err(CliError::Validation(m)) if m.contains("data.concept")));
    let mut v = config("runs/x");
    v["trainer"]["method"] = json!("adversarial");
    v["data"]["train"] = json!({"generator": "mnist", "split": "train"});
    assert!(parse(&v).validate().is_err());
    let mut v = config("runs/x");
    v["data"]["train"] = json!({"generator": "concept-mnist"});
    assert!(parse(&v).validate().is_err());
    let mut v = config("runs/x");
    v["device"] = json!("cuda");
    assert!(parse(&v).validate().is_err());
    let mut v = config("runs/x");
    v["schema_version"] = json!(2);
    assert!(parse(&v).validate().is_err());
}

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = fixture();
    write_config(dir.path(), "exp.json", &config("runs/a"));
    let o = dcr(dir.path(), &["train", "exp.json", "--epochs", "1", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("runs/a");
    for f in ["config.json", "metrics.jsonl", "final_report.json", "checkpoints/last.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let resolved = ExperimentConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(resolved.trainer.epochs, 1);
    assert_eq!(resolved.trainer.seed, 4);
    assert_eq!(resolved.overrides["trainer.epochs"], json!(1));
    assert_eq!(resolved.overrides["trainer.seed"], json!(4));
    let log = RunLog::load(&run).unwrap();
    assert_eq!(log.label, "dcr");
    assert_eq!(log.epochs.len(), 1);

    // no silent overwrite
    let o = dcr(dir.path(), &["train", "exp.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));
    let o = dcr(dir.path(), &["train", "exp.json", "--force", "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn zero_gamma_runs_are_labelled_erm() {
    let dir = fixture();
    let mut v = config("runs/g0");
    v["trainer"]["gamma"] = json!(0.0);
    v["trainer"]["epochs"] = json!(1);
    let path = write_config(dir.path(), "g0.json", &v);
    let s = cmd_train(&workspace(dir.path()), &path, &Overrides::default(), false).unwrap();
    assert_eq!(s.label, "erm");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/g0/final_report.json")).unwrap()).unwrap();
    assert_eq!(report["label"], "erm");
    assert_eq!(report["status"], "completed");
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = fixture();
    let mut v = config("runs/div");
    v["trainer"]["lr"] = json!(1e30);
    v["trainer"]["optimizer"] = json!({"kind": "sgd", "momentum": 0.0});
    write_config(dir.path(), "div.json", &v);
    let o = dcr(dir.path(), &["train", "div.json"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/div/final_report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "diverged");
}

#[test]
fn reruns_reproduce_metrics_byte_for_byte() {
    let dir = fixture();
    let ws = workspace(dir.path());
    let a = write_config(dir.path(), "a.json", &config("runs/a"));
    let b = write_config(dir.path(), "b.json", &config("runs/b"));
    cmd_train(&ws, &a, &Overrides::default(), false).unwrap();
    cmd_train(&ws, &b, &Overrides::default(), false).unwrap();
    let metrics = |run: &str| std::fs::read(dir.path().join(run).join("metrics.jsonl")).unwrap();
    assert_eq!(metrics("runs/a"), metrics("runs/b"));
    assert!(!metrics("runs/a").is_empty());

    // the resolved config closes the loop, even when it replaces its own run directory
    let original = metrics("runs/a");
    cmd_train(&ws, Path::new("runs/a/config.json"), &Overrides::default(), true).unwrap();
    assert_eq!(metrics("runs/a"), original);
}

#[test]
fn analyze_layers_applies_the_contraction_rule() {
    let r = cmd_analyze_layers(&Architecture::ResNet14, 10, [1, 28, 28], 1.5).unwrap();
    assert_eq!(r.proposal, vec![4, 7, 8, 10, 11, 13]);
    let m3 = cmd_analyze_layers(&Architecture::M3, 10, [1, 28, 28], 1.5).unwrap();
    let hidden = m3.table.layers.len() - 1;
    assert!(m3.proposal.contains(&hidden));
    let inf = cmd_analyze_layers(&Architecture::M3, 10, [1, 28, 28], f64::INFINITY).unwrap();
    assert_eq!(inf.proposal, vec![hidden]);

    let dir = tempfile::tempdir().unwrap();
    let o = dcr(dir.path(), &["analyze-layers", "--arch", "resnet14", "--input-shape", "1,28,28", "--classes", "10"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("{4,7,8,10,11,13}"), "{}", stdout(&o));
    let o = dcr(dir.path(), &["analyze-layers", "--arch", "m7", "--threshold", "inf"]);
    assert!(stdout(&o).contains("{4}"), "{}", stdout(&o));
    let o = dcr(dir.path(), &["analyze-layers", "--arch", "m9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcr(dir.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    for name in [
        "gradient_identity",
        "implicit_jacobian_vs_fd",
        "jacobian_vs_surrogate",
        "envelope_theorem",
        "woodbury_vs_dense",
    ] {
        assert!(stdout(&o).contains(name), "{name}");
    }
    let small = ["--instances", "3", "--woodbury-instances", "3"];
    let o = dcr(dir.path(), &[&["gradcheck", "--fault", "sign-flip"], &small[..]].concat());
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).contains("FAIL"));
    let o = dcr(dir.path(), &[&["gradcheck", "--f32"], &small[..]].concat());
    assert!(o.status.success());
    assert!(stdout(&o).contains("XFAIL") && stdout(&o).contains("expected failure"), "{}", stdout(&o));
}

#[test]
fn evaluate_writes_reports_with_twenty_groups() {
    let dir = fixture();
    write_config(dir.path(), "exp.json", &config("runs/a"));
    assert!(dcr(dir.path(), &["train", "exp.json", "--epochs", "1"]).status.success());
    let o = dcr(dir.path(), &["evaluate", "runs/a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("runs/a");
    let csv = std::fs::read_to_string(run.join(EVAL_CSV)).unwrap();
    assert!(csv.starts_with("metric,scope,value\n"));
    let test_groups = csv.lines().filter(|l| l.starts_with("group_accuracy,\"test/")).count();
    assert_eq!(test_groups, 20);
    assert!(csv.contains("worst_group_accuracy,test,"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join(EVAL_JSON)).unwrap()).unwrap();
    assert_eq!(report["details"]["worst-group"]["test"]["groups"].as_array().unwrap().len(), 20);
}

#[test]
fn evaluate_concept_metrics_and_removal() {
    let dir = fixture();
    let ws = workspace(dir.path());
    let path = write_config(dir.path(), "exp.json", &config("runs/a"));
    cmd_train(&ws, &path, &Overrides { epochs: Some(1), ..Default::default() }, false).unwrap();
    let r = cmd_evaluate(&ws, Path::new("runs/a"), Some(&[Metric::Tcav, Metric::ProbeAccuracy, Metric::Removal]))
        .unwrap()
        .unwrap();
    let values = |m: &str| r.rows.iter().filter(|row| row.metric == m).map(|row| row.value).collect::<Vec<_>>();
    assert_eq!(values("probe_accuracy").len(), 2);
    assert!(values("tcav").iter().all(|&t| (0.0..=1.0).contains(&t)));
    assert!(!values("tcav").is_empty());
    let log = RunLog::load(&dir.path().join("runs/a")).unwrap();
    let last = log.last().unwrap();
    let gap = values("removal_gap")[0];
    assert!((gap - 100.0 * (last.train_accuracy - last.eval_accuracy["test"]).abs()).abs() < 1e-9);
}

#[test]
fn equalized_odds_names_the_empty_cell() {
    let dir = fixture();
    let mut v = config("runs/eo");
    v["model"]["num_classes"] = json!(2);
    v["model"]["input_shape"] = json!([2, 28, 28]);
    v["trainer"]["method"] = json!("erm");
    v["trainer"]["epochs"] = json!(1);
    v["data"]["train"] = json!({"generator": "cmnist", "split": "train", "subset": 200});
    v["data"].as_object_mut().unwrap().remove("concept");
    // colour equals the noisy label on every test example, leaving two cells empty
    v["data"]["eval"] = json!({"test": {"generator": "cmnist", "split": "test", "subset": 40, "color_corr": 0.9999}});
    write_config(dir.path(), "eo.json", &v);
    let o = dcr(dir.path(), &["train", "eo.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dcr(dir.path(), &["evaluate", "runs/eo", "--metrics", "fairness"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("test:") && err.contains("label y=") && err.contains("attribute a="), "{err}");
}

#[test]
fn evaluate_edge_cases() {
    let dir = fixture();
    write_config(dir.path(), "exp.json", &config("runs/a"));
    assert!(dcr(dir.path(), &["train", "exp.json", "--epochs", "1"]).status.success());
    let o = dcr(dir.path(), &["evaluate", "runs/a", "--metrics", ""]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("nothing to do"), "{}", stderr(&o));
    assert!(!dir.path().join("runs/a").join(EVAL_JSON).exists());
    let o = dcr(dir.path(), &["evaluate", "runs/a", "--metrics", "accuracy,vibes"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("vibes"));
    std::fs::remove_file(dir.path().join("runs/a/checkpoints/last.ckpt")).unwrap();
    let o = dcr(dir.path(), &["evaluate", "runs/a"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing checkpoint"));
    let o = dcr(dir.path(), &["evaluate", "runs/none"]);
    assert_eq!(o.status.code(), Some(2));
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
    #[test]
    fn configs_round_trip_losslessly(
        seed in proptest::prelude::any::<u64>(),
        epochs in 1usize..500,
        gamma in 0.0f64..10.0,
        lambdas in proptest::collection::vec(1e-4f64..5.0, 0..3),
        metrics in proptest::sample::subsequence(Metric::ALL.to_vec(), 0..=6),
        f64_precision in proptest::prelude::any::<bool>(),
        gap in 0.0f64..100.0,
    ) {
        let mut v = config("runs/prop");
        v["trainer"]["gamma"] = json!(gamma);
        v["trainer"]["probe_lambdas"] = json!(lambdas);
        v["eval"] = serde_json::to_value(&metrics).unwrap();
        v["precision"] = json!(if f64_precision { "f64" } else { "f32" });
        v["eval_options"]["gap_threshold"] = json!(gap);
        let mut cfg = parse(&v);
        cfg.apply(&Overrides { seed: Some(seed), epochs: Some(epochs), device: Some("cpu".into()) });
        let again = ExperimentConfig::from_json(&cfg.to_json().unwrap(), "round trip").unwrap();
        proptest::prop_assert_eq!(&cfg, &again);
        proptest::prop_assert_eq!(again.to_json().unwrap(), cfg.to_json().unwrap());
    }
}
