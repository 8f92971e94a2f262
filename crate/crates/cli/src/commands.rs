//! The subcommands, callable without going through argument parsing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dcr_core::verify::{run_gradcheck, Fault, GradcheckReport, GradcheckScale};
use dcr_core::Scalar;
use dcr_datagen::{
    data_root, materialize, ConceptDataset, DataSpec, Dataset, DatasetCache, GroupedDataset, LabeledImageSet,
    GENERATORS,
};
use dcr_eval::{
    balanced_subsample, concept_probe_accuracy, fairness_metrics, fit_concept_vector, group_accuracy,
    probe_activations, removal_diagnostic, sensitivity_report, EvalReport,
};
use dcr_nets::{list_layer_dims, load_checkpoint, propose_probe_layers, Architecture, LayerTable, Model};
use dcr_trainer::{
    predict, run::CONFIG, train_adversarial_baseline, train_dcr, train_erm, EvalSet, Method, RunDir, RunLog, RunStatus,
    TrainOutcome,
};
use log::{info, warn};
use serde::Serialize;

use crate::config::{ExperimentConfig, Metric, Overrides, Precision};
use crate::error::{CliError, Result};

pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_CSV: &str = "eval_report.csv";

/// Root for every relative path, plus the dataset cache and raw data locations under it.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub workdir: PathBuf,
    pub cache: DatasetCache,
    pub data_root: PathBuf,
}

impl Workspace {
    pub fn new(workdir: &Path) -> Self {
        Workspace {
            workdir: workdir.to_path_buf(),
            cache: DatasetCache::resolve(workdir),
            data_root: data_root(workdir),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    pub fn load(&self, spec: &DataSpec, seed: u64) -> Result<Dataset> {
        let m = materialize(spec, seed, &self.data_root, Some(&self.cache))?;
        info!(
            "{} ({} examples, {})",
            spec.generator(),
            m.dataset.len(),
            if m.from_cache { "cached" } else { "generated" }
        );
        Ok(m.dataset)
    }
}

// ---------------------------------------------------------------- generate

#[derive(Clone, Debug, Serialize)]
pub struct GenerateOutcome {
    pub generator: String,
    pub kind: String,
    pub examples: usize,
    pub path: PathBuf,
    pub from_cache: bool,
}

/// Parses a data spec, rejecting unknown generators by name before field checks.
pub fn parse_data_spec(text: &str) -> Result<DataSpec> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("data spec: {e}")))?;
    match value.get("generator").and_then(|g| g.as_str()) {
        Some(g) if GENERATORS.contains(&g) => {}
        Some(g) => {
            return Err(CliError::Validation(format!("unknown generator '{g}' (known: {})", GENERATORS.join(", "))))
        }
        None => return Err(CliError::Validation("data spec needs a \"generator\" field".into())),
    }
    let spec: DataSpec = serde_json::from_value(value).map_err(|e| CliError::Validation(format!("data spec: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_generate(ws: &Workspace, spec: &DataSpec, seed: u64) -> Result<GenerateOutcome> {
    let m = materialize(spec, seed, &ws.data_root, Some(&ws.cache))?;
    Ok(GenerateOutcome {
        generator: spec.generator().into(),
        kind: m.dataset.kind().into(),
        examples: m.dataset.len(),
        path: m.path.ok_or_else(|| CliError::Runtime("dataset was not written to the cache".into()))?,
        from_cache: m.from_cache,
    })
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub label: String,
    pub epochs: usize,
    pub final_train_accuracy: Option<f64>,
    pub final_eval_accuracy: std::collections::BTreeMap<String, f64>,
}

/// Training examples, with their attributes when the generator provides them.
fn labeled_with_attributes(ds: Dataset, what: &str) -> Result<(LabeledImageSet, Option<Vec<u8>>)> {
    match ds {
        Dataset::Labeled(s) => Ok((s, None)),
        Dataset::Grouped(g) => {
            let s = g.as_labeled();
            Ok((s, Some(g.attributes)))
        }
        Dataset::Concept(_) => Err(CliError::Validation(format!("{what}: expected a labeled set, got a concept set"))),
    }
}

fn concept_set(ds: Dataset) -> Result<ConceptDataset> {
    match ds {
        Dataset::Concept(c) => Ok(c),
        other => Err(CliError::Validation(format!("data.concept: expected a concept set, got a {} set", other.kind()))),
    }
}

/// Reads, overrides and validates a config; relative paths resolve against the workspace.
pub fn resolve_config(ws: &Workspace, path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&ws.resolve(path))?;
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(ws: &Workspace, config_path: &Path, overrides: &Overrides, force: bool) -> Result<TrainSummary> {
    let cfg = resolve_config(ws, config_path, overrides)?;
    train_config(ws, &cfg, force)
}

/// Runs an already validated config.
pub fn train_config(ws: &Workspace, cfg: &ExperimentConfig, force: bool) -> Result<TrainSummary> {
    let root = ws.resolve(&cfg.output_dir);
    // the config may live inside the run directory it names
    let text = cfg.to_json()?;
    let run = RunDir::create(&root, force)?;
    std::fs::write(run.path(CONFIG), text)?;
    let log = match cfg.precision {
        Precision::F32 => train_typed::<f32>(ws, cfg, &run)?.log,
        Precision::F64 => train_typed::<f64>(ws, cfg, &run)?.log,
    };
    let last = log.last();
    Ok(TrainSummary {
        run_dir: root,
        label: log.label.clone(),
        epochs: log.epochs.len(),
        final_train_accuracy: last.map(|e| e.train_accuracy),
        final_eval_accuracy: last.map(|e| e.eval_accuracy.clone()).unwrap_or_default(),
    })
}

fn train_typed<T: Scalar>(ws: &Workspace, cfg: &ExperimentConfig, run: &RunDir) -> Result<TrainOutcome<T>> {
    let seed = cfg.data.seed;
    let (train, attributes) = labeled_with_attributes(ws.load(&cfg.data.train, seed)?, "data.train")?;
    let mut eval_sets = Vec::new();
    for (name, spec) in &cfg.data.eval {
        eval_sets.push((name.clone(), labeled_with_attributes(ws.load(spec, seed)?, &format!("data.eval.{name}"))?.0));
    }
    let evals: Vec<EvalSet<'_>> = eval_sets.iter().map(|(n, s)| EvalSet { name: n, set: s }).collect();
    let model = Model::<T>::new(cfg.model.clone(), cfg.trainer.seed)?;
    let t = &cfg.trainer;
    info!("training {} for {} epochs into {}", t.effective_method().name(), t.epochs, run.root().display());
    let out = match (t.method, &cfg.data.concept) {
        (Method::Dcr, Some(spec)) => {
            let concept = concept_set(ws.load(spec, seed)?)?;
            train_dcr(model, &train, &concept, &evals, t, Some(run))?
        }
        (Method::Dcr, None) | (Method::Erm, _) => {
            let t = dcr_trainer::TrainConfig { method: Method::Erm, ..t.clone() };
            train_erm(model, &train, &evals, &t, Some(run))?
        }
        (Method::Adversarial, _) => {
            train_adversarial_baseline(model, &train, attributes.as_deref(), &evals, t, Some(run))?
        }
    };
    Ok(out)
}

// ---------------------------------------------------------------- analyze-layers

#[derive(Clone, Debug)]
pub struct LayerAnalysis {
    pub table: LayerTable,
    pub threshold: f64,
    pub proposal: Vec<usize>,
}

pub fn cmd_analyze_layers(
    arch: &Architecture,
    classes: usize,
    shape: [usize; 3],
    threshold: f64,
) -> Result<LayerAnalysis> {
    let table = list_layer_dims(arch, classes, shape)?;
    let proposal = propose_probe_layers(&table.layers, threshold)?;
    Ok(LayerAnalysis { table, threshold, proposal })
}

impl LayerAnalysis {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let ratios: std::collections::BTreeMap<usize, f64> = self.table.ratios().into_iter().collect();
        let _ = writeln!(s, "{:>5}  {:<14} {:>8}  {:>6}", "layer", "name", "d", "ratio");
        let _ = writeln!(s, "{:>5}  {:<14} {:>8}", 0, "input", self.table.input_dims);
        for l in &self.table.layers {
            let ratio = ratios.get(&l.index).map(|r| format!("{r:.2}")).unwrap_or_default();
            let mark = if self.proposal.contains(&l.index) { "  *" } else { "" };
            let _ = writeln!(s, "{:>5}  {:<14} {:>8}  {:>6}{mark}", l.index, l.name, l.output_dims, ratio);
        }
        let list: Vec<String> = self.proposal.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(s, "proposed probes (ratio >= {}): {{{}}}", self.threshold, list.join(","));
        s
    }
}

// ---------------------------------------------------------------- gradcheck

pub fn cmd_gradcheck(scale: &GradcheckScale, fault: Fault, single: bool) -> Result<GradcheckReport> {
    let report = if single { run_gradcheck::<f32>(scale, fault)? } else { run_gradcheck::<f64>(scale, fault)? };
    Ok(report)
}

pub fn render_gradcheck(report: &GradcheckReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "gradcheck ({})", report.scalar);
    for c in &report.checks {
        let status = match (c.passed, report.expected_failure) {
            (true, _) => "ok",
            (false, true) => "XFAIL",
            (false, false) => "FAIL",
        };
        let _ = writeln!(
            s,
            "  {:<28} {:>3} instances  max rel err {:>10.3e}  tol {:>7.1e}  {status}",
            c.name, c.instances, c.max_rel_error, c.tolerance
        );
    }
    if report.expected_failure && !report.all_passed() {
        let _ = writeln!(s, "expected failure: {} cannot resolve these tolerances", report.scalar);
    }
    s
}

/// Exit status of a gradcheck: failures count unless the scalar type was expected to fail.
pub fn gradcheck_status(report: &GradcheckReport) -> Result<()> {
    if report.all_passed() || report.expected_failure {
        return Ok(());
    }
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    Err(CliError::CheckFailed(format!("gradcheck failed: {}", failed.join(", "))))
}

// ---------------------------------------------------------------- evaluate

/// Computes `metrics` for the run at `run_dir` from its last checkpoint. `None` means the
/// metrics listed in the run's config; an empty list does nothing.
pub fn cmd_evaluate(ws: &Workspace, run_dir: &Path, metrics: Option<&[Metric]>) -> Result<Option<EvalReport>> {
    let root = ws.resolve(run_dir);
    let run = RunDir::open(&root).map_err(|e| CliError::Validation(e.to_string()))?;
    let cfg = ExperimentConfig::load(&run.path(CONFIG))?;
    let metrics: Vec<Metric> = metrics.map(<[Metric]>::to_vec).unwrap_or_else(|| cfg.eval.clone());
    if metrics.is_empty() {
        warn!("no metrics requested for {}; nothing to do", root.display());
        return Ok(None);
    }
    let ckpt = run.last_checkpoint();
    if !ckpt.is_file() {
        return Err(CliError::Validation(format!("missing checkpoint {}", ckpt.display())));
    }
    let report = match cfg.precision {
        Precision::F32 => evaluate_typed::<f32>(ws, &cfg, &run, &metrics)?,
        Precision::F64 => evaluate_typed::<f64>(ws, &cfg, &run, &metrics)?,
    };
    report.write_json(&run.path(EVAL_JSON))?;
    report.write_csv(&run.path(EVAL_CSV))?;
    Ok(Some(report))
}

struct EvalData {
    name: String,
    set: LabeledImageSet,
    grouped: Option<GroupedDataset>,
}

fn eval_data(ws: &Workspace, cfg: &ExperimentConfig) -> Result<Vec<EvalData>> {
    let mut sets = Vec::new();
    let specs = std::iter::once(("train".to_string(), &cfg.data.train))
        .chain(cfg.data.eval.iter().map(|(n, s)| (n.clone(), s)));
    for (name, spec) in specs {
        let (set, grouped) = match ws.load(spec, cfg.data.seed)? {
            Dataset::Labeled(s) => (s, None),
            Dataset::Grouped(g) => (g.as_labeled(), Some(g)),
            Dataset::Concept(_) => return Err(CliError::Validation(format!("{name}: expected a labeled set"))),
        };
        sets.push(EvalData { name, set, grouped });
    }
    Ok(sets)
}

fn evaluate_typed<T: Scalar>(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    run: &RunDir,
    metrics: &[Metric],
) -> Result<EvalReport> {
    let (model, header) = load_checkpoint::<T>(&run.last_checkpoint())?;
    info!("evaluating {} (checkpoint seed {})", run.root().display(), header.seed);
    let bs = cfg.trainer.eval_batch_size;
    let needs_sets =
        metrics.iter().any(|m| matches!(m, Metric::Accuracy | Metric::WorstGroup | Metric::Fairness | Metric::Tcav));
    let sets = if needs_sets { eval_data(ws, cfg)? } else { Vec::new() };
    let mut predictions = std::collections::BTreeMap::new();
    if metrics.iter().any(|m| matches!(m, Metric::Accuracy | Metric::WorstGroup | Metric::Fairness)) {
        for d in &sets {
            predictions.insert(d.name.clone(), predict(&model, &d.set, bs)?);
        }
    }
    let mut concept: Option<ConceptDataset> = None;
    let mut report = EvalReport::default();
    for &metric in metrics {
        match metric {
            Metric::Accuracy => {
                let mut detail = serde_json::Map::new();
                for d in &sets {
                    let p = &predictions[&d.name];
                    let acc =
                        p.iter().zip(&d.set.labels).filter(|(a, b)| a == b).count() as f64 / d.set.len().max(1) as f64;
                    report.push("accuracy", d.name.clone(), acc);
                    detail.insert(d.name.clone(), acc.into());
                }
                report.detail("accuracy", &detail)?;
            }
            Metric::WorstGroup => {
                let mut detail = serde_json::Map::new();
                for d in sets.iter().filter(|d| d.grouped.is_some()) {
                    let g = d.grouped.as_ref().expect("filtered");
                    let gm = group_accuracy(&predictions[&d.name], &g.labels, &g.attributes, g.num_classes)?;
                    for row in &gm.groups {
                        let scope = format!("{}/y={},a={}", d.name, row.label, row.attribute);
                        report.push("group_accuracy", scope, row.accuracy.unwrap_or(f64::NAN));
                    }
                    report.push("worst_group_accuracy", d.name.clone(), gm.worst_group_accuracy);
                    detail.insert(d.name.clone(), serde_json::to_value(&gm)?);
                }
                if detail.is_empty() {
                    return Err(CliError::Validation("worst-group needs a data set with attributes".into()));
                }
                report.detail("worst-group", &detail)?;
            }
            Metric::Fairness => {
                let mut detail = serde_json::Map::new();
                for d in sets.iter().filter(|d| d.grouped.is_some()) {
                    let g = d.grouped.as_ref().expect("filtered");
                    let f = fairness_metrics(&predictions[&d.name], &g.labels, &g.attributes)
                        .map_err(|e| CliError::Validation(format!("{}: {e}", d.name)))?;
                    report.push("demographic_parity", d.name.clone(), f.demographic_parity);
                    report.push("equalized_odds", d.name.clone(), f.equalized_odds);
                    detail.insert(d.name.clone(), serde_json::to_value(&f)?);
                }
                if detail.is_empty() {
                    return Err(CliError::Validation("fairness needs a data set with attributes".into()));
                }
                report.detail("fairness", &detail)?;
            }
            Metric::Tcav => tcav(concept_for(ws, cfg, "tcav", &mut concept)?, cfg, &model, &sets, &mut report)?,
            Metric::ProbeAccuracy => {
                let concept = concept_for(ws, cfg, "probe-accuracy", &mut concept)?;
                let mut detail = Vec::new();
                for (i, probe) in model.config().probe_points.iter().enumerate() {
                    let lambda = cfg.eval_options.probe_lambda.unwrap_or(probe.lambda);
                    let opts = &cfg.eval_options;
                    let acc = concept_probe_accuracy(
                        &model,
                        probe,
                        concept,
                        lambda,
                        opts.max_concept_examples,
                        opts.seed + i as u64,
                    )?;
                    report.push("probe_accuracy", format!("layer{}", probe.layer), acc.balanced_accuracy);
                    detail.push(acc);
                }
                report.detail("probe-accuracy", &detail)?;
            }
            Metric::Removal => {
                let log = RunLog::load(run.root())?;
                if log.status == RunStatus::Diverged {
                    warn!("{} diverged; the removal diagnostic uses its last completed epoch", run.root().display());
                }
                let opts = &cfg.eval_options;
                let r = removal_diagnostic(&log, "train", &opts.clean_test_set, opts.gap_threshold)?;
                report.push("removal_train_accuracy", "", r.train_accuracy);
                report.push("removal_test_accuracy", opts.clean_test_set.clone(), r.test_accuracy);
                report.push("removal_gap", "", r.gap);
                report.push("removed", "", if r.removed { 1.0 } else { 0.0 });
                report.detail("removal", &r)?;
            }
        }
    }
    Ok(report)
}

fn concept_for<'a>(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    metric: &str,
    slot: &'a mut Option<ConceptDataset>,
) -> Result<&'a ConceptDataset> {
    if slot.is_none() {
        let spec =
            cfg.data.concept.as_ref().ok_or_else(|| CliError::Validation(format!("{metric} needs data.concept")))?;
        *slot = Some(concept_set(ws.load(spec, cfg.data.seed)?)?);
    }
    Ok(slot.as_ref().expect("filled above"))
}

/// Fits an exact CAV per probe on the concept set and scores the clean test set against it.
fn tcav<T: Scalar>(
    concept: &ConceptDataset,
    cfg: &ExperimentConfig,
    model: &Model<T>,
    sets: &[EvalData],
    report: &mut EvalReport,
) -> Result<()> {
    let probes = &model.config().probe_points;
    if probes.is_empty() {
        return Err(CliError::Validation("tcav needs at least one model.probe_points entry".into()));
    }
    let opts = &cfg.eval_options;
    let target = sets
        .iter()
        .find(|d| d.name == opts.clean_test_set)
        .ok_or_else(|| CliError::Validation(format!("tcav: no evaluation set named '{}'", opts.clean_test_set)))?;
    let concept_name = cfg.data.concept.as_ref().map(|c| c.generator()).unwrap_or_default();
    let mut detail = Vec::new();
    for (i, probe) in probes.iter().enumerate() {
        let idx = balanced_subsample(&concept.concept_labels, opts.max_concept_examples, opts.seed + i as u64);
        let h = probe_activations(model, probe, concept, &idx, cfg.trainer.eval_batch_size)?;
        let labels: Vec<u8> = idx.iter().map(|&j| concept.concept_labels[j]).collect();
        let v = fit_concept_vector(&h, &labels, opts.probe_lambda.unwrap_or(probe.lambda))?;
        let v: Vec<T> = v.into_iter().map(T::lit).collect();
        let r =
            sensitivity_report(model, &target.set, probe, &v, concept_name, opts.seed, cfg.trainer.eval_batch_size)?;
        for t in &r.tcav {
            report.push("tcav", format!("layer{}/{}/class{}", probe.layer, target.name, t.class), t.score);
        }
        detail.push(serde_json::json!({ "layer": probe.layer, "tcav": r.tcav }));
    }
    report.detail("tcav", &detail)?;
    Ok(())
}
