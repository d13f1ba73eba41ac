//! Subcommand implementations, callable as a library for tests.
//!
//! Each command resolves its inputs from the configuration, runs, writes
//! its CSV artifacts plus a manifest into `out_dir`, and returns the
//! manifest.

use std::path::{Path, PathBuf};

use easycore::analysis;
use easycore::attack::{evaluate_attack, write_attack_csv, read_attack_csv};
use easycore::coreset::{
    easycore_balanced, hardness_order, read_score_csv, read_selection_csv, write_score_csv,
    write_selection_csv, write_trajectory_csv, AignLedger, CoresetSpec, SelectionMethod,
};
use easycore::data::subset;
use easycore::error::{Error, Result};
use easycore::model::{build_model, Model};
use easycore::rng::{derive_seed, Stream};
use easycore::train::{
    input_gradient_norms, train_standard_with, train_trades_with, write_training_log,
};
use easycore::Tensor;

use crate::config::{Config, ScoreSplit, SelectMethod, Split, TrainMode};
use crate::manifest::{ManifestBuilder, RunManifest};
use crate::svg;

fn ensure_out_dir(config: &Config) -> Result<PathBuf> {
    std::fs::create_dir_all(&config.out_dir)?;
    Ok(config.out_dir.clone())
}

/// Train the scoring model with hardness recording and write the score
/// files. With `dump_data`, the generated splits and their manifest are
/// written alongside the scores.
pub fn cmd_score(config: &Config, dump_data: bool) -> Result<RunManifest> {
    config.validate()?;
    let out_dir = ensure_out_dir(config)?;
    let mut builder = ManifestBuilder::new("score", config);

    let (train, test) = config.datasets()?;
    if dump_data {
        let train_path = out_dir.join("dataset_train.csv");
        easycore::data::write_csv_dataset(&train_path, &train)?;
        builder.output(&train_path);
        if let Some(test) = &test {
            let test_path = out_dir.join("dataset_test.csv");
            easycore::data::write_csv_dataset(&test_path, test)?;
            builder.output(&test_path);
        }
        if matches!(config.dataset.kind, crate::config::DatasetKind::Clusters) {
            let manifest_path = out_dir.join("dataset_manifest.txt");
            easycore::data::write_dataset_manifest(
                &manifest_path,
                config.data_seed(),
                &config.cluster_config(),
                train.n(),
                test.as_ref().map_or(0, |t| t.n()),
            )?;
            builder.output(&manifest_path);
        }
    }
    let mut model = build_model(config.model_config(), config.init_seed())?;
    let mut train_cfg = config.train_config();
    train_cfg.record_aign = true;

    let mut test_ledger = match (config.train.score_split, &test) {
        (ScoreSplit::Both, Some(test)) => {
            Some(AignLedger::new(&test.ids, train_cfg.aign_trajectory))
        }
        (ScoreSplit::Both, None) => {
            return Err(Error::config(
                "train.score_split = \"both\" needs a test split (set dataset.test_path)",
            ))
        }
        _ => None,
    };

    let hook = |model: &Model, _epoch: usize| -> Result<()> {
        if let Some(ledger) = &mut test_ledger {
            let norms = input_gradient_norms(model, test.as_ref().expect("checked"))?;
            ledger.record_epoch(&norms);
        }
        Ok(())
    };
    let outcome = match config.train.mode {
        TrainMode::Standard => train_standard_with(&mut model, &train, &train_cfg, hook)?,
        TrainMode::Trades => {
            train_trades_with(&mut model, &train, &train_cfg, &config.trades_config(), hook)?
        }
    };

    let ledger = outcome.ledger.expect("record_aign was set");
    let scores = ledger.dense_scores()?;
    let scores_path = out_dir.join("scores.csv");
    write_score_csv(&scores_path, &train.labels, &scores)?;
    builder.output(&scores_path);

    if let Some(test_ledger) = &test_ledger {
        let test = test.as_ref().expect("checked");
        let test_scores = test_ledger.dense_scores()?;
        let path = out_dir.join("scores_test.csv");
        write_score_csv(&path, &test.labels, &test_scores)?;
        builder.output(&path);
    }
    if train_cfg.aign_trajectory {
        let path = out_dir.join("trajectory.csv");
        write_trajectory_csv(&path, &ledger)?;
        builder.output(&path);
    }
    let log_path = out_dir.join("training_log.csv");
    write_training_log(&log_path, &outcome.log)?;
    builder.output(&log_path);

    builder.note("train_rows", train.n());
    builder.note("epochs", config.train.epochs);
    if let Some(last) = outcome.log.last() {
        builder.note("final_train_accuracy", last.train_accuracy);
    }
    builder.write(&out_dir)
}

/// Apply the configured selection method to a score file.
pub fn cmd_select(config: &Config, scores_path: &Path) -> Result<RunManifest> {
    config.validate()?;
    let out_dir = ensure_out_dir(config)?;
    let mut builder = ManifestBuilder::new("select", config);
    builder.input(scores_path)?;

    let file = read_score_csv(scores_path)?;
    let fraction = config.select.fraction;
    let ids = match config.select.method {
        SelectMethod::EasycoreBalanced => {
            // Go directly so empty-class warnings surface.
            let balanced = easycore_balanced(&file.scores, &file.labels, fraction)?;
            if !balanced.empty_classes.is_empty() {
                eprintln!(
                    "warning: classes {:?} contribute no samples at fraction {fraction}",
                    balanced.empty_classes
                );
                builder.note("empty_classes", format!("{:?}", balanced.empty_classes));
            }
            balanced.ids
        }
        method => {
            let spec = CoresetSpec {
                method: match method {
                    SelectMethod::Easycore => SelectionMethod::EasyCore,
                    SelectMethod::Uniform => SelectionMethod::Uniform,
                    SelectMethod::EasycoreBalanced => unreachable!("handled above"),
                },
                fraction,
                seed: config.select_seed(),
            };
            spec.select(&file.scores, Some(&file.labels))?
        }
    };

    let selection_path = out_dir.join("selection.csv");
    write_selection_csv(&selection_path, &ids)?;
    builder.output(&selection_path);
    builder.note("method", format!("{:?}", config.select.method));
    builder.note("fraction", fraction);
    builder.note("selected_rows", ids.len());
    builder.write(&out_dir)
}

/// Train on the full set or a selection, standard or TRADES per config,
/// and write the final checkpoint.
pub fn cmd_train(config: &Config, selection_path: Option<&Path>) -> Result<RunManifest> {
    config.validate()?;
    let out_dir = ensure_out_dir(config)?;
    let mut builder = ManifestBuilder::new("train", config);

    let (full_train, _) = config.datasets()?;
    let train_data = match selection_path {
        Some(path) => {
            builder.input(path)?;
            let ids = read_selection_csv(path)?;
            if ids.is_empty() {
                return Err(Error::config(format!(
                    "selection file {} contains no ids",
                    path.display()
                )));
            }
            subset(&full_train, &ids)?
        }
        None => full_train,
    };

    let mut model = build_model(config.model_config(), config.init_seed())?;
    let mut train_cfg = config.train_config();
    // Hardness scoring is the score command's job.
    train_cfg.record_aign = false;
    train_cfg.aign_trajectory = false;

    let outcome = match config.train.mode {
        TrainMode::Standard => {
            train_standard_with(&mut model, &train_data, &train_cfg, |_, _| Ok(()))?
        }
        TrainMode::Trades => train_trades_with(
            &mut model,
            &train_data,
            &train_cfg,
            &config.trades_config(),
            |_, _| Ok(()),
        )?,
    };

    let model_path = out_dir.join("model.ezc");
    model.save_checkpoint(&model_path)?;
    builder.output(&model_path);
    let log_path = out_dir.join("training_log.csv");
    write_training_log(&log_path, &outcome.log)?;
    builder.output(&log_path);

    builder.note("train_rows", train_data.n());
    if let Some(last) = outcome.log.last() {
        builder.note("final_train_accuracy", last.train_accuracy);
        builder.note("final_mean_loss", last.mean_loss);
    }
    builder.write(&out_dir)
}

/// Attack a checkpointed model on the configured split and write the
/// per-sample outcomes plus a summary.
pub fn cmd_attack(config: &Config, checkpoint: &Path) -> Result<RunManifest> {
    config.validate()?;
    let out_dir = ensure_out_dir(config)?;
    let mut builder = ManifestBuilder::new("attack", config);
    builder.input(checkpoint)?;

    let model = Model::load_checkpoint(config.model_config(), checkpoint)?;
    let data = config.split(config.attack.split)?;
    let attack_cfg = config.attack_config()?;
    let report = evaluate_attack(&model, &data, &attack_cfg)?;

    let attack_path = out_dir.join("attack.csv");
    write_attack_csv(&attack_path, &data.ids, &report)?;
    builder.output(&attack_path);
    let summary_path = out_dir.join("summary.csv");
    std::fs::write(
        &summary_path,
        format!(
            "clean_accuracy,adversarial_accuracy\n{},{}\n",
            report.clean_accuracy, report.adv_accuracy
        ),
    )?;
    builder.output(&summary_path);

    builder.note("clean_accuracy", report.clean_accuracy);
    builder.note("adversarial_accuracy", report.adv_accuracy);
    builder.note("epsilon", attack_cfg.epsilon);
    builder.note("steps", attack_cfg.steps);
    println!(
        "attack: clean accuracy {:.4}, adversarial accuracy {:.4}",
        report.clean_accuracy, report.adv_accuracy
    );
    builder.write(&out_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyzeKind {
    Boundary,
    Kappa,
    Curve,
    Lemma1,
    Histogram,
    Project2d,
}

impl std::str::FromStr for AnalyzeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "boundary" => Ok(AnalyzeKind::Boundary),
            "kappa" => Ok(AnalyzeKind::Kappa),
            "curve" => Ok(AnalyzeKind::Curve),
            "lemma1" => Ok(AnalyzeKind::Lemma1),
            "histogram" => Ok(AnalyzeKind::Histogram),
            "project2d" => Ok(AnalyzeKind::Project2d),
            other => Err(format!(
                "unknown analysis kind {other:?}; expected boundary, kappa, curve, lemma1, \
                 histogram, or project2d"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalyzeInputs {
    pub checkpoint: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub attack_csv: Option<PathBuf>,
    pub bins: usize,
    pub raster: usize,
    pub variance_target: f64,
    pub split: Split,
    pub lemma1_batch: usize,
    pub lemma1_count: usize,
    pub svg: bool,
}

impl Default for AnalyzeInputs {
    fn default() -> Self {
        AnalyzeInputs {
            checkpoint: None,
            scores: None,
            attack_csv: None,
            bins: 20,
            raster: 400,
            variance_target: 0.95,
            split: Split::Test,
            lemma1_batch: 8,
            lemma1_count: 10,
            svg: false,
        }
    }
}

impl AnalyzeInputs {
    fn need_checkpoint(&self, kind: &str) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::config(format!("analyze {kind} needs --checkpoint")))
    }

    fn need_scores(&self, kind: &str) -> Result<&Path> {
        self.scores
            .as_deref()
            .ok_or_else(|| Error::config(format!("analyze {kind} needs --scores")))
    }
}

/// Dispatch one analysis and write its artifacts.
pub fn cmd_analyze(config: &Config, kind: AnalyzeKind, inputs: &AnalyzeInputs) -> Result<RunManifest> {
    config.validate()?;
    let out_dir = ensure_out_dir(config)?;
    let label = match kind {
        AnalyzeKind::Boundary => "analyze-boundary",
        AnalyzeKind::Kappa => "analyze-kappa",
        AnalyzeKind::Curve => "analyze-curve",
        AnalyzeKind::Lemma1 => "analyze-lemma1",
        AnalyzeKind::Histogram => "analyze-histogram",
        AnalyzeKind::Project2d => "analyze-project2d",
    };
    let mut builder = ManifestBuilder::new(label, config);

    match kind {
        AnalyzeKind::Boundary => {
            let checkpoint = inputs.need_checkpoint("boundary")?;
            builder.input(checkpoint)?;
            let model = Model::load_checkpoint(config.model_config(), checkpoint)?;
            let (train, _) = config.datasets()?;
            let grid =
                analysis::GridSpec::covering(&train, 0.1, inputs.raster, inputs.raster)?;
            let raster = analysis::boundary_raster(&model, &grid)?;
            let complexity = analysis::boundary_complexity(&raster);
            let path = out_dir.join("boundary.csv");
            analysis::write_raster_csv(&path, &raster)?;
            builder.output(&path);
            if inputs.svg {
                let svg_path = out_dir.join("boundary.svg");
                svg::write_raster_svg(&svg_path, &raster, "decision boundary")?;
                builder.output(&svg_path);
            }
            builder.note("boundary_complexity", complexity);
            builder.note("raster", format!("{}x{}", grid.nx, grid.ny));
            println!("analyze boundary: complexity {complexity} on {}x{}", grid.nx, grid.ny);
        }
        AnalyzeKind::Kappa => {
            let checkpoint = inputs.need_checkpoint("kappa")?;
            builder.input(checkpoint)?;
            let model = Model::load_checkpoint(config.model_config(), checkpoint)?;
            let data = config.split(inputs.split)?;
            let (batch, _) = data.full_batch();
            let features = model.penultimate_features(&batch)?;
            let kappa = analysis::pca_kappa(&features, inputs.variance_target)?;
            let path = out_dir.join("kappa.csv");
            analysis::write_kappa_csv(
                &path,
                &[(inputs.variance_target, kappa, config.model.hidden_dim)],
            )?;
            builder.output(&path);
            builder.note("kappa", kappa);
            builder.note("variance_target", inputs.variance_target);
            println!(
                "analyze kappa: {kappa} of {} components reach {}",
                config.model.hidden_dim, inputs.variance_target
            );
        }
        AnalyzeKind::Curve => {
            let scores_path = inputs.need_scores("curve")?;
            let attack_path = inputs.attack_csv.as_deref().ok_or_else(|| {
                Error::config("analyze curve needs --attack-csv")
            })?;
            builder.input(scores_path)?;
            builder.input(attack_path)?;
            let scores = read_score_csv(scores_path)?;
            let rows = read_attack_csv(attack_path)?;
            if rows.len() != scores.scores.len() {
                return Err(Error::config(format!(
                    "score file has {} rows but attack file has {}",
                    scores.scores.len(),
                    rows.len()
                )));
            }
            let mut flags = vec![false; rows.len()];
            for &(id, _, adv_ok, _) in &rows {
                if id >= flags.len() {
                    return Err(Error::config(format!(
                        "attack row id {id} out of range for {} scores",
                        flags.len()
                    )));
                }
                flags[id] = adv_ok;
            }
            let order = hardness_order(&scores.scores)?;
            let curve = analysis::hardness_accuracy_curve(&flags, &order, inputs.bins)?;
            let path = out_dir.join("curve.csv");
            analysis::write_curve_csv(&path, &curve)?;
            builder.output(&path);
            if inputs.svg {
                let svg_path = out_dir.join("curve.svg");
                svg::write_line_svg(
                    &svg_path,
                    &curve,
                    "adversarial accuracy by ascending hardness",
                )?;
                builder.output(&svg_path);
            }
            builder.note("bins", inputs.bins);
            builder.note("first_bin", curve[0]);
            builder.note("last_bin", *curve.last().expect("bins >= 2"));
        }
        AnalyzeKind::Lemma1 => {
            let checkpoint = inputs.need_checkpoint("lemma1")?;
            builder.input(checkpoint)?;
            let model = Model::load_checkpoint(config.model_config(), checkpoint)?;
            let data = config.split(inputs.split)?;
            if inputs.lemma1_batch > data.n() {
                return Err(Error::config(format!(
                    "lemma1 batch size {} exceeds split size {}",
                    inputs.lemma1_batch,
                    data.n()
                )));
            }
            let mut reports = Vec::with_capacity(inputs.lemma1_count);
            for i in 0..inputs.lemma1_count {
                // Deterministic batches; resample on rank deficiency.
                let mut report = None;
                for attempt in 0..50u64 {
                    let mut stream = Stream::derived(
                        derive_seed(config.seed, "lemma1", i as u64),
                        "attempt",
                        attempt,
                    );
                    let rows = easycore::rng::sample_without_replacement(
                        &mut stream,
                        data.n(),
                        inputs.lemma1_batch,
                    );
                    let (batch, labels) = data.batch(&rows);
                    match analysis::lemma1_check(&model, &batch, &labels) {
                        Ok(r) => {
                            report = Some(r);
                            break;
                        }
                        Err(Error::RankDeficient { .. }) => continue,
                        Err(e) => return Err(e),
                    }
                }
                reports.push(report.ok_or_else(|| {
                    Error::config("could not draw a full-rank batch in 50 attempts")
                })?);
            }
            let holds = reports.iter().filter(|r| r.holds).count();
            let path = out_dir.join("lemma1.csv");
            analysis::write_lemma1_csv(&path, &reports)?;
            builder.output(&path);
            builder.note("holds", format!("{holds}/{}", reports.len()));
            println!("analyze lemma1: bound holds on {holds}/{} batches", reports.len());
        }
        AnalyzeKind::Histogram => {
            let scores_path = inputs.need_scores("histogram")?;
            builder.input(scores_path)?;
            let scores = read_score_csv(scores_path)?;
            let histogram = analysis::aign_histogram(&scores.scores, inputs.bins)?;
            let path = out_dir.join("histogram.csv");
            analysis::write_histogram_csv(&path, &histogram)?;
            builder.output(&path);
            if inputs.svg {
                let svg_path = out_dir.join("histogram.svg");
                svg::write_histogram_svg(&svg_path, &histogram, "hardness score distribution")?;
                builder.output(&svg_path);
            }
            builder.note("bins", histogram.densities.len());
        }
        AnalyzeKind::Project2d => {
            let checkpoint = inputs.need_checkpoint("project2d")?;
            builder.input(checkpoint)?;
            let model = Model::load_checkpoint(config.model_config(), checkpoint)?;
            let data = config.split(inputs.split)?;
            let (batch, labels) = data.full_batch();
            let features = model.penultimate_features(&batch)?;
            let projection = analysis::pca_project2d(&features, &labels, data.class_count)?;
            let path = out_dir.join("projection.csv");
            analysis::write_projection_csv(&path, &data.ids, &labels, &projection)?;
            builder.output(&path);
            let centroid_path = out_dir.join("centroids.csv");
            analysis::write_centroids_csv(&centroid_path, &projection)?;
            builder.output(&centroid_path);
            if inputs.svg {
                let svg_path = out_dir.join("projection.svg");
                svg::write_projection_svg(
                    &svg_path,
                    &projection,
                    &labels,
                    "penultimate features, top-2 principal axes",
                )?;
                builder.output(&svg_path);
            }
            builder.note("classes", data.class_count);
        }
    }
    builder.write(&out_dir)
}

/// Convenience used by tests and the attack command: tensor of one dataset
/// row.
pub fn row_tensor(values: &[f64]) -> Result<Tensor> {
    Tensor::matrix(1, values.len(), values.to_vec())
}
