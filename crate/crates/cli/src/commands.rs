//! Subcommand implementations. Each takes already-parsed arguments and a
//! writer for its primary output, so the binary stays a thin shell.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};

use seqlab::data::{
    load_jigsaws, louo_splits, read_manifest, standardize, write_synthetic, Dataset, LoadConfig, Run, Sequence,
    SplitPlan, SynthSpec, DEFAULT_DECIMATION,
};
use seqlab::metrics::{permutation_test, score_run, EvalReport, PermutationResult, RunScore};
use seqlab::training::{self, gradcheck_grid, gradient_check, TrainError, TrainingConfig, GRADCHECK_EPS};
use seqlab::{predict, Direction, Model};

use crate::checkpoint::{Checkpoint, Header};
use crate::config::RunConfig;
use crate::render::{format_track, index_tracks, read_track, render_svg};
use crate::CliError;

fn write_out(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(CliError::runtime)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Generates a synthetic dataset under `out_dir` with its manifest.
pub fn cmd_synth(spec: &SynthSpec, out_dir: &Path) -> Result<Dataset, CliError> {
    if let SynthSpec::Longrange { length, lag, .. } = spec {
        if lag >= length {
            return Err(CliError::Config(format!("lag {lag} must be smaller than the length {length}")));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;
    write_synthetic(spec, out_dir).map_err(|e| match e {
        seqlab::Error::Contract(m) => CliError::Config(m),
        other => CliError::Runtime(other.to_string()),
    })
}

/// A loaded dataset plus the loader settings that produced it.
pub struct LoadedData {
    pub dataset: Dataset,
    pub decimation: usize,
}

/// Loads the configured dataset. Without an explicit decimation factor,
/// synthetic datasets (recognized by their manifest) keep every frame and
/// everything else uses the JIGSAWS default.
pub fn load_data(cfg: &RunConfig) -> Result<LoadedData, CliError> {
    let root = cfg.data_root()?;
    if !root.is_dir() {
        return Err(CliError::Data(format!("dataset directory {} does not exist", root.display())));
    }
    let manifest = read_manifest(root).map_err(CliError::data)?;
    let decimation = cfg
        .decimation
        .unwrap_or(if manifest.is_some() { 1 } else { DEFAULT_DECIMATION });
    let dataset = load_jigsaws(
        root,
        &LoadConfig {
            columns: cfg.columns.clone(),
            decimation,
        },
    )
    .map_err(CliError::data)?;
    info!(
        "loaded {} sequences, {} users, {} features, {} classes (decimation {decimation})",
        dataset.sequences.len(),
        dataset.users().len(),
        dataset.n_inputs(),
        dataset.n_classes()
    );
    Ok(LoadedData { dataset, decimation })
}

pub struct TrainSummary {
    pub checkpoint: Checkpoint,
    pub loss_log: String,
}

/// Trains on every sequence not belonging to `exclude_user` and writes the
/// checkpoint atomically. The loss log is written even when training
/// aborts; the checkpoint only on success.
pub fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    loss_log: Option<&Path>,
    exclude_user: Option<&str>,
    progress: &mut dyn Write,
) -> Result<TrainSummary, CliError> {
    let loaded = load_data(cfg)?;
    let ds = &loaded.dataset;
    let train_idx: Vec<usize> = (0..ds.sequences.len())
        .filter(|&i| Some(ds.sequences[i].user_id.as_str()) != exclude_user)
        .collect();
    if train_idx.is_empty() {
        return Err(CliError::Data("no training sequences left after exclusion".into()));
    }
    let prepared = if cfg.standardize {
        standardize(ds, &train_idx).map_err(CliError::data)?
    } else {
        ds.clone()
    };
    let train_set = prepared.subset(&train_idx);
    let examples = train_set.examples();

    let mut log_text = String::new();
    let mut io_err = None;
    let result = training::train(&examples, ds.n_inputs(), ds.n_classes(), &cfg.training, |r| {
        let line = format!("{r}\n");
        if let Err(e) = progress.write_all(line.as_bytes()) {
            io_err.get_or_insert(e);
        }
        log_text.push_str(&line);
    });
    let log_path = loss_log.map(Path::to_path_buf).unwrap_or_else(|| default_loss_log(out));
    write_file(&log_path, &log_text)?;
    if let Some(e) = io_err {
        return Err(CliError::runtime(e));
    }
    let outcome = result.map_err(|e| match e {
        TrainError::Invalid(e) => CliError::Config(e.to_string()),
        aborted @ TrainError::Aborted { .. } => CliError::runtime(aborted),
    })?;

    let checkpoint = Checkpoint {
        header: Header {
            arch: outcome.model.arch.clone(),
            class_names: ds.class_names.clone(),
            feature_names: ds.feature_names.clone(),
            normalization: prepared.normalization.clone(),
            columns: cfg.columns.clone(),
            decimation: loaded.decimation,
            training: cfg.training.clone(),
        },
        model: outcome.model,
    };
    checkpoint.save(out).map_err(CliError::runtime)?;
    info!("wrote checkpoint {}", out.display());
    Ok(TrainSummary {
        checkpoint,
        loss_log: log_text,
    })
}

pub fn default_loss_log(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".loss.log");
    checkpoint.with_file_name(name)
}

/// Anything that labels every frame of a sequence.
pub trait Labeler {
    fn label(&self, seq: &Sequence) -> seqlab::Result<Vec<usize>>;
}

impl Labeler for Model {
    fn label(&self, seq: &Sequence) -> seqlab::Result<Vec<usize>> {
        Ok(predict(self, &seq.inputs)?.labels)
    }
}

/// Runs every fold of `plan`. `fit` receives the run and the dataset as
/// prepared for it (standardized on the run's training users when enabled);
/// a fold whose fit or evaluation fails is recorded as failed and the rest
/// still run.
pub fn cross_validate<F>(ds: &Dataset, plan: &SplitPlan, do_standardize: bool, label: &str, mut fit: F) -> EvalReport
where
    F: FnMut(&Run, &Dataset) -> Result<Box<dyn Labeler>, String>,
{
    let mut runs = Vec::with_capacity(plan.runs.len());
    for run in &plan.runs {
        let scored = (|| -> Result<(f64, f64), String> {
            let prepared = if do_standardize {
                standardize(ds, &run.train).map_err(|e| e.to_string())?
            } else {
                ds.clone()
            };
            let labeler = fit(run, &prepared)?;
            let preds = run
                .test
                .iter()
                .map(|&i| labeler.label(&prepared.sequences[i]))
                .collect::<seqlab::Result<Vec<_>>>()
                .map_err(|e| e.to_string())?;
            score_run(
                run.test.iter().zip(&preds).map(|(&i, p)| {
                    let s = &prepared.sequences[i];
                    (&p[..], &s.labels[..], &s.mask[..])
                }),
                run.normalizer,
            )
            .map_err(|e| e.to_string())
        })();
        match &scored {
            Ok((acc, edit)) => info!(
                "{label} run {} (held out {}): accuracy {acc:.2}% edit {edit:.2}%",
                run.index, run.held_out_user
            ),
            Err(e) => warn!("{label} run {} (held out {}) failed: {e}", run.index, run.held_out_user),
        }
        runs.push(RunScore {
            run: run.index,
            held_out_user: run.held_out_user.clone(),
            scores: scored.ok(),
        });
    }
    EvalReport {
        label: label.to_string(),
        normalizer: plan.runs.first().map_or(0, |r| r.normalizer),
        runs,
    }
}

pub fn report_label(cfg: &TrainingConfig) -> String {
    format!("{} {}", cfg.cell, cfg.direction)
}

/// Leave-one-user-out evaluation for each direction in `directions`.
/// Reports are written as `<label>.csv` and `<label>.txt` under `out_dir`
/// when given. Any failed run makes the command fail after all reports
/// are written.
pub fn cmd_xval(
    cfg: &RunConfig,
    directions: &[Direction],
    out_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<Vec<EvalReport>, CliError> {
    let loaded = load_data(cfg)?;
    let ds = &loaded.dataset;
    let plan = louo_splits(ds).map_err(CliError::data)?;
    info!(
        "{} runs, edit-distance normalizer {} (max ground-truth segments over all sequences)",
        plan.runs.len(),
        plan.runs[0].normalizer
    );
    let mut reports = Vec::new();
    for &direction in directions {
        let tcfg = TrainingConfig {
            direction,
            ..cfg.training.clone()
        };
        let label = report_label(&tcfg);
        let report = cross_validate(ds, &plan, cfg.standardize, &label, |run, prepared| {
            let train_set = prepared.subset(&run.train);
            let examples = train_set.examples();
            training::train(&examples, prepared.n_inputs(), prepared.n_classes(), &tcfg, |r| {
                log::debug!("run {} {r}", run.index)
            })
            .map(|o| Box::new(o.model) as Box<dyn Labeler>)
            .map_err(|e| e.to_string())
        });
        write_out(out, &format!("{report}\n"))?;
        if let Some(dir) = out_dir {
            let stem = label.replace(' ', "_");
            write_file(&dir.join(format!("{stem}.csv")), &report.to_csv())?;
            write_file(&dir.join(format!("{stem}.txt")), &report.to_text())?;
        }
        reports.push(report);
    }
    let failed: usize = reports.iter().map(EvalReport::failed_runs).sum();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} cross-validation run(s) failed")));
    }
    Ok(reports)
}

/// Runs the finite-difference suite over the default grid with `seeds`
/// seeds per configuration and prints one line per case. `corrupt` perturbs
/// the analytic gradient as a negative control.
pub fn cmd_gradcheck(seeds: u64, corrupt: bool, out: &mut dyn Write) -> Result<f64, CliError> {
    let cases = gradcheck_grid(seeds);
    let mut worst: Option<(f64, String)> = None;
    let mut failures = 0;
    for case in &cases {
        let r = gradient_check(case, GRADCHECK_EPS, corrupt).map_err(CliError::runtime)?;
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        write_out(
            out,
            &format!(
                "{case} max_rel_error={:.3e} worst={}[{}] {verdict}\n",
                r.max_rel_error, r.worst_param, r.worst_index
            ),
        )?;
        failures += usize::from(!r.passed());
        if worst.as_ref().map_or(true, |(e, _)| r.max_rel_error > *e) {
            worst = Some((r.max_rel_error, format!("{case} at {}", r.worst_param)));
        }
    }
    let (max_err, where_) = worst.unwrap_or((0.0, "no cases".into()));
    write_out(
        out,
        &format!(
            "gradcheck cases={} failed={failures} max_rel_error={max_err:.3e} tolerance={:e} worst: {where_}\n",
            cases.len(),
            training::GRADCHECK_TOLERANCE
        ),
    )?;
    if failures > 0 {
        return Err(CliError::Gate(format!("{failures} of {} gradient checks exceed tolerance", cases.len())));
    }
    Ok(max_err)
}

/// Renders a truth track above a prediction track as SVG.
pub fn cmd_render(truth: &Path, pred: &Path, out: &Path, title: Option<&str>) -> Result<(), CliError> {
    let t = read_track(truth).map_err(CliError::data)?;
    let p = read_track(pred).map_err(CliError::data)?;
    let (classes, tracks) = index_tracks(&[t, p]);
    let title = title.map(str::to_string).unwrap_or_else(|| {
        truth
            .file_stem()
            .map(|s| s.to_string_lossy().trim_end_matches(".truth").to_string())
            .unwrap_or_default()
    });
    let svg = render_svg(&tracks[0], &tracks[1], &classes, &title).map_err(|e| CliError::Data(e.to_string()))?;
    write_file(out, &svg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Statistic {
    Accuracy,
    Edit,
}

impl Statistic {
    pub fn name(self) -> &'static str {
        match self {
            Statistic::Accuracy => "accuracy",
            Statistic::Edit => "edit",
        }
    }

    fn pick(self, r: &RunScore) -> Option<f64> {
        match self {
            Statistic::Accuracy => r.accuracy(),
            Statistic::Edit => r.edit(),
        }
    }
}

/// Pairs the runs of two reports by held-out user.
pub fn paired_scores(a: &EvalReport, b: &EvalReport, stat: Statistic) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let users = |r: &EvalReport| -> std::collections::BTreeSet<String> {
        r.runs.iter().map(|x| x.held_out_user.clone()).collect()
    };
    let (ua, ub) = (users(a), users(b));
    if ua != ub || ua.len() != a.runs.len() || ub.len() != b.runs.len() {
        let only_a: Vec<_> = ua.difference(&ub).cloned().collect();
        let only_b: Vec<_> = ub.difference(&ua).cloned().collect();
        return Err(CliError::Data(format!(
            "reports cover different runs: only in first {only_a:?}, only in second {only_b:?}"
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for ra in &a.runs {
        let rb = b.runs.iter().find(|r| r.held_out_user == ra.held_out_user).expect("same user sets");
        match (stat.pick(ra), stat.pick(rb)) {
            (Some(x), Some(y)) => {
                xs.push(x);
                ys.push(y);
            }
            _ => {
                return Err(CliError::Data(format!(
                    "run for held-out user {} failed in one of the reports",
                    ra.held_out_user
                )))
            }
        }
    }
    Ok((xs, ys))
}

pub fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    EvalReport::from_csv(&path.display().to_string(), &text).map_err(CliError::data)
}

/// Two-sided paired permutation test between two report files.
pub fn cmd_permtest(
    a: &Path,
    b: &Path,
    stats: &[Statistic],
    out: &mut dyn Write,
) -> Result<Vec<(Statistic, PermutationResult)>, CliError> {
    let (ra, rb) = (read_report(a)?, read_report(b)?);
    let mut results = Vec::new();
    for &stat in stats {
        let (xs, ys) = paired_scores(&ra, &rb, stat)?;
        let r = permutation_test(&xs, &ys, true).map_err(CliError::data)?;
        write_out(
            out,
            &format!("statistic={} runs={} mode={} p={}\n", stat.name(), xs.len(), r.mode, r.p_value),
        )?;
        results.push((stat, r));
    }
    Ok(results)
}

/// Labels one trial with a checkpoint and writes `<trial>.truth.txt` and
/// `<trial>.pred.txt` under `out_dir`. The dataset is loaded with the
/// checkpoint's column map and decimation and standardized with its
/// stored statistics. Returns the frame accuracy on labeled frames.
pub fn cmd_predict(checkpoint: &Path, data_root: &Path, trial: &str, out_dir: &Path) -> Result<f64, CliError> {
    let ck = Checkpoint::load(checkpoint).map_err(CliError::data)?;
    let ds = load_jigsaws(
        data_root,
        &LoadConfig {
            columns: ck.header.columns.clone(),
            decimation: ck.header.decimation,
        },
    )
    .map_err(CliError::data)?;
    if ds.feature_names != ck.header.feature_names {
        return Err(CliError::Data(format!(
            "dataset features {:?} differ from the checkpoint's {:?}",
            ds.feature_names, ck.header.feature_names
        )));
    }
    let mut seq = ds
        .sequences
        .iter()
        .find(|s| s.trial_id == trial)
        .cloned()
        .ok_or_else(|| CliError::Data(format!("trial {trial} not found under {}", data_root.display())))?;
    if let Some(stats) = &ck.header.normalization {
        stats.apply(&mut seq.inputs).map_err(CliError::data)?;
    }
    let labels = ck.model.label(&seq).map_err(CliError::runtime)?;
    let classes = &ck.header.class_names;
    let truth: Vec<Option<usize>> = (0..seq.len())
        .map(|t| {
            seq.mask[t]
                .then(|| classes.iter().position(|c| *c == ds.class_names[seq.labels[t]]))
                .flatten()
        })
        .collect();
    let pred: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    write_file(&out_dir.join(format!("{trial}.truth.txt")), &format_track(&truth, classes))?;
    write_file(&out_dir.join(format!("{trial}.pred.txt")), &format_track(&pred, classes))?;
    let labeled: Vec<usize> = (0..seq.len()).filter(|&t| truth[t].is_some()).collect();
    let hits = labeled.iter().filter(|&&t| truth[t] == pred[t]).count();
    Ok(if labeled.is_empty() {
        f64::NAN
    } else {
        100.0 * hits as f64 / labeled.len() as f64
    })
}
