//! Datasets: JIGSAWS-layout ingestion, standardization, leave-one-user-out
//! splits and the synthetic generators.
//!
//! On disk a dataset is a directory with `kinematics/AllGestures/<trial>.txt`
//! (one whitespace-separated row of reals per frame) and
//! `transcriptions/<trial>.txt` (lines `start end label`, 1-based inclusive).
//! The user of a trial is the alphabetic prefix of the last `_`-separated
//! token of its name, so `Suturing_B001` belongs to user `B`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{dataset_normalizer, to_segments, SegmentSeq};
use crate::numeric::{Matrix, Rng, Vector};
use crate::training::Example;

/// Smallest standard deviation used when z-scoring.
pub const STD_FLOOR: f64 = 1e-8;
pub const DEFAULT_DECIMATION: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub trial_id: String,
    pub user_id: String,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Sequence {
    pub fn new(trial_id: String, user_id: String, inputs: Matrix, labels: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        let s = Sequence {
            trial_id,
            user_id,
            inputs,
            labels,
            mask,
        };
        s.check_lengths()?;
        Ok(s)
    }

    fn check_lengths(&self) -> Result<()> {
        let t = self.inputs.rows();
        if self.labels.len() != t || self.mask.len() != t {
            return Err(Error::shape(
                "Sequence",
                format!("{}: {t} frames", self.trial_id),
                format!("{} labels, {} mask flags", self.labels.len(), self.mask.len()),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example(&self) -> Example<'_> {
        Example {
            inputs: &self.inputs,
            labels: &self.labels,
            mask: &self.mask,
        }
    }

    pub fn segments(&self) -> SegmentSeq {
        to_segments(&self.labels, &self.mask).expect("sequence lengths are validated")
    }

    pub fn labeled_frames(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Per-feature z-scoring parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean and population standard deviation over every frame of `seqs`,
    /// with the deviation floored at [`STD_FLOOR`].
    pub fn compute<'a>(seqs: impl IntoIterator<Item = &'a Sequence>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut seqs_seen = Vec::new();
        for s in seqs {
            if sum.is_empty() {
                sum = vec![0.0; s.inputs.cols()];
            } else if s.inputs.cols() != sum.len() {
                return Err(Error::shape("NormStats::compute", sum.len(), s.inputs.cols()));
            }
            for row in s.inputs.iter_rows() {
                for (acc, v) in sum.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            n += s.len();
            seqs_seen.push(s);
        }
        if n == 0 {
            return Err(Error::contract("standardization needs at least one training frame"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; mean.len()];
        for s in seqs_seen {
            for row in s.inputs.iter_rows() {
                for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(NormStats { mean, std })
    }

    pub fn identity(n_features: usize) -> Self {
        NormStats {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
        }
    }

    pub fn apply(&self, inputs: &mut Matrix) -> Result<()> {
        if inputs.cols() != self.mean.len() {
            return Err(Error::shape("NormStats::apply", self.mean.len(), inputs.cols()));
        }
        for r in 0..inputs.rows() {
            for ((v, m), s) in inputs.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
    /// Set once the inputs have been standardized.
    pub normalization: Option<NormStats>,
}

impl Dataset {
    pub fn n_inputs(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.sequences {
            s.check_lengths()?;
            if s.inputs.cols() != self.n_inputs() {
                return Err(Error::Data(format!(
                    "{} has {} features, dataset declares {}",
                    s.trial_id,
                    s.inputs.cols(),
                    self.n_inputs()
                )));
            }
            if let Some(t) = (0..s.len()).find(|&t| s.mask[t] && s.labels[t] >= self.n_classes()) {
                return Err(Error::Data(format!(
                    "{} frame {t}: label {} outside {} classes",
                    s.trial_id,
                    s.labels[t],
                    self.n_classes()
                )));
            }
        }
        Ok(())
    }

    /// Distinct users in sorted order.
    pub fn users(&self) -> Vec<String> {
        self.sequences
            .iter()
            .map(|s| s.user_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            class_names: self.class_names.clone(),
            feature_names: self.feature_names.clone(),
            normalization: self.normalization.clone(),
        }
    }

    pub fn examples(&self) -> Vec<Example<'_>> {
        self.sequences.iter().map(Sequence::example).collect()
    }

    pub fn segments(&self) -> Vec<SegmentSeq> {
        self.sequences.iter().map(Sequence::segments).collect()
    }

    /// Keeps frames `0, k, 2k, …` of every sequence.
    pub fn decimate(&self, k: usize) -> Result<Dataset> {
        if k == 0 {
            return Err(Error::contract("decimation factor must be at least 1"));
        }
        let mut out = self.clone();
        for s in &mut out.sequences {
            *s = decimate_sequence(s, k);
        }
        Ok(out)
    }
}

fn decimate_sequence(s: &Sequence, k: usize) -> Sequence {
    let keep: Vec<usize> = (0..s.len()).step_by(k).collect();
    let mut data = Vec::with_capacity(keep.len() * s.inputs.cols());
    for &t in &keep {
        data.extend_from_slice(s.inputs.row(t));
    }
    Sequence {
        trial_id: s.trial_id.clone(),
        user_id: s.user_id.clone(),
        inputs: Matrix::new(keep.len(), s.inputs.cols(), data).expect("row-aligned copy"),
        labels: keep.iter().map(|&t| s.labels[t]).collect(),
        mask: keep.iter().map(|&t| s.mask[t]).collect(),
    }
}

/// Z-scores every sequence with statistics from `train` only.
pub fn standardize(dataset: &Dataset, train: &[usize]) -> Result<Dataset> {
    if train.is_empty() {
        return Err(Error::contract("standardize needs at least one training sequence"));
    }
    let stats = NormStats::compute(train.iter().map(|&i| &dataset.sequences[i]))?;
    let mut out = dataset.clone();
    for s in &mut out.sequences {
        stats.apply(&mut s.inputs)?;
    }
    out.normalization = Some(stats);
    Ok(out)
}

pub fn one_hot(label: usize, n_classes: usize) -> Result<Vector> {
    if label >= n_classes {
        return Err(Error::contract(format!("label {label} out of range for {n_classes} classes")));
    }
    let mut v = Vector::zeros(n_classes);
    v[label] = 1.0;
    Ok(v)
}

/// One leave-one-user-out fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub index: usize,
    pub held_out_user: String,
    pub train_users: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub normalizer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub runs: Vec<Run>,
}

/// One run per user in sorted order. The edit-distance normalizer is the
/// largest ground-truth segment count over the whole dataset and is shared
/// by every run.
pub fn louo_splits(dataset: &Dataset) -> Result<SplitPlan> {
    let users = dataset.users();
    if users.len() < 2 {
        return Err(Error::Data(format!(
            "leave-one-user-out needs at least 2 users, found {}",
            users.len()
        )));
    }
    let normalizer = dataset_normalizer(&dataset.segments())?.max(1);
    let runs = users
        .iter()
        .enumerate()
        .map(|(index, user)| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..dataset.sequences.len()).partition(|&i| &dataset.sequences[i].user_id == user);
            Run {
                index,
                held_out_user: user.clone(),
                train_users: users.iter().filter(|u| *u != user).cloned().collect(),
                train,
                test,
                normalizer,
            }
        })
        .collect();
    Ok(SplitPlan { runs })
}

/// Which kinematic columns become features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnSelection {
    /// The JIGSAWS map for 76-column files, every column otherwise.
    Auto,
    Jigsaws,
    All,
    /// Explicit 0-based column indices.
    List(Vec<usize>),
}

impl std::str::FromStr for ColumnSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(ColumnSelection::Auto),
            "jigsaws" => Ok(ColumnSelection::Jigsaws),
            "all" => Ok(ColumnSelection::All),
            list => list
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::contract(format!("bad column index `{c}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(ColumnSelection::List),
        }
    }
}

pub const JIGSAWS_COLUMNS: usize = 76;

/// Positions, linear velocities and gripper angle of the slave-left and
/// slave-right manipulators, as 0-based columns of the 76-column layout.
pub fn jigsaws_column_map() -> Vec<(usize, String)> {
    let mut out = Vec::with_capacity(14);
    for (side, base) in [("slave_left", 38usize), ("slave_right", 57)] {
        for (i, axis) in ["x", "y", "z"].iter().enumerate() {
            out.push((base + i, format!("{side}.pos_{axis}")));
        }
        for (i, axis) in ["x", "y", "z"].iter().enumerate() {
            out.push((base + 12 + i, format!("{side}.vel_{axis}")));
        }
        out.push((base + 18, format!("{side}.gripper")));
    }
    out
}

impl ColumnSelection {
    fn resolve(&self, file_columns: usize) -> Vec<(usize, String)> {
        let all = || (0..file_columns).map(|c| (c, format!("col{c}"))).collect();
        match self {
            ColumnSelection::Auto if file_columns == JIGSAWS_COLUMNS => jigsaws_column_map(),
            ColumnSelection::Auto | ColumnSelection::All => all(),
            ColumnSelection::Jigsaws => jigsaws_column_map(),
            ColumnSelection::List(cols) => cols.iter().map(|&c| (c, format!("col{c}"))).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadConfig {
    pub columns: ColumnSelection,
    pub decimation: usize,
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig {
            columns: ColumnSelection::Auto,
            decimation: DEFAULT_DECIMATION,
        }
    }
}

/// Directory holding the per-trial kinematics files under `root`.
pub fn kinematics_dir(root: &Path) -> PathBuf {
    let nested = root.join("kinematics").join("AllGestures");
    if nested.is_dir() {
        nested
    } else {
        root.join("kinematics")
    }
}

pub fn transcriptions_dir(root: &Path) -> PathBuf {
    root.join("transcriptions")
}

pub fn user_of_trial(trial: &str) -> Result<String> {
    let token = trial.rsplit('_').next().unwrap_or(trial);
    let user: String = token.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    if user.is_empty() {
        return Err(Error::Data(format!("cannot derive a user from trial name `{trial}`")));
    }
    Ok(user)
}

struct Span {
    start: usize,
    end: usize,
    label: String,
}

fn parse_transcription(path: &Path, frames: usize) -> Result<Vec<Span>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut spans = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 3 {
            return Err(err(format!("expected `start end label`, found {} fields", fields.len())));
        }
        let frame = |f: &str| f.parse::<usize>().map_err(|e| err(format!("bad frame index `{f}`: {e}")));
        let (start, end) = (frame(fields[0])?, frame(fields[1])?);
        if start == 0 || start > end {
            return Err(err(format!("invalid span {start}..{end}")));
        }
        if end > frames {
            return Err(err(format!("span ends at frame {end} but the trial has {frames} frames")));
        }
        spans.push(Span {
            start: start - 1,
            end,
            label: fields[2].to_string(),
        });
    }
    Ok(spans)
}

fn parse_kinematics(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cols = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let before = data.len();
        for f in line.split_whitespace() {
            data.push(f.parse::<f64>().map_err(|e| err(format!("bad number `{f}`: {e}")))?);
        }
        let n = data.len() - before;
        if n == 0 {
            continue;
        }
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => return Err(err(format!("ragged row: {n} columns, expected {c}"))),
            Some(_) => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Data(format!("{}: no frames", path.display())))?;
    Matrix::new(rows, cols, data)
}

fn txt_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Loads every trial under `root`. Trials are ordered by name, so the
/// result is a pure function of the directory contents and `cfg`.
pub fn load_jigsaws(root: &Path, cfg: &LoadConfig) -> Result<Dataset> {
    if cfg.decimation == 0 {
        return Err(Error::contract("decimation factor must be at least 1"));
    }
    let kin_dir = kinematics_dir(root);
    let tr_dir = transcriptions_dir(root);
    let trials = txt_stems(&kin_dir)?;
    if trials.is_empty() {
        return Err(Error::Data(format!("no kinematics files in {}", kin_dir.display())));
    }

    let mut raw = Vec::with_capacity(trials.len());
    let mut feature_names: Option<Vec<String>> = None;
    let mut vocabulary = BTreeSet::new();
    for trial in &trials {
        let kin_path = kin_dir.join(format!("{trial}.txt"));
        let tr_path = tr_dir.join(format!("{trial}.txt"));
        if !tr_path.is_file() {
            return Err(Error::Data(format!("missing transcription {} for trial {trial}", tr_path.display())));
        }
        let full = parse_kinematics(&kin_path)?;
        let columns = cfg.columns.resolve(full.cols());
        if let Some(&(c, _)) = columns.iter().find(|(c, _)| *c >= full.cols()) {
            return Err(Error::Data(format!(
                "{}: column {c} requested but rows have {} columns",
                kin_path.display(),
                full.cols()
            )));
        }
        let names: Vec<String> = columns.iter().map(|(_, n)| n.clone()).collect();
        match &feature_names {
            None => feature_names = Some(names),
            Some(prev) if *prev != names => {
                return Err(Error::Data(format!(
                    "{}: {} columns selected, earlier trials had {}",
                    kin_path.display(),
                    names.len(),
                    prev.len()
                )))
            }
            Some(_) => {}
        }
        let mut data = Vec::with_capacity(full.rows() * columns.len());
        for row in full.iter_rows() {
            data.extend(columns.iter().map(|&(c, _)| row[c]));
        }
        let inputs = Matrix::new(full.rows(), columns.len(), data)?;
        let spans = parse_transcription(&tr_path, full.rows())?;
        vocabulary.extend(spans.iter().map(|s| s.label.clone()));
        raw.push((trial.clone(), user_of_trial(trial)?, inputs, spans));
    }

    let class_names: Vec<String> = vocabulary.into_iter().collect();
    let index: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut sequences = Vec::with_capacity(raw.len());
    for (trial, user, inputs, spans) in &raw {
        let t = inputs.rows();
        let mut labels = vec![0; t];
        let mut mask = vec![false; t];
        for span in spans {
            let k = index[span.label.as_str()];
            for f in span.start..span.end {
                labels[f] = k;
                mask[f] = true;
            }
        }
        let seq = Sequence::new(trial.clone(), user.clone(), inputs.clone(), labels, mask)?;
        sequences.push(decimate_sequence(&seq, cfg.decimation));
    }

    let mut labeled_users: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &sequences {
        *labeled_users.entry(&s.user_id).or_default() += s.labeled_frames();
    }
    if let Some((user, _)) = labeled_users.iter().find(|(_, &n)| n == 0) {
        return Err(Error::Data(format!("user {user} has no labeled frames in any trial")));
    }

    let ds = Dataset {
        sequences,
        class_names,
        feature_names: feature_names.unwrap_or_default(),
        normalization: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `dataset` in the on-disk layout read by [`load_jigsaws`] with
/// [`ColumnSelection::All`] and decimation 1. Labeled runs become
/// transcription spans; unlabeled frames are left out of every span.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let kin_dir = root.join("kinematics").join("AllGestures");
    let tr_dir = transcriptions_dir(root);
    for dir in [&kin_dir, &tr_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for s in &dataset.sequences {
        let mut kin = String::new();
        for row in s.inputs.iter_rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            kin.push_str(&line.join(" "));
            kin.push('\n');
        }
        let path = kin_dir.join(format!("{}.txt", s.trial_id));
        fs::write(&path, kin).map_err(|e| Error::io(&path, e))?;

        let mut tr = String::new();
        for seg in s.segments().0 {
            tr.push_str(&format!("{} {} {}\n", seg.start + 1, seg.end, dataset.class_names[seg.label]));
        }
        let path = tr_dir.join(format!("{}.txt", s.trial_id));
        fs::write(&path, tr).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Standard deviation of the additive input noise in the long-range task.
pub const LONGRANGE_NOISE: f64 = 0.1;

fn trial_name(kind: &str, user: &str, index: usize) -> String {
    format!("{kind}_{user}{index:03}")
}

/// Spreadsheet-style user names: A … Z, AA, AB, …
pub fn user_name(mut i: usize) -> String {
    let mut s = Vec::new();
    loop {
        s.push(b'A' + (i % 26) as u8);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    s.reverse();
    String::from_utf8(s).expect("ASCII letters")
}

/// Delay-line task: inputs are ±1 plus Gaussian noise and the label at
/// frame `t ≥ lag` is the sign of the clean input at `t − lag`. Earlier
/// frames are unlabeled.
pub fn synth_longrange(rng: &mut Rng, n_sequences: usize, length: usize, lag: usize) -> Result<Dataset> {
    if lag >= length {
        return Err(Error::contract(format!("lag {lag} must be smaller than the length {length}")));
    }
    let mut sequences = Vec::with_capacity(n_sequences);
    for i in 0..n_sequences {
        let bits: Vec<usize> = (0..length).map(|_| usize::from(rng.bernoulli(0.5))).collect();
        let inputs: Vec<f64> = bits
            .iter()
            .map(|&b| if b == 1 { 1.0 } else { -1.0 } + LONGRANGE_NOISE * rng.normal())
            .collect();
        let labels: Vec<usize> = (0..length).map(|t| if t >= lag { bits[t - lag] } else { 0 }).collect();
        let mask: Vec<bool> = (0..length).map(|t| t >= lag).collect();
        sequences.push(Sequence::new(
            trial_name("Longrange", "A", i + 1),
            "A".into(),
            Matrix::new(length, 1, inputs)?,
            labels,
            mask,
        )?);
    }
    Ok(Dataset {
        sequences,
        class_names: vec!["neg".into(), "pos".into()],
        feature_names: vec!["x".into()],
        normalization: None,
    })
}

/// Knobs of the regime-switching generator beyond the required arguments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimesParams {
    pub mean_segment: f64,
    pub noise: f64,
    /// Scale of the per-user perturbation `A_u = I + distortion · G`.
    pub distortion: f64,
    /// Scale of the per-user input offset.
    pub offset: f64,
    /// AR(1) coefficient of the smooth latent signals.
    pub smoothness: f64,
}

impl Default for RegimesParams {
    fn default() -> Self {
        RegimesParams {
            mean_segment: 20.0,
            noise: 0.3,
            distortion: 0.05,
            offset: 0.1,
            smoothness: 0.95,
        }
    }
}

pub const REGIMES_INPUTS: usize = 6;
/// Latent is `(1, a_t, b_t)` with two smooth AR(1) signals.
const REGIMES_LATENT: usize = 3;

pub fn synth_regimes(rng: &mut Rng, n_sequences: usize, n_users: usize, length: usize, n_classes: usize) -> Result<Dataset> {
    synth_regimes_with(rng, n_sequences, n_users, length, n_classes, &RegimesParams::default())
}

/// Piecewise-constant regimes: each frame after the first switches to a
/// different, uniformly chosen class with probability `1 / mean_segment`.
/// Class `k` emits `W_k z_t + noise` from the shared latent `z_t`, and user
/// `u` sees `A_u x + c_u`. Sequence `i` belongs to user `i mod n_users`;
/// the result is ordered by trial name, as [`load_jigsaws`] orders it.
pub fn synth_regimes_with(
    rng: &mut Rng,
    n_sequences: usize,
    n_users: usize,
    length: usize,
    n_classes: usize,
    params: &RegimesParams,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::contract("synth_regimes needs at least 2 classes"));
    }
    if n_users == 0 || length == 0 {
        return Err(Error::contract("synth_regimes needs at least one user and one frame"));
    }
    if params.mean_segment < 1.0 {
        return Err(Error::contract("mean segment length must be at least 1"));
    }
    let d = REGIMES_INPUTS;
    let emissions: Vec<Matrix> = (0..n_classes)
        .map(|_| {
            let data = (0..d * REGIMES_LATENT).map(|_| rng.normal()).collect();
            Matrix::new(d, REGIMES_LATENT, data).expect("sized")
        })
        .collect();
    let users: Vec<(Matrix, Vec<f64>)> = (0..n_users)
        .map(|_| {
            let mut a = Matrix::identity(d);
            for v in a.as_mut_slice() {
                *v += params.distortion * rng.normal();
            }
            let c = (0..d).map(|_| params.offset * rng.normal()).collect();
            (a, c)
        })
        .collect();

    let switch_p = 1.0 / params.mean_segment;
    let rho = params.smoothness;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut per_user = vec![0usize; n_users];
    let mut sequences = Vec::with_capacity(n_sequences);
    for i in 0..n_sequences {
        let u = i % n_users;
        per_user[u] += 1;
        let (a_u, c_u) = &users[u];
        let mut labels = Vec::with_capacity(length);
        let mut regime = rng.below(n_classes);
        let mut latent = [1.0, rng.normal(), rng.normal()];
        let mut data = Vec::with_capacity(length * d);
        for t in 0..length {
            if t > 0 {
                if rng.bernoulli(switch_p) {
                    regime = (regime + 1 + rng.below(n_classes - 1)) % n_classes;
                }
                latent[1] = rho * latent[1] + innovation * rng.normal();
                latent[2] = rho * latent[2] + innovation * rng.normal();
            }
            labels.push(regime);
            let mut x = vec![0.0; d];
            emissions[regime].matvec_acc(&latent, &mut x);
            for v in &mut x {
                *v += params.noise * rng.normal();
            }
            let mut y = c_u.clone();
            a_u.matvec_acc(&x, &mut y);
            data.extend(y);
        }
        let name = user_name(u);
        sequences.push(Sequence::new(
            trial_name("Regimes", &name, per_user[u]),
            name,
            Matrix::new(length, d, data)?,
            labels,
            vec![true; length],
        )?);
    }
    sequences.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
    Ok(Dataset {
        sequences,
        class_names: (0..n_classes).map(|k| format!("R{k}")).collect(),
        feature_names: (0..d).map(|j| format!("x{j}")).collect(),
        normalization: None,
    })
}

/// Generation parameters of a synthetic dataset; serialized as its manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SynthSpec {
    Longrange {
        seed: u64,
        sequences: usize,
        length: usize,
        lag: usize,
    },
    Regimes {
        seed: u64,
        sequences: usize,
        users: usize,
        length: usize,
        classes: usize,
        #[serde(default)]
        params: RegimesParams,
    },
}

impl SynthSpec {
    pub fn generate(&self) -> Result<Dataset> {
        match self {
            SynthSpec::Longrange {
                seed,
                sequences,
                length,
                lag,
            } => synth_longrange(&mut Rng::seed(*seed), *sequences, *length, *lag),
            SynthSpec::Regimes {
                seed,
                sequences,
                users,
                length,
                classes,
                params,
            } => synth_regimes_with(&mut Rng::seed(*seed), *sequences, *users, *length, *classes, params),
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Generates the dataset, writes it under `root` and records `spec` in
/// the manifest.
pub fn write_synthetic(spec: &SynthSpec, root: &Path) -> Result<Dataset> {
    let ds = spec.generate()?;
    write_dataset(&ds, root)?;
    let json = serde_json::to_string_pretty(spec).map_err(|e| Error::Data(e.to_string()))?;
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(ds)
}

/// The manifest under `root`, if any.
pub fn read_manifest(root: &Path) -> Result<Option<SynthSpec>> {
    let path = root.join(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numeric::Rng;

    fn write(path: &Path, text: &str) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, text).unwrap();
    }

    fn toy_corpus(root: &Path, trials: &[(&str, usize, &str)]) {
        for (name, frames, transcription) in trials {
            let rows: String = (0..*frames).map(|t| format!("{t} {} {}\n", 2 * t, t % 3)).collect();
            write(&root.join("kinematics/AllGestures").join(format!("{name}.txt")), &rows);
            write(&root.join("transcriptions").join(format!("{name}.txt")), transcription);
        }
    }

    fn load_all(root: &Path, decimation: usize) -> Result<Dataset> {
        load_jigsaws(
            root,
            &LoadConfig {
                columns: ColumnSelection::All,
                decimation,
            },
        )
    }

    #[test]
    fn loader_masks_frames_outside_spans() {
        let dir = tempfile::tempdir().unwrap();
        toy_corpus(dir.path(), &[("Task_B001", 1000, "51 950 G1\n")]);
        let ds = load_all(dir.path(), 1).unwrap();
        assert_eq!(ds.sequences[0].labeled_frames(), 900);
        assert_eq!(ds.sequences[0].user_id, "B");
        assert_eq!(ds.n_inputs(), 3);
    }

    #[test]
    fn decimation_keeps_every_kth_frame() {
        let dir = tempfile::tempdir().unwrap();
        // 0-based span 2..=7; kept frames 0,3,6,9 → labels on kept 1 and 2
        toy_corpus(dir.path(), &[("Task_B001", 10, "3 8 G2\n")]);
        let ds = load_all(dir.path(), 3).unwrap();
        let s = &ds.sequences[0];
        assert_eq!(s.len(), 4);
        assert_eq!(s.mask, vec![false, true, true, false]);
        assert_eq!(s.inputs.row(1), &[3.0, 6.0, 0.0]);
        let ds6 = load_all(dir.path(), 6).unwrap();
        assert_eq!(ds6.sequences[0].len(), 2);
        assert_eq!(ds6.sequences[0].mask, vec![false, true]);
    }

    #[test]
    fn decimation_one_is_identity() {
        let ds = synth_regimes(&mut Rng::seed(3), 4, 2, 37, 3).unwrap();
        assert_eq!(ds.decimate(1).unwrap(), ds);
    }

    #[test]
    fn vocabulary_is_lexicographic() {
        let dir = tempfile::tempdir().unwrap();
        toy_corpus(
            dir.path(),
            &[("Task_B001", 30, "1 10 G2\n11 20 G10\n21 30 G1\n"), ("Task_C001", 5, "1 5 G3\n")],
        );
        let ds = load_all(dir.path(), 1).unwrap();
        assert_eq!(ds.class_names, vec!["G1", "G10", "G2", "G3"]);
        assert_eq!(ds.sequences[0].labels[0], 2);
        assert_eq!(ds.sequences[0].labels[15], 1);
        assert_eq!(ds.users(), vec!["B", "C"]);
    }

    #[test]
    fn loader_errors_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        toy_corpus(dir.path(), &[("Task_B001", 10, "1 5 G1\n6 11 G2\n")]);
        let msg = load_all(dir.path(), 1).unwrap_err().to_string();
        assert!(msg.contains("Task_B001.txt:2"), "{msg}");

        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("kinematics/AllGestures/Task_B001.txt"), "1 2 3\n4 5\n");
        write(&dir.path().join("transcriptions/Task_B001.txt"), "1 2 G1\n");
        let msg = load_all(dir.path(), 1).unwrap_err().to_string();
        assert!(msg.contains("Task_B001.txt:2") && msg.contains("ragged"), "{msg}");

        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("kinematics/AllGestures/Task_B001.txt"), "1 2 3\n");
        let msg = load_all(dir.path(), 1).unwrap_err().to_string();
        assert!(msg.contains("missing transcription"), "{msg}");
    }

    #[test]
    fn unlabeled_user_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        toy_corpus(dir.path(), &[("Task_B001", 5, "1 5 G1\n"), ("Task_C001", 5, "")]);
        assert!(load_all(dir.path(), 1).unwrap_err().to_string().contains("user C"));
    }

    #[test]
    fn jigsaws_map_selects_fourteen_columns() {
        let map = jigsaws_column_map();
        let cols: Vec<usize> = map.iter().map(|m| m.0).collect();
        assert_eq!(cols, vec![38, 39, 40, 50, 51, 52, 56, 57, 58, 59, 69, 70, 71, 75]);
        let dir = tempfile::tempdir().unwrap();
        let row: Vec<String> = (0..76).map(|c| c.to_string()).collect();
        write(
            &dir.path().join("kinematics/AllGestures/Suturing_D002.txt"),
            &format!("{}\n", row.join(" ")).repeat(4),
        );
        write(&dir.path().join("transcriptions/Suturing_D002.txt"), "1 4 G1\n");
        let ds = load_jigsaws(dir.path(), &LoadConfig { columns: ColumnSelection::Auto, decimation: 1 }).unwrap();
        assert_eq!(ds.n_inputs(), 14);
        assert_eq!(ds.sequences[0].inputs.row(0)[6], 56.0);
        assert_eq!(ds.feature_names[13], "slave_right.gripper");
    }

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::Regimes {
            seed: 7,
            sequences: 6,
            users: 3,
            length: 40,
            classes: 3,
            params: RegimesParams::default(),
        };
        let ds = write_synthetic(&spec, dir.path()).unwrap();
        let back = load_all(dir.path(), 1).unwrap();
        assert_eq!(back.sequences.len(), ds.sequences.len());
        for (a, b) in ds.sequences.iter().zip(&back.sequences) {
            assert_eq!(a.inputs, b.inputs);
            assert_eq!(a.mask, b.mask);
            let names = |d: &Dataset, s: &Sequence| -> Vec<String> {
                s.labels.iter().map(|&l| d.class_names[l].clone()).collect()
            };
            assert_eq!(names(&ds, a), names(&back, b));
        }
        assert_eq!(read_manifest(dir.path()).unwrap(), Some(spec.clone()));
        assert_eq!(spec.generate().unwrap(), ds);
    }

    #[test]
    fn standardize_examples() {
        let seq = |user: &str, rows: &[[f64; 2]]| {
            Sequence::new(
                format!("T_{user}001"),
                user.into(),
                Matrix::from_rows(rows).unwrap(),
                vec![0; rows.len()],
                vec![true; rows.len()],
            )
            .unwrap()
        };
        let ds = Dataset {
            sequences: vec![seq("A", &[[1.0, 5.0], [3.0, 5.0]]), seq("B", &[[10.0, 5.0], [12.0, 5.0]])],
            class_names: vec!["c".into()],
            feature_names: vec!["a".into(), "b".into()],
            normalization: None,
        };
        let z = standardize(&ds, &[0]).unwrap();
        assert_eq!(z.sequences[0].inputs.row(0), &[-1.0, 0.0]);
        assert_eq!(z.sequences[0].inputs.row(1), &[1.0, 0.0]);
        // test user keeps the training statistics
        assert_eq!(z.sequences[1].inputs.row(0), &[8.0, 0.0]);
        let again = standardize(&z, &[0]).unwrap();
        for (a, b) in again.sequences[0].inputs.as_slice().iter().zip(z.sequences[0].inputs.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(standardize(&ds, &[]).is_err());

        let mut perturbed = ds.clone();
        perturbed.sequences[1].inputs.set(0, 0, -400.0);
        assert_eq!(
            standardize(&perturbed, &[0]).unwrap().normalization,
            z.normalization,
        );
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(1, 3).unwrap().into_vec(), vec![0.0, 1.0, 0.0]);
        assert_eq!(one_hot(0, 2).unwrap().into_vec(), vec![1.0, 0.0]);
        assert_eq!(one_hot(0, 1).unwrap().into_vec(), vec![1.0]);
        assert!(one_hot(3, 3).is_err());
    }

    #[test]
    fn louo_partitions_users() {
        let ds = synth_regimes(&mut Rng::seed(1), 16, 8, 30, 3).unwrap();
        let plan = louo_splits(&ds).unwrap();
        assert_eq!(plan.runs.len(), 8);
        let mut seen: Vec<usize> = plan.runs.iter().flat_map(|r| r.test.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
        for run in &plan.runs {
            assert!(run.train.iter().all(|&i| ds.sequences[i].user_id != run.held_out_user));
            assert_eq!(run.train.len() + run.test.len(), 16);
            assert!(!run.train_users.contains(&run.held_out_user));
        }
        let two = synth_regimes(&mut Rng::seed(1), 4, 2, 30, 3).unwrap();
        let plan = louo_splits(&two).unwrap();
        assert_eq!(plan.runs[0].test, plan.runs[1].train);
        let one = synth_regimes(&mut Rng::seed(1), 4, 1, 30, 3).unwrap();
        assert!(louo_splits(&one).is_err());
    }

    #[test]
    fn longrange_construction() {
        let ds = synth_longrange(&mut Rng::seed(5), 3, 50, 20).unwrap();
        for s in &ds.sequences {
            assert!(s.mask[..20].iter().all(|m| !m));
            assert!(s.mask[20..].iter().all(|&m| m));
            for t in 20..50 {
                assert_eq!(s.labels[t], usize::from(s.inputs.get(t - 20, 0) > 0.0));
            }
        }
        let lag0 = synth_longrange(&mut Rng::seed(5), 2, 10, 0).unwrap();
        assert!(lag0.sequences.iter().all(|s| s.mask.iter().all(|&m| m)));
        assert!(synth_longrange(&mut Rng::seed(5), 2, 10, 10).is_err());
    }

    #[test]
    fn regimes_segment_count_matches_geometric_mean() {
        let (t, n) = (300, 1000);
        let ds = synth_regimes(&mut Rng::seed(11), n, 5, t, 4).unwrap();
        let mean = ds.sequences.iter().map(|s| s.segments().len()).sum::<usize>() as f64 / n as f64;
        // each of the t − 1 transitions switches with probability 1/20
        let expected = 1.0 + (t - 1) as f64 / 20.0;
        assert!((mean - expected).abs() < 0.03 * expected, "{mean} vs {expected}");
        assert!((mean - t as f64 / 20.0).abs() < 0.1 * t as f64 / 20.0);
    }

    #[test]
    fn regimes_are_seed_deterministic() {
        let ds = synth_regimes(&mut Rng::seed(2), 4, 2, 100, 3).unwrap();
        assert_eq!(synth_regimes(&mut Rng::seed(2), 4, 2, 100, 3).unwrap(), ds);
        assert_ne!(synth_regimes(&mut Rng::seed(3), 4, 2, 100, 3).unwrap(), ds);
        assert_eq!(ds.users(), vec!["A", "B"]);
        assert_eq!(ds.sequences[3].trial_id, "Regimes_B002");
        assert!(synth_regimes(&mut Rng::seed(2), 4, 1, 100, 1).is_err());
    }

    #[test]
    fn user_names_are_spreadsheet_style() {
        assert_eq!(user_name(0), "A");
        assert_eq!(user_name(25), "Z");
        assert_eq!(user_name(26), "AA");
        assert_eq!(user_of_trial("Suturing_AB012").unwrap(), "AB");
        assert!(user_of_trial("Suturing_012").is_err());
    }

    proptest! {
        #[test]
        fn one_hot_argmax_round_trip(n in 1usize..12, seed in any::<u64>()) {
            let label = Rng::seed(seed).below(n);
            prop_assert_eq!(one_hot(label, n).unwrap().argmax(), Some(label));
        }

        #[test]
        fn decimated_length_is_ceiling(len in 1usize..60, k in 1usize..9) {
            let ds = synth_regimes(&mut Rng::seed(len as u64), 1, 1, len, 2).unwrap();
            prop_assert_eq!(ds.decimate(k).unwrap().sequences[0].len(), len.div_ceil(k));
        }
    }
}
