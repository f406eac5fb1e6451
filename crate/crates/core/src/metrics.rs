//! Frame accuracy, segment-level edit distance and the paired permutation
//! test, plus the per-run report they feed.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Rng;

/// Percentage of unmasked frames whose predicted label matches.
pub fn frame_accuracy(pred: &[usize], truth: &[usize], mask: &[bool]) -> Result<f64> {
    let (hits, total) = frame_hits(pred, truth, mask)?;
    if total == 0 {
        return Err(Error::contract("frame_accuracy needs at least one labeled frame"));
    }
    Ok(100.0 * hits as f64 / total as f64)
}

/// `(matching frames, labeled frames)` over unmasked frames.
pub fn frame_hits(pred: &[usize], truth: &[usize], mask: &[bool]) -> Result<(usize, usize)> {
    if pred.len() != truth.len() || truth.len() != mask.len() {
        return Err(Error::shape(
            "frame_accuracy",
            format!("{} predictions", pred.len()),
            format!("{} labels, {} mask flags", truth.len(), mask.len()),
        ));
    }
    let mut hits = 0;
    let mut total = 0;
    for ((p, t), &m) in pred.iter().zip(truth).zip(mask) {
        if m {
            total += 1;
            hits += usize::from(p == t);
        }
    }
    Ok((hits, total))
}

/// A maximal run of one label, frames `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSeq(pub Vec<Segment>);

impl SegmentSeq {
    pub fn labels(&self) -> Vec<usize> {
        self.0.iter().map(|s| s.label).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Frame-level labels over `len` frames; frames outside every segment are `None`.
    pub fn expand(&self, len: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; len];
        for s in &self.0 {
            for slot in &mut out[s.start..s.end.min(len)] {
                *slot = Some(s.label);
            }
        }
        out
    }
}

/// Run-length encodes the unmasked frames. A masked frame closes the current
/// segment, so equal labels on both sides of a gap form two segments.
pub fn to_segments(labels: &[usize], mask: &[bool]) -> Result<SegmentSeq> {
    if labels.len() != mask.len() {
        return Err(Error::shape("to_segments", labels.len(), mask.len()));
    }
    let mut segments: Vec<Segment> = Vec::new();
    let mut open = false;
    for (t, (&label, &keep)) in labels.iter().zip(mask).enumerate() {
        if !keep {
            open = false;
            continue;
        }
        match segments.last_mut() {
            Some(seg) if open && seg.label == label => seg.end = t + 1,
            _ => {
                segments.push(Segment {
                    label,
                    start: t,
                    end: t + 1,
                });
                open = true;
            }
        }
    }
    Ok(SegmentSeq(segments))
}

/// Levenshtein distance with unit insertion, deletion and substitution costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 · edit_distance(pred, truth) / normalizer`.
pub fn normalized_edit_distance(pred: &SegmentSeq, truth: &SegmentSeq, normalizer: usize) -> Result<f64> {
    if normalizer == 0 {
        return Err(Error::contract("edit-distance normalizer must be at least 1"));
    }
    Ok(100.0 * edit_distance(&pred.labels(), &truth.labels()) as f64 / normalizer as f64)
}

/// Largest ground-truth segment count over a dataset.
pub fn dataset_normalizer(truth: &[SegmentSeq]) -> Result<usize> {
    truth
        .iter()
        .map(SegmentSeq::len)
        .max()
        .ok_or_else(|| Error::contract("dataset_normalizer needs at least one sequence"))
}

/// Largest `n` for which every sign assignment is enumerated.
pub const EXACT_PERMUTATION_MAX_N: usize = 20;
pub const MONTE_CARLO_RESAMPLES: usize = 100_000;
const MONTE_CARLO_SEED: u64 = 0x005E_ED0F_7E57;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PermutationMode {
    Exact,
    MonteCarlo { resamples: usize },
}

impl fmt::Display for PermutationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PermutationMode::Exact => f.write_str("exact"),
            PermutationMode::MonteCarlo { resamples } => write!(f, "monte-carlo ({resamples} resamples)"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PermutationResult {
    pub p_value: f64,
    pub mode: PermutationMode,
}

fn paired_differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape("permutation_test", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::contract("permutation_test needs at least one pair"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

struct SignFlipStat {
    observed: f64,
    tol: f64,
    two_sided: bool,
}

impl SignFlipStat {
    fn new(diffs: &[f64], two_sided: bool) -> Self {
        let observed: f64 = diffs.iter().sum();
        let scale: f64 = diffs.iter().map(|d| d.abs()).sum();
        SignFlipStat {
            observed,
            tol: 1e-9 * scale.max(f64::MIN_POSITIVE),
            two_sided,
        }
    }

    /// Whether a resampled sum is at least as extreme as the observed one.
    fn extreme(&self, sum: f64) -> bool {
        if self.two_sided {
            sum.abs() >= self.observed.abs() - self.tol
        } else {
            sum >= self.observed - self.tol
        }
    }
}

/// Paired-sample permutation test on the mean difference `a − b`. Exact
/// enumeration of all `2ⁿ` sign flips up to [`EXACT_PERMUTATION_MAX_N`]
/// pairs, seeded Monte Carlo beyond.
pub fn permutation_test(a: &[f64], b: &[f64], two_sided: bool) -> Result<PermutationResult> {
    let diffs = paired_differences(a, b)?;
    if diffs.len() <= EXACT_PERMUTATION_MAX_N {
        Ok(PermutationResult {
            p_value: exact_sign_flip(&diffs, two_sided),
            mode: PermutationMode::Exact,
        })
    } else {
        permutation_test_monte_carlo(a, b, two_sided, MONTE_CARLO_RESAMPLES, MONTE_CARLO_SEED)
    }
}

/// Monte-Carlo variant with an explicit budget and seed.
pub fn permutation_test_monte_carlo(
    a: &[f64],
    b: &[f64],
    two_sided: bool,
    resamples: usize,
    seed: u64,
) -> Result<PermutationResult> {
    let diffs = paired_differences(a, b)?;
    if resamples == 0 {
        return Err(Error::contract("Monte-Carlo permutation test needs at least one resample"));
    }
    let stat = SignFlipStat::new(&diffs, two_sided);
    let mut rng = Rng::seed(seed);
    let mut hits = 0usize;
    for _ in 0..resamples {
        let mut sum = 0.0;
        let mut bits = 0u64;
        for (i, d) in diffs.iter().enumerate() {
            if i % 64 == 0 {
                bits = rng.next_u64();
            }
            sum += if bits & 1 == 1 { -d } else { *d };
            bits >>= 1;
        }
        hits += usize::from(stat.extreme(sum));
    }
    Ok(PermutationResult {
        p_value: hits as f64 / resamples as f64,
        mode: PermutationMode::MonteCarlo { resamples },
    })
}

fn exact_sign_flip(diffs: &[f64], two_sided: bool) -> f64 {
    let stat = SignFlipStat::new(diffs, two_sided);
    let n = diffs.len();
    let total = 1u64 << n;
    let mut hits = 0u64;
    for signs in 0..total {
        let sum: f64 = diffs
            .iter()
            .enumerate()
            .map(|(i, d)| if signs >> i & 1 == 1 { -d } else { *d })
            .sum();
        hits += u64::from(stat.extreme(sum));
    }
    hits as f64 / total as f64
}

/// Scores of one held-out user; `None` marks a failed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub run: usize,
    pub held_out_user: String,
    pub scores: Option<(f64, f64)>,
}

impl RunScore {
    pub fn accuracy(&self) -> Option<f64> {
        self.scores.map(|s| s.0)
    }

    pub fn edit(&self) -> Option<f64> {
        self.scores.map(|s| s.1)
    }
}

/// Pools frames of one run's test sequences for accuracy and averages the
/// per-sequence normalized edit distance. Each item is
/// `(predicted labels, true labels, mask)`.
pub fn score_run<'a, I>(sequences: I, normalizer: usize) -> Result<(f64, f64)>
where
    I: IntoIterator<Item = (&'a [usize], &'a [usize], &'a [bool])>,
{
    let mut hits = 0;
    let mut total = 0;
    let mut edits = Vec::new();
    for (pred, truth, mask) in sequences {
        let (h, n) = frame_hits(pred, truth, mask)?;
        hits += h;
        total += n;
        let p = to_segments(pred, mask)?;
        let t = to_segments(truth, mask)?;
        edits.push(normalized_edit_distance(&p, &t, normalizer)?);
    }
    if total == 0 {
        return Err(Error::contract("run has no labeled test frames"));
    }
    let edit = edits.iter().sum::<f64>() / edits.len() as f64;
    Ok((100.0 * hits as f64 / total as f64, edit))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Cross-validation results for one model configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub normalizer: usize,
    pub runs: Vec<RunScore>,
}

pub const CSV_HEADER: &str = "run,held_out_user,accuracy_pct,edit_pct";

impl EvalReport {
    fn successful(&self, pick: impl Fn(&RunScore) -> Option<f64>) -> Vec<f64> {
        self.runs.iter().filter_map(pick).collect()
    }

    pub fn accuracy(&self) -> Option<(f64, f64)> {
        mean_std(&self.successful(RunScore::accuracy))
    }

    pub fn edit(&self) -> Option<(f64, f64)> {
        mean_std(&self.successful(RunScore::edit))
    }

    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.scores.is_none()).count()
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "label={}", self.label);
        let _ = writeln!(s, "runs={}", self.runs.len());
        let _ = writeln!(s, "failed_runs={}", self.failed_runs());
        let _ = writeln!(s, "normalizer={}", self.normalizer);
        for r in &self.runs {
            let _ = writeln!(s, "run.{}.held_out_user={}", r.run, r.held_out_user);
            match r.scores {
                Some((acc, edit)) => {
                    let _ = writeln!(s, "run.{}.accuracy_pct={acc}", r.run);
                    let _ = writeln!(s, "run.{}.edit_pct={edit}", r.run);
                }
                None => {
                    let _ = writeln!(s, "run.{}.status=failed", r.run);
                }
            }
        }
        if let Some((m, sd)) = self.accuracy() {
            let _ = writeln!(s, "accuracy_mean={m}\naccuracy_std={sd}");
        }
        if let Some((m, sd)) = self.edit() {
            let _ = writeln!(s, "edit_mean={m}\nedit_std={sd}");
        }
        s
    }

    /// Comma-separated rows under [`CSV_HEADER`]; failed runs leave the
    /// score fields empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.runs {
            match r.scores {
                Some((a, e)) => {
                    let _ = writeln!(s, "{},{},{a},{e}", r.run, r.held_out_user);
                }
                None => {
                    let _ = writeln!(s, "{},{},,", r.run, r.held_out_user);
                }
            }
        }
        s
    }

    pub fn from_csv(label: &str, text: &str) -> Result<Self> {
        let path = std::path::PathBuf::from(label);
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.clone(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => return Err(parse_err(1, format!("expected header `{CSV_HEADER}`"))),
        }
        let mut runs = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(parse_err(i + 1, format!("expected 4 fields, found {}", fields.len())));
            }
            let run = fields[0]
                .parse()
                .map_err(|e| parse_err(i + 1, format!("bad run index: {e}")))?;
            let scores = if fields[2].is_empty() && fields[3].is_empty() {
                None
            } else {
                let num = |f: &str| f.parse::<f64>().map_err(|e| parse_err(i + 1, format!("bad score `{f}`: {e}")));
                Some((num(fields[2])?, num(fields[3])?))
            };
            runs.push(RunScore {
                run,
                held_out_user: fields[1].to_string(),
                scores,
            });
        }
        Ok(EvalReport {
            label: label.to_string(),
            normalizer: 0,
            runs,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>14} {:>16}", self.label, "Accuracy (%)", "Edit Dist. (%)")?;
        for r in &self.runs {
            match r.scores {
                Some((a, e)) => writeln!(f, "  run {:<3} {:<6} {a:>14.1} {e:>16.1}", r.run, r.held_out_user)?,
                None => writeln!(f, "  run {:<3} {:<6} {:>14} {:>16}", r.run, r.held_out_user, "failed", "failed")?,
            }
        }
        let fmt_ms = |v: Option<(f64, f64)>| v.map_or("-".to_string(), |(m, s)| format!("{m:.1} ± {s:.1}"));
        write!(f, "  {:<10} {:>14} {:>16}", "mean", fmt_ms(self.accuracy()), fmt_ms(self.edit()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frame_accuracy_examples() {
        assert_eq!(frame_accuracy(&[1, 2, 3], &[1, 2, 3], &[true; 3]).unwrap(), 100.0);
        let acc = frame_accuracy(&[1, 1, 2], &[1, 2, 2], &[true; 3]).unwrap();
        assert!((acc - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(frame_accuracy(&[1, 1, 2], &[1, 2, 2], &[true, false, true]).unwrap(), 100.0);
        assert!(frame_accuracy(&[1], &[1], &[false]).is_err());
        assert!(frame_accuracy(&[1], &[1, 2], &[true]).is_err());
    }

    #[test]
    fn to_segments_examples() {
        let (a, b) = (0, 1);
        let s = to_segments(&[a, a, b, b, b, a], &[true; 6]).unwrap();
        assert_eq!(s.labels(), vec![a, b, a]);
        assert_eq!(s.0[1], Segment { label: b, start: 2, end: 5 });
        assert_eq!(to_segments(&[2; 7], &[true; 7]).unwrap().len(), 1);
        let s = to_segments(&[a, a, a, a, a], &[true, true, false, true, true]).unwrap();
        assert_eq!(s.labels(), vec![a, a]);
        assert!(to_segments(&[], &[]).unwrap().is_empty());
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&["A", "B", "C"], &["A", "B", "C"]), 0);
        assert_eq!(edit_distance(&["A", "B"], &["B", "A"]), 2);
        assert_eq!(edit_distance(&[1, 2, 3, 4], &[]), 4);
        assert_eq!(edit_distance::<u8>(&[], &[]), 0);
        assert_eq!(edit_distance("kitten".as_bytes(), "sitting".as_bytes()), 3);
    }

    #[test]
    fn normalized_edit_distance_examples() {
        let truth = SegmentSeq(
            [0usize, 1]
                .iter()
                .enumerate()
                .map(|(i, &l)| Segment { label: l, start: i, end: i + 1 })
                .collect(),
        );
        let pred = SegmentSeq(vec![
            Segment { label: 1, start: 0, end: 1 },
            Segment { label: 0, start: 1, end: 2 },
        ]);
        assert_eq!(normalized_edit_distance(&pred, &truth, 10).unwrap(), 20.0);
        assert_eq!(normalized_edit_distance(&truth, &truth, 10).unwrap(), 0.0);
        assert!(normalized_edit_distance(&truth, &truth, 0).is_err());
    }

    fn segs(n: usize) -> SegmentSeq {
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        to_segments(&labels, &vec![true; n]).unwrap()
    }

    #[test]
    fn dataset_normalizer_examples() {
        assert_eq!(dataset_normalizer(&[segs(5)]).unwrap(), 5);
        assert_eq!(dataset_normalizer(&[segs(4), segs(7), segs(5)]).unwrap(), 7);
        assert_eq!(dataset_normalizer(&[segs(1), segs(1)]).unwrap(), 1);
        assert!(dataset_normalizer(&[]).is_err());
    }

    #[test]
    fn permutation_test_examples() {
        let a = [0.8, 0.7, 0.9];
        let r = permutation_test(&a, &a, true).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.mode, PermutationMode::Exact);

        let r = permutation_test(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0], true).unwrap();
        assert_eq!(r.p_value, 0.25);
        assert_eq!(permutation_test(&[1.0], &[0.0], true).unwrap().p_value, 1.0);
        // one-sided: only (+,+,+) reaches the observed sum
        assert_eq!(permutation_test(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0], false).unwrap().p_value, 0.125);
        assert!(permutation_test(&[], &[], true).is_err());
        assert!(permutation_test(&[1.0], &[1.0, 2.0], true).is_err());
    }

    #[test]
    fn permutation_mode_selection() {
        let a: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let b = vec![0.0; 11];
        assert_eq!(permutation_test(&a, &b, true).unwrap().mode, PermutationMode::Exact);
        let a: Vec<f64> = (0..21).map(|i| (i as f64).sin()).collect();
        let b = vec![0.1; 21];
        assert_eq!(
            permutation_test(&a, &b, true).unwrap().mode,
            PermutationMode::MonteCarlo { resamples: MONTE_CARLO_RESAMPLES }
        );
    }

    #[test]
    fn monte_carlo_converges_to_exact() {
        let (a, b) = ([2.0, 3.0, 4.0], [1.0, 2.0, 3.0]);
        let mc = permutation_test_monte_carlo(&a, &b, true, MONTE_CARLO_RESAMPLES, 99).unwrap();
        assert!((mc.p_value - 0.25).abs() < 0.01, "{}", mc.p_value);
        let a = [0.3, -0.1, 0.5, 0.2, 0.0, 0.4, 0.25];
        let b = [0.0; 7];
        let exact = permutation_test(&a, &b, true).unwrap().p_value;
        let mc = permutation_test_monte_carlo(&a, &b, true, MONTE_CARLO_RESAMPLES, 7).unwrap();
        assert!((mc.p_value - exact).abs() < 0.01);
    }

    #[test]
    fn score_run_pools_frames() {
        let p1 = [0, 0, 1, 1];
        let t1 = [0, 0, 1, 1];
        let m1 = [true; 4];
        let p2 = [1, 1];
        let t2 = [0, 0];
        let m2 = [true; 2];
        let (acc, edit) = score_run([(&p1[..], &t1[..], &m1[..]), (&p2[..], &t2[..], &m2[..])], 4).unwrap();
        assert!((acc - 400.0 / 6.0).abs() < 1e-12);
        assert_eq!(edit, (0.0 + 25.0) / 2.0);
    }

    #[test]
    fn report_round_trips_csv() {
        let report = EvalReport {
            label: "x".into(),
            normalizer: 3,
            runs: vec![
                RunScore { run: 0, held_out_user: "B".into(), scores: Some((81.25, 12.5)) },
                RunScore { run: 1, held_out_user: "C".into(), scores: None },
            ],
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("run,held_out_user,accuracy_pct,edit_pct\n"));
        let back = EvalReport::from_csv("x", &csv).unwrap();
        assert_eq!(back.runs, report.runs);
        assert_eq!(report.failed_runs(), 1);
        assert_eq!(report.accuracy(), Some((81.25, 0.0)));
        assert!(report.to_text().contains("run.1.status=failed"));
        assert!(EvalReport::from_csv("x", "bogus\n").is_err());
    }

    /// Textbook recursion over edit scripts, used only as an oracle.
    fn naive_levenshtein(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = naive_levenshtein(ra, rb) + usize::from(x != y);
                let del = naive_levenshtein(ra, b) + 1;
                let ins = naive_levenshtein(a, rb) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn edit_distance_matches_oracle_short_lists() {
        let lists: Vec<Vec<u8>> = (0..=4)
            .flat_map(|len| {
                (0..3usize.pow(len as u32)).map(move |mut code| {
                    (0..len)
                        .map(|_| {
                            let c = (code % 3) as u8;
                            code /= 3;
                            c
                        })
                        .collect()
                })
            })
            .collect();
        for a in &lists {
            for b in &lists {
                assert_eq!(edit_distance(a, b), naive_levenshtein(a, b), "{a:?} {b:?}");
            }
        }
    }

    fn label_list() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..3, 0..8)
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(a in label_list(), b in label_list(), c in label_list()) {
            let ab = edit_distance(&a, &b);
            prop_assert_eq!(ab, edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert!(ab >= a.len().abs_diff(b.len()));
            prop_assert!(ab <= a.len().max(b.len()));
            prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
        }

        #[test]
        fn segments_expand_to_unmasked_labels(
            frames in prop::collection::vec((0usize..3, prop::bool::weighted(0.8)), 0..40)
        ) {
            let labels: Vec<usize> = frames.iter().map(|f| f.0).collect();
            let mask: Vec<bool> = frames.iter().map(|f| f.1).collect();
            let segs = to_segments(&labels, &mask).unwrap();
            let expanded = segs.expand(labels.len());
            for t in 0..labels.len() {
                prop_assert_eq!(expanded[t], mask[t].then_some(labels[t]));
            }
            for w in segs.0.windows(2) {
                // adjacent segments differ unless a gap separates them
                prop_assert!(w[0].label != w[1].label || w[0].end < w[1].start);
            }
        }

        #[test]
        fn accuracy_ignores_relabeling(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..30),
            perm in Just([2usize, 0, 3, 1])
        ) {
            let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let mask = vec![true; pred.len()];
            let a = frame_accuracy(&pred, &truth, &mask).unwrap();
            let rp: Vec<usize> = pred.iter().map(|&l| perm[l]).collect();
            let rt: Vec<usize> = truth.iter().map(|&l| perm[l]).collect();
            prop_assert_eq!(a, frame_accuracy(&rp, &rt, &mask).unwrap());
        }
    }
}
