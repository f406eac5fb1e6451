//! Ribbon plots: ground truth above prediction, one color per class, with
//! unlabeled frames in neutral gray.

use std::fmt::Write as _;
use std::path::Path;

use seqlab::{Error, Result};

/// One entry per frame; `None` is an unlabeled frame.
pub type Track = Vec<Option<usize>>;

pub const UNLABELED: &str = "-";
pub const MASKED_COLOR: &str = "#c8c8c8";
const PALETTE: &[&str] = &[
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn class_color(k: usize) -> String {
    if k < PALETTE.len() {
        PALETTE[k].to_string()
    } else {
        // golden-angle hues beyond the fixed palette
        format!("hsl({:.0},65%,50%)", (k as f64 * 137.508) % 360.0)
    }
}

/// Reads a track file: one class name per line, `-` for unlabeled frames.
pub fn read_track(path: &Path) -> Result<Vec<Option<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|name| (name != UNLABELED).then(|| name.to_string()))
        .collect())
}

/// Indexes named tracks against their joint, sorted vocabulary.
pub fn index_tracks(tracks: &[Vec<Option<String>>]) -> (Vec<String>, Vec<Track>) {
    let vocab: Vec<String> = tracks
        .iter()
        .flatten()
        .flatten()
        .cloned()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let indexed = tracks
        .iter()
        .map(|t| {
            t.iter()
                .map(|l| l.as_ref().map(|name| vocab.binary_search(name).expect("name is in the vocabulary")))
                .collect()
        })
        .collect();
    (vocab, indexed)
}

pub fn format_track(track: &[Option<usize>], classes: &[String]) -> String {
    track
        .iter()
        .map(|l| match l {
            Some(k) => format!("{}\n", classes[*k]),
            None => format!("{UNLABELED}\n"),
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const WIDTH: f64 = 1000.0;
const MARGIN: f64 = 110.0;
const RIBBON: f64 = 36.0;
const GAP: f64 = 14.0;

fn ribbon(svg: &mut String, track: &[Option<usize>], y: f64, label: &str) {
    let n = track.len().max(1) as f64;
    let scale = (WIDTH - MARGIN - 10.0) / n;
    let _ = writeln!(
        svg,
        r#"  <text x="{:.1}" y="{:.1}" font-size="13" text-anchor="end">{}</text>"#,
        MARGIN - 8.0,
        y + RIBBON / 2.0 + 4.0,
        escape(label)
    );
    let mut start = 0;
    while start < track.len() {
        let value = track[start];
        let end = (start..track.len()).find(|&t| track[t] != value).unwrap_or(track.len());
        let fill = value.map_or_else(|| MASKED_COLOR.to_string(), class_color);
        let _ = writeln!(
            svg,
            r#"  <rect x="{:.3}" y="{y:.1}" width="{:.3}" height="{RIBBON:.1}" fill="{fill}"/>"#,
            MARGIN + start as f64 * scale,
            (end - start) as f64 * scale,
        );
        start = end;
    }
}

/// SVG document with the truth ribbon above the prediction ribbon and a
/// legend listing every class.
pub fn render_svg(truth: &[Option<usize>], pred: &[Option<usize>], classes: &[String], title: &str) -> Result<String> {
    if truth.len() != pred.len() {
        return Err(Error::Contract(format!(
            "track lengths differ: {} truth frames vs {} predicted",
            truth.len(),
            pred.len()
        )));
    }
    if let Some(k) = truth.iter().chain(pred).flatten().find(|&&k| k >= classes.len()) {
        return Err(Error::Contract(format!("class index {k} has no name")));
    }
    let legend_rows = classes.len().div_ceil(5).max(1);
    let legend_y = 40.0 + 2.0 * RIBBON + GAP + 24.0;
    let height = legend_y + 20.0 * legend_rows as f64 + 10.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}">"#
    );
    let _ = writeln!(svg, r#"  <rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"  <text x="{MARGIN:.1}" y="24" font-size="15">{}</text>"#, escape(title));
    ribbon(&mut svg, truth, 40.0, "ground truth");
    ribbon(&mut svg, pred, 40.0 + RIBBON + GAP, "prediction");
    let items = classes
        .iter()
        .enumerate()
        .map(|(k, name)| (class_color(k), name.as_str()))
        .chain(std::iter::once((MASKED_COLOR.to_string(), "unlabeled")));
    for (i, (color, name)) in items.enumerate() {
        let x = MARGIN + (i % 5) as f64 * 170.0;
        let y = legend_y + (i / 5) as f64 * 20.0;
        let _ = writeln!(svg, r#"  <rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{color}"/>"#, y - 10.0);
        let _ = writeln!(svg, r#"  <text x="{:.1}" y="{y:.1}" font-size="12">{}</text>"#, x + 18.0, escape(name));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
