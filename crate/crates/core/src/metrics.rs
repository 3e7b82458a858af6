//! Macro multi-label metrics and their text / CSV reports.
//!
//! Every ratio with a zero denominator counts as 0 and is still averaged.

use std::fmt::Write as _;
use std::io::Write;

use crate::data::MultiHotLabel;
use crate::error::{shape_err, Error, Result};

/// Per-genre confusion counts over an evaluated set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenreConfusion {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub tn: Vec<usize>,
    pub fn_: Vec<usize>,
    pub samples: usize,
}

impl GenreConfusion {
    pub fn num_genres(&self) -> usize {
        self.tp.len()
    }
}

fn check_pairs(pred: &[MultiHotLabel], truth: &[MultiHotLabel]) -> Result<usize> {
    if pred.len() != truth.len() {
        return Err(shape_err!("{} predictions for {} ground-truth labels", pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let d = truth[0].len();
    if pred.iter().chain(truth).any(|l| l.len() != d) {
        return Err(shape_err!("labels of differing widths"));
    }
    Ok(d)
}

pub fn confusion_per_genre(pred: &[MultiHotLabel], truth: &[MultiHotLabel]) -> Result<GenreConfusion> {
    let d = check_pairs(pred, truth)?;
    let mut c = GenreConfusion { tp: vec![0; d], fp: vec![0; d], tn: vec![0; d], fn_: vec![0; d], samples: pred.len() };
    for (p, t) in pred.iter().zip(truth) {
        for j in 0..d {
            match (p.get(j), t.get(j)) {
                (true, true) => c.tp[j] += 1,
                (true, false) => c.fp[j] += 1,
                (false, false) => c.tn[j] += 1,
                (false, true) => c.fn_[j] += 1,
            }
        }
    }
    Ok(c)
}

/// Fraction of disagreeing label bits over `N · δ`.
pub fn hamming_loss(pred: &[MultiHotLabel], truth: &[MultiHotLabel]) -> Result<f64> {
    let d = check_pairs(pred, truth)?;
    let wrong: usize = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (0..d).filter(|&j| p.get(j) != t.get(j)).count())
        .sum();
    Ok(wrong as f64 / (pred.len() * d) as f64)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metric values as fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GenreMetrics {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
    pub f_measure: f64,
    pub hamming_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Optional partition label, e.g. `TD<2>`.
    pub tag: Option<String>,
    pub samples: usize,
    pub per_genre: Vec<GenreMetrics>,
    /// Unweighted means over genres; `f_measure` is the mean of per-genre F1.
    pub macro_avg: GenreMetrics,
}

/// Per-genre and macro metrics from confusion counts.
pub fn macro_report(conf: &GenreConfusion) -> MetricsReport {
    let d = conf.num_genres();
    let per_genre: Vec<GenreMetrics> = (0..d)
        .map(|j| {
            let (tp, fp, tn, fn_) = (conf.tp[j], conf.fp[j], conf.tn[j], conf.fn_[j]);
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let specificity = ratio(tn, tn + fp);
            let f_measure = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            GenreMetrics {
                precision,
                recall,
                specificity,
                balanced_accuracy: (recall + specificity) / 2.0,
                f_measure,
                hamming_loss: ratio(fp + fn_, conf.samples),
            }
        })
        .collect();
    let mean = |f: fn(&GenreMetrics) -> f64| per_genre.iter().map(f).sum::<f64>() / d as f64;
    let recall = mean(|m| m.recall);
    let specificity = mean(|m| m.specificity);
    let macro_avg = GenreMetrics {
        precision: mean(|m| m.precision),
        recall,
        specificity,
        balanced_accuracy: (recall + specificity) / 2.0,
        f_measure: mean(|m| m.f_measure),
        hamming_loss: mean(|m| m.hamming_loss),
    };
    MetricsReport { tag: None, samples: conf.samples, per_genre, macro_avg }
}

/// Confusion plus report in one call.
pub fn evaluate(pred: &[MultiHotLabel], truth: &[MultiHotLabel]) -> Result<MetricsReport> {
    Ok(macro_report(&confusion_per_genre(pred, truth)?))
}

/// Sample indices grouped by ground-truth genre count: `[κ = 1, κ = 2, κ = 3]`.
pub fn partition_by_label_count(truth: &[MultiHotLabel]) -> [Vec<usize>; 3] {
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (i, t) in truth.iter().enumerate() {
        if let 1..=3 = t.count() {
            parts[t.count() - 1].push(i);
        }
    }
    parts
}

const HEADER: [&str; 7] = ["genre", "P%", "R%", "Sp%", "BA%", "FM%", "HL"];

fn cells(name: &str, m: &GenreMetrics) -> [String; 7] {
    [
        name.to_string(),
        format!("{:.2}", 100.0 * m.precision),
        format!("{:.2}", 100.0 * m.recall),
        format!("{:.2}", 100.0 * m.specificity),
        format!("{:.2}", 100.0 * m.balanced_accuracy),
        format!("{:.2}", 100.0 * m.f_measure),
        format!("{:.5}", m.hamming_loss),
    ]
}

impl MetricsReport {
    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    fn rows(&self, genres: &[String]) -> Vec<[String; 7]> {
        let mut rows: Vec<[String; 7]> = self.per_genre.iter().zip(genres).map(|(m, n)| cells(n, m)).collect();
        rows.push(cells("macro", &self.macro_avg));
        rows
    }

    /// One row per genre plus a `macro` row; percents with 2 decimals, HL with 5.
    pub fn write_csv<W: Write>(&self, mut w: W, genres: &[String]) -> std::io::Result<()> {
        let tag = self.tag.as_deref().unwrap_or("all");
        writeln!(w, "tag,{}", HEADER.join(","))?;
        for r in self.rows(genres) {
            writeln!(w, "{tag},{}", r.join(","))?;
        }
        Ok(())
    }

    /// Aligned plain-text table.
    pub fn to_text(&self, genres: &[String]) -> String {
        let rows = self.rows(genres);
        let mut width = HEADER.map(str::len);
        for r in &rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let tag = self.tag.as_deref().unwrap_or("all");
        let _ = writeln!(out, "[{tag}] samples={}", self.samples);
        let line = |out: &mut String, r: &[String]| {
            let mut s = format!("{:<w$}", r[0], w = width[0]);
            for (c, w) in r[1..].iter().zip(&width[1..]) {
                let _ = write!(s, "  {c:>w$}");
            }
            let _ = writeln!(out, "{}", s.trim_end());
        };
        line(&mut out, &HEADER.map(String::from));
        for r in &rows {
            line(&mut out, r);
        }
        out
    }
}

/// Per-sample heat-map text: ground-truth bits then confidence scores per genre.
pub fn write_heatmap<W: Write>(
    mut w: W,
    ids: &[String],
    truth: &[MultiHotLabel],
    scores: &[Vec<f64>],
    genres: &[String],
) -> Result<()> {
    if ids.len() != truth.len() || ids.len() != scores.len() {
        return Err(shape_err!("heat map needs equal sample counts"));
    }
    let io = |e| Error::Format(format!("heat map write failed: {e}"));
    let mut header = vec!["sample".to_string()];
    header.extend(genres.iter().map(|g| format!("truth:{g}")));
    header.extend(genres.iter().map(|g| format!("score:{g}")));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for ((id, t), s) in ids.iter().zip(truth).zip(scores) {
        let mut row = vec![id.clone()];
        row.extend(t.bits().iter().map(|&b| u8::from(b).to_string()));
        row.extend(s.iter().map(|v| format!("{v:.4}")));
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    Ok(())
}
