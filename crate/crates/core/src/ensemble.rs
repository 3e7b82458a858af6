//! Weighted-mean fusion of three base models and simplex grid search over the weights.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::data::MultiHotLabel;
use crate::error::{shape_err, Error, Result};
use crate::metrics::{evaluate, hamming_loss};
use crate::train::top3_predict;

/// Convex weights `(α₁, α₂, α₃)` for the R, RT and RDT score sets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleWeights {
    alpha: [f64; 3],
}

impl EnsembleWeights {
    pub fn new(alpha: [f64; 3]) -> Result<Self> {
        if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) || (alpha.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("ensemble weights {alpha:?} are not on the simplex")));
        }
        Ok(EnsembleWeights { alpha })
    }

    pub fn alpha(&self) -> [f64; 3] {
        self.alpha
    }

    /// Three lines, one weight each.
    pub fn to_text(&self) -> String {
        self.alpha.iter().map(|a| format!("{a}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let vals: Vec<f64> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.trim()
                    .parse()
                    .map_err(|_| Error::Parse { line: i + 1, msg: format!("bad weight '{}'", l.trim()) })
            })
            .collect::<Result<_>>()?;
        match vals[..] {
            [a, b, c] => Self::new([a, b, c]),
            _ => Err(Error::Format(format!("weights file needs 3 values, got {}", vals.len()))),
        }
    }
}

/// `ρ_j = Σ_k α_k ρ_j^(k)` for one sample.
pub fn ensemble_scores(rhos: [&[f64]; 3], w: &EnsembleWeights) -> Result<Vec<f64>> {
    let d = rhos[0].len();
    if rhos.iter().any(|r| r.len() != d) {
        return Err(shape_err!("base score vectors of differing lengths"));
    }
    let a = w.alpha;
    Ok((0..d).map(|j| a[0] * rhos[0][j] + a[1] * rhos[1][j] + a[2] * rhos[2][j]).collect())
}

/// [`ensemble_scores`] applied row by row.
pub fn ensemble_matrix(base: [&[Vec<f64>]; 3], w: &EnsembleWeights) -> Result<Vec<Vec<f64>>> {
    let n = base[0].len();
    if base.iter().any(|b| b.len() != n) {
        return Err(shape_err!("base score sets of differing sizes"));
    }
    (0..n).map(|i| ensemble_scores([&base[0][i], &base[1][i], &base[2][i]], w)).collect()
}

/// Validation metric optimized by the grid search.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMetric {
    BalancedAccuracy,
    FMeasure,
    HammingLoss,
}

impl FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BA" => Ok(SelectionMetric::BalancedAccuracy),
            "FM" => Ok(SelectionMetric::FMeasure),
            "HL" => Ok(SelectionMetric::HammingLoss),
            _ => Err(Error::Invalid(format!("unknown selection metric '{s}' (expected BA, FM or HL)"))),
        }
    }
}

impl fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMetric::BalancedAccuracy => "BA",
            SelectionMetric::FMeasure => "FM",
            SelectionMetric::HammingLoss => "HL",
        })
    }
}

impl SelectionMetric {
    /// Metric of top-3 predictions; returned so that larger is better.
    pub fn score(&self, scores: &[Vec<f64>], truth: &[MultiHotLabel]) -> Result<f64> {
        let pred: Vec<MultiHotLabel> = scores.iter().map(|s| top3_predict(s)).collect::<Result<_>>()?;
        Ok(match self {
            SelectionMetric::BalancedAccuracy => evaluate(&pred, truth)?.macro_avg.balanced_accuracy,
            SelectionMetric::FMeasure => evaluate(&pred, truth)?.macro_avg.f_measure,
            SelectionMetric::HammingLoss => -hamming_loss(&pred, truth)?,
        })
    }
}

/// Simplex lattice `{(i, j, n-i-j)/n}` with `n = 1/step`, in lexicographic order.
pub fn lattice_points(step: f64) -> Result<Vec<[f64; 3]>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Invalid(format!("grid step {step} outside (0, 1]")));
    }
    let n = (1.0 / step).round() as usize;
    if (n as f64 * step - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("grid step {step} does not divide 1")));
    }
    let nf = n as f64;
    let mut pts = Vec::with_capacity((n + 1) * (n + 2) / 2);
    for i in 0..=n {
        for j in 0..=n - i {
            pts.push([i as f64 / nf, j as f64 / nf, (n - i - j) as f64 / nf]);
        }
    }
    Ok(pts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub weights: EnsembleWeights,
    /// Metric value at the optimum (negated for HL).
    pub score: f64,
    pub evaluated: usize,
}

/// Exhaustive lattice search; the first (lexicographically smallest) point wins ties.
pub fn grid_search_weights(
    base: [&[Vec<f64>]; 3],
    truth: &[MultiHotLabel],
    step: f64,
    metric: SelectionMetric,
) -> Result<GridResult> {
    if truth.is_empty() {
        return Err(Error::Invalid("grid search needs a non-empty validation set".into()));
    }
    if base.iter().any(|b| b.len() != truth.len()) {
        return Err(shape_err!("base score sets do not match {} labels", truth.len()));
    }
    let pts = lattice_points(step)?;
    let mut best: Option<(f64, [f64; 3])> = None;
    for &a in &pts {
        let w = EnsembleWeights::new(a)?;
        let s = metric.score(&ensemble_matrix(base, &w)?, truth)?;
        if best.map_or(true, |(b, _)| s > b) {
            best = Some((s, a));
        }
    }
    let (score, a) = best.expect("lattice is never empty");
    Ok(GridResult { weights: EnsembleWeights::new(a)?, score, evaluated: pts.len() })
}

/// Score matrix with sample ids and genre column names.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub genres: Vec<String>,
    pub ids: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTable {
    /// CSV with header `path,<genre>...`; values use the shortest exact decimal form.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        let mut header = vec!["path".to_string()];
        header.extend(self.genres.iter().cloned());
        out.write_record(&header).map_err(err)?;
        for (id, row) in self.ids.iter().zip(&self.scores) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&rec).map_err(err)?;
        }
        out.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rdr.headers().map_err(|e| Error::Format(format!("csv: {e}")))?.clone();
        if header.len() < 2 || &header[0] != "path" {
            return Err(Error::Format("score csv must start with a 'path' column".into()));
        }
        let genres: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let (mut ids, mut scores) = (Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            if rec.len() != genres.len() + 1 {
                return Err(Error::Parse { line, msg: format!("expected {} fields", genres.len() + 1) });
            }
            ids.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|_| Error::Parse { line, msg: format!("bad score '{v}'") }))
                .collect::<Result<Vec<_>>>()?;
            scores.push(row);
        }
        if ids.is_empty() {
            return Err(Error::Format("score csv has no rows".into()));
        }
        Ok(ScoreTable { genres, ids, scores })
    }
}
