//! Conditional genre-association tables and variable-count genre selection.
//!
//! The dominant genre `j` is the argmax of the confidence vector. A second
//! genre `k` is added when `max_k ρ_k P̃(g_k|g_j)` exceeds τ, and a third `l`
//! when `max_l ρ_l P̃(g_l|g_j) P̃(g_l|g_j,g_k)` exceeds τ'.

use std::io::Write;
use std::path::Path;

use crate::data::{CooccurrenceStats, MultiHotLabel};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalTables {
    delta: usize,
    /// `P(g_k|g_j)` row-major `[j][k]`.
    pub p2: Vec<f64>,
    /// `p2` normalized over `k ≠ j`; the diagonal is 0.
    pub p2_norm: Vec<f64>,
    /// `P(g_l|g_j,g_k)` row-major `[j][k][l]`.
    pub p3: Vec<f64>,
    /// `p3` normalized over `l ∉ {j, k}`; excluded entries are 0.
    pub p3_norm: Vec<f64>,
}

fn div_or_zero(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Normalizes `row` over the entries where `keep` holds; other entries become 0.
fn normalize(row: &[f64], keep: impl Fn(usize) -> bool) -> Vec<f64> {
    let sum: f64 = row.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, v)| v).sum();
    row.iter()
        .enumerate()
        .map(|(i, &v)| if keep(i) && sum > 0.0 { v / sum } else { 0.0 })
        .collect()
}

pub fn build_conditional_tables(stats: &CooccurrenceStats) -> ConditionalTables {
    let d = stats.num_genres();
    let mut p2 = vec![0.0; d * d];
    let mut p3 = vec![0.0; d * d * d];
    for j in 0..d {
        for k in 0..d {
            p2[j * d + k] = div_or_zero(stats.pair(j, k), stats.single(j));
            for l in 0..d {
                p3[(j * d + k) * d + l] = div_or_zero(stats.triple(j, k, l), stats.pair(j, k));
            }
        }
    }
    ConditionalTables::from_raw(d, p2, p3).expect("consistent sizes")
}

impl ConditionalTables {
    /// Builds the normalized variants from raw `p2` (δ²) and `p3` (δ³) tables.
    pub fn from_raw(delta: usize, p2: Vec<f64>, p3: Vec<f64>) -> Result<Self> {
        if p2.len() != delta * delta || p3.len() != delta * delta * delta {
            return Err(shape_err!("conditional tables do not match δ = {delta}"));
        }
        if p2.iter().chain(&p3).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("conditional probabilities must lie in [0, 1]".into()));
        }
        let d = delta;
        let mut p2_norm = Vec::with_capacity(d * d);
        for j in 0..d {
            p2_norm.extend(normalize(&p2[j * d..(j + 1) * d], |k| k != j));
        }
        let mut p3_norm = Vec::with_capacity(d * d * d);
        for j in 0..d {
            for k in 0..d {
                let base = (j * d + k) * d;
                p3_norm.extend(normalize(&p3[base..base + d], |l| l != j && l != k));
            }
        }
        Ok(ConditionalTables { delta, p2, p2_norm, p3, p3_norm })
    }

    pub fn num_genres(&self) -> usize {
        self.delta
    }

    pub fn p2(&self, j: usize, k: usize) -> f64 {
        self.p2[j * self.delta + k]
    }

    pub fn p2_norm(&self, j: usize, k: usize) -> f64 {
        self.p2_norm[j * self.delta + k]
    }

    pub fn p3(&self, j: usize, k: usize, l: usize) -> f64 {
        self.p3[(j * self.delta + k) * self.delta + l]
    }

    pub fn p3_norm(&self, j: usize, k: usize, l: usize) -> f64 {
        self.p3_norm[(j * self.delta + k) * self.delta + l]
    }

    /// Writes `p2.csv`, `p2_norm.csv` (labeled matrices) and `p3.csv`, `p3_norm.csv`
    /// (`j,k,l,value` rows with 1-based class ids) into `dir`.
    pub fn save(&self, dir: &Path, genres: &[String]) -> Result<()> {
        if genres.len() != self.delta {
            return Err(shape_err!("{} genre names for δ = {}", genres.len(), self.delta));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let d = self.delta;
        for (name, m) in [("p2.csv", &self.p2), ("p2_norm.csv", &self.p2_norm)] {
            let mut s = format!("genre,{}\n", genres.join(","));
            for j in 0..d {
                let row: Vec<String> = m[j * d..(j + 1) * d].iter().map(f64::to_string).collect();
                s.push_str(&format!("{},{}\n", genres[j], row.join(",")));
            }
            write_file(&dir.join(name), s.as_bytes())?;
        }
        for (name, t) in [("p3.csv", &self.p3), ("p3_norm.csv", &self.p3_norm)] {
            let mut s = String::from("j,k,l,value\n");
            for (i, v) in t.iter().enumerate() {
                let (j, k, l) = (i / (d * d), (i / d) % d, i % d);
                s.push_str(&format!("{},{},{},{v}\n", j + 1, k + 1, l + 1));
            }
            write_file(&dir.join(name), s.as_bytes())?;
        }
        Ok(())
    }

    /// Reads tables written by [`ConditionalTables::save`]; normalized files are recomputed
    /// from the raw ones and checked against what is on disk.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let p2 = parse_matrix(&read("p2.csv")?)?;
        let d = (p2.len() as f64).sqrt().round() as usize;
        let p3 = parse_flat(&read("p3.csv")?, d)?;
        let t = Self::from_raw(d, p2, p3)?;
        let on_disk = parse_matrix(&read("p2_norm.csv")?)?;
        let on_disk3 = parse_flat(&read("p3_norm.csv")?, d)?;
        if on_disk != t.p2_norm || on_disk3 != t.p3_norm {
            return Err(Error::Format("normalized tables disagree with the raw tables".into()));
        }
        Ok(t)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn parse_value(s: &str, line: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse { line, msg: format!("bad value '{s}'") })
}

fn parse_matrix(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Format("empty table".into()))?;
    let d = header.split(',').count() - 1;
    let mut out = Vec::with_capacity(d * d);
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::Parse { line: i + 1, msg: format!("expected {} fields", d + 1) });
        }
        for f in &fields[1..] {
            out.push(parse_value(f, i + 1)?);
        }
    }
    if out.len() != d * d {
        return Err(Error::Format(format!("matrix is not {d}x{d}")));
    }
    Ok(out)
}

fn parse_flat(text: &str, d: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; d * d * d];
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse { line: i + 1, msg: "expected j,k,l,value with ids in 1..δ".into() };
        if f.len() != 4 {
            return Err(bad());
        }
        let mut idx = [0usize; 3];
        for (slot, s) in idx.iter_mut().zip(&f[..3]) {
            *slot = match s.trim().parse::<usize>() {
                Ok(v) if (1..=d).contains(&v) => v - 1,
                _ => return Err(bad()),
            };
        }
        out[(idx[0] * d + idx[1]) * d + idx[2]] = parse_value(f[3], i + 1)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    pub tau: f64,
    pub tau_prime: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { tau: 0.3, tau_prime: 0.03 }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.tau_prime) {
            return Err(Error::Invalid("thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One to three selected genres, dominant first, with the maxima tested at each step.
#[derive(Clone, Debug, PartialEq)]
pub struct GenrePrediction {
    pub genres: Vec<usize>,
    /// `max_k ρ_k P̃(g_k|g_j)`.
    pub second_score: f64,
    /// `max_l ρ_l P̃(g_l|g_j) P̃(g_l|g_j,g_k)`, when a second genre was chosen.
    pub third_score: Option<f64>,
}

impl GenrePrediction {
    pub fn dominant(&self) -> usize {
        self.genres[0]
    }

    pub fn to_label(&self, num_genres: usize) -> MultiHotLabel {
        MultiHotLabel::from_indices(num_genres, &self.genres).expect("distinct in-range genres")
    }
}

/// Index of the maximum over `candidates`, lowest index on ties.
fn argmax(candidates: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    candidates.fold(None, |best, (i, v)| match best {
        Some((_, b)) if v <= b => best,
        _ => Some((i, v)),
    })
}

pub fn refine_prediction(rho: &[f64], tables: &ConditionalTables, cfg: &RefineConfig) -> Result<GenrePrediction> {
    let d = tables.num_genres();
    if rho.len() != d || d < 2 {
        return Err(shape_err!("confidence vector of {} for tables of δ = {d}", rho.len()));
    }
    let (j, _) = argmax(rho.iter().copied().enumerate()).expect("non-empty");
    let (k, second) = argmax((0..d).filter(|&k| k != j).map(|k| (k, rho[k] * tables.p2_norm(j, k)))).expect("δ >= 2");
    let mut pred = GenrePrediction { genres: vec![j], second_score: second, third_score: None };
    if second <= cfg.tau {
        return Ok(pred);
    }
    pred.genres.push(k);
    let third = argmax(
        (0..d)
            .filter(|&l| l != j && l != k)
            .map(|l| (l, rho[l] * tables.p2_norm(j, l) * tables.p3_norm(j, k, l))),
    );
    if let Some((l, s)) = third {
        pred.third_score = Some(s);
        if s > cfg.tau_prime {
            pred.genres.push(l);
        }
    }
    Ok(pred)
}

/// Fraction of samples whose dominant genre is one of the true genres.
pub fn hit_ratio(predictions: &[GenrePrediction], truths: &[MultiHotLabel]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(shape_err!("{} predictions for {} labels", predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(Error::Invalid("hit ratio of an empty set".into()));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| t.get(p.dominant())).count();
    Ok(hits as f64 / predictions.len() as f64)
}
