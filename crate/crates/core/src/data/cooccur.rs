use std::io::Write;

use super::{GenreVocabulary, PosterManifest};
use crate::error::{Error, Result};

/// Genre co-occurrence counts over a subset of posters.
///
/// `pair(j, k)` is |Z_j ∩ Z_k| and `triple(j, k, l)` is |Z_j ∩ Z_k ∩ Z_l|,
/// where Z_j is the set of posters carrying genre j. Repeated indices
/// collapse: `pair(j, j) == single(j)` and `triple(j, j, k) == pair(j, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CooccurrenceStats {
    num_genres: usize,
    subset_size: usize,
    single: Vec<usize>,
    pair: Vec<usize>,
    triple: Vec<usize>,
}

impl CooccurrenceStats {
    pub fn num_genres(&self) -> usize {
        self.num_genres
    }

    /// Number of posters counted.
    pub fn subset_size(&self) -> usize {
        self.subset_size
    }

    pub fn single(&self, j: usize) -> usize {
        self.single[j]
    }

    pub fn pair(&self, j: usize, k: usize) -> usize {
        self.pair[j * self.num_genres + k]
    }

    pub fn triple(&self, j: usize, k: usize, l: usize) -> usize {
        let d = self.num_genres;
        self.triple[(j * d + k) * d + l]
    }

    /// Positive-to-negative ratio `single / (n - single)`; infinite when every poster is positive.
    pub fn imbalance(&self, j: usize) -> f64 {
        let pos = self.single[j];
        let neg = self.subset_size - pos;
        if neg == 0 {
            f64::INFINITY
        } else {
            pos as f64 / neg as f64
        }
    }

    /// CSV: a labeled δ×δ pair matrix followed by `single` and `imbalance` rows.
    pub fn write_csv<W: Write>(&self, w: W, vocab: &GenreVocabulary) -> Result<()> {
        let d = self.num_genres;
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["genre".to_string()];
        header.extend(vocab.names().iter().cloned());
        out.write_record(&header).map_err(csv_err)?;
        for j in 0..d {
            let mut row = vec![vocab.name(j).to_string()];
            row.extend((0..d).map(|k| self.pair(j, k).to_string()));
            out.write_record(&row).map_err(csv_err)?;
        }
        let mut row = vec!["single".to_string()];
        row.extend(self.single.iter().map(usize::to_string));
        out.write_record(&row).map_err(csv_err)?;
        let mut row = vec!["imbalance".to_string()];
        row.extend((0..d).map(|j| format!("{:.6}", self.imbalance(j))));
        out.write_record(&row).map_err(csv_err)?;
        out.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Exact co-occurrence counts over `subset` (indices into the manifest).
pub fn compute_cooccurrence(m: &PosterManifest, subset: &[usize]) -> Result<CooccurrenceStats> {
    if subset.is_empty() {
        return Err(Error::Invalid("co-occurrence over an empty subset".into()));
    }
    let d = m.records[0].label.len();
    let mut seen = vec![false; m.len()];
    let mut single = vec![0; d];
    let mut pair = vec![0; d * d];
    let mut triple = vec![0; d * d * d];
    for &r in subset {
        if r >= m.len() {
            return Err(Error::Invalid(format!("subset index {r} out of range for {} records", m.len())));
        }
        if std::mem::replace(&mut seen[r], true) {
            return Err(Error::Invalid(format!("subset index {r} listed twice")));
        }
        let idx: Vec<usize> = m.records[r].label.indices().collect();
        for &a in &idx {
            single[a] += 1;
            for &b in &idx {
                pair[a * d + b] += 1;
                for &c in &idx {
                    triple[(a * d + b) * d + c] += 1;
                }
            }
        }
    }
    Ok(CooccurrenceStats { num_genres: d, subset_size: subset.len(), single, pair, triple })
}
