//! Genre vocabulary and multi-hot labels together with poster manifests.
//!
//! Class ids are 1-based in every file format (`1` is the first genre of the
//! vocabulary) and 0-based indices everywhere in code.

mod cooccur;
mod image;
mod split;
pub mod synth;

pub use cooccur::{compute_cooccurrence, CooccurrenceStats};
pub use image::{decode_ppm, encode_ppm, load_poster_image, load_poster_image_with, resize_bilinear, DecodeHook, RgbImage};
#[cfg(feature = "codecs")]
pub use image::codec_decoder;
pub use split::{split_dataset, SplitAssignment, SplitSizes};

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// The 13 IMDb genres in class-id order.
pub const DEFAULT_GENRES: [&str; 13] = [
    "Action",
    "Adventure",
    "Animation",
    "Biography",
    "Comedy",
    "Crime",
    "Drama",
    "Fantasy",
    "Horror",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
];

/// IMDb lists at most this many genres per movie.
pub const MAX_GENRES_PER_POSTER: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenreVocabulary {
    names: Vec<String>,
}

impl GenreVocabulary {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Invalid(format!("need at least 2 genres, got {}", names.len())));
        }
        let mut seen = HashSet::new();
        for n in names {
            let n = n.as_ref();
            if n.is_empty() || n.contains(|c: char| c == ',' || c == ';' || c.is_whitespace()) {
                return Err(Error::Invalid(format!("invalid genre name '{n}'")));
            }
            if !seen.insert(n) {
                return Err(Error::Invalid(format!("duplicate genre name '{n}'")));
            }
        }
        Ok(GenreVocabulary { names: names.iter().map(|s| s.as_ref().to_string()).collect() })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Parses a 1-based class id into a 0-based index.
    pub fn parse_class_id(&self, token: &str) -> Option<usize> {
        match token.trim().parse::<usize>() {
            Ok(id) if (1..=self.len()).contains(&id) => Some(id - 1),
            _ => None,
        }
    }
}

impl Default for GenreVocabulary {
    fn default() -> Self {
        GenreVocabulary::new(&DEFAULT_GENRES).expect("default vocabulary is valid")
    }
}

/// Length-δ 0/1 genre vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MultiHotLabel {
    bits: Vec<bool>,
}

impl MultiHotLabel {
    /// Label with bits set at the given 0-based indices; at least one is required.
    pub fn from_indices(num_genres: usize, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; num_genres];
        for &i in indices {
            if i >= num_genres {
                return Err(Error::Invalid(format!("genre index {i} out of range for {num_genres} genres")));
            }
            if bits[i] {
                return Err(Error::Invalid(format!("genre index {i} repeated")));
            }
            bits[i] = true;
        }
        if indices.is_empty() {
            return Err(Error::Invalid("a label needs at least one genre".into()));
        }
        Ok(MultiHotLabel { bits })
    }

    /// Any 0/1 vector, including the all-zero one (used for predictions).
    pub fn from_bits(bits: Vec<bool>) -> Self {
        MultiHotLabel { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    /// Number of genres set (κ).
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

impl fmt::Display for MultiHotLabel {
    /// Semicolon-joined 1-based class ids, e.g. `1;7;13`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.indices().map(|i| (i + 1).to_string()).collect();
        f.write_str(&ids.join(";"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosterRecord {
    /// Image path as written in the manifest (relative paths resolve against the manifest's directory).
    pub path: String,
    pub movie_id: String,
    pub label: MultiHotLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosterManifest {
    pub records: Vec<PosterRecord>,
    pub base_dir: PathBuf,
}

impl PosterManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<MultiHotLabel> {
        self.records.iter().map(|r| r.label.clone()).collect()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        let p = Path::new(&self.records[index].path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Positive sample count per genre.
    pub fn genre_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.records.first().map_or(0, |r| r.label.len())];
        for r in &self.records {
            for i in r.label.indices() {
                counts[i] += 1;
            }
        }
        counts
    }

    /// Manifest restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> PosterManifest {
        PosterManifest {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// TSV text in the manifest format.
    pub fn to_tsv(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.path, r.movie_id, r.label))
            .collect()
    }
}

/// Parses manifest text: `path<TAB>movie_id<TAB>id;id;id` per line, blank lines ignored.
pub fn parse_manifest(text: &str, vocab: &GenreVocabulary, base_dir: &Path) -> Result<PosterManifest> {
    let mut records = Vec::new();
    let mut seen_paths = HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, movie_id, genres] = fields[..] else {
            return Err(perr(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        if path.is_empty() || movie_id.is_empty() {
            return Err(perr("empty path or movie id".into()));
        }
        let mut indices = Vec::new();
        for tok in genres.split(';').filter(|t| !t.trim().is_empty()) {
            let idx = vocab
                .parse_class_id(tok)
                .ok_or_else(|| perr(format!("unknown genre id '{}'", tok.trim())))?;
            if indices.contains(&idx) {
                return Err(perr(format!("genre id {} listed twice", idx + 1)));
            }
            indices.push(idx);
        }
        if indices.is_empty() {
            return Err(perr("poster has no genres".into()));
        }
        if indices.len() > MAX_GENRES_PER_POSTER {
            return Err(perr(format!(
                "poster has {} genres, at most {MAX_GENRES_PER_POSTER} allowed",
                indices.len()
            )));
        }
        if !seen_paths.insert(path.to_string()) {
            return Err(perr(format!("duplicate poster path '{path}'")));
        }
        records.push(PosterRecord {
            path: path.to_string(),
            movie_id: movie_id.to_string(),
            label: MultiHotLabel::from_indices(vocab.len(), &indices)?,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(PosterManifest { records, base_dir: base_dir.to_path_buf() })
}

pub fn load_manifest(path: &Path, vocab: &GenreVocabulary) -> Result<PosterManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, vocab, &base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<PosterManifest> {
        parse_manifest(text, &GenreVocabulary::default(), Path::new(""))
    }

    #[test]
    fn default_vocabulary_matches_table_order() {
        let v = GenreVocabulary::default();
        assert_eq!(v.len(), 13);
        assert_eq!(v.name(0), "Action");
        assert_eq!(v.name(6), "Drama");
        assert_eq!(v.name(12), "Thriller");
        assert!(GenreVocabulary::new(&["A"]).is_err());
        assert!(GenreVocabulary::new(&["A", "A"]).is_err());
        assert!(GenreVocabulary::new(&["A", ""]).is_err());
    }

    #[test]
    fn drama_line_sets_class_seven() {
        let m = parse("p1.ppm\tm1\t7\n").unwrap();
        assert_eq!(m.len(), 1);
        let bits = m.records[0].label.bits();
        assert!(bits[6]);
        assert_eq!(m.records[0].label.count(), 1);
        assert_eq!(m.records[0].label.to_string(), "7");
    }

    #[test]
    fn toy_manifest_counts() {
        let vocab = GenreVocabulary::new(&["A", "B", "C"]).unwrap();
        let text = "a\tm1\t1\nb\tm2\t1;2\nc\tm3\t2;3\nd\tm4\t1;2;3\ne\tm5\t3\n";
        let m = parse_manifest(text, &vocab, Path::new("")).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.genre_counts(), vec![3, 3, 3]);
    }

    #[test]
    fn manifest_errors() {
        assert!(matches!(parse(""), Err(Error::EmptyManifest)));
        assert_eq!(parse("").unwrap_err().to_string(), "empty manifest");
        assert!(matches!(parse("\n  \n"), Err(Error::EmptyManifest)));
        assert!(matches!(parse("a\tm\t1\nb\tm\t14\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse("a\tm\t0\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("a\tm\t\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("a\tm\t1;2;3;4\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("a\tm\t1;1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("a\tm\t1\na\tm2\t2\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse("a m 1\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn tsv_round_trip() {
        let text = "x/p1.ppm\tm1\t1;7\np2.ppm\tm2\t13\n";
        let m = parse(text).unwrap();
        assert_eq!(m.to_tsv(), text);
    }
}
