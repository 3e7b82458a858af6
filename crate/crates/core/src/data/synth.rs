//! Synthetic posters with separable genre signals, for smoke tests and demos.
//!
//! The image is divided into a 4x4 grid of tiles. Genre `g` paints tile
//! `g % 16` with its own saturated color over a dim noisy background, so every
//! label is recoverable from the pixels alone.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MultiHotLabel, PosterManifest, PosterRecord, RgbImage, MAX_GENRES_PER_POSTER};
use crate::error::{Error, Result};

const GRID: usize = 4;

fn genre_color(g: usize) -> [f64; 3] {
    // Distinct corners of the RGB cube, then mid-tones for genres past 7.
    let bits = [(g + 1) & 1, ((g + 1) >> 1) & 1, ((g + 1) >> 2) & 1];
    let hi = if g < 7 { 1.0 } else { 0.75 };
    bits.map(|b| if b == 1 { hi } else { 0.3 })
}

/// Renders one poster for `label` at `side x side`.
pub fn render_poster(label: &MultiHotLabel, side: usize, rng: &mut impl Rng) -> RgbImage {
    let tile = (side / GRID).max(1);
    let mut data: Vec<f64> = (0..side * side * 3).map(|_| rng.gen_range(0.0..0.15)).collect();
    for g in label.indices() {
        let t = g % (GRID * GRID);
        let (ty, tx) = (t / GRID, t % GRID);
        let color = genre_color(g);
        for y in ty * tile..((ty + 1) * tile).min(side) {
            for x in tx * tile..((tx + 1) * tile).min(side) {
                let i = (y * side + x) * 3;
                data[i..i + 3].copy_from_slice(&color);
            }
        }
    }
    RgbImage::new(side, side, data).expect("consistent geometry")
}

/// Random labels with 1 to 3 genres; poster `i` always carries genre `i % δ`.
pub fn synthetic_labels(n: usize, num_genres: usize, rng: &mut impl Rng) -> Vec<MultiHotLabel> {
    (0..n)
        .map(|i| {
            let mut idx = vec![i % num_genres];
            let extra = rng.gen_range(0..MAX_GENRES_PER_POSTER.min(num_genres));
            while idx.len() < 1 + extra {
                let g = rng.gen_range(0..num_genres);
                if !idx.contains(&g) {
                    idx.push(g);
                }
            }
            MultiHotLabel::from_indices(num_genres, &idx).expect("valid indices")
        })
        .collect()
}

/// In-memory synthetic set: images and their labels.
pub fn synthetic_set(n: usize, num_genres: usize, side: usize, seed: u64) -> Result<Vec<(RgbImage, MultiHotLabel)>> {
    if n == 0 || num_genres < 2 || side < GRID {
        return Err(Error::Invalid(format!(
            "synthetic set needs n >= 1, at least 2 genres and side >= {GRID}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = synthetic_labels(n, num_genres, &mut rng);
    Ok(labels.into_iter().map(|l| (render_poster(&l, side, &mut rng), l)).collect())
}

/// Writes `poster_NNNN.ppm` files plus `manifest.tsv` (relative paths) into `dir`.
pub fn write_synthetic_dataset(dir: &Path, n: usize, num_genres: usize, seed: u64, side: usize) -> Result<PosterManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(n);
    for (i, (img, label)) in synthetic_set(n, num_genres, side, seed)?.into_iter().enumerate() {
        let name = format!("poster_{i:04}.ppm");
        let path = dir.join(&name);
        std::fs::write(&path, super::encode_ppm(&img)).map_err(|e| Error::io(&path, e))?;
        records.push(PosterRecord { path: name, movie_id: format!("m{i:04}"), label });
    }
    let manifest = PosterManifest { records, base_dir: dir.to_path_buf() };
    let mpath = dir.join("manifest.tsv");
    std::fs::write(&mpath, manifest.to_tsv()).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}
