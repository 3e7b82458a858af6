use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PosterManifest;
use crate::error::{Error, Result};

pub const MIN_SPLIT_RECORDS: usize = 10;

/// How large each of the train / validation / test splits should be.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSizes {
    /// Integer ratio, e.g. `[8, 1, 1]`; sizes are rounded by largest remainder.
    Ratio([u32; 3]),
    /// Exact sizes; must sum to the record count.
    Counts([usize; 3]),
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes::Ratio([8, 1, 1])
    }
}

impl SplitSizes {
    pub fn targets(&self, n: usize) -> Result<[usize; 3]> {
        match *self {
            SplitSizes::Counts(c) => {
                if c.iter().sum::<usize>() != n {
                    return Err(Error::Invalid(format!("split counts {c:?} do not sum to {n}")));
                }
                Ok(c)
            }
            SplitSizes::Ratio(r) => {
                let total: u64 = r.iter().map(|&x| u64::from(x)).sum();
                if total == 0 {
                    return Err(Error::Invalid("split ratio sums to zero".into()));
                }
                let mut sizes = [0usize; 3];
                let mut rems = [0u64; 3];
                for i in 0..3 {
                    let num = n as u64 * u64::from(r[i]);
                    sizes[i] = (num / total) as usize;
                    rems[i] = num % total;
                }
                let mut left = n - sizes.iter().sum::<usize>();
                // Hand out the leftover records by largest remainder, earlier split first on ties.
                let mut order = [0usize, 1, 2];
                order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
                for &i in order.iter().cycle() {
                    if left == 0 {
                        break;
                    }
                    sizes[i] += 1;
                    left -= 1;
                }
                Ok(sizes)
            }
        }
    }
}

/// Disjoint train / validation / test index sets covering a manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn sets(&self) -> [&[usize]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Seeded, stratified split.
///
/// Records are shuffled by `seed`. Genres are then visited rarest first, and
/// for each genre every split that still lacks a positive for it (and has
/// room) takes the next unassigned positive in shuffled order. The remaining
/// records fill train, then validation, then test up to their targets.
pub fn split_dataset(m: &PosterManifest, sizes: SplitSizes, seed: u64) -> Result<SplitAssignment> {
    let n = m.len();
    if n < MIN_SPLIT_RECORDS {
        return Err(Error::Invalid(format!(
            "need at least {MIN_SPLIT_RECORDS} records to split, got {n}"
        )));
    }
    let targets = sizes.targets(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let delta = m.records[0].label.len();
    let counts = m.genre_counts();
    let mut genres: Vec<usize> = (0..delta).collect();
    genres.sort_by_key(|&g| (counts[g], g));

    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut sets: [Vec<usize>; 3] = Default::default();
    for &gen in &genres {
        for s in 0..3 {
            if sets[s].len() >= targets[s] || sets[s].iter().any(|&r| m.records[r].label.get(gen)) {
                continue;
            }
            if let Some(&r) = order.iter().find(|&&r| owner[r].is_none() && m.records[r].label.get(gen)) {
                owner[r] = Some(s);
                sets[s].push(r);
            }
        }
    }
    for &r in &order {
        if owner[r].is_some() {
            continue;
        }
        let s = (0..3).find(|&s| sets[s].len() < targets[s]).expect("targets sum to n");
        owner[r] = Some(s);
        sets[s].push(r);
    }
    for s in &mut sets {
        s.sort_unstable();
    }
    let [train, val, test] = sets;
    Ok(SplitAssignment { train, val, test, seed })
}
