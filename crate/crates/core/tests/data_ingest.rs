use std::path::Path;

use proptest::prelude::*;
use rdt_core::data::{
    compute_cooccurrence, load_manifest, load_poster_image, parse_manifest, split_dataset, synth, GenreVocabulary,
    MultiHotLabel, PosterManifest, PosterRecord, SplitSizes,
};
use rdt_core::Error;

fn vocab(d: usize) -> GenreVocabulary {
    let names: Vec<String> = (0..d).map(|i| format!("G{i}")).collect();
    GenreVocabulary::new(&names).unwrap()
}

fn manifest_from(labels: &[Vec<usize>], d: usize) -> PosterManifest {
    PosterManifest {
        records: labels
            .iter()
            .enumerate()
            .map(|(i, l)| PosterRecord {
                path: format!("p{i}"),
                movie_id: format!("m{i}"),
                label: MultiHotLabel::from_indices(d, l).unwrap(),
            })
            .collect(),
        base_dir: Default::default(),
    }
}

fn toy() -> PosterManifest {
    manifest_from(&[vec![0], vec![0, 1], vec![1, 2], vec![0, 1, 2], vec![2]], 3)
}

fn labels_strategy() -> impl Strategy<Value = (usize, Vec<Vec<usize>>)> {
    (2usize..=6).prop_flat_map(|d| {
        let label = proptest::sample::subsequence((0..d).collect::<Vec<_>>(), 1..=3.min(d));
        (Just(d), proptest::collection::vec(label, 1..=50))
    })
}

#[test]
fn toy_manifest_hand_counts() {
    let m = toy();
    let all: Vec<usize> = (0..5).collect();
    let s = compute_cooccurrence(&m, &all).unwrap();
    assert_eq!([s.single(0), s.single(1), s.single(2)], [3, 3, 3]);
    // class ids 1 and 2 are indices 0 and 1
    assert_eq!(s.pair(0, 1), 2);
    assert_eq!(s.triple(0, 1, 2), 1);
    assert_eq!(s.pair(1, 1), s.single(1));
    assert!((s.imbalance(0) - 1.5).abs() < 1e-15);
}

#[test]
fn cooccurrence_errors() {
    let m = toy();
    assert!(matches!(compute_cooccurrence(&m, &[]), Err(Error::Invalid(_))));
    assert!(compute_cooccurrence(&m, &[0, 0]).is_err());
    assert!(compute_cooccurrence(&m, &[5]).is_err());
    let s = compute_cooccurrence(&manifest_from(&[vec![0]], 2), &[0]).unwrap();
    assert!(s.imbalance(0).is_infinite());
    assert_eq!(s.imbalance(1), 0.0);
}

#[test]
fn cooccurrence_csv_layout() {
    let m = toy();
    let s = compute_cooccurrence(&m, &[0, 1, 2, 3, 4]).unwrap();
    let mut buf = Vec::new();
    s.write_csv(&mut buf, &vocab(3)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "genre,G0,G1,G2");
    assert_eq!(lines[1], "G0,3,2,1");
    assert_eq!(lines[2], "G1,2,3,2");
    assert_eq!(lines[3], "G2,1,2,3");
    assert_eq!(lines[4], "single,3,3,3");
    assert_eq!(lines[5], "imbalance,1.500000,1.500000,1.500000");
}

proptest! {
    #[test]
    fn cooccurrence_matches_set_counting((d, labels) in labels_strategy(), pick in proptest::collection::vec(any::<bool>(), 50)) {
        let m = manifest_from(&labels, d);
        let mut subset: Vec<usize> = (0..labels.len()).filter(|&i| pick[i]).collect();
        if subset.is_empty() {
            subset.push(0);
        }
        let s = compute_cooccurrence(&m, &subset).unwrap();
        let has = |r: usize, g: usize| labels[r].contains(&g);
        for j in 0..d {
            let zj = subset.iter().filter(|&&r| has(r, j)).count();
            prop_assert_eq!(s.single(j), zj);
            for k in 0..d {
                let zjk = subset.iter().filter(|&&r| has(r, j) && has(r, k)).count();
                prop_assert_eq!(s.pair(j, k), zjk);
                prop_assert!(s.pair(j, k) <= s.single(j));
                for l in 0..d {
                    let zjkl = subset.iter().filter(|&&r| has(r, j) && has(r, k) && has(r, l)).count();
                    prop_assert_eq!(s.triple(j, k, l), zjkl);
                    prop_assert!(s.triple(j, k, l) <= s.pair(j, k));
                }
            }
            prop_assert_eq!(s.triple(j, j, (j + 1) % d), s.pair(j, (j + 1) % d));
        }
    }
}

#[test]
fn split_invariants_over_seeds() {
    let labels: Vec<MultiHotLabel> = synth::synthetic_labels(120, 6, &mut rand::rngs::mock::StepRng::new(3, 7));
    let m = PosterManifest {
        records: labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| PosterRecord { path: format!("p{i}"), movie_id: format!("m{i}"), label })
            .collect(),
        base_dir: Default::default(),
    };
    for seed in 0..100 {
        let a = split_dataset(&m, SplitSizes::default(), seed).unwrap();
        assert_eq!(a, split_dataset(&m, SplitSizes::default(), seed).unwrap());
        assert_eq!([a.train.len(), a.val.len(), a.test.len()], [96, 12, 12]);
        let mut all: Vec<usize> = a.sets().iter().flat_map(|s| s.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..120).collect::<Vec<_>>());
        for set in a.sets() {
            for g in 0..6 {
                assert!(set.iter().any(|&r| m.records[r].label.get(g)), "seed {seed} genre {g} missing");
            }
        }
    }
    let a = split_dataset(&m, SplitSizes::default(), 1).unwrap();
    let b = split_dataset(&m, SplitSizes::default(), 2).unwrap();
    assert_ne!(a.train, b.train);
}

#[test]
fn split_sizes_and_errors() {
    let labels: Vec<Vec<usize>> = (0..20).map(|i| vec![i % 3]).collect();
    let m = manifest_from(&labels, 3);
    let a = split_dataset(&m, SplitSizes::default(), 0).unwrap();
    assert_eq!([a.train.len(), a.val.len(), a.test.len()], [16, 2, 2]);
    let small = manifest_from(&labels[..9], 3);
    assert!(split_dataset(&small, SplitSizes::default(), 0).is_err());
    assert_eq!(
        SplitSizes::Counts([10942, 1470, 1470]).targets(13882).unwrap(),
        [10942, 1470, 1470]
    );
}

#[test]
fn manifest_and_images_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let written = synth::write_synthetic_dataset(dir.path(), 8, 4, 11, 32).unwrap();
    let m = load_manifest(&dir.path().join("manifest.tsv"), &vocab(4)).unwrap();
    assert_eq!(m.labels(), written.labels());
    let img = load_poster_image(&m.image_path(0), 16).unwrap();
    assert_eq!(img.shape(), &[16, 16, 3]);
    assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let same = load_poster_image(&m.image_path(0), 32).unwrap();
    assert_eq!(same.shape(), &[32, 32, 3]);
    let missing = load_poster_image(Path::new("/nonexistent/x.ppm"), 4);
    assert!(matches!(missing, Err(Error::Io { .. })));
    assert!(parse_manifest("a\tm\t5\n", &vocab(4), Path::new("")).is_err());
}
