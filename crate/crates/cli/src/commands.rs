use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rdt_core::data::{
    compute_cooccurrence, load_manifest, load_poster_image_with, split_dataset, DecodeHook, GenreVocabulary,
    MultiHotLabel, PosterManifest, PosterRecord,
};
use rdt_core::ensemble::{ensemble_matrix, grid_search_weights, EnsembleWeights, ScoreTable};
use rdt_core::metrics::{evaluate as evaluate_metrics, partition_by_label_count, write_heatmap, MetricsReport};
use rdt_core::model::{load_checkpoint, save_checkpoint, PosterModel};
use rdt_core::refine::{build_conditional_tables, refine_prediction, ConditionalTables};
use rdt_core::tensor::Tensor;
use rdt_core::train::{top3_indices, train_model_with, Split};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{check_paths, Outputs};
use crate::Mode;

const TABLE_FILES: [&str; 4] = ["p2.csv", "p2_norm.csv", "p3.csv", "p3_norm.csv"];

fn decode_hook() -> Option<Box<DecodeHook>> {
    #[cfg(feature = "codecs")]
    {
        Some(rdt_core::data::codec_decoder())
    }
    #[cfg(not(feature = "codecs"))]
    {
        None
    }
}

fn read_manifest(path: &Path, vocab: &GenreVocabulary) -> CliResult<PosterManifest> {
    let abs = std::fs::canonicalize(path).map_err(|e| CliError::io(path, e))?;
    Ok(load_manifest(&abs, vocab)?)
}

fn load_images(m: &PosterManifest, side: usize) -> CliResult<Vec<Tensor>> {
    let hook = decode_hook();
    (0..m.len())
        .map(|i| Ok(load_poster_image_with(&m.image_path(i), side, hook.as_deref())?))
        .collect()
}

/// Manifest positions of the poster paths listed in a subset file (`#` comments allowed).
fn read_subset(path: &Path, m: &PosterManifest) -> CliResult<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let index: HashMap<&str, usize> = m.records.iter().enumerate().map(|(i, r)| (r.path.as_str(), i)).collect();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let &i = index
            .get(line)
            .ok_or_else(|| CliError::Data(format!("subset line {}: '{line}' is not in the manifest", n + 1)))?;
        if !seen.insert(i) {
            return Err(CliError::Data(format!("subset line {}: '{line}' listed twice", n + 1)));
        }
        out.push(i);
    }
    if out.is_empty() {
        return Err(CliError::Data("subset file lists no posters".into()));
    }
    Ok(out)
}

fn prediction_line(path: &str, genres: &[usize]) -> String {
    let ids: Vec<String> = genres.iter().map(|g| (g + 1).to_string()).collect();
    format!("{path}\t{}\n", ids.join(";"))
}

/// Predictions file: `path<TAB>id;id;id`, genres in decreasing confidence.
fn read_predictions(path: &Path, vocab: &GenreVocabulary) -> CliResult<BTreeMap<String, Vec<usize>>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| CliError::Core(rdt_core::Error::Parse { line: n + 1, msg });
        let (p, ids) = line.split_once('\t').ok_or_else(|| bad("expected path<TAB>ids".into()))?;
        let genres = ids
            .split(';')
            .map(|t| vocab.parse_class_id(t).ok_or_else(|| bad(format!("unknown genre id '{t}'"))))
            .collect::<CliResult<Vec<usize>>>()?;
        if genres.is_empty() || genres.iter().collect::<HashSet<_>>().len() != genres.len() {
            return Err(bad("empty or repeated genre ids".into()));
        }
        if out.insert(p.to_string(), genres).is_some() {
            return Err(bad(format!("duplicate prediction for '{p}'")));
        }
    }
    Ok(out)
}

fn read_scores(path: &Path) -> CliResult<ScoreTable> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(ScoreTable::read_csv(std::io::BufReader::new(f))?)
}

fn score_csv(t: &ScoreTable) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    t.write_csv(&mut buf)?;
    Ok(buf)
}

/// Rows of `t` reordered to follow the manifest.
fn align_scores(t: &ScoreTable, m: &PosterManifest) -> CliResult<Vec<Vec<f64>>> {
    let rows: HashMap<&str, &Vec<f64>> = t.ids.iter().map(String::as_str).zip(&t.scores).collect();
    m.records
        .iter()
        .map(|r| {
            rows.get(r.path.as_str())
                .map(|s| s.to_vec())
                .ok_or_else(|| CliError::Data(format!("no scores for poster '{}'", r.path)))
        })
        .collect()
}

pub fn ingest(cfg: &RunConfig, manifest: &Path, out_dir: &Path) -> CliResult<()> {
    let names = ["train.tsv", "val.tsv", "test.tsv"];
    let outs: Vec<PathBuf> = names.iter().map(|n| out_dir.join(n)).collect();
    check_paths(&[manifest], &outs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let vocab = cfg.vocabulary()?;
    let m = read_manifest(manifest, &vocab)?;
    let split = split_dataset(&m, cfg.split_sizes()?, cfg.seed()?)?;
    let mut outputs = Outputs::new();
    for (set, out) in split.sets().iter().zip(&outs) {
        let records: Vec<PosterRecord> = set
            .iter()
            .map(|&i| PosterRecord { path: m.image_path(i).display().to_string(), ..m.records[i].clone() })
            .collect();
        let sub = PosterManifest { records, base_dir: PathBuf::new() };
        outputs.write(out, sub.to_tsv().as_bytes())?;
    }
    outputs.commit();
    let [a, b, c] = split.sets().map(<[usize]>::len);
    println!("records={} train={a} val={b} test={c} seed={}", m.len(), split.seed);
    Ok(())
}

pub fn cooccur(
    cfg: &RunConfig,
    manifest: &Path,
    subset_file: Option<&Path>,
    out: &Path,
    tables_dir: Option<&Path>,
) -> CliResult<()> {
    let mut inputs = vec![manifest];
    inputs.extend(subset_file);
    check_paths(&inputs, &[out])?;
    let vocab = cfg.vocabulary()?;
    let m = read_manifest(manifest, &vocab)?;
    let subset = match subset_file {
        Some(p) => read_subset(p, &m)?,
        None => (0..m.len()).collect(),
    };
    let stats = compute_cooccurrence(&m, &subset)?;
    let mut buf = Vec::new();
    stats.write_csv(&mut buf, &vocab)?;
    let mut outputs = Outputs::new();
    outputs.write(out, &buf)?;
    if let Some(dir) = tables_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        for f in TABLE_FILES {
            outputs.claim(&dir.join(f))?;
        }
        build_conditional_tables(&stats).save(dir, vocab.names())?;
    }
    outputs.commit();
    println!("posters={} genres={}", stats.subset_size(), stats.num_genres());
    Ok(())
}

pub fn train(cfg: &RunConfig, train: &Path, val: &Path, out: &Path, history: Option<&Path>) -> CliResult<()> {
    let mut outs = vec![out];
    outs.extend(history);
    check_paths(&[train, val], &outs)?;
    let vocab = cfg.vocabulary()?;
    let model_cfg = cfg.model_config(vocab.len())?;
    let train_cfg = cfg.train_config()?;
    let (tm, vm) = (read_manifest(train, &vocab)?, read_manifest(val, &vocab)?);
    let side = model_cfg.patch.image_side;
    let (ti, vi) = (load_images(&tm, side)?, load_images(&vm, side)?);
    let (tl, vl) = (tm.labels(), vm.labels());
    let mut model = PosterModel::new(model_cfg, vocab, train_cfg.seed)?;
    let report = train_model_with(&mut model, Split::new(&ti, &tl)?, Split::new(&vi, &vl)?, &train_cfg, |r| {
        eprintln!("epoch {} train_loss={:.6} val_loss={:.6}", r.epoch, r.train_loss, r.val_loss)
    })?;
    let mut outputs = Outputs::new();
    outputs.claim(out)?;
    save_checkpoint(&model, out)?;
    if let Some(h) = history {
        let mut buf = Vec::new();
        report.write_history_csv(&mut buf).map_err(|e| CliError::io(h, e))?;
        outputs.write(h, &buf)?;
    }
    outputs.commit();
    println!(
        "arch={} epochs={} best_epoch={} best_val_loss={:.6}",
        model.config.arch,
        report.history.len(),
        report.best_epoch,
        report.best_val_loss
    );
    Ok(())
}

pub struct PredictArgs<'a> {
    pub manifest: &'a Path,
    pub checkpoints: &'a [PathBuf],
    pub weights: Option<&'a Path>,
    pub mode: Mode,
    pub tables: Option<&'a Path>,
    pub out: &'a Path,
    pub scores_out: Option<&'a Path>,
    pub heatmap: Option<&'a Path>,
}

fn read_weights(path: &Path) -> CliResult<EnsembleWeights> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(EnsembleWeights::parse(&text)?)
}

fn read_tables(dir: &Path, num_genres: usize) -> CliResult<ConditionalTables> {
    let t = ConditionalTables::load(dir)?;
    if t.num_genres() != num_genres {
        return Err(CliError::Data(format!("tables cover {} genres, scores have {num_genres}", t.num_genres())));
    }
    Ok(t)
}

pub fn predict(cfg: &RunConfig, a: PredictArgs<'_>) -> CliResult<()> {
    match (a.checkpoints.len(), a.weights.is_some()) {
        (1, false) | (3, true) => {}
        (1, true) => return Err(CliError::Usage("--weights needs three checkpoints".into())),
        (3, false) => return Err(CliError::Usage("three checkpoints need --weights".into())),
        (n, _) => return Err(CliError::Usage(format!("expected 1 or 3 checkpoints, got {n}"))),
    }
    if (a.mode == Mode::Refined) != a.tables.is_some() {
        return Err(CliError::Usage("--tables is required for, and only used by, --mode refined".into()));
    }
    let mut inputs: Vec<&Path> = vec![a.manifest];
    inputs.extend(a.checkpoints.iter().map(PathBuf::as_path));
    inputs.extend(a.weights);
    inputs.extend(a.tables);
    let mut outs = vec![a.out];
    outs.extend(a.scores_out);
    outs.extend(a.heatmap);
    check_paths(&inputs, &outs)?;

    let models = a.checkpoints.iter().map(|p| load_checkpoint(p)).collect::<rdt_core::Result<Vec<_>>>()?;
    let vocab = models[0].vocab.clone();
    if models.iter().any(|m| m.vocab != vocab) {
        return Err(CliError::Data("checkpoints disagree on the genre vocabulary".into()));
    }
    let m = read_manifest(a.manifest, &vocab)?;
    let batch = cfg.usize("batch_size")?.max(1);
    let mut images: HashMap<usize, Vec<Tensor>> = HashMap::new();
    let mut per_model = Vec::new();
    for model in &models {
        let side = model.config.patch.image_side;
        if !images.contains_key(&side) {
            images.insert(side, load_images(&m, side)?);
        }
        per_model.push(model.predict(&images[&side], batch)?);
    }
    let scores = match a.weights {
        Some(w) => ensemble_matrix([&per_model[0], &per_model[1], &per_model[2]], &read_weights(w)?)?,
        None => per_model.swap_remove(0),
    };
    let genres: Vec<Vec<usize>> = match a.tables {
        Some(dir) => {
            let tables = read_tables(dir, vocab.len())?;
            let rc = cfg.refine_config()?;
            scores.iter().map(|s| Ok(refine_prediction(s, &tables, &rc)?.genres)).collect::<CliResult<_>>()?
        }
        None => scores.iter().map(|s| Ok(top3_indices(s)?.to_vec())).collect::<CliResult<_>>()?,
    };

    let ids: Vec<String> = m.records.iter().map(|r| r.path.clone()).collect();
    let text: String = ids.iter().zip(&genres).map(|(p, g)| prediction_line(p, g)).collect();
    let mut outputs = Outputs::new();
    outputs.write(a.out, text.as_bytes())?;
    if let Some(p) = a.scores_out {
        let table = ScoreTable { genres: vocab.names().to_vec(), ids: ids.clone(), scores: scores.clone() };
        outputs.write(p, &score_csv(&table)?)?;
    }
    if let Some(p) = a.heatmap {
        let mut buf = Vec::new();
        write_heatmap(&mut buf, &ids, &m.labels(), &scores, vocab.names())?;
        outputs.write(p, &buf)?;
    }
    outputs.commit();
    println!("posters={} mode={:?} models={}", m.len(), a.mode, models.len());
    Ok(())
}

pub fn ensemble_search(
    cfg: &RunConfig,
    scores: &[PathBuf],
    manifest: &Path,
    out: &Path,
    apply: &[PathBuf],
    fused_out: Option<&Path>,
) -> CliResult<()> {
    let mut inputs: Vec<&Path> = scores.iter().map(PathBuf::as_path).collect();
    inputs.push(manifest);
    inputs.extend(apply.iter().map(PathBuf::as_path));
    let mut outs = vec![out];
    outs.extend(fused_out);
    check_paths(&inputs, &outs)?;
    let tables = scores.iter().map(|p| read_scores(p)).collect::<CliResult<Vec<_>>>()?;
    let genres = tables[0].genres.clone();
    if tables.iter().any(|t| t.genres != genres) {
        return Err(CliError::Data("score CSVs disagree on genre columns".into()));
    }
    let vocab = GenreVocabulary::new(&genres)?;
    let m = read_manifest(manifest, &vocab)?;
    let aligned = tables.iter().map(|t| align_scores(t, &m)).collect::<CliResult<Vec<_>>>()?;
    let metric = cfg.metric()?;
    let step = cfg.f64("grid_step")?;
    let res = grid_search_weights([&aligned[0], &aligned[1], &aligned[2]], &m.labels(), step, metric)?;

    let mut outputs = Outputs::new();
    outputs.write(out, res.weights.to_text().as_bytes())?;
    if let Some(fo) = fused_out {
        let test = apply.iter().map(|p| read_scores(p)).collect::<CliResult<Vec<_>>>()?;
        if test.iter().any(|t| t.genres != genres || t.ids != test[0].ids) {
            return Err(CliError::Data("--apply score CSVs must share genres and row order".into()));
        }
        let fused = ensemble_matrix([&test[0].scores, &test[1].scores, &test[2].scores], &res.weights)?;
        let table = ScoreTable { genres, ids: test[0].ids.clone(), scores: fused };
        outputs.write(fo, &score_csv(&table)?)?;
    }
    outputs.commit();
    let [a1, a2, a3] = res.weights.alpha();
    println!("alpha={a1},{a2},{a3} metric={metric} score={:.6} evaluated={}", res.score, res.evaluated);
    Ok(())
}

fn hit_ratio_of(preds: &[Vec<usize>], truth: &[MultiHotLabel]) -> f64 {
    let hits = preds.iter().zip(truth).filter(|(p, t)| t.get(p[0])).count();
    hits as f64 / truth.len() as f64
}

pub fn refine(cfg: &RunConfig, scores: &Path, tables: &Path, out: &Path, manifest: Option<&Path>) -> CliResult<()> {
    let mut inputs = vec![scores, tables];
    inputs.extend(manifest);
    check_paths(&inputs, &[out])?;
    let st = read_scores(scores)?;
    let t = read_tables(tables, st.genres.len())?;
    let rc = cfg.refine_config()?;
    let preds = st.scores.iter().map(|s| Ok(refine_prediction(s, &t, &rc)?.genres)).collect::<CliResult<Vec<_>>>()?;
    let text: String = st.ids.iter().zip(&preds).map(|(p, g)| prediction_line(p, g)).collect();
    let hit = match manifest {
        Some(mp) => {
            let m = read_manifest(mp, &GenreVocabulary::new(&st.genres)?)?;
            let by_path: HashMap<&str, &MultiHotLabel> = m.records.iter().map(|r| (r.path.as_str(), &r.label)).collect();
            let truth = st
                .ids
                .iter()
                .map(|id| by_path.get(id.as_str()).map(|l| (*l).clone()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| CliError::Data("scored poster missing from the manifest".into()))?;
            Some(hit_ratio_of(&preds, &truth))
        }
        None => None,
    };
    let mut outputs = Outputs::new();
    outputs.write(out, text.as_bytes())?;
    outputs.commit();
    let mut counts = [0usize; 3];
    for p in &preds {
        counts[p.len() - 1] += 1;
    }
    print!("posters={} one={} two={} three={}", preds.len(), counts[0], counts[1], counts[2]);
    match hit {
        Some(h) => println!(" hit_ratio={h:.6}"),
        None => println!(),
    }
    Ok(())
}

pub fn evaluate(
    cfg: &RunConfig,
    manifest: &Path,
    predictions: &Path,
    out: &Path,
    text_out: Option<&Path>,
    partition: bool,
    subset_file: Option<&Path>,
) -> CliResult<()> {
    let mut inputs = vec![manifest, predictions];
    inputs.extend(subset_file);
    let mut outs = vec![out];
    outs.extend(text_out);
    check_paths(&inputs, &outs)?;
    let vocab = cfg.vocabulary()?;
    let m = read_manifest(manifest, &vocab)?;
    let mut preds = read_predictions(predictions, &vocab)?;
    let ordered: Vec<Vec<usize>> = m
        .records
        .iter()
        .map(|r| preds.remove(&r.path).ok_or_else(|| CliError::Data(format!("no prediction for '{}'", r.path))))
        .collect::<CliResult<_>>()?;
    if let Some(extra) = preds.keys().next() {
        return Err(CliError::Data(format!("prediction for '{extra}' is not in the manifest")));
    }
    let d = vocab.len();
    let labels = ordered.iter().map(|g| MultiHotLabel::from_indices(d, g)).collect::<rdt_core::Result<Vec<_>>>()?;
    let truth = m.labels();
    let (base, tag) = match subset_file {
        Some(p) => (read_subset(p, &m)?, "subset"),
        None => ((0..m.len()).collect::<Vec<_>>(), "all"),
    };
    let pick = |idx: &[usize], v: &[MultiHotLabel]| idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let report = |idx: &[usize], tag: String| -> CliResult<MetricsReport> {
        Ok(evaluate_metrics(&pick(idx, &labels), &pick(idx, &truth))?.with_tag(tag))
    };
    let mut reports = vec![report(&base, tag.to_string())?];
    if partition {
        let base_truth = pick(&base, &truth);
        for (k, part) in partition_by_label_count(&base_truth).iter().enumerate() {
            if part.is_empty() {
                eprintln!("warning: no posters with {} ground-truth genres; TD<{}> skipped", k + 1, k + 1);
                continue;
            }
            let idx: Vec<usize> = part.iter().map(|&j| base[j]).collect();
            reports.push(report(&idx, format!("TD<{}>", k + 1))?);
        }
    }
    let hit = hit_ratio_of(&pick_vec(&base, &ordered), &pick(&base, &truth));

    let mut csv = Vec::new();
    let mut text = String::new();
    for (i, r) in reports.iter().enumerate() {
        let mut buf = Vec::new();
        r.write_csv(&mut buf, vocab.names()).map_err(|e| CliError::io(out, e))?;
        let body = String::from_utf8_lossy(&buf);
        let skip = if i == 0 { 0 } else { 1 };
        for line in body.lines().skip(skip) {
            csv.extend_from_slice(line.as_bytes());
            csv.push(b'\n');
        }
        if i > 0 {
            text.push('\n');
        }
        text.push_str(&r.to_text(vocab.names()));
    }
    text.push_str(&format!("\nhit_ratio={hit:.6}\n"));
    let mut outputs = Outputs::new();
    outputs.write(out, &csv)?;
    if let Some(t) = text_out {
        outputs.write(t, text.as_bytes())?;
    }
    outputs.commit();
    print!("{text}");
    Ok(())
}

fn pick_vec(idx: &[usize], v: &[Vec<usize>]) -> Vec<Vec<usize>> {
    idx.iter().map(|&i| v[i].clone()).collect()
}
