//! Loss, optimizer and early-stopped mini-batch training, plus top-3 selection.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::MultiHotLabel;
use crate::error::{shape_err, Error, Result};
use crate::model::PosterModel;
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

/// Asymmetric loss hyperparameters.
///
/// Per element, with `p_m = max(p - m, 0)`:
/// `-[y (1-p)^γ⁺ log p + (1-y) p_m^γ⁻ log(1 - p_m)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AslConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
}

impl Default for AslConfig {
    fn default() -> Self {
        AslConfig { gamma_pos: 0.0, gamma_neg: 1.0, margin: 0.2 }
    }
}

impl AslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return Err(Error::Invalid("ASL focusing exponents must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Invalid(format!("ASL margin {} outside [0, 1)", self.margin)));
        }
        Ok(())
    }
}

// x^γ and its derivative, with 0^0 = 1 and d/dx x^0 = 0.
fn pow_and_slope(x: f64, gamma: f64) -> (f64, f64) {
    if gamma == 0.0 {
        (1.0, 0.0)
    } else if gamma == 1.0 {
        (x, 1.0)
    } else {
        (x.powf(gamma), gamma * x.powf(gamma - 1.0))
    }
}

/// Loss of one element and its derivative with respect to the score `p`.
pub fn asl_element(p: f64, positive: bool, cfg: &AslConfig) -> Result<(f64, f64)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("confidence score {p} outside (0, 1)")));
    }
    if positive {
        let (w, dw) = pow_and_slope(1.0 - p, cfg.gamma_pos);
        let lp = p.ln();
        // d/dp of -(1-p)^γ log p
        Ok((-w * lp, dw * lp - w / p))
    } else {
        let pm = p - cfg.margin;
        if pm <= 0.0 {
            return Ok((0.0, 0.0));
        }
        let (w, dw) = pow_and_slope(pm, cfg.gamma_neg);
        let l1 = (1.0 - pm).ln();
        Ok((-w * l1, -dw * l1 + w / (1.0 - pm)))
    }
}

/// Mean ASL over every (sample, genre) element.
pub fn asl_loss(scores: &[Vec<f64>], labels: &[MultiHotLabel], cfg: &AslConfig) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(shape_err!("{} score rows for {} labels", scores.len(), labels.len()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (row, label) in scores.iter().zip(labels) {
        if row.len() != label.len() {
            return Err(shape_err!("score row of {} for label of {}", row.len(), label.len()));
        }
        for (j, &p) in row.iter().enumerate() {
            total += asl_element(p, label.get(j), cfg)?.0;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// ASL as a graph node over `scores: [B, δ]`.
pub fn asl_graph(g: &mut Graph, scores: Var, labels: &[MultiHotLabel], cfg: &AslConfig) -> Result<Var> {
    let s = g.shape(scores).to_vec();
    let delta = *s.last().unwrap_or(&0);
    if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|l| l.len() != delta) {
        return Err(shape_err!("scores {s:?} do not match {} labels", labels.len()));
    }
    g.mean_elementwise_loss(scores, |i, p| asl_element(p, labels[i / delta].get(i % delta), cfg))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `params` in place; `t` is the 1-based step.
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    debug_assert!(t >= 1);
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let gr = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gr;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gr * gr;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        params[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = (0..params.len()).map(|i| vec![0.0; params.value(i).numel()]).collect();
        Adam { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one step; `grads[i]` is `None` for parameters left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        self.t += 1;
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                adam_step(params.value_mut(i).data_mut(), g, &mut self.m[i], &mut self.v[i], self.t, &self.config);
            }
        }
    }
}

/// Patience-based early stopping on a minimized validation metric.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, wait: 0 }
    }

    /// Records the metric for `epoch`; returns `true` when training should stop.
    /// Only a strictly lower value counts as an improvement.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        self.wait >= self.patience
    }

    /// Whether the most recent observation was a new best.
    pub fn improved(&self) -> bool {
        self.wait == 0 && self.best_epoch > 0
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Stop as soon as an epoch's mean training loss falls below this value.
    pub target_loss: Option<f64>,
    pub asl: AslConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            patience: 10,
            max_epochs: 500,
            seed: 0,
            target_loss: None,
            asl: AslConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Invalid("batch_size, patience and max_epochs must be >= 1".into()));
        }
        self.asl.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainReport {
    pub fn write_history_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss")?;
        for r in &self.history {
            writeln!(w, "{},{:.10},{:.10}", r.epoch, r.train_loss, r.val_loss)?;
        }
        Ok(())
    }
}

/// Images with their labels.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub images: &'a [Tensor],
    pub labels: &'a [MultiHotLabel],
}

impl<'a> Split<'a> {
    pub fn new(images: &'a [Tensor], labels: &'a [MultiHotLabel]) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Invalid(format!(
                "split needs matching non-empty images and labels, got {} and {}",
                images.len(),
                labels.len()
            )));
        }
        Ok(Split { images, labels })
    }
}

/// One forward/backward pass on a batch; returns the loss and per-parameter gradients.
pub fn loss_and_grads(
    model: &PosterModel,
    images: &[Tensor],
    labels: &[MultiHotLabel],
    asl: &AslConfig,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut g = Graph::new();
    let f = model.forward(&mut g, images)?;
    let loss = asl_graph(&mut g, f.scores, labels, asl)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss became {value}")));
    }
    g.backward(loss)?;
    let grads = f
        .bound
        .vars()
        .iter()
        .map(|&v| g.requires_grad(v).then(|| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec)))
        .collect();
    Ok((value, grads))
}

/// Mean validation ASL of a model.
pub fn evaluate_loss(model: &PosterModel, split: Split<'_>, batch_size: usize, asl: &AslConfig) -> Result<f64> {
    let scores = model.predict(split.images, batch_size)?;
    asl_loss(&scores, split.labels, asl)
}

/// Shuffled mini-batch training with Adam and patience-based early stopping on
/// validation ASL. On return the model holds the best-validation parameters.
pub fn train_model(model: &mut PosterModel, train: Split<'_>, val: Split<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    train_model_with(model, train, val, cfg, |_| {})
}

/// [`train_model`] with a callback invoked after every epoch.
pub fn train_model_with(
    model: &mut PosterModel,
    train: Split<'_>,
    val: Split<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.adam);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.images.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<Tensor> = chunk.iter().map(|&i| train.images[i].clone()).collect();
            let labels: Vec<MultiHotLabel> = chunk.iter().map(|&i| train.labels[i].clone()).collect();
            let (loss, grads) = loss_and_grads(model, &images, &labels, &cfg.asl)?;
            total += loss * chunk.len() as f64;
            adam.step(&mut model.params, &grads);
        }
        let train_loss = total / order.len() as f64;
        let val_loss = evaluate_loss(model, val, cfg.batch_size, &cfg.asl)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss became {val_loss} at epoch {epoch}")));
        }
        let rec = EpochRecord { epoch, train_loss, val_loss };
        history.push(rec);
        on_epoch(&rec);
        let stop = stopper.observe(epoch, val_loss);
        if stopper.improved() {
            best_params = model.params.clone();
        }
        if stop || cfg.target_loss.is_some_and(|t| train_loss < t) {
            break;
        }
    }
    model.params = best_params;
    Ok(TrainReport { history, best_epoch: stopper.best_epoch(), best_val_loss: stopper.best() })
}

/// Indices of the three largest scores in descending order; ties go to the lowest index.
pub fn top3_indices(scores: &[f64]) -> Result<[usize; 3]> {
    if scores.len() < 3 {
        return Err(Error::Invalid(format!("top-3 needs at least 3 genres, got {}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok([idx[0], idx[1], idx[2]])
}

/// Multi-hot label with exactly the top-3 genres set.
pub fn top3_predict(scores: &[f64]) -> Result<MultiHotLabel> {
    let top = top3_indices(scores)?;
    MultiHotLabel::from_indices(scores.len(), &top)
}
