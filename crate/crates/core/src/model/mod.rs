//! The poster classifiers: R, RT and RDT.
//!
//! All three share the patch front end (extractor, projection E). RDT feeds
//! the embedded sequence through a densely connected encoder stack; RT uses a
//! plain sequential stack; R skips the transformer and averages the projected
//! patch features before the head.

mod checkpoint;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint};
use layers::{AttentionVars, Connectivity, EncoderVars, HeadVars, LayerNormVars, MlpVars};

use crate::data::GenreVocabulary;
use crate::error::{shape_err, Error, Result};
use crate::params::{gaussian, uniform_fan_in, Bound, ParamStore};
use crate::patch::{embed_sequence, extract_features, patch_batch, ConvBlockVars, EmbedVars, PatchConfig};
use crate::tensor::{Graph, Tensor, Var};

pub const EXTRACTOR_PREFIX: &str = "extractor.";
const KERNEL: usize = 3;
const TOKEN_NOISE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    R,
    RT,
    RDT,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::R, Architecture::RT, Architecture::RDT];
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::R => "R",
            Architecture::RT => "RT",
            Architecture::RDT => "RDT",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r" => Ok(Architecture::R),
            "rt" => Ok(Architecture::RT),
            "rdt" => Ok(Architecture::RDT),
            _ => Err(Error::Invalid(format!("unknown architecture '{s}' (expected R, RT or RDT)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub patch: PatchConfig,
    /// Encoder count L.
    pub layers: usize,
    /// Attention head count h.
    pub heads: usize,
    /// Output width δ.
    pub num_genres: usize,
    pub ln_eps: f64,
    /// Keep the extractor fixed during training.
    pub freeze_extractor: bool,
}

impl ModelConfig {
    /// Desk-scale RDT: 64 px posters, 16 px patches, D = 32, L = 2, h = 4.
    pub fn desk(num_genres: usize) -> Self {
        ModelConfig {
            arch: Architecture::RDT,
            patch: PatchConfig::desk(),
            layers: 2,
            heads: 4,
            num_genres,
            ln_eps: 1e-6,
            freeze_extractor: false,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.patch.embed_dim
    }

    /// Per-head width ⌊D/h⌋.
    pub fn head_dim(&self) -> usize {
        self.patch.embed_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.arch != Architecture::R {
            if self.layers == 0 || self.heads == 0 {
                return Err(Error::Invalid("layers and heads must be positive".into()));
            }
            if self.head_dim() == 0 {
                return Err(Error::Invalid(format!(
                    "{} heads leave no width in D = {}",
                    self.heads,
                    self.embed_dim()
                )));
            }
        }
        if self.num_genres == 0 {
            return Err(Error::Invalid("need at least one output genre".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Invalid("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Graph handles produced by one forward pass.
pub struct Forward {
    /// `[B, δ]` confidence scores.
    pub scores: Var,
    /// `[B, T, T]` attention weights, `h` per encoder in stack order.
    pub attention: Vec<Var>,
    pub bound: Bound,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosterModel {
    pub config: ModelConfig,
    pub vocab: GenreVocabulary,
    pub params: ParamStore,
}

impl PosterModel {
    /// Fresh model with seeded initialization.
    ///
    /// Weights are uniform in ±1/sqrt(fan_in), biases zero, layer norms identity,
    /// class token and positional table Gaussian with std 0.02. Dense transitions
    /// start as the selector of the most recent input block.
    pub fn new(config: ModelConfig, vocab: GenreVocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.num_genres {
            return Err(Error::Invalid(format!(
                "vocabulary has {} genres, model expects {}",
                vocab.len(),
                config.num_genres
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let pc = &config.patch;
        let d = pc.embed_dim;
        let mut cin = pc.channels;
        for (i, &cout) in pc.extractor_channels.iter().enumerate() {
            let fan_in = KERNEL * KERNEL * cin;
            ps.insert(format!("extractor.conv{i}.w"), uniform_fan_in(&[KERNEL, KERNEL, cin, cout], fan_in, &mut rng))?;
            ps.insert(format!("extractor.conv{i}.b"), Tensor::zeros(&[cout]))?;
            cin = cout;
        }
        let f = pc.feature_dim();
        ps.insert("embed.E", uniform_fan_in(&[f, d], f, &mut rng))?;
        if config.arch != Architecture::R {
            let t = pc.num_patches() + 1;
            ps.insert("embed.pos", gaussian(&[t, d], TOKEN_NOISE, &mut rng))?;
            ps.insert("embed.class", gaussian(&[d], TOKEN_NOISE, &mut rng))?;
            let dk = config.head_dim();
            for l in 0..config.layers {
                let pre = format!("enc{l}");
                if config.arch == Architecture::RDT {
                    let width = (l + 1) * d;
                    let mut sel = Tensor::zeros(&[width, d]);
                    for i in 0..d {
                        sel.data_mut()[(l * d + i) * d + i] = 1.0;
                    }
                    ps.insert(format!("{pre}.transition"), sel)?;
                }
                ps.insert(format!("{pre}.ln1.g"), Tensor::ones(&[d]))?;
                ps.insert(format!("{pre}.ln1.b"), Tensor::zeros(&[d]))?;
                for h in 0..config.heads {
                    for m in ["q", "k", "v"] {
                        ps.insert(format!("{pre}.attn.{m}{h}"), uniform_fan_in(&[d, dk], d, &mut rng))?;
                    }
                }
                let cat = config.heads * dk;
                ps.insert(format!("{pre}.attn.o"), uniform_fan_in(&[cat, d], cat, &mut rng))?;
                ps.insert(format!("{pre}.ln2.g"), Tensor::ones(&[d]))?;
                ps.insert(format!("{pre}.ln2.b"), Tensor::zeros(&[d]))?;
                ps.insert(format!("{pre}.mlp.w1"), uniform_fan_in(&[d, 2 * d], d, &mut rng))?;
                ps.insert(format!("{pre}.mlp.b1"), Tensor::zeros(&[2 * d]))?;
                ps.insert(format!("{pre}.mlp.w2"), uniform_fan_in(&[2 * d, d], 2 * d, &mut rng))?;
                ps.insert(format!("{pre}.mlp.b2"), Tensor::zeros(&[d]))?;
            }
            ps.insert("stack.ln.g", Tensor::ones(&[d]))?;
            ps.insert("stack.ln.b", Tensor::zeros(&[d]))?;
        }
        let hidden = (d / 2).max(1);
        ps.insert("head.w1", uniform_fan_in(&[d, hidden], d, &mut rng))?;
        ps.insert("head.b1", Tensor::zeros(&[hidden]))?;
        ps.insert("head.w2", uniform_fan_in(&[hidden, config.num_genres], hidden, &mut rng))?;
        ps.insert("head.b2", Tensor::zeros(&[config.num_genres]))?;
        Ok(PosterModel { config, vocab, params: ps })
    }

    pub fn num_genres(&self) -> usize {
        self.config.num_genres
    }

    /// Whether a parameter is held fixed during training.
    pub fn is_frozen(&self, name: &str) -> bool {
        self.config.freeze_extractor && name.starts_with(EXTRACTOR_PREFIX)
    }

    /// Binds parameters and runs `images` (each `[w_z, w_z, c]`) through the model.
    pub fn forward(&self, g: &mut Graph, images: &[Tensor]) -> Result<Forward> {
        let bound = self.params.bind(g, |n| self.is_frozen(n));
        let patches = g.constant(patch_batch(images, &self.config.patch)?);
        self.forward_patches(g, patches, images.len(), bound)
    }

    fn forward_patches(&self, g: &mut Graph, patches: Var, batch: usize, bound: Bound) -> Result<Forward> {
        let cfg = &self.config;
        let b = |n: &str| bound.var(n);
        let blocks: Vec<ConvBlockVars> = (0..cfg.patch.extractor_channels.len())
            .map(|i| ConvBlockVars { kernel: b(&format!("extractor.conv{i}.w")), bias: b(&format!("extractor.conv{i}.b")) })
            .collect();
        let feats = extract_features(g, patches, &blocks, cfg.patch.extractor_activation)?;
        let n_p = cfg.patch.num_patches();
        let feats = g.reshape(feats, &[batch, n_p, cfg.patch.feature_dim()])?;
        let mut attention = Vec::new();
        let y = if cfg.arch == Architecture::R {
            let projected = g.matmul(feats, b("embed.E"))?;
            g.mean_axis(projected, 1)?
        } else {
            let embed = EmbedVars { projection: b("embed.E"), positions: b("embed.pos"), class_token: b("embed.class") };
            let z0 = embed_sequence(g, feats, &embed)?;
            let encoders: Vec<EncoderVars> = (0..cfg.layers).map(|l| self.encoder_vars(&bound, l)).collect();
            let conn = match cfg.arch {
                Architecture::RDT => Connectivity::Dense((0..cfg.layers).map(|l| b(&format!("enc{l}.transition"))).collect()),
                _ => Connectivity::Sequential,
            };
            let ln = LayerNormVars { gain: b("stack.ln.g"), bias: b("stack.ln.b") };
            let (y, w) = layers::dense_encoder_stack(g, z0, &encoders, &conn, ln, cfg.ln_eps)?;
            attention = w;
            y
        };
        let head = HeadVars { w1: b("head.w1"), b1: b("head.b1"), w2: b("head.w2"), b2: b("head.b2") };
        let scores = layers::classify_head(g, y, &head)?;
        Ok(Forward { scores, attention, bound })
    }

    fn encoder_vars(&self, bound: &Bound, l: usize) -> EncoderVars {
        let v = |s: &str| bound.var(&format!("enc{l}.{s}"));
        let h = self.config.heads;
        EncoderVars {
            ln1: LayerNormVars { gain: v("ln1.g"), bias: v("ln1.b") },
            attention: AttentionVars {
                query: (0..h).map(|i| v(&format!("attn.q{i}"))).collect(),
                key: (0..h).map(|i| v(&format!("attn.k{i}"))).collect(),
                value: (0..h).map(|i| v(&format!("attn.v{i}"))).collect(),
                output: v("attn.o"),
            },
            ln2: LayerNormVars { gain: v("ln2.g"), bias: v("ln2.b") },
            mlp: MlpVars { w1: v("mlp.w1"), b1: v("mlp.b1"), w2: v("mlp.w2"), b2: v("mlp.b2") },
        }
    }

    /// Confidence scores for each image, computed in batches of `batch_size`.
    pub fn predict(&self, images: &[Tensor], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch_size.max(1)) {
            let mut g = Graph::new();
            let f = self.forward(&mut g, chunk)?;
            let scores = g.value(f.scores);
            if !scores.is_finite() {
                return Err(Error::Numeric("non-finite confidence scores".into()));
            }
            out.extend(scores.rows().map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Scores for a single image.
    pub fn predict_one(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut v = self.predict(std::slice::from_ref(image), 1)?;
        v.pop().ok_or_else(|| shape_err!("no output"))
    }
}
