//! Patch tiling plus the shared convolutional extractor that embeds each patch.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Activation, Graph, Tensor, Var};

/// Geometry of the patch front end.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchConfig {
    /// Side of the resized square poster.
    pub image_side: usize,
    /// Side of each square patch.
    pub patch_side: usize,
    pub channels: usize,
    /// Embedding width D.
    pub embed_dim: usize,
    /// Output channels of each extractor block; the last one is the feature length F.
    pub extractor_channels: Vec<usize>,
    pub extractor_activation: Activation,
}

impl PatchConfig {
    /// Desk-scale defaults: 64 px posters, 16 px patches, D = 32, F = 32.
    pub fn desk() -> Self {
        PatchConfig {
            image_side: 64,
            patch_side: 16,
            channels: 3,
            embed_dim: 32,
            extractor_channels: vec![8, 32],
            extractor_activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(Error::Invalid(format!(
                "patch side {} must divide image side {}",
                self.patch_side, self.image_side
            )));
        }
        if self.embed_dim < 2 || self.channels == 0 || self.extractor_channels.iter().any(|&c| c == 0) {
            return Err(Error::Invalid("embed_dim >= 2 and positive channel counts required".into()));
        }
        let blocks = self.extractor_channels.len() as u32;
        if self.patch_side % 2usize.pow(blocks) != 0 {
            return Err(Error::Invalid(format!(
                "patch side {} not divisible by 2^{blocks} for {blocks} pooling blocks",
                self.patch_side
            )));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// n_p, the number of patches per poster.
    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// F, the length of one patch feature vector.
    pub fn feature_dim(&self) -> usize {
        self.extractor_channels.last().copied().unwrap_or(self.channels)
    }
}

fn check_image(img: &Tensor, cfg: &PatchConfig) -> Result<()> {
    let want = [cfg.image_side, cfg.image_side, cfg.channels];
    if img.shape() != want {
        return Err(shape_err!("image shape {:?} does not match {want:?}", img.shape()));
    }
    Ok(())
}

/// Non-overlapping tiles of an `[w_z, w_z, c]` image in row-major patch order.
pub fn split_patches(img: &Tensor, cfg: &PatchConfig) -> Result<Vec<Tensor>> {
    check_image(img, cfg)?;
    let (side, p, c) = (cfg.image_side, cfg.patch_side, cfg.channels);
    let per = cfg.patches_per_side();
    let src = img.data();
    let mut out = Vec::with_capacity(per * per);
    for py in 0..per {
        for px in 0..per {
            let mut data = Vec::with_capacity(p * p * c);
            for y in 0..p {
                let start = ((py * p + y) * side + px * p) * c;
                data.extend_from_slice(&src[start..start + p * c]);
            }
            out.push(Tensor::new(vec![p, p, c], data)?);
        }
    }
    Ok(out)
}

/// Inverse of [`split_patches`].
pub fn reassemble_patches(patches: &[Tensor], cfg: &PatchConfig) -> Result<Tensor> {
    let (side, p, c) = (cfg.image_side, cfg.patch_side, cfg.channels);
    let per = cfg.patches_per_side();
    if patches.len() != per * per || patches.iter().any(|t| t.shape() != [p, p, c]) {
        return Err(shape_err!("expected {} patches of [{p}, {p}, {c}]", per * per));
    }
    let mut data = vec![0.0; side * side * c];
    for (i, patch) in patches.iter().enumerate() {
        let (py, px) = (i / per, i % per);
        for y in 0..p {
            let start = ((py * p + y) * side + px * p) * c;
            data[start..start + p * c].copy_from_slice(&patch.data()[y * p * c..(y + 1) * p * c]);
        }
    }
    Tensor::new(vec![side, side, c], data)
}

/// Stacks the patches of every image into one `[B * n_p, w_p, w_p, c]` tensor.
pub fn patch_batch(images: &[Tensor], cfg: &PatchConfig) -> Result<Tensor> {
    if images.is_empty() {
        return Err(shape_err!("empty image batch"));
    }
    let p = cfg.patch_side;
    let mut data = Vec::with_capacity(images.len() * cfg.image_side * cfg.image_side * cfg.channels);
    for img in images {
        for patch in split_patches(img, cfg)? {
            data.extend(patch.into_data());
        }
    }
    Tensor::new(vec![images.len() * cfg.num_patches(), p, p, cfg.channels], data)
}

/// Parameters of one extractor block: a 3x3 kernel `[3, 3, Cin, Cout]` and bias `[Cout]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlockVars {
    pub kernel: Var,
    pub bias: Var,
}

/// Shared feature extractor: per block conv 3x3, activation, 2x2 average pooling,
/// then global average pooling. `patches: [N, w_p, w_p, c] -> [N, F]`.
pub fn extract_features(g: &mut Graph, patches: Var, blocks: &[ConvBlockVars], act: Activation) -> Result<Var> {
    let mut x = patches;
    for b in blocks {
        x = g.conv2d_same(x, b.kernel, b.bias)?;
        x = g.activation(x, act);
        x = g.avg_pool2(x)?;
    }
    g.global_avg_pool(x)
}

/// Embedding parameters: projection `E: [F, D]`, positional table `[n_p + 1, D]`, class token `[D]`.
#[derive(Clone, Copy, Debug)]
pub struct EmbedVars {
    pub projection: Var,
    pub positions: Var,
    pub class_token: Var,
}

/// Builds z_0 from `features: [B, n_p, F]` (or `[n_p, F]`):
/// row 0 is `class + pos[0]`, row i is `features[i-1] E + pos[i]`.
pub fn embed_sequence(g: &mut Graph, features: Var, p: &EmbedVars) -> Result<Var> {
    let unbatched = g.shape(features).len() == 2;
    let features = if unbatched {
        let s = g.shape(features).to_vec();
        g.reshape(features, &[1, s[0], s[1]])?
    } else {
        features
    };
    let s = g.shape(features).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("embed_sequence expects [B, n_p, F], got {s:?}"));
    }
    let (b, n_p) = (s[0], s[1]);
    let d = g.shape(p.class_token)[0];
    if g.shape(p.positions) != [n_p + 1, d] {
        return Err(shape_err!(
            "positional table {:?} does not match {} tokens of width {d}",
            g.shape(p.positions),
            n_p + 1
        ));
    }
    let projected = g.matmul(features, p.projection)?;
    let cls = g.reshape(p.class_token, &[1, d])?;
    let cls = g.repeat(cls, b)?;
    let seq = g.concat(&[cls, projected], 1)?;
    let z0 = g.add_broadcast(seq, p.positions)?;
    if unbatched {
        g.reshape(z0, &[n_p + 1, d])
    } else {
        Ok(z0)
    }
}
