use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::{Architecture, ModelConfig, PosterModel};
use crate::data::GenreVocabulary;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::patch::PatchConfig;
use crate::tensor::{read_container, write_container, Container};

fn config_meta(m: &PosterModel) -> Vec<String> {
    let c = &m.config;
    let p = &c.patch;
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    vec![
        format!("arch {}", c.arch),
        format!("image_side {}", p.image_side),
        format!("patch_side {}", p.patch_side),
        format!("channels {}", p.channels),
        format!("embed_dim {}", p.embed_dim),
        format!("extractor_channels {}", join(&p.extractor_channels)),
        format!("extractor_activation {}", p.extractor_activation),
        format!("layers {}", c.layers),
        format!("heads {}", c.heads),
        format!("num_genres {}", c.num_genres),
        format!("ln_eps {}", c.ln_eps),
        format!("freeze_extractor {}", c.freeze_extractor),
        format!("genres {}", m.vocab.names().join(",")),
    ]
}

/// Serializes the model (config block plus every parameter array).
pub fn save_checkpoint(m: &PosterModel, path: &Path) -> Result<()> {
    let c = Container {
        meta: config_meta(m),
        arrays: m.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_container(&mut w, &c).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn field<'a>(meta: &'a HashMap<&str, &str>, key: &str) -> Result<&'a str> {
    meta.get(key).copied().ok_or_else(|| Error::Format(format!("checkpoint lacks '{key}'")))
}

fn parsed<T: std::str::FromStr>(meta: &HashMap<&str, &str>, key: &str) -> Result<T> {
    let v = field(meta, key)?;
    v.parse().map_err(|_| Error::Format(format!("checkpoint field {key}: bad value '{v}'")))
}

pub fn load_checkpoint(path: &Path) -> Result<PosterModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let c = read_container(BufReader::new(file))?;
    let meta: HashMap<&str, &str> = c.meta.iter().filter_map(|l| l.split_once(' ')).collect();
    let channels: Vec<usize> = field(&meta, "extractor_channels")?
        .split(',')
        .map(|s| s.parse().map_err(|_| Error::Format(format!("bad extractor channel '{s}'"))))
        .collect::<Result<_>>()?;
    let config = ModelConfig {
        arch: field(&meta, "arch")?.parse::<Architecture>()?,
        patch: PatchConfig {
            image_side: parsed(&meta, "image_side")?,
            patch_side: parsed(&meta, "patch_side")?,
            channels: parsed(&meta, "channels")?,
            embed_dim: parsed(&meta, "embed_dim")?,
            extractor_channels: channels,
            extractor_activation: field(&meta, "extractor_activation")?.parse()?,
        },
        layers: parsed(&meta, "layers")?,
        heads: parsed(&meta, "heads")?,
        num_genres: parsed(&meta, "num_genres")?,
        ln_eps: parsed(&meta, "ln_eps")?,
        freeze_extractor: parsed(&meta, "freeze_extractor")?,
    };
    let names: Vec<&str> = field(&meta, "genres")?.split(',').collect();
    let vocab = GenreVocabulary::new(&names)?;
    // Build a reference model to validate names and shapes, then overwrite its values.
    let mut model = PosterModel::new(config, vocab, 0)?;
    if c.arrays.len() != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} arrays, architecture needs {}",
            c.arrays.len(),
            model.params.len()
        )));
    }
    let mut params = ParamStore::new();
    for (name, t) in c.arrays {
        let want = model
            .params
            .get(&name)
            .ok_or_else(|| Error::Format(format!("unexpected array '{name}'")))?;
        if want.shape() != t.shape() {
            return Err(Error::Format(format!(
                "array '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                want.shape()
            )));
        }
        params.insert(name, t)?;
    }
    model.params = params;
    Ok(model)
}
