//! Self-describing array container used for checkpoints.
//!
//! Layout (all header lines are UTF-8, `\n` terminated):
//!
//! ```text
//! RDTC 1
//! meta <line count>
//! <free-form metadata lines>
//! arrays <array count>
//! <name> <shape> f64 <byte offset>      one line per array
//! data
//! <payload: little-endian f64 values, arrays back to back>
//! ```
//!
//! `<shape>` is the dimensions joined by `x` (e.g. `3x3x3x8`), or `scalar`.
//! Byte offsets are relative to the first payload byte.

use std::io::{BufRead, Write};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "RDTC 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: Vec<String>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "scalar" {
        return Ok(vec![]);
    }
    s.split('x')
        .map(|d| match d.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Format(format!("bad shape '{s}'"))),
        })
        .collect()
}

pub fn write_container<W: Write>(mut w: W, c: &Container) -> std::io::Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "meta {}", c.meta.len())?;
    for line in &c.meta {
        debug_assert!(!line.contains('\n'));
        writeln!(w, "{line}")?;
    }
    writeln!(w, "arrays {}", c.arrays.len())?;
    let mut offset = 0usize;
    for (name, t) in &c.arrays {
        debug_assert!(!name.is_empty() && !name.contains(char::is_whitespace));
        writeln!(w, "{name} {} f64 {offset}", format_shape(t.shape()))?;
        offset += t.numel() * 8;
    }
    writeln!(w, "data")?;
    for (_, t) in &c.arrays {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn header_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    let n = r
        .read_line(&mut line)
        .map_err(|e| Error::Format(format!("unreadable container header: {e}")))?;
    if n == 0 {
        return Err(Error::Format("truncated container header".into()));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

fn counted(line: &str, key: &str) -> Result<usize> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Format(format!("expected '{key} <count>', got '{line}'")))
}

pub fn read_container<R: BufRead>(mut r: R) -> Result<Container> {
    if header_line(&mut r)? != MAGIC {
        return Err(Error::Format("not an RDTC container".into()));
    }
    let n_meta = counted(&header_line(&mut r)?, "meta")?;
    let meta = (0..n_meta).map(|_| header_line(&mut r)).collect::<Result<Vec<_>>>()?;
    let n_arrays = counted(&header_line(&mut r)?, "arrays")?;
    let mut entries = Vec::with_capacity(n_arrays);
    let mut expected_offset = 0usize;
    for _ in 0..n_arrays {
        let line = header_line(&mut r)?;
        let fields: Vec<&str> = line.split(' ').collect();
        let [name, shape, dtype, offset] = fields[..] else {
            return Err(Error::Format(format!("bad array line '{line}'")));
        };
        if dtype != "f64" {
            return Err(Error::Format(format!("unsupported dtype '{dtype}'")));
        }
        let shape = parse_shape(shape)?;
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::Format(format!("bad offset in '{line}'")))?;
        if offset != expected_offset {
            return Err(Error::Format(format!("array '{name}' at offset {offset}, expected {expected_offset}")));
        }
        let numel: usize = shape.iter().product();
        expected_offset += numel * 8;
        entries.push((name.to_string(), shape, numel));
    }
    if header_line(&mut r)? != "data" {
        return Err(Error::Format("missing data marker".into()));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| Error::Format(format!("unreadable payload: {e}")))?;
    if payload.len() != expected_offset {
        return Err(Error::Format(format!(
            "payload has {} bytes, header declares {expected_offset}",
            payload.len()
        )));
    }
    let mut arrays = Vec::with_capacity(entries.len());
    let mut pos = 0;
    for (name, shape, numel) in entries {
        let data = payload[pos..pos + numel * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        pos += numel * 8;
        arrays.push((name, Tensor::new(shape, data)?));
    }
    Ok(Container { meta, arrays })
}
