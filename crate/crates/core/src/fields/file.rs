//! Field-set text files.
//!
//! ```toml
//! format = "flowlab-fields"
//! version = 1
//! dim = 2
//! d = 1
//! divergence_free = true
//!
//! [[field]]
//! index = 0
//!
//! [[field]]
//! index = 1
//! [[field.term]]
//! mode = [0, 1]
//! cos = [1.0000000000000000e0, 0.0000000000000000e0]
//! sin = [0.0000000000000000e0, 0.0000000000000000e0]
//! ```
//!
//! Reals are written with 17 significant digits so files round-trip exactly.

use serde::Deserialize;
use std::fmt::Write as _;
use std::path::Path;

use super::VectorFieldSet;
use crate::error::{FlowError, Result};
use crate::trig::{TrigMap, TrigTerm};

pub const FORMAT_TAG: &str = "flowlab-fields";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRepr {
    format: String,
    version: u32,
    dim: usize,
    d: usize,
    divergence_free: bool,
    #[serde(default)]
    field: Vec<FieldRepr>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldRepr {
    index: usize,
    #[serde(default)]
    term: Vec<TrigTerm>,
}

fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn reals(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|&x| real(x)).collect();
    format!("[{}]", parts.join(", "))
}

/// Renders a field set in the text schema above.
pub fn field_set_to_string(set: &VectorFieldSet) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "format = \"{FORMAT_TAG}\"");
    let _ = writeln!(s, "version = {FORMAT_VERSION}");
    let _ = writeln!(s, "dim = {}", set.dim());
    let _ = writeln!(s, "d = {}", set.d());
    let _ = writeln!(s, "divergence_free = {}", set.divergence_free());
    for (k, f) in set.fields().iter().enumerate() {
        let _ = writeln!(s, "\n[[field]]\nindex = {k}");
        for t in f.terms() {
            let modes: Vec<String> = t.mode.iter().map(|m| m.to_string()).collect();
            let _ = writeln!(s, "[[field.term]]");
            let _ = writeln!(s, "mode = [{}]", modes.join(", "));
            let _ = writeln!(s, "cos = {}", reals(&t.cos_part));
            let _ = writeln!(s, "sin = {}", reals(&t.sin_part));
        }
    }
    s
}

pub fn field_set_from_str(text: &str) -> Result<VectorFieldSet> {
    let repr: FileRepr = toml::from_str(text).map_err(|e| FlowError::Parse(e.to_string()))?;
    if repr.format != FORMAT_TAG {
        return Err(FlowError::Parse(format!("unexpected format tag {:?}", repr.format)));
    }
    if repr.version != FORMAT_VERSION {
        return Err(FlowError::Parse(format!("unsupported version {}", repr.version)));
    }
    let mut maps = vec![None; repr.d + 1];
    for f in repr.field {
        let slot = maps.get_mut(f.index).ok_or(FlowError::IndexOutOfRange {
            index: f.index,
            limit: repr.d + 1,
        })?;
        if slot.is_some() {
            return Err(FlowError::Parse(format!("field {} listed twice", f.index)));
        }
        *slot = Some(TrigMap::new(repr.dim, repr.dim, f.term)?);
    }
    let maps = maps
        .into_iter()
        .map(|m| m.unwrap_or_else(|| TrigMap::zero(repr.dim, repr.dim)))
        .collect();
    VectorFieldSet::from_maps(repr.dim, maps, repr.divergence_free)
}

pub fn write_field_set(set: &VectorFieldSet, path: &Path) -> Result<()> {
    std::fs::write(path, field_set_to_string(set))?;
    Ok(())
}

pub fn read_field_set(path: &Path) -> Result<VectorFieldSet> {
    field_set_from_str(&std::fs::read_to_string(path)?)
}
