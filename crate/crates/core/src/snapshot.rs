//! Model snapshot file format.
//!
//! A snapshot is a UTF-8 header followed by raw little-endian `f64` blocks:
//!
//! ```text
//! UNPRUNE-SNAPSHOT v1
//! seed 42
//! sparsity 0.600000
//! layers 2
//! layer 2 64 relu
//! layer 64 2 none
//! blocks weights bias mask bias_mask init
//! end
//! ```
//!
//! After the `end` line, each layer in order contributes five blocks in the
//! listed order: weights (`out·in`, row-major), bias (`out`), mask
//! (`out·in`), bias mask (`out`) and initialization snapshot (`out·in`).
//! Masks are stored as `0.0`/`1.0`, so two snapshots can be diffed with any
//! tool that reads little-endian doubles.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Activation, LayerSpec, MaskedModel};
use crate::prune::sparsity_of;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC_LINE: &str = "UNPRUNE-SNAPSHOT v1";
const BLOCKS_LINE: &str = "blocks weights bias mask bias_mask init";

/// Serializes `model` to bytes.
pub fn encode<T: Scalar>(model: &MaskedModel<T>) -> Vec<u8> {
    let mut header = format!(
        "{MAGIC_LINE}\nseed {}\nsparsity {:.6}\nlayers {}\n",
        model.seed,
        sparsity_of(model).sparsity,
        model.num_layers()
    );
    for s in &model.layers {
        let act = match s.activation {
            Activation::Relu => "relu",
            Activation::None => "none",
        };
        header.push_str(&format!("layer {} {} {act}\n", s.in_dim, s.out_dim));
    }
    header.push_str(BLOCKS_LINE);
    header.push_str("\nend\n");
    let mut bytes = header.into_bytes();
    for l in 0..model.num_layers() {
        for t in [
            &model.weights[l],
            &model.biases[l],
            &model.masks[l],
            &model.bias_masks[l],
            &model.init_snapshot[l],
        ] {
            for v in t.data() {
                bytes.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    bytes
}

pub fn write_snapshot<T: Scalar>(model: &MaskedModel<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn read_snapshot<T: Scalar>(path: &Path) -> Result<MaskedModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Parses bytes produced by [`encode`]; `path` is used only in errors.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<MaskedModel<T>> {
    let err = |offset: usize, msg: String| Error::Format { path: path.to_path_buf(), offset: offset as u64, msg };
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let rel = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err(start, "unterminated header line".into()))?;
        *pos = start + rel + 1;
        let line = std::str::from_utf8(&bytes[start..start + rel]).map_err(|_| err(start, "header is not UTF-8".into()))?;
        Ok((start, line.to_string()))
    };
    let field = |line: &str, key: &str, at: usize| -> Result<Vec<String>> {
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(err(at, format!("expected '{key}' line, found '{line}'")));
        }
        Ok(parts.map(str::to_string).collect())
    };
    let num = |s: &str, at: usize| -> Result<u64> { s.parse().map_err(|_| err(at, format!("bad number '{s}'"))) };

    let (at, line) = next_line(&mut pos)?;
    if line != MAGIC_LINE {
        return Err(err(at, format!("bad magic line '{line}'")));
    }
    let (at, line) = next_line(&mut pos)?;
    let seed = num(field(&line, "seed", at)?.first().map(String::as_str).unwrap_or(""), at)?;
    let (at, line) = next_line(&mut pos)?;
    field(&line, "sparsity", at)?;
    let (at, line) = next_line(&mut pos)?;
    let n_layers = num(field(&line, "layers", at)?.first().map(String::as_str).unwrap_or(""), at)? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let (at, line) = next_line(&mut pos)?;
        let f = field(&line, "layer", at)?;
        if f.len() != 3 {
            return Err(err(at, format!("layer line needs 3 fields: '{line}'")));
        }
        let activation = match f[2].as_str() {
            "relu" => Activation::Relu,
            "none" => Activation::None,
            other => return Err(err(at, format!("unknown activation '{other}'"))),
        };
        layers.push(LayerSpec { in_dim: num(&f[0], at)? as usize, out_dim: num(&f[1], at)? as usize, activation });
    }
    let (at, line) = next_line(&mut pos)?;
    if line != BLOCKS_LINE {
        return Err(err(at, format!("unexpected block list '{line}'")));
    }
    let (at, line) = next_line(&mut pos)?;
    if line != "end" {
        return Err(err(at, format!("expected 'end', found '{line}'")));
    }

    let read_block = |pos: &mut usize, shape: Vec<usize>| -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let end = *pos + 8 * n;
        let raw = bytes.get(*pos..end).ok_or_else(|| err(*pos, format!("truncated block of {n} values")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| err(*pos, e.to_string()))?;
        *pos = end;
        Ok(t)
    };
    let mut model = MaskedModel {
        layers: layers.clone(),
        weights: Vec::new(),
        biases: Vec::new(),
        masks: Vec::new(),
        bias_masks: Vec::new(),
        init_snapshot: Vec::new(),
        seed,
    };
    for s in &layers {
        model.weights.push(read_block(&mut pos, vec![s.out_dim, s.in_dim])?);
        model.biases.push(read_block(&mut pos, vec![s.out_dim])?);
        model.masks.push(read_block(&mut pos, vec![s.out_dim, s.in_dim])?);
        model.bias_masks.push(read_block(&mut pos, vec![s.out_dim])?);
        model.init_snapshot.push(read_block(&mut pos, vec![s.out_dim, s.in_dim])?);
    }
    if pos != bytes.len() {
        return Err(err(pos, format!("{} trailing bytes", bytes.len() - pos)));
    }
    let binary = model
        .masks
        .iter()
        .chain(&model.bias_masks)
        .all(|m| m.data().iter().all(|&v| v == T::zero() || v == T::one()));
    if !binary {
        return Err(err(0, "mask entries must be 0 or 1".into()));
    }
    model.check_congruent().map_err(|e| err(0, e.to_string()))?;
    Ok(model)
}
