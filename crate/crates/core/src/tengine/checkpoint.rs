//! `VXM1` checkpoints: an ASCII header carrying the layer manifest and the
//! parameter table, followed by each parameter as a little-endian `u64`
//! length and that many little-endian `f64` values, in manifest order.

use std::fmt::Write as _;

use crate::{Error, Result};

use super::{LayerSpec, Tensor};

pub const MAGIC: &str = "VXM1";

fn header(manifest: &[LayerSpec]) -> String {
    let mut h = String::new();
    let _ = writeln!(h, "{MAGIC}");
    let _ = writeln!(h, "layers {}", manifest.len());
    for layer in manifest {
        let _ = writeln!(h, "{layer}");
    }
    let shapes: Vec<_> = manifest.iter().flat_map(LayerSpec::param_shapes).collect();
    let _ = writeln!(h, "params {}", shapes.len());
    for (name, shape) in &shapes {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        let _ = writeln!(h, "param {name} {}", dims.join("x"));
    }
    h.push_str("end_header\n");
    h
}

pub fn write_vxm1(manifest: &[LayerSpec], params: &[Tensor]) -> Result<Vec<u8>> {
    let shapes: Vec<_> = manifest.iter().flat_map(LayerSpec::param_shapes).collect();
    if shapes.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest declares {} parameter tensors, got {}",
            shapes.len(),
            params.len()
        )));
    }
    for ((name, shape), p) in shapes.iter().zip(params) {
        if p.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name}: manifest shape {shape:?}, tensor shape {:?}",
                p.shape()
            )));
        }
    }
    let mut out = header(manifest).into_bytes();
    for p in params {
        out.extend_from_slice(&(p.numel() as u64).to_le_bytes());
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads a checkpoint, rejecting it unless its header matches the manifest
/// the caller expects line for line.
pub fn read_vxm1(bytes: &[u8], manifest: &[LayerSpec]) -> Result<Vec<Tensor>> {
    let expected = header(manifest);
    let end = bytes
        .windows(b"end_header\n".len())
        .position(|w| w == b"end_header\n")
        .map(|p| p + b"end_header\n".len())
        .ok_or_else(|| Error::Checkpoint("missing end_header".into()))?;
    let found = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Checkpoint("header is not ASCII".into()))?;
    if !found.starts_with(MAGIC) {
        return Err(Error::Checkpoint("not a VXM1 file".into()));
    }
    if found != expected {
        let mismatch = expected
            .lines()
            .zip(found.lines())
            .enumerate()
            .find(|(_, (e, f))| e != f);
        return Err(Error::Checkpoint(match mismatch {
            Some((i, (e, f))) => format!(
                "manifest mismatch at header line {}: expected {e:?}, found {f:?}",
                i + 1
            ),
            None => "manifest mismatch: header length differs".into(),
        }));
    }

    let mut rest = &bytes[end..];
    let mut take = |n: usize| -> Result<&[u8]> {
        if rest.len() < n {
            return Err(Error::Checkpoint("truncated parameter data".into()));
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    let mut params = Vec::new();
    for (name, shape) in manifest.iter().flat_map(LayerSpec::param_shapes) {
        let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let numel: usize = shape.iter().product();
        if len != numel {
            return Err(Error::Checkpoint(format!(
                "{name}: stored length {len}, manifest expects {numel}"
            )));
        }
        let raw = take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Tensor::from_vec(shape, data)?);
    }
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(params)
}
