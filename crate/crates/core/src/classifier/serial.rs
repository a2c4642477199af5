//! Model weight files.
//!
//! Layout: magic `CAPN`, format version (u16 LE), layer count (u8), then
//! per layer a descriptor (kind u8 — 0 convolution, 1 fully connected;
//! input/output channels u16 LE; kernel u8) and finally every parameter
//! as little-endian f32 in declaration order (weights then bias per
//! layer). Round-trips are bit-exact.

use std::path::Path;

use super::{Arch, CnnModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CAPN";
const VERSION: u16 = 1;
const KIND_CONV: u8 = 0;
const KIND_FC: u8 = 1;

struct LayerDesc {
    kind: u8,
    input: usize,
    output: usize,
    kernel: u8,
}

fn descriptors(arch: &Arch) -> Vec<LayerDesc> {
    let [c1, c2, c3] = arch.conv_channels;
    vec![
        LayerDesc { kind: KIND_CONV, input: arch.in_channels, output: c1, kernel: 3 },
        LayerDesc { kind: KIND_CONV, input: c1, output: c2, kernel: 3 },
        LayerDesc { kind: KIND_CONV, input: c2, output: c3, kernel: 3 },
        LayerDesc { kind: KIND_FC, input: arch.flat_dim(), output: arch.fc_hidden, kernel: 1 },
        LayerDesc { kind: KIND_FC, input: arch.fc_hidden, output: 2, kernel: 1 },
    ]
}

/// Serializes the model. The architecture must fit the descriptor's u16
/// channel fields, which every practical configuration does.
pub fn save_model(model: &CnnModel<f32>) -> Vec<u8> {
    let descs = descriptors(model.arch());
    let mut out = Vec::with_capacity(11 + 6 * descs.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(descs.len() as u8);
    for d in &descs {
        out.push(d.kind);
        let input = u16::try_from(d.input).expect("channel count fits u16");
        let output = u16::try_from(d.output).expect("channel count fits u16");
        out.extend_from_slice(&input.to_le_bytes());
        out.extend_from_slice(&output.to_le_bytes());
        out.push(d.kernel);
    }
    for block in model.param_blocks() {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Deserializes a model saved by [`save_model`]. Any structural damage —
/// wrong magic, unsupported version, inconsistent layer chain, missing or
/// trailing bytes — is a format error and yields no partial model.
pub fn load_model(bytes: &[u8]) -> Result<CnnModel<f32>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::format("not a model file (bad magic)"));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported model format version {version}"
        )));
    }
    let layer_count = cur.take(1)?[0];
    if layer_count != 5 {
        return Err(Error::format(format!(
            "expected 5 layers (3 conv + 2 fc), file declares {layer_count}"
        )));
    }
    let mut descs = Vec::with_capacity(5);
    for _ in 0..5 {
        let kind = cur.take(1)?[0];
        let input = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let output = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let kernel = cur.take(1)?[0];
        descs.push(LayerDesc { kind, input, output, kernel });
    }
    let arch = arch_from_descriptors(&descs)?;
    let mut model: CnnModel<f32> = CnnModel::init_with_arch(arch, 0)
        .map_err(|e| Error::format(format!("architecture rejected: {e}")))?;
    for block in model.param_blocks_mut() {
        for v in block.iter_mut() {
            *v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after parameters",
            bytes.len() - cur.pos
        )));
    }
    Ok(model)
}

pub fn save_model_file(model: &CnnModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, save_model(model))?;
    Ok(())
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<CnnModel<f32>> {
    load_model(&std::fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("model file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Rebuilds the architecture from the five layer descriptors, verifying
/// the chain is the conv×3 + fc×2 family this crate trains.
fn arch_from_descriptors(d: &[LayerDesc]) -> Result<Arch> {
    let kinds: Vec<u8> = d.iter().map(|l| l.kind).collect();
    if kinds != [KIND_CONV, KIND_CONV, KIND_CONV, KIND_FC, KIND_FC] {
        return Err(Error::format("unsupported layer sequence"));
    }
    if d[..3].iter().any(|l| l.kernel != 3) || d[3..].iter().any(|l| l.kernel != 1) {
        return Err(Error::format("unsupported kernel sizes"));
    }
    if d[1].input != d[0].output || d[2].input != d[1].output {
        return Err(Error::format("convolution channel chain is inconsistent"));
    }
    if d[4].input != d[3].output || d[4].output != 2 {
        return Err(Error::format("classifier head is inconsistent"));
    }
    // The flattened dimension entering fc1 pins the input side length:
    // flat = c3 · (side/8)².
    let c3 = d[2].output;
    if c3 == 0 || d[3].input % c3 != 0 {
        return Err(Error::format("fully connected input does not match conv output"));
    }
    let cells = d[3].input / c3;
    let side = (cells as f64).sqrt().round() as usize;
    if side * side != cells {
        return Err(Error::format("fully connected input is not a square feature map"));
    }
    let arch = Arch {
        input_hw: side * 8,
        in_channels: d[0].input,
        conv_channels: [d[0].output, d[1].output, d[2].output],
        fc_hidden: d[3].output,
    };
    arch.validate()
        .map_err(|e| Error::format(format!("architecture rejected: {e}")))?;
    Ok(arch)
}
