//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CHOICEKM" | u32 version | u64 header length | header JSON
//! per tensor, canonical order: u64 rows | u64 cols | rows*cols f64
//! per batch-norm layer: u64 width | width f64 means | width f64 variances
//! ```
//!
//! The JSON header holds everything but parameter values (architecture,
//! input layout, standardizer, training config and history). Values are
//! stored as raw IEEE bits, so a save/load cycle is exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::math::RngStream;
use crate::models::{ArchSpec, ChoiceModel, InputDims};
use crate::training::{HyperConfig, TrainedModel, TrainingHistory};

const MAGIC: &[u8; 8] = b"CHOICEKM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    dims: InputDims,
    batch_norm: bool,
    standardizer: Standardizer,
    config: HyperConfig,
    history: TrainingHistory,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(format!("malformed model file: {}", msg.into()))
}

pub fn write_model(m: &TrainedModel, mut w: impl Write) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        arch: m.model.arch.clone(),
        dims: m.model.dims,
        batch_norm: m.model.batch_norm,
        standardizer: m.standardizer.clone(),
        config: m.config.clone(),
        history: m.history.clone(),
    })?;
    let mut buf = Vec::with_capacity(header.len() + 8 * m.model.params.num_scalars() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    let floats = |buf: &mut Vec<u8>, vs: &[f64]| vs.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    for (_, t) in m.model.params.tensors() {
        buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        floats(&mut buf, t.as_slice());
    }
    for norm in m.model.params.norms() {
        buf.extend_from_slice(&(norm.running.mean.len() as u64).to_le_bytes());
        floats(&mut buf, &norm.running.mean);
        floats(&mut buf, &norm.running.var);
    }
    w.write_all(&buf).map_err(|e| Error::io("model output", e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, out: &mut [f64]) -> Result<()> {
        let raw = self.take(8 * out.len())?;
        for (v, c) in out.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

pub fn read_model(mut r: impl Read) -> Result<TrainedModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("model input", e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(bad("not a choicekit model file"));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = usize::try_from(cur.u64()?).map_err(|_| bad("header length"))?;
    let header: Header = serde_json::from_slice(cur.take(len)?)?;
    let mut model = ChoiceModel::new(header.arch, header.dims, header.batch_norm, &mut RngStream::new(0, 0))?;
    for (_, t) in model.params.tensors_mut() {
        let (rows, cols) = (cur.u64()?, cur.u64()?);
        if (rows, cols) != (t.rows() as u64, t.cols() as u64) {
            return Err(bad(format!(
                "tensor shape {rows}x{cols} does not match the architecture ({}x{})",
                t.rows(),
                t.cols()
            )));
        }
        cur.floats(t.as_mut_slice())?;
    }
    for norm in model.params.norms_mut() {
        if cur.u64()? != norm.running.mean.len() as u64 {
            return Err(bad("batch-norm width does not match the architecture"));
        }
        cur.floats(&mut norm.running.mean)?;
        cur.floats(&mut norm.running.var)?;
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(TrainedModel {
        model,
        standardizer: header.standardizer,
        config: header.config,
        history: header.history,
    })
}

pub fn save_model(m: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(m, std::io::BufWriter::new(file))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(std::io::BufReader::new(file))
}

/// Serialize a model and return the bytes, e.g. for digests.
pub fn model_bytes(m: &TrainedModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_model(m, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, DgpSpec, UtilityForm};
    use crate::training::train;

    fn trained(arch: ArchSpec, bn: bool) -> TrainedModel {
        let ds = generate(&DgpSpec::travel_modes(UtilityForm::Linear), 200, &mut RngStream::new(1, 0)).unwrap();
        let cfg = HyperConfig {
            batch_norm: bn,
            dropout: 0.1,
            l2: 1e-3,
            ..HyperConfig::linear(arch, 0.05, 40, 32)
        };
        train(&ds, None, &cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let archs = [
            (ArchSpec::Mnl, false),
            (ArchSpec::Nl { nests: vec![vec![0, 1], vec![2, 3, 4]] }, false),
            (ArchSpec::Fdnn { depth: 2, width: 6 }, true),
            (
                ArchSpec::Asudnn {
                    pre_depth: 1,
                    post_depth: 1,
                    pre_width: 3,
                    post_width: 4,
                },
                true,
            ),
        ];
        for (arch, bn) in archs {
            let m = trained(arch, bn);
            let bytes = model_bytes(&m).unwrap();
            let back = read_model(bytes.as_slice()).unwrap();
            assert_eq!(back, m);
            assert_eq!(model_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = model_bytes(&trained(ArchSpec::Mnl, false)).unwrap();
        assert!(read_model(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_model(extra.as_slice()).is_err());
        let mut wrong = bytes;
        wrong[0] = b'X';
        assert!(read_model(wrong.as_slice()).is_err());
    }
}
