//! Bit-exact model serialization.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic  b"RMPS"
//! u32    format version (currently 1)
//! u8     model kind: 0 simple residual, 1 activated residual (ReLU),
//!        2 two-channel product, 3 activated residual (no activation)
//! u32    layer count N
//! u32    hidden width chi
//! u32    class count C
//! u8     feature map: 0 affine (1, x), 1 partition-of-one (x, 1-x)
//! f64    dropout rate (activated models; 0 otherwise)
//! tensors in layer order, each:
//!   u32        rank
//!   rank * u32 dims
//!   f64 * prod row-major values
//! ```
//!
//! Per-layer tensors are: one `chi * chi` matrix for the simple
//! residual model; two matrices and a bias vector for the activated
//! model; one `2 * chi * chi` third-order core for the product model.
//! The readout matrix and bias close the file.  Saving the same
//! parameters twice produces identical bytes, and loading then saving
//! is the identity on files.

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::models::{
    AResMpsLayer, AResMpsParams, Activation, FeatureMapKind, ModelParams, MpsCore, MpsParams,
    ReadoutHead, SResMpsParams,
};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"RMPS";
const VERSION: u32 = 1;

const KIND_SRES: u8 = 0;
const KIND_ARES_RELU: u8 = 1;
const KIND_MPS: u8 = 2;
const KIND_ARES_LINEAR: u8 = 3;

const FM_AFFINE: u8 = 0;
const FM_NORMONE: u8 = 1;

fn feature_map_byte(kind: FeatureMapKind) -> u8 {
    match kind {
        FeatureMapKind::Affine => FM_AFFINE,
        FeatureMapKind::NormOne => FM_NORMONE,
    }
}

/// Serialize parameters into a byte buffer.
pub fn to_bytes<S: Scalar>(params: &ModelParams<S>) -> Result<Vec<u8>> {
    params.validate()?;
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION)?;
    let (kind, fm, dropout) = match params {
        ModelParams::SResMps(_) => (KIND_SRES, FM_AFFINE, 0.0),
        ModelParams::AResMps(p) => (
            match p.activation {
                Activation::Relu => KIND_ARES_RELU,
                Activation::Linear => KIND_ARES_LINEAR,
            },
            FM_NORMONE,
            p.dropout,
        ),
        ModelParams::Mps(p) => (KIND_MPS, feature_map_byte(p.feature_map), 0.0),
    };
    out.write_u8(kind)?;
    out.write_u32::<LittleEndian>(params.num_features() as u32)?;
    out.write_u32::<LittleEndian>(params.hidden_dim() as u32)?;
    out.write_u32::<LittleEndian>(params.num_classes() as u32)?;
    out.write_u8(fm)?;
    out.write_f64::<LittleEndian>(dropout)?;

    let chi = params.hidden_dim();
    let classes = params.num_classes();
    let write_tensor = |out: &mut Vec<u8>, dims: &[u32], data: &[S]| -> Result<()> {
        debug_assert_eq!(
            dims.iter().map(|&d| d as usize).product::<usize>(),
            data.len()
        );
        out.write_u32::<LittleEndian>(dims.len() as u32)?;
        for &d in dims {
            out.write_u32::<LittleEndian>(d)?;
        }
        for v in data {
            out.write_f64::<LittleEndian>(v.as_f64())?;
        }
        Ok(())
    };

    match params {
        ModelParams::SResMps(p) => {
            for w in &p.layers {
                write_tensor(&mut out, &[chi as u32, chi as u32], w.data())?;
            }
        }
        ModelParams::AResMps(p) => {
            for layer in &p.layers {
                write_tensor(&mut out, &[chi as u32, chi as u32], layer.w1.data())?;
                write_tensor(&mut out, &[chi as u32, chi as u32], layer.w2.data())?;
                write_tensor(&mut out, &[chi as u32], layer.bias.as_slice())?;
            }
        }
        ModelParams::Mps(p) => {
            let mut core_buf: Vec<S> = Vec::with_capacity(2 * chi * chi);
            for core in &p.cores {
                core_buf.clear();
                core_buf.extend_from_slice(core.channel1.data());
                core_buf.extend_from_slice(core.channel2.data());
                write_tensor(&mut out, &[2, chi as u32, chi as u32], &core_buf)?;
            }
        }
    }
    let readout = match params {
        ModelParams::SResMps(p) => &p.readout,
        ModelParams::AResMps(p) => &p.readout,
        ModelParams::Mps(p) => &p.readout,
    };
    write_tensor(&mut out, &[chi as u32, classes as u32], readout.weights.data())?;
    write_tensor(&mut out, &[classes as u32], readout.bias.as_slice())?;
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} while reading {what}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(self.take(4, what)?.read_u32::<LittleEndian>()?)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(self.take(8, what)?.read_f64::<LittleEndian>()?)
    }

    fn tensor<S: Scalar>(&mut self, dims: &[usize], what: &str) -> Result<Vec<S>> {
        let rank = self.u32(what)? as usize;
        if rank != dims.len() {
            return Err(Error::Format(format!(
                "{what}: expected rank {}, file says {rank}",
                dims.len()
            )));
        }
        for (i, &d) in dims.iter().enumerate() {
            let got = self.u32(what)? as usize;
            if got != d {
                return Err(Error::Format(format!(
                    "{what}: dim {i} is {got}, expected {d}"
                )));
            }
        }
        let count: usize = dims.iter().product();
        let bytes = self.take(8 * count, what)?;
        let mut data = Vec::with_capacity(count);
        for chunk in bytes.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
            data.push(S::from_f64_c(v));
        }
        Ok(data)
    }
}

/// Deserialize parameters from a byte buffer.
pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<ModelParams<S>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format(
            "not a model checkpoint (bad magic; expected RMPS)".into(),
        ));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let kind = r.u8("model kind")?;
    let n = r.u32("layer count")? as usize;
    let chi = r.u32("hidden width")? as usize;
    let classes = r.u32("class count")? as usize;
    let fm_byte = r.u8("feature map")?;
    let dropout = r.f64("dropout rate")?;
    if n == 0 || chi == 0 || classes == 0 {
        return Err(Error::Format(format!(
            "degenerate checkpoint dimensions: {n} layers, width {chi}, {classes} classes"
        )));
    }
    let feature_map = match fm_byte {
        FM_AFFINE => FeatureMapKind::Affine,
        FM_NORMONE => FeatureMapKind::NormOne,
        other => {
            return Err(Error::Format(format!("unknown feature-map byte {other}")));
        }
    };
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::Format(format!(
            "dropout rate {dropout} outside [0, 1)"
        )));
    }

    let matrix = |r: &mut Reader, what: &str, rows: usize, cols: usize| -> Result<Matrix<S>> {
        let data = r.tensor::<S>(&[rows, cols], what)?;
        Matrix::from_vec(rows, cols, data)
    };
    let params = match kind {
        KIND_SRES => {
            let mut layers = Vec::with_capacity(n);
            for i in 0..n {
                layers.push(matrix(&mut r, &format!("layer {i}"), chi, chi)?);
            }
            let readout = read_head(&mut r, chi, classes)?;
            ModelParams::SResMps(SResMpsParams { layers, readout })
        }
        KIND_ARES_RELU | KIND_ARES_LINEAR => {
            let mut layers = Vec::with_capacity(n);
            for i in 0..n {
                let w1 = matrix(&mut r, &format!("layer {i} channel 1"), chi, chi)?;
                let w2 = matrix(&mut r, &format!("layer {i} channel 2"), chi, chi)?;
                let bias = Vector::from_vec(r.tensor::<S>(&[chi], &format!("layer {i} bias"))?);
                layers.push(AResMpsLayer { w1, w2, bias });
            }
            let readout = read_head(&mut r, chi, classes)?;
            ModelParams::AResMps(AResMpsParams {
                layers,
                activation: if kind == KIND_ARES_RELU {
                    Activation::Relu
                } else {
                    Activation::Linear
                },
                dropout,
                readout,
            })
        }
        KIND_MPS => {
            let mut cores = Vec::with_capacity(n);
            for i in 0..n {
                let data = r.tensor::<S>(&[2, chi, chi], &format!("core {i}"))?;
                let (c1, c2) = data.split_at(chi * chi);
                cores.push(MpsCore {
                    channel1: Matrix::from_vec(chi, chi, c1.to_vec())?,
                    channel2: Matrix::from_vec(chi, chi, c2.to_vec())?,
                });
            }
            let readout = read_head(&mut r, chi, classes)?;
            ModelParams::Mps(MpsParams {
                cores,
                feature_map,
                readout,
            })
        }
        other => {
            return Err(Error::Format(format!("unknown model-kind byte {other}")));
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    params.validate()?;
    Ok(params)
}

fn read_head<S: Scalar>(r: &mut Reader, chi: usize, classes: usize) -> Result<ReadoutHead<S>> {
    let weights = Matrix::from_vec(chi, classes, r.tensor::<S>(&[chi, classes], "readout weights")?)?;
    let bias = Vector::from_vec(r.tensor::<S>(&[classes], "readout bias")?);
    Ok(ReadoutHead { weights, bias })
}

/// Save parameters to a file.
pub fn save<S: Scalar>(params: &ModelParams<S>, path: &Path) -> Result<()> {
    let bytes = to_bytes(params)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Load parameters from a file.
pub fn load<S: Scalar>(path: &Path) -> Result<ModelParams<S>> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}
