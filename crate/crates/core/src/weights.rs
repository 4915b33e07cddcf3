//! Binary checkpoint format.
//!
//! Layout (all integers little-endian, all floats IEEE f64 little-endian):
//! an 8-byte magic, a u32 format version, a u32 layer count, then one record
//! per layer. Each record starts with a u8 kind tag followed by kind-specific
//! dimensions and raw parameter buffers. Floats round-trip bit-exactly since
//! they are stored via their bit patterns.

use crate::farkas::{FarkasDenseLayer, FarkasResidualBlock};
use crate::net::{BatchNormLayer, DenseLayer, Layer, Network};
use crate::tensor::{ActKind, Aggregation, Tensor};
use crate::{Error, Result};
use byteorder::{LittleEndian, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"FARKNET\0";
pub const VERSION: u32 = 1;

/// Upper bound on any serialized dimension; rejects corrupt headers before
/// they turn into huge allocations.
const MAX_DIM: u32 = 1 << 24;

const KIND_DENSE: u8 = 0;
const KIND_FARKAS: u8 = 1;
const KIND_RESIDUAL: u8 = 2;
const KIND_BATCHNORM: u8 = 3;
const KIND_ACTIVATION: u8 = 4;

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_network(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    let mut r = Counting::new(BufReader::new(File::open(path)?));
    let net = read_network(&mut r)?;
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(Error::format(
            "trailing bytes after the last layer record".to_string(),
            Some(r.pos),
        ));
    }
    Ok(net)
}

pub fn write_network(net: &Network, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let count = u32::try_from(net.layers().len())
        .map_err(|_| Error::input("too many layers to serialize".to_string()))?;
    w.write_u32::<LittleEndian>(count)?;
    for layer in net.layers() {
        match layer {
            Layer::Dense(d) => {
                w.write_u8(KIND_DENSE)?;
                w.write_u32::<LittleEndian>(d.out_features() as u32)?;
                w.write_u32::<LittleEndian>(d.in_features() as u32)?;
                w.write_u8(d.bias.is_some() as u8)?;
                write_f64s(w, d.weight.data())?;
                if let Some(b) = &d.bias {
                    write_f64s(w, b.data())?;
                }
            }
            Layer::Farkas(f) => {
                w.write_u8(KIND_FARKAS)?;
                w.write_u32::<LittleEndian>(f.m() as u32)?;
                w.write_u32::<LittleEndian>(f.n() as u32)?;
                write_agg(w, f.agg())?;
                write_act(w, f.activation())?;
                w.write_f64::<LittleEndian>(f.cutoff())?;
                w.write_f64::<LittleEndian>(f.epsilon())?;
                write_f64s(w, f.w_train().data())?;
                write_f64s(w, f.bias().data())?;
                write_f64s(w, f.lambda())?;
            }
            Layer::Residual(r) => {
                w.write_u8(KIND_RESIDUAL)?;
                w.write_u32::<LittleEndian>(r.d() as u32)?;
                w.write_u32::<LittleEndian>(r.h() as u32)?;
                write_agg(w, r.agg())?;
                write_act(w, r.activation())?;
                w.write_f64::<LittleEndian>(r.cutoff())?;
                w.write_f64::<LittleEndian>(r.epsilon())?;
                write_f64s(w, r.inner().w_train().data())?;
                write_f64s(w, r.inner().bias().data())?;
                write_f64s(w, r.inner().lambda())?;
                write_f64s(w, r.w2().data())?;
                write_f64s(w, r.bias2().data())?;
                write_f64s(w, r.lambda())?;
            }
            Layer::BatchNorm(bn) => {
                w.write_u8(KIND_BATCHNORM)?;
                w.write_u32::<LittleEndian>(bn.features() as u32)?;
                w.write_f64::<LittleEndian>(bn.momentum)?;
                w.write_f64::<LittleEndian>(bn.eps)?;
                write_f64s(w, bn.gamma.data())?;
                write_f64s(w, bn.beta.data())?;
                write_f64s(w, &bn.running_mean)?;
                write_f64s(w, &bn.running_var)?;
            }
            Layer::Activation(kind) => {
                w.write_u8(KIND_ACTIVATION)?;
                write_act(w, *kind)?;
            }
        }
    }
    Ok(())
}

pub fn read_network(r: &mut Counting<impl Read>) -> Result<Network> {
    let mut magic = [0u8; 8];
    r.bytes(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("bad magic, not a weights file".to_string(), Some(0)));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            format!("unsupported format version {version}"),
            Some(8),
        ));
    }
    let count = r.u32()?;
    if count > MAX_DIM {
        return Err(Error::format(format!("absurd layer count {count}"), Some(12)));
    }
    let mut layers = Vec::with_capacity(count as usize);
    for idx in 0..count {
        let record_start = r.pos;
        let layer = read_layer(r).map_err(|e| match e {
            Error::Format { .. } => e,
            other => Error::format(
                format!("layer record {idx}: {other}"),
                Some(record_start),
            ),
        })?;
        layers.push(layer);
    }
    Ok(Network::from_layers(layers))
}

fn read_layer(r: &mut Counting<impl Read>) -> Result<Layer> {
    let kind_at = r.pos;
    let kind = r.u8()?;
    match kind {
        KIND_DENSE => {
            let out = r.dim()?;
            let inp = r.dim()?;
            let has_bias = r.u8()? != 0;
            let weight = Tensor::new(vec![out, inp], r.f64s(out * inp)?)?;
            let bias = if has_bias {
                Some(Tensor::new(vec![out], r.f64s(out)?)?)
            } else {
                None
            };
            Ok(Layer::Dense(DenseLayer { weight, bias }))
        }
        KIND_FARKAS => {
            let m = r.dim()?;
            let n = r.dim()?;
            if m < 2 {
                return Err(Error::format(
                    format!("guaranteed layer with {m} outputs"),
                    Some(kind_at),
                ));
            }
            let agg = r.agg()?;
            let act = r.act()?;
            let cutoff = r.f64()?;
            let epsilon = r.f64()?;
            let w_train = Tensor::new(vec![m - 1, n], r.f64s((m - 1) * n)?)?;
            let bias = Tensor::new(vec![m], r.f64s(m)?)?;
            let lambda = r.f64s(m)?;
            Ok(Layer::Farkas(FarkasDenseLayer::from_parts(
                w_train, bias, lambda, agg, act, cutoff, epsilon,
            )?))
        }
        KIND_RESIDUAL => {
            let d = r.dim()?;
            let h = r.dim()?;
            if h < 2 || d < 1 {
                return Err(Error::format(
                    format!("residual block with d={d}, h={h}"),
                    Some(kind_at),
                ));
            }
            let agg = r.agg()?;
            let act = r.act()?;
            let cutoff = r.f64()?;
            let epsilon = r.f64()?;
            let inner_w = Tensor::new(vec![h - 1, d], r.f64s((h - 1) * d)?)?;
            let inner_b = Tensor::new(vec![h], r.f64s(h)?)?;
            let inner_lambda = r.f64s(h)?;
            let inner = FarkasDenseLayer::from_parts(
                inner_w, inner_b, inner_lambda, agg, act, cutoff, epsilon,
            )?;
            let w2 = Tensor::new(vec![d, h], r.f64s(d * h)?)?;
            let bias2 = Tensor::new(vec![d + 1], r.f64s(d + 1)?)?;
            let lambda = r.f64s(d + 1)?;
            Ok(Layer::Residual(FarkasResidualBlock::from_parts(
                inner,
                w2,
                bias2,
                Some(lambda),
                agg,
                act,
                cutoff,
                epsilon,
            )?))
        }
        KIND_BATCHNORM => {
            let features = r.dim()?;
            let momentum = r.f64()?;
            let eps = r.f64()?;
            let gamma = Tensor::new(vec![features], r.f64s(features)?)?;
            let beta = Tensor::new(vec![features], r.f64s(features)?)?;
            let running_mean = r.f64s(features)?;
            let running_var = r.f64s(features)?;
            Ok(Layer::BatchNorm(BatchNormLayer {
                gamma,
                beta,
                running_mean,
                running_var,
                momentum,
                eps,
            }))
        }
        KIND_ACTIVATION => Ok(Layer::Activation(r.act()?)),
        other => Err(Error::format(
            format!("unknown layer kind tag {other}"),
            Some(kind_at),
        )),
    }
}

fn write_f64s(w: &mut impl Write, vals: &[f64]) -> Result<()> {
    for &v in vals {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn write_agg(w: &mut impl Write, agg: Aggregation) -> Result<()> {
    w.write_u8(match agg {
        Aggregation::Sum => 0,
        Aggregation::Mean => 1,
    })?;
    Ok(())
}

/// Activation tag plus a shape parameter; the parameter is written for every
/// kind so records have a fixed layout.
fn write_act(w: &mut impl Write, act: ActKind) -> Result<()> {
    let (tag, alpha) = match act {
        ActKind::Relu => (0u8, 0.0),
        ActKind::LeakyRelu { alpha } => (1, alpha),
        ActKind::Elu { alpha } => (2, alpha),
    };
    w.write_u8(tag)?;
    w.write_f64::<LittleEndian>(alpha)?;
    Ok(())
}

/// Reader wrapper tracking the byte offset so parse errors can say where.
pub struct Counting<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Counting<R> {
    pub fn new(inner: R) -> Self {
        Counting { inner, pos: 0 }
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.pos;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format("file ends mid-record".to_string(), Some(at))
            } else {
                Error::Io(e)
            }
        })?;
        self.pos += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.bytes(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(f64::from_bits(u64::from_le_bytes(b)))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    fn dim(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u32()?;
        if v == 0 || v > MAX_DIM {
            return Err(Error::format(format!("dimension {v} out of range"), Some(at)));
        }
        Ok(v as usize)
    }

    fn agg(&mut self) -> Result<Aggregation> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(Aggregation::Sum),
            1 => Ok(Aggregation::Mean),
            other => Err(Error::format(
                format!("unknown aggregation tag {other}"),
                Some(at),
            )),
        }
    }

    fn act(&mut self) -> Result<ActKind> {
        let at = self.pos;
        let tag = self.u8()?;
        let alpha = self.f64()?;
        match tag {
            0 => Ok(ActKind::Relu),
            1 => Ok(ActKind::LeakyRelu { alpha }),
            2 => Ok(ActKind::Elu { alpha }),
            other => Err(Error::format(
                format!("unknown activation tag {other}"),
                Some(at),
            )),
        }
    }
}
