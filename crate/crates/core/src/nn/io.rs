//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "DHDM"
//! version    u32      1
//! input      3 x u32  channels, height, width
//! n_layers   u32
//! layers     n_layers records: u8 kind, then kind-specific u32 fields
//!              1 conv     in_channels, out_channels, kernel_h, kernel_w
//!              2 maxpool  size
//!              3 tanh
//!              4 flatten
//!              5 dense    inputs, outputs
//!              6 softmax
//! n_tensors  u32
//! tensors    n_tensors records: u64 length, then length x f32
//! ```
//!
//! Tensors appear in layer order, weight before bias. Trailing bytes are an
//! error.

use super::layers::{Conv2d, Dense, Layer, Shape};
use super::network::Network;
use crate::error::NnError;

pub const MAGIC: &[u8; 4] = b"DHDM";
pub const FORMAT_VERSION: u32 = 1;

const KIND_CONV: u8 = 1;
const KIND_MAXPOOL: u8 = 2;
const KIND_TANH: u8 = 3;
const KIND_FLATTEN: u8 = 4;
const KIND_DENSE: u8 = 5;
const KIND_SOFTMAX: u8 = 6;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn save_model(net: &Network<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + net.param_count() * 4 + net.layers().len() * 17);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in net.input_shape() {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, net.layers().len());
    for layer in net.layers() {
        match layer {
            Layer::Conv(c) => {
                out.push(KIND_CONV);
                for v in [c.in_channels, c.out_channels, c.kernel_h, c.kernel_w] {
                    put_u32(&mut out, v);
                }
            }
            Layer::MaxPool { size } => {
                out.push(KIND_MAXPOOL);
                put_u32(&mut out, *size);
            }
            Layer::Tanh => out.push(KIND_TANH),
            Layer::Flatten => out.push(KIND_FLATTEN),
            Layer::Dense(d) => {
                out.push(KIND_DENSE);
                put_u32(&mut out, d.inputs);
                put_u32(&mut out, d.outputs);
            }
            Layer::Softmax => out.push(KIND_SOFTMAX),
        }
    }
    let params = net.params();
    put_u32(&mut out, params.len());
    for p in params {
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        if self.bytes.len() - self.pos < n {
            return Err(NnError::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, NnError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize, NnError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64, NnError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Decodes a model, validating the layer chain against the declared input.
pub fn load_model(bytes: &[u8]) -> Result<Network<f32>, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(NnError::Format("bad magic, not a DHDM model".into()));
    }
    let version = r.u32("version")? as u32;
    if version != FORMAT_VERSION {
        return Err(NnError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let input: Shape = [r.u32("input")?, r.u32("input")?, r.u32("input")?];
    let n_layers = r.u32("layer count")?;
    if n_layers > 4096 {
        return Err(NnError::Format(format!("implausible layer count {n_layers}")));
    }

    let mut layers: Vec<Layer<f32>> = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let layer = match r.u8("layer kind")? {
            KIND_CONV => Layer::Conv(Conv2d {
                in_channels: r.u32("conv")?,
                out_channels: r.u32("conv")?,
                kernel_h: r.u32("conv")?,
                kernel_w: r.u32("conv")?,
                weight: Vec::new(),
                bias: Vec::new(),
            }),
            KIND_MAXPOOL => Layer::MaxPool {
                size: r.u32("maxpool")?,
            },
            KIND_TANH => Layer::Tanh,
            KIND_FLATTEN => Layer::Flatten,
            KIND_DENSE => Layer::Dense(Dense {
                inputs: r.u32("dense")?,
                outputs: r.u32("dense")?,
                weight: Vec::new(),
                bias: Vec::new(),
            }),
            KIND_SOFTMAX => Layer::Softmax,
            other => return Err(NnError::Format(format!("unknown layer kind {other}"))),
        };
        layers.push(layer);
    }

    // Shape chain before touching parameter blobs.
    let mut shape = input;
    for (i, layer) in layers.iter().enumerate() {
        shape = layer.output_shape(shape).map_err(|cause| {
            log::debug!("declared input {input:?} breaks at layer {i}: {cause}");
            NnError::Shape {
                expected: input.to_vec(),
                actual: shape.to_vec(),
            }
        })?;
    }

    let n_tensors = r.u32("tensor count")?;
    let expected_tensors: usize = layers.iter().map(|l| l.params().len()).sum();
    if n_tensors != expected_tensors {
        return Err(NnError::Format(format!(
            "{n_tensors} parameter tensors, layer table implies {expected_tensors}"
        )));
    }
    for layer in layers.iter_mut() {
        let sizes: Vec<usize> = match layer {
            Layer::Conv(c) => vec![
                c.out_channels * c.in_channels * c.kernel_h * c.kernel_w,
                c.out_channels,
            ],
            Layer::Dense(d) => vec![d.inputs * d.outputs, d.outputs],
            _ => Vec::new(),
        };
        for (slot, expected) in layer.params_mut().into_iter().zip(sizes) {
            let len = r.u64("tensor length")? as usize;
            if len != expected {
                return Err(NnError::Format(format!(
                    "parameter tensor has {len} values, layer needs {expected}"
                )));
            }
            let raw = r.take(len.checked_mul(4).ok_or_else(|| {
                NnError::Format("tensor length overflows".into())
            })?, "parameters")?;
            *slot = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
        }
    }
    if r.pos != bytes.len() {
        return Err(NnError::Format(format!(
            "{} trailing bytes after parameters",
            bytes.len() - r.pos
        )));
    }
    Network::from_layers(input, layers)
}

/// [`load_model`] plus a check that the model takes `expected` inputs.
pub fn load_model_expecting(bytes: &[u8], expected: Shape) -> Result<Network<f32>, NnError> {
    let net = load_model(bytes)?;
    if net.input_shape() != expected {
        return Err(NnError::Shape {
            expected: expected.to_vec(),
            actual: net.input_shape().to_vec(),
        });
    }
    Ok(net)
}
