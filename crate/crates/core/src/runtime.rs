//! Bit-packed ±1 tensors and XNOR/popcount inference.
//!
//! Bit convention: a set bit is +1, a clear bit is -1, and bit `i % 64` of
//! word `i / 64` holds flat element `i` of a row (LSB = lowest index).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_batch_forward, ConvGeometry};
use crate::error::{Error, Result};
use crate::model::{
    batch_norm_forward, feeds_binarized, max_pool_forward, BatchNorm, LayerSpec, Model, ModelSpec, Weights,
};
use crate::rotation::{Matricization, RotationPair};
use crate::surrogate::{binarized_weight_forward, WeightQuantizer};
use crate::tensor::{matmul_t, Tensor};

const WORD: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedTensor {
    shape: Vec<usize>,
    /// Valid bits per row; rows are the first axis (a 1-D tensor is one row).
    row_len: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl PackedTensor {
    /// Packs `sign(x)` (zero maps to +1).
    pub fn pack(x: &Tensor) -> Self {
        let shape = x.shape().to_vec();
        let rows = if shape.len() >= 2 { shape[0] } else { 1 };
        let row_len = if rows == 0 { 0 } else { x.len() / rows };
        let words_per_row = row_len.div_ceil(WORD);
        let mut words = vec![0u64; rows * words_per_row];
        for r in 0..rows {
            let row = &x.data()[r * row_len..(r + 1) * row_len];
            for (i, &v) in row.iter().enumerate() {
                if v >= 0.0 {
                    words[r * words_per_row + i / WORD] |= 1 << (i % WORD);
                }
            }
        }
        Self {
            shape,
            row_len,
            words_per_row,
            words,
        }
    }

    pub fn unpack(&self) -> Tensor {
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * self.row_len);
        for r in 0..rows {
            let row = self.row(r);
            data.extend((0..self.row_len).map(|i| if row[i / WORD] >> (i % WORD) & 1 == 1 { 1.0 } else { -1.0 }));
        }
        Tensor::new(self.shape.clone(), data).expect("packed shape is consistent")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn valid_len(&self) -> usize {
        self.row_len
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// Bit of flat element `i` (row-major over the whole tensor).
    pub fn bit(&self, i: usize) -> bool {
        let (r, o) = (i / self.row_len, i % self.row_len);
        self.words[r * self.words_per_row + o / WORD] >> (o % WORD) & 1 == 1
    }
}

/// `Σ a_i b_i` for ±1 vectors packed into words, over the first `n` bits.
pub fn dot_words(a: &[u64], b: &[u64], n: usize) -> i64 {
    let full = n / WORD;
    let mut agree: u32 = a[..full]
        .iter()
        .zip(&b[..full])
        .map(|(x, y)| (!(x ^ y)).count_ones())
        .sum();
    let rem = n % WORD;
    if rem > 0 {
        let mask = (1u64 << rem) - 1;
        agree += (!(a[full] ^ b[full]) & mask).count_ones();
    }
    2 * agree as i64 - n as i64
}

/// Integer dot product of two packed ±1 vectors: `2 popcount(XNOR) - n`.
pub fn binary_dot(a: &PackedTensor, b: &PackedTensor) -> Result<i64> {
    if a.rows() != 1 || b.rows() != 1 || a.valid_len() != b.valid_len() {
        return Err(Error::dim(format!(
            "binary_dot needs two vectors of equal length, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(dot_words(&a.words, &b.words, a.valid_len()))
}

/// Integer accumulations from the XNOR kernels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Accumulator {
    pub shape: Vec<usize>,
    pub data: Vec<i64>,
}

impl Accumulator {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| v as f64).collect()).expect("consistent shape")
    }
}

/// XNOR convolution of a packed `c x h x w` input with packed
/// `c_out x c_in x k x k` weights. Padding contributes -1.
pub fn binary_conv2d(input: &PackedTensor, weight: &PackedTensor, stride: usize, pad: usize) -> Result<Accumulator> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    let (oh, ow) = (g.out_h(), g.out_w());
    let pl = g.patch_len();
    let mut patch = vec![0u64; pl.div_ceil(WORD)];
    let mut data = vec![0i64; g.c_out * oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            patch.iter_mut().for_each(|w| *w = 0);
            let mut bit = 0;
            for ci in 0..g.c_in {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.h
                            && (ix as usize) < g.w
                            && input.bit((ci * g.h + iy as usize) * g.w + ix as usize)
                        {
                            patch[bit / WORD] |= 1 << (bit % WORD);
                        }
                        bit += 1;
                    }
                }
            }
            for co in 0..g.c_out {
                data[(co * oh + oy) * ow + ox] = dot_words(&patch, weight.row(co), pl);
            }
        }
    }
    Ok(Accumulator {
        shape: vec![g.c_out, oh, ow],
        data,
    })
}

/// Scale rule for post-training binarization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PtbScaling {
    /// `s = ‖w‖₂ / √n`, which keeps the layer's L2 norm.
    #[default]
    L2Norm,
    /// `s = ‖w‖₁ / n`.
    MeanAbs,
}

pub fn binarize_weight(w: &Tensor, scaling: PtbScaling) -> Tensor {
    let n = w.len() as f64;
    let s = match scaling {
        PtbScaling::L2Norm => w.norm_l2() / n.sqrt(),
        PtbScaling::MeanAbs => w.norm_l1() / n,
    };
    w.sign().scale(s)
}

/// Replaces every binarized layer's weights by `s sign(w)`.
pub fn post_training_binarize(model: &Model, scaling: PtbScaling) -> Model {
    let mut out = model.clone();
    for l in &mut out.layers {
        if l.binarize {
            l.w = binarize_weight(&l.w, scaling);
        }
    }
    out.version += 1;
    out
}

/// Replaces every binarized layer's weights by `sign(w~)`, the weights the
/// binary evaluation path uses. Without server weights this is `sign(w)`.
pub fn materialize_binary(model: &Model, w_server: Option<&Weights>, lambda_one: bool) -> Result<Model> {
    let mut out = model.clone();
    for (j, l) in out.layers.iter_mut().enumerate() {
        if !l.binarize {
            continue;
        }
        l.w = match w_server {
            None => l.w.sign(),
            Some(s) => {
                let server = &s
                    .layers
                    .get(j)
                    .ok_or_else(|| Error::Protocol("server weights too shallow".into()))?
                    .w;
                let identity = RotationPair::identity(Matricization::for_weight_shape(l.w.shape())?);
                let rot = l.rot.as_ref().unwrap_or(&identity);
                binarized_weight_forward(&l.w, server, rot, &l.mix, lambda_one, WeightQuantizer::Sign)?.effective
            }
        };
    }
    out.version += 1;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum CompiledWeight {
    Real(Tensor),
    /// `scale * unpack(bits)`.
    Packed { bits: PackedTensor, scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledLayer {
    pub weight: CompiledWeight,
    pub bn: Option<BatchNorm>,
}

/// A model whose binarized layers run on packed weights.
#[derive(Clone, Debug, PartialEq)]
pub struct XnorModel {
    pub spec: ModelSpec,
    pub layers: Vec<CompiledLayer>,
}

impl XnorModel {
    /// Packs the stored weights of every binarized layer; each must be
    /// `±s` for a single positive `s`.
    pub fn compile(model: &Model) -> Result<Self> {
        let layers = model
            .layers
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let weight = if l.binarize {
                    let s = l.w.data().first().map_or(1.0, |v| v.abs());
                    if !(s > 0.0) || l.w.data().iter().any(|v| v.abs() != s) {
                        return Err(Error::Domain(format!("layer {j} weights are not ±s; binarize before compiling")));
                    }
                    CompiledWeight::Packed {
                        bits: PackedTensor::pack(&l.w),
                        scale: s,
                    }
                } else {
                    CompiledWeight::Real(l.w.clone())
                };
                Ok(CompiledLayer {
                    weight,
                    bn: l.bn.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: model.spec.clone(),
            layers,
        })
    }

    /// Inference with running batch-norm statistics and sign activations
    /// feeding every binarized layer.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.ndim() != 4 || input.shape()[1..] != self.spec.input[..] {
            return Err(Error::dim(format!("input {:?} does not match model", input.shape())));
        }
        let feeds = feeds_binarized(&self.spec);
        let b = input.shape()[0];
        let mut x = input.clone();
        let mut j = 0;
        for (i, spec) in self.spec.layers.iter().enumerate() {
            match *spec {
                LayerSpec::Conv { stride, pad, .. } => {
                    let layer = &self.layers[j];
                    let mut z = match &layer.weight {
                        CompiledWeight::Real(w) => conv2d_batch_forward(&x, w, stride, pad, 0.0)?,
                        CompiledWeight::Packed { bits, scale } => {
                            let sl = x.len() / b;
                            let sample_shape = &x.shape()[1..];
                            let mut out = Vec::new();
                            let mut out_shape = Vec::new();
                            for s in 0..b {
                                let xs = Tensor::new(sample_shape.to_vec(), x.data()[s * sl..(s + 1) * sl].to_vec())?;
                                let acc = binary_conv2d(&PackedTensor::pack(&xs), bits, stride, pad)?;
                                out.extend(acc.data.iter().map(|&v| v as f64 * scale));
                                out_shape = acc.shape;
                            }
                            let mut shape = vec![b];
                            shape.extend(out_shape);
                            Tensor::new(shape, out)?
                        }
                    };
                    if let Some(bn) = &layer.bn {
                        batch_norm_forward(&mut z, bn, false);
                    }
                    x = if feeds[i] { z } else { z.map(|v| v.max(0.0)) };
                    j += 1;
                }
                LayerSpec::MaxPool { size } => x = max_pool_forward(&x, size).0,
                LayerSpec::Dense { .. } => {
                    let flat: usize = x.shape()[1..].iter().product();
                    let x2 = x.into_reshape(&[b, flat])?;
                    x = match &self.layers[j].weight {
                        CompiledWeight::Real(w) => matmul_t(&x2, false, w, true)?,
                        CompiledWeight::Packed { bits, scale } => {
                            let xp = PackedTensor::pack(&x2);
                            let n_out = bits.rows();
                            let mut out = Tensor::zeros(&[b, n_out]);
                            for s in 0..b {
                                for o in 0..n_out {
                                    out.data_mut()[s * n_out + o] = dot_words(xp.row(s), bits.row(o), flat) as f64 * scale;
                                }
                            }
                            out
                        }
                    };
                    j += 1;
                }
            }
        }
        Ok(x)
    }

    /// Bytes of packed plus full-precision weight storage (batch norm excluded).
    pub fn weight_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.weight {
                CompiledWeight::Real(w) => 8 * w.len(),
                CompiledWeight::Packed { bits, .. } => 8 * bits.words().len() + 8,
            })
            .sum()
    }
}

const EXPORT_MAGIC: &[u8; 8] = b"FBNNPK01";

#[derive(Serialize, Deserialize)]
struct ExportHeader {
    spec: ModelSpec,
    tensors: Vec<ExportEntry>,
}

#[derive(Serialize, Deserialize)]
struct ExportEntry {
    name: String,
    kind: ExportKind,
    shape: Vec<usize>,
    /// Offset and length of the payload in the body, in 64-bit words.
    offset: usize,
    n_words: usize,
    /// Scale of a packed tensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
}

#[derive(Serialize, Deserialize, PartialEq, Eq, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum ExportKind {
    Bits,
    F64,
}

/// Writes the compiled model: magic, little-endian u64 header length, a JSON
/// shape table, then the body as little-endian u64 words (f64 as IEEE bits).
pub fn write_packed_model(model: &XnorModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut body: Vec<u64> = Vec::new();
    let mut tensors = Vec::new();
    let mut push_f64 = |name: String, t: &Tensor, body: &mut Vec<u64>| {
        tensors.push(ExportEntry {
            name,
            kind: ExportKind::F64,
            shape: t.shape().to_vec(),
            offset: body.len(),
            n_words: t.len(),
            scale: None,
        });
        body.extend(t.data().iter().map(|v| v.to_bits()));
    };
    let mut packed = Vec::new();
    for (j, l) in model.layers.iter().enumerate() {
        match &l.weight {
            CompiledWeight::Real(w) => push_f64(format!("layer{j}.w"), w, &mut body),
            CompiledWeight::Packed { bits, scale } => {
                packed.push(ExportEntry {
                    name: format!("layer{j}.w"),
                    kind: ExportKind::Bits,
                    shape: bits.shape().to_vec(),
                    offset: body.len(),
                    n_words: bits.words().len(),
                    scale: Some(*scale),
                });
                body.extend_from_slice(bits.words());
            }
        }
        if let Some(bn) = &l.bn {
            push_f64(format!("layer{j}.bn.scale"), &bn.scale, &mut body);
            push_f64(format!("layer{j}.bn.shift"), &bn.shift, &mut body);
            push_f64(format!("layer{j}.bn.running_mean"), &bn.running_mean, &mut body);
            push_f64(format!("layer{j}.bn.running_var"), &bn.running_var, &mut body);
        }
    }
    tensors.extend(packed);
    tensors.sort_by_key(|t| t.offset);
    let header = serde_json::to_vec(&ExportHeader {
        spec: model.spec.clone(),
        tensors,
    })
    .map_err(|e| Error::Serde(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * body.len());
    buf.extend_from_slice(EXPORT_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.resize(buf.len().div_ceil(8) * 8, b' ');
    for w in body {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.to_path_buf(), e))
}

pub fn read_packed_model(path: impl AsRef<Path>) -> Result<XnorModel> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    let format = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if buf.len() < 16 || &buf[..8] != EXPORT_MAGIC {
        return Err(format("missing packed-model magic"));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = (16 + hlen).div_ceil(8) * 8;
    if buf.len() < body_start {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: body_start,
            found: buf.len(),
        });
    }
    let header: ExportHeader =
        serde_json::from_slice(&buf[16..16 + hlen]).map_err(|e| format(&format!("header: {e}")))?;
    let body: Vec<u64> = buf[body_start..]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let lookup = |name: &str| -> Result<&ExportEntry> {
        header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| format(&format!("missing tensor {name}")))
    };
    let words = |e: &ExportEntry| -> Result<Vec<u64>> {
        body.get(e.offset..e.offset + e.n_words).map(<[u64]>::to_vec).ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: body_start + 8 * (e.offset + e.n_words),
            found: buf.len(),
        })
    };
    let f64_tensor = |name: &str| -> Result<Tensor> {
        let e = lookup(name)?;
        Tensor::new(e.shape.clone(), words(e)?.into_iter().map(f64::from_bits).collect())
    };
    let mut layers = Vec::new();
    for (j, l) in header.spec.trainable().enumerate() {
        let e = lookup(&format!("layer{j}.w"))?;
        let weight = match e.kind {
            ExportKind::F64 => CompiledWeight::Real(f64_tensor(&e.name)?),
            ExportKind::Bits => {
                let rows = if e.shape.len() >= 2 { e.shape[0] } else { 1 };
                let row_len = e.shape.iter().product::<usize>() / rows.max(1);
                let bits = PackedTensor {
                    shape: e.shape.clone(),
                    row_len,
                    words_per_row: row_len.div_ceil(WORD),
                    words: words(e)?,
                };
                if bits.words.len() != rows * bits.words_per_row {
                    return Err(format("packed tensor length does not match its shape"));
                }
                CompiledWeight::Packed {
                    bits,
                    scale: e.scale.ok_or_else(|| format("packed tensor without scale"))?,
                }
            }
        };
        let bn = if matches!(l, LayerSpec::Conv { .. }) {
            Some(BatchNorm {
                scale: f64_tensor(&format!("layer{j}.bn.scale"))?,
                shift: f64_tensor(&format!("layer{j}.bn.shift"))?,
                running_mean: f64_tensor(&format!("layer{j}.bn.running_mean"))?,
                running_var: f64_tensor(&format!("layer{j}.bn.running_var"))?,
            })
        } else {
            None
        };
        layers.push(CompiledLayer { weight, bn });
    }
    Ok(XnorModel {
        spec: header.spec,
        layers,
    })
}
