//! Layer specs, parameters, and the CNN4 architecture.

mod network;

pub(crate) use network::{batch_norm_forward, feeds_binarized, max_pool_forward};

pub use network::{
    accuracy, backward, forward, predict, sgd_step, softmax_cross_entropy, ActivationQuant, ForwardCache,
    ForwardOptions, GradientBundle, LayerGrads, LrSchedule, Mode, SgdOptions,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{Matricization, RotationPair};
use crate::surrogate::MixParams;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Convolution followed by batch norm and an activation.
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        binarize: bool,
    },
    MaxPool { size: usize },
    /// Linear classifier head; must be the last layer.
    Dense {
        in_features: usize,
        out_features: usize,
        binarize: bool,
    },
}

impl LayerSpec {
    pub fn is_trainable(&self) -> bool {
        !matches!(self, LayerSpec::MaxPool { .. })
    }

    pub fn binarize(&self) -> bool {
        match self {
            LayerSpec::Conv { binarize, .. } | LayerSpec::Dense { binarize, .. } => *binarize,
            LayerSpec::MaxPool { .. } => false,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                c_in, c_out, kernel, ..
            } => Some(vec![c_out, c_in, kernel, kernel]),
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => Some(vec![out_features, in_features]),
            LayerSpec::MaxPool { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[channels, height, width]` of one input sample.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub n_classes: usize,
}

impl ModelSpec {
    /// Per-sample activation shape entering each layer, plus the final output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input.to_vec()];
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().expect("non-empty").clone();
            let next = match *layer {
                LayerSpec::Conv {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    let [c, h, w] = cur[..] else {
                        return Err(Error::dim(format!("layer {i}: conv after flatten")));
                    };
                    let g = crate::conv::ConvGeometry::new(
                        &[c, h, w],
                        &[c_out, c_in, kernel, kernel],
                        stride,
                        pad,
                    )
                    .map_err(|e| Error::dim(format!("layer {i}: {e}")))?;
                    vec![c_out, g.out_h(), g.out_w()]
                }
                LayerSpec::MaxPool { size } => {
                    let [c, h, w] = cur[..] else {
                        return Err(Error::dim(format!("layer {i}: pool after flatten")));
                    };
                    if size == 0 || h < size || w < size {
                        return Err(Error::dim(format!("layer {i}: pool {size} on {h}x{w}")));
                    }
                    vec![c, h / size, w / size]
                }
                LayerSpec::Dense {
                    in_features,
                    out_features,
                    ..
                } => {
                    let flat: usize = cur.iter().product();
                    if flat != in_features {
                        return Err(Error::dim(format!(
                            "layer {i}: dense expects {in_features} inputs, gets {flat}"
                        )));
                    }
                    if i != last {
                        return Err(Error::dim("dense layer must be the classifier head"));
                    }
                    vec![out_features]
                }
            };
            shapes.push(next);
        }
        match shapes.last() {
            Some(s) if s.as_slice() == [self.n_classes] => Ok(shapes),
            other => Err(Error::dim(format!(
                "model output {other:?} does not match {} classes",
                self.n_classes
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    pub fn trainable(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_trainable())
    }

    pub fn weight_shapes(&self) -> Vec<Vec<usize>> {
        self.trainable().filter_map(|l| l.weight_shape()).collect()
    }

    /// Layers that carry a rotation.
    pub fn n_rotated(&self) -> usize {
        self.trainable().filter(|l| l.binarize()).count()
    }

    /// Number of conv/dense weight scalars (batch-norm state excluded).
    pub fn count_params(&self) -> usize {
        self.weight_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// `Σ n1² + n2²` over binarized layers.
    pub fn count_rotation_params(&self) -> usize {
        self.trainable()
            .filter(|l| l.binarize())
            .filter_map(|l| l.weight_shape())
            .map(|s| {
                let m = Matricization::for_weight_shape(&s).expect("weight shapes are >= 2-D");
                m.n1 * m.n1 + m.n2 * m.n2
            })
            .sum()
    }

    /// Same architecture with every conv/dense layer binarized.
    pub fn binarize_all(&self) -> Self {
        let mut out = self.clone();
        for layer in &mut out.layers {
            match layer {
                LayerSpec::Conv { binarize, .. } | LayerSpec::Dense { binarize, .. } => *binarize = true,
                LayerSpec::MaxPool { .. } => {}
            }
        }
        out
    }

    /// Re-targets the architecture at a different input size, resizing the head.
    pub fn with_input_size(mut self, h: usize, w: usize) -> Result<Self> {
        self.input[1] = h;
        self.input[2] = w;
        let n = self.layers.len();
        let mut probe = self.clone();
        probe.layers.truncate(n - 1);
        let shapes = {
            let mut s = vec![probe.input.to_vec()];
            for layer in &probe.layers {
                let cur = s.last().expect("non-empty").clone();
                s.push(match *layer {
                    LayerSpec::Conv {
                        c_out,
                        kernel,
                        stride,
                        pad,
                        ..
                    } => {
                        if cur[1] + 2 * pad < kernel || cur[2] + 2 * pad < kernel {
                            return Err(Error::dim("input too small for architecture"));
                        }
                        vec![
                            c_out,
                            (cur[1] + 2 * pad - kernel) / stride + 1,
                            (cur[2] + 2 * pad - kernel) / stride + 1,
                        ]
                    }
                    LayerSpec::MaxPool { size } => vec![cur[0], cur[1] / size, cur[2] / size],
                    LayerSpec::Dense { .. } => return Err(Error::dim("dense before head")),
                });
            }
            s
        };
        if let Some(LayerSpec::Dense { in_features, .. }) = self.layers.last_mut() {
            *in_features = shapes.last().expect("non-empty").iter().product();
        }
        self.validate()?;
        Ok(self)
    }
}

/// CNN4: four 3x3 conv blocks (pooling after blocks 2 and 4) and a dense head.
///
/// Channel widths are `width, 2w, 2w, 4w`; the input is 28x28 (use
/// [`ModelSpec::with_input_size`] for other sizes). The first conv and the
/// head stay real-valued, convs 2-4 are binarized. Binarized convs pad
/// with -1 so training and XNOR inference see the same borders.
pub fn build_cnn4(in_channels: usize, n_classes: usize, width: usize) -> ModelSpec {
    let w = width.max(1);
    let conv = |c_in, c_out, binarize| LayerSpec::Conv {
        c_in,
        c_out,
        kernel: 3,
        stride: 1,
        pad: 1,
        binarize,
    };
    ModelSpec {
        input: [in_channels, 28, 28],
        layers: vec![
            conv(in_channels, w, false),
            conv(w, 2 * w, true),
            LayerSpec::MaxPool { size: 2 },
            conv(2 * w, 2 * w, true),
            conv(2 * w, 4 * w, true),
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Dense {
                in_features: 4 * w * 7 * 7,
                out_features: n_classes,
                binarize: false,
            },
        ],
        n_classes,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::full(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }
}

/// Trainable state of one conv or dense layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: Tensor,
    pub mix: MixParams,
    pub rot: Option<RotationPair>,
    pub binarize: bool,
    pub bn: Option<BatchNorm>,
}

/// The parts of a model that the server aggregates and broadcasts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub layers: Vec<LayerWeights>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub w: Tensor,
    pub bn: Option<BatchNorm>,
}

impl Weights {
    /// `Σ c_i x_i` over every tensor, including batch-norm state.
    pub fn linear_combination(terms: &[(&Weights, f64)]) -> Result<Weights> {
        let (first, _) = terms
            .first()
            .ok_or_else(|| Error::Protocol("empty weight combination".into()))?;
        let mut out = first.scaled(0.0);
        for (w, c) in terms {
            out.axpy(*c, w)?;
        }
        Ok(out)
    }

    pub fn scaled(&self, c: f64) -> Weights {
        let mut out = self.clone();
        out.for_each_tensor_mut(|t| t.data_mut().iter_mut().for_each(|x| *x *= c));
        out
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &Weights) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Protocol("weight sets have different depths".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.axpy(c, &b.w)?;
            match (&mut a.bn, &b.bn) {
                (Some(x), Some(y)) => {
                    x.scale.axpy(c, &y.scale)?;
                    x.shift.axpy(c, &y.shift)?;
                    x.running_mean.axpy(c, &y.running_mean)?;
                    x.running_var.axpy(c, &y.running_var)?;
                }
                (None, None) => {}
                _ => return Err(Error::Protocol("batch-norm layout differs".into())),
            }
        }
        Ok(())
    }

    fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        for l in &mut self.layers {
            f(&mut l.w);
            if let Some(bn) = &mut l.bn {
                f(&mut bn.scale);
                f(&mut bn.shift);
                f(&mut bn.running_mean);
                f(&mut bn.running_var);
            }
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Weights) -> Result<f64> {
        let mut d = self.clone();
        d.axpy(-1.0, other)?;
        let mut m: f64 = 0.0;
        d.for_each_tensor_mut(|t| m = m.max(t.max_abs()));
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<LayerParams>,
    /// Bumped on every parameter update; caches remember the version they saw.
    #[serde(default)]
    pub version: u64,
}

impl Model {
    /// Kaiming-uniform weights, identity rotations, default mixing scalars.
    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .trainable()
            .map(|l| {
                let shape = l.weight_shape().expect("trainable layers have weights");
                let fan_in: usize = shape[1..].iter().product();
                let bound = match l {
                    LayerSpec::Dense { .. } => (1.0 / fan_in as f64).sqrt(),
                    _ => (6.0 / fan_in as f64).sqrt().min(1.0),
                };
                let w = Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound));
                let bn = matches!(l, LayerSpec::Conv { .. }).then(|| BatchNorm::new(shape[0]));
                let rot = l.binarize().then(|| {
                    RotationPair::identity(
                        Matricization::for_weight_shape(&shape).expect("weight shapes are >= 2-D"),
                    )
                });
                LayerParams {
                    w,
                    mix: MixParams::default(),
                    rot,
                    binarize: l.binarize(),
                    bn,
                }
            })
            .collect();
        Ok(Self {
            spec,
            layers,
            version: 0,
        })
    }

    pub fn weights(&self) -> Weights {
        Weights {
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    w: l.w.clone(),
                    bn: l.bn.clone(),
                })
                .collect(),
        }
    }

    pub fn load_weights(&mut self, weights: &Weights) -> Result<()> {
        if weights.layers.len() != self.layers.len() {
            return Err(Error::Protocol("weight set does not match model depth".into()));
        }
        for (l, w) in self.layers.iter_mut().zip(&weights.layers) {
            l.w.same_shape(&w.w)?;
            l.w = w.w.clone();
            l.bn = w.bn.clone();
        }
        self.version += 1;
        Ok(())
    }

    /// Resets rotations to identity and mixing scalars to `mix`.
    pub fn reset_client_state(&mut self, mix: MixParams) {
        for l in &mut self.layers {
            l.mix = mix;
            if let Some(rot) = &mut l.rot {
                *rot = RotationPair::identity(rot.shape());
            }
        }
        self.version += 1;
    }

    pub fn rotation_params(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.rot.as_ref())
            .map(|r| r.param_count())
            .sum()
    }
}
