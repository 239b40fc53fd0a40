//! Layers and the five networks trained together: feature extractor `f`,
//! label predictor `g`, auxiliary classifier `g_a`, per-domain semantics
//! experts and the domain approximator `D`.

mod io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_dim, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use io::{
    read_bundle, read_bundle_bytes, write_bundle, write_bundle_bytes, BUNDLE_MAGIC, BUNDLE_VERSION,
};

/// Sizes of every network in a [`ModelBundle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Width of the first convolution block.
    pub conv_channels: usize,
    /// `K`, channels of the pruned feature map.
    pub feature_channels: usize,
    /// `C`.
    pub classes: usize,
    /// `M`, number of source domains.
    pub domains: usize,
    /// Hidden width of the approximator.
    pub approx_hidden: usize,
    pub kernel_size: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_height: 8,
            input_width: 8,
            input_channels: 3,
            conv_channels: 16,
            feature_channels: 32,
            classes: 2,
            domains: 3,
            approx_hidden: 64,
            kernel_size: 3,
        }
    }
}

impl Architecture {
    /// "Same" padding for odd kernels.
    pub fn pad(&self) -> usize {
        self.kernel_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.domains < 2 {
            return bad(format!(
                "need at least 2 source domains, got {}",
                self.domains
            ));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.feature_channels < 2 {
            return bad(format!(
                "need at least 2 feature channels, got {}",
                self.feature_channels
            ));
        }
        if self.conv_channels == 0 || self.approx_hidden == 0 || self.input_channels == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if !self.input_height.is_multiple_of(2)
            || !self.input_width.is_multiple_of(2)
            || self.input_height == 0
        {
            return bad(format!(
                "input {}x{} must have even, positive spatial dims",
                self.input_height, self.input_width
            ));
        }
        Ok(())
    }

    /// Spatial extent `(H, W)` of the feature map produced by `f`.
    pub fn map_dims(&self) -> (usize, usize) {
        let (k, p) = (self.kernel_size, self.pad());
        let h = conv_out_dim(self.input_height, k, 1, p).unwrap_or(0) / 2;
        let w = conv_out_dim(self.input_width, k, 1, p).unwrap_or(0) / 2;
        (
            conv_out_dim(h, k, 1, p).unwrap_or(0),
            conv_out_dim(w, k, 1, p).unwrap_or(0),
        )
    }

    pub fn input_len(&self) -> usize {
        self.input_height * self.input_width * self.input_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[in, out]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    fn he(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: he_normal(&[inputs, outputs], inputs, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<DenseVars> {
        Ok(DenseVars {
            weight: bind_param(tape, &self.weight, trainable)?,
            bias: bind_param(tape, &self.bias, trainable)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, k, k]`.
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    fn he(inputs: usize, outputs: usize, k: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            kernels: he_normal(&[outputs, inputs, k, k], inputs * k * k, rng),
            bias: Tensor::zeros(&[outputs]),
            stride: 1,
            pad,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<ConvVars> {
        Ok(ConvVars {
            kernels: bind_param(tape, &self.kernels, trainable)?,
            bias: bind_param(tape, &self.bias, trainable)?,
            stride: self.stride,
            pad: self.pad,
        })
    }
}

/// Two dense layers: `K -> C` scored against the label, then `C -> K`
/// producing the latent semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub first: DenseLayer,
    pub second: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

impl Expert {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<ExpertVars> {
        Ok(ExpertVars {
            first: self.first.bind(tape, trainable)?,
            second: self.second.bind(tape, trainable)?,
        })
    }
}

/// `K -> d -> d -> M`, relu between, softmax at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct Approximator {
    pub layers: [DenseLayer; 3],
}

impl Approximator {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<ApproximatorVars> {
        let [l1, l2, l3] = &self.layers;
        Ok(ApproximatorVars {
            layers: [
                l1.bind(tape, trainable)?,
                l2.bind(tape, trainable)?,
                l3.bind(tape, trainable)?,
            ],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub arch: Architecture,
    pub f: FeatureExtractor,
    pub g: DenseLayer,
    pub g_a: DenseLayer,
    pub experts: Vec<Expert>,
    pub approximator: Approximator,
}

/// Which network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Extractor,
    Predictor,
    Auxiliary,
    Expert(usize),
    Approximator,
}

/// Std of the approximator's output weights; keeps an untrained `D` at chance.
pub const APPROX_OUTPUT_STD: f64 = 0.01;

fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    normal_tensor(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn bind_param(tape: &mut Tape, p: &Tensor, trainable: bool) -> Result<Var> {
    let mut t = p.clone();
    t.requires_grad = trainable;
    t.grad = None;
    tape.leaf(t)
}

/// Builds a bundle with fan-in scaled normal weights and zero biases.
pub fn init_bundle(arch: Architecture, seed: u64) -> Result<ModelBundle> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, pad) = (arch.kernel_size, arch.pad());
    let kf = arch.feature_channels;
    let f = FeatureExtractor {
        conv1: ConvLayer::he(arch.input_channels, arch.conv_channels, k, pad, &mut rng),
        conv2: ConvLayer::he(arch.conv_channels, kf, k, pad, &mut rng),
    };
    let g = DenseLayer::he(kf, arch.classes, &mut rng);
    let g_a = DenseLayer::he(kf, arch.classes, &mut rng);
    let experts = (0..arch.domains)
        .map(|_| Expert {
            first: DenseLayer::he(kf, arch.classes, &mut rng),
            second: DenseLayer::he(arch.classes, kf, &mut rng),
        })
        .collect();
    let d = arch.approx_hidden;
    let approximator = Approximator {
        layers: [
            DenseLayer::he(kf, d, &mut rng),
            DenseLayer::he(d, d, &mut rng),
            DenseLayer {
                weight: normal_tensor(&[d, arch.domains], APPROX_OUTPUT_STD, &mut rng),
                bias: Tensor::zeros(&[arch.domains]),
            },
        ],
    };
    Ok(ModelBundle {
        arch,
        f,
        g,
        g_a,
        experts,
        approximator,
    })
}

impl ModelBundle {
    /// Parameters in declaration order, paired with their owning network.
    pub fn parameters(&self) -> Vec<(ParamGroup, &Tensor)> {
        let mut out = vec![
            (ParamGroup::Extractor, &self.f.conv1.kernels),
            (ParamGroup::Extractor, &self.f.conv1.bias),
            (ParamGroup::Extractor, &self.f.conv2.kernels),
            (ParamGroup::Extractor, &self.f.conv2.bias),
            (ParamGroup::Predictor, &self.g.weight),
            (ParamGroup::Predictor, &self.g.bias),
            (ParamGroup::Auxiliary, &self.g_a.weight),
            (ParamGroup::Auxiliary, &self.g_a.bias),
        ];
        for (i, e) in self.experts.iter().enumerate() {
            for p in [
                &e.first.weight,
                &e.first.bias,
                &e.second.weight,
                &e.second.bias,
            ] {
                out.push((ParamGroup::Expert(i), p));
            }
        }
        for l in &self.approximator.layers {
            out.push((ParamGroup::Approximator, &l.weight));
            out.push((ParamGroup::Approximator, &l.bias));
        }
        out
    }

    /// Mutable parameters in the same order as [`ModelBundle::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.f.conv1.kernels,
            &mut self.f.conv1.bias,
            &mut self.f.conv2.kernels,
            &mut self.f.conv2.bias,
            &mut self.g.weight,
            &mut self.g.bias,
            &mut self.g_a.weight,
            &mut self.g_a.bias,
        ];
        for e in &mut self.experts {
            out.push(&mut e.first.weight);
            out.push(&mut e.first.bias);
            out.push(&mut e.second.weight);
            out.push(&mut e.second.bias);
        }
        for l in &mut self.approximator.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BundleVars> {
        let vars = self
            .parameters()
            .into_iter()
            .map(|(_, p)| bind_param(tape, p, trainable))
            .collect::<Result<Vec<_>>>()?;
        self.assemble_vars(&vars)
    }

    /// Rebuilds the structured handles from a flat list in
    /// [`ModelBundle::parameters`] order.
    pub fn assemble_vars(&self, vars: &[Var]) -> Result<BundleVars> {
        let want = 8 + 4 * self.experts.len() + 6;
        if vars.len() != want {
            return Err(Error::shape(
                "assemble_vars",
                format!("expected {want} vars, got {}", vars.len()),
            ));
        }
        let dense = |i: usize| DenseVars {
            weight: vars[i],
            bias: vars[i + 1],
        };
        let conv = |i: usize, c: &ConvLayer| ConvVars {
            kernels: vars[i],
            bias: vars[i + 1],
            stride: c.stride,
            pad: c.pad,
        };
        let experts = (0..self.experts.len())
            .map(|e| ExpertVars {
                first: dense(8 + 4 * e),
                second: dense(10 + 4 * e),
            })
            .collect();
        let a = 8 + 4 * self.experts.len();
        Ok(BundleVars {
            f: ExtractorVars {
                conv1: conv(0, &self.f.conv1),
                conv2: conv(2, &self.f.conv2),
            },
            g: dense(4),
            g_a: dense(6),
            experts,
            approximator: ApproximatorVars {
                layers: [dense(a), dense(a + 2), dense(a + 4)],
            },
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub kernels: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractorVars {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub first: DenseVars,
    pub second: DenseVars,
}

#[derive(Debug, Clone, Copy)]
pub struct ApproximatorVars {
    pub layers: [DenseVars; 3],
}

/// Tape handles for every parameter of a [`ModelBundle`].
#[derive(Debug, Clone)]
pub struct BundleVars {
    pub f: ExtractorVars,
    pub g: DenseVars,
    pub g_a: DenseVars,
    pub experts: Vec<ExpertVars>,
    pub approximator: ApproximatorVars,
}

impl BundleVars {
    /// Same order as [`ModelBundle::parameters`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![
            self.f.conv1.kernels,
            self.f.conv1.bias,
            self.f.conv2.kernels,
            self.f.conv2.bias,
            self.g.weight,
            self.g.bias,
            self.g_a.weight,
            self.g_a.bias,
        ];
        for e in &self.experts {
            out.extend([e.first.weight, e.first.bias, e.second.weight, e.second.bias]);
        }
        for l in &self.approximator.layers {
            out.extend([l.weight, l.bias]);
        }
        out
    }
}

/// `x W + b` for a `[B, in]` batch.
pub fn dense(tape: &mut Tape, layer: &DenseVars, x: Var) -> Result<Var> {
    let y = tape.matmul(x, layer.weight)?;
    tape.add_bias(y, layer.bias)
}

/// conv+relu, 2x average pool, conv+relu. Output is `[B, H, W, K]` and
/// non-negative.
pub fn forward_feature_map(tape: &mut Tape, f: &ExtractorVars, x: Var) -> Result<Var> {
    let conv = |tape: &mut Tape, c: &ConvVars, x: Var| -> Result<Var> {
        let y = tape.conv2d(x, c.kernels, c.bias, c.stride, c.pad)?;
        tape.relu(y)
    };
    let h = conv(tape, &f.conv1, x)?;
    let h = tape.avg_pool2(h)?;
    conv(tape, &f.conv2, h)
}

/// Returns `(logits1, semantics)`: the first layer's raw class scores and the
/// second layer applied to their relu.
pub fn forward_expert(tape: &mut Tape, e: &ExpertVars, phi: Var) -> Result<(Var, Var)> {
    let want = tape.value(e.first.weight).shape()[0];
    let got = tape.value(phi).shape().last().copied().unwrap_or(0);
    if got != want {
        return Err(Error::shape(
            "forward_expert",
            format!("feature length {got}, expert expects {want}"),
        ));
    }
    let logits1 = dense(tape, &e.first, phi)?;
    let h = tape.relu(logits1)?;
    let semantics = dense(tape, &e.second, h)?;
    Ok((logits1, semantics))
}

/// Domain probabilities `[B, M]`.
pub fn forward_approximator(tape: &mut Tape, d: &ApproximatorVars, z: Var) -> Result<Var> {
    let [l1, l2, l3] = &d.layers;
    let h = dense(tape, l1, z)?;
    let h = tape.relu(h)?;
    let h = dense(tape, l2, h)?;
    let h = tape.relu(h)?;
    let logits = dense(tape, l3, h)?;
    tape.softmax(logits)
}

/// Gradient reversal with a fixed coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlGate {
    lambda: f64,
}

impl GrlGate {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda.is_nan() || lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gradient reversal lambda must be >= 0, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.grl(x, self.lambda)
    }
}

/// Identity forward; backward scales the incoming gradient by `-lambda`.
pub fn grl(tape: &mut Tape, x: Var, lambda: f64) -> Result<Var> {
    GrlGate::new(lambda)?.apply(tape, x)
}
