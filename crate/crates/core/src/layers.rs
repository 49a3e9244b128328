//! Stateless integrate-and-fire activation and the blocks of the spiking U-Net.
//!
//! Every block integrates its weighted input into a fresh membrane potential
//! on each call and fires (or not) once; nothing carries over between calls.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Forward behaviour of an IF activation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FireMode {
    /// Heaviside spikes in {0, 1}.
    #[default]
    Spike,
    /// The sigmoid itself; used to check gradients against finite differences.
    Soft,
}

/// Stateless integrate-and-fire neuron with a sigmoid surrogate gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IfActivation {
    pub threshold: f64,
    pub surrogate_alpha: f64,
    pub mode: FireMode,
}

impl Default for IfActivation {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            surrogate_alpha: 4.0,
            mode: FireMode::Spike,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl IfActivation {
    /// Fires on `potential`.
    ///
    /// Spike mode emits `1` where `potential > threshold` (strictly) and `0`
    /// elsewhere; soft mode emits `σ(α (v - θ))`. Both modes backpropagate
    /// `α σ (1 - σ)` evaluated at the same pre-activation.
    pub fn fire<T: Scalar>(&self, tape: &mut Tape<T>, potential: Var) -> Result<Var> {
        let v = tape.value(potential)?;
        let (alpha, theta) = (self.surrogate_alpha, self.threshold);
        let mut out = Vec::with_capacity(v.len());
        let mut slope = Vec::with_capacity(v.len());
        for &p in v.data() {
            let p = p.as_f64();
            let s = sigmoid(alpha * (p - theta));
            out.push(match self.mode {
                FireMode::Spike if p > theta => T::one(),
                FireMode::Spike => T::zero(),
                FireMode::Soft => T::from_f64_lossy(s),
            });
            slope.push(T::from_f64_lossy(alpha * s * (1.0 - s)));
        }
        let value = Tensor::new(v.shape(), out)?;
        let var = tape.custom(
            "if_fire",
            &[potential],
            value,
            Box::new(move |grad: &[T]| {
                vec![Some(grad.iter().zip(&slope).map(|(&g, &d)| g * d).collect())]
            }),
        )?;
        Ok(var)
    }
}

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in ±gain/√fan_in.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        let tensor = Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.gen_range(-bound..bound)));
        self.add(name, tensor)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    /// Records every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParams {
        BoundParams(
            self.tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        )
    }
}

/// Tape handles of a [`ParamStore`], aligned with its ids.
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    /// Wraps handles already on a tape, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Depthwise correlation followed by a pointwise channel mix.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    /// Depthwise filters per input channel.
    pub multiplier: usize,
}

impl SeparableConv {
    /// `kernel` is `[kt, kh, kw]` for temporal inputs or `[kh, kw]` for planar ones.
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: &[usize],
        bias: bool,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self::init_multiplied(store, name, cin, cout, kernel, 1, bias, stride, gain, rng)
    }

    /// Like [`SeparableConv::init`] with `multiplier` depthwise filters per
    /// input channel.
    #[allow(clippy::too_many_arguments)]
    pub fn init_multiplied<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: &[usize],
        multiplier: usize,
        bias: bool,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mid = cin * multiplier;
        let mut dw_shape = vec![mid];
        dw_shape.extend_from_slice(kernel);
        let fan: usize = kernel.iter().product();
        let depthwise = store.add_uniform(format!("{name}.depthwise"), &dw_shape, fan, gain, rng);
        let pointwise = store.add_uniform(format!("{name}.pointwise"), &[cout, mid], mid, gain, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([cout])));
        Self {
            depthwise,
            pointwise,
            bias,
            stride,
            multiplier,
        }
    }

    /// Membrane potential produced by this convolution.
    pub fn potential<T: Scalar>(&self, tape: &mut Tape<T>, params: &BoundParams, x: Var) -> Result<Var> {
        let x = if self.multiplier > 1 {
            tape.concat(&vec![x; self.multiplier], 0)?
        } else {
            x
        };
        let d = tape.depthwise(x, params.get(self.depthwise), self.stride)?;
        Ok(tape.pointwise(d, params.get(self.pointwise), self.bias.map(|b| params.get(b)))?)
    }
}

/// Spatial downsampling used by the encoders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    /// 2×2 max pooling applied to every temporal slice.
    #[default]
    Maxpool,
    /// Stride 2 in the depthwise spatial correlation.
    Strided,
}

/// First stage: separable convolution to the stem width, no downsampling.
#[derive(Clone, Debug)]
pub struct StemBlock {
    pub conv: SeparableConv,
    pub activation: IfActivation,
}

impl StemBlock {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &BoundParams, x: Var) -> Result<Var> {
        let v = self.conv.potential(tape, params, x)?;
        self.activation.fire(tape, v)
    }
}

/// Encoder: temporal-valid separable convolution doubling channels, IF,
/// then spatial halving.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub conv: SeparableConv,
    pub activation: IfActivation,
    pub downsample: Downsample,
}

impl EncoderBlock {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &BoundParams, x: Var) -> Result<Var> {
        let shape = tape.shape(x)?;
        let r = shape.len();
        if shape[r - 2] % 2 != 0 || shape[r - 1] % 2 != 0 {
            return Err(Error::Config(format!(
                "encoder input {shape:?} has odd spatial dims; cannot halve"
            )));
        }
        let v = self.conv.potential(tape, params, x)?;
        let s = self.activation.fire(tape, v)?;
        match self.downsample {
            Downsample::Maxpool => Ok(tape.maxpool2d(s, 2)?),
            Downsample::Strided => Ok(s),
        }
    }
}

/// Two separable convolutions; the block input is added to the second
/// potential before firing.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub first: SeparableConv,
    pub second: SeparableConv,
    pub activation: IfActivation,
}

impl ResidualBlock {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &BoundParams, x: Var) -> Result<Var> {
        let v1 = self.first.potential(tape, params, x)?;
        let s1 = self.activation.fire(tape, v1)?;
        let v2 = self.second.potential(tape, params, s1)?;
        let v2 = tape.add(v2, x)?;
        self.activation.fire(tape, v2)
    }
}

/// How an encoder skip joins the decoder pathway.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Channel concatenation ahead of the decoder convolution.
    #[default]
    Concat,
    /// Added to the decoder convolution's potential.
    Sum,
}

/// Decoder: ×2 nearest-neighbour upsampling, skip merge, separable
/// convolution halving channels, IF.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub conv: SeparableConv,
    pub activation: IfActivation,
    pub skip: SkipMode,
}

impl DecoderBlock {
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        x: Var,
        skip: Var,
    ) -> Result<Var> {
        let up = tape.upsample_nn(x, 2)?;
        let (us, ss) = (tape.shape(up)?.to_vec(), tape.shape(skip)?.to_vec());
        if us.len() != ss.len() || us[1..] != ss[1..] {
            return Err(Error::Tensor(crate::TensorError::ShapeMismatch {
                op: "decoder skip",
                left: us,
                right: ss,
            }));
        }
        let v = match self.skip {
            SkipMode::Concat => {
                let merged = tape.concat(&[up, skip], 0)?;
                self.conv.potential(tape, params, merged)?
            }
            SkipMode::Sum => {
                let v = self.conv.potential(tape, params, up)?;
                tape.add(v, skip)?
            }
        };
        self.activation.fire(tape, v)
    }
}

/// Pointwise projection of decoder spikes to (u, v), upsampled to full size.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub upsample: usize,
    /// Fixed factor applied to the projection.
    pub scale: f64,
}

impl PredictionHead {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        bias: bool,
        upsample: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.pointwise"), &[2, cin], cin, 1.0, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([2])));
        Self {
            weight,
            bias,
            upsample,
            scale: 1.0,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &BoundParams, x: Var) -> Result<Var> {
        let mut p = tape.pointwise(x, params.get(self.weight), self.bias.map(|b| params.get(b)))?;
        if self.scale != 1.0 {
            p = tape.scale(p, T::from_f64_lossy(self.scale))?;
        }
        if self.upsample == 1 {
            return Ok(p);
        }
        Ok(tape.upsample_nn(p, self.upsample)?)
    }
}

/// Non-firing output layer whose potential accumulates head contributions.
#[derive(Clone, Debug, Default)]
pub struct OutputPool {
    potential: Option<Var>,
    snapshots: Vec<Var>,
}

impl OutputPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `contribution` to the potential and records the new snapshot.
    pub fn accumulate<T: Scalar>(&mut self, tape: &mut Tape<T>, contribution: Var) -> Result<Var> {
        let next = match self.potential {
            None => {
                let shape = tape.shape(contribution)?;
                if shape.len() != 3 || shape[0] != 2 {
                    return Err(Error::Tensor(crate::TensorError::InvalidShape {
                        op: "output pool",
                        msg: format!("contribution must be (2, H, W), got {shape:?}"),
                    }));
                }
                contribution
            }
            Some(p) => tape.add(p, contribution)?,
        };
        self.potential = Some(next);
        self.snapshots.push(next);
        Ok(next)
    }

    pub fn potential(&self) -> Option<Var> {
        self.potential
    }

    pub fn snapshots(&self) -> &[Var] {
        &self.snapshots
    }

    pub fn into_snapshots(self) -> Vec<Var> {
        self.snapshots
    }
}
