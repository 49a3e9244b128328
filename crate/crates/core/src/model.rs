//! Spiking U-Net assembled from a [`ModelConfig`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::events::SensorDims;
use crate::layers::{
    BoundParams, DecoderBlock, Downsample, EncoderBlock, FireMode, IfActivation, OutputPool, ParamStore,
    PredictionHead, ResidualBlock, SeparableConv, SkipMode, StemBlock,
};
use crate::tensor::{Scalar, Tensor};

/// How the temporal axis of the input is consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Encoding {
    /// Unpadded temporal convolutions collapse the frames to one at the bottleneck.
    #[default]
    #[serde(rename = "3d")]
    ThreeD,
    /// Frames are stacked on the channel axis; every convolution is planar.
    #[serde(rename = "2d")]
    TwoD,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub num_encoders: usize,
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
    pub num_frames: usize,
    pub num_residuals: usize,
    pub skip_mode: SkipMode,
    pub bottleneck_skip: SkipMode,
    pub downsample: Downsample,
    pub encoding: Encoding,
    pub sensor_dims: SensorDims,
    pub threshold: f64,
    pub surrogate_alpha: f64,
    pub fire_mode: FireMode,
    /// Bias on the pointwise convolutions of spiking layers.
    pub layer_bias: bool,
    /// Bias on the prediction heads.
    pub head_bias: bool,
    /// Fixed multiplier on every head contribution.
    pub head_scale: f64,
    /// Spiking-layer weights are drawn uniformly from ±init_gain/√fan_in.
    pub init_gain: f64,
    /// Depthwise filters per input channel in the stem.
    pub stem_depth_multiplier: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 2,
            stem_channels: 32,
            num_encoders: 4,
            spatial_kernel: 7,
            temporal_kernel: 5,
            num_frames: 21,
            num_residuals: 1,
            skip_mode: SkipMode::Concat,
            bottleneck_skip: SkipMode::Sum,
            downsample: Downsample::Maxpool,
            encoding: Encoding::ThreeD,
            sensor_dims: SensorDims::new(64, 64),
            threshold: 1.0,
            surrogate_alpha: 4.0,
            fire_mode: FireMode::Spike,
            layer_bias: false,
            head_bias: true,
            head_scale: 1.0,
            init_gain: 1.0,
            stem_depth_multiplier: 1,
        }
    }
}

impl ModelConfig {
    pub fn activation(&self) -> IfActivation {
        IfActivation {
            threshold: self.threshold,
            surrogate_alpha: self.surrogate_alpha,
            mode: self.fire_mode,
        }
    }

    /// Temporal extent after the stem and after each encoder (3d encoding).
    pub fn temporal_extents(&self) -> Vec<usize> {
        let step = self.temporal_kernel.saturating_sub(1);
        (0..=self.num_encoders)
            .map(|i| self.num_frames.saturating_sub((i + 1) * step))
            .collect()
    }

    /// Channels after the stem (index 0) and after each encoder.
    pub fn stage_channels(&self) -> Vec<usize> {
        (0..=self.num_encoders).map(|i| self.stem_channels << i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(1..=2).contains(&self.input_channels) {
            return fail(format!("input_channels must be 1 or 2, got {}", self.input_channels));
        }
        if self.stem_channels == 0 {
            return fail("stem_channels must be positive".into());
        }
        if self.stem_depth_multiplier == 0 {
            return fail("stem_depth_multiplier must be positive".into());
        }
        if self.num_encoders == 0 {
            return fail("num_encoders must be positive".into());
        }
        if !(1..=2).contains(&self.num_residuals) {
            return fail(format!("num_residuals must be 1 or 2, got {}", self.num_residuals));
        }
        if self.spatial_kernel == 0 || self.spatial_kernel.is_multiple_of(2) {
            return fail(format!("spatial_kernel must be odd, got {}", self.spatial_kernel));
        }
        if !(self.head_scale.is_finite() && self.head_scale > 0.0 && self.init_gain.is_finite() && self.init_gain > 0.0) {
            return fail("head_scale and init_gain must be positive".into());
        }
        if !(self.threshold.is_finite() && self.surrogate_alpha.is_finite() && self.surrogate_alpha > 0.0) {
            return fail("threshold must be finite and surrogate_alpha positive".into());
        }
        let n = self.num_encoders;
        let (h, w) = (self.sensor_dims.height, self.sensor_dims.width);
        let factor = 1usize << n;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return fail(format!(
                "sensor {h}x{w} is not divisible by 2^{n} = {factor} (one halving per encoder)"
            ));
        }
        if self.num_frames == 0 {
            return fail("num_frames must be positive".into());
        }
        if self.encoding == Encoding::ThreeD {
            let kt = self.temporal_kernel;
            if kt < 2 {
                return fail(format!("temporal_kernel must be at least 2 in 3d encoding, got {kt}"));
            }
            let consumed = (n + 1) * (kt - 1);
            if self.num_frames != consumed + 1 {
                return fail(format!(
                    "temporal collapse: {} frames - ({n} encoders + stem) x ({kt} - 1) = {} at the bottleneck, need exactly 1",
                    self.num_frames,
                    self.num_frames as i64 - consumed as i64
                ));
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [
            self.input_channels,
            self.num_frames,
            self.sensor_dims.height,
            self.sensor_dims.width,
        ]
    }
}

/// Per-call record of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Output pool after each decoder, coarsest first.
    pub snapshots: Vec<Var>,
    /// Upsampled head contributions, aligned with `snapshots`.
    pub heads: Vec<Var>,
    /// Stem output then each encoder output.
    pub encoder_outputs: Vec<Var>,
    pub residual_outputs: Vec<Var>,
    pub decoder_outputs: Vec<Var>,
    /// Bottleneck input to the residual stage (temporal axis removed).
    pub bottleneck: Var,
}

impl ForwardTrace {
    pub fn prediction(&self) -> Var {
        *self.snapshots.last().expect("trace has at least one snapshot")
    }

    /// Every spiking block output, in execution order.
    pub fn spike_outputs(&self) -> Vec<Var> {
        let mut all = self.encoder_outputs.clone();
        all.extend(&self.residual_outputs);
        all.extend(&self.decoder_outputs);
        all
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    stem: StemBlock,
    encoders: Vec<EncoderBlock>,
    residuals: Vec<ResidualBlock>,
    decoders: Vec<DecoderBlock>,
    heads: Vec<PredictionHead>,
}

impl<T: Scalar> Model<T> {
    /// Builds the network with weights drawn deterministically from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let act = config.activation();
        let three_d = config.encoding == Encoding::ThreeD;
        let (k, kt) = (config.spatial_kernel, config.temporal_kernel);
        let kernel3 = if three_d { vec![kt, k, k] } else { vec![k, k] };
        let kernel2 = vec![k, k];
        let bias = config.layer_bias;
        let gain = config.init_gain;
        let ch = config.stage_channels();
        let n = config.num_encoders;

        let stem_in = if three_d {
            config.input_channels
        } else {
            config.input_channels * config.num_frames
        };
        let stem = StemBlock {
            conv: SeparableConv::init_multiplied(
                &mut store,
                "stem",
                stem_in,
                ch[0],
                &kernel3,
                config.stem_depth_multiplier,
                bias,
                1,
                gain,
                &mut rng,
            ),
            activation: act,
        };
        let stride = match config.downsample {
            Downsample::Maxpool => 1,
            Downsample::Strided => 2,
        };
        let encoders = (0..n)
            .map(|i| EncoderBlock {
                conv: SeparableConv::init(
                    &mut store,
                    &format!("encoder{}", i + 1),
                    ch[i],
                    ch[i + 1],
                    &kernel3,
                    bias,
                    stride,
                    gain,
                    &mut rng,
                ),
                activation: act,
                downsample: config.downsample,
            })
            .collect();
        let b = ch[n];
        let residuals = (0..config.num_residuals)
            .map(|i| {
                let name = format!("residual{}", i + 1);
                ResidualBlock {
                    first: SeparableConv::init(&mut store, &format!("{name}.conv1"), b, b, &kernel2, bias, 1, gain, &mut rng),
                    second: SeparableConv::init(&mut store, &format!("{name}.conv2"), b, b, &kernel2, bias, 1, gain, &mut rng),
                    activation: act,
                }
            })
            .collect();
        let mut decoders = Vec::with_capacity(n);
        let mut heads = Vec::with_capacity(n);
        let mut cin = match config.bottleneck_skip {
            SkipMode::Sum => b,
            SkipMode::Concat => 2 * b,
        };
        for i in 0..n {
            let cout = ch[n - 1 - i];
            let conv_in = match config.skip_mode {
                SkipMode::Concat => cin + cout,
                SkipMode::Sum => cin,
            };
            let name = format!("decoder{}", i + 1);
            decoders.push(DecoderBlock {
                conv: SeparableConv::init(&mut store, &name, conv_in, cout, &kernel2, bias, 1, gain, &mut rng),
                activation: act,
                skip: config.skip_mode,
            });
            let mut head = PredictionHead::init(
                &mut store,
                &format!("head{}", i + 1),
                cout,
                config.head_bias,
                1 << (n - 1 - i),
                &mut rng,
            );
            head.scale = config.head_scale;
            heads.push(head);
            cin = cout;
        }
        Ok(Self {
            config,
            params: store,
            stem,
            encoders,
            residuals,
            decoders,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    /// `(name, shape, scalars)` per parameter tensor.
    pub fn parameter_table(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.len()))
            .collect()
    }

    /// Records the parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParams {
        self.params.bind(tape, requires_grad)
    }

    /// Runs the network on `input` of shape `(C, T, H, W)`.
    pub fn forward(&self, tape: &mut Tape<T>, params: &BoundParams, input: Var) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let shape = tape.shape(input)?.to_vec();
        if shape != cfg.input_shape() {
            return Err(Error::Tensor(crate::TensorError::ShapeMismatch {
                op: "model input",
                left: cfg.input_shape().to_vec(),
                right: shape,
            }));
        }
        let three_d = cfg.encoding == Encoding::ThreeD;
        let mut x = input;
        if !three_d {
            let [c, t, h, w] = cfg.input_shape();
            x = tape.reshape(x, &[c * t, h, w])?;
        }
        x = self.stem.forward(tape, params, x)?;
        let mut encoder_outputs = vec![x];
        for enc in &self.encoders {
            x = enc.forward(tape, params, x)?;
            encoder_outputs.push(x);
        }
        let bottleneck = self.planar(tape, x, "bottleneck")?;
        let mut r = bottleneck;
        let mut residual_outputs = Vec::with_capacity(self.residuals.len());
        for res in &self.residuals {
            r = res.forward(tape, params, r)?;
            residual_outputs.push(r);
        }
        x = match cfg.bottleneck_skip {
            SkipMode::Sum => tape.add(r, bottleneck)?,
            SkipMode::Concat => tape.concat(&[r, bottleneck], 0)?,
        };
        let n = self.encoders.len();
        let mut pool = OutputPool::new();
        let mut heads = Vec::with_capacity(n);
        let mut decoder_outputs = Vec::with_capacity(n);
        for (i, (dec, head)) in self.decoders.iter().zip(&self.heads).enumerate() {
            let source = encoder_outputs[n - 1 - i];
            let skip = if three_d {
                let last = tape.slice_last(source, 1)?;
                self.planar(tape, last, "skip")?
            } else {
                source
            };
            x = dec.forward(tape, params, x, skip)?;
            decoder_outputs.push(x);
            let h = head.forward(tape, params, x)?;
            heads.push(h);
            pool.accumulate(tape, h)?;
        }
        Ok(ForwardTrace {
            snapshots: pool.into_snapshots(),
            heads,
            encoder_outputs,
            residual_outputs,
            decoder_outputs,
            bottleneck,
        })
    }

    /// Drops a unit temporal axis from `(C, 1, H, W)`.
    fn planar(&self, tape: &mut Tape<T>, x: Var, what: &str) -> Result<Var> {
        let s = tape.shape(x)?.to_vec();
        match s.as_slice() {
            [_, _, _] => Ok(x),
            [c, 1, h, w] => Ok(tape.reshape(x, &[*c, *h, *w])?),
            _ => Err(Error::Config(format!(
                "{what} has shape {s:?}; the temporal axis did not collapse to 1"
            ))),
        }
    }

    /// Final flow prediction `(2, H, W)` without recording gradients.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let trace = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(trace.prediction())?.clone())
    }
}
