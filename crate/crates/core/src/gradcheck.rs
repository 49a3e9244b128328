//! Central finite-difference verification of tape gradients (float64).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Padding, Tape, Var};
use crate::error::Result;
use crate::events::{FlowMap, SensorDims};
use crate::layers::{BoundParams, FireMode, IfActivation};
use crate::model::{Model, ModelConfig};
use crate::objectives::{self, LossWeights};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Floor on the relative-error denominator so near-zero gradients compare absolutely.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `d f / d inputs` from the tape with central differences.
///
/// At most `max_per_input` coordinates of each input are probed, spread
/// evenly over the tensor.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], h: f64, max_per_input: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)?.data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        })
        .collect::<std::result::Result<_, _>>()?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let step = n.div_ceil(max_per_input.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k][i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// `Σ out ⊙ w` for a fixed random `w`, turning any op into a scalar.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out)?.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, &shape, 1.0));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod)?)
}

fn random_flow(rng: &mut ChaCha8Rng, dims: SensorDims) -> FlowMap {
    let n = dims.pixels();
    let u = (0..n).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
    let v = (0..n).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
    let valid = (0..n).map(|i| i % 5 != 3).collect();
    FlowMap::new(dims, u, v, valid).expect("consistent planes")
}

/// Finite-difference checks of every differentiable primitive.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, m) = (DEFAULT_STEP, 64);
    let mut out = Vec::new();

    let x = random(&mut rng, &[3, 6, 5], 1.0);
    let w = random(&mut rng, &[4, 3, 3, 3], 1.0);
    let b = random(&mut rng, &[4], 1.0);
    out.push(check("conv2d", &[x.clone(), w, b], h, m, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), Padding::Same, 1)?;
        project(t, y, 1)
    })?);
    let w = random(&mut rng, &[2, 3, 3, 3], 1.0);
    out.push(check("conv2d_valid_stride2", &[x, w], h, m, |t, v| {
        let y = t.conv2d(v[0], v[1], None, Padding::Valid, 2)?;
        project(t, y, 2)
    })?);

    let x = random(&mut rng, &[2, 5, 6, 6], 1.0);
    let w = random(&mut rng, &[2, 3, 3, 3], 1.0);
    out.push(check("depthwise3d", &[x.clone(), w.clone()], h, m, |t, v| {
        let y = t.depthwise(v[0], v[1], 1)?;
        project(t, y, 3)
    })?);
    out.push(check("depthwise3d_stride2", &[x, w], h, m, |t, v| {
        let y = t.depthwise(v[0], v[1], 2)?;
        project(t, y, 4)
    })?);
    let x = random(&mut rng, &[3, 5, 7], 1.0);
    let w = random(&mut rng, &[3, 5, 5], 1.0);
    out.push(check("depthwise2d", &[x, w], h, m, |t, v| {
        let y = t.depthwise(v[0], v[1], 1)?;
        project(t, y, 5)
    })?);

    let x = random(&mut rng, &[3, 2, 4, 4], 1.0);
    let w = random(&mut rng, &[5, 3], 1.0);
    let b = random(&mut rng, &[5], 1.0);
    out.push(check("pointwise", &[x, w, b], h, m, |t, v| {
        let y = t.pointwise(v[0], v[1], Some(v[2]))?;
        project(t, y, 6)
    })?);

    let x = random(&mut rng, &[2, 3, 4, 6], 1.0);
    out.push(check("maxpool2d", &[x], h, m, |t, v| {
        let y = t.maxpool2d(v[0], 2)?;
        project(t, y, 7)
    })?);
    let x = random(&mut rng, &[2, 3, 3], 1.0);
    out.push(check("upsample_nn", &[x], h, m, |t, v| {
        let y = t.upsample_nn(v[0], 2)?;
        project(t, y, 8)
    })?);

    let soft = IfActivation {
        mode: FireMode::Soft,
        ..IfActivation::default()
    };
    let x = random(&mut rng, &[40], 2.5);
    out.push(check("if_soft", &[x], h, m, |t, v| {
        let y = soft.fire(t, v[0])?;
        project(t, y, 9)
    })?);

    let (a, b) = (random(&mut rng, &[2, 3, 2], 1.0), random(&mut rng, &[1, 3, 2], 1.0));
    out.push(check("concat_slice_reshape", &[a, b], h, m, |t, v| {
        let c = t.concat(&[v[0], v[1]], 0)?;
        let s = t.slice_last(c, 2)?;
        let r = t.reshape(s, &[9])?;
        let q = t.mul(r, r)?;
        let q = t.scale(q, 0.5)?;
        let q = t.add(q, r)?;
        project(t, q, 10)
    })?);

    let dims = SensorDims::new(3, 4);
    let gt = random_flow(&mut rng, dims);
    let pred = random(&mut rng, &[2, 3, 4], 3.0);
    out.push(check("loss_mod", std::slice::from_ref(&pred), h, m, |t, v| objectives::loss_mod(t, v[0], &gt))?);
    out.push(check("loss_ang", std::slice::from_ref(&pred), h, m, |t, v| {
        objectives::loss_ang(t, v[0], &gt, objectives::EPSILON)
    })?);
    out.push(check("loss_relative", &[pred], h, m, |t, v| {
        objectives::loss_relative(t, v[0], &gt, objectives::EPSILON)
    })?);
    Ok(out)
}

/// Configuration of the soft-mode toy network used end to end.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        input_channels: 2,
        stem_channels: 3,
        num_encoders: 2,
        spatial_kernel: 3,
        temporal_kernel: 3,
        num_frames: 7,
        sensor_dims: SensorDims::new(8, 8),
        fire_mode: FireMode::Soft,
        threshold: 0.0,
        layer_bias: true,
        ..ModelConfig::default()
    }
}

/// Gradient of the summed trace loss w.r.t. every parameter and the input.
pub fn toy_network(seed: u64, max_per_param: usize) -> Result<GradCheckReport> {
    let config = toy_config();
    let model = Model::<f64>::build(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let input = Tensor::from_fn(config.input_shape(), |_| f64::from(rng.gen_range(0u8..3)));
    let gt = random_flow(&mut rng, config.sensor_dims);
    let mut tensors: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
    // head biases start at zero; move them off so their gradient path is exercised
    for t in &mut tensors {
        for x in t.data_mut() {
            if *x == 0.0 {
                *x = rng.gen_range(-0.1..0.1);
            }
        }
    }
    tensors.push(input);
    let n_params = tensors.len() - 1;
    let weights = LossWeights::default();
    check("toy_network", &tensors, DEFAULT_STEP, max_per_param, |tape, vars| {
        let bound = BoundParams::from_vars(vars[..n_params].to_vec());
        let trace = model.forward(tape, &bound, vars[n_params])?;
        Ok(objectives::trace_loss(tape, &trace.snapshots, &gt, &weights)?.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_small_denominators() {
        assert_eq!(relative_error(1e-9, 0.0), 1e-6);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn op_suite_passes() {
        for r in op_suite(17).unwrap() {
            assert!(r.passed(DEFAULT_TOLERANCE), "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn toy_network_matches_finite_differences() {
        let r = toy_network(5, 6).unwrap();
        assert!(r.passed(DEFAULT_TOLERANCE), "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::from_fn([4], |i| i as f64 + 0.5);
        let r = check("wrong", &[x], DEFAULT_STEP, 8, |t, v| {
            let val = t.value(v[0])?.data().iter().map(|a| a * a).sum::<f64>();
            let value = Tensor::scalar(val);
            Ok(t.custom("wrong", &[v[0]], value, Box::new(|g: &[f64]| vec![Some(vec![g[0]; 4])]))?)
        })
        .unwrap();
        assert!(!r.passed(DEFAULT_TOLERANCE));
    }
}
