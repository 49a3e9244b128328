//! Translating-texture scenes rendered through an idealised event sensor.
//!
//! Intensity is the exact pixel-area coverage (box filter) of a pattern made
//! of axis-aligned bright regions over a uniform background. A pixel emits an
//! event each time its log intensity moves by `contrast_threshold` away from
//! the level recorded at its previous event. Crossing times are linearly
//! interpolated between simulation samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Event, FlowMap, Polarity, SensorDims};
use crate::error::{Error, Result};

/// Bright texture translated across the sensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    /// One bright rectangle, top-left corner at `(x, y)` at t = 0.
    Rectangle { x: f64, y: f64, width: f64, height: f64 },
    /// Infinite checkerboard; cells whose index parity is even are bright.
    Checkerboard { cell: f64 },
    /// Bright squares of side `size` scattered with `density` dots per pixel.
    RandomDots { density: f64, size: f64, seed: u64 },
}

/// Everything needed to render one synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub pattern: Pattern,
    /// Pattern velocity in pixels per second.
    pub velocity: (f64, f64),
    pub duration_us: u64,
    pub dims: SensorDims,
    pub contrast_threshold: f64,
    /// Interval the ground-truth flow displacement refers to.
    pub gt_interval_us: u64,
    pub background: f64,
    pub foreground: f64,
    pub time_step_us: u64,
}

impl SceneSpec {
    pub fn new(pattern: Pattern, velocity: (f64, f64), duration_us: u64, dims: SensorDims) -> Self {
        Self {
            pattern,
            velocity,
            duration_us,
            dims,
            contrast_threshold: 0.25,
            gt_interval_us: 100_000,
            background: 0.2,
            foreground: 1.0,
            time_step_us: 500,
        }
    }

    fn validate(&self) -> Result<()> {
        let zero_area = match &self.pattern {
            Pattern::Rectangle { width, height, .. } => !(*width > 0.0 && *height > 0.0),
            Pattern::Checkerboard { cell } => cell.is_nan() || *cell <= 0.0,
            Pattern::RandomDots { density, size, .. } => !(*density > 0.0 && *size > 0.0),
        };
        if zero_area {
            return Err(Error::InvalidArgument(format!(
                "pattern {:?} has zero area",
                self.pattern
            )));
        }
        if self.contrast_threshold.is_nan() || self.contrast_threshold <= 0.0 {
            return Err(Error::InvalidArgument("contrast threshold must be positive".into()));
        }
        if !(self.background > 0.0 && self.foreground > 0.0) {
            return Err(Error::InvalidArgument("intensities must be positive".into()));
        }
        if self.time_step_us == 0 || self.dims.pixels() == 0 {
            return Err(Error::InvalidArgument("time step and sensor must be non-empty".into()));
        }
        if !(self.velocity.0.is_finite() && self.velocity.1.is_finite()) {
            return Err(Error::InvalidArgument("velocity must be finite".into()));
        }
        Ok(())
    }

    /// Ground-truth displacement over one `gt_interval_us`.
    pub fn flow(&self) -> (f64, f64) {
        let t = self.gt_interval_us as f64;
        (self.velocity.0 * t / 1e6, self.velocity.1 * t / 1e6)
    }

    /// Sample instants of the simulation, all strictly before `duration_us`.
    pub fn sample_times(&self) -> impl Iterator<Item = u64> + '_ {
        (0..).map(move |k| k * self.time_step_us).take_while(move |&t| t < self.duration_us).chain(
            // the final partial step ends exactly at the duration
            (self.duration_us > 0).then_some(self.duration_us),
        )
    }
}

/// Precomputed geometry; random dot positions are fixed per scene.
pub(super) struct Renderer {
    spec: SceneSpec,
    dots: Vec<(f64, f64)>,
}

impl Renderer {
    pub(super) fn new(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let dots = match spec.pattern {
            Pattern::RandomDots { density, size, seed } => {
                let secs = spec.duration_us as f64 * 1e-6;
                let (dx, dy) = (spec.velocity.0 * secs, spec.velocity.1 * secs);
                // cover every position the sensor sees in pattern coordinates
                let x_lo = dx.min(0.0) - size - 1.0;
                let x_hi = spec.dims.width as f64 + dx.max(0.0) + 1.0;
                let y_lo = dy.min(0.0) - size - 1.0;
                let y_hi = spec.dims.height as f64 + dy.max(0.0) + 1.0;
                let n = ((x_hi - x_lo) * (y_hi - y_lo) * density).round() as usize;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| (rng.gen_range(x_lo..x_hi), rng.gen_range(y_lo..y_hi)))
                    .collect()
            }
            _ => Vec::new(),
        };
        Ok(Self {
            spec: spec.clone(),
            dots,
        })
    }

    fn offset(&self, t_us: u64) -> (f64, f64) {
        let t = t_us as f64;
        (self.spec.velocity.0 * t / 1e6, self.spec.velocity.1 * t / 1e6)
    }

    /// Bright-area fraction of every pixel at time `t_us`, row-major.
    pub(super) fn coverage(&self, t_us: u64) -> Vec<f64> {
        let SensorDims { height, width } = self.spec.dims;
        let (ox, oy) = self.offset(t_us);
        let mut cov = vec![0.0; height * width];
        match self.spec.pattern {
            Pattern::Rectangle { x, y, width: rw, height: rh } => {
                add_rect(&mut cov, self.spec.dims, (x + ox, y + oy), (rw, rh));
            }
            Pattern::RandomDots { size, .. } => {
                for &(x, y) in &self.dots {
                    add_rect(&mut cov, self.spec.dims, (x + ox, y + oy), (size, size));
                }
                cov.iter_mut().for_each(|c| *c = c.min(1.0));
            }
            Pattern::Checkerboard { cell } => {
                let sx: Vec<f64> = (0..width)
                    .map(|x| square_wave_integral(x as f64 + 1.0 - ox, cell) - square_wave_integral(x as f64 - ox, cell))
                    .collect();
                for y in 0..height {
                    let sy = square_wave_integral(y as f64 + 1.0 - oy, cell)
                        - square_wave_integral(y as f64 - oy, cell);
                    for x in 0..width {
                        cov[y * width + x] = 0.5 * (1.0 + sx[x] * sy);
                    }
                }
            }
        }
        cov
    }

    pub(super) fn log_intensity(&self, t_us: u64) -> Vec<f64> {
        let (bg, fg) = (self.spec.background, self.spec.foreground);
        self.coverage(t_us)
            .into_iter()
            .map(|c| (bg + (fg - bg) * c).ln())
            .collect()
    }
}

/// Adds the overlap area of `[x, x+w) × [y, y+h)` with every unit pixel.
fn add_rect(cov: &mut [f64], dims: SensorDims, (x, y): (f64, f64), (w, h): (f64, f64)) {
    let x_end = x + w;
    let y_end = y + h;
    let px_lo = x.floor().max(0.0) as usize;
    let py_lo = y.floor().max(0.0) as usize;
    if x_end <= 0.0 || y_end <= 0.0 {
        return;
    }
    let px_hi = (x_end.ceil() as usize).min(dims.width);
    let py_hi = (y_end.ceil() as usize).min(dims.height);
    for py in py_lo..py_hi {
        let oy = (y_end.min(py as f64 + 1.0) - y.max(py as f64)).max(0.0);
        if oy == 0.0 {
            continue;
        }
        for px in px_lo..px_hi {
            let ox = (x_end.min(px as f64 + 1.0) - x.max(px as f64)).max(0.0);
            cov[py * dims.width + px] += ox * oy;
        }
    }
}

/// Antiderivative of the ±1 square wave that is +1 on even cells.
fn square_wave_integral(x: f64, cell: f64) -> f64 {
    let n = (x / cell).floor();
    let r = x - n * cell;
    if (n as i64).rem_euclid(2) == 0 {
        r
    } else {
        cell - r
    }
}

/// Renders `spec` into a time-sorted event stream and its ground-truth flow.
///
/// The flow is the constant displacement over `gt_interval_us`; the mask is
/// the pattern support at the end of the scene (the whole sensor for the
/// space-filling textures).
pub fn generate_synthetic_scene(spec: &SceneSpec) -> Result<(Vec<Event>, FlowMap)> {
    let renderer = Renderer::new(spec)?;
    let c = spec.contrast_threshold;
    let SensorDims { width, .. } = spec.dims;
    let mut times = spec.sample_times();
    let t_first = times.next().unwrap_or(0);
    let mut previous = renderer.log_intensity(t_first);
    let mut reference = previous.clone();
    let mut t_prev = t_first;
    let mut events = Vec::new();
    let moving = spec.velocity != (0.0, 0.0);
    if moving {
        for t in times {
            let current = renderer.log_intensity(t);
            let step = (t - t_prev) as f64;
            for (i, (&now, (&before, level))) in current
                .iter()
                .zip(previous.iter().zip(reference.iter_mut()))
                .enumerate()
            {
                let slope = now - before;
                loop {
                    let (target, p) = if now - *level >= c {
                        (*level + c, Polarity::Positive)
                    } else if *level - now >= c {
                        (*level - c, Polarity::Negative)
                    } else {
                        break;
                    };
                    let frac = if slope != 0.0 {
                        ((target - before) / slope).clamp(0.0, 1.0)
                    } else {
                        1.0
                    };
                    let te = t_prev + (frac * step).floor() as u64;
                    events.push(Event::new((i % width) as u16, (i / width) as u16, te, p));
                    *level = target;
                }
            }
            previous = current;
            t_prev = t;
        }
        events.sort_by_key(|e| e.t);
    }

    let (u, v) = spec.flow();
    let valid = match spec.pattern {
        Pattern::Rectangle { .. } => renderer
            .coverage(spec.duration_us)
            .iter()
            .map(|&c| c > 1e-12)
            .collect(),
        _ => vec![true; spec.dims.pixels()],
    };
    let n = spec.dims.pixels();
    let flow = FlowMap::new(spec.dims, vec![u as f32; n], vec![v as f32; n], valid)?;
    Ok((events, flow))
}
