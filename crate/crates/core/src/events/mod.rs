//! Raw events, per-frame count histograms and ground-truth flow maps.

mod synth;

pub use synth::{generate_synthetic_scene, Pattern, SceneSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Sign of the log-luminance change that triggered an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_sign(sign: i8) -> Option<Self> {
        match sign {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

/// One asynchronous camera event. `t` is in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }

    /// Mirrors the column: `x -> width - 1 - x`.
    pub fn flip_x(self, width: usize) -> Self {
        Self {
            x: (width - 1 - self.x as usize) as u16,
            ..self
        }
    }
}

/// Sensor resolution as (height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorDims {
    pub height: usize,
    pub width: usize,
}

impl SensorDims {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn pixels(self) -> usize {
        self.height * self.width
    }
}

/// Checks sensor bounds for every event and non-decreasing timestamps.
pub fn validate_stream(events: &[Event], dims: SensorDims) -> Result<()> {
    let mut previous = 0;
    for (index, e) in events.iter().enumerate() {
        check_bounds(index, e, dims)?;
        if e.t < previous {
            return Err(Error::UnsortedEvents {
                index,
                t: e.t,
                previous,
            });
        }
        previous = e.t;
    }
    Ok(())
}

fn check_bounds(index: usize, e: &Event, dims: SensorDims) -> Result<()> {
    if e.x as usize >= dims.width || e.y as usize >= dims.height {
        return Err(Error::EventOutOfBounds {
            index,
            x: e.x.into(),
            y: e.y.into(),
            width: dims.width,
            height: dims.height,
        });
    }
    Ok(())
}

/// How polarities map onto histogram channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarityMode {
    /// Channel 0 counts positive events, channel 1 negative ones.
    #[default]
    Separate,
    /// A single channel with the total count.
    Combined,
}

impl PolarityMode {
    pub fn channels(self) -> usize {
        match self {
            PolarityMode::Separate => 2,
            PolarityMode::Combined => 1,
        }
    }

    fn channel(self, p: Polarity) -> usize {
        match (self, p) {
            (PolarityMode::Separate, Polarity::Negative) => 1,
            _ => 0,
        }
    }
}

/// Event counts of shape (C, T, H, W).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistogramSequence {
    counts: Vec<u32>,
    frames: usize,
    dims: SensorDims,
    pub frame_duration_us: u64,
    pub t0_us: u64,
    pub polarity_mode: PolarityMode,
}

impl HistogramSequence {
    pub fn zeros(
        polarity_mode: PolarityMode,
        frames: usize,
        dims: SensorDims,
        t0_us: u64,
        frame_duration_us: u64,
    ) -> Self {
        Self {
            counts: vec![0; polarity_mode.channels() * frames * dims.pixels()],
            frames,
            dims,
            frame_duration_us,
            t0_us,
            polarity_mode,
        }
    }

    pub fn from_counts(
        polarity_mode: PolarityMode,
        frames: usize,
        dims: SensorDims,
        t0_us: u64,
        frame_duration_us: u64,
        counts: Vec<u32>,
    ) -> Result<Self> {
        let expected = polarity_mode.channels() * frames * dims.pixels();
        if counts.len() != expected {
            return Err(Error::Format(format!(
                "histogram payload has {} counts, expected {expected}",
                counts.len()
            )));
        }
        Ok(Self {
            counts,
            frames,
            dims,
            frame_duration_us,
            t0_us,
            polarity_mode,
        })
    }

    pub fn channels(&self) -> usize {
        self.polarity_mode.channels()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> SensorDims {
        self.dims
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.channels(), self.frames, self.dims.height, self.dims.width]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    fn offset(&self, c: usize, k: usize, y: usize, x: usize) -> usize {
        ((c * self.frames + k) * self.dims.height + y) * self.dims.width + x
    }

    pub fn get(&self, c: usize, k: usize, y: usize, x: usize) -> u32 {
        self.counts[self.offset(c, k, y, x)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Total count per channel.
    pub fn channel_totals(&self) -> Vec<u64> {
        let block = self.frames * self.dims.pixels();
        self.counts
            .chunks(block.max(1))
            .map(|c| c.iter().map(|&v| u64::from(v)).sum())
            .collect()
    }

    /// Fraction of pixels with at least one event, per frame.
    pub fn frame_occupancy(&self) -> Vec<f64> {
        let px = self.dims.pixels();
        (0..self.frames)
            .map(|k| {
                let occupied = (0..px)
                    .filter(|&i| (0..self.channels()).any(|c| self.counts[(c * self.frames + k) * px + i] > 0))
                    .count();
                occupied as f64 / px.max(1) as f64
            })
            .collect()
    }

    /// Channel sum of a separate-polarity histogram.
    pub fn combine_polarities(&self) -> Self {
        if self.polarity_mode == PolarityMode::Combined {
            return self.clone();
        }
        let block = self.frames * self.dims.pixels();
        let counts = (0..block)
            .map(|i| self.counts[i] + self.counts[block + i])
            .collect();
        Self {
            counts,
            polarity_mode: PolarityMode::Combined,
            ..self.clone()
        }
    }

    /// Mirrors every frame along the x axis.
    pub fn flip_x(&self) -> Self {
        let w = self.dims.width;
        let mut counts = self.counts.clone();
        for row in counts.chunks_exact_mut(w) {
            row.reverse();
        }
        Self {
            counts,
            ..self.clone()
        }
    }

    /// Counts as real-valued network input of shape (C, T, H, W).
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(self.shape(), |i| T::from_f64_lossy(f64::from(self.counts[i])))
    }
}

/// Counts events per polarity channel, pixel and frame.
///
/// Frame `k` covers `[t0 + k·dur, t0 + (k+1)·dur)`; events outside the
/// window are ignored. Every event is bounds-checked.
pub fn encode_histograms(
    events: &[Event],
    t0_us: u64,
    frame_duration_us: u64,
    num_frames: usize,
    dims: SensorDims,
    polarity_mode: PolarityMode,
) -> Result<HistogramSequence> {
    if frame_duration_us == 0 {
        return Err(Error::InvalidArgument("frame duration must be positive".into()));
    }
    if num_frames == 0 {
        return Err(Error::InvalidArgument("need at least one frame".into()));
    }
    let mut hist = HistogramSequence::zeros(polarity_mode, num_frames, dims, t0_us, frame_duration_us);
    for (index, e) in events.iter().enumerate() {
        check_bounds(index, e, dims)?;
        if e.t < t0_us {
            continue;
        }
        let k = (e.t - t0_us) / frame_duration_us;
        if k >= num_frames as u64 {
            continue;
        }
        let c = polarity_mode.channel(e.p);
        let o = hist.offset(c, k as usize, e.y as usize, e.x as usize);
        hist.counts[o] += 1;
    }
    Ok(hist)
}

/// Parameters of [`sliding_window`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub window_frames: usize,
    pub frame_duration_us: u64,
    pub stride_frames: usize,
    /// Start of frame 0; defaults to the first event's timestamp.
    pub t0_us: Option<u64>,
    /// Exclusive end of the recording. Only complete frames are used when
    /// given; otherwise the stream ends with the frame holding the last event.
    pub end_us: Option<u64>,
    pub polarity_mode: PolarityMode,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            window_frames: 21,
            frame_duration_us: 9000,
            stride_frames: 1,
            t0_us: None,
            end_us: None,
            polarity_mode: PolarityMode::Separate,
        }
    }
}

/// Iterator over overlapping fixed-length windows of a sorted stream.
pub struct SlidingWindow<'a> {
    events: &'a [Event],
    spec: WindowSpec,
    dims: SensorDims,
    t0: u64,
    total_frames: usize,
    next_start: usize,
}

impl SlidingWindow<'_> {
    pub fn total_frames(&self) -> usize {
        self.total_frames
    }
}

/// Slices `events` into windows of `window_frames` consecutive frames, shifted
/// by `stride_frames`. A stream shorter than one window yields nothing.
pub fn sliding_window<'a>(
    events: &'a [Event],
    dims: SensorDims,
    spec: &WindowSpec,
) -> Result<SlidingWindow<'a>> {
    if spec.stride_frames == 0 || spec.window_frames == 0 || spec.frame_duration_us == 0 {
        return Err(Error::InvalidArgument(
            "window, stride and frame duration must all be positive".into(),
        ));
    }
    validate_stream(events, dims)?;
    let t0 = spec.t0_us.or(events.first().map(|e| e.t)).unwrap_or(0);
    let dur = spec.frame_duration_us;
    let total_frames = match (spec.end_us, events.last()) {
        (Some(end), _) => (end.saturating_sub(t0) / dur) as usize,
        (None, Some(last)) if last.t >= t0 => ((last.t - t0) / dur + 1) as usize,
        (None, _) => 0,
    };
    Ok(SlidingWindow {
        events,
        spec: spec.clone(),
        dims,
        t0,
        total_frames,
        next_start: 0,
    })
}

impl Iterator for SlidingWindow<'_> {
    type Item = HistogramSequence;

    fn next(&mut self) -> Option<HistogramSequence> {
        let start = self.next_start;
        if start + self.spec.window_frames > self.total_frames {
            return None;
        }
        self.next_start += self.spec.stride_frames;
        let dur = self.spec.frame_duration_us;
        let t_start = self.t0 + start as u64 * dur;
        let t_end = t_start + self.spec.window_frames as u64 * dur;
        let lo = self.events.partition_point(|e| e.t < t_start);
        let hi = self.events.partition_point(|e| e.t < t_end);
        // Bounds were validated up front.
        encode_histograms(
            &self.events[lo..hi],
            t_start,
            dur,
            self.spec.window_frames,
            self.dims,
            self.spec.polarity_mode,
        )
        .ok()
    }
}

/// Dense optical flow (u, v) with a validity mask, all row-major `H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    dims: SensorDims,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub valid: Vec<bool>,
}

impl FlowMap {
    pub fn new(dims: SensorDims, u: Vec<f32>, v: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        let n = dims.pixels();
        if u.len() != n || v.len() != n || valid.len() != n {
            return Err(Error::Format(format!(
                "flow planes have lengths {}/{}/{}, expected {n}",
                u.len(),
                v.len(),
                valid.len()
            )));
        }
        Ok(Self { dims, u, v, valid })
    }

    pub fn zeros(dims: SensorDims) -> Self {
        let n = dims.pixels();
        Self {
            dims,
            u: vec![0.0; n],
            v: vec![0.0; n],
            valid: vec![true; n],
        }
    }

    pub fn uniform(dims: SensorDims, u: f32, v: f32) -> Self {
        let n = dims.pixels();
        Self {
            dims,
            u: vec![u; n],
            v: vec![v; n],
            valid: vec![true; n],
        }
    }

    pub fn dims(&self) -> SensorDims {
        self.dims
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Mirrors along x and negates the horizontal component.
    pub fn flip_x(&self) -> Self {
        let w = self.dims.width;
        let mut out = self.clone();
        for ((u, v), m) in out
            .u
            .chunks_exact_mut(w)
            .zip(out.v.chunks_exact_mut(w))
            .zip(out.valid.chunks_exact_mut(w))
        {
            u.reverse();
            u.iter_mut().for_each(|x| *x = -*x);
            v.reverse();
            m.reverse();
        }
        out
    }

    /// (2, H, W) tensor of (u, v).
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let n = self.dims.pixels();
        Tensor::from_fn([2, self.dims.height, self.dims.width], |i| {
            let v = if i < n { self.u[i] } else { self.v[i - n] };
            T::from_f64_lossy(f64::from(v))
        })
    }

    /// Builds a flow map from a (2, H, W) prediction and a mask.
    pub fn from_tensor<T: Scalar>(pred: &Tensor<T>, valid: Vec<bool>) -> Result<Self> {
        let [c, h, w] = pred.shape() else {
            return Err(Error::InvalidArgument(format!(
                "flow tensor must be (2, H, W), got {:?}",
                pred.shape()
            )));
        };
        if *c != 2 {
            return Err(Error::InvalidArgument(format!(
                "flow tensor must have 2 channels, got {c}"
            )));
        }
        let n = h * w;
        let d = pred.data();
        let u = d[..n].iter().map(|v| v.as_f64() as f32).collect();
        let v = d[n..].iter().map(|v| v.as_f64() as f32).collect();
        Self::new(SensorDims::new(*h, *w), u, v, valid)
    }
}
