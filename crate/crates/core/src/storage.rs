//! Little-endian file formats and flow rendering.
//!
//! | file | layout |
//! |------|--------|
//! | `EVT1` | magic, W u16, H u16, count u64, then `count × (x u16, y u16, t u64, p i8)` |
//! | `FLW1` | magic, W u16, H u16, u plane f32, v plane f32, validity plane u8 |
//! | `HST1` | magic, C u16, T u16, H u16, W u16, frame µs u64, t0 µs u64, mode u8, counts u32 |
//! | `CKP1` | magic, version u32, header length u64, JSON header, f32 blobs |
//!
//! Planes are row-major. Readers reject bad magic, short or long payloads and
//! out-of-range values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    sliding_window, validate_stream, Event, FlowMap, HistogramSequence, Polarity, PolarityMode, SensorDims, WindowSpec,
};
use crate::model::ModelConfig;
use crate::training::{Checkpoint, RngState, Sample, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

const EVENT_RECORD: usize = 13;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Bounds-checked little-endian reader.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str, magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(format_err(format!(
                "{what}: bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(Self { buf, pos: 4, what })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format_err(format!(
                "{}: truncated at byte {} (needed {n} more, {} left)",
                self.what,
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| format_err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }

    /// Declared payload must fit exactly in what is left.
    fn expect_remaining(&self, n: u128) -> Result<()> {
        let left = (self.buf.len() - self.pos) as u128;
        if left != n {
            return Err(format_err(format!(
                "{}: header promises {n} payload bytes, file has {left}",
                self.what
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        self.expect_remaining(0)
    }
}

fn dim_u16(what: &str, n: usize) -> Result<u16> {
    u16::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} does not fit in u16")))
}

pub fn encode_events(dims: SensorDims, events: &[Event]) -> Result<Vec<u8>> {
    validate_stream(events, dims)?;
    let mut out = Vec::with_capacity(16 + EVENT_RECORD * events.len());
    out.extend_from_slice(b"EVT1");
    out.extend_from_slice(&dim_u16("width", dims.width)?.to_le_bytes());
    out.extend_from_slice(&dim_u16("height", dims.height)?.to_le_bytes());
    out.extend_from_slice(&(events.len() as u64).to_le_bytes());
    for e in events {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.p.sign() as u8);
    }
    Ok(out)
}

pub fn decode_events(bytes: &[u8]) -> Result<(SensorDims, Vec<Event>)> {
    let mut r = Reader::new(bytes, "EVT1", b"EVT1")?;
    let width = r.u16()? as usize;
    let height = r.u16()? as usize;
    let count = r.u64()?;
    r.expect_remaining(u128::from(count) * EVENT_RECORD as u128)?;
    let dims = SensorDims::new(height, width);
    let mut events = Vec::with_capacity(count as usize);
    for index in 0..count as usize {
        let x = r.u16()?;
        let y = r.u16()?;
        let t = r.u64()?;
        let raw = r.u8()? as i8;
        let p = Polarity::from_sign(raw)
            .ok_or_else(|| format_err(format!("EVT1: event #{index} has polarity {raw}, expected +1 or -1")))?;
        events.push(Event::new(x, y, t, p));
    }
    r.finish()?;
    validate_stream(&events, dims)?;
    Ok((dims, events))
}

pub fn write_events(path: &Path, dims: SensorDims, events: &[Event]) -> Result<()> {
    fs::write(path, encode_events(dims, events)?)?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<(SensorDims, Vec<Event>)> {
    decode_events(&fs::read(path)?)
}

pub fn encode_flow(flow: &FlowMap) -> Result<Vec<u8>> {
    let d = flow.dims();
    let n = d.pixels();
    let mut out = Vec::with_capacity(8 + 9 * n);
    out.extend_from_slice(b"FLW1");
    out.extend_from_slice(&dim_u16("width", d.width)?.to_le_bytes());
    out.extend_from_slice(&dim_u16("height", d.height)?.to_le_bytes());
    for plane in [&flow.u, &flow.v] {
        for x in plane.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend(flow.valid.iter().map(|&b| u8::from(b)));
    Ok(out)
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowMap> {
    let mut r = Reader::new(bytes, "FLW1", b"FLW1")?;
    let width = r.u16()? as usize;
    let height = r.u16()? as usize;
    let n = width * height;
    r.expect_remaining(9 * n as u128)?;
    let u = r.f32s(n)?;
    let v = r.f32s(n)?;
    let valid = r
        .take(n)?
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(format_err(format!("FLW1: validity byte {b} at pixel {i}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    FlowMap::new(SensorDims::new(height, width), u, v, valid)
}

pub fn write_flow(path: &Path, flow: &FlowMap) -> Result<()> {
    fs::write(path, encode_flow(flow)?)?;
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<FlowMap> {
    decode_flow(&fs::read(path)?)
}

pub fn encode_histograms(h: &HistogramSequence) -> Result<Vec<u8>> {
    let [c, t, hh, w] = h.shape();
    let mut out = Vec::with_capacity(29 + 4 * h.counts().len());
    out.extend_from_slice(b"HST1");
    for (what, n) in [("channels", c), ("frames", t), ("height", hh), ("width", w)] {
        out.extend_from_slice(&dim_u16(what, n)?.to_le_bytes());
    }
    out.extend_from_slice(&h.frame_duration_us.to_le_bytes());
    out.extend_from_slice(&h.t0_us.to_le_bytes());
    out.push(match h.polarity_mode {
        PolarityMode::Separate => 0,
        PolarityMode::Combined => 1,
    });
    for x in h.counts() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_histograms(bytes: &[u8]) -> Result<HistogramSequence> {
    let mut r = Reader::new(bytes, "HST1", b"HST1")?;
    let c = r.u16()? as usize;
    let t = r.u16()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let dur = r.u64()?;
    let t0 = r.u64()?;
    let mode = match r.u8()? {
        0 => PolarityMode::Separate,
        1 => PolarityMode::Combined,
        m => return Err(format_err(format!("HST1: unknown polarity mode {m}"))),
    };
    if mode.channels() != c {
        return Err(format_err(format!("HST1: {c} channels contradict polarity mode {mode:?}")));
    }
    let n = c * t * h * w;
    r.expect_remaining(4 * n as u128)?;
    let counts = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    HistogramSequence::from_counts(mode, t, SensorDims::new(h, w), t0, dur, counts)
}

pub fn write_histograms(path: &Path, h: &HistogramSequence) -> Result<()> {
    fs::write(path, encode_histograms(h)?)?;
    Ok(())
}

pub fn read_histograms(path: &Path) -> Result<HistogramSequence> {
    decode_histograms(&fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: u64,
    optimizer_step: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    params: Vec<(String, Vec<usize>)>,
    first_moments: Vec<usize>,
    second_moments: Vec<usize>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Result<[u8; 32]> {
    let bad = || format_err(format!("CKP1: rng seed {s:?} is not 64 hex digits"));
    if s.len() != 64 || !s.is_ascii() {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model_config: ck.model_config.clone(),
        train_config: ck.train_config.clone(),
        epoch: ck.epoch,
        optimizer_step: ck.optimizer_step,
        rng_seed: hex(&ck.rng.seed),
        rng_stream: ck.rng.stream,
        rng_word_pos: ck.rng.word_pos.to_string(),
        params: ck.params.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect(),
        first_moments: ck.first_moments.iter().map(Vec::len).collect(),
        second_moments: ck.second_moments.iter().map(Vec::len).collect(),
    };
    for (name, shape, values) in &ck.params {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::InvalidArgument(format!("parameter {name} does not match its shape")));
        }
    }
    let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(b"CKP1");
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let blobs = ck
        .params
        .iter()
        .map(|(_, _, v)| v)
        .chain(&ck.first_moments)
        .chain(&ck.second_moments);
    for blob in blobs {
        for x in blob {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "CKP1", b"CKP1")?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!(
            "CKP1: version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = r.u64()?;
    let json = r.take(usize::try_from(len).map_err(|_| format_err("CKP1: header too large"))?)?;
    let h: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| format_err(format!("CKP1: header: {e}")))?;
    let sizes: Vec<usize> = h
        .params
        .iter()
        .map(|(_, s)| s.iter().product())
        .chain(h.first_moments.iter().copied())
        .chain(h.second_moments.iter().copied())
        .collect();
    r.expect_remaining(4 * sizes.iter().map(|&n| n as u128).sum::<u128>())?;
    let mut params = Vec::with_capacity(h.params.len());
    for (name, shape) in h.params {
        let n = shape.iter().product();
        params.push((name, shape, r.f32s(n)?));
    }
    let first_moments = h.first_moments.iter().map(|&n| r.f32s(n)).collect::<Result<_>>()?;
    let second_moments = h.second_moments.iter().map(|&n| r.f32s(n)).collect::<Result<_>>()?;
    r.finish()?;
    Ok(Checkpoint {
        model_config: h.model_config,
        train_config: h.train_config,
        params,
        optimizer_step: h.optimizer_step,
        first_moments,
        second_moments,
        rng: RngState {
            seed: unhex32(&h.rng_seed)?,
            stream: h.rng_stream,
            word_pos: h
                .rng_word_pos
                .parse()
                .map_err(|_| format_err("CKP1: rng word position is not an integer"))?,
        },
        epoch: h.epoch,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Chroma reached at full magnitude, in Lab units.
pub const RENDER_CHROMA: f64 = 60.0;

/// Nearest-rank 99th percentile of valid magnitudes; 1 when that is 0 or
/// nothing is valid.
pub fn auto_max_magnitude(flow: &FlowMap) -> f64 {
    let mut mags: Vec<f64> = (0..flow.u.len())
        .filter(|&i| flow.valid[i])
        .map(|i| f64::from(flow.u[i]).hypot(f64::from(flow.v[i])))
        .collect();
    if mags.is_empty() {
        return 1.0;
    }
    mags.sort_by(f64::total_cmp);
    let rank = (0.99 * mags.len() as f64).ceil() as usize;
    let p = mags[rank.clamp(1, mags.len()) - 1];
    if p > 0.0 {
        p
    } else {
        1.0
    }
}

fn lab_to_srgb(l: f64, a: f64, b: f64) -> [u8; 3] {
    // D65 white
    let (xn, yn, zn) = (0.950_47, 1.0, 1.088_83);
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let inv = |f: f64| {
        if f > 6.0 / 29.0 {
            f * f * f
        } else {
            3.0 * (6.0f64 / 29.0).powi(2) * (f - 4.0 / 29.0)
        }
    };
    let (x, y, z) = (xn * inv(fx), yn * inv(fy), zn * inv(fz));
    let r = 3.240_454_2 * x - 1.537_138_5 * y - 0.498_531_4 * z;
    let g = -0.969_266_0 * x + 1.876_010_8 * y + 0.041_556_0 * z;
    let bl = 0.055_643_4 * x - 0.204_025_9 * y + 1.057_225_2 * z;
    let gamma = |c: f64| {
        let c = c.clamp(0.0, 1.0);
        let s = if c <= 0.003_130_8 {
            12.92 * c
        } else {
            1.055 * c.powf(1.0 / 2.4) - 0.055
        };
        (s * 255.0).round() as u8
    };
    [gamma(r), gamma(g), gamma(bl)]
}

/// Binary PPM (P6) rendering: lightness `L = 100·m` with `m = min(|f| / max, 1)`,
/// `(a, b) = RENDER_CHROMA · m · (cos θ, sin θ)` with θ the flow direction.
/// Invalid pixels are black.
pub fn render_flow_ppm(flow: &FlowMap, max_magnitude: Option<f64>) -> Result<Vec<u8>> {
    let max = match max_magnitude {
        Some(m) if m > 0.0 && m.is_finite() => m,
        Some(m) => return Err(Error::InvalidArgument(format!("max magnitude must be positive, got {m}"))),
        None => auto_max_magnitude(flow),
    };
    let d = flow.dims();
    let mut out = format!("P6\n{} {}\n255\n", d.width, d.height).into_bytes();
    for i in 0..d.pixels() {
        if !flow.valid[i] {
            out.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let (u, v) = (f64::from(flow.u[i]), f64::from(flow.v[i]));
        let m = (u.hypot(v) / max).min(1.0);
        let theta = v.atan2(u);
        out.extend_from_slice(&lab_to_srgb(
            100.0 * m,
            RENDER_CHROMA * m * theta.cos(),
            RENDER_CHROMA * m * theta.sin(),
        ));
    }
    Ok(out)
}

/// Event/flow file pairs of a directory: every `<stem>.evt` with a `<stem>.flw`.
pub fn dataset_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut pairs = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("evt") {
            continue;
        }
        let flow = path.with_extension("flw");
        if !flow.is_file() {
            return Err(format_err(format!("{} has no matching .flw file", path.display())));
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        pairs.push((stem, path, flow));
    }
    pairs.sort();
    Ok(pairs)
}

/// Windows of every recording in `dir`, each paired with the recording's
/// ground truth.
pub fn load_samples(dir: &Path, window: &WindowSpec) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (name, evt, flw) in dataset_pairs(dir)? {
        let (dims, events) = read_events(&evt)?;
        let target = read_flow(&flw)?;
        if target.dims() != dims {
            return Err(format_err(format!(
                "{name}: events are {}x{} but flow is {}x{}",
                dims.width,
                dims.height,
                target.dims().width,
                target.dims().height
            )));
        }
        for input in sliding_window(&events, dims, window)? {
            samples.push(Sample {
                input,
                target: target.clone(),
                sequence: name.clone(),
            });
        }
    }
    Ok(samples)
}
