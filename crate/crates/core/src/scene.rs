//! Shoebox acoustics and scene dataset generation.
//!
//! A scene is one or two tone-coded utterances placed in a rectangular
//! room, rendered to first-order ambisonics through image-source room
//! impulse responses, mixed with a controlled overlap, and written to
//! disk with a JSON-lines manifest.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::foa::{foa_gains, save_foa_wav, FoaClip, FoaError, SAMPLE_RATE};
use crate::localisation::{Direction, DirectionError};
use crate::parallel::{indexed_map, ExecMode};

/// Speed of sound in m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

/// Taps in the fractional-delay kernel used by the image-source model.
pub const DELAY_KERNEL_TAPS: usize = 16;

/// Analysis window for first-arrival direction estimates: 5 ms.
pub const FIRST_ARRIVAL_SAMPLES: usize = 80;

/// Samples per utterance symbol (100 ms).
const SYMBOL_SAMPLES: usize = 1600;

/// Cosine ramp length at each symbol edge (10 ms).
const RAMP_SAMPLES: usize = 160;

/// Peak amplitude of a rendered symbol tone.
const SYMBOL_AMPLITUDE: f64 = 0.5;

/// Minimum source distance from the receiver in metres.
const MIN_SOURCE_DISTANCE: f64 = 0.5;

/// Minimum source distance from any wall in metres.
const SOURCE_WALL_MARGIN: f64 = 0.3;

/// Mixtures are rescaled so no sample exceeds this.
const PEAK_LIMIT: f64 = 0.9;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid room: {0}")]
    InvalidRoom(String),
    #[error("geometry violation: {0}")]
    Geometry(String),
    #[error("placement rejected after {attempts} attempts (room too small)")]
    PlacementRejected { attempts: usize },
    #[error("overlap ratio {0} outside [0, 1]")]
    InvalidOverlap(f64),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("malformed manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Direction(#[from] DirectionError),
    #[error(transparent)]
    Foa(#[from] FoaError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Rectangular room with uniform wall absorption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RoomWire", into = "RoomWire")]
pub struct RoomSpec {
    dims: [f64; 3],
    absorption: f64,
    max_order: usize,
}

#[derive(Serialize, Deserialize)]
struct RoomWire {
    dims: [f64; 3],
    absorption: f64,
    max_order: usize,
}

impl TryFrom<RoomWire> for RoomSpec {
    type Error = SceneError;

    fn try_from(w: RoomWire) -> Result<Self, SceneError> {
        RoomSpec::new(w.dims, w.absorption, w.max_order)
    }
}

impl From<RoomSpec> for RoomWire {
    fn from(r: RoomSpec) -> Self {
        Self { dims: r.dims, absorption: r.absorption, max_order: r.max_order }
    }
}

impl RoomSpec {
    /// Dimensions must each lie in [2, 15] m and absorption in (0, 1].
    pub fn new(dims: [f64; 3], absorption: f64, max_order: usize) -> Result<Self, SceneError> {
        for d in dims {
            if !(2.0..=15.0).contains(&d) {
                return Err(SceneError::InvalidRoom(format!("dimension {d} outside [2, 15] m")));
            }
        }
        if !(absorption > 0.0 && absorption <= 1.0) {
            return Err(SceneError::InvalidRoom(format!("absorption {absorption} outside (0, 1]")));
        }
        Ok(Self { dims, absorption, max_order })
    }

    pub fn dims(&self) -> [f64; 3] {
        self.dims
    }

    pub fn absorption(&self) -> f64 {
        self.absorption
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    /// True when `p` is strictly inside the walls.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] > 0.0 && p[i] < self.dims[i])
    }
}

/// A source position together with its direction and distance as seen
/// from the receiver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourcePlacement {
    pub position: [f64; 3],
    pub direction_from_receiver: Direction,
    pub distance: f64,
}

/// 4-channel room impulse response at 16 kHz, channels W, X, Y, Z.
#[derive(Debug, Clone, PartialEq)]
pub struct FoaRir {
    pub taps: [Vec<f64>; 4],
}

impl FoaRir {
    pub fn len(&self) -> usize {
        self.taps[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How the two sources of a scene are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    /// One source in the left window (azimuth 60..120), one in the
    /// right window (azimuth -120..-60), elevations -30..30.
    LeftRight,
    /// Directions uniform over the sphere band with elevation -60..60.
    Random,
}

impl std::fmt::Display for PlacementMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlacementMode::LeftRight => "left_right",
            PlacementMode::Random => "random",
        })
    }
}

impl std::str::FromStr for PlacementMode {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<PlacementMode, SceneError> {
        match s {
            "left_right" => Ok(PlacementMode::LeftRight),
            "random" => Ok(PlacementMode::Random),
            _ => Err(SceneError::InvalidConfig(format!("unknown placement mode {s:?}"))),
        }
    }
}

/// Whether the second source waits for the first or starts with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sequential,
    Simultaneous,
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Sequential => "sequential",
            Activation::Simultaneous => "simultaneous",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Activation, SceneError> {
        match s {
            "sequential" => Ok(Activation::Sequential),
            "simultaneous" => Ok(Activation::Simultaneous),
            _ => Err(SceneError::InvalidConfig(format!("unknown activation {s:?}"))),
        }
    }
}

/// One manifest line: everything needed to interpret a scene WAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: u64,
    pub room: RoomSpec,
    pub receiver: [f64; 3],
    pub placements: Vec<SourcePlacement>,
    pub transcripts: Vec<String>,
    pub onsets: Vec<usize>,
    pub overlap_ratio: f64,
    pub mode: PlacementMode,
    pub activation: Activation,
    pub audio: String,
    pub gain: f64,
}

/// Render a symbol index sequence to audio: symbol k is a 100 ms tone
/// at (400 + 150k) Hz with 10 ms cosine ramps at both edges.
pub fn render_symbols(symbols: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(symbols.len() * SYMBOL_SAMPLES);
    for &k in symbols {
        let freq = 400.0 + 150.0 * k as f64;
        for i in 0..SYMBOL_SAMPLES {
            let env = if i < RAMP_SAMPLES {
                0.5 * (1.0 - (PI * i as f64 / RAMP_SAMPLES as f64).cos())
            } else if i >= SYMBOL_SAMPLES - RAMP_SAMPLES {
                let j = SYMBOL_SAMPLES - 1 - i;
                0.5 * (1.0 - (PI * j as f64 / RAMP_SAMPLES as f64).cos())
            } else {
                1.0
            };
            let phase = 2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64;
            out.push(SYMBOL_AMPLITUDE * env * phase.sin());
        }
    }
    out
}

/// Parse a space-separated toy transcript back to symbol indices.
pub fn transcript_symbols(transcript: &str) -> Result<Vec<usize>, SceneError> {
    transcript
        .split_whitespace()
        .map(|tok| {
            let mut chars = tok.chars();
            match (chars.next(), chars.next()) {
                (Some(c @ 'a'..='z'), None) => Ok(c as usize - 'a' as usize),
                _ => Err(SceneError::BadManifest(format!("bad transcript token {tok:?}"))),
            }
        })
        .collect()
}

/// Random toy utterance: `length` symbols drawn from the first
/// `lexicon_size` letters, rendered as tones.
pub fn gen_toy_utterance(
    rng: &mut impl Rng,
    lexicon_size: usize,
    len_range: (usize, usize),
) -> Result<(Vec<f64>, String), SceneError> {
    if lexicon_size == 0 || lexicon_size > 26 {
        return Err(SceneError::InvalidConfig(format!(
            "lexicon size {lexicon_size} outside 1..=26"
        )));
    }
    if len_range.0 == 0 || len_range.0 > len_range.1 {
        return Err(SceneError::InvalidConfig(format!("bad utterance length range {len_range:?}")));
    }
    let len = rng.gen_range(len_range.0..=len_range.1);
    let symbols: Vec<usize> = (0..len).map(|_| rng.gen_range(0..lexicon_size)).collect();
    let transcript = symbols
        .iter()
        .map(|&k| ((b'a' + k as u8) as char).to_string())
        .collect::<Vec<_>>()
        .join(" ");
    Ok((render_symbols(&symbols), transcript))
}

fn sample_direction(mode: PlacementMode, slot: usize, rng: &mut impl Rng) -> Direction {
    let (az, el) = match mode {
        PlacementMode::LeftRight => {
            let az = if slot == 0 {
                rng.gen_range(60.0..=120.0)
            } else {
                rng.gen_range(-120.0..=-60.0)
            };
            (az, rng.gen_range(-30.0..=30.0))
        }
        PlacementMode::Random => {
            let az = 180.0 - rng.gen_range(0.0..360.0);
            let band = 60.0f64.to_radians().sin();
            let el = rng.gen_range(-band..=band).asin().to_degrees();
            (az, el)
        }
    };
    Direction::new(az, el).expect("sampled angles are in range")
}

/// Farthest admissible distance from `origin` along `dir` keeping a
/// wall margin; `None` if the origin already violates the margin.
fn max_distance(room: &RoomSpec, origin: [f64; 3], dir: [f64; 3], margin: f64) -> Option<f64> {
    let mut t_max = f64::INFINITY;
    for i in 0..3 {
        let (lo, hi) = (margin, room.dims()[i] - margin);
        if origin[i] < lo || origin[i] > hi {
            return None;
        }
        if dir[i] > 1e-12 {
            t_max = t_max.min((hi - origin[i]) / dir[i]);
        } else if dir[i] < -1e-12 {
            t_max = t_max.min((lo - origin[i]) / dir[i]);
        }
    }
    Some(t_max)
}

/// Sample a pair of source placements around `receiver`.
///
/// Directions follow `mode`; distances are uniform between 0.5 m and
/// the farthest point that keeps a 0.3 m wall margin. Directions whose
/// admissible range is empty are rejected and redrawn, up to 1000
/// attempts per source.
pub fn sample_placement(
    mode: PlacementMode,
    rng: &mut impl Rng,
    room: &RoomSpec,
    receiver: [f64; 3],
) -> Result<(SourcePlacement, SourcePlacement), SceneError> {
    for i in 0..3 {
        let d = receiver[i].min(room.dims()[i] - receiver[i]);
        if d < 0.5 {
            return Err(SceneError::Geometry(format!(
                "receiver wall clearance {d:.3} m below 0.5 m"
            )));
        }
    }
    let mut out = Vec::with_capacity(2);
    for slot in 0..2 {
        let mut placed = None;
        for _ in 0..1000 {
            let direction = sample_direction(mode, slot, rng);
            let unit = direction.unit_vector();
            let Some(t_max) = max_distance(room, receiver, unit, SOURCE_WALL_MARGIN) else {
                continue;
            };
            if t_max < MIN_SOURCE_DISTANCE {
                continue;
            }
            let distance = rng.gen_range(MIN_SOURCE_DISTANCE..=t_max);
            let position = std::array::from_fn(|i| receiver[i] + distance * unit[i]);
            placed = Some(SourcePlacement { position, direction_from_receiver: direction, distance });
            break;
        }
        out.push(placed.ok_or(SceneError::PlacementRejected { attempts: 1000 })?);
    }
    Ok((out[0], out[1]))
}

/// Causal 16-tap fractional-delay kernel for a sub-sample delay `frac`
/// in [0, 1): a windowed sinc whose peak sits `frac + 7.5` taps in, so
/// every image shares the same small group latency and the kernel never
/// rings ahead of the geometric arrival.
fn delay_kernel(frac: f64) -> [f64; DELAY_KERNEL_TAPS] {
    let center = frac + (DELAY_KERNEL_TAPS as f64 - 1.0) / 2.0;
    let half = DELAY_KERNEL_TAPS as f64 / 2.0;
    std::array::from_fn(|j| {
        let x = j as f64 - center;
        if x.abs() >= half {
            0.0
        } else {
            let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
            sinc * 0.5 * (1.0 + (PI * x / half).cos())
        }
    })
}

/// Shoebox image-source room impulse response in first-order
/// ambisonics.
///
/// Images are enumerated up to `room.max_order()` reflections per
/// axis. Each image arrives from its own direction with amplitude
/// (1-absorption)^reflections / max(distance, 0.3), placed with a
/// fractional-delay kernel at delay distance/343 s. Trailing taps
/// holding less than 1e-6 of the total energy are truncated.
pub fn image_source_rir(
    room: &RoomSpec,
    src: [f64; 3],
    rcv: [f64; 3],
) -> Result<FoaRir, SceneError> {
    if !room.contains(src) || !room.contains(rcv) {
        return Err(SceneError::Geometry("source or receiver outside room".into()));
    }
    let d2: f64 = (0..3).map(|i| (src[i] - rcv[i]).powi(2)).sum();
    if d2 < 1e-6 {
        return Err(SceneError::Geometry("source coincides with receiver".into()));
    }

    let order = room.max_order() as i64;
    // Per axis, an image (n, p) sits at (1-2p)·s + 2nL and has seen
    // |2n - p| walls.
    let mut axis_images: [Vec<(f64, u32)>; 3] = Default::default();
    for axis in 0..3 {
        let l = room.dims()[axis];
        let s = src[axis];
        for p in 0..2i64 {
            let mut n = -order;
            while 2 * n - p <= order {
                if (2 * n - p).abs() <= order {
                    let pos = (1 - 2 * p) as f64 * s + 2.0 * n as f64 * l;
                    axis_images[axis].push((pos, (2 * n - p).unsigned_abs() as u32));
                }
                n += 1;
            }
        }
    }

    let fs = SAMPLE_RATE as f64;
    let reflect = 1.0 - room.absorption();
    let mut contributions: Vec<(usize, f64, [f64; 4])> = Vec::new();
    let mut max_end = 0usize;
    for &(ix, cx) in &axis_images[0] {
        for &(iy, cy) in &axis_images[1] {
            for &(iz, cz) in &axis_images[2] {
                let v = [ix - rcv[0], iy - rcv[1], iz - rcv[2]];
                let dist = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let count = cx + cy + cz;
                let amp = reflect.powi(count as i32) / dist.max(0.3);
                if amp == 0.0 {
                    continue;
                }
                let dir = Direction::from_vector(v).expect("image at nonzero distance");
                let tau = dist / SPEED_OF_SOUND * fs;
                let i0 = tau.floor() as usize;
                contributions.push((i0, tau - tau.floor(), foa_gains(dir).map(|g| g * amp)));
                max_end = max_end.max(i0 + DELAY_KERNEL_TAPS);
            }
        }
    }

    let mut taps: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; max_end]);
    for (i0, frac, gains) in contributions {
        let kernel = delay_kernel(frac);
        for (j, h) in kernel.iter().enumerate() {
            for c in 0..4 {
                taps[c][i0 + j] += gains[c] * h;
            }
        }
    }

    let total: f64 = taps.iter().flat_map(|c| c.iter()).map(|v| v * v).sum();
    let mut tail = 0.0;
    let mut keep = max_end;
    for i in (0..max_end).rev() {
        tail += (0..4).map(|c| taps[c][i] * taps[c][i]).sum::<f64>();
        if tail >= 1e-6 * total {
            break;
        }
        keep = i;
    }
    for c in &mut taps {
        c.truncate(keep.max(1));
    }

    Ok(FoaRir { taps })
}

/// Direction of the earliest arrival in a FOA impulse response.
///
/// The onset is the first W tap at or above 1% of the W peak; the
/// direction is read from the W-weighted dipole channels over the 5 ms
/// window that follows. `None` for an all-zero response.
pub fn first_arrival_direction(rir: &FoaRir) -> Option<Direction> {
    let w = &rir.taps[0];
    let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return None;
    }
    let onset = w.iter().position(|v| v.abs() >= 0.01 * peak)?;
    let end = (onset + FIRST_ARRIVAL_SAMPLES).min(w.len());
    let mut v = [0.0f64; 3];
    for i in onset..end {
        for d in 0..3 {
            v[d] += w[i] * rir.taps[d + 1][i];
        }
    }
    Direction::from_vector(v)
}

/// Linear convolution of a mono signal with each RIR channel, FFT
/// accelerated; output length is signal + RIR - 1.
pub fn convolve_foa(mono: &[f64], rir: &FoaRir) -> Result<FoaClip, SceneError> {
    if mono.is_empty() {
        return Err(SceneError::EmptyInput("mono signal"));
    }
    if rir.is_empty() {
        return Err(SceneError::EmptyInput("rir"));
    }
    let out_len = mono.len() + rir.len() - 1;
    let size = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);

    let mut sig: Vec<Complex<f64>> = mono.iter().map(|&v| Complex::new(v, 0.0)).collect();
    sig.resize(size, Complex::new(0.0, 0.0));
    fft.process(&mut sig);

    let mut channels: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::new());
    for c in 0..4 {
        let mut buf: Vec<Complex<f64>> =
            rir.taps[c].iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(size, Complex::new(0.0, 0.0));
        fft.process(&mut buf);
        for (b, s) in buf.iter_mut().zip(&sig) {
            *b *= s;
        }
        ifft.process(&mut buf);
        let scale = 1.0 / size as f64;
        channels[c] = buf[..out_len].iter().map(|v| v.re * scale).collect();
    }
    Ok(FoaClip::new(channels)?)
}

/// Mixing plan for a two-source scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixPlan {
    /// Second source starts so that this fraction of the shorter clip
    /// overlaps the first; 0 is strict concatenation.
    Overlap(f64),
    /// Both sources start at sample 0.
    Simultaneous,
}

/// A mixed scene with its onsets and the peak-limiting gain applied.
#[derive(Debug, Clone)]
pub struct MixedScene {
    pub clip: FoaClip,
    pub onsets: [usize; 2],
    pub gain: f64,
}

/// Overlay two wet clips.
///
/// Sequential plans place the second onset at
/// `len1 - round(r * min(len1, len2))`; simultaneous plans at 0. The
/// sum is rescaled to a 0.9 peak when it would exceed it, and the gain
/// is reported for the manifest.
pub fn mix_scene(wet1: &FoaClip, wet2: &FoaClip, plan: MixPlan) -> Result<MixedScene, SceneError> {
    if wet1.is_empty() || wet2.is_empty() {
        return Err(SceneError::EmptyInput("wet clip"));
    }
    let onset2 = match plan {
        MixPlan::Overlap(r) => {
            if !(0.0..=1.0).contains(&r) {
                return Err(SceneError::InvalidOverlap(r));
            }
            let span = (r * wet1.len().min(wet2.len()) as f64).round() as usize;
            wet1.len() - span.min(wet1.len())
        }
        MixPlan::Simultaneous => 0,
    };
    let len = wet1.len().max(onset2 + wet2.len());
    let mut clip = FoaClip::silence(len);
    for c in 0..4 {
        let ch = clip.channel_mut(c);
        for (i, v) in wet1.channel(c).iter().enumerate() {
            ch[i] += v;
        }
        for (i, v) in wet2.channel(c).iter().enumerate() {
            ch[onset2 + i] += v;
        }
    }
    let gain = limit_peak(&mut clip);
    Ok(MixedScene { clip, onsets: [0, onset2], gain })
}

/// Rescale a clip to the 0.9 peak limit when needed; returns the gain
/// applied (1.0 when already within the limit).
pub fn limit_peak(clip: &mut FoaClip) -> f64 {
    let peak = clip.peak();
    if peak > PEAK_LIMIT {
        let gain = PEAK_LIMIT / peak;
        clip.scale(gain);
        gain
    } else {
        1.0
    }
}

/// Dataset generation parameters. Rooms, placements, and utterances
/// are drawn per scene from the ranges here.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    /// Sources per scene: 1 (localisation/recognition data) or 2.
    pub sources: usize,
    pub mode: PlacementMode,
    pub activation: Activation,
    pub overlap_ratio: f64,
    pub seed: u64,
    pub lexicon_size: usize,
    pub utterance_len: (usize, usize),
    pub dims_min: [f64; 3],
    pub dims_max: [f64; 3],
    pub absorption: (f64, f64),
    pub max_order: usize,
    /// Receiver wall clearance in metres.
    pub receiver_clearance: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_scenes: 100,
            sources: 2,
            mode: PlacementMode::LeftRight,
            activation: Activation::Sequential,
            overlap_ratio: 0.0,
            seed: 0,
            lexicon_size: 16,
            utterance_len: (5, 12),
            dims_min: [5.0, 5.0, 2.8],
            dims_max: [9.0, 9.0, 3.5],
            absorption: (0.5, 0.85),
            max_order: 3,
            receiver_clearance: 1.0,
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<(), SceneError> {
        if self.n_scenes == 0 {
            return Err(SceneError::InvalidConfig("n_scenes must be positive".into()));
        }
        if !(1..=2).contains(&self.sources) {
            return Err(SceneError::InvalidConfig(format!("sources {} not 1 or 2", self.sources)));
        }
        if !(0.0..=1.0).contains(&self.overlap_ratio) {
            return Err(SceneError::InvalidOverlap(self.overlap_ratio));
        }
        for i in 0..3 {
            if self.dims_min[i] > self.dims_max[i] {
                return Err(SceneError::InvalidConfig("dims_min above dims_max".into()));
            }
        }
        if self.absorption.0 > self.absorption.1 {
            return Err(SceneError::InvalidConfig("absorption range reversed".into()));
        }
        if self.receiver_clearance < 0.5 {
            return Err(SceneError::InvalidConfig("receiver clearance below 0.5 m".into()));
        }
        Ok(())
    }

    /// key=value description written next to each generated dataset.
    fn summary(&self) -> String {
        format!(
            "mode={}\nactivation={}\nn_scenes={}\nsources={}\noverlap_ratio={}\nseed={}\n\
             lexicon_size={}\nutterance_len={}..{}\ndims_min={}x{}x{}\ndims_max={}x{}x{}\n\
             absorption={}..{}\nmax_order={}\nreceiver_clearance={}\n",
            self.mode,
            self.activation,
            self.n_scenes,
            self.sources,
            self.overlap_ratio,
            self.seed,
            self.lexicon_size,
            self.utterance_len.0,
            self.utterance_len.1,
            self.dims_min[0],
            self.dims_min[1],
            self.dims_min[2],
            self.dims_max[0],
            self.dims_max[1],
            self.dims_max[2],
            self.absorption.0,
            self.absorption.1,
            self.max_order,
            self.receiver_clearance,
        )
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for one scene's generator; depends only on the global seed and
/// the scene id, never on generation order.
pub fn scene_seed(global_seed: u64, scene_id: u64) -> u64 {
    splitmix64(splitmix64(global_seed) ^ splitmix64(scene_id.wrapping_add(1)))
}

fn wav_name(scene_id: u64) -> String {
    format!("scene_{scene_id:05}.wav")
}

/// A drawn scene must keep its spatial labels recoverable: the mean
/// intensity direction of each isolated wet source may drift at most
/// this many degrees from the geometric direction, or the whole scene
/// is redrawn.
const CONSISTENCY_LIMIT_DEG: f64 = 4.5;

/// Redraw attempts before a scene is declared unbuildable.
const SCENE_ATTEMPTS: usize = 20;

/// Generate one scene: audio plus manifest record. Pure given the
/// config and scene id.
///
/// Scenes whose reverberation biases the intensity-vector direction of
/// any isolated source by more than [`CONSISTENCY_LIMIT_DEG`] are
/// rejected and redrawn from the same stream, so every emitted scene
/// has recoverable ground truth.
pub fn build_scene(cfg: &DatasetConfig, scene_id: u64) -> Result<(SceneManifest, FoaClip), SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, scene_id));
    for _ in 0..SCENE_ATTEMPTS {
        match draw_scene(cfg, scene_id, &mut rng)? {
            Some(out) => return Ok(out),
            None => continue,
        }
    }
    Err(SceneError::PlacementRejected { attempts: SCENE_ATTEMPTS })
}

/// One draw of a scene; `None` when the consistency check rejects it.
fn draw_scene(
    cfg: &DatasetConfig,
    scene_id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(SceneManifest, FoaClip)>, SceneError> {
    let dims = std::array::from_fn(|i| rng.gen_range(cfg.dims_min[i]..=cfg.dims_max[i]));
    let absorption = rng.gen_range(cfg.absorption.0..=cfg.absorption.1);
    let room = RoomSpec::new(dims, absorption, cfg.max_order)?;
    let receiver = std::array::from_fn(|i| {
        rng.gen_range(cfg.receiver_clearance..=dims[i] - cfg.receiver_clearance)
    });

    let pair = sample_placement(cfg.mode, rng, &room, receiver)?;
    let placements: Vec<SourcePlacement> = if cfg.sources == 2 {
        vec![pair.0, pair.1]
    } else {
        // Single-source scenes keep the mode's full coverage: in
        // left_right mode a coin decides the side.
        match cfg.mode {
            PlacementMode::LeftRight if rng.gen_bool(0.5) => vec![pair.1],
            _ => vec![pair.0],
        }
    };

    let mut transcripts = Vec::with_capacity(placements.len());
    let mut wet = Vec::with_capacity(placements.len());
    for p in &placements {
        let (mono, transcript) = gen_toy_utterance(rng, cfg.lexicon_size, cfg.utterance_len)?;
        let rir = image_source_rir(&room, p.position, receiver)?;
        wet.push(convolve_foa(&mono, &rir)?);
        transcripts.push(transcript);
    }

    let stft_cfg = crate::foa::StftConfig::default();
    for (p, w) in placements.iter().zip(&wet) {
        let iv = crate::foa::intensity_vectors(w, &stft_cfg)?;
        let consistent = crate::localisation::doa_from_iv(&iv).is_some_and(|est| {
            crate::localisation::angular_distance(&p.direction_from_receiver, &est)
                <= CONSISTENCY_LIMIT_DEG
        });
        if !consistent {
            return Ok(None);
        }
    }

    let (clip, onsets, gain) = if wet.len() == 2 {
        let plan = match cfg.activation {
            Activation::Sequential => MixPlan::Overlap(cfg.overlap_ratio),
            Activation::Simultaneous => MixPlan::Simultaneous,
        };
        let mixed = mix_scene(&wet[0], &wet[1], plan)?;
        (mixed.clip, mixed.onsets.to_vec(), mixed.gain)
    } else {
        let mut clip = wet.pop().expect("one source");
        let gain = limit_peak(&mut clip);
        (clip, vec![0], gain)
    };

    let manifest = SceneManifest {
        scene_id,
        room,
        receiver,
        placements,
        transcripts,
        onsets,
        overlap_ratio: cfg.overlap_ratio,
        mode: cfg.mode,
        activation: cfg.activation,
        audio: wav_name(scene_id),
        gain,
    };
    Ok(Some((manifest, clip)))
}

/// Generate a dataset: one WAV per scene plus `manifest.jsonl` and a
/// `config.txt` key=value summary in `out_dir`. Scene content depends
/// only on (seed, scene_id), so regeneration is byte-identical.
pub fn build_dataset(
    cfg: &DatasetConfig,
    out_dir: &Path,
    exec: ExecMode,
) -> Result<Vec<SceneManifest>, SceneError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let results = indexed_map(exec, cfg.n_scenes, |i| -> Result<SceneManifest, SceneError> {
        let (manifest, clip) = build_scene(cfg, i as u64)?;
        save_foa_wav(out_dir.join(&manifest.audio), &clip)?;
        Ok(manifest)
    });
    let manifests: Vec<SceneManifest> = results.into_iter().collect::<Result<_, _>>()?;

    let mut lines = String::new();
    for m in &manifests {
        lines.push_str(&serde_json::to_string(m)?);
        lines.push('\n');
    }
    let mut f = std::fs::File::create(out_dir.join("manifest.jsonl"))?;
    f.write_all(lines.as_bytes())?;
    std::fs::write(out_dir.join("config.txt"), cfg.summary())?;
    Ok(manifests)
}

/// Load and validate a JSON-lines manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<SceneManifest>, SceneError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: SceneManifest = serde_json::from_str(line)
            .map_err(|e| SceneError::BadManifest(format!("line {}: {e}", ln + 1)))?;
        validate_manifest(&m)?;
        out.push(m);
    }
    if out.is_empty() {
        return Err(SceneError::BadManifest(format!("{}: no scenes", path.display())));
    }
    Ok(out)
}

fn validate_manifest(m: &SceneManifest) -> Result<(), SceneError> {
    if m.placements.is_empty() || m.placements.len() > 2 {
        return Err(SceneError::BadManifest(format!(
            "scene {}: {} placements",
            m.scene_id,
            m.placements.len()
        )));
    }
    if m.placements.len() != m.transcripts.len() || m.placements.len() != m.onsets.len() {
        return Err(SceneError::BadManifest(format!("scene {}: ragged source lists", m.scene_id)));
    }
    if !(0.0..=1.0).contains(&m.overlap_ratio) {
        return Err(SceneError::InvalidOverlap(m.overlap_ratio));
    }
    for p in &m.placements {
        if !m.room.contains(p.position) {
            return Err(SceneError::BadManifest(format!(
                "scene {}: source outside room",
                m.scene_id
            )));
        }
        let v: [f64; 3] = std::array::from_fn(|i| p.position[i] - m.receiver[i]);
        let implied = Direction::from_vector(v).ok_or_else(|| {
            SceneError::BadManifest(format!("scene {}: source on receiver", m.scene_id))
        })?;
        let drift = crate::localisation::angular_distance(&implied, &p.direction_from_receiver);
        if drift > 1e-6 {
            return Err(SceneError::BadManifest(format!(
                "scene {}: direction drifts {drift:.2e} deg from positions",
                m.scene_id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foa::{intensity_vectors, stft, StftConfig};
    use crate::localisation::{angular_distance, doa_from_iv};
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn big_room() -> RoomSpec {
        RoomSpec::new([10.0, 10.0, 3.4], 0.7, 3).unwrap()
    }

    #[test]
    fn room_validation() {
        assert!(RoomSpec::new([1.5, 5.0, 3.0], 0.5, 3).is_err());
        assert!(RoomSpec::new([5.0, 5.0, 3.0], 0.0, 3).is_err());
        assert!(RoomSpec::new([5.0, 5.0, 3.0], 1.1, 3).is_err());
        assert!(RoomSpec::new([15.0, 2.0, 3.0], 1.0, 0).is_ok());
    }

    #[test]
    fn utterance_is_deterministic_and_bounded() {
        let (sig1, t1) = gen_toy_utterance(&mut rng(9), 16, (5, 12)).unwrap();
        let (sig2, t2) = gen_toy_utterance(&mut rng(9), 16, (5, 12)).unwrap();
        assert_eq!(sig1, sig2);
        assert_eq!(t1, t2);
        for seed in 0..50 {
            let (sig, t) = gen_toy_utterance(&mut rng(seed), 16, (5, 12)).unwrap();
            let n = t.split_whitespace().count();
            assert!((5..=12).contains(&n), "length {n}");
            assert_eq!(sig.len(), n * SYMBOL_SAMPLES);
            assert!(t.split_whitespace().all(|s| {
                s.len() == 1 && ('a'..='p').contains(&s.chars().next().unwrap())
            }));
        }
        assert!(gen_toy_utterance(&mut rng(0), 27, (5, 12)).is_err());
        assert!(gen_toy_utterance(&mut rng(0), 16, (5, 4)).is_err());
    }

    #[test]
    fn symbol_tone_frequency() {
        // Symbol 0 is 400 Hz: with 20 Hz bins the argmax lands on bin 20;
        // symbol 3 is 850 Hz, between bins 42 and 43.
        let spec = stft(&render_symbols(&[0; 5]), &StftConfig::default()).unwrap();
        let frame = spec.frame(2);
        let argmax = (0..spec.bin_count())
            .max_by(|&a, &b| frame[a].norm().total_cmp(&frame[b].norm()))
            .unwrap();
        assert_eq!(argmax, 20);

        let spec = stft(&render_symbols(&[3; 5]), &StftConfig::default()).unwrap();
        let frame = spec.frame(2);
        let argmax = (0..spec.bin_count())
            .max_by(|&a, &b| frame[a].norm().total_cmp(&frame[b].norm()))
            .unwrap();
        assert!(argmax == 42 || argmax == 43, "argmax {argmax}");
    }

    #[test]
    fn transcript_roundtrip() {
        let (_, t) = gen_toy_utterance(&mut rng(3), 16, (5, 12)).unwrap();
        let symbols = transcript_symbols(&t).unwrap();
        let rendered = render_symbols(&symbols);
        let (sig, _) = gen_toy_utterance(&mut rng(3), 16, (5, 12)).unwrap();
        assert_eq!(sig, rendered);
        assert!(transcript_symbols("a B c").is_err());
        assert!(transcript_symbols("ab").is_err());
    }

    #[test]
    fn placement_windows() {
        let room = big_room();
        let rcv = [5.0, 5.0, 1.7];
        let mut r = rng(11);
        for _ in 0..200 {
            let (a, b) = sample_placement(PlacementMode::LeftRight, &mut r, &room, rcv).unwrap();
            let (az_a, el_a) =
                (a.direction_from_receiver.azimuth_deg(), a.direction_from_receiver.elevation_deg());
            let (az_b, el_b) =
                (b.direction_from_receiver.azimuth_deg(), b.direction_from_receiver.elevation_deg());
            assert!((60.0..=120.0).contains(&az_a), "left azimuth {az_a}");
            assert!((-120.0..=-60.0).contains(&az_b), "right azimuth {az_b}");
            assert!((-30.0..=30.0).contains(&el_a) && (-30.0..=30.0).contains(&el_b));
            for p in [a, b] {
                assert!(room.contains(p.position));
                assert!(p.distance >= 0.5);
            }
        }
    }

    #[test]
    fn placement_direction_consistency() {
        let room = big_room();
        let rcv = [4.0, 6.0, 1.5];
        let mut r = rng(12);
        for _ in 0..100 {
            let (a, _) = sample_placement(PlacementMode::Random, &mut r, &room, rcv).unwrap();
            let v: [f64; 3] = std::array::from_fn(|i| a.position[i] - rcv[i]);
            let implied = Direction::from_vector(v).unwrap();
            assert!(angular_distance(&implied, &a.direction_from_receiver) < 1e-6);
        }
    }

    #[test]
    fn placement_random_azimuth_uniformity() {
        // Chi-square over 12 azimuth bins, 10k draws; the 0.01 critical
        // value for 11 degrees of freedom is 24.725.
        let room = big_room();
        let rcv = [5.0, 5.0, 1.7];
        let mut r = rng(13);
        let mut bins = [0usize; 12];
        let n = 10_000;
        for _ in 0..n {
            let (a, _) = sample_placement(PlacementMode::Random, &mut r, &room, rcv).unwrap();
            let az = a.direction_from_receiver.azimuth_deg();
            let bin = (((az + 180.0) / 30.0) as usize).min(11);
            bins[bin] += 1;
        }
        let expected = n as f64 / 12.0;
        let chi2: f64 =
            bins.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 24.725, "chi2 {chi2}, bins {bins:?}");
    }

    #[test]
    fn placement_rejects_bad_receiver() {
        let room = big_room();
        let err = sample_placement(PlacementMode::Random, &mut rng(0), &room, [0.2, 5.0, 1.5]);
        assert!(matches!(err, Err(SceneError::Geometry(_))));
    }

    #[test]
    fn anechoic_rir_is_single_group() {
        let room = RoomSpec::new([8.0, 6.0, 3.0], 1.0, 3).unwrap();
        let rcv = [4.0, 3.0, 1.5];
        let src = [6.0, 4.0, 1.5];
        let rir = image_source_rir(&room, src, rcv).unwrap();
        let dist = ((src[0] - rcv[0]).powi(2) + (src[1] - rcv[1]).powi(2)).sqrt();
        let tau = dist / SPEED_OF_SOUND * SAMPLE_RATE as f64;
        let first = rir.taps[0].iter().position(|v| *v != 0.0).unwrap();
        assert!((first as f64 - tau).abs() <= 1.0, "first {first}, tau {tau}");
        let nonzero: Vec<usize> = (0..rir.len()).filter(|&i| rir.taps[0][i] != 0.0).collect();
        assert!(nonzero.last().unwrap() - nonzero.first().unwrap() < DELAY_KERNEL_TAPS);

        let truth = Direction::from_vector([2.0, 1.0, 0.0]).unwrap();
        let est = first_arrival_direction(&rir).unwrap();
        assert!(angular_distance(&truth, &est) < 1.0);
    }

    #[test]
    fn anechoic_distance_halves_amplitude() {
        // Distances chosen as whole-sample delays so both impulses use
        // the same fractional kernel.
        let room = RoomSpec::new([12.0, 8.0, 3.0], 1.0, 3).unwrap();
        let rcv = [2.0, 4.0, 1.5];
        let d = 50.0 * SPEED_OF_SOUND / SAMPLE_RATE as f64;
        let near = image_source_rir(&room, [2.0 + d, 4.0, 1.5], rcv).unwrap();
        let far = image_source_rir(&room, [2.0 + 2.0 * d, 4.0, 1.5], rcv).unwrap();
        let sum_near: f64 = near.taps[0].iter().map(|v| v.abs()).sum();
        let sum_far: f64 = far.taps[0].iter().map(|v| v.abs()).sum();
        assert!((sum_far / sum_near - 0.5).abs() < 1e-9);
    }

    #[test]
    fn anechoic_convolved_doa_matches() {
        let room = RoomSpec::new([8.0, 8.0, 3.2], 1.0, 3).unwrap();
        let rcv = [4.0, 4.0, 1.6];
        let mut r = rng(21);
        let (a, _) = sample_placement(PlacementMode::Random, &mut r, &room, rcv).unwrap();
        let rir = image_source_rir(&room, a.position, rcv).unwrap();
        let (mono, _) = gen_toy_utterance(&mut r, 16, (5, 8)).unwrap();
        let wet = convolve_foa(&mono, &rir).unwrap();
        let iv = intensity_vectors(&wet, &StftConfig::default()).unwrap();
        let est = doa_from_iv(&iv).unwrap();
        assert!(angular_distance(&a.direction_from_receiver, &est) < 1.0);
    }

    #[test]
    fn convolve_identity_and_zero() {
        let room = RoomSpec::new([6.0, 5.0, 3.0], 0.6, 2).unwrap();
        let rir = image_source_rir(&room, [4.0, 3.0, 1.5], [2.0, 2.0, 1.4]).unwrap();
        let wet = convolve_foa(&[1.0], &rir).unwrap();
        assert_eq!(wet.len(), rir.len());
        for c in 0..4 {
            for i in 0..rir.len() {
                assert!((wet.channel(c)[i] - rir.taps[c][i]).abs() < 1e-9);
            }
        }
        let silent = convolve_foa(&vec![0.0; 100], &rir).unwrap();
        assert!(silent.peak() < 1e-12);
        assert!(convolve_foa(&[], &rir).is_err());
    }

    #[test]
    fn mix_formula_and_exclusivity() {
        let a = FoaClip::new(std::array::from_fn(|_| vec![0.1; 32_000])).unwrap();
        let b = FoaClip::new(std::array::from_fn(|_| vec![0.1; 16_000])).unwrap();
        let mixed = mix_scene(&a, &b, MixPlan::Overlap(0.5)).unwrap();
        assert_eq!(mixed.onsets, [0, 24_000]);
        // Overlapped span: samples where both are active.
        assert_eq!(32_000 - mixed.onsets[1], 8_000);
        assert_eq!(mixed.clip.len(), 40_000);

        let seq = mix_scene(&a, &b, MixPlan::Overlap(0.0)).unwrap();
        assert_eq!(seq.onsets, [0, 32_000]);
        assert_eq!(seq.clip.len(), 48_000);
        for i in 0..seq.clip.len() {
            let in1 = i < 32_000;
            let in2 = i >= seq.onsets[1];
            assert!(!(in1 && in2), "co-active at {i}");
        }

        let sim = mix_scene(&a, &b, MixPlan::Simultaneous).unwrap();
        assert_eq!(sim.onsets, [0, 0]);
        assert_eq!(sim.clip.len(), 32_000);

        assert!(mix_scene(&a, &b, MixPlan::Overlap(1.5)).is_err());
    }

    #[test]
    fn mix_peak_limit_records_gain() {
        let a = FoaClip::new(std::array::from_fn(|_| vec![0.8; 4000])).unwrap();
        let b = FoaClip::new(std::array::from_fn(|_| vec![0.8; 4000])).unwrap();
        let mixed = mix_scene(&a, &b, MixPlan::Simultaneous).unwrap();
        assert!((mixed.gain - 0.9 / 1.6).abs() < 1e-12);
        assert!((mixed.clip.peak() - 0.9).abs() < 1e-12);
        // Mixture equals gain times the plain sum, exactly.
        for i in 0..4000 {
            assert_eq!(mixed.clip.channel(0)[i], 1.6 * mixed.gain);
        }

        let quiet = FoaClip::new(std::array::from_fn(|_| vec![0.1; 4000])).unwrap();
        assert_eq!(mix_scene(&quiet, &quiet, MixPlan::Overlap(0.0)).unwrap().gain, 1.0);
    }

    #[test]
    fn dataset_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig { n_scenes: 4, seed: 77, ..DatasetConfig::default() };
        let out1 = dir.path().join("a");
        let manifests = build_dataset(&cfg, &out1, ExecMode::Auto).unwrap();
        assert_eq!(manifests.len(), 4);
        for m in &manifests {
            assert_eq!(m.placements.len(), 2);
            assert_eq!(m.transcripts.len(), 2);
            assert!(out1.join(&m.audio).exists());
            let az0 = m.placements[0].direction_from_receiver.azimuth_deg();
            let az1 = m.placements[1].direction_from_receiver.azimuth_deg();
            assert!((60.0..=120.0).contains(&az0));
            assert!((-120.0..=-60.0).contains(&az1));
        }
        let loaded = load_manifest(&out1.join("manifest.jsonl")).unwrap();
        assert_eq!(loaded, manifests);
        let config_text = std::fs::read_to_string(out1.join("config.txt")).unwrap();
        for key in ["mode=", "n_scenes=", "overlap_ratio=", "seed=", "dims_min=", "absorption="] {
            assert!(config_text.contains(key), "missing {key}");
        }

        // Sequential regeneration into a fresh directory is byte-exact.
        let out2 = dir.path().join("b");
        build_dataset(&cfg, &out2, ExecMode::Sequential).unwrap();
        assert_eq!(
            std::fs::read(out1.join("manifest.jsonl")).unwrap(),
            std::fs::read(out2.join("manifest.jsonl")).unwrap()
        );
        for m in &manifests {
            assert_eq!(
                std::fs::read(out1.join(&m.audio)).unwrap(),
                std::fs::read(out2.join(&m.audio)).unwrap(),
                "wav {} differs",
                m.audio
            );
        }
    }

    #[test]
    fn dataset_single_source() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_scenes: 6,
            sources: 1,
            mode: PlacementMode::Random,
            seed: 5,
            ..DatasetConfig::default()
        };
        let manifests = build_dataset(&cfg, dir.path(), ExecMode::Auto).unwrap();
        for m in &manifests {
            assert_eq!(m.placements.len(), 1);
            assert_eq!(m.transcripts.len(), 1);
            assert_eq!(m.onsets, vec![0]);
        }
    }

    #[test]
    fn generated_scene_ground_truth_is_recoverable() {
        // Rebuild each source's wet signal from the manifest alone and
        // check its intensity DoA against the recorded direction.
        let cfg = DatasetConfig { n_scenes: 3, seed: 41, ..DatasetConfig::default() };
        for id in 0..cfg.n_scenes as u64 {
            let (m, _) = build_scene(&cfg, id).unwrap();
            for (p, t) in m.placements.iter().zip(&m.transcripts) {
                let mono = render_symbols(&transcript_symbols(t).unwrap());
                let rir = image_source_rir(&m.room, p.position, m.receiver).unwrap();
                let wet = convolve_foa(&mono, &rir).unwrap();
                let iv = intensity_vectors(&wet, &StftConfig::default()).unwrap();
                let est = doa_from_iv(&iv).unwrap();
                let err = angular_distance(&p.direction_from_receiver, &est);
                assert!(err < 5.0, "scene {id}: {err:.2} deg");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rir_first_tap_matches_direct_delay(
            lx in 4.0..12.0f64, ly in 4.0..12.0f64, lz in 2.6..4.0f64,
            absorption in 0.3..0.95f64,
            order in 0usize..=3,
            sx in 0.1..0.9f64, sy in 0.1..0.9f64, sz in 0.15..0.85f64,
            rx in 0.15..0.85f64, ry in 0.15..0.85f64, rz in 0.3..0.7f64,
        ) {
            let room = RoomSpec::new([lx, ly, lz], absorption, order).unwrap();
            let src = [0.3 + sx * (lx - 0.6), 0.3 + sy * (ly - 0.6), 0.3 + sz * (lz - 0.6)];
            let rcv = [0.5 + rx * (lx - 1.0), 0.5 + ry * (ly - 1.0), 0.5 + rz * (lz - 1.0)];
            let dist: f64 = (0..3).map(|i| (src[i] - rcv[i]).powi(2)).sum::<f64>().sqrt();
            prop_assume!(dist > 0.1);
            let rir = image_source_rir(&room, src, rcv).unwrap();
            let tau = dist / SPEED_OF_SOUND * SAMPLE_RATE as f64;
            let first = (0..rir.len())
                .find(|&i| (0..4).any(|c| rir.taps[c][i] != 0.0))
                .expect("nonempty rir");
            prop_assert!((first as f64 - tau).abs() <= 1.0,
                "first {} vs tau {:.2}", first, tau);
            for c in 0..4 {
                prop_assert!(rir.taps[c].iter().all(|v| v.is_finite()));
            }
        }

        #[test]
        fn convolve_matches_direct_convolution(
            sig in proptest::collection::vec(-1.0..1.0f64, 20..60),
            taps in proptest::collection::vec(-1.0..1.0f64, 5..40),
        ) {
            let rir = FoaRir {
                taps: [taps.clone(), taps.iter().map(|v| v * 0.5).collect(),
                       vec![0.0; taps.len()], taps.iter().rev().copied().collect()],
            };
            let fast = convolve_foa(&sig, &rir).unwrap();
            for c in 0..4 {
                let mut direct = vec![0.0; sig.len() + taps.len() - 1];
                for (i, s) in sig.iter().enumerate() {
                    for (j, t) in rir.taps[c].iter().enumerate() {
                        direct[i + j] += s * t;
                    }
                }
                for i in 0..direct.len() {
                    prop_assert!((fast.channel(c)[i] - direct[i]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn mix_span_is_exact(
            len1 in 900usize..4000, len2 in 900usize..4000,
            r in 0.0..=1.0f64,
        ) {
            let a = FoaClip::new(std::array::from_fn(|_| vec![0.01; len1])).unwrap();
            let b = FoaClip::new(std::array::from_fn(|_| vec![0.01; len2])).unwrap();
            let mixed = mix_scene(&a, &b, MixPlan::Overlap(r)).unwrap();
            let span = (r * len1.min(len2) as f64).round() as usize;
            prop_assert_eq!(mixed.onsets[1], len1 - span.min(len1));
            // Realised overlap equals the formula.
            let realised = len1.saturating_sub(mixed.onsets[1]).min(len2);
            prop_assert_eq!(realised, span.min(len1).min(len2));
        }
    }
}
