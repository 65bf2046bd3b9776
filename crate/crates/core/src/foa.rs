//! First-order-ambisonics audio handling and feature extraction.
//!
//! Covers B-format WAV I/O, the short-time Fourier transform, log-mel
//! features, anechoic plane-wave encoding and per-frame acoustic
//! intensity vectors. All audio is fixed at 16 kHz; channels are ordered
//! W, X, Y, Z.

use num_complex::Complex64;
use rustfft::{num_complex::Complex, FftPlanner};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::localisation::Direction;

/// Fixed pipeline sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mel filterbank band count used by the encoder front-end.
pub const MEL_BANDS: usize = 80;

/// Floor applied inside the log of mel energies.
pub const MEL_FLOOR: f64 = 1e-10;

/// Frame sum norms below this are treated as silence.
pub const IV_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum FoaError {
    #[error("expected 4 channels, file has {0}")]
    NotFourChannels(u16),
    #[error("expected 1 channel, file has {0}")]
    NotMono(u16),
    #[error("expected {expected} Hz sample rate, file has {actual} Hz")]
    WrongSampleRate { expected: u32, actual: u32 },
    #[error("unsupported sample format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed wav: {0}")]
    MalformedWav(String),
    #[error("input shorter than one analysis window ({len} < {window})")]
    ShortInput { len: usize, window: usize },
    #[error("channel lengths differ")]
    RaggedChannels,
    #[error("non-finite sample at channel {channel}, index {index}")]
    NonFinite { channel: usize, index: usize },
    #[error("mel band count must be at least 1")]
    NoMelBands,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// 4-channel B-format audio buffer, channels ordered W, X, Y, Z.
#[derive(Debug, Clone, PartialEq)]
pub struct FoaClip {
    channels: [Vec<f64>; 4],
    sample_rate: u32,
}

impl FoaClip {
    /// Build a clip from four equal-length, finite channels.
    pub fn new(channels: [Vec<f64>; 4]) -> Result<Self, FoaError> {
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(FoaError::RaggedChannels);
        }
        for (ci, ch) in channels.iter().enumerate() {
            if let Some(ix) = ch.iter().position(|v| !v.is_finite()) {
                return Err(FoaError::NonFinite { channel: ci, index: ix });
            }
        }
        Ok(Self { channels, sample_rate: SAMPLE_RATE })
    }

    /// All-zero clip of the given length.
    pub fn silence(len: usize) -> Self {
        Self {
            channels: std::array::from_fn(|_| vec![0.0; len]),
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Channel by index: 0 = W, 1 = X, 2 = Y, 3 = Z.
    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.channels[i]
    }

    /// Omnidirectional (W) channel.
    pub fn omni(&self) -> &[f64] {
        &self.channels[0]
    }

    /// Largest absolute sample over all channels.
    pub fn peak(&self) -> f64 {
        self.channels
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Multiply every sample by `gain`.
    pub fn scale(&mut self, gain: f64) {
        for ch in &mut self.channels {
            for v in ch.iter_mut() {
                *v *= gain;
            }
        }
    }
}

/// STFT analysis parameters. Defaults give 50 frames/s at 16 kHz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop_len: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { window_len: 800, hop_len: 320 }
    }
}

impl StftConfig {
    /// Frames per second produced at the pipeline sample rate.
    pub fn frame_rate(&self) -> f64 {
        SAMPLE_RATE as f64 / self.hop_len as f64
    }

    /// Number of analysis frames for an input of `n` samples.
    ///
    /// Frames start at sample 0 with no centre padding, so this is
    /// `floor((n - window) / hop) + 1`.
    pub fn frame_count(&self, n: usize) -> usize {
        if n < self.window_len {
            0
        } else {
            (n - self.window_len) / self.hop_len + 1
        }
    }

    /// Retained non-negative frequency bin count (`window/2 + 1`).
    pub fn bin_count(&self) -> usize {
        self.window_len / 2 + 1
    }
}

/// Complex STFT output, `frames x bins`, row-major.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    bins: Vec<Complex64>,
    frames: usize,
    bin_count: usize,
    frame_rate: f64,
    /// Bin width in Hz.
    bin_hz: f64,
}

impl ComplexSpectrogram {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn bin_hz(&self) -> f64 {
        self.bin_hz
    }

    /// One frame of complex bins.
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.bins[t * self.bin_count..(t + 1) * self.bin_count]
    }
}

/// Per-frame 3-component intensity direction estimates.
///
/// Valid rows are unit vectors; rows whose pre-normalisation energy fell
/// below [`IV_EPSILON`] are all-zero and flagged invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityFrames {
    pub vectors: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
    pub frame_rate: f64,
}

impl IntensityFrames {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Log-mel feature frames, `frames x bands`, row-major.
#[derive(Debug, Clone)]
pub struct MelFrames {
    pub features: Vec<f64>,
    pub frames: usize,
    pub bands: usize,
    pub frame_rate: f64,
}

impl MelFrames {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.features[t * self.bands..(t + 1) * self.bands]
    }
}

/// Periodic Hann window of length `n`.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Short-time Fourier transform of a mono signal.
///
/// Frame `t` covers samples `[t*hop, t*hop + window)`; each frame is
/// Hann-windowed and transformed at full window size, keeping the
/// non-negative bins.
pub fn stft(mono: &[f64], cfg: &StftConfig) -> Result<ComplexSpectrogram, FoaError> {
    if mono.len() < cfg.window_len {
        return Err(FoaError::ShortInput { len: mono.len(), window: cfg.window_len });
    }
    let frames = cfg.frame_count(mono.len());
    let bins = cfg.bin_count();
    let window = hann(cfg.window_len);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.window_len);
    let mut out = Vec::with_capacity(frames * bins);
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); cfg.window_len];

    for t in 0..frames {
        let start = t * cfg.hop_len;
        for (i, w) in window.iter().enumerate() {
            buf[i] = Complex::new(mono[start + i] * w, 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().copied());
    }

    Ok(ComplexSpectrogram {
        bins: out,
        frames,
        bin_count: bins,
        frame_rate: cfg.frame_rate(),
        bin_hz: SAMPLE_RATE as f64 / cfg.window_len as f64,
    })
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Log-mel features from a complex spectrogram.
///
/// Power spectrum through a triangular mel filterbank spanning
/// 0–8 kHz, then natural log with a [`MEL_FLOOR`] floor.
pub fn log_mel(spec: &ComplexSpectrogram, bands: usize) -> Result<MelFrames, FoaError> {
    if bands == 0 {
        return Err(FoaError::NoMelBands);
    }
    let f_max = SAMPLE_RATE as f64 / 2.0;
    let mel_points: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(hz_to_mel(f_max) * i as f64 / (bands + 1) as f64))
        .collect();

    // Triangle weights per band over the linear bin frequencies.
    let nbins = spec.bin_count();
    let mut filters: Vec<Vec<(usize, f64)>> = Vec::with_capacity(bands);
    for b in 0..bands {
        let (lo, mid, hi) = (mel_points[b], mel_points[b + 1], mel_points[b + 2]);
        let mut taps = Vec::new();
        for k in 0..nbins {
            let f = k as f64 * spec.bin_hz();
            let w = if f > lo && f < mid {
                (f - lo) / (mid - lo)
            } else if f >= mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            if w > 0.0 {
                taps.push((k, w));
            }
        }
        filters.push(taps);
    }

    let mut features = Vec::with_capacity(spec.frames() * bands);
    for t in 0..spec.frames() {
        let frame = spec.frame(t);
        for taps in &filters {
            let energy: f64 = taps.iter().map(|&(k, w)| frame[k].norm_sqr() * w).sum();
            features.push(energy.max(MEL_FLOOR).ln());
        }
    }

    Ok(MelFrames { features, frames: spec.frames(), bands, frame_rate: spec.frame_rate() })
}

/// Per-channel encoding gains for a plane wave from `dir`:
/// W = 1, X = cosθ·cosφ, Y = cosθ·sinφ, Z = sinθ.
pub fn foa_gains(dir: Direction) -> [f64; 4] {
    let (az, el) = (dir.azimuth_deg().to_radians(), dir.elevation_deg().to_radians());
    [1.0, el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

/// Anechoic first-order-ambisonic encoding of a mono signal arriving
/// from `dir`.
pub fn encode_plane_wave(mono: &[f64], dir: Direction) -> FoaClip {
    let gains = foa_gains(dir);
    let channels = std::array::from_fn(|c| mono.iter().map(|s| s * gains[c]).collect());
    FoaClip { channels, sample_rate: SAMPLE_RATE }
}

/// Per-frame acoustic intensity vectors from a B-format clip.
///
/// Each time-frequency bin contributes Re{conj(W)·(X,Y,Z)}; bins are
/// summed per frame and the sum is normalised to unit length. Frames
/// whose sum norm falls below [`IV_EPSILON`] are flagged invalid and
/// left as zero rows.
pub fn intensity_vectors(clip: &FoaClip, cfg: &StftConfig) -> Result<IntensityFrames, FoaError> {
    let specs: Vec<ComplexSpectrogram> = (0..4)
        .map(|c| stft(clip.channel(c), cfg))
        .collect::<Result<_, _>>()?;
    let frames = specs[0].frames();
    let mut vectors = Vec::with_capacity(frames);
    let mut valid = Vec::with_capacity(frames);

    for t in 0..frames {
        let w = specs[0].frame(t);
        let x = specs[1].frame(t);
        let y = specs[2].frame(t);
        let z = specs[3].frame(t);
        let mut sum = [0.0f64; 3];
        for k in 0..specs[0].bin_count() {
            let wc = w[k].conj();
            sum[0] += (wc * x[k]).re;
            sum[1] += (wc * y[k]).re;
            sum[2] += (wc * z[k]).re;
        }
        let norm = (sum[0] * sum[0] + sum[1] * sum[1] + sum[2] * sum[2]).sqrt();
        if norm < IV_EPSILON {
            vectors.push([0.0; 3]);
            valid.push(false);
        } else {
            vectors.push([sum[0] / norm, sum[1] / norm, sum[2] / norm]);
            valid.push(true);
        }
    }

    Ok(IntensityFrames { vectors, valid, frame_rate: cfg.frame_rate() })
}

fn open_wav(path: &Path) -> Result<hound::WavReader<std::io::BufReader<std::fs::File>>, FoaError> {
    hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => FoaError::Io(io),
        other => FoaError::MalformedWav(other.to_string()),
    })
}

fn read_samples(
    mut reader: hound::WavReader<std::io::BufReader<std::fs::File>>,
) -> Result<Vec<f64>, FoaError> {
    let spec = reader.spec();
    match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64).map_err(|e| FoaError::MalformedWav(e.to_string())))
            .collect(),
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| {
                s.map(|v| v as f64 / 32768.0)
                    .map_err(|e| FoaError::MalformedWav(e.to_string()))
            })
            .collect(),
        (f, b) => Err(FoaError::UnsupportedFormat(format!("{f:?}/{b}-bit"))),
    }
}

/// Load a 4-channel 16 kHz B-format WAV.
///
/// Accepts 16-bit integer or 32-bit float PCM; integer samples are
/// scaled to [-1, 1]. Channel order is taken as stored (W, X, Y, Z).
pub fn load_foa_wav(path: impl AsRef<Path>) -> Result<FoaClip, FoaError> {
    let reader = open_wav(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 4 {
        return Err(FoaError::NotFourChannels(spec.channels));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(FoaError::WrongSampleRate { expected: SAMPLE_RATE, actual: spec.sample_rate });
    }
    let interleaved = read_samples(reader)?;
    let n = interleaved.len() / 4;
    let mut channels: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
    for (i, v) in interleaved.into_iter().enumerate() {
        channels[i % 4].push(v);
    }
    FoaClip::new(channels)
}

/// Save a clip as a 4-channel 32-bit float WAV.
pub fn save_foa_wav(path: impl AsRef<Path>, clip: &FoaClip) -> Result<(), FoaError> {
    let spec = hound::WavSpec {
        channels: 4,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)
        .map_err(|e| FoaError::MalformedWav(e.to_string()))?;
    for i in 0..clip.len() {
        for c in 0..4 {
            writer
                .write_sample(clip.channel(c)[i] as f32)
                .map_err(|e| FoaError::MalformedWav(e.to_string()))?;
        }
    }
    writer.finalize().map_err(|e| FoaError::MalformedWav(e.to_string()))?;
    Ok(())
}

/// Load a 1-channel 16 kHz WAV.
pub fn load_mono_wav(path: impl AsRef<Path>) -> Result<Vec<f64>, FoaError> {
    let reader = open_wav(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(FoaError::NotMono(spec.channels));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(FoaError::WrongSampleRate { expected: SAMPLE_RATE, actual: spec.sample_rate });
    }
    read_samples(reader)
}

/// Save a mono signal as a 1-channel 32-bit float WAV.
pub fn save_mono_wav(path: impl AsRef<Path>, mono: &[f64]) -> Result<(), FoaError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)
        .map_err(|e| FoaError::MalformedWav(e.to_string()))?;
    for &v in mono {
        writer
            .write_sample(v as f32)
            .map_err(|e| FoaError::MalformedWav(e.to_string()))?;
    }
    writer.finalize().map_err(|e| FoaError::MalformedWav(e.to_string()))?;
    Ok(())
}

/// Debug dump of a frame matrix: raw little-endian f32 values plus a
/// one-line `<path>.hdr` sidecar recording shape and frame rate.
pub fn dump_f32_raw(
    path: impl AsRef<Path>,
    data: &[f64],
    rows: usize,
    cols: usize,
    frame_rate: f64,
) -> Result<(), FoaError> {
    assert_eq!(data.len(), rows * cols, "shape does not match data length");
    let path = path.as_ref();
    let mut out = std::fs::File::create(path)?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&bytes)?;
    let hdr = path.with_extension(format!(
        "{}hdr",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    std::fs::write(hdr, format!("shape={rows}x{cols} dtype=f32le frame_rate={frame_rate}\n"))?;
    Ok(())
}
