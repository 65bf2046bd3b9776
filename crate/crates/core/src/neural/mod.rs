//! Toy audio-text model with hand-written backpropagation.
//!
//! The pipeline mirrors a speech-LLM at desk scale: a frozen surrogate
//! encoder turns log-mel frames into hidden features, a window-level
//! query aligner compresses them, intensity vectors are fused either
//! before the aligner (frame concatenation) or after it (window
//! concatenation plus projection), and a small causal decoder consumes
//! the projected rows together with prompt and answer tokens. Training
//! updates only the aligner, the projection, LoRA adapters on the
//! decoder's query/value projections, and (when enabled) the angle-token
//! vocabulary tables; encoder and decoder base stay frozen.
//!
//! Everything runs in `f64` with fixed summation orders, so results are
//! reproducible bit-for-bit for a given seed and data order.

mod aligner;
mod decoder;
mod encoder;
mod nn;
mod params;
mod pretrain;
mod tensor;
mod tokenizer;
mod train;

use std::fs;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::foa::{IntensityFrames, MelFrames};

pub use aligner::{fuse_before, interpolate_iv, FUSE_TRIM_TOLERANCE};
pub use decoder::{attach_lora, decoder_forward, expand_vocab, freeze_decoder_base, generate};
pub use params::{gaussian, Adam, Grads, PTensor, ParamSet};
pub use pretrain::{pretrain_stage0, stage0_batch, PretrainOpts};
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor};
pub use tokenizer::{Tokenizer, ANGLE_TOKENS, BASE_VOCAB, TOK_EOS, TOK_UNK};
pub use train::{Trainer, TrainExample};

/// Errors from model construction, forward passes, and checkpoints.
#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("frame counts differ too much to fuse: {z} encoder frames vs {iv} intensity frames")]
    FrameMismatch { z: usize, iv: usize },
    #[error("window feature rows ({h}) do not match interpolated intensity rows ({iv})")]
    LengthMismatch { h: usize, iv: usize },
    #[error("cannot interpolate {t} intensity frames to {l} rows")]
    Interpolation { t: usize, l: usize },
    #[error("sequence of {len} rows exceeds the context limit of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("vocabulary is already expanded")]
    AlreadyExpanded,
    #[error("LoRA adapters are already attached")]
    LoraAttached,
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialisation error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Where intensity vectors join the pipeline, if at all.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    None,
    Before,
    After,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::None => "none",
            FusionMode::Before => "before",
            FusionMode::After => "after",
        })
    }
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<FusionMode, String> {
        match s {
            "none" => Ok(FusionMode::None),
            "before" => Ok(FusionMode::Before),
            "after" => Ok(FusionMode::After),
            other => Err(format!("unknown fusion mode {other:?} (none|before|after)")),
        }
    }
}

/// Model dimensions and construction seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion: FusionMode,
    /// True once the angle-token tables exist.
    pub angle_vocab: bool,
    pub mel_bands: usize,
    pub d_enc: usize,
    pub d_q: usize,
    pub d_llm: usize,
    pub window_frames: usize,
    pub queries_per_window: usize,
    pub aligner_layers: usize,
    pub aligner_heads: usize,
    pub aligner_ffn: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_ffn: usize,
    pub max_seq: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            fusion: FusionMode::None,
            angle_vocab: false,
            mel_bands: crate::foa::MEL_BANDS,
            d_enc: 64,
            d_q: 64,
            d_llm: 128,
            window_frames: 17,
            queries_per_window: 1,
            aligner_layers: 2,
            aligner_heads: 4,
            aligner_ffn: 128,
            decoder_layers: 2,
            decoder_heads: 4,
            decoder_ffn: 256,
            max_seq: 512,
            lora_rank: 8,
            lora_alpha: 4.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A narrow variant for gradient checking and fast tests.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            d_enc: 16,
            d_q: 16,
            d_llm: 16,
            aligner_heads: 2,
            aligner_ffn: 32,
            decoder_heads: 2,
            decoder_ffn: 32,
            max_seq: 128,
            lora_rank: 2,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |msg: &str| Err(NeuralError::BadConfig(msg.into()));
        if self.mel_bands == 0 || self.d_enc == 0 || self.d_q == 0 || self.d_llm == 0 {
            return bad("all widths must be positive");
        }
        if self.window_frames == 0 || self.queries_per_window == 0 {
            return bad("window_frames and queries_per_window must be positive");
        }
        if self.aligner_layers == 0 || self.decoder_layers == 0 {
            return bad("layer counts must be positive");
        }
        if self.aligner_heads == 0 || self.d_q % self.aligner_heads != 0 {
            return bad("d_q must divide evenly into aligner heads");
        }
        if self.decoder_heads == 0 || self.d_llm % self.decoder_heads != 0 {
            return bad("d_llm must divide evenly into decoder heads");
        }
        if self.max_seq == 0 {
            return bad("max_seq must be positive");
        }
        if self.lora_rank == 0 || !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return bad("LoRA rank and alpha must be positive");
        }
        Ok(())
    }
}

/// Parameters plus the config they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl ModelState {
    /// Builds a fresh model from the config seed: frozen encoder,
    /// trainable aligner/projection/decoder, no LoRA adapters. Angle
    /// tables are created when the config already asks for them.
    pub fn new(config: ModelConfig) -> Result<ModelState, NeuralError> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        encoder::init_encoder(&mut params, &config, &mut rng);
        aligner::init_aligner(&mut params, &config, &mut rng);
        aligner::init_projection(&mut params, &config, &mut rng);
        decoder::init_decoder(&mut params, &config, &mut rng);
        if config.angle_vocab {
            let mut vrng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x766f_6361);
            decoder::insert_vocab_tables(&mut params, config.d_llm, &mut vrng);
        }
        Ok(ModelState { config, params })
    }

    /// Tokeniser matching the current vocabulary.
    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.config.angle_vocab)
    }

    /// Writes a checkpoint; the byte stream is stable across
    /// save/load/save round trips.
    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let file = fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &Checkpoint { version: 1, config: self.config.clone(), params: self.params.clone() })?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelState, NeuralError> {
        let file = fs::File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ck.version != 1 {
            return Err(NeuralError::BadCheckpoint(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        ck.config.validate().map_err(|e| NeuralError::BadCheckpoint(e.to_string()))?;
        Ok(ModelState { config: ck.config, params: ck.params })
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: ModelConfig,
    params: ParamSet,
}

/// Encodes log-mel frames with the frozen surrogate encoder, `T x d_enc`.
pub fn surrogate_encode(state: &ModelState, mel: &MelFrames) -> Tensor {
    encoder::encode(&state.params, &state.config, mel)
}

/// Aligns frame features to window features, `Tw x d_q`.
pub fn qformer(state: &ModelState, zp: &Tensor) -> Tensor {
    aligner::qformer_forward(&state.params, &state.config, zp).0
}

/// Concatenates window features with interpolated intensity rows and
/// projects to the decoder width.
pub fn fuse_after(state: &ModelState, h: &Tensor, ivp: &Tensor) -> Result<Tensor, NeuralError> {
    aligner::project_forward(&state.params, h, Some(ivp)).map(|(out, _)| out)
}

/// Per-layer (query, value) adapter output deltas for input rows `x`;
/// empty when no adapters are attached.
pub fn adapter_deltas(state: &ModelState, x: &Tensor) -> Vec<(Tensor, Tensor)> {
    decoder::adapter_deltas(&state.params, &state.config, x)
}

/// One training example: optional audio features plus token sequences.
pub struct AudioTrace {
    qcache: aligner::QformerCache,
    pcache: aligner::ProjCache,
}

/// Recorded forward pass of [`forward`], consumed by [`backward`].
pub struct ForwardRecord {
    audio: Option<AudioTrace>,
    dec: decoder::DecoderCache,
    pub loss: f64,
}

fn audio_forward(
    state: &ModelState,
    mel: &MelFrames,
    iv: &IntensityFrames,
) -> Result<(Tensor, AudioTrace), NeuralError> {
    let params = &state.params;
    let cfg = &state.config;
    let z = surrogate_encode(state, mel);
    let zp = match cfg.fusion {
        FusionMode::Before => fuse_before(&z, iv)?,
        _ => z,
    };
    let (h, qcache) = aligner::qformer_forward(params, cfg, &zp);
    let ivp = match cfg.fusion {
        FusionMode::After => Some(interpolate_iv(iv, h.rows())?),
        _ => None,
    };
    let (hp, pcache) = aligner::project_forward(params, &h, ivp.as_ref())?;
    Ok((hp, AudioTrace { qcache, pcache }))
}

/// Projected audio prefix rows handed to the decoder, `Tw x d_llm`.
pub fn audio_prefix(
    state: &ModelState,
    mel: &MelFrames,
    iv: &IntensityFrames,
) -> Result<Tensor, NeuralError> {
    audio_forward(state, mel, iv).map(|(hp, _)| hp)
}

/// Full forward pass for one example under the state's fusion mode.
pub fn forward(state: &ModelState, ex: &TrainExample) -> Result<ForwardRecord, NeuralError> {
    let (hp, audio) = match &ex.audio {
        None => (None, None),
        Some((mel, iv)) => {
            let (hp, trace) = audio_forward(state, mel, iv)?;
            (Some(hp), Some(trace))
        }
    };
    let dec =
        decoder::decoder_train_forward(&state.params, &state.config, hp.as_ref(), &ex.prompt, &ex.answer)?;
    let loss = dec.loss;
    Ok(ForwardRecord { audio, dec, loss })
}

/// Exact gradients of the recorded loss for every trainable parameter;
/// frozen parameters get no entries.
pub fn backward(state: &ModelState, rec: &ForwardRecord) -> Grads {
    let params = &state.params;
    let cfg = &state.config;
    let mut grads = Grads::new();
    let d_soft = decoder::decoder_backward(params, cfg, &rec.dec, &mut grads);
    if let (Some(trace), Some(ds)) = (&rec.audio, d_soft) {
        let dh = aligner::project_backward(params, cfg, &trace.pcache, &ds, &mut grads);
        aligner::qformer_backward(params, cfg, &trace.qcache, &dh, &mut grads);
    }
    grads
}

/// Derives a task model from a pretrained stage-0 state: fresh encoder
/// and aligner from `seed`, the stage-0 decoder copied in and frozen,
/// LoRA adapters attached, and optionally the angle vocabulary.
pub fn prepare_task_model(
    stage0: &ModelState,
    fusion: FusionMode,
    angle_vocab: bool,
    seed: u64,
) -> Result<ModelState, NeuralError> {
    let config = ModelConfig { fusion, angle_vocab: false, seed, ..stage0.config.clone() };
    let mut state = ModelState::new(config)?;
    let names: Vec<String> =
        state.params.names().filter(|n| n.starts_with("dec.")).map(String::from).collect();
    for name in &names {
        let src = stage0.params.get(name);
        *state.params.get_mut(name) = src.clone();
    }
    freeze_decoder_base(&mut state);
    attach_lora(&mut state)?;
    expand_vocab(&mut state, angle_vocab)?;
    Ok(state)
}

/// Adds seeded Gaussian noise to every trainable table, in name order.
pub fn jitter_trainable(state: &mut ModelState, sigma: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in state.params.trainable_names() {
        let t = state.params.get_mut(&name);
        let noise = gaussian(&mut rng, t.rows(), t.cols(), sigma);
        t.add_assign(&noise);
    }
}

/// One finite-difference mismatch: parameter name, flat index, analytic
/// gradient, finite difference, and relative error.
#[derive(Debug)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel: f64,
}

/// Outcome of [`grad_check`].
#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_param: String,
    pub failures: Vec<GradMismatch>,
}

/// Compares analytic gradients against central finite differences of the
/// loss. Every trainable table is visited; large tables are subsampled
/// to at most `max_per_tensor` evenly spaced entries. The relative error
/// uses the floor `max(|analytic|, |fd|, 1e-6)`.
pub fn grad_check(
    state: &mut ModelState,
    ex: &TrainExample,
    h: f64,
    tol: f64,
    max_per_tensor: usize,
) -> Result<GradCheckReport, NeuralError> {
    let rec = forward(state, ex)?;
    let grads = backward(state, &rec);
    let mut report = GradCheckReport {
        checked: 0,
        worst_rel: 0.0,
        worst_param: String::new(),
        failures: Vec::new(),
    };
    for name in state.params.trainable_names() {
        let len = state.params.get(&name).data().len();
        let stride = len.div_ceil(max_per_tensor).max(1);
        let mut idx = 0;
        while idx < len {
            let orig = state.params.get(&name).data()[idx];
            state.params.get_mut(&name).data_mut()[idx] = orig + h;
            let plus = forward(state, ex)?.loss;
            state.params.get_mut(&name).data_mut()[idx] = orig - h;
            let minus = forward(state, ex)?.loss;
            state.params.get_mut(&name).data_mut()[idx] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[idx]);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_param = name.clone();
            }
            if rel >= tol {
                report.failures.push(GradMismatch { name: name.clone(), index: idx, analytic, fd, rel });
            }
            idx += stride;
        }
    }
    Ok(report)
}
