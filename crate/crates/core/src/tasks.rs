//! Task definitions: prompts, example construction, the training loop
//! and evaluation metrics for the three spatial-audio tasks.
//!
//! - Localisation (SSL): the model answers azimuth and elevation
//!   questions with bare integers in degrees.
//! - Far-field recognition (FSR): the model transcribes a single
//!   reverberant source.
//! - Localisation-informed extraction (LSE): two sources play; the
//!   model transcribes only the one on the prompted side.
//!
//! Training derives a task model from a stage-0 decoder checkpoint,
//! draws deterministic minibatches from scene features, and keeps the
//! parameters of the best validation pass. Evaluation generates
//! answers per scene and aggregates task metrics.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::foa::{intensity_vectors, log_mel, stft, FoaError, StftConfig, MEL_BANDS};
use crate::localisation::{angular_distance, azimuth_error, elevation_error, Direction, SslErrors};
use crate::neural::{
    audio_prefix, forward, generate, prepare_task_model, FusionMode, ModelState, NeuralError,
    ParamSet, TrainExample, Trainer,
};
use crate::parallel::{slice_map, ExecMode};
use crate::scene::{SceneError, SceneManifest};

/// Prompt asking for the azimuth of the (single) source.
pub const SSL_AZIMUTH_PROMPT: &str = "What is the azimuth angle of the sound?";

/// Prompt asking for the elevation of the (single) source.
pub const SSL_ELEVATION_PROMPT: &str = "What is the elevation angle of the sound?";

/// Prompt asking for a transcript of far-field speech.
pub const FSR_PROMPT: &str = "Please transcribe the speech into a written format.";

/// Prompt asking for a transcript of the source on the listener's left.
pub const LSE_PROMPT_LEFT: &str = "Please transcribe the speech on your left into a written format.";

/// Prompt asking for a transcript of the source on the listener's right.
pub const LSE_PROMPT_RIGHT: &str =
    "Please transcribe the speech on your right into a written format.";

/// Generation budget for one answer, enough for the longest transcript.
const MAX_ANSWER_TOKENS: usize = 32;

/// Trainer batch-RNG salt, so batch draws and parameter init use
/// different streams of the same user seed.
const BATCH_SEED_SALT: u64 = 0x6261_7463;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("scene {scene_id} has {sources} sources, {task} needs {needs}")]
    ArityMismatch { task: TaskKind, scene_id: u64, sources: usize, needs: usize },
    #[error("reference transcript is empty")]
    EmptyReference,
    #[error("no examples to {0} on")]
    NoExamples(&'static str),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("audio: {0}")]
    Foa(#[from] FoaError),
    #[error("scene: {0}")]
    Scene(#[from] SceneError),
    #[error("model: {0}")]
    Neural(#[from] NeuralError),
}

/// The three trainable tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Ssl,
    Fsr,
    Lse,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Ssl => "ssl",
            TaskKind::Fsr => "fsr",
            TaskKind::Lse => "lse",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<TaskKind, TaskError> {
        match s {
            "ssl" => Ok(TaskKind::Ssl),
            "fsr" => Ok(TaskKind::Fsr),
            "lse" => Ok(TaskKind::Lse),
            _ => Err(TaskError::UnknownTask(s.to_string())),
        }
    }
}

/// Which question a QA example asks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaTask {
    SslAzimuth,
    SslElevation,
    Fsr,
    LseLeft,
    LseRight,
}

impl std::fmt::Display for QaTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QaTask::SslAzimuth => "ssl_azimuth",
            QaTask::SslElevation => "ssl_elevation",
            QaTask::Fsr => "fsr",
            QaTask::LseLeft => "lse_left",
            QaTask::LseRight => "lse_right",
        })
    }
}

/// One question about one scene, with its reference answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub scene_id: u64,
    pub task: QaTask,
    pub prompt: String,
    pub target: String,
}

/// Index of the left source (the larger azimuth; positive azimuths
/// point left) and the right source in a two-source manifest.
fn left_right_indices(m: &SceneManifest) -> (usize, usize) {
    let az0 = m.placements[0].direction_from_receiver.azimuth_deg();
    let az1 = m.placements[1].direction_from_receiver.azimuth_deg();
    if az0 >= az1 {
        (0, 1)
    } else {
        (1, 0)
    }
}

fn require_sources(m: &SceneManifest, task: TaskKind, needs: usize) -> Result<(), TaskError> {
    if m.placements.len() != needs {
        return Err(TaskError::ArityMismatch {
            task,
            scene_id: m.scene_id,
            sources: m.placements.len(),
            needs,
        });
    }
    Ok(())
}

/// Builds the QA examples a task asks about each scene: SSL asks the
/// azimuth and elevation questions (two examples per scene, targets are
/// the rounded ground-truth degrees), FSR asks for the transcript, and
/// LSE asks for each side's transcript (left = larger azimuth).
pub fn make_qa(manifests: &[SceneManifest], task: TaskKind) -> Result<Vec<QaExample>, TaskError> {
    let mut out = Vec::new();
    for m in manifests {
        match task {
            TaskKind::Ssl => {
                require_sources(m, task, 1)?;
                let d = &m.placements[0].direction_from_receiver;
                out.push(QaExample {
                    scene_id: m.scene_id,
                    task: QaTask::SslAzimuth,
                    prompt: SSL_AZIMUTH_PROMPT.to_string(),
                    target: format!("{}", d.azimuth_deg().round() as i64),
                });
                out.push(QaExample {
                    scene_id: m.scene_id,
                    task: QaTask::SslElevation,
                    prompt: SSL_ELEVATION_PROMPT.to_string(),
                    target: format!("{}", d.elevation_deg().round() as i64),
                });
            }
            TaskKind::Fsr => {
                require_sources(m, task, 1)?;
                out.push(QaExample {
                    scene_id: m.scene_id,
                    task: QaTask::Fsr,
                    prompt: FSR_PROMPT.to_string(),
                    target: m.transcripts[0].clone(),
                });
            }
            TaskKind::Lse => {
                require_sources(m, task, 2)?;
                let (li, ri) = left_right_indices(m);
                out.push(QaExample {
                    scene_id: m.scene_id,
                    task: QaTask::LseLeft,
                    prompt: LSE_PROMPT_LEFT.to_string(),
                    target: m.transcripts[li].clone(),
                });
                out.push(QaExample {
                    scene_id: m.scene_id,
                    task: QaTask::LseRight,
                    prompt: LSE_PROMPT_RIGHT.to_string(),
                    target: m.transcripts[ri].clone(),
                });
            }
        }
    }
    Ok(out)
}

/// First integer substring within [-180, 180], reading an immediately
/// preceding '-' as its sign. `None` when no such substring exists.
pub fn parse_angle(text: &str) -> Option<i64> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if !bytes[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < bytes.len() && bytes[j].is_ascii_digit() {
            j += 1;
        }
        let start = if i > 0 && bytes[i - 1] == b'-' { i - 1 } else { i };
        if let Ok(v) = text[start..j].parse::<i64>() {
            if (-180..=180).contains(&v) {
                return Some(v);
            }
        }
        i = j;
    }
    None
}

/// Word error rate: word-level Levenshtein distance over the reference
/// word count, with whitespace tokenisation. Errors on an empty
/// reference; can exceed 1 when the hypothesis inserts words.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64, TaskError> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    if r.is_empty() {
        return Err(TaskError::EmptyReference);
    }
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    for i in 1..=r.len() {
        let mut cur = vec![i; h.len() + 1];
        for j in 1..=h.len() {
            let sub = prev[j - 1] + usize::from(r[i - 1] != h[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    Ok(prev[h.len()] as f64 / r.len() as f64)
}

/// Whether a hypothesis extracted the target rather than the
/// distractor: success iff its WER against the target is strictly
/// below its WER against the distractor, so ties fail.
pub fn lse_judge(
    hypothesis: &str,
    target_ref: &str,
    distractor_ref: &str,
) -> Result<bool, TaskError> {
    Ok(wer(target_ref, hypothesis)? < wer(distractor_ref, hypothesis)?)
}

/// Extracted features of one scene WAV: omni log-mel plus intensity
/// vectors at the shared frame rate.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    pub mel: crate::foa::MelFrames,
    pub iv: crate::foa::IntensityFrames,
}

/// Loads a scene WAV and extracts model features.
pub fn scene_features(audio_dir: &Path, m: &SceneManifest) -> Result<SceneFeatures, TaskError> {
    let clip = crate::foa::load_foa_wav(audio_dir.join(&m.audio))?;
    let cfg = StftConfig::default();
    let mel = log_mel(&stft(clip.omni(), &cfg)?, MEL_BANDS)?;
    let iv = intensity_vectors(&clip, &cfg)?;
    Ok(SceneFeatures { mel, iv })
}

/// Whether a scene belongs to the held-out validation split (every
/// tenth scene id).
pub fn is_validation_scene(scene_id: u64) -> bool {
    scene_id % 10 == 9
}

/// Task training settings.
#[derive(Debug, Clone, Copy)]
pub struct TrainOpts {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Steps between validation passes.
    pub val_every: usize,
    pub mode: ExecMode,
}

impl Default for TrainOpts {
    fn default() -> TrainOpts {
        TrainOpts { steps: 3000, batch: 16, lr: 1e-3, seed: 0, val_every: 250, mode: ExecMode::Auto }
    }
}

/// A finished task training run: the model carries the parameters of
/// the best validation pass.
pub struct TaskRun {
    pub state: ModelState,
    /// Mean loss of every optimisation step.
    pub losses: Vec<f64>,
    /// (step, validation loss) after each validation pass.
    pub val_history: Vec<(usize, f64)>,
    /// Step count whose parameters were kept.
    pub best_step: usize,
}

struct Prepared {
    feature_ix: usize,
    prompt: Vec<usize>,
    answer: Vec<usize>,
}

fn to_example(p: &Prepared, features: &[SceneFeatures]) -> TrainExample {
    let f = &features[p.feature_ix];
    TrainExample {
        audio: Some((f.mel.clone(), f.iv.clone())),
        prompt: p.prompt.clone(),
        answer: p.answer.clone(),
    }
}

/// Trains a task model derived from a stage-0 decoder: fresh aligner,
/// frozen decoder with adapters, deterministic batches from the
/// non-validation scenes, and a validation loss pass every
/// `opts.val_every` steps. The returned state holds the parameters of
/// the pass with the lowest validation loss.
pub fn train_task(
    stage0: &ModelState,
    manifests: &[SceneManifest],
    audio_dir: &Path,
    task: TaskKind,
    fusion: FusionMode,
    angle_vocab: bool,
    opts: &TrainOpts,
) -> Result<TaskRun, TaskError> {
    let mut state = prepare_task_model(stage0, fusion, angle_vocab, opts.seed)?;
    let tok = state.tokenizer();

    let features: Vec<SceneFeatures> = slice_map(opts.mode, manifests, |m| {
        scene_features(audio_dir, m)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let feature_ix: HashMap<u64, usize> =
        manifests.iter().enumerate().map(|(i, m)| (m.scene_id, i)).collect();

    let qa = make_qa(manifests, task)?;
    let mut train_set = Vec::new();
    let mut val_set = Vec::new();
    for ex in &qa {
        let p = Prepared {
            feature_ix: feature_ix[&ex.scene_id],
            prompt: tok.encode(&ex.prompt),
            answer: tok.encode(&ex.target),
        };
        if is_validation_scene(ex.scene_id) {
            val_set.push(p);
        } else {
            train_set.push(p);
        }
    }
    if train_set.is_empty() {
        return Err(TaskError::NoExamples("train"));
    }

    let mut trainer = Trainer::new(opts.lr, opts.seed ^ BATCH_SEED_SALT, opts.mode);
    let mut losses = Vec::with_capacity(opts.steps);
    let mut val_history = Vec::new();
    let mut best: Option<(f64, ParamSet, usize)> = None;
    let mut remaining = opts.steps;
    while remaining > 0 {
        let n = remaining.min(opts.val_every.max(1));
        let chunk = trainer.train_steps(&mut state, n, |_, rng| {
            (0..opts.batch)
                .map(|_| {
                    use rand::Rng;
                    let ix = rng.gen_range(0..train_set.len());
                    to_example(&train_set[ix], &features)
                })
                .collect()
        })?;
        losses.extend(chunk);
        remaining -= n;
        if !val_set.is_empty() {
            let vals = slice_map(opts.mode, &val_set, |p| {
                forward(&state, &to_example(p, &features)).map(|rec| rec.loss)
            });
            let mut sum = 0.0;
            for v in vals {
                sum += v?;
            }
            let val_loss = sum / val_set.len() as f64;
            val_history.push((trainer.steps_done, val_loss));
            if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
                best = Some((val_loss, state.params.clone(), trainer.steps_done));
            }
        }
    }
    let best_step = match best {
        Some((_, params, step)) => {
            state.params = params;
            step
        }
        None => trainer.steps_done,
    };
    Ok(TaskRun { state, losses, val_history, best_step })
}

fn answer_text(
    state: &ModelState,
    tok: &crate::neural::Tokenizer,
    hp: &crate::neural::Tensor,
    prompt: &[usize],
) -> Result<String, TaskError> {
    let ids = generate(state, Some(hp), prompt, MAX_ANSWER_TOKENS)?;
    Ok(tok.decode(&ids))
}

/// SSL evaluation: aggregate localisation errors plus the fraction of
/// answers that failed to parse.
#[derive(Debug, Clone, Copy)]
pub struct SslEval {
    pub errors: SslErrors,
    /// Fraction of the 2N generated answers with no usable angle.
    pub unparseable_rate: f64,
}

/// Evaluates an SSL model: per scene, generates azimuth and elevation
/// answers, parses them, and scores against the ground-truth direction.
/// An unparseable answer (or an elevation outside [-90, 90]) scores
/// 180 degrees on its component and on the combined angular error.
pub fn eval_ssl(
    state: &ModelState,
    manifests: &[SceneManifest],
    audio_dir: &Path,
    mode: ExecMode,
) -> Result<SslEval, TaskError> {
    if manifests.is_empty() {
        return Err(TaskError::NoExamples("evaluate"));
    }
    let tok = state.tokenizer();
    let az_prompt = tok.encode(SSL_AZIMUTH_PROMPT);
    let el_prompt = tok.encode(SSL_ELEVATION_PROMPT);
    let rows = slice_map(mode, manifests, |m| -> Result<(f64, f64, f64, usize), TaskError> {
        require_sources(m, TaskKind::Ssl, 1)?;
        let truth = m.placements[0].direction_from_receiver;
        let f = scene_features(audio_dir, m)?;
        let hp = audio_prefix(state, &f.mel, &f.iv)?;
        let az = parse_angle(&answer_text(state, &tok, &hp, &az_prompt)?);
        let el = parse_angle(&answer_text(state, &tok, &hp, &el_prompt)?)
            .filter(|e| (-90..=90).contains(e));
        let mut missing = 0;
        let az_err = match az {
            Some(a) => {
                let est = Direction::new(a as f64, 0.0).expect("parsed azimuth in range");
                azimuth_error(&truth, &est)
            }
            None => {
                missing += 1;
                180.0
            }
        };
        let el_err = match el {
            Some(e) => {
                let est = Direction::new(0.0, e as f64).expect("parsed elevation in range");
                elevation_error(&truth, &est)
            }
            None => {
                missing += 1;
                180.0
            }
        };
        let ang_err = match (az, el) {
            (Some(a), Some(e)) => {
                let est = Direction::new(a as f64, e as f64).expect("parsed angles in range");
                angular_distance(&truth, &est)
            }
            _ => 180.0,
        };
        Ok((az_err, el_err, ang_err, missing))
    });
    let n = manifests.len() as f64;
    let (mut az, mut el, mut ang, mut miss) = (0.0, 0.0, 0.0, 0usize);
    for row in rows {
        let (a, e, d, m) = row?;
        az += a;
        el += e;
        ang += d;
        miss += m;
    }
    Ok(SslEval {
        errors: SslErrors {
            azimuth_mae: az / n,
            elevation_mae: el / n,
            angular_mae: ang / n,
            count: manifests.len(),
        },
        unparseable_rate: miss as f64 / (2.0 * n),
    })
}

/// FSR evaluation: mean WER of generated transcripts.
#[derive(Debug, Clone, Copy)]
pub struct FsrEval {
    pub wer: f64,
    pub n: usize,
}

/// Evaluates an FSR model: per scene, generates a transcript for the
/// recognition prompt and scores it against the reference.
pub fn eval_fsr(
    state: &ModelState,
    manifests: &[SceneManifest],
    audio_dir: &Path,
    mode: ExecMode,
) -> Result<FsrEval, TaskError> {
    if manifests.is_empty() {
        return Err(TaskError::NoExamples("evaluate"));
    }
    let tok = state.tokenizer();
    let prompt = tok.encode(FSR_PROMPT);
    let rows = slice_map(mode, manifests, |m| -> Result<f64, TaskError> {
        require_sources(m, TaskKind::Fsr, 1)?;
        let f = scene_features(audio_dir, m)?;
        let hp = audio_prefix(state, &f.mel, &f.iv)?;
        wer(&m.transcripts[0], &answer_text(state, &tok, &hp, &prompt)?)
    });
    let mut sum = 0.0;
    for row in rows {
        sum += row?;
    }
    Ok(FsrEval { wer: sum / manifests.len() as f64, n: manifests.len() })
}

/// One judged LSE answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LseResult {
    pub scene_id: u64,
    pub task: QaTask,
    pub success: bool,
    pub wer_vs_target: f64,
    pub hypothesis: String,
}

/// Evaluates an LSE model: for each scene both side prompts are asked
/// and each hypothesis is judged against the side's transcript with
/// the other side as distractor.
pub fn eval_lse(
    state: &ModelState,
    manifests: &[SceneManifest],
    audio_dir: &Path,
    mode: ExecMode,
) -> Result<Vec<LseResult>, TaskError> {
    if manifests.is_empty() {
        return Err(TaskError::NoExamples("evaluate"));
    }
    let tok = state.tokenizer();
    let left_prompt = tok.encode(LSE_PROMPT_LEFT);
    let right_prompt = tok.encode(LSE_PROMPT_RIGHT);
    let rows = slice_map(mode, manifests, |m| -> Result<[LseResult; 2], TaskError> {
        require_sources(m, TaskKind::Lse, 2)?;
        let (li, ri) = left_right_indices(m);
        let f = scene_features(audio_dir, m)?;
        let hp = audio_prefix(state, &f.mel, &f.iv)?;
        let judge = |task, prompt, target: &str, distractor: &str| -> Result<LseResult, TaskError> {
            let hypothesis = answer_text(state, &tok, &hp, prompt)?;
            Ok(LseResult {
                scene_id: m.scene_id,
                task,
                success: lse_judge(&hypothesis, target, distractor)?,
                wer_vs_target: wer(target, &hypothesis)?,
                hypothesis,
            })
        };
        Ok([
            judge(QaTask::LseLeft, &left_prompt, &m.transcripts[li], &m.transcripts[ri])?,
            judge(QaTask::LseRight, &right_prompt, &m.transcripts[ri], &m.transcripts[li])?,
        ])
    });
    let mut out = Vec::with_capacity(manifests.len() * 2);
    for row in rows {
        out.extend(row?);
    }
    Ok(out)
}

/// Aggregated LSE metrics. `swer` averages only successful answers and
/// `fwer` only failed ones; `wer` averages everything, so it equals
/// `sr * swer + (1 - sr) * fwer` up to rounding.
#[derive(Debug, Clone, Copy)]
pub struct LseStats {
    pub sr: f64,
    pub swer: Option<f64>,
    pub fwer: Option<f64>,
    pub wer: f64,
    pub successes: usize,
    pub n: usize,
}

/// Aggregates judged LSE answers. `None` on an empty slice.
pub fn lse_stats(results: &[LseResult]) -> Option<LseStats> {
    if results.is_empty() {
        return None;
    }
    let n = results.len();
    let successes = results.iter().filter(|r| r.success).count();
    let sum = |pred: &dyn Fn(&&LseResult) -> bool| -> f64 {
        results.iter().filter(pred).map(|r| r.wer_vs_target).sum()
    };
    let s_sum = sum(&|r| r.success);
    let f_sum = sum(&|r| !r.success);
    Some(LseStats {
        sr: successes as f64 / n as f64,
        swer: (successes > 0).then(|| s_sum / successes as f64),
        fwer: (successes < n).then(|| f_sum / (n - successes) as f64),
        wer: (s_sum + f_sum) / n as f64,
        successes,
        n,
    })
}

#[cfg(test)]
mod tests {
    use tempfile::tempdir;

    use crate::neural::ModelConfig;
    use crate::scene::{build_dataset, DatasetConfig, PlacementMode};

    use super::*;

    fn test_manifest(
        scene_id: u64,
        azimuths: &[f64],
        transcripts: &[&str],
    ) -> SceneManifest {
        use crate::scene::{RoomSpec, SourcePlacement};
        let room = RoomSpec::new([6.0, 6.0, 3.0], 0.7, 1).unwrap();
        let receiver = [3.0, 3.0, 1.5];
        let placements = azimuths
            .iter()
            .map(|&az| {
                let d = Direction::new(az, 0.0).unwrap();
                let u = d.unit_vector();
                SourcePlacement {
                    position: std::array::from_fn(|i| receiver[i] + u[i]),
                    direction_from_receiver: d,
                    distance: 1.0,
                }
            })
            .collect();
        SceneManifest {
            scene_id,
            room,
            receiver,
            placements,
            transcripts: transcripts.iter().map(|t| t.to_string()).collect(),
            onsets: vec![0; azimuths.len()],
            overlap_ratio: 0.0,
            mode: PlacementMode::Random,
            activation: crate::scene::Activation::Sequential,
            audio: format!("scene_{scene_id:05}.wav"),
            gain: 1.0,
        }
    }

    #[test]
    fn ssl_scenes_ask_both_angle_questions() {
        let m = test_manifest(3, &[47.4], &["a b"]);
        let qa = make_qa(&[m], TaskKind::Ssl).unwrap();
        assert_eq!(qa.len(), 2);
        assert_eq!(qa[0].task, QaTask::SslAzimuth);
        assert_eq!(qa[0].prompt, SSL_AZIMUTH_PROMPT);
        assert_eq!(qa[0].target, "47");
        assert_eq!(qa[1].task, QaTask::SslElevation);
        assert_eq!(qa[1].target, "0");
        let two = test_manifest(4, &[10.0, 20.0], &["a", "b"]);
        assert!(matches!(
            make_qa(&[two], TaskKind::Ssl),
            Err(TaskError::ArityMismatch { needs: 1, .. })
        ));
    }

    #[test]
    fn lse_left_is_the_larger_azimuth() {
        let m = test_manifest(0, &[90.0, -90.0], &["left words", "right words"]);
        let qa = make_qa(&[m], TaskKind::Lse).unwrap();
        assert_eq!(qa[0].task, QaTask::LseLeft);
        assert_eq!(qa[0].target, "left words");
        assert_eq!(qa[1].task, QaTask::LseRight);
        assert_eq!(qa[1].target, "right words");

        let same_side = test_manifest(1, &[-30.0, -80.0], &["upper", "lower"]);
        let qa = make_qa(&[same_side], TaskKind::Lse).unwrap();
        assert_eq!(qa[0].target, "upper");
        assert_eq!(qa[1].target, "lower");
    }

    #[test]
    fn fsr_target_is_the_transcript_verbatim() {
        let m = test_manifest(7, &[12.0], &["c a f e"]);
        let qa = make_qa(&[m], TaskKind::Fsr).unwrap();
        assert_eq!(qa.len(), 1);
        assert_eq!(qa[0].prompt, FSR_PROMPT);
        assert_eq!(qa[0].target, "c a f e");
    }

    #[test]
    fn angle_parsing_finds_the_first_in_range_integer() {
        assert_eq!(parse_angle("45"), Some(45));
        assert_eq!(parse_angle("azimuth is -120 degrees"), Some(-120));
        assert_eq!(parse_angle("north-ish"), None);
        assert_eq!(parse_angle("500"), None);
        assert_eq!(parse_angle("500 then 30"), Some(30));
        assert_eq!(parse_angle("about 45 or 50"), Some(45));
        assert_eq!(parse_angle("-0"), Some(0));
        assert_eq!(parse_angle(""), None);
    }

    #[test]
    fn wer_counts_word_edits() {
        assert_eq!(wer("a b c", "a b c").unwrap(), 0.0);
        assert_eq!(wer("a b c", "a c").unwrap(), 1.0 / 3.0);
        assert_eq!(wer("a b c", "").unwrap(), 1.0);
        assert_eq!(wer("a", "a b").unwrap(), 1.0);
        assert_eq!(wer("a b", "b a").unwrap(), 1.0);
        assert!(matches!(wer("", "a"), Err(TaskError::EmptyReference)));
        assert!(matches!(wer("   ", "a"), Err(TaskError::EmptyReference)));
    }

    #[test]
    fn judge_prefers_the_closer_reference_and_fails_ties() {
        assert!(lse_judge("a b c", "a b c", "d e f").unwrap());
        assert!(!lse_judge("d e f", "a b c", "d e f").unwrap());
        assert!(!lse_judge("a b d", "a b c", "a b e").unwrap());
        for (hyp, t, d) in [("a b x y", "a b c", "x y z"), ("p q", "p a", "q b")] {
            let fwd = lse_judge(hyp, t, d).unwrap();
            let rev = lse_judge(hyp, d, t).unwrap();
            assert!(!(fwd && rev), "both orders succeeded for {hyp:?}");
        }
    }

    #[test]
    fn lse_aggregation_satisfies_the_mix_identity() {
        let mk = |id, success, w| LseResult {
            scene_id: id,
            task: QaTask::LseLeft,
            success,
            wer_vs_target: w,
            hypothesis: String::new(),
        };
        let results = vec![
            mk(0, true, 0.0),
            mk(1, true, 0.25),
            mk(2, false, 0.75),
            mk(3, false, 1.0),
            mk(4, true, 1.0 / 3.0),
        ];
        let s = lse_stats(&results).unwrap();
        assert_eq!(s.n, 5);
        assert_eq!(s.successes, 3);
        assert_eq!(s.sr, 0.6);
        let mix = s.sr * s.swer.unwrap() + (1.0 - s.sr) * s.fwer.unwrap();
        assert!((s.wer - mix).abs() < 1e-12);
        assert!(lse_stats(&[]).is_none());
        let all = vec![mk(0, true, 0.0)];
        let s = lse_stats(&all).unwrap();
        assert_eq!(s.sr, 1.0);
        assert!(s.fwer.is_none());
    }

    #[test]
    fn task_training_runs_and_is_deterministic() {
        let dir = tempdir().unwrap();
        let cfg = DatasetConfig {
            n_scenes: 6,
            sources: 1,
            mode: PlacementMode::Random,
            utterance_len: (3, 5),
            seed: 41,
            ..DatasetConfig::default()
        };
        let manifests = build_dataset(&cfg, dir.path(), ExecMode::Auto).unwrap();
        let stage0 = ModelState::new(ModelConfig { seed: 13, ..ModelConfig::tiny() }).unwrap();
        let opts = TrainOpts {
            steps: 12,
            batch: 4,
            lr: 1e-3,
            seed: 2,
            val_every: 6,
            mode: ExecMode::Auto,
        };
        let run = |mode| {
            let r = train_task(
                &stage0,
                &manifests,
                dir.path(),
                TaskKind::Ssl,
                FusionMode::Before,
                false,
                &TrainOpts { mode, ..opts },
            )
            .unwrap();
            assert_eq!(r.losses.len(), 12);
            assert!(r.losses.iter().all(|l| l.is_finite()));
            r
        };
        let a = run(ExecMode::Auto);
        let b = run(ExecMode::Sequential);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.val_history, b.val_history);

        let eval = eval_ssl(&a.state, &manifests, dir.path(), ExecMode::Auto).unwrap();
        assert_eq!(eval.errors.count, 6);
        assert!((0.0..=1.0).contains(&eval.unparseable_rate));
        assert!(eval.errors.angular_mae.is_finite());
    }

    #[test]
    fn lse_training_and_eval_round_trip() {
        let dir = tempdir().unwrap();
        let cfg = DatasetConfig {
            n_scenes: 4,
            sources: 2,
            mode: PlacementMode::LeftRight,
            utterance_len: (2, 3),
            seed: 97,
            ..DatasetConfig::default()
        };
        let manifests = build_dataset(&cfg, dir.path(), ExecMode::Auto).unwrap();
        let stage0 = ModelState::new(ModelConfig { seed: 13, ..ModelConfig::tiny() }).unwrap();
        let opts = TrainOpts {
            steps: 4,
            batch: 4,
            lr: 1e-3,
            seed: 3,
            val_every: 4,
            mode: ExecMode::Auto,
        };
        let run = train_task(
            &stage0,
            &manifests,
            dir.path(),
            TaskKind::Lse,
            FusionMode::After,
            false,
            &opts,
        )
        .unwrap();
        let results = eval_lse(&run.state, &manifests, dir.path(), ExecMode::Auto).unwrap();
        assert_eq!(results.len(), 8);
        let stats = lse_stats(&results).unwrap();
        assert_eq!(stats.n, 8);
        assert!((0.0..=1.0).contains(&stats.sr));
        let fsr_err = eval_fsr(&run.state, &manifests, dir.path(), ExecMode::Auto);
        assert!(matches!(fsr_err, Err(TaskError::ArityMismatch { needs: 1, .. })));
    }
}
