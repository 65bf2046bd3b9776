//! Stage-0 text pretraining for the decoder.
//!
//! Before any task training the decoder alone is trained on synthetic
//! text: echo pairs (the answer repeats the prompt), question prompts
//! answered with random angles, and transcription prompts answered with
//! random symbol strings. This teaches the output formats once; task
//! models then copy the decoder, freeze it, and adapt through LoRA.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::parallel::ExecMode;
use crate::tasks::{
    FSR_PROMPT, LSE_PROMPT_LEFT, LSE_PROMPT_RIGHT, SSL_AZIMUTH_PROMPT, SSL_ELEVATION_PROMPT,
};

use super::tokenizer::Tokenizer;
use super::train::{TrainExample, Trainer};
use super::{ModelState, NeuralError};

/// Stage-0 training settings.
#[derive(Clone, Copy, Debug)]
pub struct PretrainOpts {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: ExecMode,
}

impl Default for PretrainOpts {
    fn default() -> PretrainOpts {
        PretrainOpts { steps: 900, batch: 16, lr: 1e-3, seed: 0, mode: ExecMode::Auto }
    }
}

fn random_words(rng: &mut ChaCha8Rng, words: std::ops::RangeInclusive<usize>, letters: u8) -> String {
    let n = rng.gen_range(words);
    let mut out = String::new();
    for w in 0..n {
        if w > 0 {
            out.push(' ');
        }
        for _ in 0..rng.gen_range(1..=5) {
            out.push((b'a' + rng.gen_range(0..letters)) as char);
        }
    }
    out
}

/// A batch of synthetic text examples drawn from the three stage-0
/// families in equal proportion.
pub fn stage0_batch(tok: &Tokenizer, rng: &mut ChaCha8Rng, n: usize) -> Vec<TrainExample> {
    (0..n)
        .map(|_| match rng.gen_range(0..3u8) {
            0 => {
                // The trailing period marks the end of the prompt;
                // without it the echo start is ambiguous and the loss
                // has an entropy floor.
                let text = random_words(rng, 1..=3, 26);
                TrainExample {
                    audio: None,
                    prompt: tok.encode(&format!("{text}.")),
                    answer: tok.encode(&text),
                }
            }
            1 => {
                let (prompt, angle) = if rng.gen_bool(0.5) {
                    (SSL_AZIMUTH_PROMPT, rng.gen_range(-180..=180i64))
                } else {
                    (SSL_ELEVATION_PROMPT, rng.gen_range(-90..=90i64))
                };
                TrainExample {
                    audio: None,
                    prompt: tok.encode(prompt),
                    answer: tok.encode(&angle.to_string()),
                }
            }
            _ => {
                let prompt = match rng.gen_range(0..3u8) {
                    0 => FSR_PROMPT,
                    1 => LSE_PROMPT_LEFT,
                    _ => LSE_PROMPT_RIGHT,
                };
                let n_sym = rng.gen_range(5..=12);
                let text: Vec<String> = (0..n_sym)
                    .map(|_| ((b'a' + rng.gen_range(0..16u8)) as char).to_string())
                    .collect();
                TrainExample {
                    audio: None,
                    prompt: tok.encode(prompt),
                    answer: tok.encode(&text.join(" ")),
                }
            }
        })
        .collect()
}

/// Trains the decoder on stage-0 text and returns the per-step losses.
/// The caller is expected to freeze the decoder afterwards.
pub fn pretrain_stage0(state: &mut ModelState, opts: &PretrainOpts) -> Result<Vec<f64>, NeuralError> {
    let tok = state.tokenizer();
    let mut trainer = Trainer::new(opts.lr, opts.seed, opts.mode);
    trainer.train_steps(state, opts.steps, |_, rng| stage0_batch(&tok, rng, opts.batch))
}
