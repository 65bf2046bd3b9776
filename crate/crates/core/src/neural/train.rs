//! Deterministic minibatch training driver.
//!
//! Per-example forward/backward passes may run in parallel, but their
//! gradients are summed in example order and the optimiser visits
//! parameters in name order, so training is bit-reproducible for a given
//! seed and batch stream regardless of thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::foa::{IntensityFrames, MelFrames};
use crate::parallel::{slice_map, ExecMode};

use super::params::{Adam, Grads};
use super::{backward, forward, ModelState, NeuralError};

/// One training example: optional audio features plus prompt and answer
/// token ids.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub audio: Option<(MelFrames, IntensityFrames)>,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

/// Adam plus the batch RNG and step counter, so training can be driven
/// in chunks with evaluation in between.
pub struct Trainer {
    pub adam: Adam,
    rng: ChaCha8Rng,
    pub steps_done: usize,
    pub mode: ExecMode,
}

impl Trainer {
    pub fn new(lr: f64, seed: u64, mode: ExecMode) -> Trainer {
        Trainer { adam: Adam::new(lr), rng: ChaCha8Rng::seed_from_u64(seed), steps_done: 0, mode }
    }

    /// Runs `n` optimisation steps, pulling each batch from `make_batch`
    /// with the step index and the trainer RNG. Returns the mean loss of
    /// every step.
    pub fn train_steps<F>(
        &mut self,
        state: &mut ModelState,
        n: usize,
        mut make_batch: F,
    ) -> Result<Vec<f64>, NeuralError>
    where
        F: FnMut(usize, &mut ChaCha8Rng) -> Vec<TrainExample>,
    {
        let mut losses = Vec::with_capacity(n);
        for _ in 0..n {
            let batch = make_batch(self.steps_done, &mut self.rng);
            self.steps_done += 1;
            if batch.is_empty() {
                losses.push(0.0);
                continue;
            }
            let results = slice_map(self.mode, &batch, |ex| {
                forward(state, ex).map(|rec| (rec.loss, backward(state, &rec)))
            });
            let mut total = Grads::new();
            let mut loss_sum = 0.0;
            for r in results {
                let (loss, grads) = r?;
                loss_sum += loss;
                total.merge(&grads);
            }
            total.scale(1.0 / batch.len() as f64);
            self.adam.step(&mut state.params, &total);
            losses.push(loss_sum / batch.len() as f64);
        }
        Ok(losses)
    }
}
