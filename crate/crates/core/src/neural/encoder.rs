//! Frozen surrogate audio encoder.
//!
//! Two per-frame affine+tanh stages followed by a causal temporal
//! convolution (kernel 5) with a final tanh. Weights are drawn once from
//! the model seed and never trained, so encodings are a fixed, repeatable
//! function of the input mel frames.

use rand_chacha::ChaCha8Rng;

use crate::foa::MelFrames;

use super::nn::linear;
use super::params::{gaussian, ParamSet};
use super::tensor::Tensor;
use super::ModelConfig;

const MEL_SHIFT: f64 = 11.5;
const MEL_SCALE: f64 = 5.0;
const CONV_TAPS: usize = 5;

pub(super) fn init_encoder(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.d_enc;
    let m = cfg.mel_bands;
    params.insert("enc.a1.w", gaussian(rng, d, m, 1.0 / (m as f64).sqrt()), true);
    params.insert("enc.a1.b", Tensor::zeros(1, d), true);
    params.insert("enc.a2.w", gaussian(rng, d, d, 1.0 / (d as f64).sqrt()), true);
    params.insert("enc.a2.b", Tensor::zeros(1, d), true);
    let fan_in = d * CONV_TAPS;
    params.insert("enc.conv.w", gaussian(rng, d, fan_in, 1.0 / (fan_in as f64).sqrt()), true);
    params.insert("enc.conv.b", Tensor::zeros(1, d), true);
}

/// Encodes log-mel frames to hidden features, `T x d_enc`.
pub(super) fn encode(params: &ParamSet, cfg: &ModelConfig, mel: &MelFrames) -> Tensor {
    assert_eq!(mel.bands, cfg.mel_bands, "mel band count mismatch");
    let t = mel.frames;
    let d = cfg.d_enc;
    let x = Tensor::from_fn(t, mel.bands, |i, j| (mel.frame(i)[j] + MEL_SHIFT) / MEL_SCALE);
    let h1 = linear(&x, params.get("enc.a1.w"), params.get("enc.a1.b")).map(f64::tanh);
    let h2 = linear(&h1, params.get("enc.a2.w"), params.get("enc.a2.b")).map(f64::tanh);

    let mut flat = Tensor::zeros(t, d * CONV_TAPS);
    for i in 0..t {
        for k in 0..CONV_TAPS {
            if i >= k {
                flat.row_mut(i)[k * d..(k + 1) * d].copy_from_slice(h2.row(i - k));
            }
        }
    }
    linear(&flat, params.get("enc.conv.w"), params.get("enc.conv.b")).map(f64::tanh)
}

#[cfg(test)]
mod tests {
    use crate::foa::MEL_BANDS;
    use crate::neural::{surrogate_encode, ModelState};

    use super::*;

    fn test_mel(frames: usize, seed: u64) -> MelFrames {
        let mut v = seed as f64;
        let features = (0..frames * MEL_BANDS)
            .map(|_| {
                v = (v * 1103515245.0 + 12345.0) % 32768.0;
                -23.0 + 20.0 * (v / 32768.0)
            })
            .collect();
        MelFrames { features, frames, bands: MEL_BANDS, frame_rate: 50.0 }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = ModelState::new(Default::default()).unwrap();
        let b = ModelState::new(Default::default()).unwrap();
        let mel = test_mel(30, 3);
        assert_eq!(surrogate_encode(&a, &mel), surrogate_encode(&b, &mel));
    }

    #[test]
    fn output_shape_is_t_by_d_enc() {
        let state = ModelState::new(Default::default()).unwrap();
        let mel = test_mel(47, 1);
        let z = surrogate_encode(&state, &mel);
        assert_eq!((z.rows(), z.cols()), (47, 64));
        assert!(z.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn convolution_is_causal() {
        let state = ModelState::new(Default::default()).unwrap();
        let mut mel = test_mel(20, 9);
        let base = surrogate_encode(&state, &mel);
        for j in 0..MEL_BANDS {
            mel.features[10 * MEL_BANDS + j] = 0.0;
        }
        let changed = surrogate_encode(&state, &mel);
        for t in 0..10 {
            assert_eq!(base.row(t), changed.row(t), "frame {t} saw a future change");
        }
        assert_ne!(base.row(10), changed.row(10));
    }

    #[test]
    fn encoder_parameters_are_frozen() {
        let state = ModelState::new(Default::default()).unwrap();
        for name in ["enc.a1.w", "enc.a1.b", "enc.a2.w", "enc.a2.b", "enc.conv.w", "enc.conv.b"] {
            assert!(state.params.is_frozen(name), "{name} should be frozen");
        }
    }
}
