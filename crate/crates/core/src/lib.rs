//! Auris: a desk-scale spatial-audio listening pipeline.
//!
//! The crate covers the full chain from 4-channel first-order-ambisonics
//! audio to task metrics:
//!
//! - [`foa`] — B-format WAV I/O, STFT, log-mel features, plane-wave
//!   encoding and acoustic intensity vectors.
//! - [`localisation`] — direction arithmetic, a classical DoA estimator
//!   from intensity vectors, and angular error metrics.
//! - [`scene`] — shoebox image-source room simulation, two-source
//!   placement sampling, overlap-controlled mixing and dataset
//!   generation.
//! - [`neural`] — a compact audio-conditioned text model: frozen
//!   surrogate encoder, window-level cross-attention aligner with
//!   optional intensity-vector fusion, causal decoder with low-rank
//!   adapters and optional angle-token vocabulary, trained by manual
//!   backpropagation.
//! - [`tasks`] — QA example construction, the training loop, and the
//!   localisation / recognition / extraction evaluation metrics.
//! - [`report`] — CSV metric files, plain-text summary tables and
//!   self-contained SVG plots.
//!
//! Batch work (scene generation, Monte-Carlo checks, per-example batch
//! gradients, evaluation) runs data-parallel through [`parallel`] when
//! the `parallel` feature is enabled (default) and falls back to
//! sequential execution otherwise.

pub mod foa;
pub mod localisation;
pub mod neural;
pub mod parallel;
pub mod report;
pub mod scene;
pub mod tasks;
