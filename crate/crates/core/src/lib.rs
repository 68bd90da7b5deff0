//! UAV acoustic classification toolkit: log-mel features, waveform
//! augmentation, a compact CNN and a patch-based spectrogram transformer,
//! fine-tuning strategies, training and cross-validation bookkeeping.

pub mod tensor;
pub mod dsp;
pub mod augment;
pub mod seed;
pub mod models;
pub mod peft;
pub mod train;
pub mod data;
