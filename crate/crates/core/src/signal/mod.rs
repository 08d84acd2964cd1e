//! Recording IO, preprocessing (band-pass, resampling, windowing, z-score)
//! and the synthetic corpus generator.

mod filter;
mod recording;
mod segment;
mod synth;

pub use filter::{bandpass, bandpass_taps, filtfilt, lowpass_taps, resample, resample_poly};
pub use recording::{
    manifest_text, read_dataset, read_recording, write_dataset, write_recording, Recording, Segment, MANIFEST,
};
pub use segment::{preprocess, preprocess_all, segment, zscore, Preprocessed, SegmentationPolicy, ZScoreScope};
pub use synth::{class_frequency, synth_generate, SynthSpec};
