//! Audio decoding and MFCC feature extraction.

pub mod cache;
pub mod mfcc;
pub mod wav;

use crate::error::{KwsError, Result};

/// Sample rate every clip must have after validation.
pub const SAMPLE_RATE: u32 = 16_000;
/// Samples in a one-second clip at [`SAMPLE_RATE`].
pub const CLIP_SAMPLES: usize = 16_000;

/// Decoded mono audio, samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Normalizes a clip to exactly one second: shorter clips are right-padded
/// with zeros, longer clips are center-cropped.
pub fn pad_or_crop(clip: &AudioClip) -> Result<AudioClip> {
    if clip.samples.is_empty() {
        return Err(KwsError::Dataset("cannot pad an empty clip".into()));
    }
    let n = clip.samples.len();
    let samples = if n == CLIP_SAMPLES {
        clip.samples.clone()
    } else if n < CLIP_SAMPLES {
        let mut s = clip.samples.clone();
        s.resize(CLIP_SAMPLES, 0.0);
        s
    } else {
        let start = (n - CLIP_SAMPLES) / 2;
        clip.samples[start..start + CLIP_SAMPLES].to_vec()
    };
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> AudioClip {
        AudioClip {
            samples: (0..n).map(|i| i as f32 * 1e-5).collect(),
            sample_rate: SAMPLE_RATE,
        }
    }

    #[test]
    fn short_clip_is_right_padded() {
        let out = pad_or_crop(&ramp(12_000)).unwrap();
        assert_eq!(out.samples.len(), 16_000);
        assert_eq!(out.samples[..12_000], ramp(12_000).samples[..]);
        assert!(out.samples[12_000..].iter().all(|s| *s == 0.0));
    }

    #[test]
    fn exact_clip_is_unchanged() {
        let clip = ramp(16_000);
        assert_eq!(pad_or_crop(&clip).unwrap(), clip);
    }

    #[test]
    fn long_clip_is_center_cropped() {
        let out = pad_or_crop(&ramp(18_000)).unwrap();
        assert_eq!(out.samples.len(), 16_000);
        assert_eq!(out.samples[..], ramp(18_000).samples[1000..17_000]);
    }

    #[test]
    fn empty_clip_is_an_error() {
        assert!(pad_or_crop(&ramp(0)).is_err());
    }
}
