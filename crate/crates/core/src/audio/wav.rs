//! Minimal RIFF/WAVE reader and writer for PCM16 mono 16 kHz files — the
//! only layout the dataset uses.

use std::fs;
use std::path::Path;

use super::{AudioClip, SAMPLE_RATE};
use crate::error::{KwsError, Result};

fn format_err(path: &Path, field: &'static str, detail: impl Into<String>) -> KwsError {
    KwsError::AudioFormat {
        path: path.to_path_buf(),
        field,
        detail: detail.into(),
    }
}

fn read_u16(bytes: &[u8], at: usize) -> Option<u16> {
    bytes.get(at..at + 2).map(|b| u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Decodes a PCM16 mono 16 kHz WAV file into floats in `[-1, 1]`.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path)?;
    parse_wav(path, &bytes)
}

fn parse_wav(path: &Path, bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(format_err(path, "riff_header", "not a RIFF/WAVE file"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut at = 12usize;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = read_u32(bytes, at + 4).unwrap() as usize;
        let body_at = at + 8;
        if body_at + size > bytes.len() {
            return Err(format_err(
                path,
                "chunk_size",
                format!(
                    "chunk `{}` claims {size} bytes but only {} remain",
                    String::from_utf8_lossy(id),
                    bytes.len() - body_at
                ),
            ));
        }
        let body = &bytes[body_at..body_at + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(format_err(path, "fmt_chunk", "fmt chunk shorter than 16 bytes"));
                }
                fmt = Some((
                    read_u16(body, 0).unwrap(),
                    read_u16(body, 2).unwrap(),
                    read_u32(body, 4).unwrap(),
                    read_u16(body, 14).unwrap(),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        at = body_at + size + size % 2; // chunks are word-aligned
    }

    let (audio_format, channels, sample_rate, bits) = fmt
        .ok_or_else(|| format_err(path, "fmt_chunk", "missing fmt chunk"))?;
    if audio_format != 1 {
        return Err(format_err(
            path,
            "audio_format",
            format!("expected PCM (1), got {audio_format}"),
        ));
    }
    if channels != 1 {
        return Err(format_err(
            path,
            "channels",
            format!("expected mono, got {channels} channels"),
        ));
    }
    if bits != 16 {
        return Err(format_err(
            path,
            "bits_per_sample",
            format!("expected 16, got {bits}"),
        ));
    }
    if sample_rate != SAMPLE_RATE {
        return Err(format_err(
            path,
            "sample_rate",
            format!("expected {SAMPLE_RATE} Hz, got {sample_rate}"),
        ));
    }

    let data = data.ok_or_else(|| format_err(path, "data_chunk", "missing data chunk"))?;
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate,
    })
}

/// Writes samples as PCM16 mono, clamping to `[-1, 1]`.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut bytes = Vec::with_capacity(44 + data_len);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&sample_rate.to_le_bytes());
    bytes.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes());
    bytes.extend_from_slice(&16u16.to_le_bytes());
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&(data_len as u32).to_le_bytes());
    for s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip_dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn roundtrip_full_length_clip() {
        let dir = roundtrip_dir();
        let path = dir.path().join("a.wav");
        let samples: Vec<f32> = (0..16_000)
            .map(|i| (i as f32 * 0.01).sin() * 0.5)
            .collect();
        write_wav(&path, &samples, SAMPLE_RATE).unwrap();
        let clip = load_wav(&path).unwrap();
        assert_eq!(clip.samples.len(), 16_000);
        assert_eq!(clip.sample_rate, SAMPLE_RATE);
        for (a, b) in clip.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 1.0 / 32768.0 + 1e-6);
        }
        assert!(clip.samples.iter().all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn truncated_header_is_a_format_error() {
        let dir = roundtrip_dir();
        let path = dir.path().join("t.wav");
        std::fs::write(&path, b"RIFF\x00\x00").unwrap();
        let err = load_wav(&path).unwrap_err();
        assert!(err.to_string().contains("riff_header"), "{err}");
    }

    #[test]
    fn truncated_data_chunk_is_a_format_error() {
        let dir = roundtrip_dir();
        let path = dir.path().join("t.wav");
        let samples = vec![0.0f32; 100];
        write_wav(&path, &samples, SAMPLE_RATE).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 50);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_wav(&path).unwrap_err();
        assert!(err.to_string().contains("chunk_size"), "{err}");
    }

    #[test]
    fn stereo_file_is_rejected() {
        let dir = roundtrip_dir();
        let path = dir.path().join("s.wav");
        write_wav(&path, &vec![0.0; 64], SAMPLE_RATE).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[22] = 2; // channel count field
        std::fs::write(&path, &bytes).unwrap();
        let err = load_wav(&path).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn wrong_sample_rate_is_rejected() {
        let dir = roundtrip_dir();
        let path = dir.path().join("r.wav");
        write_wav(&path, &vec![0.0; 64], 8000).unwrap();
        let err = load_wav(&path).unwrap_err();
        assert!(err.to_string().contains("sample_rate"), "{err}");
    }
}
