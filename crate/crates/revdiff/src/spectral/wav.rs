//! Mono 16-bit PCM WAV reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, RevdiffError};
use crate::spectral::Waveform;

/// Write a waveform as mono 16-bit PCM. Samples are clamped to `[-1, 1]`.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let n = w.samples.len() as u32;
    let data_bytes = n * 2;
    let byte_rate = w.sample_rate * 2;

    out.write_all(b"RIFF")?;
    out.write_all(&(36 + data_bytes).to_le_bytes())?;
    out.write_all(b"WAVE")?;
    out.write_all(b"fmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?; // PCM
    out.write_all(&1u16.to_le_bytes())?; // mono
    out.write_all(&w.sample_rate.to_le_bytes())?;
    out.write_all(&byte_rate.to_le_bytes())?;
    out.write_all(&2u16.to_le_bytes())?; // block align
    out.write_all(&16u16.to_le_bytes())?; // bits per sample
    out.write_all(b"data")?;
    out.write_all(&data_bytes.to_le_bytes())?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Read a mono 16-bit PCM WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut r = BufReader::new(File::open(path)?);
    let riff = read_exact::<4>(&mut r)?;
    if &riff != b"RIFF" {
        return Err(RevdiffError::Wav("missing RIFF header".into()));
    }
    let _size = read_exact::<4>(&mut r)?;
    let wave = read_exact::<4>(&mut r)?;
    if &wave != b"WAVE" {
        return Err(RevdiffError::Wav("missing WAVE tag".into()));
    }
    let mut sample_rate = 0u32;
    let mut channels = 0u16;
    let mut bits = 0u16;
    loop {
        let id = read_exact::<4>(&mut r)?;
        let len = u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize;
        match &id {
            b"fmt " => {
                let mut chunk = vec![0u8; len];
                r.read_exact(&mut chunk)?;
                let fmt = u16::from_le_bytes([chunk[0], chunk[1]]);
                if fmt != 1 {
                    return Err(RevdiffError::Wav(format!("unsupported format tag {fmt}")));
                }
                channels = u16::from_le_bytes([chunk[2], chunk[3]]);
                sample_rate = u32::from_le_bytes([chunk[4], chunk[5], chunk[6], chunk[7]]);
                bits = u16::from_le_bytes([chunk[14], chunk[15]]);
            }
            b"data" => {
                if channels != 1 || bits != 16 {
                    return Err(RevdiffError::Wav(format!(
                        "expected mono 16-bit PCM, got {channels} ch / {bits} bit"
                    )));
                }
                let mut chunk = vec![0u8; len];
                r.read_exact(&mut chunk)?;
                let samples = chunk
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32767.0)
                    .collect();
                return Waveform::new(samples, sample_rate);
            }
            _ => {
                // Skip unknown chunks (padded to even length).
                let skip = len + (len & 1);
                std::io::copy(&mut r.by_ref().take(skip as u64), &mut std::io::sink())?;
            }
        }
    }
}
