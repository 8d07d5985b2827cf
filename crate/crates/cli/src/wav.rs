use std::path::Path;

use anyhow::{bail, Context, Result};
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

/// Reads a WAV file as `[channels][samples]` in `[-1, 1]`.
pub fn read(path: &Path) -> Result<(Vec<Vec<f64>>, u32)> {
    let mut reader = WavReader::open(path).with_context(|| format!("opening {}", path.display()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>()?,
        (SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<Result<_, _>>()?
        }
        (fmt, bits) => bail!("{}: unsupported sample format {fmt:?}/{bits}", path.display()),
    };
    let mut out = vec![Vec::with_capacity(interleaved.len() / channels); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (ch, v) in out.iter_mut().zip(frame) {
            ch.push(*v);
        }
    }
    Ok((out, spec.sample_rate))
}

/// Writes `[channels][samples]` as 32-bit float.
pub fn write(path: &Path, channels: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec).with_context(|| format!("creating {}", path.display()))?;
    let len = channels.iter().map(Vec::len).min().unwrap_or(0);
    for i in 0..len {
        for ch in channels {
            w.write_sample(ch[i] as f32)?;
        }
    }
    w.finalize()?;
    Ok(())
}
