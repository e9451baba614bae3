use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{resample, AudioError, Result, Waveform};

/// Read a WAV file as mono at its native rate. Multi-channel files are
/// averaged down to one channel.
pub fn read_wav_native(path: &Path) -> Result<Waveform> {
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => reader.into_samples::<f32>().collect::<std::result::Result<_, _>>()?,
        SampleFormat::Int => {
            if spec.bits_per_sample == 0 || spec.bits_per_sample > 32 {
                return Err(AudioError::UnsupportedFormat(format!(
                    "{}-bit integer samples",
                    spec.bits_per_sample
                )));
            }
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Read a WAV file as mono, converting to `target_rate` when it differs.
pub fn read_wav(path: &Path, target_rate: u32) -> Result<Waveform> {
    let w = read_wav_native(path)?;
    if w.sample_rate() == target_rate {
        Ok(w)
    } else {
        resample(&w, target_rate)
    }
}

/// Encode as 16-bit PCM mono. Samples are clamped to [-1, 1].
pub fn wav_bytes(w: &Waveform) -> Result<Vec<u8>> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::with_capacity(44 + 2 * w.len()));
    {
        let mut writer = WavWriter::new(&mut cursor, spec)?;
        for &s in w.samples() {
            writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
        }
        writer.finalize()?;
    }
    Ok(cursor.into_inner())
}

/// Write 16-bit PCM mono atomically.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    crate::io::atomic_write(path, &wav_bytes(w)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new((0..1600).map(|i| (i as f32 * 0.01).sin() * 0.8).collect(), 16_000).unwrap();
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path, 16_000).unwrap();
        assert_eq!(back.len(), w.len());
        for (a, b) in w.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1.0 / 16_000.0);
        }
        // A second write of the decoded clip is byte-stable.
        assert_eq!(wav_bytes(&back).unwrap(), wav_bytes(&read_wav(&path, 16_000).unwrap()).unwrap());
    }

    #[test]
    fn stereo_and_rate_conversion_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8_000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut writer = WavWriter::create(&path, spec).unwrap();
        for _ in 0..8_000 {
            writer.write_sample(8192i16).unwrap();
            writer.write_sample(0i16).unwrap();
        }
        writer.finalize().unwrap();

        let native = read_wav_native(&path).unwrap();
        assert_eq!(native.sample_rate(), 8_000);
        assert!((native.samples()[10] - 0.125).abs() < 1e-6);

        let converted = read_wav(&path, 16_000).unwrap();
        assert_eq!(converted.sample_rate(), 16_000);
        assert_eq!(converted.len(), 16_000);
    }
}
