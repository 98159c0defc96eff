use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Reads a mono WAV (first channel of multichannel files). Integer PCM is
/// scaled by `1 / 2^(bits - 1)`, i.e. 1/32768 for 16-bit.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let path = path.as_ref();
    let wrap = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wrap)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let samples: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .step_by(channels)
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wrap)?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .step_by(channels)
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wrap)?
        }
    };
    Ok((samples, spec.sample_rate))
}

pub fn write_wav_f32(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let wrap = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        writer.write_sample(s as f32).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pcm16_is_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for v in [0i16, 16384, -32768, 32767] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let (x, rate) = read_wav(&path).unwrap();
        assert_eq!(rate, 16000);
        assert_eq!(x, vec![0.0, 0.5, -1.0, 32767.0 / 32768.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn float32_round_trip_is_exact(raw in proptest::collection::vec(-1.0f32..1.0, 1..400)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.wav");
            let samples: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
            write_wav_f32(&path, &samples, 16000).unwrap();
            let (back, rate) = read_wav(&path).unwrap();
            prop_assert_eq!(rate, 16000);
            prop_assert_eq!(back, samples);
        }
    }
}
