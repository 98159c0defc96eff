//! Audio clips, WAV I/O, corpus scanning and synthetic test material.

mod synth;
mod wav;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{
    synth_speech_like, synth_utterance, synthetic_corpus, synthetic_speaker, Gender, SpeakerModel, SynthKind,
};
pub use wav::{read_wav, write_wav_f32};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub speaker_id: Option<String>,
    pub utterance_id: String,
}

impl AudioClip {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub path: PathBuf,
    pub reason: String,
}

/// Clips grouped by speaker, both in lexicographic order.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub speakers: BTreeMap<String, Vec<AudioClip>>,
    pub rejects: Vec<Reject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub duration_s: f64,
}

impl Corpus {
    pub fn speaker(&self, id: &str) -> Result<&[AudioClip]> {
        self.speakers
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Corpus(format!("unknown speaker {id}")))
    }

    /// speaker → utterances → durations
    pub fn manifest(&self) -> BTreeMap<String, Vec<ManifestEntry>> {
        self.speakers
            .iter()
            .map(|(spk, clips)| {
                (
                    spk.clone(),
                    clips
                        .iter()
                        .map(|c| ManifestEntry {
                            utterance_id: c.utterance_id.clone(),
                            duration_s: c.duration_s(),
                        })
                        .collect(),
                )
            })
            .collect()
    }

    /// Writes `root/<speaker>/<utterance>.wav` as float32.
    pub fn write(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        for (spk, clips) in &self.speakers {
            let dir = root.join(spk);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for clip in clips {
                write_wav_f32(dir.join(format!("{}.wav", clip.utterance_id)), &clip.samples, clip.sample_rate)?;
            }
        }
        Ok(())
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Scans `root/<speaker>/<utterance>.wav`. Files at a rate other than
/// `expected_rate` are listed in [`Corpus::rejects`]; unreadable files fail
/// the whole load with one line per file.
pub fn load_corpus(root: impl AsRef<Path>, expected_rate: u32) -> Result<Corpus> {
    let root = root.as_ref();
    let mut corpus = Corpus::default();
    let mut failures = Vec::new();
    for spk_dir in sorted_entries(root)? {
        if !spk_dir.is_dir() {
            continue;
        }
        let speaker = spk_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut clips = Vec::new();
        for path in sorted_entries(&spk_dir)? {
            let is_wav = path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            if !is_wav {
                continue;
            }
            match read_wav(&path) {
                Ok((samples, rate)) if rate == expected_rate => clips.push(AudioClip {
                    samples,
                    sample_rate: rate,
                    speaker_id: Some(speaker.clone()),
                    utterance_id: path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                }),
                Ok((_, rate)) => corpus.rejects.push(Reject {
                    path,
                    reason: format!("sample rate {rate} Hz, expected {expected_rate} Hz"),
                }),
                Err(e) => failures.push(e.to_string()),
            }
        }
        if !clips.is_empty() {
            corpus.speakers.insert(speaker, clips);
        }
    }
    if !failures.is_empty() {
        return Err(Error::Corpus(format!("unreadable files:\n{}", failures.join("\n"))));
    }
    if corpus.speakers.is_empty() {
        return Err(Error::Corpus(format!("no speakers found under {}", root.display())));
    }
    Ok(corpus)
}
