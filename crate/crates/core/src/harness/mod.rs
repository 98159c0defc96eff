//! Experiment orchestration: scenario sampling, dictionary training,
//! separation sweeps over channel modes and metric collection.

mod report;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustics::{default_array, render_with_rirs, sample_scenarios, scenario_rirs, Room, Scenario, Vec3};
use crate::corpus::{load_corpus, synthetic_corpus, AudioClip, Corpus, ManifestEntry, DEFAULT_SAMPLE_RATE};
use crate::echomodel::{baseline_channels, build_channels, echo_model, Baseline, ChannelMatrix, ChannelMode, DelayReference};
use crate::emsep::{separate_em, EmRunConfig, DEFAULT_EM_ITERATIONS, DEFAULT_NOISE_FLOOR};
use crate::error::{Error, Result};
use crate::metrics::{bss_eval, DEFAULT_FILTER_LEN};
use crate::musep::{default_gamma, separate_mu, DictionaryMode, MuRunConfig, DEFAULT_MU_ITERATIONS};
use crate::nmf::{train_dictionary, Dictionary, Provenance, SpeakerSpectra, TrainConfig, DEFAULT_TRAIN_ITERATIONS};
use crate::spectral::{stft, Stft, StftConfig};

pub use report::{aggregate, emit_report, lower_quantile, read_results, Aggregate, Quartiles, RESULT_COLUMNS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Mu,
    Em,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Mu => "mu",
            Algorithm::Em => "em",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mu" => Ok(Algorithm::Mu),
            "em" => Ok(Algorithm::Em),
            _ => Err(Error::Config(format!("unknown algorithm '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RoomConfig {
    /// Seven-wall default room.
    Default { absorption: f64 },
    Shoebox { dims: [f64; 3], absorption: f64 },
    Custom(Room),
}

impl RoomConfig {
    pub fn build(&self, sample_rate: u32) -> Result<Room> {
        match self {
            RoomConfig::Default { absorption } => Room::default_seven_wall(*absorption, sample_rate),
            RoomConfig::Shoebox { dims, absorption } => Room::shoebox(*dims, *absorption, sample_rate),
            RoomConfig::Custom(room) => {
                let mut room = room.clone();
                room.sample_rate = sample_rate;
                Ok(room)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorpusSource {
    Synthetic {
        n_male: usize,
        n_female: usize,
        utterances: usize,
        duration_s: f64,
        seed: u64,
    },
    Directory { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    /// Speakers held out for the mixtures; the others train the universal
    /// dictionary.
    pub test_speakers: usize,
    /// Test utterances are cut to this length.
    pub test_duration_s: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            source: CorpusSource::Synthetic {
                n_male: 8,
                n_female: 8,
                utterances: 4,
                duration_s: 8.0,
                seed: 7,
            },
            test_speakers: 4,
            test_duration_s: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub universal_atoms: usize,
    pub speaker_atoms: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            universal_atoms: 10,
            speaker_atoms: 20,
            iterations: DEFAULT_TRAIN_ITERATIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub room: RoomConfig,
    pub mics: Vec<Vec3>,
    pub sample_rate: u32,
    pub max_order: usize,
    pub n_sources: usize,
    pub dist_range: (f64, f64),
    pub min_pair_dist: f64,
    pub algorithm: Algorithm,
    pub dictionary_mode: DictionaryMode,
    pub channel_modes: Vec<ChannelMode>,
    /// Per-mode overrides of the sparsity weight, keyed by mode name.
    pub gamma: BTreeMap<String, f64>,
    /// Defaults to the algorithm's own count.
    pub iterations: Option<usize>,
    pub seed: u64,
    /// Number of pairs drawn from all valid pairs; `None` runs all of them.
    pub pair_subset: Option<usize>,
    pub corpus: CorpusConfig,
    pub training: TrainingConfig,
    pub stft: StftConfig,
    pub filter_len: usize,
    pub noise_floor: f64,
    pub echo_amplitude: f64,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            room: RoomConfig::Default { absorption: 0.4 },
            mics: default_array(),
            sample_rate: DEFAULT_SAMPLE_RATE,
            max_order: crate::acoustics::DEFAULT_MAX_ORDER,
            n_sources: 40,
            dist_range: (2.5, 4.0),
            min_pair_dist: 1.0,
            algorithm: Algorithm::Mu,
            dictionary_mode: DictionaryMode::Universal,
            channel_modes: ChannelMode::standard_sweep(),
            gamma: BTreeMap::new(),
            iterations: None,
            seed: 1,
            pair_subset: Some(10),
            corpus: CorpusConfig::default(),
            training: TrainingConfig::default(),
            stft: StftConfig::default(),
            filter_len: DEFAULT_FILTER_LEN,
            noise_floor: DEFAULT_NOISE_FLOOR,
            echo_amplitude: 1.0,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    /// Checks every field and reports all problems together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.channel_modes.is_empty() {
            problems.push("channel_modes is empty".to_string());
        }
        for m in &self.channel_modes {
            if m.echoes() > 6 {
                log::warn!("{m}: more echoes than the usual range of 0..=6");
            }
        }
        if self.mics.is_empty() {
            problems.push("no microphones".into());
        }
        if self.n_sources < 2 {
            problems.push(format!("n_sources must be at least 2, got {}", self.n_sources));
        }
        let (lo, hi) = self.dist_range;
        if !(lo >= 0.0 && hi >= lo) {
            problems.push(format!("invalid dist_range {:?}", self.dist_range));
        }
        if self.pair_subset == Some(0) {
            problems.push("pair_subset must be at least 1".into());
        }
        if self.iterations == Some(0) {
            problems.push("iterations must be at least 1".into());
        }
        for (name, g) in &self.gamma {
            if name.parse::<ChannelMode>().is_err() {
                problems.push(format!("gamma override for unknown mode '{name}'"));
            }
            if !(*g >= 0.0 && g.is_finite()) {
                problems.push(format!("gamma for '{name}' must be non-negative, got {g}"));
            }
        }
        if self.corpus.test_speakers < 2 {
            problems.push("need at least 2 test speakers".into());
        }
        if !(self.corpus.test_duration_s > 0.0) {
            problems.push("test_duration_s must be positive".into());
        }
        if self.filter_len == 0 {
            problems.push("filter_len must be at least 1".into());
        }
        if !(self.noise_floor > 0.0) {
            problems.push("noise_floor must be positive".into());
        }
        if self.jobs == 0 {
            problems.push("jobs must be at least 1".into());
        }
        if self.training.universal_atoms == 0 || self.training.speaker_atoms == 0 {
            problems.push("atom counts must be at least 1".into());
        }
        if let Err(e) = self.stft.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.room.build(self.sample_rate) {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn gamma_for(&self, mode: ChannelMode) -> f64 {
        self.gamma
            .iter()
            .find(|(k, _)| k.parse::<ChannelMode>().ok() == Some(mode))
            .map(|(_, &g)| g)
            .unwrap_or_else(|| default_gamma(mode, self.dictionary_mode))
    }

    pub fn iterations_for(&self, algorithm: Algorithm) -> usize {
        self.iterations.unwrap_or(match algorithm {
            Algorithm::Mu => DEFAULT_MU_ITERATIONS,
            Algorithm::Em => DEFAULT_EM_ITERATIONS,
        })
    }
}

/// One row per (pair, channel mode, algorithm). Metric columns are empty when
/// the run failed, in which case `error` says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub pair_id: usize,
    pub source_a: usize,
    pub source_b: usize,
    pub speaker_a: String,
    pub speaker_b: String,
    pub algorithm: Algorithm,
    pub dictionary_mode: DictionaryMode,
    pub channel_mode: ChannelMode,
    pub gamma: f64,
    pub iterations: usize,
    pub sdr_a: Option<f64>,
    pub sdr_b: Option<f64>,
    pub sir_a: Option<f64>,
    pub sir_b: Option<f64>,
    pub cost_first: Option<f64>,
    pub cost_last: Option<f64>,
    pub seed: u64,
    pub error: Option<String>,
}

/// Wall-clock time of one row, kept apart from the results so that those
/// stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub pair_id: usize,
    pub algorithm: Algorithm,
    pub channel_mode: ChannelMode,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub id: usize,
    pub sources: (usize, usize),
    pub speakers: (String, String),
}

/// Everything a sweep needs that does not depend on the channel mode.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub pairs: Vec<Pair>,
    pub test_clips: BTreeMap<String, AudioClip>,
    pub universal: Option<Dictionary<f64>>,
    pub speaker: Option<Dictionary<f64>>,
    pub corpus_manifest: BTreeMap<String, Vec<ManifestEntry>>,
    pub corpus_hash: String,
    pub test_speakers: Vec<String>,
    pub universal_speakers: Vec<String>,
}

impl Prepared {
    pub fn dictionary(&self, mode: DictionaryMode) -> Result<&Dictionary<f64>> {
        match mode {
            DictionaryMode::Universal => self.universal.as_ref(),
            DictionaryMode::Speaker => self.speaker.as_ref(),
        }
        .ok_or_else(|| Error::Config(format!("{mode} dictionary was not prepared")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub scenario: Scenario,
    pub pairs: Vec<Pair>,
    pub test_speakers: Vec<String>,
    pub universal_speakers: Vec<String>,
    pub corpus_hash: String,
    pub corpus: BTreeMap<String, Vec<ManifestEntry>>,
    pub dictionaries: BTreeMap<String, Provenance>,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig, prep: &Prepared) -> Self {
        let mut dictionaries = BTreeMap::new();
        if let Some(d) = &prep.universal {
            dictionaries.insert("universal".into(), d.provenance.clone());
        }
        if let Some(d) = &prep.speaker {
            dictionaries.insert("speaker".into(), d.provenance.clone());
        }
        Manifest {
            config: config.clone(),
            scenario: prep.scenario.clone(),
            pairs: prep.pairs.clone(),
            test_speakers: prep.test_speakers.clone(),
            universal_speakers: prep.universal_speakers.clone(),
            corpus_hash: prep.corpus_hash.clone(),
            corpus: prep.corpus_manifest.clone(),
            dictionaries,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub timings: Vec<Timing>,
    pub manifest: Manifest,
}

/// Seed for a sub-task, mixed from the experiment seed and a label.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest is 32 bytes"))
}

pub fn load_configured_corpus(config: &ExperimentConfig) -> Result<Corpus> {
    match &config.corpus.source {
        CorpusSource::Synthetic {
            n_male,
            n_female,
            utterances,
            duration_s,
            seed,
        } => Ok(synthetic_corpus(*n_male, *n_female, *utterances, *duration_s, *seed, config.sample_rate).0),
        CorpusSource::Directory { path } => {
            let corpus = load_corpus(path, config.sample_rate)?;
            for r in &corpus.rejects {
                log::warn!("skipped {}: {}", r.path.display(), r.reason);
            }
            Ok(corpus)
        }
    }
}

pub fn corpus_hash(corpus: &Corpus) -> String {
    let mut h = Sha256::new();
    for (spk, clips) in &corpus.speakers {
        h.update(spk.as_bytes());
        for c in clips {
            h.update(c.utterance_id.as_bytes());
            h.update(c.sample_rate.to_le_bytes());
            for s in &c.samples {
                h.update(s.to_le_bytes());
            }
        }
    }
    format!("{:x}", h.finalize())
}

fn power_spectra(clips: &[AudioClip], stft: &Stft<f64>) -> Vec<ndarray::Array2<f64>> {
    clips
        .iter()
        .map(|c| stft.analyze(&c.samples, c.sample_rate).power())
        .collect()
}

/// Splits the corpus into test and universal-training speakers: a seeded
/// shuffle of the speaker list, the first `test_speakers` of which are held
/// out.
pub fn split_speakers(corpus: &Corpus, test_speakers: usize, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    use rand::seq::SliceRandom;
    let mut ids: Vec<String> = corpus.speakers.keys().cloned().collect();
    if ids.len() < test_speakers {
        return Err(Error::Corpus(format!(
            "{} speakers available, {test_speakers} needed for testing",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "speakers", 0)));
    let rest = ids.split_off(test_speakers);
    let mut test = ids;
    test.sort();
    let mut rest = rest;
    rest.sort();
    Ok((test, rest))
}

/// Samples the scenario, selects pairs, cuts test utterances and trains the
/// dictionaries listed in `dictionaries`.
pub fn prepare(config: &ExperimentConfig, dictionaries: &[DictionaryMode]) -> Result<Prepared> {
    config.validate()?;
    let room = config.room.build(config.sample_rate)?;
    let (scenario, all_pairs) = sample_scenarios(
        &room,
        &config.mics,
        config.n_sources,
        config.dist_range,
        config.min_pair_dist,
        derive_seed(config.seed, "scenario", 0),
    )?;
    if all_pairs.is_empty() {
        return Err(Error::Infeasible("no source pair satisfies the minimum distance".into()));
    }
    let mut chosen: Vec<usize> = (0..all_pairs.len()).collect();
    if let Some(n) = config.pair_subset.filter(|&n| n < all_pairs.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "pairs", 0));
        chosen = rand::seq::index::sample(&mut rng, all_pairs.len(), n).into_vec();
        chosen.sort_unstable();
    }

    let corpus = load_configured_corpus(config)?;
    let (test_speakers, universal_speakers) = split_speakers(&corpus, config.corpus.test_speakers, config.seed)?;
    let max_len = (config.corpus.test_duration_s * config.sample_rate as f64).round() as usize;
    let mut test_clips = BTreeMap::new();
    for spk in &test_speakers {
        let clips = corpus.speaker(spk)?;
        let mut clip = clips[0].clone();
        clip.samples.truncate(max_len);
        test_clips.insert(spk.clone(), clip);
    }
    let n_test = test_speakers.len();
    let pairs = chosen
        .iter()
        .enumerate()
        .map(|(k, &id)| Pair {
            id,
            sources: all_pairs[id],
            speakers: (test_speakers[(2 * k) % n_test].clone(), test_speakers[(2 * k + 1) % n_test].clone()),
        })
        .collect();

    let stft = Stft::new(config.stft)?;
    let train = |speakers: &[String], held_out_first: bool, atoms: usize| -> Result<Dictionary<f64>> {
        let spectra: Vec<SpeakerSpectra<f64>> = speakers
            .iter()
            .map(|spk| {
                let clips = corpus.speaker(spk)?;
                let clips = if held_out_first { &clips[1..] } else { clips };
                if clips.is_empty() {
                    return Err(Error::Corpus(format!("speaker {spk} has no training utterances")));
                }
                Ok(SpeakerSpectra {
                    speaker: spk.clone(),
                    spectra: power_spectra(clips, &stft),
                })
            })
            .collect::<Result<_>>()?;
        let cfg = TrainConfig {
            atoms_per_speaker: atoms,
            iterations: config.training.iterations,
            seed: config.training.seed,
        };
        Ok(train_dictionary(&spectra, &cfg)?.0)
    };
    let mut universal = None;
    let mut speaker = None;
    for mode in dictionaries {
        match mode {
            DictionaryMode::Universal if universal.is_none() => {
                if universal_speakers.is_empty() {
                    return Err(Error::Corpus("no speakers left for the universal dictionary".into()));
                }
                universal = Some(train(&universal_speakers, false, config.training.universal_atoms)?);
            }
            DictionaryMode::Speaker if speaker.is_none() => {
                speaker = Some(train(&test_speakers, true, config.training.speaker_atoms)?);
            }
            _ => {}
        }
    }
    Ok(Prepared {
        scenario,
        pairs,
        test_clips,
        universal,
        speaker,
        corpus_manifest: corpus.manifest(),
        corpus_hash: corpus_hash(&corpus),
        test_speakers,
        universal_speakers,
    })
}

/// Channels handed to the separator for one mode.
pub fn channels_for(
    mode: ChannelMode,
    algorithm: Algorithm,
    scenario: &Scenario,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<ChannelMatrix<f64>> {
    let n_freq = config.stft.n_freq();
    let (n_mics, n_src) = (scenario.mic_positions.len(), scenario.source_positions.len());
    let geometric = |k| -> Result<ChannelMatrix<f64>> {
        let model = echo_model(
            &scenario.room,
            &scenario.mic_positions,
            &scenario.source_positions,
            k,
            config.echo_amplitude,
            DelayReference::PerSource,
        )?;
        Ok(build_channels(&model, n_freq, config.stft.frame_size, config.sample_rate))
    };
    match (mode, algorithm) {
        (ChannelMode::Learn, _) => Ok(baseline_channels(Baseline::LearnInit, n_freq, n_mics, n_src, seed)),
        (ChannelMode::Anechoic, Algorithm::Mu) => Ok(baseline_channels(Baseline::Anechoic, n_freq, n_mics, n_src, seed)),
        (ChannelMode::Anechoic, Algorithm::Em) => {
            let mut ch = geometric(0)?;
            ch.provenance = ChannelMode::Anechoic;
            Ok(ch)
        }
        (ChannelMode::Echoes(k), _) => geometric(k),
    }
}

/// Microphone signals of one pair and the spatial images at the reference
/// microphone.
#[derive(Debug, Clone)]
pub struct PairSignals {
    pub mics: Vec<Vec<f64>>,
    pub references: Vec<Vec<f64>>,
}

/// Renders a pair, truncated to the shorter utterance. `anechoic` keeps the
/// direct path only.
pub fn pair_signals(prep: &Prepared, config: &ExperimentConfig, pair: &Pair, anechoic: bool) -> Result<PairSignals> {
    let scenario = prep.scenario.with_sources(&[pair.sources.0, pair.sources.1]);
    let clips = [&prep.test_clips[&pair.speakers.0], &prep.test_clips[&pair.speakers.1]];
    let len = clips[0].samples.len().min(clips[1].samples.len());
    let cut: Vec<AudioClip> = clips
        .iter()
        .map(|c| AudioClip {
            samples: c.samples[..len].to_vec(),
            ..(*c).clone()
        })
        .collect();
    let order = if anechoic { 0 } else { config.max_order };
    let rirs = scenario_rirs(&scenario, order)?;
    let mix = render_with_rirs(&rirs, &cut, scenario.room.sample_rate)?;
    Ok(PairSignals {
        references: mix.images.iter().map(|per_mic| per_mic[0].clone()).collect(),
        mics: mix.mics,
    })
}

/// Output of one separation: time-domain estimates and the cost trace.
#[derive(Debug, Clone)]
pub struct PairSeparation {
    pub estimates: Vec<Vec<f64>>,
    pub cost_trace: Vec<f64>,
}

/// Separates a rendered pair in one channel mode.
pub fn separate_pair(
    prep: &Prepared,
    config: &ExperimentConfig,
    pair: &Pair,
    mode: ChannelMode,
    signals: &PairSignals,
) -> Result<PairSeparation> {
    let algorithm = config.algorithm;
    let iterations = config.iterations_for(algorithm);
    let scenario = prep.scenario.with_sources(&[pair.sources.0, pair.sources.1]);
    let seed = derive_seed(config.seed, "pair", pair.id as u64);
    let specs = signals
        .mics
        .iter()
        .map(|m| stft(m, config.stft, config.sample_rate))
        .collect::<Result<Vec<_>>>()?;
    let channels = channels_for(mode, algorithm, &scenario, config, seed)?;
    let dict = prep.dictionary(config.dictionary_mode)?;
    let dicts = match config.dictionary_mode {
        DictionaryMode::Universal => vec![dict.atoms(), dict.atoms()],
        DictionaryMode::Speaker => [&pair.speakers.0, &pair.speakers.1]
            .iter()
            .map(|s| dict.block(s).ok_or_else(|| Error::Input(format!("no atoms for speaker {s}"))))
            .collect::<Result<_>>()?,
    };
    let (estimates, cost_trace) = match algorithm {
        Algorithm::Mu => {
            let cfg = MuRunConfig {
                channel_mode: mode,
                gamma: config.gamma_for(mode),
                iterations,
                dictionary_mode: config.dictionary_mode,
                seed,
                reference_mic: 0,
            };
            let out = separate_mu(&specs, &channels, &dicts, &cfg)?;
            (out.estimates, out.cost_trace)
        }
        Algorithm::Em => {
            let cfg = EmRunConfig {
                channel_mode: mode,
                iterations,
                noise_floor: config.noise_floor,
                seed,
                reference_mic: 0,
            };
            let out = separate_em(&specs, &channels, &dicts, &cfg)?;
            (out.estimates, out.cost_trace)
        }
    };
    Ok(PairSeparation { estimates, cost_trace })
}

fn run_pair(prep: &Prepared, config: &ExperimentConfig, pair: &Pair) -> Vec<(ResultRow, Timing)> {
    let algorithm = config.algorithm;
    let iterations = config.iterations_for(algorithm);
    let seed = derive_seed(config.seed, "pair", pair.id as u64);
    let mut reverberant = None;
    let mut anechoic = None;
    config
        .channel_modes
        .iter()
        .map(|&mode| {
            let start = Instant::now();
            let gamma = match algorithm {
                Algorithm::Mu => config.gamma_for(mode),
                Algorithm::Em => 0.0,
            };
            let mut row = ResultRow {
                pair_id: pair.id,
                source_a: pair.sources.0,
                source_b: pair.sources.1,
                speaker_a: pair.speakers.0.clone(),
                speaker_b: pair.speakers.1.clone(),
                algorithm,
                dictionary_mode: config.dictionary_mode,
                channel_mode: mode,
                gamma,
                iterations,
                sdr_a: None,
                sdr_b: None,
                sir_a: None,
                sir_b: None,
                cost_first: None,
                cost_last: None,
                seed,
                error: None,
            };
            let result = (|| -> Result<()> {
                let is_anechoic = mode == ChannelMode::Anechoic;
                let cache = if is_anechoic { &mut anechoic } else { &mut reverberant };
                if cache.is_none() {
                    *cache = Some(pair_signals(prep, config, pair, is_anechoic)?);
                }
                let signals = cache.as_ref().expect("just rendered");
                let out = separate_pair(prep, config, pair, mode, signals)?;
                let eval = bss_eval(&out.estimates, &signals.references, config.filter_len)?;
                row.sdr_a = Some(eval.sdr[0]);
                row.sdr_b = Some(eval.sdr[1]);
                row.sir_a = Some(eval.sir[0]);
                row.sir_b = Some(eval.sir[1]);
                row.cost_first = out.cost_trace.first().copied();
                row.cost_last = out.cost_trace.last().copied();
                Ok(())
            })();
            if let Err(e) = result {
                log::warn!("pair {} {mode}: {e}", pair.id);
                row.error = Some(e.to_string());
            }
            let timing = Timing {
                pair_id: pair.id,
                algorithm,
                channel_mode: mode,
                seconds: start.elapsed().as_secs_f64(),
            };
            (row, timing)
        })
        .collect()
}

/// Runs every selected pair in every channel mode on a pool of
/// `config.jobs` workers. Rows come back ordered by pair, then mode.
pub fn run_prepared(prep: &Prepared, config: &ExperimentConfig) -> Result<(Vec<ResultRow>, Vec<Timing>)> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let per_pair: Vec<Vec<(ResultRow, Timing)>> =
        pool.install(|| prep.pairs.par_iter().map(|p| run_pair(prep, config, p)).collect());
    Ok(per_pair.into_iter().flatten().unzip())
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let prep = prepare(config, &[config.dictionary_mode])?;
    let (rows, timings) = run_prepared(&prep, config)?;
    Ok(ExperimentOutput {
        rows,
        timings,
        manifest: Manifest::new(config, &prep),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            n_sources: 4,
            pair_subset: Some(2),
            channel_modes: vec![ChannelMode::Anechoic, ChannelMode::Echoes(1)],
            iterations: Some(3),
            max_order: 2,
            corpus: CorpusConfig {
                source: CorpusSource::Synthetic {
                    n_male: 2,
                    n_female: 2,
                    utterances: 2,
                    duration_s: 0.6,
                    seed: 3,
                },
                test_speakers: 2,
                test_duration_s: 0.5,
            },
            training: TrainingConfig {
                universal_atoms: 2,
                speaker_atoms: 2,
                iterations: 5,
                seed: 0,
            },
            filter_len: 32,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn validation_lists_every_problem() {
        let cfg = ExperimentConfig {
            channel_modes: vec![],
            n_sources: 1,
            jobs: 0,
            ..ExperimentConfig::default()
        };
        let Err(Error::Config(msg)) = cfg.validate() else {
            panic!("expected a config error");
        };
        assert!(msg.contains("channel_modes"));
        assert!(msg.contains("n_sources"));
        assert!(msg.contains("jobs"));
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn gamma_overrides_and_defaults() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.gamma_for(ChannelMode::Anechoic), 10.0);
        cfg.gamma.insert("k1".into(), 0.5);
        assert_eq!(cfg.gamma_for(ChannelMode::Echoes(1)), 0.5);
        cfg.dictionary_mode = DictionaryMode::Speaker;
        assert_eq!(cfg.gamma_for(ChannelMode::Anechoic), 0.0);
    }

    #[test]
    fn rows_cover_every_pair_and_mode() {
        let cfg = tiny_config();
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.rows.len(), 4);
        assert!(out.rows.iter().all(|r| r.error.is_none()), "{:?}", out.rows);
        assert!(out.rows.windows(2).all(|w| (w[0].pair_id, w[0].channel_mode) < (w[1].pair_id, w[1].channel_mode)));
        let again = run_experiment(&cfg).unwrap();
        assert_eq!(out.rows, again.rows);
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let mut cfg = tiny_config();
        cfg.pair_subset = Some(1);
        cfg.max_order = 1;
        cfg.channel_modes = vec![ChannelMode::Echoes(0), ChannelMode::Echoes(99_999)];
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert!(out.rows[0].error.is_none());
        assert!(out.rows[1].error.is_some());
        assert!(out.rows[1].sdr_a.is_none());
    }
}
