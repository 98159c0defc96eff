use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use echosep::corpus::{read_wav, write_wav_f32};
use echosep::echomodel::ChannelMode;
use echosep::harness::{
    aggregate, emit_report, pair_signals, prepare, read_results, run_prepared, separate_pair, Algorithm,
    ExperimentConfig, Manifest, Timing,
};
use echosep::metrics::bss_eval;
use echosep::musep::DictionaryMode;
use echosep::{Error, Result};

#[derive(Parser)]
#[command(name = "echosep", version, about = "Echo-aware multichannel NMF source separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the universal or speaker dictionary and save it as JSON.
    TrainDict(Common),
    /// Render the selected pairs to WAV files.
    Simulate(Common),
    /// Render and separate the selected pairs, writing estimates as WAV.
    Separate(Common),
    /// Score estimate WAVs against reference WAVs.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        estimates: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        references: Vec<PathBuf>,
        #[arg(long, default_value_t = echosep::metrics::DEFAULT_FILTER_LEN)]
        filter_len: usize,
    },
    /// Full sweep: results.csv, summary.json, manifest.json, timings.csv.
    Experiment(Common),
    /// Recompute summary.json and distributions from a results.csv.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    algo: Option<Algorithm>,
    #[arg(long)]
    dict: Option<DictionaryMode>,
    /// Comma-separated, e.g. `learn,anechoic,k0,k3`.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<ChannelMode>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Run every valid pair instead of a subset.
    #[arg(long, conflicts_with = "pairs")]
    all_pairs: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(n) = self.pairs {
            cfg.pair_subset = Some(n);
        }
        if self.all_pairs {
            cfg.pair_subset = None;
        }
        if let Some(a) = self.algo {
            cfg.algorithm = a;
        }
        if let Some(d) = self.dict {
            cfg.dictionary_mode = d;
        }
        if let Some(m) = &self.modes {
            cfg.channel_modes = m.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_timings(path: &Path, timings: &[Timing]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for t in timings {
        w.serialize(t)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_signals(dir: &Path, prefix: &str, signals: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    for (i, s) in signals.iter().enumerate() {
        write_wav_f32(dir.join(format!("{prefix}{i}.wav")), s, sample_rate)?;
    }
    Ok(())
}

fn train_dict(args: &Common) -> Result<()> {
    let cfg = args.config()?;
    create_dir(&args.out)?;
    let prep = prepare(&cfg, &[cfg.dictionary_mode])?;
    let dict = prep.dictionary(cfg.dictionary_mode)?;
    let path = args.out.join(format!("{}.json", cfg.dictionary_mode));
    dict.save_json(&path)?;
    write_json(&args.out.join("manifest.json"), &Manifest::new(&cfg, &prep))?;
    println!("{} atoms written to {}", dict.n_atoms(), path.display());
    Ok(())
}

fn simulate(args: &Common) -> Result<()> {
    let cfg = args.config()?;
    let prep = prepare(&cfg, &[])?;
    for pair in &prep.pairs {
        for (name, anechoic) in [("reverberant", false), ("anechoic", true)] {
            let dir = args.out.join(format!("pair_{:04}", pair.id)).join(name);
            create_dir(&dir)?;
            let sig = pair_signals(&prep, &cfg, pair, anechoic)?;
            write_signals(&dir, "mic", &sig.mics, cfg.sample_rate)?;
            write_signals(&dir, "ref", &sig.references, cfg.sample_rate)?;
        }
    }
    write_json(&args.out.join("manifest.json"), &Manifest::new(&cfg, &prep))?;
    println!("{} pairs written to {}", prep.pairs.len(), args.out.display());
    Ok(())
}

fn separate(args: &Common) -> Result<()> {
    let cfg = args.config()?;
    let prep = prepare(&cfg, &[cfg.dictionary_mode])?;
    for pair in &prep.pairs {
        for &mode in &cfg.channel_modes {
            let dir = args.out.join(format!("pair_{:04}", pair.id)).join(mode.to_string());
            create_dir(&dir)?;
            let sig = pair_signals(&prep, &cfg, pair, mode == ChannelMode::Anechoic)?;
            let out = separate_pair(&prep, &cfg, pair, mode, &sig)?;
            write_signals(&dir, "est", &out.estimates, cfg.sample_rate)?;
            write_signals(&dir, "ref", &sig.references, cfg.sample_rate)?;
            write_json(&dir.join("cost_trace.json"), &out.cost_trace)?;
        }
    }
    write_json(&args.out.join("manifest.json"), &Manifest::new(&cfg, &prep))?;
    Ok(())
}

fn evaluate(estimates: &[PathBuf], references: &[PathBuf], filter_len: usize) -> Result<()> {
    let load = |paths: &[PathBuf]| -> Result<Vec<Vec<f64>>> { paths.iter().map(|p| Ok(read_wav(p)?.0)).collect() };
    let result = bss_eval(&load(estimates)?, &load(references)?, filter_len)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn experiment(args: &Common) -> Result<()> {
    let cfg = args.config()?;
    let prep = prepare(&cfg, &[cfg.dictionary_mode])?;
    let (rows, timings) = run_prepared(&prep, &cfg)?;
    let aggs = aggregate(&rows);
    emit_report(&rows, &aggs, &args.out)?;
    write_json(&args.out.join("manifest.json"), &Manifest::new(&cfg, &prep))?;
    write_timings(&args.out.join("timings.csv"), &timings)?;
    for a in &aggs {
        let med = |q: Option<echosep::harness::Quartiles>| q.map_or(f64::NAN, |q| q.median);
        println!(
            "{} {} {:>8}: SDR {:7.2} dB  SIR {:7.2} dB  ({} failed)",
            a.algorithm,
            a.dictionary_mode,
            a.channel_mode,
            med(a.sdr),
            med(a.sir),
            a.failures
        );
    }
    Ok(())
}

fn report(results: &Path, out: &Path) -> Result<()> {
    let rows = read_results(results)?;
    emit_report(&rows, &aggregate(&rows), out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainDict(a) => train_dict(a),
        Command::Simulate(a) => simulate(a),
        Command::Separate(a) => separate(a),
        Command::Evaluate {
            estimates,
            references,
            filter_len,
        } => evaluate(estimates, references, *filter_len),
        Command::Experiment(a) => experiment(a),
        Command::Report { results, out } => report(results, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
