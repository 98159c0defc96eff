//! Aggregation and CSV/JSON output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Algorithm, ResultRow};
use crate::echomodel::ChannelMode;
use crate::error::{Error, Result};
use crate::musep::DictionaryMode;

/// Column order of `results.csv`.
pub const RESULT_COLUMNS: [&str; 18] = [
    "pair_id",
    "source_a",
    "source_b",
    "speaker_a",
    "speaker_b",
    "algorithm",
    "dictionary_mode",
    "channel_mode",
    "gamma",
    "iterations",
    "sdr_a",
    "sdr_b",
    "sir_a",
    "sir_b",
    "cost_first",
    "cost_last",
    "seed",
    "error",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub algorithm: Algorithm,
    pub dictionary_mode: DictionaryMode,
    pub channel_mode: ChannelMode,
    pub rows: usize,
    pub failures: usize,
    /// Per-source values behind the statistics.
    pub values: usize,
    pub sdr: Option<Quartiles>,
    pub sir: Option<Quartiles>,
}

/// `sorted[⌊q (n − 1)⌋]`; the median of an even count is the lower one.
pub fn lower_quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let idx = (q * (sorted.len() - 1) as f64).floor() as usize;
    Some(sorted[idx.min(sorted.len() - 1)])
}

fn quartiles(mut values: Vec<f64>) -> Option<Quartiles> {
    values.sort_by(f64::total_cmp);
    Some(Quartiles {
        q1: lower_quantile(&values, 0.25)?,
        median: lower_quantile(&values, 0.5)?,
        q3: lower_quantile(&values, 0.75)?,
    })
}

type GroupKey = (Algorithm, DictionaryMode, ChannelMode);

fn groups(rows: &[ResultRow]) -> BTreeMap<GroupKey, Vec<&ResultRow>> {
    let mut out: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        out.entry((r.algorithm, r.dictionary_mode, r.channel_mode)).or_default().push(r);
    }
    out
}

fn metric_values(rows: &[&ResultRow], sdr: bool) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.error.is_none())
        .flat_map(|r| if sdr { [r.sdr_a, r.sdr_b] } else { [r.sir_a, r.sir_b] })
        .flatten()
        .collect()
}

/// Lower medians and quartiles of the per-source SDR and SIR for each
/// (algorithm, dictionary, channel mode), over the successful rows.
pub fn aggregate(rows: &[ResultRow]) -> Vec<Aggregate> {
    groups(rows)
        .into_iter()
        .map(|((algorithm, dictionary_mode, channel_mode), g)| {
            let sdr = metric_values(&g, true);
            let sir = metric_values(&g, false);
            Aggregate {
                algorithm,
                dictionary_mode,
                channel_mode,
                rows: g.len(),
                failures: g.iter().filter(|r| r.error.is_some()).count(),
                values: sdr.len(),
                sdr: quartiles(sdr),
                sir: quartiles(sir),
            }
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

/// Writes `results.csv`, `summary.json` and one
/// `distributions/<algorithm>_<dictionary>_<mode>.csv` per group.
pub fn emit_report(rows: &[ResultRow], aggregates: &[Aggregate], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("results.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(RESULT_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(aggregates)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    let dist = dir.join("distributions");
    fs::create_dir_all(&dist).map_err(|e| Error::io(&dist, e))?;
    for ((algo, dict, mode), g) in groups(rows) {
        let path = dist.join(format!("{algo}_{dict}_{mode}.csv"));
        let mut w = csv_writer(&path)?;
        w.write_record(["pair_id", "source", "sdr", "sir"])?;
        for r in g.iter().filter(|r| r.error.is_none()) {
            for (label, sdr, sir) in [("a", r.sdr_a, r.sir_a), ("b", r.sdr_b, r.sir_b)] {
                if let (Some(sdr), Some(sir)) = (sdr, sir) {
                    w.serialize((r.pair_id, label, sdr, sir))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULT_COLUMNS {
        return Err(Error::Input(format!("{}: unexpected columns {header:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
