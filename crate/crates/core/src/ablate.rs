//! Experiment grids mirroring the ablation studies: each cell trains one
//! policy and evaluates it, under `runs/<suite>/<task>/<cell>/`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate, mean_std, DiffusionPolicy, EvalReport};
use crate::latents::TokenizerVariant;
use crate::model::{load_checkpoint, AttentionMode};
use crate::train::{
    read_metrics, train, TrainConfig, CHECKPOINT_FILE, CONFIG_FILE, MANIFEST_FILE, METRICS_FILE,
};

pub const RUNS_DIR_ENV: &str = "BDC_RUNS_DIR";
pub const REPORT_FILE: &str = "report.json";
pub const DONE_FILE: &str = "done.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Attention,
    PredWeight,
    Horizon,
    Chunk,
    Strategy,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Self::Attention, Self::PredWeight, Self::Horizon, Self::Chunk, Self::Strategy];

    pub fn name(self) -> &'static str {
        match self {
            Self::Attention => "attention",
            Self::PredWeight => "pred_weight",
            Self::Horizon => "horizon",
            Self::Chunk => "chunk",
            Self::Strategy => "strategy",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| invalid(format!("unknown suite {s:?}")))
    }
}

/// One grid point for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    /// Value of the swept setting, e.g. `0.2` or `unidirectional`.
    pub setting: String,
    pub seed: u64,
    pub config: TrainConfig,
}

/// Settings of a suite as `(label, config)` pairs derived from `base`.
pub fn suite_settings(suite: Suite, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match suite {
        Suite::Attention => AttentionMode::ALL
            .into_iter()
            .map(|m| (m.to_string(), with(&|c| c.attention_mode = m)))
            .collect(),
        Suite::PredWeight => [0.0, 0.05, 0.2, 0.5]
            .into_iter()
            .map(|w| (w.to_string(), with(&|c| c.prediction_weight = w)))
            .collect(),
        Suite::Horizon => {
            let mut fs = vec![1, 4, 8, base.chunk_size];
            fs.dedup();
            fs.into_iter()
                .filter(|&f| f <= base.chunk_size)
                .map(|f| (f.to_string(), with(&|c| c.frame_count = f)))
                .collect()
        }
        Suite::Chunk => [5, 10, 20, 40]
            .into_iter()
            .map(|n| {
                (
                    n.to_string(),
                    with(&|c| {
                        c.chunk_size = n;
                        c.frame_count = base.frame_count.min(n);
                    }),
                )
            })
            .collect(),
        Suite::Strategy => vec![
            (
                "none".to_string(),
                with(&|c| {
                    c.frame_count = 0;
                    c.prediction_weight = 0.0;
                }),
            ),
            (
                "next_frame_pixels".to_string(),
                with(&|c| {
                    c.frame_count = 1;
                    c.tokenizer = TokenizerVariant::DownsamplePatch;
                }),
            ),
            (
                "next_frame_latents".to_string(),
                with(&|c| {
                    c.frame_count = 1;
                    c.tokenizer = TokenizerVariant::LinearAutoencoder;
                }),
            ),
            (
                "multi_frame_latents".to_string(),
                with(&|c| c.tokenizer = TokenizerVariant::LinearAutoencoder),
            ),
        ],
    }
}

pub fn suite_cells(suite: Suite, base: &TrainConfig, seeds: &[u64]) -> Vec<Cell> {
    suite_settings(suite, base)
        .into_iter()
        .flat_map(|(setting, cfg)| {
            seeds.iter().map(move |&seed| Cell {
                name: format!("{setting}_s{seed}"),
                setting: setting.clone(),
                seed,
                config: TrainConfig { seed, ..cfg.clone() },
            })
        })
        .collect()
}

/// Results root: `$BDC_RUNS_DIR` if set, else `runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Clone, Debug)]
pub struct AblateOptions {
    pub runs_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub inference_steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DoneMarker {
    fingerprint: String,
    files: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Outcome of one cell, as stored in the suite CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub suite: String,
    pub task: String,
    pub cell: String,
    pub setting: String,
    pub seed: u64,
    pub success_rate: f64,
    pub final_action_loss: f64,
    pub final_video_loss: f64,
    pub inference_ms: f64,
    /// `true` when the cell was reused from a previous run.
    #[serde(skip)]
    pub reused: bool,
}

fn cell_fingerprint(cfg_text: &str, eval_episodes: usize, data_dir: &Path) -> Result<String> {
    let manifest = std::fs::read(data_dir.join(MANIFEST_FILE)).unwrap_or_default();
    let mut h = Sha256::new();
    h.update(cfg_text.as_bytes());
    h.update(eval_episodes.to_le_bytes());
    h.update(&manifest);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

const CELL_FILES: [&str; 4] = [CONFIG_FILE, METRICS_FILE, REPORT_FILE, CHECKPOINT_FILE];

fn completed(dir: &Path, fingerprint: &str) -> bool {
    let Ok(bytes) = std::fs::read(dir.join(DONE_FILE)) else { return false };
    let Ok(done) = serde_json::from_slice::<DoneMarker>(&bytes) else { return false };
    done.fingerprint == fingerprint
        && CELL_FILES
            .iter()
            .all(|f| done.files.get(*f).is_some_and(|d| file_digest(&dir.join(f)).ok().as_deref() == Some(d)))
}

/// Trains and evaluates one cell unless an identical, intact result exists.
pub fn run_cell(suite: Suite, cell: &Cell, opts: &AblateOptions) -> Result<CellResult> {
    let task = cell.config.task;
    let dir = opts.runs_dir.join(suite.name()).join(task.to_string()).join(&cell.name);
    let cfg = TrainConfig { out_dir: dir.clone(), ..cell.config.clone() };
    let fingerprint = cell_fingerprint(&cfg.to_text(), opts.eval_episodes, &cfg.data_dir)?;
    let reused = completed(&dir, &fingerprint);
    if reused {
        log::info!("{suite}/{task}/{}: up to date", cell.name);
    } else {
        log::info!("{suite}/{task}/{}: training", cell.name);
        let _ = std::fs::remove_file(dir.join(DONE_FILE));
        let outcome = train(&cfg)?;
        let steps = opts.inference_steps.unwrap_or(cfg.inference_steps);
        let mut policy = DiffusionPolicy::from_checkpoint(load_checkpoint(&outcome.checkpoint)?, steps)?;
        let report = evaluate(
            &mut policy,
            &task.spec(),
            opts.eval_episodes,
            &[cell.seed],
            &cfg.attention_mode.to_string(),
            serde_json::to_value(&cfg)?,
        )?;
        report.write_json(&dir.join(REPORT_FILE))?;
        let files = CELL_FILES
            .iter()
            .map(|f| Ok((f.to_string(), file_digest(&dir.join(f))?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        std::fs::write(dir.join(DONE_FILE), serde_json::to_string_pretty(&DoneMarker { fingerprint, files })?)?;
    }
    let report = EvalReport::read_json(&dir.join(REPORT_FILE))?;
    let last = read_metrics(&dir.join(METRICS_FILE))?.last().copied().unwrap_or_default();
    Ok(CellResult {
        suite: suite.to_string(),
        task: task.to_string(),
        cell: cell.name.clone(),
        setting: cell.setting.clone(),
        seed: cell.seed,
        success_rate: report.mean,
        final_action_loss: last.2,
        final_video_loss: last.3,
        inference_ms: report.inference_ms,
        reused,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: String,
    pub seeds: Vec<u64>,
    pub success_rates: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub suite: String,
    pub task: String,
    pub episodes_per_cell: usize,
    pub settings: Vec<SettingSummary>,
}

impl SuiteSummary {
    pub fn setting(&self, name: &str) -> Option<&SettingSummary> {
        self.settings.iter().find(|s| s.setting == name)
    }
}

fn summarize(suite: Suite, task: &str, episodes: usize, results: &[CellResult]) -> SuiteSummary {
    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if !order.contains(&r.setting.as_str()) {
            order.push(&r.setting);
        }
    }
    let settings = order
        .into_iter()
        .map(|s| {
            let rows: Vec<&CellResult> = results.iter().filter(|r| r.setting == s).collect();
            let rates: Vec<f64> = rows.iter().map(|r| r.success_rate).collect();
            let (mean, std) = mean_std(&rates);
            SettingSummary {
                setting: s.to_string(),
                seeds: rows.iter().map(|r| r.seed).collect(),
                success_rates: rates,
                mean,
                std,
            }
        })
        .collect();
    SuiteSummary { suite: suite.to_string(), task: task.to_string(), episodes_per_cell: episodes, settings }
}

/// Runs (or resumes) a whole suite and writes `results.csv` and
/// `summary.json` beside the cells. A failing cell aborts with its name.
pub fn run_suite(suite: Suite, base: &TrainConfig, opts: &AblateOptions) -> Result<(Vec<CellResult>, SuiteSummary)> {
    if opts.seeds.is_empty() {
        return Err(invalid("ablation needs at least one seed"));
    }
    let task = base.task.to_string();
    let root = opts.runs_dir.join(suite.name()).join(&task);
    std::fs::create_dir_all(&root)?;
    let mut results = Vec::new();
    for cell in suite_cells(suite, base, &opts.seeds) {
        let r = run_cell(suite, &cell, opts)
            .map_err(|e| Error::Collection(format!("cell {suite}/{task}/{} failed: {e}", cell.name)))?;
        results.push(r);
    }
    let mut w = csv::Writer::from_path(root.join(RESULTS_FILE))?;
    for r in &results {
        w.serialize(r)?;
    }
    w.flush()?;
    let summary = summarize(suite, &task, opts.eval_episodes, &results);
    std::fs::write(root.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok((results, summary))
}

/// Flattens every `results.csv` under `runs_dir` into one long-format CSV
/// with columns `suite, task, cell, setting, seed, metric, value`.
pub fn export_metrics(runs_dir: &Path, out: &Path) -> Result<usize> {
    let mut files = Vec::new();
    for suite in Suite::ALL {
        let dir = runs_dir.join(suite.name());
        let Ok(tasks) = std::fs::read_dir(&dir) else { continue };
        let mut tasks: Vec<PathBuf> = tasks.filter_map(|e| e.ok().map(|e| e.path())).collect();
        tasks.sort();
        for t in tasks {
            let f = t.join(RESULTS_FILE);
            if f.is_file() {
                files.push(f);
            }
        }
    }
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["suite", "task", "cell", "setting", "seed", "metric", "value"])?;
    let mut rows = 0;
    for f in files {
        let mut r = csv::Reader::from_path(&f)?;
        for rec in r.deserialize::<CellResult>() {
            let c = rec?;
            for (metric, value) in [
                ("success_rate", c.success_rate),
                ("final_action_loss", c.final_action_loss),
                ("final_video_loss", c.final_video_loss),
                ("inference_ms", c.inference_ms),
            ] {
                w.write_record([
                    c.suite.as_str(),
                    c.task.as_str(),
                    c.cell.as_str(),
                    c.setting.as_str(),
                    &c.seed.to_string(),
                    metric,
                    &value.to_string(),
                ])?;
                rows += 1;
            }
        }
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let base = TrainConfig::default();
        let seeds = [0, 1, 2];
        assert_eq!(suite_cells(Suite::Attention, &base, &seeds).len(), 9);
        assert_eq!(suite_cells(Suite::PredWeight, &base, &seeds).len(), 12);
        let horizon: Vec<usize> = suite_settings(Suite::Horizon, &base).iter().map(|(_, c)| c.frame_count).collect();
        assert_eq!(horizon, vec![1, 4, 8, 20]);
        let strategy = suite_settings(Suite::Strategy, &base);
        assert_eq!(strategy[0].1.frame_count, 0);
        assert_eq!(strategy[0].1.prediction_weight, 0.0);
        let chunk = suite_settings(Suite::Chunk, &base);
        assert!(chunk.iter().all(|(_, c)| c.validate().is_ok()));
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
    }
}
