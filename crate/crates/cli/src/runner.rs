//! Executes sweep cells and maintains the on-disk layout:
//! `<out>/<cell>/{config.json, metrics.jsonl, checkpoint.json, samples.svg}`,
//! `<out>/manifest.json` and `<out>/summary.csv`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use selfcond_core::evaluation::MetricsRecord;
use selfcond_core::trainer::{Checkpoint, RunObserver, Trainer};

use crate::config::{CellSpec, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::report;
use crate::svg;

pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.csv";
pub const CONFIG: &str = "config.json";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const SAMPLES: &str = "samples.svg";
pub const TRAINING_SET: &str = "train.csv";

/// Points drawn for each cell's scatter plot.
pub const PLOT_POINTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub status: Status,
    pub iteration: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

pub type Manifest = BTreeMap<String, ManifestEntry>;

pub fn read_manifest(out: &Path) -> CliResult<Manifest> {
    let path = out.join(MANIFEST);
    match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(CliError::json(&path)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Manifest::new()),
        Err(e) => Err(CliError::Io { path, source: e }),
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(CliError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(CliError::io(path))
}

fn write_manifest(out: &Path, manifest: &Manifest) -> CliResult<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_atomic(&out.join(MANIFEST), text.as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellOutcome {
    Completed,
    Skipped,
    Failed(String),
}

#[derive(Debug, Default)]
pub struct RunSummary {
    pub outcomes: Vec<(String, CellOutcome)>,
}

impl RunSummary {
    pub fn failed(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|(_, o)| matches!(o, CellOutcome::Failed(_)))
            .count()
    }
}

/// Streams metrics to JSONL and checkpoints at recluster and snapshot steps.
struct CellObserver<'a> {
    id: &'a str,
    dir: &'a Path,
    total: u64,
    metrics: BufWriter<File>,
    log: Logger<'a>,
}

impl RunObserver for CellObserver<'_> {
    fn on_metrics(&mut self, r: &MetricsRecord) -> selfcond_core::Result<()> {
        writeln!(self.metrics, "{}", r.to_json())?;
        self.metrics.flush()?;
        (self.log)(&format!(
            "{}: iteration {}/{} modes={} hq={:.3} rev_kl={:.4}",
            self.id, r.iteration, self.total, r.modes_covered, r.high_quality_fraction, r.reverse_kl
        ));
        Ok(())
    }

    fn on_step_end(&mut self, trainer: &Trainer, milestone: bool) -> selfcond_core::Result<()> {
        if milestone {
            save_checkpoint(self.dir, trainer).map_err(|e| match e {
                CliError::Io { source, .. } => selfcond_core::Error::Io(source),
                other => selfcond_core::Error::Contract(other.to_string()),
            })?;
        }
        Ok(())
    }
}

fn save_checkpoint(dir: &Path, trainer: &Trainer) -> CliResult<()> {
    let json = serde_json::to_vec(&trainer.checkpoint()).expect("checkpoint serializes");
    write_atomic(&dir.join(CHECKPOINT), &json)
}

fn load_checkpoint(dir: &Path) -> CliResult<Checkpoint> {
    let path = dir.join(CHECKPOINT);
    let file = File::open(&path).map_err(CliError::io(&path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(CliError::json(&path))
}

/// Deterministic seed for the scatter-plot samples of a cell.
fn plot_seed(cell_seed: u64) -> u64 {
    cell_seed ^ 0x05ee_d0f9_1075
}

fn finish_cell(dir: &Path, cell: &CellSpec, trainer: &Trainer) -> CliResult<()> {
    save_checkpoint(dir, trainer)?;
    let spec = cell.mixture()?;
    let points = trainer.generate(PLOT_POINTS, plot_seed(cell.seed))?;
    let plot = svg::scatter(&points, &spec, &cell.id);
    write_atomic(&dir.join(SAMPLES), plot.as_bytes())
}

type Logger<'a> = &'a (dyn Fn(&str) + Sync);

fn drive(dir: &Path, cell: &CellSpec, mut trainer: Trainer, metrics: File, log: Logger<'_>) -> CliResult<CellOutcome> {
    let mut observer = CellObserver {
        id: &cell.id,
        dir,
        total: trainer.config.total_iterations(),
        metrics: BufWriter::new(metrics),
        log,
    };
    match trainer.run(&mut observer) {
        Ok(()) => {
            finish_cell(dir, cell, &trainer)?;
            Ok(CellOutcome::Completed)
        }
        Err(selfcond_core::Error::Io(source)) => Err(CliError::Io {
            path: dir.to_path_buf(),
            source,
        }),
        Err(e) => Ok(CellOutcome::Failed(e.to_string())),
    }
}

fn run_cell(out: &Path, cell: &CellSpec, force: bool, manifest: &Mutex<Manifest>, log: Logger<'_>) -> CliResult<CellOutcome> {
    let dir = out.join(&cell.id);
    let config_json = serde_json::to_string_pretty(cell).expect("cell serializes");
    let config_path = dir.join(CONFIG);
    let done = manifest
        .lock()
        .expect("manifest lock")
        .get(&cell.id)
        .is_some_and(|e| e.status == Status::Complete);
    if done && !force {
        if let Ok(existing) = fs::read_to_string(&config_path) {
            if existing == config_json {
                return Ok(CellOutcome::Skipped);
            }
        }
    }

    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    write_atomic(&config_path, config_json.as_bytes())?;
    let metrics_path = dir.join(METRICS);
    let metrics = File::create(&metrics_path).map_err(CliError::io(&metrics_path))?;

    log(&format!("{}: starting", cell.id));
    let outcome = match Trainer::new(cell.train.clone(), cell.mixture()?) {
        Ok(trainer) => {
            if cell.export_data {
                let path = dir.join(TRAINING_SET);
                let file = File::create(&path).map_err(CliError::io(&path))?;
                trainer.data.write_csv(BufWriter::new(file))?;
            }
            drive(&dir, cell, trainer, metrics, log)?
        }
        Err(e) => CellOutcome::Failed(e.to_string()),
    };
    record(manifest, out, &cell.id, &outcome, &dir)?;
    Ok(outcome)
}

fn last_iteration(dir: &Path) -> u64 {
    read_metrics(dir).ok().and_then(|m| m.last().map(|r| r.iteration)).unwrap_or(0)
}

fn record(manifest: &Mutex<Manifest>, out: &Path, id: &str, outcome: &CellOutcome, dir: &Path) -> CliResult<()> {
    let entry = match outcome {
        CellOutcome::Completed | CellOutcome::Skipped => ManifestEntry {
            status: Status::Complete,
            iteration: last_iteration(dir),
            error: None,
        },
        CellOutcome::Failed(msg) => ManifestEntry {
            status: Status::Failed,
            iteration: last_iteration(dir),
            error: Some(msg.clone()),
        },
    };
    let mut m = manifest.lock().expect("manifest lock");
    m.insert(id.to_string(), entry);
    write_manifest(out, &m)
}

/// Runs every cell of the sweep (up to `jobs` at a time), then rewrites `summary.csv`.
pub fn run(cfg: &ExperimentConfig, log: Logger<'_>) -> CliResult<RunSummary> {
    fs::create_dir_all(&cfg.out).map_err(CliError::io(&cfg.out))?;
    let cells = cfg.cells();
    let manifest = Mutex::new(read_manifest(&cfg.out)?);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<CellOutcome>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..cfg.jobs.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let r = run_cell(&cfg.out, cell, cfg.force, &manifest, log);
                match &r {
                    Ok(CellOutcome::Skipped) => log(&format!("{}: already complete, skipped", cell.id)),
                    Ok(CellOutcome::Completed) => log(&format!("{}: complete", cell.id)),
                    Ok(CellOutcome::Failed(msg)) => log(&format!("{}: failed: {msg}", cell.id)),
                    Err(e) => log(&format!("{}: error: {e}", cell.id)),
                }
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });

    let mut summary = RunSummary::default();
    let mut first_error = None;
    for (cell, r) in cells.iter().zip(results.into_inner().expect("results lock")) {
        match r.expect("every cell ran") {
            Ok(o) => summary.outcomes.push((cell.id.clone(), o)),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    write_summary(&cfg.out)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

pub fn write_summary(out: &Path) -> CliResult<()> {
    let rows = report::collect(out)?;
    write_atomic(&out.join(SUMMARY), report::to_csv(&rows).as_bytes())
}

/// Continues an interrupted cell from its last checkpoint.
pub fn resume(out: &Path, cell_id: &str, log: Logger<'_>) -> CliResult<CellOutcome> {
    let dir = out.join(cell_id);
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("no cell named {cell_id} under {}", out.display())));
    }
    let manifest = Mutex::new(read_manifest(out)?);
    if manifest
        .lock()
        .expect("manifest lock")
        .get(cell_id)
        .is_some_and(|e| e.status == Status::Complete)
    {
        log(&format!("{cell_id}: already complete"));
        return Ok(CellOutcome::Skipped);
    }
    let config_path = dir.join(CONFIG);
    let text = fs::read_to_string(&config_path).map_err(CliError::io(&config_path))?;
    let cell: CellSpec = serde_json::from_str(&text).map_err(CliError::json(&config_path))?;
    let checkpoint = load_checkpoint(&dir)?;
    if checkpoint.config != cell.train {
        return Err(CliError::Usage(format!("{cell_id}: checkpoint does not match config.json")));
    }
    let trainer = Trainer::from_checkpoint(checkpoint)?;
    let resumed_at = trainer.state.iteration;
    log(&format!("{cell_id}: resuming at iteration {resumed_at}"));

    // Drop snapshots recorded after the checkpoint; they will be recomputed.
    let metrics_path = dir.join(METRICS);
    let kept: Vec<MetricsRecord> = read_metrics_prefix(&dir)
        .into_iter()
        .filter(|r| r.iteration <= resumed_at)
        .collect();
    let mut text = String::new();
    for r in &kept {
        text.push_str(&r.to_json());
        text.push('\n');
    }
    write_atomic(&metrics_path, text.as_bytes())?;
    let metrics = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(CliError::io(&metrics_path))?;

    let outcome = drive(&dir, &cell, trainer, metrics, log)?;
    record(&manifest, out, cell_id, &outcome, &dir)?;
    write_summary(out)?;
    Ok(outcome)
}

pub fn read_metrics(dir: &Path) -> CliResult<Vec<MetricsRecord>> {
    let path = dir.join(METRICS);
    let file = File::open(&path).map_err(CliError::io(&path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(CliError::io(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(CliError::json(&path))?);
    }
    Ok(out)
}

/// Records up to the first unreadable line; a killed run can leave a torn last line.
fn read_metrics_prefix(dir: &Path) -> Vec<MetricsRecord> {
    let Ok(text) = fs::read_to_string(dir.join(METRICS)) else {
        return Vec::new();
    };
    text.lines()
        .map_while(|line| serde_json::from_str(line).ok())
        .collect()
}
