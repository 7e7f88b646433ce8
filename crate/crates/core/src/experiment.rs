//! Config-driven experiment runner behind the `fpl` binary.
//!
//! An experiment is a TOML file naming a backbone, a federation setup, a
//! partition regime and optional sweep axes. Every sweep cell runs in its own
//! directory with its own random streams.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{generate_synthetic_backbone, load_backbone, save_backbone, Backbone, SyntheticSpec};
use crate::cost::{federation_cost, CostInputs, CostReport};
use crate::error::{Error, Result};
use crate::federation::{run, FederationConfig, RunOutput};
use crate::partition::{partition, stratified_split, PartitionSpec, Regime};
use crate::prompt::PromptVectors;
use crate::rng::{derive_seed, tag};
use crate::trainer::TrainerKind;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILED_FILE: &str = "FAILED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSource {
    /// A backbone file; relative paths resolve against the config's directory.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionParams {
    #[serde(default = "default_regime")]
    pub regime: Regime,
    /// Global training samples per class; all available when absent.
    #[serde(default)]
    pub shots: Option<usize>,
    /// Share of each class held out for centralized evaluation.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_regime() -> Regime {
    Regime::Iid
}

fn default_test_fraction() -> f64 {
    0.5
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self { regime: default_regime(), shots: None, test_fraction: default_test_fraction() }
    }
}

/// Values swept as a Cartesian product. An empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub shots: Vec<usize>,
    #[serde(default)]
    pub clients: Vec<usize>,
    #[serde(default)]
    pub overlap: Vec<f64>,
    #[serde(default)]
    pub trainers: Vec<TrainerKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub backbone: BackboneSource,
    pub federation: FederationConfig,
    #[serde(default)]
    pub partition: PartitionParams,
    #[serde(default)]
    pub sweep: Sweep,
}

/// One point of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub key: String,
    pub dir: String,
    pub seed: u64,
    pub shots: Option<usize>,
    pub clients: usize,
    pub regime: Regime,
    pub trainer: TrainerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    #[serde(flatten)]
    pub cell: Cell,
    pub files: Vec<String>,
    pub final_accuracy: Option<f64>,
    pub cumulative_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: String,
    pub seed: u64,
    pub backbone_checksum: String,
    pub config: ExperimentConfig,
    pub cells: Vec<CellRecord>,
}

/// Line (1-based) of `key` inside `[section]`, or of the section header itself.
fn locate(source: &str, section: &str, key: Option<&str>) -> Option<usize> {
    let mut in_section = section.is_empty();
    let mut header_line = None;
    for (i, line) in source.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            let name = t.trim_matches(|c| c == '[' || c == ']').trim();
            in_section = name == section;
            if in_section && header_line.is_none() {
                header_line = Some(i + 1);
            }
            continue;
        }
        if in_section {
            if let Some(k) = key {
                let lhs = t.split('=').next().unwrap_or("").trim();
                if t.contains('=') && lhs == k {
                    return Some(i + 1);
                }
            }
        }
    }
    header_line
}

fn anchored(origin: &str, source: &str, section: &str, key: Option<&str>, msg: impl std::fmt::Display) -> Error {
    let name = match (section.is_empty(), key) {
        (true, Some(k)) => k.to_string(),
        (false, Some(k)) => format!("{section}.{k}"),
        (_, None) => section.to_string(),
    };
    match locate(source, section, key) {
        Some(line) => Error::Config(format!("{origin}:{line}: {name}: {msg}")),
        None => Error::Config(format!("{origin}: {name}: {msg}")),
    }
}

/// Parses a TOML document into `T`, reporting errors as `origin:line:col: message`.
pub fn parse_toml<T: serde::de::DeserializeOwned>(source: &str, origin: &str) -> Result<T> {
    toml::from_str(source).map_err(|e| {
        let msg = e.message().trim().to_string();
        match e.span() {
            Some(span) => {
                let before = &source[..span.start.min(source.len())];
                let line = before.matches('\n').count() + 1;
                let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
                Error::Config(format!("{origin}:{line}:{col}: {msg}"))
            }
            None => Error::Config(format!("{origin}: {msg}")),
        }
    })
}

impl ExperimentConfig {
    /// Parses and validates a config document.
    pub fn parse(source: &str, origin: &str) -> Result<Self> {
        let cfg: Self = parse_toml(source, origin)?;
        cfg.validate(source, origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let source = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&source, &path.display().to_string())
    }

    fn validate(&self, src: &str, origin: &str) -> Result<()> {
        let err = |section: &str, key: Option<&str>, msg: String| anchored(origin, src, section, key, msg);
        match (&self.backbone.path, &self.backbone.synthetic) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(err("backbone", None, "give exactly one of `path` or `synthetic`".into()));
            }
            (None, Some(spec)) => {
                spec.validate().map_err(|e| err("backbone.synthetic", None, e.to_string()))?;
            }
            _ => {}
        }
        if self.federation.seed != 0 {
            return Err(err("federation", Some("seed"), "set the seed at the top level".into()));
        }
        let mut fed = self.federation.clone();
        for &n in &self.sweep.clients {
            fed.clients = n;
            fed.check().map_err(|(_, msg)| err("sweep", Some("clients"), msg))?;
        }
        if self.sweep.clients.is_empty() {
            self.federation.check().map_err(|(field, msg)| err("federation", Some(field), msg))?;
        }
        let p = &self.partition;
        if !(0.0..1.0).contains(&p.test_fraction) {
            return Err(err(
                "partition",
                Some("test_fraction"),
                format!("must lie in [0, 1), got {}", p.test_fraction),
            ));
        }
        if p.shots == Some(0) || self.sweep.shots.contains(&0) {
            return Err(err("partition", Some("shots"), "shots must be positive".into()));
        }
        if let Some(bad) = self.sweep.overlap.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(err("sweep", Some("overlap"), format!("ratios must lie in [0, 1], got {bad}")));
        }
        Ok(())
    }

    /// All sweep cells, in axis order shots × clients × overlap × trainers.
    pub fn cells(&self) -> Vec<Cell> {
        let shots: Vec<Option<usize>> = if self.sweep.shots.is_empty() {
            vec![self.partition.shots]
        } else {
            self.sweep.shots.iter().map(|&s| Some(s)).collect()
        };
        let clients =
            if self.sweep.clients.is_empty() { vec![self.federation.clients] } else { self.sweep.clients.clone() };
        let regimes: Vec<Regime> = if self.sweep.overlap.is_empty() {
            vec![self.partition.regime]
        } else {
            self.sweep.overlap.iter().map(|&ratio| Regime::Overlap { ratio }).collect()
        };
        let trainers =
            if self.sweep.trainers.is_empty() { vec![self.federation.trainer] } else { self.sweep.trainers.clone() };

        let mut cells = Vec::new();
        for &s in &shots {
            for &n in &clients {
                for &regime in &regimes {
                    for &trainer in &trainers {
                        let shot_label = s.map_or("all".to_string(), |v| v.to_string());
                        let key = format!(
                            "shots={shot_label},clients={n},regime={},trainer={}",
                            regime.label(),
                            trainer.name()
                        );
                        let dir = format!("shots{shot_label}_clients{n}_{}_{}", regime.label(), trainer.name());
                        let seed = derive_seed(self.seed, &[tag(&key)]);
                        cells.push(Cell { key, dir, seed, shots: s, clients: n, regime, trainer });
                    }
                }
            }
        }
        cells
    }

    pub fn load_backbone(&self, config_dir: &Path) -> Result<Backbone> {
        match (&self.backbone.path, &self.backbone.synthetic) {
            (Some(p), _) => load_backbone(&config_dir.join(p)),
            (None, Some(spec)) => Ok(generate_synthetic_backbone(spec)?.0),
            (None, None) => Err(Error::config("no backbone configured")),
        }
    }
}

/// Prepares `dir` for fresh output.
///
/// A non-empty directory is only cleared with `force`, and only when it holds
/// earlier run output (a manifest or a failure marker).
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::Config(format!(
                    "output directory {} is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            if !dir.join(MANIFEST_FILE).exists() && !dir.join(FAILED_FILE).exists() {
                return Err(Error::Config(format!(
                    "refusing to clear {}: it does not look like a previous run",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Everything a finished cell produced.
pub struct CellOutput {
    pub record: CellRecord,
    pub run: RunOutput,
    pub partition: PartitionSpec,
}

/// Builds the partition for `cell` over the backbone's training rows.
pub fn cell_partition(cell: &Cell, backbone: &Backbone, train: &[usize]) -> Result<PartitionSpec> {
    let labels: Vec<u32> = train.iter().map(|&i| backbone.images().labels()[i]).collect();
    let mut spec = partition(&labels, backbone.classes(), cell.regime, cell.clients, cell.shots, cell.seed)?;
    for rows in &mut spec.assignment {
        for i in rows.iter_mut() {
            *i = train[*i];
        }
    }
    Ok(spec)
}

/// Runs a single cell and writes its files under `out/cell.dir`.
pub fn run_cell(
    cfg: &ExperimentConfig,
    cell: &Cell,
    backbone: &Backbone,
    train: &[usize],
    test: &[usize],
    out: &Path,
) -> Result<CellOutput> {
    let dir = out.join(&cell.dir);
    fs::create_dir_all(&dir)?;
    let part = cell_partition(cell, backbone, train)?;
    let mut fed = cfg.federation.clone();
    fed.clients = cell.clients;
    fed.trainer = cell.trainer;
    fed.seed = cell.seed;
    let output = run(&fed, backbone, &part, test)?;

    let mut files = Vec::new();
    let mut write = |name: &str, bytes: &[u8]| -> Result<()> {
        fs::write(dir.join(name), bytes)?;
        files.push(format!("{}/{name}", cell.dir));
        Ok(())
    };
    write("metrics.csv", &output.metrics_csv()?)?;
    write("rounds.jsonl", output.events_jsonl()?.as_bytes())?;
    let cost = serde_json::json!({ "simulated": output.cost, "closed_form": output.predicted_cost });
    write("cost.json", serde_json::to_string_pretty(&cost)?.as_bytes())?;
    write("partition.json", part.to_json()?.as_bytes())?;
    if cell.trainer == TrainerKind::PromptFl {
        let prompt = PromptVectors::new(output.state.theta.clone())?;
        write("prompt.fplp", &crate::prompt::encode_checkpoint(&prompt))?;
    }
    let record = CellRecord {
        cell: cell.clone(),
        files,
        final_accuracy: output.rows.last().map(|r| r.test_accuracy),
        cumulative_bytes: output.cost.total_bytes(),
    };
    Ok(CellOutput { record, run: output, partition: part })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub force: bool,
    /// Cells run concurrently; 0 lets the thread pool decide.
    pub jobs: usize,
}

/// Runs every cell of `cfg` into `out` and writes the manifest.
///
/// On failure the completed cells stay on disk, a `FAILED` marker lists the
/// errors, and the manifest records status `failed`.
pub fn run_experiment(cfg: &ExperimentConfig, config_dir: &Path, out: &Path, opts: RunOptions) -> Result<Manifest> {
    prepare_output_dir(out, opts.force)?;
    let result = (|| {
        let backbone = cfg.load_backbone(config_dir)?;
        let checksum = backbone.checksum();
        let (train, test) = stratified_split(
            backbone.images().labels(),
            backbone.classes(),
            cfg.partition.test_fraction,
            derive_seed(cfg.seed, &[tag("split")]),
        )?;
        let cells = cfg.cells();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", opts.jobs)))?;
        let results: Vec<Result<CellRecord>> = pool.install(|| {
            cells
                .par_iter()
                .map(|cell| {
                    run_cell(cfg, cell, &backbone, &train, &test, out)
                        .map(|o| o.record)
                        .map_err(|e| Error::Data(format!("cell {}: {e}", cell.key)))
                })
                .collect()
        });
        Ok((checksum, results))
    })();

    let (checksum, results) = match result {
        Ok(v) => v,
        Err(e) => {
            fs::write(out.join(FAILED_FILE), format!("{e}\n"))?;
            return Err(e);
        }
    };
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => errors.push(e.to_string()),
        }
    }
    let manifest = Manifest {
        status: if errors.is_empty() { "complete".into() } else { "failed".into() },
        seed: cfg.seed,
        backbone_checksum: checksum,
        config: cfg.clone(),
        cells: records,
    };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    if !errors.is_empty() {
        fs::write(out.join(FAILED_FILE), errors.join("\n") + "\n")?;
        return Err(Error::Data(errors.join("; ")));
    }
    Ok(manifest)
}

/// A cost-only scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// `"device"` adds the single-device PromptFL and FL presets.
    #[serde(default)]
    pub preset: Option<String>,
    /// Overrides the round count of the presets.
    #[serde(default)]
    pub rounds: Option<u64>,
    #[serde(default, rename = "scenario")]
    pub scenarios: Vec<NamedScenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedScenario {
    pub name: String,
    #[serde(flatten)]
    pub inputs: CostInputs,
}

impl CostConfig {
    pub fn parse(source: &str, origin: &str) -> Result<Self> {
        let cfg: Self = parse_toml(source, origin)?;
        match cfg.preset.as_deref() {
            None | Some("device") => {}
            Some(other) => {
                return Err(anchored(origin, source, "", Some("preset"), format!("unknown preset {other:?}")));
            }
        }
        if cfg.preset.is_none() && cfg.scenarios.is_empty() {
            return Err(Error::Config(format!("{origin}: give a preset or at least one [[scenario]]")));
        }
        Ok(cfg)
    }

    pub fn scenarios(&self) -> Vec<NamedScenario> {
        let mut out = Vec::new();
        if self.preset.as_deref() == Some("device") {
            let mut p = CostInputs::promptfl_device_preset();
            let mut f = CostInputs::fl_device_preset();
            if let Some(r) = self.rounds {
                p.rounds = r;
                f.rounds = r;
            }
            out.push(NamedScenario { name: "promptfl-150M".into(), inputs: p });
            out.push(NamedScenario { name: "fl-100M".into(), inputs: f });
        }
        out.extend(self.scenarios.iter().cloned());
        out
    }

    /// Closed-form reports for every scenario, in order.
    pub fn evaluate(&self) -> Result<Vec<(String, CostReport)>> {
        self.scenarios().into_iter().map(|s| Ok((s.name, federation_cost(&s.inputs)?))).collect()
    }
}

/// Serializable summary of several cost reports without the per-round detail.
pub fn cost_summary_json(reports: &[(String, CostReport)]) -> Result<String> {
    let map: BTreeMap<&str, serde_json::Value> = reports
        .iter()
        .map(|(name, r)| {
            let mut v = serde_json::to_value(r)?;
            if let Some(obj) = v.as_object_mut() {
                obj.remove("rounds");
            }
            Ok((name.as_str(), v))
        })
        .collect::<Result<_>>()?;
    Ok(serde_json::to_string_pretty(&map)? + "\n")
}

/// Writes a synthetic backbone plus its manifest and a generation report into `out`.
pub fn generate_into(spec: &SyntheticSpec, out: &Path, force: bool) -> Result<PathBuf> {
    prepare_output_dir(out, force)?;
    let (backbone, report) = generate_synthetic_backbone(spec)?;
    let path = out.join("backbone.fplb");
    save_backbone(&backbone, &path)?;
    let report = serde_json::json!({
        "spec": spec,
        "report": report,
        "checksum": backbone.checksum(),
        "files": ["backbone.fplb", "backbone.json", MANIFEST_FILE],
    });
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(path)
}

/// Desk-scale model whose full parameter count is 120× its prompt block:
/// width 32, one layer, 8 positions, 10 single-token classes, 4 prompt vectors.
pub fn upload_ratio_preset() -> (SyntheticSpec, usize) {
    let mut spec = SyntheticSpec::new(10, 32, 1, 5, 8, 0.05);
    spec.max_len = 8;
    (spec, 4)
}
