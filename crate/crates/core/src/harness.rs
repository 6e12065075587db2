//! Experiment driver: sequential edits over a generated universe, with
//! metrics and noise diagnostics sampled on a fixed schedule.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::editor::{EditConfig, EditOutcome, EditorState, Method};
use crate::error::{EditError, Result};
use crate::eval::{evaluate, MetricReport, UnrelatedProbes};
use crate::noise::{self, EditLedger, OverlapSummary};
use crate::world::{generate_universe, Fact, FactUniverse, UniverseConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 12] = [
    "edit_index",
    "eff_top",
    "gen_top",
    "spe_top",
    "eff_larger",
    "gen_larger",
    "spe_larger",
    "noise_E",
    "k_beta",
    "overlap",
    "activations",
    "mean_shift",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub universe: UniverseConfig,
    pub edit: EditConfig,
    pub n_edits: usize,
    pub eval_every: usize,
    pub seeds: Vec<u64>,
    pub output_path: Option<PathBuf>,
    /// Edit facts in a seed-driven random order instead of universe order.
    pub shuffle: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            universe: UniverseConfig::default(),
            edit: EditConfig::default(),
            n_edits: 500,
            eval_every: 25,
            seeds: vec![0, 1, 2],
            output_path: None,
            shuffle: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_edits == 0 {
            return Err(EditError::InvalidConfig("n_edits must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(EditError::InvalidConfig("eval_every must be >= 1".into()));
        }
        if self.n_edits > self.universe.n_facts {
            return Err(EditError::InvalidConfig(format!(
                "n_edits ({}) exceeds n_facts ({})",
                self.n_edits, self.universe.n_facts
            )));
        }
        self.universe.validate()?;
        self.edit.validate()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.universe.seed = seed;
        cfg
    }

    pub fn with_method(&self, method: Method) -> Self {
        let mut cfg = self.clone();
        cfg.edit.method = method;
        cfg
    }

    pub fn with_eta(&self, eta: f64) -> Self {
        let mut cfg = self.clone();
        cfg.edit.eta = eta;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub edit_index: usize,
    pub metrics: MetricReport,
    #[serde(rename = "noise_E")]
    pub noise_e: f64,
    pub mean_cross_activation: Option<f64>,
    pub mean_influence_overlap: Option<f64>,
    pub constraint_activations: usize,
    pub mean_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub rows: Vec<ReportRow>,
    /// Excluded from [`RunReport::canonical_json`].
    pub wall_time_secs: Option<f64>,
}

impl RunReport {
    pub fn terminal(&self) -> &ReportRow {
        self.rows.last().expect("a run report always has a terminal row")
    }

    /// Serialization without timing information; identical inputs give
    /// identical bytes.
    pub fn canonical_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.wall_time_secs = None;
        Ok(serde_json::to_string_pretty(&copy)?)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(CSV_COLUMNS)?;
        let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
        for row in &self.rows {
            let m = &row.metrics;
            writer.write_record([
                row.edit_index.to_string(),
                m.efficacy_top.to_string(),
                m.generalization_top.to_string(),
                m.specificity_top.to_string(),
                m.efficacy_larger.to_string(),
                m.generalization_larger.to_string(),
                m.specificity_larger.to_string(),
                row.noise_e.to_string(),
                opt(row.mean_cross_activation),
                opt(row.mean_influence_overlap),
                row.constraint_activations.to_string(),
                row.mean_shift.to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Companion file path for a report, e.g. `out.json` → `out.csv`.
pub fn companion_path(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Writes the report as JSON at `path` and as CSV next to it.
pub fn export_report(report: &RunReport, path: &Path) -> Result<PathBuf> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    let csv_path = companion_path(path, "csv");
    report.write_csv(std::fs::File::create(&csv_path)?)?;
    Ok(csv_path)
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let report: RunReport = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(EditError::SchemaVersion {
            expected: REPORT_SCHEMA_VERSION,
            found: report.schema_version,
        });
    }
    Ok(report)
}

pub fn load_facts(path: &Path) -> Result<FactUniverse> {
    FactUniverse::load(path)
}

/// Order in which facts are edited.
pub fn edit_order(config: &RunConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..config.universe.n_facts).collect();
    if config.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(config.universe.seed ^ 0x005e_ed0f_ed17);
        order.shuffle(&mut rng);
    }
    order.truncate(config.n_edits);
    order
}

/// One sequential editing run, resumable at any edit boundary.
pub struct Session<'u> {
    config: RunConfig,
    universe: &'u FactUniverse,
    order: Vec<usize>,
    probes: UnrelatedProbes,
    pre_outputs: DMatrix<f64>,
    state: EditorState,
    ledger: EditLedger,
    rows: Vec<ReportRow>,
}

fn fact_outputs(w: &DMatrix<f64>, facts: &[Fact]) -> DMatrix<f64> {
    let keys = DMatrix::from_fn(w.ncols(), facts.len(), |r, c| facts[c].key[r]);
    (w * keys).transpose()
}

impl<'u> Session<'u> {
    pub fn new(config: &RunConfig, universe: &'u FactUniverse) -> Result<Self> {
        let w0 = universe.initial_weights()?;
        let state = EditorState::new(w0.clone(), universe.c0()?, config.edit.clone())?;
        let ledger = EditLedger::new(w0);
        Self::resume(config, universe, state, ledger)
    }

    /// Continues from a saved state and ledger; both must describe the same
    /// number of applied edits.
    pub fn resume(
        config: &RunConfig,
        universe: &'u FactUniverse,
        state: EditorState,
        ledger: EditLedger,
    ) -> Result<Self> {
        config.validate()?;
        if universe.facts.len() < config.n_edits {
            return Err(EditError::InvalidConfig("universe has fewer facts than n_edits".into()));
        }
        if state.edit_count != ledger.len() {
            return Err(EditError::InvalidConfig(format!(
                "checkpoint has {} edits but ledger has {}",
                state.edit_count,
                ledger.len()
            )));
        }
        let w0 = ledger.initial_w().clone();
        let probes = UnrelatedProbes::from_universe(universe, &w0)?;
        let pre_outputs = fact_outputs(&w0, &universe.facts);
        Ok(Self {
            config: config.clone(),
            universe,
            order: edit_order(config),
            probes,
            pre_outputs,
            state,
            ledger,
            rows: Vec::new(),
        })
    }

    pub fn state(&self) -> &EditorState {
        &self.state
    }

    pub fn ledger(&self) -> &EditLedger {
        &self.ledger
    }

    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    pub fn is_done(&self) -> bool {
        self.state.edit_count >= self.order.len()
    }

    /// Applies the next edit; records a report row when it lands on the
    /// schedule or finishes the run.
    pub fn step(&mut self) -> Result<EditOutcome> {
        let index = self.state.edit_count;
        let fact = &self.universe.facts[self.order[index]];
        let outcome = self
            .state
            .apply_edit(fact, &self.universe.embed)
            .map_err(|e| EditError::EditFailed {
                index: index + 1,
                source: Box::new(e),
            })?;
        self.ledger.push(fact.key.clone(), &outcome);
        let done = self.state.edit_count;
        if done.is_multiple_of(self.config.eval_every) || done == self.order.len() {
            let row = self.checkpoint_row()?;
            self.rows.push(row);
        }
        Ok(outcome)
    }

    /// Runs until `edit_count` reaches `until` (or the end of the run).
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        while !self.is_done() && self.state.edit_count < until {
            self.step()?;
        }
        Ok(())
    }

    pub fn checkpoint_row(&self) -> Result<ReportRow> {
        let done = self.state.edit_count;
        let edited: Vec<&Fact> = self.order[..done].iter().map(|&i| &self.universe.facts[i]).collect();
        let w = self.state.w();
        let metrics = evaluate(w, &self.universe.embed, &edited, &self.probes)?;
        let entries = self.ledger.entries();
        let noise_e = noise::average_noise(entries)?;
        let (k_beta, overlap) = if entries.len() >= 2 {
            (
                Some(noise::mean_cross_activation(entries)?),
                Some(noise::influence_overlap(entries)?.mean),
            )
        } else {
            (None, None)
        };
        let post = fact_outputs(w, &self.universe.facts);
        let drift = noise::representation_drift(&self.pre_outputs, &post)?;
        Ok(ReportRow {
            edit_index: done,
            metrics,
            noise_e,
            mean_cross_activation: k_beta,
            mean_influence_overlap: overlap,
            constraint_activations: self.state.constraint_activations,
            mean_shift: drift.mean_shift,
        })
    }

    pub fn into_parts(self) -> (EditorState, EditLedger, Vec<ReportRow>) {
        (self.state, self.ledger, self.rows)
    }
}

/// Full output of one run: report plus the final editor state and ledger.
pub struct RunArtifacts {
    pub report: RunReport,
    pub state: EditorState,
    pub ledger: EditLedger,
}

pub fn run_on_universe(config: &RunConfig, universe: &FactUniverse) -> Result<RunArtifacts> {
    let start = Instant::now();
    let mut session = Session::new(config, universe)?;
    session.run_until(config.n_edits)?;
    let (state, ledger, rows) = session.into_parts();
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        rows,
        wall_time_secs: Some(start.elapsed().as_secs_f64()),
    };
    Ok(RunArtifacts { report, state, ledger })
}

/// Generates the universe for `config.universe.seed` and runs every edit.
pub fn run_experiment(config: &RunConfig) -> Result<RunReport> {
    run_experiment_full(config).map(|a| a.report)
}

pub fn run_experiment_full(config: &RunConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let universe = generate_universe(&config.universe)?;
    run_on_universe(config, &universe)
}

/// One run per entry of `config.seeds`, in parallel.
pub fn run_seeds(config: &RunConfig) -> Result<Vec<RunReport>> {
    config
        .seeds
        .par_iter()
        .map(|&seed| run_experiment(&config.with_seed(seed)))
        .collect()
}

/// One run per threshold width, sharing the universe.
pub fn sweep_eta(config: &RunConfig, etas: &[f64]) -> Result<Vec<RunReport>> {
    if etas.is_empty() {
        return Err(EditError::Empty("eta list"));
    }
    config.validate()?;
    let universe = generate_universe(&config.universe)?;
    etas.par_iter()
        .map(|&eta| run_on_universe(&config.with_eta(eta), &universe).map(|a| a.report))
        .collect()
}

/// A method plus an optional threshold width override, written `name` or
/// `name@eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub eta: Option<f64>,
}

impl From<Method> for MethodSpec {
    fn from(method: Method) -> Self {
        Self { method, eta: None }
    }
}

impl FromStr for MethodSpec {
    type Err = EditError;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('@') {
            Some((name, eta)) => {
                let eta: f64 = eta
                    .trim()
                    .parse()
                    .map_err(|_| EditError::InvalidConfig(format!("bad eta in '{s}'")))?;
                Ok(Self {
                    method: name.parse()?,
                    eta: Some(eta),
                })
            }
            None => Ok(Self {
                method: s.parse()?,
                eta: None,
            }),
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.eta {
            Some(eta) => write!(f, "{}@{}", self.method, eta),
            None => write!(f, "{}", self.method),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: MethodSpec,
    pub metrics: MetricReport,
    #[serde(rename = "noise_E")]
    pub noise_e: f64,
    pub mean_cross_activation: Option<f64>,
    pub overlap: OverlapSummary,
    pub constraint_activations: usize,
    pub mean_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub schema_version: u32,
    pub seed: u64,
    pub n_edits: usize,
    pub rows: Vec<ComparisonRow>,
}

/// Runs each method on the same universe and collects terminal numbers.
pub fn compare_modes(config: &RunConfig, methods: &[MethodSpec]) -> Result<ComparisonTable> {
    if methods.len() < 2 {
        return Err(EditError::InvalidConfig("compare needs at least 2 methods".into()));
    }
    config.validate()?;
    let universe = generate_universe(&config.universe)?;
    let rows = methods
        .par_iter()
        .map(|spec| {
            let mut cfg = config.with_method(spec.method);
            if let Some(eta) = spec.eta {
                cfg.edit.eta = eta;
            }
            let artifacts = run_on_universe(&cfg, &universe)?;
            let last = artifacts.report.terminal();
            let overlap = if artifacts.ledger.len() >= 2 {
                noise::influence_overlap(artifacts.ledger.entries())?
            } else {
                OverlapSummary {
                    mean: 0.0,
                    max: 0.0,
                    histogram: vec![0; noise::OVERLAP_BINS],
                    pairs: 0,
                    zero_norm: Vec::new(),
                }
            };
            Ok(ComparisonRow {
                method: *spec,
                metrics: last.metrics,
                noise_e: last.noise_e,
                mean_cross_activation: last.mean_cross_activation,
                overlap,
                constraint_activations: last.constraint_activations,
                mean_shift: last.mean_shift,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonTable {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: config.universe.seed,
        n_edits: config.n_edits,
        rows,
    })
}

/// Noise diagnostics recomputed from a saved ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub n_edits: usize,
    #[serde(rename = "noise_E")]
    pub noise_e: f64,
    pub per_edit_noise: Vec<f64>,
    pub mean_cross_activation: Option<f64>,
    pub overlap: Option<OverlapSummary>,
    pub constrained_edits: usize,
    /// Largest relative gap between the direct and expanded noise forms.
    pub max_expansion_gap: f64,
    /// Edits whose triangle bound is violated beyond 1e-9 (should be 0).
    pub deviation_violations: usize,
}

/// Recomputes every noise metric from `ledger`. The expanded double sum is
/// only checked when the ledger has at most `expansion_limit` entries.
pub fn replay_ledger(ledger: &EditLedger, expansion_limit: usize) -> Result<ReplaySummary> {
    let entries = ledger.entries();
    if entries.is_empty() {
        return Err(EditError::Empty("ledger"));
    }
    let per_edit_noise = (1..=entries.len())
        .into_par_iter()
        .map(|e| noise::noise_for_edit(entries, e))
        .collect::<Result<Vec<_>>>()?;
    let noise_e = per_edit_noise.iter().sum::<f64>() / entries.len() as f64;
    let max_expansion_gap = if entries.len() <= expansion_limit {
        (1..=entries.len())
            .into_par_iter()
            .map(|e| {
                let expanded = noise::noise_expansion(entries, e)?;
                let direct = per_edit_noise[e - 1];
                Ok((expanded - direct).abs() / direct.abs().max(1e-300))
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max)
    } else {
        0.0
    };
    let deviation_violations = (1..=entries.len())
        .map(|e| noise::deviation_bound(ledger, e))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .filter(|b| b.lhs > b.rhs + 1e-9)
        .count();
    let (k_beta, overlap) = if entries.len() >= 2 {
        (
            Some(noise::mean_cross_activation(entries)?),
            Some(noise::influence_overlap(entries)?),
        )
    } else {
        (None, None)
    };
    Ok(ReplaySummary {
        n_edits: entries.len(),
        noise_e,
        per_edit_noise,
        mean_cross_activation: k_beta,
        overlap,
        constrained_edits: entries.iter().filter(|x| x.constrained).count(),
        max_expansion_gap,
        deviation_violations,
    })
}
