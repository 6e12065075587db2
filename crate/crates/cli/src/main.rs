use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use seqedit_core::harness::{
    companion_path, compare_modes, export_report, replay_ledger, run_experiment_full, sweep_eta, MethodSpec,
    RunConfig, RunReport,
};
use seqedit_core::{EditLedger, Method, UniverseConfig};

#[derive(Parser)]
#[command(name = "seqedit", version, about = "Sequential knowledge editing on a synthetic associative memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one editing method and write the report, ledger, state and universe.
    Run {
        #[arg(long, default_value = "deltaedit")]
        method: Method,
        #[command(flatten)]
        common: Common,
    },
    /// Run deltaedit once per threshold width on a shared universe.
    SweepEta {
        #[arg(long, value_delimiter = ',', required = true)]
        etas: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run several methods (`name` or `name@eta`) on a shared universe.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<MethodSpec>,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute noise metrics from a saved ledger.
    Replay {
        #[arg(long)]
        ledger: PathBuf,
        /// Check the expanded double-sum form for ledgers up to this length.
        #[arg(long, default_value_t = 200)]
        expansion_limit: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 500)]
    edits: usize,
    /// Facts in the universe; defaults to the number of edits.
    #[arg(long)]
    facts: Option<usize>,
    #[arg(long, default_value_t = 1.5)]
    eta: f64,
    #[arg(long, default_value_t = 0.9)]
    delta_coef: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 25)]
    eval_every: usize,
    #[arg(long)]
    shuffle: bool,
    /// Leave wall-clock time out of written reports.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self, method: Method) -> RunConfig {
        let n_facts = self.facts.unwrap_or(self.edits);
        let mut cfg = RunConfig {
            universe: UniverseConfig::square(self.dim, self.vocab, n_facts, self.seed),
            n_edits: self.edits,
            eval_every: self.eval_every,
            seeds: vec![self.seed],
            output_path: self.out.clone(),
            shuffle: self.shuffle,
            ..RunConfig::default()
        };
        cfg.edit.method = method;
        cfg.edit.eta = self.eta;
        cfg.edit.delta_coef = self.delta_coef;
        cfg
    }

    fn finish(&self, report: &mut RunReport) {
        if self.no_timing {
            report.wall_time_secs = None;
        }
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn print_report(label: &str, report: &RunReport) {
    let row = report.terminal();
    let m = &row.metrics;
    println!(
        "{label:<20} edits={:<5} eff={:.3}/{:.3} gen={:.3}/{:.3} spe={:.3}/{:.3} noise_E={:.4e} k_beta={} overlap={} activations={}",
        row.edit_index,
        m.efficacy_top,
        m.efficacy_larger,
        m.generalization_top,
        m.generalization_larger,
        m.specificity_top,
        m.specificity_larger,
        row.noise_e,
        fmt_opt(row.mean_cross_activation),
        fmt_opt(row.mean_influence_overlap),
        row.constraint_activations,
    );
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { method, common } => {
            let cfg = common.config(method);
            let mut art = run_experiment_full(&cfg)?;
            common.finish(&mut art.report);
            print_report(method.as_str(), &art.report);
            if let Some(out) = &common.out {
                let csv = export_report(&art.report, out)?;
                let ledger = companion_path(out, "ledger.jsonl");
                let state = companion_path(out, "state.json");
                let universe = companion_path(out, "universe.json");
                art.ledger.save(&ledger)?;
                art.state.save_checkpoint(&state)?;
                seqedit_core::generate_universe(&cfg.universe)?.save(&universe)?;
                for p in [out, &csv, &ledger, &state, &universe] {
                    eprintln!("wrote {}", p.display());
                }
            }
        }
        Command::SweepEta { etas, common } => {
            let cfg = common.config(Method::DeltaEdit);
            let mut reports = sweep_eta(&cfg, &etas)?;
            for (eta, report) in etas.iter().zip(reports.iter_mut()) {
                common.finish(report);
                print_report(&format!("eta={eta}"), report);
            }
            if let Some(out) = &common.out {
                write_json(out, &reports)?;
                eprintln!("wrote {}", out.display());
            }
        }
        Command::Compare { methods, common } => {
            if methods.len() < 2 {
                bail!("--methods needs at least two entries");
            }
            let cfg = common.config(Method::DeltaEdit);
            let table = compare_modes(&cfg, &methods)?;
            for row in &table.rows {
                let m = &row.metrics;
                println!(
                    "{:<20} eff={:.3}/{:.3} gen={:.3}/{:.3} spe={:.3}/{:.3} noise_E={:.4e} k_beta={} overlap={:.4} activations={}",
                    row.method.to_string(),
                    m.efficacy_top,
                    m.efficacy_larger,
                    m.generalization_top,
                    m.generalization_larger,
                    m.specificity_top,
                    m.specificity_larger,
                    row.noise_e,
                    fmt_opt(row.mean_cross_activation),
                    row.overlap.mean,
                    row.constraint_activations,
                );
            }
            if let Some(out) = &common.out {
                write_json(out, &table)?;
                eprintln!("wrote {}", out.display());
            }
        }
        Command::Replay {
            ledger,
            expansion_limit,
            out,
        } => {
            let ledger = EditLedger::load(&ledger).with_context(|| format!("loading {}", ledger.display()))?;
            let summary = replay_ledger(&ledger, expansion_limit)?;
            let text = serde_json::to_string_pretty(&summary)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, text)?;
                    eprintln!("wrote {}", path.display());
                }
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}
