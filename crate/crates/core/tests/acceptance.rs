//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use seqedit_core::editor::{
    build_history_projector, compute_null_projection, dynamic_threshold, rank_cap, should_constrain,
    solve_memit, update_threshold_stats,
};
use seqedit_core::harness::{compare_modes, run_experiment_full, sweep_eta, Session};
use seqedit_core::linalg::{asymmetry, idempotence_defect};
use seqedit_core::noise::{noise_expansion, noise_for_edit, EditLedger, LedgerEntry};
use seqedit_core::{
    generate_universe, EditConfig, EditorState, Method, MethodSpec, RunConfig, UniverseConfig,
};

type Outcome = Result<String, String>;

fn gaussian_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn within(name: &str, elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("{name} took {elapsed:.1?}, limit {limit:?}"))
    }
}

fn noise_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d_in = rng.random_range(1..=16);
        let d_out = rng.random_range(1..=16);
        let t = rng.random_range(1..=50);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let entries: Vec<LedgerEntry> = (0..t)
            .map(|i| LedgerEntry {
                index: i + 1,
                alpha: gaussian_vec(&mut rng, d_out) * scale,
                beta: gaussian_vec(&mut rng, d_in) / scale,
                key: gaussian_vec(&mut rng, d_in),
                constrained: false,
            })
            .collect();
        for e in 1..=t {
            let direct = noise_for_edit(&entries, e).map_err(|x| x.to_string())?;
            let expanded = noise_expansion(&entries, e).map_err(|x| x.to_string())?;
            // Relative to the magnitudes whose difference forms the noise.
            let key = &entries[e - 1].key;
            let total: f64 = entries
                .iter()
                .fold(DVector::zeros(d_out), |acc: DVector<f64>, x| acc + &x.alpha * key.dot(&x.beta))
                .norm_squared();
            let denom = direct.abs().max(total).max(f64::MIN_POSITIVE);
            worst = worst.max((direct - expanded).abs() / denom);
        }
    }
    within("noise identity", start.elapsed(), Duration::from_secs(10))?;
    if worst <= 1e-8 {
        Ok(format!("worst relative gap {worst:.2e} over 100 ledgers"))
    } else {
        Err(format!("relative gap {worst:.2e} > 1e-8"))
    }
}

/// Gradient descent on ‖Δk − R‖² + ‖ΔK0‖² with a fixed step from the
/// largest curvature, stopped on a tiny gradient.
fn gd_minimizer(r: &DVector<f64>, k: &DVector<f64>, k0: &DMatrix<f64>) -> DMatrix<f64> {
    let a = k * k.transpose() + k0 * k0.transpose();
    let lmax = a.clone().symmetric_eigenvalues().max();
    let step = 1.0 / (2.0 * lmax);
    let mut delta = DMatrix::zeros(r.len(), k.len());
    for _ in 0..2_000_000 {
        let grad = ((&delta * k - r) * k.transpose() + &delta * k0 * k0.transpose()) * 2.0;
        if grad.norm() <= 1e-14 * (r.norm() * k.norm()).max(1.0) {
            break;
        }
        delta -= grad * step;
    }
    delta
}

fn solver_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let d = 8;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k0 = gaussian_mat(&mut rng, d, 2 * d);
        let k = gaussian_vec(&mut rng, d);
        let r = gaussian_vec(&mut rng, d);
        let c0 = &k0 * k0.transpose();
        let (alpha, beta) = solve_memit(&r, &k, &c0).map_err(|e| e.to_string())?;
        let closed = &alpha * beta.transpose();
        let oracle = gd_minimizer(&r, &k, &k0);
        worst = worst.max((&closed - &oracle).norm() / oracle.norm());
    }
    within("solver oracle", start.elapsed(), Duration::from_secs(30))?;
    if worst <= 1e-6 {
        Ok(format!("worst relative Frobenius gap {worst:.2e} over 20 instances"))
    } else {
        Err(format!("relative gap {worst:.2e} > 1e-6"))
    }
}

fn projector_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_sym = 0.0f64;
    let mut worst_idem = 0.0f64;
    let mut worst_orth = 0.0f64;
    for _ in 0..50 {
        let d_out = rng.random_range(4..=32);
        let d_in = rng.random_range(4..=32);
        let rank = rng.random_range(1..=d_out.min(d_in));
        let history = gaussian_mat(&mut rng, d_out, rank) * gaussian_mat(&mut rng, rank, d_in);
        let hp = build_history_projector(&history, 0.75, 1e-10).map_err(|e| e.to_string())?;
        let cap = rank_cap(d_out, 0.75);
        if hp.retained() > cap {
            return Err(format!("retained {} > cap {cap}", hp.retained()));
        }
        if cap != (0.75 * d_out as f64).floor() as usize {
            return Err(format!("rank cap {cap} for d_out={d_out}"));
        }
        worst_sym = worst_sym.max(asymmetry(&hp.projector));
        worst_idem = worst_idem.max(idempotence_defect(&hp.projector));
        let alpha = &hp.projector * gaussian_vec(&mut rng, d_out);
        for u in hp.basis.column_iter() {
            let rel = alpha.dot(&u).abs() / (alpha.norm() * u.norm()).max(f64::MIN_POSITIVE);
            worst_orth = worst_orth.max(rel);
        }

        let pool_rank = rng.random_range(1..d_in);
        let k0 = gaussian_mat(&mut rng, d_in, pool_rank) * gaussian_mat(&mut rng, pool_rank, 3 * d_in);
        let c0 = &k0 * k0.transpose() / (3 * d_in) as f64;
        let null = compute_null_projection(&c0, 1e-10).map_err(|e| e.to_string())?;
        worst_sym = worst_sym.max(asymmetry(&null));
        worst_idem = worst_idem.max(idempotence_defect(&null));
    }
    within("projector suite", start.elapsed(), Duration::from_secs(10))?;
    if worst_sym <= 1e-10 && worst_idem <= 1e-10 && worst_orth <= 1e-8 {
        Ok(format!(
            "asymmetry {worst_sym:.1e}, idempotence {worst_idem:.1e}, |αᵀu| ratio {worst_orth:.1e}"
        ))
    } else {
        Err(format!(
            "asymmetry {worst_sym:.1e}, idempotence {worst_idem:.1e}, |αᵀu| ratio {worst_orth:.1e}"
        ))
    }
}

fn degenerate_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let base = RunConfig {
            universe: UniverseConfig {
                seed,
                ..UniverseConfig::default()
            },
            n_edits: 100,
            eval_every: 100,
            ..RunConfig::default()
        };
        let alpha = run_experiment_full(&base.with_method(Method::AlphaEdit)).map_err(|e| e.to_string())?;
        let delta = run_experiment_full(&base.with_method(Method::DeltaEdit).with_eta(1e9))
            .map_err(|e| e.to_string())?;
        if delta.state.constraint_activations != 0 {
            return Err(format!("seed {seed}: constraint fired at eta=1e9"));
        }
        let wa = alpha.state.w();
        worst = worst.max((wa - delta.state.w()).norm() / wa.norm());
    }
    within("degenerate equivalence", start.elapsed(), Duration::from_secs(60))?;
    if worst <= 1e-12 {
        Ok(format!("worst relative gap {worst:.1e} over seeds 0..3"))
    } else {
        Err(format!("relative gap {worst:.1e} > 1e-12"))
    }
}

fn trend_reproduction() -> Outcome {
    let start = Instant::now();
    let methods: Vec<MethodSpec> = Method::ALL.iter().map(|&m| m.into()).collect();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in 0..3 {
        let config = RunConfig {
            universe: UniverseConfig::square(64, 256, 500, seed),
            n_edits: 500,
            eval_every: 500,
            ..RunConfig::default()
        };
        let table = compare_modes(&config, &methods).map_err(|e| e.to_string())?;
        let [memit, alpha, delta] = [&table.rows[0], &table.rows[1], &table.rows[2]];
        let noise_order = memit.noise_e > alpha.noise_e && alpha.noise_e > delta.noise_e;
        let eff = delta.metrics.efficacy_top >= alpha.metrics.efficacy_top;
        let kb = memit.mean_cross_activation > alpha.mean_cross_activation;
        lines.push(format!(
            "seed {seed}: noise_E {:.1}/{:.1}/{:.1} eff_top {:.3}/{:.3}/{:.3} k_beta {:.4}/{:.4}",
            memit.noise_e,
            alpha.noise_e,
            delta.noise_e,
            memit.metrics.efficacy_top,
            alpha.metrics.efficacy_top,
            delta.metrics.efficacy_top,
            memit.mean_cross_activation.unwrap_or(f64::NAN),
            alpha.mean_cross_activation.unwrap_or(f64::NAN),
        ));
        for (ok, what) in [
            (noise_order, "noise_E order memit > alphaedit > deltaedit"),
            (eff, "eff_top deltaedit >= alphaedit"),
            (kb, "k_beta memit > alphaedit"),
        ] {
            if !ok {
                failures.push(format!("seed {seed}: {what} violated"));
            }
        }
    }
    within("trend reproduction", start.elapsed(), Duration::from_secs(300))?;
    let detail = lines.join("; ");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join("; ")))
    }
}

fn sliding_statistics() -> Outcome {
    let start = Instant::now();
    let hand: [((f64, f64, f64, f64), (f64, f64)); 4] = [
        ((0.0, 0.0, 10.0, 0.9), (1.0, 8.1)),
        ((1.0, 8.1, 10.0, 0.9), (1.9, 13.851)),
        ((2.0, 1.0, 4.0, 0.5), (3.0, 1.0)),
        ((5.0, 3.0, 5.0, 0.9), (5.0, 2.7)),
    ];
    for ((m, v, x, d), (em, ev)) in hand {
        let (m2, v2) = update_threshold_stats(m, v, x, d);
        if (m2 - em).abs() > 1e-12 || (v2 - ev).abs() > 1e-12 {
            return Err(format!("({m},{v},{x},{d}) gave ({m2},{v2}), expected ({em},{ev})"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let config = EditConfig::deltaedit();
    let mut state = EditorState::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), config.clone())
        .map_err(|e| e.to_string())?;
    state.edit_count = config.warmup_edits;
    let key = DVector::from_element(1, 1.0);
    let mut fired = 0;
    for _ in 0..1000 {
        let m = rng.random_range(0.0..10.0);
        let v = rng.random_range(0.0..10.0);
        let x: f64 = rng.random_range(0.0..20.0);
        state.mean_stat = m;
        state.var_stat = v;
        state.delta_history = DMatrix::from_element(1, 1, x.sqrt());
        let (flag, excitation) = should_constrain(&state, &key, &config);
        let expected = excitation > m + config.eta * v.sqrt();
        if flag != expected || (dynamic_threshold(m, v, config.eta) - (m + config.eta * v.sqrt())).abs() > 0.0 {
            return Err(format!("mismatch at m={m} v={v} excitation={excitation}"));
        }
        if (excitation - x).abs() > 1e-12 * x.max(1.0) {
            return Err(format!("excitation {excitation} != {x}"));
        }
        fired += flag as usize;
    }
    within("sliding statistics", start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("4 hand sequences exact, 1000 random triples agree ({fired} fired)"))
}

fn eta_monotonicity() -> Outcome {
    let start = Instant::now();
    let etas = [0.5, 1.5, 3.0];
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in 0..3 {
        let config = RunConfig {
            universe: UniverseConfig::square(64, 256, 300, seed),
            n_edits: 300,
            eval_every: 300,
            ..RunConfig::default()
        };
        let reports = sweep_eta(&config, &etas).map_err(|e| e.to_string())?;
        let acts: Vec<usize> = reports.iter().map(|r| r.terminal().constraint_activations).collect();
        if acts.windows(2).any(|w| w[1] > w[0]) {
            failures.push(format!("seed {seed}: activations {acts:?} increase with eta"));
        }
        lines.push(format!("seed {seed}: {acts:?}"));
    }
    within("eta monotonicity", start.elapsed(), Duration::from_secs(180))?;
    if failures.is_empty() {
        Ok(format!("activations over eta {etas:?}: {}", lines.join("; ")))
    } else {
        Err(failures.join("; "))
    }
}

fn resume_and_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = RunConfig {
        universe: UniverseConfig::square(32, 96, 80, 8),
        n_edits: 80,
        eval_every: 10,
        ..RunConfig::default()
    };
    let first = run_experiment_full(&config).map_err(|e| e.to_string())?;
    let second = run_experiment_full(&config).map_err(|e| e.to_string())?;
    let a = first.report.canonical_json().map_err(|e| e.to_string())?;
    let b = second.report.canonical_json().map_err(|e| e.to_string())?;
    if a != b {
        return Err("two identical runs produced different reports".into());
    }
    if first.state.constraint_activations == 0 {
        return Err("run never triggered the constraint; resume check would be vacuous".into());
    }

    let universe = generate_universe(&config.universe).map_err(|e| e.to_string())?;
    let mut session = Session::new(&config, &universe).map_err(|e| e.to_string())?;
    session.run_until(config.n_edits / 2).map_err(|e| e.to_string())?;
    let state_path = dir.path().join("half.state.json");
    let ledger_path = dir.path().join("half.ledger.jsonl");
    session.state().save_checkpoint(&state_path).map_err(|e| e.to_string())?;
    session.ledger().save(&ledger_path).map_err(|e| e.to_string())?;
    drop(session);

    let state = EditorState::load_checkpoint(&state_path).map_err(|e| e.to_string())?;
    let ledger = EditLedger::load(&ledger_path).map_err(|e| e.to_string())?;
    let mut resumed = Session::resume(&config, &universe, state, ledger).map_err(|e| e.to_string())?;
    resumed.run_until(config.n_edits).map_err(|e| e.to_string())?;
    if resumed.state().w() != first.state.w() {
        return Err("resumed run ends with different weights".into());
    }
    let full_json = first.state.to_checkpoint_json().map_err(|e| e.to_string())?;
    let resumed_json = resumed.state().to_checkpoint_json().map_err(|e| e.to_string())?;
    if full_json != resumed_json {
        return Err("resumed checkpoint differs from uninterrupted checkpoint".into());
    }
    let tail = &first.report.rows[first.report.rows.len() - resumed.rows().len()..];
    if tail != resumed.rows() {
        return Err("resumed report rows differ".into());
    }
    Ok(format!(
        "reports identical ({} bytes), resumed state identical after {} edits",
        a.len(),
        config.n_edits
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("noise identity", noise_identity),
        ("solver oracle", solver_oracle),
        ("projector suite", projector_suite),
        ("degenerate equivalence", degenerate_equivalence),
        ("trend reproduction", trend_reproduction),
        ("sliding statistics", sliding_statistics),
        ("eta monotonicity", eta_monotonicity),
        ("checkpoint/resume and determinism", resume_and_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({secs:.1}s) {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({secs:.1}s) {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
