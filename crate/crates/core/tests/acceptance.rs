//! Acceptance suite: one PASS/FAIL line per criterion, with its runtime
//! budget. Runs without the libtest harness so the lines always print.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::oracles::{
    ablation_seed, condition_changes_output, determinism_and_round_trip, encoder_aliasing, kl_checks, lcem_error,
    metric_checks, nesting_and_simplex, overfit, random_block_config, recoverability, shape_arithmetic,
    total_loss_checks, Outcome,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    failures: usize,
}

impl Report {
    fn criterion(&mut self, name: &str, budget: Duration, check: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) => (took <= budget, d),
            Err(d) => (false, d),
        };
        if !ok {
            self.failures += 1;
        }
        println!(
            "{} {name}: {detail} [{:.1}s of {:.0}s]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs_f64()
        );
    }
}

fn equations() -> Outcome {
    let lcem = lcem_error(100, 17)?;
    let kl = kl_checks(100, 5);
    let total = total_loss_checks(100, 8);
    let ok = lcem <= 1e-6 && kl.is_ok() && total.is_ok();
    let detail = format!(
        "lcem worst error {lcem:.2e} over 100 tensors; KL {}; total {}",
        kl.unwrap_or_else(|e| e),
        total.unwrap_or_else(|e| e)
    );
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let suite = common::gradient_suite();
    let worst = suite.iter().map(|(_, r)| r.max_rel).fold(0.0, f64::max);
    let failing: Vec<String> =
        suite.iter().filter(|(_, r)| r.max_rel > 1e-4 || r.checked == 0).map(|(n, r)| format!("{n} {:.2e}", r.max_rel)).collect();
    let checked: usize = suite.iter().map(|(_, r)| r.checked).sum();
    let names: Vec<&str> = suite.iter().map(|(n, _)| *n).collect();
    let detail = format!("{} blocks ({}), {checked} elements, worst relative error {worst:.2e}", suite.len(), names.join(", "));
    if failing.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing: {}", failing.join(", ")))
    }
}

fn architecture() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for k in 0..12 {
        let cfg = random_block_config(&mut rng);
        let units = [rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2)];
        shape_arithmetic(&cfg, units, rng.random_range(1..=2), k).map_err(|e| format!("config {cfg:?}: {e}"))?;
    }
    let cond = condition_changes_output()?;
    let alias = encoder_aliasing()?;
    let nest = nesting_and_simplex(4)?;
    Ok(format!("shapes hold for 12 random configs x 4 arms; {cond}; {alias}; {nest}"))
}

fn overfit_smoke() -> Outcome {
    let clean = overfit(0.0, 500, true);
    let noisy = overfit(0.05, 500, false);
    let detail = format!(
        "noise-free: WT DSC {:.4}, generation L1 {:.4} at step {}; noise 0.05: WT DSC {:.4} at step {}",
        clean.wt_dsc, clean.l1, clean.steps, noisy.wt_dsc, noisy.steps
    );
    if clean.wt_dsc > 0.95 && clean.l1 < 0.05 && noisy.wt_dsc > 0.95 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ablation_direction() -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 1..=3 {
        let (direct, cg, n_train) = ablation_seed(seed)?;
        if cg >= direct {
            wins += 1;
        }
        parts.push(format!("seed {seed}: Direct {:.1} vs Direct+CC+CG {:.1} ({n_train} train)", 100.0 * direct, 100.0 * cg));
    }
    let detail = format!("{wins}/3 seeds favor the generator arm; {}", parts.join("; "));
    if wins >= 2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let mut r = Report { failures: 0 };
    let secs = Duration::from_secs;
    r.criterion("scope", secs(1), || Ok("property-based criteria below; no published-table numbers are targeted".into()));
    r.criterion("equation exactness", secs(10), equations);
    r.criterion("metric oracles", secs(30), || metric_checks(200, 21));
    r.criterion("gradient suite", secs(120), gradients);
    r.criterion("architecture invariants", secs(120), architecture);
    r.criterion("phantom recoverability", secs(60), || recoverability(4, 12));
    r.criterion("overfit smoke", secs(600), overfit_smoke);
    r.criterion("determinism and checkpoint round trip", secs(120), || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        determinism_and_round_trip(dir.path())
    });
    r.criterion("ablation direction", secs(90 * 60), ablation_direction);
    println!("{} criteria failed", r.failures);
    if r.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
