//! Acceptance run: one line per criterion, nonzero exit if any fails.

use std::process::ExitCode;
use std::time::Instant;

use bridgerec::experiments;
use bridgerec::Result;
use bridgerec_core::checks::{self, CheckOutcome};
use bridgerec_core::schedule::{ScheduleCoeffs, ScheduleError, ScheduleParams};

const SEED: u64 = 0;

struct Criterion {
    id: usize,
    name: &'static str,
    checks: Vec<CheckOutcome>,
    seconds: f64,
    budget: Option<f64>,
}

impl Criterion {
    fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed) && self.budget.is_none_or(|b| self.seconds < b)
    }
}

fn timed(f: impl FnOnce() -> Result<Vec<CheckOutcome>>) -> (Vec<CheckOutcome>, f64) {
    let start = Instant::now();
    let checks =
        f().unwrap_or_else(|e| vec![CheckOutcome { name: "run".into(), passed: false, detail: e.to_string() }]);
    (checks, start.elapsed().as_secs_f64())
}

fn perturbed(p: &ScheduleParams, t: f64) -> std::result::Result<ScheduleCoeffs, ScheduleError> {
    let mut c = p.coeffs(t)?;
    c.sigma2_t *= 1.0 + 1e-3;
    Ok(c)
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut out: Vec<Criterion> = Vec::new();
    let mut add = |id, name, budget, f: &mut dyn FnMut() -> Result<Vec<CheckOutcome>>| {
        let (checks, seconds) = timed(f);
        let c = Criterion { id, name, checks, seconds, budget };
        println!("criterion {:>2} {}: {} ({:.1}s)", c.id, c.name, if c.passed() { "PASS" } else { "FAIL" }, c.seconds);
        for k in &c.checks {
            if !k.passed || std::env::var_os("ACCEPTANCE_VERBOSE").is_some() {
                println!("    {} {}: {}", if k.passed { "ok  " } else { "FAIL" }, k.name, k.detail);
            }
        }
        out.push(c);
    };

    add(1, "schedule oracle", Some(5.0), &mut || {
        let mut v = checks::schedule_checks(&checks::closed_form, 1e-8);
        let mutant = checks::schedule_checks(&perturbed, 1e-8);
        v.push(CheckOutcome {
            name: "perturbed variance is caught".into(),
            passed: mutant.iter().any(|c| !c.passed),
            detail: format!("{} of {} rows fail", mutant.iter().filter(|c| !c.passed).count(), mutant.len()),
        });
        Ok(v)
    });
    add(2, "bridge endpoints and moments", Some(30.0), &mut || Ok(checks::bridge_checks(100_000, SEED)));
    add(3, "lemma consistency", None, &mut || Ok(checks::lemma_checks(1e-4, 10, SEED)));
    add(4, "sampler identities", None, &mut || Ok(checks::sampler_checks(SEED)));
    add(5, "guidance", None, &mut || Ok(checks::guidance_checks(SEED)));
    add(6, "autodiff", None, &mut || {
        let mut v = checks::op_gradient_checks(10, 1e-5, 1e-4, SEED);
        v.push(checks::composite_gradient_check(10, 1e-5, 1e-3, SEED));
        Ok(v)
    });
    let mut run = None;
    add(7, "overfit toy", None, &mut || {
        let r = experiments::overfit_run(SEED)?;
        let v = experiments::overfit_checks(&r);
        run = Some(r);
        Ok(v)
    });
    add(8, "sampling-step plateau", None, &mut || match &run {
        Some(r) => Ok(vec![experiments::steps_plateau_check(r)?]),
        None => Ok(Vec::new()),
    });
    add(9, "configuration sweep ordering", None, &mut || Ok(vec![experiments::schedule_ordering_check()?.1]));
    add(10, "con-mode sanity", None, &mut || experiments::con_mode_checks());
    add(11, "metrics unit suite", None, &mut || Ok(checks::metric_checks()));

    let failed = out.iter().filter(|c| !c.passed()).count();
    println!("{} of {} criteria passed", out.len() - failed, out.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
