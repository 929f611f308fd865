//! Desk-scale training experiments shared by `verify` and the test suite.

use std::time::Instant;

use bridgerec_core::checks::CheckOutcome;
use bridgerec_core::cluster::{pair_agreement, svd_user_vectors};
use bridgerec_core::data::{Pattern, SplitView, Stage, SyntheticSpec};
use bridgerec_core::eval::Inference;
use bridgerec_core::metrics::MetricSet;
use bridgerec_core::sampler::{SamplerConfig, SamplerMode};
use bridgerec_core::schedule::{ScheduleKind, ScheduleParams};
use bridgerec_core::trainer::{fit, FitResult, TrainConfig};
use bridgerec_core::Scalar;

use crate::parallel::{self, Parallel};
use crate::{Error, Result};

/// Every row of the sampling-steps study.
pub const STEP_GRID: [usize; 8] = [1, 2, 4, 8, 12, 16, 24, 32];

fn check(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name: name.into(), passed, detail }
}

/// Test-stage metrics of `model` under `sampler`.
pub fn test_metrics(
    fit: &FitResult,
    split: &SplitView,
    schedule: ScheduleParams,
    sampler: SamplerConfig,
) -> Result<MetricSet> {
    let inference = Inference::new(&fit.model, schedule, sampler);
    let conditions = fit.conditions();
    let results = parallel::evaluate(&inference, split, Stage::Test, conditions.as_deref()).map_err(Error::contract)?;
    MetricSet::from_ranks(results.iter().map(|r| r.rank)).ok_or_else(|| Error::Contract("no users to evaluate".into()))
}

pub struct OverfitRun {
    pub split: SplitView,
    pub config: TrainConfig,
    pub fit: FitResult,
    pub test: MetricSet,
    pub seconds: f64,
}

/// Full-size model on 50 users and 20 items in four noise-free cycles of five.
pub fn overfit_config(seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 16, epochs: 200, patience: 20, seed, ..TrainConfig::default() }
}

pub fn overfit_run(seed: u64) -> Result<OverfitRun> {
    let split = SyntheticSpec { seed, ..SyntheticSpec::default() }.generate().map_err(Error::contract)?.split();
    let config = overfit_config(seed);
    let start = Instant::now();
    let fit = fit(&split, &config, None, &Parallel, None).map_err(Error::contract)?;
    let seconds = start.elapsed().as_secs_f64();
    let test = test_metrics(&fit, &split, config.schedule, config.sampler)?;
    Ok(OverfitRun { split, config, fit, test, seconds })
}

pub fn overfit_checks(run: &OverfitRun) -> Vec<CheckOutcome> {
    let first = run.fit.history.iter().find(|l| l.valid.hr1 >= 95.0).map(|l| l.epoch + 1);
    vec![
        check(
            "overfit toy validation HR@1",
            first.is_some_and(|e| e <= 200) && run.seconds < 300.0,
            format!(
                "HR@1 >= 95% first at epoch {:?}, best {:.1}% at epoch {}, {:.1}s",
                first,
                run.fit.best_valid.hr1,
                run.fit.best_epoch + 1,
                run.seconds
            ),
        ),
        check("overfit toy test HR@1", run.test.hr1 >= 95.0, format!("{:.1}%", run.test.hr1)),
    ]
}

/// HR@10 on the test stage for each number of sampling steps.
pub fn steps_sweep(
    fit: &FitResult,
    split: &SplitView,
    schedule: ScheduleParams,
    sampler: SamplerConfig,
    steps: &[usize],
) -> Result<Vec<(usize, MetricSet)>> {
    steps.iter().map(|&s| Ok((s, test_metrics(fit, split, schedule, SamplerConfig { steps: s, ..sampler })?))).collect()
}

pub fn steps_plateau_check(run: &OverfitRun) -> Result<CheckOutcome> {
    let rows = steps_sweep(&run.fit, &run.split, run.config.schedule, run.config.sampler, &[12, 32])?;
    let (h12, h32) = (rows[0].1.hr10, rows[1].1.hr10);
    Ok(check("sampling-step plateau", h12 >= 0.99 * h32, format!("HR@10 {h12:.1}% at 12 steps, {h32:.1}% at 32")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kind: ScheduleKind,
    pub mode: SamplerMode,
    pub beta1: Scalar,
    pub hr10: Scalar,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("kind,mode,beta1,hr10\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.4}\n", r.kind.name(), r.mode.name(), r.beta1, r.hr10));
    }
    out
}

/// Trains once per `(kind, β₁)` and evaluates each sampler mode on the test stage.
pub fn sweep(
    split: &SplitView,
    base: &TrainConfig,
    kinds: &[ScheduleKind],
    beta1s: &[Scalar],
    modes: &[SamplerMode],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        for &beta1 in beta1s {
            let schedule =
                ScheduleParams::new(kind, base.schedule.beta0, beta1).map_err(|e| Error::Usage(e.to_string()))?;
            let config = TrainConfig { schedule, ..base.clone() };
            let fit = fit(split, &config, None, &Parallel, None).map_err(Error::contract)?;
            for &mode in modes {
                let m = test_metrics(&fit, split, schedule, SamplerConfig { mode, ..config.sampler })?;
                rows.push(SweepRow { kind, mode, beta1, hr10: m.hr10 });
            }
        }
    }
    Ok(rows)
}

pub const SWEEP_SEEDS: u64 = 3;
pub const SWEEP_BETA1: [Scalar; 2] = [10.0, 20.0];

/// Noisy block-cyclic data, 200 users over 50 items, small model, 30 epochs.
pub fn sweep_protocol(seed: u64) -> Result<(SplitView, TrainConfig)> {
    let spec = SyntheticSpec { num_users: 200, num_items: 50, noise_rate: 0.2, seed, ..SyntheticSpec::default() };
    let split = spec.generate().map_err(Error::contract)?.split();
    let config =
        TrainConfig { dim: 32, blocks: 2, batch_size: 16, epochs: 30, patience: 30, seed, ..TrainConfig::default() };
    Ok((split, config))
}

/// gmax against VP under SDE sampling, HR@10 averaged over seeds and β₁.
pub fn schedule_ordering_check() -> Result<(Vec<SweepRow>, CheckOutcome)> {
    let mut rows = Vec::new();
    for seed in 0..SWEEP_SEEDS {
        let (split, config) = sweep_protocol(seed)?;
        rows.extend(sweep(
            &split,
            &config,
            &[ScheduleKind::Gmax, ScheduleKind::Vp],
            &SWEEP_BETA1,
            &[SamplerMode::Sde],
        )?);
    }
    let mean = |k: ScheduleKind| {
        let v: Vec<Scalar> = rows.iter().filter(|r| r.kind == k).map(|r| r.hr10).collect();
        v.iter().sum::<Scalar>() / v.len() as Scalar
    };
    let (g, v) = (mean(ScheduleKind::Gmax), mean(ScheduleKind::Vp));
    let c = check(
        "gmax/SDE >= VP/SDE on noisy data",
        g >= v,
        format!("mean HR@10 gmax {g:.2}% vs VP {v:.2}% over {SWEEP_SEEDS} seeds x beta1 {SWEEP_BETA1:?}"),
    );
    Ok((rows, c))
}

pub const CON_SEEDS: u64 = 5;

pub struct ConModeSeed {
    pub seed: u64,
    pub unconditional: Scalar,
    pub conditional: Scalar,
    pub agreement: Scalar,
}

/// Two user populations over disjoint item ranges, SVD user vectors, k = 2, w = 0.8.
pub fn con_mode_seed(seed: u64) -> Result<ConModeSeed> {
    let spec = SyntheticSpec {
        num_users: 100,
        num_items: 40,
        pattern: Pattern::Markov,
        populations: 2,
        seed,
        ..SyntheticSpec::default()
    };
    let dataset = spec.generate().map_err(Error::contract)?;
    let split = dataset.split();
    let vectors = svd_user_vectors(&dataset, 64, seed);
    let truth: Vec<usize> = (0..spec.num_users).map(|u| spec.population_of(u)).collect();
    let base = TrainConfig {
        dim: 32,
        blocks: 2,
        batch_size: 16,
        epochs: 30,
        patience: 30,
        seed,
        k_clusters: 2,
        sampler: SamplerConfig { guidance_w: 0.8, ..SamplerConfig::default() },
        ..TrainConfig::default()
    };
    let plain = fit(&split, &base, None, &Parallel, None).map_err(Error::contract)?;
    let con_config = TrainConfig { con_mode: true, ..base.clone() };
    let con = fit(&split, &con_config, Some(&vectors), &Parallel, None).map_err(Error::contract)?;
    let agreement = con.cluster.as_ref().map_or(0.0, |c| pair_agreement(&c.assignments, &truth));
    Ok(ConModeSeed {
        seed,
        unconditional: test_metrics(&plain, &split, base.schedule, base.sampler)?.hr10,
        conditional: test_metrics(&con, &split, con_config.schedule, con_config.sampler)?.hr10,
        agreement,
    })
}

fn median(mut v: Vec<Scalar>) -> Scalar {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn con_mode_checks() -> Result<Vec<CheckOutcome>> {
    let runs = (0..CON_SEEDS).map(con_mode_seed).collect::<Result<Vec<_>>>()?;
    let con = median(runs.iter().map(|r| r.conditional).collect());
    let plain = median(runs.iter().map(|r| r.unconditional).collect());
    let worst = runs.iter().map(|r| r.agreement).fold(1.0, Scalar::min);
    Ok(vec![
        check(
            "con-mode HR@10 >= unconditional",
            con >= plain,
            format!("median HR@10 over {CON_SEEDS} seeds: con {con:.1}% vs unconditional {plain:.1}%"),
        ),
        check("cluster recovery", worst >= 0.9, format!("lowest pair agreement {worst:.3}")),
    ])
}

/// The training-based checks, slowest part of `verify`.
pub fn experiment_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let run = overfit_run(seed)?;
    let mut out = overfit_checks(&run);
    out.push(steps_plateau_check(&run)?);
    out.push(schedule_ordering_check()?.1);
    out.extend(con_mode_checks()?);
    Ok(out)
}
