//! Self-verification suite: each check compares an implementation against
//! an independent oracle or an analytic identity.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::bridge::{lemma_quantities, marginal_params, sample_xt, BridgeEndpoints};
use crate::data::{Dataset, SplitUser};
use crate::metrics::{self, Bucket};
use crate::model::{Binder, ConnectivityInputConfig, ModelConfig, SdifRec};
use crate::rng::{self, StreamRng};
use crate::sampler::{ode_step, sample_with_rng, sde_step, PredictorHandle, SamplerConfig, SamplerMode};
use crate::schedule::{oracle, ScheduleCoeffs, ScheduleError, ScheduleKind, ScheduleParams};
use crate::tensor::{gradient_check, DropoutKey, Tape, Tensor, TensorError, Var};
use crate::trainer::{training_loss, TrainConfig, TrainSequence};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

pub const BETA0: Scalar = 0.01;
pub const BETA1_GRID: [Scalar; 5] = [10.0, 20.0, 30.0, 40.0, 50.0];
pub const KINDS: [ScheduleKind; 2] = [ScheduleKind::Gmax, ScheduleKind::Vp];

fn params(kind: ScheduleKind, beta1: Scalar) -> ScheduleParams {
    ScheduleParams::new(kind, BETA0, beta1).expect("valid grid parameters")
}

/// Closed-form coefficients under test.
pub type CoeffFn<'a> = &'a dyn Fn(&ScheduleParams, Scalar) -> Result<ScheduleCoeffs, ScheduleError>;

pub fn closed_form(p: &ScheduleParams, t: Scalar) -> Result<ScheduleCoeffs, ScheduleError> {
    p.coeffs(t)
}

/// Coefficients against quadrature on a 101-point grid; one outcome per
/// schedule kind and `β₁`. Errors are scaled by `max(1, |reference|)`.
pub fn schedule_checks(coeffs: CoeffFn<'_>, tol: Scalar) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for kind in KINDS {
        for beta1 in BETA1_GRID {
            let p = params(kind, beta1);
            let mut worst: Scalar = 0.0;
            let mut failed = None;
            for i in 0..=100 {
                let t = i as Scalar / 100.0;
                match (coeffs(&p, t), oracle::coeffs(&p, t)) {
                    (Ok(c), Ok(r)) => worst = worst.max(c.max_scaled_error(&r)),
                    (Err(e), _) | (_, Err(e)) => failed = Some(format!("{e}")),
                }
            }
            let name = format!("schedule {} beta1={beta1}", kind.name());
            out.push(match failed {
                Some(e) => CheckOutcome::new(name, false, e),
                None => {
                    CheckOutcome::new(name, worst < tol && worst.is_finite(), format!("max scaled error {worst:.3e}"))
                }
            });
        }
    }
    out
}

/// Exact endpoint pinning plus Monte-Carlo moments at interior times.
pub fn bridge_checks(draws: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut rng = rng::stream(seed, 0xb1, 0);
    let d = 4;
    let x0 = rng::normal_vec(&mut rng, d);
    let x1 = rng::normal_vec(&mut rng, d);
    let ends = BridgeEndpoints::new(&x0, &x1).expect("same length");
    for kind in KINDS {
        let p = params(kind, 20.0);
        let (m0, v0) = marginal_params(&ends, &p.coeffs(0.0).expect("t=0")).expect("non-degenerate");
        let (m1, v1) = marginal_params(&ends, &p.coeffs(1.0).expect("t=1")).expect("non-degenerate");
        let exact = m0 == x0 && v0 == 0.0 && m1 == x1 && v1 == 0.0;
        out.push(CheckOutcome::new(
            format!("bridge endpoints {}", kind.name()),
            exact,
            "t=0 -> (x0, 0), t=1 -> (x1, 0)",
        ));
        for t in [0.25, 0.5, 0.75] {
            let c = p.coeffs(t).expect("t in range");
            let (mean, var) = marginal_params(&ends, &c).expect("non-degenerate");
            let mut sum = vec![0.0; d];
            let mut sq = vec![0.0; d];
            for _ in 0..draws {
                let eps = rng::normal_vec(&mut rng, d);
                let s = sample_xt(&ends, &c, &eps).expect("same length");
                for j in 0..d {
                    sum[j] += s.x_t[j];
                    sq[j] += s.x_t[j] * s.x_t[j];
                }
            }
            let n = draws as Scalar;
            let mut worst_mean: Scalar = 0.0;
            let mut worst_var: Scalar = 0.0;
            for j in 0..d {
                let m = sum[j] / n;
                let v = (sq[j] - n * m * m) / (n - 1.0);
                worst_mean = worst_mean.max((m - mean[j]).abs() / libm::sqrt(var / n));
                worst_var = worst_var.max((v - var).abs() / (var * libm::sqrt(2.0 / (n - 1.0))));
            }
            out.push(CheckOutcome::new(
                format!("bridge moments {} t={t}", kind.name()),
                worst_mean < 4.0 && worst_var < 4.0,
                format!("mean {worst_mean:.2} SE, variance {worst_var:.2} SE"),
            ));
        }
    }
    out
}

/// Product of the finite-width potentials against the marginal.
pub fn lemma_checks(epsilon: Scalar, triples: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for kind in KINDS {
        let p = params(kind, 20.0);
        let mut rng = rng::stream(seed, 0x1e, kind as u64);
        let mut worst_mean: Scalar = 0.0;
        let mut worst_var: Scalar = 0.0;
        for _ in 0..triples {
            let x0 = rng::normal_vec(&mut rng, 3);
            let x1 = rng::normal_vec(&mut rng, 3);
            let t = rng.random_range(0.05..0.95);
            let ends = BridgeEndpoints::new(&x0, &x1).expect("same length");
            let c = p.coeffs(t).expect("t in range");
            let q = lemma_quantities(&ends, &c, epsilon).expect("positive width");
            let prod = q.psi_hat_t.product(&q.psi_t);
            let (mean, var) = marginal_params(&ends, &c).expect("non-degenerate");
            for (a, b) in prod.mean.iter().zip(&mean) {
                worst_mean = worst_mean.max((a - b).abs());
            }
            worst_var = worst_var.max((prod.var - var).abs());
        }
        out.push(CheckOutcome::new(
            format!("lemma product {}", kind.name()),
            worst_mean < 1e-3 && worst_var < 1e-3,
            format!("mean error {worst_mean:.2e}, variance error {worst_var:.2e}"),
        ));
    }
    out
}

/// Returns `x₀ + s·(x_s − x₀)`: exact at `s = 0`, increasingly wrong earlier.
fn perturbed_oracle(x0: &[Scalar]) -> impl Fn(&[Scalar], Scalar, &[Scalar]) -> Vec<Scalar> + '_ {
    move |x: &[Scalar], s: Scalar, _x1: &[Scalar]| x0.iter().zip(x).map(|(a, b)| a + s * (b - a)).collect()
}

/// Identity, collapse, determinism and step monotonicity of both samplers.
pub fn sampler_checks(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut rng = rng::stream(seed, 0x5a, 0);
    let x0 = rng::normal_vec(&mut rng, 5);
    let x1 = rng::normal_vec(&mut rng, 5);
    let pred = rng::normal_vec(&mut rng, 5);
    let eps = rng::normal_vec(&mut rng, 5);
    for kind in KINDS {
        let p = params(kind, 20.0);
        let name = kind.name();
        let mut identity = true;
        let mut collapse = true;
        for s in [0.9, 0.5, 0.2] {
            let cs = p.coeffs(s).expect("t in range");
            let x_s = rng::normal_vec(&mut rng, 5);
            identity &= sde_step(&x_s, &pred, &cs, &cs, &eps).ok().as_deref() == Some(x_s.as_slice());
            identity &= ode_step(&x_s, &pred, &x1, &cs, &cs).ok().as_deref() == Some(x_s.as_slice());
            let c0 = p.coeffs(0.0).expect("t=0");
            collapse &= sde_step(&x_s, &pred, &cs, &c0, &eps).ok().as_deref() == Some(pred.as_slice());
            collapse &= ode_step(&x_s, &pred, &x1, &cs, &c0).ok().as_deref() == Some(pred.as_slice());
        }
        out.push(CheckOutcome::new(format!("sampler zero-time identity {name}"), identity, "t = s returns x_s"));
        out.push(CheckOutcome::new(format!("sampler final collapse {name}"), collapse, "t = 0 returns the prediction"));

        let oracle = perturbed_oracle(&x0);
        let run = |steps: usize, mode: SamplerMode, seed: u64| {
            let cfg = SamplerConfig { mode, steps, guidance_w: 0.0, rng_seed: seed };
            let mut r: StreamRng = rng::seeded(seed);
            sample_with_rng(&x1, PredictorHandle::Single(&oracle), &p, &cfg, &mut r)
        };
        let a = run(12, SamplerMode::Ode, 1);
        let b = run(12, SamplerMode::Ode, 2);
        out.push(CheckOutcome::new(
            format!("sampler ODE determinism {name}"),
            a.is_ok() && a == b,
            "two runs with different streams agree bitwise",
        ));

        let exact = |_: &[Scalar], _: Scalar, _: &[Scalar]| x0.clone();
        let mut errors = Vec::new();
        let mut exact_ok = true;
        for steps in [1usize, 2, 4, 8, 16] {
            let cfg = SamplerConfig { mode: SamplerMode::Ode, steps, guidance_w: 0.0, rng_seed: 0 };
            let mut r = rng::seeded(0);
            let got = sample_with_rng(&x1, PredictorHandle::Single(&exact), &p, &cfg, &mut r);
            exact_ok &= got.as_deref() == Ok(x0.as_slice());
            let x = run(steps, SamplerMode::Ode, 0).unwrap_or_default();
            let err = libm::sqrt(x.iter().zip(&x0).map(|(a, b)| (a - b) * (a - b)).sum());
            errors.push(if x.is_empty() { Scalar::INFINITY } else { err });
        }
        let monotone = errors.windows(2).all(|w| w[1] <= w[0] + 1e-9);
        out.push(CheckOutcome::new(
            format!("sampler oracle error vs steps {name}"),
            exact_ok && monotone,
            format!("exact oracle recovered: {exact_ok}; perturbed oracle errors {errors:.3?}"),
        ));
    }
    out
}

/// Degenerate guidance cases under a shared noise stream.
pub fn guidance_checks(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = rng::stream(seed, 0x9d, 0);
    let x1 = rng::normal_vec(&mut rng, 4);
    let x1u = rng::normal_vec(&mut rng, 4);
    let cond =
        |x: &[Scalar], s: Scalar, y: &[Scalar]| x.iter().zip(y).map(|(a, b)| 0.3 * a - b * s).collect::<Vec<_>>();
    let uncond = |x: &[Scalar], s: Scalar, _y: &[Scalar]| x.iter().map(|a| libm::sin(a + s)).collect::<Vec<_>>();
    let p = params(ScheduleKind::Gmax, 10.0);
    let run = |handle: PredictorHandle<'_>, x1: &[Scalar]| {
        let cfg = SamplerConfig { mode: SamplerMode::Sde, steps: 12, guidance_w: 0.0, rng_seed: 0 };
        let mut r = rng::seeded(seed);
        sample_with_rng(x1, handle, &p, &cfg, &mut r)
    };
    let single = run(PredictorHandle::Single(&cond), &x1);
    let guided = run(PredictorHandle::Guided { cond: &cond, uncond: &uncond, x1_uncond: &x1u, w: 0.0 }, &x1);
    let w0 = single.is_ok() && single == guided;
    let same: Vec<_> = [0.0, 0.8, 3.0]
        .iter()
        .map(|&w| run(PredictorHandle::Guided { cond: &cond, uncond: &cond, x1_uncond: &x1, w }, &x1))
        .collect();
    let flat = same[0].is_ok() && same.iter().all(|s| *s == same[0]);
    vec![
        CheckOutcome::new("guidance w=0 equals conditional sampling", w0, "bitwise under a shared stream"),
        CheckOutcome::new("guidance cond=uncond is independent of w", flat, "w in {0, 0.8, 3}"),
    ]
}

fn random_matrix(rng: &mut StreamRng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, rng::normal_vec(rng, rows * cols)).expect("positive dims")
}

/// Values pushed at least `gap` away from zero, for ops with a kink there.
fn away_from_zero(t: Tensor, gap: Scalar) -> Tensor {
    let shape = t.shape().to_vec();
    let data = t.into_data().into_iter().map(|v| if v.abs() < gap { v.signum() * gap + v } else { v }).collect();
    Tensor::new(shape, data).expect("same shape")
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;

/// `Σ out ⊙ W` for a fixed random `W`, turning any op output into a scalar.
fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut r = rng::seeded(seed);
    let w = tape.constant(Tensor::new(shape, rng::normal_vec(&mut r, n))?);
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

/// Per-op finite-difference checks: `instances` random cases per op.
pub fn op_gradient_checks(instances: usize, step: Scalar, tol: Scalar, seed: u64) -> Vec<CheckOutcome> {
    let ops: Vec<(&str, Build)> = vec![
        ("matmul", |t, v| {
            let o = t.matmul(v[0], v[1])?;
            weighted(t, o, 1)
        }),
        ("transpose", |t, v| {
            let o = t.transpose(v[0])?;
            weighted(t, o, 2)
        }),
        ("add", |t, v| {
            let o = t.add(v[0], v[2])?;
            weighted(t, o, 3)
        }),
        ("sub", |t, v| {
            let o = t.sub(v[0], v[2])?;
            weighted(t, o, 4)
        }),
        ("mul", |t, v| {
            let o = t.mul(v[0], v[2])?;
            weighted(t, o, 5)
        }),
        ("add_scalar", |t, v| {
            let o = t.add_scalar(v[0], 0.7);
            weighted(t, o, 6)
        }),
        ("mul_scalar", |t, v| {
            let o = t.mul_scalar(v[0], -1.3);
            weighted(t, o, 7)
        }),
        ("add_row", |t, v| {
            let o = t.add_row(v[0], v[3])?;
            weighted(t, o, 8)
        }),
        ("mul_row", |t, v| {
            let o = t.mul_row(v[0], v[3])?;
            weighted(t, o, 9)
        }),
        ("scale_rows", |t, v| {
            let rows = t.value(v[0]).rows();
            let o = t.scale_rows(v[0], (0..rows).map(|i| 0.5 + i as Scalar).collect())?;
            weighted(t, o, 10)
        }),
        ("softmax rows", |t, v| {
            let o = t.softmax(v[0], 1)?;
            weighted(t, o, 11)
        }),
        ("softmax cols", |t, v| {
            let o = t.softmax(v[0], 0)?;
            weighted(t, o, 12)
        }),
        ("layer_norm", |t, v| {
            let o = t.layer_norm(v[0], 1, 1e-5)?;
            weighted(t, o, 13)
        }),
        ("gelu", |t, v| {
            let o = t.gelu(v[0]);
            weighted(t, o, 14)
        }),
        ("relu", |t, v| {
            let o = t.relu(v[4]);
            weighted(t, o, 15)
        }),
        ("dropout", |t, v| {
            let o = t.dropout(v[0], 0.3, DropoutKey { seed: 1, layer: 2, step: 3 }, true)?;
            weighted(t, o, 16)
        }),
        ("gather_rows", |t, v| {
            let rows = t.value(v[0]).rows();
            let ids: Vec<usize> = (0..rows + 2).map(|i| (i * 7) % rows).collect();
            let o = t.gather_rows(v[0], &ids)?;
            weighted(t, o, 17)
        }),
        ("concat_cols", |t, v| {
            let o = t.concat_cols(&[v[0], v[2], v[0]])?;
            weighted(t, o, 18)
        }),
        ("concat_rows", |t, v| {
            let o = t.concat_rows(&[v[0], v[2]])?;
            weighted(t, o, 19)
        }),
        ("sum", |t, v| {
            let s = t.sum(v[0]);
            t.mul(s, s)
        }),
        ("mean", |t, v| {
            let s = t.mean(v[0]);
            t.mul(s, s)
        }),
        ("cross_entropy", |t, v| {
            let (rows, cols) = (t.value(v[0]).rows(), t.value(v[0]).cols());
            let targets: Vec<usize> = (0..rows).map(|i| (i * 3 + 1) % cols).collect();
            t.cross_entropy(v[0], &targets)
        }),
    ];
    let mut out = Vec::new();
    for (name, build) in ops {
        let mut worst: Scalar = 0.0;
        let mut failure = None;
        let mut rng = rng::stream(seed, 0x6c, 0);
        for _ in 0..instances {
            let m = rng.random_range(1..=4);
            let n = rng.random_range(2..=4);
            let k = rng.random_range(1..=4);
            // a: m×n, b: n×k, c: m×n, row: 1×n, kinked: m×n
            let inputs = [
                random_matrix(&mut rng, m, n),
                random_matrix(&mut rng, n, k),
                random_matrix(&mut rng, m, n),
                random_matrix(&mut rng, 1, n),
                away_from_zero(random_matrix(&mut rng, m, n), 0.05),
            ];
            match gradient_check(&inputs, step, build) {
                Ok(e) => worst = worst.max(e),
                Err(e) => failure = Some(format!("{e}")),
            }
        }
        out.push(match failure {
            Some(e) => CheckOutcome::new(format!("gradient {name}"), false, e),
            None => {
                CheckOutcome::new(format!("gradient {name}"), worst < tol, format!("max relative error {worst:.2e}"))
            }
        });
    }
    out
}

/// Two items, three positions, every parameter of the conditioned model.
pub fn composite_gradient_check(instances: usize, step: Scalar, tol: Scalar, seed: u64) -> CheckOutcome {
    let mut worst: Scalar = 0.0;
    let mut failure = None;
    for inst in 0..instances as u64 {
        let cfg = TrainConfig {
            dim: 4,
            blocks: 1,
            max_len: 3,
            dropout: 0.2,
            con_mode: true,
            k_clusters: 2,
            cond_drop_p: 0.5,
            input: ConnectivityInputConfig { mu: 0.5, sigma: 0.1, lambda: 100.0 },
            seed: seed + inst,
            ..TrainConfig::default()
        };
        let mconf: ModelConfig = cfg.model_config(2);
        let mut model = match SdifRec::new(mconf, seed + inst) {
            Ok(m) => m,
            Err(e) => return CheckOutcome::new("gradient composite model", false, format!("{e}")),
        };
        // move FiLM away from its identity initialization
        let mut r = rng::stream(seed, 0xf1, inst);
        for name in ["film.beta.weight", "film.gamma.weight"] {
            let id = model.params().find(name).expect("projector exists");
            for v in model.params_mut().get_mut(id).data_mut() {
                *v = 0.3 * rng::normal(&mut r);
            }
        }
        let seqs =
            [TrainSequence { user: 0, items: vec![0, 1, 1, 0] }, TrainSequence { user: 1, items: vec![1, 0, 1] }];
        let batch: Vec<&TrainSequence> = seqs.iter().collect();
        let conds = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let store = model.params().clone();
        let inputs: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
        let result = gradient_check(&inputs, step, |tape, vars| {
            let mut binder = Binder::with_vars(&store, vars);
            training_loss(&model, tape, &mut binder, &batch, Some(&conds), &cfg, inst)
                .map(|(loss, _, _)| loss)
                .map_err(|e| TensorError::Dimension(format!("{e}")))
        });
        match result {
            Ok(e) => worst = worst.max(e),
            Err(e) => failure = Some(format!("{e}")),
        }
    }
    match failure {
        Some(e) => CheckOutcome::new("gradient composite model", false, e),
        None => CheckOutcome::new("gradient composite model", worst < tol, format!("max relative error {worst:.2e}")),
    }
}

/// Hand-computed metric cases, split reconstruction and bucket thresholds.
pub fn metric_checks() -> Vec<CheckOutcome> {
    let ranked = [4, 2, 9, 1, 0, 3, 7, 5];
    let hand = metrics::hr_at_k(&ranked, 4, 5) == Ok(1.0)
        && metrics::ndcg_at_k(&ranked, 4, 5) == Ok(1.0)
        && metrics::ndcg_at_k(&ranked, 9, 5) == Ok(0.5)
        && metrics::hr_at_k(&ranked, 7, 5) == Ok(0.0)
        && metrics::ndcg_at_k(&ranked, 7, 5) == Ok(0.0)
        && metrics::hr_at_k(&[1, 1], 1, 5).is_err();
    let ds = Dataset::parse("a 1 2 3\nb 1 2 3 4 5\nc 9 8 7 6 5 4 3 2 1 0 1 2 3 4\n").expect("fixture").dataset;
    let split = ds.split();
    let recon = ds.users().iter().zip(&split.users).all(|(u, s)| s.reconstruct() == u.items)
        && split.users[0] == SplitUser { train: vec![1], valid: 2, test: 3 }
        && split.users[1] == SplitUser { train: vec![1, 2, 3], valid: 4, test: 5 };
    let counts: Vec<usize> = (0..23).collect();
    let popular = metrics::popular_items(&counts);
    let buckets = popular.iter().filter(|&&p| p).count() == 5
        && popular[18..].iter().all(|&p| p)
        && Bucket::for_length(0) == Bucket::Short
        && Bucket::for_length(5) == Bucket::Short
        && Bucket::for_length(6) == Bucket::Medium
        && Bucket::for_length(10) == Bucket::Medium
        && Bucket::for_length(11) == Bucket::Long;
    vec![
        CheckOutcome::new("metrics hand cases", hand, "rank 1, rank 3, rank 7 at k=5; duplicates rejected"),
        CheckOutcome::new("split reconstruction", recon, "train + valid + test = sequence"),
        CheckOutcome::new("bucket definitions", buckets, "ceil(0.2V) popular items; lengths <=5, 6-10, >10"),
    ]
}

/// Everything `verify` runs, in order.
pub fn full_suite(seed: u64) -> Vec<CheckOutcome> {
    full_suite_with(&closed_form, seed)
}

/// [`full_suite`] with the schedule coefficients supplied by `coeffs`.
pub fn full_suite_with(coeffs: CoeffFn<'_>, seed: u64) -> Vec<CheckOutcome> {
    let mut out = schedule_checks(coeffs, 1e-8);
    out.extend(bridge_checks(100_000, seed));
    out.extend(lemma_checks(1e-4, 10, seed));
    out.extend(sampler_checks(seed));
    out.extend(guidance_checks(seed));
    out.extend(op_gradient_checks(10, 1e-5, 1e-4, seed));
    out.push(composite_gradient_check(10, 1e-5, 1e-3, seed));
    out.extend(metric_checks());
    out
}
