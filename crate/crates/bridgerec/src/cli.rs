//! The `bridgerec` command line.

use std::ffi::OsString;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use bridgerec_core::checks::{self, CheckOutcome};
use bridgerec_core::cluster::svd_user_vectors;
use bridgerec_core::data::Stage;
use bridgerec_core::eval::Inference;
use bridgerec_core::metrics::bucket_report;
use bridgerec_core::sampler::{SamplerConfig, SamplerMode};
use bridgerec_core::schedule::{ScheduleCoeffs, ScheduleError, ScheduleKind, ScheduleParams};
use bridgerec_core::trainer::{checkpoint_conditions, checkpoint_schedule, fit, EpochLog};
use bridgerec_core::Scalar;

use crate::config::{parse_kind, parse_mode, Settings};
use crate::experiments::{self, STEP_GRID};
use crate::parallel::{self, Parallel};
use crate::{io, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "bridgerec", version, about = "Bridge-diffusion sequential recommender")]
pub struct Cli {
    /// key=value file; flags given on the command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic interaction dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Full-ranking metrics for a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Top-K items for one interaction history.
    Recommend(RecommendArgs),
    /// Run the self-verification suite.
    Verify(VerifyArgs),
    /// Train and evaluate a grid of schedules and sampler modes.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ScheduleFlags {
    /// gmax or vp.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub beta0: Option<Scalar>,
    #[arg(long)]
    pub beta1: Option<Scalar>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SamplerFlags {
    /// sde or ode.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance_w: Option<Scalar>,
    /// Sampling noise seed; defaults to --seed.
    #[arg(long)]
    pub sampler_seed: Option<u64>,
    /// inner-product or cosine.
    #[arg(long)]
    pub retrieval: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub k_clusters: Option<usize>,
    #[arg(long)]
    pub cond_drop_p: Option<Scalar>,
    #[arg(long)]
    pub mu: Option<Scalar>,
    #[arg(long)]
    pub sigma: Option<Scalar>,
    #[arg(long)]
    pub lambda: Option<Scalar>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<Scalar>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<Scalar>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Condition on user clusters.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub con_mode: Option<bool>,
    /// Rank of the SVD user vectors used when no embedding file is given.
    #[arg(long)]
    pub svd_rank: Option<usize>,
    #[arg(long)]
    pub cluster_iterations: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SynthFlags {
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    /// markov or block-cyclic.
    #[arg(long)]
    pub pattern: Option<String>,
    #[arg(long)]
    pub noise: Option<Scalar>,
    #[arg(long)]
    pub populations: Option<usize>,
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Shortest generated sequence.
    #[arg(long)]
    pub seq_min: Option<usize>,
    /// Longest generated sequence.
    #[arg(long)]
    pub seq_max: Option<usize>,
    #[arg(long)]
    pub zipf: Option<Scalar>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub synth: SynthFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Per-user embeddings for con mode; SVD factors otherwise.
    #[arg(long)]
    pub user_embeddings: Option<PathBuf>,
    #[command(flatten)]
    pub schedule: ScheduleFlags,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// valid or test.
    #[arg(long)]
    pub stage: Option<String>,
    /// Comma-separated step counts, or `default` for 1,2,4,8,12,16,24,32.
    #[arg(long)]
    pub steps_sweep: Option<String>,
    #[command(flatten)]
    pub schedule: ScheduleFlags,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for metrics.csv, report.txt and steps.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Item ids, oldest first, separated by spaces or commas.
    #[arg(long, allow_hyphen_values = true)]
    pub history: Option<String>,
    /// File holding the history; stdin when neither is given.
    #[arg(long)]
    pub history_file: Option<PathBuf>,
    #[arg(short, long)]
    pub k: Option<usize>,
    /// Training user whose cluster conditions the sample.
    #[arg(long)]
    pub user_index: Option<usize>,
    #[command(flatten)]
    pub schedule: ScheduleFlags,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Skip the training experiments.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub quick: Option<bool>,
    /// Multiply every closed-form σ_t² by (1 + δ) before checking.
    #[arg(long, allow_hyphen_values = true)]
    pub perturb_sigma2: Option<Scalar>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Dataset file; a synthetic dataset is generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated schedule kinds.
    #[arg(long)]
    pub kinds: Option<String>,
    /// Comma-separated sampler modes.
    #[arg(long)]
    pub modes: Option<String>,
    /// Comma-separated β₁ values.
    #[arg(long)]
    pub beta1_list: Option<String>,
    #[command(flatten)]
    pub synth: SynthFlags,
    #[command(flatten)]
    pub schedule: ScheduleFlags,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

impl ScheduleFlags {
    fn apply(&self, s: &mut Settings) {
        s.set_opt("schedule", self.schedule.as_ref());
        s.set_opt("beta0", self.beta0);
        s.set_opt("beta1", self.beta1);
    }
}

impl SamplerFlags {
    fn apply(&self, s: &mut Settings) {
        s.set_opt("mode", self.mode.as_ref());
        s.set_opt("steps", self.steps);
        s.set_opt("guidance_w", self.guidance_w);
        s.set_opt("sampler_seed", self.sampler_seed);
        s.set_opt("retrieval", self.retrieval.as_ref());
    }
}

impl TrainFlags {
    fn apply(&self, s: &mut Settings) {
        s.set_opt("k_clusters", self.k_clusters);
        s.set_opt("cond_drop_p", self.cond_drop_p);
        s.set_opt("mu", self.mu);
        s.set_opt("sigma", self.sigma);
        s.set_opt("lambda", self.lambda);
        s.set_opt("epochs", self.epochs);
        s.set_opt("lr", self.lr);
        s.set_opt("batch", self.batch);
        s.set_opt("dim", self.dim);
        s.set_opt("blocks", self.blocks);
        s.set_opt("max_len", self.max_len);
        s.set_opt("dropout", self.dropout);
        s.set_opt("patience", self.patience);
        s.set_opt("con_mode", self.con_mode);
        s.set_opt("svd_rank", self.svd_rank);
        s.set_opt("cluster_iterations", self.cluster_iterations);
    }
}

impl SynthFlags {
    fn apply(&self, s: &mut Settings) {
        s.set_opt("users", self.users);
        s.set_opt("items", self.items);
        s.set_opt("pattern", self.pattern.as_ref());
        s.set_opt("noise", self.noise);
        s.set_opt("populations", self.populations);
        s.set_opt("block_size", self.block_size);
        s.set_opt("seq_min", self.seq_min);
        s.set_opt("seq_max", self.seq_max);
        s.set_opt("zipf", self.zipf);
    }
}

fn required(s: &Settings, key: &str) -> Result<PathBuf> {
    s.raw(key).map(PathBuf::from).ok_or_else(|| Error::Usage(format!("--{} is required", key.replace('_', "-"))))
}

fn output_path(s: &Settings) -> Option<PathBuf> {
    s.raw("out").map(PathBuf::from)
}

fn emit(s: &Settings, text: &str) -> Result<()> {
    match output_path(s) {
        Some(p) => io::write_text(&p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn report_seed(seed: u64) {
    eprintln!("seed: {seed}");
}

fn settings(config: Option<&Path>) -> Result<Settings> {
    match config {
        Some(p) => Settings::parse(&io::read_text(p)?),
        None => Ok(Settings::default()),
    }
}

impl Cli {
    /// Resolves settings (file, then flags) and runs the command.
    pub fn execute(self) -> Result<()> {
        let mut s = settings(self.config.as_deref())?;
        match self.command {
            Command::Synth(a) => {
                a.synth.apply(&mut s);
                s.set_opt("seed", a.seed);
                s.set_opt("out", path_str(&a.out));
                synth(&s)
            }
            Command::Train(a) => {
                a.schedule.apply(&mut s);
                a.sampler.apply(&mut s);
                a.train.apply(&mut s);
                s.set_opt("data", path_str(&a.data));
                s.set_opt("user_embeddings", path_str(&a.user_embeddings));
                s.set_opt("seed", a.seed);
                s.set_opt("out", path_str(&a.out));
                train(&s)
            }
            Command::Eval(a) => {
                a.schedule.apply(&mut s);
                a.sampler.apply(&mut s);
                s.set_opt("checkpoint", path_str(&a.checkpoint));
                s.set_opt("data", path_str(&a.data));
                s.set_opt("stage", a.stage.as_ref());
                s.set_opt("steps_sweep", a.steps_sweep.as_ref());
                s.set_opt("seed", a.seed);
                s.set_opt("out", path_str(&a.out));
                eval(&s)
            }
            Command::Recommend(a) => {
                a.schedule.apply(&mut s);
                a.sampler.apply(&mut s);
                s.set_opt("checkpoint", path_str(&a.checkpoint));
                s.set_opt("history", a.history.as_ref());
                s.set_opt("history_file", path_str(&a.history_file));
                s.set_opt("k", a.k);
                s.set_opt("user_index", a.user_index);
                s.set_opt("seed", a.seed);
                recommend(&s)
            }
            Command::Verify(a) => {
                s.set_opt("quick", a.quick);
                s.set_opt("perturb_sigma2", a.perturb_sigma2);
                s.set_opt("seed", a.seed);
                s.set_opt("out", path_str(&a.out));
                verify(&s)
            }
            Command::Sweep(a) => {
                a.synth.apply(&mut s);
                a.schedule.apply(&mut s);
                a.sampler.apply(&mut s);
                a.train.apply(&mut s);
                s.set_opt("data", path_str(&a.data));
                s.set_opt("kinds", a.kinds.as_ref());
                s.set_opt("modes", a.modes.as_ref());
                s.set_opt("beta1_list", a.beta1_list.as_ref());
                s.set_opt("seed", a.seed);
                s.set_opt("out", path_str(&a.out));
                sweep(&s)
            }
        }
    }
}

fn synth(s: &Settings) -> Result<()> {
    let spec = s.synthetic()?;
    report_seed(spec.seed);
    let dataset = spec.generate().map_err(Error::contract)?;
    emit(s, &dataset.to_text())?;
    eprintln!("{} users, {} items", dataset.num_users(), dataset.num_items());
    Ok(())
}

fn load_dataset(s: &Settings) -> Result<bridgerec_core::data::Dataset> {
    let ingested = io::read_dataset(&required(s, "data")?)?;
    if !ingested.dropped.is_empty() {
        eprintln!("warning: dropped {} users with too few interactions", ingested.dropped.len());
    }
    Ok(ingested.dataset)
}

fn train(s: &Settings) -> Result<()> {
    let config = s.train()?;
    report_seed(config.seed);
    let out = required(s, "out")?;
    let dataset = load_dataset(s)?;
    let split = dataset.split();
    let vectors = if !config.con_mode {
        None
    } else if let Some(p) = s.raw("user_embeddings") {
        let e = io::read_user_embeddings(Path::new(p), &dataset)?;
        if !e.ignored.is_empty() {
            eprintln!("warning: ignored embeddings for {} unknown users", e.ignored.len());
        }
        Some(e.vectors)
    } else {
        Some(svd_user_vectors(&dataset, s.get_or("svd_rank", 64)?, config.seed))
    };
    let hook = Box::new(|l: &EpochLog| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  valid HR@10 {:>7.3}  NDCG@10 {:>7.3}{}",
            l.epoch + 1,
            l.mean_loss,
            l.valid.hr10,
            l.valid.ndcg10,
            if l.improved { "  *" } else { "" }
        )
    });
    let result = fit(&split, &config, vectors.as_ref(), &Parallel, Some(hook)).map_err(Error::contract)?;
    if result.stopped_early {
        eprintln!("stopped early: no improvement for {} epochs", config.patience);
    }
    io::write_checkpoint(&out, &result.checkpoint(&config))?;
    println!(
        "best epoch {}  valid HR@10 {:.3}  NDCG@10 {:.3}  -> {}",
        result.best_epoch + 1,
        result.best_valid.hr10,
        result.best_valid.ndcg10,
        out.display()
    );
    Ok(())
}

fn parse_stage(s: &Settings) -> Result<Stage> {
    match s.raw("stage") {
        None | Some("test") => Ok(Stage::Test),
        Some("valid" | "validation") => Ok(Stage::Valid),
        Some(v) => Err(Error::Usage(format!("stage `{v}`: expected valid or test"))),
    }
}

fn checkpoint_schedule_or_usage(ck: &bridgerec_core::checkpoint::Checkpoint) -> Result<ScheduleParams> {
    checkpoint_schedule(ck).ok_or_else(|| Error::Contract("checkpoint carries no schedule".into()))
}

fn eval(s: &Settings) -> Result<()> {
    let seed = s.seed()?;
    report_seed(seed);
    let ck = io::read_checkpoint(&required(s, "checkpoint")?)?;
    let schedule = s.schedule(checkpoint_schedule_or_usage(&ck)?)?;
    let sampler = s.sampler(SamplerConfig { rng_seed: seed, ..SamplerConfig::default() })?;
    let stage = parse_stage(s)?;
    let ingested = io::read_dataset(&required(s, "data")?)?;
    let split = ingested.dataset.split();
    let conditions = if ck.model.has_projector() { checkpoint_conditions(&ck) } else { None };
    let mut inference = Inference::new(&ck.model, schedule, sampler);
    inference.retrieval = s.retrieval()?;
    let results = parallel::evaluate(&inference, &split, stage, conditions.as_deref()).map_err(Error::contract)?;
    let report = bucket_report(&results, &split, ingested.dropped.len())
        .ok_or_else(|| Error::Contract("no users to evaluate".into()))?;
    print!("{}", report.to_table());
    let out = output_path(s);
    if let Some(dir) = &out {
        io::write_text(&dir.join("metrics.csv"), &report.to_csv())?;
        io::write_text(&dir.join("report.txt"), &report.to_table())?;
    }
    if let Some(spec) = s.raw("steps_sweep") {
        let steps: Vec<usize> =
            if spec == "default" { STEP_GRID.to_vec() } else { s.list("steps_sweep")?.unwrap_or_default() };
        if steps.contains(&0) {
            return Err(Error::Usage("steps must be positive".into()));
        }
        let mut csv = String::from("steps,hr10,ndcg10\n");
        for &n in &steps {
            let inf = Inference { sampler: SamplerConfig { steps: n, ..sampler }, ..inference };
            let r = parallel::evaluate(&inf, &split, stage, conditions.as_deref()).map_err(Error::contract)?;
            let m = bridgerec_core::metrics::MetricSet::from_ranks(r.iter().map(|r| r.rank))
                .ok_or_else(|| Error::Contract("no users to evaluate".into()))?;
            csv.push_str(&format!("{n},{:.4},{:.4}\n", m.hr10, m.ndcg10));
        }
        match &out {
            Some(dir) => io::write_text(&dir.join("steps.csv"), &csv)?,
            None => print!("{csv}"),
        }
    }
    Ok(())
}

fn parse_history(text: &str) -> Result<Vec<usize>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Contract(format!("bad item id `{t}`"))))
        .collect()
}

fn recommend(s: &Settings) -> Result<()> {
    let seed = s.seed()?;
    report_seed(seed);
    let ck = io::read_checkpoint(&required(s, "checkpoint")?)?;
    let schedule = s.schedule(checkpoint_schedule_or_usage(&ck)?)?;
    let sampler = s.sampler(SamplerConfig { rng_seed: seed, ..SamplerConfig::default() })?;
    let text = match (s.raw("history"), s.raw("history_file")) {
        (Some(h), _) => h.to_string(),
        (None, Some(p)) => io::read_text(Path::new(p))?,
        (None, None) => {
            let mut buf = String::new();
            std::io::stdin()
                .read_to_string(&mut buf)
                .map_err(|source| Error::Io { path: PathBuf::from("<stdin>"), source })?;
            buf
        }
    };
    let history = parse_history(&text)?;
    if history.is_empty() {
        return Err(Error::Contract("empty history".into()));
    }
    let v = ck.model.num_items();
    if let Some(&bad) = history.iter().find(|&&i| i >= v) {
        return Err(Error::Contract(format!("item {bad} is not in the vocabulary of {v}")));
    }
    let mut k = s.get_or("k", 10)?;
    if k > v {
        eprintln!("warning: k={k} exceeds the {v} items; returning {v}");
        k = v;
    }
    let user: Option<usize> = s.get("user_index")?;
    let condition = match user {
        None => None,
        Some(u) => {
            let all = checkpoint_conditions(&ck).ok_or_else(|| Error::Contract("checkpoint has no clusters".into()))?;
            Some(all.get(u).cloned().ok_or_else(|| Error::Contract(format!("user index {u} out of range")))?)
        }
    };
    let mut inference = Inference::new(&ck.model, schedule, sampler);
    inference.retrieval = s.retrieval()?;
    let top =
        inference.recommend(&history, condition.as_deref(), k, user.unwrap_or(0) as u64).map_err(Error::contract)?;
    for (item, score) in top {
        println!("{item}\t{score:.6}");
    }
    Ok(())
}

fn perturbed(delta: Scalar) -> impl Fn(&ScheduleParams, Scalar) -> std::result::Result<ScheduleCoeffs, ScheduleError> {
    move |p, t| {
        let mut c = p.coeffs(t)?;
        c.sigma2_t *= 1.0 + delta;
        Ok(c)
    }
}

pub fn format_outcome(c: &CheckOutcome) -> String {
    format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)
}

fn verify(s: &Settings) -> Result<()> {
    let seed = s.seed()?;
    report_seed(seed);
    let mut outcomes = match s.get::<Scalar>("perturb_sigma2")? {
        Some(d) => checks::full_suite_with(&perturbed(d), seed),
        None => checks::full_suite(seed),
    };
    let mut report = String::new();
    let line = |c: &CheckOutcome, report: &mut String| {
        let l = format_outcome(c);
        println!("{l}");
        report.push_str(&l);
        report.push('\n');
    };
    for c in &outcomes {
        line(c, &mut report);
    }
    if !s.flag("quick")? {
        let slow = experiments::experiment_suite(seed)?;
        for c in &slow {
            line(c, &mut report);
        }
        outcomes.extend(slow);
    }
    let failed = outcomes.iter().filter(|c| !c.passed).count();
    let summary = format!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    println!("{summary}");
    report.push_str(&summary);
    report.push('\n');
    if let Some(p) = output_path(s) {
        io::write_text(&p, &report)?;
    }
    if failed > 0 {
        return Err(Error::Failed(format!("{failed} checks failed")));
    }
    Ok(())
}

fn sweep(s: &Settings) -> Result<()> {
    let config = s.train()?;
    report_seed(config.seed);
    let dataset = match s.raw("data") {
        Some(_) => load_dataset(s)?,
        None => s.synthetic()?.generate().map_err(Error::contract)?,
    };
    let kinds = match s.raw("kinds") {
        None => vec![ScheduleKind::Gmax, ScheduleKind::Vp],
        Some(v) => v.split(',').map(|k| parse_kind(k.trim())).collect::<Result<_>>()?,
    };
    let modes = match s.raw("modes") {
        None => vec![SamplerMode::Sde, SamplerMode::Ode],
        Some(v) => v.split(',').map(|m| parse_mode(m.trim())).collect::<Result<_>>()?,
    };
    let beta1s = s.list("beta1_list")?.unwrap_or_else(|| vec![config.schedule.beta1]);
    if kinds.is_empty() || modes.is_empty() || beta1s.is_empty() {
        return Err(Error::Usage("empty sweep grid".into()));
    }
    let rows = experiments::sweep(&dataset.split(), &config, &kinds, &beta1s, &modes)?;
    emit(s, &experiments::sweep_csv(&rows))
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match cli.execute() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
