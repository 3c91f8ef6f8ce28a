//! Command definitions and their implementations.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use matchmarket::sim::{self, PairOutcome, StudyConfig, StudyKind, PAYOFF_BINS};
use matchmarket::{
    competition_sweep, empirical_poa, greedy_online, kkt_residual, online_poa_empirical, solve_fair, solve_selfish,
    theorem1_bound, trial_seed, ArrivalSequence, BehaviorModel, EmpiricalPoAReport, InstanceSampler, ModelError,
    PoaError, ReturnModel, Stationary, WeightDistribution,
};
use serde::{Deserialize, Serialize};

use crate::io::{self, fmt_opt, fmt_sig};
use crate::manifest::RunDir;
use crate::svg::{Plot, Series};

/// `println!` that ignores a closed stdout.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Failure with a specific process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn failure(code: i32, message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Failure { code, message: message.into() })
}

/// Tolerance on ratios checked against the analytic bound.
pub const BOUND_TOL: f64 = 1e-6;
/// Tolerance on ratios checked against 1.
pub const UNIT_TOL: f64 = 1e-7;

#[derive(Debug, Parser)]
#[command(
    name = "matchmarket",
    version,
    about = "Fair vs. engagement-maximizing matching: bounds, solvers and simulations"
)]
pub struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: runs/<command>-seed<seed>).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for parallel trial batches.
    #[arg(long, global = true, env = "MATCHMARKET_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analytic lower bound on the price of anarchy.
    Bound(BoundArgs),
    /// Solve one instance.
    Match(MatchArgs),
    /// Sample a random instance.
    Sample(SampleArgs),
    /// Empirical price of anarchy over random instances.
    Poa(PoaArgs),
    /// Empirical price of anarchy under competition for several eps.
    Sweep(SweepArgs),
    /// Empirical price of anarchy of the greedy online policy.
    Online(OnlineArgs),
    /// Simulate the slot-machine study.
    Sim(SimArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Bound(_) => "bound",
            Command::Match(_) => "match",
            Command::Sample(_) => "sample",
            Command::Poa(_) => "poa",
            Command::Sweep(_) => "sweep",
            Command::Online(_) => "online",
            Command::Sim(_) => "sim",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Parametric return model q(u) = u (1 - u)^(1 - alpha), alpha in [0, 1).
    #[arg(long, conflicts_with = "model")]
    pub alpha: Option<f64>,
    /// JSON return model: {"alpha": x} or an array of 21 grid values.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

impl ModelArgs {
    fn given(&self) -> bool {
        self.alpha.is_some() || self.model.is_some()
    }

    fn resolve(&self) -> Result<ReturnModel> {
        match (&self.model, self.alpha) {
            (Some(path), _) => io::read_json(path),
            (None, a) => Ok(ReturnModel::parametric(a.unwrap_or(0.0))?),
        }
    }
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of side-M users sharing the model.
    #[arg(long, default_value_t = 1)]
    pub users: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MatchMode {
    Fair,
    Selfish,
    Online,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Instance CSV: one row per side-M user, no header.
    pub instance: PathBuf,
    #[arg(long, value_enum, default_value_t = MatchMode::Fair)]
    pub mode: MatchMode,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Use the competition chain with this return probability.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Arrival order for online mode, e.g. 2,0,1 (default: row order).
    #[arg(long, value_delimiter = ',')]
    pub order: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Beta parameters a,b of the weights.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [2.0, 2.0])]
    pub beta: Vec<f64>,
    /// Draw weights uniformly instead.
    #[arg(long, conflicts_with = "beta")]
    pub uniform: bool,
    /// Which trial stream of the seed to use.
    #[arg(long, default_value_t = 0)]
    pub trial: u64,
}

#[derive(Debug, Args)]
pub struct TrialArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Beta parameters a,b of the weights.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct PoaArgs {
    #[command(flatten)]
    pub common: TrialArgs,
    /// Use the competition chain with this return probability.
    #[arg(long)]
    pub eps: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: TrialArgs,
    /// Comma separated list of eps values.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct OnlineArgs {
    #[command(flatten)]
    pub common: TrialArgs,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// JSON config file with optional "config", "behavior" and "pairs" keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub study: Option<StudyKind>,
    /// Number of paired seeds.
    #[arg(long)]
    pub pairs: Option<usize>,
}

fn default_distribution() -> WeightDistribution {
    WeightDistribution::Beta { a: 2.0, b: 2.0 }
}

/// Configuration shared by the `poa`, `sweep` and `online` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub alpha: Option<f64>,
    pub model: Option<ReturnModel>,
    pub m: usize,
    pub n: usize,
    pub trials: usize,
    pub distribution: WeightDistribution,
    /// Competition return probability (`poa` only).
    pub eps: Option<f64>,
    /// Sweep values (`sweep` only).
    pub eps_list: Vec<f64>,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            alpha: None,
            model: None,
            m: 5,
            n: 5,
            trials: 500,
            distribution: default_distribution(),
            eps: None,
            eps_list: vec![0.5, 0.1, 0.01, 0.001],
        }
    }
}

impl TrialConfig {
    fn load(args: &TrialArgs) -> Result<Self> {
        let mut c: TrialConfig = match &args.config {
            Some(path) => io::read_json(path).map_err(|e| failure(1, format!("{e:#}")))?,
            None => TrialConfig::default(),
        };
        if args.model.given() {
            c.alpha = args.model.alpha;
            c.model = args.model.model.as_deref().map(io::read_json).transpose()?;
        }
        if let Some(v) = args.m {
            c.m = v;
        }
        if let Some(v) = args.n {
            c.n = v;
        }
        if let Some(v) = args.trials {
            c.trials = v;
        }
        if let Some(b) = &args.beta {
            c.distribution = WeightDistribution::Beta { a: b[0], b: b[1] };
        }
        if c.alpha.is_some() && c.model.is_some() {
            bail!(failure(1, "config sets both \"alpha\" and \"model\""));
        }
        if c.m == 0 || c.n == 0 {
            bail!(failure(1, "m and n must be positive"));
        }
        Ok(c)
    }

    fn return_model(&self) -> Result<ReturnModel> {
        match &self.model {
            Some(m) => Ok(m.clone()),
            None => Ok(ReturnModel::parametric(self.alpha.unwrap_or(0.0))?),
        }
    }
}

/// JSON config of the `sim` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimFile {
    pub config: StudyConfig,
    pub behavior: BehaviorModel,
    pub pairs: usize,
}

impl Default for SimFile {
    fn default() -> Self {
        Self { config: StudyConfig::default(), behavior: BehaviorModel::default(), pairs: 200 }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            bail!(failure(1, "--threads must be positive"));
        }
        // Fails only if a pool already exists, which then keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let name = cli.command.name();
    let out_dir =
        |seed: u64| cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(format!("{name}-seed{seed}")));
    match &cli.command {
        Command::Bound(a) => cmd_bound(a, &out_dir(0)),
        Command::Match(a) => cmd_match(a, &out_dir(0)),
        Command::Sample(a) => {
            let seed = cli.seed.unwrap_or(0);
            cmd_sample(a, seed, &out_dir(seed))
        }
        Command::Poa(a) => {
            let seed = cli.seed.unwrap_or(0);
            cmd_poa(a, seed, &out_dir(seed))
        }
        Command::Sweep(a) => {
            let seed = cli.seed.unwrap_or(0);
            cmd_sweep(a, seed, &out_dir(seed))
        }
        Command::Online(a) => {
            let seed = cli.seed.unwrap_or(0);
            cmd_online(a, seed, &out_dir(seed))
        }
        Command::Sim(a) => cmd_sim(a, cli.seed, &out_dir),
    }
}

fn model_failure(e: anyhow::Error) -> anyhow::Error {
    match e.downcast_ref::<ModelError>() {
        Some(m) => failure(2, format!("invalid return model: {m}")),
        None => e,
    }
}

pub fn cmd_bound(args: &BoundArgs, dir: &Path) -> Result<()> {
    if args.users == 0 {
        bail!(failure(1, "--users must be at least 1"));
    }
    let model = args.model.resolve().map_err(model_failure)?;
    let models = vec![model.clone(); args.users];
    let report = match theorem1_bound(&models) {
        Ok(r) => r,
        Err(PoaError::Assumptions { index, report }) => {
            let detail = serde_json::to_string_pretty(&report)?;
            bail!(failure(2, format!("return model {index} violates the assumptions:\n{detail}")));
        }
        Err(PoaError::Model(e)) => bail!(failure(2, format!("invalid return model: {e}"))),
        Err(e) => bail!(failure(2, e.to_string())),
    };
    out!("u_bar = {}", fmt_sig(report.l));
    out!("c = {}", fmt_sig(report.c));
    out!("L = {}", fmt_sig(report.l));
    out!("bound = {}", fmt_sig(report.bound));

    let mut run = RunDir::create(dir, "bound", 0)?;
    #[derive(Serialize)]
    struct BoundOut<'a> {
        model: &'a ReturnModel,
        users: usize,
        report: &'a matchmarket::PoABoundReport,
    }
    let out = BoundOut { model: &model, users: args.users, report: &report };
    run.hash_input(&serde_json::to_vec(&(&model, args.users))?);
    io::write_json(&run.output("bound.json"), &out)?;
    run.finish()?;
    Ok(())
}

pub fn cmd_match(args: &MatchArgs, dir: &Path) -> Result<()> {
    let bytes = std::fs::read(&args.instance)
        .map_err(|e| failure(1, format!("cannot read instance {}: {e}", args.instance.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| failure(1, "instance is not UTF-8"))?;
    let inst = io::parse_instance_csv(&text)
        .map_err(|e| failure(1, format!("malformed instance {}: {e:#}", args.instance.display())))?;
    let meta = io::read_sidecar(&args.instance).map_err(|e| failure(1, format!("{e:#}")))?;
    if let Some(meta) = &meta {
        if (meta.m, meta.n) != (inst.m(), inst.n()) {
            bail!(failure(1, format!("sidecar says {}x{}, instance is {}x{}", meta.m, meta.n, inst.m(), inst.n())));
        }
    }
    let model = args.model.resolve().map_err(model_failure)?;
    let models = vec![model.clone(); inst.m()];
    let stationary = match args.eps {
        Some(eps) => Stationary::Competition { eps },
        None => Stationary::Monopoly,
    };

    #[derive(Serialize)]
    struct Solution {
        mode: &'static str,
        stationary: Stationary,
        /// Objective of the chosen mode.
        value: f64,
        total_utility: f64,
        fw_gap: Option<f64>,
        iterations: Option<usize>,
        solver: Option<matchmarket::SolveMode>,
        kkt: Option<matchmarket::KktReport>,
    }
    let (matching, solution) = match args.mode {
        MatchMode::Fair => {
            let sol = solve_fair(&inst);
            let s = Solution {
                mode: "fair",
                stationary,
                value: sol.value,
                total_utility: sol.value,
                fw_gap: None,
                iterations: None,
                solver: None,
                kkt: None,
            };
            (sol.matching, s)
        }
        MatchMode::Selfish => {
            let sol = solve_selfish(&inst, &models, stationary)?;
            let kkt = sol.multipliers.as_ref().map(|_| kkt_residual(&inst, &models, &sol)).transpose()?;
            let s = Solution {
                mode: "selfish",
                stationary,
                value: sol.value,
                total_utility: sol.matching.total_utility(),
                fw_gap: Some(sol.fw_gap),
                iterations: Some(sol.iterations),
                solver: Some(sol.mode),
                kkt,
            };
            (sol.matching, s)
        }
        MatchMode::Online => {
            let seq = match &args.order {
                Some(order) => ArrivalSequence::new(inst.clone(), order.clone())
                    .map_err(|e| failure(1, format!("--order: {e}")))?,
                None => ArrivalSequence::in_order(inst.clone()),
            };
            let out = greedy_online(&seq, &models, stationary)?;
            let s = Solution {
                mode: "online",
                stationary,
                value: out.objective,
                total_utility: out.value,
                fw_gap: None,
                iterations: None,
                solver: None,
                kkt: None,
            };
            (out.matching, s)
        }
    };
    out!("value = {}", fmt_sig(solution.value));
    out!("total_utility = {}", fmt_sig(solution.total_utility));
    if let Some(g) = solution.fw_gap {
        out!("fw_gap = {}", fmt_sig(g));
    }
    if let Some(k) = &solution.kkt {
        out!("kkt_max = {}", fmt_sig(k.max()));
    }

    let mut run = RunDir::create(dir, "match", 0)?;
    run.hash_input(&bytes);
    run.hash_input(&serde_json::to_vec(&(&model, stationary, format!("{:?}", args.mode), &args.order))?);
    io::write_matrix_csv(&run.output("x.csv"), matching.x().rows().into_iter().map(|r| r.to_vec()))?;
    io::write_csv(
        &run.output("utilities.csv"),
        &["user", "u"],
        matching.u().iter().enumerate().map(|(i, &u)| vec![i.to_string(), fmt_sig(u)]),
    )?;
    io::write_json(&run.output("solution.json"), &solution)?;
    run.finish()?;
    Ok(())
}

pub fn cmd_sample(args: &SampleArgs, seed: u64, dir: &Path) -> Result<()> {
    let distribution = if args.uniform {
        WeightDistribution::Uniform
    } else {
        WeightDistribution::Beta { a: args.beta[0], b: args.beta[1] }
    };
    let sampler = InstanceSampler::new(distribution.clone(), seed).map_err(|e| failure(1, e.to_string()))?;
    let inst = sampler.sample_trial(args.trial, args.m, args.n).map_err(|e| failure(1, e.to_string()))?;
    let meta = io::InstanceMeta { m: args.m, n: args.n, distribution, seed, trial: args.trial };
    let mut run = RunDir::create(dir, "sample", seed)?;
    run.hash_input(&serde_json::to_vec(&meta)?);
    let path = run.output("instance.csv");
    io::write_instance_csv(&path, &inst)?;
    io::write_json(&run.output("instance.json"), &meta)?;
    run.finish()?;
    out!("{}", path.display());
    Ok(())
}

fn sampler_for(c: &TrialConfig, seed: u64) -> Result<InstanceSampler> {
    InstanceSampler::new(c.distribution.clone(), seed).map_err(|e| failure(1, e.to_string()))
}

/// Analytic bound when it applies (monopoly chain, concave model).
fn applicable_bound(model: &ReturnModel, users: usize, stationary: Stationary) -> Option<f64> {
    match stationary {
        Stationary::Monopoly => theorem1_bound(&vec![model.clone(); users]).ok().map(|r| r.bound),
        Stationary::Competition { .. } => None,
    }
}

#[derive(Debug, Serialize)]
struct RatioSummary {
    trials: usize,
    degenerate: usize,
    min_ratio: f64,
    mean_ratio: f64,
    bound: Option<f64>,
    below_bound: usize,
    above_one: usize,
}

impl RatioSummary {
    fn new(r: &EmpiricalPoAReport, bound: Option<f64>, bound_tol: f64) -> Self {
        let ratios = r.ratios();
        Self {
            trials: r.trials,
            degenerate: r.degenerate,
            min_ratio: r.min_ratio,
            mean_ratio: r.mean_ratio,
            bound,
            below_bound: bound.map_or(0, |b| ratios.iter().filter(|&&x| x < b - bound_tol).count()),
            above_one: ratios.iter().filter(|&&x| x > 1.0 + UNIT_TOL).count(),
        }
    }

    fn print(&self) {
        out!("trials = {} (degenerate {})", self.trials, self.degenerate);
        out!("min_ratio = {}", fmt_sig(self.min_ratio));
        out!("mean_ratio = {}", fmt_sig(self.mean_ratio));
        if let Some(b) = self.bound {
            out!("bound = {}", fmt_sig(b));
            out!("below_bound = {}", self.below_bound);
        }
        out!("above_one = {}", self.above_one);
    }
}

fn ratio_plot(title: &str, r: &EmpiricalPoAReport, bound: Option<f64>) -> String {
    let mut plot = Plot::new(title, "trial", "utility ratio");
    let pts = r.records.iter().filter_map(|t| t.ratio.map(|x| (t.trial as f64, x))).collect();
    plot.series.push(Series::scatter("ratio", pts));
    plot.hlines.push((1.0, "1".into()));
    if let Some(b) = bound {
        plot.hlines.push((b, "bound".into()));
    }
    plot.render()
}

pub fn cmd_poa(args: &PoaArgs, seed: u64, dir: &Path) -> Result<()> {
    let mut c = TrialConfig::load(&args.common)?;
    if args.eps.is_some() {
        c.eps = args.eps;
    }
    let model = c.return_model().map_err(model_failure)?;
    let stationary = match c.eps {
        Some(eps) => Stationary::Competition { eps },
        None => Stationary::Monopoly,
    };
    let sampler = sampler_for(&c, seed)?;
    let models = vec![model.clone(); c.m];
    let report = empirical_poa(&models, &sampler, c.m, c.n, c.trials, stationary)?;
    let summary = RatioSummary::new(&report, applicable_bound(&model, c.m, stationary), BOUND_TOL);
    summary.print();

    let mut run = RunDir::create(dir, "poa", seed)?;
    run.hash_input(&serde_json::to_vec(&c)?);
    io::write_csv(
        &run.output("trials.csv"),
        &["trial", "seed", "fair_value", "selfish_value", "ratio"],
        report.records.iter().map(|t| {
            vec![
                t.trial.to_string(),
                trial_seed(seed, t.trial).to_string(),
                fmt_sig(t.fair_value),
                fmt_sig(t.selfish_value),
                fmt_opt(t.ratio),
            ]
        }),
    )?;
    io::write_json(&run.output("summary.json"), &summary)?;
    run.write_text("ratios.svg", &ratio_plot("Selfish / fair utility", &report, summary.bound))?;
    run.finish()?;
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs, seed: u64, dir: &Path) -> Result<()> {
    let mut c = TrialConfig::load(&args.common)?;
    if args.common.trials.is_none() && args.common.config.is_none() {
        c.trials = 200;
    }
    if let Some(eps) = &args.eps {
        c.eps_list = eps.clone();
    }
    if c.eps_list.is_empty() {
        bail!(failure(1, "eps list is empty"));
    }
    let model = c.return_model().map_err(model_failure)?;
    let sampler = sampler_for(&c, seed)?;
    let models = vec![model; c.m];
    let points =
        competition_sweep(&models, &sampler, c.m, c.n, c.trials, &c.eps_list).map_err(|e| failure(1, e.to_string()))?;

    let mut sorted: Vec<(f64, f64)> = points.iter().map(|(e, r)| (*e, r.min_ratio)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let monotone = sorted.windows(2).all(|w| w[1].1 >= w[0].1);
    out!("eps,min_ratio,mean_ratio");
    for (eps, r) in &points {
        out!("{},{},{}", fmt_sig(*eps), fmt_sig(r.min_ratio), fmt_sig(r.mean_ratio));
    }
    out!("min_ratio nondecreasing as eps decreases: {monotone}");

    let mut run = RunDir::create(dir, "sweep", seed)?;
    run.hash_input(&serde_json::to_vec(&c)?);
    io::write_csv(
        &run.output("sweep.csv"),
        &["eps", "min_ratio", "mean_ratio"],
        points.iter().map(|(e, r)| vec![fmt_sig(*e), fmt_sig(r.min_ratio), fmt_sig(r.mean_ratio)]),
    )?;
    #[derive(Serialize)]
    struct SweepSummary {
        eps: Vec<f64>,
        min_ratio: Vec<f64>,
        mean_ratio: Vec<f64>,
        min_ratio_nondecreasing: bool,
    }
    let summary = SweepSummary {
        eps: points.iter().map(|p| p.0).collect(),
        min_ratio: points.iter().map(|p| p.1.min_ratio).collect(),
        mean_ratio: points.iter().map(|p| p.1.mean_ratio).collect(),
        min_ratio_nondecreasing: monotone,
    };
    io::write_json(&run.output("summary.json"), &summary)?;
    let mut plot = Plot::new("Empirical price of anarchy under competition", "eps", "utility ratio");
    plot.log_x = true;
    plot.series.push(Series::line("min", sorted.clone()));
    let mut means: Vec<(f64, f64)> = points.iter().map(|(e, r)| (*e, r.mean_ratio)).collect();
    means.sort_by(|a, b| b.0.total_cmp(&a.0));
    plot.series.push(Series::line("mean", means));
    run.write_text("sweep.svg", &plot.render())?;
    run.finish()?;
    Ok(())
}

pub fn cmd_online(args: &OnlineArgs, seed: u64, dir: &Path) -> Result<()> {
    let c = TrialConfig::load(&args.common)?;
    let model = c.return_model().map_err(model_failure)?;
    let sampler = sampler_for(&c, seed)?;
    let models = vec![model.clone(); c.m];
    let report = online_poa_empirical(&models, &sampler, c.m, c.n, c.trials, Stationary::Monopoly)?;
    let summary = RatioSummary::new(&report, applicable_bound(&model, c.m, Stationary::Monopoly), BOUND_TOL);
    summary.print();

    let mut run = RunDir::create(dir, "online", seed)?;
    run.hash_input(&serde_json::to_vec(&c)?);
    io::write_csv(
        &run.output("online.csv"),
        &["trial", "order_seed", "online_value", "fair_value", "ratio"],
        report.records.iter().map(|t| {
            vec![
                t.trial.to_string(),
                t.order_seed.map(|s| s.to_string()).unwrap_or_default(),
                fmt_sig(t.selfish_value),
                fmt_sig(t.fair_value),
                fmt_opt(t.ratio),
            ]
        }),
    )?;
    io::write_json(&run.output("summary.json"), &summary)?;
    run.write_text("ratios.svg", &ratio_plot("Online greedy / fair utility", &report, summary.bound))?;
    run.finish()?;
    Ok(())
}

pub fn cmd_sim(args: &SimArgs, seed: Option<u64>, out_dir: &dyn Fn(u64) -> PathBuf) -> Result<()> {
    let mut file: SimFile = match &args.config {
        Some(path) => io::read_json(path).map_err(|e| failure(1, format!("{e:#}")))?,
        None => SimFile::default(),
    };
    if let Some(s) = args.study {
        file.config.study = s;
    }
    if let Some(p) = args.pairs {
        file.pairs = p;
    }
    if let Some(s) = seed {
        file.config.seed = s;
    }
    file.config.validate().map_err(|e| failure(1, e.to_string()))?;
    file.behavior.validate().map_err(|e| failure(1, e.to_string()))?;
    let config = &file.config;
    let pairs = sim::run_batch(config, &file.behavior, file.pairs).map_err(|e| failure(1, e.to_string()))?;
    let summary = sim::summarize(config, &pairs)?;
    let hist = sim::realized_payoff_histogram(config, &pairs)?;

    out!("study {} over {} pairs", config.study.name(), summary.pairs);
    out!("mean utility: fair {} selfish {}", fmt_sig(summary.fair_mean_utility), fmt_sig(summary.selfish_mean_utility));
    out!("engagement: fair {} selfish {}", fmt_sig(summary.fair_engagement), fmt_sig(summary.selfish_engagement));
    out!("drop rate: fair {} selfish {}", fmt_sig(summary.fair_drop_rate), fmt_sig(summary.selfish_drop_rate));
    out!(
        "realized payoff: fair {} universal {} selfish {}",
        fmt_sig(hist.fair_mean),
        fmt_sig(hist.universal_mean),
        fmt_sig(hist.selfish_mean)
    );

    let mut run = RunDir::create(&out_dir(config.seed), "sim", config.seed)?;
    run.hash_input(&serde_json::to_vec(&file)?);
    write_sim_outputs(&mut run, config, &pairs, &summary, &hist)?;
    run.finish()?;
    Ok(())
}

fn write_sim_outputs(
    run: &mut RunDir,
    config: &StudyConfig,
    pairs: &[PairOutcome],
    s: &sim::StudySummary,
    hist: &sim::PayoffHistogram,
) -> Result<()> {
    io::write_csv(
        &run.output("metrics.csv"),
        &[
            "study",
            "pairs",
            "fair_mean_utility",
            "selfish_mean_utility",
            "utility_gap",
            "fair_engagement",
            "selfish_engagement",
            "fair_drop_rate",
            "selfish_drop_rate",
            "drop_diff_positive",
            "drop_diff_negative",
            "drop_diff_zero",
            "fair_realized_mean",
            "selfish_realized_mean",
            "universal_mean",
            "poa_min",
            "poa_mean",
            "poa_max",
            "pairs_with_poa_above_one",
        ],
        [vec![
            s.study.name().to_string(),
            s.pairs.to_string(),
            fmt_sig(s.fair_mean_utility),
            fmt_sig(s.selfish_mean_utility),
            fmt_sig(s.utility_gap),
            fmt_sig(s.fair_engagement),
            fmt_sig(s.selfish_engagement),
            fmt_sig(s.fair_drop_rate),
            fmt_sig(s.selfish_drop_rate),
            s.drop_diff_positive.to_string(),
            s.drop_diff_negative.to_string(),
            s.drop_diff_zero.to_string(),
            fmt_sig(s.fair_realized_mean),
            fmt_sig(s.selfish_realized_mean),
            fmt_sig(s.universal_mean),
            fmt_opt(s.poa_min),
            fmt_opt(s.poa_mean),
            fmt_opt(s.poa_max),
            s.pairs_with_poa_above_one.to_string(),
        ]],
    )?;
    io::write_json(&run.output("summary.json"), s)?;

    io::write_csv(
        &run.output("pairs.csv"),
        &[
            "seed",
            "fair_utility",
            "selfish_utility",
            "fair_engagement",
            "selfish_engagement",
            "fair_drop_rate",
            "selfish_drop_rate",
            "poa_min",
            "poa_mean",
            "poa_max",
            "rounds_above_one",
        ],
        pairs.iter().map(|p| {
            vec![
                p.seed.to_string(),
                fmt_sig(p.fair.mean_utility()),
                fmt_sig(p.selfish.mean_utility()),
                fmt_sig(p.fair.engagement()),
                fmt_sig(p.selfish.engagement()),
                fmt_sig(p.fair.drop_rate()),
                fmt_sig(p.selfish.drop_rate()),
                fmt_opt(p.poa.min),
                fmt_opt(p.poa.mean),
                fmt_opt(p.poa.max),
                p.poa.rounds_above_one.to_string(),
            ]
        }),
    )?;

    let conditions = |p: &PairOutcome| [(p.seed, p.fair.clone()), (p.seed, p.selfish.clone())];
    io::write_csv(
        &run.output("rounds.csv"),
        &[
            "seed",
            "condition",
            "round",
            "active",
            "continue",
            "rematch",
            "exit",
            "engagement",
            "unmatched",
            "welfare",
            "poa",
        ],
        pairs.iter().flat_map(|p| {
            conditions(p).into_iter().flat_map(move |(seed, c)| {
                c.rounds
                    .iter()
                    .map(|r| {
                        vec![
                            seed.to_string(),
                            c.condition.name().to_string(),
                            r.round.to_string(),
                            r.active.to_string(),
                            r.continues.to_string(),
                            r.rematches.to_string(),
                            r.exits.to_string(),
                            fmt_sig(r.engagement),
                            r.unmatched.to_string(),
                            fmt_sig(r.welfare),
                            fmt_opt(p.poa.per_round[r.round - 1]),
                        ]
                    })
                    .collect::<Vec<_>>()
            })
        }),
    )?;

    io::write_csv(
        &run.output("log.csv"),
        &["seed", "condition", "round", "player", "action", "slot", "payoff"],
        pairs.iter().flat_map(|p| {
            conditions(p).into_iter().flat_map(move |(seed, c)| {
                c.log
                    .iter()
                    .map(|l| {
                        vec![
                            seed.to_string(),
                            c.condition.name().to_string(),
                            l.round.to_string(),
                            l.player.to_string(),
                            l.action.name().to_string(),
                            l.slot.map(|s| s.to_string()).unwrap_or_default(),
                            fmt_sig(l.payoff),
                        ]
                    })
                    .collect::<Vec<_>>()
            })
        }),
    )?;

    let mut q_header = vec!["seed".to_string(), "round".to_string()];
    q_header.extend((0..matchmarket::models::GRID_NODES).map(|k| format!("q{k}")));
    let q_header: Vec<&str> = q_header.iter().map(String::as_str).collect();
    io::write_csv(
        &run.output("learned_q.csv"),
        &q_header,
        pairs.iter().flat_map(|p| {
            p.selfish.rounds.iter().filter_map(move |r| {
                r.q_snapshot.as_ref().map(|q| {
                    let mut row = vec![p.seed.to_string(), r.round.to_string()];
                    row.extend(q.iter().map(|&v| fmt_sig(v)));
                    row
                })
            })
        }),
    )?;

    io::write_csv(
        &run.output("histogram.csv"),
        &["payoff_lo", "payoff_hi", "fair", "selfish", "universal"],
        (0..PAYOFF_BINS).map(|b| {
            vec![
                fmt_sig(hist.edges[b]),
                fmt_sig(hist.edges[b + 1]),
                hist.fair[b].to_string(),
                hist.selfish[b].to_string(),
                hist.universal[b].to_string(),
            ]
        }),
    )?;

    let rounds = config.rounds;
    let per_round = |f: &dyn Fn(&PairOutcome, usize) -> f64| -> Vec<(f64, f64)> {
        (0..rounds).map(|r| ((r + 1) as f64, pairs.iter().map(|p| f(p, r)).sum::<f64>() / pairs.len() as f64)).collect()
    };
    let players = config.players as f64;
    let mut utility = Plot::new("Mean payment per round", "round", "cents per player");
    utility.series.push(Series::line("fair", per_round(&|p, r| p.fair.rounds[r].welfare / players)));
    utility.series.push(Series::line("selfish", per_round(&|p, r| p.selfish.rounds[r].welfare / players)));
    utility.hlines.push((config.outside_per_round, "outside option".into()));
    run.write_text("utility.svg", &utility.render())?;

    let mut engagement = Plot::new("Engagement rate per round", "round", "share requesting a new match");
    let eng = |c: &sim::ConditionOutcome, r: usize| c.rounds[r].engagement;
    engagement.series.push(Series::line("fair", per_round(&|p, r| eng(&p.fair, r)).split_off(1)));
    engagement.series.push(Series::line("selfish", per_round(&|p, r| eng(&p.selfish, r)).split_off(1)));
    run.write_text("engagement.svg", &engagement.render())?;

    let exited_by =
        |c: &sim::ConditionOutcome, r: usize| c.rounds[..=r].iter().map(|s| s.exits).sum::<usize>() as f64 / players;
    let mut drop = Plot::new("Cumulative drop rate", "round", "share taking the outside option");
    drop.series.push(Series::line("fair", per_round(&|p, r| exited_by(&p.fair, r))));
    drop.series.push(Series::line("selfish", per_round(&|p, r| exited_by(&p.selfish, r))));
    run.write_text("drop.svg", &drop.render())?;

    let mut poa = Plot::new("Per-pair welfare ratio selfish / fair", "pair", "ratio");
    let series = |f: &dyn Fn(&PairOutcome) -> Option<f64>| {
        pairs.iter().enumerate().filter_map(|(k, p)| f(p).map(|v| (k as f64, v))).collect::<Vec<_>>()
    };
    poa.series.push(Series::scatter("min", series(&|p| p.poa.min)));
    poa.series.push(Series::scatter("mean", series(&|p| p.poa.mean)));
    poa.series.push(Series::scatter("max", series(&|p| p.poa.max)));
    poa.hlines.push((1.0, "1".into()));
    run.write_text("poa.svg", &poa.render())?;
    Ok(())
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    e.downcast_ref::<Failure>().map_or(1, |f| f.code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn trial_config_rejects_unknown_keys() {
        let err = serde_json::from_str::<TrialConfig>(r#"{"m": 3, "trails": 10}"#).unwrap_err();
        assert!(err.to_string().contains("trails"), "{err}");
        let err = serde_json::from_str::<SimFile>(r#"{"config": {"slot": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("slot"), "{err}");
    }

    #[test]
    fn config_values_are_overridden_by_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"m": 3, "n": 4, "trials": 7, "alpha": 0.5}"#).unwrap();
        let args = TrialArgs {
            config: Some(path),
            model: ModelArgs { alpha: None, model: None },
            m: None,
            n: Some(6),
            trials: None,
            beta: Some(vec![1.0, 2.0]),
        };
        let c = TrialConfig::load(&args).unwrap();
        assert_eq!((c.m, c.n, c.trials, c.alpha), (3, 6, 7, Some(0.5)));
        assert_eq!(c.distribution, WeightDistribution::Beta { a: 1.0, b: 2.0 });
    }
}
