use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ctbn_meanfield::density::expected_stats;
use ctbn_meanfield::io::{self, fmt_f64, to_json, SCHEMA_VERSION};
use ctbn_meanfield::meanfield::{run_mean_field, MeanFieldConfig, MeanFieldResult, RootMode};
use ctbn_meanfield::model::{build_ising_chain, CtbnModel, Evidence, DEFAULT_JOINT_CAP};
use ctbn_meanfield::ode::IntegratorConfig;
use ctbn_meanfield::oracle::{exact_posterior_for, project_component_marginal, ExactPosterior, OracleConfig};
use ctbn_meanfield::stats::{relative_error, ModelStats, RelativeError};
use ctbn_meanfield::tree::{exact_tree_oracle_for, run_mean_field_tree};
use ctbn_meanfield::Error;

const REFERENCE_START: [usize; 8] = [1, 1, 1, 1, 1, 1, 0, 0];
const REFERENCE_END: [usize; 8] = [0, 0, 0, 1, 1, 1, 1, 1];
const REFERENCE_T: f64 = 0.64;

#[derive(Parser)]
#[command(name = "ctbn-mf", version, about = "Mean-field inference for continuous-time Bayesian networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file for invariant violations.
    Validate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Exact likelihood, marginals and statistics on the joint chain.
    Exact(RunArgs),
    /// Mean-field optimization.
    Meanfield(RunArgs),
    /// Grid of mean-field runs against the exact oracle.
    Sweep(SweepArgs),
    /// Mean-field inference on a tree.
    Tree(TreeArgs),
    /// Tidy CSV of marginals and log rho ratios from a density knots file.
    Plotdata {
        #[arg(long)]
        density: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a mean-field report with an exact report.
    Compare {
        #[arg(long)]
        exact: PathBuf,
        #[arg(long)]
        meanfield: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model file; otherwise an Ising chain from --D, --beta, --tau.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "D")]
    d: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
}

impl ModelArgs {
    fn load(&self) -> anyhow::Result<CtbnModel> {
        match (&self.model, self.d) {
            (Some(path), _) => Ok(io::read_model(path)?),
            (None, Some(d)) => Ok(build_ising_chain(d, self.beta, self.tau)?),
            (None, None) => Err(usage("give --model or --D")),
        }
    }
}

#[derive(Args, Clone)]
struct EvidenceArgs {
    #[arg(long)]
    evidence: Option<PathBuf>,
    /// e0 = {+,+,+,+,+,+,-,-}, eT = {-,-,-,+,+,+,+,+}, T = 0.64.
    #[arg(long = "paper-evidence-8")]
    paper_evidence_8: bool,
    /// Observed start spins for Ising chains, e.g. "++--".
    #[arg(long, allow_hyphen_values = true)]
    start: Option<String>,
    /// Observed end spins for Ising chains.
    #[arg(long, allow_hyphen_values = true)]
    end: Option<String>,
    #[arg(long = "T")]
    horizon: Option<f64>,
}

fn parse_spins(s: &str) -> anyhow::Result<Vec<usize>> {
    s.chars()
        .map(|c| match c {
            '+' => Ok(1),
            '-' => Ok(0),
            _ => Err(usage(&format!("spin strings use '+' and '-', found {c:?}"))),
        })
        .collect()
}

impl EvidenceArgs {
    fn load(&self, model: &CtbnModel) -> anyhow::Result<Evidence> {
        let mut ev = if let Some(path) = &self.evidence {
            io::read_evidence(path, model)?
        } else if self.paper_evidence_8 {
            if model.num_components() != 8 {
                return Err(usage("--paper-evidence-8 needs an 8-component model"));
            }
            Evidence::endpoints(REFERENCE_T, &REFERENCE_START, &REFERENCE_END)
        } else if let (Some(s), Some(e)) = (&self.start, &self.end) {
            Evidence::endpoints(self.horizon.unwrap_or(1.0), &parse_spins(s)?, &parse_spins(e)?)
        } else {
            return Err(usage("give --evidence, --paper-evidence-8, or --start and --end"));
        };
        if let Some(t) = self.horizon {
            if self.evidence.is_some() && ev.components.iter().any(|c| c.trajectory.is_some()) {
                return Err(usage("--T cannot rescale evidence with trajectories"));
            }
            ev.horizon = t;
        }
        ev.validate(model)?;
        Ok(ev)
    }
}

#[derive(Args, Clone)]
struct SolverArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative free-energy change per sweep that counts as converged.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long = "max-sweeps", default_value_t = 100)]
    max_sweeps: usize,
    #[arg(long = "root-mode", default_value = "paper")]
    root_mode: RootMode,
    #[arg(long, default_value_t = 1e-6)]
    rtol: f64,
    #[arg(long, default_value_t = 1e-9)]
    atol: f64,
    #[arg(long = "joint-cap", default_value_t = DEFAULT_JOINT_CAP)]
    joint_cap: usize,
}

impl SolverArgs {
    fn config(&self) -> anyhow::Result<MeanFieldConfig> {
        let cfg = MeanFieldConfig {
            tol: self.tol,
            max_sweeps: self.max_sweeps,
            seed: self.seed,
            root_mode: self.root_mode,
            integrator: IntegratorConfig::with_tolerances(self.rtol, self.atol),
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn oracle(&self) -> OracleConfig {
        OracleConfig {
            joint_cap: self.joint_cap,
            ..Default::default()
        }
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    evidence: EvidenceArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Run the exact oracle too and report the gap and statistic errors.
    #[arg(long = "compare-exact")]
    compare_exact: bool,
    /// Times (comma separated) at which to report marginals.
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
    /// Output directory; the report goes to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0, 4.0])]
    beta: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 4.0, 8.0])]
    tau: Vec<f64>,
    #[arg(long = "D", default_value_t = 8)]
    d: usize,
    #[command(flatten)]
    evidence: EvidenceArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Seeds per cell (comma separated); defaults to --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TreeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    tree: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long = "compare-exact")]
    compare_exact: bool,
    /// Leaf ending the backbone; the deepest leaf by default.
    #[arg(long)]
    backbone: Option<String>,
    /// Samples per backbone branch in the CSV output.
    #[arg(long, default_value_t = 21)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn usage(msg: &str) -> anyhow::Error {
    anyhow!(Exit {
        code: 1,
        message: msg.to_string()
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Exit>() {
        return e.code;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::StateSpaceTooLarge { .. }) => 2,
        Some(
            Error::StepUnderflow { .. }
            | Error::NonFinite { .. }
            | Error::TooManySteps { .. }
            | Error::OutsideSpan { .. }
            | Error::QuadratureFailure { .. }
            | Error::DegenerateDensity { .. }
            | Error::ZeroLikelihood,
        ) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation failures; exit code 2 is reserved for the size cap
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Validate { model } => cmd_validate(&model),
        Command::Exact(args) => cmd_exact(&args).map(|_| 0),
        Command::Meanfield(args) => cmd_meanfield(&args).map(|_| 0),
        Command::Sweep(args) => cmd_sweep(&args).map(|_| 0),
        Command::Tree(args) => cmd_tree(&args).map(|_| 0),
        Command::Plotdata { density, out } => cmd_plotdata(&density, out.as_deref()).map(|_| 0),
        Command::Compare { exact, meanfield, out } => cmd_compare(&exact, &meanfield, out.as_deref()).map(|_| 0),
    }
}

/// Writes `text` to `dir/name`, or prints it when no directory was given.
fn emit(out: Option<&Path>, name: &str, text: &str) -> anyhow::Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            io::write_text(&dir.join(name), text)?;
        }
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
                _ => {}
            }
        }
    }
    Ok(())
}

fn cmd_validate(path: &Path) -> anyhow::Result<u8> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file = io::parse_model_file(&text)?;
    let model = match io::model_from_file(&file) {
        Ok(m) => m,
        Err(e) => {
            println!("violation: {e}");
            return Ok(1);
        }
    };
    let violations = model.validate();
    for v in &violations {
        let name = model.space().name(v.component);
        println!("violation: {v} [{name}]");
    }
    if violations.is_empty() {
        println!("ok: {} components", model.num_components());
        Ok(0)
    } else {
        Ok(1)
    }
}

fn report_times(times: &Option<Vec<f64>>, horizon: f64) -> anyhow::Result<Vec<f64>> {
    let times = times
        .clone()
        .unwrap_or_else(|| (0..=10).map(|k| horizon * k as f64 / 10.0).collect());
    if times.iter().any(|t| !(*t >= 0.0 && *t <= horizon)) {
        return Err(usage("--times must lie in [0, T]"));
    }
    Ok(times)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExactReport {
    schema_version: u32,
    kind: String,
    #[serde(rename = "T")]
    horizon: f64,
    log_likelihood: f64,
    times: Vec<f64>,
    /// `marginals[k][i]`: distribution of component `i` at `times[k]`.
    marginals: Vec<Vec<Vec<f64>>>,
    stats: ModelStats,
}

fn exact_marginals(model: &CtbnModel, post: &ExactPosterior, times: &[f64]) -> anyhow::Result<Vec<Vec<Vec<f64>>>> {
    times
        .iter()
        .map(|&t| {
            let joint = post.posterior_at(t)?;
            Ok((0..model.num_components())
                .map(|i| project_component_marginal(model, &joint, i))
                .collect())
        })
        .collect()
}

fn exact_report(model: &CtbnModel, ev: &Evidence, times: &[f64], cfg: &OracleConfig) -> anyhow::Result<ExactReport> {
    let (q, post) = exact_posterior_for(model, ev, cfg)?;
    let stats = post.sufficient_stats(&q, cfg.quad_tol)?.project(model);
    Ok(ExactReport {
        schema_version: SCHEMA_VERSION,
        kind: "exact".into(),
        horizon: ev.horizon,
        log_likelihood: post.log_likelihood(),
        times: times.to_vec(),
        marginals: exact_marginals(model, &post, times)?,
        stats,
    })
}

fn cmd_exact(args: &RunArgs) -> anyhow::Result<()> {
    let model = args.model.load()?;
    let ev = args.evidence.load(&model)?;
    let times = report_times(&args.times, ev.horizon)?;
    let report = exact_report(&model, &ev, &times, &args.solver.oracle())?;
    emit(args.out.as_deref(), "exact.json", &to_json(&report)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExactComparison {
    log_likelihood: f64,
    /// `lnP - F`, nonnegative up to numerical error.
    gap: f64,
    relative_error: RelativeError,
    max_marginal_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MeanFieldReport {
    schema_version: u32,
    kind: String,
    #[serde(rename = "T")]
    horizon: f64,
    free_energy: f64,
    energy: f64,
    entropy: f64,
    error_estimate: f64,
    initial_free_energy: f64,
    converged: bool,
    sweeps: usize,
    seed: u64,
    root_mode: RootMode,
    max_pre_clamp_gap: f64,
    slack_violations: usize,
    zero_rate_components: Vec<usize>,
    times: Vec<f64>,
    marginals: Vec<Vec<Vec<f64>>>,
    stats: ModelStats,
    exact: Option<ExactComparison>,
}

fn meanfield_marginals(res: &MeanFieldResult, times: &[f64]) -> Vec<Vec<Vec<f64>>> {
    let set = &res.density;
    times
        .iter()
        .map(|&t| {
            set.factors()
                .iter()
                .map(|f| {
                    let mut out = vec![0.0; f.card()];
                    f.eval_mu(t, t, &mut out);
                    out
                })
                .collect()
        })
        .collect()
}

fn max_marginal_diff(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn meanfield_report(
    model: &CtbnModel,
    ev: &Evidence,
    times: &[f64],
    cfg: &MeanFieldConfig,
    exact: Option<&ExactReport>,
) -> anyhow::Result<(MeanFieldReport, MeanFieldResult)> {
    let res = run_mean_field(model, ev, cfg)?;
    let stats = expected_stats(&res.density, cfg.quad_tol)?;
    let marginals = meanfield_marginals(&res, times);
    let exact = exact.map(|x| ExactComparison {
        log_likelihood: x.log_likelihood,
        gap: x.log_likelihood - res.report.total,
        relative_error: relative_error(&stats.flatten(), &x.stats.flatten()),
        max_marginal_error: max_marginal_diff(&marginals, &x.marginals),
    });
    let report = MeanFieldReport {
        schema_version: SCHEMA_VERSION,
        kind: "meanfield".into(),
        horizon: ev.horizon,
        free_energy: res.report.total,
        energy: res.report.energy,
        entropy: res.report.entropy,
        error_estimate: res.report.error_estimate,
        initial_free_energy: res.trace.initial,
        converged: res.trace.converged,
        sweeps: res.trace.sweeps,
        seed: cfg.seed,
        root_mode: cfg.root_mode,
        max_pre_clamp_gap: res.trace.diagnostics.max_pre_clamp_gap(),
        slack_violations: res.trace.diagnostics.slack_violations.len(),
        zero_rate_components: res.trace.diagnostics.zero_rate_components.clone(),
        times: times.to_vec(),
        marginals,
        stats,
        exact,
    };
    Ok((report, res))
}

fn cmd_meanfield(args: &RunArgs) -> anyhow::Result<()> {
    let model = args.model.load()?;
    let ev = args.evidence.load(&model)?;
    let times = report_times(&args.times, ev.horizon)?;
    let cfg = args.solver.config()?;
    let exact = if args.compare_exact {
        Some(exact_report(&model, &ev, &times, &args.solver.oracle())?)
    } else {
        None
    };
    let (report, res) = meanfield_report(&model, &ev, &times, &cfg, exact.as_ref())?;
    let out = args.out.as_deref();
    emit(out, "meanfield.json", &to_json(&report)?)?;
    if out.is_some() {
        let mut trace = format!("schema_version,sweep,component,free_energy\n{SCHEMA_VERSION},0,,{}\n", fmt_f64(res.trace.initial));
        for e in &res.trace.entries {
            let _ = writeln!(trace, "{SCHEMA_VERSION},{},{},{}", e.sweep, e.component, fmt_f64(e.free_energy));
        }
        emit(out, "trace.csv", &trace)?;
        emit(out, "density.json", &to_json(&io::density_knots(&res.density))?)?;
        if let Some(x) = &exact {
            emit(out, "exact.json", &to_json(x)?)?;
        }
    }
    Ok(())
}

const SWEEP_HEADER: &str = "schema_version,beta,tau,seed,D,T,relative_error_sum,relative_error_mean,included,excluded,log_likelihood,free_energy,gap,bound_holds,sweeps,converged,wall_time_s,status";

fn sweep_cell(model: &CtbnModel, ev: &Evidence, cfg: &MeanFieldConfig, oracle: &OracleConfig) -> anyhow::Result<(ExactReport, MeanFieldReport, f64)> {
    let exact = exact_report(model, ev, &[], oracle)?;
    let start = Instant::now();
    let (report, _) = meanfield_report(model, ev, &[], cfg, Some(&exact))?;
    Ok((exact, report, start.elapsed().as_secs_f64()))
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let seeds = args.seeds.clone().unwrap_or_else(|| vec![args.solver.seed]);
    if args.beta.is_empty() || args.tau.is_empty() || seeds.is_empty() {
        return Err(usage("beta, tau and seed lists must be non-empty"));
    }
    let base = args.solver.config()?;
    let oracle = args.solver.oracle();
    let probe = build_ising_chain(args.d, 1.0, 1.0)?;
    probe.space().joint_size(oracle.joint_cap)?;
    let ev = args.evidence.load(&probe)?;
    let mut cells: Vec<(f64, f64, u64)> = Vec::new();
    for &b in &args.beta {
        for &t in &args.tau {
            cells.extend(seeds.iter().map(|&s| (b, t, s)));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| anyhow!("thread pool: {e}"))?;
    let rows: Vec<String> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(beta, tau, seed)| {
                let cfg = MeanFieldConfig { seed, ..base };
                let prefix = format!("{SCHEMA_VERSION},{beta},{tau},{seed},{},{}", args.d, fmt_f64(ev.horizon));
                let cell = build_ising_chain(args.d, beta, tau)
                    .map_err(anyhow::Error::from)
                    .and_then(|m| sweep_cell(&m, &ev, &cfg, &oracle));
                match cell {
                    Ok((_, r, secs)) => {
                        let x = r.exact.as_ref().expect("sweep compares against the oracle");
                        format!(
                            "{prefix},{},{},{},{},{},{},{},{},{},{},{},ok",
                            fmt_f64(x.relative_error.sum),
                            fmt_f64(x.relative_error.mean),
                            x.relative_error.included,
                            x.relative_error.excluded,
                            fmt_f64(x.log_likelihood),
                            fmt_f64(r.free_energy),
                            fmt_f64(x.gap),
                            r.free_energy <= x.log_likelihood + 1e-5,
                            r.sweeps,
                            r.converged,
                            fmt_f64(secs),
                        )
                    }
                    Err(e) => format!("{prefix},,,,,,,,,,,,\"{}\"", format!("{e:#}").replace('"', "'")),
                }
            })
            .collect()
    });
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for r in rows {
        csv.push_str(&r);
        csv.push('\n');
    }
    emit(args.out.as_deref(), "sweep.csv", csv.trim_end())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TreeBranchReport {
    from: String,
    to: String,
    length: f64,
    stats: ModelStats,
    relative_error: Option<RelativeError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TreeReport {
    schema_version: u32,
    kind: String,
    free_energy: f64,
    converged: bool,
    sweeps: usize,
    log_likelihood: Option<f64>,
    gap: Option<f64>,
    backbone: Vec<String>,
    backbone_relative_error: Option<RelativeError>,
    branches: Vec<TreeBranchReport>,
}

fn cmd_tree(args: &TreeArgs) -> anyhow::Result<()> {
    let model = args.model.load()?;
    let (tree, ev) = io::read_tree(&args.tree, &model)?;
    let cfg = args.solver.config()?;
    let res = run_mean_field_tree(&model, &tree, &ev, &cfg)?;
    let oracle = if args.compare_exact {
        Some(exact_tree_oracle_for(&model, &tree, &ev, &args.solver.oracle())?)
    } else {
        None
    };
    let leaf = match &args.backbone {
        Some(name) => tree
            .vertex_index(name)
            .filter(|&v| tree.is_leaf(v))
            .ok_or_else(|| usage(&format!("{name:?} is not a leaf")))?,
        None => *tree
            .leaves()
            .iter()
            .max_by(|&&a, &&b| tree.depth(a).total_cmp(&tree.depth(b)))
            .expect("trees have leaves"),
    };
    let backbone = tree.path_to(leaf);
    let names = tree.names();
    let mut branches = Vec::new();
    let mut exact_stats = Vec::new();
    for b in 0..tree.branches().len() {
        let stats = res.density.branch_stats(b, cfg.quad_tol)?;
        let rel = match &oracle {
            Some((q, or)) => {
                let x = or.branches[b].sufficient_stats(q, cfg.quad_tol)?.project(&model);
                let r = relative_error(&stats.flatten(), &x.flatten());
                exact_stats.push(x);
                Some(r)
            }
            None => None,
        };
        let br = tree.branch(b);
        branches.push(TreeBranchReport {
            from: names[br.from].clone(),
            to: names[br.to].clone(),
            length: br.length,
            stats,
            relative_error: rel,
        });
    }
    let sum_over = |stats: &mut dyn Iterator<Item = Vec<f64>>| {
        stats.reduce(|mut a, b| {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            a
        })
    };
    let backbone_relative_error = oracle.as_ref().map(|_| {
        let approx = sum_over(&mut backbone.iter().map(|&b| branches[b].stats.flatten())).unwrap_or_default();
        let exact = sum_over(&mut backbone.iter().map(|&b| exact_stats[b].flatten())).unwrap_or_default();
        relative_error(&approx, &exact)
    });
    let report = TreeReport {
        schema_version: SCHEMA_VERSION,
        kind: "tree".into(),
        free_energy: res.report.total,
        converged: res.trace.converged,
        sweeps: res.trace.sweeps,
        log_likelihood: oracle.as_ref().map(|(_, o)| o.log_likelihood),
        gap: oracle.as_ref().map(|(_, o)| o.log_likelihood - res.report.total),
        backbone: std::iter::once(names[tree.root()].clone())
            .chain(backbone.iter().map(|&b| names[tree.branch(b).to].clone()))
            .collect(),
        backbone_relative_error,
        branches,
    };
    let mut csv = String::from("schema_version,branch,t_local,t,component,state,mu_approx,mu_exact\n");
    let samples = args.samples.max(2);
    for &b in &backbone {
        let br = tree.branch(b);
        let offset = tree.depth(br.from);
        for k in 0..samples {
            let s = br.length * k as f64 / (samples - 1) as f64;
            let joint = match &oracle {
                Some((_, or)) => Some(or.branches[b].posterior_at(s)?),
                None => None,
            };
            for i in 0..model.num_components() {
                let mu = res.density.density(b, i).mu_at(s);
                let exact = joint.as_ref().map(|j| project_component_marginal(&model, j, i));
                for (x, m) in mu.iter().enumerate() {
                    let e = exact.as_ref().map(|v| fmt_f64(v[x])).unwrap_or_default();
                    let _ = writeln!(
                        csv,
                        "{SCHEMA_VERSION},{b},{},{},{},{},{},{e}",
                        fmt_f64(s),
                        fmt_f64(offset + s),
                        model.space().name(i),
                        model.space().labels(i)[x],
                        fmt_f64(*m),
                    );
                }
            }
        }
    }
    let out = args.out.as_deref();
    emit(out, "tree.json", &to_json(&report)?)?;
    if out.is_some() {
        emit(out, "backbone.csv", csv.trim_end())?;
    }
    Ok(())
}

const PLOT_HEADER: &str = "schema_version,t,component,state,mu,log_rho_ratio";

fn cmd_plotdata(density: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(density).with_context(|| format!("reading {}", density.display()))?;
    let knots = io::parse_density_knots(&text)?;
    let mut csv = String::from(PLOT_HEADER);
    csv.push('\n');
    for c in &knots.components {
        for k in &c.knots {
            for (x, label) in c.states.iter().enumerate() {
                // log rho ratio against the first state
                let ratio = match (k.log_rho.get(x).copied().flatten(), k.log_rho.first().copied().flatten()) {
                    (Some(a), Some(b)) => fmt_f64(a - b),
                    _ => String::new(),
                };
                let _ = writeln!(csv, "{SCHEMA_VERSION},{},{},{label},{},{ratio}", fmt_f64(k.t), c.name, fmt_f64(k.mu[x]));
            }
        }
    }
    emit(out, "plot.csv", csv.trim_end())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CompareReport {
    schema_version: u32,
    kind: String,
    log_likelihood: f64,
    free_energy: f64,
    gap: f64,
    bound_holds: bool,
    relative_error: RelativeError,
    max_marginal_error: Option<f64>,
}

fn cmd_compare(exact: &Path, meanfield: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let x: ExactReport = serde_json::from_str(&read(exact)?).map_err(|e| usage(&format!("exact report: {e}")))?;
    let m: MeanFieldReport = serde_json::from_str(&read(meanfield)?).map_err(|e| usage(&format!("mean-field report: {e}")))?;
    if x.kind != "exact" || m.kind != "meanfield" {
        bail!(Exit {
            code: 1,
            message: "compare needs an exact report and a mean-field report".into()
        });
    }
    let report = CompareReport {
        schema_version: SCHEMA_VERSION,
        kind: "comparison".into(),
        log_likelihood: x.log_likelihood,
        free_energy: m.free_energy,
        gap: x.log_likelihood - m.free_energy,
        bound_holds: m.free_energy <= x.log_likelihood + 1e-5,
        relative_error: relative_error(&m.stats.flatten(), &x.stats.flatten()),
        max_marginal_error: (x.times == m.times).then(|| max_marginal_diff(&m.marginals, &x.marginals)),
    };
    emit(out, "compare.json", &to_json(&report)?)
}
