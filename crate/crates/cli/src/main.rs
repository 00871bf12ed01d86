//! `qtraj` — command-line driver for the trajectory simulators, the
//! convergence harness and the optimal-control solver.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use qtraj_core::continuous::{integrate_diffusive_ensemble, integrate_jump_ensemble, IntegratorConfig, DEFAULT_ODE_DT};
use qtraj_core::discrete::{simulate_chains, ChainConfig, MeasuredModel, Recording};
use qtraj_core::fluorescence::{
    integrate_fluorescence_limit, photon_statistics, simulate_fluorescence_discrete, FluorescenceModel, LaserProfile,
};
use qtraj_core::harness::{run_convergence, ConvergenceConfig, ReferenceSettings};
use qtraj_core::io;
use qtraj_core::model::{parse_model, MatrixJson, ModelJson, ObservableJson};
use qtraj_core::optimal::{brute_force_tree, evaluate_strategy_mc, exact_tree_value, hjb_backward, parse_cost};
use qtraj_core::{parse_strategy, BlochVector, Error, ModelSpec, ObservableSpec, QubitState};

const EXIT_CONFIG: u8 = 2;
const EXIT_DRIFT: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "qtraj", version, about = "Controlled quantum trajectories of a measured qubit")]
struct Cli {
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
enum Command {
    /// Discrete measurement chains.
    SimulateDiscrete(DiscreteArgs),
    /// Euler–Maruyama paths of the diffusive equation.
    SimulateDiffusive(ContinuousArgs),
    /// Thinning paths of the jump equation.
    SimulateJump(ContinuousArgs),
    /// Discrete-vs-continuous convergence study.
    Converge(ConvergeArgs),
    /// Resonance-fluorescence runs and photon statistics.
    Fluorescence(FluorescenceArgs),
    /// Backward dynamic programming for the optimal cost.
    Hjb(HjbArgs),
    /// Monte Carlo cost of a strategy (or of the grid policy).
    EvaluatePolicy(EvaluateArgs),
}

#[derive(Args, Debug, Serialize)]
struct Common {
    /// Seed; the QTRAJ_SEED environment variable overrides it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ModelArgs {
    /// Model JSON file.
    #[arg(long)]
    model: PathBuf,
    /// `diagonal` or `nondiagonal[:alpha]`; defaults to the model file's entry.
    #[arg(long)]
    obs: Option<String>,
    /// Initial state: excited, ground, mixed or bloch:x:y:z.
    #[arg(long, default_value = "excited")]
    rho0: String,
}

#[derive(Args, Debug, Serialize)]
struct DiscreteArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long)]
    strategy: String,
    /// Interactions per unit time.
    #[arg(long)]
    n: usize,
    /// Horizon.
    #[arg(long)]
    t: f64,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// Keep every k-th step (the last step is always kept).
    #[arg(long, default_value_t = 1)]
    record_every: usize,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct ContinuousArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long)]
    strategy: String,
    #[arg(long, default_value_t = DEFAULT_ODE_DT)]
    dt: f64,
    #[arg(long)]
    t: f64,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    record_every: usize,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct ConvergeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long)]
    strategy: String,
    /// Comma-separated list of n.
    #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
    n_list: Vec<usize>,
    /// Comma-separated checkpoint times.
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    times: Vec<f64>,
    #[arg(long, default_value_t = 4000)]
    samples: usize,
    /// Reference integrator step.
    #[arg(long, default_value_t = 1e-4)]
    ref_dt: f64,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum FluorescenceMode {
    Discrete,
    Limit,
}

#[derive(Args, Debug, Serialize)]
struct FluorescenceArgs {
    /// JSON with `H`, `L10`, `L20` matrices; overrides --kl/--kc.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Laser-channel decay rate (`L10 = kl σ⁻`).
    #[arg(long, default_value_t = std::f64::consts::FRAC_1_SQRT_2)]
    kl: f64,
    /// Counter-channel decay rate (`L20 = kc σ⁻`).
    #[arg(long, default_value_t = std::f64::consts::FRAC_1_SQRT_2)]
    kc: f64,
    /// const:<v>, sin:<amp>:<freq>, or a CSV table t,re,im.
    #[arg(long, default_value = "const:0")]
    laser: String,
    #[arg(long, value_enum, default_value_t = FluorescenceMode::Discrete)]
    mode: FluorescenceMode,
    /// Interactions per unit time (discrete mode).
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// RK4 step (limit mode).
    #[arg(long, default_value_t = DEFAULT_ODE_DT)]
    dt: f64,
    #[arg(long)]
    t: f64,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    record_every: usize,
    #[arg(long, default_value = "excited")]
    rho0: String,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct HjbArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    /// Cost JSON file.
    #[arg(long)]
    cost: PathBuf,
    /// Number of decision stages N.
    #[arg(long)]
    horizon: usize,
    /// Interactions per unit time of the underlying chain.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Size of the equally spaced control grid.
    #[arg(long, default_value_t = 21)]
    controls: usize,
    /// Bloch-grid spacing.
    #[arg(long, default_value_t = 0.0625)]
    delta: f64,
    /// Solve exactly on the outcome tree of --rho0.
    #[arg(long, conflicts_with = "brute_force")]
    exact_tree: bool,
    /// Enumerate every feedback strategy on the outcome tree of --rho0.
    #[arg(long)]
    brute_force: bool,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long)]
    cost: PathBuf,
    /// A strategy spec, or `hjb` for the grid-DP policy.
    #[arg(long, default_value = "hjb")]
    strategy: String,
    #[arg(long)]
    horizon: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 21)]
    controls: usize,
    #[arg(long, default_value_t = 0.0625)]
    delta: f64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

impl Command {
    fn common_mut(&mut self) -> &mut Common {
        match self {
            Command::SimulateDiscrete(a) => &mut a.common,
            Command::SimulateDiffusive(a) | Command::SimulateJump(a) => &mut a.common,
            Command::Converge(a) => &mut a.common,
            Command::Fluorescence(a) => &mut a.common,
            Command::Hjb(a) => &mut a.common,
            Command::EvaluatePolicy(a) => &mut a.common,
        }
    }
}

fn main() -> ExitCode {
    let mut cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&mut cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let drift = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numerical));
            ExitCode::from(if drift { EXIT_DRIFT } else { EXIT_CONFIG })
        }
    }
}

fn run(cli: &mut Cli) -> anyhow::Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(anyhow!("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("configuring the thread pool")?;
    }
    if let Ok(s) = std::env::var("QTRAJ_SEED") {
        cli.command.common_mut().seed = s.trim().parse().with_context(|| format!("QTRAJ_SEED='{s}' is not a u64"))?;
    }
    let out = cli.command.common_mut().out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let resolved = match &cli.command {
        Command::SimulateDiscrete(a) => simulate_discrete(a, &out)?,
        Command::SimulateDiffusive(a) => simulate_continuous(a, &out, false)?,
        Command::SimulateJump(a) => simulate_continuous(a, &out, true)?,
        Command::Converge(a) => converge(a, &out)?,
        Command::Fluorescence(a) => fluorescence(a, &out)?,
        Command::Hjb(a) => hjb(a, &out)?,
        Command::EvaluatePolicy(a) => evaluate(a, &out)?,
    };
    let run = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": &cli.command,
        "resolved": resolved,
    });
    write_json(&out.join("run.json"), &run)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_csv(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> anyhow::Result<()> {
    let mut w = create(path)?;
    f(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

fn parse_rho0(text: &str) -> anyhow::Result<QubitState> {
    Ok(match text {
        "excited" => QubitState::excited(),
        "ground" => QubitState::ground(),
        "mixed" => QubitState::maximally_mixed(),
        other => {
            let parts: Vec<&str> = other.split(':').collect();
            match parts.as_slice() {
                ["bloch", x, y, z] => {
                    let v = [x, y, z].map(|s| s.parse::<f64>());
                    let [x, y, z] = v.map(|r| r.map_err(|_| Error::Config(format!("bad Bloch vector '{other}'"))));
                    QubitState::from_bloch(BlochVector::new(x?, y?, z?))?
                }
                _ => return Err(Error::Config(format!("unknown initial state '{other}'")).into()),
            }
        }
    })
}

fn parse_obs(text: &str) -> anyhow::Result<ObservableSpec> {
    let parts: Vec<&str> = text.split(':').collect();
    Ok(match parts.as_slice() {
        ["diagonal"] => ObservableSpec::diagonal(),
        ["nondiagonal"] => ObservableSpec::nondiagonal(std::f64::consts::FRAC_PI_4)?,
        ["nondiagonal", a] => {
            ObservableSpec::nondiagonal(a.parse().map_err(|_| Error::Config(format!("bad angle in '{text}'")))?)?
        }
        _ => return Err(Error::Config(format!("unknown observable '{text}'")).into()),
    })
}

struct Loaded {
    model: ModelSpec,
    obs: Option<ObservableSpec>,
    rho0: QubitState,
    model_json: Option<ModelJson>,
}

fn load(args: &ModelArgs) -> anyhow::Result<Loaded> {
    let text = fs::read_to_string(&args.model)
        .map_err(|e| Error::Config(format!("cannot read model {}: {e}", args.model.display())))?;
    let (model, file_obs) = parse_model(&text)?;
    let obs = match &args.obs {
        Some(o) => Some(parse_obs(o)?),
        None => file_obs,
    };
    let model_json = ModelJson::from_model(&model, obs.as_ref());
    Ok(Loaded { model, obs, rho0: parse_rho0(&args.rho0)?, model_json })
}

fn require_obs(l: &Loaded) -> anyhow::Result<ObservableSpec> {
    l.obs.ok_or_else(|| Error::Config("no observable: pass --obs or set it in the model file".into()).into())
}

fn simulate_discrete(a: &DiscreteArgs, out: &Path) -> anyhow::Result<serde_json::Value> {
    let l = load(&a.model)?;
    let obs = require_obs(&l)?;
    let strategy = parse_strategy(&a.strategy, l.model.bounds)?;
    let cfg = ChainConfig::new(a.n, a.t, l.rho0).with_recording(Recording::every(a.record_every));
    let dynamics = MeasuredModel::new(&l.model, &obs);
    let trajs = simulate_chains(&dynamics, &strategy, &cfg, a.samples, a.common.seed)?;
    write_csv(&out.join("trajectories.csv"), |w| io::write_discrete(w, &trajs))?;
    Ok(json!({
        "seed": a.common.seed,
        "model": l.model_json,
        "observable": ObservableJson::from_spec(&obs),
        "rho0": l.rho0,
        "steps": cfg.steps(),
    }))
}

fn simulate_continuous(a: &ContinuousArgs, out: &Path, jump: bool) -> anyhow::Result<serde_json::Value> {
    let l = load(&a.model)?;
    let strategy = parse_strategy(&a.strategy, l.model.bounds)?;
    let cfg = IntegratorConfig::new(a.dt, a.t, l.rho0).with_record_every(a.record_every);
    let seed = a.common.seed;
    if jump {
        let paths = integrate_jump_ensemble(&l.model, &strategy, &cfg, a.samples, seed)?;
        write_csv(&out.join("trajectories.csv"), |w| io::write_jump(w, &paths))?;
        write_csv(&out.join("jumps.csv"), |w| io::write_jump_times(w, &paths))?;
        let bound = paths.first().map(|p| p.bound);
        Ok(json!({ "seed": seed, "model": l.model_json, "rho0": l.rho0, "steps": cfg.steps(), "dt": cfg.effective_dt(), "intensity_bound": bound }))
    } else {
        let paths = integrate_diffusive_ensemble(&l.model, &strategy, &cfg, a.samples, seed)?;
        write_csv(&out.join("trajectories.csv"), |w| io::write_diffusive(w, &paths))?;
        let repairs: usize = paths.iter().map(|p| p.repairs).sum();
        Ok(json!({ "seed": seed, "model": l.model_json, "rho0": l.rho0, "steps": cfg.steps(), "dt": cfg.effective_dt(), "soft_repairs": repairs }))
    }
}

fn converge(a: &ConvergeArgs, out: &Path) -> anyhow::Result<serde_json::Value> {
    let l = load(&a.model)?;
    let obs = require_obs(&l)?;
    let strategy = parse_strategy(&a.strategy, l.model.bounds)?;
    let cfg = ConvergenceConfig {
        n_list: a.n_list.clone(),
        times: a.times.clone(),
        samples: a.samples,
        reference: ReferenceSettings { dt: a.ref_dt },
        rho0: l.rho0,
        seed: a.common.seed,
    };
    let mut report = run_convergence(&l.model, &obs, &strategy, &cfg)?;
    report.model = a.model.model.display().to_string();
    write_json(&out.join("report.json"), &report)?;
    for (n, t, samples) in &report.raw {
        let name = if *n == 0 { format!("reference_t{t}.csv") } else { format!("samples_n{n}_t{t}.csv") };
        write_csv(&out.join(name), |w| io::write_samples(w, samples))?;
    }
    Ok(json!({ "seed": a.common.seed, "model": l.model_json, "observable": ObservableJson::from_spec(&obs), "rho0": l.rho0 }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FluorescenceJson {
    #[serde(rename = "H", default = "zero_matrix")]
    hamiltonian: MatrixJson,
    #[serde(rename = "L10")]
    l10: MatrixJson,
    #[serde(rename = "L20")]
    l20: MatrixJson,
}

fn zero_matrix() -> MatrixJson {
    MatrixJson::Named("zero".into())
}

fn fluorescence(a: &FluorescenceArgs, out: &Path) -> anyhow::Result<serde_json::Value> {
    let model = match &a.model {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let j: FluorescenceJson =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("fluorescence model: {e}")))?;
            FluorescenceModel::new(j.hamiltonian.to_matrix()?, j.l10.to_matrix()?, j.l20.to_matrix()?)?
        }
        None => FluorescenceModel::decay(a.kl, a.kc),
    };
    let laser = LaserProfile::parse(&a.laser)?;
    laser.sampled_bound(a.t)?;
    let rho0 = parse_rho0(&a.rho0)?;
    let seed = a.common.seed;
    let counts: Vec<usize> = match a.mode {
        FluorescenceMode::Discrete => {
            let cfg = ChainConfig::new(a.n, a.t, rho0).with_recording(Recording::every(a.record_every));
            let trajs = simulate_fluorescence_discrete(&model, &laser, &cfg, a.samples, seed)?;
            write_csv(&out.join("trajectories.csv"), |w| io::write_discrete(w, &trajs))?;
            if a.record_every == 1 {
                write_csv(&out.join("jumps.csv"), |w| io::write_click_times(w, &trajs))?;
            }
            trajs.iter().map(|t| t.ones).collect()
        }
        FluorescenceMode::Limit => {
            let cfg = IntegratorConfig::new(a.dt, a.t, rho0).with_record_every(a.record_every);
            let paths = integrate_fluorescence_limit(&model, &laser, &cfg, a.samples, seed)?;
            write_csv(&out.join("trajectories.csv"), |w| io::write_jump(w, &paths))?;
            write_csv(&out.join("jumps.csv"), |w| io::write_jump_times(w, &paths))?;
            paths.iter().map(|p| p.jump_count()).collect()
        }
    };
    let stats = photon_statistics(&counts)?;
    write_json(&out.join("photon_stats.json"), &stats)?;
    Ok(json!({
        "seed": seed,
        "model": { "H": MatrixJson::from_matrix(&model.hamiltonian), "L10": MatrixJson::from_matrix(&model.l10), "L20": MatrixJson::from_matrix(&model.l20) },
        "laser": format!("{laser:?}"),
        "rho0": rho0,
    }))
}

fn hjb(a: &HjbArgs, out: &Path) -> anyhow::Result<serde_json::Value> {
    let l = load(&a.model)?;
    let obs = l.obs.unwrap_or_else(ObservableSpec::diagonal);
    let cost = load_cost(&a.cost)?;
    let controls = l.model.bounds.grid(a.controls);
    let (method, value, extra) = if a.brute_force {
        let bf = brute_force_tree(&l.model, &obs, &cost, a.horizon, a.n, &controls, &l.rho0)?;
        ("brute-force", bf.value, json!({ "strategies": bf.strategies, "table": bf.table }))
    } else if a.exact_tree {
        let s = exact_tree_value(&l.model, &obs, &cost, a.horizon, a.n, &controls, &l.rho0)?;
        ("exact-tree", s.value, json!({ "first_control": s.first_control }))
    } else {
        let g = hjb_backward(&l.model, &obs, &cost, a.horizon, a.n, &controls, a.delta)?;
        write_csv(&out.join("value_grid.csv"), |w| io::write_value_grid(w, &g))?;
        let v0 = g.value(0, &l.rho0.to_bloch());
        ("grid", v0, json!({ "spacing": g.grid.spacing, "lipschitz": g.lipschitz, "interpolation_budget": g.interpolation_budget() }))
    };
    println!("V0 {}", io::fmt_f64(value));
    let result = json!({ "method": method, "value": value, "details": extra });
    write_json(&out.join("result.json"), &result)?;
    Ok(json!({ "seed": a.common.seed, "model": l.model_json, "observable": ObservableJson::from_spec(&obs), "rho0": l.rho0, "controls": controls }))
}

fn load_cost(path: &Path) -> anyhow::Result<qtraj_core::optimal::CostSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read cost {}: {e}", path.display())))?;
    Ok(parse_cost(&text)?)
}

fn evaluate(a: &EvaluateArgs, out: &Path) -> anyhow::Result<serde_json::Value> {
    let l = load(&a.model)?;
    let obs = l.obs.unwrap_or_else(ObservableSpec::diagonal);
    let cost = load_cost(&a.cost)?;
    let controls = l.model.bounds.grid(a.controls);
    let (strategy, budget) = if a.strategy == "hjb" {
        let g = hjb_backward(&l.model, &obs, &cost, a.horizon, a.n, &controls, a.delta)?;
        (g.policy().to_strategy(), Some((g.value(0, &l.rho0.to_bloch()), g.interpolation_budget())))
    } else {
        (parse_strategy(&a.strategy, l.model.bounds)?, None)
    };
    let est = evaluate_strategy_mc(&l.model, &obs, &strategy, &cost, a.horizon, a.n, &l.rho0, a.samples, a.common.seed)?;
    println!("mean {} se {}", io::fmt_f64(est.mean), io::fmt_f64(est.se));
    let result = json!({
        "strategy": a.strategy,
        "mean": est.mean,
        "se": est.se,
        "samples": est.samples,
        "grid_value": budget.map(|b| b.0),
        "interpolation_budget": budget.map(|b| b.1),
    });
    write_json(&out.join("result.json"), &result)?;
    Ok(json!({ "seed": a.common.seed, "model": l.model_json, "observable": ObservableJson::from_spec(&obs), "rho0": l.rho0 }))
}
