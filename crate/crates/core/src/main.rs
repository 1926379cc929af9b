use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use dagger_charge::config::RunConfig;
use dagger_charge::dagger::{self, run_behavioral_cloning, run_dagger};
use dagger_charge::eval::{self, Evaluated, Scenario};
use dagger_charge::par::{self, Exec};
use dagger_charge::policy::{self, PolicyModel, Preprocess};
use dagger_charge::Error;

/// Battery fast-charging simulator, MPC expert, and imitation policies.
#[derive(Debug, Parser)]
#[command(name = "dagger-charge", version)]
struct Cli {
    /// Run configuration (JSON). Omitted sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for every file the command writes.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Master seed for episode sampling, noise and initialization.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a single charging scenario and write CSV traces.
    Simulate(SimulateArgs),
    /// Train a policy by behavioral cloning or DAGGER.
    Train(TrainArgs),
    /// Evaluate trained policies closed loop against the expert.
    Evaluate(EvaluateArgs),
    /// Time expert solves and policy forward passes across horizons.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// `expert`, or a policy checkpoint to run next to the expert.
    #[arg(long, default_value = "expert")]
    policy: String,

    /// `nominal` (25 % to 90 % from 302.5 K over 4000 s) or a scenario JSON file.
    #[arg(long, default_value = "nominal")]
    scenario: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Bc,
    Dagger,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(value_enum)]
    mode: Mode,

    /// Episodes for behavioral cloning, or for the initial expert round of DAGGER.
    #[arg(long)]
    episodes: Option<usize>,

    /// DAGGER rounds after the initial one.
    #[arg(long)]
    iters: Option<usize>,

    /// Desk-scale factor in (0, 1]: episodes x s, hidden widths and batch x min(1, 5s), rounds <= ceil(100 s).
    #[arg(long)]
    scale: Option<f64>,

    /// Continue DAGGER after the last round saved in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Held-out evaluation episodes per policy.
    #[arg(long)]
    episodes: Option<usize>,

    /// DAGGER checkpoint (default: <out>/policy_final.ckpt).
    #[arg(long)]
    dagger: Option<PathBuf>,

    /// Behavioral-cloning checkpoint (default: <out>/policy_bc.ckpt).
    #[arg(long)]
    bc: Option<PathBuf>,

    /// Also evaluate the expert against itself.
    #[arg(long)]
    include_expert: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated prediction horizons.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,

    /// Random states per horizon (at least 30).
    #[arg(long)]
    states: Option<usize>,

    /// Policy checkpoint to time (default: <out>/policy_final.ckpt if present,
    /// else a freshly initialized network of the configured shape).
    #[arg(long)]
    policy: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn usage(err: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, err: err.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<Error>() {
            Some(Error::InvalidConfig(_) | Error::InvalidParams(_) | Error::Json(_)) => 2,
            _ => 1,
        };
        Self { code, err }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Failure::usage(e),
            other => other.into(),
        })?,
        None => RunConfig::default(),
    };
    Ok(cfg.with_seed(cli.seed))
}

fn create_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .map_err(Failure::usage)
}

fn write_file(path: &Path, f: impl FnOnce(BufWriter<File>) -> std::io::Result<()>) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    f(BufWriter::new(file)).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn load_model(path: &Path, cfg: &RunConfig) -> CliResult<PolicyModel> {
    let m = policy::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if m.arch().n_w != cfg.rollout.n_w {
        return Err(Failure::usage(anyhow::anyhow!(
            "{}: window length {} does not match configured n_w {}",
            path.display(),
            m.arch().n_w,
            cfg.rollout.n_w
        )));
    }
    Ok(m)
}

fn simulate(cli: &Cli, args: &SimulateArgs, cfg: &RunConfig) -> CliResult<()> {
    let scenario = match args.scenario.as_str() {
        "nominal" => Scenario {
            seed: cli.seed,
            ..Scenario::default()
        },
        path => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read scenario {path}"))
                .map_err(Failure::usage)?;
            serde_json::from_str(&text)
                .with_context(|| format!("invalid scenario {path}"))
                .map_err(Failure::usage)?
        }
    };
    let model = match args.policy.as_str() {
        "expert" => None,
        path => Some(load_model(Path::new(path), cfg)?),
    };
    create_out(&cli.out)?;
    let (expert, learned) = eval::single_scenario_trace(model.as_ref(), &cfg.expert, &cfg.rollout, &scenario)?;
    let path = cli.out.join("trace_expert.csv");
    write_file(&path, |w| expert.write_csv(w))?;
    println!("wrote {} ({} steps)", path.display(), expert.records.len());
    if let Some(t) = learned {
        let path = cli.out.join("trace_policy.csv");
        write_file(&path, |w| t.write_csv(w))?;
        println!("wrote {} ({} steps)", path.display(), t.records.len());
    }
    Ok(())
}

fn train(cli: &Cli, args: &TrainArgs, mut cfg: RunConfig, exec: Exec) -> CliResult<()> {
    if let Some(s) = args.scale {
        cfg = cfg.scaled(s)?;
    }
    if let Some(n) = args.iters {
        cfg.dagger.n_iterations = n;
    }
    if let Some(n) = args.episodes {
        if n == 0 {
            return Err(Failure::usage(anyhow::anyhow!("--episodes must be >= 1")));
        }
        match args.mode {
            Mode::Bc => cfg.bc_episodes = Some(n),
            Mode::Dagger => cfg.dagger.episodes_initial = n,
        }
    }
    cfg.validate()?;
    create_out(&cli.out)?;
    write_json(&cli.out.join("run_config.json"), &cfg)?;
    let pipeline = cfg.pipeline(exec);
    match args.mode {
        Mode::Bc => {
            let (_, report) = run_behavioral_cloning(&pipeline, cfg.bc_episodes(), cfg.dagger.seed, Some(&cli.out))?;
            println!(
                "bc: {} episodes, {} rows, best epoch {}, final train loss {:.4}",
                report.episodes,
                report.dataset_rows,
                report.train.best_epoch,
                report.train.train_loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Mode::Dagger => {
            let out = run_dagger(&pipeline, &cfg.dagger, Some(&cli.out), args.resume)?;
            for it in &out.report.iterations {
                println!(
                    "iter {:2}: beta {:<10} rows {:7} loss {:.4} temp viol {} volt viol {}",
                    it.iteration,
                    it.beta,
                    it.dataset_rows,
                    it.loss(),
                    it.rollout.temp_violations,
                    it.rollout.volt_violations
                );
            }
            println!("wrote {}", cli.out.join(dagger::FINAL_CHECKPOINT).display());
        }
    }
    Ok(())
}

fn evaluate(cli: &Cli, args: &EvaluateArgs, cfg: &RunConfig, exec: Exec) -> CliResult<()> {
    let episodes = args.episodes.unwrap_or(cfg.evaluation.episodes);
    if episodes == 0 {
        return Err(Failure::usage(anyhow::anyhow!("--episodes must be >= 1")));
    }
    let dagger_path = args.dagger.clone().unwrap_or_else(|| cli.out.join(dagger::FINAL_CHECKPOINT));
    let bc_path = args.bc.clone().unwrap_or_else(|| cli.out.join("policy_bc.ckpt"));
    let mut models = Vec::new();
    for (name, path, explicit) in [("dagger", &dagger_path, args.dagger.is_some()), ("bc", &bc_path, args.bc.is_some())] {
        if explicit || path.exists() {
            models.push((name, load_model(path, cfg)?));
        }
    }
    if models.is_empty() && !args.include_expert {
        return Err(Failure::usage(anyhow::anyhow!(
            "no checkpoints found ({} or {}); pass --dagger/--bc or --include-expert",
            dagger_path.display(),
            bc_path.display()
        )));
    }
    let mut policies: Vec<(&str, Evaluated<'_>)> = models.iter().map(|(n, m)| (*n, Evaluated::Policy(m))).collect();
    if args.include_expert {
        policies.push(("expert", Evaluated::Expert));
    }
    create_out(&cli.out)?;
    let report = eval::evaluate_policies(&cfg.eval_setup(exec), &policies, episodes, cli.seed)?;
    write_json(&cli.out.join("eval.report.json"), &report)?;
    for p in &report.policies {
        write_file(&cli.out.join(format!("hist_{}.csv", p.name)), |w| p.current_error.histogram.write_csv(w))?;
        println!(
            "{:7} steps {:6}  err mean {:+.3} A std {:.3} A  Tc viol {:5} (mean {:.3} K)  V viol {:5} (mean {:.1} mV)  soc err {:.4}",
            p.name,
            p.steps,
            p.current_error.mean,
            p.current_error.std,
            p.core_temperature.count,
            p.core_temperature.mean,
            p.voltage.count,
            1e3 * p.voltage.mean,
            p.mean_terminal_soc_error
        );
    }
    println!("wrote {}", cli.out.join("eval.report.json").display());
    Ok(())
}

fn bench(cli: &Cli, args: &BenchArgs, cfg: &RunConfig) -> CliResult<()> {
    let horizons = args.horizons.clone().unwrap_or_else(|| cfg.evaluation.horizons.clone());
    let states = args.states.unwrap_or(cfg.evaluation.timing_states);
    if states < eval::MIN_TIMING_STATES || horizons.is_empty() || horizons.contains(&0) {
        return Err(Failure::usage(anyhow::anyhow!(
            "need --states >= {} and positive --horizons",
            eval::MIN_TIMING_STATES
        )));
    }
    let default_path = cli.out.join(dagger::FINAL_CHECKPOINT);
    let model = match &args.policy {
        Some(p) => load_model(p, cfg)?,
        None if default_path.exists() => load_model(&default_path, cfg)?,
        None => PolicyModel::init(cfg.arch(), Preprocess::default(), cli.seed)?,
    };
    create_out(&cli.out)?;
    let table = eval::bench_timing(&cfg.expert, &horizons, &model, states, cli.seed, &cfg.sampling())?;
    write_file(&cli.out.join("timing.csv"), |w| table.write_csv(w))?;
    write_json(&cli.out.join("timing.json"), &table)?;
    println!("{:7} {:>3} {:>12} {:>12} {:>12}", "method", "H", "mean [s]", "std [s]", "median [s]");
    for r in &table.rows {
        println!("{:7} {:>3} {:>12.3e} {:>12.3e} {:>12.3e}", r.method, r.horizon, r.mean_s, r.std_s, r.median_s);
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Failure::usage(anyhow::anyhow!("--jobs must be >= 1")));
        }
        par::init_pool(j);
    }
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a, &cfg),
        Command::Train(a) => train(cli, a, cfg, exec),
        Command::Evaluate(a) => evaluate(cli, a, &cfg, exec),
        Command::Bench(a) => bench(cli, a, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
