use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rulepress::executor::{compiled_seed_rules, compress, CompiledRule};
use rulepress::gateway::{LlmGateway, ScriptedMock, ENV_ENDPOINT};
use rulepress::harness::{
    load_trajectory_dir, replay_task, run_evolution, CompressionReport, EvolutionConfig, Trajectory,
    DEFAULT_BATCH_SIZE, DEFAULT_RETENTION_THRESHOLD, DEFAULT_TURNS,
};
use rulepress::pool::{
    retention, GlobalRulePool, WriteBackParams, DEFAULT_ALPHA, DEFAULT_RETENTION_K, DEFAULT_TAU,
    DEFAULT_TOP_K,
};
use rulepress::rule::{parse_rule_list, serialize_rule};
use rulepress::session::SessionConfig;
use rulepress::store::{load_existing_pool, save_pool, PoolError, PoolStore};

const EXIT_INPUT: u8 = 3;
const EXIT_POOL: u8 = 4;
const EXIT_GATEWAY: u8 = 5;
const EXIT_CHILD: u8 = 6;

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    fn gateway(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_GATEWAY,
            message: message.into(),
        }
    }
}

impl From<PoolError> for Failure {
    fn from(e: PoolError) -> Self {
        Self {
            code: EXIT_POOL,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Rule-based compression of terminal output for coding agents.
#[derive(Debug, Parser)]
#[command(name = "rulepress", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Compress one command's output read from stdin or a file.
    Compress(CompressArgs),
    /// Run a command and print its combined output, compressed.
    Wrap(WrapArgs),
    /// Inspect or initialize a rule pool.
    #[command(subcommand)]
    Pool(PoolCmd),
    /// Replay recorded trajectories against a pool without changing it.
    Replay(ReplayArgs),
    /// Evolve a pool over recorded trajectories until its top rules settle.
    Evolve(EvolveArgs),
}

#[derive(Debug, Args)]
struct RuleSource {
    /// Pool file to take rules from.
    #[arg(long, env = "RULEPRESS_POOL", conflicts_with = "rules")]
    pool: Option<PathBuf>,
    /// JSON array of rules to use instead of a pool.
    #[arg(long, env = "RULEPRESS_RULES")]
    rules: Option<PathBuf>,
    /// Number of pool rules to use.
    #[arg(long, env = "RULEPRESS_TOP_K", default_value_t = DEFAULT_TOP_K)]
    k: usize,
    /// Task category; rules tagged with it are preferred.
    #[arg(long, env = "RULEPRESS_CATEGORY")]
    category: Option<String>,
}

impl RuleSource {
    fn compiled(&self) -> CliResult<Vec<CompiledRule>> {
        if let Some(path) = &self.rules {
            let text = read_text(path)?;
            let rules =
                parse_rule_list(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
            return rules
                .into_iter()
                .map(|r| CompiledRule::new(r).map_err(|e| Failure::input(format!("{}: {e}", path.display()))))
                .collect();
        }
        let Some(path) = &self.pool else {
            return Ok(compiled_seed_rules());
        };
        let pool = load_existing_pool(path)?;
        pool.top_k(self.k, self.category.as_deref())
            .into_iter()
            .map(|r| {
                CompiledRule::new(r.clone()).map_err(|e| Failure {
                    code: EXIT_POOL,
                    message: format!("{}: {e}", path.display()),
                })
            })
            .collect()
    }
}

#[derive(Debug, Args)]
struct CompressArgs {
    /// The command that produced the output.
    #[arg(long, env = "RULEPRESS_COMMAND")]
    command: String,
    /// Read the output from this file instead of stdin.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Print compression statistics as JSON on stderr.
    #[arg(long, env = "RULEPRESS_STATS")]
    stats: bool,
    #[command(flatten)]
    source: RuleSource,
}

#[derive(Debug, Args)]
struct WrapArgs {
    /// Print compression statistics as JSON on stderr.
    #[arg(long, env = "RULEPRESS_STATS")]
    stats: bool,
    #[command(flatten)]
    source: RuleSource,
    /// The command to run.
    #[arg(last = true, required = true)]
    child: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum PoolCmd {
    /// Write the seed pool.
    Init {
        #[arg(long, env = "RULEPRESS_POOL")]
        pool: PathBuf,
        /// Overwrite an existing pool.
        #[arg(long)]
        force: bool,
    },
    /// List the best rules with their ranking scores.
    Top {
        #[arg(long, env = "RULEPRESS_POOL")]
        pool: PathBuf,
        #[arg(long, env = "RULEPRESS_TOP_K", default_value_t = DEFAULT_TOP_K)]
        k: usize,
        #[arg(long, env = "RULEPRESS_CATEGORY")]
        category: Option<String>,
    },
    /// Print one rule as JSON.
    Show {
        #[arg(long, env = "RULEPRESS_POOL")]
        pool: PathBuf,
        rule_id: String,
    },
    /// Percentage of the previous pool's top K still in the current top K.
    Retention {
        #[arg(long)]
        prev: PathBuf,
        #[arg(long)]
        curr: PathBuf,
        #[arg(long = "K", env = "RULEPRESS_RETENTION_K", default_value_t = DEFAULT_RETENTION_K)]
        retention_k: usize,
    },
}

#[derive(Debug, Args)]
struct GatewayArgs {
    /// Scripted transcript to answer model requests offline.
    #[arg(long, env = "RULEPRESS_MOCK")]
    mock: Option<PathBuf>,
}

impl GatewayArgs {
    fn gateway(&self) -> CliResult<LlmGateway> {
        if let Some(path) = &self.mock {
            let mock = ScriptedMock::load(path).map_err(|e| Failure::gateway(e.to_string()))?;
            return Ok(LlmGateway::mock(mock));
        }
        if std::env::var_os(ENV_ENDPOINT).is_some() {
            return LlmGateway::from_env().map_err(|e| Failure::gateway(e.to_string()));
        }
        log::warn!("no --mock and {ENV_ENDPOINT} unset; running without a rule-generation model");
        Ok(LlmGateway::offline())
    }
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long, env = "RULEPRESS_POOL")]
    pool: Option<PathBuf>,
    #[arg(long, env = "RULEPRESS_TOP_K", default_value_t = DEFAULT_TOP_K)]
    k: usize,
    #[command(flatten)]
    gateway: GatewayArgs,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Trajectory files or directories of `*.jsonl` files.
    #[arg(required = true)]
    trajectories: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct EvolveArgs {
    #[arg(long, env = "RULEPRESS_POOL")]
    pool: PathBuf,
    #[arg(long, env = "RULEPRESS_TOP_K", default_value_t = DEFAULT_TOP_K)]
    k: usize,
    /// Minimum task confidence for write-back.
    #[arg(long, env = "RULEPRESS_TAU", default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Weight of the task confidence in the pool confidence update.
    #[arg(long, env = "RULEPRESS_ALPHA", default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Top set size compared by retention.
    #[arg(long = "K", env = "RULEPRESS_RETENTION_K", default_value_t = DEFAULT_RETENTION_K)]
    retention_k: usize,
    /// Concurrent sessions per wave.
    #[arg(long, env = "RULEPRESS_BATCH_SIZE", default_value_t = DEFAULT_BATCH_SIZE)]
    n: usize,
    #[arg(long, env = "RULEPRESS_TURNS", default_value_t = DEFAULT_TURNS)]
    turns: usize,
    #[arg(long, env = "RULEPRESS_RETENTION_THRESHOLD", default_value_t = DEFAULT_RETENTION_THRESHOLD)]
    retention_threshold: f64,
    #[command(flatten)]
    gateway: GatewayArgs,
    #[arg(long)]
    json: bool,
    #[arg(required = true)]
    trajectories: Vec<PathBuf>,
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn bytes_to_text(bytes: Vec<u8>) -> String {
    String::from_utf8(bytes).unwrap_or_else(|e| String::from_utf8_lossy(e.as_bytes()).into_owned())
}

fn write_stdout(text: &str) -> CliResult {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Failure::input(format!("stdout: {e}")))
}

fn compress_and_print(command: &str, raw: &str, rules: &[CompiledRule], stats: bool) -> CliResult {
    let record = compress(0, command, raw, rules);
    write_stdout(&record.result.compressed_text)?;
    if stats {
        let r = &record.result;
        eprintln!(
            "{}",
            json!({
                "chars_before": r.chars_before,
                "chars_after": r.chars_after,
                "ratio": r.ratio,
                "applied_rule_id": r.applied_rule_id,
                "coverage": record.coverage,
            })
        );
    }
    Ok(())
}

fn cmd_compress(args: CompressArgs) -> CliResult {
    let rules = args.source.compiled()?;
    let raw = match &args.input {
        Some(path) => std::fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?,
        None => {
            let mut buf = Vec::new();
            io::stdin()
                .read_to_end(&mut buf)
                .map_err(|e| Failure::input(format!("stdin: {e}")))?;
            buf
        }
    };
    compress_and_print(&args.command, &bytes_to_text(raw), &rules, args.stats)
}

fn cmd_wrap(args: WrapArgs) -> CliResult<u8> {
    let rules = args.source.compiled()?;
    let (program, rest) = args.child.split_first().expect("clap requires a child command");
    let spawn_err = |e: io::Error| Failure {
        code: EXIT_CHILD,
        message: format!("{program}: {e}"),
    };
    let (mut reader, writer) = io::pipe().map_err(spawn_err)?;
    let mut child = Command::new(program)
        .args(rest)
        .stdout(writer.try_clone().map_err(spawn_err)?)
        .stderr(writer)
        .spawn()
        .map_err(spawn_err)?;
    let mut output = Vec::new();
    reader.read_to_end(&mut output).map_err(spawn_err)?;
    let status = child.wait().map_err(spawn_err)?;
    let display = args.child.join(" ");
    compress_and_print(&display, &bytes_to_text(output), &rules, args.stats)?;
    Ok(exit_code_of(status))
}

#[cfg(unix)]
fn exit_code_of(status: std::process::ExitStatus) -> u8 {
    use std::os::unix::process::ExitStatusExt;
    match (status.code(), status.signal()) {
        (Some(code), _) => code as u8,
        (None, Some(signal)) => 128u8.wrapping_add(signal as u8),
        (None, None) => 1,
    }
}

#[cfg(not(unix))]
fn exit_code_of(status: std::process::ExitStatus) -> u8 {
    status.code().map_or(1, |c| c as u8)
}

fn cmd_pool(cmd: PoolCmd) -> CliResult {
    match cmd {
        PoolCmd::Init { pool, force } => {
            if pool.exists() && !force {
                return Err(Failure {
                    code: EXIT_POOL,
                    message: format!("{} already exists; pass --force to overwrite", pool.display()),
                });
            }
            let seeded = GlobalRulePool::seeded();
            save_pool(&seeded, &pool)?;
            println!("wrote {} seed rules to {}", seeded.len(), pool.display());
        }
        PoolCmd::Top { pool, k, category } => {
            let loaded = load_existing_pool(&pool)?;
            println!(
                "{:>4}  {:<36} {:>9} {:>10} {:>7}",
                "rank", "rule_id", "score", "confidence", "applied"
            );
            for (i, rule) in loaded.top_k(k, category.as_deref()).iter().enumerate() {
                println!(
                    "{:>4}  {:<36} {:>9.3} {:>10.3} {:>7}",
                    i + 1,
                    rule.rule_id,
                    rule.ranking_score(),
                    rule.confidence,
                    rule.times_applied
                );
            }
        }
        PoolCmd::Show { pool, rule_id } => {
            let loaded = load_existing_pool(&pool)?;
            let rule = loaded
                .get(&rule_id)
                .ok_or_else(|| Failure::input(format!("no rule `{rule_id}` in {}", pool.display())))?;
            println!("{}", serialize_rule(rule));
        }
        PoolCmd::Retention {
            prev,
            curr,
            retention_k,
        } => {
            if retention_k == 0 {
                return Err(Failure::input("--K must be at least 1"));
            }
            let report = retention(
                &load_existing_pool(&prev)?,
                &load_existing_pool(&curr)?,
                retention_k,
            );
            if report.undersized {
                log::warn!("a pool holds fewer than {retention_k} rules; the percentage still divides by K");
            }
            println!("{:.1}", report.retention_percent);
        }
    }
    Ok(())
}

fn load_trajectories(paths: &[PathBuf]) -> (Vec<Trajectory>, usize) {
    let mut tasks = Vec::new();
    let mut errors = 0;
    for path in paths {
        let loaded = if path.is_dir() {
            load_trajectory_dir(path)
        } else {
            Trajectory::load(path).map(|t| vec![t])
        };
        match loaded {
            Ok(t) => tasks.extend(t),
            Err(e) => {
                eprintln!("rulepress: {e}");
                errors += 1;
            }
        }
    }
    (tasks, errors)
}

fn partial(errors: usize) -> CliResult {
    if errors == 0 {
        Ok(())
    } else {
        Err(Failure::input(format!(
            "{errors} trajectory source(s) could not be read"
        )))
    }
}

fn cmd_replay(args: ReplayArgs) -> CliResult {
    let gateway = args.gateway.gateway()?;
    let pool = match &args.pool {
        Some(path) => load_existing_pool(path)?,
        None => GlobalRulePool::seeded(),
    };
    let (tasks, errors) = load_trajectories(&args.trajectories);
    let config = SessionConfig {
        k: args.k.max(1),
        ..SessionConfig::default()
    };
    let reports = tasks
        .iter()
        .map(|t| replay_task(t, &pool, &config, &gateway).report)
        .collect();
    let report = CompressionReport::new(reports);
    if args.json {
        write_stdout(&format!(
            "{}\n",
            serde_json::to_string_pretty(&report).expect("report serializes")
        ))?;
    } else {
        write_stdout(&report.to_table())?;
    }
    partial(errors)
}

fn cmd_evolve(args: EvolveArgs) -> CliResult {
    if args.n == 0 || args.retention_k == 0 || args.k == 0 {
        return Err(Failure::input("--n, --k and --K must be at least 1"));
    }
    let gateway = args.gateway.gateway()?;
    let (tasks, errors) = load_trajectories(&args.trajectories);
    let store = PoolStore::new(&args.pool);
    let config = EvolutionConfig {
        batch_size: args.n,
        turns: args.turns,
        retention_threshold: args.retention_threshold,
        retention_k: args.retention_k,
        session: SessionConfig {
            k: args.k,
            ..SessionConfig::default()
        },
        write_back: WriteBackParams {
            tau: args.tau,
            alpha: args.alpha,
        },
    };
    let report = run_evolution(&tasks, &store, &config, &gateway)?;
    if report.converged {
        let last = report.turns.last().expect("converged after a turn");
        log::info!(
            "stopped after turn {} with retention {:.1}%",
            last.turn,
            last.retention.retention_percent
        );
    }
    if args.json {
        write_stdout(&format!(
            "{}\n",
            serde_json::to_string_pretty(&report).expect("report serializes")
        ))?;
    } else {
        let mut text = report.to_table();
        if let Some(last) = report.turns.last() {
            text.push('\n');
            text.push_str(&last.compression.to_table());
        }
        if report.converged {
            text.push_str("\nconverged\n");
        }
        write_stdout(&text)?;
    }
    partial(errors)
}

fn run(cli: Cli) -> CliResult<u8> {
    match cli.command {
        Cmd::Compress(args) => cmd_compress(args).map(|_| 0),
        Cmd::Wrap(args) => cmd_wrap(args),
        Cmd::Pool(cmd) => cmd_pool(cmd).map(|_| 0),
        Cmd::Replay(args) => cmd_replay(args).map(|_| 0),
        Cmd::Evolve(args) => cmd_evolve(args).map(|_| 0),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("RULEPRESS_LOG", "warn"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("rulepress: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
