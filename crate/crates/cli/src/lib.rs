//! Command-line surface for building shot caches, ranking, probing,
//! answering, benchmarking and self-verification.

pub mod config;
pub mod input;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use shotcache::verify::run_suite;
use shotcache::{
    adaptive_select, bench, build_pool_with_instruction, load_pool, rank, save_pool, BenchMode, CachePool, Engine,
    Error, Model, ShotPolicy,
};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Input { path: PathBuf, line: usize, message: String },
    #[error("{0} verification check(s) failed")]
    Verify(usize),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => EXIT_USAGE,
            Self::Verify(_) => EXIT_VERIFY,
            Self::Io { .. } | Self::Input { .. } => EXIT_IO,
            Self::Core(e) => match e {
                Error::InvalidConfig(_)
                | Error::InvalidProbeConfig(_)
                | Error::LayerOutOfRange { .. }
                | Error::HeadOutOfRange { .. }
                | Error::UnknownExample(_)
                | Error::EmptyInput(_)
                | Error::PositionOverflow { .. } => EXIT_USAGE,
                _ => EXIT_IO,
            },
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "shotcache", version, about = "Adaptive many-shot inference over a reusable KV cache")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Cache file; overrides `paths.cache`.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prefill every example in the shots file and write the cache.
    BuildCache {
        /// One example per line; overrides `paths.shots`.
        #[arg(long)]
        shots: Option<PathBuf>,
    },
    /// Rank cached examples by relevance to a query.
    Rank {
        #[arg(long)]
        query: String,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Run the entropy probe schedule and print its trace.
    Probe {
        #[arg(long)]
        query: String,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        max_shots: Option<usize>,
    },
    /// Answer one query, or every line of the queries file.
    Infer {
        #[arg(long)]
        query: Option<String>,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        /// Recompute all shot tokens instead of reusing the cache.
        #[arg(long)]
        full_prefill: bool,
        #[arg(long)]
        zero_shot: bool,
        /// Write key=value summary lines here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Compare cached and full-prefill latency over the queries file.
    Bench {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        zero_shot: bool,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Run the invariant suite; also checks the configured cache if present.
    Verify {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

struct Ctx {
    cfg: RunConfig,
    cache: Option<PathBuf>,
}

impl Ctx {
    fn model(&self) -> CliResult<Model> {
        Ok(Model::new(self.cfg.model_config())?)
    }

    fn cache_path(&self) -> CliResult<&Path> {
        self.cache
            .as_deref()
            .ok_or_else(|| CliError::Usage("no cache path: pass --cache or set paths.cache".into()))
    }

    fn load(&self, model: &Model) -> CliResult<CachePool> {
        let path = self.cache_path()?;
        load_pool(path, model).map_err(|e| match e {
            Error::Io(source) => CliError::io(path, source),
            other => CliError::Core(other),
        })
    }

    fn engine<'a>(&self, model: &'a Model, pool: &'a CachePool) -> CliResult<Engine<'a>> {
        Ok(Engine::new(model, pool, self.cfg.probe_config())?
            .with_scoring_layer(self.cfg.scoring_layer())?
            .with_max_new_tokens(self.cfg.decode.max_new_tokens))
    }

    fn queries(&self, explicit: Option<&Path>) -> CliResult<Vec<Vec<u8>>> {
        let path = explicit
            .or(self.cfg.paths.queries.as_deref())
            .ok_or_else(|| CliError::Usage("no queries file: pass --queries or set paths.queries".into()))?;
        let items = input::read_items(path)?;
        if items.is_empty() {
            return Err(CliError::Input { path: path.to_path_buf(), line: 0, message: "no queries".into() });
        }
        Ok(items.into_iter().map(|i| i.text).collect())
    }
}

fn escaped(bytes: &[u8]) -> String {
    bytes.escape_ascii().to_string()
}

fn write_lines(out: &mut dyn Write, lines: &[String]) -> CliResult {
    for l in lines {
        writeln!(out, "{l}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}

fn write_file(path: &Path, lines: &[String]) -> CliResult {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Execute a parsed command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cache = cli.cache.clone().or_else(|| cfg.paths.cache.clone());
    let ctx = Ctx { cfg, cache };
    match cli.command {
        Command::BuildCache { shots } => build_cache(&ctx, shots.as_deref(), out),
        Command::Rank { query, layer, top } => {
            let model = ctx.model()?;
            let pool = ctx.load(&model)?;
            let set = rank(&model, &pool, query.as_bytes(), layer.unwrap_or(ctx.cfg.scoring_layer()))?;
            let lines: Vec<String> = set
                .ranked_ids
                .iter()
                .zip(&set.scores)
                .take(top)
                .enumerate()
                .map(|(i, (&id, s))| format!("rank={} id={id} score={s:.9e} text={}", i + 1, escaped(pool.text(id).unwrap_or(&[]))))
                .collect();
            write_lines(out, &lines)
        }
        Command::Probe { query, tau, step, probes, max_shots } => {
            let model = ctx.model()?;
            let pool = ctx.load(&model)?;
            let mut pc = ctx.cfg.probe_config();
            pc.tau = tau.unwrap_or(pc.tau);
            pc.step = step.unwrap_or(pc.step);
            pc.probes_per_round = probes.unwrap_or(pc.probes_per_round);
            pc.max_shots = max_shots.unwrap_or(pc.max_shots);
            pc.validate()?;
            let set = rank(&model, &pool, query.as_bytes(), ctx.cfg.scoring_layer())?;
            let trace = adaptive_select(&model, &pool, &set.ranked_ids, query.as_bytes(), &pc)?;
            write_lines(out, &trace.to_lines())
        }
        Command::Infer { query, queries, max_new_tokens, full_prefill, zero_shot, summary } => {
            let model = ctx.model()?;
            let pool = ctx.load(&model)?;
            let mut engine = ctx.engine(&model, &pool)?;
            if let Some(n) = max_new_tokens {
                engine = engine.with_max_new_tokens(n);
            }
            let queries = match query {
                Some(q) => vec![q.into_bytes()],
                None => ctx.queries(queries.as_deref())?,
            };
            let mode = if full_prefill { BenchMode::FullPrefill } else { BenchMode::Cached };
            let policy = if zero_shot { ShotPolicy::ZeroShot } else { ShotPolicy::Adaptive };
            let mut summary_lines = Vec::new();
            for (i, q) in queries.iter().enumerate() {
                let report = engine.answer_with(q, mode, policy)?;
                if i > 0 {
                    write_lines(out, &[String::new()])?;
                }
                write_lines(out, &report.entropy_trace.to_lines())?;
                let lines = report.summary_lines();
                write_lines(out, &lines)?;
                if queries.len() == 1 {
                    summary_lines.extend(lines);
                } else {
                    summary_lines.extend(lines.into_iter().map(|l| format!("q{i}.{l}")));
                }
            }
            match summary {
                Some(path) => write_file(&path, &summary_lines),
                None => Ok(()),
            }
        }
        Command::Bench { queries, zero_shot, summary } => {
            let model = ctx.model()?;
            let pool = ctx.load(&model)?;
            let engine = ctx.engine(&model, &pool)?;
            let queries = ctx.queries(queries.as_deref())?;
            let policy = if zero_shot { ShotPolicy::ZeroShot } else { ShotPolicy::Adaptive };
            let report = bench(&engine, &queries, policy)?;
            write_lines(out, &report.table_lines())?;
            match summary {
                Some(path) => write_file(&path, &report.summary_lines()),
                None => Ok(()),
            }
        }
        Command::Verify { seed } => verify(&ctx, seed, out),
    }
}

fn build_cache(ctx: &Ctx, shots: Option<&Path>, out: &mut dyn Write) -> CliResult {
    let shots = shots
        .or(ctx.cfg.paths.shots.as_deref())
        .ok_or_else(|| CliError::Usage("no shots file: pass --shots or set paths.shots".into()))?;
    let out_path = ctx.cache_path()?;
    let model = ctx.model()?;
    let items = input::read_items(shots)?;
    if items.is_empty() {
        return Err(CliError::Input { path: shots.to_path_buf(), line: 0, message: "no examples".into() });
    }
    let max = model.config().max_position;
    if let Some(item) = items.iter().find(|i| i.text.len() > max) {
        return Err(CliError::Input {
            path: shots.to_path_buf(),
            line: item.line,
            message: format!("example has {} tokens, more than max_position {max}", item.text.len()),
        });
    }
    let texts: Vec<&[u8]> = items.iter().map(|i| i.text.as_slice()).collect();
    let instruction = ctx.cfg.pool.instruction.as_deref().map(str::as_bytes);
    let pool = build_pool_with_instruction(&model, &texts, instruction)?;
    save_pool(&pool, out_path).map_err(|e| match e {
        Error::Io(source) => CliError::io(out_path, source),
        other => CliError::Core(other),
    })?;
    write_lines(out, &[
        format!("built {} blocks", pool.len()),
        format!("key_bytes={}", pool.key_value_count() * 4),
        format!("fingerprint={}", pool.fingerprint()),
    ])
}

fn verify(ctx: &Ctx, seed: u64, out: &mut dyn Write) -> CliResult {
    let mut lines = Vec::new();
    let mut failed = 0;
    for check in run_suite(seed) {
        failed += usize::from(!check.passed);
        lines.push(check.line());
    }
    if let Some(path) = ctx.cache.as_deref().filter(|p| p.exists()) {
        let result = ctx.model().and_then(|m| ctx.load(&m));
        match result {
            Ok(pool) => lines.push(format!("PASS cache blocks={} path={}", pool.len(), path.display())),
            Err(e) => {
                failed += 1;
                lines.push(format!("FAIL cache {e}"));
            }
        }
    }
    write_lines(out, &lines)?;
    if failed > 0 {
        return Err(CliError::Verify(failed));
    }
    Ok(())
}
