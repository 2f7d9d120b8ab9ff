//! Command-line front end of the themeforge pipeline.

pub mod args;
pub mod backend;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod run;

use std::io::{BufReader, Write};
use std::path::Path;

use clap::Parser;
use themeforge::diffusion::serve;
use themeforge::pipeline::{RunManifest, MANIFEST_FILE};

use args::{Cli, Command, GlobalArgs};
use backend::{build_base, BackendSpec};
use commands::{evaluate, stage};
use config::ProjectConfig;
use error::{CliError, CliResult};
use run::{load_config, require_out};

/// Parses `args` (without the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(std::iter::once("themeforge".to_string()).chain(args.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.global.verbose);
    match dispatch(&cli.global, &cli.command, &args, None) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().format_timestamp(None).try_init();
}

/// Runs one command. `fixed` replaces the configuration file and overrides
/// (used when re-running a recorded command).
fn dispatch(global: &GlobalArgs, command: &Command, args: &[String], fixed: Option<ProjectConfig>) -> CliResult<()> {
    let cfg = match fixed {
        Some(c) => c,
        None => load_config(global)?,
    };
    match command {
        Command::RenderExemplars { input } => stage::render_exemplars(&cfg, &require_out(global)?, args, input),
        Command::Stage1 { exemplars, tokens, n_concepts } => {
            stage::cmd_stage1(cfg, &require_out(global)?, args, exemplars, tokens, *n_concepts)
        }
        Command::Stage2 { input, opts } => stage::cmd_stage2(cfg, &require_out(global)?, args, input, opts),
        Command::Generate { exemplars, tokens, n_concepts, opts } => {
            stage::cmd_generate(cfg, &require_out(global)?, args, exemplars, tokens, *n_concepts, opts)
        }
        Command::Evaluate { runs } => evaluate::cmd_evaluate(cfg, &require_out(global)?, args, global.strict, runs),
        Command::Ablate { input, opts, modes } => stage::cmd_ablate(cfg, &require_out(global)?, args, input, opts, modes),
        Command::ServeBackend => serve_backend(&cfg),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Rerun { run } => rerun(global, run),
    }
}

fn serve_backend(cfg: &ProjectConfig) -> CliResult<()> {
    if let BackendSpec::External(_) = BackendSpec::parse(&cfg.backend)? {
        return Err(CliError::validation("serve-backend needs a local backend (analytic or toy)"));
    }
    let base = build_base(cfg)?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    serve(base, cfg.stage1.lr_multiplier, BufReader::new(stdin.lock()), &mut out)?;
    out.flush()?;
    Ok(())
}

/// Re-executes the command recorded in `dir` with its recorded
/// configuration, after checking that every recorded input is unchanged.
/// Only the output directory comes from the current invocation.
fn rerun(global: &GlobalArgs, dir: &Path) -> CliResult<()> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(CliError::validation(format!("{} has no {MANIFEST_FILE}", dir.display())));
    }
    let m = RunManifest::load(dir).map_err(|e| CliError::validation(format!("{}: {e}", dir.display())))?;
    if m.args.is_empty() {
        return Err(CliError::validation(format!(
            "{} was created by '{}' as part of a larger run; re-run its parent instead",
            dir.display(),
            m.command
        )));
    }
    let cfg: ProjectConfig = serde_json::from_value(m.config.clone())
        .map_err(|e| CliError::validation(format!("recorded configuration: {e}")))?;
    cfg.validate()?;
    stage::verify_recorded_inputs(&m)?;
    let recorded = Cli::try_parse_from(std::iter::once("themeforge".to_string()).chain(m.args.iter().cloned()))
        .map_err(|e| CliError::validation(format!("recorded arguments: {e}")))?;
    if let Command::Rerun { .. } = recorded.command {
        return Err(CliError::validation("recorded command is itself a rerun"));
    }
    let mut g = recorded.global.clone();
    g.out = global.out.clone().or(g.out);
    g.strict = recorded.global.strict;
    log::info!("re-running '{}' into {}", m.command, g.out.as_ref().map_or("?".into(), |p| p.display().to_string()));
    dispatch(&g, &recorded.command, &m.args, Some(cfg))
}
