//! `vgi-align`: run the dataset pipeline stage by stage from a single
//! validated configuration.
//!
//! Exit codes: 0 success, 1 configuration invalid, 2 stage failure,
//! 3 stage ordering violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vgi_align_core::chat::ChatClient;
use vgi_align_core::pipeline::{
    run_stage, EndpointMode, PipelineError, RunConfig, Stage, StageManifest,
};

mod http;

#[derive(Parser)]
#[command(name = "vgi-align", version, about = "Geo-aligned dataset pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration file and report every violation.
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Override config values, e.g. --override pipeline.rng_seed=7
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Parse the feature extract, apply source filters, index features.
    Ingest(StageArgs),
    /// Select anchors, derive extents, associate features.
    Align(StageArgs),
    /// Apply the key whitelist to aligned samples.
    Prune(StageArgs),
    /// Semantic balancing of dominant key-value pairs.
    Balance(StageArgs),
    /// Generate captions through the chat endpoint.
    Caption(StageArgs),
    /// Build instruction data (grounded prompts, public sets, multitask).
    Instruct(StageArgs),
    /// Evaluate a model on a benchmark file.
    Bench(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override config values, e.g. --override pipeline.balance_threshold=100
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, String> {
    raw.iter()
        .map(|item| {
            item.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format!("override {item:?} is not KEY=VALUE"))
        })
        .collect()
}

fn load_config(
    path: &PathBuf,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<&PathBuf>,
) -> Result<RunConfig, PipelineError> {
    let text = std::fs::read_to_string(path)?;
    let overrides = parse_overrides(overrides).map_err(|message| {
        PipelineError::Config(vec![vgi_align_core::pipeline::ConfigIssue {
            field: "--override".to_string(),
            message,
        }])
    })?;
    let mut cfg = RunConfig::from_toml(&text, &overrides)?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    cfg.resolve_paths(&base);
    if let Some(seed) = seed {
        cfg.pipeline.rng_seed = seed;
    }
    if let Some(out) = out {
        cfg.paths.out_dir = out.clone();
    }
    Ok(cfg)
}

fn print_manifest(manifest: &StageManifest) {
    println!(
        "stage {}: {} ({} in, {} out, {} dropped)",
        manifest.stage,
        manifest.status,
        manifest.counts.input,
        manifest.counts.output,
        manifest.counts.dropped.values().sum::<u64>()
    );
    for (reason, count) in &manifest.counts.dropped {
        println!("  dropped {count}: {reason}");
    }
    for (name, digest) in &manifest.output_digests {
        println!("  wrote {name} ({})", &digest[..12]);
    }
}

fn execute_stage(stage: Stage, args: &StageArgs) -> Result<StageManifest, PipelineError> {
    let cfg = load_config(&args.config, &args.overrides, args.seed, args.out.as_ref())?;
    let http_client: Option<http::HttpChatClient> =
        if stage.needs_client() && cfg.endpoint.mode == EndpointMode::Http {
            let client = http::HttpChatClient::from_env(
                cfg.endpoint.url.clone(),
                cfg.endpoint.model.clone(),
                &cfg.endpoint.credential_env,
            )
            .map_err(|e| PipelineError::Stage(e.to_string()))?;
            Some(client)
        } else {
            None
        };
    run_stage(&cfg, stage, http_client.as_ref().map(|c| c as &dyn ChatClient))
}

fn run() -> Result<(), (u8, String)> {
    let cli = Cli::parse();
    let (stage, args) = match &cli.command {
        Command::Validate { config, overrides } => {
            let cfg = load_config(config, overrides, None, None)
                .map_err(|e| (exit_code_for(&e), e.to_string()))?;
            let issues = cfg.validate();
            if issues.is_empty() {
                println!("configuration valid");
                return Ok(());
            }
            let mut report = format!("configuration invalid ({} issue(s)):\n", issues.len());
            for issue in &issues {
                report.push_str(&format!("  {issue}\n"));
            }
            return Err((1, report));
        }
        Command::Ingest(a) => (Stage::Ingest, a),
        Command::Align(a) => (Stage::Align, a),
        Command::Prune(a) => (Stage::Prune, a),
        Command::Balance(a) => (Stage::Balance, a),
        Command::Caption(a) => (Stage::Caption, a),
        Command::Instruct(a) => (Stage::Instruct, a),
        Command::Bench(a) => (Stage::Bench, a),
    };
    match execute_stage(stage, args) {
        Ok(manifest) => {
            print_manifest(&manifest);
            Ok(())
        }
        Err(e) => Err((exit_code_for(&e), e.to_string())),
    }
}

fn exit_code_for(error: &PipelineError) -> u8 {
    match error {
        PipelineError::Config(_) => 1,
        PipelineError::MissingDependency { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("{}", message.trim_end());
            ExitCode::from(code)
        }
    }
}
