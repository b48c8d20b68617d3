//! Stage orchestration: a single validated run configuration, per-stage
//! content-digest manifests, atomic output writes, and dependency-checked
//! resumable execution.
//!
//! Stages run one at a time per run directory (lock file); rerunning a
//! stage whose inputs and config digests are unchanged is a no-op.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::align::{
    build_raw_pool, AlignedSample, PipelineConfig, SamplePredicate, SampleStatus,
};
use crate::bench::{evaluate, load_benchmark, EvalOptions, ScoringPolicy};
use crate::caption::{
    assemble_records, build_caption_request, CaptionRecord, PromptTemplate,
};
use crate::chat::{hex_digest, BatchPolicy, ChatClient, ChatRequest, EchoClient};
use crate::ingest::{parse_all, source_filter, to_wire_line, write_diagnostics, FeatureStore};
use crate::instruct::{
    apply_task_template, build_instruct_prompt, build_public_conv_request,
    filter_public_captions, ground_sample, mix_datasets, select_rich_samples, ConstantScorer,
    InstructTemplates, InstructionSample, MixSource, PromptKind, PublicCaptionEntry,
    PublicTaskRecord, TaskKind, TaskPayload,
};
use crate::tags::{apply_whitelist, auto_filter_keys, balance, dedup_pairs_per_image, write_audit_log, KeyWhitelist};

pub const MANIFEST_SCHEMA: &str = "stage-manifest/v1";
pub const SAMPLE_SCHEMA: &str = "aligned-sample/v1";
pub const CAPTION_SCHEMA: &str = "caption-record/v1";

/// One pipeline stage, in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Align,
    Prune,
    Balance,
    Caption,
    Instruct,
    Bench,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Align,
        Stage::Prune,
        Stage::Balance,
        Stage::Caption,
        Stage::Instruct,
        Stage::Bench,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Align => "align",
            Stage::Prune => "prune",
            Stage::Balance => "balance",
            Stage::Caption => "caption",
            Stage::Instruct => "instruct",
            Stage::Bench => "bench",
        }
    }

    /// The stage whose manifest must exist before this one runs.
    pub fn dependency(&self) -> Option<Stage> {
        match self {
            Stage::Ingest => None,
            Stage::Align => Some(Stage::Ingest),
            Stage::Prune => Some(Stage::Align),
            Stage::Balance => Some(Stage::Prune),
            Stage::Caption => Some(Stage::Balance),
            Stage::Instruct => Some(Stage::Caption),
            Stage::Bench => None,
        }
    }

    /// Stages that talk to the chat endpoint.
    pub fn needs_client(&self) -> bool {
        matches!(self, Stage::Caption | Stage::Instruct | Stage::Bench)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .iter()
            .find(|stage| stage.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug)]
pub enum PipelineError {
    Config(Vec<ConfigIssue>),
    MissingDependency { stage: Stage, required: Stage },
    Locked(PathBuf),
    Io(io::Error),
    Stage(String),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Config(issues) => {
                writeln!(f, "configuration invalid ({} issue(s)):", issues.len())?;
                for issue in issues {
                    writeln!(f, "  {issue}")?;
                }
                Ok(())
            }
            PipelineError::MissingDependency { stage, required } => write!(
                f,
                "stage {stage} requires stage {required} to have run first (manifest missing)"
            ),
            PipelineError::Locked(path) => {
                write!(f, "run directory is locked by {}", path.display())
            }
            PipelineError::Io(e) => write!(f, "i/o error: {e}"),
            PipelineError::Stage(msg) => write!(f, "stage failed: {msg}"),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<io::Error> for PipelineError {
    fn from(e: io::Error) -> Self {
        PipelineError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointMode {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub mode: EndpointMode,
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer credential.
    /// The value itself is never stored or logged.
    pub credential_env: String,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            mode: EndpointMode::Mock,
            url: String::new(),
            model: "mock-echo".to_string(),
            credential_env: "VGI_ALIGN_API_KEY".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PathsConfig {
    pub extract: PathBuf,
    pub out_dir: PathBuf,
    pub whitelist: Option<PathBuf>,
    pub caption_template: Option<PathBuf>,
    pub reasoning_template: Option<PathBuf>,
    pub detailed_template: Option<PathBuf>,
    pub conversation_template: Option<PathBuf>,
    pub benchmark: Option<PathBuf>,
    pub public_captions: Option<PathBuf>,
    pub task_records: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub caption: bool,
    pub instruct: bool,
    pub bench: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            caption: true,
            instruct: true,
            bench: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignOptions {
    /// Drop samples whose acquisition reference repeats.
    pub dedup: bool,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions { dedup: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstructOptions {
    /// Representative samples to select for grounded prompts.
    pub rich_k: usize,
    pub min_caption_tokens: usize,
    pub min_similarity_pct: f64,
    /// Similarity reported by the offline stand-in scorer.
    pub similarity_constant: f64,
    /// Weight of multi-task sources when mixing; instruct sources get 1.0.
    pub multitask_weight: f64,
    /// Total mixed samples to emit; 0 keeps every produced sample unmixed.
    pub mix_total: usize,
}

impl Default for InstructOptions {
    fn default() -> Self {
        InstructOptions {
            rich_k: 15_000,
            min_caption_tokens: 10,
            min_similarity_pct: 15.0,
            similarity_constant: 100.0,
            multitask_weight: crate::instruct::STAGE3_MULTITASK_WEIGHT,
            mix_total: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchOptions {
    pub trials: u32,
    pub policy: ScoringPolicy,
    pub concurrency: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            trials: 4,
            policy: ScoringPolicy::AllTrialsCorrect,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DeterminismOptions {
    /// Record zero wall time and latency so rerun outputs are byte-identical.
    pub zero_wall_time: bool,
}

/// The single validated configuration driving every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub paths: PathsConfig,
    pub stages: StageToggles,
    pub endpoint: EndpointConfig,
    pub batch: BatchPolicy,
    pub align: AlignOptions,
    pub instruct: InstructOptions,
    pub bench: BenchOptions,
    pub determinism: DeterminismOptions,
}

impl RunConfig {
    /// Parse TOML text and apply `key=value` overrides on dotted paths.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| {
            PipelineError::Config(vec![ConfigIssue {
                field: "<file>".to_string(),
                message: e.to_string(),
            }])
        })?;
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw).map_err(|message| {
                PipelineError::Config(vec![ConfigIssue {
                    field: key.clone(),
                    message,
                }])
            })?;
        }
        value.try_into().map_err(|e: toml::de::Error| {
            PipelineError::Config(vec![ConfigIssue {
                field: "<file>".to_string(),
                message: e.to_string(),
            }])
        })
    }

    /// Join every relative path onto `base` (typically the config file dir).
    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.as_os_str().is_empty() || p.is_absolute() {
                return;
            }
            *p = base.join(&p);
        };
        join(&mut self.paths.extract);
        join(&mut self.paths.out_dir);
        for opt in [
            &mut self.paths.whitelist,
            &mut self.paths.caption_template,
            &mut self.paths.reasoning_template,
            &mut self.paths.detailed_template,
            &mut self.paths.conversation_template,
            &mut self.paths.benchmark,
            &mut self.paths.public_captions,
            &mut self.paths.task_records,
        ]
        .into_iter()
        .flatten()
        {
            join(opt);
        }
    }

    /// Every violation at once, with field paths. Empty means valid.
    pub fn validate(&self) -> Vec<ConfigIssue> {
        let mut issues: Vec<ConfigIssue> = self
            .pipeline
            .violations()
            .into_iter()
            .map(|v| {
                let (field, message) = v.split_once(": ").unwrap_or(("pipeline", v.as_str()));
                ConfigIssue {
                    field: format!("pipeline.{field}"),
                    message: message.to_string(),
                }
            })
            .collect();

        if self.paths.extract.as_os_str().is_empty() {
            issues.push(ConfigIssue {
                field: "paths.extract".to_string(),
                message: "feature extract path is required".to_string(),
            });
        } else if !self.paths.extract.exists() {
            issues.push(ConfigIssue {
                field: "paths.extract".to_string(),
                message: format!("{} does not exist", self.paths.extract.display()),
            });
        }
        let optional_paths = [
            ("paths.whitelist", &self.paths.whitelist),
            ("paths.caption_template", &self.paths.caption_template),
            ("paths.reasoning_template", &self.paths.reasoning_template),
            ("paths.detailed_template", &self.paths.detailed_template),
            (
                "paths.conversation_template",
                &self.paths.conversation_template,
            ),
            ("paths.benchmark", &self.paths.benchmark),
            ("paths.public_captions", &self.paths.public_captions),
            ("paths.task_records", &self.paths.task_records),
        ];
        for (field, path) in optional_paths {
            if let Some(p) = path {
                if !p.exists() {
                    issues.push(ConfigIssue {
                        field: field.to_string(),
                        message: format!("{} does not exist", p.display()),
                    });
                }
            }
        }

        let llm_enabled = self.stages.caption || self.stages.instruct || self.stages.bench;
        if llm_enabled && self.endpoint.mode == EndpointMode::Http {
            if self.endpoint.url.is_empty() {
                issues.push(ConfigIssue {
                    field: "endpoint.url".to_string(),
                    message: "http endpoint requires a url".to_string(),
                });
            }
            if self.endpoint.credential_env.is_empty() {
                issues.push(ConfigIssue {
                    field: "endpoint.credential_env".to_string(),
                    message: "http endpoint requires a credential variable name".to_string(),
                });
            }
        }
        if !llm_enabled && !self.endpoint.url.is_empty() {
            issues.push(ConfigIssue {
                field: "endpoint.url".to_string(),
                message: "endpoint configured but no LLM stage is enabled".to_string(),
            });
        }
        if self.stages.bench && self.paths.benchmark.is_none() {
            issues.push(ConfigIssue {
                field: "paths.benchmark".to_string(),
                message: "bench stage enabled but no benchmark file configured".to_string(),
            });
        }
        if self.bench.trials == 0 {
            issues.push(ConfigIssue {
                field: "bench.trials".to_string(),
                message: "must be at least 1".to_string(),
            });
        }
        if self.batch.concurrency == 0 {
            issues.push(ConfigIssue {
                field: "batch.concurrency".to_string(),
                message: "must be at least 1".to_string(),
            });
        }
        if !(0.0..=100.0).contains(&self.instruct.min_similarity_pct) {
            issues.push(ConfigIssue {
                field: "instruct.min_similarity_pct".to_string(),
                message: "must lie in [0, 100]".to_string(),
            });
        }
        if self.instruct.multitask_weight < 0.0 {
            issues.push(ConfigIssue {
                field: "instruct.multitask_weight".to_string(),
                message: "must be nonnegative".to_string(),
            });
        }
        issues
    }

    /// Stable digest of the effective configuration. File locations are
    /// excluded: input content is digested separately, so moving a run
    /// directory neither busts caches nor changes outputs.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.paths = PathsConfig::default();
        hex_digest(&serde_json::to_vec(&canonical).expect("config serializes"))
    }

    fn whitelist(&self) -> Result<KeyWhitelist, PipelineError> {
        match &self.paths.whitelist {
            Some(path) => KeyWhitelist::from_file(path)
                .map_err(|e| PipelineError::Stage(format!("whitelist: {e}"))),
            None => Ok(KeyWhitelist::builtin()),
        }
    }

    fn caption_template(&self) -> Result<PromptTemplate, PipelineError> {
        match &self.paths.caption_template {
            Some(path) => PromptTemplate::from_file(path)
                .map_err(|e| PipelineError::Stage(e.to_string())),
            None => Ok(PromptTemplate::builtin_caption()),
        }
    }

    fn instruct_templates(&self) -> Result<InstructTemplates, PipelineError> {
        let mut templates = InstructTemplates::builtin();
        let overrides = [
            (&self.paths.reasoning_template, &mut templates.reasoning),
            (&self.paths.detailed_template, &mut templates.detail),
            (
                &self.paths.conversation_template,
                &mut templates.conversation,
            ),
        ];
        for (path, slot) in overrides {
            if let Some(p) = path {
                *slot =
                    PromptTemplate::from_file(p).map_err(|e| PipelineError::Stage(e.to_string()))?;
            }
        }
        Ok(templates)
    }
}

fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.is_empty() {
        return Err("empty override key".to_string());
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| format!("{part} is not a table"))?
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let leaf = parts.last().unwrap();
    // Parse the value as TOML first (numbers, booleans), string fallback.
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    node.as_table_mut()
        .ok_or_else(|| format!("{leaf} parent is not a table"))?
        .insert(leaf.to_string(), parsed);
    Ok(())
}

/// Per-stage counts; `input = output + sum(dropped)` always holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StageCounts {
    pub input: u64,
    pub output: u64,
    pub dropped: BTreeMap<String, u64>,
}

impl StageCounts {
    pub fn balanced(&self) -> bool {
        self.input == self.output + self.dropped.values().sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub schema: String,
    pub stage: String,
    pub status: String,
    pub input_digests: BTreeMap<String, String>,
    pub output_digests: BTreeMap<String, String>,
    pub counts: StageCounts,
    pub config_digest: String,
    pub wall_time_ms: u64,
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(hex_digest(&fs::read(path)?))
}

/// Write via a temp file and rename, so partial writes never surface.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(out_dir: &Path) -> Result<RunLock, PipelineError> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(path))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Serialize, Deserialize)]
struct WithSchema<T> {
    schema: String,
    #[serde(flatten)]
    record: T,
}

fn write_jsonl<T: Serialize>(
    path: &Path,
    schema: &str,
    records: impl IntoIterator<Item = T>,
) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    for record in records {
        let line = serde_json::to_string(&WithSchema {
            schema: schema.to_string(),
            record,
        })
        .map_err(|e| PipelineError::Stage(e.to_string()))?;
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
    }
    write_atomic(path, &buf)?;
    Ok(())
}

/// For records that already carry their own schema field.
fn write_jsonl_plain<T: Serialize>(
    path: &Path,
    records: impl IntoIterator<Item = T>,
) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    for record in records {
        let line = serde_json::to_string(&record).map_err(|e| PipelineError::Stage(e.to_string()))?;
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
    }
    write_atomic(path, &buf)?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wrapped: WithSchema<T> = serde_json::from_str(&line).map_err(|e| {
            PipelineError::Stage(format!("{}:{}: {e}", path.display(), idx + 1))
        })?;
        out.push(wrapped.record);
    }
    Ok(out)
}

fn manifest_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join("manifests").join(format!("{stage}.json"))
}

fn read_manifest(path: &Path) -> Option<StageManifest> {
    let bytes = fs::read(path).ok()?;
    serde_json::from_slice(&bytes).ok()
}

/// Paths of the primary record file each stage writes.
pub fn stage_output(out_dir: &Path, stage: Stage) -> PathBuf {
    match stage {
        Stage::Ingest => out_dir.join("ingest").join("records.jsonl"),
        Stage::Align => out_dir.join("align").join("samples.jsonl"),
        Stage::Prune => out_dir.join("prune").join("samples.jsonl"),
        Stage::Balance => out_dir.join("balance").join("samples.jsonl"),
        Stage::Caption => out_dir.join("caption").join("captions.jsonl"),
        Stage::Instruct => out_dir.join("instruct").join("instruct.jsonl"),
        Stage::Bench => out_dir.join("bench").join("report.json"),
    }
}

/// Run one stage. `external_client` supplies the transport when the
/// endpoint mode is `http`; mock mode builds its own deterministic client.
pub fn run_stage(
    cfg: &RunConfig,
    stage: Stage,
    external_client: Option<&dyn ChatClient>,
) -> Result<StageManifest, PipelineError> {
    let issues = cfg.validate();
    if !issues.is_empty() {
        return Err(PipelineError::Config(issues));
    }
    let out_dir = cfg.paths.out_dir.clone();
    let _lock = RunLock::acquire(&out_dir)?;

    if let Some(required) = stage.dependency() {
        if read_manifest(&manifest_path(&out_dir, required)).is_none() {
            return Err(PipelineError::MissingDependency { stage, required });
        }
    }

    let input_digests = stage_input_digests(cfg, stage, &out_dir)?;
    let config_digest = cfg.digest();
    if let Some(previous) = read_manifest(&manifest_path(&out_dir, stage)) {
        let outputs_present = previous
            .output_digests
            .keys()
            .all(|name| out_dir.join(name).exists());
        if previous.input_digests == input_digests
            && previous.config_digest == config_digest
            && outputs_present
        {
            log::info!("stage {stage}: inputs unchanged, skipping");
            return Ok(StageManifest {
                status: "skipped: up-to-date".to_string(),
                ..previous
            });
        }
    }

    let started = Instant::now();
    let echo_client;
    let client: Option<&dyn ChatClient> = if stage.needs_client() {
        match cfg.endpoint.mode {
            EndpointMode::Mock => {
                echo_client = EchoClient {
                    model: cfg.endpoint.model.clone(),
                };
                Some(&echo_client)
            }
            EndpointMode::Http => Some(external_client.ok_or_else(|| {
                PipelineError::Stage(
                    "http endpoint configured but no client was supplied".to_string(),
                )
            })?),
        }
    } else {
        None
    };

    let (counts, outputs) = match stage {
        Stage::Ingest => stage_ingest(cfg, &out_dir)?,
        Stage::Align => stage_align(cfg, &out_dir)?,
        Stage::Prune => stage_prune(cfg, &out_dir)?,
        Stage::Balance => stage_balance(cfg, &out_dir)?,
        Stage::Caption => stage_caption(cfg, &out_dir, client.unwrap())?,
        Stage::Instruct => stage_instruct(cfg, &out_dir, client.unwrap())?,
        Stage::Bench => stage_bench(cfg, &out_dir, client.unwrap())?,
    };
    debug_assert!(counts.balanced(), "{stage}: {counts:?}");

    let mut output_digests = BTreeMap::new();
    for rel in outputs {
        let digest = sha256_file(&out_dir.join(&rel))?;
        output_digests.insert(rel, digest);
    }
    let wall_time_ms = if cfg.determinism.zero_wall_time {
        0
    } else {
        started.elapsed().as_millis() as u64
    };
    let manifest = StageManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        stage: stage.name().to_string(),
        status: "completed".to_string(),
        input_digests,
        output_digests,
        counts,
        config_digest,
        wall_time_ms,
    };
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| PipelineError::Stage(e.to_string()))?;
    write_atomic(&manifest_path(&out_dir, stage), &bytes)?;
    Ok(manifest)
}

fn stage_input_digests(
    cfg: &RunConfig,
    stage: Stage,
    out_dir: &Path,
) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut digests = BTreeMap::new();
    let mut file = |label: &str, path: &Path| -> Result<(), PipelineError> {
        digests.insert(label.to_string(), sha256_file(path)?);
        Ok(())
    };
    match stage {
        Stage::Ingest => file("extract", &cfg.paths.extract)?,
        Stage::Align => file("ingest/records.jsonl", &stage_output(out_dir, Stage::Ingest))?,
        Stage::Prune => {
            file("align/samples.jsonl", &stage_output(out_dir, Stage::Align))?;
            if let Some(wl) = &cfg.paths.whitelist {
                file("whitelist", wl)?;
            }
        }
        Stage::Balance => file("prune/samples.jsonl", &stage_output(out_dir, Stage::Prune))?,
        Stage::Caption => {
            file(
                "balance/samples.jsonl",
                &stage_output(out_dir, Stage::Balance),
            )?;
            if let Some(t) = &cfg.paths.caption_template {
                file("caption_template", t)?;
            }
        }
        Stage::Instruct => {
            file(
                "caption/captions.jsonl",
                &stage_output(out_dir, Stage::Caption),
            )?;
            file(
                "balance/samples.jsonl",
                &stage_output(out_dir, Stage::Balance),
            )?;
            if let Some(p) = &cfg.paths.public_captions {
                file("public_captions", p)?;
            }
            if let Some(p) = &cfg.paths.task_records {
                file("task_records", p)?;
            }
        }
        Stage::Bench => {
            let path = cfg.paths.benchmark.as_ref().ok_or_else(|| {
                PipelineError::Stage("bench stage needs paths.benchmark".to_string())
            })?;
            file("benchmark", path)?;
        }
    }
    Ok(digests)
}

fn stage_ingest(cfg: &RunConfig, out_dir: &Path) -> Result<(StageCounts, Vec<String>), PipelineError> {
    let file = fs::File::open(&cfg.paths.extract)?;
    let (records, diagnostics) = parse_all(BufReader::new(file))?;
    let parsed = records.len() as u64;
    let outcome = source_filter(records);

    let mut counts = StageCounts {
        input: parsed + diagnostics.len() as u64,
        output: outcome.kept.len() as u64,
        dropped: BTreeMap::new(),
    };
    for d in &diagnostics {
        *counts.dropped.entry(format!("parse:{}", d.rule)).or_default() += 1;
    }
    for (_, reason) in &outcome.dropped {
        *counts.dropped.entry(reason.clone()).or_default() += 1;
    }

    let mut record_buf = Vec::new();
    for rec in &outcome.kept {
        record_buf.extend_from_slice(to_wire_line(rec).as_bytes());
        record_buf.push(b'\n');
    }
    write_atomic(&stage_output(out_dir, Stage::Ingest), &record_buf)?;

    let mut diag_buf = Vec::new();
    write_diagnostics(&mut diag_buf, &diagnostics)?;
    for (id, reason) in &outcome.dropped {
        writeln!(diag_buf, "record id {id}: {reason}: dropped by source filter")?;
    }
    write_atomic(&out_dir.join("ingest").join("diagnostics.txt"), &diag_buf)?;

    Ok((
        counts,
        vec![
            "ingest/records.jsonl".to_string(),
            "ingest/diagnostics.txt".to_string(),
        ],
    ))
}

fn load_store(out_dir: &Path) -> Result<FeatureStore, PipelineError> {
    let path = stage_output(out_dir, Stage::Ingest);
    let digest = sha256_file(&path)?;
    let file = fs::File::open(&path)?;
    let (records, diagnostics) = parse_all(BufReader::new(file))?;
    if !diagnostics.is_empty() {
        return Err(PipelineError::Stage(format!(
            "ingest output is corrupt: {}",
            diagnostics[0]
        )));
    }
    FeatureStore::build(records, digest).map_err(|e| PipelineError::Stage(e.to_string()))
}

fn stage_align(cfg: &RunConfig, out_dir: &Path) -> Result<(StageCounts, Vec<String>), PipelineError> {
    let store = load_store(out_dir)?;
    let mut predicates = Vec::new();
    if cfg.align.dedup {
        predicates.push(SamplePredicate::dedup_acquisition_refs());
    }
    let (samples, manifest) = build_raw_pool(&store, &cfg.pipeline, &mut predicates)
        .map_err(|e| PipelineError::Stage(e.to_string()))?;

    let mut counts = StageCounts {
        input: manifest.features,
        output: manifest.retained,
        dropped: manifest.dropped.clone(),
    };
    *counts.dropped.entry("not-anchor".to_string()).or_default() +=
        manifest.features - manifest.anchors;

    write_jsonl(&stage_output(out_dir, Stage::Align), SAMPLE_SCHEMA, &samples)?;
    Ok((counts, vec!["align/samples.jsonl".to_string()]))
}

fn retained(samples: Vec<AlignedSample>) -> Vec<AlignedSample> {
    samples
        .into_iter()
        .filter(|s| s.status == SampleStatus::Retained)
        .collect()
}

fn stage_prune(cfg: &RunConfig, out_dir: &Path) -> Result<(StageCounts, Vec<String>), PipelineError> {
    let samples: Vec<AlignedSample> = read_jsonl(&stage_output(out_dir, Stage::Align))?;
    let samples = retained(samples);
    let whitelist = cfg.whitelist()?;

    // Key-filter report over the full observed corpus, for audit.
    let observations: Vec<(String, String)> = samples
        .iter()
        .flat_map(|s| s.associated.iter())
        .flat_map(|f| f.tags.iter().map(|(k, v)| (k.clone(), v.clone())))
        .collect();
    let key_report = auto_filter_keys(observations);
    write_atomic(
        &out_dir.join("prune").join("key_report.json"),
        &serde_json::to_vec_pretty(&key_report).map_err(|e| PipelineError::Stage(e.to_string()))?,
    )?;

    let mut counts = StageCounts {
        input: samples.len() as u64,
        ..Default::default()
    };
    let mut kept = Vec::new();
    for sample in &samples {
        let pruned = apply_whitelist(sample, &whitelist);
        match &pruned.status {
            SampleStatus::Retained => {
                kept.push(pruned);
                counts.output += 1;
            }
            SampleStatus::FilteredOut(reason) => {
                *counts.dropped.entry(reason.clone()).or_default() += 1;
            }
            SampleStatus::Raw => unreachable!("whitelist never resets status"),
        }
    }
    write_jsonl(&stage_output(out_dir, Stage::Prune), SAMPLE_SCHEMA, &kept)?;
    Ok((
        counts,
        vec![
            "prune/samples.jsonl".to_string(),
            "prune/key_report.json".to_string(),
        ],
    ))
}

fn stage_balance(cfg: &RunConfig, out_dir: &Path) -> Result<(StageCounts, Vec<String>), PipelineError> {
    let samples: Vec<AlignedSample> = read_jsonl(&stage_output(out_dir, Stage::Prune))?;
    let samples = retained(samples);
    let images: Vec<(i64, _)> = samples
        .iter()
        .map(|s| (s.anchor_id, dedup_pairs_per_image(s)))
        .collect();
    let outcome = balance(&images, cfg.pipeline.balance_threshold, cfg.pipeline.rng_seed)
        .map_err(|e| PipelineError::Stage(e.to_string()))?;

    let retained_ids: std::collections::BTreeSet<i64> = outcome.retained.iter().copied().collect();
    let kept: Vec<&AlignedSample> = samples
        .iter()
        .filter(|s| retained_ids.contains(&s.anchor_id))
        .collect();
    let counts = StageCounts {
        input: samples.len() as u64,
        output: kept.len() as u64,
        dropped: {
            let mut d = BTreeMap::new();
            let removed = samples.len() as u64 - kept.len() as u64;
            if removed > 0 {
                d.insert("balance-removed".to_string(), removed);
            }
            d
        },
    };

    write_jsonl(&stage_output(out_dir, Stage::Balance), SAMPLE_SCHEMA, kept)?;
    let mut audit = Vec::new();
    write_audit_log(&mut audit, &outcome.audit)?;
    write_atomic(&out_dir.join("balance").join("audit.log"), &audit)?;
    Ok((
        counts,
        vec![
            "balance/samples.jsonl".to_string(),
            "balance/audit.log".to_string(),
        ],
    ))
}

fn zero_latency(records: &mut [CaptionRecord]) {
    for r in records {
        r.trace.latency_ms = 0;
    }
}

fn stage_caption(
    cfg: &RunConfig,
    out_dir: &Path,
    client: &dyn ChatClient,
) -> Result<(StageCounts, Vec<String>), PipelineError> {
    let samples: Vec<AlignedSample> = read_jsonl(&stage_output(out_dir, Stage::Balance))?;
    let template = cfg.caption_template()?;
    let mut requests = Vec::with_capacity(samples.len());
    for sample in &samples {
        let request = build_caption_request(sample, &template, None)
            .map_err(|e| PipelineError::Stage(e.to_string()))?;
        requests.push(request);
    }
    let responses = crate::chat::submit_batch(client, &requests, &cfg.batch);
    let mut outcome =
        assemble_records(&samples, &responses).map_err(|e| PipelineError::Stage(e.to_string()))?;
    if cfg.determinism.zero_wall_time {
        zero_latency(&mut outcome.records);
    }

    let mut counts = StageCounts {
        input: samples.len() as u64,
        output: outcome.records.len() as u64,
        dropped: BTreeMap::new(),
    };
    for (_, reason) in &outcome.dropped {
        let key = reason.split(':').next().unwrap_or(reason).to_string();
        *counts.dropped.entry(key).or_default() += 1;
    }

    write_jsonl(
        &stage_output(out_dir, Stage::Caption),
        CAPTION_SCHEMA,
        &outcome.records,
    )?;
    Ok((counts, vec!["caption/captions.jsonl".to_string()]))
}

fn stage_instruct(
    cfg: &RunConfig,
    out_dir: &Path,
    client: &dyn ChatClient,
) -> Result<(StageCounts, Vec<String>), PipelineError> {
    let captions: Vec<CaptionRecord> = read_jsonl(&stage_output(out_dir, Stage::Caption))?;
    let samples: Vec<AlignedSample> = read_jsonl(&stage_output(out_dir, Stage::Balance))?;
    let by_id: BTreeMap<i64, &AlignedSample> =
        samples.iter().map(|s| (s.anchor_id, s)).collect();
    let templates = cfg.instruct_templates()?;
    let seed = cfg.pipeline.rng_seed;

    let mut counts = StageCounts::default();

    // Grounded prompts over the rich subset of captioned samples.
    let captioned: Vec<&AlignedSample> = captions
        .iter()
        .filter_map(|c| by_id.get(&c.sample_id).copied())
        .collect();
    let caption_text: BTreeMap<i64, &str> = captions
        .iter()
        .map(|c| (c.sample_id, c.caption.as_str()))
        .collect();
    let owned: Vec<AlignedSample> = captioned.iter().map(|s| (*s).clone()).collect();
    let selection = select_rich_samples(&owned, cfg.instruct.rich_k);

    let kinds = [PromptKind::Reasoning, PromptKind::Detail, PromptKind::Conversation];
    let mut requests: Vec<(ChatRequest, i64, PromptKind, Vec<crate::instruct::UnitBox>)> =
        Vec::new();
    for id in &selection.ids {
        let sample = by_id[id];
        let grounded = ground_sample(sample, caption_text[id])
            .map_err(|e| PipelineError::Stage(e.to_string()))?;
        for kind in kinds {
            let request = build_instruct_prompt(&grounded, kind, &templates);
            let boxes = grounded.objects.iter().map(|o| o.unit_box).collect();
            requests.push((request, *id, kind, boxes));
        }
    }
    counts.input += requests.len() as u64;

    let responses = crate::chat::submit_batch(
        client,
        &requests.iter().map(|(r, ..)| r.clone()).collect::<Vec<_>>(),
        &cfg.batch,
    );
    let mut grounded_samples = Vec::new();
    for ((request, id, kind, boxes), response) in requests.into_iter().zip(responses) {
        match response {
            Ok(trace) if !trace.text.trim().is_empty() => {
                let user = request.turns.last().unwrap().content.clone();
                grounded_samples.push(InstructionSample {
                    task: None,
                    turns: vec![(user, trace.text)],
                    source: format!("grounded-{}", kind_name(kind)),
                    boxes,
                });
            }
            Ok(_) => {
                *counts.dropped.entry("empty-response".to_string()).or_default() += 1;
                log::warn!("sample {id} {}: empty response", kind_name(kind));
            }
            Err(failure) => {
                *counts.dropped.entry("request-failed".to_string()).or_default() += 1;
                log::warn!("sample {id} {}: {}", kind_name(kind), failure.error);
            }
        }
    }

    // Conversations from curated public caption sets, when configured.
    let mut public_samples = Vec::new();
    if let Some(path) = &cfg.paths.public_captions {
        let entries: Vec<PublicCaptionEntry> = read_jsonl(path)?;
        for e in &entries {
            e.validate().map_err(|err| PipelineError::Stage(err.to_string()))?;
        }
        let scorer = ConstantScorer(cfg.instruct.similarity_constant);
        let filtered = filter_public_captions(
            &entries,
            &scorer,
            cfg.instruct.min_caption_tokens,
            cfg.instruct.min_similarity_pct,
        );
        let template = PromptTemplate::parse(crate::instruct::BUILTIN_PUBLIC_CONV_TEMPLATE)
            .map_err(|e| PipelineError::Stage(e.to_string()))?;
        let conv_requests: Vec<ChatRequest> = filtered
            .kept
            .iter()
            .map(|entry| build_public_conv_request(entry, &template))
            .collect();
        counts.input += conv_requests.len() as u64;
        let responses = crate::chat::submit_batch(client, &conv_requests, &cfg.batch);
        for (entry, response) in filtered.kept.iter().zip(responses) {
            match response {
                Ok(trace) if !trace.text.trim().is_empty() => {
                    public_samples.push(InstructionSample {
                        task: None,
                        turns: vec![(entry.captions.join("\n"), trace.text)],
                        source: "public-captions".to_string(),
                        boxes: Vec::new(),
                    });
                }
                Ok(_) => {
                    *counts.dropped.entry("empty-response".to_string()).or_default() += 1;
                }
                Err(failure) => {
                    *counts.dropped.entry("request-failed".to_string()).or_default() += 1;
                    log::warn!("public entry {}: {}", entry.image_id, failure.error);
                }
            }
        }
    }

    // Multi-task templating from public task records, when configured.
    let mut multitask_samples = Vec::new();
    if let Some(path) = &cfg.paths.task_records {
        let records: Vec<PublicTaskRecord> = read_jsonl(path)?;
        counts.input += records.len() as u64;
        for (idx, record) in records.iter().enumerate() {
            let task = match record.payload {
                TaskPayload::Cls { .. } => TaskKind::Cls,
                TaskPayload::Vqa { .. } => TaskKind::Vqa,
                TaskPayload::Vg { .. } => TaskKind::Vg,
            };
            let mut rng = crate::rng::subseed_rng(seed, &format!("task/{idx}"));
            let sample = apply_task_template(record, task, &mut rng)
                .map_err(|e| PipelineError::Stage(e.to_string()))?;
            multitask_samples.push(sample);
        }
    }

    let emitted: Vec<InstructionSample> = if cfg.instruct.mix_total > 0 {
        let sources = vec![
            MixSource {
                name: "grounded".to_string(),
                weight: 1.0,
                samples: grounded_samples,
            },
            MixSource {
                name: "public".to_string(),
                weight: 1.0,
                samples: public_samples,
            },
            MixSource {
                name: "multitask".to_string(),
                weight: cfg.instruct.multitask_weight,
                samples: multitask_samples,
            },
        ];
        let (mixed, report) = mix_datasets(sources, seed, cfg.instruct.mix_total)
            .map_err(|e| PipelineError::Stage(e.to_string()))?;
        // Samples left out by the mix are accounted as dropped.
        let produced = counts.input - counts.dropped.values().sum::<u64>();
        let unmixed = produced - mixed.len() as u64;
        if unmixed > 0 {
            counts.dropped.insert("not-mixed".to_string(), unmixed);
        }
        log::info!("mix realized counts: {:?}", report.realized);
        mixed
    } else {
        let mut all = grounded_samples;
        all.extend(public_samples);
        all.extend(multitask_samples);
        all
    };
    counts.output = emitted.len() as u64;

    write_jsonl_plain(
        &stage_output(out_dir, Stage::Instruct),
        emitted.iter().map(|s| s.to_wire()),
    )?;
    Ok((counts, vec!["instruct/instruct.jsonl".to_string()]))
}

fn kind_name(kind: PromptKind) -> &'static str {
    match kind {
        PromptKind::Reasoning => "reasoning",
        PromptKind::Detail => "detail",
        PromptKind::Conversation => "conversation",
    }
}

fn stage_bench(
    cfg: &RunConfig,
    out_dir: &Path,
    client: &dyn ChatClient,
) -> Result<(StageCounts, Vec<String>), PipelineError> {
    let path = cfg
        .paths
        .benchmark
        .as_ref()
        .ok_or_else(|| PipelineError::Stage("bench stage needs paths.benchmark".to_string()))?;
    let questions = load_benchmark(BufReader::new(fs::File::open(path)?))
        .map_err(|e| PipelineError::Stage(e.to_string()))?;
    let opts = EvalOptions {
        trials: cfg.bench.trials,
        seed: cfg.pipeline.rng_seed,
        policy: cfg.bench.policy,
        concurrency: cfg.bench.concurrency,
    };
    let evaluation = evaluate(client, &questions, &opts);

    write_atomic(
        &stage_output(out_dir, Stage::Bench),
        &serde_json::to_vec_pretty(&evaluation.report)
            .map_err(|e| PipelineError::Stage(e.to_string()))?,
    )?;
    write_jsonl(
        &out_dir.join("bench").join("trials.jsonl"),
        "bench-trial/v1",
        &evaluation.trials,
    )?;

    let counts = StageCounts {
        input: questions.len() as u64,
        output: questions.len() as u64,
        dropped: BTreeMap::new(),
    };
    Ok((
        counts,
        vec!["bench/report.json".to_string(), "bench/trials.jsonl".to_string()],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn feature_line(id: i64, lon0: f64, w_m: f64, h_m: f64, tags: &str) -> String {
        let dlon = w_m / 111_319.490_793_273_57;
        let dlat = h_m / 111_319.490_793_273_57;
        format!(
            r#"{{"id": {id}, "geometry": {{"type": "Polygon", "coordinates": [[[{a}, 0.0], [{b}, 0.0], [{b}, {c}], [{a}, {c}], [{a}, 0.0]]]}}, "tags": {tags}, "city": "Mocktown", "country": "Testland"}}"#,
            a = lon0,
            b = lon0 + dlon,
            c = dlat,
        )
    }

    fn fixture_extract() -> String {
        [
            // Anchor-sized features, well separated.
            feature_line(1, 0.0, 200.0, 180.0, r#"{"landuse": "residential"}"#),
            feature_line(2, 0.1, 210.0, 190.0, r#"{"landuse": "farmland"}"#),
            feature_line(3, 0.2, 220.0, 200.0, r#"{"natural": "water", "water": "lake"}"#),
            // Small feature near anchor 1, associated by the area rule.
            feature_line(4, 0.0005, 40.0, 40.0, r#"{"leisure": "park"}"#),
            // Source-filtered out.
            feature_line(5, 0.3, 200.0, 200.0, r#"{"boundary": "administrative"}"#),
        ]
        .join("\n")
    }

    fn base_config(dir: &TempDir) -> RunConfig {
        let extract = dir.path().join("features.jsonl");
        fs::write(&extract, fixture_extract()).unwrap();
        let mut cfg = RunConfig::default();
        cfg.paths.extract = extract;
        cfg.paths.out_dir = dir.path().join("run");
        cfg.stages.bench = false;
        cfg.determinism.zero_wall_time = true;
        cfg.instruct.rich_k = 2;
        cfg
    }

    #[test]
    fn default_config_file_is_valid() {
        let dir = TempDir::new().unwrap();
        let cfg = base_config(&dir);
        assert!(cfg.validate().is_empty(), "{:?}", cfg.validate());
    }

    #[test]
    fn validation_reports_all_violations() {
        let dir = TempDir::new().unwrap();
        let mut cfg = base_config(&dir);
        cfg.pipeline.balance_threshold = 0;
        cfg.bench.trials = 0;
        let issues = cfg.validate();
        assert!(issues.len() >= 2, "{issues:?}");
        assert!(issues.iter().any(|i| i.field.contains("balance_threshold")));
        assert!(issues.iter().any(|i| i.field == "bench.trials"));
    }

    #[test]
    fn overrides_apply_to_dotted_paths() {
        let cfg = RunConfig::from_toml(
            "",
            &[
                ("pipeline.balance_threshold".to_string(), "7".to_string()),
                ("endpoint.model".to_string(), "custom".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.pipeline.balance_threshold, 7);
        assert_eq!(cfg.endpoint.model, "custom");
    }

    #[test]
    fn ordering_error_when_dependency_missing() {
        let dir = TempDir::new().unwrap();
        let cfg = base_config(&dir);
        let err = run_stage(&cfg, Stage::Align, None).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::MissingDependency {
                stage: Stage::Align,
                required: Stage::Ingest
            }
        ));
    }

    #[test]
    fn ingest_counts_balance() {
        let dir = TempDir::new().unwrap();
        let cfg = base_config(&dir);
        let manifest = run_stage(&cfg, Stage::Ingest, None).unwrap();
        assert_eq!(manifest.status, "completed");
        assert!(manifest.counts.balanced());
        assert_eq!(manifest.counts.input, 5);
        assert_eq!(manifest.counts.output, 4);
        assert_eq!(manifest.counts.dropped["excluded-key:boundary"], 1);
    }

    #[test]
    fn rerun_with_unchanged_inputs_is_noop() {
        let dir = TempDir::new().unwrap();
        let cfg = base_config(&dir);
        let first = run_stage(&cfg, Stage::Ingest, None).unwrap();
        let second = run_stage(&cfg, Stage::Ingest, None).unwrap();
        assert_eq!(second.status, "skipped: up-to-date");
        assert_eq!(first.output_digests, second.output_digests);
    }

    #[test]
    fn config_change_busts_the_cache() {
        let dir = TempDir::new().unwrap();
        let mut cfg = base_config(&dir);
        run_stage(&cfg, Stage::Ingest, None).unwrap();
        cfg.pipeline.rng_seed = 99;
        let rerun = run_stage(&cfg, Stage::Ingest, None).unwrap();
        assert_eq!(rerun.status, "completed");
    }

    #[test]
    fn full_fixture_run_is_deterministic() {
        let dir = TempDir::new().unwrap();
        let mut cfg = base_config(&dir);
        cfg.paths.out_dir = dir.path().join("run1");
        for stage in [Stage::Ingest, Stage::Align, Stage::Prune, Stage::Balance, Stage::Caption, Stage::Instruct] {
            let m = run_stage(&cfg, stage, None).unwrap();
            assert!(m.counts.balanced(), "{stage}: {:?}", m.counts);
        }
        let mut cfg2 = cfg.clone();
        cfg2.paths.out_dir = dir.path().join("run2");
        for stage in [Stage::Ingest, Stage::Align, Stage::Prune, Stage::Balance, Stage::Caption, Stage::Instruct] {
            run_stage(&cfg2, stage, None).unwrap();
        }
        for stage in [Stage::Ingest, Stage::Align, Stage::Prune, Stage::Balance, Stage::Caption, Stage::Instruct] {
            let a = fs::read(stage_output(&cfg.paths.out_dir, stage)).unwrap();
            let b = fs::read(stage_output(&cfg2.paths.out_dir, stage)).unwrap();
            assert_eq!(a, b, "{stage} outputs differ");
            let ma = fs::read(manifest_path(&cfg.paths.out_dir, stage)).unwrap();
            let mb = fs::read(manifest_path(&cfg2.paths.out_dir, stage)).unwrap();
            assert_eq!(ma, mb, "{stage} manifests differ");
        }
    }

    #[test]
    fn lock_is_released_after_run() {
        let dir = TempDir::new().unwrap();
        let cfg = base_config(&dir);
        run_stage(&cfg, Stage::Ingest, None).unwrap();
        assert!(!cfg.paths.out_dir.join(".lock").exists());
    }

    #[test]
    fn held_lock_blocks_stages() {
        let dir = TempDir::new().unwrap();
        let cfg = base_config(&dir);
        fs::create_dir_all(&cfg.paths.out_dir).unwrap();
        fs::write(cfg.paths.out_dir.join(".lock"), "held").unwrap();
        assert!(matches!(
            run_stage(&cfg, Stage::Ingest, None),
            Err(PipelineError::Locked(_))
        ));
    }

    #[test]
    fn bench_stage_runs_against_mock() {
        let dir = TempDir::new().unwrap();
        let mut cfg = base_config(&dir);
        let bench_file = dir.path().join("bench.jsonl");
        let q = crate::bench::BenchQuestion {
            id: "q1".to_string(),
            image: "img".to_string(),
            question: "?".to_string(),
            choices: vec!["a".to_string(), "b".to_string()],
            answer: 0,
            dimensions: vec![crate::bench::Dimension::Identity],
        };
        fs::write(&bench_file, serde_json::to_string(&q).unwrap() + "\n").unwrap();
        cfg.stages.bench = true;
        cfg.paths.benchmark = Some(bench_file);
        let manifest = run_stage(&cfg, Stage::Bench, None).unwrap();
        assert_eq!(manifest.counts.input, 1);
        assert!(cfg.paths.out_dir.join("bench/report.json").exists());
    }
}
