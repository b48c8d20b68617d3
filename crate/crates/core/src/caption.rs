//! Caption generation: serialize pruned tags into the enumerated prompt
//! shape, assemble chat requests from a versioned template file, and turn
//! batch responses into caption records with metadata.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::AlignedSample;
use crate::chat::{BatchFailure, BatchResult, ChatRequest, Role, SamplingParams, Turn};

/// Caption prompt template shipped with the crate.
pub const BUILTIN_CAPTION_TEMPLATE: &str = include_str!("../data/caption_prompt.toml");

#[derive(Debug)]
pub enum CaptionError {
    NoTaggedFeatures(i64),
    Template(String),
    ResponseCountMismatch { samples: usize, responses: usize },
}

impl fmt::Display for CaptionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaptionError::NoTaggedFeatures(id) => {
                write!(f, "sample {id} has no tagged features to serialize")
            }
            CaptionError::Template(msg) => write!(f, "template error: {msg}"),
            CaptionError::ResponseCountMismatch { samples, responses } => write!(
                f,
                "{responses} responses for {samples} samples; inputs must align"
            ),
        }
    }
}

impl std::error::Error for CaptionError {}

/// A named prompt template: system message plus a few-shot prefix of
/// alternating user/assistant turns.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub name: String,
    pub version: u32,
    pub system: String,
    pub shots: Vec<Turn>,
}

#[derive(Debug, Deserialize)]
struct TemplateFile {
    name: String,
    #[serde(default = "default_version")]
    version: u32,
    system: String,
    #[serde(default, rename = "shot")]
    shots: Vec<TemplateShot>,
}

fn default_version() -> u32 {
    1
}

#[derive(Debug, Deserialize)]
struct TemplateShot {
    role: String,
    content: String,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, CaptionError> {
        let file: TemplateFile =
            toml::from_str(text).map_err(|e| CaptionError::Template(e.to_string()))?;
        let mut shots = Vec::with_capacity(file.shots.len());
        for (idx, shot) in file.shots.into_iter().enumerate() {
            let role = match shot.role.as_str() {
                "user" => Role::User,
                "assistant" => Role::Assistant,
                other => {
                    return Err(CaptionError::Template(format!(
                        "shot {idx} has unknown role {other:?}"
                    )))
                }
            };
            shots.push(Turn {
                role,
                content: shot.content,
            });
        }
        for (idx, pair) in shots.windows(2).enumerate() {
            if pair[0].role == pair[1].role {
                return Err(CaptionError::Template(format!(
                    "shots {idx} and {} do not alternate roles",
                    idx + 1
                )));
            }
        }
        if shots.first().map(|t| t.role) == Some(Role::Assistant) {
            return Err(CaptionError::Template(
                "few-shot prefix must start with a user turn".to_string(),
            ));
        }
        if shots.last().map(|t| t.role) == Some(Role::User) {
            return Err(CaptionError::Template(
                "few-shot prefix must end with an assistant turn".to_string(),
            ));
        }
        Ok(PromptTemplate {
            name: file.name,
            version: file.version,
            system: file.system,
            shots,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, CaptionError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CaptionError::Template(format!("cannot read {}: {e}", path.display()))
        })?;
        PromptTemplate::parse(&text)
    }

    pub fn builtin_caption() -> Self {
        PromptTemplate::parse(BUILTIN_CAPTION_TEMPLATE).expect("builtin template is valid")
    }

    /// Number of user/assistant exchanges in the few-shot prefix.
    pub fn exchange_count(&self) -> usize {
        self.shots.len() / 2
    }
}

/// Render a sample's tags in the enumerated prompt shape: a count header,
/// then one numbered line per feature, multi-tag features joined by "; ".
/// Features are listed in ascending id order.
pub fn serialize_tags(sample: &AlignedSample) -> Result<String, CaptionError> {
    let mut features: Vec<_> = sample
        .associated
        .iter()
        .filter(|f| !f.tags.is_empty())
        .collect();
    if features.is_empty() {
        return Err(CaptionError::NoTaggedFeatures(sample.anchor_id));
    }
    features.sort_by_key(|f| f.id);

    let mut out = format!(
        "There are {} tags contained in this image. Their keys and values are listed below:",
        features.len()
    );
    for (idx, feature) in features.iter().enumerate() {
        let line = feature
            .tags
            .iter()
            .map(|(k, v)| format!("Key: {k}, Value: {v}"))
            .collect::<Vec<_>>()
            .join("; ");
        out.push_str(&format!("\n{}. {line}", idx + 1));
    }
    Ok(out)
}

/// Assemble the full caption request: template system message, few-shot
/// prefix verbatim, then the sample's serialized tags as the final user
/// turn. Sampling defaults apply unless overridden.
pub fn build_caption_request(
    sample: &AlignedSample,
    template: &PromptTemplate,
    sampling: Option<SamplingParams>,
) -> Result<ChatRequest, CaptionError> {
    let user_message = serialize_tags(sample)?;
    let mut turns = template.shots.clone();
    turns.push(Turn::user(user_message));
    Ok(ChatRequest {
        system: template.system.clone(),
        turns,
        sampling: sampling.unwrap_or_default(),
        attachment: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionMetadata {
    pub resolution_m_per_px: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub request_digest: String,
    pub model: String,
    pub latency_ms: u64,
}

/// Final text-paired output: caption plus sample metadata and the
/// generation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub sample_id: i64,
    pub caption: String,
    pub metadata: CaptionMetadata,
    pub trace: GenerationTrace,
}

#[derive(Debug, Default, PartialEq)]
pub struct AssembleOutcome {
    pub records: Vec<CaptionRecord>,
    /// (sample id, reason) for responses that produced no record.
    pub dropped: Vec<(i64, String)>,
}

/// Pair responses back with their samples. Blank captions and failed
/// requests drop with a reason; metadata comes from sample provenance.
pub fn assemble_records(
    samples: &[AlignedSample],
    responses: &[BatchResult],
) -> Result<AssembleOutcome, CaptionError> {
    if samples.len() != responses.len() {
        return Err(CaptionError::ResponseCountMismatch {
            samples: samples.len(),
            responses: responses.len(),
        });
    }
    let mut outcome = AssembleOutcome::default();
    for (sample, response) in samples.iter().zip(responses) {
        match response {
            Ok(trace) => {
                let caption = trace.text.trim();
                if caption.is_empty() {
                    outcome
                        .dropped
                        .push((sample.anchor_id, "empty-caption".to_string()));
                    continue;
                }
                outcome.records.push(CaptionRecord {
                    sample_id: sample.anchor_id,
                    caption: caption.to_string(),
                    metadata: CaptionMetadata {
                        resolution_m_per_px: sample.extent.resolution_m_per_px,
                        country: sample.country.clone(),
                        city: sample.city.clone(),
                    },
                    trace: GenerationTrace {
                        request_digest: trace.request_digest.clone(),
                        model: trace.model.clone(),
                        latency_ms: trace.latency_ms,
                    },
                });
            }
            Err(BatchFailure { error, .. }) => {
                outcome
                    .dropped
                    .push((sample.anchor_id, format!("request-failed: {error}")));
            }
        }
    }
    Ok(outcome)
}
