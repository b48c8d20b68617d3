//! Instruction-data builders: public-caption curation, unit-box
//! normalization, rich-sample selection, grounded prompt assembly,
//! multi-task templating with task identifiers, and weighted dataset mixing.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{AlignedSample, PixelBox};
use crate::caption::PromptTemplate;
use crate::chat::{ChatRequest, SamplingParams, Turn};

pub const BUILTIN_REASONING_TEMPLATE: &str = include_str!("../data/instruct_reasoning.toml");
pub const BUILTIN_DETAILED_TEMPLATE: &str = include_str!("../data/instruct_detailed.toml");
pub const BUILTIN_CONVERSATION_TEMPLATE: &str =
    include_str!("../data/instruct_conversation.toml");
pub const BUILTIN_PUBLIC_CONV_TEMPLATE: &str = include_str!("../data/public_conversation.toml");

#[derive(Debug)]
pub enum InstructError {
    BadCaptionCount { image_id: String, got: usize },
    BoxOutOfRange(String),
    UnknownKind(String),
    TaskMismatch { task: TaskKind, record: String },
    NoPositiveWeight,
    EmptyTemplateList,
}

impl fmt::Display for InstructError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstructError::BadCaptionCount { image_id, got } => {
                write!(f, "entry {image_id}: expected exactly 5 captions, got {got}")
            }
            InstructError::BoxOutOfRange(msg) => write!(f, "box out of range: {msg}"),
            InstructError::UnknownKind(k) => write!(f, "unknown prompt kind {k:?}"),
            InstructError::TaskMismatch { task, record } => {
                write!(f, "record {record} does not fit task {task}")
            }
            InstructError::NoPositiveWeight => {
                write!(f, "at least one mix source needs a positive weight")
            }
            InstructError::EmptyTemplateList => write!(f, "template list is empty"),
        }
    }
}

impl std::error::Error for InstructError {}

/// One public-dataset image with its five captions and a dedup digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicCaptionEntry {
    pub image_id: String,
    pub captions: Vec<String>,
    pub digest: String,
}

impl PublicCaptionEntry {
    pub fn validate(&self) -> Result<(), InstructError> {
        if self.captions.len() != 5 {
            return Err(InstructError::BadCaptionCount {
                image_id: self.image_id.clone(),
                got: self.captions.len(),
            });
        }
        Ok(())
    }
}

/// Image-caption relevance, in percent. The reference implementation is a
/// CLIP score; tests and offline runs plug in deterministic stand-ins.
pub trait SimilarityScorer {
    fn score(&self, entry: &PublicCaptionEntry, captions: &[String]) -> Result<f64, String>;
}

/// Fixed-value scorer for offline runs.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl SimilarityScorer for ConstantScorer {
    fn score(&self, _entry: &PublicCaptionEntry, _captions: &[String]) -> Result<f64, String> {
        Ok(self.0)
    }
}

/// An entry that survived curation; short captions may have been removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedEntry {
    pub image_id: String,
    pub captions: Vec<String>,
    pub similarity_pct: f64,
}

#[derive(Debug, Default, PartialEq)]
pub struct CaptionFilterOutcome {
    pub kept: Vec<CuratedEntry>,
    /// (image id, reason); each dropped entry carries exactly one reason.
    pub rejected: Vec<(String, String)>,
}

fn token_count(caption: &str) -> usize {
    caption.split_whitespace().count()
}

/// Curate public caption entries: drop duplicate digests, drop captions
/// under `min_tokens` whitespace tokens (the entry survives while at least
/// one caption remains), then drop entries whose similarity score falls
/// strictly below `min_sim_pct`.
pub fn filter_public_captions(
    entries: &[PublicCaptionEntry],
    scorer: &dyn SimilarityScorer,
    min_tokens: usize,
    min_sim_pct: f64,
) -> CaptionFilterOutcome {
    let mut outcome = CaptionFilterOutcome::default();
    let mut seen_digests = std::collections::HashSet::new();
    for entry in entries {
        if !seen_digests.insert(entry.digest.clone()) {
            outcome
                .rejected
                .push((entry.image_id.clone(), "duplicate".to_string()));
            continue;
        }
        let survivors: Vec<String> = entry
            .captions
            .iter()
            .filter(|c| token_count(c) >= min_tokens)
            .cloned()
            .collect();
        if survivors.is_empty() {
            outcome
                .rejected
                .push((entry.image_id.clone(), "all-captions-short".to_string()));
            continue;
        }
        match scorer.score(entry, &survivors) {
            Ok(pct) if pct < min_sim_pct => {
                outcome
                    .rejected
                    .push((entry.image_id.clone(), "low-similarity".to_string()));
            }
            Ok(pct) => {
                outcome.kept.push(CuratedEntry {
                    image_id: entry.image_id.clone(),
                    captions: survivors,
                    similarity_pct: pct,
                });
            }
            Err(err) => {
                log::warn!("scorer failed on {}: {err}", entry.image_id);
                outcome
                    .rejected
                    .push((entry.image_id.clone(), "scorer-error".to_string()));
            }
        }
    }
    outcome
}

/// Box in unit coordinates: (top-left x, top-left y, bottom-right x,
/// bottom-right y), each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl UnitBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, InstructError> {
        let ordered = 0.0 <= x1 && x1 <= x2 && x2 <= 1.0 && 0.0 <= y1 && y1 <= y2 && y2 <= 1.0;
        if !ordered {
            return Err(InstructError::BoxOutOfRange(format!(
                "[{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(UnitBox { x1, y1, x2, y2 })
    }

    /// Bracketed display with at least one decimal, e.g. `[0.0, 0.249, 1.0, 0.757]`.
    pub fn display(&self) -> String {
        let fmt = |v: f64| {
            if v.fract() == 0.0 {
                format!("{v:.1}")
            } else {
                format!("{v}")
            }
        };
        format!(
            "[{}, {}, {}, {}]",
            fmt(self.x1),
            fmt(self.y1),
            fmt(self.x2),
            fmt(self.y2)
        )
    }
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Normalize a pixel box by the image dimensions, rounding half-up to three
/// decimals.
pub fn normalize_box(px: &PixelBox, width: f64, height: f64) -> Result<UnitBox, InstructError> {
    let in_range = 0.0 <= px.x1 && px.x1 <= px.x2 && px.x2 <= width && 0.0 <= px.y1
        && px.y1 <= px.y2
        && px.y2 <= height;
    if !in_range || width <= 0.0 || height <= 0.0 {
        return Err(InstructError::BoxOutOfRange(format!(
            "pixel box ({}, {}, {}, {}) in {width}x{height}",
            px.x1, px.y1, px.x2, px.y2
        )));
    }
    UnitBox::new(
        round3(px.x1 / width),
        round3(px.y1 / height),
        round3(px.x2 / width),
        round3(px.y2 / height),
    )
}

/// Inverse of [`normalize_box`] up to rounding: scale back to pixels.
pub fn denormalize_box(b: &UnitBox, width: f64, height: f64) -> PixelBox {
    PixelBox {
        x1: b.x1 * width,
        y1: b.y1 * height,
        x2: b.x2 * width,
        y2: b.y2 * height,
    }
}

/// Tag richness used to pick representative samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Richness {
    pub distinct_pairs: usize,
    pub distinct_keys: usize,
}

pub fn richness_of(sample: &AlignedSample) -> Richness {
    let pairs = crate::tags::dedup_pairs_per_image(sample);
    let keys: std::collections::BTreeSet<&str> =
        pairs.iter().map(|(k, _)| k.as_str()).collect();
    Richness {
        distinct_pairs: pairs.len(),
        distinct_keys: keys.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RichSelection {
    /// Selected sample ids in selection order.
    pub ids: Vec<i64>,
    /// True when fewer than `k` samples were available.
    pub exhausted: bool,
}

/// Top-k samples by (distinct pairs desc, distinct keys desc, id asc).
/// Asking for more than available returns everything and flags it.
pub fn select_rich_samples(samples: &[AlignedSample], k: usize) -> RichSelection {
    let mut ranked: Vec<(Richness, i64)> = samples
        .iter()
        .map(|s| (richness_of(s), s.anchor_id))
        .collect();
    ranked.sort_by(|(ra, ia), (rb, ib)| {
        rb.distinct_pairs
            .cmp(&ra.distinct_pairs)
            .then(rb.distinct_keys.cmp(&ra.distinct_keys))
            .then(ia.cmp(ib))
    });
    let exhausted = k > ranked.len();
    if exhausted {
        log::warn!(
            "requested {k} rich samples but only {} are available",
            ranked.len()
        );
    }
    RichSelection {
        ids: ranked.into_iter().take(k).map(|(_, id)| id).collect(),
        exhausted,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Reasoning,
    Detail,
    Conversation,
}

impl std::str::FromStr for PromptKind {
    type Err = InstructError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reasoning" => Ok(PromptKind::Reasoning),
            "detail" => Ok(PromptKind::Detail),
            "conversation" => Ok(PromptKind::Conversation),
            other => Err(InstructError::UnknownKind(other.to_string())),
        }
    }
}

/// The three grounded-prompt templates, one per kind.
#[derive(Debug, Clone)]
pub struct InstructTemplates {
    pub reasoning: PromptTemplate,
    pub detail: PromptTemplate,
    pub conversation: PromptTemplate,
}

impl InstructTemplates {
    pub fn builtin() -> Self {
        InstructTemplates {
            reasoning: PromptTemplate::parse(BUILTIN_REASONING_TEMPLATE)
                .expect("builtin reasoning template is valid"),
            detail: PromptTemplate::parse(BUILTIN_DETAILED_TEMPLATE)
                .expect("builtin detailed template is valid"),
            conversation: PromptTemplate::parse(BUILTIN_CONVERSATION_TEMPLATE)
                .expect("builtin conversation template is valid"),
        }
    }

    pub fn get(&self, kind: PromptKind) -> &PromptTemplate {
        match kind {
            PromptKind::Reasoning => &self.reasoning,
            PromptKind::Detail => &self.detail,
            PromptKind::Conversation => &self.conversation,
        }
    }
}

/// A caption plus the unit-box grounded objects of its image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedCaption {
    pub sample_id: i64,
    pub caption: String,
    pub objects: Vec<GroundedObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedObject {
    /// Joined tag string, e.g. `leisure: park` or `k1: v1,k2: v2`.
    pub tagline: String,
    pub unit_box: UnitBox,
}

/// Build the grounded view of a captioned sample: one object per associated
/// feature, boxes normalized by the image pixel size.
pub fn ground_sample(
    sample: &AlignedSample,
    caption: &str,
) -> Result<GroundedCaption, InstructError> {
    let dim = sample.extent.pixel_size as f64;
    let mut features: Vec<_> = sample.associated.iter().collect();
    features.sort_by_key(|f| f.id);
    let mut objects = Vec::with_capacity(features.len());
    for f in features {
        if f.tags.is_empty() {
            continue;
        }
        let tagline = f
            .tags
            .iter()
            .map(|(k, v)| format!("{k}: {v}"))
            .collect::<Vec<_>>()
            .join(",");
        objects.push(GroundedObject {
            tagline,
            unit_box: normalize_box(&f.pixel_box, dim, dim)?,
        });
    }
    Ok(GroundedCaption {
        sample_id: sample.anchor_id,
        caption: caption.to_string(),
        objects,
    })
}

/// Assemble a grounded instruction prompt of the given kind: template system
/// message and single-shot exchange verbatim, then the caption followed by
/// one `tagline -> [x1, y1, x2, y2]` line per object.
pub fn build_instruct_prompt(
    grounded: &GroundedCaption,
    kind: PromptKind,
    templates: &InstructTemplates,
) -> ChatRequest {
    let template = templates.get(kind);
    let mut user = grounded.caption.clone();
    for obj in &grounded.objects {
        user.push_str(&format!("\n{} -> {}", obj.tagline, obj.unit_box.display()));
    }
    let mut turns = template.shots.clone();
    turns.push(Turn::user(user));
    ChatRequest {
        system: template.system.clone(),
        turns,
        sampling: SamplingParams::default(),
        attachment: None,
    }
}

/// Conversation-generation request for a curated public-caption entry:
/// the captions, one per line, as the user payload.
pub fn build_public_conv_request(entry: &CuratedEntry, template: &PromptTemplate) -> ChatRequest {
    let mut turns = template.shots.clone();
    turns.push(Turn::user(entry.captions.join("\n")));
    ChatRequest {
        system: template.system.clone(),
        turns,
        sampling: SamplingParams::default(),
        attachment: None,
    }
}

/// Task identifiers for the multi-task instruction data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "[CLS]")]
    Cls,
    #[serde(rename = "[VQA]")]
    Vqa,
    #[serde(rename = "[VG]")]
    Vg,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Cls => "[CLS]",
            TaskKind::Vqa => "[VQA]",
            TaskKind::Vg => "[VG]",
        };
        f.write_str(s)
    }
}

/// Question templates for the classification task; `{}` takes the class list.
pub const CLASSIFICATION_TEMPLATES: &[&str] = &[
    "Create a class label for the image from the following categories: {}.",
    "Classify the image into the following categories: {}.",
    "You have been provided with the following categories: {}.",
    "Choose the best categories to describe the image from: {}.",
    "Please suggest a suitable class name based on the provided class type for this image: {}.",
    "Assign a class label to the image from the available categories: {}.",
    "Categorize the image into the subsequent groups: {}.",
    "You are given the following categories to classify the image: {}.",
    "Select the most fitting categories that define the image from: {}.",
    "Please suggest a suitable class name based on the provided class type for this image: {}.",
    "Assign a class label to the image from the available categories: {}.",
    "Categorize the image into the subsequent groups: {}.",
    "You are given the following categories to classify the image: {}.",
];

/// Question templates for visual grounding; `{}` takes the object phrase.
pub const GROUNDING_TEMPLATES: &[&str] = &[
    "Please output the coordinate of the following object: {}.",
    "Kindly provide the position for the object mentioned below: {}.",
    "I request the location for the object outlined here: {}.",
    "Could you please share the placement of the object depicted: {}.",
    "The details for the following object are needed: {}.",
    "Please provide the dimensions corresponding to the following object: {}.",
    "I require the spatial information of the object below: {}.",
    "Kindly share the positional data for the object shown: {}.",
    "The object's placement information is necessary: {}.",
    "Could you output the location of the object below: {}.",
    "I need the position of the object mentioned: {}.",
    "Share the placement of the object outlined here: {}.",
    "Please provide the spatial data for the object depicted: {}.",
    "I'm looking for details about the following object: {}.",
    "Kindly provide the dimensions for the object shown: {}.",
    "It's important to have the spatial coordinates for the object: {}.",
];

/// One record of a public task dataset, ready for templating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicTaskRecord {
    pub dataset: String,
    pub image: String,
    #[serde(flatten)]
    pub payload: TaskPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum TaskPayload {
    Cls { label: String, classes: Vec<String> },
    Vqa { question: String, answer: String },
    Vg { phrase: String, unit_box: UnitBox },
}

/// One instruction-tuning sample: optional task identifier, ordered
/// question/answer turns, source dataset, optional grounding boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionSample {
    pub task: Option<TaskKind>,
    pub turns: Vec<(String, String)>,
    pub source: String,
    pub boxes: Vec<UnitBox>,
}

/// Fill a task template for one record. The template index is drawn
/// uniformly from the task's template list, so a seeded generator makes the
/// choice reproducible.
pub fn apply_task_template(
    record: &PublicTaskRecord,
    task: TaskKind,
    rng: &mut impl Rng,
) -> Result<InstructionSample, InstructError> {
    match (&record.payload, task) {
        (TaskPayload::Cls { label, classes }, TaskKind::Cls) => {
            let template = CLASSIFICATION_TEMPLATES[rng.gen_range(0..CLASSIFICATION_TEMPLATES.len())];
            let question = format!("{task} {}", template.replace("{}", &classes.join(", ")));
            Ok(InstructionSample {
                task: Some(task),
                turns: vec![(question, label.clone())],
                source: record.dataset.clone(),
                boxes: Vec::new(),
            })
        }
        (TaskPayload::Vqa { question, answer }, TaskKind::Vqa) => Ok(InstructionSample {
            task: Some(task),
            turns: vec![(format!("{task} {question}"), answer.clone())],
            source: record.dataset.clone(),
            boxes: Vec::new(),
        }),
        (TaskPayload::Vg { phrase, unit_box }, TaskKind::Vg) => {
            let template = GROUNDING_TEMPLATES[rng.gen_range(0..GROUNDING_TEMPLATES.len())];
            let question = format!("{task} {}", template.replace("{}", phrase));
            Ok(InstructionSample {
                task: Some(task),
                turns: vec![(question, unit_box.display())],
                source: record.dataset.clone(),
                boxes: vec![*unit_box],
            })
        }
        (payload, task) => Err(InstructError::TaskMismatch {
            task,
            record: format!("{payload:?}"),
        }),
    }
}

pub const INSTRUCTION_SCHEMA: &str = "instruction-sample/v1";

/// Wire form of an instruction sample: turns flattened to role/content pairs.
#[derive(Debug, Serialize, Deserialize)]
pub struct WireInstructionSample {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    pub turns: Vec<Turn>,
    pub source: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<UnitBox>,
}

impl InstructionSample {
    pub fn to_wire(&self) -> WireInstructionSample {
        let mut turns = Vec::with_capacity(self.turns.len() * 2);
        for (q, a) in &self.turns {
            turns.push(Turn::user(q.clone()));
            turns.push(Turn::assistant(a.clone()));
        }
        WireInstructionSample {
            schema: INSTRUCTION_SCHEMA.to_string(),
            task: self.task,
            turns,
            source: self.source.clone(),
            boxes: self.boxes.clone(),
        }
    }
}

/// One named input stream for mixing.
#[derive(Debug, Clone)]
pub struct MixSource {
    pub name: String,
    pub weight: f64,
    pub samples: Vec<InstructionSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixReport {
    /// Realized per-source counts.
    pub realized: BTreeMap<String, usize>,
    /// True when the request exceeded the combined source size.
    pub truncated: bool,
}

/// Reference quotas of the stage-2 multi-task mix.
pub fn stage2_default_quotas() -> Vec<(&'static str, usize)> {
    vec![
        ("RSVQA-HR", 10_000),
        ("RSVQA-LR", 500),
        ("UCM", 2_519),
        ("RSVG", 2_428),
        ("DIOR-RSVG", 14_030),
        ("NWPU", 4_941),
        ("METER-ML", 1_400),
        ("RSITMD", 504),
        ("fMoW", 5_000),
        ("RSICD", 1_000),
    ]
}

/// Total of the stage-2 reference mix.
pub const STAGE2_TOTAL: usize = 42_322;

/// Default down-weight applied to multi-task sources when mixed into the
/// stage-3 blend alongside weight-1.0 instruction sources.
pub const STAGE3_MULTITASK_WEIGHT: f64 = 0.25;

/// Proportional integer quotas by largest remainder, capped at source sizes,
/// with deterministic redistribution of any surplus.
fn allocate_quotas(sources: &[MixSource], total: usize) -> Vec<usize> {
    let mut quotas = vec![0usize; sources.len()];
    let capacity: Vec<usize> = sources.iter().map(|s| s.samples.len()).collect();
    let mut remaining = total;

    while remaining > 0 {
        let open: Vec<usize> = (0..sources.len())
            .filter(|&i| sources[i].weight > 0.0 && quotas[i] < capacity[i])
            .collect();
        if open.is_empty() {
            break;
        }
        let weight_sum: f64 = open.iter().map(|&i| sources[i].weight).sum();
        let mut fractional: Vec<(usize, f64)> = Vec::with_capacity(open.len());
        let mut assigned = 0usize;
        for &i in &open {
            let ideal = remaining as f64 * sources[i].weight / weight_sum;
            let headroom = capacity[i] - quotas[i];
            let take = (ideal.floor() as usize).min(headroom);
            quotas[i] += take;
            assigned += take;
            let frac = if quotas[i] < capacity[i] {
                ideal - ideal.floor()
            } else {
                0.0
            };
            fractional.push((i, frac));
        }
        let mut leftover = remaining - assigned;
        if leftover > 0 {
            // Largest fractional part first; ties by source order.
            fractional.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (i, _) in fractional {
                if leftover == 0 {
                    break;
                }
                if quotas[i] < capacity[i] {
                    quotas[i] += 1;
                    leftover -= 1;
                }
            }
        }
        if leftover == remaining {
            break;
        }
        remaining = leftover;
    }
    quotas
}

/// Weighted mixing: per-source quotas from the weights, sampling without
/// replacement inside each source, then a seeded interleave of the union.
pub fn mix_datasets(
    sources: Vec<MixSource>,
    seed: u64,
    total: usize,
) -> Result<(Vec<InstructionSample>, MixReport), InstructError> {
    if sources.iter().any(|s| s.weight < 0.0) || !sources.iter().any(|s| s.weight > 0.0) {
        return Err(InstructError::NoPositiveWeight);
    }
    let combined: usize = sources
        .iter()
        .filter(|s| s.weight > 0.0)
        .map(|s| s.samples.len())
        .sum();
    let truncated = total > combined;
    if truncated {
        log::warn!("requested {total} mixed samples but sources hold {combined}; taking all");
    }
    let target = total.min(combined);
    let quotas = allocate_quotas(&sources, target);

    let mut realized = BTreeMap::new();
    let mut pool: Vec<InstructionSample> = Vec::with_capacity(target);
    for (source, quota) in sources.into_iter().zip(&quotas) {
        realized.insert(source.name.clone(), *quota);
        if *quota == 0 {
            continue;
        }
        let mut rng = crate::rng::subseed_rng(seed, &source.name);
        let mut samples = source.samples;
        samples.shuffle(&mut rng);
        pool.extend(samples.into_iter().take(*quota));
    }
    let mut rng = crate::rng::subseed_rng(seed, "interleave");
    pool.shuffle(&mut rng);
    Ok((pool, MixReport { realized, truncated }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(id: &str, digest: &str, captions: [&str; 5]) -> PublicCaptionEntry {
        PublicCaptionEntry {
            image_id: id.to_string(),
            captions: captions.iter().map(|s| s.to_string()).collect(),
            digest: digest.to_string(),
        }
    }

    const LONG: &str = "a long caption with well over ten whitespace separated tokens in it";

    #[test]
    fn short_captions_are_removed_but_entry_survives() {
        let e = entry("img1", "d1", [LONG, "a field", LONG, LONG, LONG]);
        let out = filter_public_captions(&[e], &ConstantScorer(50.0), 10, 15.0);
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].captions.len(), 4);
    }

    #[test]
    fn all_short_captions_drop_the_entry() {
        let e = entry("img1", "d1", ["a", "b", "c", "d", "e"]);
        let out = filter_public_captions(&[e], &ConstantScorer(50.0), 10, 15.0);
        assert!(out.kept.is_empty());
        assert_eq!(out.rejected[0].1, "all-captions-short");
    }

    #[test]
    fn similarity_threshold_is_strict() {
        let low = entry("low", "d1", [LONG; 5]);
        let out = filter_public_captions(&[low], &ConstantScorer(14.9), 10, 15.0);
        assert_eq!(out.rejected[0].1, "low-similarity");

        let edge = entry("edge", "d2", [LONG; 5]);
        let out = filter_public_captions(&[edge], &ConstantScorer(15.0), 10, 15.0);
        assert_eq!(out.kept.len(), 1);
    }

    #[test]
    fn duplicate_digests_drop_second() {
        let a = entry("a", "same", [LONG; 5]);
        let b = entry("b", "same", [LONG; 5]);
        let out = filter_public_captions(&[a, b], &ConstantScorer(50.0), 10, 15.0);
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].image_id, "a");
        assert_eq!(
            out.rejected,
            vec![("b".to_string(), "duplicate".to_string())]
        );
    }

    struct FailingScorer;
    impl SimilarityScorer for FailingScorer {
        fn score(&self, _: &PublicCaptionEntry, _: &[String]) -> Result<f64, String> {
            Err("no model".to_string())
        }
    }

    #[test]
    fn scorer_failure_rejects_entry() {
        let e = entry("img1", "d1", [LONG; 5]);
        let out = filter_public_captions(&[e], &FailingScorer, 10, 15.0);
        assert_eq!(out.rejected[0].1, "scorer-error");
    }

    #[test]
    fn rejection_reasons_partition() {
        let entries = vec![
            entry("keep", "d1", [LONG; 5]),
            entry("dupe", "d1", [LONG; 5]),
            entry("short", "d2", ["a", "b", "c", "d", "e"]),
        ];
        let out = filter_public_captions(&entries, &ConstantScorer(50.0), 10, 15.0);
        assert_eq!(out.kept.len() + out.rejected.len(), 3);
        let mut ids: Vec<&str> = out.rejected.iter().map(|(id, _)| id.as_str()).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec!["dupe", "short"]);
    }

    fn px(x1: f64, y1: f64, x2: f64, y2: f64) -> PixelBox {
        PixelBox { x1, y1, x2, y2 }
    }

    #[test]
    fn normalize_reference_box() {
        let b = normalize_box(&px(0.0, 191.0, 768.0, 581.0), 768.0, 768.0).unwrap();
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (0.0, 0.249, 1.0, 0.757));
        assert_eq!(b.display(), "[0.0, 0.249, 1.0, 0.757]");
    }

    #[test]
    fn normalize_full_frame() {
        let b = normalize_box(&px(0.0, 0.0, 640.0, 480.0), 640.0, 480.0).unwrap();
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn normalize_round_trip_bound() {
        let cases = [
            px(3.0, 191.0, 760.0, 581.0),
            px(0.0, 0.0, 767.0, 1.0),
            px(123.0, 456.0, 124.0, 457.0),
        ];
        for case in cases {
            let unit = normalize_box(&case, 768.0, 768.0).unwrap();
            let back = denormalize_box(&unit, 768.0, 768.0);
            for (a, b) in [
                (back.x1, case.x1),
                (back.y1, case.y1),
                (back.x2, case.x2),
                (back.y2, case.y2),
            ] {
                assert!((a - b).abs() <= 0.5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn normalize_stable_on_unit_input() {
        let unit = normalize_box(&px(0.12, 0.3, 0.5, 0.9), 1.0, 1.0).unwrap();
        let again = normalize_box(&px(unit.x1, unit.y1, unit.x2, unit.y2), 1.0, 1.0).unwrap();
        assert_eq!(unit, again, "already-unit boxes pass through");
    }

    #[test]
    fn inverted_box_rejected() {
        assert!(normalize_box(&px(10.0, 0.0, 5.0, 5.0), 100.0, 100.0).is_err());
        assert!(normalize_box(&px(0.0, 0.0, 200.0, 5.0), 100.0, 100.0).is_err());
    }

    use crate::align::{AssociatedFeature, ImageExtent, SampleStatus};
    use crate::geo::{GeoBBox, MercatorPoint};
    use indexmap::IndexMap;

    fn sample_with_pairs(id: i64, tags: Vec<(&str, &str)>) -> AlignedSample {
        let associated = vec![AssociatedFeature {
            id: 1,
            tags: tags
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect::<IndexMap<_, _>>(),
            pixel_box: px(0.0, 0.0, 100.0, 100.0),
        }];
        AlignedSample {
            extent: ImageExtent {
                footprint: GeoBBox {
                    min: MercatorPoint { x: 0.0, y: 0.0 },
                    max: MercatorPoint { x: 768.0, y: 768.0 },
                },
                side_m: 768.0,
                pixel_size: 768,
                resolution_m_per_px: 1.0,
                acquisition_ref: format!("s{id}"),
            },
            anchor_id: id,
            associated,
            status: SampleStatus::Retained,
            country: None,
            city: None,
        }
    }

    #[test]
    fn rich_selection_order_and_ties() {
        let samples = vec![
            sample_with_pairs(
                1,
                vec![("a", "1"), ("b", "2"), ("c", "3"), ("d", "4"), ("e", "5")],
            ),
            sample_with_pairs(2, vec![("a", "1"), ("b", "2"), ("c", "3")]),
            sample_with_pairs(3, vec![("a", "1"), ("b", "2"), ("c", "3")]),
        ];
        let sel = select_rich_samples(&samples, 2);
        assert_eq!(sel.ids, vec![1, 2]);
        assert!(!sel.exhausted);

        assert!(select_rich_samples(&samples, 0).ids.is_empty());

        let all = select_rich_samples(&samples, 10);
        assert_eq!(all.ids, vec![1, 2, 3]);
        assert!(all.exhausted);
    }

    #[test]
    fn builtin_instruct_templates_load() {
        let t = InstructTemplates::builtin();
        assert!(t
            .reasoning
            .system
            .starts_with("You are an AI visual assistant that can analyze a single image."));
        assert_eq!(t.reasoning.exchange_count(), 1);
        assert_eq!(t.detail.exchange_count(), 1);
        assert_eq!(t.conversation.exchange_count(), 1);
        assert!(t.reasoning.shots[0]
            .content
            .contains("leisure: park -> [0.0, 0.0, 1.0, 0.887]"));
    }

    #[test]
    fn grounded_prompt_shapes() {
        let sample = sample_with_pairs(9, vec![("leisure", "park")]);
        let grounded = ground_sample(&sample, "A park.").unwrap();
        assert_eq!(grounded.objects.len(), 1);
        assert_eq!(grounded.objects[0].tagline, "leisure: park");

        let templates = InstructTemplates::builtin();
        let req = build_instruct_prompt(&grounded, PromptKind::Reasoning, &templates);
        let user = &req.turns.last().unwrap().content;
        assert!(user.starts_with("A park.\nleisure: park -> [0.0, 0.0, "));
        assert!(req.validate().is_ok());

        // Three kinds share the user payload but carry distinct prefixes.
        let reqs: Vec<ChatRequest> = [
            PromptKind::Reasoning,
            PromptKind::Detail,
            PromptKind::Conversation,
        ]
        .iter()
        .map(|k| build_instruct_prompt(&grounded, *k, &templates))
        .collect();
        assert_eq!(reqs[0].turns.last(), reqs[1].turns.last());
        assert_ne!(reqs[0].system, reqs[1].system);
        assert_ne!(reqs[1].system, reqs[2].system);
    }

    #[test]
    fn task_templates_fill_slots() {
        let record = PublicTaskRecord {
            dataset: "NWPU".to_string(),
            image: "img".to_string(),
            payload: TaskPayload::Cls {
                label: "beach".to_string(),
                classes: vec!["beach".to_string(), "forest".to_string()],
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = apply_task_template(&record, TaskKind::Cls, &mut rng).unwrap();
        assert!(s.turns[0].0.starts_with("[CLS] "));
        assert!(s.turns[0].0.contains("beach, forest"));
        assert_eq!(s.turns[0].1, "beach");

        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let again = apply_task_template(&record, TaskKind::Cls, &mut rng2).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn vg_template_carries_box() {
        let record = PublicTaskRecord {
            dataset: "DIOR-RSVG".to_string(),
            image: "img".to_string(),
            payload: TaskPayload::Vg {
                phrase: "the white storage tank".to_string(),
                unit_box: UnitBox::new(0.1, 0.2, 0.3, 0.4).unwrap(),
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = apply_task_template(&record, TaskKind::Vg, &mut rng).unwrap();
        assert!(s.turns[0].0.contains("the white storage tank"));
        assert_eq!(s.turns[0].1, "[0.1, 0.2, 0.3, 0.4]");
        assert_eq!(s.boxes.len(), 1);
    }

    #[test]
    fn task_mismatch_rejected() {
        let record = PublicTaskRecord {
            dataset: "NWPU".to_string(),
            image: "img".to_string(),
            payload: TaskPayload::Cls {
                label: "beach".to_string(),
                classes: vec![],
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            apply_task_template(&record, TaskKind::Vg, &mut rng),
            Err(InstructError::TaskMismatch { .. })
        ));
    }

    fn dummy_samples(source: &str, n: usize) -> Vec<InstructionSample> {
        (0..n)
            .map(|i| InstructionSample {
                task: None,
                turns: vec![(format!("q{i}"), format!("a{i}"))],
                source: source.to_string(),
                boxes: Vec::new(),
            })
            .collect()
    }

    #[test]
    fn mix_even_weights_split_evenly() {
        let sources = vec![
            MixSource {
                name: "A".to_string(),
                weight: 1.0,
                samples: dummy_samples("A", 1_000),
            },
            MixSource {
                name: "B".to_string(),
                weight: 1.0,
                samples: dummy_samples("B", 1_000),
            },
        ];
        let (mixed, report) = mix_datasets(sources, 7, 100).unwrap();
        assert_eq!(mixed.len(), 100);
        assert_eq!(report.realized["A"], 50);
        assert_eq!(report.realized["B"], 50);
    }

    #[test]
    fn mix_zero_weight_excluded() {
        let sources = vec![
            MixSource {
                name: "A".to_string(),
                weight: 1.0,
                samples: dummy_samples("A", 50),
            },
            MixSource {
                name: "B".to_string(),
                weight: 0.0,
                samples: dummy_samples("B", 50),
            },
        ];
        let (mixed, report) = mix_datasets(sources, 7, 30).unwrap();
        assert_eq!(report.realized["B"], 0);
        assert!(mixed.iter().all(|s| s.source == "A"));
    }

    #[test]
    fn mix_deterministic_and_truncating() {
        let make = || {
            vec![MixSource {
                name: "A".to_string(),
                weight: 1.0,
                samples: dummy_samples("A", 10),
            }]
        };
        let (a, ra) = mix_datasets(make(), 3, 100).unwrap();
        let (b, rb) = mix_datasets(make(), 3, 100).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.truncated);
        assert_eq!(a.len(), 10);
    }

    #[test]
    fn stage2_reference_quotas_reproduced() {
        let sources: Vec<MixSource> = stage2_default_quotas()
            .into_iter()
            .map(|(name, count)| MixSource {
                name: name.to_string(),
                weight: count as f64,
                samples: dummy_samples(name, count + 100),
            })
            .collect();
        let (mixed, report) = mix_datasets(sources, 1, STAGE2_TOTAL).unwrap();
        assert_eq!(mixed.len(), STAGE2_TOTAL);
        for (name, count) in stage2_default_quotas() {
            assert_eq!(report.realized[name], count, "{name}");
        }
    }

    #[test]
    fn mix_needs_a_positive_weight() {
        let sources = vec![MixSource {
            name: "A".to_string(),
            weight: 0.0,
            samples: dummy_samples("A", 5),
        }];
        assert!(matches!(
            mix_datasets(sources, 1, 5),
            Err(InstructError::NoPositiveWeight)
        ));
    }

    #[test]
    fn public_conv_request_lists_captions() {
        let template = PromptTemplate::parse(BUILTIN_PUBLIC_CONV_TEMPLATE).unwrap();
        let entry = CuratedEntry {
            image_id: "img".to_string(),
            captions: vec!["one".to_string(), "two".to_string()],
            similarity_pct: 42.0,
        };
        let req = build_public_conv_request(&entry, &template);
        assert_eq!(req.turns.last().unwrap().content, "one\ntwo");
        assert!(req.validate().is_ok());
    }

    #[test]
    fn entry_validation_requires_five_captions() {
        let mut e = entry("x", "d", [LONG; 5]);
        assert!(e.validate().is_ok());
        e.captions.pop();
        assert!(matches!(
            e.validate(),
            Err(InstructError::BadCaptionCount { got: 4, .. })
        ));
    }
}
