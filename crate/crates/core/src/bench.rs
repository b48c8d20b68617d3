//! Single-choice benchmark harness: load validated question files, run the
//! shuffled multi-trial protocol against a chat client, and report
//! per-dimension accuracy.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::chat::{ChatClient, ChatRequest, SamplingParams, Turn};
use crate::rng::subseed_rng;

/// The eleven evaluation sub-dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Identity,
    Color,
    Orientation,
    Shape,
    Area,
    Resolution,
    Modality,
    Location,
    Distance,
    Quantity,
    Reasoning,
}

impl Dimension {
    pub const ALL: [Dimension; 11] = [
        Dimension::Identity,
        Dimension::Color,
        Dimension::Orientation,
        Dimension::Shape,
        Dimension::Area,
        Dimension::Resolution,
        Dimension::Modality,
        Dimension::Location,
        Dimension::Distance,
        Dimension::Quantity,
        Dimension::Reasoning,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Dimension::Identity => "identity",
            Dimension::Color => "color",
            Dimension::Orientation => "orientation",
            Dimension::Shape => "shape",
            Dimension::Area => "area",
            Dimension::Resolution => "resolution",
            Dimension::Modality => "modality",
            Dimension::Location => "location",
            Dimension::Distance => "distance",
            Dimension::Quantity => "quantity",
            Dimension::Reasoning => "reasoning",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
pub enum BenchError {
    Io(std::io::Error),
    Malformed {
        line: usize,
        message: String,
    },
    Invalid {
        id: String,
        field: &'static str,
        message: String,
    },
    DuplicateId(String),
}

impl fmt::Display for BenchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchError::Io(e) => write!(f, "cannot read benchmark: {e}"),
            BenchError::Malformed { line, message } => {
                write!(f, "line {line}: malformed question: {message}")
            }
            BenchError::Invalid { id, field, message } => {
                write!(f, "question {id}: invalid {field}: {message}")
            }
            BenchError::DuplicateId(id) => write!(f, "duplicate question id {id}"),
        }
    }
}

impl std::error::Error for BenchError {}

impl From<std::io::Error> for BenchError {
    fn from(e: std::io::Error) -> Self {
        BenchError::Io(e)
    }
}

/// One single-choice question with 2-4 choices and dimension tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchQuestion {
    pub id: String,
    pub image: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer: usize,
    pub dimensions: Vec<Dimension>,
}

impl BenchQuestion {
    pub fn validate(&self) -> Result<(), BenchError> {
        let invalid = |field, message: String| BenchError::Invalid {
            id: self.id.clone(),
            field,
            message,
        };
        if !(2..=4).contains(&self.choices.len()) {
            return Err(invalid(
                "choices",
                format!("need 2 to 4 candidate answers, got {}", self.choices.len()),
            ));
        }
        if self.answer >= self.choices.len() {
            return Err(invalid(
                "answer",
                format!(
                    "correct index {} outside {} choices",
                    self.answer,
                    self.choices.len()
                ),
            ));
        }
        if self.dimensions.is_empty() {
            return Err(invalid("dimensions", "no dimension tags".to_string()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.dimensions {
            if !seen.insert(d) {
                return Err(invalid("dimensions", format!("tag {d} repeats")));
            }
        }
        Ok(())
    }
}

/// Load a newline-delimited benchmark file, validating every invariant.
pub fn load_benchmark<R: BufRead>(reader: R) -> Result<Vec<BenchQuestion>, BenchError> {
    let mut questions = Vec::new();
    let mut ids = std::collections::BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: BenchQuestion = serde_json::from_str(&line).map_err(|e| BenchError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        q.validate()?;
        if !ids.insert(q.id.clone()) {
            return Err(BenchError::DuplicateId(q.id));
        }
        questions.push(q);
    }
    Ok(questions)
}

/// A question with its choices permuted for one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ShuffledQuestion<'a> {
    pub question: &'a BenchQuestion,
    /// `order[position] = original index`.
    pub order: Vec<usize>,
    /// Position of the correct choice after shuffling.
    pub correct_position: usize,
}

impl ShuffledQuestion<'_> {
    pub fn label(position: usize) -> char {
        (b'A' + position as u8) as char
    }

    pub fn correct_letter(&self) -> char {
        Self::label(self.correct_position)
    }

    pub fn choice_at(&self, position: usize) -> &str {
        &self.question.choices[self.order[position]]
    }

    pub fn correct_text(&self) -> &str {
        &self.question.choices[self.question.answer]
    }
}

/// Permute choices with a generator seeded by (seed, question id, trial).
pub fn shuffle_choices<'a>(q: &'a BenchQuestion, trial: u32, seed: u64) -> ShuffledQuestion<'a> {
    let mut rng = subseed_rng(seed, &format!("{}/{trial}", q.id));
    let mut order: Vec<usize> = (0..q.choices.len()).collect();
    order.shuffle(&mut rng);
    let correct_position = order
        .iter()
        .position(|&orig| orig == q.answer)
        .expect("answer index survives permutation");
    ShuffledQuestion {
        question: q,
        order,
        correct_position,
    }
}

/// Exact evaluation prompt: header, question line, lettered choice block,
/// trailing answer cue.
pub fn build_eval_prompt(sq: &ShuffledQuestion) -> String {
    let choices = (0..sq.order.len())
        .map(|pos| format!("{}. {}", ShuffledQuestion::label(pos), sq.choice_at(pos)))
        .collect::<Vec<_>>()
        .join("\n");
    format!(
        "Please answer the question based on the given choices:\nQuestion: {}\nChoice: {}\nAnswer:",
        sq.question.question, choices
    )
}

/// An answer counts as correct when the first standalone letter token names
/// the correct label, or when the text-containment scan (longer choice
/// texts checked first, so substrings cannot shadow them) lands on the
/// correct choice.
pub fn match_answer(raw: &str, sq: &ShuffledQuestion) -> bool {
    if let Some(letter) = first_letter_token(raw) {
        if letter == sq.correct_letter().to_ascii_lowercase() {
            return true;
        }
    }
    let lowered = raw.to_lowercase();
    let mut by_length: Vec<usize> = (0..sq.question.choices.len()).collect();
    by_length.sort_by(|&a, &b| {
        sq.question.choices[b]
            .len()
            .cmp(&sq.question.choices[a].len())
            .then(a.cmp(&b))
    });
    for idx in by_length {
        let text = sq.question.choices[idx].to_lowercase();
        if !text.is_empty() && lowered.contains(&text) {
            return idx == sq.question.answer;
        }
    }
    false
}

fn first_letter_token(raw: &str) -> Option<char> {
    for token in raw.split_whitespace() {
        let stripped = token.trim_matches(|c: char| !c.is_alphanumeric());
        let mut chars = stripped.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            if c.is_ascii_alphabetic() {
                return Some(c.to_ascii_lowercase());
            }
        }
    }
    None
}

/// Outcome of one generation trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub question_id: String,
    pub trial: u32,
    pub order: Vec<usize>,
    pub raw: String,
    pub correct: bool,
}

/// How trial verdicts combine into a question score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringPolicy {
    /// A question scores 1 only when every trial is correct.
    AllTrialsCorrect,
    /// A question scores the fraction of correct trials.
    AverageOfTrials,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub trials: u32,
    pub seed: u64,
    pub policy: ScoringPolicy,
    pub concurrency: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            trials: 4,
            seed: 0,
            policy: ScoringPolicy::AllTrialsCorrect,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionRow {
    pub dimension: Dimension,
    pub correct: f64,
    pub total: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: String,
    pub rows: Vec<DimensionRow>,
    pub overall_correct: f64,
    pub overall_total: u64,
    pub overall_accuracy: f64,
}

pub const REPORT_SCHEMA: &str = "bench-report/v1";

/// Full evaluation artifact: the report table plus every trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: BenchReport,
    pub trials: Vec<TrialResult>,
    pub question_scores: Vec<(String, f64)>,
}

/// Run the protocol: per question, `trials` shuffled generations (trials of
/// one question stay sequential); questions run concurrently up to the
/// configured limit. An endpoint failure marks that trial incorrect.
pub fn evaluate(
    client: &dyn ChatClient,
    questions: &[BenchQuestion],
    opts: &EvalOptions,
) -> Evaluation {
    let n = questions.len();
    let slots: Vec<Mutex<Option<Vec<TrialResult>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let queue: Mutex<std::collections::VecDeque<usize>> = Mutex::new((0..n).collect());
    let workers = opts.concurrency.max(1).min(n.max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = match queue.lock().unwrap().pop_front() {
                    Some(i) => i,
                    None => break,
                };
                let q = &questions[idx];
                let mut trials = Vec::with_capacity(opts.trials as usize);
                for trial in 0..opts.trials {
                    let sq = shuffle_choices(q, trial, opts.seed);
                    let prompt = build_eval_prompt(&sq);
                    let request = ChatRequest {
                        system: String::new(),
                        turns: vec![Turn::user(prompt)],
                        sampling: SamplingParams::default(),
                        attachment: Some(q.image.clone()),
                    };
                    let (raw, correct) = match client.complete(&request) {
                        Ok(resp) => {
                            let ok = match_answer(&resp.text, &sq);
                            (resp.text, ok)
                        }
                        Err(err) => {
                            log::warn!("question {} trial {trial}: {err}", q.id);
                            (format!("<error: {err}>"), false)
                        }
                    };
                    trials.push(TrialResult {
                        question_id: q.id.clone(),
                        trial,
                        order: sq.order.clone(),
                        raw,
                        correct,
                    });
                }
                *slots[idx].lock().unwrap() = Some(trials);
            });
        }
    });

    let mut all_trials = Vec::with_capacity(n * opts.trials as usize);
    let mut question_scores = Vec::with_capacity(n);
    for (q, slot) in questions.iter().zip(slots) {
        let trials = slot.into_inner().unwrap().expect("every question ran");
        let correct_count = trials.iter().filter(|t| t.correct).count();
        let score = match opts.policy {
            ScoringPolicy::AllTrialsCorrect => {
                if correct_count == trials.len() && !trials.is_empty() {
                    1.0
                } else {
                    0.0
                }
            }
            ScoringPolicy::AverageOfTrials => {
                if trials.is_empty() {
                    0.0
                } else {
                    correct_count as f64 / trials.len() as f64
                }
            }
        };
        question_scores.push((q.id.clone(), score));
        all_trials.extend(trials);
    }

    let mut per_dim: BTreeMap<Dimension, (f64, u64)> = BTreeMap::new();
    let mut overall_correct = 0.0;
    for (q, (_, score)) in questions.iter().zip(&question_scores) {
        overall_correct += score;
        for d in &q.dimensions {
            let entry = per_dim.entry(*d).or_insert((0.0, 0));
            entry.0 += score;
            entry.1 += 1;
        }
    }
    let rows = per_dim
        .into_iter()
        .map(|(dimension, (correct, total))| DimensionRow {
            dimension,
            correct,
            total,
            accuracy: if total == 0 {
                0.0
            } else {
                correct / total as f64
            },
        })
        .collect();
    let report = BenchReport {
        schema: REPORT_SCHEMA.to_string(),
        rows,
        overall_correct,
        overall_total: n as u64,
        overall_accuracy: if n == 0 {
            0.0
        } else {
            overall_correct / n as f64
        },
    };
    Evaluation {
        report,
        trials: all_trials,
        question_scores,
    }
}
