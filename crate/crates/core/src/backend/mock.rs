//! Deterministic offline backend. Scripted fixtures take precedence; any
//! unscripted request is answered by hash-seeded synthesis keyed on the
//! prompt content, so runs are bit-reproducible for a fixed seed.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::jsonl::sha256_hex;
use crate::prompts;

use super::{
    BackendError, ChatBackend, ChatRequest, EmbedBackend, EmbeddingVector, ScoreBackend,
    TokenScoreRow,
};

/// One scripted fixture entry. Keys are hex SHA-256 digests: the prompt for
/// chat, `prompt \0 response` for rows, the text for embeddings.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum FixtureEntry {
    Chat {
        key: String,
        response: String,
    },
    Rows {
        key: String,
        rows: Vec<TokenScoreRow>,
    },
    Embedding {
        key: String,
        values: Vec<f64>,
    },
}

pub struct MockBackend {
    seed: u64,
    embed_dim: usize,
    scripted_chat: HashMap<String, String>,
    scripted_rows: HashMap<String, Vec<TokenScoreRow>>,
    scripted_embeddings: HashMap<String, Vec<f64>>,
    fail_after: Option<u64>,
    chat_calls: AtomicU64,
    score_calls: AtomicU64,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend {
            seed,
            embed_dim: 16,
            scripted_chat: HashMap::new(),
            scripted_rows: HashMap::new(),
            scripted_embeddings: HashMap::new(),
            fail_after: None,
            chat_calls: AtomicU64::new(0),
            score_calls: AtomicU64::new(0),
        }
    }

    pub fn with_embed_dim(mut self, dim: usize) -> Self {
        self.embed_dim = dim.max(1);
        self
    }

    /// Inject a transport-level failure on every chat call after the first
    /// `n` have succeeded.
    pub fn with_fail_after(mut self, n: u64) -> Self {
        self.fail_after = Some(n);
        self
    }

    pub fn script_chat(&mut self, prompt: &str, response: &str) {
        self.scripted_chat
            .insert(sha256_hex(prompt.as_bytes()), response.to_string());
    }

    pub fn script_rows(&mut self, prompt: &str, response: &str, rows: Vec<TokenScoreRow>) {
        self.scripted_rows.insert(rows_key(prompt, response), rows);
    }

    pub fn script_embedding(&mut self, text: &str, values: Vec<f64>) {
        self.scripted_embeddings
            .insert(sha256_hex(text.as_bytes()), values);
    }

    /// Load scripted entries from a JSONL fixture file.
    pub fn load_fixture(&mut self, path: &Path) -> crate::Result<usize> {
        let entries: Vec<FixtureEntry> = crate::jsonl::read_jsonl(path)?;
        let n = entries.len();
        for entry in entries {
            match entry {
                FixtureEntry::Chat { key, response } => {
                    self.scripted_chat.insert(key, response);
                }
                FixtureEntry::Rows { key, rows } => {
                    self.scripted_rows.insert(key, rows);
                }
                FixtureEntry::Embedding { key, values } => {
                    self.scripted_embeddings.insert(key, values);
                }
            }
        }
        Ok(n)
    }

    pub fn chat_call_count(&self) -> u64 {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn score_call_count(&self) -> u64 {
        self.score_calls.load(Ordering::SeqCst)
    }

    fn rng_for(&self, parts: &[&str]) -> ChaCha12Rng {
        let mut label = String::new();
        for part in parts {
            label.push_str(part);
            label.push('\u{0}');
        }
        crate::rng::seeded_rng(self.seed, &label)
    }

    fn synthesize_chat(&self, prompt: &str) -> String {
        if prompt.starts_with(prompts::ATTRIBUTE_ENUMERATION_HEAD) {
            let text = slice_between(prompt, "\nInput: ", "\n\nAttribute:").unwrap_or(prompt);
            synth_attributes(&mut self.rng_for(&["attr", text]))
        } else if prompt.starts_with(prompts::OPEN_TASK_HEAD) {
            let perspective =
                slice_between(prompt, "relying on specific attribute: ", ".\n").unwrap_or("tone");
            synth_open_prompts(perspective)
        } else if prompt.starts_with(prompts::CONSTRAINED_TASK_HEAD) {
            let perspective =
                slice_between(prompt, "tasks focused on **", "**").unwrap_or("tone");
            synth_tasks_json(perspective, &mut self.rng_for(&["tasks", perspective]))
        } else if prompt.starts_with(prompts::INSTRUCTION_REWRITE_HEAD) {
            let name = slice_between(prompt, "\nTask Name: ", "\n").unwrap_or("task");
            let desc = slice_between(prompt, "\nTask Description:", "\n").unwrap_or("");
            synth_instruction_body(name, desc)
        } else if prompt.starts_with(prompts::DEMO_GENERATION_HEAD) {
            let desc = slice_between(prompt, "\nTask Description:\n", "\n").unwrap_or("");
            let forced = slice_between(prompt, "must be exactly: ", "\n");
            synth_demos(desc, forced, &mut self.rng_for(&["demos", prompt]))
        } else {
            synth_answer(prompt, &mut self.rng_for(&["answer", prompt]))
        }
    }
}

impl ChatBackend for MockBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        request.validate()?;
        let call = self.chat_calls.fetch_add(1, Ordering::SeqCst) + 1;
        if let Some(limit) = self.fail_after {
            if call > limit {
                return Err(BackendError::Http {
                    status: 503,
                    request: request.request_id(),
                    msg: format!("injected failure after {limit} calls"),
                });
            }
        }
        let key = sha256_hex(request.prompt.as_bytes());
        if let Some(response) = self.scripted_chat.get(&key) {
            return Ok(response.clone());
        }
        Ok(self.synthesize_chat(&request.prompt))
    }
}

impl ScoreBackend for MockBackend {
    fn score_tokens(
        &self,
        prompt: &str,
        response: &str,
        k: usize,
    ) -> Result<Vec<TokenScoreRow>, BackendError> {
        if response.split_whitespace().next().is_none() {
            return Err(BackendError::InvalidRequest(
                "response tokenizes to zero tokens".into(),
            ));
        }
        if k == 0 {
            return Err(BackendError::InvalidRequest("k must be >= 1".into()));
        }
        self.score_calls.fetch_add(1, Ordering::SeqCst);
        if let Some(rows) = self.scripted_rows.get(&rows_key(prompt, response)) {
            return Ok(rows.clone());
        }
        let tokens: Vec<&str> = response.split_whitespace().collect();
        let mut rows = Vec::with_capacity(tokens.len());
        for (idx, token) in tokens.iter().enumerate() {
            let mut rng = self.rng_for(&["score", prompt, response, &idx.to_string()]);
            rows.push(synth_score_row(token, k, &mut rng));
        }
        Ok(rows)
    }

    fn count_tokens(&self, text: &str) -> Option<usize> {
        Some(text.split_whitespace().count())
    }
}

impl EmbedBackend for MockBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::InvalidRequest("empty embed batch".into()));
        }
        let mut out = Vec::with_capacity(texts.len());
        for text in texts {
            let key = sha256_hex(text.as_bytes());
            let values = if let Some(v) = self.scripted_embeddings.get(&key) {
                v.clone()
            } else {
                let mut rng = self.rng_for(&["embed", text]);
                let mut v: Vec<f64> = (0..self.embed_dim)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                for x in &mut v {
                    *x /= norm;
                }
                v
            };
            if values.len() != out.first().map_or(values.len(), |e: &EmbeddingVector| e.dim) {
                return Err(BackendError::InvalidRequest(
                    "embedding dimension mismatch within batch".into(),
                ));
            }
            out.push(EmbeddingVector::new(values));
        }
        Ok(out)
    }
}

fn rows_key(prompt: &str, response: &str) -> String {
    let mut buf = Vec::with_capacity(prompt.len() + response.len() + 1);
    buf.extend_from_slice(prompt.as_bytes());
    buf.push(0);
    buf.extend_from_slice(response.as_bytes());
    sha256_hex(&buf)
}

fn slice_between<'a>(haystack: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = haystack.find(start)? + start.len();
    let until = haystack[from..].find(end)? + from;
    Some(&haystack[from..until])
}

const LABELS: [(&str, f64); 3] = [("Positive", 0.50), ("Negative", 0.30), ("Neutral", 0.20)];

fn weighted_label(rng: &mut ChaCha12Rng) -> &'static str {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (label, w) in LABELS {
        acc += w;
        if u < acc {
            return label;
        }
    }
    "Neutral"
}

/// (name, description, values) vocabulary for attribute synthesis. Draw
/// weights decay with position so pool counts span the keep threshold.
const ATTRIBUTE_VOCAB: [(&str, &str, [&str; 3]); 36] = [
    ("tone", "the overall emotional coloring of the text", ["negative", "positive", "mixed"]),
    ("sentiment polarity", "whether the expressed opinion is positive, negative, or neutral", ["negative", "positive", "neutral"]),
    ("emotional intensity", "how strongly the emotion is expressed", ["high", "moderate", "low"]),
    ("sarcasm", "whether the text uses irony to convey the opposite of its literal meaning", ["present", "absent", "mild"]),
    ("subjectivity", "the degree to which the text expresses personal opinion rather than fact", ["high", "moderate", "low"]),
    ("frustration", "expressed annoyance at an unmet expectation", ["strong", "mild", "absent"]),
    ("satisfaction", "contentment with the product or experience", ["high", "partial", "none"]),
    ("politeness", "the courtesy level of the phrasing", ["polite", "neutral", "rude"]),
    ("formality", "how formal or casual the register is", ["casual", "formal", "mixed"]),
    ("urgency", "pressure for immediate action or resolution", ["high", "low", "none"]),
    ("disappointment", "letdown relative to prior expectations", ["strong", "mild", "absent"]),
    ("enthusiasm", "eager excitement about the subject", ["high", "moderate", "none"]),
    ("humor", "playful or comedic framing", ["present", "absent", "dry"]),
    ("aggression", "hostile or confrontational phrasing", ["overt", "mild", "absent"]),
    ("empathy", "concern for other people's experience", ["high", "low", "absent"]),
    ("trust", "confidence in the product or vendor", ["high", "shaken", "none"]),
    ("skepticism", "doubt about claims made to the author", ["strong", "mild", "absent"]),
    ("gratitude", "expressed thanks or appreciation", ["explicit", "implied", "absent"]),
    ("regret", "wishing a past choice had been different", ["strong", "mild", "absent"]),
    ("excitement", "anticipation or thrill about the subject", ["high", "moderate", "none"]),
    ("anxiety", "worry about an uncertain outcome", ["high", "low", "absent"]),
    ("hope", "optimistic expectation for the future", ["strong", "faint", "absent"]),
    ("pride", "satisfaction in one's own choice or achievement", ["evident", "mild", "absent"]),
    ("contempt", "disdain toward the subject", ["overt", "subtle", "absent"]),
    ("surprise", "reaction to an unexpected outcome", ["positive", "negative", "none"]),
    ("confusion", "difficulty understanding the subject", ["high", "mild", "none"]),
    ("certainty", "confidence with which claims are asserted", ["high", "hedged", "low"]),
    ("negation usage", "reliance on negated phrasing to carry the opinion", ["heavy", "light", "none"]),
    ("comparative framing", "judging the subject against an alternative", ["explicit", "implicit", "absent"]),
    ("temporal focus", "orientation toward past, present or future experience", ["past", "present", "future"]),
    ("personal experience", "grounding in first-hand use rather than hearsay", ["first-hand", "second-hand", "unclear"]),
    ("recommendation stance", "whether the author endorses or warns against the subject", ["endorses", "warns", "neutral"]),
    ("exaggeration", "hyperbolic overstatement for effect", ["strong", "mild", "absent"]),
    ("criticism severity", "harshness of the negative judgment", ["severe", "moderate", "gentle"]),
    ("praise specificity", "whether approval cites concrete details", ["specific", "generic", "absent"]),
    ("ambivalence", "simultaneous positive and negative leanings", ["strong", "slight", "absent"]),
];

fn synth_attributes(rng: &mut ChaCha12Rng) -> String {
    let n = rng.gen_range(2..=5usize);
    let mut picked: Vec<usize> = Vec::new();
    let weight_total: f64 = (0..ATTRIBUTE_VOCAB.len()).map(|i| 1.0 / (i as f64 + 2.0)).sum();
    while picked.len() < n {
        let mut u: f64 = rng.gen::<f64>() * weight_total;
        let mut idx = ATTRIBUTE_VOCAB.len() - 1;
        for i in 0..ATTRIBUTE_VOCAB.len() {
            u -= 1.0 / (i as f64 + 2.0);
            if u <= 0.0 {
                idx = i;
                break;
            }
        }
        if !picked.contains(&idx) {
            picked.push(idx);
        }
    }
    let mut out = String::new();
    for idx in picked {
        let (name, desc, values) = ATTRIBUTE_VOCAB[idx];
        let value = values[rng.gen_range(0..values.len())];
        let styled = match rng.gen_range(0..3u8) {
            0 => name.to_string(),
            1 => capitalize_words(name),
            _ => format!("{} ", capitalize_words(name)),
        };
        out.push_str(&format!(
            "Attribute: {styled}\nAttribute Description: {desc}\nAttribute Value: {value}\n\n"
        ));
    }
    out.trim_end().to_string()
}

fn capitalize_words(s: &str) -> String {
    s.split(' ')
        .map(|w| {
            let mut chars = w.chars();
            match chars.next() {
                Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn synth_open_prompts(perspective: &str) -> String {
    format!(
        "1. Deconstruct this text by describing its {perspective}, citing the specific phrases that reveal it.\n\
         2. What does the {perspective} of this text suggest about the author's underlying stance? Provide a free-form analysis."
    )
}

fn synth_tasks_json(perspective: &str, rng: &mut ChaCha12Rng) -> String {
    let mut tasks = vec![
        serde_json::json!({
            "task_name": format!("{perspective} classification"),
            "task_description": format!("Classify the {perspective} of this text into one of the allowed categories."),
            "task_type": "Classification",
        }),
        serde_json::json!({
            "task_name": format!("{perspective} profiling"),
            "task_description": format!("Produce a structured JSON profile describing the {perspective} of this text."),
            "task_type": "Structured Output",
        }),
    ];
    if rng.gen_bool(0.5) {
        tasks.push(serde_json::json!({
            "task_name": format!("{perspective} intensity rating"),
            "task_description": format!("Rate the intensity of {perspective} in this text on a 1-5 scale."),
            "task_type": "Scoring or Rating",
        }));
    }
    if rng.gen_bool(0.5) {
        tasks.push(serde_json::json!({
            "task_name": format!("{perspective} evidence extraction"),
            "task_description": format!("Extract the phrases from this text that reveal its {perspective}."),
            "task_type": "Information Extraction",
        }));
    }
    serde_json::to_string_pretty(&tasks).expect("task json")
}

fn synth_instruction_body(name: &str, desc: &str) -> String {
    let lower = name.to_lowercase();
    let format_clause = if lower.contains("classification") {
        "Output Format: respond with exactly one label from: Positive, Negative, Neutral. No additional text."
    } else if lower.contains("profiling") || lower.contains("structured") {
        "Output Format: a JSON object with fields \"label\" (string) and \"intensity\" (integer 1-5)."
    } else if lower.contains("rating") || lower.contains("scoring") {
        "Output Format: a single integer score from 1 to 5."
    } else if lower.contains("extraction") {
        "Output Format: a Python list of strings copied exactly from the text."
    } else {
        "Output Format: a concise free-form analysis of one to three sentences."
    };
    let mut out = format!(
        "Task Name: {name}\nTask Description: {} {format_clause}\nTask Examples:\n",
        desc.trim()
    );
    for (input, label) in [
        ("The battery exceeded my expectations.", "Positive"),
        ("This app keeps crashing.", "Negative"),
        ("The delivery arrived on schedule.", "Neutral"),
        ("My new blender works flawlessly.", "Positive"),
        ("Customer support was a complete letdown.", "Negative"),
        ("The plot is about average.", "Neutral"),
        ("The hotel staff made my week.", "Positive"),
        ("This update died within a day.", "Negative"),
    ] {
        let output = example_output(&lower, label);
        out.push_str(&format!("Task Input: {input}\nTask Output: {output}\n"));
    }
    out.trim_end().to_string()
}

fn example_output(task_name_lower: &str, label: &str) -> String {
    if task_name_lower.contains("classification") {
        label.to_string()
    } else if task_name_lower.contains("profiling") || task_name_lower.contains("structured") {
        format!("{{\"label\": \"{label}\", \"intensity\": 3}}")
    } else if task_name_lower.contains("rating") || task_name_lower.contains("scoring") {
        match label {
            "Positive" => "5".into(),
            "Negative" => "1".into(),
            _ => "3".into(),
        }
    } else if task_name_lower.contains("extraction") {
        "[\"exceeded my expectations\"]".to_string()
    } else {
        format!("The text conveys a {} stance.", label.to_lowercase())
    }
}

const DEMO_SUBJECTS: [&str; 8] = [
    "The battery",
    "This app",
    "The hotel staff",
    "My new blender",
    "The delivery",
    "Customer support",
    "The plot",
    "This update",
];

fn demo_sentence(label: &str, rng: &mut ChaCha12Rng) -> String {
    let subject = DEMO_SUBJECTS[rng.gen_range(0..DEMO_SUBJECTS.len())];
    let predicate = match label {
        "Positive" => ["exceeded my expectations", "works flawlessly", "made my week"]
            [rng.gen_range(0..3usize)],
        "Negative" => ["died within a day", "keeps crashing", "was a complete letdown"]
            [rng.gen_range(0..3usize)],
        _ => ["arrived on schedule", "does what it says", "is about average"]
            [rng.gen_range(0..3usize)],
    };
    format!("{subject} {predicate}.")
}

fn synth_demos(task_desc: &str, forced_label: Option<&str>, rng: &mut ChaCha12Rng) -> String {
    let lower = task_desc.to_lowercase();
    let mut out = String::new();
    for i in 0..2 {
        let label = forced_label
            .map(str::to_string)
            .unwrap_or_else(|| weighted_label(rng).to_string());
        let input = demo_sentence(&label, rng);
        let output = if forced_label.is_some() {
            label.clone()
        } else if lower.contains("classify") || lower.contains("classification") {
            label.clone()
        } else if lower.contains("json") || lower.contains("profile") {
            format!("{{\"label\": \"{label}\", \"intensity\": {}}}", rng.gen_range(1..=5u8))
        } else if lower.contains("rate") || lower.contains("scale") {
            rng.gen_range(1..=5u8).to_string()
        } else if lower.contains("extract") {
            let phrase = input
                .trim_end_matches('.')
                .splitn(2, ' ')
                .nth(1)
                .unwrap_or("it")
                .to_string();
            format!("[\"{phrase}\"]")
        } else {
            format!("The text conveys a {} stance.", label.to_lowercase())
        };
        if i > 0 {
            out.push_str("\n\n");
        }
        out.push_str(&format!("Input: {input}\nOutput: {output}"));
    }
    out
}

fn synth_answer(prompt: &str, rng: &mut ChaCha12Rng) -> String {
    let label = weighted_label(rng);
    if prompt.contains("one label from: Positive, Negative, Neutral") {
        label.to_string()
    } else if prompt.contains("JSON object with fields") {
        format!("{{\"label\": \"{label}\", \"intensity\": {}}}", rng.gen_range(1..=5u8))
    } else if prompt.contains("integer score from 1 to 5") {
        rng.gen_range(1..=5u8).to_string()
    } else if prompt.contains("Python list of strings") {
        "[\"complete waste of money\"]".to_string()
    } else {
        format!("The text conveys a {} stance overall.", label.to_lowercase())
    }
}

/// Synthesize one teacher-forced score row: decide the target's rank
/// scenario, then lay out a strictly decreasing top-k distribution.
fn synth_score_row(token: &str, k: usize, rng: &mut ChaCha12Rng) -> TokenScoreRow {
    let scenario: f64 = rng.gen();
    let rank = if scenario < 0.60 {
        Some(1)
    } else if scenario < 0.80 {
        Some(2.min(k))
    } else if scenario < 0.90 {
        Some(3.min(k))
    } else if scenario < 0.95 {
        Some(rng.gen_range(1..=k))
    } else {
        None
    };
    let head: f64 = rng.gen_range(0.30..0.80);
    let ratio: f64 = rng.gen_range(0.30..0.70);
    let mass: f64 = rng.gen_range(0.92..0.99);
    let mut weights = Vec::with_capacity(k);
    let mut w = 1.0;
    for _ in 0..k {
        weights.push(w * head);
        w *= ratio;
    }
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / total * mass).collect();
    let mut top_k = Vec::with_capacity(k);
    for (j, p) in probs.iter().enumerate() {
        let name = match rank {
            Some(r) if r == j + 1 => token.to_string(),
            _ => format!("alt{j}"),
        };
        top_k.push((name, p.ln()));
    }
    let target_logprob = match rank {
        Some(r) => Some(probs[r - 1].ln()),
        None => Some(((1.0 - mass) * 0.05).max(1e-9).ln()),
    };
    TokenScoreRow {
        token: token.to_string(),
        target_logprob,
        top_k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ChatRequest;

    #[test]
    fn chat_is_deterministic_for_fixed_seed() {
        let a = MockBackend::new(7);
        let b = MockBackend::new(7);
        let req = ChatRequest::new("A");
        assert_eq!(a.chat(&req).unwrap(), b.chat(&req).unwrap());
        let c = MockBackend::new(8);
        assert_ne!(a.chat(&req).unwrap(), c.chat(&req).unwrap());
    }

    #[test]
    fn scripted_chat_takes_precedence() {
        let mut backend = MockBackend::new(7);
        backend.script_chat("A", "scripted");
        assert_eq!(backend.chat(&ChatRequest::new("A")).unwrap(), "scripted");
    }

    #[test]
    fn attribute_prompt_yields_parseable_blocks() {
        let backend = MockBackend::new(1);
        let prompt = prompts::render_attribute_enumeration("I regret buying this blender.");
        let out = backend.chat(&ChatRequest::new(prompt)).unwrap();
        assert!(out.contains("Attribute: "));
        assert!(out.contains("Attribute Description: "));
        assert!(out.contains("Attribute Value: "));
    }

    #[test]
    fn constrained_task_prompt_yields_parseable_json() {
        let backend = MockBackend::new(1);
        let prompt = prompts::render_constrained_task_generation("tone", "emotional coloring");
        let out = backend.chat(&ChatRequest::new(prompt)).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&out).unwrap();
        let tasks = parsed.as_array().unwrap();
        assert!(tasks.len() >= 2);
        assert_eq!(tasks[0]["task_type"], "Classification");
        assert_eq!(tasks[1]["task_type"], "Structured Output");
    }

    #[test]
    fn demo_prompt_honors_forced_label() {
        let backend = MockBackend::new(1);
        let prompt = prompts::render_demo_generation(
            "ref one",
            "ref two",
            "Classify the tone of this text.",
            Some("Neutral"),
        );
        let out = backend.chat(&ChatRequest::new(prompt)).unwrap();
        for block in out.split("\n\n") {
            assert!(block.contains("Output: Neutral"), "block: {block}");
        }
    }

    #[test]
    fn fail_after_injects_transient_errors() {
        let backend = MockBackend::new(1).with_fail_after(2);
        let req = ChatRequest::new("hello");
        assert!(backend.chat(&req).is_ok());
        assert!(backend.chat(&req).is_ok());
        let err = backend.chat(&req).unwrap_err();
        assert!(err.is_transient(), "injected failure should be transient");
        assert_eq!(backend.chat_call_count(), 3);
    }

    #[test]
    fn scripted_score_rows_reproduce_distribution() {
        let mut backend = MockBackend::new(1);
        let rows = vec![TokenScoreRow {
            token: "Neg".into(),
            target_logprob: Some(0.11f64.ln()),
            top_k: vec![
                ("Pos".into(), 0.45f64.ln()),
                ("Neu".into(), 0.40f64.ln()),
                ("Neg".into(), 0.11f64.ln()),
                ("Mixed".into(), 0.02f64.ln()),
            ],
        }];
        backend.script_rows("classify this", "Neg", rows.clone());
        let got = backend.score_tokens("classify this", "Neg", 4).unwrap();
        assert_eq!(got, rows);
        let probs: Vec<f64> = got[0].top_k.iter().map(|(_, lp)| lp.exp()).collect();
        assert!((probs[0] - 0.45).abs() < 1e-12);
        assert!((probs[2] - 0.11).abs() < 1e-12);
    }

    #[test]
    fn synthesized_rows_are_valid_and_sized() {
        let backend = MockBackend::new(3);
        let rows = backend
            .score_tokens("some prompt", "The text conveys a negative stance", 20)
            .unwrap();
        assert_eq!(rows.len(), 6);
        for row in &rows {
            assert_eq!(row.top_k.len(), 20);
            row.validate().unwrap();
            for w in row.top_k.windows(2) {
                assert!(w[0].1 > w[1].1, "strictly descending");
            }
        }
        let again = backend
            .score_tokens("some prompt", "The text conveys a negative stance", 20)
            .unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn score_rejects_empty_response() {
        let backend = MockBackend::new(3);
        assert!(backend.score_tokens("p", "   ", 5).is_err());
    }

    #[test]
    fn k_equal_one_yields_single_alternative() {
        let backend = MockBackend::new(3);
        let rows = backend.score_tokens("p", "Positive", 1).unwrap();
        assert_eq!(rows[0].top_k.len(), 1);
    }

    #[test]
    fn embeddings_are_deterministic_and_uniform_dim() {
        let backend = MockBackend::new(5).with_embed_dim(8);
        let out = backend
            .embed(&["a".to_string(), "b".to_string(), "a".to_string()])
            .unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|v| v.dim == 8));
        assert_eq!(out[0], out[2]);
        assert_ne!(out[0], out[1]);
    }

    #[test]
    fn fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        let entries = vec![
            FixtureEntry::Chat {
                key: sha256_hex(b"A"),
                response: "from fixture".into(),
            },
            FixtureEntry::Embedding {
                key: sha256_hex(b"txt"),
                values: vec![1.0, 0.0],
            },
        ];
        crate::jsonl::write_jsonl(&path, &entries).unwrap();
        let mut backend = MockBackend::new(1).with_embed_dim(2);
        assert_eq!(backend.load_fixture(&path).unwrap(), 2);
        assert_eq!(backend.chat(&ChatRequest::new("A")).unwrap(), "from fixture");
        let v = backend.embed(&["txt".to_string()]).unwrap();
        assert_eq!(v[0].values, vec![1.0, 0.0]);
    }
}
