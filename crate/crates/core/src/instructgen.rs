//! Per-perspective task generation, instruction synthesis, and
//! class-balanced demonstration pools.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand_chacha::ChaCha12Rng;

use crate::backend::{map_bounded, ChatBackend, ChatRequest};
use crate::prompts;
use crate::rng::seeded_rng;
use crate::types::{
    AttributeMention, Demonstration, Instruction, Perspective, Task, TaskType, UserText,
};
use crate::{Error, Result};

/// A demo pool with more distinct normalized outputs than this is treated
/// as non-categorical and never rebalanced.
pub const MAX_CATEGORICAL_LABELS: usize = 12;

/// A label class is underrepresented when the largest class exceeds this
/// multiple of the smallest.
pub const BALANCE_RATIO: usize = 2;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct InstructGenParams {
    /// Demonstrations per instruction.
    pub demos_per_task: usize,
    /// A label class counts as underrepresented when the largest class
    /// exceeds this multiple of the smallest.
    pub balance_ratio: usize,
    pub seed: u64,
    pub concurrency: usize,
}

impl Default for InstructGenParams {
    fn default() -> Self {
        InstructGenParams {
            demos_per_task: 32,
            balance_ratio: BALANCE_RATIO,
            seed: 0,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct InstructGenStats {
    pub tasks_generated: usize,
    pub tasks_dropped: usize,
    pub instructions_kept: usize,
    pub instructions_rejected: usize,
    pub empty_demo_pools: usize,
    pub demo_calls: usize,
    pub rebalance_calls: usize,
    pub imbalanced: usize,
}

impl InstructGenStats {
    fn absorb(&mut self, other: &InstructGenStats) {
        self.tasks_generated += other.tasks_generated;
        self.tasks_dropped += other.tasks_dropped;
        self.instructions_kept += other.instructions_kept;
        self.instructions_rejected += other.instructions_rejected;
        self.empty_demo_pools += other.empty_demo_pools;
        self.demo_calls += other.demo_calls;
        self.rebalance_calls += other.rebalance_calls;
        self.imbalanced += other.imbalanced;
    }
}

/// Per-member (attribute, brief explanation) pairs for a perspective. The
/// explanation is the most frequent mention description for that attribute,
/// ties broken lexicographically.
pub fn member_explanations(
    perspective: &Perspective,
    mentions: &[AttributeMention],
) -> Vec<(String, String)> {
    let mut counts: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for mention in mentions {
        *counts
            .entry(mention.name.as_str())
            .or_default()
            .entry(mention.description.as_str())
            .or_insert(0) += 1;
    }
    let mut out = Vec::new();
    for member in &perspective.members {
        if let Some(descriptions) = counts.get(member.as_str()) {
            let best = descriptions
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(desc, _)| desc.to_string())
                .unwrap_or_default();
            out.push((member.clone(), best));
        }
    }
    out
}

fn strip_prefix_ci<'a>(line: &'a str, prefix: &str) -> Option<&'a str> {
    let head = line.get(..prefix.len())?;
    if head.eq_ignore_ascii_case(prefix) {
        Some(&line[prefix.len()..])
    } else {
        None
    }
}

/// Entries of a numbered list ("1. ...", "2) ..."), with continuation
/// lines folded into the preceding entry.
fn numbered_entries(text: &str) -> Vec<String> {
    let mut entries: Vec<String> = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        let numbered = line
            .find(['.', ')'])
            .filter(|&i| i > 0 && line[..i].bytes().all(|b| b.is_ascii_digit()))
            .map(|i| line[i + 1..].trim_start());
        match numbered {
            Some(rest) if !rest.is_empty() => entries.push(rest.to_string()),
            _ if line.is_empty() => {}
            _ => {
                if let Some(last) = entries.last_mut() {
                    last.push(' ');
                    last.push_str(line);
                }
            }
        }
    }
    entries
}

fn parse_open_tasks(response: &str, perspective: &Perspective) -> Vec<Task> {
    numbered_entries(response)
        .into_iter()
        .enumerate()
        .map(|(i, prompt)| Task {
            perspective_id: perspective.id,
            name: format!("{} open-ended analysis {}", perspective.name, i + 1),
            description: prompt,
            task_type: TaskType::OpenEnded,
        })
        .collect()
}

/// Map a declared task type onto the closed enum; unknown declarations
/// fall back to open-ended.
fn classify_task_type(declared: &str) -> TaskType {
    let lower = declared.to_lowercase();
    if lower.contains("classif") {
        TaskType::Classification
    } else if lower.contains("scor") || lower.contains("rating") || lower.contains("regress") {
        TaskType::ScoringRegression
    } else if lower.contains("extract") {
        TaskType::Extraction
    } else if lower.contains("structur") || lower.contains("json") {
        TaskType::StructuredOutput
    } else {
        TaskType::OpenEnded
    }
}

fn string_field(value: &serde_json::Value, keys: &[&str]) -> Option<String> {
    keys.iter()
        .find_map(|k| value.get(k))
        .and_then(|v| v.as_str())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Tolerant parse of the structured task list: the first JSON array in the
/// response, objects keyed task_name/task_description/task_type (or the
/// name/description/type shorthands). Returns (tasks, dropped entries).
fn parse_constrained_tasks(response: &str, perspective_id: u32) -> (Vec<Task>, usize) {
    let Some(start) = response.find('[') else {
        return (Vec::new(), 0);
    };
    let Some(end) = response.rfind(']').filter(|&e| e > start) else {
        return (Vec::new(), 0);
    };
    let Ok(items) = serde_json::from_str::<Vec<serde_json::Value>>(&response[start..=end]) else {
        return (Vec::new(), 0);
    };
    let mut tasks = Vec::new();
    let mut dropped = 0;
    for item in items {
        let name = string_field(&item, &["task_name", "name"]);
        let description = string_field(&item, &["task_description", "description"]);
        match (name, description) {
            (Some(name), Some(description)) => {
                let declared = string_field(&item, &["task_type", "type"]).unwrap_or_default();
                tasks.push(Task {
                    perspective_id,
                    name,
                    description,
                    task_type: classify_task_type(&declared),
                });
            }
            _ => {
                dropped += 1;
                log::warn!("dropping task entry without name/description: {item}");
            }
        }
    }
    (tasks, dropped)
}

/// Generate tasks for one perspective from both task-generation prompts:
/// the open-ended prompt (numbered free-form analysis prompts) and the
/// constrained prompt (structured JSON task list). Returns (tasks, dropped).
pub fn generate_tasks(
    perspective: &Perspective,
    mentions: &[AttributeMention],
    backend: &dyn ChatBackend,
) -> Result<(Vec<Task>, usize)> {
    if perspective.members.is_empty() {
        return Err(Error::Precondition(format!(
            "perspective {} has no members",
            perspective.id
        )));
    }
    let explanations = member_explanations(perspective, mentions);
    let own_explanation = explanations
        .iter()
        .find(|(name, _)| *name == perspective.name)
        .or_else(|| explanations.first())
        .map(|(_, e)| e.clone())
        .unwrap_or_default();

    let open_prompt = prompts::render_open_task_generation(&perspective.name, &explanations);
    let open_response = backend.chat(&ChatRequest::new(open_prompt))?;
    let mut tasks = parse_open_tasks(&open_response, perspective);

    let constrained_prompt =
        prompts::render_constrained_task_generation(&perspective.name, &own_explanation);
    let constrained_response = backend.chat(&ChatRequest::new(constrained_prompt))?;
    let (constrained, dropped) = parse_constrained_tasks(&constrained_response, perspective.id);
    tasks.extend(constrained);

    if tasks.is_empty() {
        log::warn!(
            "perspective {} ({}): no parseable tasks in either response",
            perspective.id,
            perspective.name
        );
    }
    Ok((tasks, dropped))
}

/// A valid instruction body names the task, describes it, and states an
/// output format.
pub fn validate_instruction_body(body: &str) -> bool {
    let lower = body.to_lowercase();
    ["task name", "task description", "output format"]
        .iter()
        .all(|part| lower.contains(part))
}

/// Rewrite one task into a full instruction body. Structural validation
/// failures are retried once; a second failure skips the task (Ok(None)).
pub fn synthesize_instruction(
    task: &Task,
    task_index: usize,
    backend: &dyn ChatBackend,
) -> Result<Option<Instruction>> {
    let prompt = prompts::render_instruction_rewrite(&task.name, &task.description);
    for attempt in 0..2 {
        let body = backend.chat(&ChatRequest::new(prompt.clone()))?;
        if validate_instruction_body(&body) {
            return Ok(Some(Instruction {
                id: format!("ins-p{:03}-t{:02}", task.perspective_id, task_index),
                task: task.clone(),
                body,
                demos: Vec::new(),
                imbalanced: false,
            }));
        }
        log::warn!(
            "instruction body for task {:?} failed validation (attempt {})",
            task.name,
            attempt + 1
        );
    }
    Ok(None)
}

/// Demonstrations parsed from Input:/Output: blocks; continuation lines
/// extend the current field, a blank line closes a completed pair.
pub fn parse_demo_response(text: &str) -> Vec<Demonstration> {
    enum State {
        Idle,
        InInput,
        InOutput,
    }
    let mut demos = Vec::new();
    let mut state = State::Idle;
    let mut input = String::new();
    let mut output = String::new();
    let mut flush = |input: &mut String, output: &mut String| {
        if !input.trim().is_empty() && !output.trim().is_empty() {
            demos.push(Demonstration {
                input: input.trim().to_string(),
                output: output.trim().to_string(),
                class_label: None,
            });
        }
        input.clear();
        output.clear();
    };
    for raw in text.lines() {
        let line = raw.trim();
        if let Some(rest) = strip_prefix_ci(line, "input:") {
            if matches!(state, State::InOutput) {
                flush(&mut input, &mut output);
            } else {
                input.clear();
            }
            input.push_str(rest.trim());
            state = State::InInput;
        } else if let Some(rest) = strip_prefix_ci(line, "output:") {
            if matches!(state, State::InInput) {
                output.push_str(rest.trim());
                state = State::InOutput;
            }
        } else if line.is_empty() {
            if matches!(state, State::InOutput) {
                flush(&mut input, &mut output);
            }
            state = State::Idle;
        } else {
            match state {
                State::InInput => {
                    input.push(' ');
                    input.push_str(line);
                }
                State::InOutput => {
                    output.push(' ');
                    output.push_str(line);
                }
                State::Idle => {}
            }
        }
    }
    if matches!(state, State::InOutput) {
        flush(&mut input, &mut output);
    }
    demos
}

fn sample_two_refs<'a>(texts: &'a [UserText], rng: &mut ChaCha12Rng) -> (&'a str, &'a str) {
    let picked = sample(rng, texts.len(), 2);
    (&texts[picked.index(0)].text, &texts[picked.index(1)].text)
}

/// Build a demonstration pool of `target` demos, two per call with two
/// seeded reference texts per call. Gives up (with a warning) after
/// 3 x target calls and returns the partial pool.
pub fn generate_demos(
    task: &Task,
    reference_texts: &[UserText],
    backend: &dyn ChatBackend,
    target: usize,
    seed: u64,
) -> Result<(Vec<Demonstration>, usize)> {
    if reference_texts.len() < 2 {
        return Err(Error::Precondition(format!(
            "demo generation needs at least 2 reference texts, have {}",
            reference_texts.len()
        )));
    }
    let mut rng = seeded_rng(seed, &format!("demo-gen:{}:{}", task.perspective_id, task.name));
    let mut demos = Vec::new();
    let mut calls = 0;
    while demos.len() < target && calls < target.saturating_mul(3) {
        let (ref1, ref2) = sample_two_refs(reference_texts, &mut rng);
        let prompt = prompts::render_demo_generation(ref1, ref2, &task.description, None);
        let response = backend.chat(&ChatRequest::new(prompt))?;
        demos.extend(parse_demo_response(&response));
        calls += 1;
    }
    if demos.len() < target {
        log::warn!(
            "task {:?}: only {} of {} demos after {} calls",
            task.name,
            demos.len(),
            target,
            calls
        );
    }
    demos.truncate(target);
    Ok((demos, calls))
}

/// Whitespace-collapsed lowercase form used as the class key.
pub fn normalize_label(output: &str) -> String {
    output
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// normalized label -> (count, first-seen display form).
fn label_histogram(demos: &[Demonstration]) -> BTreeMap<String, (usize, String)> {
    let mut hist: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for demo in demos {
        let key = normalize_label(&demo.output);
        let entry = hist
            .entry(key)
            .or_insert_with(|| (0, demo.output.trim().to_string()));
        entry.0 += 1;
    }
    hist
}

fn is_categorical(task: &Task, demos: &[Demonstration]) -> bool {
    task.task_type == TaskType::Classification
        && !demos.is_empty()
        && label_histogram(demos).len() <= MAX_CATEGORICAL_LABELS
}

#[derive(Debug)]
pub struct RebalanceOutcome {
    pub demos: Vec<Demonstration>,
    pub imbalanced: bool,
    pub calls: usize,
}

/// Rebalance a categorical demo pool: while the largest label class
/// exceeds `ratio` times the smallest, request demos constrained to the
/// minority label, up to `target` extra calls. Non-categorical pools pass
/// through unchanged; pools still imbalanced at budget exhaustion are
/// flagged.
pub fn rebalance_demos(
    demos: Vec<Demonstration>,
    task: &Task,
    reference_texts: &[UserText],
    backend: &dyn ChatBackend,
    target: usize,
    ratio: usize,
    seed: u64,
) -> Result<RebalanceOutcome> {
    if demos.is_empty() {
        return Err(Error::Precondition("cannot rebalance an empty demo pool".into()));
    }
    if !is_categorical(task, &demos) {
        return Ok(RebalanceOutcome {
            demos,
            imbalanced: false,
            calls: 0,
        });
    }
    let mut demos: Vec<Demonstration> = demos
        .into_iter()
        .map(|mut d| {
            d.class_label = Some(normalize_label(&d.output));
            d
        })
        .collect();
    let mut rng = seeded_rng(seed, &format!("rebalance:{}:{}", task.perspective_id, task.name));
    let mut calls = 0;
    let budget = target.max(1);
    let ratio = ratio.max(1);
    let imbalanced = loop {
        let hist = label_histogram(&demos);
        let max = hist.values().map(|(c, _)| *c).max().unwrap_or(0);
        let (minority_key, (min, minority_display)) = hist
            .iter()
            .min_by_key(|(key, (count, _))| (*count, (*key).clone()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .expect("non-empty pool");
        if max <= ratio * min {
            break false;
        }
        if calls >= budget || reference_texts.len() < 2 {
            log::warn!(
                "task {:?}: demo pool still imbalanced (max {max}, min {min}) after {calls} rebalance calls",
                task.name
            );
            break true;
        }
        let (ref1, ref2) = sample_two_refs(reference_texts, &mut rng);
        let prompt = prompts::render_demo_generation(
            ref1,
            ref2,
            &task.description,
            Some(&minority_display),
        );
        let response = backend.chat(&ChatRequest::new(prompt))?;
        calls += 1;
        for mut demo in parse_demo_response(&response) {
            if normalize_label(&demo.output) == minority_key {
                demo.class_label = Some(minority_key.clone());
                demos.push(demo);
            }
        }
    };
    Ok(RebalanceOutcome {
        demos,
        imbalanced,
        calls,
    })
}

/// Full generation pass for one perspective set: tasks, instruction
/// bodies, demo pools with rebalancing. Perspectives are processed
/// concurrently; outputs are merged in perspective order.
pub fn build_instructions(
    perspectives: &[Perspective],
    mentions: &[AttributeMention],
    reference_texts: &[UserText],
    backend: &dyn ChatBackend,
    params: &InstructGenParams,
) -> Result<(Vec<Task>, Vec<Instruction>, InstructGenStats)> {
    struct PerPerspective {
        tasks: Vec<Task>,
        instructions: Vec<Instruction>,
        stats: InstructGenStats,
    }

    let results = map_bounded(perspectives, params.concurrency, |_, perspective| {
        let mut stats = InstructGenStats::default();
        let (tasks, dropped) = generate_tasks(perspective, mentions, backend)?;
        stats.tasks_generated = tasks.len();
        stats.tasks_dropped = dropped;
        let mut instructions = Vec::new();
        for (index, task) in tasks.iter().enumerate() {
            let Some(mut instruction) = synthesize_instruction(task, index, backend)? else {
                stats.instructions_rejected += 1;
                continue;
            };
            let (demos, calls) =
                generate_demos(task, reference_texts, backend, params.demos_per_task, params.seed)?;
            stats.demo_calls += calls;
            if demos.is_empty() {
                stats.empty_demo_pools += 1;
                log::warn!("task {:?}: empty demo pool, instruction skipped", task.name);
                continue;
            }
            let outcome = rebalance_demos(
                demos,
                task,
                reference_texts,
                backend,
                params.demos_per_task,
                params.balance_ratio,
                params.seed,
            )?;
            stats.rebalance_calls += outcome.calls;
            stats.imbalanced += outcome.imbalanced as usize;
            instruction.demos = outcome.demos;
            instruction.imbalanced = outcome.imbalanced;
            instructions.push(instruction);
            stats.instructions_kept += 1;
        }
        Ok::<_, Error>(PerPerspective {
            tasks,
            instructions,
            stats,
        })
    });

    let mut tasks = Vec::new();
    let mut instructions = Vec::new();
    let mut stats = InstructGenStats::default();
    for result in results {
        let per = result?;
        tasks.extend(per.tasks);
        instructions.extend(per.instructions);
        stats.absorb(&per.stats);
    }
    Ok((tasks, instructions, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, MockBackend};
    use crate::types::TextSource;

    fn perspective(id: u32, name: &str, members: &[&str]) -> Perspective {
        Perspective {
            id,
            name: name.to_string(),
            members: members.iter().map(|m| m.to_string()).collect(),
            exemplar: name.to_string(),
        }
    }

    fn mention(name: &str, description: &str) -> AttributeMention {
        AttributeMention {
            id: format!("ut-x#{name}"),
            name: name.to_string(),
            description: description.to_string(),
            value: "high".to_string(),
            text_id: "ut-x".to_string(),
        }
    }

    fn texts(n: usize) -> Vec<UserText> {
        (0..n)
            .map(|i| UserText {
                id: format!("ut-{i:04}"),
                text: format!("Sample review number {i} about a product."),
                source: TextSource::Amazon,
            })
            .collect()
    }

    fn demo(output: &str) -> Demonstration {
        Demonstration {
            input: format!("Example text for {output}."),
            output: output.to_string(),
            class_label: None,
        }
    }

    fn classification_task() -> Task {
        Task {
            perspective_id: 0,
            name: "tone classification".into(),
            description: "Classify the tone of this text into one of the allowed categories."
                .into(),
            task_type: TaskType::Classification,
        }
    }

    #[test]
    fn explanations_pick_most_frequent_description() {
        let p = perspective(0, "tone", &["tone", "sarcasm"]);
        let mentions = vec![
            mention("tone", "rare description"),
            mention("tone", "common description"),
            mention("tone", "common description"),
            mention("sarcasm", "ironic inversion"),
            mention("unrelated", "ignored"),
        ];
        let got = member_explanations(&p, &mentions);
        assert_eq!(
            got,
            vec![
                ("tone".to_string(), "common description".to_string()),
                ("sarcasm".to_string(), "ironic inversion".to_string()),
            ]
        );
    }

    #[test]
    fn tasks_for_tone_include_classification_and_structured() {
        let backend = MockBackend::new(1);
        let p = perspective(0, "tone", &["tone"]);
        let (tasks, dropped) =
            generate_tasks(&p, &[mention("tone", "emotional coloring")], &backend).unwrap();
        assert_eq!(dropped, 0);
        assert!(tasks.iter().any(|t| t.task_type == TaskType::Classification));
        assert!(tasks.iter().any(|t| t.task_type == TaskType::StructuredOutput));
        assert!(tasks.iter().any(|t| t.task_type == TaskType::OpenEnded));
        assert!(tasks.iter().all(|t| t.perspective_id == 0));
    }

    #[test]
    fn unparseable_responses_yield_no_tasks() {
        let p = perspective(0, "tone", &["tone"]);
        let mut backend = MockBackend::new(1);
        let expl = member_explanations(&p, &[mention("tone", "emotional coloring")]);
        backend.script_chat(
            &prompts::render_open_task_generation("tone", &expl),
            "I am not able to comply with that request.",
        );
        backend.script_chat(
            &prompts::render_constrained_task_generation("tone", "emotional coloring"),
            "No structured output here either.",
        );
        let (tasks, _) =
            generate_tasks(&p, &[mention("tone", "emotional coloring")], &backend).unwrap();
        assert!(tasks.is_empty());
    }

    #[test]
    fn task_entries_missing_fields_are_dropped() {
        let (tasks, dropped) = parse_constrained_tasks(
            r#"Sure! [{"task_name": "a", "task_description": "b", "task_type": "Classification"},
                {"task_name": "incomplete"}]"#,
            3,
        );
        assert_eq!(tasks.len(), 1);
        assert_eq!(dropped, 1);
        assert_eq!(tasks[0].task_type, TaskType::Classification);
        assert_eq!(tasks[0].perspective_id, 3);
    }

    #[test]
    fn task_type_mapping_covers_declared_kinds() {
        assert_eq!(classify_task_type("Classification"), TaskType::Classification);
        assert_eq!(classify_task_type("Scoring or Rating"), TaskType::ScoringRegression);
        assert_eq!(classify_task_type("Information Extraction"), TaskType::Extraction);
        assert_eq!(classify_task_type("Structured Output"), TaskType::StructuredOutput);
        assert_eq!(classify_task_type("whatever else"), TaskType::OpenEnded);
    }

    #[test]
    fn rewrite_produces_body_with_output_format() {
        let backend = MockBackend::new(1);
        let task = Task {
            perspective_id: 0,
            name: "tone profiling".into(),
            description: "Produce a structured JSON profile of the tone.".into(),
            task_type: TaskType::StructuredOutput,
        };
        let instruction = synthesize_instruction(&task, 0, &backend).unwrap().unwrap();
        assert!(instruction.body.to_lowercase().contains("output format"));
        assert_eq!(instruction.id, "ins-p000-t00");
        assert!(validate_instruction_body(&instruction.body));
        // Validation is a pure predicate: same verdict on repeat.
        assert!(validate_instruction_body(&instruction.body));
    }

    #[test]
    fn invalid_body_twice_skips_the_task() {
        let task = classification_task();
        let mut backend = MockBackend::new(1);
        backend.script_chat(
            &prompts::render_instruction_rewrite(&task.name, &task.description),
            "Sorry, here is a poem instead.",
        );
        assert!(synthesize_instruction(&task, 0, &backend).unwrap().is_none());
        assert_eq!(backend.chat_call_count(), 2, "one retry before rejection");
    }

    #[test]
    fn demo_parse_counts_only_complete_pairs() {
        let demos = parse_demo_response(
            "Input: Great phone.\nOutput: Positive\n\nInput: dangling input without output",
        );
        assert_eq!(demos.len(), 1);
        assert_eq!(demos[0].output, "Positive");

        let multiline = parse_demo_response(
            "Input: line one\ncontinues here\nOutput: Negative\nstill negative\n",
        );
        assert_eq!(multiline.len(), 1);
        assert_eq!(multiline[0].input, "line one continues here");
        assert_eq!(multiline[0].output, "Negative still negative");

        assert!(parse_demo_response("nothing structured").is_empty());
    }

    #[test]
    fn demo_generation_reaches_target_and_is_seeded() {
        let backend = MockBackend::new(1);
        let task = classification_task();
        let refs = texts(6);
        let (demos, calls) = generate_demos(&task, &refs, &backend, 8, 42).unwrap();
        assert_eq!(demos.len(), 8);
        assert_eq!(calls, 4, "two demos per call");
        let (again, _) = generate_demos(&task, &refs, &backend, 8, 42).unwrap();
        assert_eq!(demos, again);
        let (other, _) = generate_demos(&task, &refs, &backend, 8, 43).unwrap();
        assert_ne!(demos, other);
    }

    #[test]
    fn demo_generation_requires_two_reference_texts() {
        let backend = MockBackend::new(1);
        let task = classification_task();
        assert!(generate_demos(&task, &[], &backend, 8, 0).is_err());
        assert!(generate_demos(&task, &texts(1), &backend, 8, 0).is_err());
    }

    #[test]
    fn demo_generation_gives_up_after_budget() {
        struct Useless;
        impl ChatBackend for Useless {
            fn chat(&self, _: &ChatRequest) -> std::result::Result<String, BackendError> {
                Ok("no structure at all".into())
            }
        }
        let task = classification_task();
        let (demos, calls) = generate_demos(&task, &texts(3), &Useless, 4, 0).unwrap();
        assert!(demos.is_empty());
        assert_eq!(calls, 12, "3 x target call budget");
    }

    #[test]
    fn rebalance_fills_minority_class() {
        let backend = MockBackend::new(1);
        let task = classification_task();
        let mut pool: Vec<Demonstration> = (0..20).map(|_| demo("Positive")).collect();
        pool.extend((0..4).map(|_| demo("Negative")));
        let outcome =
            rebalance_demos(pool, &task, &texts(5), &backend, 32, BALANCE_RATIO, 7).unwrap();
        assert!(!outcome.imbalanced);
        assert_eq!(outcome.calls, 3, "4 -> 6 -> 8 -> 10 minority demos");
        assert_eq!(outcome.demos.len(), 30);
        let hist = label_histogram(&outcome.demos);
        let max = hist.values().map(|(c, _)| *c).max().unwrap();
        let min = hist.values().map(|(c, _)| *c).min().unwrap();
        assert!(max <= 2 * min);
        assert!(outcome.demos.iter().all(|d| d.class_label.is_some()));
        assert_eq!(backend.chat_call_count(), 3);
    }

    #[test]
    fn rebalance_leaves_balanced_and_noncategorical_pools_alone() {
        let backend = MockBackend::new(1);
        let task = classification_task();
        let balanced: Vec<Demonstration> = (0..16)
            .map(|i| demo(if i % 2 == 0 { "a" } else { "b" }))
            .collect();
        let outcome =
            rebalance_demos(balanced.clone(), &task, &texts(3), &backend, 32, BALANCE_RATIO, 0)
                .unwrap();
        assert_eq!(outcome.calls, 0);
        assert_eq!(outcome.demos.len(), 16);
        assert_eq!(backend.chat_call_count(), 0);

        let mut open = classification_task();
        open.task_type = TaskType::OpenEnded;
        let skewed: Vec<Demonstration> = (0..9)
            .map(|i| demo(if i == 0 { "rare" } else { "common" }))
            .collect();
        let outcome =
            rebalance_demos(skewed.clone(), &open, &texts(3), &backend, 32, BALANCE_RATIO, 0)
                .unwrap();
        assert_eq!(outcome.demos, skewed, "rule gate: open-ended unchanged");
        assert_eq!(backend.chat_call_count(), 0);
    }

    #[test]
    fn rebalance_flags_pool_when_budget_exhausted() {
        struct Useless;
        impl ChatBackend for Useless {
            fn chat(&self, _: &ChatRequest) -> std::result::Result<String, BackendError> {
                Ok("still nothing".into())
            }
        }
        let task = classification_task();
        let mut pool: Vec<Demonstration> = (0..10).map(|_| demo("Positive")).collect();
        pool.push(demo("Negative"));
        let outcome =
            rebalance_demos(pool, &task, &texts(3), &Useless, 4, BALANCE_RATIO, 0).unwrap();
        assert!(outcome.imbalanced);
        assert_eq!(outcome.calls, 4, "budget = target calls");
        assert_eq!(outcome.demos.len(), 11);

        assert!(
            rebalance_demos(Vec::new(), &task, &texts(3), &Useless, 4, BALANCE_RATIO, 0).is_err()
        );
    }

    #[test]
    fn build_is_deterministic_and_referentially_intact() {
        let backend = MockBackend::new(5);
        let perspectives = vec![
            perspective(0, "tone", &["tone", "sarcasm"]),
            perspective(1, "satisfaction", &["satisfaction"]),
        ];
        let mentions = vec![
            mention("tone", "emotional coloring"),
            mention("sarcasm", "ironic inversion"),
            mention("satisfaction", "contentment with the product"),
        ];
        let refs = texts(8);
        let params = InstructGenParams {
            demos_per_task: 6,
            balance_ratio: BALANCE_RATIO,
            seed: 11,
            concurrency: 3,
        };
        let (tasks, instructions, stats) =
            build_instructions(&perspectives, &mentions, &refs, &backend, &params).unwrap();
        assert_eq!(stats.tasks_generated, tasks.len());
        assert!(stats.instructions_kept > 0);
        assert_eq!(stats.instructions_kept, instructions.len());

        let ids: std::collections::BTreeSet<&str> =
            instructions.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids.len(), instructions.len(), "instruction ids unique");
        for instruction in &instructions {
            assert!(perspectives
                .iter()
                .any(|p| p.id == instruction.task.perspective_id));
            assert!(tasks.contains(&instruction.task), "traces to a generated task");
            assert!(!instruction.demos.is_empty());
        }

        let backend2 = MockBackend::new(5);
        let (tasks2, instructions2, stats2) =
            build_instructions(&perspectives, &mentions, &refs, &backend2, &params).unwrap();
        assert_eq!(tasks, tasks2);
        assert_eq!(instructions, instructions2);
        assert_eq!(stats, stats2);
    }

    #[test]
    fn categorical_pools_end_balanced_or_flagged() {
        let backend = MockBackend::new(9);
        let perspectives = vec![perspective(0, "tone", &["tone"])];
        let mentions = vec![mention("tone", "emotional coloring")];
        let params = InstructGenParams {
            demos_per_task: 16,
            balance_ratio: BALANCE_RATIO,
            seed: 3,
            concurrency: 1,
        };
        let (_, instructions, _) =
            build_instructions(&perspectives, &mentions, &texts(10), &backend, &params).unwrap();
        for instruction in instructions
            .iter()
            .filter(|i| i.task.task_type == TaskType::Classification)
        {
            let hist = label_histogram(&instruction.demos);
            if hist.len() <= MAX_CATEGORICAL_LABELS && !instruction.imbalanced {
                let max = hist.values().map(|(c, _)| *c).max().unwrap();
                let min = hist.values().map(|(c, _)| *c).min().unwrap();
                assert!(max <= 2 * min, "balanced or flagged: {hist:?}");
            }
        }
    }
}
