//! Instruction/user-text pairing, demonstration sampling, prompt
//! rendering, checkpointed teacher response collection, and export of
//! training-ready records.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::backend::{map_bounded, ChatBackend, ChatRequest, RetryPolicy};
use crate::jsonl::{append_jsonl, read_jsonl, sha256_hex, write_jsonl};
use crate::prompts;
use crate::rng::seeded_rng;
use crate::types::{DifficultyScore, DistillTriple, Instruction, Perspective, UserText};
use crate::{Error, Result};

pub const DEMO_COUNT_MAX: u32 = 8;

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PairStats {
    pub n_pairs: usize,
    /// Draws repeating an already-drawn (instruction, text) combination.
    pub duplicate_pairs: usize,
    /// Attribute-matched draws that fell back to uniform text selection.
    pub fallbacks: usize,
}

/// Uniform demo count in 1..=8 (capped at pool size), then that many pool
/// indices without replacement, in sampled order.
fn sample_demos_with(instruction: &Instruction, rng: &mut ChaCha12Rng) -> Result<Vec<u32>> {
    let pool = instruction.demos.len();
    if pool == 0 {
        return Err(Error::Precondition(format!(
            "instruction {} has an empty demo pool",
            instruction.id
        )));
    }
    let count = (rng.gen_range(1..=DEMO_COUNT_MAX) as usize).min(pool);
    Ok(sample(rng, pool, count).iter().map(|i| i as u32).collect())
}

/// Seeded one-shot demo draw for one instruction.
pub fn sample_demos(instruction: &Instruction, seed: u64) -> Result<Vec<u32>> {
    let mut rng = seeded_rng(seed, &format!("sample-demos:{}", instruction.id));
    sample_demos_with(instruction, &mut rng)
}

/// Render the distillation prompt for (instruction, demo indices, text)
/// and return it with its content hash.
pub fn render_prompt(
    instruction: &Instruction,
    demo_ids: &[u32],
    text: &str,
) -> Result<(String, String)> {
    if instruction.body.trim().is_empty() || text.trim().is_empty() || demo_ids.is_empty() {
        return Err(Error::Precondition(
            "prompt rendering needs a non-empty body, text, and demo selection".into(),
        ));
    }
    let mut demos = Vec::with_capacity(demo_ids.len());
    for &id in demo_ids {
        demos.push(instruction.demos.get(id as usize).ok_or_else(|| {
            Error::Invalid(format!(
                "demo index {id} out of range for instruction {}",
                instruction.id
            ))
        })?);
    }
    let prompt = prompts::render_distillation_prompt(instruction, &demos, text);
    let hash = sha256_hex(prompt.as_bytes());
    Ok((prompt, hash))
}

fn build_triple(
    ordinal: usize,
    instruction: &Instruction,
    text: &UserText,
    rng: &mut ChaCha12Rng,
) -> Result<DistillTriple> {
    let demo_ids = sample_demos_with(instruction, rng)?;
    let (_, prompt_hash) = render_prompt(instruction, &demo_ids, &text.text)?;
    Ok(DistillTriple {
        id: format!("tr-{ordinal:06}"),
        instruction_id: instruction.id.clone(),
        demo_ids,
        text_id: text.id.clone(),
        response: None,
        prompt_hash,
        failed: false,
    })
}

fn check_pair_inputs(instructions: &[Instruction], texts: &[UserText]) -> Result<()> {
    if instructions.is_empty() || texts.is_empty() {
        return Err(Error::Precondition(
            "pairing needs at least one instruction and one text".into(),
        ));
    }
    Ok(())
}

/// Draw n_pairs (instruction, text) combinations independently and
/// uniformly, sampling demos and hashing the prompt for each.
pub fn pair_random(
    instructions: &[Instruction],
    texts: &[UserText],
    n_pairs: usize,
    seed: u64,
) -> Result<(Vec<DistillTriple>, PairStats)> {
    check_pair_inputs(instructions, texts)?;
    let mut rng = seeded_rng(seed, "pair-random");
    let mut triples = Vec::with_capacity(n_pairs);
    let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut stats = PairStats {
        n_pairs,
        ..PairStats::default()
    };
    for ordinal in 0..n_pairs {
        let inst = rng.gen_range(0..instructions.len());
        let text = rng.gen_range(0..texts.len());
        if !seen.insert((inst, text)) {
            stats.duplicate_pairs += 1;
        }
        triples.push(build_triple(ordinal, &instructions[inst], &texts[text], &mut rng)?);
    }
    Ok((triples, stats))
}

/// Draw the instruction uniformly, then the text uniformly from texts
/// tagged with any member attribute of the instruction's perspective;
/// draws with no tagged text fall back to uniform selection (counted).
pub fn pair_attribute_matched(
    instructions: &[Instruction],
    texts: &[UserText],
    perspectives: &[Perspective],
    attribute_index: &BTreeMap<String, Vec<String>>,
    n_pairs: usize,
    seed: u64,
) -> Result<(Vec<DistillTriple>, PairStats)> {
    check_pair_inputs(instructions, texts)?;
    let by_perspective: BTreeMap<u32, &Perspective> =
        perspectives.iter().map(|p| (p.id, p)).collect();
    // perspective id -> indices of texts tagged with any member attribute.
    let mut matched: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for perspective in perspectives {
        let members: BTreeSet<&str> = perspective.members.iter().map(String::as_str).collect();
        let hits: Vec<usize> = texts
            .iter()
            .enumerate()
            .filter(|(_, t)| {
                attribute_index
                    .get(&t.id)
                    .is_some_and(|attrs| attrs.iter().any(|a| members.contains(a.as_str())))
            })
            .map(|(i, _)| i)
            .collect();
        matched.insert(perspective.id, hits);
    }

    let mut rng = seeded_rng(seed, "pair-attribute");
    let mut triples = Vec::with_capacity(n_pairs);
    let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut stats = PairStats {
        n_pairs,
        ..PairStats::default()
    };
    for ordinal in 0..n_pairs {
        let inst = rng.gen_range(0..instructions.len());
        let perspective_id = instructions[inst].task.perspective_id;
        if !by_perspective.contains_key(&perspective_id) {
            return Err(Error::Precondition(format!(
                "instruction {} references unknown perspective {perspective_id}",
                instructions[inst].id
            )));
        }
        let hits = &matched[&perspective_id];
        let text = if hits.is_empty() {
            stats.fallbacks += 1;
            rng.gen_range(0..texts.len())
        } else {
            hits[rng.gen_range(0..hits.len())]
        };
        if !seen.insert((inst, text)) {
            stats.duplicate_pairs += 1;
        }
        triples.push(build_triple(ordinal, &instructions[inst], &texts[text], &mut rng)?);
    }
    Ok((triples, stats))
}

#[derive(Debug, Clone)]
pub struct CollectParams {
    pub checkpoint_every: usize,
    pub concurrency: usize,
    pub retry: RetryPolicy,
}

impl Default for CollectParams {
    fn default() -> Self {
        CollectParams {
            checkpoint_every: 100,
            concurrency: 4,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CollectStats {
    pub total: usize,
    /// Newly collected this run.
    pub collected: usize,
    /// Satisfied from the checkpoint (or already responded in the input).
    pub from_checkpoint: usize,
    /// Empty teacher responses, marked failed.
    pub failed_empty: usize,
}

fn index_instructions(instructions: &[Instruction]) -> BTreeMap<&str, &Instruction> {
    instructions.iter().map(|i| (i.id.as_str(), i)).collect()
}

fn index_texts(texts: &[UserText]) -> BTreeMap<&str, &UserText> {
    texts.iter().map(|t| (t.id.as_str(), t)).collect()
}

fn prompt_for(
    triple: &DistillTriple,
    instructions: &BTreeMap<&str, &Instruction>,
    texts: &BTreeMap<&str, &UserText>,
) -> Result<String> {
    let instruction = instructions.get(triple.instruction_id.as_str()).ok_or_else(|| {
        Error::Precondition(format!(
            "triple {} references unknown instruction {}",
            triple.id, triple.instruction_id
        ))
    })?;
    let text = texts.get(triple.text_id.as_str()).ok_or_else(|| {
        Error::Precondition(format!(
            "triple {} references unknown text {}",
            triple.id, triple.text_id
        ))
    })?;
    let (prompt, hash) = render_prompt(instruction, &triple.demo_ids, &text.text)?;
    if hash != triple.prompt_hash {
        return Err(Error::Invalid(format!(
            "triple {}: rendered prompt hash {} does not match recorded {}; \
             instructions or texts changed since pairing",
            triple.id, hash, triple.prompt_hash
        )));
    }
    Ok(prompt)
}

/// Collect teacher responses for every unresponded triple, checkpointing
/// progress every `checkpoint_every` triples. A checkpoint file from an
/// earlier interrupted run is honored: checkpointed triples are never
/// re-requested. On backend failure the completed work is checkpointed and
/// the error returned, leaving the run resumable.
pub fn collect_responses(
    triples: &[DistillTriple],
    instructions: &[Instruction],
    texts: &[UserText],
    backend: &dyn ChatBackend,
    params: &CollectParams,
    checkpoint_path: &Path,
) -> Result<(Vec<DistillTriple>, CollectStats)> {
    let instructions = index_instructions(instructions);
    let texts = index_texts(texts);

    let mut done: BTreeMap<String, DistillTriple> = BTreeMap::new();
    if checkpoint_path.exists() {
        for entry in read_jsonl::<DistillTriple>(checkpoint_path)? {
            done.insert(entry.id.clone(), entry);
        }
    }
    for triple in triples {
        if triple.response.is_some() || triple.failed {
            done.entry(triple.id.clone()).or_insert_with(|| triple.clone());
        }
    }

    let pending: Vec<&DistillTriple> = triples
        .iter()
        .filter(|t| !done.contains_key(&t.id))
        .collect();
    let mut stats = CollectStats {
        total: triples.len(),
        from_checkpoint: triples.len() - pending.len(),
        ..CollectStats::default()
    };

    let chunk_size = params.checkpoint_every.max(1);
    for chunk in pending.chunks(chunk_size) {
        let results = map_bounded(chunk, params.concurrency, |_, triple| {
            let prompt = prompt_for(triple, &instructions, &texts)?;
            let request = ChatRequest::new(prompt);
            let response = params
                .retry
                .run(&request.request_id(), || backend.chat(&request))?;
            let mut collected = (*triple).clone();
            if response.trim().is_empty() {
                collected.failed = true;
            } else {
                collected.response = Some(response);
            }
            Ok::<_, Error>(collected)
        });
        let mut completed = Vec::new();
        let mut first_err = None;
        for result in results {
            match result {
                Ok(triple) => completed.push(triple),
                Err(e) if first_err.is_none() => first_err = Some(e),
                Err(_) => {}
            }
        }
        stats.collected += completed.len();
        append_jsonl(checkpoint_path, &completed)?;
        for triple in completed {
            done.insert(triple.id.clone(), triple);
        }
        if let Some(e) = first_err {
            return Err(e);
        }
    }

    let mut out = Vec::with_capacity(triples.len());
    for triple in triples {
        let collected = done
            .remove(&triple.id)
            .expect("every triple is checkpointed or pending-collected");
        stats.failed_empty += collected.failed as usize;
        out.push(collected);
    }
    Ok((out, stats))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExportMetadata {
    pub instruction_id: String,
    pub text_id: String,
    pub perspective: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
}

/// One training-ready record.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExportRecord {
    pub prompt: String,
    pub response: String,
    pub metadata: ExportMetadata,
}

/// Write training records for fully responded triples. Difficulty is
/// attached when a score exists for the triple. Unresponded or failed
/// triples are an error naming the offenders; exclude them first.
pub fn export_training(
    triples: &[DistillTriple],
    instructions: &[Instruction],
    texts: &[UserText],
    perspectives: &[Perspective],
    scores: &[DifficultyScore],
    path: &Path,
) -> Result<usize> {
    let unresponded: Vec<&str> = triples
        .iter()
        .filter(|t| t.failed || t.response.as_deref().is_none_or(|r| r.trim().is_empty()))
        .map(|t| t.id.as_str())
        .collect();
    if !unresponded.is_empty() {
        return Err(Error::Precondition(format!(
            "cannot export unresponded triples: {}",
            unresponded.join(", ")
        )));
    }
    let instructions = index_instructions(instructions);
    let texts = index_texts(texts);
    let perspective_names: BTreeMap<u32, &str> = perspectives
        .iter()
        .map(|p| (p.id, p.name.as_str()))
        .collect();
    let difficulty: BTreeMap<&str, f64> = scores
        .iter()
        .map(|s| (s.triple_id.as_str(), s.value))
        .collect();

    let mut records = Vec::with_capacity(triples.len());
    for triple in triples {
        let prompt = prompt_for(triple, &instructions, &texts)?;
        let instruction = instructions[triple.instruction_id.as_str()];
        let perspective = perspective_names
            .get(&instruction.task.perspective_id)
            .ok_or_else(|| {
                Error::Precondition(format!(
                    "instruction {} references unknown perspective {}",
                    instruction.id, instruction.task.perspective_id
                ))
            })?;
        records.push(ExportRecord {
            prompt,
            response: triple.response.clone().expect("checked above"),
            metadata: ExportMetadata {
                instruction_id: triple.instruction_id.clone(),
                text_id: triple.text_id.clone(),
                perspective: perspective.to_string(),
                difficulty: difficulty.get(triple.id.as_str()).copied(),
            },
        });
    }
    write_jsonl(path, &records)?;
    Ok(records.len())
}
