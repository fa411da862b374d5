//! Stage orchestration: dependency gating, hash-based no-op detection,
//! execution, and manifest recording for every pipeline stage.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use sentidistill_core::attributes::{build_pool, enumerate_attributes};
use sentidistill_core::backend::{
    map_bounded, ChatBackend, EmbedBackend, HttpBackend, HttpBackendConfig, MockBackend,
    RetryPolicy, ScoreBackend, SidecarEmbeddings,
};
use sentidistill_core::clustering::{weighted_cluster, ApParams};
use sentidistill_core::corpus::{
    collect_responses, export_training, pair_attribute_matched, pair_random, render_prompt,
    CollectParams,
};
use sentidistill_core::difficulty::{
    compare_proxy, score_dataset, warmup_split, RankingParams, ScoreInput,
};
use sentidistill_core::instructgen::{
    generate_demos, generate_tasks, rebalance_demos, synthesize_instruction,
};
use sentidistill_core::jsonl::{load_corpus, read_jsonl, write_jsonl};
use sentidistill_core::manifest::{hash_files, load_manifest, save_manifest, stage_index, STAGE_ORDER};
use sentidistill_core::sampling::filter_dataset;
use sentidistill_core::types::{
    AttributeMention, AttributePool, DifficultyScore, DistillTriple, Instruction, Perspective,
    PipelineManifest, PoolEntry, StageRecord, Task, UserText,
};
use sentidistill_core::{Error, Result};

use crate::config::{resolve, BackendKind, PairMethod, PipelineConfig};
use crate::manifest::write_json;

pub const CORPUS: &str = "corpus.jsonl";
pub const ATTRIBUTES: &str = "attributes.jsonl";
pub const ENUMERATE_STATS: &str = "enumerate_stats.json";
pub const POOL: &str = "pool.jsonl";
pub const PERSPECTIVES: &str = "perspectives.jsonl";
pub const CLUSTER_STATS: &str = "cluster_stats.json";
pub const TASKS: &str = "tasks.jsonl";
pub const INSTRUCTIONS: &str = "instructions.jsonl";
pub const DEMO_STATS: &str = "demo_stats.json";
pub const TRIPLES: &str = "triples.jsonl";
pub const PAIR_STATS: &str = "pair_stats.json";
pub const COLLECT_STATS: &str = "collect_stats.json";
pub const CHECKPOINT: &str = "collect.checkpoint.jsonl";
pub const WARMUP: &str = "warmup.jsonl";
pub const SCORES: &str = "scores.jsonl";
pub const FILTERED: &str = "filtered.jsonl";
pub const RETENTION_REPORT: &str = "retention_report.json";
pub const EXPORT: &str = "export.jsonl";
pub const PROXY_REPORT: &str = "proxy_report.json";
pub const REPORT: &str = "report.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageId {
    Ingest,
    Enumerate,
    Pool,
    Cluster,
    Tasks,
    Instructions,
    Demos,
    Pair,
    Collect,
    WarmupSplit,
    Score,
    Filter,
    Export,
    ProxyCompare,
    Report,
}

pub const ALL: [StageId; 15] = [
    StageId::Ingest,
    StageId::Enumerate,
    StageId::Pool,
    StageId::Cluster,
    StageId::Tasks,
    StageId::Instructions,
    StageId::Demos,
    StageId::Pair,
    StageId::Collect,
    StageId::WarmupSplit,
    StageId::Score,
    StageId::Filter,
    StageId::Export,
    StageId::ProxyCompare,
    StageId::Report,
];

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::Ingest => "ingest",
            StageId::Enumerate => "enumerate",
            StageId::Pool => "pool",
            StageId::Cluster => "cluster",
            StageId::Tasks => "tasks",
            StageId::Instructions => "instructions",
            StageId::Demos => "demos",
            StageId::Pair => "pair",
            StageId::Collect => "collect",
            StageId::WarmupSplit => "warmup-split",
            StageId::Score => "score",
            StageId::Filter => "filter",
            StageId::Export => "export",
            StageId::ProxyCompare => "proxy-compare",
            StageId::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
    DryRun,
}

pub struct StageCtx {
    pub config: PipelineConfig,
    /// Directory of the config file; relative config paths resolve here.
    pub config_dir: PathBuf,
    pub out_dir: PathBuf,
    pub force: bool,
    pub dry_run: bool,
    /// Injects a mock transport failure after N chat calls (testing only;
    /// never recorded in the manifest).
    pub mock_fail_after: Option<u64>,
}

impl StageCtx {
    fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn corpus_input(&self) -> PathBuf {
        resolve(&self.config_dir, &self.config.input_corpus)
    }
}

/// Stages whose manifest record must exist before this one may run.
fn deps(ctx: &StageCtx, stage: StageId) -> Vec<StageId> {
    use StageId::*;
    match stage {
        Ingest | Report => vec![],
        Enumerate => vec![Ingest],
        Pool => vec![Enumerate],
        Cluster => vec![Pool],
        Tasks => vec![Enumerate, Cluster],
        Instructions => vec![Tasks],
        Demos => vec![Ingest, Instructions],
        Pair => match ctx.config.pairing.method {
            PairMethod::Random => vec![Ingest, Demos],
            PairMethod::Attribute => vec![Ingest, Enumerate, Cluster, Demos],
        },
        Collect => vec![Ingest, Demos, Pair],
        WarmupSplit => vec![Collect],
        Score => vec![Ingest, Demos, Collect, WarmupSplit],
        Filter => vec![Collect, Score],
        Export => vec![Ingest, Cluster, Demos, Score, Filter],
        ProxyCompare => vec![Score],
    }
}

/// Pipeline files this stage reads, relative to the output directory.
fn input_names(ctx: &StageCtx, stage: StageId) -> Vec<&'static str> {
    use StageId::*;
    match stage {
        Ingest | Report => vec![],
        Enumerate => vec![CORPUS],
        Pool => vec![ATTRIBUTES],
        Cluster => vec![POOL],
        Tasks => vec![PERSPECTIVES, ATTRIBUTES],
        Instructions => vec![TASKS],
        Demos => vec![INSTRUCTIONS, CORPUS],
        Pair => match ctx.config.pairing.method {
            PairMethod::Random => vec![INSTRUCTIONS, CORPUS],
            PairMethod::Attribute => vec![INSTRUCTIONS, CORPUS, PERSPECTIVES, ATTRIBUTES],
        },
        Collect => vec![TRIPLES, INSTRUCTIONS, CORPUS],
        WarmupSplit => vec![TRIPLES],
        Score => vec![TRIPLES, WARMUP, INSTRUCTIONS, CORPUS],
        Filter => vec![TRIPLES, SCORES],
        Export => vec![FILTERED, INSTRUCTIONS, CORPUS, PERSPECTIVES, SCORES],
        ProxyCompare => vec![SCORES],
    }
}

/// Files this stage writes, relative to the output directory.
fn output_names(stage: StageId) -> &'static [&'static str] {
    use StageId::*;
    match stage {
        Ingest => &[CORPUS],
        Enumerate => &[ATTRIBUTES, ENUMERATE_STATS],
        Pool => &[POOL],
        Cluster => &[PERSPECTIVES, CLUSTER_STATS],
        Tasks => &[TASKS],
        Instructions => &[INSTRUCTIONS],
        Demos => &[INSTRUCTIONS, DEMO_STATS],
        Pair => &[TRIPLES, PAIR_STATS],
        Collect => &[TRIPLES, COLLECT_STATS],
        WarmupSplit => &[WARMUP],
        Score => &[SCORES],
        Filter => &[FILTERED, RETENTION_REPORT],
        Export => &[EXPORT],
        ProxyCompare => &[PROXY_REPORT],
        Report => &[REPORT],
    }
}

/// Which stage produces a pipeline file (first producer in stage order).
fn producer(name: &str) -> Option<StageId> {
    ALL.iter()
        .copied()
        .find(|stage| output_names(*stage).contains(&name))
}

/// External files this stage reads (outside the output directory).
fn external_inputs(ctx: &StageCtx, stage: StageId) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    if stage == StageId::Ingest {
        paths.push(ctx.corpus_input());
    }
    if stage == StageId::Cluster {
        if let Some(p) = &ctx.config.embeddings.sidecar_path {
            paths.push(resolve(&ctx.config_dir, p));
        }
    }
    if stage == StageId::ProxyCompare {
        let p = ctx.config.difficulty.proxy_scores.as_ref().ok_or_else(|| {
            Error::Config("difficulty.proxy_scores is not configured".into())
        })?;
        paths.push(resolve(&ctx.config_dir, p));
    }
    // Scripted fixture content steers every backend-driven stage.
    let uses_backend = matches!(
        stage,
        StageId::Enumerate
            | StageId::Tasks
            | StageId::Instructions
            | StageId::Demos
            | StageId::Collect
            | StageId::Score
    );
    if uses_backend && ctx.config.backend.kind == BackendKind::Mock {
        if let Some(p) = &ctx.config.backend.fixture_path {
            paths.push(resolve(&ctx.config_dir, p));
        }
    }
    Ok(paths)
}

/// The slice of configuration that determines this stage's outputs. The
/// seed is embedded so a seed change invalidates prior records.
fn stage_config(ctx: &StageCtx, stage: StageId) -> serde_json::Value {
    let c = &ctx.config;
    let kind = serde_json::to_value(c.backend.kind).expect("backend kind");
    match stage {
        StageId::Ingest => json!({ "seed": c.seed }),
        StageId::Enumerate => json!({
            "seed": c.seed,
            "backend": kind,
            "model": c.backend.teacher_model,
            "enumeration_limit": c.attributes.enumeration_limit,
        }),
        StageId::Pool => json!({ "seed": c.seed, "min_keep": c.attributes.min_keep }),
        StageId::Cluster => json!({
            "seed": c.seed,
            "damping": c.clustering.damping,
            "percentile_rate": c.clustering.percentile_rate,
            "max_iter": c.clustering.max_iter,
            "stable_window": c.clustering.stable_window,
            "perturb_preference": c.clustering.perturb_preference,
            "embedding": match &c.embeddings.sidecar_path {
                Some(_) => "sidecar".to_string(),
                None => c.backend.embed_model.clone(),
            },
        }),
        StageId::Tasks | StageId::Instructions => json!({
            "seed": c.seed,
            "backend": kind,
            "model": c.backend.teacher_model,
        }),
        StageId::Demos => json!({
            "seed": c.seed,
            "backend": kind,
            "model": c.backend.teacher_model,
            "demos_per_task": c.instructions.demos_per_task,
            "balance_ratio": c.instructions.balance_ratio,
        }),
        StageId::Pair => json!({
            "seed": c.seed,
            "n_pairs": c.pairing.n_pairs,
            "method": serde_json::to_value(c.pairing.method).expect("pair method"),
        }),
        StageId::Collect => json!({
            "seed": c.seed,
            "backend": kind,
            "model": c.backend.teacher_model,
        }),
        StageId::WarmupSplit => json!({ "seed": c.seed, "warmup_n": c.difficulty.warmup_n }),
        StageId::Score => json!({
            "seed": c.seed,
            "backend": kind,
            "model": c.backend.scoring_model,
            "metric": c.difficulty.metric,
            "top_p": c.difficulty.top_p,
            "epsilon_d": c.difficulty.epsilon_d,
            "top_k": c.backend.top_k,
        }),
        StageId::Filter => json!({ "seed": c.seed, "strategy": c.filter.strategy }),
        StageId::Export => json!({ "seed": c.seed }),
        StageId::ProxyCompare => json!({ "seed": c.seed }),
        StageId::Report => json!({}),
    }
}

/// Missing-dependency gate: every dep stage must have a manifest record
/// and every pipeline input file must exist. Errors name the earliest
/// missing stage in canonical order.
fn gate(ctx: &StageCtx, stage: StageId, manifest: &PipelineManifest) -> Result<()> {
    let mut missing: BTreeSet<usize> = BTreeSet::new();
    for dep in deps(ctx, stage) {
        if manifest.record_for(dep.name()).is_none() {
            missing.insert(stage_index(dep.name()).expect("known stage"));
        }
    }
    for name in input_names(ctx, stage) {
        if !ctx.out_path(name).exists() {
            if let Some(p) = producer(name) {
                missing.insert(stage_index(p.name()).expect("known stage"));
            }
        }
    }
    if let Some(&idx) = missing.iter().next() {
        return Err(Error::MissingStage(STAGE_ORDER[idx].to_string()));
    }
    for path in external_inputs(ctx, stage)? {
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing input file: {}",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Follow recorded in-place rewrites of `name` by later stages (demos
/// embeds demo pools into instructions.jsonl, collect fills responses
/// into triples.jsonl). The file is current for the recording stage when
/// an unbroken chain of rewrites leads from its recorded hash to the
/// hash on disk.
fn rewritten_downstream(
    manifest: &PipelineManifest,
    stage: &str,
    name: &str,
    recorded: &str,
    current: Option<&String>,
) -> bool {
    let Some(current) = current else {
        return false;
    };
    let my_idx = stage_index(stage).unwrap_or(usize::MAX);
    let mut expected = recorded.to_string();
    for rec in &manifest.stages {
        if stage_index(&rec.stage).unwrap_or(usize::MAX) <= my_idx {
            continue;
        }
        if let (Some(inh), Some(outh)) = (rec.input_hashes.get(name), rec.output_hashes.get(name))
        {
            if *inh == expected {
                expected = outh.clone();
            }
        }
    }
    expected == *current
}

/// A completed stage is a no-op when config and hashes still match.
/// Inputs the stage itself rewrites are covered by the output check;
/// outputs rewritten in place by later stages are accepted through the
/// recorded rewrite chain.
fn stage_up_to_date(
    manifest: &PipelineManifest,
    stage: &str,
    config: &serde_json::Value,
    current_inputs: &BTreeMap<String, String>,
    current_outputs: &BTreeMap<String, String>,
) -> bool {
    let Some(rec) = manifest.record_for(stage) else {
        return false;
    };
    if &rec.config != config {
        return false;
    }
    for (name, hash) in &rec.output_hashes {
        if current_outputs.get(name) == Some(hash) {
            continue;
        }
        if !rewritten_downstream(manifest, stage, name, hash, current_outputs.get(name)) {
            return false;
        }
    }
    for (name, hash) in &rec.input_hashes {
        if rec.output_hashes.contains_key(name) {
            continue;
        }
        if current_inputs.get(name) != Some(hash) {
            return false;
        }
    }
    true
}

pub fn run_stage(ctx: &StageCtx, stage: StageId) -> Result<Outcome> {
    let manifest_path = ctx.out_path(MANIFEST);
    let mut manifest = load_manifest(&manifest_path)?;

    if !ctx.force {
        gate(ctx, stage, &manifest)?;
    }

    let config_value = stage_config(ctx, stage);
    let in_names = input_names(ctx, stage);
    let out_names = output_names(stage);

    // Input hashes are taken before execution so self-rewriting stages
    // record the content they actually consumed.
    let mut current_inputs = hash_files(&ctx.out_dir, &in_names)?;
    for path in external_inputs(ctx, stage)? {
        if path.exists() {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            current_inputs.insert(name, sentidistill_core::jsonl::file_hash(&path)?);
        }
    }
    let current_outputs = hash_files(&ctx.out_dir, out_names)?;

    if stage != StageId::Report
        && !ctx.force
        && stage_up_to_date(
            &manifest,
            stage.name(),
            &config_value,
            &current_inputs,
            &current_outputs,
        )
    {
        info!("{}: up to date, skipping", stage.name());
        return Ok(Outcome::Skipped);
    }

    if ctx.dry_run {
        info!("{}: would run (dry run)", stage.name());
        return Ok(Outcome::DryRun);
    }

    info!("{}: running", stage.name());
    let started = Instant::now();
    execute(ctx, stage)?;
    let duration_ms = started.elapsed().as_millis() as u64;

    if stage != StageId::Report {
        let output_hashes = hash_files(&ctx.out_dir, out_names)?;
        manifest.upsert(StageRecord {
            stage: stage.name().to_string(),
            config: config_value,
            input_hashes: current_inputs,
            output_hashes,
            seed: ctx.config.seed,
            completed_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            duration_ms,
        });
        save_manifest(&manifest_path, &manifest)?;
    }
    info!("{}: done in {} ms", stage.name(), duration_ms);
    Ok(Outcome::Ran)
}

/// Run every stage in canonical order; proxy-compare is skipped unless a
/// proxy score file is configured.
pub fn run_all(ctx: &StageCtx) -> Result<()> {
    for stage in ALL {
        if stage == StageId::ProxyCompare && ctx.config.difficulty.proxy_scores.is_none() {
            info!("proxy-compare: skipped (no difficulty.proxy_scores configured)");
            continue;
        }
        run_stage(ctx, stage)?;
    }
    Ok(())
}

fn execute(ctx: &StageCtx, stage: StageId) -> Result<()> {
    match stage {
        StageId::Ingest => run_ingest(ctx),
        StageId::Enumerate => run_enumerate(ctx),
        StageId::Pool => run_pool(ctx),
        StageId::Cluster => run_cluster(ctx),
        StageId::Tasks => run_tasks(ctx),
        StageId::Instructions => run_instructions(ctx),
        StageId::Demos => run_demos(ctx),
        StageId::Pair => run_pair(ctx),
        StageId::Collect => run_collect(ctx),
        StageId::WarmupSplit => run_warmup_split(ctx),
        StageId::Score => run_score(ctx),
        StageId::Filter => run_filter(ctx),
        StageId::Export => run_export(ctx),
        StageId::ProxyCompare => run_proxy_compare(ctx),
        StageId::Report => run_report(ctx),
    }
}

// ---------------------------------------------------------------- backends

fn retry_policy(config: &PipelineConfig) -> RetryPolicy {
    RetryPolicy {
        max_retries: config.backend.max_retries,
        base_delay_ms: config.backend.base_delay_ms,
        max_delay_ms: config.backend.max_delay_ms,
    }
}

fn build_mock(ctx: &StageCtx) -> Result<MockBackend> {
    let mut mock = MockBackend::new(ctx.config.seed);
    if let Some(p) = &ctx.config.backend.fixture_path {
        let path = resolve(&ctx.config_dir, p);
        if !path.exists() {
            return Err(Error::Config(format!(
                "backend fixture not found: {}",
                path.display()
            )));
        }
        let n = mock.load_fixture(&path)?;
        info!("loaded {n} scripted fixture entries from {}", path.display());
    }
    if let Some(n) = ctx.mock_fail_after {
        mock = mock.with_fail_after(n);
    }
    Ok(mock)
}

fn http_config(ctx: &StageCtx, model: &str) -> HttpBackendConfig {
    let b = &ctx.config.backend;
    HttpBackendConfig {
        base_url: b.base_url.clone(),
        api_key: std::env::var(&b.api_key_env).ok(),
        model: model.to_string(),
        embed_model: b.embed_model.clone(),
        top_k: b.top_k,
        retry: retry_policy(&ctx.config),
        timeout_secs: b.timeout_secs,
    }
}

fn make_chat(ctx: &StageCtx) -> Result<Box<dyn ChatBackend>> {
    match ctx.config.backend.kind {
        BackendKind::Mock => Ok(Box::new(build_mock(ctx)?)),
        BackendKind::Http => Ok(Box::new(HttpBackend::new(http_config(
            ctx,
            &ctx.config.backend.teacher_model.clone(),
        ))?)),
    }
}

fn make_score(ctx: &StageCtx) -> Result<Box<dyn ScoreBackend>> {
    match ctx.config.backend.kind {
        BackendKind::Mock => Ok(Box::new(build_mock(ctx)?)),
        BackendKind::Http => {
            let b = &ctx.config.backend;
            if b.scoring_model == b.teacher_model {
                warn!(
                    "scoring model equals teacher model ({}); difficulty should come from the warmed-up student",
                    b.scoring_model
                );
            }
            Ok(Box::new(HttpBackend::new(http_config(
                ctx,
                &b.scoring_model.clone(),
            ))?))
        }
    }
}

fn make_embed(ctx: &StageCtx) -> Result<Box<dyn EmbedBackend>> {
    if let Some(p) = &ctx.config.embeddings.sidecar_path {
        let path = resolve(&ctx.config_dir, p);
        return Ok(Box::new(SidecarEmbeddings::load(&path)?));
    }
    match ctx.config.backend.kind {
        BackendKind::Mock => Ok(Box::new(build_mock(ctx)?)),
        BackendKind::Http => Ok(Box::new(HttpBackend::new(http_config(
            ctx,
            &ctx.config.backend.teacher_model.clone(),
        ))?)),
    }
}

// ------------------------------------------------------------ stage bodies

/// One thresholded pool attribute, serialized in name order.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoolRecord {
    name: String,
    count: u64,
    mention_ids: Vec<String>,
}

#[derive(Debug, Default, Serialize)]
struct DemoStats {
    instructions: usize,
    empty_demo_pools: usize,
    demo_calls: usize,
    rebalance_calls: usize,
    imbalanced: usize,
}

fn run_ingest(ctx: &StageCtx) -> Result<()> {
    let texts = load_corpus(&ctx.corpus_input())?;
    if texts.is_empty() {
        return Err(Error::Precondition("input corpus is empty".into()));
    }
    write_jsonl(&ctx.out_path(CORPUS), &texts)?;
    info!("ingested {} texts", texts.len());
    Ok(())
}

fn run_enumerate(ctx: &StageCtx) -> Result<()> {
    let texts: Vec<UserText> = read_jsonl(&ctx.out_path(CORPUS))?;
    let limit = ctx
        .config
        .attributes
        .enumeration_limit
        .unwrap_or(texts.len())
        .min(texts.len());
    let backend = make_chat(ctx)?;
    let (mentions, stats) =
        enumerate_attributes(&texts[..limit], backend.as_ref(), ctx.config.concurrency)?;
    write_jsonl(&ctx.out_path(ATTRIBUTES), &mentions)?;
    write_json(&ctx.out_path(ENUMERATE_STATS), &stats)?;
    info!(
        "enumerated {} mentions from {} texts ({} parse failures, {} empty responses)",
        stats.mentions, stats.texts, stats.parse_failures, stats.empty_responses
    );
    Ok(())
}

fn run_pool(ctx: &StageCtx) -> Result<()> {
    let mentions: Vec<AttributeMention> = read_jsonl(&ctx.out_path(ATTRIBUTES))?;
    let pool = build_pool(&mentions, ctx.config.attributes.min_keep);
    if pool.is_empty() {
        return Err(Error::Precondition(format!(
            "no attribute reached the keep threshold {}",
            ctx.config.attributes.min_keep
        )));
    }
    let records: Vec<PoolRecord> = pool
        .entries
        .iter()
        .map(|(name, entry)| PoolRecord {
            name: name.clone(),
            count: entry.count,
            mention_ids: entry.mention_ids.clone(),
        })
        .collect();
    write_jsonl(&ctx.out_path(POOL), &records)?;
    info!("pool kept {} of {} distinct attributes", records.len(), {
        let mut names: BTreeSet<&str> = BTreeSet::new();
        for m in &mentions {
            names.insert(&m.name);
        }
        names.len()
    });
    Ok(())
}

fn read_pool(ctx: &StageCtx) -> Result<AttributePool> {
    let records: Vec<PoolRecord> = read_jsonl(&ctx.out_path(POOL))?;
    let mut entries = BTreeMap::new();
    for r in records {
        entries.insert(
            r.name,
            PoolEntry {
                count: r.count,
                mention_ids: r.mention_ids,
            },
        );
    }
    Ok(AttributePool { entries })
}

fn run_cluster(ctx: &StageCtx) -> Result<()> {
    let pool = read_pool(ctx)?;
    let names: Vec<String> = pool.entries.keys().cloned().collect();
    let backend = make_embed(ctx)?;
    let mut embeddings: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for chunk in names.chunks(64) {
        let vectors = backend.embed(chunk)?;
        for (name, v) in chunk.iter().zip(vectors) {
            embeddings.insert(name.clone(), v.values);
        }
    }
    let params = ApParams {
        damping: ctx.config.clustering.damping,
        max_iter: ctx.config.clustering.max_iter,
        stable_window: ctx.config.clustering.stable_window,
        perturb_preference: ctx.config.clustering.perturb_preference,
    };
    let (perspectives, stats) = weighted_cluster(
        &pool,
        &embeddings,
        ctx.config.clustering.percentile_rate,
        &params,
    )?;
    if !stats.converged {
        warn!(
            "affinity propagation did not converge within {} iterations",
            params.max_iter
        );
    }
    write_jsonl(&ctx.out_path(PERSPECTIVES), &perspectives)?;
    write_json(&ctx.out_path(CLUSTER_STATS), &stats)?;
    info!(
        "clustered {} attributes into {} perspectives ({} iterations)",
        stats.points, stats.perspectives, stats.iterations
    );
    Ok(())
}

fn run_tasks(ctx: &StageCtx) -> Result<()> {
    let perspectives: Vec<Perspective> = read_jsonl(&ctx.out_path(PERSPECTIVES))?;
    let mentions: Vec<AttributeMention> = read_jsonl(&ctx.out_path(ATTRIBUTES))?;
    let backend = make_chat(ctx)?;
    let results = map_bounded(&perspectives, ctx.config.concurrency, |_, p| {
        generate_tasks(p, &mentions, backend.as_ref())
    });
    let mut tasks = Vec::new();
    let mut dropped = 0;
    for result in results {
        let (mut batch, skipped) = result?;
        tasks.append(&mut batch);
        dropped += skipped;
    }
    if tasks.is_empty() {
        return Err(Error::Precondition("no tasks were generated".into()));
    }
    write_jsonl(&ctx.out_path(TASKS), &tasks)?;
    info!("generated {} tasks ({} malformed entries dropped)", tasks.len(), dropped);
    Ok(())
}

fn run_instructions(ctx: &StageCtx) -> Result<()> {
    let tasks: Vec<Task> = read_jsonl(&ctx.out_path(TASKS))?;
    // Ids are positional per perspective, recomputed from file order.
    let mut counters: BTreeMap<u32, usize> = BTreeMap::new();
    let indexed: Vec<(Task, usize)> = tasks
        .into_iter()
        .map(|t| {
            let counter = counters.entry(t.perspective_id).or_insert(0);
            let index = *counter;
            *counter += 1;
            (t, index)
        })
        .collect();
    let backend = make_chat(ctx)?;
    let results = map_bounded(&indexed, ctx.config.concurrency, |_, (task, index)| {
        synthesize_instruction(task, *index, backend.as_ref())
    });
    let mut instructions = Vec::new();
    let mut rejected = 0;
    for result in results {
        match result? {
            Some(ins) => instructions.push(ins),
            None => rejected += 1,
        }
    }
    if instructions.is_empty() {
        return Err(Error::Precondition(
            "every instruction failed structural validation".into(),
        ));
    }
    write_jsonl(&ctx.out_path(INSTRUCTIONS), &instructions)?;
    info!(
        "synthesized {} instructions ({} rejected after retry)",
        instructions.len(),
        rejected
    );
    Ok(())
}

fn run_demos(ctx: &StageCtx) -> Result<()> {
    let instructions: Vec<Instruction> = read_jsonl(&ctx.out_path(INSTRUCTIONS))?;
    let texts: Vec<UserText> = read_jsonl(&ctx.out_path(CORPUS))?;
    let backend = make_chat(ctx)?;
    let target = ctx.config.instructions.demos_per_task;
    let ratio = ctx.config.instructions.balance_ratio;
    let seed = ctx.config.seed;

    struct DemoResult {
        instruction: Option<Instruction>,
        demo_calls: usize,
        rebalance_calls: usize,
        imbalanced: bool,
    }
    let results = map_bounded(&instructions, ctx.config.concurrency, |_, ins| {
        let (demos, demo_calls) =
            generate_demos(&ins.task, &texts, backend.as_ref(), target, seed)?;
        if demos.is_empty() {
            warn!("instruction {}: empty demo pool, dropped", ins.id);
            return Ok::<_, Error>(DemoResult {
                instruction: None,
                demo_calls,
                rebalance_calls: 0,
                imbalanced: false,
            });
        }
        let outcome = rebalance_demos(demos, &ins.task, &texts, backend.as_ref(), target, ratio, seed)?;
        let mut ins = ins.clone();
        ins.demos = outcome.demos;
        ins.imbalanced = outcome.imbalanced;
        Ok(DemoResult {
            instruction: Some(ins),
            demo_calls,
            rebalance_calls: outcome.calls,
            imbalanced: outcome.imbalanced,
        })
    });

    let mut kept = Vec::new();
    let mut stats = DemoStats::default();
    for result in results {
        let r = result?;
        stats.demo_calls += r.demo_calls;
        stats.rebalance_calls += r.rebalance_calls;
        stats.imbalanced += r.imbalanced as usize;
        match r.instruction {
            Some(ins) => kept.push(ins),
            None => stats.empty_demo_pools += 1,
        }
    }
    if kept.is_empty() {
        return Err(Error::Precondition("no instruction kept a demo pool".into()));
    }
    stats.instructions = kept.len();
    write_jsonl(&ctx.out_path(INSTRUCTIONS), &kept)?;
    write_json(&ctx.out_path(DEMO_STATS), &stats)?;
    info!(
        "filled demo pools for {} instructions ({} dropped empty, {} flagged imbalanced)",
        stats.instructions, stats.empty_demo_pools, stats.imbalanced
    );
    Ok(())
}

fn run_pair(ctx: &StageCtx) -> Result<()> {
    let instructions: Vec<Instruction> = read_jsonl(&ctx.out_path(INSTRUCTIONS))?;
    let texts: Vec<UserText> = read_jsonl(&ctx.out_path(CORPUS))?;
    let n_pairs = ctx.config.pairing.n_pairs;
    let (triples, stats) = match ctx.config.pairing.method {
        PairMethod::Random => pair_random(&instructions, &texts, n_pairs, ctx.config.seed)?,
        PairMethod::Attribute => {
            let perspectives: Vec<Perspective> = read_jsonl(&ctx.out_path(PERSPECTIVES))?;
            let mentions: Vec<AttributeMention> = read_jsonl(&ctx.out_path(ATTRIBUTES))?;
            // text id -> canonical attribute names mentioned in that text.
            let mut index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
            for m in &mentions {
                index
                    .entry(m.text_id.clone())
                    .or_default()
                    .insert(m.name.clone());
            }
            let index: BTreeMap<String, Vec<String>> = index
                .into_iter()
                .map(|(text_id, names)| (text_id, names.into_iter().collect()))
                .collect();
            pair_attribute_matched(
                &instructions,
                &texts,
                &perspectives,
                &index,
                n_pairs,
                ctx.config.seed,
            )?
        }
    };
    write_jsonl(&ctx.out_path(TRIPLES), &triples)?;
    write_json(&ctx.out_path(PAIR_STATS), &stats)?;
    info!(
        "paired {} triples ({} duplicate draws, {} attribute fallbacks)",
        stats.n_pairs, stats.duplicate_pairs, stats.fallbacks
    );
    Ok(())
}

fn run_collect(ctx: &StageCtx) -> Result<()> {
    let triples: Vec<DistillTriple> = read_jsonl(&ctx.out_path(TRIPLES))?;
    let instructions: Vec<Instruction> = read_jsonl(&ctx.out_path(INSTRUCTIONS))?;
    let texts: Vec<UserText> = read_jsonl(&ctx.out_path(CORPUS))?;
    let backend = make_chat(ctx)?;
    let params = CollectParams {
        checkpoint_every: ctx.config.pairing.checkpoint_every,
        concurrency: ctx.config.concurrency,
        retry: retry_policy(&ctx.config),
    };
    let checkpoint = ctx.out_path(CHECKPOINT);
    let (completed, stats) = collect_responses(
        &triples,
        &instructions,
        &texts,
        backend.as_ref(),
        &params,
        &checkpoint,
    )?;
    write_jsonl(&ctx.out_path(TRIPLES), &completed)?;
    write_json(&ctx.out_path(COLLECT_STATS), &stats)?;
    if checkpoint.exists() {
        fs::remove_file(&checkpoint)?;
    }
    info!(
        "collected {} responses ({} from checkpoint, {} empty marked failed)",
        stats.collected, stats.from_checkpoint, stats.failed_empty
    );
    Ok(())
}

fn run_warmup_split(ctx: &StageCtx) -> Result<()> {
    let triples: Vec<DistillTriple> = read_jsonl(&ctx.out_path(TRIPLES))?;
    let total = triples.len();
    let usable: Vec<DistillTriple> = triples
        .into_iter()
        .filter(|t| !t.failed && t.response.is_some())
        .collect();
    if usable.len() < total {
        warn!(
            "{} failed or unresponded triples excluded from the warm-up split",
            total - usable.len()
        );
    }
    let (warmup, remainder) =
        warmup_split(&usable, ctx.config.difficulty.warmup_n, ctx.config.seed)?;
    write_jsonl(&ctx.out_path(WARMUP), &warmup)?;
    info!(
        "warm-up split: {} triples reserved, {} remain for scoring",
        warmup.len(),
        remainder.len()
    );
    Ok(())
}

/// Triples that remain after the warm-up reservation: responded, not
/// failed, and not drawn into warmup.jsonl.
fn scoring_remainder(ctx: &StageCtx) -> Result<Vec<DistillTriple>> {
    let triples: Vec<DistillTriple> = read_jsonl(&ctx.out_path(TRIPLES))?;
    let warmup: Vec<DistillTriple> = read_jsonl(&ctx.out_path(WARMUP))?;
    let reserved: BTreeSet<&str> = warmup.iter().map(|t| t.id.as_str()).collect();
    Ok(triples
        .into_iter()
        .filter(|t| !t.failed && t.response.is_some() && !reserved.contains(t.id.as_str()))
        .collect())
}

fn run_score(ctx: &StageCtx) -> Result<()> {
    let remainder = scoring_remainder(ctx)?;
    if remainder.is_empty() {
        return Err(Error::Precondition(
            "no scorable triples remain after the warm-up split".into(),
        ));
    }
    let instructions: Vec<Instruction> = read_jsonl(&ctx.out_path(INSTRUCTIONS))?;
    let texts: Vec<UserText> = read_jsonl(&ctx.out_path(CORPUS))?;
    let by_instruction: HashMap<&str, &Instruction> =
        instructions.iter().map(|i| (i.id.as_str(), i)).collect();
    let by_text: HashMap<&str, &UserText> = texts.iter().map(|t| (t.id.as_str(), t)).collect();

    let mut inputs = Vec::with_capacity(remainder.len());
    for t in &remainder {
        let ins = by_instruction.get(t.instruction_id.as_str()).ok_or_else(|| {
            Error::Invalid(format!(
                "triple {} references unknown instruction {}",
                t.id, t.instruction_id
            ))
        })?;
        let text = by_text.get(t.text_id.as_str()).ok_or_else(|| {
            Error::Invalid(format!("triple {} references unknown text {}", t.id, t.text_id))
        })?;
        let (prompt, hash) = render_prompt(ins, &t.demo_ids, &text.text)?;
        if hash != t.prompt_hash {
            return Err(Error::Invalid(format!(
                "prompt hash mismatch for {}: instructions or texts changed since pairing",
                t.id
            )));
        }
        inputs.push(ScoreInput {
            triple_id: t.id.clone(),
            prompt,
            response: t.response.clone().expect("responded triple"),
            user_text: text.text.clone(),
        });
    }

    let backend = make_score(ctx)?;
    let params = RankingParams {
        p: ctx.config.difficulty.top_p,
        epsilon_d: ctx.config.difficulty.epsilon_d,
        k_cap: ctx.config.backend.top_k,
    };
    let scores = score_dataset(
        &inputs,
        backend.as_ref(),
        ctx.config.metric()?,
        &params,
        ctx.config.concurrency,
    )?;
    write_jsonl(&ctx.out_path(SCORES), &scores)?;
    let mean = scores.iter().map(|s| s.value).sum::<f64>() / scores.len() as f64;
    info!(
        "scored {} triples with {} (mean {:.4})",
        scores.len(),
        ctx.config.difficulty.metric,
        mean
    );
    Ok(())
}

fn run_filter(ctx: &StageCtx) -> Result<()> {
    let triples: Vec<DistillTriple> = read_jsonl(&ctx.out_path(TRIPLES))?;
    let scores: Vec<DifficultyScore> = read_jsonl(&ctx.out_path(SCORES))?;
    let scored: BTreeSet<&str> = scores.iter().map(|s| s.triple_id.as_str()).collect();
    let subset: Vec<DistillTriple> = triples
        .into_iter()
        .filter(|t| scored.contains(t.id.as_str()))
        .collect();
    let (kept, report) = filter_dataset(&subset, &scores, ctx.config.strategy()?, ctx.config.seed)?;
    write_jsonl(&ctx.out_path(FILTERED), &kept)?;
    write_json(&ctx.out_path(RETENTION_REPORT), &report)?;
    info!(
        "retained {}/{} triples ({:.1}%)",
        report.retained,
        report.total,
        report.overall_retention * 100.0
    );
    Ok(())
}

fn run_export(ctx: &StageCtx) -> Result<()> {
    let triples: Vec<DistillTriple> = read_jsonl(&ctx.out_path(FILTERED))?;
    let instructions: Vec<Instruction> = read_jsonl(&ctx.out_path(INSTRUCTIONS))?;
    let texts: Vec<UserText> = read_jsonl(&ctx.out_path(CORPUS))?;
    let perspectives: Vec<Perspective> = read_jsonl(&ctx.out_path(PERSPECTIVES))?;
    let scores: Vec<DifficultyScore> = read_jsonl(&ctx.out_path(SCORES))?;
    let n = export_training(
        &triples,
        &instructions,
        &texts,
        &perspectives,
        &scores,
        &ctx.out_path(EXPORT),
    )?;
    info!("exported {n} training records");
    Ok(())
}

/// Accepts both bare {triple_id, value} lines and full difficulty-score
/// lines, so one run's scores.jsonl can be another run's proxy input.
#[derive(Debug, Deserialize)]
struct ProxyScoreRecord {
    triple_id: String,
    value: f64,
}

fn run_proxy_compare(ctx: &StageCtx) -> Result<()> {
    let proxy_path = ctx
        .config
        .difficulty
        .proxy_scores
        .as_ref()
        .map(|p| resolve(&ctx.config_dir, p))
        .ok_or_else(|| Error::Config("difficulty.proxy_scores is not configured".into()))?;
    let predicted: Vec<ProxyScoreRecord> = read_jsonl(&proxy_path)?;
    let reference: Vec<DifficultyScore> = read_jsonl(&ctx.out_path(SCORES))?;
    let predicted: BTreeMap<String, f64> = predicted
        .into_iter()
        .map(|r| (r.triple_id, r.value))
        .collect();
    let reference: BTreeMap<String, f64> = reference
        .into_iter()
        .map(|s| (s.triple_id, s.value))
        .collect();
    let report = compare_proxy(&predicted, &reference)?;
    write_json(&ctx.out_path(PROXY_REPORT), &report)?;
    info!(
        "proxy comparison: mse {:.6}, rank correlation {:.4}, coverage {:.2}",
        report.mse, report.rank_correlation, report.coverage
    );
    Ok(())
}

fn count_lines(path: &PathBuf) -> Result<Option<u64>> {
    if !path.exists() {
        return Ok(None);
    }
    let raw = fs::read_to_string(path)?;
    Ok(Some(raw.lines().filter(|l| !l.trim().is_empty()).count() as u64))
}

fn run_report(ctx: &StageCtx) -> Result<()> {
    let mut body = serde_json::Map::new();
    for (key, file) in [
        ("corpus_texts", CORPUS),
        ("attribute_mentions", ATTRIBUTES),
        ("pool_attributes", POOL),
        ("perspectives", PERSPECTIVES),
        ("tasks", TASKS),
        ("instructions", INSTRUCTIONS),
        ("pairs", TRIPLES),
        ("warmup_triples", WARMUP),
        ("scored_triples", SCORES),
        ("filtered_triples", FILTERED),
        ("export_records", EXPORT),
    ] {
        body.insert(key.to_string(), json!(count_lines(&ctx.out_path(file))?));
    }

    let triples_path = ctx.out_path(TRIPLES);
    if triples_path.exists() {
        let triples: Vec<DistillTriple> = read_jsonl(&triples_path)?;
        let responded = triples.iter().filter(|t| t.response.is_some()).count();
        let failed = triples.iter().filter(|t| t.failed).count();
        body.insert("responded_triples".into(), json!(responded));
        body.insert("failed_triples".into(), json!(failed));
    }

    let scores_path = ctx.out_path(SCORES);
    if scores_path.exists() {
        let scores: Vec<DifficultyScore> = read_jsonl(&scores_path)?;
        if !scores.is_empty() {
            let mean = scores.iter().map(|s| s.value).sum::<f64>() / scores.len() as f64;
            let mut flags: BTreeMap<String, u64> = BTreeMap::new();
            for s in &scores {
                for f in &s.flags {
                    *flags.entry(f.clone()).or_insert(0) += 1;
                }
            }
            body.insert("mean_difficulty".into(), json!(mean));
            body.insert("score_flags".into(), json!(flags));
            body.insert(
                "metric".into(),
                json!(scores.first().map(|s| s.metric.as_str())),
            );
        }
    }

    let retention_path = ctx.out_path(RETENTION_REPORT);
    if retention_path.exists() {
        let retention: serde_json::Value = serde_json::from_str(&fs::read_to_string(&retention_path)?)?;
        let mut summary = serde_json::Map::new();
        for key in ["strategy", "total", "retained", "overall_retention"] {
            if let Some(v) = retention.get(key) {
                summary.insert(key.to_string(), v.clone());
            }
        }
        body.insert("retention".into(), json!(summary));
    }

    let cluster_path = ctx.out_path(CLUSTER_STATS);
    if cluster_path.exists() {
        let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cluster_path)?)?;
        body.insert("clustering".into(), stats);
    }

    let report = serde_json::Value::Object(body);
    write_json(&ctx.out_path(REPORT), &report)?;

    println!("pipeline report ({})", ctx.out_dir.display());
    for (key, value) in report.as_object().expect("object") {
        println!("  {key}: {value}");
    }
    let manifest = load_manifest(&ctx.out_path(MANIFEST))?;
    if !manifest.stages.is_empty() {
        println!("stage durations:");
        for rec in &manifest.stages {
            println!("  {}: {} ms (completed {})", rec.stage, rec.duration_ms, rec.completed_at);
        }
    }
    Ok(())
}
