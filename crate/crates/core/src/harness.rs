//! Experiment orchestration: task split, the end-to-end pipeline, method
//! evaluation, pool scaling, per-skill and per-task analyses, renderer data
//! export and the bundled case-study replay.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{dense_rank, global_order, Selector, SelectorKind, SelectorSpec};
use crate::budget::{admit, calibrate_tau, csv_error, select_adaptive, AdmissionConfig, Calibration, SweepSpec};
use crate::domain::{derive_seed, Skill, Task, UtilityLabel};
use crate::embed::EmbedderConfig;
use crate::error::{Error, Result};
use crate::librarian::{build_library, library_rank, whitespace_tokens, ClusterLadderConfig, MmrParams};
use crate::planner::{score_tasks, train, PlannerModel, PlannerTrainConfig};
use crate::renderer::{
    build_curriculum, render, teacher_pipeline, CurriculumConfig, Neighbor, ReferenceTeacher, RenderInput,
    RenderPair, RenderedContext, RenderedEntry, RuleStudent,
};
use crate::simworld::{evaluate_selections, generate_world, label_tasks, oracle_delta, rollout, rollout_seeds, World, WorldConfig};
use crate::stats::{mean, sample_std, spearman};

/// Spearman cutoffs separating improving and degrading tasks.
pub const GROUP_CUTOFF: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.5,
            dev: 0.2,
            test: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub embedder: EmbedderConfig,
    pub library: ClusterLadderConfig,
    pub train: PlannerTrainConfig,
    /// Cap used for evaluation; `tau` is replaced by the calibrated value.
    pub admission: AdmissionConfig,
    /// Methods to evaluate. Retrieval-style kinds without `k` are swept over
    /// `k_grid`.
    pub methods: Vec<SelectorSpec>,
    pub seeds: Vec<u64>,
    pub rollouts_per_task: usize,
    /// First rollout seed of the utility labels.
    pub label_seed: u64,
    pub split: SplitFractions,
    pub k_grid: Vec<usize>,
    pub tau_grid: Vec<f64>,
    pub pool_sizes: Vec<usize>,
    pub budgets: Vec<usize>,
    /// Rollouts per configuration in Monte-Carlo checks.
    pub mc_rollouts: usize,
    pub curriculum: CurriculumConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            embedder: EmbedderConfig::default(),
            library: ClusterLadderConfig::default(),
            train: PlannerTrainConfig::default(),
            admission: AdmissionConfig::default(),
            methods: default_methods(),
            seeds: vec![300, 301, 302, 303, 304],
            rollouts_per_task: 5,
            label_seed: 300,
            split: SplitFractions::default(),
            k_grid: vec![1, 2, 4, 8],
            tau_grid: SweepSpec::default_grid(),
            pool_sizes: vec![0, 4, 8, 16, 24, 32, 40],
            budgets: vec![1, 2, 4, 8, 16],
            mc_rollouts: 2000,
            curriculum: CurriculumConfig::default(),
        }
    }
}

/// Every implemented method plus the renderer ablation.
pub fn default_methods() -> Vec<SelectorSpec> {
    use SelectorKind::*;
    let mut methods: Vec<SelectorSpec> = [None, Random, Full, Bm25, Dense, FixedTopk, GlobalTopk, PlannerAdaptive]
        .into_iter()
        .map(SelectorSpec::new)
        .collect();
    methods[1].seed = Some(0);
    methods.push(SelectorSpec {
        render: Some(false),
        ..SelectorSpec::new(PlannerAdaptive)
    });
    methods
}

impl ExperimentConfig {
    /// The larger pinned world with an 82-skill library, ordered for pool
    /// prefixes by provenance coverage alone.
    pub fn acceptance() -> Self {
        ExperimentConfig {
            world: WorldConfig {
                n_tasks: 40,
                n_skills: 82,
                n_topics: 8,
                overlap_omega: 0.05,
                core_gain: [0.5, 0.7],
                helper_gain: [0.20, 0.35],
                ..WorldConfig::default()
            },
            library: ClusterLadderConfig {
                mmr_lambda: 1.0,
                ..ClusterLadderConfig::default()
            },
            pool_sizes: vec![0, 8, 16, 32, 48, 64, 82],
            budgets: vec![1, 2, 4, 8, 16, 32],
            ..ExperimentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.embedder.validate()?;
        self.library.validate()?;
        self.train.validate()?;
        self.admission.validate()?;
        let s = self.split;
        if [s.train, s.dev, s.test].iter().any(|f| !(0.0..=1.0).contains(f)) || (s.train + s.dev + s.test - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must lie in [0,1] and sum to 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds must be nonempty"));
        }
        if self.rollouts_per_task < 1 || self.mc_rollouts < 1 {
            return Err(Error::invalid("rollout counts must be at least 1"));
        }
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return Err(Error::invalid("k_grid must be nonempty with k >= 1"));
        }
        if self.tau_grid.is_empty() || self.tau_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("tau_grid must be nonempty within [0,1]"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("methods must be nonempty"));
        }
        for m in &self.methods {
            if m.k == Some(0) {
                return Err(Error::invalid(format!("{} has k = 0", m.kind.as_str())));
            }
        }
        ascending("pool_sizes", &self.pool_sizes)?;
        ascending("budgets", &self.budgets)?;
        Ok(())
    }
}

fn ascending(what: &str, xs: &[usize]) -> Result<()> {
    if xs.is_empty() || xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!("{what} must be nonempty and strictly ascending")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub train: Vec<Task>,
    pub dev: Vec<Task>,
    pub test: Vec<Task>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl TaskSplit {
    /// Dev and test tasks together.
    pub fn heldout(&self) -> Vec<Task> {
        self.dev.iter().chain(&self.test).cloned().collect()
    }

    pub fn ids(&self) -> SplitIds {
        let ids = |ts: &[Task]| ts.iter().map(|t| t.id.clone()).collect();
        SplitIds {
            train: ids(&self.train),
            dev: ids(&self.dev),
            test: ids(&self.test),
        }
    }

    pub fn from_ids(world: &World, ids: &SplitIds) -> Result<TaskSplit> {
        let get = |v: &[String]| v.iter().map(|id| world.task(id).cloned()).collect::<Result<Vec<_>>>();
        Ok(TaskSplit {
            train: get(&ids.train)?,
            dev: get(&ids.dev)?,
            test: get(&ids.test)?,
        })
    }
}

/// Family of a task id: the part before the first `:`.
pub fn task_family(id: &str) -> &str {
    id.split(':').next().unwrap_or(id)
}

/// Hash split stratified by task family. Within a family tasks are ordered
/// by a seed derived from their id, then cut by the split fractions.
pub fn split_tasks(tasks: &[Task], split: SplitFractions) -> TaskSplit {
    let mut families: BTreeMap<&str, Vec<&Task>> = BTreeMap::new();
    for t in tasks {
        families.entry(task_family(&t.id)).or_default().push(t);
    }
    let mut out = TaskSplit {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for (_, mut members) in families {
        members.sort_by_key(|t| (derive_seed(0, &t.id), t.id.clone()));
        let n = members.len();
        let n_train = ((n as f64 * split.train).round() as usize).min(n);
        let n_dev = ((n as f64 * split.dev).round() as usize).min(n - n_train);
        out.train.extend(members[..n_train].iter().map(|t| (*t).clone()));
        out.dev.extend(members[n_train..n_train + n_dev].iter().map(|t| (*t).clone()));
        out.test.extend(members[n_train + n_dev..].iter().map(|t| (*t).clone()));
    }
    out
}

/// Mean over tasks of the Spearman correlation between planner scores and
/// exact Δ over the library, with the per-task values.
pub fn heldout_spearman(world: &World, model: &PlannerModel, tasks: &[Task]) -> Result<(f64, Vec<f64>)> {
    if tasks.is_empty() {
        return Err(Error::invalid("no held-out tasks"));
    }
    let scores = score_tasks(model, tasks, &world.library);
    let per_task = tasks
        .iter()
        .zip(&scores)
        .map(|(t, sc)| {
            let oracle = world
                .library
                .skills
                .iter()
                .map(|s| oracle_delta(world, t, s))
                .collect::<Result<Vec<_>>>()?;
            let pred: Vec<f64> = world.library.skills.iter().map(|s| sc[&s.id]).collect();
            Ok(spearman(&pred, &oracle))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((mean(&per_task), per_task))
}

/// Generated world with its library passed through dedup, clustering and
/// the token gate.
pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    let raw = generate_world(&cfg.world)?;
    let library = build_library(raw.library.skills.clone(), &cfg.library, &cfg.embedder, &whitespace_tokens)?;
    raw.with_library(library)
}

pub fn label_split(world: &World, split: &TaskSplit, cfg: &ExperimentConfig) -> Result<Vec<UtilityLabel>> {
    label_tasks(world, &split.train, cfg.rollouts_per_task, cfg.label_seed)
}

pub fn train_planner(
    world: &World,
    split: &TaskSplit,
    labels: &[UtilityLabel],
    cfg: &ExperimentConfig,
) -> Result<PlannerModel> {
    Ok(train(labels, &world.library, &split.train, &cfg.train, &cfg.embedder)?.model)
}

/// Threshold sweep on the dev tasks with the pipeline's rendering.
pub fn calibrate(world: &World, model: &PlannerModel, split: &TaskSplit, cfg: &ExperimentConfig) -> Result<Calibration> {
    let spec = SweepSpec {
        tau_grid: cfg.tau_grid.clone(),
        include_sentinel: true,
        b_max: cfg.admission.b_max,
        render: true,
        seeds: cfg.seeds.clone(),
    };
    calibrate_tau(world, model, &split.dev, &spec)
}

/// Everything the evaluation stages consume.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub world: World,
    pub split: TaskSplit,
    pub labels: Vec<UtilityLabel>,
    pub model: PlannerModel,
    pub calibration: Calibration,
}

impl Artifacts {
    pub fn admission(&self) -> AdmissionConfig {
        self.calibration.best
    }
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Artifacts> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let split = split_tasks(&world.tasks, cfg.split);
    let labels = label_split(&world, &split, cfg)?;
    let model = train_planner(&world, &split, &labels, cfg)?;
    let calibration = calibrate(&world, &model, &split, cfg)?;
    Ok(Artifacts {
        world,
        split,
        labels,
        model,
        calibration,
    })
}

/// One rollout of one method on one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub task_id: String,
    pub seed: u64,
    pub pass: u8,
    pub messages: u64,
    pub b_t: usize,
    pub rendered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub kind: String,
    pub k: Option<usize>,
    pub rendered: bool,
    /// Mean over seeds of the per-seed pass rate, in percent.
    pub pass_pct: f64,
    /// Sample standard deviation over seeds, in percent.
    pub std_pct: f64,
    pub mean_messages: f64,
    pub mean_b_t: f64,
    pub n_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    /// One line per method with `k` picked from the sweep.
    pub best: Vec<SummaryRow>,
    pub k_protocol: String,
    pub admission: AdmissionConfig,
}

pub const K_PROTOCOL: &str =
    "methods without a configured k are swept over k_grid; `best` keeps the highest mean pass per method (ties to smaller k), chosen on the evaluation tasks";

/// Methods with unset `k` expanded over `k_grid`.
pub fn expand_methods(methods: &[SelectorSpec], k_grid: &[usize]) -> Vec<SelectorSpec> {
    methods
        .iter()
        .flat_map(|m| {
            if m.kind.needs_k() && m.k.is_none() {
                k_grid.iter().map(|&k| SelectorSpec { k: Some(k), ..m.clone() }).collect()
            } else {
                vec![m.clone()]
            }
        })
        .collect()
}

/// Selector over the artifact library with the calibrated admission and the
/// dev-set global ranking.
pub fn selector<'a>(art: &'a Artifacts, embedder: EmbedderConfig) -> Selector<'a> {
    Selector {
        library: &art.world.library,
        embedder,
        model: Some(&art.model),
        admission: Some(art.admission()),
        global: Some(global_order(&art.model, &art.split.dev, &art.world.library)),
    }
}

/// Rows ordered by task then seed.
pub fn method_rows(
    world: &World,
    selector: &Selector<'_>,
    spec: &SelectorSpec,
    tasks: &[Task],
    seeds: &[u64],
) -> Result<Vec<ResultRow>> {
    let rendered = spec.rendered();
    let select_all = |eval_seed: u64| -> Result<Vec<Vec<String>>> {
        tasks.par_iter().map(|t| selector.select(spec, t, eval_seed)).collect()
    };
    let mut records = Vec::new();
    if spec.kind == SelectorKind::Random {
        for &s in seeds {
            records.extend(evaluate_selections(world, tasks, &select_all(s)?, rendered, &[s])?.records);
        }
        let pos: BTreeMap<&str, usize> = tasks.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
        records.sort_by_key(|r| (pos[r.task_id.as_str()], r.seed));
    } else {
        records = evaluate_selections(world, tasks, &select_all(seeds[0])?, rendered, seeds)?.records;
    }
    let label = spec.label();
    Ok(records
        .into_iter()
        .map(|r| {
            let b_t = r.context_skill_ids.len();
            ResultRow {
                method: label.clone(),
                task_id: r.task_id,
                seed: r.seed,
                pass: r.reward,
                messages: r.messages,
                b_t,
                rendered: rendered && b_t > 1,
            }
        })
        .collect())
}

/// Per-method aggregation over rows, in `specs` order.
pub fn summarize(specs: &[SelectorSpec], rows: &[ResultRow]) -> Vec<SummaryRow> {
    specs
        .iter()
        .map(|spec| {
            let label = spec.label();
            let mine: Vec<&ResultRow> = rows.iter().filter(|r| r.method == label).collect();
            let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for r in &mine {
                by_seed.entry(r.seed).or_default().push(r.pass as f64);
            }
            let per_seed: Vec<f64> = by_seed.values().map(|v| mean(v)).collect();
            let msgs: Vec<f64> = mine.iter().map(|r| r.messages as f64).collect();
            let budgets: Vec<f64> = mine.iter().map(|r| r.b_t as f64).collect();
            SummaryRow {
                method: label,
                kind: spec.kind.as_str().to_string(),
                k: spec.k,
                rendered: spec.rendered(),
                pass_pct: 100.0 * mean(&per_seed),
                std_pct: 100.0 * sample_std(&per_seed),
                mean_messages: mean(&msgs),
                mean_b_t: mean(&budgets),
                n_rows: mine.len(),
            }
        })
        .collect()
}

/// Best row per (kind, rendering) group; groups keep first-appearance order.
pub fn best_per_method(summary: &[SummaryRow]) -> Vec<SummaryRow> {
    let mut best: Vec<SummaryRow> = Vec::new();
    for row in summary {
        match best.iter_mut().find(|b| b.kind == row.kind && b.rendered == row.rendered) {
            Some(b) => {
                if row.pass_pct > b.pass_pct || (row.pass_pct == b.pass_pct && row.k < b.k) {
                    *b = row.clone();
                }
            }
            None => best.push(row.clone()),
        }
    }
    best
}

/// Evaluates every configured method on the test tasks.
pub fn run_evaluation(cfg: &ExperimentConfig, art: &Artifacts) -> Result<Evaluation> {
    let specs = expand_methods(&cfg.methods, &cfg.k_grid);
    let sel = selector(art, cfg.embedder);
    let mut rows = Vec::new();
    for spec in &specs {
        rows.extend(method_rows(&art.world, &sel, spec, &art.split.test, &cfg.seeds)?);
    }
    let summary = summarize(&specs, &rows);
    let best = best_per_method(&summary);
    Ok(Evaluation {
        rows,
        summary,
        best,
        k_protocol: K_PROTOCOL.to_string(),
        admission: art.admission(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub pool_size: usize,
    pub method: String,
    pub mean_pass: f64,
    pub std_pass: f64,
    pub mean_messages: f64,
    pub mean_b_t: f64,
}

/// Full injection and the adaptive planner on MMR-ordered library prefixes,
/// evaluated on the test tasks.
pub fn run_scaling(cfg: &ExperimentConfig, art: &Artifacts, pool_sizes: &[usize]) -> Result<Vec<ScalingRow>> {
    ascending("pool_sizes", pool_sizes)?;
    let lib = &art.world.library;
    if pool_sizes.last().is_some_and(|&n| n > lib.len()) {
        return Err(Error::invalid(format!("pool size exceeds the {}-skill library", lib.len())));
    }
    let order = library_rank(
        lib,
        MmrParams {
            lambda: cfg.library.mmr_lambda,
            coverage_weight: cfg.library.coverage_weight,
        },
        &cfg.embedder,
    )?;
    let specs = [SelectorSpec::new(SelectorKind::Full), SelectorSpec::new(SelectorKind::PlannerAdaptive)];
    let mut out = Vec::new();
    for &n in pool_sizes {
        let world = art.world.with_library(lib.subset(&order[..n])?)?;
        let sel = Selector {
            library: &world.library,
            embedder: cfg.embedder,
            model: Some(&art.model),
            admission: Some(art.admission()),
            global: None,
        };
        let mut rows = Vec::new();
        for spec in &specs {
            rows.extend(method_rows(&world, &sel, spec, &art.split.test, &cfg.seeds)?);
        }
        for s in summarize(&specs, &rows) {
            out.push(ScalingRow {
                pool_size: n,
                method: s.method,
                mean_pass: s.pass_pct / 100.0,
                std_pass: s.std_pct / 100.0,
                mean_messages: s.mean_messages,
                mean_b_t: s.mean_b_t,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillDeltaRow {
    pub skill_id: String,
    pub oracle_dpass: f64,
    pub oracle_dmessages: f64,
    pub sampled_dpass: f64,
    pub sampled_dmessages: f64,
}

/// Singleton-injection effect of every skill, averaged over `tasks`: exact
/// from the simulator and sampled from `rollouts` paired seeds.
pub fn per_skill_deltas(world: &World, tasks: &[Task], rollouts: usize, seed: u64) -> Result<Vec<SkillDeltaRow>> {
    if tasks.is_empty() || rollouts < 1 {
        return Err(Error::invalid("per-skill deltas need tasks and rollouts"));
    }
    let seeds = rollout_seeds(seed, rollouts);
    let empty = RenderedContext::default();
    let baseline: Vec<(f64, Vec<(f64, f64)>)> = tasks
        .par_iter()
        .map(|t| {
            let exp = world.evaluate_context(t, &empty)?.expected_messages;
            let sampled = seeds
                .iter()
                .map(|&s| rollout(world, t, &empty, s).map(|r| (r.reward as f64, r.messages as f64)))
                .collect::<Result<Vec<_>>>()?;
            Ok((exp, sampled))
        })
        .collect::<Result<_>>()?;
    world
        .library
        .skills
        .par_iter()
        .map(|skill| {
            let ctx = RenderedContext::passthrough(&[skill]);
            let (mut op, mut om, mut sp, mut sm) = (0.0, 0.0, 0.0, 0.0);
            for (t, (base_msgs, base)) in tasks.iter().zip(&baseline) {
                op += oracle_delta(world, t, skill)?;
                om += world.evaluate_context(t, &ctx)?.expected_messages - base_msgs;
                for (&s, (bp, bm)) in seeds.iter().zip(base) {
                    let r = rollout(world, t, &ctx, s)?;
                    sp += r.reward as f64 - bp;
                    sm += r.messages as f64 - bm;
                }
            }
            let nt = tasks.len() as f64;
            let ns = nt * seeds.len() as f64;
            Ok(SkillDeltaRow {
                skill_id: skill.id.clone(),
                oracle_dpass: op / nt,
                oracle_dmessages: om / nt,
                sampled_dpass: sp / ns,
                sampled_dmessages: sm / ns,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGroupRow {
    pub task_id: String,
    pub spearman_rho: f64,
    pub group: String,
    /// Mean pass per budget, `;`-separated in budget order.
    pub pass_by_budget: String,
}

pub fn group_for(rho: f64) -> &'static str {
    if rho > GROUP_CUTOFF {
        "improving"
    } else if rho < -GROUP_CUTOFF {
        "degrading"
    } else {
        "neutral"
    }
}

/// Mean pass of each task when injecting its top-N dense-retrieved skills,
/// for every N in `budgets`, and the Spearman correlation of pass with N.
pub fn per_task_grouping(
    world: &World,
    tasks: &[Task],
    budgets: &[usize],
    seeds: &[u64],
    embedder: &EmbedderConfig,
) -> Result<Vec<TaskGroupRow>> {
    ascending("budgets", budgets)?;
    if seeds.is_empty() {
        return Err(Error::invalid("per-task grouping needs seeds"));
    }
    let top = budgets[budgets.len() - 1].min(world.library.len());
    let xs: Vec<f64> = budgets.iter().map(|&b| b as f64).collect();
    tasks
        .par_iter()
        .map(|t| {
            let order = dense_rank(&t.instruction, &world.library, top.max(1), embedder)?;
            let trajectory = budgets
                .iter()
                .map(|&b| {
                    let skills = order[..b.min(order.len())]
                        .iter()
                        .map(|id| world.skill(id))
                        .collect::<Result<Vec<&Skill>>>()?;
                    let ctx = RenderedContext::passthrough(&skills);
                    let passes = seeds
                        .iter()
                        .map(|&s| rollout(world, t, &ctx, s).map(|r| r.reward as f64))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(mean(&passes))
                })
                .collect::<Result<Vec<f64>>>()?;
            let rho = spearman(&xs, &trajectory);
            Ok(TaskGroupRow {
                task_id: t.id.clone(),
                spearman_rho: rho,
                group: group_for(rho).to_string(),
                pass_by_budget: trajectory.iter().map(|p| format!("{p}")).collect::<Vec<_>>().join(";"),
            })
        })
        .collect()
}

/// Distillation pairs for the renderer and their per-epoch curriculum.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderData {
    pub pairs: Vec<RenderPair>,
    pub curriculum: Vec<Vec<RenderPair>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumRow {
    pub epoch: usize,
    pub rho: f64,
    pub pairs: usize,
    pub trace_free: usize,
    pub trace_free_fraction: f64,
}

impl RenderData {
    pub fn curriculum_rows(&self, rho: &[f64]) -> Vec<CurriculumRow> {
        self.curriculum
            .iter()
            .zip(rho)
            .enumerate()
            .map(|(epoch, (pairs, &rho))| {
                let free = pairs.iter().filter(|p| !p.trace_rich).count();
                CurriculumRow {
                    epoch,
                    rho,
                    pairs: pairs.len(),
                    trace_free: free,
                    trace_free_fraction: if pairs.is_empty() { 0.0 } else { free as f64 / pairs.len() as f64 },
                }
            })
            .collect()
    }
}

/// Teacher targets for every skill of each multi-skill adaptive selection,
/// with a trace from one rollout of the unrendered context.
pub fn build_render_data(
    world: &World,
    model: &PlannerModel,
    admission: &AdmissionConfig,
    tasks: &[Task],
    seed: u64,
    curriculum: &CurriculumConfig,
) -> Result<RenderData> {
    let teacher = ReferenceTeacher::default();
    let scores = score_tasks(model, tasks, &world.library);
    let mut pairs = Vec::new();
    for (task, sc) in tasks.iter().zip(&scores) {
        let ids = select_adaptive(sc, admission)?;
        if ids.len() < 2 {
            continue;
        }
        let skills = ids.iter().map(|id| world.skill(id)).collect::<Result<Vec<&Skill>>>()?;
        let trace = rollout(world, task, &RenderedContext::passthrough(&skills), seed)?;
        for (i, skill) in skills.iter().enumerate() {
            let neighbors: Vec<&Skill> = skills.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| *s).collect();
            let (_, d2) = teacher_pipeline(task, skill, &neighbors, Some(&trace), &teacher)?;
            let input = RenderInput {
                task: task.instruction.clone(),
                skill_id: skill.id.clone(),
                skill_name: skill.name.clone(),
                d0: skill.description.clone(),
                neighbors: neighbors.iter().map(|n| Neighbor::from(*n)).collect(),
                trace: Some(trace.trace_summary()),
            };
            pairs.push(RenderPair::new(input, d2));
        }
    }
    let curriculum = build_curriculum(&pairs, curriculum)?;
    Ok(RenderData { pairs, curriculum })
}

/// Hand-authored replay of a single task's pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyFixture {
    pub task: Task,
    pub skills: Vec<Skill>,
    /// Normalized planner scores.
    pub scores: BTreeMap<String, f64>,
    pub tau: f64,
    pub b_max: usize,
    pub expected_admitted: Vec<String>,
    pub distractor: String,
    pub expected_budget: usize,
    /// Skill whose rendered description must name co-injected neighbors.
    pub focus_skill: String,
    pub min_named_neighbors: usize,
}

pub const CASE_STUDY_JSON: &str = include_str!("../fixtures/case_study.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyReport {
    pub task_id: String,
    pub no_skill_pass: f64,
    pub tau: f64,
    pub scores: BTreeMap<String, f64>,
    pub admitted: Vec<String>,
    pub b_t: usize,
    pub rendered: Vec<RenderedEntry>,
    pub checks: Vec<Check>,
}

impl CaseStudyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn load_case_study() -> Result<CaseStudyFixture> {
    serde_json::from_str(CASE_STUDY_JSON).map_err(|e| Error::Parse {
        what: "case study fixture".to_string(),
        message: e.to_string(),
    })
}

/// Replays admission and rendering on the bundled fixture.
pub fn case_study_fixture() -> Result<CaseStudyReport> {
    replay_case_study(&load_case_study()?)
}

pub fn replay_case_study(fx: &CaseStudyFixture) -> Result<CaseStudyReport> {
    let cfg = AdmissionConfig::with_tau(fx.tau, fx.b_max);
    cfg.validate()?;
    let admitted = admit(&fx.scores, &cfg);
    let mut checks = Vec::new();
    let mut check = |name: &str, passed: bool, detail: String| {
        checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        })
    };
    let mut got = admitted.clone();
    got.sort();
    let mut want = fx.expected_admitted.clone();
    want.sort();
    check("admitted set", got == want, format!("admitted {admitted:?}"));
    let distractor = fx.scores.get(&fx.distractor).copied();
    check(
        "distractor rejected",
        distractor.is_some() && !admitted.contains(&fx.distractor),
        format!("{} scored {distractor:?}", fx.distractor),
    );
    check(
        "budget",
        admitted.len() == fx.expected_budget,
        format!("B_t = {}", admitted.len()),
    );
    let by_id: BTreeMap<&str, &Skill> = fx.skills.iter().map(|s| (s.id.as_str(), s)).collect();
    let selected = admitted
        .iter()
        .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| Error::UnknownSkill(id.clone())))
        .collect::<Result<Vec<&Skill>>>()?;
    let ctx = render(&fx.task, &selected, &RuleStudent::default());
    let named = ctx
        .entries
        .iter()
        .find(|e| e.skill_id == fx.focus_skill)
        .map(|e| e.scope_targets.len())
        .unwrap_or(0);
    check(
        "scope clause",
        named >= fx.min_named_neighbors,
        format!("{} names {named} co-injected neighbors", fx.focus_skill),
    );
    check(
        "bodies unchanged",
        ctx.entries.iter().zip(&selected).all(|(e, s)| e.body == s.body),
        "rendering only rewrites descriptions".to_string(),
    );
    Ok(CaseStudyReport {
        task_id: fx.task.id.clone(),
        no_skill_pass: fx.task.base_pass,
        tau: fx.tau,
        scores: fx.scores.clone(),
        b_t: admitted.len(),
        admitted,
        rendered: ctx.entries,
        checks,
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tasks(ids: &[&str]) -> Vec<Task> {
        ids.iter()
            .map(|id| Task {
                id: id.to_string(),
                instruction: id.to_string(),
                domain: "d".into(),
                base_pass: 0.5,
                base_messages: 4.0,
            })
            .collect()
    }

    #[test]
    fn split_is_stratified_and_complete() {
        let ids: Vec<String> = (0..5).flat_map(|i| ["a", "b"].map(|f| format!("{f}:t{i:03}"))).collect();
        let ts = tasks(&ids.iter().map(String::as_str).collect::<Vec<_>>());
        let s = split_tasks(&ts, SplitFractions::default());
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (6, 2, 2));
        for fam in ["a", "b"] {
            assert_eq!(s.train.iter().filter(|t| task_family(&t.id) == fam).count(), 3);
        }
        let mut all: Vec<String> = s.ids().train.into_iter().chain(s.ids().dev).chain(s.ids().test).collect();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        assert_eq!(all, want);
        let mut rev = ts.clone();
        rev.reverse();
        assert_eq!(split_tasks(&rev, SplitFractions::default()).ids(), s.ids());
    }

    #[test]
    fn groups_follow_cutoffs() {
        assert_eq!(group_for(1.0), "improving");
        assert_eq!(group_for(-0.31), "degrading");
        assert_eq!(group_for(0.3), "neutral");
        assert_eq!(group_for(0.0), "neutral");
    }

    #[test]
    fn methods_expand_over_k() {
        let specs = expand_methods(&default_methods(), &[1, 2, 4, 8]);
        assert_eq!(specs.len(), 4 * 4 + 5);
        assert!(specs.iter().all(|s| s.validate().is_ok()));
        let labels: Vec<String> = specs.iter().map(SelectorSpec::label).collect();
        let mut dedup = labels.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), labels.len());
    }

    #[test]
    fn summary_is_fold_over_rows() {
        let spec = SelectorSpec::new(SelectorKind::None);
        let row = |seed, pass| ResultRow {
            method: "none".into(),
            task_id: "t".into(),
            seed,
            pass,
            messages: 4,
            b_t: 0,
            rendered: false,
        };
        let rows = vec![row(1, 1), row(2, 0), row(1, 1), row(2, 1)];
        let s = &summarize(&[spec], &rows)[0];
        assert_eq!(s.pass_pct, 75.0);
        assert!((s.std_pct - 100.0 * (0.125f64).sqrt()).abs() < 1e-12);
        assert_eq!(s.n_rows, 4);
    }

    #[test]
    fn best_prefers_smaller_k_on_ties() {
        let row = |k, pass| SummaryRow {
            method: format!("bm25@{k}"),
            kind: "bm25".into(),
            k: Some(k),
            rendered: false,
            pass_pct: pass,
            std_pct: 0.0,
            mean_messages: 0.0,
            mean_b_t: 0.0,
            n_rows: 1,
        };
        let best = best_per_method(&[row(1, 40.0), row(2, 50.0), row(4, 50.0)]);
        assert_eq!(best.len(), 1);
        assert_eq!(best[0].k, Some(2));
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        assert!(ExperimentConfig::acceptance().validate().is_ok());
        let mut c = ExperimentConfig::default();
        c.split.test = 0.5;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.pool_sizes = vec![8, 4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn case_study_replays() {
        let report = case_study_fixture().unwrap();
        assert!(report.passed(), "{:#?}", report.checks);
        assert_eq!(report.b_t, 4);
    }
}
