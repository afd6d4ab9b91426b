use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use skillctx::baselines::{SelectorKind, SelectorSpec};
use skillctx::budget::{budget_histogram, write_histogram_csv, write_sweep_csv, AdmissionConfig, Calibration};
use skillctx::domain::{read_json, read_jsonl, write_json, write_jsonl, Skill, UtilityLabel};
use skillctx::harness::{self, Artifacts, ExperimentConfig, SplitIds, TaskSplit};
use skillctx::librarian::{build_library, whitespace_tokens};
use skillctx::planner::{train, PlannerModel};
use skillctx::simworld::{generate_world, World};
use skillctx::Error;

#[derive(Parser)]
#[command(name = "skillctx", version, about = "Adaptive skill-context experiments on a seeded simulated agent world")]
struct Cli {
    /// Experiment config (JSON); omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the world seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding every stage's artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the simulated world (tasks, raw skills, planted effects).
    GenerateWorld,
    /// Dedup, cluster and budget-gate the raw skills into the library.
    BuildLibrary,
    /// Split tasks and label the training tasks with paired rollouts.
    Label {
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Train the context planner on the labels.
    TrainPlanner,
    /// Sweep the admission threshold on the dev tasks.
    Calibrate,
    /// Export renderer distillation pairs and the curriculum mix.
    BuildRenderData,
    /// Evaluate methods on the test tasks.
    Evaluate {
        /// Evaluate a single method instead of the configured list.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        /// Disable rendering for the chosen method.
        #[arg(long)]
        no_render: bool,
    },
    /// Full injection and the adaptive planner over growing skill pools.
    Scaling {
        #[arg(long, value_delimiter = ',')]
        pool_sizes: Option<Vec<usize>>,
    },
    /// Singleton-injection deltas per skill.
    PerSkill {
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Per-task pass trajectories over injected budgets.
    PerTask,
    /// Histogram of per-task admitted budgets on the test tasks.
    BudgetHist,
    /// Replay the bundled case study and check each step.
    Fixture,
    /// Run every stage in order.
    All,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match &cli.config {
        Some(path) => read_json(path).with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.world.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn need(dir: &Path, file: &str, stage: &str) -> skillctx::Result<PathBuf> {
    let path = dir.join(file);
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            stage: stage.to_string(),
            path,
        })
    }
}

fn load_raw_world(out: &Path) -> skillctx::Result<World> {
    World::load(&out.join("world"))
}

/// Generated world restricted to the built library.
fn load_world(out: &Path) -> skillctx::Result<World> {
    let raw = load_raw_world(out)?;
    let skills: Vec<Skill> = read_json(&need(out, "library.json", "build-library")?)?;
    let skills = skills
        .into_iter()
        .map(|mut s| {
            s.effect = raw.skill(&s.id)?.effect.clone();
            Ok(s)
        })
        .collect::<skillctx::Result<Vec<_>>>()?;
    raw.with_library(skillctx::librarian::SkillLibrary::new(skills)?)
}

fn load_split(out: &Path, world: &World) -> skillctx::Result<TaskSplit> {
    let ids: SplitIds = read_json(&need(out, "split.json", "label")?)?;
    TaskSplit::from_ids(world, &ids)
}

fn load_model(out: &Path) -> skillctx::Result<PlannerModel> {
    PlannerModel::load(&out.join("planner.json"))
}

fn load_admission(out: &Path) -> skillctx::Result<AdmissionConfig> {
    read_json(&need(out, "admission.json", "calibrate")?)
}

fn load_artifacts(out: &Path) -> skillctx::Result<Artifacts> {
    let world = load_world(out)?;
    let split = load_split(out, &world)?;
    let labels: Vec<UtilityLabel> = read_jsonl(&need(out, "labels.jsonl", "label")?)?;
    let model = load_model(out)?;
    let best = load_admission(out)?;
    Ok(Artifacts {
        world,
        split,
        labels,
        model,
        calibration: Calibration { best, sweep: Vec::new() },
    })
}

fn stage(cmd: &Command, cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<bool> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cmd {
        Command::GenerateWorld => {
            let world = generate_world(&cfg.world)?;
            world.save(&out.join("world"))?;
            write_json(&out.join("config.json"), cfg)?;
            eprintln!("world: {} tasks, {} raw skills", world.tasks.len(), world.library.len());
        }
        Command::BuildLibrary => {
            let raw = load_raw_world(out)?;
            let lib = build_library(raw.library.skills.clone(), &cfg.library, &cfg.embedder, &whitespace_tokens)?;
            let skills: Vec<Skill> = lib
                .skills
                .into_iter()
                .map(|mut s| {
                    s.effect = None;
                    s
                })
                .collect();
            write_json(&out.join("library.json"), &skills)?;
            eprintln!("library: {} of {} skills kept", skills.len(), raw.library.len());
        }
        Command::Label { rollouts } => {
            let world = load_world(out)?;
            let split = harness::split_tasks(&world.tasks, cfg.split);
            let mut cfg = cfg.clone();
            if let Some(r) = rollouts {
                cfg.rollouts_per_task = *r;
            }
            let labels = harness::label_split(&world, &split, &cfg)?;
            write_json(&out.join("split.json"), &split.ids())?;
            write_jsonl(&out.join("labels.jsonl"), &labels)?;
            eprintln!("labels: {} rows over {} training tasks", labels.len(), split.train.len());
        }
        Command::TrainPlanner => {
            let world = load_world(out)?;
            let split = load_split(out, &world)?;
            let labels: Vec<UtilityLabel> = read_jsonl(&need(out, "labels.jsonl", "label")?)?;
            let outcome = train(&labels, &world.library, &split.train, &cfg.train, &cfg.embedder)?;
            outcome.model.save(&out.join("planner.json"))?;
            let rows: Vec<(usize, f64)> = outcome.losses.iter().copied().enumerate().collect();
            harness::write_csv(&out.join("train_losses.csv"), &rows)?;
            let (rho, _) = harness::heldout_spearman(&world, &outcome.model, &split.heldout())?;
            write_json(&out.join("planner_eval.json"), &serde_json::json!({ "heldout_spearman": rho }))?;
            eprintln!("planner: {} steps, held-out Spearman {rho:.3}", outcome.losses.len());
        }
        Command::Calibrate => {
            let world = load_world(out)?;
            let split = load_split(out, &world)?;
            let model = load_model(out)?;
            let cal = harness::calibrate(&world, &model, &split, cfg)?;
            write_sweep_csv(&out.join("tau_sweep.csv"), &cal.sweep)?;
            write_json(&out.join("admission.json"), &cal.best)?;
            eprintln!("calibrated tau = {}", cal.best.tau_label());
        }
        Command::BuildRenderData => {
            let world = load_world(out)?;
            let split = load_split(out, &world)?;
            let model = load_model(out)?;
            let admission = load_admission(out)?;
            let data = harness::build_render_data(&world, &model, &admission, &split.train, cfg.label_seed, &cfg.curriculum)?;
            write_jsonl(&out.join("render_pairs.jsonl"), &data.pairs)?;
            harness::write_csv(&out.join("curriculum.csv"), &data.curriculum_rows(&cfg.curriculum.rho))?;
            eprintln!("render data: {} pairs", data.pairs.len());
        }
        Command::Evaluate { method, k, no_render } => {
            let art = load_artifacts(out)?;
            let mut cfg = cfg.clone();
            if let Some(m) = method {
                let kind: SelectorKind = m.parse()?;
                cfg.methods = vec![SelectorSpec {
                    kind,
                    k: *k,
                    seed: (kind == SelectorKind::Random).then_some(0),
                    render: no_render.then_some(false),
                }];
            }
            let eval = harness::run_evaluation(&cfg, &art)?;
            write_jsonl(&out.join("results.jsonl"), &eval.rows)?;
            harness::write_csv(&out.join("results.csv"), &eval.rows)?;
            harness::write_csv(&out.join("summary.csv"), &eval.summary)?;
            write_json(&out.join("summary.json"), &eval)?;
            for s in &eval.best {
                eprintln!("{:<28} pass {:6.2}% ± {:5.2}  M {:7.2}  B_t {:5.2}", s.method, s.pass_pct, s.std_pct, s.mean_messages, s.mean_b_t);
            }
        }
        Command::Scaling { pool_sizes } => {
            let art = load_artifacts(out)?;
            let sizes = pool_sizes.clone().unwrap_or_else(|| cfg.pool_sizes.clone());
            let rows = harness::run_scaling(cfg, &art, &sizes)?;
            harness::write_csv(&out.join("scaling.csv"), &rows)?;
            eprintln!("scaling: {} rows", rows.len());
        }
        Command::PerSkill { rollouts } => {
            let world = load_world(out)?;
            let rows = harness::per_skill_deltas(&world, &world.tasks, rollouts.unwrap_or(cfg.mc_rollouts), cfg.label_seed)?;
            harness::write_csv(&out.join("per_skill.csv"), &rows)?;
            eprintln!("per-skill: {} skills", rows.len());
        }
        Command::PerTask => {
            let world = load_world(out)?;
            let rows = harness::per_task_grouping(&world, &world.tasks, &cfg.budgets, &cfg.seeds, &cfg.embedder)?;
            harness::write_csv(&out.join("per_task.csv"), &rows)?;
            let count = |g: &str| rows.iter().filter(|r| r.group == g).count();
            eprintln!(
                "per-task: improving {}, degrading {}, neutral {}",
                count("improving"),
                count("degrading"),
                count("neutral")
            );
        }
        Command::BudgetHist => {
            let world = load_world(out)?;
            let split = load_split(out, &world)?;
            let model = load_model(out)?;
            let admission = load_admission(out)?;
            let hist = budget_histogram(&world, &model, &split.test, &admission)?;
            write_histogram_csv(&out.join("budget_hist.csv"), &hist)?;
        }
        Command::Fixture => {
            let report = harness::case_study_fixture()?;
            write_json(&out.join("case_study.json"), &report)?;
            for c in &report.checks {
                eprintln!("[{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(report.passed());
        }
        Command::All => {
            let mut ok = true;
            for c in [
                Command::GenerateWorld,
                Command::BuildLibrary,
                Command::Label { rollouts: None },
                Command::TrainPlanner,
                Command::Calibrate,
                Command::BuildRenderData,
                Command::Evaluate {
                    method: None,
                    k: None,
                    no_render: false,
                },
                Command::Scaling { pool_sizes: None },
                Command::PerSkill { rollouts: None },
                Command::PerTask,
                Command::BudgetHist,
                Command::Fixture,
            ] {
                ok &= stage(&c, cfg, out)?;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = load_config(&cli).and_then(|cfg| stage(&cli.command, &cfg, &cli.out_dir));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
