//! Run orchestration behind the command-line interface: dataset generation,
//! the training run with crash-safe snapshots and resume, checkpoint
//! evaluation, the Monte-Carlo studies, and file pretty-printing.
//!
//! A run directory is self-describing:
//!
//! ```text
//! out_dir/
//!   config.toml          exact configuration of this run
//!   metrics.jsonl        one metric row per line, append-only
//!   snapshots/
//!     snap_000042/       written atomically via rename
//!       state.json       curriculum state, history included
//!       ledger.json      error ledger
//!       model.ckpt       transformer weights (sim.json for the sim learner)
//!       stores/len{L}_{kind}.jsonl
//! ```
//!
//! Resume loads the highest-numbered snapshot, rewrites `metrics.jsonl`
//! from the recorded history so rows written after that snapshot are
//! dropped, and continues; an uninterrupted run and an interrupted one end
//! with identical files.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::RunConfig;
use crate::consistency::ErrorLedger;
use crate::curriculum::{
    Curriculum, CurriculumState, LengthStore, MetricRow, Phase, RunHooks,
};
use crate::decoding::least_to_most;
use crate::error::RunError;
use crate::learner::{load_checkpoint, save_checkpoint, Transformer};
use crate::model::CompletionModel;
use crate::oracle::{
    decompose_step, enumerate_problems, oracle_add, sample_problem, MeteredOracle, Problem,
};
use crate::simlab::{
    prompt_hash, run_avalanche_study, run_generation_decay_study, AvalancheRow, DecayRow,
    SimModel, SimProfile,
};
use crate::taskfmt::{TaskExample, TaskKind, TemplateSet};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STATE_FILE: &str = "state.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const SNAPSHOT_DIR: &str = "snapshots";
const KEEP_SNAPSHOTS: usize = 3;

/// A learner the run loop can persist into and restore from a snapshot.
pub trait PersistentLearner: CompletionModel + Sized {
    const MODEL_FILE: &'static str;

    fn fresh(config: &RunConfig) -> Result<Self, RunError>;
    fn save(&self, snapshot: &Path) -> Result<(), RunError>;
    fn restore(config: &RunConfig, snapshot: &Path) -> Result<Self, RunError>;
}

impl PersistentLearner for Transformer<f32> {
    const MODEL_FILE: &'static str = "model.ckpt";

    fn fresh(config: &RunConfig) -> Result<Self, RunError> {
        Ok(Transformer::new(config.transformer_config())?)
    }

    fn save(&self, snapshot: &Path) -> Result<(), RunError> {
        save_checkpoint(self, &snapshot.join(Self::MODEL_FILE), STATE_FILE)?;
        Ok(())
    }

    fn restore(config: &RunConfig, snapshot: &Path) -> Result<Self, RunError> {
        let (model, _) = load_checkpoint(&snapshot.join(Self::MODEL_FILE))?;
        let expected = config.transformer_config();
        if *model.config() != expected {
            return Err(RunError::Config(format!(
                "checkpoint in {} was trained with a different model config",
                snapshot.display()
            )));
        }
        Ok(model)
    }
}

impl PersistentLearner for SimModel {
    const MODEL_FILE: &'static str = "sim.json";

    fn fresh(config: &RunConfig) -> Result<Self, RunError> {
        Ok(SimModel::new(config.sim_profile(), config.template_set()))
    }

    fn save(&self, snapshot: &Path) -> Result<(), RunError> {
        write_json(&snapshot.join(Self::MODEL_FILE), self.profile())
    }

    fn restore(config: &RunConfig, snapshot: &Path) -> Result<Self, RunError> {
        let saved: SimProfile = read_json(&snapshot.join(Self::MODEL_FILE))?;
        if saved != config.sim_profile() {
            return Err(RunError::Config(format!(
                "snapshot in {} used a different simulated profile",
                snapshot.display()
            )));
        }
        Ok(SimModel::new(saved, config.template_set()))
    }
}

/// What `cmd_run` hands back for reporting.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub phase: Phase,
    pub stop_reason: Option<String>,
    pub active_length: usize,
    pub supervised_max: usize,
    pub global_step: u64,
    pub iterations_completed: u32,
    pub snapshots_written: u64,
    pub resumed: bool,
    /// Training-data oracle reads observed after self-training began;
    /// `None` when the run never reached self-training. Anything nonzero
    /// fails the run before this summary is produced.
    pub selftrain_data_reads: Option<u64>,
    /// Latest held-out accuracy per length: (length, fast, slow-step).
    pub final_accuracies: Vec<(usize, f64, Option<f64>)>,
    pub ledger_report: String,
}

struct DirHooks<'a> {
    dir: &'a Path,
    checkpoint_every: u64,
    metrics: BufWriter<File>,
    next_snapshot: u64,
    snapshots_written: u64,
    last_snapshot_step: u64,
    data_meter: &'a MeteredOracle,
    /// Data-oracle read count the first time a hook saw the self-training
    /// phase; training data must come from the model from then on.
    selftrain_baseline: Option<u64>,
}

impl<'a> DirHooks<'a> {
    fn new(
        dir: &'a Path,
        checkpoint_every: u64,
        next_snapshot: u64,
        start_step: u64,
        data_meter: &'a MeteredOracle,
    ) -> Result<DirHooks<'a>, RunError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(METRICS_FILE))?;
        Ok(DirHooks {
            dir,
            checkpoint_every,
            metrics: BufWriter::new(file),
            next_snapshot,
            snapshots_written: 0,
            last_snapshot_step: start_step,
            data_meter,
            selftrain_baseline: None,
        })
    }

    fn observe_phase(&mut self, state: &CurriculumState) {
        if self.selftrain_baseline.is_none() && state.phase == Phase::SelfTraining {
            self.selftrain_baseline = Some(self.data_meter.reads());
        }
    }

    fn audit_selftrain_reads(&self) -> Option<u64> {
        self.selftrain_baseline
            .map(|baseline| self.data_meter.reads() - baseline)
    }

    fn snapshot<M: PersistentLearner>(
        &mut self,
        model: &M,
        state: &CurriculumState,
        ledger: &ErrorLedger,
    ) -> Result<(), RunError> {
        self.metrics.flush()?;
        write_snapshot(self.dir, self.next_snapshot, model, state, ledger)?;
        self.next_snapshot += 1;
        self.snapshots_written += 1;
        self.last_snapshot_step = state.global_step;
        Ok(())
    }
}

impl<M: PersistentLearner> RunHooks<M> for DirHooks<'_> {
    fn after_step(
        &mut self,
        _model: &M,
        state: &CurriculumState,
        _ledger: &ErrorLedger,
        _loss: f32,
    ) -> Result<(), RunError> {
        self.observe_phase(state);
        Ok(())
    }

    // Snapshots happen only here and at advancements, never mid training
    // window: a snapshot taken between a step and its window's train_loss
    // row would resume without that row and the metrics files of an
    // interrupted and an uninterrupted run would differ.
    fn after_rows(
        &mut self,
        model: &M,
        state: &CurriculumState,
        ledger: &ErrorLedger,
        rows: &[MetricRow],
    ) -> Result<(), RunError> {
        self.observe_phase(state);
        for row in rows {
            serde_json::to_writer(&mut self.metrics, row)
                .map_err(|e| RunError::Other(format!("metrics row: {e}")))?;
            self.metrics.write_all(b"\n")?;
        }
        self.metrics.flush()?;
        let window_done = rows.iter().any(|r| r.metric == "train_loss")
            && state.global_step >= self.last_snapshot_step + self.checkpoint_every;
        let generation_done = rows
            .iter()
            .any(|r| r.metric.starts_with("candidates_accepted"));
        if window_done || generation_done {
            self.snapshot(model, state, ledger)?;
        }
        Ok(())
    }

    fn after_advancement(
        &mut self,
        model: &M,
        state: &CurriculumState,
        ledger: &ErrorLedger,
    ) -> Result<(), RunError> {
        self.observe_phase(state);
        self.snapshot(model, state, ledger)
    }
}

/// Executes (or resumes) the configured training run to termination.
pub fn cmd_run(config: &RunConfig, resume: bool) -> Result<RunSummary, RunError> {
    config.validate()?;
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir)?;
    let has_snapshots = latest_snapshot(&dir)?.is_some();
    if has_snapshots && !resume {
        return Err(RunError::Config(format!(
            "{} already holds a run; pass --resume to continue it or choose a fresh out_dir",
            dir.display()
        )));
    }
    config.save(&dir.join(CONFIG_FILE))?;
    match config.learner.as_str() {
        "transformer" => run_with_learner::<Transformer<f32>>(config, &dir),
        "simulated" => run_with_learner::<SimModel>(config, &dir),
        other => Err(RunError::Config(format!("unknown learner {other:?}"))),
    }
}

fn run_with_learner<M: PersistentLearner>(
    config: &RunConfig,
    dir: &Path,
) -> Result<RunSummary, RunError> {
    let curriculum_config = config.curriculum_config();
    let template = config.template_set();
    let data_oracle = MeteredOracle::new();
    let eval_oracle = MeteredOracle::new();
    let ledger_oracle = MeteredOracle::new();
    let curriculum = Curriculum {
        config: &curriculum_config,
        template: &template,
        data_oracle: &data_oracle,
        eval_oracle: &eval_oracle,
        ledger_oracle: &ledger_oracle,
    };

    let resumed_from = latest_snapshot(dir)?;
    let (mut state, mut model, mut ledger, next_snapshot) = match &resumed_from {
        Some((index, snapshot)) => {
            let mut state: CurriculumState = read_json(&snapshot.join(STATE_FILE))?;
            state.stores = load_stores(&snapshot.join("stores"))?;
            let ledger: ErrorLedger = read_json(&snapshot.join(LEDGER_FILE))?;
            let model = M::restore(config, snapshot)?;
            rewrite_metrics(dir, &state.history)?;
            (state, model, ledger, index + 1)
        }
        None => {
            rewrite_metrics(dir, &[])?;
            (
                curriculum.new_state(),
                M::fresh(config)?,
                ErrorLedger::new(),
                0,
            )
        }
    };

    let mut hooks = DirHooks::new(
        dir,
        config.checkpoint_every,
        next_snapshot,
        state.global_step,
        &data_oracle,
    )?;
    if state.phase == Phase::SelfTraining {
        // A resumed self-training run must stay pure from its first step.
        hooks.observe_phase(&state);
    }
    curriculum.run_to_completion(&mut state, &mut model, &mut ledger, &mut hooks)?;
    hooks.snapshot(&model, &state, &ledger)?;

    let selftrain_data_reads = hooks.audit_selftrain_reads();
    if let Some(reads) = selftrain_data_reads {
        if reads > 0 {
            return Err(RunError::Other(format!(
                "purity violation: {reads} training-data oracle reads during self-training"
            )));
        }
    }
    state.audit_store_purity().map_err(RunError::Other)?;

    Ok(RunSummary {
        phase: state.phase,
        stop_reason: state.stop_reason.clone(),
        active_length: state.active_length,
        supervised_max: state.supervised_max,
        global_step: state.global_step,
        iterations_completed: state.iterations_completed,
        snapshots_written: hooks.snapshots_written,
        resumed: resumed_from.is_some(),
        selftrain_data_reads,
        final_accuracies: final_accuracies(&state),
        ledger_report: format_ledger(&ledger),
    })
}

fn final_accuracies(state: &CurriculumState) -> Vec<(usize, f64, Option<f64>)> {
    let mut fast: BTreeMap<usize, f64> = BTreeMap::new();
    let mut slow: BTreeMap<usize, f64> = BTreeMap::new();
    for row in &state.history {
        match row.metric.as_str() {
            "fast_exact" => {
                fast.insert(row.length, row.value);
            }
            "slow_step_exact" => {
                slow.insert(row.length, row.value);
            }
            _ => {}
        }
    }
    fast.into_iter()
        .map(|(length, f)| (length, f, slow.get(&length).copied()))
        .collect()
}

/// Writes oracle-rendered datasets, one fast and one slow file per length.
/// The slow file for length 1 is always empty: there is no decomposition
/// step to teach.
pub fn cmd_gen(config: &RunConfig) -> Result<Vec<PathBuf>, RunError> {
    config.validate()?;
    let dir = &config.out_dir;
    fs::create_dir_all(dir)?;
    let template = config.template_set();
    let mut written = Vec::new();
    for length in config.gen_min_length..=config.gen_max_length {
        let mut rng =
            ChaCha8Rng::seed_from_u64(prompt_hash(config.data_seed, &format!("gen-{length}")));
        let mut fast = Vec::with_capacity(config.gen_per_length);
        let mut slow = Vec::with_capacity(config.gen_per_length);
        for _ in 0..config.gen_per_length {
            let p = sample_problem(length, &mut rng);
            fast.push(template.render_fast(&p, &oracle_add(&p)));
            if length >= 2 {
                let step = decompose_step(&p)?;
                slow.push(template.render_slow(&p, &step)?);
            }
        }
        for ex in fast.iter().chain(slow.iter()) {
            if !template.verify_oracle_example(ex) {
                return Err(RunError::Other(format!(
                    "generated example failed oracle verification: {ex:?}"
                )));
            }
        }
        for (kind, examples) in [("fast", fast), ("slow", slow)] {
            let path = dir.join(format!("len{length}_{kind}.jsonl"));
            write_jsonl(&path, &examples)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// One evaluated length: exact-match accuracies and the chained
/// decomposition's final-answer accuracy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub length: usize,
    pub problems: usize,
    pub fast_exact: f64,
    pub slow_step_exact: Option<f64>,
    pub chained_answer: f64,
}

/// Grades a model per length at temperature 0: fast answers and slow steps
/// by exact token match on the rendered target, plus full decomposition
/// chains scored on the final answer. Lengths small enough to enumerate are
/// graded exhaustively, larger ones on distinct sampled problems.
pub fn cmd_eval<M: CompletionModel + ?Sized>(
    model: &M,
    template: &TemplateSet,
    lengths: &[usize],
    problems_per_length: usize,
    seed: u64,
) -> Result<Vec<EvalRow>, RunError> {
    let mut rows = Vec::with_capacity(lengths.len());
    for &length in lengths {
        let problems = eval_problems(length, problems_per_length, seed)?;
        let n = problems.len();
        let mut fast_hits = 0usize;
        let mut slow_hits = 0usize;
        let mut chain_hits = 0usize;
        for p in &problems {
            let truth = oracle_add(p);
            let fast = template.render_fast(p, &truth);
            let out = model.complete(&fast.prompt, template.fast_answer_budget(length), 0.0)?;
            fast_hits += usize::from(out == fast.target);
            if length >= 2 {
                let step = decompose_step(p)?;
                let slow = template.render_slow(p, &step)?;
                let out =
                    model.complete(&slow.prompt, template.slow_step_budget(length), 0.0)?;
                slow_hits += usize::from(out == slow.target);
            }
            let (answer, _) = least_to_most(model, p, template);
            chain_hits += usize::from(answer.as_ref() == Some(&truth));
        }
        rows.push(EvalRow {
            length,
            problems: n,
            fast_exact: fast_hits as f64 / n as f64,
            slow_step_exact: (length >= 2).then(|| slow_hits as f64 / n as f64),
            chained_answer: chain_hits as f64 / n as f64,
        });
    }
    Ok(rows)
}

fn eval_problems(length: usize, budget: usize, seed: u64) -> Result<Vec<Problem>, RunError> {
    match enumerate_problems(length, budget as u64) {
        Ok(enumeration) => Ok(enumeration.collect()),
        Err(crate::error::ArithError::SampleInstead { .. }) => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(prompt_hash(seed, &format!("eval-{length}")));
            let mut seen = HashSet::new();
            let mut out = Vec::with_capacity(budget);
            while out.len() < budget {
                let p = sample_problem(length, &mut rng);
                if seen.insert(p.clone()) {
                    out.push(p);
                }
            }
            Ok(out)
        }
        Err(e) => Err(e.into()),
    }
}

/// Runs the avalanche comparison and the cross-generation decay study and
/// writes both row sets into the output directory.
pub fn cmd_simulate(config: &RunConfig) -> Result<(Vec<AvalancheRow>, Vec<DecayRow>), RunError> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)?;
    let template = config.template_set();
    let avalanche = run_avalanche_study(
        &config.frontier_profile(),
        &config.study_lengths(),
        config.study_trials,
        config.k,
        &template,
    );
    write_jsonl(&config.out_dir.join("avalanche.jsonl"), &avalanche)?;
    let decay = run_generation_decay_study(&config.decay_profile(), config.decay_generations, &template);
    write_jsonl(&config.out_dir.join("decay.jsonl"), &decay)?;
    Ok((avalanche, decay))
}

/// Renders any artifact file the toolchain writes as a human-readable
/// summary, sniffing the format from content.
pub fn cmd_inspect(path: &Path) -> Result<String, RunError> {
    let text = fs::read_to_string(path)
        .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "toml") {
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        return Ok(format!(
            "run config ({}):\n{}",
            path.display(),
            toml::to_string_pretty(&config).expect("config serializes")
        ));
    }
    if let Ok(state) = serde_json::from_str::<CurriculumState>(&text) {
        return Ok(format_state(&state));
    }
    if let Ok(ledger) = serde_json::from_str::<ErrorLedger>(&text) {
        return Ok(format_ledger(&ledger));
    }
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Ok(format!("{}: empty file", path.display()));
    }
    if let Some(rows) = parse_lines::<TaskExample>(&lines) {
        return Ok(format_dataset(&rows));
    }
    if let Some(rows) = parse_lines::<MetricRow>(&lines) {
        return Ok(format_metrics(&rows));
    }
    if let Some(rows) = parse_lines::<AvalancheRow>(&lines) {
        return Ok(format_avalanche(&rows));
    }
    if let Some(rows) = parse_lines::<DecayRow>(&lines) {
        return Ok(format_decay(&rows));
    }
    Err(RunError::Config(format!(
        "{}: not a recognized dataset, metrics, ledger, state or study file",
        path.display()
    )))
}

fn parse_lines<T: DeserializeOwned>(lines: &[&str]) -> Option<Vec<T>> {
    lines
        .iter()
        .map(|l| serde_json::from_str::<T>(l).ok())
        .collect()
}

fn format_state(state: &CurriculumState) -> String {
    let mut out = String::new();
    let push = |out: &mut String, line: String| {
        out.push_str(&line);
        out.push('\n');
    };
    push(&mut out, format!("phase:                {:?}", state.phase));
    push(&mut out, format!("active length:        {}", state.active_length));
    push(&mut out, format!("supervised ceiling:   {}", state.supervised_max));
    push(&mut out, format!("global step:          {}", state.global_step));
    push(
        &mut out,
        format!("self-train iterations: {}", state.iterations_completed),
    );
    if let Some(reason) = &state.stop_reason {
        push(&mut out, format!("stop reason:          {reason}"));
    }
    push(&mut out, format!("metric rows recorded: {}", state.history.len()));
    for (length, f, s) in final_accuracies(state) {
        let slow = s.map_or("    -".to_string(), |v| format!("{v:.3}"));
        push(
            &mut out,
            format!("  length {length}: fast {f:.3}  slow-step {slow}"),
        );
    }
    out
}

pub fn format_ledger(ledger: &ErrorLedger) -> String {
    let rows = ledger.report();
    if rows.is_empty() {
        return "ledger: no candidates graded yet\n".to_string();
    }
    let mut out = String::from(
        "length kind  generated accepted wrong rej_correct   poison false_discard\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{:>6} {:<5} {:>9} {:>8} {:>5} {:>11} {:>8.4} {:>13.4}\n",
            r.length,
            match r.kind {
                TaskKind::Fast => "fast",
                TaskKind::Slow => "slow",
            },
            r.generated,
            r.accepted,
            r.accepted_wrong,
            r.rejected_correct,
            r.poison_rate,
            r.false_discard_rate,
        ));
    }
    out
}

fn format_dataset(rows: &[TaskExample]) -> String {
    let mut counts: BTreeMap<(usize, String, String), usize> = BTreeMap::new();
    for ex in rows {
        let kind = match ex.kind {
            TaskKind::Fast => "fast",
            TaskKind::Slow => "slow",
        };
        let source = match serde_json::to_value(&ex.source) {
            Ok(serde_json::Value::String(s)) => s,
            _ => format!("{:?}", ex.source),
        };
        *counts
            .entry((ex.length, kind.to_string(), source))
            .or_default() += 1;
    }
    let verified = rows
        .iter()
        .filter(|ex| {
            TemplateSet::by_name("compact")
                .map(|t| t.verify_oracle_example(ex))
                .unwrap_or(false)
                || TemplateSet::by_name("paper-english")
                    .map(|t| t.verify_oracle_example(ex))
                    .unwrap_or(false)
        })
        .count();
    let mut out = format!(
        "dataset: {} examples, {verified} verify against the oracle\n",
        rows.len()
    );
    for ((length, kind, source), n) in counts {
        out.push_str(&format!(
            "  length {length} {kind} from {source}: {n}\n"
        ));
    }
    for ex in rows.iter().take(3) {
        out.push_str(&format!("  sample: {:?} -> {:?}\n", ex.prompt, ex.target));
    }
    out
}

fn format_metrics(rows: &[MetricRow]) -> String {
    let mut latest: BTreeMap<&str, &MetricRow> = BTreeMap::new();
    for row in rows {
        latest.insert(row.metric.as_str(), row);
    }
    let mut out = format!("metrics: {} rows\n", rows.len());
    out.push_str("latest value per metric:\n");
    for (name, row) in latest {
        out.push_str(&format!(
            "  {name:<26} {:>10.4}  (length {}, step {})\n",
            row.value, row.length, row.step
        ));
    }
    out
}

pub fn format_avalanche(rows: &[AvalancheRow]) -> String {
    let mut out = String::from(
        "pipeline          length    trials    poison [95% CI]           accept discard\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{:<17} {:>6} {:>9} {:>9.5} [{:.5}, {:.5}] {:>6.3} {:>7.4}\n",
            r.pipeline.label(),
            r.length,
            r.trials,
            r.poison_rate,
            r.ci_low,
            r.ci_high,
            r.acceptance_rate,
            r.false_discard_rate,
        ));
    }
    out
}

pub fn format_decay(rows: &[DecayRow]) -> String {
    let mut out = String::from(
        "arm        gen  fast_plateau  slow_step  gen_poison  cumulative\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:>3} {:>12.4} {:>10.4} {:>11.5} {:>11.5}\n",
            format!("{:?}", r.arm).to_lowercase(),
            r.generation,
            r.fast_plateau,
            r.slow_step,
            r.generation_poison,
            r.cumulative_poison,
        ));
    }
    out
}

pub fn format_eval_table(rows: &[EvalRow]) -> String {
    let mut out = String::from("length  problems  fast_exact  slow_step  chained\n");
    for r in rows {
        let slow = r
            .slow_step_exact
            .map_or("        -".to_string(), |v| format!("{v:>9.3}"));
        out.push_str(&format!(
            "{:>6} {:>9} {:>11.3} {slow} {:>8.3}\n",
            r.length, r.problems, r.fast_exact, r.chained_answer
        ));
    }
    out
}

/// Finds the newest complete snapshot in a run directory.
pub fn latest_snapshot(dir: &Path) -> Result<Option<(u64, PathBuf)>, RunError> {
    let snapdir = dir.join(SNAPSHOT_DIR);
    if !snapdir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(&snapdir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(index) = name
            .to_str()
            .and_then(|n| n.strip_prefix("snap_"))
            .and_then(|n| n.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().map_or(true, |(b, _)| index > *b) {
            best = Some((index, entry.path()));
        }
    }
    Ok(best)
}

/// Rebuilds the model stored in a run directory's newest snapshot,
/// whichever learner the run used, together with the run's own config.
pub fn load_run_model(run_dir: &Path) -> Result<(Box<dyn CompletionModel>, RunConfig), RunError> {
    let config = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let (_, snapshot) = latest_snapshot(run_dir)?.ok_or_else(|| {
        RunError::Config(format!(
            "{} holds no snapshots to evaluate",
            run_dir.display()
        ))
    })?;
    let model: Box<dyn CompletionModel> = match config.learner.as_str() {
        "transformer" => Box::new(Transformer::<f32>::restore(&config, &snapshot)?),
        "simulated" => Box::new(SimModel::restore(&config, &snapshot)?),
        other => return Err(RunError::Config(format!("unknown learner {other:?}"))),
    };
    Ok((model, config))
}

fn write_snapshot<M: PersistentLearner>(
    dir: &Path,
    index: u64,
    model: &M,
    state: &CurriculumState,
    ledger: &ErrorLedger,
) -> Result<(), RunError> {
    let snapdir = dir.join(SNAPSHOT_DIR);
    fs::create_dir_all(&snapdir)?;
    let tmp = snapdir.join(".tmp-snap");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(tmp.join("stores"))?;
    write_json(&tmp.join(STATE_FILE), state)?;
    write_json(&tmp.join(LEDGER_FILE), ledger)?;
    save_stores(&tmp.join("stores"), &state.stores)?;
    model.save(&tmp)?;
    fs::rename(&tmp, snapdir.join(format!("snap_{index:06}")))?;
    prune_snapshots(&snapdir)?;
    Ok(())
}

fn prune_snapshots(snapdir: &Path) -> Result<(), RunError> {
    let mut indexed = Vec::new();
    for entry in fs::read_dir(snapdir)? {
        let entry = entry?;
        if let Some(index) = entry
            .file_name()
            .to_str()
            .and_then(|n| n.strip_prefix("snap_"))
            .and_then(|n| n.parse::<u64>().ok())
        {
            indexed.push((index, entry.path()));
        }
    }
    indexed.sort();
    while indexed.len() > KEEP_SNAPSHOTS {
        let (_, path) = indexed.remove(0);
        fs::remove_dir_all(path)?;
    }
    Ok(())
}

fn save_stores(dir: &Path, stores: &BTreeMap<usize, LengthStore>) -> Result<(), RunError> {
    for (length, store) in stores {
        write_jsonl(&dir.join(format!("len{length}_fast.jsonl")), &store.fast)?;
        write_jsonl(&dir.join(format!("len{length}_slow.jsonl")), &store.slow)?;
    }
    Ok(())
}

fn load_stores(dir: &Path) -> Result<BTreeMap<usize, LengthStore>, RunError> {
    let mut stores: BTreeMap<usize, LengthStore> = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(stores);
    }
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(stem) = name.strip_suffix(".jsonl") else {
            continue;
        };
        let Some(rest) = stem.strip_prefix("len") else {
            continue;
        };
        let (length, kind) = match rest.split_once('_') {
            Some((l, k)) => (l, k),
            None => continue,
        };
        let Ok(length) = length.parse::<usize>() else {
            continue;
        };
        let examples: Vec<TaskExample> = read_jsonl(&entry.path())?;
        let store = stores.entry(length).or_default();
        match kind {
            "fast" => store.fast = examples,
            "slow" => store.slow = examples,
            _ => continue,
        }
    }
    Ok(stores)
}

fn rewrite_metrics(dir: &Path, history: &[MetricRow]) -> Result<(), RunError> {
    let tmp = dir.join(".tmp-metrics");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        for row in history {
            serde_json::to_writer(&mut w, row)
                .map_err(|e| RunError::Other(format!("metrics row: {e}")))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, dir.join(METRICS_FILE))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| RunError::Other(format!("{}: {e}", path.display())))?;
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, RunError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| RunError::Other(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)
            .map_err(|e| RunError::Other(format!("{}: {e}", path.display())))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RunError> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| RunError::Other(format!("{}: {e}", path.display())))?,
        );
    }
    Ok(rows)
}
