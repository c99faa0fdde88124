//! Two-phase training controller: supervised stages gated by held-out
//! accuracy, a generalization-triggered switch to self-training, and
//! self-training iterations whose data comes from the model itself through
//! the consistency filters.
//!
//! Three oracle meters keep the phases honest. `data_oracle` renders
//! supervised training data and must go quiet once self-training starts.
//! `eval_oracle` materializes held-out targets; grading afterwards is pure
//! string comparison. `ledger_oracle` feeds ground truth to the
//! [`ErrorLedger`] only, which reports but never steers.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{filter_fast, filter_slow, ErrorLedger, GoldTruth};
use crate::error::RunError;
use crate::model::CompletionModel;
use crate::oracle::{
    enumerate_problems, population_count, sample_problem, MeteredOracle, Problem,
};
use crate::simlab::prompt_hash;
use crate::taskfmt::{Source, TaskExample, TemplateSet};

/// Accuracy gates and budgets for one curriculum stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Held-out fast accuracy required to leave the current length behind.
    pub fast_advance: f64,
    /// Held-out slow-step exact-match required at the same time.
    pub slow_advance: f64,
    /// Untrained next-length slow exact-match that flips on self-training.
    pub selftrain_trigger: f64,
    pub heldout_size: usize,
    /// Optimizer steps between held-out evaluations.
    pub eval_every: usize,
    /// Per-stage step budget before the run gives up.
    pub max_steps_per_length: usize,
}

impl Default for Thresholds {
    fn default() -> Thresholds {
        Thresholds {
            fast_advance: 0.75,
            slow_advance: 1.0,
            selftrain_trigger: 1.0,
            heldout_size: 128,
            eval_every: 200,
            max_steps_per_length: 20_000,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("fast_advance", self.fast_advance),
            ("slow_advance", self.slow_advance),
            ("selftrain_trigger", self.selftrain_trigger),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.heldout_size == 0 {
            return Err("heldout_size must be positive".into());
        }
        if self.eval_every == 0 {
            return Err("eval_every must be positive".into());
        }
        if self.max_steps_per_length == 0 {
            return Err("max_steps_per_length must be positive".into());
        }
        Ok(())
    }
}

/// Everything the controller needs besides the model and the template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub thresholds: Thresholds,
    /// Vote depth for simplify-then-guess candidate generation.
    pub k: usize,
    /// Fraction of each batch drawn from the newest length.
    pub rho: f64,
    /// Problems filtered per kind in one self-training iteration.
    pub candidates_per_kind: usize,
    /// Oracle examples materialized per (length, kind) in supervised stages.
    pub supervised_pool: usize,
    pub batch_size: usize,
    pub start_length: usize,
    /// Passing this length terminates the curriculum as complete.
    pub max_length: usize,
    /// Seed for data streams; independent of the model's weight seed.
    pub data_seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> CurriculumConfig {
        CurriculumConfig {
            thresholds: Thresholds::default(),
            k: 5,
            rho: 0.5,
            candidates_per_kind: 10_000,
            supervised_pool: 10_000,
            batch_size: 256,
            start_length: 3,
            max_length: 6,
            data_seed: 0,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.thresholds.validate()?;
        if self.k == 0 {
            return Err("k must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(format!("rho must be in [0, 1], got {}", self.rho));
        }
        if self.candidates_per_kind == 0 {
            return Err("candidates_per_kind must be positive".into());
        }
        if self.supervised_pool == 0 {
            return Err("supervised_pool must be positive".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if self.start_length == 0 {
            return Err("start_length must be positive".into());
        }
        if self.max_length < self.start_length {
            return Err(format!(
                "max_length {} is below start_length {}",
                self.max_length, self.start_length
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Supervised,
    SelfTraining,
    Terminated,
}

/// One metric observation; the run's history is a list of these and the
/// metrics log on disk is the same rows, one per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub phase: Phase,
    pub length: usize,
    pub metric: String,
    pub value: f64,
    pub step: u64,
}

/// Held-out problems for one length with their prompts and gold targets
/// rendered up front, so grading later is oracle-free string comparison.
/// When the whole population is smaller than four held-out sets, evaluation
/// is exhaustive and training draws are allowed to overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutSet {
    pub length: usize,
    pub exhaustive: bool,
    pub problems: Vec<Problem>,
    pub fast_prompts: Vec<String>,
    pub fast_targets: Vec<String>,
    pub slow_prompts: Vec<String>,
    pub slow_targets: Vec<String>,
}

/// Training examples of one length, split by kind. Lengths at or below
/// `supervised_max` hold oracle renderings; lengths above hold only
/// filter-accepted model output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthStore {
    pub fast: Vec<TaskExample>,
    pub slow: Vec<TaskExample>,
}

/// The full resumable controller state. Stores are kept out of the JSON
/// snapshot; the run directory persists them as one file per (length, kind).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub phase: Phase,
    /// The length currently being gated on.
    pub active_length: usize,
    /// Highest length whose training data came from the oracle.
    pub supervised_max: usize,
    pub global_step: u64,
    pub steps_this_length: u64,
    pub iterations_completed: u32,
    /// Guards against double evaluation at the same step after a resume.
    pub last_eval_step: Option<u64>,
    pub stop_reason: Option<String>,
    pub rng: ChaCha8Rng,
    pub heldouts: BTreeMap<usize, HeldoutSet>,
    pub history: Vec<MetricRow>,
    #[serde(skip)]
    pub stores: BTreeMap<usize, LengthStore>,
}

impl CurriculumState {
    /// Checks that no oracle-sourced example sits above the supervised
    /// ceiling. Self-training must feed itself.
    pub fn audit_store_purity(&self) -> Result<(), String> {
        for (length, store) in &self.stores {
            for ex in store.fast.iter().chain(store.slow.iter()) {
                if ex.length != *length {
                    return Err(format!(
                        "store for length {length} holds an example of length {}",
                        ex.length
                    ));
                }
                if *length > self.supervised_max && ex.source != Source::SelfGenerated {
                    return Err(format!(
                        "oracle-sourced example stored at self-trained length {length}"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Why a stage loop returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    /// Thresholds met; the next length is now active.
    Advanced,
    /// Thresholds met at `max_length`; the curriculum is done.
    Completed,
    /// Step budget ran out (or self-training produced nothing to train on).
    Exhausted,
}

/// Observation points for persistence. The controller calls these with the
/// complete run state; a run directory implementation checkpoints and
/// appends logs, tests use [`NoHooks`].
#[allow(unused_variables)]
pub trait RunHooks<M: CompletionModel + ?Sized> {
    fn after_step(
        &mut self,
        model: &M,
        state: &CurriculumState,
        ledger: &ErrorLedger,
        loss: f32,
    ) -> Result<(), RunError> {
        Ok(())
    }

    /// Called with every batch of freshly recorded metric rows.
    fn after_rows(
        &mut self,
        model: &M,
        state: &CurriculumState,
        ledger: &ErrorLedger,
        rows: &[MetricRow],
    ) -> Result<(), RunError> {
        Ok(())
    }

    fn after_advancement(
        &mut self,
        model: &M,
        state: &CurriculumState,
        ledger: &ErrorLedger,
    ) -> Result<(), RunError> {
        Ok(())
    }
}

pub struct NoHooks;

impl<M: CompletionModel + ?Sized> RunHooks<M> for NoHooks {}

/// Accuracy of one length's held-out set. `slow_exact` is absent at length
/// 1, which has no decomposition step.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthEval {
    pub length: usize,
    pub fast_exact: f64,
    pub slow_exact: Option<f64>,
}

pub struct Curriculum<'a> {
    pub config: &'a CurriculumConfig,
    pub template: &'a TemplateSet,
    pub data_oracle: &'a MeteredOracle,
    pub eval_oracle: &'a MeteredOracle,
    pub ledger_oracle: &'a MeteredOracle,
}

impl Curriculum<'_> {
    pub fn new_state(&self) -> CurriculumState {
        CurriculumState {
            phase: Phase::Supervised,
            active_length: self.config.start_length,
            supervised_max: 0,
            global_step: 0,
            steps_this_length: 0,
            iterations_completed: 0,
            last_eval_step: None,
            stop_reason: None,
            rng: ChaCha8Rng::seed_from_u64(prompt_hash(self.config.data_seed, "curriculum-driver")),
            heldouts: BTreeMap::new(),
            history: Vec::new(),
            stores: BTreeMap::new(),
        }
    }

    /// Runs the whole curriculum: supervised stages, the trigger check after
    /// each advancement, then self-training until completion or exhaustion.
    pub fn run_to_completion<M, H>(
        &self,
        state: &mut CurriculumState,
        model: &mut M,
        ledger: &mut ErrorLedger,
        hooks: &mut H,
    ) -> Result<(), RunError>
    where
        M: CompletionModel,
        H: RunHooks<M>,
    {
        loop {
            match state.phase {
                Phase::Terminated => return Ok(()),
                Phase::Supervised => {
                    self.run_supervised_iteration(state, model, ledger, hooks)?;
                }
                Phase::SelfTraining => {
                    self.run_selftrain_iteration(state, model, ledger, hooks)?;
                }
            }
        }
    }

    /// One supervised stage: materialize oracle stores for lengths up to N,
    /// train with replay mixing, and advance when length N clears both
    /// gates. Right before committing the advancement it measures the next,
    /// never-trained length and switches to self-training when slow steps
    /// already generalize there, so a resume from the advancement snapshot
    /// lands in the correct phase.
    pub fn run_supervised_iteration<M, H>(
        &self,
        state: &mut CurriculumState,
        model: &mut M,
        ledger: &ErrorLedger,
        hooks: &mut H,
    ) -> Result<StageOutcome, RunError>
    where
        M: CompletionModel,
        H: RunHooks<M>,
    {
        if state.phase != Phase::Supervised {
            return Err(RunError::Other(
                "supervised iteration requested outside the supervised phase".into(),
            ));
        }
        for length in 1..=state.active_length {
            self.ensure_supervised_store(state, length)?;
        }
        state.supervised_max = state.active_length;
        match self.run_stage(state, model, ledger, hooks)? {
            true => {
                if state.active_length < self.config.max_length {
                    self.check_selftrain_trigger(state, model, ledger, hooks)?;
                }
                self.advance_or_complete(state, model, ledger, hooks)
            }
            false => {
                let reason = format!(
                    "supervised step budget exhausted at length {}",
                    state.active_length
                );
                self.terminate(state, &reason);
                Ok(StageOutcome::Exhausted)
            }
        }
    }

    /// Measures slow-step exact-match one length past the current stage,
    /// where the model has never trained, and flips to self-training when it
    /// clears the trigger. Records both untrained accuracies either way.
    pub fn check_selftrain_trigger<M, H>(
        &self,
        state: &mut CurriculumState,
        model: &M,
        ledger: &ErrorLedger,
        hooks: &mut H,
    ) -> Result<bool, RunError>
    where
        M: CompletionModel,
        H: RunHooks<M>,
    {
        if state.phase != Phase::Supervised {
            return Err(RunError::Other(
                "trigger check requested outside the supervised phase".into(),
            ));
        }
        let next = state.active_length + 1;
        let ev = self.evaluate_length(state, model, next)?;
        let slow = ev.slow_exact.unwrap_or(0.0);
        let rows = vec![
            self.push_row(state, next, "fast_exact_untrained", ev.fast_exact),
            self.push_row(state, next, "slow_step_exact_untrained", slow),
        ];
        hooks.after_rows(model, state, ledger, &rows)?;
        let triggered = slow >= self.config.thresholds.selftrain_trigger;
        if triggered {
            state.phase = Phase::SelfTraining;
        }
        Ok(triggered)
    }

    /// One self-training iteration: the model generates candidates for the
    /// active length, the consistency filters decide what enters the store,
    /// and training proceeds exactly like a supervised stage. Ground truth
    /// flows only into `ledger`.
    pub fn run_selftrain_iteration<M, H>(
        &self,
        state: &mut CurriculumState,
        model: &mut M,
        ledger: &mut ErrorLedger,
        hooks: &mut H,
    ) -> Result<StageOutcome, RunError>
    where
        M: CompletionModel,
        H: RunHooks<M>,
    {
        if state.phase != Phase::SelfTraining {
            return Err(RunError::Other(
                "self-training iteration requested outside the self-training phase".into(),
            ));
        }
        let target = state.active_length;
        self.ensure_heldout(state, target)?;
        if !state.stores.contains_key(&target) {
            let store = self.generate_candidates(state, model, ledger, target)?;
            let rows = vec![
                self.push_row(state, target, "candidates_accepted_fast", store.fast.len() as f64),
                self.push_row(state, target, "candidates_accepted_slow", store.slow.len() as f64),
            ];
            state.stores.insert(target, store);
            hooks.after_rows(model, state, ledger, &rows)?;
        }
        let store = &state.stores[&target];
        if store.fast.is_empty() && store.slow.is_empty() {
            let reason = format!("no accepted self-generated candidates at length {target}");
            self.terminate(state, &reason);
            return Ok(StageOutcome::Exhausted);
        }
        match self.run_stage(state, model, ledger, hooks)? {
            true => {
                state.iterations_completed += 1;
                self.advance_or_complete(state, model, ledger, hooks)
            }
            false => {
                let reason = format!("self-training step budget exhausted at length {target}");
                self.terminate(state, &reason);
                Ok(StageOutcome::Exhausted)
            }
        }
    }

    /// Assembles one training batch: fraction rho from the active length,
    /// the remainder uniform over the lengths below it, kinds split evenly
    /// where both exist.
    pub fn build_mixture(
        &self,
        state: &mut CurriculumState,
        batch_size: usize,
    ) -> Result<Vec<TaskExample>, RunError> {
        let top = state.active_length;
        for length in 1..=top {
            let empty = state
                .stores
                .get(&length)
                .map_or(true, |s| s.fast.is_empty() && s.slow.is_empty());
            if empty {
                return Err(RunError::Other(format!(
                    "cannot mix a batch: store for length {length} is empty"
                )));
            }
        }
        let mut quotas: Vec<(usize, usize)> = Vec::new();
        if top == 1 {
            quotas.push((1, batch_size));
        } else {
            let top_n = ((batch_size as f64) * self.config.rho).round() as usize;
            let top_n = top_n.min(batch_size);
            let rest = batch_size - top_n;
            let lows = top - 1;
            quotas.push((top, top_n));
            for (i, length) in (1..top).enumerate() {
                quotas.push((length, rest / lows + usize::from(i < rest % lows)));
            }
        }
        let CurriculumState { stores, rng, .. } = state;
        let mut batch = Vec::with_capacity(batch_size);
        for (length, quota) in quotas {
            let store = &stores[&length];
            let (fast_n, slow_n) = match (store.fast.is_empty(), store.slow.is_empty()) {
                (false, false) => (quota - quota / 2, quota / 2),
                (false, true) => (quota, 0),
                (true, false) => (0, quota),
                (true, true) => unreachable!("guarded above"),
            };
            for _ in 0..fast_n {
                batch.push(store.fast[rng.gen_range(0..store.fast.len())].clone());
            }
            for _ in 0..slow_n {
                batch.push(store.slow[rng.gen_range(0..store.slow.len())].clone());
            }
        }
        Ok(batch)
    }

    /// Grades one length's held-out set by exact match against the cached
    /// gold targets.
    pub fn evaluate_length<M>(
        &self,
        state: &mut CurriculumState,
        model: &M,
        length: usize,
    ) -> Result<LengthEval, RunError>
    where
        M: CompletionModel + ?Sized,
    {
        self.ensure_heldout(state, length)?;
        let h = &state.heldouts[&length];
        let exact = |prompts: &[String], targets: &[String], budget: usize| {
            let outs = model.complete_batch(prompts, budget, 0.0)?;
            let hits = outs
                .iter()
                .zip(targets)
                .filter(|(out, want)| out == want)
                .count();
            Ok::<f64, RunError>(hits as f64 / targets.len() as f64)
        };
        let fast_exact = exact(
            &h.fast_prompts,
            &h.fast_targets,
            self.template.fast_answer_budget(length),
        )?;
        let slow_exact = if h.slow_prompts.is_empty() {
            None
        } else {
            Some(exact(
                &h.slow_prompts,
                &h.slow_targets,
                self.template.slow_step_budget(length),
            )?)
        };
        Ok(LengthEval {
            length,
            fast_exact,
            slow_exact,
        })
    }

    /// Evaluate-then-train loop shared by both phases. Returns true when the
    /// active length clears its gates, false when the step budget runs out.
    fn run_stage<M, H>(
        &self,
        state: &mut CurriculumState,
        model: &mut M,
        ledger: &ErrorLedger,
        hooks: &mut H,
    ) -> Result<bool, RunError>
    where
        M: CompletionModel,
        H: RunHooks<M>,
    {
        let max = self.config.thresholds.max_steps_per_length as u64;
        let eval_every = self.config.thresholds.eval_every as u64;
        loop {
            if state.last_eval_step != Some(state.global_step) {
                let (rows, gate_met) = self.evaluation_sweep(state, model)?;
                state.last_eval_step = Some(state.global_step);
                hooks.after_rows(model, state, ledger, &rows)?;
                if gate_met {
                    return Ok(true);
                }
            }
            if state.steps_this_length >= max {
                return Ok(false);
            }
            let window = eval_every.min(max - state.steps_this_length);
            let mut total = 0.0f64;
            for _ in 0..window {
                let batch = self.build_mixture(state, self.config.batch_size)?;
                let pairs: Vec<(String, String)> =
                    batch.into_iter().map(|ex| (ex.prompt, ex.target)).collect();
                let loss = model.train_batch(&pairs)?;
                state.global_step += 1;
                state.steps_this_length += 1;
                total += f64::from(loss);
                hooks.after_step(model, state, ledger, loss)?;
            }
            let mean = total / window as f64;
            let row = self.push_row(state, state.active_length, "train_loss", mean);
            hooks.after_rows(model, state, ledger, &[row])?;
        }
    }

    /// Evaluates every length up to the active one, records the rows, and
    /// reports whether the active length met both gates.
    fn evaluation_sweep<M>(
        &self,
        state: &mut CurriculumState,
        model: &M,
    ) -> Result<(Vec<MetricRow>, bool), RunError>
    where
        M: CompletionModel + ?Sized,
    {
        let top = state.active_length;
        let mut rows = Vec::new();
        let mut gate_met = false;
        for length in 1..=top {
            let ev = self.evaluate_length(state, model, length)?;
            rows.push(self.push_row(state, length, "fast_exact", ev.fast_exact));
            if let Some(slow) = ev.slow_exact {
                rows.push(self.push_row(state, length, "slow_step_exact", slow));
            }
            if length == top {
                let slow_ok = ev
                    .slow_exact
                    .map_or(true, |s| s >= self.config.thresholds.slow_advance);
                gate_met = ev.fast_exact >= self.config.thresholds.fast_advance && slow_ok;
            }
        }
        Ok((rows, gate_met))
    }

    fn advance_or_complete<M, H>(
        &self,
        state: &mut CurriculumState,
        model: &M,
        ledger: &ErrorLedger,
        hooks: &mut H,
    ) -> Result<StageOutcome, RunError>
    where
        M: CompletionModel,
        H: RunHooks<M>,
    {
        if state.active_length >= self.config.max_length {
            self.terminate(state, "curriculum complete");
            hooks.after_advancement(model, state, ledger)?;
            return Ok(StageOutcome::Completed);
        }
        state.active_length += 1;
        state.steps_this_length = 0;
        state.last_eval_step = None;
        hooks.after_advancement(model, state, ledger)?;
        Ok(StageOutcome::Advanced)
    }

    fn terminate(&self, state: &mut CurriculumState, reason: &str) {
        state.phase = Phase::Terminated;
        state.stop_reason = Some(reason.to_string());
    }

    fn push_row(
        &self,
        state: &mut CurriculumState,
        length: usize,
        metric: &str,
        value: f64,
    ) -> MetricRow {
        let row = MetricRow {
            phase: state.phase,
            length,
            metric: metric.to_string(),
            value,
            step: state.global_step,
        };
        state.history.push(row.clone());
        row
    }

    fn derived_rng(&self, tag: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(prompt_hash(self.config.data_seed, tag))
    }

    fn exhaustive_eval(&self, length: usize) -> bool {
        population_count(length) < 4 * self.config.thresholds.heldout_size as u128
    }

    /// Materializes the held-out set for one length: problems from a stream
    /// derived only from the data seed, targets rendered through the
    /// evaluation oracle once.
    fn ensure_heldout(&self, state: &mut CurriculumState, length: usize) -> Result<(), RunError> {
        if state.heldouts.contains_key(&length) {
            return Ok(());
        }
        let exhaustive = self.exhaustive_eval(length);
        let problems: Vec<Problem> = if exhaustive {
            enumerate_problems(length, u64::MAX)?.collect()
        } else {
            let mut rng = self.derived_rng(&format!("heldout-{length}"));
            let mut seen = HashSet::new();
            let mut chosen = Vec::with_capacity(self.config.thresholds.heldout_size);
            while chosen.len() < self.config.thresholds.heldout_size {
                let p = sample_problem(length, &mut rng);
                if seen.insert(p.clone()) {
                    chosen.push(p);
                }
            }
            chosen
        };
        let mut set = HeldoutSet {
            length,
            exhaustive,
            problems: Vec::new(),
            fast_prompts: Vec::new(),
            fast_targets: Vec::new(),
            slow_prompts: Vec::new(),
            slow_targets: Vec::new(),
        };
        for p in &problems {
            let answer = self.eval_oracle.add(p);
            let fast = self.template.render_fast(p, &answer);
            set.fast_prompts.push(fast.prompt);
            set.fast_targets.push(fast.target);
            if length >= 2 {
                let step = self.eval_oracle.decompose(p)?;
                let slow = self.template.render_slow(p, &step)?;
                set.slow_prompts.push(slow.prompt);
                set.slow_targets.push(slow.target);
            }
        }
        set.problems = problems;
        state.heldouts.insert(length, set);
        Ok(())
    }

    /// Fills one length's store with oracle examples, enumerating the whole
    /// population when it fits in the pool and sampling around the held-out
    /// set otherwise.
    fn ensure_supervised_store(
        &self,
        state: &mut CurriculumState,
        length: usize,
    ) -> Result<(), RunError> {
        if state.stores.contains_key(&length) {
            return Ok(());
        }
        self.ensure_heldout(state, length)?;
        let exhaustive = state.heldouts[&length].exhaustive;
        let heldout: HashSet<Problem> =
            state.heldouts[&length].problems.iter().cloned().collect();
        let pool = self.config.supervised_pool;
        let mut store = LengthStore::default();
        let push = |p: &Problem, store: &mut LengthStore| -> Result<(), RunError> {
            let answer = self.data_oracle.add(p);
            store.fast.push(self.template.render_fast(p, &answer));
            if length >= 2 {
                let step = self.data_oracle.decompose(p)?;
                store.slow.push(self.template.render_slow(p, &step)?);
            }
            Ok(())
        };
        if population_count(length) <= pool as u128 {
            for p in enumerate_problems(length, pool as u64)? {
                if !exhaustive && heldout.contains(&p) {
                    continue;
                }
                push(&p, &mut store)?;
            }
        } else {
            let mut rng = self.derived_rng(&format!("store-{length}"));
            for _ in 0..pool {
                let p = Self::draw_problem(&mut rng, length, &heldout, exhaustive);
                push(&p, &mut store)?;
            }
        }
        state.stores.insert(length, store);
        Ok(())
    }

    /// Filters model-generated candidates for one length. Truth is computed
    /// through the ledger oracle solely to grade the verdicts; nothing here
    /// reads it back.
    fn generate_candidates<M>(
        &self,
        state: &mut CurriculumState,
        model: &M,
        ledger: &mut ErrorLedger,
        target: usize,
    ) -> Result<LengthStore, RunError>
    where
        M: CompletionModel + ?Sized,
    {
        let exhaustive = state.heldouts[&target].exhaustive;
        let heldout: HashSet<Problem> =
            state.heldouts[&target].problems.iter().cloned().collect();
        let iteration = state.iterations_completed + 1;
        let mut store = LengthStore::default();
        for _ in 0..self.config.candidates_per_kind {
            let p = Self::draw_problem(&mut state.rng, target, &heldout, exhaustive);
            let verdict = filter_slow(model, &p, self.template);
            let truth = GoldTruth::Slow([
                self.ledger_oracle.decompose(&p)?,
                self.ledger_oracle.decompose(&p.twin())?,
            ]);
            ledger.update(&verdict, &truth);
            if verdict.accepted {
                store.slow.extend(
                    verdict
                        .examples
                        .into_iter()
                        .map(|ex| ex.with_provenance(Source::SelfGenerated, iteration)),
                );
            }
        }
        for _ in 0..self.config.candidates_per_kind {
            let p = Self::draw_problem(&mut state.rng, target, &heldout, exhaustive);
            let verdict = filter_fast(model, &p, self.template, self.config.k);
            let truth = GoldTruth::Fast(self.ledger_oracle.add(&p));
            ledger.update(&verdict, &truth);
            if verdict.accepted {
                store.fast.extend(
                    verdict
                        .examples
                        .into_iter()
                        .map(|ex| ex.with_provenance(Source::SelfGenerated, iteration)),
                );
            }
        }
        Ok(store)
    }

    fn draw_problem(
        rng: &mut ChaCha8Rng,
        length: usize,
        heldout: &HashSet<Problem>,
        exhaustive: bool,
    ) -> Problem {
        loop {
            let p = sample_problem(length, rng);
            if exhaustive || !heldout.contains(&p) {
                return p;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::LearnerError;
    use crate::simlab::{AccuracyCurve, SimModel, SimProfile};
    use crate::taskfmt::TaskKind;

    fn small_config() -> CurriculumConfig {
        CurriculumConfig {
            thresholds: Thresholds {
                heldout_size: 16,
                eval_every: 5,
                max_steps_per_length: 20,
                ..Thresholds::default()
            },
            candidates_per_kind: 40,
            supervised_pool: 256,
            batch_size: 16,
            start_length: 3,
            max_length: 5,
            data_seed: 7,
            ..CurriculumConfig::default()
        }
    }

    struct Lab {
        config: CurriculumConfig,
        template: TemplateSet,
        data: MeteredOracle,
        eval: MeteredOracle,
        truth: MeteredOracle,
    }

    impl Lab {
        fn new(config: CurriculumConfig) -> Lab {
            Lab {
                config,
                template: TemplateSet::compact(),
                data: MeteredOracle::new(),
                eval: MeteredOracle::new(),
                truth: MeteredOracle::new(),
            }
        }

        fn curriculum(&self) -> Curriculum<'_> {
            Curriculum {
                config: &self.config,
                template: &self.template,
                data_oracle: &self.data,
                eval_oracle: &self.eval,
                ledger_oracle: &self.truth,
            }
        }
    }

    fn fake_example(length: usize, kind: TaskKind, tag: usize) -> TaskExample {
        TaskExample {
            kind,
            prompt: format!("p{length}-{tag}"),
            target: format!("t{length}-{tag}"),
            length,
            source: Source::Oracle,
            iteration: 0,
        }
    }

    fn stocked_state(c: &Curriculum, top: usize) -> CurriculumState {
        let mut state = c.new_state();
        state.active_length = top;
        for length in 1..=top {
            let mut store = LengthStore::default();
            for tag in 0..4 {
                store.fast.push(fake_example(length, TaskKind::Fast, tag));
                if length >= 2 {
                    store.slow.push(fake_example(length, TaskKind::Slow, tag));
                }
            }
            state.stores.insert(length, store);
        }
        state
    }

    fn count(batch: &[TaskExample], length: usize, kind: TaskKind) -> usize {
        batch
            .iter()
            .filter(|ex| ex.length == length && ex.kind == kind)
            .count()
    }

    #[test]
    fn mixture_draws_follow_the_replay_quotas() {
        let lab = Lab::new(small_config());
        let c = lab.curriculum();
        let mut state = stocked_state(&c, 5);

        let batch = c.build_mixture(&mut state, 256).unwrap();
        assert_eq!(batch.len(), 256);
        assert_eq!(count(&batch, 5, TaskKind::Fast), 64);
        assert_eq!(count(&batch, 5, TaskKind::Slow), 64);
        for length in 2..=4 {
            assert_eq!(count(&batch, length, TaskKind::Fast), 16);
            assert_eq!(count(&batch, length, TaskKind::Slow), 16);
        }
        assert_eq!(count(&batch, 1, TaskKind::Fast), 32);
        assert_eq!(count(&batch, 1, TaskKind::Slow), 0);

        let batch = c.build_mixture(&mut state, 250).unwrap();
        assert_eq!(batch.len(), 250);
        assert_eq!(count(&batch, 5, TaskKind::Fast), 63);
        assert_eq!(count(&batch, 5, TaskKind::Slow), 62);
        assert_eq!(
            count(&batch, 1, TaskKind::Fast) + count(&batch, 1, TaskKind::Slow),
            32
        );
        for length in 2..=4 {
            let total = count(&batch, length, TaskKind::Fast) + count(&batch, length, TaskKind::Slow);
            assert_eq!(total, 31);
            assert_eq!(count(&batch, length, TaskKind::Fast), 16);
        }
    }

    #[test]
    fn mixture_refuses_an_empty_length() {
        let lab = Lab::new(small_config());
        let c = lab.curriculum();
        let mut state = stocked_state(&c, 5);
        state.stores.insert(3, LengthStore::default());
        let err = c.build_mixture(&mut state, 32).unwrap_err();
        assert!(err.to_string().contains("length 3"), "{err}");

        state.stores.remove(&5);
        let err = c.build_mixture(&mut state, 32).unwrap_err();
        assert!(err.to_string().contains("length 3"), "{err}");
    }

    #[test]
    fn perfect_model_completes_the_curriculum_on_its_own_data() {
        let lab = Lab::new(small_config());
        let c = lab.curriculum();
        let mut state = c.new_state();
        let mut model = SimModel::perfect(TemplateSet::compact(), 11);
        let mut ledger = ErrorLedger::new();

        let outcome = c
            .run_supervised_iteration(&mut state, &mut model, &ledger, &mut NoHooks)
            .unwrap();
        assert_eq!(outcome, StageOutcome::Advanced);
        assert_eq!(state.active_length, 4);
        assert_eq!(state.supervised_max, 3);
        assert_eq!(state.global_step, 0, "a perfect model passes the gate before training");
        assert_eq!(state.phase, Phase::SelfTraining);

        let data_reads = lab.data.reads();
        let truth_reads = lab.truth.reads();
        c.run_to_completion(&mut state, &mut model, &mut ledger, &mut NoHooks)
            .unwrap();

        assert_eq!(state.phase, Phase::Terminated);
        assert_eq!(state.stop_reason.as_deref(), Some("curriculum complete"));
        assert_eq!(state.active_length, 5);
        assert_eq!(state.supervised_max, 3);
        assert_eq!(state.iterations_completed, 2);
        state.audit_store_purity().unwrap();

        assert_eq!(
            lab.data.reads(),
            data_reads,
            "self-training must not touch the data oracle"
        );
        let per_iteration = (2 * 40 + 40) as u64;
        assert_eq!(lab.truth.reads() - truth_reads, 2 * per_iteration);

        for (length, iteration) in [(4usize, 1u32), (5, 2)] {
            let store = &state.stores[&length];
            assert_eq!(store.fast.len(), 80);
            assert_eq!(store.slow.len(), 80);
            for ex in store.fast.iter().chain(store.slow.iter()) {
                assert_eq!(ex.source, Source::SelfGenerated);
                assert_eq!(ex.iteration, iteration);
                assert_eq!(ex.length, length);
            }
        }

        for row in ledger.report() {
            assert_eq!(row.accepted, row.generated);
            assert_eq!(row.accepted_wrong, 0);
            assert_eq!(row.rejected_correct, 0);
            assert_eq!(row.poison_rate, 0.0);
        }

        let untrained: Vec<&MetricRow> = state
            .history
            .iter()
            .filter(|r| r.metric == "slow_step_exact_untrained")
            .collect();
        assert_eq!(untrained.len(), 1);
        assert_eq!(untrained[0].length, 4);
        assert_eq!(untrained[0].value, 1.0);
        let accepted_rows: Vec<&MetricRow> = state
            .history
            .iter()
            .filter(|r| r.metric == "candidates_accepted_fast")
            .collect();
        assert_eq!(accepted_rows.len(), 2);
        assert!(accepted_rows.iter().all(|r| r.value == 80.0));
    }

    #[test]
    fn heldout_sets_stay_out_of_the_training_stores() {
        let mut config = small_config();
        config.thresholds.heldout_size = 64;
        let lab = Lab::new(config);
        let c = lab.curriculum();
        let mut state = c.new_state();
        c.ensure_supervised_store(&mut state, 1).unwrap();
        c.ensure_supervised_store(&mut state, 2).unwrap();

        let h1 = &state.heldouts[&1];
        assert!(h1.exhaustive);
        assert_eq!(h1.problems.len(), 200);
        assert!(h1.slow_prompts.is_empty());
        assert_eq!(state.stores[&1].fast.len(), 200);
        assert!(state.stores[&1].slow.is_empty());

        let h2 = &state.heldouts[&2];
        assert!(!h2.exhaustive);
        assert_eq!(h2.problems.len(), 64);
        let distinct: HashSet<&Problem> = h2.problems.iter().collect();
        assert_eq!(distinct.len(), 64);

        let held: HashSet<&String> = h2.fast_prompts.iter().collect();
        assert_eq!(state.stores[&2].fast.len(), 256);
        assert_eq!(state.stores[&2].slow.len(), 256);
        for ex in &state.stores[&2].fast {
            assert!(!held.contains(&ex.prompt), "held-out problem in the store");
        }

        let mut again = c.new_state();
        c.ensure_heldout(&mut again, 2).unwrap();
        assert_eq!(again.heldouts[&2], state.heldouts[&2]);
    }

    #[test]
    fn frozen_model_exhausts_the_stage_budget_and_terminates() {
        let lab = Lab::new(small_config());
        let c = lab.curriculum();
        let mut state = c.new_state();
        let profile = SimProfile {
            fast_accuracy: AccuracyCurve::frontier(3, 1.0, 0.01),
            slow_step_accuracy: AccuracyCurve::frontier(3, 1.0, 0.01),
            ..SimProfile::perfect(11)
        };
        let mut model = SimModel::new(profile, TemplateSet::compact());
        let mut ledger = ErrorLedger::new();

        c.run_to_completion(&mut state, &mut model, &mut ledger, &mut NoHooks)
            .unwrap();

        assert_eq!(state.phase, Phase::Terminated);
        let reason = state.stop_reason.as_deref().unwrap();
        assert!(
            reason.contains("supervised step budget exhausted at length 4"),
            "{reason}"
        );
        assert_eq!(state.supervised_max, 4);
        assert_eq!(state.global_step, 20);
        assert_eq!(state.iterations_completed, 0);
        let loss_rows = state
            .history
            .iter()
            .filter(|r| r.metric == "train_loss")
            .count();
        assert_eq!(loss_rows, 4);
        assert!(state
            .history
            .iter()
            .any(|r| r.metric == "slow_step_exact_untrained" && r.length == 4 && r.value < 1.0));
    }

    struct Sabotage {
        inner: SimModel,
        poisoned: String,
    }

    impl CompletionModel for Sabotage {
        fn complete(
            &self,
            prompt: &str,
            max_new_tokens: usize,
            temperature: f32,
        ) -> Result<String, LearnerError> {
            if prompt == self.poisoned {
                return Ok("?".to_string());
            }
            self.inner.complete(prompt, max_new_tokens, temperature)
        }

        fn train_batch(&mut self, batch: &[(String, String)]) -> Result<f32, LearnerError> {
            self.inner.train_batch(batch)
        }
    }

    #[test]
    fn one_wrong_heldout_answer_blocks_the_trigger_at_full_strictness() {
        let lab = Lab::new(small_config());
        let c = lab.curriculum();
        let mut scratch = c.new_state();
        c.ensure_heldout(&mut scratch, 4).unwrap();
        let poisoned = scratch.heldouts[&4].slow_prompts[0].clone();

        let mut model = Sabotage {
            inner: SimModel::perfect(TemplateSet::compact(), 11),
            poisoned: poisoned.clone(),
        };
        let mut state = c.new_state();
        let ledger = ErrorLedger::new();
        let outcome = c
            .run_supervised_iteration(&mut state, &mut model, &ledger, &mut NoHooks)
            .unwrap();
        assert_eq!(outcome, StageOutcome::Advanced);
        assert_eq!(state.phase, Phase::Supervised);
        assert_eq!(state.active_length, 4);
        let row = state
            .history
            .iter()
            .find(|r| r.metric == "slow_step_exact_untrained")
            .unwrap();
        assert_eq!(row.value, 15.0 / 16.0);

        let mut relaxed = small_config();
        relaxed.thresholds.selftrain_trigger = 0.9;
        let lab2 = Lab::new(relaxed);
        let c2 = lab2.curriculum();
        let mut model = Sabotage {
            inner: SimModel::perfect(TemplateSet::compact(), 11),
            poisoned,
        };
        let mut state = c2.new_state();
        let ledger = ErrorLedger::new();
        c2.run_supervised_iteration(&mut state, &mut model, &ledger, &mut NoHooks)
            .unwrap();
        assert_eq!(state.phase, Phase::SelfTraining);
        assert_eq!(state.supervised_max, 3);
        assert_eq!(state.active_length, 4);
    }

    fn run_noisy(ledger: &mut ErrorLedger) -> CurriculumState {
        let lab = Lab::new(small_config());
        let c = lab.curriculum();
        let mut state = c.new_state();
        let profile = SimProfile {
            fast_accuracy: AccuracyCurve::frontier(3, 1.0, 0.9),
            ..SimProfile::perfect(29)
        };
        let mut model = SimModel::new(profile, TemplateSet::compact());
        c.run_to_completion(&mut state, &mut model, ledger, &mut NoHooks)
            .unwrap();
        state
    }

    #[test]
    fn the_ledger_records_but_never_steers() {
        let mut fresh = ErrorLedger::new();
        let state_a = run_noisy(&mut fresh);

        let mut preloaded = ErrorLedger::new();
        {
            let lab = Lab::new(small_config());
            let c = lab.curriculum();
            let model = SimModel::perfect(TemplateSet::compact(), 3);
            let mut state = c.new_state();
            c.ensure_heldout(&mut state, 4).unwrap();
            let store = c
                .generate_candidates(&mut state, &model, &mut preloaded, 4)
                .unwrap();
            assert!(!store.fast.is_empty());
        }
        let state_b = run_noisy(&mut preloaded);

        assert_eq!(state_a, state_b);
        assert_ne!(fresh, preloaded);

        assert!(state_a.iterations_completed >= 1, "seed must reach self-training");
        let report = fresh.report();
        assert!(report.iter().any(|r| r.generated > r.accepted));
        assert!(report.iter().all(|r| r.poison_rate < 0.05));
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let run = || {
            let lab = Lab::new(small_config());
            let c = lab.curriculum();
            let mut state = c.new_state();
            let mut model = SimModel::perfect(TemplateSet::compact(), 11);
            let mut ledger = ErrorLedger::new();
            c.run_to_completion(&mut state, &mut model, &mut ledger, &mut NoHooks)
                .unwrap();
            (state, ledger)
        };
        let (state_a, ledger_a) = run();
        let (state_b, ledger_b) = run();
        assert_eq!(state_a, state_b);
        assert_eq!(ledger_a, ledger_b);
    }

    #[test]
    fn purity_audit_flags_oracle_data_above_the_supervised_ceiling() {
        let lab = Lab::new(small_config());
        let c = lab.curriculum();
        let mut state = c.new_state();
        state.supervised_max = 3;
        let mut store = LengthStore::default();
        store.fast.push(fake_example(4, TaskKind::Fast, 0));
        state.stores.insert(4, store);
        let err = state.audit_store_purity().unwrap_err();
        assert!(err.contains("length 4"), "{err}");

        let mut state = c.new_state();
        state.supervised_max = 4;
        let mut store = LengthStore::default();
        store.fast.push(fake_example(3, TaskKind::Fast, 0));
        state.stores.insert(4, store);
        assert!(state.audit_store_purity().is_err());
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        assert!(small_config().validate().is_ok());
        let mut bad = small_config();
        bad.rho = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = small_config();
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
        let mut bad = small_config();
        bad.max_length = 2;
        assert!(bad.validate().is_err());
        let mut bad = small_config();
        bad.thresholds.fast_advance = -0.1;
        assert!(bad.validate().is_err());
    }
}
