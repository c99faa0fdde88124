//! A stochastic stand-in for the trained learner, plus the Monte-Carlo
//! studies built on it.
//!
//! The simulated model answers fast and slow prompts correctly with
//! per-length probabilities and otherwise emits a corrupted rendering. Every
//! decision is derived from a hash of (profile seed, prompt), so a given
//! prompt always gets the same reply, exactly like a temperature-0 model
//! with frozen weights. That determinism matters: a silently wrong slow step
//! stays wrong when the chain revisits it, which is precisely the failure
//! mode the consistency filters exist to catch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{filter_fast, ErrorLedger, GoldTruth};
use crate::decoding::{fast_answer, least_to_most, simplify_then_guess};
use crate::error::LearnerError;
use crate::model::CompletionModel;
use crate::oracle::{decompose_step, oracle_add, sample_problem, Problem};
use crate::taskfmt::{TaskKind, TemplateSet};

/// Accuracy as a function of operand length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum AccuracyCurve {
    Constant {
        p: f64,
    },
    /// Flat at `plateau` through `trained`, then logistic decay toward zero:
    /// `plateau * 2 / (1 + exp(decay * (len - trained)))`, continuous at the
    /// trained length.
    Plateau {
        trained: usize,
        plateau: f64,
        decay: f64,
    },
}

impl AccuracyCurve {
    /// Plateau curve calibrated so accuracy at `trained + 1` is exactly
    /// `at_next`. This is the supervised-generalization shape: solid inside
    /// the training range, a measured value one step beyond it.
    pub fn frontier(trained: usize, plateau: f64, at_next: f64) -> AccuracyCurve {
        assert!(plateau > 0.0 && plateau <= 1.0);
        assert!(at_next > 0.0 && at_next <= plateau);
        if at_next == plateau {
            return AccuracyCurve::Constant { p: plateau };
        }
        let decay = (2.0 * plateau / at_next - 1.0).ln();
        AccuracyCurve::Plateau {
            trained,
            plateau,
            decay,
        }
    }

    pub fn at(&self, length: usize) -> f64 {
        match *self {
            AccuracyCurve::Constant { p } => p,
            AccuracyCurve::Plateau {
                trained,
                plateau,
                decay,
            } => {
                if length <= trained {
                    plateau
                } else {
                    plateau * 2.0 / (1.0 + (decay * (length - trained) as f64).exp())
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            AccuracyCurve::Constant { p } => (0.0..=1.0).contains(&p),
            AccuracyCurve::Plateau {
                plateau, decay, ..
            } => (0.0..=1.0).contains(&plateau) && decay >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("accuracy curve out of range: {self:?}"))
        }
    }
}

/// How a wrong reply differs from the correct one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionModel {
    /// Replace one digit with a different one (answer digits for fast,
    /// residual operand digits for slow). Output always stays parseable, so
    /// catching it falls entirely to the filters.
    DigitSubstitute,
    /// Delete one digit; the result is usually unparseable.
    DigitDrop,
    /// A missed or spurious carry: the fast answer shifts by one at some
    /// column, a slow step flips the residual's carry term. Parseable under
    /// the compact style; the english style restates enough arithmetic that
    /// a flipped carry reads as malformed.
    CarryFlip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimProfile {
    pub fast_accuracy: AccuracyCurve,
    pub slow_step_accuracy: AccuracyCurve,
    pub corruption: CorruptionModel,
    pub seed: u64,
}

impl SimProfile {
    /// Always correct; the reference model for equivalence tests.
    pub fn perfect(seed: u64) -> SimProfile {
        SimProfile {
            fast_accuracy: AccuracyCurve::Constant { p: 1.0 },
            slow_step_accuracy: AccuracyCurve::Constant { p: 1.0 },
            corruption: CorruptionModel::DigitSubstitute,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.fast_accuracy.validate()?;
        self.slow_step_accuracy.validate()
    }
}

/// What the simulated model returns for a prompt it cannot parse.
pub const MALFORMED_OUTPUT: &str = "?";

/// [`CompletionModel`] implementation driven by a [`SimProfile`].
pub struct SimModel {
    profile: SimProfile,
    template: TemplateSet,
}

impl SimModel {
    pub fn new(profile: SimProfile, template: TemplateSet) -> SimModel {
        SimModel { profile, template }
    }

    pub fn perfect(template: TemplateSet, seed: u64) -> SimModel {
        SimModel::new(SimProfile::perfect(seed), template)
    }

    pub fn profile(&self) -> &SimProfile {
        &self.profile
    }

    fn rng_for(&self, prompt: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(prompt_hash(self.profile.seed, prompt))
    }

    fn fast_reply(&self, p: &Problem, prompt: &str) -> String {
        let answer = oracle_add(p);
        let acc = self.profile.fast_accuracy.at(p.len());
        if acc >= 1.0 {
            return self.template.fast_target_raw(answer.as_str());
        }
        let mut rng = self.rng_for(prompt);
        if rng.gen_bool(acc.max(0.0)) {
            self.template.fast_target_raw(answer.as_str())
        } else {
            let wrong = corrupt_answer(answer.as_str(), self.profile.corruption, &mut rng);
            self.template.fast_target_raw(&wrong)
        }
    }

    fn slow_reply(&self, p: &Problem, prompt: &str) -> String {
        let Ok(step) = decompose_step(p) else {
            return MALFORMED_OUTPUT.into();
        };
        let acc = self.profile.slow_step_accuracy.at(p.len());
        let correct_reply = |s: &SimModel| {
            s.template.slow_target_raw(
                p,
                step.emitted_digit,
                step.residual.a().as_str(),
                step.residual.b().as_str(),
                step.carry_out,
            )
        };
        if acc >= 1.0 {
            return correct_reply(self);
        }
        let mut rng = self.rng_for(prompt);
        if rng.gen_bool(acc.max(0.0)) {
            return correct_reply(self);
        }
        let mut ra = step.residual.a().as_str().to_owned();
        let mut rb = step.residual.b().as_str().to_owned();
        let mut carry = step.carry_out;
        match self.profile.corruption {
            CorruptionModel::DigitSubstitute => {
                let target = if rng.gen::<bool>() { &mut ra } else { &mut rb };
                substitute_digit(target, &mut rng);
            }
            CorruptionModel::DigitDrop => {
                let target = if rng.gen::<bool>() { &mut ra } else { &mut rb };
                let pos = rng.gen_range(0..target.len());
                target.remove(pos);
            }
            CorruptionModel::CarryFlip => carry = !carry,
        }
        self.template
            .slow_target_raw(p, step.emitted_digit, &ra, &rb, carry)
    }
}

impl CompletionModel for SimModel {
    fn complete(
        &self,
        prompt: &str,
        max_new_tokens: usize,
        _temperature: f32,
    ) -> Result<String, LearnerError> {
        let Some((kind, p)) = self.template.parse_prompt(prompt) else {
            return Ok(MALFORMED_OUTPUT.into());
        };
        let mut out = match kind {
            TaskKind::Fast => self.fast_reply(&p, prompt),
            TaskKind::Slow => self.slow_reply(&p, prompt),
        };
        out.truncate(max_new_tokens);
        Ok(out)
    }

    fn train_batch(&mut self, batch: &[(String, String)]) -> Result<f32, LearnerError> {
        if batch.is_empty() {
            return Err(LearnerError::EmptyBatch);
        }
        Ok(0.0)
    }
}

/// FNV-1a over the seed's bytes and the prompt, giving each prompt a stable
/// random stream.
pub(crate) fn prompt_hash(seed: u64, prompt: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().into_iter().chain(prompt.bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One wrong digit, leading position kept nonzero so the result stays a
/// canonical number.
fn substitute_digit<R: Rng>(s: &mut String, rng: &mut R) {
    let mut bytes = std::mem::take(s).into_bytes();
    let pos = rng.gen_range(0..bytes.len());
    let old = bytes[pos] - b'0';
    let new = if pos == 0 && bytes.len() > 1 {
        1 + (old + rng.gen_range(0..8)) % 9
    } else {
        (old + 1 + rng.gen_range(0..9)) % 10
    };
    bytes[pos] = b'0' + new;
    *s = String::from_utf8(bytes).unwrap();
}

fn corrupt_answer<R: Rng>(answer: &str, model: CorruptionModel, rng: &mut R) -> String {
    match model {
        CorruptionModel::DigitSubstitute => {
            let mut s = answer.to_owned();
            substitute_digit(&mut s, rng);
            s
        }
        CorruptionModel::DigitDrop => {
            let mut s = answer.to_owned();
            let pos = rng.gen_range(0..s.len());
            s.remove(pos);
            s
        }
        CorruptionModel::CarryFlip => {
            let column = rng.gen_range(1..=answer.len());
            let subtract = rng.gen::<bool>();
            if subtract {
                sub_pow10(answer, column).unwrap_or_else(|| add_pow10(answer, column))
            } else {
                add_pow10(answer, column)
            }
        }
    }
}

/// Digit-string plus 10^column.
fn add_pow10(s: &str, column: usize) -> String {
    let mut digits: Vec<u8> = s.bytes().rev().map(|b| b - b'0').collect();
    if digits.len() <= column {
        digits.resize(column + 1, 0);
    }
    let mut i = column;
    loop {
        digits[i] += 1;
        if digits[i] < 10 {
            break;
        }
        digits[i] = 0;
        i += 1;
        if i == digits.len() {
            digits.push(0);
        }
    }
    digits.iter().rev().map(|d| (d + b'0') as char).collect()
}

/// Digit-string minus 10^column; `None` when the value would go negative.
fn sub_pow10(s: &str, column: usize) -> Option<String> {
    let mut digits: Vec<u8> = s.bytes().rev().map(|b| b - b'0').collect();
    if digits.len() <= column {
        return None;
    }
    let mut i = column;
    loop {
        if digits[i] > 0 {
            digits[i] -= 1;
            break;
        }
        digits[i] = 9;
        i += 1;
        if i == digits.len() {
            return None;
        }
    }
    while digits.len() > 1 && digits.last() == Some(&0) {
        digits.pop();
    }
    Some(digits.iter().rev().map(|d| (d + b'0') as char).collect())
}

/// 95% Wilson score interval for a binomial proportion. `(0, 1)` when there
/// are no trials.
pub fn wilson95(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64;
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

fn rate(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Study parameterization placing the generalization frontier at whichever
/// length is being examined: fast accuracy sits at `fast_plateau` strictly
/// below the studied length and at `fast_at_length` there, while slow steps
/// succeed with a flat per-step probability. Equal plateau and frontier
/// values give a flat fast curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierProfile {
    pub fast_plateau: f64,
    pub fast_at_length: f64,
    pub slow_step: f64,
    pub corruption: CorruptionModel,
    pub seed: u64,
}

impl Default for FrontierProfile {
    fn default() -> FrontierProfile {
        FrontierProfile {
            fast_plateau: 1.0,
            fast_at_length: 0.9,
            slow_step: 0.999,
            corruption: CorruptionModel::DigitSubstitute,
            seed: 0,
        }
    }
}

impl FrontierProfile {
    pub fn profile_at(&self, length: usize) -> SimProfile {
        assert!(length >= 2, "frontier studies need a decomposable length");
        SimProfile {
            fast_accuracy: AccuracyCurve::frontier(
                length - 1,
                self.fast_plateau,
                self.fast_at_length,
            ),
            slow_step_accuracy: AccuracyCurve::Constant { p: self.slow_step },
            corruption: self.corruption,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 < self.fast_at_length
            && self.fast_at_length <= self.fast_plateau
            && self.fast_plateau <= 1.0)
        {
            return Err(format!(
                "fast accuracies must satisfy 0 < at_length <= plateau <= 1, got {} and {}",
                self.fast_at_length, self.fast_plateau
            ));
        }
        if !(0.0..=1.0).contains(&self.slow_step) {
            return Err(format!("slow step accuracy out of range: {}", self.slow_step));
        }
        Ok(())
    }
}

/// The four data-generation pipelines compared by the avalanche study, in
/// order of increasing scrutiny of the model's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Direct,
    LeastToMost,
    SimplifyThenGuess,
    StgCommutativity,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [
        Pipeline::Direct,
        Pipeline::LeastToMost,
        Pipeline::SimplifyThenGuess,
        Pipeline::StgCommutativity,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Pipeline::Direct => "direct",
            Pipeline::LeastToMost => "least_to_most",
            Pipeline::SimplifyThenGuess => "stg",
            Pipeline::StgCommutativity => "stg_commutativity",
        }
    }
}

/// One study cell: a pipeline at a length. Counts are per candidate
/// example, so the commutativity pipeline generates two per trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvalancheRow {
    pub pipeline: Pipeline,
    pub length: usize,
    pub trials: u64,
    pub generated: u64,
    pub accepted: u64,
    pub accepted_wrong: u64,
    pub rejected_correct: u64,
    pub poison_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub acceptance_rate: f64,
    pub false_discard_rate: f64,
}

#[derive(Default)]
struct PipelineTally {
    generated: u64,
    accepted: u64,
    accepted_wrong: u64,
    rejected: u64,
    rejected_correct: u64,
}

impl PipelineTally {
    /// For the unfiltered pipelines: a parsed answer is an accepted
    /// candidate example, anything unusable is dropped on the floor (so a
    /// dropped answer is never a false discard).
    fn record_answer(&mut self, answer: Option<&crate::oracle::Digits>, truth: &crate::oracle::Digits) {
        self.generated += 1;
        match answer {
            Some(a) => {
                self.accepted += 1;
                if a != truth {
                    self.accepted_wrong += 1;
                }
            }
            None => self.rejected += 1,
        }
    }

    fn into_row(self, pipeline: Pipeline, length: usize, trials: u64) -> AvalancheRow {
        let (ci_low, ci_high) = wilson95(self.accepted_wrong, self.accepted);
        AvalancheRow {
            pipeline,
            length,
            trials,
            generated: self.generated,
            accepted: self.accepted,
            accepted_wrong: self.accepted_wrong,
            rejected_correct: self.rejected_correct,
            poison_rate: rate(self.accepted_wrong, self.accepted),
            ci_low,
            ci_high,
            acceptance_rate: rate(self.accepted, self.generated),
            false_discard_rate: rate(self.rejected_correct, self.rejected),
        }
    }
}

/// Monte-Carlo comparison of how much wrong data each pipeline would feed
/// into self-training. All four pipelines see the same problems per length.
/// Estimates stabilize around 10,000 trials per cell; below that the
/// confidence intervals mostly overlap.
pub fn run_avalanche_study(
    profile: &FrontierProfile,
    lengths: &[usize],
    trials: u64,
    k: usize,
    template: &TemplateSet,
) -> Vec<AvalancheRow> {
    let mut rows = Vec::with_capacity(lengths.len() * Pipeline::ALL.len());
    for &length in lengths {
        let model = SimModel::new(profile.profile_at(length), template.clone());
        let mut direct = PipelineTally::default();
        let mut ltm = PipelineTally::default();
        let mut stg = PipelineTally::default();
        let mut ledger = ErrorLedger::new();
        let mut rng = ChaCha8Rng::seed_from_u64(prompt_hash(
            profile.seed,
            &format!("avalanche-problems-{length}"),
        ));
        for _ in 0..trials {
            let p = sample_problem(length, &mut rng);
            let truth = oracle_add(&p);
            direct.record_answer(fast_answer(&model, &p, template).as_ref(), &truth);
            ltm.record_answer(least_to_most(&model, &p, template).0.as_ref(), &truth);
            let (vote, _) = simplify_then_guess(&model, &p, template, k);
            stg.record_answer(vote.decision.as_ref(), &truth);
            let verdict = filter_fast(&model, &p, template, k);
            ledger.update(&verdict, &GoldTruth::Fast(truth));
        }
        let cell = ledger.cell(length, TaskKind::Fast);
        let comm = PipelineTally {
            generated: cell.generated,
            accepted: cell.accepted,
            accepted_wrong: cell.accepted_wrong,
            rejected: cell.rejected,
            rejected_correct: cell.rejected_correct,
        };
        rows.push(direct.into_row(Pipeline::Direct, length, trials));
        rows.push(ltm.into_row(Pipeline::LeastToMost, length, trials));
        rows.push(stg.into_row(Pipeline::SimplifyThenGuess, length, trials));
        rows.push(comm.into_row(Pipeline::StgCommutativity, length, trials));
    }
    rows
}

/// How absorbed poison erodes next-generation accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum DegradationLaw {
    /// `next = current * (1 - lambda * poison)`, clamped to [0, 1].
    Linear { lambda: f64 },
    /// `next = current * exp(-lambda * poison)`.
    Exponential { lambda: f64 },
}

impl Default for DegradationLaw {
    fn default() -> DegradationLaw {
        DegradationLaw::Linear { lambda: 10.0 }
    }
}

impl DegradationLaw {
    pub fn next(self, accuracy: f64, poison: f64) -> f64 {
        let next = match self {
            DegradationLaw::Linear { lambda } => accuracy * (1.0 - lambda * poison),
            DegradationLaw::Exponential { lambda } => accuracy * (-lambda * poison).exp(),
        };
        next.clamp(0.0, 1.0)
    }
}

/// Parameters for the cross-generation decay study. Accuracy at the studied
/// length stays pinned to `frontier_ratio` times the current plateau, so a
/// degrading model degrades at every length at once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayProfile {
    pub length: usize,
    pub trials_per_generation: u64,
    pub initial_fast_plateau: f64,
    pub frontier_ratio: f64,
    pub initial_slow_step: f64,
    pub law: DegradationLaw,
    pub k: usize,
    pub corruption: CorruptionModel,
    pub seed: u64,
}

impl Default for DecayProfile {
    fn default() -> DecayProfile {
        DecayProfile {
            length: 8,
            trials_per_generation: 20_000,
            initial_fast_plateau: 0.99,
            frontier_ratio: 0.9,
            initial_slow_step: 0.999,
            law: DegradationLaw::default(),
            k: 5,
            corruption: CorruptionModel::DigitSubstitute,
            seed: 0,
        }
    }
}

impl DecayProfile {
    pub fn validate(&self) -> Result<(), String> {
        if self.length < 2 {
            return Err("decay study needs a decomposable length".into());
        }
        if self.k == 0 {
            return Err("decay study needs k >= 1".into());
        }
        for (name, v) in [
            ("initial_fast_plateau", self.initial_fast_plateau),
            ("frontier_ratio", self.frontier_ratio),
            ("initial_slow_step", self.initial_slow_step),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} out of range: {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayArm {
    /// Trains on whatever direct fast sampling produces.
    Unfiltered,
    /// Trains only on simplify-then-guess answers that pass the
    /// commutativity check.
    Filtered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub arm: DecayArm,
    pub generation: usize,
    /// Fast plateau accuracy entering this generation.
    pub fast_plateau: f64,
    pub slow_step: f64,
    pub trials: u64,
    pub accepted: u64,
    pub accepted_wrong: u64,
    /// Poison among the data accepted this generation.
    pub generation_poison: f64,
    /// Poison of the accumulated training set through this generation; this
    /// is what an avalanche drives toward 1 while a filter holds it down.
    pub cumulative_poison: f64,
}

/// Iterates a model-of-a-model: each generation samples training data at
/// the studied length, measures the poison it accepted, then degrades both
/// accuracy curves by the configured law before the next generation. The
/// two arms share problems but evolve independently. A generation that
/// accepts nothing absorbs no poison and degrades by zero.
pub fn run_generation_decay_study(
    profile: &DecayProfile,
    generations: usize,
    template: &TemplateSet,
) -> Vec<DecayRow> {
    assert!(generations >= 2, "a decay trajectory needs at least two generations");
    let mut rows = Vec::with_capacity(generations * 2);
    for arm in [DecayArm::Unfiltered, DecayArm::Filtered] {
        let mut fast_plateau = profile.initial_fast_plateau;
        let mut slow_step = profile.initial_slow_step;
        let mut total_accepted = 0u64;
        let mut total_wrong = 0u64;
        for generation in 1..=generations {
            let sim = SimProfile {
                fast_accuracy: frontier_or_dead(
                    profile.length - 1,
                    fast_plateau,
                    profile.frontier_ratio * fast_plateau,
                ),
                slow_step_accuracy: AccuracyCurve::Constant { p: slow_step },
                corruption: profile.corruption,
                seed: prompt_hash(profile.seed, &format!("decay-model-{arm:?}-{generation}")),
            };
            let model = SimModel::new(sim, template.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(prompt_hash(
                profile.seed,
                &format!("decay-problems-{generation}"),
            ));
            let (mut accepted, mut wrong) = (0u64, 0u64);
            for _ in 0..profile.trials_per_generation {
                let p = sample_problem(profile.length, &mut rng);
                let truth = oracle_add(&p);
                match arm {
                    DecayArm::Unfiltered => {
                        if let Some(a) = fast_answer(&model, &p, template) {
                            accepted += 1;
                            if a != truth {
                                wrong += 1;
                            }
                        }
                    }
                    DecayArm::Filtered => {
                        let v = filter_fast(&model, &p, template, profile.k);
                        if v.accepted {
                            accepted += 2;
                            if let crate::consistency::Candidates::Fast([Some(a), _]) =
                                &v.candidates
                            {
                                if *a != truth {
                                    wrong += 2;
                                }
                            }
                        }
                    }
                }
            }
            total_accepted += accepted;
            total_wrong += wrong;
            let generation_poison = rate(wrong, accepted);
            rows.push(DecayRow {
                arm,
                generation,
                fast_plateau,
                slow_step,
                trials: profile.trials_per_generation,
                accepted,
                accepted_wrong: wrong,
                generation_poison,
                cumulative_poison: rate(total_wrong, total_accepted),
            });
            fast_plateau = profile.law.next(fast_plateau, generation_poison);
            slow_step = profile.law.next(slow_step, generation_poison);
        }
    }
    rows
}

/// A frontier curve that tolerates a fully collapsed model: once accuracy
/// reaches zero the logistic shape is meaningless and a flat zero stands in.
fn frontier_or_dead(trained: usize, plateau: f64, at_next: f64) -> AccuracyCurve {
    if plateau <= 0.0 || at_next <= 0.0 {
        AccuracyCurve::Constant { p: 0.0 }
    } else {
        AccuracyCurve::frontier(trained, plateau, at_next)
    }
}
