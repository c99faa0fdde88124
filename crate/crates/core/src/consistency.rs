//! Commutativity-based filtering of model-generated training data, plus the
//! measurement-only accounting that quantifies error avalanching.
//!
//! A candidate problem is solved independently in both orientations (`a+b`
//! and `b+a`); only agreement gets into the dataset. The [`ErrorLedger`]
//! grades every verdict against the oracle, but it is write-and-report only:
//! nothing in the training loop may read it, so self-training stays free of
//! ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoding::{fast_answer, simplify_then_guess};
use crate::model::CompletionModel;
use crate::oracle::{DecompositionStep, Digits, Problem};
use crate::taskfmt::{Source, TaskExample, TaskKind, TemplateSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    /// Both orientations produced the same answer.
    Agree,
    /// Both produced answers, but different ones.
    Disagree,
    /// At least one vote ended without a strict majority.
    Tie,
    /// At least one orientation produced nothing usable.
    Malformed,
}

/// Candidate values from the two orientations (problem first, twin second),
/// kept even on rejection so the ledger can count discarded-but-correct
/// data.
#[derive(Clone, Debug, PartialEq)]
pub enum Candidates {
    Fast([Option<Digits>; 2]),
    Slow([Option<DecompositionStep>; 2]),
}

#[derive(Clone, Debug)]
pub struct FilterVerdict {
    pub accepted: bool,
    pub reason: FilterReason,
    /// Both orientations on acceptance, empty otherwise.
    pub examples: Vec<TaskExample>,
    pub kind: TaskKind,
    pub length: usize,
    pub candidates: Candidates,
}

/// Accepts a fast candidate when simplify-then-guess reaches the same
/// non-tie decision on the problem and its twin. On acceptance both
/// orientations are rendered with the agreed answer; the twin was computed
/// anyway and doubles the self-generated data.
pub fn filter_fast<M: CompletionModel + ?Sized>(
    m: &M,
    p: &Problem,
    t: &TemplateSet,
    k: usize,
) -> FilterVerdict {
    assert!(p.len() >= 2, "fast filtering needs a decomposable problem");
    let twin = p.twin();
    let (vote_p, _) = simplify_then_guess(m, p, t, k);
    let (vote_t, _) = simplify_then_guess(m, &twin, t, k);
    let candidates = Candidates::Fast([vote_p.decision.clone(), vote_t.decision.clone()]);
    let no_guesses = vote_p.guesses.is_empty() || vote_t.guesses.is_empty();
    let (accepted, reason, examples) = match (vote_p.decision, vote_t.decision) {
        (Some(a), Some(b)) if a == b => {
            let ex = |prob: &Problem| {
                t.render_fast(prob, &a)
                    .with_provenance(Source::SelfGenerated, 0)
            };
            (true, FilterReason::Agree, vec![ex(p), ex(&twin)])
        }
        (Some(_), Some(_)) => (false, FilterReason::Disagree, vec![]),
        _ if no_guesses => (false, FilterReason::Malformed, vec![]),
        _ => (false, FilterReason::Tie, vec![]),
    };
    FilterVerdict {
        accepted,
        reason,
        examples,
        kind: TaskKind::Fast,
        length: p.len(),
        candidates,
    }
}

/// Accepts a slow candidate when the one-step-then-guess answers of the two
/// orientations agree: each side generates one slow step, fast-adds its own
/// residual, and appends its emitted digit. Accepted examples store the
/// model's generated step text verbatim; a malformed step is rejected even
/// if the other side's guess happens to match something.
pub fn filter_slow<M: CompletionModel + ?Sized>(
    m: &M,
    p: &Problem,
    t: &TemplateSet,
) -> FilterVerdict {
    assert!(p.len() >= 2, "slow filtering needs a decomposable problem");
    let twin = p.twin();
    let side = |prob: &Problem| {
        let prompt = t.slow_prompt(prob);
        let raw = m
            .complete(&prompt, t.slow_step_budget(prob.len()), 0.0)
            .unwrap_or_default();
        let step = t.parse_slow(&raw);
        (prompt, raw, step)
    };
    let (prompt_p, raw_p, step_p) = side(p);
    let (prompt_t, raw_t, step_t) = side(&twin);
    let candidates = Candidates::Slow([step_p.clone(), step_t.clone()]);

    let one_step_guess = |step: &DecompositionStep| -> Option<Digits> {
        let front = fast_answer(m, &step.residual, t)?;
        Digits::parse(&format!("{front}{}", step.emitted_digit)).ok()
    };
    let verdict = match (&step_p, &step_t) {
        (Some(sp), Some(st)) => {
            match (one_step_guess(sp), one_step_guess(st)) {
                (Some(ga), Some(gb)) if ga == gb => {
                    let ex = |prompt: String, raw: &str, length: usize| TaskExample {
                        kind: TaskKind::Slow,
                        prompt,
                        target: raw.to_owned(),
                        length,
                        source: Source::SelfGenerated,
                        iteration: 0,
                    };
                    (
                        true,
                        FilterReason::Agree,
                        vec![
                            ex(prompt_p, &raw_p, p.len()),
                            ex(prompt_t, &raw_t, p.len()),
                        ],
                    )
                }
                (Some(_), Some(_)) => (false, FilterReason::Disagree, vec![]),
                _ => (false, FilterReason::Malformed, vec![]),
            }
        }
        _ => (false, FilterReason::Malformed, vec![]),
    };
    FilterVerdict {
        accepted: verdict.0,
        reason: verdict.1,
        examples: verdict.2,
        kind: TaskKind::Slow,
        length: p.len(),
        candidates,
    }
}

/// Oracle truth for grading one verdict: the true sum for fast candidates,
/// the true steps of the problem and its twin for slow ones.
#[derive(Clone, Debug)]
pub enum GoldTruth {
    Fast(Digits),
    Slow([DecompositionStep; 2]),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerCell {
    pub generated: u64,
    pub accepted: u64,
    pub accepted_wrong: u64,
    pub rejected: u64,
    pub rejected_correct: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerPerLength {
    pub fast: LedgerCell,
    pub slow: LedgerCell,
}

/// Counts candidate orientations per (length, kind) and how the filter
/// treated them, graded against the oracle. Reporting only: by design there
/// is no interface for the curriculum to base a decision on, and the tests
/// hold training trajectories identical with the ledger on or off.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorLedger {
    lengths: BTreeMap<usize, LedgerPerLength>,
}

/// One reporting row, also the shape written into the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub length: usize,
    pub kind: TaskKind,
    pub generated: u64,
    pub accepted: u64,
    pub accepted_wrong: u64,
    pub rejected_correct: u64,
    /// accepted_wrong / accepted; 0 when nothing was accepted.
    pub poison_rate: f64,
    /// rejected_correct / rejected; 0 when nothing was rejected.
    pub false_discard_rate: f64,
}

impl ErrorLedger {
    pub fn new() -> ErrorLedger {
        ErrorLedger::default()
    }

    /// Grades a verdict. Each filter call contributes its two orientations:
    /// accepted ones are checked for being stored wrong (poison), rejected
    /// ones for having been correct after all (false discard).
    pub fn update(&mut self, verdict: &FilterVerdict, truth: &GoldTruth) {
        let cell = {
            let per = self.lengths.entry(verdict.length).or_default();
            match verdict.kind {
                TaskKind::Fast => &mut per.fast,
                TaskKind::Slow => &mut per.slow,
            }
        };
        cell.generated += 2;
        if verdict.accepted {
            cell.accepted += 2;
            cell.accepted_wrong += match (&verdict.candidates, truth) {
                (Candidates::Fast([Some(a), _]), GoldTruth::Fast(want)) => {
                    // Both orientations carry the agreed answer.
                    if a == want {
                        0
                    } else {
                        2
                    }
                }
                (Candidates::Slow(steps), GoldTruth::Slow(want)) => steps
                    .iter()
                    .zip(want)
                    .filter(|(got, want)| got.as_ref() != Some(want))
                    .count() as u64,
                _ => panic!("verdict and truth kinds disagree"),
            };
        } else {
            cell.rejected += 2;
            cell.rejected_correct += match (&verdict.candidates, truth) {
                (Candidates::Fast(decisions), GoldTruth::Fast(want)) => decisions
                    .iter()
                    .filter(|d| d.as_ref() == Some(want))
                    .count() as u64,
                (Candidates::Slow(steps), GoldTruth::Slow(want)) => steps
                    .iter()
                    .zip(want)
                    .filter(|(got, want)| got.as_ref() == Some(*want))
                    .count() as u64,
                _ => panic!("verdict and truth kinds disagree"),
            };
        }
    }

    /// Per-length rows plus a cumulative row per kind (length 0).
    pub fn report(&self) -> Vec<LedgerRow> {
        let mut rows = Vec::new();
        let mut totals = LedgerPerLength::default();
        for (&length, per) in &self.lengths {
            for (kind, cell) in [(TaskKind::Fast, per.fast), (TaskKind::Slow, per.slow)] {
                if cell.generated > 0 {
                    rows.push(Self::row(length, kind, cell));
                }
            }
            accumulate(&mut totals.fast, per.fast);
            accumulate(&mut totals.slow, per.slow);
        }
        for (kind, cell) in [(TaskKind::Fast, totals.fast), (TaskKind::Slow, totals.slow)] {
            if cell.generated > 0 {
                rows.push(Self::row(0, kind, cell));
            }
        }
        rows
    }

    pub fn cell(&self, length: usize, kind: TaskKind) -> LedgerCell {
        let per = self.lengths.get(&length).copied().unwrap_or_default();
        match kind {
            TaskKind::Fast => per.fast,
            TaskKind::Slow => per.slow,
        }
    }

    fn row(length: usize, kind: TaskKind, cell: LedgerCell) -> LedgerRow {
        LedgerRow {
            length,
            kind,
            generated: cell.generated,
            accepted: cell.accepted,
            accepted_wrong: cell.accepted_wrong,
            rejected_correct: cell.rejected_correct,
            poison_rate: ratio(cell.accepted_wrong, cell.accepted),
            false_discard_rate: ratio(cell.rejected_correct, cell.rejected),
        }
    }
}

fn accumulate(into: &mut LedgerCell, from: LedgerCell) {
    into.generated += from.generated;
    into.accepted += from.accepted;
    into.accepted_wrong += from.accepted_wrong;
    into.rejected += from.rejected;
    into.rejected_correct += from.rejected_correct;
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{decompose_step, oracle_add, sample_problem};
    use crate::simlab::{AccuracyCurve, CorruptionModel, SimModel, SimProfile};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn problem(a: &str, b: &str, plus_one: bool) -> Problem {
        Problem::new(
            Digits::parse(a).unwrap(),
            Digits::parse(b).unwrap(),
            plus_one,
        )
        .unwrap()
    }

    struct Scripted(HashMap<String, String>);

    impl Scripted {
        fn new(entries: &[(&str, &str)]) -> Scripted {
            Scripted(
                entries
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect(),
            )
        }
    }

    impl CompletionModel for Scripted {
        fn complete(
            &self,
            prompt: &str,
            _max_new_tokens: usize,
            _temperature: f32,
        ) -> Result<String, crate::error::LearnerError> {
            Ok(self.0.get(prompt).cloned().unwrap_or_else(|| "?".into()))
        }

        fn train_batch(
            &mut self,
            _batch: &[(String, String)],
        ) -> Result<f32, crate::error::LearnerError> {
            unimplemented!()
        }
    }

    #[test]
    fn perfect_model_accepts_fast_with_both_orientations() {
        let t = TemplateSet::compact();
        let m = SimModel::perfect(t.clone(), 0);
        let p = problem("714", "263", false);
        let v = filter_fast(&m, &p, &t, 5);
        assert!(v.accepted);
        assert_eq!(v.reason, FilterReason::Agree);
        assert_eq!(v.examples.len(), 2);
        assert_eq!(v.examples[0].prompt, "F:714+263=");
        assert_eq!(v.examples[0].target, "977");
        assert_eq!(v.examples[1].prompt, "F:263+714=");
        assert_eq!(v.examples[1].target, "977");
        assert!(v
            .examples
            .iter()
            .all(|e| e.source == Source::SelfGenerated));
    }

    #[test]
    fn fast_disagreement_is_rejected() {
        let t = TemplateSet::compact();
        // Two-digit problem: single guess per orientation. One side says
        // 977-ish truth, the other a corrupted value.
        let m = Scripted::new(&[
            ("S:71+26=", "S:7;7+2"),
            ("F:7+2=", "9"),
            ("S:26+71=", "S:7;2+7"),
            ("F:2+7=", "8"),
        ]);
        let v = filter_fast(&m, &problem("71", "26", false), &t, 5);
        assert!(!v.accepted);
        assert_eq!(v.reason, FilterReason::Disagree);
        assert!(v.examples.is_empty());
        assert_eq!(
            v.candidates,
            Candidates::Fast([
                Some(Digits::parse("97").unwrap()),
                Some(Digits::parse("87").unwrap())
            ])
        );
    }

    #[test]
    fn fast_tie_on_either_side_is_rejected() {
        let t = TemplateSet::compact();
        // p side: clean majority. Twin side: two guesses that split.
        let m = Scripted::new(&[
            ("S:141+123=", "S:4;14+12"),
            ("F:14+12=", "26"),
            ("S:14+12=", "S:6;1+1"),
            ("F:1+1=", "2"),
            ("S:123+141=", "S:4;12+14"),
            ("F:12+14=", "25"),
            ("S:12+14=", "S:6;1+1"),
        ]);
        let v = filter_fast(&m, &problem("141", "123", false), &t, 5);
        assert!(!v.accepted);
        assert_eq!(v.reason, FilterReason::Tie);
    }

    #[test]
    fn fast_with_no_usable_guesses_is_malformed() {
        let t = TemplateSet::compact();
        let m = Scripted::new(&[]);
        let v = filter_fast(&m, &problem("141", "123", false), &t, 5);
        assert!(!v.accepted);
        assert_eq!(v.reason, FilterReason::Malformed);
    }

    #[test]
    fn perfect_model_accepts_slow_with_verbatim_steps() {
        let t = TemplateSet::compact();
        let m = SimModel::perfect(t.clone(), 0);
        let p = problem("141", "123", false);
        let v = filter_slow(&m, &p, &t);
        assert!(v.accepted);
        assert_eq!(v.examples.len(), 2);
        assert_eq!(v.examples[0].prompt, "S:141+123=");
        assert_eq!(v.examples[0].target, "S:4;14+12");
        assert_eq!(v.examples[1].prompt, "S:123+141=");
        assert_eq!(v.examples[1].target, "S:4;12+14");
        assert_eq!(v.examples[0].kind, TaskKind::Slow);
    }

    #[test]
    fn slow_with_malformed_twin_step_is_rejected() {
        let t = TemplateSet::compact();
        let m = Scripted::new(&[
            ("S:141+123=", "S:4;14+12"),
            // Twin step unscripted -> gibberish.
            ("F:14+12=", "26"),
        ]);
        let v = filter_slow(&m, &problem("141", "123", false), &t);
        assert!(!v.accepted);
        assert_eq!(v.reason, FilterReason::Malformed);
        assert!(matches!(v.candidates, Candidates::Slow([Some(_), None])));
    }

    #[test]
    fn slow_guess_disagreement_is_rejected() {
        let t = TemplateSet::compact();
        let m = Scripted::new(&[
            ("S:141+123=", "S:4;14+12"),
            ("S:123+141=", "S:4;12+14"),
            ("F:14+12=", "26"),
            ("F:12+14=", "27"),
        ]);
        let v = filter_slow(&m, &problem("141", "123", false), &t);
        assert!(!v.accepted);
        assert_eq!(v.reason, FilterReason::Disagree);
    }

    #[test]
    fn filter_decisions_are_symmetric_under_swap() {
        let t = TemplateSet::compact();
        let profile = SimProfile {
            fast_accuracy: AccuracyCurve::Constant { p: 0.7 },
            slow_step_accuracy: AccuracyCurve::Constant { p: 0.9 },
            corruption: CorruptionModel::DigitSubstitute,
            seed: 21,
        };
        let m = SimModel::new(profile, t.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for len in 2..=8 {
            for _ in 0..20 {
                let p = sample_problem(len, &mut rng);
                let a = filter_fast(&m, &p, &t, 5);
                let b = filter_fast(&m, &p.twin(), &t, 5);
                assert_eq!(a.accepted, b.accepted);
                assert_eq!(a.reason, b.reason);
                let a = filter_slow(&m, &p, &t);
                let b = filter_slow(&m, &p.twin(), &t);
                assert_eq!(a.accepted, b.accepted);
                assert_eq!(a.reason, b.reason);
            }
        }
    }

    #[test]
    fn ledger_counts_poison_and_false_discards() {
        let t = TemplateSet::compact();
        let m = SimModel::perfect(t.clone(), 0);
        let mut ledger = ErrorLedger::new();
        let p = problem("714", "263", false);

        let v = filter_fast(&m, &p, &t, 5);
        ledger.update(&v, &GoldTruth::Fast(oracle_add(&p)));
        let cell = ledger.cell(3, TaskKind::Fast);
        assert_eq!(cell.generated, 2);
        assert_eq!(cell.accepted, 2);
        assert_eq!(cell.accepted_wrong, 0);

        // Same verdict graded against a falsified truth: accepted-wrong.
        ledger.update(&v, &GoldTruth::Fast(Digits::parse("978").unwrap()));
        assert_eq!(ledger.cell(3, TaskKind::Fast).accepted_wrong, 2);

        // A rejected verdict whose candidate was actually right counts as a
        // false discard on the correct side only.
        let m = Scripted::new(&[
            ("S:71+26=", "S:7;7+2"),
            ("F:7+2=", "9"),
            ("S:26+71=", "S:7;2+7"),
            ("F:2+7=", "8"),
        ]);
        let p2 = problem("71", "26", false);
        let v = filter_fast(&m, &p2, &t, 5);
        ledger.update(&v, &GoldTruth::Fast(oracle_add(&p2)));
        let cell = ledger.cell(2, TaskKind::Fast);
        assert_eq!(cell.rejected, 2);
        assert_eq!(cell.rejected_correct, 1);
    }

    #[test]
    fn ledger_slow_examples_graded_per_orientation() {
        let t = TemplateSet::compact();
        let p = problem("141", "123", false);
        // p-side step is correct, twin-side step has a wrong residual but
        // the same one-step guess, so the pair is accepted and exactly one
        // stored orientation is poison.
        let m = Scripted::new(&[
            ("S:141+123=", "S:4;14+12"),
            ("S:123+141=", "S:4;13+14"),
            ("F:14+12=", "26"),
            ("F:13+14=", "26"),
        ]);
        let v = filter_slow(&m, &p, &t);
        assert!(v.accepted);
        let mut ledger = ErrorLedger::new();
        let truth = GoldTruth::Slow([
            decompose_step(&p).unwrap(),
            decompose_step(&p.twin()).unwrap(),
        ]);
        ledger.update(&v, &truth);
        let cell = ledger.cell(3, TaskKind::Slow);
        assert_eq!(cell.accepted, 2);
        assert_eq!(cell.accepted_wrong, 1);
    }

    #[test]
    fn report_reproduces_the_two_in_ten_thousand_scale() {
        let mut ledger = ErrorLedger::new();
        let t = TemplateSet::compact();
        let m = SimModel::perfect(t.clone(), 0);
        let p = problem("56", "49", false);
        let good = filter_fast(&m, &p, &t, 5);
        let truth = GoldTruth::Fast(oracle_add(&p));
        let wrong_truth = GoldTruth::Fast(Digits::parse("999").unwrap());
        // 5,000 verdicts = 10,000 accepted examples, one graded wrong =
        // 2 wrong orientations.
        for i in 0..5000 {
            if i == 0 {
                ledger.update(&good, &wrong_truth);
            } else {
                ledger.update(&good, &truth);
            }
        }
        let rows = ledger.report();
        let row = rows
            .iter()
            .find(|r| r.length == 2 && r.kind == TaskKind::Fast)
            .unwrap();
        assert_eq!(row.accepted, 10_000);
        assert_eq!(row.accepted_wrong, 2);
        assert!((row.poison_rate - 2e-4).abs() < 1e-12);
    }

    #[test]
    fn ledger_serde_round_trip() {
        let mut ledger = ErrorLedger::new();
        let t = TemplateSet::compact();
        let m = SimModel::perfect(t.clone(), 0);
        let p = problem("56", "49", true);
        let v = filter_fast(&m, &p, &t, 5);
        ledger.update(&v, &GoldTruth::Fast(oracle_add(&p)));
        let json = serde_json::to_string(&ledger).unwrap();
        let back: ErrorLedger = serde_json::from_str(&json).unwrap();
        assert_eq!(ledger, back);
    }
}
