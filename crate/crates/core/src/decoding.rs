//! Decoding strategies over any [`CompletionModel`]: direct answering, full
//! least-to-most chaining, and simplify-then-guess with majority voting.
//!
//! Everything here runs at temperature 0. Malformed model output is an
//! ordinary value, never an error: a failed chain is `None`, a vote without
//! a strict majority is a tie.

use std::collections::HashMap;

use serde::Serialize;

use crate::model::CompletionModel;
use crate::oracle::{DecompositionStep, Digits, Problem};
use crate::taskfmt::TemplateSet;

/// One slow-step interaction within a chain.
#[derive(Clone, Debug, Serialize)]
pub struct ChainStep {
    pub prompt: String,
    pub raw_output: String,
    /// `None` when the output did not parse as a step.
    pub parsed: Option<DecompositionStep>,
}

/// Full record of a chained decode, serializable into the metrics log for
/// debugging.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ChainTrace {
    pub steps: Vec<ChainStep>,
    /// Emitted digits in final-answer order; k valid steps yield exactly k
    /// digits, each new digit prepended.
    pub suffix: String,
    /// Reconstructed final answer, when the strategy produced one.
    pub final_answer: Option<Digits>,
}

/// Outcome of a simplify-then-guess vote.
#[derive(Clone, Debug, Serialize)]
pub struct VoteResult {
    /// One guess per completed simplification depth, in depth order. Depths
    /// whose fast guess was malformed are skipped.
    pub guesses: Vec<Digits>,
    /// Strict-majority value of the guesses; `None` is the tie marker.
    pub decision: Option<Digits>,
    pub k_max: usize,
}

/// One greedy completion of the fast prompt, parsed. `None` is malformed.
pub fn fast_answer<M: CompletionModel + ?Sized>(
    m: &M,
    p: &Problem,
    t: &TemplateSet,
) -> Option<Digits> {
    let prompt = t.fast_prompt(p);
    let out = m
        .complete(&prompt, t.fast_answer_budget(p.len()), 0.0)
        .ok()?;
    t.parse_fast(&out)
}

/// Chains slow steps down to a 1-digit residual, answers that directly, and
/// rebuilds the sum. Any malformed step or terminal answer fails the whole
/// chain; a single wrong step silently corrupts the result, which is the
/// fragility simplify-then-guess exists to absorb.
pub fn least_to_most<M: CompletionModel + ?Sized>(
    m: &M,
    p: &Problem,
    t: &TemplateSet,
) -> (Option<Digits>, ChainTrace) {
    let mut trace = ChainTrace::default();
    let mut current = p.clone();
    while current.len() > 1 {
        match run_slow_step(m, &current, t, &mut trace) {
            Some(step) => current = step.residual,
            None => return (None, trace),
        }
    }
    let answer = fast_answer(m, &current, t).and_then(|terminal| {
        Digits::parse(&format!("{terminal}{}", trace.suffix)).ok()
    });
    trace.final_answer = answer.clone();
    (answer, trace)
}

/// Applies up to `min(k, N-1)` slow steps; after each one, guesses the full
/// answer by fast-adding the current residual and appending the accumulated
/// suffix. The decision is the strict-majority guess. A malformed slow step
/// aborts deeper guesses but keeps the earlier ones; a malformed fast answer
/// skips just that depth's guess. Length-1 problems bypass to a direct
/// answer.
pub fn simplify_then_guess<M: CompletionModel + ?Sized>(
    m: &M,
    p: &Problem,
    t: &TemplateSet,
    k: usize,
) -> (VoteResult, ChainTrace) {
    assert!(k >= 1, "vote depth must be at least 1");
    let mut trace = ChainTrace::default();
    if p.len() == 1 {
        let answer = fast_answer(m, p, t);
        trace.final_answer = answer.clone();
        let vote = VoteResult {
            guesses: answer.clone().into_iter().collect(),
            decision: answer,
            k_max: 0,
        };
        return (vote, trace);
    }
    let k_max = k.min(p.len() - 1);
    let mut guesses = Vec::with_capacity(k_max);
    let mut current = p.clone();
    for _ in 0..k_max {
        match run_slow_step(m, &current, t, &mut trace) {
            Some(step) => current = step.residual,
            None => break,
        }
        if let Some(front) = fast_answer(m, &current, t) {
            if let Ok(full) = Digits::parse(&format!("{front}{}", trace.suffix)) {
                guesses.push(full);
            }
        }
    }
    let decision = strict_majority(&guesses);
    trace.final_answer = decision.clone();
    let vote = VoteResult {
        guesses,
        decision,
        k_max,
    };
    (vote, trace)
}

fn run_slow_step<M: CompletionModel + ?Sized>(
    m: &M,
    current: &Problem,
    t: &TemplateSet,
    trace: &mut ChainTrace,
) -> Option<DecompositionStep> {
    let prompt = t.slow_prompt(current);
    let raw_output = m
        .complete(&prompt, t.slow_step_budget(current.len()), 0.0)
        .unwrap_or_default();
    let parsed = t.parse_slow(&raw_output);
    trace.steps.push(ChainStep {
        prompt,
        raw_output,
        parsed: parsed.clone(),
    });
    let step = parsed?;
    trace
        .suffix
        .insert(0, (b'0' + step.emitted_digit) as char);
    Some(step)
}

/// The value held by more than half the guesses, if any.
fn strict_majority(guesses: &[Digits]) -> Option<Digits> {
    let mut counts: HashMap<&Digits, usize> = HashMap::new();
    for g in guesses {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .find(|(_, c)| 2 * c > guesses.len())
        .map(|(g, _)| g.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{oracle_add, sample_problem};
    use crate::simlab::SimModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn problem(a: &str, b: &str, plus_one: bool) -> Problem {
        Problem::new(
            Digits::parse(a).unwrap(),
            Digits::parse(b).unwrap(),
            plus_one,
        )
        .unwrap()
    }

    fn digits(s: &str) -> Digits {
        Digits::parse(s).unwrap()
    }

    /// Replays canned responses; anything unknown gets gibberish back.
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
            max_new_tokens: usize,
            _temperature: f32,
        ) -> Result<String, crate::error::LearnerError> {
            let mut out = self.0.get(prompt).cloned().unwrap_or_else(|| "?".into());
            out.truncate(max_new_tokens);
            Ok(out)
        }

        fn train_batch(
            &mut self,
            _batch: &[(String, String)],
        ) -> Result<f32, crate::error::LearnerError> {
            unimplemented!("scripted model never trains")
        }
    }

    #[test]
    fn fast_answer_on_the_perfect_model() {
        let t = TemplateSet::compact();
        let m = SimModel::perfect(t.clone(), 0);
        assert_eq!(
            fast_answer(&m, &problem("167", "708", false), &t),
            Some(digits("875"))
        );
        // Same state, same problem, same output.
        assert_eq!(
            fast_answer(&m, &problem("167", "708", false), &t),
            Some(digits("875"))
        );
    }

    #[test]
    fn fast_answer_malformed_on_non_digit_output() {
        let t = TemplateSet::compact();
        let m = Scripted::new(&[("F:12+34=", "forty-six")]);
        assert_eq!(fast_answer(&m, &problem("12", "34", false), &t), None);
    }

    #[test]
    fn least_to_most_matches_oracle_on_perfect_model() {
        let t = TemplateSet::compact();
        let m = SimModel::perfect(t.clone(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in 1..=20 {
            let p = sample_problem(len, &mut rng);
            let (answer, trace) = least_to_most(&m, &p, &t);
            assert_eq!(answer, Some(oracle_add(&p)));
            assert_eq!(trace.steps.len(), len.saturating_sub(1));
            assert_eq!(trace.suffix.len(), len.saturating_sub(1));
        }
    }

    #[test]
    fn two_digit_problem_is_one_step_then_terminal() {
        let t = TemplateSet::compact();
        let m = SimModel::perfect(t.clone(), 0);
        let (answer, trace) = least_to_most(&m, &problem("56", "49", true), &t);
        assert_eq!(answer, Some(digits("106")));
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.suffix, "6");
    }

    #[test]
    fn wrong_first_step_corrupts_the_chain() {
        let t = TemplateSet::compact();
        // True chain for 141+123: step "S:4;14+12", terminal 14+12 -> 26.
        // Script a wrong first step (digit 5) and keep everything else right.
        let m = Scripted::new(&[
            ("S:141+123=", "S:5;14+12"),
            ("S:14+12=", "S:6;1+1"),
            ("F:1+1=", "2"),
        ]);
        let (answer, _) = least_to_most(&m, &problem("141", "123", false), &t);
        assert_eq!(answer, Some(digits("265")));
        assert_ne!(answer, Some(digits("264")));
    }

    #[test]
    fn malformed_step_fails_the_chain() {
        let t = TemplateSet::compact();
        let m = Scripted::new(&[("S:141+123=", "S:4;14+12")]);
        // Second step (S:14+12=) is not scripted, so the model returns
        // gibberish and the chain fails.
        let (answer, trace) = least_to_most(&m, &problem("141", "123", false), &t);
        assert_eq!(answer, None);
        assert_eq!(trace.steps.len(), 2);
        assert!(trace.steps[1].parsed.is_none());
        assert_eq!(trace.suffix, "4");
    }

    #[test]
    fn stg_perfect_model_guesses_agree() {
        let t = TemplateSet::compact();
        let m = SimModel::perfect(t.clone(), 0);
        let p = problem("167", "708", false);
        let (vote, trace) = simplify_then_guess(&m, &p, &t, 5);
        assert_eq!(vote.k_max, 2);
        assert_eq!(vote.guesses, vec![digits("875"), digits("875")]);
        assert_eq!(vote.decision, Some(digits("875")));
        assert_eq!(trace.suffix, "75");
    }

    #[test]
    fn stg_two_way_split_is_a_tie() {
        let t = TemplateSet::compact();
        // 141+123: depth-1 guess fast(14+12)="25" (faulty) -> 254;
        // depth-2 guess fast(1+1)="2" -> 264.
        let m = Scripted::new(&[
            ("S:141+123=", "S:4;14+12"),
            ("F:14+12=", "25"),
            ("S:14+12=", "S:6;1+1"),
            ("F:1+1=", "2"),
        ]);
        let (vote, _) = simplify_then_guess(&m, &problem("141", "123", false), &t, 5);
        assert_eq!(vote.guesses, vec![digits("254"), digits("264")]);
        assert_eq!(vote.decision, None);
    }

    #[test]
    fn stg_majority_survives_one_bad_guess() {
        let t = TemplateSet::compact();
        let m = SimModel::perfect(t.clone(), 0);
        let p = problem("5386", "2919", false);
        let (mut vote, _) = simplify_then_guess(&m, &p, &t, 5);
        assert_eq!(vote.k_max, 3);
        // All three guesses agree on the truth; breaking one still leaves a
        // strict majority.
        vote.guesses[0] = digits("8300");
        assert_eq!(strict_majority(&vote.guesses), Some(oracle_add(&p)));
    }

    #[test]
    fn stg_malformed_slow_keeps_earlier_guesses() {
        let t = TemplateSet::compact();
        let m = Scripted::new(&[
            ("S:5386+2919=", "S:5;538+291"),
            ("F:538+291=", "829"),
            // S:538+291= unscripted -> chain aborts at depth 2.
        ]);
        let (vote, trace) = simplify_then_guess(&m, &problem("5386", "2919", false), &t, 5);
        assert_eq!(vote.guesses, vec![digits("8295")]);
        assert_eq!(vote.k_max, 3);
        assert_eq!(trace.steps.len(), 2);
        assert_eq!(vote.decision, Some(digits("8295")));
    }

    #[test]
    fn stg_malformed_fast_skips_that_guess() {
        let t = TemplateSet::compact();
        let m = Scripted::new(&[
            ("S:5386+2919=", "S:5;538+291"),
            // F:538+291= unscripted -> depth-1 guess skipped.
            ("S:538+291=", "S:0;53+29+1"),
            ("F:53+29+1=", "83"),
            ("S:53+29+1=", "S:3;5+2+1"),
            ("F:5+2+1=", "8"),
        ]);
        let (vote, _) = simplify_then_guess(&m, &problem("5386", "2919", false), &t, 5);
        assert_eq!(vote.guesses, vec![digits("8305"), digits("8305")]);
        assert_eq!(vote.decision, Some(digits("8305")));
    }

    #[test]
    fn stg_length_one_bypasses_to_fast() {
        let t = TemplateSet::compact();
        let m = SimModel::perfect(t.clone(), 0);
        let (vote, _) = simplify_then_guess(&m, &problem("7", "8", true), &t, 5);
        assert_eq!(vote.k_max, 0);
        assert_eq!(vote.decision, Some(digits("16")));
    }

    #[test]
    fn stg_call_budget_is_bounded() {
        use std::cell::Cell;

        struct Counting<'a> {
            inner: SimModel,
            slow: &'a Cell<usize>,
            fast: &'a Cell<usize>,
        }

        impl CompletionModel for Counting<'_> {
            fn complete(
                &self,
                prompt: &str,
                max_new_tokens: usize,
                temperature: f32,
            ) -> Result<String, crate::error::LearnerError> {
                if prompt.starts_with('S') {
                    self.slow.set(self.slow.get() + 1);
                } else {
                    self.fast.set(self.fast.get() + 1);
                }
                self.inner.complete(prompt, max_new_tokens, temperature)
            }

            fn train_batch(
                &mut self,
                _batch: &[(String, String)],
            ) -> Result<f32, crate::error::LearnerError> {
                unreachable!()
            }
        }

        let t = TemplateSet::compact();
        let slow = Cell::new(0);
        let fast = Cell::new(0);
        let m = Counting {
            inner: SimModel::perfect(t.clone(), 0),
            slow: &slow,
            fast: &fast,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for len in 2..=12 {
            let p = sample_problem(len, &mut rng);
            slow.set(0);
            fast.set(0);
            simplify_then_guess(&m, &p, &t, 5);
            let bound = 5.min(len - 1);
            assert!(slow.get() <= bound, "len {len}: {} slow calls", slow.get());
            assert!(fast.get() <= bound, "len {len}: {} fast calls", fast.get());
        }
    }

    #[test]
    fn guess_prefix_property() {
        let t = TemplateSet::compact();
        let m = SimModel::perfect(t.clone(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for len in 2..=16 {
            let p = sample_problem(len, &mut rng);
            let truth = oracle_add(&p);
            let (vote, trace) = simplify_then_guess(&m, &p, &t, 5);
            for (depth, guess) in vote.guesses.iter().enumerate() {
                let k = depth + 1;
                let s = guess.as_str();
                assert_eq!(&s[s.len() - k..], &trace.suffix[trace.suffix.len() - k..]);
                let truth_s = truth.as_str();
                assert_eq!(&s[s.len() - k..], &truth_s[truth_s.len() - k..]);
            }
        }
    }

    #[test]
    fn strict_majority_rules() {
        let d = |s: &str| digits(s);
        assert_eq!(strict_majority(&[]), None);
        assert_eq!(strict_majority(&[d("1")]), Some(d("1")));
        assert_eq!(strict_majority(&[d("1"), d("2")]), None);
        assert_eq!(strict_majority(&[d("1"), d("2"), d("1")]), Some(d("1")));
        assert_eq!(strict_majority(&[d("1"), d("2"), d("3"), d("1")]), None);
        assert_eq!(
            strict_majority(&[d("9"), d("9"), d("9"), d("1"), d("2")]),
            Some(d("9"))
        );
    }
}
