//! Textual grammar for fast and slow addition tasks: rendering gold examples
//! and parsing model output back into structured form.
//!
//! Two template styles are registered. `compact` is the default for training:
//! short delimiter-based strings keep sequences small for a tiny model.
//! `paper-english` spells each slow step out as full sentences. Prompts of
//! both styles begin with a reserved kind byte (`F` or `S`) so the model
//! always knows which behavior is being asked for.
//!
//! Parsing never fails with an exception; malformed model output is an
//! ordinary value (`None`).

use serde::{Deserialize, Serialize};

use crate::error::ArithError;
use crate::oracle::{decompose_step, oracle_add, DecompositionStep, Digits, Problem};

/// Which of the two task behaviors an example exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// State the full sum outright.
    Fast,
    /// Emit one decomposition step: a digit and a shorter residual problem.
    Slow,
}

/// Where a training example's target came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    /// Rendered from ground-truth arithmetic.
    #[serde(rename = "oracle")]
    Oracle,
    /// Generated by the model itself and accepted by the consistency filters.
    #[serde(rename = "self")]
    SelfGenerated,
}

/// One prompt/target record, the unit of training and evaluation data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub kind: TaskKind,
    pub prompt: String,
    pub target: String,
    /// Operand digit count of the underlying problem.
    pub length: usize,
    pub source: Source,
    /// Self-training round that produced it; 0 for supervised data.
    pub iteration: u32,
}

impl TaskExample {
    pub fn with_provenance(mut self, source: Source, iteration: u32) -> TaskExample {
        self.source = source;
        self.iteration = iteration;
        self
    }
}

/// Delimiters of the compact style. All fields must be nonempty, contain no
/// decimal digits, and the two prefixes must differ in their first byte.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompactDelims {
    pub fast_prefix: String,
    pub slow_prefix: String,
    pub plus: String,
    /// The carry term; rendered as `plus` followed by this.
    pub one: String,
    pub equals: String,
    /// Separates the emitted digit from the residual in slow targets.
    pub sep: String,
}

impl Default for CompactDelims {
    fn default() -> CompactDelims {
        CompactDelims {
            fast_prefix: "F:".into(),
            slow_prefix: "S:".into(),
            plus: "+".into(),
            one: "1".into(),
            equals: "=".into(),
            sep: ";".into(),
        }
    }
}

impl CompactDelims {
    pub fn validate(&self) -> Result<(), String> {
        for (name, s) in [
            ("fast_prefix", &self.fast_prefix),
            ("slow_prefix", &self.slow_prefix),
            ("plus", &self.plus),
            ("equals", &self.equals),
            ("sep", &self.sep),
        ] {
            if s.is_empty() {
                return Err(format!("compact delimiter {name} is empty"));
            }
            if s.bytes().any(|b| b.is_ascii_digit()) {
                return Err(format!("compact delimiter {name} contains a digit"));
            }
        }
        if self.one.is_empty() {
            return Err("compact delimiter one is empty".into());
        }
        if self.fast_prefix.as_bytes()[0] == self.slow_prefix.as_bytes()[0] {
            return Err("fast and slow prefixes share a first byte".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Style {
    Compact(CompactDelims),
    PaperEnglish,
}

/// A named pair of fast/slow templates with render and parse both ways.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    name: String,
    style: Style,
}

impl TemplateSet {
    pub fn compact() -> TemplateSet {
        TemplateSet {
            name: "compact".into(),
            style: Style::Compact(CompactDelims::default()),
        }
    }

    pub fn compact_with(delims: CompactDelims) -> TemplateSet {
        TemplateSet {
            name: "compact".into(),
            style: Style::Compact(delims),
        }
    }

    pub fn paper_english() -> TemplateSet {
        TemplateSet {
            name: "paper-english".into(),
            style: Style::PaperEnglish,
        }
    }

    pub fn by_name(name: &str) -> Option<TemplateSet> {
        match name {
            "compact" => Some(TemplateSet::compact()),
            "paper-english" => Some(TemplateSet::paper_english()),
            _ => None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The prompt asking for a direct answer.
    pub fn fast_prompt(&self, p: &Problem) -> String {
        match &self.style {
            Style::Compact(d) => {
                let mut s = String::with_capacity(2 * p.len() + 8);
                s.push_str(&d.fast_prefix);
                compact_problem_body(&mut s, p, d);
                s.push_str(&d.equals);
                s
            }
            Style::PaperEnglish => english_prompt('F', p),
        }
    }

    /// The prompt asking for one decomposition step.
    pub fn slow_prompt(&self, p: &Problem) -> String {
        match &self.style {
            Style::Compact(d) => {
                let mut s = String::with_capacity(2 * p.len() + 8);
                s.push_str(&d.slow_prefix);
                compact_problem_body(&mut s, p, d);
                s.push_str(&d.equals);
                s
            }
            Style::PaperEnglish => english_prompt('S', p),
        }
    }

    /// Renders a fast example. The answer may be any digit string: model
    /// guesses get stored as-is, and only oracle-sourced renders are required
    /// to carry the true sum.
    pub fn render_fast(&self, p: &Problem, answer: &Digits) -> TaskExample {
        let target = self.fast_target_raw(answer.as_str());
        TaskExample {
            kind: TaskKind::Fast,
            prompt: self.fast_prompt(p),
            target,
            length: p.len(),
            source: Source::Oracle,
            iteration: 0,
        }
    }

    /// Renders a slow example from a problem and its decomposition step.
    /// Refuses length-1 problems, which have no step.
    pub fn render_slow(
        &self,
        p: &Problem,
        step: &DecompositionStep,
    ) -> Result<TaskExample, ArithError> {
        if p.len() < 2 {
            return Err(ArithError::DecomposeLengthOne);
        }
        let target = self.slow_target_raw(
            p,
            step.emitted_digit,
            step.residual.a().as_str(),
            step.residual.b().as_str(),
            step.carry_out,
        );
        Ok(TaskExample {
            kind: TaskKind::Slow,
            prompt: self.slow_prompt(p),
            target,
            length: p.len(),
            source: Source::Oracle,
            iteration: 0,
        })
    }

    /// Parses a fast target. `None` means malformed; callers treat that as a
    /// normal event, never an error.
    pub fn parse_fast(&self, text: &str) -> Option<Digits> {
        match &self.style {
            Style::Compact(_) => Digits::parse(text).ok(),
            Style::PaperEnglish => {
                let mut c = Cursor::new(text);
                c.lit(" A: ")?;
                let d = c.digits()?;
                c.lit(".")?;
                c.end()?;
                Digits::parse(d).ok()
            }
        }
    }

    /// Parses a slow target into a step. `None` means malformed, including
    /// any internal inconsistency of the rendered arithmetic.
    pub fn parse_slow(&self, text: &str) -> Option<DecompositionStep> {
        match &self.style {
            Style::Compact(d) => {
                let mut c = Cursor::new(text);
                c.lit(&d.slow_prefix)?;
                let emitted = c.digit()?;
                c.lit(&d.sep)?;
                let (residual, _) = parse_compact_problem(&mut c, d)?;
                c.end()?;
                Some(DecompositionStep {
                    emitted_digit: emitted,
                    carry_out: residual.plus_one(),
                    residual,
                })
            }
            Style::PaperEnglish => {
                let mut c = Cursor::new(text);
                c.lit(" A: The first number's last digit is ")?;
                let la = c.digit()?;
                c.lit(". The second number's last digit is ")?;
                let lb = c.digit()?;
                c.lit(". ")?;
                if c.digit()? != la {
                    return None;
                }
                c.lit(" + ")?;
                if c.digit()? != lb {
                    return None;
                }
                let carry_in = c.lit(" + 1").is_some();
                c.lit(" = ")?;
                let col: u8 = c.digits()?.parse().ok().filter(|v| *v <= 19)?;
                if col != la + lb + u8::from(carry_in) {
                    return None;
                }
                c.lit(". The last digit of this sum is ")?;
                let emitted = c.digit()?;
                if emitted != col % 10 {
                    return None;
                }
                c.lit(" so our initial partial answer is ")?;
                if c.digit()? != emitted {
                    return None;
                }
                c.lit(". We can now recursively solve a smaller problem. Removing the last digit from each number we have ")?;
                let ra = c.digits()?;
                c.lit(" and ")?;
                let rb = c.digits()?;
                c.lit(". The next subproblem is ")?;
                if c.digits()? != ra {
                    return None;
                }
                c.lit(" + ")?;
                if c.digits()? != rb {
                    return None;
                }
                let carry_out = c.lit(" + 1").is_some();
                if carry_out != (col >= 10) {
                    return None;
                }
                c.lit(".")?;
                c.end()?;
                let residual = Problem::new(
                    Digits::parse(ra).ok()?,
                    Digits::parse(rb).ok()?,
                    carry_out,
                )
                .ok()?;
                Some(DecompositionStep {
                    emitted_digit: emitted,
                    carry_out,
                    residual,
                })
            }
        }
    }

    /// Recovers the kind and problem from a prompt; `None` for anything that
    /// is not an exact prompt of this template.
    pub fn parse_prompt(&self, text: &str) -> Option<(TaskKind, Problem)> {
        match &self.style {
            Style::Compact(d) => {
                let mut c = Cursor::new(text);
                let kind = if c.lit(&d.fast_prefix).is_some() {
                    TaskKind::Fast
                } else {
                    c = Cursor::new(text);
                    c.lit(&d.slow_prefix)?;
                    TaskKind::Slow
                };
                let (p, _) = parse_compact_problem(&mut c, d)?;
                c.lit(&d.equals)?;
                c.end()?;
                Some((kind, p))
            }
            Style::PaperEnglish => {
                let mut c = Cursor::new(text);
                let kind = if c.lit("F").is_some() {
                    TaskKind::Fast
                } else {
                    c = Cursor::new(text);
                    c.lit("S")?;
                    TaskKind::Slow
                };
                c.lit(":Q: ")?;
                let a = c.digits()?;
                c.lit(" + ")?;
                let b = c.digits()?;
                let plus_one = c.lit(" + 1").is_some();
                c.lit(" = ?")?;
                c.end()?;
                let p =
                    Problem::new(Digits::parse(a).ok()?, Digits::parse(b).ok()?, plus_one).ok()?;
                Some((kind, p))
            }
        }
    }

    /// True when an oracle-sourced example's target is what the oracle would
    /// render for its prompt. Used by dataset audits.
    pub fn verify_oracle_example(&self, ex: &TaskExample) -> bool {
        let Some((kind, p)) = self.parse_prompt(&ex.prompt) else {
            return false;
        };
        if kind != ex.kind || p.len() != ex.length {
            return false;
        }
        match kind {
            TaskKind::Fast => self.render_fast(&p, &oracle_add(&p)).target == ex.target,
            TaskKind::Slow => match decompose_step(&p) {
                Ok(step) => match self.render_slow(&p, &step) {
                    Ok(gold) => gold.target == ex.target,
                    Err(_) => false,
                },
                Err(_) => false,
            },
        }
    }

    /// Generation budget (in tokens) that always fits a fast answer for this
    /// operand length, end-of-sequence included.
    pub fn fast_answer_budget(&self, length: usize) -> usize {
        match &self.style {
            // Sum has at most length + 1 digits.
            Style::Compact(_) => length + 3,
            // " A: {sum}."
            Style::PaperEnglish => length + 8,
        }
    }

    /// Generation budget that always fits a slow step for this operand
    /// length.
    pub fn slow_step_budget(&self, length: usize) -> usize {
        match &self.style {
            Style::Compact(d) => {
                d.slow_prefix.len()
                    + 1
                    + d.sep.len()
                    + 2 * length.saturating_sub(1)
                    + 2 * d.plus.len()
                    + d.one.len()
                    + 3
            }
            Style::PaperEnglish => self.max_example_bytes(length).1 + 4,
        }
    }

    /// Fast target text around a raw answer string. Unlike [`render_fast`]
    /// this accepts non-canonical digit strings, which the simulated
    /// learner's corruptions can produce.
    ///
    /// [`render_fast`]: TemplateSet::render_fast
    pub(crate) fn fast_target_raw(&self, answer: &str) -> String {
        match &self.style {
            Style::Compact(_) => answer.to_owned(),
            Style::PaperEnglish => format!(" A: {answer}."),
        }
    }

    /// Slow target text from raw parts. The parent problem supplies the
    /// last-column restatement of the english style; the residual operand
    /// strings and carry flag are taken as given, canonical or not.
    pub(crate) fn slow_target_raw(
        &self,
        parent: &Problem,
        emitted: u8,
        ra: &str,
        rb: &str,
        carry_out: bool,
    ) -> String {
        match &self.style {
            Style::Compact(d) => {
                let mut s = String::with_capacity(ra.len() + rb.len() + 8);
                s.push_str(&d.slow_prefix);
                s.push((b'0' + emitted) as char);
                s.push_str(&d.sep);
                s.push_str(ra);
                s.push_str(&d.plus);
                s.push_str(rb);
                if carry_out {
                    s.push_str(&d.plus);
                    s.push_str(&d.one);
                }
                s
            }
            Style::PaperEnglish => {
                let la = parent.a().last_digit_value();
                let lb = parent.b().last_digit_value();
                let col = la + lb + u8::from(parent.plus_one());
                let carry_in = if parent.plus_one() { " + 1" } else { "" };
                let carry = if carry_out { " + 1" } else { "" };
                format!(
                    " A: The first number's last digit is {la}. The second number's \
                     last digit is {lb}. {la} + {lb}{carry_in} = {col}. The last digit \
                     of this sum is {emitted} so our initial partial answer is \
                     {emitted}. We can now recursively solve a smaller problem. \
                     Removing the last digit from each number we have {ra} and {rb}. \
                     The next subproblem is {ra} + {rb}{carry}."
                )
            }
        }
    }

    /// Worst-case (prompt bytes, target bytes) over both kinds at one operand
    /// length, for sequence-length budgeting.
    pub fn max_example_bytes(&self, length: usize) -> (usize, usize) {
        let nines = Digits::parse(&"9".repeat(length)).unwrap();
        let p = Problem::new(nines.clone(), nines, true).unwrap();
        let fast = self.render_fast(&p, &oracle_add(&p));
        let mut worst_prompt = fast.prompt.len();
        let mut worst_target = fast.target.len();
        if length >= 2 {
            let slow = self.render_slow(&p, &decompose_step(&p).unwrap()).unwrap();
            worst_prompt = worst_prompt.max(slow.prompt.len());
            worst_target = worst_target.max(slow.target.len());
        }
        (worst_prompt, worst_target)
    }
}

fn english_prompt(prefix: char, p: &Problem) -> String {
    let carry = if p.plus_one() { " + 1" } else { "" };
    format!("{prefix}:Q: {} + {}{carry} = ?", p.a(), p.b())
}

fn compact_problem_body(out: &mut String, p: &Problem, d: &CompactDelims) {
    out.push_str(p.a().as_str());
    out.push_str(&d.plus);
    out.push_str(p.b().as_str());
    if p.plus_one() {
        out.push_str(&d.plus);
        out.push_str(&d.one);
    }
}

/// Parses `a+b` or `a+b+1` under the given delimiters. Returns the problem
/// and whether the carry term was present.
fn parse_compact_problem(c: &mut Cursor<'_>, d: &CompactDelims) -> Option<(Problem, bool)> {
    let a = c.digits()?;
    c.lit(&d.plus)?;
    let b = c.digits()?;
    let mut probe = *c;
    let plus_one = probe.lit(&d.plus).is_some() && probe.lit(&d.one).is_some();
    if plus_one {
        *c = probe;
    }
    let p = Problem::new(Digits::parse(a).ok()?, Digits::parse(b).ok()?, plus_one).ok()?;
    Some((p, plus_one))
}

/// Anchored left-to-right matcher over a string slice.
#[derive(Clone, Copy)]
struct Cursor<'a> {
    s: &'a str,
}

impl<'a> Cursor<'a> {
    fn new(s: &'a str) -> Cursor<'a> {
        Cursor { s }
    }

    fn lit(&mut self, l: &str) -> Option<()> {
        self.s = self.s.strip_prefix(l)?;
        Some(())
    }

    /// A nonempty maximal run of ASCII digits.
    fn digits(&mut self) -> Option<&'a str> {
        let n = self.s.bytes().take_while(u8::is_ascii_digit).count();
        if n == 0 {
            return None;
        }
        let (run, rest) = self.s.split_at(n);
        self.s = rest;
        Some(run)
    }

    /// Exactly one ASCII digit (the next byte must not extend the run).
    fn digit(&mut self) -> Option<u8> {
        let b = self.s.as_bytes();
        if b.is_empty() || !b[0].is_ascii_digit() || b.get(1).is_some_and(u8::is_ascii_digit) {
            return None;
        }
        self.s = &self.s[1..];
        Some(b[0] - b'0')
    }

    fn end(&self) -> Option<()> {
        self.s.is_empty().then_some(())
    }
}
