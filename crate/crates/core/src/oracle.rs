//! Exact digit-string arithmetic: ground-truth sums, one-step decomposition,
//! and problem sampling/enumeration.
//!
//! Operands are held as ASCII digit strings so problems of hundreds of digits
//! cost nothing special. This module is the only source of true answers in the
//! whole crate; during self-training phases every call is routed through a
//! [`MeteredOracle`] so the harness can prove it stopped consulting ground
//! truth.

use std::cell::Cell;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::ArithError;

/// A canonical decimal digit string: nonempty, ASCII `0-9`, and no leading
/// zero unless the value is exactly `"0"`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digits(SmallVec<[u8; 32]>);

impl Digits {
    /// Parses and validates a decimal string.
    pub fn parse(s: &str) -> Result<Digits, ArithError> {
        let bytes = s.as_bytes();
        if bytes.is_empty() {
            return Err(ArithError::Empty);
        }
        if !bytes.iter().all(|b| b.is_ascii_digit()) {
            return Err(ArithError::NotDigits(s.to_owned()));
        }
        if bytes.len() > 1 && bytes[0] == b'0' {
            return Err(ArithError::LeadingZero(s.to_owned()));
        }
        Ok(Digits(SmallVec::from_slice(bytes)))
    }

    pub fn from_u64(mut n: u64) -> Digits {
        let mut buf = SmallVec::<[u8; 32]>::new();
        loop {
            buf.push(b'0' + (n % 10) as u8);
            n /= 10;
            if n == 0 {
                break;
            }
        }
        buf.reverse();
        Digits(buf)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_str(&self) -> &str {
        // Only ASCII digits are ever stored.
        std::str::from_utf8(&self.0).unwrap()
    }

    /// Digit values most significant first.
    pub fn digit_values(&self) -> impl DoubleEndedIterator<Item = u8> + '_ {
        self.0.iter().map(|b| b - b'0')
    }

    pub fn last_digit_value(&self) -> u8 {
        *self.0.last().unwrap() - b'0'
    }

    /// The operand with its last digit removed. Errors on 1-digit input,
    /// which would leave nothing.
    pub fn drop_last_digit(&self) -> Result<Digits, ArithError> {
        if self.0.len() < 2 {
            return Err(ArithError::DecomposeLengthOne);
        }
        Ok(Digits(SmallVec::from_slice(&self.0[..self.0.len() - 1])))
    }
}

impl fmt::Display for Digits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for Digits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digits({})", self.as_str())
    }
}

impl Serialize for Digits {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Digits {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Digits, D::Error> {
        let s = String::deserialize(de)?;
        Digits::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// An addition problem `a + b (+ 1)?` over two equal-length operands. The
/// optional carry-in is what makes the recursive decomposition closed: the
/// residual of a problem whose last column overflows is again a `Problem`.
#[derive(Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Problem {
    a: Digits,
    b: Digits,
    plus_one: bool,
}

impl Problem {
    pub fn new(a: Digits, b: Digits, plus_one: bool) -> Result<Problem, ArithError> {
        if a.len() != b.len() {
            return Err(ArithError::LengthMismatch {
                a: a.len(),
                b: b.len(),
            });
        }
        Ok(Problem { a, b, plus_one })
    }

    pub fn a(&self) -> &Digits {
        &self.a
    }

    pub fn b(&self) -> &Digits {
        &self.b
    }

    pub fn plus_one(&self) -> bool {
        self.plus_one
    }

    /// Operand length; both operands share it.
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The commuted problem `b + a` with the same carry-in.
    pub fn twin(&self) -> Problem {
        Problem {
            a: self.b.clone(),
            b: self.a.clone(),
            plus_one: self.plus_one,
        }
    }
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Problem({}+{}{})",
            self.a,
            self.b,
            if self.plus_one { "+1" } else { "" }
        )
    }
}

impl<'de> Deserialize<'de> for Problem {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Problem, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            a: Digits,
            b: Digits,
            plus_one: bool,
        }
        let raw = Raw::deserialize(de)?;
        Problem::new(raw.a, raw.b, raw.plus_one).map_err(serde::de::Error::custom)
    }
}

/// One step of the last-digit-first decomposition of a problem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionStep {
    /// The digit of the final answer produced by this step (the last digit of
    /// the column sum).
    pub emitted_digit: u8,
    /// Whether the column overflowed into the next step.
    pub carry_out: bool,
    /// The remaining problem after removing the last digit of each operand,
    /// with `plus_one` set to `carry_out`.
    pub residual: Problem,
}

/// The exact sum of a problem, computed schoolbook-style over the digit
/// strings.
pub fn oracle_add(p: &Problem) -> Digits {
    let mut out = SmallVec::<[u8; 32]>::with_capacity(p.len() + 1);
    let mut carry = u8::from(p.plus_one);
    let mut ita = p.a.digit_values().rev();
    let mut itb = p.b.digit_values().rev();
    loop {
        match (ita.next(), itb.next()) {
            (Some(da), Some(db)) => {
                let s = da + db + carry;
                out.push(b'0' + s % 10);
                carry = s / 10;
            }
            (None, None) => break,
            // Problem::new guarantees equal lengths.
            _ => unreachable!(),
        }
    }
    if carry > 0 {
        out.push(b'0' + carry);
    }
    out.reverse();
    Digits(out)
}

/// One step of the recursive slow procedure: emit the last digit of the
/// column sum and return the shortened residual problem. Refuses 1-digit
/// problems, which have no residual and must be answered directly.
pub fn decompose_step(p: &Problem) -> Result<DecompositionStep, ArithError> {
    let ra = p.a.drop_last_digit()?;
    let rb = p.b.drop_last_digit()?;
    let s = p.a.last_digit_value() + p.b.last_digit_value() + u8::from(p.plus_one);
    let carry_out = s >= 10;
    Ok(DecompositionStep {
        emitted_digit: s % 10,
        carry_out,
        residual: Problem {
            a: ra,
            b: rb,
            plus_one: carry_out,
        },
    })
}

fn sample_digits<R: Rng + ?Sized>(length: usize, rng: &mut R) -> Digits {
    assert!(length >= 1, "operand length must be at least 1");
    let mut buf = SmallVec::<[u8; 32]>::with_capacity(length);
    // A lone digit may be 0; longer operands must not start with 0.
    let first_lo = if length == 1 { 0 } else { 1 };
    buf.push(b'0' + rng.gen_range(first_lo..=9u8));
    for _ in 1..length {
        buf.push(b'0' + rng.gen_range(0..=9u8));
    }
    Digits(buf)
}

/// A uniform draw from all problems of the given operand length: both
/// operands uniform over `length`-digit numbers (no leading zero), carry-in a
/// fair coin. Draw order is fixed (digits of `a`, digits of `b`, the coin) so
/// a seeded stream is reproducible.
pub fn sample_problem<R: Rng + ?Sized>(length: usize, rng: &mut R) -> Problem {
    let a = sample_digits(length, rng);
    let b = sample_digits(length, rng);
    let plus_one = rng.gen::<bool>();
    Problem { a, b, plus_one }
}

/// How many distinct problems exist at the given operand length, saturating
/// at `u128::MAX` for lengths past 19.
pub fn population_count(length: usize) -> u128 {
    assert!(length >= 1, "operand length must be at least 1");
    if length > 19 {
        return u128::MAX;
    }
    // 10 one-digit operands (0 counts), 9 * 10^(length-1) otherwise; times 2
    // for the carry-in.
    let per_operand = if length == 1 {
        10u128
    } else {
        9u128 * 10u128.pow(length as u32 - 1)
    };
    per_operand
        .checked_mul(per_operand)
        .and_then(|x| x.checked_mul(2))
        .unwrap_or(u128::MAX)
}

/// Iterator over every problem of one operand length in lexicographic order
/// of `(a, b, plus_one)`.
pub struct ProblemEnumeration {
    lo: u64,
    hi: u64,
    a: u64,
    b: u64,
    plus_one: bool,
    done: bool,
}

impl Iterator for ProblemEnumeration {
    type Item = Problem;

    fn next(&mut self) -> Option<Problem> {
        if self.done {
            return None;
        }
        let item = Problem {
            a: Digits::from_u64(self.a),
            b: Digits::from_u64(self.b),
            plus_one: self.plus_one,
        };
        if !self.plus_one {
            self.plus_one = true;
        } else {
            self.plus_one = false;
            if self.b < self.hi {
                self.b += 1;
            } else {
                self.b = self.lo;
                if self.a < self.hi {
                    self.a += 1;
                } else {
                    self.done = true;
                }
            }
        }
        Some(item)
    }
}

/// Enumerates all problems of one operand length, refusing when the
/// population exceeds `budget` (callers should sample instead). Lengths past
/// 19 always refuse; their operands do not fit the enumeration counters.
pub fn enumerate_problems(length: usize, budget: u64) -> Result<ProblemEnumeration, ArithError> {
    let population = population_count(length);
    if population > budget as u128 {
        return Err(ArithError::SampleInstead {
            length,
            population,
            budget,
        });
    }
    // population <= budget fits in u64, so length <= 19 here.
    let lo = if length == 1 {
        0
    } else {
        10u64.pow(length as u32 - 1)
    };
    let hi = 10u64.pow(length as u32) - 1;
    Ok(ProblemEnumeration {
        lo,
        hi,
        a: lo,
        b: lo,
        plus_one: false,
        done: false,
    })
}

/// Counts ground-truth reads so a harness can prove a training phase never
/// consulted the oracle. Shared by reference, hence the interior counter.
#[derive(Debug, Default)]
pub struct MeteredOracle {
    reads: Cell<u64>,
}

impl MeteredOracle {
    pub fn new() -> MeteredOracle {
        MeteredOracle::default()
    }

    /// Restores a meter from a saved count when resuming a run.
    pub fn with_reads(reads: u64) -> MeteredOracle {
        MeteredOracle { reads: Cell::new(reads) }
    }

    pub fn add(&self, p: &Problem) -> Digits {
        self.reads.set(self.reads.get() + 1);
        oracle_add(p)
    }

    pub fn decompose(&self, p: &Problem) -> Result<DecompositionStep, ArithError> {
        self.reads.set(self.reads.get() + 1);
        decompose_step(p)
    }

    pub fn reads(&self) -> u64 {
        self.reads.get()
    }
}
