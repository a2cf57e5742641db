//! Game engines: classic auditing, one-run auditing (ORA), adaptive one-run
//! auditing (AORA), and the invalid full-knowledge variant.
//!
//! Secret bits live in `{-1, +1}`; bit `-1` selects the first element of a pair and
//! `+1` the second. Guesses live in `{-1, 0, +1}` with 0 meaning abstain.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::{Dataset, Element, Output, Sampler};
use crate::num::ExtendedReal;
use crate::stats::{eps_estimation, eps_lower_bound, AuditCounts};

/// One secret bit or one guess.
pub type Bit = i8;

/// Candidate elements `(x_i, y_i)` for every index; `x_i != y_i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairVector {
    pairs: Vec<(Element, Element)>,
}

impl PairVector {
    pub fn new(pairs: Vec<(Element, Element)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("a pair vector needs n >= 1 pairs".into()));
        }
        if let Some(i) = pairs.iter().position(|(x, y)| x == y) {
            return Err(Error::Config(format!("pair {i} has identical elements")));
        }
        Ok(Self { pairs })
    }

    /// `(0, 1)` at every index. Also the include/exclude form: 0 is the zero (absent) element.
    pub fn binary(n: usize) -> Result<Self> {
        Self::new(vec![(0, 1); n])
    }

    /// `(-1, 1)` at every index.
    pub fn signed(n: usize) -> Result<Self> {
        Self::new(vec![(-1, 1); n])
    }

    /// The canonical pair vector for a mechanism's universe.
    pub fn for_universe(signed: bool, n: usize) -> Result<Self> {
        if signed {
            Self::signed(n)
        } else {
            Self::binary(n)
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, i: usize) -> (Element, Element) {
        self.pairs[i]
    }

    pub fn pairs(&self) -> &[(Element, Element)] {
        &self.pairs
    }

    /// Element selected by bit `s` at index `i`.
    pub fn select(&self, i: usize, s: Bit) -> Element {
        let (x, y) = self.pairs[i];
        if s < 0 {
            x
        } else {
            y
        }
    }

    /// The dataset `D_i = x_i if S_i = -1 else y_i`.
    pub fn dataset(&self, bits: &SecretBits) -> Dataset {
        bits.0.iter().enumerate().map(|(i, &s)| self.select(i, s)).collect()
    }

    /// Bit whose element equals `value` at index `i`, if any.
    pub fn bit_of(&self, i: usize, value: Element) -> Option<Bit> {
        let (x, y) = self.pairs[i];
        if value == x {
            Some(-1)
        } else if value == y {
            Some(1)
        } else {
            None
        }
    }
}

/// Uniform secret bits in `{-1, +1}^n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecretBits(pub Vec<Bit>);

impl SecretBits {
    pub fn sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        Self((0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Guesses in `{-1, 0, +1}^n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuessVector(pub Vec<Bit>);

impl GuessVector {
    pub fn abstain(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn taken(&self) -> usize {
        self.0.iter().filter(|&&t| t != 0).count()
    }

    /// `(v, r)` against the true bits.
    pub fn score(&self, bits: &SecretBits) -> Result<AuditCounts> {
        if self.0.len() != bits.0.len() {
            return Err(Error::Config(format!(
                "guesser produced {} guesses for {} secrets",
                self.0.len(),
                bits.0.len()
            )));
        }
        let r = self.taken() as u64;
        let v = self.0.iter().zip(&bits.0).filter(|(t, s)| **t != 0 && t == s).count() as u64;
        AuditCounts::new(v, r)
    }
}

/// Maps an output to a guess vector.
pub trait Guesser: Sync {
    fn guess(&self, output: &Output) -> Result<GuessVector>;
}

impl<F> Guesser for F
where
    F: Fn(&Output) -> Result<GuessVector> + Sync,
{
    fn guess(&self, output: &Output) -> Result<GuessVector> {
        self(output)
    }
}

/// Adaptive guesser: picks the next unvisited index and a guess, seeing the bits of
/// the indices it has already visited. Returning `None` ends the game.
pub trait AdaptiveGuesser {
    fn next_guess(&mut self, output: &Output, revealed: &[(usize, Bit)]) -> Result<Option<(usize, Bit)>>;
}

/// Guesses the pair element each output coordinate equals; `-1` when the output carries
/// no such coordinate (e.g. a null output).
#[derive(Clone, Debug)]
pub struct IdentityGuesser {
    pairs: PairVector,
}

impl IdentityGuesser {
    pub fn new(pairs: PairVector) -> Self {
        Self { pairs }
    }
}

impl Guesser for IdentityGuesser {
    fn guess(&self, output: &Output) -> Result<GuessVector> {
        let n = self.pairs.len();
        let guesses = match output {
            Output::Ints(values) if values.len() == n => values
                .iter()
                .enumerate()
                .map(|(i, &v)| self.pairs.bit_of(i, v).unwrap_or(-1))
                .collect(),
            Output::Reals(values) if values.len() == n => values
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let (x, y) = self.pairs.pair(i);
                    if (v - y as f64).abs() < (v - x as f64).abs() {
                        1
                    } else {
                        -1
                    }
                })
                .collect(),
            _ => vec![-1; n],
        };
        Ok(GuessVector(guesses))
    }
}

/// One-run auditing: sample `S`, run `M(Z(S))`, guess, count.
pub fn run_one_run<M, G, R>(mech: &M, z: &PairVector, guesser: &G, rng: &mut R) -> Result<AuditCounts>
where
    M: Sampler + ?Sized,
    G: Guesser + ?Sized,
    R: Rng + ?Sized,
{
    mech.check_arity(z.len())?;
    let bits = SecretBits::sample(z.len(), rng);
    let output = mech.sample(&z.dataset(&bits), rng)?;
    let guesses = guesser.guess(&output)?;
    guesses.score(&bits)
}

/// Classic auditing: `rounds` independent runs, each swapping entry `j` of the base
/// dataset for `x` (bit -1) or `y` (bit +1) and taking one scalar guess.
#[allow(clippy::too_many_arguments)]
pub fn run_classic<M, G, R>(
    mech: &M,
    base: &[Element],
    j: usize,
    x: Element,
    y: Element,
    guesser: G,
    rounds: usize,
    rng: &mut R,
) -> Result<AuditCounts>
where
    M: Sampler + ?Sized,
    G: Fn(&Output) -> Bit,
    R: Rng + ?Sized,
{
    if rounds == 0 {
        return Err(Error::Config("classic auditing needs at least one round".into()));
    }
    if j >= base.len() {
        return Err(Error::Config(format!("index {j} out of range for n = {}", base.len())));
    }
    if x == y {
        return Err(Error::Config("classic auditing needs x != y".into()));
    }
    mech.check_arity(base.len())?;
    let mut data = base.to_vec();
    let (mut v, mut r) = (0u64, 0u64);
    for _ in 0..rounds {
        let s: Bit = if rng.random::<bool>() { 1 } else { -1 };
        data[j] = if s < 0 { x } else { y };
        let output = mech.sample(&data, rng)?;
        let t = guesser(&output);
        if t != 0 {
            r += 1;
            if t == s {
                v += 1;
            }
        }
    }
    AuditCounts::new(v, r)
}

/// Adaptive one-run auditing. After each committed guess (abstentions included) the
/// true bit of the visited index is revealed to the guesser.
pub fn run_adaptive<M, G, R>(mech: &M, z: &PairVector, guesser: &mut G, rng: &mut R) -> Result<AuditCounts>
where
    M: Sampler + ?Sized,
    G: AdaptiveGuesser + ?Sized,
    R: Rng + ?Sized,
{
    mech.check_arity(z.len())?;
    let n = z.len();
    let bits = SecretBits::sample(n, rng);
    let output = mech.sample(&z.dataset(&bits), rng)?;
    let mut visited = vec![false; n];
    let mut revealed: Vec<(usize, Bit)> = Vec::with_capacity(n);
    let (mut v, mut r) = (0u64, 0u64);
    while revealed.len() < n {
        let Some((idx, t)) = guesser.next_guess(&output, &revealed)? else {
            break;
        };
        if idx >= n {
            return Err(Error::ProtocolViolation(format!("index {idx} out of range")));
        }
        if visited[idx] {
            return Err(Error::ProtocolViolation(format!("index {idx} visited twice")));
        }
        if !(-1..=1).contains(&t) {
            return Err(Error::ProtocolViolation(format!("guess {t} is not in {{-1, 0, 1}}")));
        }
        visited[idx] = true;
        if t != 0 {
            r += 1;
            if t == bits.0[idx] {
                v += 1;
            }
        }
        revealed.push((idx, bits.0[idx]));
    }
    AuditCounts::new(v, r)
}

/// Full-knowledge ORA. The guess for index `i` sees the output and every true bit except
/// `S_i` (passed with position `i` zeroed). Not a valid auditor; exists to show why.
pub fn run_full_knowledge<M, G, R>(mech: &M, z: &PairVector, guesser: G, rng: &mut R) -> Result<AuditCounts>
where
    M: Sampler + ?Sized,
    G: Fn(usize, &Output, &[Bit]) -> Bit,
    R: Rng + ?Sized,
{
    mech.check_arity(z.len())?;
    let bits = SecretBits::sample(z.len(), rng);
    let output = mech.sample(&z.dataset(&bits), rng)?;
    let mut others = bits.0.clone();
    let mut guesses = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let own = others[i];
        others[i] = 0;
        guesses.push(guesser(i, &output, &others));
        others[i] = own;
    }
    GuessVector(guesses).score(&bits)
}

/// Estimation and bound for one audit outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditReport {
    pub estimation: ExtendedReal<f64>,
    pub bound: ExtendedReal<f64>,
}

pub fn audit_report(counts: AuditCounts, beta: f64) -> Result<AuditReport> {
    Ok(AuditReport { estimation: eps_estimation(counts), bound: eps_lower_bound(counts, beta)? })
}
