//! The audited algorithms.
//!
//! Every mechanism can be sampled. The discrete ones also expose their exact
//! conditional output distribution through [`DiscreteModel`], which is what the
//! brute-force loss and efficacy oracles enumerate.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::ExtendedReal;
use crate::stats::logistic;

/// A universe element. Toys use `{0, 1}` or `{-1, 1}`.
pub type Element = i64;

/// An ordered dataset of `n >= 1` elements.
pub type Dataset = Vec<Element>;

/// One draw of a mechanism.
#[derive(Clone, Debug)]
pub enum Output {
    /// The distinguished "nothing released" symbol.
    Null,
    Symbol(i64),
    Ints(Vec<i64>),
    Reals(Vec<f64>),
}

impl PartialEq for Output {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Output::Null, Output::Null) => true,
            (Output::Symbol(a), Output::Symbol(b)) => a == b,
            (Output::Ints(a), Output::Ints(b)) => a == b,
            (Output::Reals(a), Output::Reals(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

impl Eq for Output {}

impl Hash for Output {
    fn hash<H: Hasher>(&self, state: &mut H) {
        std::mem::discriminant(self).hash(state);
        match self {
            Output::Null => {}
            Output::Symbol(x) => x.hash(state),
            Output::Ints(v) => v.hash(state),
            Output::Reals(v) => v.iter().for_each(|x| x.to_bits().hash(state)),
        }
    }
}

impl Output {
    pub fn as_ints(&self) -> Option<&[i64]> {
        match self {
            Output::Ints(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_reals(&self) -> Option<&[f64]> {
        match self {
            Output::Reals(v) => Some(v),
            _ => None,
        }
    }
}

/// Anything the game engines can run on a dataset.
pub trait Sampler: Sync {
    /// Rejects dataset sizes the mechanism is not defined for.
    fn check_arity(&self, n: usize) -> Result<()>;

    /// One draw of `M(d)`.
    fn sample<R: Rng + ?Sized>(&self, d: &[Element], rng: &mut R) -> Result<Output>;
}

/// Exact conditional output distribution of a discrete mechanism.
pub trait DiscreteModel: Sync {
    /// Support of `M(d)` with probabilities. Entries with probability 0 may be omitted.
    fn distribution(&self, d: &[Element]) -> Result<Vec<(Output, f64)>>;

    /// `Pr[M(d) = o]`.
    fn conditional_prob(&self, o: &Output, d: &[Element]) -> Result<f64> {
        Ok(self
            .distribution(d)?
            .into_iter()
            .filter(|(out, _)| out == o)
            .map(|(_, p)| p)
            .sum())
    }
}

/// The built-in mechanisms. Serializes as its text form so infinite parameters survive JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mechanism {
    /// Local randomized response over `{-1, 1}`: each entry kept w.p. `p(eps)`, else negated.
    Lrr { eps: f64 },
    /// Name and shame: outputs one uniformly chosen element.
    Nas,
    /// All or nothing: outputs the dataset w.p. `p`, else null.
    Aon { p: f64 },
    /// Parity of `{0, 1}` bits.
    Xor,
    /// Parity of each consecutive pair (even `n`).
    Xip,
    /// Parity followed by `eps`-randomized response.
    Xrr { eps: f64 },
    /// Number of ones.
    Count,
    /// Number of ones in each consecutive set of size `s` (last set may be smaller).
    Cis { s: usize },
    /// Each entry of a `{-1, 1}` dataset plus `Laplace(2 / eps)` noise.
    LocalLaplace { eps: f64 },
    /// Count-in-sets plus independent `Normal(0, sigma^2)` noise on each set count.
    NoisyCis { s: usize, sigma: f64 },
    /// Always outputs the same symbol.
    Constant,
}

fn keep_prob(eps: f64) -> f64 {
    logistic(ExtendedReal::new(eps).expect("eps is not NaN"))
}

fn check_bits(d: &[Element]) -> Result<()> {
    match d.iter().find(|&&x| x != 0 && x != 1) {
        Some(x) => Err(Error::Domain(format!("expected elements in {{0, 1}}, found {x}"))),
        None => Ok(()),
    }
}

fn check_signs(d: &[Element]) -> Result<()> {
    match d.iter().find(|&&x| x != -1 && x != 1) {
        Some(x) => Err(Error::Domain(format!("expected elements in {{-1, 1}}, found {x}"))),
        None => Ok(()),
    }
}

fn parity(d: &[Element]) -> i64 {
    d.iter().fold(0, |acc, &x| acc ^ x)
}

fn set_counts(d: &[Element], s: usize) -> Vec<i64> {
    d.chunks(s).map(|c| c.iter().sum()).collect()
}

impl Mechanism {
    pub fn id(&self) -> &'static str {
        match self {
            Mechanism::Lrr { .. } => "lrr",
            Mechanism::Nas => "nas",
            Mechanism::Aon { .. } => "aon",
            Mechanism::Xor => "xor",
            Mechanism::Xip => "xip",
            Mechanism::Xrr { .. } => "xrr",
            Mechanism::Count => "count",
            Mechanism::Cis { .. } => "cis",
            Mechanism::LocalLaplace { .. } => "laplace",
            Mechanism::NoisyCis { .. } => "noisy_cis",
            Mechanism::Constant => "constant",
        }
    }

    /// Whether the mechanism's universe is `{-1, 1}` (otherwise `{0, 1}` or arbitrary).
    pub fn signed_universe(&self) -> bool {
        matches!(self, Mechanism::Lrr { .. } | Mechanism::LocalLaplace { .. })
    }

    pub fn validate_params(&self) -> Result<()> {
        match *self {
            Mechanism::Lrr { eps } | Mechanism::Xrr { eps } if eps.is_nan() || eps < 0.0 => {
                Err(Error::Config(format!("eps must be >= 0, got {eps}")))
            }
            Mechanism::LocalLaplace { eps } if eps.is_nan() || eps <= 0.0 || eps.is_infinite() => {
                Err(Error::Config(format!("Laplace eps must be finite and > 0, got {eps}")))
            }
            Mechanism::Aon { p } if !(0.0..=1.0).contains(&p) => {
                Err(Error::Config(format!("AON probability must lie in [0, 1], got {p}")))
            }
            Mechanism::Cis { s } | Mechanism::NoisyCis { s, .. } if s == 0 => {
                Err(Error::Config("set size s must be >= 1".into()))
            }
            Mechanism::NoisyCis { sigma, .. } if sigma.is_nan() || sigma <= 0.0 => {
                Err(Error::Config(format!("sigma must be > 0, got {sigma}")))
            }
            _ => Ok(()),
        }
    }

    /// Exact model for discrete mechanisms.
    pub fn model(&self) -> Result<MechanismModel> {
        self.validate_params()?;
        match self {
            Mechanism::LocalLaplace { .. } | Mechanism::NoisyCis { .. } => Err(Error::Unsupported(
                format!("{} has a continuous output and no enumerable model", self.id()),
            )),
            _ => Ok(MechanismModel { mechanism: self.clone() }),
        }
    }
}

impl Sampler for Mechanism {
    fn check_arity(&self, n: usize) -> Result<()> {
        self.validate_params()?;
        if n == 0 {
            return Err(Error::Config("datasets must have n >= 1".into()));
        }
        if matches!(self, Mechanism::Xip) && n % 2 != 0 {
            return Err(Error::Config(format!("XIP needs an even n, got {n}")));
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, d: &[Element], rng: &mut R) -> Result<Output> {
        self.check_arity(d.len())?;
        let out = match *self {
            Mechanism::Lrr { eps } => {
                check_signs(d)?;
                let keep = keep_prob(eps);
                Output::Ints(d.iter().map(|&x| if rng.random::<f64>() < keep { x } else { -x }).collect())
            }
            Mechanism::Nas => Output::Symbol(d[rng.random_range(0..d.len())]),
            Mechanism::Aon { p } => {
                if rng.random::<f64>() < p {
                    Output::Ints(d.to_vec())
                } else {
                    Output::Null
                }
            }
            Mechanism::Xor => {
                check_bits(d)?;
                Output::Symbol(parity(d))
            }
            Mechanism::Xip => {
                check_bits(d)?;
                Output::Ints(d.chunks(2).map(parity).collect())
            }
            Mechanism::Xrr { eps } => {
                check_bits(d)?;
                let x = parity(d);
                Output::Symbol(if rng.random::<f64>() < keep_prob(eps) { x } else { 1 - x })
            }
            Mechanism::Count => {
                check_bits(d)?;
                Output::Symbol(d.iter().sum())
            }
            Mechanism::Cis { s } => {
                check_bits(d)?;
                Output::Ints(set_counts(d, s))
            }
            Mechanism::LocalLaplace { eps } => {
                check_signs(d)?;
                let exp = Exp::new(eps / 2.0).map_err(|e| Error::Config(e.to_string()))?;
                Output::Reals(
                    d.iter()
                        .map(|&x| {
                            let mag: f64 = exp.sample(rng);
                            let noise = if rng.random::<bool>() { mag } else { -mag };
                            x as f64 + noise
                        })
                        .collect(),
                )
            }
            Mechanism::NoisyCis { s, sigma } => {
                check_bits(d)?;
                let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
                Output::Reals(set_counts(d, s).into_iter().map(|c| c as f64 + normal.sample(rng)).collect())
            }
            Mechanism::Constant => Output::Symbol(0),
        };
        Ok(out)
    }
}

/// Exact distribution handle for a discrete [`Mechanism`].
#[derive(Clone, Debug, PartialEq)]
pub struct MechanismModel {
    mechanism: Mechanism,
}

impl MechanismModel {
    pub fn mechanism(&self) -> &Mechanism {
        &self.mechanism
    }
}

impl DiscreteModel for MechanismModel {
    fn distribution(&self, d: &[Element]) -> Result<Vec<(Output, f64)>> {
        self.mechanism.check_arity(d.len())?;
        let dist = match self.mechanism {
            Mechanism::Lrr { eps } => {
                check_signs(d)?;
                let keep = keep_prob(eps);
                let mut support = vec![(Vec::with_capacity(d.len()), 1.0)];
                for &x in d {
                    let mut next = Vec::with_capacity(support.len() * 2);
                    for (prefix, p) in support {
                        for (value, q) in [(x, keep), (-x, 1.0 - keep)] {
                            if q > 0.0 {
                                let mut out = prefix.clone();
                                out.push(value);
                                next.push((out, p * q));
                            }
                        }
                    }
                    support = next;
                }
                support.into_iter().map(|(o, p)| (Output::Ints(o), p)).collect()
            }
            Mechanism::Nas => {
                let n = d.len() as f64;
                let mut values: Vec<Element> = d.to_vec();
                values.sort_unstable();
                values.dedup();
                values
                    .into_iter()
                    .map(|x| (Output::Symbol(x), d.iter().filter(|&&y| y == x).count() as f64 / n))
                    .collect()
            }
            Mechanism::Aon { p } => {
                let mut dist = Vec::with_capacity(2);
                if p > 0.0 {
                    dist.push((Output::Ints(d.to_vec()), p));
                }
                if p < 1.0 {
                    dist.push((Output::Null, 1.0 - p));
                }
                dist
            }
            Mechanism::Xrr { eps } => {
                check_bits(d)?;
                let x = parity(d);
                let keep = keep_prob(eps);
                [(x, keep), (1 - x, 1.0 - keep)]
                    .into_iter()
                    .filter(|&(_, q)| q > 0.0)
                    .map(|(s, q)| (Output::Symbol(s), q))
                    .collect()
            }
            Mechanism::Xor => {
                check_bits(d)?;
                vec![(Output::Symbol(parity(d)), 1.0)]
            }
            Mechanism::Xip => {
                check_bits(d)?;
                vec![(Output::Ints(d.chunks(2).map(parity).collect()), 1.0)]
            }
            Mechanism::Count => {
                check_bits(d)?;
                vec![(Output::Symbol(d.iter().sum()), 1.0)]
            }
            Mechanism::Cis { s } => {
                check_bits(d)?;
                vec![(Output::Ints(set_counts(d, s)), 1.0)]
            }
            Mechanism::Constant => vec![(Output::Symbol(0), 1.0)],
            Mechanism::LocalLaplace { .. } | Mechanism::NoisyCis { .. } => {
                return Err(Error::Unsupported(format!("{} is continuous", self.mechanism.id())))
            }
        };
        Ok(dist)
    }
}

/// A fully general discrete mechanism over `{0, 1}^n` given as a table of output
/// distributions, one row per dataset (row index = dataset read as a little-endian bit pattern).
#[derive(Clone, Debug, PartialEq)]
pub struct TabularModel {
    n: usize,
    rows: Vec<Vec<f64>>,
}

impl TabularModel {
    pub fn new(n: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != 1usize << n {
            return Err(Error::Config(format!("expected {} rows, got {}", 1usize << n, rows.len())));
        }
        for row in &rows {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config("table rows must be probability vectors".into()));
            }
        }
        Ok(Self { n, rows })
    }

    /// A random mechanism with `alphabet` output symbols; some entries are zeroed so that
    /// infinite losses show up.
    pub fn random<R: Rng + ?Sized>(n: usize, alphabet: usize, rng: &mut R) -> Self {
        let rows = (0..1usize << n)
            .map(|_| {
                let mut row: Vec<f64> = (0..alphabet)
                    .map(|_| if rng.random::<f64>() < 0.15 { 0.0 } else { rng.random::<f64>() })
                    .collect();
                if row.iter().all(|&p| p == 0.0) {
                    row[0] = 1.0;
                }
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= total);
                row
            })
            .collect();
        Self { n, rows }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn row_index(&self, d: &[Element]) -> Result<usize> {
        if d.len() != self.n {
            return Err(Error::Config(format!("table is defined for n = {}, got {}", self.n, d.len())));
        }
        check_bits(d)?;
        Ok(d.iter().enumerate().map(|(i, &b)| (b as usize) << i).sum())
    }
}

impl DiscreteModel for TabularModel {
    fn distribution(&self, d: &[Element]) -> Result<Vec<(Output, f64)>> {
        let row = &self.rows[self.row_index(d)?];
        Ok(row
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(j, &p)| (Output::Symbol(j as i64), p))
            .collect())
    }
}

impl Sampler for TabularModel {
    fn check_arity(&self, n: usize) -> Result<()> {
        if n == self.n {
            Ok(())
        } else {
            Err(Error::Config(format!("table is defined for n = {}, got {n}", self.n)))
        }
    }

    fn sample<R: Rng + ?Sized>(&self, d: &[Element], rng: &mut R) -> Result<Output> {
        let row = &self.rows[self.row_index(d)?];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(Output::Symbol(j as i64));
            }
        }
        let last = row.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        Ok(Output::Symbol(last as i64))
    }
}

pub(crate) fn fmt_param(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{x}")
    }
}

impl fmt::Display for Mechanism {
    /// Plain-text key-value form, e.g. `lrr eps=1` or `cis s=4`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())?;
        match *self {
            Mechanism::Lrr { eps } | Mechanism::Xrr { eps } | Mechanism::LocalLaplace { eps } => {
                write!(f, " eps={}", fmt_param(eps))
            }
            Mechanism::Aon { p } => write!(f, " p={}", fmt_param(p)),
            Mechanism::Cis { s } => write!(f, " s={s}"),
            Mechanism::NoisyCis { s, sigma } => write!(f, " s={s} sigma={}", fmt_param(sigma)),
            _ => Ok(()),
        }
    }
}

/// Parsed `key=value` parameters following an identifier.
pub(crate) struct Params<'a> {
    what: &'a str,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Params<'a> {
    pub(crate) fn parse(what: &'a str, tokens: impl Iterator<Item = &'a str>) -> Result<Self> {
        let pairs = tokens
            .map(|t| {
                t.split_once('=')
                    .ok_or_else(|| Error::Config(format!("{what}: expected key=value, got {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { what, pairs })
    }

    fn raw(&self, key: &str) -> Option<&'a str> {
        self.pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    pub(crate) fn real(&self, key: &str) -> Result<f64> {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("{}: missing parameter {key}", self.what)))?;
        raw.parse::<ExtendedReal<f64>>()
            .map(ExtendedReal::value)
            .map_err(|e| Error::Config(format!("{}: {key}: {e}", self.what)))
    }

    pub(crate) fn opt_real(&self, key: &str) -> Result<Option<f64>> {
        self.raw(key).map(|_| self.real(key)).transpose()
    }

    pub(crate) fn count(&self, key: &str) -> Result<usize> {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("{}: missing parameter {key}", self.what)))?;
        raw.parse::<usize>()
            .map_err(|e| Error::Config(format!("{}: {key}: {e}", self.what)))
    }

    pub(crate) fn word(&self, key: &str) -> Option<&'a str> {
        self.raw(key)
    }

    pub(crate) fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        match self.pairs.iter().find(|(k, _)| !allowed.contains(k)) {
            Some((k, _)) => Err(Error::Config(format!("{}: unknown parameter {k}", self.what))),
            None => Ok(()),
        }
    }
}

impl TryFrom<String> for Mechanism {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mechanism> for String {
    fn from(m: Mechanism) -> String {
        m.to_string()
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut tokens = s.split_whitespace();
        let id = tokens.next().ok_or_else(|| Error::Config("empty mechanism spec".into()))?;
        let params = Params::parse(id, tokens)?;
        let (mech, allowed): (Mechanism, &[&str]) = match id {
            "lrr" | "rr" => (Mechanism::Lrr { eps: params.real("eps")? }, &["eps"]),
            "nas" => (Mechanism::Nas, &[]),
            "aon" => (Mechanism::Aon { p: params.real("p")? }, &["p"]),
            "xor" => (Mechanism::Xor, &[]),
            "xip" => (Mechanism::Xip, &[]),
            "xrr" => (Mechanism::Xrr { eps: params.real("eps")? }, &["eps"]),
            "count" => (Mechanism::Count, &[]),
            "cis" => (Mechanism::Cis { s: params.count("s")? }, &["s"]),
            "laplace" | "local_laplace" => (Mechanism::LocalLaplace { eps: params.real("eps")? }, &["eps"]),
            "noisy_cis" => (
                Mechanism::NoisyCis { s: params.count("s")?, sigma: params.real("sigma")? },
                &["s", "sigma"],
            ),
            "constant" => (Mechanism::Constant, &[]),
            other => return Err(Error::Config(format!("unknown mechanism {other:?}"))),
        };
        params.reject_unknown(allowed)?;
        mech.validate_params()?;
        Ok(mech)
    }
}
