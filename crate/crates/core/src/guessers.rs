//! Guesser constructors: maximum likelihood with top-k or threshold abstention,
//! coordinate sorting for DP-SGD, and adaptive maximum likelihood.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audit::{AdaptiveGuesser, Bit, GuessVector, Guesser, IdentityGuesser, PairVector};
use crate::error::{Error, Result};
use crate::loss::{count_loss, gaussian_mixture_loss_signed, JointTable, LossTable, MAX_ENUMERATION_N};
use crate::mechanisms::{fmt_param, Mechanism, Output, Params};
use crate::num::{ExtendedReal, Real};

/// The likelier bit under a loss: positive favours -1, negative +1, and 0 maps to -1.
pub fn ml_sign<T: Real>(loss: ExtendedReal<T>) -> Bit {
    if loss.value() < T::zero() {
        1
    } else {
        -1
    }
}

/// Guess at the `k` indices of largest `|loss|`, ties to the lowest index.
pub fn ml_topk<T: Real>(losses: &[ExtendedReal<T>], k: usize) -> Result<GuessVector> {
    let n = losses.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("top-k needs 1 <= k <= n, got k = {k}, n = {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[b].abs().cmp(&losses[a].abs()).then(a.cmp(&b)));
    let mut guesses = vec![0; n];
    for &i in &order[..k] {
        guesses[i] = ml_sign(losses[i]);
    }
    Ok(GuessVector(guesses))
}

/// Guess exactly where `|loss| >= tau`.
pub fn ml_threshold<T: Real>(losses: &[ExtendedReal<T>], tau: ExtendedReal<T>) -> Result<GuessVector> {
    if tau.value() < T::zero() {
        return Err(Error::Config(format!("tau must be >= 0, got {tau}")));
    }
    Ok(GuessVector(losses.iter().map(|&l| if l.abs() >= tau { ml_sign(l) } else { 0 }).collect()))
}

/// `+1` for the `k/2` highest scores and `-1` for the `k/2` lowest of the rest.
/// Ties go to the lowest index on both sides.
pub fn dpsgd_sort(scores: &[f64], k: usize) -> Result<GuessVector> {
    let n = scores.len();
    if k % 2 != 0 || k == 0 || k > n {
        return Err(Error::Config(format!("sorting guesser needs an even k in [2, n], got k = {k}, n = {n}")));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Domain(format!("score {i} is NaN")));
    }
    let mut desc: Vec<usize> = (0..n).collect();
    desc.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut guesses = vec![0; n];
    for &i in &desc[..k / 2] {
        guesses[i] = 1;
    }
    let mut asc: Vec<usize> = (0..n).filter(|&i| guesses[i] == 0).collect();
    asc.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    for &i in &asc[..k / 2] {
        guesses[i] = -1;
    }
    Ok(GuessVector(guesses))
}

/// How a maximum-likelihood guesser abstains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MlRule {
    TopK(usize),
    Threshold(f64),
}

impl MlRule {
    pub fn apply(&self, losses: &[ExtendedReal<f64>]) -> Result<GuessVector> {
        match *self {
            MlRule::TopK(k) => ml_topk(losses, k),
            MlRule::Threshold(tau) => {
                let tau = ExtendedReal::new(tau).ok_or_else(|| Error::Config("tau is NaN".into()))?;
                ml_threshold(losses, tau)
            }
        }
    }
}

/// Assignment of elements to disjoint counted groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    group: Vec<usize>,
    sizes: Vec<usize>,
}

impl GroupLayout {
    pub fn from_groups(group: Vec<usize>) -> Result<Self> {
        let count = group.iter().max().map_or(0, |&g| g + 1);
        let mut sizes = vec![0; count];
        for &g in &group {
            sizes[g] += 1;
        }
        if group.is_empty() || sizes.contains(&0) {
            return Err(Error::Config("every group needs at least one element".into()));
        }
        Ok(Self { group, sizes })
    }

    /// Consecutive sets of size `s`; the last may be smaller.
    pub fn consecutive(n: usize, s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::Config("set size must be >= 1".into()));
        }
        Self::from_groups((0..n).map(|i| i / s).collect())
    }

    /// Element `i` counted in group `i mod d`.
    pub fn round_robin(n: usize, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        Self::from_groups((0..n).map(|i| i % d).collect())
    }

    pub fn n(&self) -> usize {
        self.group.len()
    }

    pub fn group_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn group_of(&self, i: usize) -> usize {
        self.group[i]
    }

    pub fn size(&self, g: usize) -> usize {
        self.sizes[g]
    }
}

/// Losses for elements of `{0, 1}` group counts, observed exactly or through
/// `Normal(0, sigma^2)` noise. Bit +1 means the element is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct CountLossSource {
    layout: GroupLayout,
    sigma: Option<f64>,
}

impl CountLossSource {
    pub fn new(layout: GroupLayout, sigma: Option<f64>) -> Result<Self> {
        if let Some(s) = sigma {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("sigma must be finite and > 0, got {s}")));
            }
        }
        Ok(Self { layout, sigma })
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    /// Per-group observed counts.
    pub fn observed(&self, output: &Output) -> Result<Vec<f64>> {
        let obs: Vec<f64> = match output {
            Output::Symbol(c) => vec![*c as f64],
            Output::Ints(v) => v.iter().map(|&c| c as f64).collect(),
            Output::Reals(v) => v.clone(),
            Output::Null => return Err(Error::UndefinedOutput),
        };
        if obs.len() != self.layout.group_count() {
            return Err(Error::Domain(format!(
                "expected {} group counts, got {}",
                self.layout.group_count(),
                obs.len()
            )));
        }
        Ok(obs)
    }

    /// Signed loss of one unrevealed element of a group with `size` unrevealed
    /// elements and residual observation `o`.
    pub fn residual_loss(&self, o: f64, size: usize) -> Result<ExtendedReal<f64>> {
        match self.sigma {
            Some(sigma) => gaussian_mixture_loss_signed(o, size as u64, sigma),
            None => {
                let c = o.round();
                if (o - c).abs() > 1e-9 || c < 0.0 || c > size as f64 {
                    return Err(Error::UndefinedOutput);
                }
                count_loss(size as u64, c as u64)
            }
        }
    }

    pub fn losses(&self, output: &Output) -> Result<Vec<ExtendedReal<f64>>> {
        let obs = self.observed(output)?;
        let per_group = (0..self.layout.group_count())
            .map(|g| self.residual_loss(obs[g], self.layout.size(g)))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..self.layout.n()).map(|i| per_group[self.layout.group_of(i)]).collect())
    }
}

/// Per-index losses for an output.
#[derive(Clone, Debug)]
pub enum LossModel {
    /// Enumerated table for small discrete mechanisms.
    Table(LossTable),
    /// Group counts, exact or noisy.
    Counts(CountLossSource),
    /// Independent randomized response on `{-1, 1}`: loss `-eps * o_i`.
    Lrr { eps: f64 },
    /// Independent `Laplace(2 / eps)` noise on `{-1, 1}`.
    Laplace { eps: f64 },
}

impl LossModel {
    /// The loss model the maximum-likelihood guessers use for `mech` on `z`.
    pub fn for_mechanism(mech: &Mechanism, z: &PairVector) -> Result<Self> {
        let n = z.len();
        match *mech {
            Mechanism::Lrr { eps } if z == &PairVector::signed(n)? => Ok(LossModel::Lrr { eps }),
            Mechanism::LocalLaplace { eps } if z == &PairVector::signed(n)? => Ok(LossModel::Laplace { eps }),
            Mechanism::Count if z == &PairVector::binary(n)? => {
                Ok(LossModel::Counts(CountLossSource::new(GroupLayout::consecutive(n, n)?, None)?))
            }
            Mechanism::Cis { s } if z == &PairVector::binary(n)? => {
                Ok(LossModel::Counts(CountLossSource::new(GroupLayout::consecutive(n, s)?, None)?))
            }
            Mechanism::NoisyCis { s, sigma } if z == &PairVector::binary(n)? => {
                Ok(LossModel::Counts(CountLossSource::new(GroupLayout::consecutive(n, s)?, Some(sigma))?))
            }
            _ if n <= MAX_ENUMERATION_N => Ok(LossModel::Table(LossTable::build(&mech.model()?, z)?)),
            _ => Err(Error::Oversized { n, max: MAX_ENUMERATION_N }),
        }
    }

    pub fn losses(&self, output: &Output) -> Result<Vec<ExtendedReal<f64>>> {
        match self {
            LossModel::Table(t) => t.lookup(output).map(<[_]>::to_vec),
            LossModel::Counts(c) => c.losses(output),
            LossModel::Lrr { eps } => {
                let v = output.as_ints().ok_or(Error::UndefinedOutput)?;
                v.iter()
                    .map(|&o| match o {
                        1 => Ok(ExtendedReal::lit(-eps)),
                        -1 => Ok(ExtendedReal::lit(*eps)),
                        _ => Err(Error::UndefinedOutput),
                    })
                    .collect()
            }
            LossModel::Laplace { eps } => {
                let v = output.as_reals().ok_or(Error::UndefinedOutput)?;
                let rate = eps / 2.0;
                Ok(v.iter().map(|&o| ExtendedReal::lit(rate * ((o - 1.0).abs() - (o + 1.0).abs()))).collect())
            }
        }
    }
}

/// Maximum-likelihood guesser.
#[derive(Clone, Debug)]
pub struct MlGuesser {
    model: LossModel,
    rule: MlRule,
}

impl MlGuesser {
    pub fn new(model: LossModel, rule: MlRule) -> Self {
        Self { model, rule }
    }
}

impl Guesser for MlGuesser {
    fn guess(&self, output: &Output) -> Result<GuessVector> {
        self.rule.apply(&self.model.losses(output)?)
    }
}

/// Sorting guesser applied to a real-valued output with one score per element.
#[derive(Clone, Copy, Debug)]
pub struct SortGuesser {
    k: usize,
}

impl SortGuesser {
    pub fn new(k: usize) -> Self {
        Self { k }
    }
}

impl Guesser for SortGuesser {
    fn guess(&self, output: &Output) -> Result<GuessVector> {
        let scores: Vec<f64> = match output {
            Output::Reals(v) => v.clone(),
            Output::Ints(v) => v.iter().map(|&x| x as f64).collect(),
            _ => return Err(Error::UndefinedOutput),
        };
        dpsgd_sort(&scores, self.k)
    }
}

/// Losses conditioned on revealed bits, updated one reveal at a time.
pub trait ConditionalLossSource {
    type State;

    fn n(&self) -> usize;
    fn start(&self, output: &Output) -> Result<Self::State>;
    fn loss(&self, state: &Self::State, i: usize) -> Result<ExtendedReal<f64>>;
    fn reveal(&self, state: &mut Self::State, i: usize, bit: Bit);
}

impl ConditionalLossSource for JointTable {
    type State = (Output, Vec<(usize, Bit)>);

    fn n(&self) -> usize {
        JointTable::n(self)
    }

    fn start(&self, output: &Output) -> Result<Self::State> {
        self.output_index(output).ok_or(Error::UndefinedOutput)?;
        Ok((output.clone(), Vec::new()))
    }

    fn loss(&self, state: &Self::State, i: usize) -> Result<ExtendedReal<f64>> {
        self.conditional_loss(i, &state.0, &state.1)
    }

    fn reveal(&self, state: &mut Self::State, i: usize, bit: Bit) {
        state.1.push((i, bit));
    }
}

impl ConditionalLossSource for CountLossSource {
    /// Residual observation and unrevealed size per group.
    type State = (Vec<f64>, Vec<usize>);

    fn n(&self) -> usize {
        self.layout.n()
    }

    fn start(&self, output: &Output) -> Result<Self::State> {
        let sizes = (0..self.layout.group_count()).map(|g| self.layout.size(g)).collect();
        Ok((self.observed(output)?, sizes))
    }

    fn loss(&self, state: &Self::State, i: usize) -> Result<ExtendedReal<f64>> {
        let g = self.layout.group_of(i);
        self.residual_loss(state.0[g], state.1[g])
    }

    fn reveal(&self, state: &mut Self::State, i: usize, bit: Bit) {
        let g = self.layout.group_of(i);
        if bit > 0 {
            state.0[g] -= 1.0;
        }
        state.1[g] -= 1;
    }
}

/// Conditioning is a no-op when output coordinates depend on their own bit only.
#[derive(Clone, Debug)]
pub struct Independent(pub LossModel);

impl ConditionalLossSource for Independent {
    type State = Vec<ExtendedReal<f64>>;

    fn n(&self) -> usize {
        usize::MAX
    }

    fn start(&self, output: &Output) -> Result<Self::State> {
        self.0.losses(output)
    }

    fn loss(&self, state: &Self::State, i: usize) -> Result<ExtendedReal<f64>> {
        state.get(i).copied().ok_or_else(|| Error::Config(format!("index {i} out of range")))
    }

    fn reveal(&self, _: &mut Self::State, _: usize, _: Bit) {}
}

/// Visit order of an adaptive guesser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum VisitOrder {
    #[default]
    Natural,
    Reverse,
}

impl VisitOrder {
    pub fn indices(self, n: usize) -> Vec<usize> {
        match self {
            VisitOrder::Natural => (0..n).collect(),
            VisitOrder::Reverse => (0..n).rev().collect(),
        }
    }
}

/// Adaptive maximum-likelihood guesser: visits every index in order and guesses iff
/// the loss conditioned on the bits revealed so far has `|loss| >= tau`.
///
/// A call with no revealed bits starts a new game.
pub struct AdaptiveMl<S: ConditionalLossSource> {
    source: S,
    tau: ExtendedReal<f64>,
    order: Vec<usize>,
    pos: usize,
    seen: usize,
    state: Option<S::State>,
}

impl<S: ConditionalLossSource> AdaptiveMl<S> {
    pub fn new(source: S, tau: f64, order: Vec<usize>) -> Result<Self> {
        let tau = ExtendedReal::new(tau).filter(|t| t.value() >= 0.0);
        let tau = tau.ok_or_else(|| Error::Config("tau must be >= 0".into()))?;
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || seen[i] {
                return Err(Error::Config("visit order must be a permutation of 0..n".into()));
            }
            seen[i] = true;
        }
        if source.n() != usize::MAX && source.n() != order.len() {
            return Err(Error::Config(format!("order covers {} indices, source has {}", order.len(), source.n())));
        }
        Ok(Self { source, tau, order, pos: 0, seen: 0, state: None })
    }
}

impl<S: ConditionalLossSource> AdaptiveGuesser for AdaptiveMl<S> {
    fn next_guess(&mut self, output: &Output, revealed: &[(usize, Bit)]) -> Result<Option<(usize, Bit)>> {
        if revealed.is_empty() {
            self.state = Some(self.source.start(output)?);
            self.pos = 0;
            self.seen = 0;
        }
        let state = self.state.as_mut().ok_or_else(|| Error::ProtocolViolation("game not started".into()))?;
        for &(i, s) in &revealed[self.seen..] {
            self.source.reveal(state, i, s);
        }
        self.seen = revealed.len();
        let Some(&i) = self.order.get(self.pos) else {
            return Ok(None);
        };
        self.pos += 1;
        let loss = self.source.loss(state, i)?;
        Ok(Some((i, if loss.abs() >= self.tau { ml_sign(loss) } else { 0 })))
    }
}

/// Full-knowledge guess for a parity output over `{0, 1}` pairs: the bit that makes the
/// known bits agree with the released parity. `others[i]` is ignored.
pub fn parity_full_knowledge(i: usize, output: &Output, others: &[Bit]) -> Bit {
    let Output::Symbol(x) = output else { return 0 };
    let rest = others
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != i && s == 1)
        .count() as i64
        % 2;
    if x ^ rest == 1 { 1 } else { -1 }
}

/// Adaptive guesser for XOR-in-pairs: abstains on the first element of each pair, then
/// recovers the second from the revealed first bit and the pair's parity.
#[derive(Clone, Debug, Default)]
pub struct XipGuesser {
    next: usize,
}

impl AdaptiveGuesser for XipGuesser {
    fn next_guess(&mut self, output: &Output, revealed: &[(usize, Bit)]) -> Result<Option<(usize, Bit)>> {
        let parities = output.as_ints().ok_or(Error::UndefinedOutput)?;
        if revealed.is_empty() {
            self.next = 0;
        }
        let i = self.next;
        if i >= 2 * parities.len() {
            return Ok(None);
        }
        self.next += 1;
        if i % 2 == 0 {
            return Ok(Some((i, 0)));
        }
        let &(_, first) = revealed.last().ok_or_else(|| Error::ProtocolViolation("first bit not revealed".into()))?;
        let first = i64::from(first > 0);
        Ok(Some((i, if parities[i / 2] ^ first == 1 { 1 } else { -1 })))
    }
}

/// Text-configurable guesser choice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GuesserSpec {
    MlTopK { k: usize },
    MlThreshold { tau: f64 },
    Identity,
    DpsgdSort { k: usize },
    AdaptiveMl { tau: f64, order: VisitOrder },
    XipAdaptive,
}

impl GuesserSpec {
    pub fn is_adaptive(&self) -> bool {
        matches!(self, GuesserSpec::AdaptiveMl { .. } | GuesserSpec::XipAdaptive)
    }

    /// Non-adaptive guesser for `mech` on `z`.
    pub fn build(&self, mech: &Mechanism, z: &PairVector) -> Result<Box<dyn Guesser>> {
        Ok(match *self {
            GuesserSpec::MlTopK { k } => Box::new(MlGuesser::new(LossModel::for_mechanism(mech, z)?, MlRule::TopK(k))),
            GuesserSpec::MlThreshold { tau } => {
                Box::new(MlGuesser::new(LossModel::for_mechanism(mech, z)?, MlRule::Threshold(tau)))
            }
            GuesserSpec::Identity => Box::new(IdentityGuesser::new(z.clone())),
            GuesserSpec::DpsgdSort { k } => Box::new(SortGuesser::new(k)),
            _ => return Err(Error::Config(format!("{self} is adaptive"))),
        })
    }

    /// Adaptive guesser for `mech` on `z`.
    pub fn build_adaptive(&self, mech: &Mechanism, z: &PairVector) -> Result<Box<dyn AdaptiveGuesser>> {
        let n = z.len();
        match *self {
            GuesserSpec::XipAdaptive => {
                if *mech != Mechanism::Xip || z != &PairVector::binary(n)? {
                    return Err(Error::Unsupported("the XIP guesser needs XIP on {0, 1} pairs".into()));
                }
                Ok(Box::new(XipGuesser::default()))
            }
            GuesserSpec::AdaptiveMl { tau, order } => {
                let order = order.indices(n);
                Ok(match LossModel::for_mechanism(mech, z)? {
                    LossModel::Counts(c) => Box::new(AdaptiveMl::new(c, tau, order)?),
                    m @ (LossModel::Lrr { .. } | LossModel::Laplace { .. }) => {
                        Box::new(AdaptiveMl::new(Independent(m), tau, order)?)
                    }
                    LossModel::Table(_) => Box::new(AdaptiveMl::new(JointTable::build(&mech.model()?, z)?, tau, order)?),
                })
            }
            _ => Err(Error::Config(format!("{self} is not adaptive"))),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            GuesserSpec::MlTopK { k: 0 } => Err(Error::Config("k must be >= 1".into())),
            GuesserSpec::DpsgdSort { k } if k == 0 || k % 2 != 0 => {
                Err(Error::Config(format!("sorting guesser needs an even k >= 2, got {k}")))
            }
            GuesserSpec::MlThreshold { tau } | GuesserSpec::AdaptiveMl { tau, .. } if tau.is_nan() || tau < 0.0 => {
                Err(Error::Config(format!("tau must be >= 0, got {tau}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for GuesserSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            GuesserSpec::MlTopK { k } => write!(f, "ml_topk k={k}"),
            GuesserSpec::MlThreshold { tau } => write!(f, "ml_threshold tau={}", fmt_param(tau)),
            GuesserSpec::Identity => f.write_str("identity"),
            GuesserSpec::DpsgdSort { k } => write!(f, "dpsgd_sort k={k}"),
            GuesserSpec::AdaptiveMl { tau, order } => {
                write!(f, "adaptive_ml tau={}", fmt_param(tau))?;
                if order == VisitOrder::Reverse {
                    f.write_str(" order=reverse")?;
                }
                Ok(())
            }
            GuesserSpec::XipAdaptive => f.write_str("xip_adaptive"),
        }
    }
}

impl FromStr for GuesserSpec {
    type Err = Error;

    /// Parses e.g. `ml_topk k=4`, `ml_threshold tau=inf` or `adaptive_ml tau=1 order=reverse`.
    fn from_str(s: &str) -> Result<Self> {
        let mut tokens = s.split_whitespace();
        let kind = tokens.next().ok_or_else(|| Error::Config("empty guesser spec".into()))?;
        let params = Params::parse(kind, tokens)?;
        let (spec, allowed): (GuesserSpec, &[&str]) = match kind {
            "ml_topk" => (GuesserSpec::MlTopK { k: params.count("k")? }, &["k"]),
            "ml_threshold" => (GuesserSpec::MlThreshold { tau: params.real("tau")? }, &["tau"]),
            "identity" => (GuesserSpec::Identity, &[]),
            "dpsgd_sort" => (GuesserSpec::DpsgdSort { k: params.count("k")? }, &["k"]),
            "adaptive_ml" => {
                let order = match params.word("order") {
                    None | Some("natural") => VisitOrder::Natural,
                    Some("reverse") => VisitOrder::Reverse,
                    Some(other) => return Err(Error::Config(format!("unknown visit order {other:?}"))),
                };
                let tau = params.opt_real("tau")?.unwrap_or(1.0);
                (GuesserSpec::AdaptiveMl { tau, order }, &["tau", "order"])
            }
            "xip_adaptive" => (GuesserSpec::XipAdaptive, &[]),
            other => return Err(Error::Config(format!("unknown guesser {other:?}"))),
        };
        params.reject_unknown(allowed)?;
        spec.validate()?;
        Ok(spec)
    }
}

impl TryFrom<String> for GuesserSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GuesserSpec> for String {
    fn from(g: GuesserSpec) -> String {
        g.to_string()
    }
}
