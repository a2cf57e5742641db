//! Dirac-canary DP-SGD simulator and the Rényi-DP accountant used to calibrate it.
//!
//! Every element is a canary whose gradient is the clipping radius in one coordinate
//! and zero elsewhere. Bit `+1` includes the canary, bit `-1` replaces it with the zero
//! vector. The adversary sees each step's noisy gradient sum.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audit::{run_adaptive, run_one_run, GuessVector, Guesser, PairVector, SecretBits};
use crate::error::{Error, Result};
use crate::guessers::{dpsgd_sort, AdaptiveMl, CountLossSource, GroupLayout, MlGuesser, LossModel, MlRule, VisitOrder};
use crate::mechanisms::{Element, Output, Sampler};
use crate::num::{log_sum_exp, Real};
use crate::stats::AuditCounts;

/// How an element's score is read off the observed sums.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Sum over all steps of the element's coordinate.
    #[default]
    Sum,
    /// The element's coordinate at one step.
    Step(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpSgdConfig {
    pub n: usize,
    pub d: usize,
    pub steps: usize,
    pub q: f64,
    pub sigma: f64,
    pub clip: f64,
    pub eta: f64,
    #[serde(default)]
    pub score: ScoreMode,
}

impl Default for DpSgdConfig {
    fn default() -> Self {
        Self { n: 1000, d: 1000, steps: 100, q: 0.1, sigma: 1.0, clip: 1.0, eta: 1.0, score: ScoreMode::Sum }
    }
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("sigma", self.sigma), ("clip", self.clip), ("eta", self.eta)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("{name} must be finite and > 0, got {v}")));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Config(format!("sample rate must lie in (0, 1], got {}", self.q)));
        }
        if self.n == 0 || self.d == 0 || self.steps == 0 {
            return Err(Error::Config("n, d and steps must be >= 1".into()));
        }
        if let ScoreMode::Step(t) = self.score {
            if t >= self.steps {
                return Err(Error::Config(format!("score step {t} out of range for {} steps", self.steps)));
            }
        }
        Ok(())
    }

    /// Elements per coordinate when `n > d`, else 1.
    pub fn per_coordinate(&self) -> usize {
        self.n.div_ceil(self.d)
    }
}

/// Coordinate of each canary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CanaryAssignment {
    coord: Vec<usize>,
    d: usize,
}

impl CanaryAssignment {
    pub fn coord(&self, i: usize) -> usize {
        self.coord[i]
    }

    pub fn coords(&self) -> &[usize] {
        &self.coord
    }

    pub fn n(&self) -> usize {
        self.coord.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn layout(&self) -> Result<GroupLayout> {
        GroupLayout::from_groups(self.coord.clone())
    }
}

/// Round-robin assignment: element `i` goes to coordinate `i mod d`.
pub fn assign_canaries(n: usize, d: usize) -> Result<CanaryAssignment> {
    if n == 0 || d == 0 {
        return Err(Error::Config("n and d must be >= 1".into()));
    }
    if n > d && n % d != 0 {
        return Err(Error::Config(format!("n = {n} must be a multiple of d = {d} when n > d")));
    }
    Ok(CanaryAssignment { coord: (0..n).map(|i| i % d).collect(), d })
}

/// Per-step noisy gradient sums, `steps x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedSums {
    pub sums: Vec<Vec<f64>>,
}

fn simulate_included<R: Rng + ?Sized>(
    config: &DpSgdConfig,
    included: &[bool],
    assignment: &CanaryAssignment,
    rng: &mut R,
) -> Result<ObservedSums> {
    config.validate()?;
    if included.len() != assignment.n() {
        return Err(Error::Config(format!("{} bits for {} canaries", included.len(), assignment.n())));
    }
    let noise = Normal::new(0.0, config.sigma * config.clip).map_err(|e| Error::Config(e.to_string()))?;
    let sums = (0..config.steps)
        .map(|_| {
            let mut row: Vec<f64> = (0..assignment.d()).map(|_| noise.sample(rng)).collect();
            for (i, &inc) in included.iter().enumerate() {
                if inc && (config.q >= 1.0 || rng.random::<f64>() < config.q) {
                    row[assignment.coord(i)] += config.clip;
                }
            }
            row
        })
        .collect();
    Ok(ObservedSums { sums })
}

/// Runs `steps` noisy steps with Poisson sampling at rate `q`.
pub fn simulate<R: Rng + ?Sized>(
    config: &DpSgdConfig,
    bits: &SecretBits,
    assignment: &CanaryAssignment,
    rng: &mut R,
) -> Result<ObservedSums> {
    let included: Vec<bool> = bits.0.iter().map(|&s| s > 0).collect();
    simulate_included(config, &included, assignment, rng)
}

/// Score of each canary from the sums at its coordinate.
pub fn element_scores(sums: &ObservedSums, assignment: &CanaryAssignment, mode: ScoreMode) -> Result<Vec<f64>> {
    if sums.sums.iter().any(|row| row.len() != assignment.d()) {
        return Err(Error::Config("observed sums do not match the model dimension".into()));
    }
    let per_coord: Vec<f64> = match mode {
        ScoreMode::Sum => (0..assignment.d()).map(|c| sums.sums.iter().map(|row| row[c]).sum()).collect(),
        ScoreMode::Step(t) => sums
            .sums
            .get(t)
            .ok_or_else(|| Error::Config(format!("step {t} out of range")))?
            .clone(),
    };
    Ok(assignment.coords().iter().map(|&c| per_coord[c]).collect())
}

/// DP-SGD on a `{0, 1}` canary dataset as a sampler. The output is the `steps x d`
/// sums, row-major and divided by the clipping radius.
#[derive(Clone, Debug)]
pub struct DpSgdMechanism {
    config: DpSgdConfig,
    assignment: CanaryAssignment,
}

impl DpSgdMechanism {
    pub fn new(config: DpSgdConfig) -> Result<Self> {
        config.validate()?;
        let assignment = assign_canaries(config.n, config.d)?;
        Ok(Self { config, assignment })
    }

    pub fn config(&self) -> &DpSgdConfig {
        &self.config
    }

    pub fn assignment(&self) -> &CanaryAssignment {
        &self.assignment
    }

    /// Splits a flattened output back into per-step rows in gradient units.
    pub fn observed(&self, output: &Output) -> Result<ObservedSums> {
        let flat = output.as_reals().ok_or(Error::UndefinedOutput)?;
        let d = self.assignment.d();
        if flat.len() != self.config.steps * d {
            return Err(Error::Domain(format!("expected {} sums, got {}", self.config.steps * d, flat.len())));
        }
        Ok(ObservedSums { sums: flat.chunks(d).map(|r| r.iter().map(|x| x * self.config.clip).collect()).collect() })
    }
}

impl Sampler for DpSgdMechanism {
    fn check_arity(&self, n: usize) -> Result<()> {
        if n != self.config.n {
            return Err(Error::Config(format!("expected {} canaries, got {n}", self.config.n)));
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, data: &[Element], rng: &mut R) -> Result<Output> {
        self.check_arity(data.len())?;
        if let Some(x) = data.iter().find(|&&x| x != 0 && x != 1) {
            return Err(Error::Domain(format!("expected elements in {{0, 1}}, found {x}")));
        }
        let included: Vec<bool> = data.iter().map(|&x| x == 1).collect();
        let obs = simulate_included(&self.config, &included, &self.assignment, rng)?;
        Ok(Output::Reals(obs.sums.into_iter().flatten().map(|x| x / self.config.clip).collect()))
    }
}

/// Sorting guesser over DP-SGD outputs.
#[derive(Clone, Debug)]
pub struct DpSgdSortGuesser {
    mech: DpSgdMechanism,
    k: usize,
}

impl DpSgdSortGuesser {
    pub fn new(mech: DpSgdMechanism, k: usize) -> Self {
        Self { mech, k }
    }
}

impl Guesser for DpSgdSortGuesser {
    fn guess(&self, output: &Output) -> Result<GuessVector> {
        let sums = self.mech.observed(output)?;
        let scores = element_scores(&sums, &self.mech.assignment, self.mech.config.score)?;
        dpsgd_sort(&scores, self.k)
    }
}

/// One-run audit of the simulator with the sorting guesser taking `k` guesses.
pub fn dpsgd_audit<R: Rng + ?Sized>(config: &DpSgdConfig, k: usize, rng: &mut R) -> Result<AuditCounts> {
    let mech = DpSgdMechanism::new(config.clone())?;
    let guesser = DpSgdSortGuesser::new(mech.clone(), k);
    run_one_run(&mech, &PairVector::binary(config.n)?, &guesser, rng)
}

/// Single-step, full-batch audit with maximum-likelihood guessers on each coordinate's
/// noisy count. Adaptive guessing conditions on the bits revealed so far.
pub fn single_step_audit<R: Rng + ?Sized>(
    config: &DpSgdConfig,
    tau: f64,
    adaptive: bool,
    rng: &mut R,
) -> Result<AuditCounts> {
    if config.steps != 1 || config.q != 1.0 {
        return Err(Error::Config("single-step audits need steps = 1 and q = 1".into()));
    }
    let mech = DpSgdMechanism::new(config.clone())?;
    let source = CountLossSource::new(mech.assignment.layout()?, Some(config.sigma))?;
    let z = PairVector::binary(config.n)?;
    if adaptive {
        let mut g = AdaptiveMl::new(source, tau, VisitOrder::Reverse.indices(config.n))?;
        run_adaptive(&mech, &z, &mut g, rng)
    } else {
        let g = MlGuesser::new(LossModel::Counts(source), MlRule::Threshold(tau));
        run_one_run(&mech, &z, &g, rng)
    }
}

/// Adaptive single-step audit.
pub fn single_step_aora<R: Rng + ?Sized>(config: &DpSgdConfig, tau: f64, rng: &mut R) -> Result<AuditCounts> {
    single_step_audit(config, tau, true, rng)
}

/// Integer Rényi orders searched by the accountant.
pub const RDP_ORDERS: std::ops::RangeInclusive<u32> = 2..=64;

/// RDP of one Poisson-subsampled Gaussian step at integer order `alpha`:
/// `ln(sum_k C(a,k) (1-q)^(a-k) q^k exp((k^2 - k) / (2 sigma^2))) / (a - 1)`.
pub fn rdp_subsampled_gaussian<T: Real>(q: T, sigma: T, alpha: u32) -> T {
    let a = alpha as u64;
    let two_var = T::lit(2.0) * sigma * sigma;
    let ln_q = q.ln();
    let ln_1q = (T::one() - q).ln();
    let terms: Vec<T> = (0..=a)
        .map(|k| {
            let kk = T::count(k);
            let rest = if k == a { T::zero() } else { T::count(a - k) * ln_1q };
            T::ln_choose(a, k) + rest + kk * ln_q + (kk * kk - kk) / two_var
        })
        .collect();
    log_sum_exp(&terms) / T::count(a - 1)
}

/// RDP-to-(ε, δ) conversion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conversion {
    /// `rdp + ln(1/δ) / (α - 1)`.
    Classic,
    /// `rdp + ln((α - 1)/α) - (ln δ + ln α) / (α - 1)`.
    #[default]
    Improved,
}

impl Conversion {
    fn apply<T: Real>(self, rdp: T, delta: T, alpha: u32) -> T {
        let a = T::count(alpha as u64);
        let am1 = a - T::one();
        match self {
            Conversion::Classic => rdp - delta.ln() / am1,
            Conversion::Improved => rdp + (am1 / a).ln() - (delta.ln() + a.ln()) / am1,
        }
    }
}

/// ε after `steps` compositions, minimized over [`RDP_ORDERS`].
pub fn rdp_epsilon<T: Real>(sigma: T, q: T, steps: u64, delta: T, conversion: Conversion) -> T {
    RDP_ORDERS
        .map(|a| conversion.apply(rdp_subsampled_gaussian(q, sigma, a) * T::count(steps), delta, a))
        .fold(T::infinity(), T::min)
        .max(T::zero())
}

/// Smallest noise multiplier whose ε at `delta` is at most `eps`.
pub fn rdp_noise_scale<T: Real>(eps: T, delta: T, steps: u64, q: T, conversion: Conversion) -> Result<T> {
    if !(eps > T::zero()) || !eps.is_finite() {
        return Err(Error::Config(format!("eps must be finite and > 0, got {eps}")));
    }
    if !(delta > T::zero() && delta < T::one()) {
        return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(q > T::zero() && q <= T::one()) {
        return Err(Error::Config(format!("q must lie in (0, 1], got {q}")));
    }
    if steps == 0 {
        return Err(Error::Config("steps must be >= 1".into()));
    }
    let eps_at = |s: T| rdp_epsilon(s, q, steps, delta, conversion);
    let (mut lo, mut hi) = (T::lit(1e-3), T::lit(1e3));
    if eps_at(hi) > eps {
        return Err(Error::Calibration(format!("no sigma <= 1000 reaches eps = {eps}")));
    }
    if eps_at(lo) <= eps {
        return Ok(lo);
    }
    let tol = T::lit(1e-9).max(T::resolution() * T::lit(16.0));
    for _ in 0..200 {
        if hi - lo <= tol * hi {
            break;
        }
        let mid = (lo + hi) / T::lit(2.0);
        if eps_at(mid) <= eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
