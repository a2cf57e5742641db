//! Exact efficacy oracles and relaxation levels for enumerable mechanisms, closed
//! forms, and Monte Carlo estimates.

use rand::Rng;
use serde::Serialize;

use crate::audit::{run_adaptive, run_one_run, PairVector};
use crate::error::{Error, Result};
use crate::guessers::GuesserSpec;
use crate::loss::{log_ratio, JointTable, LossTable};
use crate::mechanisms::{DiscreteModel, Mechanism};
use crate::num::{ExtendedReal, Real};
use crate::stats::{logistic, mean_sem};

/// How many guesses the optimal guesser takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    All,
    K(usize),
}

impl Budget {
    fn resolve(self, n: usize) -> Result<usize> {
        match self {
            Budget::All => Ok(n),
            Budget::K(k) if (1..=n).contains(&k) => Ok(k),
            Budget::K(k) => Err(Error::Config(format!("budget k = {k} outside [1, {n}]"))),
        }
    }
}

fn p(l: ExtendedReal<f64>) -> f64 {
    logistic(l.abs())
}

/// Mean of `p(|l|)` over the `k` largest `|l|`.
fn top_k_mean(losses: &[ExtendedReal<f64>], k: usize) -> f64 {
    let mut probs: Vec<f64> = losses.iter().map(|&l| p(l)).collect();
    probs.sort_by(|a, b| b.total_cmp(a));
    probs[..k].iter().sum::<f64>() / k as f64
}

fn expect_top_k(table: &LossTable, k: usize) -> f64 {
    table
        .marginals()
        .iter()
        .enumerate()
        .map(|(o, &w)| w * top_k_mean(table.losses(o), k))
        .sum()
}

/// Efficacy of the maximum-likelihood guesser taking the `k` most confident guesses.
pub fn optimal_efficacy<M: DiscreteModel + ?Sized>(model: &M, z: &PairVector, budget: Budget) -> Result<f64> {
    let k = budget.resolve(z.len())?;
    Ok(expect_top_k(&LossTable::build(model, z)?, k))
}

/// Distributional privacy levels, as logistic-scale probabilities except `ddp` and `dp_level`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RelaxationLevels {
    pub ddp: ExtendedReal<f64>,
    pub ac_ddp: f64,
    pub ae_ac_ddp: f64,
    pub k: usize,
    pub k_ae_ac_ddp: f64,
    /// Pure-DP level of the mechanism restricted to datasets the pair vector spans.
    pub dp_level: ExtendedReal<f64>,
}

impl RelaxationLevels {
    /// Whether `k_ae_ac_ddp <= ac_ddp <= p(ddp) <= p(dp_level)` holds up to `tol`.
    pub fn chain_holds(&self, tol: f64) -> bool {
        let p_ddp: f64 = logistic(self.ddp);
        let p_dp: f64 = logistic(self.dp_level);
        self.k_ae_ac_ddp <= self.ac_ddp + tol && self.ac_ddp <= p_ddp + tol && p_ddp <= p_dp + tol
    }
}

pub fn relaxation_levels<M: DiscreteModel + ?Sized>(model: &M, z: &PairVector, k: usize) -> Result<RelaxationLevels> {
    let n = z.len();
    let k = Budget::K(k).resolve(n)?;
    let joint = JointTable::build(model, z)?;
    let table = joint.loss_table()?;
    let marg = table.marginals();
    let mut ddp = ExtendedReal::zero();
    let mut ac_ddp = 0.0;
    for (o, &w) in marg.iter().enumerate() {
        let worst = table.losses(o).iter().map(|l| l.abs()).max().unwrap_or_default();
        ddp = ddp.max(worst);
        ac_ddp += w * p(worst);
    }
    Ok(RelaxationLevels {
        ddp,
        ac_ddp,
        ae_ac_ddp: expect_top_k(&table, n),
        k,
        k_ae_ac_ddp: expect_top_k(&table, k),
        dp_level: restricted_dp_level(&joint)?,
    })
}

/// Largest output log-ratio between secret patterns differing in one bit.
fn restricted_dp_level(joint: &JointTable) -> Result<ExtendedReal<f64>> {
    let n_out = joint.outputs().len();
    let dense = |m: usize| {
        let mut v = vec![0.0; n_out];
        for &(k, q) in joint.row(m) {
            v[k] = q;
        }
        v
    };
    let mut level = ExtendedReal::zero();
    for m in 0..1usize << joint.n() {
        let a = dense(m);
        for i in 0..joint.n() {
            if m >> i & 1 == 1 {
                continue;
            }
            let b = dense(m | 1 << i);
            for (&x, &y) in a.iter().zip(&b) {
                if x > 0.0 || y > 0.0 {
                    level = level.max(log_ratio(x, y)?.abs());
                }
            }
        }
    }
    Ok(level)
}

/// `1/2 + (1/2n) sum_i TV(M | S_i = -1, M | S_i = +1)`.
pub fn tv_efficacy<M: DiscreteModel + ?Sized>(model: &M, z: &PairVector) -> Result<f64> {
    let joint = JointTable::build(model, z)?;
    let n = joint.n();
    let mut total = 0.0;
    for i in 0..n {
        let (minus, plus) = joint.conditionals(i, &[])?;
        total += 0.5 * minus.iter().zip(&plus).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(0.5 + total / (2.0 * n as f64))
}

/// `E|B - n/2|` for `B ~ Bin(n, 1/2)`.
fn binomial_mad(n: u64) -> f64 {
    let half = n as f64 / 2.0;
    (0..=n)
        .map(|c| {
            let ln_pmf = <f64 as Real>::ln_choose(n, c) - n as f64 * std::f64::consts::LN_2;
            ln_pmf.exp() * (c as f64 - half).abs()
        })
        .sum()
}

/// Optimal all-guess efficacy from the closed forms. `n` is the dataset size.
pub fn closed_form_efficacy(mech: &Mechanism, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    mech.validate_params()?;
    Ok(match *mech {
        Mechanism::Aon { p } => 0.5 + p / 2.0,
        Mechanism::Xor if n == 1 => 1.0,
        Mechanism::Xor | Mechanism::Constant => 0.5,
        Mechanism::Xrr { .. } if n >= 2 => 0.5,
        Mechanism::Xrr { eps } => logistic(ExtendedReal::lit(eps)),
        Mechanism::Nas => 0.5 + 1.0 / (2.0 * n as f64),
        Mechanism::Lrr { eps } => logistic(ExtendedReal::lit(eps)),
        Mechanism::LocalLaplace { eps } => 1.0 - 0.5 * (-eps / 2.0).exp(),
        Mechanism::Count => 0.5 + binomial_mad(n as u64) / n as f64,
        _ => return Err(Error::Unsupported(format!("no closed-form efficacy for {}", mech.id()))),
    })
}

/// Expected guesses per set of size `s` for certainty-only guessers on noiseless
/// count-in-sets: `2 - 2^{-(s-1)}` adaptively, `2^{-(s-1)}` otherwise.
pub fn cis_expected_guesses(s: usize, adaptive: bool) -> Result<f64> {
    if s == 0 {
        return Err(Error::Config("set size must be >= 1".into()));
    }
    let tail = 0.5f64.powi(s as i32 - 1);
    Ok(if adaptive { 2.0 - tail } else { tail })
}

/// Mean and standard error of `v / r` over `reps` independent games.
pub fn monte_carlo_efficacy<R: Rng + ?Sized>(
    mech: &Mechanism,
    z: &PairVector,
    guesser: &GuesserSpec,
    reps: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if reps == 0 {
        return Err(Error::Config("reps must be >= 1".into()));
    }
    let mut acc = Vec::with_capacity(reps);
    if guesser.is_adaptive() {
        let mut g = guesser.build_adaptive(mech, z)?;
        for _ in 0..reps {
            acc.push(run_adaptive(mech, z, g.as_mut(), rng)?.accuracy());
        }
    } else {
        let g = guesser.build(mech, z)?;
        for _ in 0..reps {
            acc.push(run_one_run(mech, z, g.as_ref(), rng)?.accuracy());
        }
    }
    if reps == 1 {
        return Ok((acc[0], 0.0));
    }
    mean_sem(&acc)
}
