//! Distributional privacy loss
//! `l_i(o) = ln(Pr[O = o | S_i = -1] / Pr[O = o | S_i = +1])`, with the other bits
//! drawn uniformly. Positive loss favours bit -1.

use std::collections::HashMap;

use crate::audit::{Bit, PairVector};
use crate::error::{Error, Result};
use crate::mechanisms::{DiscreteModel, Output};
use crate::num::{log_sum_exp, ExtendedReal, Real};

/// Largest `n` for which `2^n` secret patterns are enumerated.
pub const MAX_ENUMERATION_N: usize = 12;

/// `ln(a / b)` with `x/0 = +inf`, `0/x = -inf` and `0/0` undefined.
pub fn log_ratio(a: f64, b: f64) -> Result<ExtendedReal<f64>> {
    match (a > 0.0, b > 0.0) {
        (true, true) => Ok(ExtendedReal::lit(a.ln() - b.ln())),
        (true, false) => Ok(ExtendedReal::pos_inf()),
        (false, true) => Ok(ExtendedReal::neg_inf()),
        (false, false) => Err(Error::UndefinedOutput),
    }
}

/// Exact joint distribution of secret pattern and output for a discrete model.
///
/// Pattern `m` has bit `i` set iff `S_i = +1`.
#[derive(Clone, Debug)]
pub struct JointTable {
    n: usize,
    outputs: Vec<Output>,
    index: HashMap<Output, usize>,
    rows: Vec<Vec<(usize, f64)>>,
}

impl JointTable {
    pub fn build<M: DiscreteModel + ?Sized>(model: &M, z: &PairVector) -> Result<Self> {
        let n = z.len();
        if n > MAX_ENUMERATION_N {
            return Err(Error::Oversized { n, max: MAX_ENUMERATION_N });
        }
        let mut outputs = Vec::new();
        let mut index = HashMap::new();
        let mut rows = Vec::with_capacity(1 << n);
        for m in 0..1usize << n {
            let data: Vec<_> = (0..n).map(|i| z.select(i, pattern_bit(m, i))).collect();
            let mut row = Vec::new();
            for (o, p) in model.distribution(&data)? {
                if p <= 0.0 {
                    continue;
                }
                let k = *index.entry(o.clone()).or_insert_with(|| {
                    outputs.push(o);
                    outputs.len() - 1
                });
                row.push((k, p));
            }
            rows.push(row);
        }
        Ok(Self { n, outputs, index, rows })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Every output reachable under some secret pattern.
    pub fn outputs(&self) -> &[Output] {
        &self.outputs
    }

    pub fn output_index(&self, o: &Output) -> Option<usize> {
        self.index.get(o).copied()
    }

    /// Output distribution given the full secret pattern, as sparse `(output index, prob)`.
    pub fn row(&self, pattern: usize) -> &[(usize, f64)] {
        &self.rows[pattern]
    }

    /// `Pr[O = o]` under the uniform prior, indexed like [`Self::outputs`].
    pub fn marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.outputs.len()];
        let w = 1.0 / self.rows.len() as f64;
        for row in &self.rows {
            for &(k, p) in row {
                out[k] += w * p;
            }
        }
        out
    }

    /// `(Pr[O | S_i = -1, revealed], Pr[O | S_i = +1, revealed])` over all outputs.
    pub fn conditionals(&self, i: usize, revealed: &[(usize, Bit)]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_revealed(i, revealed)?;
        let mut minus = vec![0.0; self.outputs.len()];
        let mut plus = vec![0.0; self.outputs.len()];
        let consistent = |m: usize| revealed.iter().all(|&(j, s)| pattern_bit(m, j) == s);
        let w = 1.0 / (1usize << (self.n - 1 - revealed.len())) as f64;
        for (m, row) in self.rows.iter().enumerate() {
            if !consistent(m) {
                continue;
            }
            let side = if pattern_bit(m, i) < 0 { &mut minus } else { &mut plus };
            for &(k, p) in row {
                side[k] += w * p;
            }
        }
        Ok((minus, plus))
    }

    /// Loss at index `i` for output `o`, conditioned on the revealed bits.
    pub fn conditional_loss(&self, i: usize, o: &Output, revealed: &[(usize, Bit)]) -> Result<ExtendedReal<f64>> {
        let k = self.output_index(o).ok_or(Error::UndefinedOutput)?;
        let (minus, plus) = self.conditionals(i, revealed)?;
        log_ratio(minus[k], plus[k])
    }

    pub fn loss_table(&self) -> Result<LossTable> {
        let n_out = self.outputs.len();
        let mut minus = vec![vec![0.0; n_out]; self.n];
        let mut plus = vec![vec![0.0; n_out]; self.n];
        let w = 1.0 / (1usize << (self.n - 1)) as f64;
        for (m, row) in self.rows.iter().enumerate() {
            for i in 0..self.n {
                let side = if pattern_bit(m, i) < 0 { &mut minus[i] } else { &mut plus[i] };
                for &(k, p) in row {
                    side[k] += w * p;
                }
            }
        }
        let losses = (0..n_out)
            .map(|k| (0..self.n).map(|i| log_ratio(minus[i][k], plus[i][k])).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(LossTable {
            outputs: self.outputs.clone(),
            index: self.index.clone(),
            marginals: self.marginal(),
            losses,
        })
    }

    fn check_revealed(&self, i: usize, revealed: &[(usize, Bit)]) -> Result<()> {
        if i >= self.n {
            return Err(Error::Config(format!("index {i} out of range for n = {}", self.n)));
        }
        let mut seen = vec![false; self.n];
        for &(j, s) in revealed {
            if j >= self.n || j == i || seen[j] || (s != -1 && s != 1) {
                return Err(Error::Config(format!("invalid revealed bit ({j}, {s}) for index {i}")));
            }
            seen[j] = true;
        }
        Ok(())
    }
}

/// Bit `i` of secret pattern `m`.
pub fn pattern_bit(m: usize, i: usize) -> Bit {
    if m >> i & 1 == 1 {
        1
    } else {
        -1
    }
}

/// Per-output, per-index losses with output marginals.
#[derive(Clone, Debug)]
pub struct LossTable {
    outputs: Vec<Output>,
    index: HashMap<Output, usize>,
    marginals: Vec<f64>,
    losses: Vec<Vec<ExtendedReal<f64>>>,
}

impl LossTable {
    pub fn build<M: DiscreteModel + ?Sized>(model: &M, z: &PairVector) -> Result<Self> {
        JointTable::build(model, z)?.loss_table()
    }

    pub fn outputs(&self) -> &[Output] {
        &self.outputs
    }

    pub fn marginals(&self) -> &[f64] {
        &self.marginals
    }

    /// Losses of every index at the `k`-th output.
    pub fn losses(&self, k: usize) -> &[ExtendedReal<f64>] {
        &self.losses[k]
    }

    pub fn lookup(&self, o: &Output) -> Result<&[ExtendedReal<f64>]> {
        self.index.get(o).map(|&k| self.losses[k].as_slice()).ok_or(Error::UndefinedOutput)
    }
}

/// Loss at index `i` for output `o` by enumerating all secret patterns.
pub fn brute_force_loss<M: DiscreteModel + ?Sized>(
    model: &M,
    z: &PairVector,
    i: usize,
    o: &Output,
) -> Result<ExtendedReal<f64>> {
    conditional_loss(model, z, i, o, &[])
}

/// Loss at index `i` given that the bits in `revealed` are known.
pub fn conditional_loss<M: DiscreteModel + ?Sized>(
    model: &M,
    z: &PairVector,
    i: usize,
    o: &Output,
    revealed: &[(usize, Bit)],
) -> Result<ExtendedReal<f64>> {
    JointTable::build(model, z)?.conditional_loss(i, o, revealed)
}

/// Signed loss of one element of a noiseless count over `n` bits, with bit -1 meaning
/// element 0: `ln((n - o) / o)`.
pub fn count_loss<T: Real>(n: u64, o: u64) -> Result<ExtendedReal<T>> {
    if n == 0 {
        return Err(Error::Config("count over an empty set".into()));
    }
    if o > n {
        return Err(Error::Domain(format!("count {o} exceeds n = {n}")));
    }
    Ok(if o == 0 {
        ExtendedReal::pos_inf()
    } else if o == n {
        ExtendedReal::neg_inf()
    } else {
        ExtendedReal::new(T::count(n - o).ln() - T::count(o).ln()).expect("finite")
    })
}

/// `|ln((n - o) / o)|`, infinite at `o = 0` and `o = n`.
pub fn count_loss_analytic<T: Real>(n: u64, o: u64) -> Result<ExtendedReal<T>> {
    count_loss(n, o).map(ExtendedReal::abs)
}

/// Signed loss of one element of a count over `s` bits observed through
/// `Normal(0, sigma^2)` noise: the element is 0 under bit -1 and 1 under bit +1.
pub fn gaussian_mixture_loss_signed<T: Real>(o: T, s: u64, sigma: T) -> Result<ExtendedReal<T>> {
    if s == 0 {
        return Err(Error::Config("set size must be >= 1".into()));
    }
    if !(sigma > T::zero()) || !sigma.is_finite() {
        return Err(Error::Config(format!("sigma must be finite and > 0, got {sigma}")));
    }
    if !o.is_finite() {
        return Err(Error::Domain(format!("observation must be finite, got {o}")));
    }
    let half = T::lit(0.5);
    let terms = |shift: T| -> Vec<T> {
        (0..s)
            .map(|c| {
                let z = (o - T::count(c) - shift) / sigma;
                T::ln_choose(s - 1, c) - half * z * z
            })
            .collect()
    };
    let diff = log_sum_exp(&terms(T::zero())) - log_sum_exp(&terms(T::one()));
    ExtendedReal::new(diff).ok_or_else(|| Error::Domain("loss is undefined".into()))
}

/// Absolute value of [`gaussian_mixture_loss_signed`].
pub fn gaussian_mixture_loss<T: Real>(o: T, s: u64, sigma: T) -> Result<ExtendedReal<T>> {
    gaussian_mixture_loss_signed(o, s, sigma).map(ExtendedReal::abs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::{Mechanism, TabularModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{Binomial, ContinuousCDF, Discrete, Normal};

    fn ext(x: f64) -> ExtendedReal<f64> {
        ExtendedReal::lit(x)
    }

    #[test]
    fn brute_force_examples() {
        let xor = Mechanism::Xor.model().unwrap();
        let z = PairVector::binary(4).unwrap();
        for o in [0, 1] {
            for i in 0..4 {
                assert_eq!(brute_force_loss(&xor, &z, i, &Output::Symbol(o)).unwrap(), ext(0.0));
            }
        }
        let count = Mechanism::Count.model().unwrap();
        let l = brute_force_loss(&count, &z, 2, &Output::Symbol(1)).unwrap();
        assert!((l.value() - 3f64.ln()).abs() < 1e-12);
        let swapped = PairVector::new(vec![(1, 0); 4]).unwrap();
        let l = brute_force_loss(&count, &swapped, 2, &Output::Symbol(1)).unwrap();
        assert!((l.value() + 3f64.ln()).abs() < 1e-12);

        let rr = Mechanism::Lrr { eps: 0.8 }.model().unwrap();
        let z1 = PairVector::signed(1).unwrap();
        let l = brute_force_loss(&rr, &z1, 0, &Output::Ints(vec![1])).unwrap();
        assert!((l.value() + 0.8).abs() < 1e-12);
    }

    #[test]
    fn brute_force_errors() {
        let count = Mechanism::Count.model().unwrap();
        let z = PairVector::binary(3).unwrap();
        assert_eq!(brute_force_loss(&count, &z, 0, &Output::Symbol(7)), Err(Error::UndefinedOutput));
        let big = PairVector::binary(13).unwrap();
        assert_eq!(
            brute_force_loss(&count, &big, 0, &Output::Symbol(1)),
            Err(Error::Oversized { n: 13, max: MAX_ENUMERATION_N })
        );
    }

    #[test]
    fn count_analytic_examples() {
        assert_eq!(count_loss_analytic::<f64>(4, 2).unwrap(), ext(0.0));
        assert!(count_loss_analytic::<f64>(4, 0).unwrap().is_pos_inf());
        assert!(count_loss_analytic::<f64>(4, 4).unwrap().is_pos_inf());
        assert!((count_loss_analytic::<f64>(10, 3).unwrap().value() - (7.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(count_loss::<f64>(3, 4).is_err());
        assert!((count_loss_analytic::<f32>(10, 3).unwrap().value() - 0.847_298).abs() < 1e-5);
    }

    #[test]
    fn count_analytic_matches_enumeration() {
        for n in 1..=10 {
            let table = LossTable::build(&Mechanism::Count.model().unwrap(), &PairVector::binary(n).unwrap()).unwrap();
            for (k, o) in table.outputs().iter().enumerate() {
                let Output::Symbol(o) = o else { unreachable!() };
                let want = count_loss::<f64>(n as u64, *o as u64).unwrap();
                for &l in table.losses(k) {
                    if want.is_finite() {
                        assert!((l.value() - want.value()).abs() < 1e-9, "n={n} o={o}");
                    } else {
                        assert_eq!(l, want);
                    }
                }
            }
        }
    }

    #[test]
    fn swapping_a_pair_negates_its_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let model = TabularModel::random(3, 4, &mut rng);
            let z = PairVector::binary(3).unwrap();
            let mut pairs = z.pairs().to_vec();
            pairs[1] = (1, 0);
            let zs = PairVector::new(pairs).unwrap();
            for o in 0..4 {
                let o = Output::Symbol(o);
                match (brute_force_loss(&model, &z, 1, &o), brute_force_loss(&model, &zs, 1, &o)) {
                    (Ok(a), Ok(b)) => {
                        if a.is_finite() {
                            assert!((a.value() + b.value()).abs() < 1e-12);
                        } else {
                            assert_eq!(a, -b);
                        }
                    }
                    (a, b) => assert_eq!(a, b),
                }
            }
        }
    }

    #[test]
    fn conditionals_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = TabularModel::random(4, 5, &mut rng);
        let table = JointTable::build(&model, &PairVector::binary(4).unwrap()).unwrap();
        for i in 0..4 {
            let (minus, plus) = table.conditionals(i, &[]).unwrap();
            assert!((minus.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((plus.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let (minus, plus) = table.conditionals(i, &[((i + 1) % 4, 1)]).unwrap();
            assert!((minus.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((plus.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!((table.marginal().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn conditional_examples() {
        let xor = Mechanism::Xor.model().unwrap();
        let z2 = PairVector::binary(2).unwrap();
        let l = conditional_loss(&xor, &z2, 1, &Output::Symbol(1), &[(0, 1)]).unwrap();
        assert!(l.is_pos_inf());
        let l = conditional_loss(&xor, &z2, 1, &Output::Symbol(1), &[(0, -1)]).unwrap();
        assert!(l.is_neg_inf());

        let count = Mechanism::Count.model().unwrap();
        let z3 = PairVector::binary(3).unwrap();
        let l = conditional_loss(&count, &z3, 0, &Output::Symbol(2), &[(2, 1)]).unwrap();
        assert_eq!(l, count_loss::<f64>(2, 1).unwrap());
        assert_eq!(l, ext(0.0));

        let l = conditional_loss(&count, &z3, 0, &Output::Symbol(2), &[(2, -1)]);
        assert!(l.unwrap().is_neg_inf());
        let l = conditional_loss(&count, &z3, 0, &Output::Symbol(0), &[(1, 1), (2, 1)]);
        assert_eq!(l, Err(Error::UndefinedOutput));
        assert!(conditional_loss(&count, &z3, 0, &Output::Symbol(1), &[(0, 1)]).is_err());
    }

    #[test]
    fn conditional_reduces_to_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = TabularModel::random(3, 3, &mut rng);
        let z = PairVector::binary(3).unwrap();
        let table = JointTable::build(&model, &z).unwrap();
        let losses = table.loss_table().unwrap();
        for (k, o) in table.outputs().iter().enumerate() {
            for i in 0..3 {
                assert_eq!(table.conditional_loss(i, o, &[]).unwrap(), losses.losses(k)[i]);
            }
        }
    }

    /// Density ratio at `o` via symmetric CDF differences of the two mixtures.
    fn quadrature_loss(o: f64, s: u64, sigma: f64) -> f64 {
        let h = 1e-4;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mass = |shift: f64| -> f64 {
            (0..s)
                .map(|c| {
                    let w = Binomial::new(0.5, s - 1).unwrap().pmf(c);
                    let m = c as f64 + shift;
                    let (lo, hi) = ((o - h - m) / sigma, (o + h - m) / sigma);
                    // Take the difference on whichever tail keeps precision.
                    let p = if lo > 0.0 { normal.sf(lo) - normal.sf(hi) } else { normal.cdf(hi) - normal.cdf(lo) };
                    w * p
                })
                .sum()
        };
        (mass(0.0) / mass(1.0)).ln()
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(gaussian_mixture_loss(0.5, 1, 1.3).unwrap(), ext(0.0));
        assert!(gaussian_mixture_loss(1.5f64, 3, 1.0).unwrap().value().abs() < 1e-12);
        // s = 1 is a two-Gaussian likelihood ratio: (1 - 2o) / (2 sigma^2).
        let l = gaussian_mixture_loss_signed(2.0f64, 1, 0.5).unwrap();
        assert!((l.value() - (1.0 - 4.0) / 0.5).abs() < 1e-12);
        let want = quadrature_loss(2.0, 2, 0.5).abs();
        assert!((gaussian_mixture_loss(2.0, 2, 0.5).unwrap().value() - want).abs() < 1e-6);
        assert!(gaussian_mixture_loss(0.0, 0, 1.0).is_err());
        assert!(gaussian_mixture_loss(0.0, 2, 0.0).is_err());
    }

    #[test]
    fn gaussian_matches_quadrature_grid() {
        for s in 1..=6u64 {
            for sigma in [0.5, 1.0, 2.0] {
                for step in -4..=(2 * s as i32 + 4) {
                    let o = step as f64 * 0.5 + 0.1;
                    let got = gaussian_mixture_loss_signed(o, s, sigma).unwrap().value();
                    let want = quadrature_loss(o, s, sigma);
                    assert!((got - want).abs() < 1e-6, "s={s} sigma={sigma} o={o}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn gaussian_is_stable_far_in_the_tails() {
        let l = gaussian_mixture_loss_signed(-60.0, 4, 0.5).unwrap();
        assert!(l.is_finite() && l.value() > 0.0);
        let l32 = gaussian_mixture_loss_signed(-6.0f32, 4, 0.5).unwrap();
        let l64 = gaussian_mixture_loss_signed(-6.0f64, 4, 0.5).unwrap();
        assert!((l32.value() as f64 - l64.value()).abs() < 1e-3 * l64.value());
    }

    #[test]
    fn revealed_bits_shrink_the_noisy_count() {
        // Reveal two bits of a size-4 set summing to one; the residual problem has s = 2.
        let sigma = 0.7;
        let normal = |x: f64| (-0.5 * (x / sigma).powi(2)).exp();
        for o in [-0.3, 0.4, 1.1, 2.6, 3.9] {
            // Enumerate the one unrevealed other bit by direct density sums.
            let minus: f64 = (0..2).map(|b| normal(o - (1 + b) as f64)).sum();
            let plus: f64 = (0..2).map(|b| normal(o - (2 + b) as f64)).sum();
            let want = (minus / plus).ln();
            let got = gaussian_mixture_loss_signed(o - 1.0, 2, sigma).unwrap().value();
            assert!((got - want).abs() < 1e-9);
        }
    }
}
