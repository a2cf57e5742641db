//! Seeded experiment sweeps with CSV and JSON output.
//!
//! A manifest is a TOML file:
//!
//! ```toml
//! id = "fig2"
//! kind = "dpsgd"
//! reps = 200
//! seed = 7
//!
//! [sweep]
//! name = "n_per_d"
//! values = [1, 2, 4, 8]
//!
//! [params]
//! k = 100
//! eps = 2
//! delta = 1e-5
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{run_adaptive, run_full_knowledge, run_one_run, PairVector};
use crate::dpsgd::{dpsgd_audit, rdp_noise_scale, single_step_audit, Conversion, DpSgdConfig, ScoreMode};
use crate::error::{Error, Result};
use crate::guessers::{parity_full_knowledge, GuesserSpec, VisitOrder};
use crate::mechanisms::Mechanism;
use crate::num::ExtendedReal;
use crate::stats::{eps_estimation, eps_lower_bound, mean_sem, AuditCounts};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Multi-step DP-SGD audited by the sorting guesser.
    Dpsgd,
    /// Single-step full-batch DP-SGD with ORA and AORA maximum-likelihood guessers.
    SingleStep,
    /// Noiseless count-in-sets with certainty-only guessers.
    Cis,
    /// Any built-in mechanism with a guesser spec.
    Game,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Num(f64),
    Text(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    pub kind: ExperimentKind,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub seed: u64,
    pub sweep: Sweep,
    /// `ora` and/or `aora`, for kinds that compare them. Empty means both.
    #[serde(default)]
    pub methods: Vec<String>,
    #[serde(default)]
    pub params: BTreeMap<String, Param>,
}

fn default_reps() -> usize {
    200
}

fn default_beta() -> f64 {
    0.05
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if self.sweep.values.is_empty() {
            return Err(Error::Config("sweep values must be nonempty".into()));
        }
        if let Some(v) = self.sweep.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!("sweep value {v} is not finite")));
        }
        if let Some(m) = self.methods.iter().find(|m| *m != "ora" && *m != "aora") {
            return Err(Error::Config(format!("unknown method {m:?}")));
        }
        Ok(())
    }

    fn methods(&self) -> Vec<bool> {
        match self.kind {
            ExperimentKind::SingleStep | ExperimentKind::Cis if self.methods.is_empty() => vec![false, true],
            ExperimentKind::SingleStep | ExperimentKind::Cis => {
                self.methods.iter().map(|m| m == "aora").collect()
            }
            _ => vec![false],
        }
    }
}

/// Parameter view for one sweep value.
struct Point<'a> {
    config: &'a ExperimentConfig,
    value: f64,
}

impl Point<'_> {
    fn num(&self, key: &str) -> Result<Option<f64>> {
        if key == self.config.sweep.name {
            return Ok(Some(self.value));
        }
        match self.config.params.get(key) {
            None => Ok(None),
            Some(Param::Num(x)) => Ok(Some(*x)),
            Some(Param::Text(t)) => t
                .parse::<ExtendedReal<f64>>()
                .map(|x| Some(x.value()))
                .map_err(|e| Error::Config(format!("{key}: {e}"))),
        }
    }

    fn real(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.num(key)?.unwrap_or(default))
    }

    fn real_required(&self, key: &str) -> Result<f64> {
        self.num(key)?.ok_or_else(|| Error::Config(format!("missing parameter {key}")))
    }

    fn count(&self, key: &str) -> Result<Option<usize>> {
        match self.num(key)? {
            None => Ok(None),
            Some(x) if x >= 0.0 && x.fract() == 0.0 && x < 1e15 => Ok(Some(x as usize)),
            Some(x) => Err(Error::Config(format!("{key} must be a nonnegative integer, got {x}"))),
        }
    }

    fn count_required(&self, key: &str) -> Result<usize> {
        self.count(key)?.ok_or_else(|| Error::Config(format!("missing parameter {key}")))
    }

    fn text(&self, key: &str) -> Result<&str> {
        match self.config.params.get(key) {
            Some(Param::Text(t)) => Ok(t),
            _ => Err(Error::Config(format!("missing text parameter {key}"))),
        }
    }

    fn conversion(&self) -> Result<Conversion> {
        match self.config.params.get("conversion") {
            None => Ok(Conversion::default()),
            Some(Param::Text(t)) if t == "improved" => Ok(Conversion::Improved),
            Some(Param::Text(t)) if t == "classic" => Ok(Conversion::Classic),
            Some(other) => Err(Error::Config(format!("unknown conversion {other:?}"))),
        }
    }

    /// DP-SGD config; sigma is given directly or calibrated from `eps` and `delta`.
    fn dpsgd(&self, steps: usize, q: f64) -> Result<DpSgdConfig> {
        let d = self.count("d")?.unwrap_or(1000);
        let n = match (self.count("n")?, self.num("n_per_d")?) {
            (Some(n), _) => n,
            (None, Some(m)) if m >= 1.0 && m.fract() == 0.0 => m as usize * d,
            (None, Some(m)) => return Err(Error::Config(format!("n_per_d must be a positive integer, got {m}"))),
            (None, None) => d,
        };
        let sigma = match self.num("sigma")? {
            Some(s) => s,
            None => {
                let eps = self.real_required("eps")?;
                let delta = self.real("delta", 1e-5)?;
                rdp_noise_scale(eps, delta, steps as u64, q, self.conversion()?)?
            }
        };
        let score = match self.count("score_step")? {
            Some(t) => ScoreMode::Step(t),
            None => ScoreMode::Sum,
        };
        let config = DpSgdConfig {
            n,
            d,
            steps,
            q,
            sigma,
            clip: self.real("clip", 1.0)?,
            eta: self.real("eta", 1.0)?,
            score,
        };
        config.validate()?;
        Ok(config)
    }
}

/// One fully specified game.
enum Plan {
    Dpsgd { config: DpSgdConfig, k: usize },
    SingleStep { config: DpSgdConfig, tau: f64, adaptive: bool },
    Game { mech: Mechanism, z: PairVector, guesser: GuesserSpec },
}

impl Plan {
    fn build(point: &Point, adaptive: bool) -> Result<Self> {
        match point.config.kind {
            ExperimentKind::Dpsgd => {
                let steps = point.count("steps")?.unwrap_or(100);
                let config = point.dpsgd(steps, point.real("q", 0.1)?)?;
                let k = point.count("k")?.unwrap_or(config.n);
                Ok(Plan::Dpsgd { config, k })
            }
            ExperimentKind::SingleStep => {
                let config = point.dpsgd(1, 1.0)?;
                Ok(Plan::SingleStep { config, tau: point.real("tau", 1.0)?, adaptive })
            }
            ExperimentKind::Cis => {
                let s = point.count_required("s")?;
                let sets = point.count("sets")?.unwrap_or(1000);
                let tau = point.real("tau", f64::INFINITY)?;
                let guesser = if adaptive {
                    GuesserSpec::AdaptiveMl { tau, order: VisitOrder::Reverse }
                } else {
                    GuesserSpec::MlThreshold { tau }
                };
                Ok(Plan::Game { mech: Mechanism::Cis { s }, z: PairVector::binary(sets * s)?, guesser })
            }
            ExperimentKind::Game => {
                let mut mech = point.text("mech")?.to_string();
                let mut guesser = point.text("guesser")?.to_string();
                let name = &point.config.sweep.name;
                let value = crate::mechanisms::fmt_param(point.value);
                if let Some(key) = name.strip_prefix("mech.") {
                    mech = format!("{mech} {key}={value}");
                } else if let Some(key) = name.strip_prefix("guesser.") {
                    guesser = format!("{guesser} {key}={value}");
                } else if name != "n" {
                    return Err(Error::Config(format!("game sweeps vary n, mech.<key> or guesser.<key>, not {name}")));
                }
                let mech: Mechanism = mech.parse()?;
                let n = point.count_required("n")?;
                let z = PairVector::for_universe(mech.signed_universe(), n)?;
                Ok(Plan::Game { mech, z, guesser: guesser.parse()? })
            }
        }
    }

    fn run(&self, rng: &mut ChaCha8Rng) -> Result<AuditCounts> {
        match self {
            Plan::Dpsgd { config, k } => dpsgd_audit(config, *k, rng),
            Plan::SingleStep { config, tau, adaptive } => single_step_audit(config, *tau, *adaptive, rng),
            Plan::Game { mech, z, guesser } if guesser.is_adaptive() => {
                let mut g = guesser.build_adaptive(mech, z)?;
                run_adaptive(mech, z, g.as_mut(), rng)
            }
            Plan::Game { mech, z, guesser } => {
                let g = guesser.build(mech, z)?;
                run_one_run(mech, z, g.as_ref(), rng)
            }
        }
    }
}

/// One CSV row. Summary rows carry `rep = "mean"` or `"sem"` and no seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment_id: String,
    pub sweep_name: String,
    pub sweep_value: f64,
    pub rep: String,
    pub seed: Option<u64>,
    pub v: f64,
    pub r: f64,
    pub estimation: Option<ExtendedReal<f64>>,
    pub bound: Option<ExtendedReal<f64>>,
    pub accuracy: f64,
}

/// Stable 64-bit hash of `(sweep_value, rep)`: FNV-1a over the little-endian bytes of
/// the value's bit pattern and the rep index, then the SplitMix64 finalizer.
pub fn stable_hash(sweep_value: f64, rep: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in sweep_value.to_bits().to_le_bytes().into_iter().chain(rep.to_le_bytes()) {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Seed of replicate `rep` at `sweep_value`.
pub fn rep_seed(seed: u64, sweep_value: f64, rep: u64) -> u64 {
    seed ^ stable_hash(sweep_value, rep)
}

fn data_row(config: &ExperimentConfig, id: &str, value: f64, rep: usize, seed: u64, counts: Option<AuditCounts>) -> Result<ResultRow> {
    // A game with no guesses certifies nothing: bound and estimation 0, accuracy 1/2.
    let (v, r, estimation, bound, accuracy) = match counts {
        Some(c) => (c.v, c.r, eps_estimation(c), eps_lower_bound(c, config.beta)?, c.accuracy()),
        None => (0, 0, ExtendedReal::zero(), ExtendedReal::zero(), 0.5),
    };
    Ok(ResultRow {
        experiment_id: id.to_string(),
        sweep_name: config.sweep.name.clone(),
        sweep_value: value,
        rep: rep.to_string(),
        seed: Some(seed),
        v: v as f64,
        r: r as f64,
        estimation: Some(estimation),
        bound: Some(bound),
        accuracy,
    })
}

fn ext_mean_sem(xs: &[ExtendedReal<f64>]) -> (Option<ExtendedReal<f64>>, Option<ExtendedReal<f64>>) {
    let raw: Vec<f64> = xs.iter().map(|x| x.value()).collect();
    match mean_sem(&raw) {
        Ok((m, s)) => (ExtendedReal::new(m), ExtendedReal::new(s)),
        Err(_) => (None, None),
    }
}

fn summary_rows(rows: &[ResultRow]) -> Result<[ResultRow; 2]> {
    let col = |f: fn(&ResultRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let (v_mean, v_sem) = mean_sem(&col(|r| r.v))?;
    let (r_mean, r_sem) = mean_sem(&col(|r| r.r))?;
    let (a_mean, a_sem) = mean_sem(&col(|r| r.accuracy))?;
    let ests: Vec<_> = rows.iter().filter_map(|r| r.estimation).collect();
    let bounds: Vec<_> = rows.iter().filter_map(|r| r.bound).collect();
    let (e_mean, e_sem) = ext_mean_sem(&ests);
    let (b_mean, b_sem) = ext_mean_sem(&bounds);
    let first = &rows[0];
    let make = |rep: &str, v, r, estimation, bound, accuracy| ResultRow {
        experiment_id: first.experiment_id.clone(),
        sweep_name: first.sweep_name.clone(),
        sweep_value: first.sweep_value,
        rep: rep.to_string(),
        seed: None,
        v,
        r,
        estimation,
        bound,
        accuracy,
    };
    Ok([
        make("mean", v_mean, r_mean, e_mean, b_mean, a_mean),
        make("sem", v_sem, r_sem, e_sem, b_sem, a_sem),
    ])
}

/// Runs every sweep value and method, emitting replicate rows followed by the mean and
/// sem rows, one sweep value at a time in sweep order. Replicates run in parallel.
pub fn run_sweep<F>(config: &ExperimentConfig, mut emit: F) -> Result<()>
where
    F: FnMut(&ResultRow) -> Result<()>,
{
    config.validate()?;
    let methods = config.methods();
    for &value in &config.sweep.values {
        let wrap = |e: Error| Error::Sweep { name: config.sweep.name.clone(), value, source: Box::new(e) };
        let point = Point { config, value };
        for &adaptive in &methods {
            let plan = Plan::build(&point, adaptive).map_err(wrap)?;
            let id = match (config.kind, adaptive) {
                (ExperimentKind::SingleStep | ExperimentKind::Cis, false) => format!("{}_ora", config.id),
                (ExperimentKind::SingleStep | ExperimentKind::Cis, true) => format!("{}_aora", config.id),
                _ => config.id.clone(),
            };
            let rows = (0..config.reps)
                .into_par_iter()
                .map(|rep| {
                    let seed = rep_seed(config.seed, value, rep as u64);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let counts = match plan.run(&mut rng) {
                        Ok(c) => Some(c),
                        Err(Error::AllAbstain) => None,
                        Err(e) => return Err(e),
                    };
                    data_row(config, &id, value, rep, seed, counts)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(wrap)?;
            for row in &rows {
                emit(row)?;
            }
            for row in &summary_rows(&rows).map_err(wrap)? {
                emit(row)?;
            }
        }
    }
    Ok(())
}

/// Output encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Writes rows as they arrive (CSV) or as one array at the end (JSON).
pub struct RowSink<W: Write> {
    inner: SinkInner<W>,
}

enum SinkInner<W: Write> {
    Csv(csv::Writer<W>),
    Json(W, Vec<ResultRow>),
}

impl<W: Write> RowSink<W> {
    pub fn new(out: W, format: Format) -> Self {
        let inner = match format {
            Format::Csv => SinkInner::Csv(csv::Writer::from_writer(out)),
            Format::Json => SinkInner::Json(out, Vec::new()),
        };
        Self { inner }
    }

    pub fn push(&mut self, row: &ResultRow) -> Result<()> {
        match &mut self.inner {
            SinkInner::Csv(w) => {
                w.serialize(row).map_err(|e| Error::Io(e.to_string()))?;
                w.flush()?;
            }
            SinkInner::Json(_, rows) => rows.push(row.clone()),
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        match self.inner {
            SinkInner::Csv(mut w) => Ok(w.flush()?),
            SinkInner::Json(mut out, rows) => {
                serde_json::to_writer_pretty(&mut out, &rows).map_err(|e| Error::Io(e.to_string()))?;
                writeln!(out)?;
                Ok(out.flush()?)
            }
        }
    }
}

/// Runs a sweep into a writer.
pub fn run_to_writer<W: Write>(config: &ExperimentConfig, out: W, format: Format) -> Result<()> {
    let mut sink = RowSink::new(out, format);
    run_sweep(config, |row| sink.push(row))?;
    sink.finish()
}

/// Collects all rows of a sweep.
pub fn collect_sweep(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    run_sweep(config, |row| {
        rows.push(row.clone());
        Ok(())
    })?;
    Ok(rows)
}

/// How a validity trial runs its guesser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValidityMode {
    OneRun,
    Adaptive,
    /// Sees every other true bit. Only parity mechanisms are supported.
    FullKnowledge,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ValidityReport {
    pub trials: usize,
    /// Trials whose bound exceeded the claimed epsilon.
    pub exceed: usize,
    pub rate: f64,
    /// `beta` plus three binomial standard deviations.
    pub limit: f64,
}

impl ValidityReport {
    pub fn valid(&self) -> bool {
        self.rate <= self.limit
    }
}

/// Monte Carlo validity: the fraction of trials whose lower bound exceeds `claimed_eps`.
/// A game with no guesses never exceeds.
#[allow(clippy::too_many_arguments)]
pub fn validity_check(
    mech: &Mechanism,
    n: usize,
    guesser: &GuesserSpec,
    mode: ValidityMode,
    claimed_eps: f64,
    beta: f64,
    trials: usize,
    seed: u64,
) -> Result<ValidityReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let z = PairVector::for_universe(mech.signed_universe(), n)?;
    if mode == ValidityMode::FullKnowledge && !matches!(mech, Mechanism::Xor | Mechanism::Xrr { .. }) {
        return Err(Error::Unsupported(format!("full-knowledge guessing for {mech}")));
    }
    let one_run = match mode {
        ValidityMode::OneRun => Some(guesser.build(mech, &z)?),
        _ => None,
    };
    let exceed = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(rep_seed(seed, claimed_eps, t as u64));
            let counts = match mode {
                ValidityMode::OneRun => run_one_run(mech, &z, one_run.as_deref().expect("built"), &mut rng),
                ValidityMode::Adaptive => {
                    let mut g = guesser.build_adaptive(mech, &z)?;
                    run_adaptive(mech, &z, g.as_mut(), &mut rng)
                }
                ValidityMode::FullKnowledge => run_full_knowledge(mech, &z, parity_full_knowledge, &mut rng),
            };
            match counts {
                Ok(c) => Ok(eps_lower_bound(c, beta)?.value() > claimed_eps),
                Err(Error::AllAbstain) => Ok(false),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&x| x)
        .count();
    let rate = exceed as f64 / trials as f64;
    let limit = beta + 3.0 * (beta * (1.0 - beta) / trials as f64).sqrt();
    Ok(ValidityReport { trials, exceed, rate, limit })
}
