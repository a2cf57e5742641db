use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ora_core::audit::{audit_report, run_adaptive, run_one_run, PairVector};
use ora_core::dpsgd::{rdp_epsilon, rdp_noise_scale, Conversion};
use ora_core::efficacy::{closed_form_efficacy, optimal_efficacy, relaxation_levels, Budget};
use ora_core::experiments::{
    run_to_writer, validity_check, ExperimentConfig, ExperimentKind, Format, Param, Sweep, ValidityMode,
};
use ora_core::guessers::GuesserSpec;
use ora_core::mechanisms::Mechanism;
use ora_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ora-lab", version, about = "One-run privacy auditing experiments")]
struct Cli {
    /// Base RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Confidence parameter of the lower bound.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Output file (stdout if absent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutFormat::Csv)]
    format: OutFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Csv => Format::Csv,
            OutFormat::Json => Format::Json,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConversionArg {
    Improved,
    Classic,
}

impl From<ConversionArg> for Conversion {
    fn from(c: ConversionArg) -> Self {
        match c {
            ConversionArg::Improved => Conversion::Improved,
            ConversionArg::Classic => Conversion::Classic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Play one game and print v, r, estimation and bound.
    Audit {
        #[command(flatten)]
        mech: MechArgs,
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        guesser: GuesserArgs,
    },
    /// Exact efficacy and relaxation levels of a discrete mechanism.
    Efficacy {
        #[command(flatten)]
        mech: MechArgs,
        #[arg(long)]
        n: usize,
        /// Guess budget (defaults to n).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Multi-step DP-SGD sweeps.
    Dpsgd(DpsgdArgs),
    /// Single-step DP-SGD or noiseless count-in-sets, ORA against AORA.
    Aora(AoraArgs),
    /// Noise multiplier for a target (eps, delta) guarantee.
    Accountant {
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        t: u64,
        #[arg(long)]
        q: f64,
        #[arg(long, value_enum, default_value_t = ConversionArg::Improved)]
        conversion: ConversionArg,
    },
    /// Fraction of games whose lower bound exceeds a claimed epsilon.
    ValidityCheck {
        #[command(flatten)]
        mech: MechArgs,
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        guesser: GuesserArgs,
        /// Claimed epsilon (defaults to the mechanism's eps).
        #[arg(long)]
        claimed_eps: Option<f64>,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::OneRun)]
        mode: ModeArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    OneRun,
    Adaptive,
    FullKnowledge,
}

#[derive(Args)]
struct MechArgs {
    /// Mechanism id, e.g. lrr, count, cis.
    #[arg(long)]
    mech: String,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
}

impl MechArgs {
    fn build(&self) -> Result<Mechanism> {
        let mut text = self.mech.clone();
        if let Some(eps) = &self.eps {
            text += &format!(" eps={eps}");
        }
        if let Some(p) = self.p {
            text += &format!(" p={p}");
        }
        if let Some(s) = self.s {
            text += &format!(" s={s}");
        }
        if let Some(sigma) = self.sigma {
            text += &format!(" sigma={sigma}");
        }
        text.parse()
    }
}

#[derive(Args)]
struct GuesserArgs {
    /// Guesser id, e.g. identity, ml_topk, ml_threshold, adaptive_ml.
    #[arg(long, default_value = "identity")]
    guesser: String,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    order: Option<String>,
}

impl GuesserArgs {
    fn build(&self) -> Result<GuesserSpec> {
        let mut text = self.guesser.clone();
        if let Some(k) = self.k {
            text += &format!(" k={k}");
        }
        if let Some(tau) = &self.tau {
            text += &format!(" tau={tau}");
        }
        if let Some(order) = &self.order {
            text += &format!(" order={order}");
        }
        text.parse()
    }
}

/// Sweep source: a manifest or a sweep given on the command line.
#[derive(Args)]
struct SweepArgs {
    /// TOML manifest; flags below override its fields.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    /// Swept parameter name.
    #[arg(long)]
    sweep: Option<String>,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
}

#[derive(Args)]
struct DpsgdArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_per_d: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_enum)]
    conversion: Option<ConversionArg>,
    /// Score each element from this step alone instead of summing over steps.
    #[arg(long)]
    score_step: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AoraKind {
    SingleStep,
    Cis,
}

#[derive(Args)]
struct AoraArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, value_enum, default_value_t = AoraKind::SingleStep)]
    kind: AoraKind,
    /// Subset of ora, aora.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_per_d: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    tau: Option<String>,
    /// Set size for count-in-sets.
    #[arg(long)]
    s: Option<usize>,
    /// Number of sets for count-in-sets.
    #[arg(long)]
    sets: Option<usize>,
}

fn num<T: Into<f64>>(params: &mut BTreeMap<String, Param>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        params.insert(key.to_string(), Param::Num(v.into()));
    }
}

fn count(params: &mut BTreeMap<String, Param>, key: &str, value: Option<usize>) {
    num(params, key, value.map(|v| v as f64));
}

fn text(params: &mut BTreeMap<String, Param>, key: &str, value: Option<String>) {
    if let Some(v) = value {
        params.insert(key.to_string(), Param::Text(v));
    }
}

fn sweep_config(args: &SweepArgs, kind: ExperimentKind, cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &args.manifest {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig {
            id: String::new(),
            kind,
            reps: 200,
            beta: 0.05,
            seed: 0,
            sweep: Sweep { name: String::new(), values: Vec::new() },
            methods: Vec::new(),
            params: BTreeMap::new(),
        },
    };
    if config.kind != kind {
        return Err(Error::Config(format!("manifest kind {:?} does not fit this subcommand", config.kind)));
    }
    if let Some(id) = &args.id {
        config.id = id.clone();
    }
    if config.id.is_empty() {
        config.id = format!("{kind:?}").to_lowercase();
    }
    if let Some(reps) = args.reps {
        config.reps = reps;
    }
    if let Some(name) = &args.sweep {
        config.sweep.name = name.clone();
    }
    if let Some(values) = &args.values {
        config.sweep.values = values.clone();
    }
    if config.sweep.name.is_empty() {
        return Err(Error::Config("no sweep: pass --manifest or --sweep and --values".into()));
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(beta) = cli.beta {
        config.beta = beta;
    }
    Ok(config)
}

fn output(cli: &Cli) -> Result<Box<dyn Write>> {
    Ok(match &cli.out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(io::stdout().lock()),
    })
}

/// Writes a flat record as `key=value` lines or one JSON object.
fn emit_record(cli: &Cli, fields: &[(&str, String)]) -> Result<()> {
    let mut out = output(cli)?;
    match cli.format {
        OutFormat::Csv => {
            for (k, v) in fields {
                writeln!(out, "{k}={v}")?;
            }
        }
        OutFormat::Json => {
            let map: serde_json::Map<String, serde_json::Value> = fields
                .iter()
                .map(|(k, v)| {
                    let value = v.parse::<f64>().ok().filter(|x| x.is_finite()).map_or_else(
                        || serde_json::Value::String(v.clone()),
                        |x| serde_json::json!(x),
                    );
                    (k.to_string(), value)
                })
                .collect();
            writeln!(out, "{}", serde_json::Value::Object(map))?;
        }
    }
    Ok(out.flush()?)
}

fn run(cli: &Cli) -> Result<()> {
    let beta = cli.beta.unwrap_or(0.05);
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Audit { mech, n, guesser } => {
            let mech = mech.build()?;
            let spec = guesser.build()?;
            let z = PairVector::for_universe(mech.signed_universe(), *n)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let counts = if spec.is_adaptive() {
                run_adaptive(&mech, &z, spec.build_adaptive(&mech, &z)?.as_mut(), &mut rng)?
            } else {
                run_one_run(&mech, &z, spec.build(&mech, &z)?.as_ref(), &mut rng)?
            };
            let rep = audit_report(counts, beta)?;
            emit_record(
                cli,
                &[
                    ("v", counts.v.to_string()),
                    ("r", counts.r.to_string()),
                    ("estimation", rep.estimation.to_string()),
                    ("bound", rep.bound.to_string()),
                ],
            )
        }
        Command::Efficacy { mech, n, k } => {
            let mech = mech.build()?;
            let model = mech.model()?;
            let z = PairVector::for_universe(mech.signed_universe(), *n)?;
            let k = k.unwrap_or(*n);
            let eff = optimal_efficacy(&model, &z, Budget::K(k))?;
            let levels = relaxation_levels(&model, &z, k)?;
            let mut fields = vec![
                ("efficacy", eff.to_string()),
                ("ddp", levels.ddp.to_string()),
                ("ac_ddp", levels.ac_ddp.to_string()),
                ("ae_ac_ddp", levels.ae_ac_ddp.to_string()),
                ("k", levels.k.to_string()),
                ("k_ae_ac_ddp", levels.k_ae_ac_ddp.to_string()),
                ("dp_level", levels.dp_level.to_string()),
            ];
            match closed_form_efficacy(&mech, *n) {
                Ok(c) => fields.push(("closed_form", c.to_string())),
                Err(Error::Unsupported(_)) => {}
                Err(e) => return Err(e),
            }
            emit_record(cli, &fields)
        }
        Command::Dpsgd(a) => {
            let mut config = sweep_config(&a.sweep, ExperimentKind::Dpsgd, cli)?;
            let p = &mut config.params;
            count(p, "n", a.n);
            count(p, "n_per_d", a.n_per_d);
            count(p, "d", a.d);
            count(p, "k", a.k);
            count(p, "steps", a.steps);
            num(p, "q", a.q);
            num(p, "sigma", a.sigma);
            num(p, "eps", a.eps);
            num(p, "delta", a.delta);
            count(p, "score_step", a.score_step);
            text(p, "conversion", a.conversion.map(|c| match c {
                ConversionArg::Improved => "improved".into(),
                ConversionArg::Classic => "classic".into(),
            }));
            run_to_writer(&config, output(cli)?, cli.format.into())
        }
        Command::Aora(a) => {
            let kind = match a.kind {
                AoraKind::SingleStep => ExperimentKind::SingleStep,
                AoraKind::Cis => ExperimentKind::Cis,
            };
            let mut config = sweep_config(&a.sweep, kind, cli)?;
            if let Some(m) = &a.methods {
                config.methods = m.clone();
            }
            let p = &mut config.params;
            count(p, "n", a.n);
            count(p, "n_per_d", a.n_per_d);
            count(p, "d", a.d);
            num(p, "sigma", a.sigma);
            num(p, "eps", a.eps);
            num(p, "delta", a.delta);
            text(p, "tau", a.tau.clone());
            count(p, "s", a.s);
            count(p, "sets", a.sets);
            run_to_writer(&config, output(cli)?, cli.format.into())
        }
        Command::Accountant { eps, delta, t, q, conversion } => {
            let conv = Conversion::from(*conversion);
            let sigma: f64 = rdp_noise_scale(*eps, *delta, *t, *q, conv)?;
            let mut out = output(cli)?;
            match cli.format {
                OutFormat::Csv => writeln!(out, "{sigma}")?,
                OutFormat::Json => {
                    let achieved: f64 = rdp_epsilon(sigma, *q, *t, *delta, conv);
                    writeln!(out, "{}", serde_json::json!({ "sigma": sigma, "eps": achieved }))?
                }
            }
            Ok(out.flush()?)
        }
        Command::ValidityCheck { mech, n, guesser, claimed_eps, trials, mode } => {
            let mech = mech.build()?;
            let claimed = match (claimed_eps, &mech) {
                (Some(e), _) => *e,
                (None, Mechanism::Lrr { eps } | Mechanism::Xrr { eps } | Mechanism::LocalLaplace { eps }) => *eps,
                (None, _) => return Err(Error::Config("--claimed-eps is required for this mechanism".into())),
            };
            let mode = match mode {
                ModeArg::OneRun => ValidityMode::OneRun,
                ModeArg::Adaptive => ValidityMode::Adaptive,
                ModeArg::FullKnowledge => ValidityMode::FullKnowledge,
            };
            let rep = validity_check(&mech, *n, &guesser.build()?, mode, claimed, beta, *trials, seed)?;
            emit_record(
                cli,
                &[
                    ("trials", rep.trials.to_string()),
                    ("exceed", rep.exceed.to_string()),
                    ("rate", rep.rate.to_string()),
                    ("limit", rep.limit.to_string()),
                    ("valid", rep.valid().to_string()),
                ],
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
