use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use coshape::allocation::{allocate_exhaustive, link_label};
use coshape::model::ComplexGaussian;
use coshape::quantizer::{empirical_error_cov, highres_error_cov, train_lloyd_shaped};
use coshape::shaping::{link_gamma, optimize_shaping};
use coshape::simulate::{run_mse_sweep, run_sumrate_sweep, scenario_digest, Algorithm, ExperimentConfig, Mode};
use coshape::{CovMatrix, Error, Result, Scenario, ScenarioDoc};

#[derive(Parser)]
#[command(name = "coshape", version = coshape::VERSION, about = "Cooperative CSI sharing over rate-limited backhaul")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-TX estimation MSE against backhaul rate.
    MseSweep(Common),
    /// Zero-forcing sum rate against backhaul rate.
    SumrateSweep(Common),
    /// Best split of a total backhaul budget over all links.
    Allocate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        budget: Option<u32>,
    },
    /// Train Lloyd codebooks for one link and compare with the high-resolution law.
    TrainVq {
        #[command(flatten)]
        common: Common,
        /// Sending TX (1-based).
        #[arg(long, default_value_t = 2)]
        from: usize,
        /// Receiving TX (1-based).
        #[arg(long, default_value_t = 1)]
        to: usize,
        #[arg(long, value_enum, default_value_t = Shaping::Identity)]
        shaping: Shaping,
        /// Directory for codebook JSON files.
        #[arg(long)]
        codebooks: Option<PathBuf>,
    },
    /// Resolve a cellular scenario block into explicit covariances.
    CellularScenario(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Output file; a `.json` metadata sidecar is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated rates, or `start:stop:step`.
    #[arg(long, value_parser = parse_rates)]
    rates: Option<RateList>,
    #[arg(long)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Analytic,
    #[value(alias = "trained_vq", alias = "trained-vq")]
    Trained,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Shaping {
    Identity,
    Shaped,
}

#[derive(Clone)]
struct RateList(Vec<u32>);

fn parse_rates(text: &str) -> std::result::Result<RateList, String> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| s.trim().parse::<u32>().map_err(|e| format!("bad rate '{s}': {e}"));
    match parts.as_slice() {
        [a, b, c] => {
            let (a, b, c) = (num(a)?, num(b)?, num(c)?);
            if c == 0 || a > b {
                return Err("range needs start <= stop and a positive step".into());
            }
            Ok(RateList((a..=b).step_by(c as usize).collect()))
        }
        [list] => list.split(',').map(num).collect::<std::result::Result<_, _>>().map(RateList),
        _ => Err(format!("cannot parse rate list '{text}'")),
    }
}

struct Output {
    body: String,
    digest: Option<String>,
    seed: Option<u64>,
    extra: Value,
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", common.config.display())))?;
    ExperimentConfig::from_json(&text)
}

fn sweep_config(doc: &ExperimentConfig, common: &Common) -> Result<coshape::simulate::SweepConfig> {
    let mut cfg = doc.sweep_config()?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = common.trials {
        cfg.trials = t;
    }
    if let Some(m) = common.mode {
        cfg.mode = match m {
            ModeArg::Analytic => Mode::Analytic,
            ModeArg::Trained => Mode::Trained,
        };
    }
    if let Some(r) = &common.rates {
        cfg.rates = r.0.clone();
    }
    Ok(cfg)
}

fn annotate_clamped(records: &[coshape::simulate::SweepRecord]) {
    for r in records.iter().filter(|r| r.clamped) {
        let tx = r.tx.map_or_else(|| "all".into(), |i| (i + 1).to_string());
        log::warn!("rate {} {} tx {}: low-rate clamp active", r.rate, r.algorithm.name(), tx);
    }
}

fn sweep(common: &Common, sum_rate: bool) -> Result<Output> {
    let doc = load(common)?;
    let s = doc.scenario.to_scenario()?;
    let mut cfg = sweep_config(&doc, common)?;
    let res = if sum_rate {
        if doc.sweep.algorithms.is_none() {
            cfg.algorithms = vec![Algorithm::Shaped, Algorithm::Unshaped, Algorithm::NoCoop];
        }
        run_sumrate_sweep(&s, &cfg)?
    } else {
        run_mse_sweep(&s, &cfg)?
    };
    annotate_clamped(&res.records);
    Ok(Output {
        body: res.to_csv(),
        digest: Some(res.meta.scenario_digest.clone()),
        seed: Some(cfg.seed),
        extra: json!({
            "trials": cfg.trials,
            "mode": cfg.mode.name(),
            "rates": cfg.rates,
            "records": res.records,
        }),
    })
}

fn allocate(common: &Common, budget: Option<u32>) -> Result<Output> {
    let doc = load(common)?;
    let s = doc.scenario.to_scenario()?;
    let budget = budget
        .or(doc.sweep.budget)
        .ok_or_else(|| Error::Config("allocate needs --budget or sweep.budget".into()))?;
    let res = allocate_exhaustive(&s, budget, &doc.solver)?;
    let labels: Vec<String> = res.best.links.iter().map(|&l| link_label(l)).collect();
    let mut body = labels.join(",");
    body.push_str(",avg_mse");
    for i in 0..s.k() {
        let _ = write!(body, ",mse_tx{}", i + 1);
    }
    body.push_str(",winner\n");
    for c in &res.candidates {
        let rates: Vec<String> = c.link_rates.iter().map(u32::to_string).collect();
        let per_tx: Vec<String> = c.per_tx_mse.iter().map(f64::to_string).collect();
        let _ = writeln!(
            body,
            "{},{},{},{}",
            rates.join(","),
            c.avg_mse,
            per_tx.join(","),
            c.link_rates == res.best.link_rates
        );
    }
    let winner: Vec<String> = labels.iter().zip(&res.best.link_rates).map(|(l, r)| format!("{l}={r}")).collect();
    log::info!("winner: {} avg_mse={}", winner.join(" "), res.best.avg_mse);
    Ok(Output {
        body,
        digest: Some(scenario_digest(&s)),
        seed: None,
        extra: json!({ "budget": budget, "winner": res.best }),
    })
}

fn train_vq(common: &Common, from: usize, to: usize, shaping: Shaping, dir: Option<&Path>) -> Result<Output> {
    let doc = load(common)?;
    let s = doc.scenario.to_scenario()?;
    let cfg = sweep_config(&doc, common)?;
    let (k, i) = match (from.checked_sub(1), to.checked_sub(1)) {
        (Some(k), Some(i)) if k < s.k() && i < s.k() => (k, i),
        _ => return Err(Error::Config(format!("link {from} -> {to} does not exist"))),
    };
    let slot = s
        .coop(i)
        .iter()
        .position(|&c| c == k)
        .ok_or_else(|| Error::Config(format!("TX {from} does not cooperate with TX {to}")))?;
    let gamma = link_gamma(&s, k)?;
    let source = ComplexGaussian::new(&gamma);
    let mut body = String::from("rate,shaping,trace_empirical,trace_highres,training_distortion,iterations\n");
    for &rate in &cfg.rates {
        let s_r = s.clone().with_uniform_rate(rate);
        let b = match shaping {
            Shaping::Identity => CovMatrix::identity(s.n()),
            Shaping::Shaped => optimize_shaping(&s_r, i, &s_r.rates_into(i), &cfg.solver)?.b.swap_remove(slot),
        };
        let count = cfg.train_samples.max(cfg.lloyd.min_samples_per_cell << rate.min(30));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let train: Vec<_> = (0..count).map(|_| source.sample(&mut rng)).collect();
        let held_out: Vec<_> = (0..count).map(|_| source.sample(&mut rng)).collect();
        let cb = train_lloyd_shaped(&train, &b, rate, &cfg.lloyd)?;
        let q = empirical_error_cov(&cb, &held_out)?;
        let law = highres_error_cov(&gamma, &b, rate, s.m2n())?;
        let _ = writeln!(
            body,
            "{},{},{},{},{},{}",
            rate,
            if shaping == Shaping::Shaped { "shaped" } else { "identity" },
            q.trace(),
            law.q_q.trace(),
            cb.training_distortion(),
            cb.distortion_history().len()
        );
        if let Some(dir) = dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(format!("codebook_r{from}{to}_{rate}.json")), serde_json::to_string(&cb)?)?;
        }
    }
    Ok(Output {
        body,
        digest: Some(scenario_digest(&s)),
        seed: Some(cfg.seed),
        extra: json!({ "link": [from, to], "train_samples": cfg.train_samples, "rates": cfg.rates }),
    })
}

fn cellular_scenario(common: &Common) -> Result<Output> {
    let mut doc = load(common)?;
    let cell = doc
        .scenario
        .cellular
        .as_mut()
        .ok_or_else(|| Error::Config("scenario has no cellular block".into()))?;
    if let Some(seed) = common.seed {
        cell.seed = seed;
    }
    let seed = cell.seed;
    let s: Scenario = doc.scenario.to_scenario()?;
    let resolved = ScenarioDoc::from_scenario(&s);
    let geometry = doc.scenario.cellular_geometry()?;
    let mut body = serde_json::to_string_pretty(&resolved)?;
    body.push('\n');
    Ok(Output {
        body,
        digest: Some(scenario_digest(&s)),
        seed: Some(seed),
        extra: json!({ "geometry": geometry }),
    })
}

fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn emit(command: &str, common: &Common, out: Output, started: Instant) -> Result<()> {
    let Some(path) = &common.out else {
        print!("{}", out.body);
        return Ok(());
    };
    fs::write(path, &out.body)?;
    let mut meta = json!({
        "command": command,
        "version": coshape::VERSION,
        "seed": out.seed,
        "scenario_digest": out.digest,
        "config": common.config,
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    if let (Value::Object(m), Value::Object(extra)) = (&mut meta, out.extra) {
        m.extend(extra);
    }
    let mut side = sidecar_path(path);
    if side == *path {
        side = path.with_extension("meta.json");
    }
    fs::write(side, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let (name, common, out) = match &cli.command {
        Command::MseSweep(c) => ("mse-sweep", c, sweep(c, false)),
        Command::SumrateSweep(c) => ("sumrate-sweep", c, sweep(c, true)),
        Command::Allocate { common, budget } => ("allocate", common, allocate(common, *budget)),
        Command::TrainVq { common, from, to, shaping, codebooks } => {
            ("train-vq", common, train_vq(common, *from, *to, *shaping, codebooks.as_deref()))
        }
        Command::CellularScenario(c) => ("cellular-scenario", c, cellular_scenario(c)),
    };
    emit(name, common, out?, started)
}

fn common(cli: &Cli) -> &Common {
    match &cli.command {
        Command::MseSweep(c) | Command::SumrateSweep(c) | Command::CellularScenario(c) => c,
        Command::Allocate { common, .. } | Command::TrainVq { common, .. } => common,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let level = if common(&cli).verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
