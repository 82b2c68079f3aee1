//! Convergence-time and noise-gain benchmark of KKL observers built from simulated datasets.
//!
//! Scenario 1 starts every observer from a large initial error and records when `|x_hat - x|`
//! settles below tolerance. Scenario 2 starts from the correct filter state, adds a sinusoidal
//! measurement disturbance and records the steady-state error relative to its amplitude.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contraction::ContractionSpec;
use crate::dynsys::{DynamicalSystem, PlantRegistry, StateBox};
use crate::error::{KklError, Result};
use crate::filterbank::{cosimulate, sine_noise, BankSpec, FilterBank};
use crate::kklmap::{format_f64, generate_dataset_with, inverse_error_quantile, DatasetOptions, KklDataset};

/// Environment variable capping the worker threads used for parallel runs.
pub const THREADS_ENV: &str = "KKL_THREADS";

/// Sizes the global rayon pool from `KKL_THREADS` when set. Returns the configured count.
pub fn init_thread_pool() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| KklError::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // A pool may already exist (tests, repeated calls); keep it in that case.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    InitError,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub amplitude: f64,
    pub frequency: f64,
}

/// Convergence threshold on `|x_hat - x|`: a fixed value, or a multiple of a quantile of the
/// dataset's leave-one-out inversion error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tolerance {
    Fixed(f64),
    FromDataset { quantile: f64, factor: f64 },
}

impl Tolerance {
    pub fn resolve(&self, ds: &KklDataset) -> Result<f64> {
        match *self {
            Tolerance::Fixed(v) => Ok(v),
            Tolerance::FromDataset { quantile, factor } => Ok(factor * inverse_error_quantile(ds, quantile)?),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Tolerance::Fixed(v) => v > 0.0 && v.is_finite(),
            Tolerance::FromDataset { quantile, factor } => (0.0..=1.0).contains(&quantile) && factor > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(KklError::Config(format!("invalid convergence tolerance {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverSpec {
    pub name: String,
    pub bank: BankSpec,
    pub dataset: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub observers: Vec<ObserverSpec>,
    pub plant: String,
    /// Box the initial plant states are drawn from.
    pub initial_box: StateBox,
    pub x0_count: usize,
    pub seed: u64,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_error_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    pub convergence_tol_x: Tolerance,
    pub convergence_tol_z: f64,
    pub steady_window: f64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(KklError::Config(m.to_string()));
        if self.observers.is_empty() {
            return fail("at least one observer is required");
        }
        if self.x0_count == 0 {
            return fail("x0_count must be at least 1");
        }
        if !(self.horizon > 0.0) || !(self.dt > 0.0) || self.dt > self.horizon {
            return fail("horizon and dt must be positive with dt <= horizon");
        }
        if !(self.steady_window > 0.0) || self.steady_window > self.horizon {
            return fail("steady_window must lie in (0, horizon]");
        }
        self.convergence_tol_x.validate()?;
        if !(self.convergence_tol_z > 0.0) {
            return fail("convergence_tol_z must be positive");
        }
        match (self.scenario, self.init_error_norm, self.noise) {
            (Scenario::InitError, Some(e), None) if e >= 0.0 && e.is_finite() => Ok(()),
            (Scenario::InitError, _, _) => fail("init_error scenario takes a non-negative init_error_norm and no noise"),
            (Scenario::Noise, None, Some(n)) if n.amplitude.is_finite() && n.frequency.is_finite() => Ok(()),
            (Scenario::Noise, _, _) => fail("noise scenario takes a noise block and no init_error_norm"),
        }
    }
}

/// An observer ready to run: its filter bank, dataset and resolved tolerance.
#[derive(Debug, Clone)]
pub struct Observer {
    pub name: String,
    pub bank: FilterBank,
    pub dataset: KklDataset,
    pub tol_x: f64,
}

impl Observer {
    pub fn new(name: impl Into<String>, bank: FilterBank, dataset: KklDataset, tol: Tolerance) -> Result<Self> {
        if dataset.z_dim() != bank.dim() || dataset.x_dim() == 0 {
            return Err(KklError::Config("dataset dimensions do not match the filter bank".into()));
        }
        let tol_x = tol.resolve(&dataset)?;
        Ok(Observer {
            name: name.into(),
            bank,
            dataset,
            tol_x,
        })
    }
}

/// Loads every observer's dataset, checking that it was built for the configured bank.
pub fn load_observers(cfg: &ScenarioConfig) -> Result<Vec<Observer>> {
    cfg.observers
        .iter()
        .map(|o| {
            if !o.dataset.exists() {
                return Err(KklError::Config(format!(
                    "dataset for observer {:?} not found at {}",
                    o.name,
                    o.dataset.display()
                )));
            }
            let ds = KklDataset::load(&o.dataset)?;
            if let Some(b) = &ds.meta().bank {
                if b != &o.bank {
                    return Err(KklError::Config(format!(
                        "dataset {} was built for a different bank than observer {:?}",
                        o.dataset.display(),
                        o.name
                    )));
                }
            }
            Observer::new(o.name.clone(), o.bank.build()?, ds, cfg.convergence_tol_x)
        })
        .collect()
}

/// Time series of one observer run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObserverRun {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub x_hat: Vec<Vec<f64>>,
    pub err_x: Vec<f64>,
    pub err_z: Vec<f64>,
}

impl ObserverRun {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// Co-simulates plant and observer, recording estimates and errors at every step.
pub fn simulate_run(
    system: &DynamicalSystem,
    obs: &Observer,
    x0: &[f64],
    z0: &[f64],
    horizon: f64,
    dt: f64,
    noise: Option<&(dyn Fn(f64) -> f64 + Sync)>,
) -> Result<ObserverRun> {
    let mut run = ObserverRun::default();
    let ds = &obs.dataset;
    cosimulate(system, &obs.bank, x0, z0, 0.0, horizon, dt, noise, |t, x, z| {
        let x_hat = ds.tinv_lookup(z).value;
        let t_x = ds.t_lookup(x).value;
        run.err_x.push(norm_diff(&x_hat, x));
        run.err_z.push(norm_diff(z, &t_x));
        run.times.push(t);
        run.x.push(x.to_vec());
        run.z.push(z.to_vec());
        run.x_hat.push(x_hat);
    })?;
    Ok(run)
}

/// First sample time after which `err` stays at or below `tol`; the flag is false when the last
/// sample is still above it (the horizon is returned then).
pub fn settling_time(times: &[f64], err: &[f64], tol: f64) -> (f64, bool) {
    match err.iter().rposition(|e| !(*e <= tol)) {
        None => (times.first().copied().unwrap_or(0.0), true),
        Some(i) if i + 1 < times.len() => (times[i + 1], true),
        Some(_) => (times.last().copied().unwrap_or(0.0), false),
    }
}

/// RMS of `err` over samples with `t >= t_end - window`.
pub fn window_rms(times: &[f64], err: &[f64], window: f64) -> f64 {
    let t_end = times.last().copied().unwrap_or(0.0);
    let start = t_end - window - 1e-9 * window.max(1.0);
    let (sum, n) = times
        .iter()
        .zip(err)
        .filter(|(t, _)| **t >= start)
        .fold((0.0, 0usize), |(s, n), (_, e)| (s + e * e, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        // Rounding in the mean can leave it a hair outside [min, max] for near-constant data.
        Some(Stats {
            min,
            max,
            mean: mean.clamp(min, max),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ConvTime,
    Gain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverResult {
    pub name: String,
    pub metric: Metric,
    pub stats: Stats,
    /// Per-run values in run order.
    pub values: Vec<f64>,
    /// Runs that never settled or became non-finite.
    pub flagged: Vec<usize>,
    pub tol_x: f64,
    /// Settling time of `|z - T(x)|` below `convergence_tol_z`, per run (scenario 1 only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conv_time_z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: Scenario,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub observers: Vec<ObserverResult>,
}

impl BenchReport {
    pub fn observer(&self, name: &str) -> Option<&ObserverResult> {
        self.observers.iter().find(|o| o.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| KklError::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), self).map_err(|e| KklError::json(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| KklError::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| KklError::json(path, e))
    }
}

/// Initial plant states and unit initial-error directions, one pair per run.
pub fn sample_initial_conditions(
    initial: &StateBox,
    z_dim: usize,
    count: usize,
    seed: u64,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x0: Vec<f64> = initial
                .lo
                .iter()
                .zip(&initial.hi)
                .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
                .collect();
            let u = loop {
                let g: Vec<f64> = (0..z_dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-12 {
                    break g.into_iter().map(|v| v / n).collect();
                }
            };
            (x0, u)
        })
        .collect()
}

fn unit_prefix(u: &[f64], dim: usize) -> Vec<f64> {
    let head = &u[..dim];
    let n = head.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        head.iter().map(|v| v / n).collect()
    } else {
        let mut e = vec![0.0; dim];
        e[0] = 1.0;
        e
    }
}

fn plant(cfg: &ScenarioConfig) -> Result<DynamicalSystem> {
    PlantRegistry::default().get(&cfg.plant)
}

fn max_z_dim(observers: &[Observer]) -> usize {
    observers.iter().map(|o| o.bank.dim()).max().unwrap_or(0)
}

fn scenario1_z0(cfg: &ScenarioConfig, obs: &Observer, x0: &[f64], u: &[f64]) -> Vec<f64> {
    let e = cfg.init_error_norm.unwrap_or(0.0);
    let dir = unit_prefix(u, obs.bank.dim());
    obs.dataset.t_lookup(x0).value.iter().zip(&dir).map(|(z, d)| z + e * d).collect()
}

fn noise_fn(cfg: &ScenarioConfig) -> Result<impl Fn(f64) -> f64 + Send + Sync + Clone> {
    let n = cfg.noise.ok_or_else(|| KklError::Config("noise block missing".into()))?;
    Ok(sine_noise(n.amplitude, n.frequency))
}

/// One observer run of scenario 1 for the given initial condition.
pub fn scenario1_run(system: &DynamicalSystem, cfg: &ScenarioConfig, obs: &Observer, x0: &[f64], u: &[f64]) -> Result<ObserverRun> {
    let z0 = scenario1_z0(cfg, obs, x0, u);
    simulate_run(system, obs, x0, &z0, cfg.horizon, cfg.dt, None)
}

/// One observer run of scenario 2 for the given initial condition.
pub fn scenario2_run(system: &DynamicalSystem, cfg: &ScenarioConfig, obs: &Observer, x0: &[f64]) -> Result<ObserverRun> {
    let nu = noise_fn(cfg)?;
    let z0 = obs.dataset.t_lookup(x0).value;
    simulate_run(system, obs, x0, &z0, cfg.horizon, cfg.dt, Some(&nu))
}

/// Error samples of a run from `from` on; `err_z` stays empty unless requested.
struct ErrorSeries {
    times: Vec<f64>,
    err_x: Vec<f64>,
    err_z: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn error_series(
    system: &DynamicalSystem,
    obs: &Observer,
    x0: &[f64],
    z0: &[f64],
    horizon: f64,
    dt: f64,
    noise: Option<&(dyn Fn(f64) -> f64 + Sync)>,
    from: f64,
    with_z: bool,
) -> Result<ErrorSeries> {
    let mut es = ErrorSeries {
        times: Vec::new(),
        err_x: Vec::new(),
        err_z: Vec::new(),
    };
    let ds = &obs.dataset;
    cosimulate(system, &obs.bank, x0, z0, 0.0, horizon, dt, noise, |t, x, z| {
        if t < from {
            return;
        }
        es.times.push(t);
        es.err_x.push(norm_diff(&ds.tinv_lookup(z).value, x));
        if with_z {
            es.err_z.push(norm_diff(z, &ds.t_lookup(x).value));
        }
    })?;
    Ok(es)
}

pub fn run_scenario1(cfg: &ScenarioConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let observers = load_observers(cfg)?;
    run_scenario1_with(cfg, &observers)
}

pub fn run_scenario2(cfg: &ScenarioConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let observers = load_observers(cfg)?;
    run_scenario2_with(cfg, &observers)
}

pub fn run_scenario1_with(cfg: &ScenarioConfig, observers: &[Observer]) -> Result<BenchReport> {
    cfg.validate()?;
    if cfg.scenario != Scenario::InitError {
        return Err(KklError::Config("expected an init_error scenario".into()));
    }
    let system = plant(cfg)?;
    let ics = sample_initial_conditions(&cfg.initial_box, max_z_dim(observers), cfg.x0_count, cfg.seed);
    let results = observers
        .iter()
        .map(|obs| {
            let per_run: Vec<(f64, bool, f64)> = ics
                .par_iter()
                .map(|(x0, u)| {
                    let z0 = scenario1_z0(cfg, obs, x0, u);
                    error_series(&system, obs, x0, &z0, cfg.horizon, cfg.dt, None, 0.0, true)
                })
                .map(|res| match res {
                    Ok(run) => {
                        let (t, ok) = settling_time(&run.times, &run.err_x, obs.tol_x);
                        let (tz, _) = settling_time(&run.times, &run.err_z, cfg.convergence_tol_z);
                        Ok((t, ok, tz))
                    }
                    Err(KklError::NonFinite { .. }) => Ok((cfg.horizon, false, cfg.horizon)),
                    Err(e) => Err(e),
                })
                .collect::<Result<_>>()?;
            let values: Vec<f64> = per_run.iter().map(|r| r.0).collect();
            Ok(ObserverResult {
                name: obs.name.clone(),
                metric: Metric::ConvTime,
                stats: Stats::of(&values).expect("x0_count >= 1"),
                flagged: per_run.iter().enumerate().filter(|(_, r)| !r.1).map(|(i, _)| i).collect(),
                values,
                tol_x: obs.tol_x,
                conv_time_z: per_run.iter().map(|r| r.2).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport {
        scenario: Scenario::InitError,
        seed: cfg.seed,
        config: cfg.clone(),
        observers: results,
    })
}

pub fn run_scenario2_with(cfg: &ScenarioConfig, observers: &[Observer]) -> Result<BenchReport> {
    cfg.validate()?;
    let noise = match (cfg.scenario, cfg.noise) {
        (Scenario::Noise, Some(n)) => n,
        _ => return Err(KklError::Config("expected a noise scenario".into())),
    };
    if noise.amplitude == 0.0 {
        return Err(KklError::ZeroAmplitude);
    }
    let system = plant(cfg)?;
    let nu = noise_fn(cfg)?;
    let from = cfg.horizon - cfg.steady_window - 1e-9 * cfg.steady_window.max(1.0);
    let ics = sample_initial_conditions(&cfg.initial_box, max_z_dim(observers), cfg.x0_count, cfg.seed);
    let results = observers
        .iter()
        .map(|obs| {
            let per_run: Vec<Option<f64>> = ics
                .par_iter()
                .map(|(x0, _)| {
                    let z0 = obs.dataset.t_lookup(x0).value;
                    error_series(&system, obs, x0, &z0, cfg.horizon, cfg.dt, Some(&nu), from, false)
                })
                .map(|res| match res {
                    Ok(run) => Ok(Some(window_rms(&run.times, &run.err_x, cfg.steady_window) / noise.amplitude.abs())),
                    Err(KklError::NonFinite { .. }) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect::<Result<_>>()?;
            let flagged: Vec<usize> = per_run.iter().enumerate().filter(|(_, g)| g.is_none()).map(|(i, _)| i).collect();
            let values: Vec<f64> = per_run.iter().map(|g| g.unwrap_or(f64::NAN)).collect();
            let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
            let stats = Stats::of(&finite).ok_or(KklError::NonFinite { time: cfg.horizon })?;
            Ok(ObserverResult {
                name: obs.name.clone(),
                metric: Metric::Gain,
                stats,
                values,
                flagged,
                tol_x: obs.tol_x,
                conv_time_z: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport {
        scenario: Scenario::Noise,
        seed: cfg.seed,
        config: cfg.clone(),
        observers: results,
    })
}

/// Writes `t, x1.., z1.., xhat1.., err_x, err_z` with one row per sample.
pub fn emit_run_series(run: &ObserverRun, path: &Path) -> Result<()> {
    let n = run.x.first().map_or(0, Vec::len);
    let m = run.z.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("z{i}")));
    header.extend((1..=n).map(|i| format!("xhat{i}")));
    header.push("err_x".into());
    header.push("err_z".into());
    let f = File::create(path).map_err(|e| KklError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    w.write_record(&header).map_err(|e| KklError::csv(path, e))?;
    for i in 0..run.len() {
        let mut row = vec![format_f64(run.times[i])];
        row.extend(run.x[i].iter().map(|v| format_f64(*v)));
        row.extend(run.z[i].iter().map(|v| format_f64(*v)));
        row.extend(run.x_hat[i].iter().map(|v| format_f64(*v)));
        row.push(format_f64(run.err_x[i]));
        row.push(format_f64(run.err_z[i]));
        w.write_record(&row).map_err(|e| KklError::csv(path, e))?;
    }
    w.flush().map_err(|e| KklError::io(path, e))
}

/// Reads a file written by [`emit_run_series`].
pub fn read_run_series(path: &Path) -> Result<ObserverRun> {
    let mut r = csv::Reader::from_path(path).map_err(|e| KklError::csv(path, e))?;
    let header = r.headers().map_err(|e| KklError::csv(path, e))?.clone();
    let count = |p: &str| header.iter().filter(|h| h.starts_with(p) && h[p.len()..].parse::<usize>().is_ok()).count();
    let (n, m) = (count("x"), count("z"));
    if header.len() != 1 + 2 * n + m + 2 {
        return Err(KklError::Config(format!("unexpected series header in {}", path.display())));
    }
    let mut run = ObserverRun::default();
    for rec in r.records() {
        let rec = rec.map_err(|e| KklError::csv(path, e))?;
        let v = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| KklError::Config(format!("bad number in {}: {e}", path.display())))?;
        run.times.push(v[0]);
        run.x.push(v[1..1 + n].to_vec());
        run.z.push(v[1 + n..1 + n + m].to_vec());
        run.x_hat.push(v[1 + n + m..1 + 2 * n + m].to_vec());
        run.err_x.push(v[1 + 2 * n + m]);
        run.err_z.push(v[2 + 2 * n + m]);
    }
    Ok(run)
}

/// Table of min/max/mean statistics, one column per observer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub observers: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub values: Vec<f64>,
}

impl SummaryTable {
    pub fn cell(&self, label: &str, observer: &str) -> Option<f64> {
        let col = self.observers.iter().position(|o| o == observer)?;
        self.rows.iter().find(|r| r.label == label).map(|r| r.values[col])
    }

    pub fn to_text(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
        let col_w = self.observers.iter().map(String::len).max().unwrap_or(0).max(10);
        let mut s = format!("{:label_w$}", "");
        for o in &self.observers {
            let _ = write!(s, "  {o:>col_w$}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:label_w$}", r.label);
            for v in &r.values {
                let _ = write!(s, "  {:>col_w$.3}", v);
            }
            s.push('\n');
        }
        s
    }
}

fn metric_label(m: Metric) -> &'static str {
    match m {
        Metric::ConvTime => "conv time",
        Metric::Gain => "gain",
    }
}

/// Merges scenario reports into a min/max/mean table over a common observer set.
pub fn aggregate_table(reports: &[BenchReport]) -> Result<SummaryTable> {
    let first = reports
        .first()
        .ok_or_else(|| KklError::InvalidArgument("no reports to aggregate".into()))?;
    let names: Vec<String> = first.observers.iter().map(|o| o.name.clone()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    for r in &reports[1..] {
        let mut other: Vec<String> = r.observers.iter().map(|o| o.name.clone()).collect();
        other.sort();
        if other != sorted {
            return Err(KklError::MismatchedObservers);
        }
    }
    let mut rows = Vec::new();
    for r in reports {
        let label = metric_label(r.observers.first().map_or(Metric::ConvTime, |o| o.metric));
        let stats: Vec<Stats> = names.iter().map(|n| r.observer(n).expect("checked above").stats).collect();
        for (which, pick) in [("min", 0), ("max", 1), ("mean", 2)] {
            rows.push(SummaryRow {
                label: format!("{label} {which}"),
                values: stats
                    .iter()
                    .map(|s| match pick {
                        0 => s.min,
                        1 => s.max,
                        _ => s.mean,
                    })
                    .collect(),
            });
        }
    }
    Ok(SummaryTable { observers: names, rows })
}

/// Dataset construction settings shared by all observers of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSettings {
    pub grid: usize,
    pub dt: f64,
    pub snapshots: usize,
    pub snapshot_interval: f64,
    pub z_init: f64,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        DatasetSettings {
            grid: 200,
            dt: 1e-3,
            snapshots: 4,
            snapshot_interval: 1.0,
            z_init: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverEntry {
    pub name: String,
    pub bank: BankSpec,
    /// Defaults to `<out>/datasets/<name>.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

/// Both scenarios plus dataset construction, as read from a JSON configuration. Every field has
/// a default reproducing the Duffing benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub plant: String,
    pub initial_box: StateBox,
    pub dataset: DatasetSettings,
    pub observers: Vec<ObserverEntry>,
    pub x0_count: usize,
    pub seed: u64,
    pub horizon: f64,
    pub dt: f64,
    pub init_error_norm: f64,
    pub noise: NoiseSpec,
    pub convergence_tol_x: Tolerance,
    pub convergence_tol_z: f64,
    /// Defaults to the last 20% of the horizon.
    pub steady_window: Option<f64>,
    /// Run whose time series are written for plotting.
    pub series_run: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let lambdas = vec![2.0, 4.0, 6.0];
        ExperimentConfig {
            plant: "duffing".into(),
            initial_box: StateBox::cube(2, 2.0).expect("valid box"),
            dataset: DatasetSettings::default(),
            observers: vec![
                ObserverEntry {
                    name: "fast".into(),
                    bank: BankSpec::Linear {
                        a: -5.0,
                        lambdas: lambdas.clone(),
                    },
                    dataset: None,
                },
                ObserverEntry {
                    name: "slow".into(),
                    bank: BankSpec::Linear {
                        a: -0.5,
                        lambdas: lambdas.clone(),
                    },
                    dataset: None,
                },
                ObserverEntry {
                    name: "nonlinear".into(),
                    bank: BankSpec::Nonlinear {
                        sigma: ContractionSpec::TanhBlend {
                            a_fast: -5.0,
                            a_slow: -0.5,
                        },
                        lambdas,
                        k: 1.0,
                    },
                    dataset: None,
                },
            ],
            x0_count: 100,
            seed: 2024,
            horizon: 20.0,
            dt: 1e-3,
            init_error_norm: 100.0,
            noise: NoiseSpec {
                amplitude: 0.1,
                frequency: 10.0,
            },
            convergence_tol_x: Tolerance::FromDataset {
                quantile: 0.999,
                factor: 2.0,
            },
            convergence_tol_z: 0.1,
            steady_window: None,
            series_run: Some(0),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| KklError::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| KklError::json(path, e))
    }

    pub fn dataset_path(&self, entry: &ObserverEntry, out: &Path) -> PathBuf {
        entry
            .dataset
            .clone()
            .unwrap_or_else(|| out.join("datasets").join(format!("{}.csv", entry.name)))
    }

    pub fn scenario(&self, which: Scenario, out: &Path) -> ScenarioConfig {
        ScenarioConfig {
            scenario: which,
            observers: self
                .observers
                .iter()
                .map(|o| ObserverSpec {
                    name: o.name.clone(),
                    bank: o.bank.clone(),
                    dataset: self.dataset_path(o, out),
                })
                .collect(),
            plant: self.plant.clone(),
            initial_box: self.initial_box.clone(),
            x0_count: self.x0_count,
            seed: self.seed,
            horizon: self.horizon,
            dt: self.dt,
            init_error_norm: (which == Scenario::InitError).then_some(self.init_error_norm),
            noise: (which == Scenario::Noise).then_some(self.noise),
            convergence_tol_x: self.convergence_tol_x,
            convergence_tol_z: self.convergence_tol_z,
            steady_window: self.steady_window.unwrap_or(0.2 * self.horizon),
        }
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            z_init: self.dataset.z_init,
            washout: None,
            snapshots: self.dataset.snapshots,
            snapshot_interval: self.dataset.snapshot_interval,
        }
    }
}

/// Builds and saves the dataset of every observer whose file is missing. Returns the paths
/// that were generated.
pub fn ensure_datasets(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let system = PlantRegistry::default().get(&cfg.plant)?;
    let mut made = Vec::new();
    for entry in &cfg.observers {
        let path = cfg.dataset_path(entry, out);
        if path.exists() {
            continue;
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| KklError::io(dir, e))?;
        }
        log::info!("generating dataset for {} at {}", entry.name, path.display());
        let bank = entry.bank.build()?;
        let ds = generate_dataset_with(
            &system,
            &bank,
            &cfg.initial_box,
            cfg.dataset.grid,
            cfg.dataset.dt,
            &cfg.dataset_options(),
        )?;
        ds.save(&path)?;
        made.push(path);
    }
    Ok(made)
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub scenario1: BenchReport,
    pub scenario2: BenchReport,
    pub table: SummaryTable,
}

/// Runs both scenarios and writes `scenario1.json`, `scenario2.json`, `table.txt`, `table.json`
/// and per-observer series files into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, generate_missing: bool) -> Result<ExperimentOutput> {
    std::fs::create_dir_all(out).map_err(|e| KklError::io(out, e))?;
    if generate_missing {
        ensure_datasets(cfg, out)?;
    }
    let s1 = cfg.scenario(Scenario::InitError, out);
    let s2 = cfg.scenario(Scenario::Noise, out);
    s1.validate()?;
    s2.validate()?;
    let observers = load_observers(&s1)?;
    let r1 = run_scenario1_with(&s1, &observers)?;
    let r2 = run_scenario2_with(&s2, &observers)?;
    r1.save(&out.join("scenario1.json"))?;
    r2.save(&out.join("scenario2.json"))?;

    if let Some(i) = cfg.series_run.filter(|i| *i < cfg.x0_count) {
        let system = plant(&s1)?;
        let ics = sample_initial_conditions(&s1.initial_box, max_z_dim(&observers), s1.x0_count, s1.seed);
        let (x0, u) = &ics[i];
        for obs in &observers {
            emit_run_series(&scenario1_run(&system, &s1, obs, x0, u)?, &out.join(format!("series_init_error_{}.csv", obs.name)))?;
            emit_run_series(&scenario2_run(&system, &s2, obs, x0)?, &out.join(format!("series_noise_{}.csv", obs.name)))?;
        }
    }

    let table = aggregate_table(&[r1.clone(), r2.clone()])?;
    write_table(&table, &out.join("table"))?;
    Ok(ExperimentOutput {
        scenario1: r1,
        scenario2: r2,
        table,
    })
}

/// Writes `<stem>.txt` and `<stem>.json`.
pub fn write_table(table: &SummaryTable, stem: &Path) -> Result<()> {
    let txt = stem.with_extension("txt");
    let mut f = File::create(&txt).map_err(|e| KklError::io(&txt, e))?;
    f.write_all(table.to_text().as_bytes()).map_err(|e| KklError::io(&txt, e))?;
    let js = stem.with_extension("json");
    let f = File::create(&js).map_err(|e| KklError::io(&js, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), table).map_err(|e| KklError::json(&js, e))
}
