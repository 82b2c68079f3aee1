use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use kkl_core::contraction::{estimate_bounds, solve_psi, BoundsReport, PSI_TOL};
use kkl_core::expansion::{
    eval_bold_ta, lipschitz_study, scaling_study, vandermonde, verify_lemma_lfta, ScalingOptions,
};
use kkl_core::experiments::{aggregate_table, init_thread_pool, run_experiment, write_table};
use kkl_core::kklmap::DatasetConfig;
use kkl_core::{
    BenchReport, ContractionSpec, ExperimentConfig, PhiFamily, PlantRegistry, ScalingQuantity, StateBox,
};

#[derive(Parser)]
#[command(name = "kkl", version, about = "Build, verify and benchmark KKL observers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a grid of initial conditions and store (x, z) pairs.
    GenDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check contraction bounds, the zero map, the bank assembly and the Lie-derivative identity.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit how omega or R decays with the gain.
    Scaling {
        #[arg(long)]
        quantity: ScalingQuantity,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        lambdas: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Expansion order; overrides the config.
        #[arg(long)]
        m: Option<usize>,
        /// Fit the Lipschitz quotient of R over nearby pairs instead (R only).
        #[arg(long)]
        lipschitz: bool,
        /// CSV of (lambda, norm); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Slope summary as JSON; stdout when omitted.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run both benchmark scenarios and write reports, series and the summary table.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Build datasets that are not on disk yet.
        #[arg(long)]
        generate: bool,
    },
    /// Rebuild the summary table from the reports written by `run`.
    Table {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output stem; `.txt` and `.json` are written next to each other.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ExpansionConfig {
    plant: String,
    sigma: ContractionSpec,
    m: usize,
    /// Sample points are a `samples x samples` grid over this box.
    sample_box: StateBox,
    samples: usize,
    /// Gains for the identity check.
    lambdas: Vec<f64>,
    /// Gains and global gain for the bank assembly check.
    bank_lambdas: Vec<f64>,
    k: f64,
    z_range: (f64, f64),
    y_range: (f64, f64),
    psi_samples: usize,
    /// Offset between the two points of each Lipschitz pair.
    pair_offset: Vec<f64>,
    dt: f64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            plant: "duffing".into(),
            sigma: ContractionSpec::TanhBlend {
                a_fast: -5.0,
                a_slow: -0.5,
            },
            m: 2,
            sample_box: StateBox::new(vec![-1.6, -1.5], vec![1.6, 1.5]).expect("valid box"),
            samples: 5,
            lambdas: vec![10.0, 40.0],
            bank_lambdas: vec![2.0, 4.0, 6.0],
            k: 1.0,
            z_range: (-5.0, 5.0),
            y_range: (-5.0, 5.0),
            psi_samples: 1000,
            pair_offset: vec![0.05, -0.03],
            dt: 1e-3,
        }
    }
}

impl ExpansionConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
                serde_json::from_reader(f).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    fn family(&self, m: usize) -> Result<PhiFamily> {
        let system = PlantRegistry::default().get(&self.plant)?;
        Ok(PhiFamily::new(system, self.sigma.build()?, m)?)
    }

    fn points(&self) -> Vec<Vec<f64>> {
        self.sample_box.grid_points(self.samples.max(2))
    }
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    bounds: BoundsReport,
    psi_max_residual: f64,
    two_path_max_diff: f64,
    cond_v: f64,
    lemma_max_residual: f64,
    pass: bool,
}

fn verify(cfg: &ExpansionConfig) -> Result<VerifyReport> {
    let cm = cfg.sigma.build()?;
    let bounds = estimate_bounds(&cm, cfg.z_range, cfg.y_range, (101, 101));
    let n = cfg.psi_samples.max(2);
    let mut psi_max: f64 = 0.0;
    for i in 0..n {
        let y = cfg.y_range.0 + (cfg.y_range.1 - cfg.y_range.0) * i as f64 / (n - 1) as f64;
        psi_max = psi_max.max(cm.sigma(solve_psi(&cm, y, PSI_TOL)?, y).abs());
    }
    let points = cfg.points();
    let bold_fam = cfg.family(cfg.bank_lambdas.len())?;
    let ev = vandermonde(&cfg.bank_lambdas, cfg.k)?;
    let mut two_path: f64 = 0.0;
    for x in &points {
        let bold = eval_bold_ta(&bold_fam, &ev, x)?;
        for (b, l) in bold.iter().zip(&cfg.bank_lambdas) {
            two_path = two_path.max((b - bold_fam.eval_ta(x, cfg.k * l)?).abs());
        }
    }
    let fam = cfg.family(cfg.m)?;
    let mut lemma: f64 = 0.0;
    for x in &points {
        for &l in &cfg.lambdas {
            lemma = lemma.max(verify_lemma_lfta(&fam, x, l)?);
        }
    }
    let pass = bounds.pass && psi_max < 1e-10 && two_path < 1e-12 && lemma < 1e-5;
    Ok(VerifyReport {
        bounds,
        psi_max_residual: psi_max,
        two_path_max_diff: two_path,
        cond_v: ev.cond_v,
        lemma_max_residual: lemma,
        pass,
    })
}

#[derive(Debug, Serialize)]
struct ScalingSummary {
    quantity: ScalingQuantity,
    m: usize,
    fitted_slope: f64,
    target_slope: f64,
    pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_floor: Option<f64>,
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            let mut f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            f.write_all(text.as_bytes())?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn scaling(
    quantity: ScalingQuantity,
    lambdas: &[f64],
    cfg: &ExpansionConfig,
    lipschitz: bool,
    out: Option<&Path>,
    json: Option<&Path>,
) -> Result<bool> {
    let fam = cfg.family(cfg.m)?;
    let mut opts = ScalingOptions::default();
    opts.numeric_t.dt = cfg.dt;
    let points = cfg.points();
    let (report, floor) = if lipschitz {
        if quantity != ScalingQuantity::R {
            bail!("--lipschitz applies to R only");
        }
        let pairs: Vec<_> = points
            .iter()
            .map(|x| (x.clone(), x.iter().zip(&cfg.pair_offset).map(|(a, b)| a + b).collect()))
            .collect();
        let l = lipschitz_study(&fam, &pairs, lambdas, &opts)?;
        (l.report, l.lambda_floor)
    } else {
        (scaling_study(&fam, quantity, &points, lambdas, &opts)?, None)
    };
    let mut csv = String::from("lambda,norm\n");
    for (l, n) in report.lambdas_tested.iter().zip(&report.norms) {
        csv.push_str(&format!("{},{}\n", kkl_core::kklmap::format_f64(*l), kkl_core::kklmap::format_f64(*n)));
    }
    write_or_print(out, &csv)?;
    let summary = ScalingSummary {
        quantity,
        m: cfg.m,
        fitted_slope: report.fitted_slope,
        target_slope: report.target_slope,
        pass: report.pass,
        lambda_floor: floor,
    };
    write_or_print(json, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(report.pass)
}

fn table(input: &Path, out: &Path) -> Result<()> {
    let reports = ["scenario1.json", "scenario2.json"]
        .iter()
        .map(|f| BenchReport::load(&input.join(f)))
        .collect::<kkl_core::Result<Vec<_>>>()?;
    let t = aggregate_table(&reports)?;
    write_table(&t, &out.with_extension(""))?;
    print!("{}", t.to_text());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenDataset { config, out } => {
            let cfg = DatasetConfig::load(&config)?;
            let ds = cfg.generate()?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            ds.save(&out)?;
            eprintln!("{} pairs written to {}", ds.len(), out.display());
        }
        Command::Verify { config } => {
            let cfg = ExpansionConfig::load(config.as_deref())?;
            let report = verify(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.pass {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Scaling {
            quantity,
            lambdas,
            config,
            m,
            lipschitz,
            out,
            json,
        } => {
            let mut cfg = ExpansionConfig::load(config.as_deref())?;
            if let Some(m) = m {
                cfg.m = m;
            }
            if !scaling(quantity, &lambdas, &cfg, lipschitz, out.as_deref(), json.as_deref())? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Run { config, out, generate } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let res = run_experiment(&cfg, &out, generate)?;
            print!("{}", res.table.to_text());
        }
        Command::Table { input, out } => table(&input, &out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_thread_pool() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
