//! Numerical construction of the immersion `T` as a dataset of simulated `(x, z)` pairs, with
//! nearest-neighbour evaluation of `T` and of its left inverse.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsys::{injectivity_margin, DynamicalSystem, StateBox};
use crate::error::{KklError, Result};
use crate::filterbank::{cosimulate, BankSpec, FilterBank};
use crate::kdtree::KdTree;

/// Washout multiplier: filters run for `WASHOUT_FACTOR / min_i(k lambda_i)` before a pair is stored.
pub const WASHOUT_FACTOR: f64 = 20.0;
/// Lookups farther than this many sample spacings from the data are flagged as extrapolated.
pub const EXTRAPOLATION_FACTOR: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub plant: String,
    pub grid: usize,
    pub initial_box: StateBox,
    pub washout: f64,
    pub dt: f64,
    pub bank: Option<BankSpec>,
    /// Initial value of every filter state.
    pub z_init: f64,
    /// Grid points dropped because their simulation became non-finite.
    pub skipped: usize,
    /// Pairs stored per grid point, spaced `snapshot_interval` apart from the washout time on.
    #[serde(default = "one")]
    pub snapshots: usize,
    #[serde(default)]
    pub snapshot_interval: f64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetOptions {
    pub z_init: f64,
    /// Overrides the default washout `20 / min_i(k lambda_i)`.
    pub washout: Option<f64>,
    /// Number of pairs kept per grid point; values above 1 keep following the trajectory.
    pub snapshots: usize,
    pub snapshot_interval: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            z_init: 0.0,
            washout: None,
            snapshots: 1,
            snapshot_interval: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lookup {
    pub value: Vec<f64>,
    /// Row of the matched pair.
    pub index: usize,
    /// Distance from the query to the matched key.
    pub distance: f64,
    pub extrapolated: bool,
}

#[derive(Debug, Clone)]
pub struct KklDataset {
    xs: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
    meta: DatasetMeta,
    x_index: KdTree,
    z_index: KdTree,
    x_spacing: f64,
    z_spacing: f64,
}

impl KklDataset {
    pub fn from_pairs(xs: Vec<Vec<f64>>, zs: Vec<Vec<f64>>, meta: DatasetMeta) -> Result<Self> {
        if xs.is_empty() || xs.len() != zs.len() {
            return Err(KklError::InvalidArgument(format!(
                "dataset needs matching non-empty columns ({} x rows, {} z rows)",
                xs.len(),
                zs.len()
            )));
        }
        let (nx, nz) = (xs[0].len(), zs[0].len());
        if xs.iter().any(|x| x.len() != nx) || zs.iter().any(|z| z.len() != nz) {
            return Err(KklError::InvalidArgument("ragged dataset rows".into()));
        }
        let x_index = KdTree::build(&xs, nx);
        let z_index = KdTree::build(&zs, nz);
        let x_spacing = meta
            .initial_box
            .spacing(meta.grid)
            .into_iter()
            .fold(0.0, f64::max);
        let z_spacing = median_neighbor_distance(&z_index);
        Ok(KklDataset {
            xs,
            zs,
            meta,
            x_index,
            z_index,
            x_spacing,
            z_spacing,
        })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn xs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn zs(&self) -> &[Vec<f64>] {
        &self.zs
    }

    pub fn x_dim(&self) -> usize {
        self.xs[0].len()
    }

    pub fn z_dim(&self) -> usize {
        self.zs[0].len()
    }

    /// Grid spacing of the initial conditions (largest over axes).
    pub fn x_spacing(&self) -> f64 {
        self.x_spacing
    }

    /// Median distance from a stored `z` to its nearest other stored `z`.
    pub fn z_spacing(&self) -> f64 {
        self.z_spacing
    }

    /// Largest `|z_i - z_j| / |x_i - x_j|` over each stored `x_i` and its nearest distinct
    /// neighbour `x_j`: a local Lipschitz estimate of the stored map.
    pub fn local_lipschitz(&self) -> f64 {
        (0..self.len())
            .into_par_iter()
            .filter_map(|i| {
                let nb = self.x_index.nearest_except(&self.xs[i], Some(i))?;
                (nb.distance > 0.0).then(|| dist(&self.zs[i], &self.zs[nb.index]) / nb.distance)
            })
            .reduce(|| 0.0, f64::max)
    }

    /// `T(x)`: the `z` paired with the stored `x` nearest to the query.
    pub fn t_lookup(&self, x: &[f64]) -> Lookup {
        let nb = self.x_index.nearest(x).expect("dataset is non-empty");
        Lookup {
            value: self.zs[nb.index].clone(),
            index: nb.index,
            distance: nb.distance,
            extrapolated: nb.distance > EXTRAPOLATION_FACTOR * self.x_spacing,
        }
    }

    /// `T^inv(z)`: the `x` paired with the stored `z` nearest to the query.
    pub fn tinv_lookup(&self, z: &[f64]) -> Lookup {
        let nb = self.z_index.nearest(z).expect("dataset is non-empty");
        Lookup {
            value: self.xs[nb.index].clone(),
            index: nb.index,
            distance: nb.distance,
            extrapolated: nb.distance > EXTRAPOLATION_FACTOR * self.z_spacing,
        }
    }

    /// Writes the pairs as CSV (`x1..xn, z1..zm`, 17 significant digits) and the metadata as a
    /// JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| KklError::csv(path, e))?;
        let header: Vec<String> = (1..=self.x_dim())
            .map(|i| format!("x{i}"))
            .chain((1..=self.z_dim()).map(|i| format!("z{i}")))
            .collect();
        w.write_record(&header).map_err(|e| KklError::csv(path, e))?;
        for (x, z) in self.xs.iter().zip(&self.zs) {
            let row: Vec<String> = x.iter().chain(z).map(|v| format_f64(*v)).collect();
            w.write_record(&row).map_err(|e| KklError::csv(path, e))?;
        }
        w.flush().map_err(|e| KklError::io(path, e))?;
        let meta_path = meta_path(path);
        let file = File::create(&meta_path).map_err(|e| KklError::io(&meta_path, e))?;
        let mut bw = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut bw, &self.meta).map_err(|e| KklError::json(&meta_path, e))?;
        bw.flush().map_err(|e| KklError::io(&meta_path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta_path = meta_path(path);
        let file = File::open(&meta_path).map_err(|e| KklError::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| KklError::json(&meta_path, e))?;
        let mut r = csv::Reader::from_path(path).map_err(|e| KklError::csv(path, e))?;
        let headers = r.headers().map_err(|e| KklError::csv(path, e))?.clone();
        let nx = headers.iter().filter(|h| h.starts_with('x')).count();
        let mut xs = Vec::new();
        let mut zs = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| KklError::csv(path, e))?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| KklError::Config(format!("{}: bad number '{s}': {e}", path.display())))
                })
                .collect::<Result<_>>()?;
            xs.push(vals[..nx].to_vec());
            zs.push(vals[nx..].to_vec());
        }
        KklDataset::from_pairs(xs, zs, meta)
    }
}

/// `data.csv` -> `data.meta.json`
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Scientific notation with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn median_neighbor_distance(tree: &KdTree) -> f64 {
    if tree.len() < 2 {
        return 0.0;
    }
    let mut d: Vec<f64> = (0..tree.len())
        .into_par_iter()
        .map(|i| {
            tree.nearest_except(tree.point(i), Some(i))
                .map(|nb| nb.distance)
                .unwrap_or(0.0)
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Everything needed to build a dataset, as read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(default = "default_plant")]
    pub plant: String,
    pub bank: BankSpec,
    #[serde(default = "default_box")]
    pub initial_box: StateBox,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub z_init: f64,
    #[serde(default)]
    pub washout: Option<f64>,
    #[serde(default = "one")]
    pub snapshots: usize,
    #[serde(default)]
    pub snapshot_interval: f64,
}

fn default_plant() -> String {
    "duffing".into()
}

fn default_box() -> StateBox {
    StateBox::cube(2, 2.0).expect("valid box")
}

fn default_grid() -> usize {
    200
}

fn default_dt() -> f64 {
    1e-3
}

impl DatasetConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| KklError::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| KklError::json(path, e))
    }

    pub fn generate(&self) -> Result<KklDataset> {
        let system = crate::dynsys::PlantRegistry::default().get(&self.plant)?;
        let bank = self.bank.build()?;
        let opts = DatasetOptions {
            z_init: self.z_init,
            washout: self.washout,
            snapshots: self.snapshots,
            snapshot_interval: self.snapshot_interval,
        };
        generate_dataset_with(&system, &bank, &self.initial_box, self.grid, self.dt, &opts)
    }
}

/// Washout time `20 / min_i(k lambda_i)` for `bank`.
pub fn washout_time(bank: &FilterBank) -> f64 {
    WASHOUT_FACTOR / bank.min_gain()
}

/// Co-simulates plant and filters from every grid point of `initial` (filters at zero) and
/// stores `(x, z)` after the washout time.
pub fn generate_dataset(
    system: &DynamicalSystem,
    bank: &FilterBank,
    initial: &StateBox,
    grid: usize,
    dt: f64,
) -> Result<KklDataset> {
    generate_dataset_with(system, bank, initial, grid, dt, &DatasetOptions::default())
}

pub fn generate_dataset_with(
    system: &DynamicalSystem,
    bank: &FilterBank,
    initial: &StateBox,
    grid: usize,
    dt: f64,
    opts: &DatasetOptions,
) -> Result<KklDataset> {
    if grid < 2 {
        return Err(KklError::InvalidArgument("grid needs at least 2 points per axis".into()));
    }
    if initial.dim() != system.dim() {
        return Err(KklError::InvalidArgument("initial box dimension mismatch".into()));
    }
    if opts.snapshots == 0 || (opts.snapshots > 1 && !(opts.snapshot_interval > 0.0)) {
        return Err(KklError::InvalidArgument(
            "snapshots must be at least 1 with a positive interval when above 1".into(),
        ));
    }
    let washout = opts.washout.unwrap_or_else(|| washout_time(bank));
    let z0 = vec![opts.z_init; bank.dim()];
    let runs: Vec<Option<Vec<(Vec<f64>, Vec<f64>)>>> = initial
        .grid_points(grid)
        .par_iter()
        .map(|x0| {
            let mut t = 0.0;
            let mut state = (x0.clone(), z0.clone());
            let mut out = Vec::with_capacity(opts.snapshots);
            for j in 0..opts.snapshots {
                let t1 = washout + j as f64 * opts.snapshot_interval;
                state = cosimulate(system, bank, &state.0, &state.1, t, t1, dt, None, |_, _, _| {})
                    .ok()?;
                t = t1;
                out.push(state.clone());
            }
            Some(out)
        })
        .collect();
    let skipped = runs.iter().filter(|r| r.is_none()).count();
    if skipped > 0 {
        log::warn!("{skipped} dataset runs became non-finite and were skipped");
    }
    let (xs, zs): (Vec<_>, Vec<_>) = runs.into_iter().flatten().flatten().unzip();
    let meta = DatasetMeta {
        plant: system.name().to_string(),
        grid,
        initial_box: initial.clone(),
        washout,
        dt,
        bank: bank.spec().cloned(),
        z_init: opts.z_init,
        skipped,
        snapshots: opts.snapshots,
        snapshot_interval: opts.snapshot_interval,
    };
    KklDataset::from_pairs(xs, zs, meta)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// Leave-one-out error `|Tinv(z_i) - x_i|` of the nearest-neighbour inverse with row `i` held
/// out, at the given quantile over all rows.
pub fn inverse_error_quantile(ds: &KklDataset, quantile: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&quantile) {
        return Err(KklError::InvalidArgument(format!("quantile {quantile} outside [0, 1]")));
    }
    if ds.len() < 2 {
        return Err(KklError::InvalidArgument("need at least two pairs".into()));
    }
    let mut e: Vec<f64> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let nb = ds.z_index.nearest_except(&ds.zs[i], Some(i)).expect("non-empty index");
            dist(&ds.xs[i], &ds.xs[nb.index])
        })
        .collect();
    e.sort_by(f64::total_cmp);
    Ok(e[((e.len() - 1) as f64 * quantile).round() as usize])
}

/// Empirical Lipschitz-injectivity constant of the stored map `x -> z`.
pub fn dataset_injectivity_margin(ds: &KklDataset, min_sep: f64) -> Result<f64> {
    let pairs: Vec<(&[f64], &[f64])> = ds
        .xs
        .iter()
        .zip(&ds.zs)
        .map(|(x, z)| (x.as_slice(), z.as_slice()))
        .collect();
    injectivity_margin(&pairs, min_sep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowCompatibility {
    /// `|z(s) - T(x(s))|` with `T` taken from the dataset.
    pub residual: f64,
    /// Distance from `x(s)` to the stored point used for `T(x(s))`.
    pub lookup_distance: f64,
}

/// Transports the stored pair `row` along the coupled flow for time `s` and compares the filter
/// state with the dataset's value of `T` at the transported plant state.
pub fn flow_compatibility(
    ds: &KklDataset,
    system: &DynamicalSystem,
    bank: &FilterBank,
    row: usize,
    s: f64,
    dt: f64,
) -> Result<FlowCompatibility> {
    let (x, z) = cosimulate(system, bank, &ds.xs[row], &ds.zs[row], 0.0, s, dt, None, |_, _, _| {})?;
    let hit = ds.t_lookup(&x);
    let residual = z
        .iter()
        .zip(&hit.value)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(FlowCompatibility {
        residual,
        lookup_distance: hit.distance,
    })
}
