//! KKL observers whose target dynamics are banks of nonlinear contracting scalar filters.
//!
//! The crate covers the whole pipeline: plant flows and Lie derivatives ([`dynsys`]), scalar
//! contraction maps ([`contraction`]), filter banks ([`filterbank`]), the numerically
//! constructed immersion and its nearest-neighbour inverse ([`kklmap`]), the asymptotic
//! expansion of the immersion in inverse powers of the gain ([`expansion`]) and the
//! convergence/noise benchmark on the Duffing oscillator ([`experiments`]).

pub mod contraction;
pub mod dynsys;
pub mod error;
pub mod expansion;
pub mod experiments;
pub mod filterbank;
pub mod fit;
pub mod kdtree;
pub mod kklmap;
pub mod ode;
pub mod stencil;

pub use contraction::{ContractionMap, ContractionSpec, DeclaredBounds};
pub use dynsys::{DynamicalSystem, PlantRegistry, StateBox, Trajectory};
pub use error::{KklError, Result};
pub use expansion::{ExpansionEval, PhiFamily, ScalingQuantity, ScalingReport};
pub use experiments::{BenchReport, ExperimentConfig, ObserverRun, ScenarioConfig};
pub use filterbank::{BankSpec, FilterBank, OutputSignal};
pub use kklmap::{KklDataset, Lookup};
