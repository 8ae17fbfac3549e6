//! Per-episode stacker training: method dispatch, the ReFES lambda grid
//! search and the snapshot/cross-validation ablations.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::{fold_training_sets, full_support_set, select_training_logits, TrainingSet};
use crate::episode::{EpisodeBundle, LogitTensor};
use crate::error::{Error, Result};
use crate::kernel::{
    self, feature_map_len, loss_and_grad, omission_rate, ConFesKernel, FesKernel, Kernel, Method,
    RegConfig, StackingData, DEFAULT_ABS_EPS, DEFAULT_RIDGE,
};
use crate::optim::{init_params, minimize, OptimConfig, OptimReport, Termination};

/// Candidate strengths for the two fused lasso terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub pool1: Vec<f64>,
    pub pool2: Vec<f64>,
}

/// `1, 1e-1, ..., 1e-6, 0`.
pub const DEFAULT_LAMBDA_POOL: [f64; 8] = [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 0.0];

impl Default for LambdaGrid {
    fn default() -> Self {
        Self {
            pool1: DEFAULT_LAMBDA_POOL.to_vec(),
            pool2: DEFAULT_LAMBDA_POOL.to_vec(),
        }
    }
}

impl LambdaGrid {
    pub fn new(pool1: Vec<f64>, pool2: Vec<f64>) -> Result<Self> {
        let grid = Self { pool1, pool2 };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool1.is_empty() || self.pool2.is_empty() {
            return Err(Error::Config("lambda pools must be non-empty".into()));
        }
        if self
            .pool1
            .iter()
            .chain(&self.pool2)
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config("lambda values must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Grid cells in row-major order over `(pool1, pool2)`.
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.pool1
            .iter()
            .flat_map(|&a| self.pool2.iter().map(move |&b| (a, b)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    NoCv,
    FirstSnapshotOnly,
    LastSnapshotOnly,
    NoCvFirst,
    NoCvLast,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::Full,
        AblationMode::NoCv,
        AblationMode::FirstSnapshotOnly,
        AblationMode::LastSnapshotOnly,
        AblationMode::NoCvFirst,
        AblationMode::NoCvLast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoCv => "no_cv",
            AblationMode::FirstSnapshotOnly => "first_only",
            AblationMode::LastSnapshotOnly => "last_only",
            AblationMode::NoCvFirst => "no_cv_first",
            AblationMode::NoCvLast => "no_cv_last",
        }
    }

    pub fn uses_cv(self) -> bool {
        matches!(
            self,
            AblationMode::Full | AblationMode::FirstSnapshotOnly | AblationMode::LastSnapshotOnly
        )
    }

    pub fn snapshots(self, n_snapshots: usize) -> SnapshotSelection {
        match self {
            AblationMode::Full | AblationMode::NoCv => SnapshotSelection::All,
            AblationMode::FirstSnapshotOnly | AblationMode::NoCvFirst => SnapshotSelection::Single(0),
            AblationMode::LastSnapshotOnly | AblationMode::NoCvLast => {
                SnapshotSelection::Single(n_snapshots - 1)
            }
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

/// Which snapshots of every extractor the stacker sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotSelection {
    All,
    Single(usize),
}

impl SnapshotSelection {
    pub fn apply(self, logits: &LogitTensor) -> Result<LogitTensor> {
        match self {
            SnapshotSelection::All => Ok(logits.clone()),
            SnapshotSelection::Single(j) => logits.select_snapshots(&[j]),
        }
    }

    fn apply_set(self, set: TrainingSet) -> Result<TrainingSet> {
        match self {
            SnapshotSelection::All => Ok(set),
            SnapshotSelection::Single(j) => set.with_snapshots(&[j]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackerConfig {
    pub method: Method,
    /// Ridge strength for FES and ConFES.
    pub ridge: f64,
    /// ConFES convolution size `J_b`.
    pub conv_size: usize,
    /// ConFES stride `T`.
    pub stride: usize,
    pub grid: LambdaGrid,
    pub optim: OptimConfig,
    pub abs_smoothing_eps: f64,
}

impl Default for StackerConfig {
    fn default() -> Self {
        Self {
            method: Method::Fes,
            ridge: DEFAULT_RIDGE,
            conv_size: 9,
            stride: 4,
            grid: LambdaGrid::default(),
            optim: OptimConfig::default(),
            abs_smoothing_eps: DEFAULT_ABS_EPS,
        }
    }
}

impl StackerConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    /// Checks the settings against an episode with `n_snapshots` snapshots.
    pub fn validate(&self, n_snapshots: usize) -> Result<()> {
        self.optim.validate()?;
        self.grid.validate()?;
        self.reg(0.0, 0.0).validate()?;
        if self.method == Method::ConFes {
            feature_map_len(n_snapshots, self.conv_size, self.stride)?;
        }
        Ok(())
    }

    fn reg(&self, lambda1: f64, lambda2: f64) -> RegConfig {
        let mut reg = match self.method {
            Method::Fes => RegConfig::fes(self.ridge),
            Method::ConFes => RegConfig::confes(self.ridge),
            Method::ReFes => RegConfig::refes(lambda1, lambda2),
        };
        reg.abs_smoothing_eps = self.abs_smoothing_eps;
        reg
    }

    /// Freshly initialised kernel for `k` extractors and `j` snapshots. A
    /// single-snapshot ConFES kernel degenerates to `J_b = T = 1`.
    fn initial_kernel(&self, k: usize, j: usize) -> Result<Kernel> {
        let template = match self.method {
            Method::Fes | Method::ReFes => Kernel::Flat(FesKernel::constant(k, j, 0.0)),
            Method::ConFes => {
                let (size, stride) = if j == 1 { (1, 1) } else { (self.conv_size, self.stride) };
                Kernel::Conv(ConFesKernel::constant(k, j, size, stride, 0.0)?)
            }
        };
        let init = init_params(template.levels(), template.param_count())?;
        Ok(template.with_params(&init))
    }
}

/// A trained stacker plus its training diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedStacker {
    pub method: Method,
    pub ablation: AblationMode,
    pub snapshots: SnapshotSelection,
    /// Raw parameters.
    pub kernel: Kernel,
    /// Clipped (and for ConFES expanded) `K x J` weights.
    pub effective: Array2<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    /// `C_sub`: classes present in the stacker training data.
    pub training_classes: usize,
    pub used_full_support: bool,
    pub final_loss: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub omission_rate: f64,
    /// ReFES fold-level fits run by the grid search.
    pub fold_trainings: usize,
}

impl TrainedStacker {
    pub fn predict(&self, query: &LogitTensor) -> Result<(Vec<u32>, Array2<f64>)> {
        kernel::predict(&self.kernel, &self.snapshots.apply(query)?)
    }

    pub fn accuracy(&self, query: &LogitTensor, labels: &[u32]) -> Result<f64> {
        let (pred, _) = self.predict(query)?;
        Ok(correct(&pred, labels) as f64 / labels.len() as f64)
    }
}

fn correct(pred: &[u32], labels: &[u32]) -> usize {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count()
}

fn fit(template: &Kernel, data: &StackingData, reg: &RegConfig, optim: &OptimConfig) -> Result<(Kernel, OptimReport)> {
    // Surface shape/config errors before entering the optimizer.
    loss_and_grad(template, data, reg)?;
    let objective = |params: &[f64]| {
        loss_and_grad(&template.with_params(params), data, reg).expect("validated shapes")
    };
    let (params, report) = minimize(objective, template.params(), optim)?;
    Ok((template.with_params(&params), report))
}

/// Lambda search outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub lambda1: f64,
    pub lambda2: f64,
    pub fold_trainings: usize,
    /// Correct predictions summed over both held-out folds, per grid cell in
    /// [`LambdaGrid::pairs`] order.
    pub scores: Vec<usize>,
}

/// Picks ReFES strengths by two-fold cross-validation over the CV logits.
pub fn grid_search_refes(bundle: &EpisodeBundle, grid: &LambdaGrid, config: &StackerConfig) -> Result<GridOutcome> {
    grid_search_on(bundle, &bundle.support_cv_logits, SnapshotSelection::All, grid, config)
}

fn grid_search_on(
    bundle: &EpisodeBundle,
    source: &LogitTensor,
    snapshots: SnapshotSelection,
    grid: &LambdaGrid,
    config: &StackerConfig,
) -> Result<GridOutcome> {
    grid.validate()?;
    let Some(folds) = fold_training_sets(bundle, source)? else {
        return Ok(GridOutcome {
            lambda1: 0.0,
            lambda2: 0.0,
            fold_trainings: 0,
            scores: Vec::new(),
        });
    };
    let [a, b] = folds;
    let a = snapshots.apply_set(a)?;
    let b = snapshots.apply_set(b)?;
    let data = [
        StackingData::new(&a.logits, &a.labels)?,
        StackingData::new(&b.logits, &b.labels)?,
    ];
    let held_out = [(&b.logits, &b.labels), (&a.logits, &a.labels)];
    let refes = StackerConfig {
        method: Method::ReFes,
        ..config.clone()
    };
    let template = refes.initial_kernel(a.logits.n_extractors(), a.logits.n_snapshots())?;

    let pairs = grid.pairs();
    let scores = pairs
        .par_iter()
        .map(|&(l1, l2)| -> Result<usize> {
            let reg = refes.reg(l1, l2);
            let mut total = 0;
            for (train, (logits, labels)) in data.iter().zip(held_out) {
                let (kernel, _) = fit(&template, train, &reg, &config.optim)?;
                let (pred, _) = kernel::predict(&kernel, logits)?;
                total += correct(&pred, labels);
            }
            Ok(total)
        })
        .collect::<Result<Vec<_>>>()?;

    // Highest score; ties go to the larger lambda1, then the larger lambda2.
    let best = (0..pairs.len())
        .max_by(|&i, &j| {
            scores[i]
                .cmp(&scores[j])
                .then(pairs[i].0.total_cmp(&pairs[j].0))
                .then(pairs[i].1.total_cmp(&pairs[j].1))
        })
        .expect("non-empty grid");
    Ok(GridOutcome {
        lambda1: pairs[best].0,
        lambda2: pairs[best].1,
        fold_trainings: 2 * pairs.len(),
        scores,
    })
}

/// Training set the stacker would see under `ablation`, before any snapshot
/// restriction.
pub fn ablation_training_set(bundle: &EpisodeBundle, ablation: AblationMode) -> Result<TrainingSet> {
    let set = if ablation.uses_cv() {
        select_training_logits(bundle)?
    } else {
        full_support_set(bundle)?
    };
    ablation.snapshots(bundle.n_snapshots()).apply_set(set)
}

/// Trains one stacker on `bundle` under `ablation`.
pub fn train_stacker(bundle: &EpisodeBundle, config: &StackerConfig, ablation: AblationMode) -> Result<TrainedStacker> {
    config.validate(bundle.n_snapshots())?;
    let snapshots = ablation.snapshots(bundle.n_snapshots());
    let set = ablation_training_set(bundle, ablation)?;
    let data = StackingData::new(&set.logits, &set.labels)?;

    let (lambdas, fold_trainings) = if config.method == Method::ReFes {
        let source = if ablation.uses_cv() {
            &bundle.support_cv_logits
        } else {
            &bundle.support_full_logits
        };
        let outcome = grid_search_on(bundle, source, snapshots, &config.grid, config)?;
        ((outcome.lambda1, outcome.lambda2), outcome.fold_trainings)
    } else {
        ((0.0, 0.0), 0)
    };
    let reg = config.reg(lambdas.0, lambdas.1);
    let template = config.initial_kernel(set.logits.n_extractors(), set.logits.n_snapshots())?;
    let (kernel, report) = fit(&template, &data, &reg, &config.optim)?;
    let effective = kernel.effective();
    let is_refes = config.method == Method::ReFes;
    Ok(TrainedStacker {
        method: config.method,
        ablation,
        snapshots,
        omission_rate: omission_rate(&effective),
        effective,
        kernel,
        lambda1: is_refes.then_some(lambdas.0),
        lambda2: is_refes.then_some(lambdas.1),
        training_classes: set.n_classes(),
        used_full_support: set.used_full_support,
        final_loss: report.final_loss,
        grad_inf_norm: report.grad_inf_norm,
        iterations: report.iterations,
        termination: report.termination,
        fold_trainings,
    })
}
