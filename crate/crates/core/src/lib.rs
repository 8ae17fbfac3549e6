//! Feature extractor stacking in logit space.
//!
//! Given the logits that a collection of fine-tuned feature extractors emit at
//! every saved fine-tuning snapshot, this crate trains a non-negative linear
//! stacking classifier over the `(extractor, snapshot)` grid and uses it to
//! label query instances. Three stacker families are provided:
//!
//! * **FES**: one flat `K x J` kernel, ridge regularised.
//! * **ConFES**: a per-extractor strided 1D convolution followed by a global
//!   kernel over the resulting feature maps.
//! * **ReFES**: the flat kernel with a depthwise fused lasso penalty whose two
//!   strengths are chosen by two-fold grid search on the support set.
//!
//! Around the stacker sit the episode bundle format, cross-validation logit
//! assembly, a limited-memory quasi-Newton optimizer, a synthetic episode
//! generator with a closed-form Bayes oracle, and the statistics used to
//! compare methods over cached episodes.

pub mod cv;
pub mod episode;
mod error;
pub mod eval;
pub mod kernel;
pub mod optim;
pub mod rng;
pub mod select;
pub mod stats;
pub mod synth;

pub use cv::{
    fold_training_sets, is_strict_one_shot, select_training_logits, stratified_two_fold_split,
    FoldAssignment, TrainingSet, REMOVED,
};
pub use episode::{load_episode, save_episode, BundleManifest, EpisodeBundle, LogitTensor};
pub use error::{Error, Result};
pub use eval::{evaluate_suite, EvalReport, MethodSpec, SuiteConfig};
pub use kernel::{
    ce_loss, confes_forward, expand_confes, fes_forward, fused_lasso_penalty, loss_and_grad,
    omission_rate, predict, ridge_penalty, ConFesKernel, FesKernel, Kernel, Method, RegConfig,
    StackingData,
};
pub use optim::{init_params, minimize, OptimConfig, OptimReport};
pub use select::{
    grid_search_refes, train_stacker, AblationMode, GridOutcome, LambdaGrid, SnapshotSelection,
    StackerConfig, TrainedStacker,
};
pub use stats::{friedman_nemenyi, mean_ci95, paired_t_test, FriedmanNemenyi, TTest};
pub use synth::{bayes_oracle_accuracy, sample_episode, DomainProfile, GainSpec};
