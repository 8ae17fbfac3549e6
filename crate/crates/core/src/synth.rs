//! Synthetic episodes with a known generative model.
//!
//! Each relevant extractor `k` emits, at snapshot `j`, the logit vector
//! `gain[k][j] * margin * onehot(y) + N(0, sigma^2 I)`; irrelevant extractors
//! emit the noise term only. Noise is drawn independently for every
//! `(instance, extractor, snapshot, class)`. Cross-validation logits are the
//! full-support logits with extra `N(0, cv_degradation^2)` noise, standing in
//! for snapshots fine-tuned on half the support set.
//!
//! Under this model the Bayes-optimal rule scores class `c` by
//! `sum_{k,j} gain[k][j] * l[k][j][c]`, which is itself a non-negative
//! flat stacking kernel, so the oracle accuracy is attainable by FES.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::cv::stratified_two_fold_split;
use crate::episode::{EpisodeBundle, LogitTensor};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, streams};

/// Separation multiplier per snapshot for the relevant extractors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GainSpec {
    /// Linear ramp from `start` at the first snapshot to `end` at the last.
    Linear { start: f64, end: f64 },
    Constant { value: f64 },
    /// Zero everywhere except 1 at the last snapshot.
    LastOnly,
    /// One curve of length `J` per entry of `relevant_extractors`.
    Explicit { curves: Vec<Vec<f64>> },
}

fn default_query_per_class() -> usize {
    10
}

fn default_margin() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    pub name: String,
    pub class_pool_size: usize,
    /// Inclusive bounds on the number of classes per episode.
    pub way_range: [usize; 2],
    /// Inclusive bounds on support instances per class.
    pub shot_range: [usize; 2],
    #[serde(default = "default_query_per_class")]
    pub query_per_class: usize,
    pub relevant_extractors: Vec<usize>,
    pub gain: GainSpec,
    #[serde(default = "default_margin")]
    pub margin: f64,
    pub noise_sigma: f64,
    /// Extra noise on CV logits; `0.25 * noise_sigma` when absent.
    #[serde(default)]
    pub cv_degradation: Option<f64>,
}

impl DomainProfile {
    /// Margin 2, unit noise, one relevant extractor (index 0) with a linear
    /// gain ramp from 0 to 1.
    pub fn example(name: &str) -> Self {
        Self {
            name: name.to_string(),
            class_pool_size: 50,
            way_range: [5, 10],
            shot_range: [1, 10],
            query_per_class: 10,
            relevant_extractors: vec![0],
            gain: GainSpec::Linear { start: 0.0, end: 1.0 },
            margin: 2.0,
            noise_sigma: 1.0,
            cv_degradation: None,
        }
    }

    pub fn cv_noise(&self) -> f64 {
        self.cv_degradation.unwrap_or(0.25 * self.noise_sigma)
    }

    pub fn validate(&self, n_extractors: usize, n_snapshots: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("profile {:?}: {msg}", self.name)));
        let [wmin, wmax] = self.way_range;
        if wmin < 5 || wmin > wmax || wmax > self.class_pool_size {
            return bad(format!(
                "way_range {:?} must lie within [5, class_pool_size = {}]",
                self.way_range, self.class_pool_size
            ));
        }
        let [smin, smax] = self.shot_range;
        if smin < 1 || smin > smax {
            return bad(format!("shot_range {:?} must satisfy 1 <= min <= max", self.shot_range));
        }
        if self.query_per_class < 1 {
            return bad("query_per_class must be >= 1".into());
        }
        if n_extractors == 0 || n_snapshots == 0 {
            return bad("K and J must be >= 1".into());
        }
        if let Some(&k) = self.relevant_extractors.iter().find(|&&k| k >= n_extractors) {
            return bad(format!("relevant extractor {k} out of range for K = {n_extractors}"));
        }
        let mut seen = self.relevant_extractors.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.relevant_extractors.len() {
            return bad("relevant_extractors contains duplicates".into());
        }
        for (name, v) in [("margin", self.margin), ("noise_sigma", self.noise_sigma), ("cv_degradation", self.cv_noise())] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        for curve in self.gain_curves(n_snapshots)? {
            if curve.iter().any(|g| !(0.0..=1.0).contains(g)) {
                return bad("gain values must lie in [0, 1]".into());
            }
            let up = curve.windows(2).all(|w| w[0] <= w[1]);
            let down = curve.windows(2).all(|w| w[0] >= w[1]);
            if !(up || down) {
                return bad("gain curves must be monotone".into());
            }
        }
        Ok(())
    }

    fn gain_curves(&self, n_snapshots: usize) -> Result<Vec<Vec<f64>>> {
        let r = self.relevant_extractors.len();
        let curves = match &self.gain {
            GainSpec::Linear { start, end } => {
                let curve = (0..n_snapshots)
                    .map(|j| {
                        if n_snapshots == 1 {
                            *end
                        } else {
                            start + (end - start) * j as f64 / (n_snapshots - 1) as f64
                        }
                    })
                    .collect::<Vec<_>>();
                vec![curve; r]
            }
            GainSpec::Constant { value } => vec![vec![*value; n_snapshots]; r],
            GainSpec::LastOnly => {
                let mut curve = vec![0.0; n_snapshots];
                curve[n_snapshots - 1] = 1.0;
                vec![curve; r]
            }
            GainSpec::Explicit { curves } => {
                if curves.len() != r || curves.iter().any(|c| c.len() != n_snapshots) {
                    return Err(Error::Config(format!(
                        "profile {:?}: explicit gain needs {r} curves of length {n_snapshots}",
                        self.name
                    )));
                }
                curves.clone()
            }
        };
        Ok(curves)
    }

    /// `K x J` gain matrix, zero on irrelevant rows.
    pub fn gain_matrix(&self, n_extractors: usize, n_snapshots: usize) -> Result<Vec<Vec<f64>>> {
        let mut m = vec![vec![0.0; n_snapshots]; n_extractors];
        for (&k, curve) in self.relevant_extractors.iter().zip(self.gain_curves(n_snapshots)?) {
            m[k] = curve;
        }
        Ok(m)
    }

    pub fn from_json_file(path: &Path) -> Result<Vec<DomainProfile>> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum OneOrMany {
            One(DomainProfile),
            Many(Vec<DomainProfile>),
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(match serde_json::from_str(&text)? {
            OneOrMany::One(p) => vec![p],
            OneOrMany::Many(v) => v,
        })
    }
}

fn fill_logits<R: Rng>(
    rng: &mut R,
    labels: &[u32],
    gain: &[Vec<f64>],
    n_classes: usize,
    margin: f64,
    sigma: f64,
) -> Vec<f64> {
    let k = gain.len();
    let j = gain[0].len();
    let mut data = Vec::with_capacity(labels.len() * k * j * n_classes);
    for &y in labels {
        for row in gain {
            for &g in row {
                for c in 0..n_classes {
                    let mean = if c == y as usize { g * margin } else { 0.0 };
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(mean + sigma * z);
                }
            }
        }
    }
    data
}

fn to_tensor(n: usize, k: usize, j: usize, c: usize, data: &[f64]) -> Result<LogitTensor> {
    LogitTensor::new(n, k, j, c, data.iter().map(|&v| v as f32).collect())
}

/// Draws one episode. Identical `(profile, K, J, seed)` give identical bundles.
pub fn sample_episode(profile: &DomainProfile, n_extractors: usize, n_snapshots: usize, seed: u64) -> Result<EpisodeBundle> {
    profile.validate(n_extractors, n_snapshots)?;
    let (k, j) = (n_extractors, n_snapshots);
    let gain = profile.gain_matrix(k, j)?;

    let mut shape_rng = stream_rng(seed, streams::SHAPE);
    let way = shape_rng.gen_range(profile.way_range[0]..=profile.way_range[1]);
    let mut pool_ids: Vec<usize> = sample(&mut shape_rng, profile.class_pool_size, way).into_vec();
    pool_ids.sort_unstable();
    let class_names = pool_ids
        .iter()
        .map(|id| format!("{}/class_{id:03}", profile.name))
        .collect();
    let mut support_labels = Vec::new();
    for c in 0..way {
        let shots = shape_rng.gen_range(profile.shot_range[0]..=profile.shot_range[1]);
        support_labels.extend(std::iter::repeat(c as u32).take(shots));
    }
    let query_labels: Vec<u32> = (0..way as u32)
        .flat_map(|c| std::iter::repeat(c).take(profile.query_per_class))
        .collect();

    let sigma = profile.noise_sigma;
    let full = fill_logits(&mut stream_rng(seed, streams::SUPPORT), &support_labels, &gain, way, profile.margin, sigma);
    let mut cv_rng = stream_rng(seed, streams::CV_NOISE);
    let cv_sigma = profile.cv_noise();
    let cv: Vec<f64> = full
        .iter()
        .map(|&v| v + cv_sigma * cv_rng.sample::<f64, _>(StandardNormal))
        .collect();
    let query = fill_logits(&mut stream_rng(seed, streams::QUERY), &query_labels, &gain, way, profile.margin, sigma);

    let ns = support_labels.len();
    let folds = stratified_two_fold_split(&support_labels, derive_seed(seed, streams::FOLDS))?;
    let bundle = EpisodeBundle {
        support_cv_logits: to_tensor(ns, k, j, way, &cv)?,
        support_full_logits: to_tensor(ns, k, j, way, &full)?,
        query_logits: to_tensor(query_labels.len(), k, j, way, &query)?,
        support_labels,
        query_labels,
        fold_assignment: folds.fold_of,
        class_names,
        domain_name: profile.name.clone(),
        episode_id: format!("{}-{seed:016x}", profile.name),
        seed,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `P(Z_0 + d > max(Z_1..Z_{C-1}))` for iid standard normals, by Simpson's
/// rule on `integral phi(z) Phi(z + d)^(C-1) dz`.
pub fn top_coordinate_probability(separation: f64, n_classes: usize) -> f64 {
    if n_classes <= 1 {
        return 1.0;
    }
    if separation.is_infinite() {
        return 1.0;
    }
    let (lo, hi) = (-12.0, 12.0);
    let steps = 4000;
    let h = (hi - lo) / steps as f64;
    let f = |z: f64| std_normal_pdf(z) * std_normal_cdf(z + separation).powi(n_classes as i32 - 1);
    let mut acc = f(lo) + f(hi);
    for i in 1..steps {
        let z = lo + i as f64 * h;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
    }
    (acc * h / 3.0).clamp(0.0, 1.0)
}

/// Effective separation `margin * ||gain||_F / sigma` of the Bayes rule.
pub fn bayes_separation(profile: &DomainProfile, n_extractors: usize, n_snapshots: usize) -> Result<f64> {
    let gain = profile.gain_matrix(n_extractors, n_snapshots)?;
    let energy: f64 = gain.iter().flatten().map(|g| g * g).sum();
    if energy == 0.0 || profile.margin == 0.0 {
        return Ok(0.0);
    }
    if profile.noise_sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(profile.margin * energy.sqrt() / profile.noise_sigma)
}

/// Query accuracy of the Bayes-optimal classifier on a `n_classes`-way
/// episode drawn from `profile`.
pub fn bayes_oracle_accuracy(profile: &DomainProfile, n_extractors: usize, n_snapshots: usize, n_classes: usize) -> Result<f64> {
    let d = bayes_separation(profile, n_extractors, n_snapshots)?;
    if d == 0.0 {
        return Ok(1.0 / n_classes as f64);
    }
    Ok(top_coordinate_probability(d, n_classes))
}

/// Min/mean/max episode shape statistics over a set of bundles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeStats {
    pub episodes: usize,
    pub support_size: [f64; 3],
    pub class_count: [f64; 3],
    pub mean_shot: [f64; 3],
}

impl ShapeStats {
    pub fn from_bundles<'a>(bundles: impl IntoIterator<Item = &'a EpisodeBundle>) -> Self {
        let mut rows: Vec<[f64; 3]> = Vec::new();
        for b in bundles {
            let ns = b.n_support() as f64;
            let c = b.n_classes() as f64;
            rows.push([ns, c, ns / c]);
        }
        let summary = |col: usize| -> [f64; 3] {
            if rows.is_empty() {
                return [0.0; 3];
            }
            let v = rows.iter().map(|r| r[col]);
            let min = v.clone().fold(f64::INFINITY, f64::min);
            let max = v.clone().fold(f64::NEG_INFINITY, f64::max);
            [min, v.sum::<f64>() / rows.len() as f64, max]
        };
        Self {
            episodes: rows.len(),
            support_size: summary(0),
            class_count: summary(1),
            mean_shot: summary(2),
        }
    }
}
