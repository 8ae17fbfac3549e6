//! Stratified two-fold splitting and selection of stacker training logits.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::episode::{class_counts, EpisodeBundle, LogitTensor};
use crate::error::{Error, Result};

/// Fold marker for support instances excluded from cross-validation.
pub const REMOVED: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    /// 0, 1 or [`REMOVED`] per support instance.
    pub fold_of: Vec<u8>,
    pub removed_classes: BTreeSet<u32>,
}

/// Splits support indices into two folds, class by class.
///
/// Within each class the instances are shuffled and dealt alternately to the
/// two folds; the starting fold carries over between classes so the fold
/// sizes stay balanced overall. Classes with a single support instance cannot
/// appear in both folds and are marked [`REMOVED`].
pub fn stratified_two_fold_split(labels: &[u32], seed: u64) -> Result<FoldAssignment> {
    if labels.is_empty() {
        return Err(Error::EmptySupport);
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l as usize].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![REMOVED; labels.len()];
    let mut removed_classes = BTreeSet::new();
    let mut next_fold = 0u8;
    for (class, idx) in members.iter_mut().enumerate() {
        match idx.len() {
            0 => {}
            1 => {
                removed_classes.insert(class as u32);
            }
            _ => {
                idx.shuffle(&mut rng);
                for &i in idx.iter() {
                    fold_of[i] = next_fold;
                    next_fold ^= 1;
                }
            }
        }
    }
    Ok(FoldAssignment {
        fold_of,
        removed_classes,
    })
}

pub fn is_strict_one_shot(assignment: &FoldAssignment) -> bool {
    assignment.fold_of.iter().all(|&f| f == REMOVED)
}

/// Stacker training data in a class-restricted label space.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub logits: LogitTensor,
    /// Labels remapped into `0..classes.len()`.
    pub labels: Vec<u32>,
    /// Original class index of each retained column (`C_sub` entries).
    pub classes: Vec<usize>,
    /// Set when the full-support logits stand in for the CV logits.
    pub used_full_support: bool,
}

impl TrainingSet {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Restricts `logits` to `instances` and the given class columns,
    /// remapping labels accordingly.
    pub(crate) fn build(
        logits: &LogitTensor,
        all_labels: &[u32],
        instances: &[usize],
        classes: Vec<usize>,
        used_full_support: bool,
    ) -> Result<Self> {
        let mut remap = vec![u32::MAX; logits.n_classes()];
        for (new, &old) in classes.iter().enumerate() {
            remap[old] = new as u32;
        }
        let labels = instances
            .iter()
            .map(|&i| remap[all_labels[i] as usize])
            .collect::<Vec<_>>();
        debug_assert!(labels.iter().all(|&l| l != u32::MAX));
        let logits = logits
            .select_instances(instances)?
            .select_classes(&classes)?;
        Ok(Self {
            logits,
            labels,
            classes,
            used_full_support,
        })
    }

    /// Same training set with only the listed snapshots kept.
    pub fn with_snapshots(&self, snapshots: &[usize]) -> Result<Self> {
        Ok(Self {
            logits: self.logits.select_snapshots(snapshots)?,
            ..self.clone()
        })
    }
}

fn present_classes(labels: &[u32], instances: &[usize], classes: usize) -> Vec<usize> {
    let mut seen = vec![false; classes];
    for &i in instances {
        seen[labels[i] as usize] = true;
    }
    (0..classes).filter(|&c| seen[c]).collect()
}

fn stored_assignment(bundle: &EpisodeBundle) -> FoldAssignment {
    let counts = class_counts(&bundle.support_labels, bundle.n_classes());
    FoldAssignment {
        fold_of: bundle.fold_assignment.clone(),
        removed_classes: counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 1)
            .map(|(c, _)| c as u32)
            .collect(),
    }
}

/// CV logits of every retained support instance, or the full-support logits
/// when every class is a singleton.
pub fn select_training_logits(bundle: &EpisodeBundle) -> Result<TrainingSet> {
    let assignment = stored_assignment(bundle);
    if is_strict_one_shot(&assignment) {
        return full_support_set(bundle);
    }
    let instances: Vec<usize> = (0..bundle.n_support())
        .filter(|&i| assignment.fold_of[i] != REMOVED)
        .collect();
    let classes = present_classes(&bundle.support_labels, &instances, bundle.n_classes());
    TrainingSet::build(
        &bundle.support_cv_logits,
        &bundle.support_labels,
        &instances,
        classes,
        false,
    )
}

/// Full-support logits for every support instance.
pub fn full_support_set(bundle: &EpisodeBundle) -> Result<TrainingSet> {
    let instances: Vec<usize> = (0..bundle.n_support()).collect();
    let classes = present_classes(&bundle.support_labels, &instances, bundle.n_classes());
    TrainingSet::build(
        &bundle.support_full_logits,
        &bundle.support_labels,
        &instances,
        classes,
        true,
    )
}

/// The two fold halves of `source` (CV or full-support logits), restricted
/// to the classes retained by the split. `None` for strict one-shot bundles.
pub fn fold_training_sets(
    bundle: &EpisodeBundle,
    source: &LogitTensor,
) -> Result<Option<[TrainingSet; 2]>> {
    let assignment = stored_assignment(bundle);
    if is_strict_one_shot(&assignment) {
        return Ok(None);
    }
    let retained: Vec<usize> = (0..bundle.n_support())
        .filter(|&i| assignment.fold_of[i] != REMOVED)
        .collect();
    let classes = present_classes(&bundle.support_labels, &retained, bundle.n_classes());
    let fold = |f: u8| -> Result<TrainingSet> {
        let instances: Vec<usize> = retained
            .iter()
            .copied()
            .filter(|&i| assignment.fold_of[i] == f)
            .collect();
        TrainingSet::build(
            source,
            &bundle.support_labels,
            &instances,
            classes.clone(),
            false,
        )
    };
    Ok(Some([fold(0)?, fold(1)?]))
}
