//! Pattern-sets, train/validation splits and random oversampling.
//!
//! A pattern-set whose 80% share reaches 10,000 communities trains on a
//! uniform sample of exactly 10,000 and validates on the rest. Smaller sets
//! split 80/20 and their training ids are oversampled with replacement up to
//! 10,000. Oversampling replicates whole communities, never nodes or edges.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::community::CommunityId;
use crate::error::{Error, Result};
use crate::indicators::Pattern;

pub const TRAIN_TARGET: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSet {
    pub pattern: Pattern,
    /// Sorted, without duplicates.
    pub members: Vec<CommunityId>,
}

impl PatternSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainValSplit {
    pub pattern: Pattern,
    pub seed: u64,
    /// Training sequence; after oversampling ids repeat.
    pub train: Vec<CommunityId>,
    /// Sorted validation ids, disjoint from `train`.
    pub val: Vec<CommunityId>,
    pub ros_applied: bool,
}

impl TrainValSplit {
    /// Sorted distinct training ids.
    pub fn distinct_train(&self) -> Vec<CommunityId> {
        let mut ids = self.train.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// True when the pattern-set was too small for the fixed-size regime.
    pub fn is_minority(&self) -> bool {
        self.distinct_train().len() < TRAIN_TARGET
    }
}

/// Groups labeled communities by pattern; unlabeled ones are left out.
/// The result is indexed by `Pattern::index`.
pub fn build_pattern_sets(
    labeled: impl IntoIterator<Item = (CommunityId, Option<Pattern>)>,
) -> [PatternSet; 6] {
    let mut sets = Pattern::ALL.map(|pattern| PatternSet {
        pattern,
        members: Vec::new(),
    });
    for (id, label) in labeled {
        if let Some(p) = label {
            sets[p.index()].members.push(id);
        }
    }
    for s in sets.iter_mut() {
        s.members.sort_unstable();
        s.members.dedup();
    }
    sets
}

/// Number of training communities before oversampling for a set of `n`.
pub fn train_size(n: usize) -> usize {
    train_size_capped(n, TRAIN_TARGET)
}

/// [`train_size`] with a training target other than 10,000.
pub fn train_size_capped(n: usize, target: usize) -> usize {
    (n * 4 / 5).min(target)
}

/// Seeded split of a pattern-set, taken before any oversampling.
pub fn split(ps: &PatternSet, seed: u64) -> Result<TrainValSplit> {
    split_capped(ps, seed, TRAIN_TARGET)
}

/// [`split`] with a training target other than 10,000.
pub fn split_capped(ps: &PatternSet, seed: u64, target: usize) -> Result<TrainValSplit> {
    if ps.len() < 2 {
        return Err(Error::Data(format!(
            "pattern-set {} has {} communities, at least 2 are needed to split",
            ps.pattern,
            ps.len()
        )));
    }
    let mut shuffled = ps.members.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = train_size_capped(ps.len(), target);
    let mut train = shuffled[..k].to_vec();
    let mut val = shuffled[k..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok(TrainValSplit {
        pattern: ps.pattern,
        seed,
        train,
        val,
        ros_applied: false,
    })
}

/// Extends the training ids to exactly `target` entries. Every original id
/// is kept once and the remainder is drawn uniformly with replacement from
/// them. Sets already at or above `target` are returned unchanged.
pub fn oversample(split: &TrainValSplit, target: usize, seed: u64) -> TrainValSplit {
    let base = split.distinct_train();
    if base.is_empty() || split.train.len() >= target {
        return split.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = base.clone();
    train.extend((base.len()..target).map(|_| base[rng.gen_range(0..base.len())]));
    TrainValSplit {
        train,
        ros_applied: true,
        ..split.clone()
    }
}

/// Split followed by oversampling for minority sets.
pub fn prepare(ps: &PatternSet, seed: u64) -> Result<TrainValSplit> {
    prepare_capped(ps, seed, TRAIN_TARGET)
}

/// [`prepare`] with a training target other than 10,000.
pub fn prepare_capped(ps: &PatternSet, seed: u64, target: usize) -> Result<TrainValSplit> {
    if target == 0 {
        return Err(Error::Config("training target must be positive".into()));
    }
    let s = split_capped(ps, seed, target)?;
    if s.train.len() < target {
        Ok(oversample(&s, target, seed.wrapping_add(1)))
    } else {
        Ok(s)
    }
}
