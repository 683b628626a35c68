use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{ClassId, Dataset, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// An N-way k-shot task shape plus the seed that picks its contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, n_query: usize, seed: u64) -> Self {
        Self {
            n_way,
            k_shot,
            n_query,
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Config(format!("n_way must be >= 2, got {}", self.n_way)));
        }
        if self.k_shot < 1 {
            return Err(Error::Config("k_shot must be >= 1".into()));
        }
        if self.n_query < 1 {
            return Err(Error::Config("n_query must be >= 1".into()));
        }
        Ok(())
    }
}

/// One few-shot task. Labels are episode-local (`0..n_way`), assigned in
/// the order the classes were drawn.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<LabeledImage>,
    pub support_labels: Vec<usize>,
    /// Positions of the support images inside the split.
    pub support_index: Vec<usize>,
    pub query: Vec<LabeledImage>,
    pub query_labels: Vec<usize>,
    pub query_index: Vec<usize>,
    /// `class_map[local] = original class id`.
    pub class_map: Vec<ClassId>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_map.len()
    }

    pub fn local_label(&self, class: ClassId) -> Option<usize> {
        self.class_map.iter().position(|&c| c == class)
    }
}

/// Draws one episode; a pure function of `(dataset, split, spec)`.
pub fn sample_episode(dataset: &Dataset, split: Split, spec: &EpisodeSpec) -> Result<Episode> {
    spec.validate()?;
    let data = dataset.split(split);
    let needed = spec.k_shot + spec.n_query;
    let eligible: Vec<ClassId> = data
        .classes()
        .filter(|&c| data.class_indices(c).len() >= needed)
        .collect();
    if eligible.len() < spec.n_way {
        return Err(Error::Sampling(format!(
            "{split} split has {} classes with >= {needed} images ({} classes total), {} needed",
            eligible.len(),
            data.classes().count(),
            spec.n_way
        )));
    }
    let mut rng = rng_for(spec.seed, &[split as u64]);
    let classes: Vec<ClassId> = eligible
        .choose_multiple(&mut rng, spec.n_way)
        .copied()
        .collect();

    let mut ep = Episode {
        support: Vec::with_capacity(spec.n_way * spec.k_shot),
        support_labels: Vec::with_capacity(spec.n_way * spec.k_shot),
        support_index: Vec::with_capacity(spec.n_way * spec.k_shot),
        query: Vec::with_capacity(spec.n_way * spec.n_query),
        query_labels: Vec::with_capacity(spec.n_way * spec.n_query),
        query_index: Vec::with_capacity(spec.n_way * spec.n_query),
        class_map: classes.clone(),
    };
    for (local, &class) in classes.iter().enumerate() {
        let mut pool = data.class_indices(class).to_vec();
        pool.shuffle(&mut rng);
        for (i, &idx) in pool[..needed].iter().enumerate() {
            let img = data.images()[idx].clone();
            if i < spec.k_shot {
                ep.support.push(img);
                ep.support_labels.push(local);
                ep.support_index.push(idx);
            } else {
                ep.query.push(img);
                ep.query_labels.push(local);
                ep.query_index.push(idx);
            }
        }
    }
    Ok(ep)
}
