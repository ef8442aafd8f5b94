//! Identity-balanced batch construction: a hard-class graph sampler and a
//! uniform PK baseline.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ReidDataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Anchor class plus its nearest classes in the class graph.
    Graph,
    /// Identities drawn uniformly without replacement.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub ids_per_batch: usize,
    pub instances: usize,
    /// Neighbors kept per class; must cover `ids_per_batch − 1`.
    pub neighbors: usize,
    pub refresh_epochs: usize,
    pub kind: SamplerKind,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            ids_per_batch: 16,
            instances: 4,
            neighbors: 15,
            refresh_epochs: 1,
            kind: SamplerKind::Graph,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ids_per_batch * self.instances != self.batch_size {
            return Err(Error::Config(format!(
                "batch size {} is not {} identities x {} instances",
                self.batch_size, self.ids_per_batch, self.instances
            )));
        }
        if self.ids_per_batch < 2 || self.instances < 2 {
            return Err(Error::Config(
                "batches need at least 2 identities with at least 2 instances each".into(),
            ));
        }
        if self.kind == SamplerKind::Graph && self.neighbors + 1 < self.ids_per_batch {
            return Err(Error::Config(format!(
                "graph neighbors {} cannot fill {} identities per batch",
                self.neighbors, self.ids_per_batch
            )));
        }
        if self.refresh_epochs == 0 {
            return Err(Error::Config("refresh period must be at least one epoch".into()));
        }
        Ok(())
    }
}

/// Per-class neighbor lists, most similar first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassGraph {
    pub neighbors: Vec<Vec<usize>>,
}

impl ClassGraph {
    pub fn num_classes(&self) -> usize {
        self.neighbors.len()
    }
}

/// Scores between class prototypes, given as record indices. Returns a
/// `len × len` row-major matrix where larger means more similar.
pub trait PrototypeScorer {
    fn score(&mut self, dataset: &ReidDataset, prototypes: &[usize]) -> Result<Vec<f64>>;
}

impl<F> PrototypeScorer for F
where
    F: FnMut(&ReidDataset, &[usize]) -> Result<Vec<f64>>,
{
    fn score(&mut self, dataset: &ReidDataset, prototypes: &[usize]) -> Result<Vec<f64>> {
        self(dataset, prototypes)
    }
}

/// One random exemplar per class.
pub fn pick_prototypes<R: Rng + ?Sized>(members: &[Vec<usize>], rng: &mut R) -> Result<Vec<usize>> {
    members
        .iter()
        .enumerate()
        .map(|(c, m)| {
            if m.is_empty() {
                Err(Error::Sampler(format!("class {c} has no images")))
            } else {
                Ok(m[rng.random_range(0..m.len())])
            }
        })
        .collect()
}

/// Top-`n` neighbors of each class under a square score matrix; ties go to
/// the lower class index.
pub fn neighbors_from_scores(scores: &[f64], classes: usize, n: usize) -> Result<ClassGraph> {
    if scores.len() != classes * classes {
        return Err(Error::Shape(format!(
            "prototype scores have {} entries for {classes} classes",
            scores.len()
        )));
    }
    let n = n.min(classes.saturating_sub(1));
    let neighbors = (0..classes)
        .map(|c| {
            let row = &scores[c * classes..(c + 1) * classes];
            let mut others: Vec<usize> = (0..classes).filter(|&o| o != c).collect();
            others.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            others.truncate(n);
            others
        })
        .collect();
    Ok(ClassGraph { neighbors })
}

pub fn build_class_graph<S, R>(
    dataset: &ReidDataset,
    scorer: &mut S,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<ClassGraph>
where
    S: PrototypeScorer + ?Sized,
    R: Rng + ?Sized,
{
    let classes = dataset.num_identities();
    if classes < cfg.ids_per_batch {
        return Err(Error::Sampler(format!(
            "{} has {classes} identities, fewer than {} per batch",
            dataset.name, cfg.ids_per_batch
        )));
    }
    let protos = pick_prototypes(&dataset.class_members(), rng)?;
    let scores = scorer.score(dataset, &protos)?;
    neighbors_from_scores(&scores, classes, cfg.neighbors)
}

/// One image of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchRef {
    pub record: usize,
    pub identity: usize,
    pub domain: usize,
}

fn draw_instances<R: Rng + ?Sized>(members: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if members.len() >= k {
        sample(rng, members.len(), k).into_iter().map(|i| members[i]).collect()
    } else {
        (0..k).map(|_| members[rng.random_range(0..members.len())]).collect()
    }
}

/// Identities of the next batch: graph neighborhood of a uniform anchor, or
/// a uniform draw when no graph is given.
pub fn next_classes<R: Rng + ?Sized>(
    graph: Option<&ClassGraph>,
    classes: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if classes < cfg.ids_per_batch {
        return Err(Error::Sampler(format!(
            "{classes} identities, fewer than {} per batch",
            cfg.ids_per_batch
        )));
    }
    match graph {
        Some(g) => {
            if g.num_classes() != classes {
                return Err(Error::Sampler(format!(
                    "class graph covers {} classes, dataset has {classes}",
                    g.num_classes()
                )));
            }
            let anchor = rng.random_range(0..classes);
            let near = &g.neighbors[anchor];
            if near.len() + 1 < cfg.ids_per_batch {
                return Err(Error::Sampler(format!("class {anchor} has too few neighbors")));
            }
            let mut ids = vec![anchor];
            ids.extend_from_slice(&near[..cfg.ids_per_batch - 1]);
            Ok(ids)
        }
        None => Ok(sample(rng, classes, cfg.ids_per_batch).into_vec()),
    }
}

/// `ids_per_batch × instances` references, grouped by identity.
pub fn next_batch<R: Rng + ?Sized>(
    graph: Option<&ClassGraph>,
    dataset: &ReidDataset,
    members: &[Vec<usize>],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<BatchRef>> {
    let ids = next_classes(graph, members.len(), cfg, rng)?;
    let mut refs = Vec::with_capacity(cfg.batch_size);
    for c in ids {
        if members[c].is_empty() {
            return Err(Error::Sampler(format!("class {c} has no images")));
        }
        for record in draw_instances(&members[c], cfg.instances, rng) {
            refs.push(BatchRef {
                record,
                identity: c,
                domain: dataset.records[record].domain,
            });
        }
    }
    Ok(refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageRecord, Split};
    use image::RgbImage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn dataset(sizes: &[usize]) -> ReidDataset {
        let img = Arc::new(RgbImage::new(1, 1));
        let records = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| {
                let img = img.clone();
                (0..n).map(move |_| ImageRecord {
                    image: img.clone(),
                    path: None,
                    identity: 0,
                    raw_identity: c as i64,
                    camera: 1,
                    domain: 0,
                })
            })
            .collect();
        ReidDataset::from_records("t", Split::Train, records)
    }

    #[test]
    fn two_classes_point_at_each_other() {
        let g = neighbors_from_scores(&[1.0, 0.2, 0.2, 1.0], 2, 1).unwrap();
        assert_eq!(g.neighbors, vec![vec![1], vec![0]]);
    }

    #[test]
    fn small_class_is_drawn_with_replacement() {
        let d = dataset(&[2, 6]);
        let cfg = SamplerConfig {
            batch_size: 8,
            ids_per_batch: 2,
            instances: 4,
            neighbors: 1,
            refresh_epochs: 1,
            kind: SamplerKind::Random,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = next_batch(None, &d, &d.class_members(), &cfg, &mut rng).unwrap();
        let small: Vec<_> = b.iter().filter(|r| r.identity == 0).collect();
        assert_eq!(small.len(), 4);
        assert!(small.iter().all(|r| r.record < 2));
    }

    #[test]
    fn too_few_classes() {
        let d = dataset(&[3, 3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut scorer = |_: &ReidDataset, p: &[usize]| Ok(vec![0.0; p.len() * p.len()]);
        let err = build_class_graph(&d, &mut scorer, &SamplerConfig::default(), &mut rng);
        assert!(matches!(err, Err(Error::Sampler(_))));
    }
}
