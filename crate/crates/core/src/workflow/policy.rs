//! Scripted stand-ins for the ways people chose images in the study, plus
//! the automated baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use super::{LabeledImage, Result, WorkflowError};
use crate::detector::Detection;
use crate::projection::{kmeans_cluster, Embeddings, ProjectionError};
use crate::uncertainty::{average_confidence, rank_candidates, select_al_samples};

/// Quality gate for the filtered uncertainty policy: `false` skips the image.
pub type QualityFilter = Arc<dyn Fn(&str, &[Detection]) -> bool + Send + Sync>;

#[derive(Clone)]
pub enum SelectionPolicy {
    /// Lowest average confidence first.
    UncertaintyBaseline,
    /// Cover the least-labeled k-means clusters, nearest-to-centroid first.
    Exploration,
    /// Lowest average confidence, skipping images the filter rejects.
    UncertaintyFiltered(QualityFilter),
    /// Alternate uncertainty and coverage picks. Uncertainty ranking gets a
    /// bonus of up to `class_weight` for images predicted to contain
    /// under-represented classes.
    Balanced { class_weight: f64 },
    /// Take ids from a fixed list, in order.
    Replay(Vec<String>),
}

impl fmt::Debug for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UncertaintyFiltered(_) => f.write_str("UncertaintyFiltered(..)"),
            Self::Replay(ids) => write!(f, "Replay({} ids)", ids.len()),
            Self::Balanced { class_weight } => write!(f, "Balanced {{ class_weight: {class_weight} }}"),
            other => f.write_str(other.name()),
        }
    }
}

impl SelectionPolicy {
    pub const DEFAULT_CLASS_WEIGHT: f64 = 0.05;

    pub fn name(&self) -> &'static str {
        match self {
            Self::UncertaintyBaseline => "baseline",
            Self::Exploration => "exploration",
            Self::UncertaintyFiltered(_) => "uncertainty",
            Self::Balanced { .. } => "balanced",
            Self::Replay(_) => "replay",
        }
    }

    pub fn pass_all() -> Self {
        Self::UncertaintyFiltered(Arc::new(|_, _| true))
    }

    fn needs_clusters(&self) -> bool {
        matches!(self, Self::Exploration | Self::Balanced { .. })
    }
}

/// Cluster membership with members pre-sorted by distance to their centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterIndex {
    pub cluster_of: BTreeMap<String, usize>,
    pub by_distance: Vec<Vec<String>>,
}

impl ClusterIndex {
    pub fn build(embeddings: &Embeddings, k: usize, seed: u64) -> Result<Self, ProjectionError> {
        let model = kmeans_cluster(embeddings, k, seed)?;
        let mut by_distance: Vec<Vec<(f64, String)>> = vec![Vec::new(); model.k];
        let mut cluster_of = BTreeMap::new();
        for (i, &c) in model.assignment.iter().enumerate() {
            let d: f64 = embeddings
                .row(i)
                .iter()
                .zip(&model.centroids[c])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            by_distance[c].push((d, model.ids[i].clone()));
            cluster_of.insert(model.ids[i].clone(), c);
        }
        let by_distance = by_distance
            .into_iter()
            .map(|mut v| {
                v.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
                v.into_iter().map(|(_, id)| id).collect()
            })
            .collect();
        Ok(Self {
            cluster_of,
            by_distance,
        })
    }
}

/// What a policy sees when choosing a batch.
pub struct PickContext<'a> {
    pub budget: usize,
    /// Unlabeled pool ids.
    pub candidates: &'a BTreeSet<String>,
    pub detections: &'a BTreeMap<String, Vec<Detection>>,
    pub labeled: &'a BTreeMap<String, LabeledImage>,
    pub num_classes: usize,
}

impl PickContext<'_> {
    fn confidences(&self) -> BTreeMap<String, Vec<f64>> {
        self.candidates
            .iter()
            .map(|id| {
                let c = self
                    .detections
                    .get(id)
                    .map(|ds| ds.iter().map(|d| d.confidence).collect())
                    .unwrap_or_default();
                (id.clone(), c)
            })
            .collect()
    }
}

/// A policy plus the state it carries between iterations.
#[derive(Debug)]
pub struct Selector {
    policy: SelectionPolicy,
    clusters: Option<ClusterIndex>,
    cursor: usize,
}

impl Selector {
    /// Clusters the pool when the policy needs it.
    pub fn new(policy: SelectionPolicy, pool: &Embeddings, k: usize, seed: u64) -> Result<Self> {
        let clusters = if policy.needs_clusters() {
            Some(ClusterIndex::build(pool, k.min(pool.len()).max(1), seed)?)
        } else {
            None
        };
        Ok(Self {
            policy,
            clusters,
            cursor: 0,
        })
    }

    pub fn policy(&self) -> &SelectionPolicy {
        &self.policy
    }

    /// Replay lists: how many distinct ids could still be labeled.
    pub fn replay_capacity(&self, candidates: &BTreeSet<String>) -> Option<usize> {
        match &self.policy {
            SelectionPolicy::Replay(ids) => Some(
                ids[self.cursor.min(ids.len())..]
                    .iter()
                    .filter(|id| candidates.contains(*id))
                    .collect::<BTreeSet<_>>()
                    .len(),
            ),
            _ => None,
        }
    }

    /// Chooses up to `ctx.budget` distinct candidates.
    pub fn pick(&mut self, ctx: &PickContext<'_>) -> Result<Vec<String>> {
        if ctx.budget == 0 {
            return Ok(Vec::new());
        }
        match &self.policy {
            SelectionPolicy::UncertaintyBaseline => {
                Ok(select_al_samples(&ctx.confidences(), &BTreeSet::new(), ctx.budget)?
                    .into_iter()
                    .map(|s| s.image_id)
                    .collect())
            }
            SelectionPolicy::UncertaintyFiltered(keep) => {
                let ranked = rank_candidates(&ctx.confidences(), &BTreeSet::new())?;
                Ok(ranked
                    .into_iter()
                    .filter(|s| {
                        let dets = ctx.detections.get(&s.image_id).map(Vec::as_slice).unwrap_or(&[]);
                        keep(&s.image_id, dets)
                    })
                    .take(ctx.budget)
                    .map(|s| s.image_id)
                    .collect())
            }
            SelectionPolicy::Exploration => {
                let clusters = self.clusters.as_ref().expect("built for exploration");
                let mut cover = Coverage::new(clusters, ctx);
                Ok((0..ctx.budget).map_while(|_| cover.next()).collect())
            }
            SelectionPolicy::Balanced { class_weight } => {
                let clusters = self.clusters.as_ref().expect("built for balanced");
                balanced_pick(clusters, ctx, *class_weight)
            }
            SelectionPolicy::Replay(ids) => {
                let mut out = Vec::new();
                let mut seen = BTreeSet::new();
                while out.len() < ctx.budget && self.cursor < ids.len() {
                    let id = &ids[self.cursor];
                    self.cursor += 1;
                    if ctx.candidates.contains(id) && seen.insert(id.clone()) {
                        out.push(id.clone());
                    }
                }
                if out.len() < ctx.budget {
                    return Err(WorkflowError::ReplayExhausted {
                        needed: ctx.budget,
                        available: out.len(),
                    });
                }
                Ok(out)
            }
        }
    }
}

/// Round-robin over clusters, always serving the one with the fewest labels.
struct Coverage<'a> {
    clusters: &'a ClusterIndex,
    candidates: &'a BTreeSet<String>,
    counts: Vec<usize>,
    cursors: Vec<usize>,
    taken: BTreeSet<String>,
}

impl<'a> Coverage<'a> {
    fn new(clusters: &'a ClusterIndex, ctx: &PickContext<'a>) -> Self {
        let mut counts = vec![0; clusters.by_distance.len()];
        for id in ctx.labeled.keys() {
            if let Some(&c) = clusters.cluster_of.get(id) {
                counts[c] += 1;
            }
        }
        Self {
            clusters,
            candidates: ctx.candidates,
            cursors: vec![0; counts.len()],
            counts,
            taken: BTreeSet::new(),
        }
    }

    fn available(&mut self, c: usize) -> Option<&'a String> {
        let members = &self.clusters.by_distance[c];
        while let Some(id) = members.get(self.cursors[c]) {
            if self.candidates.contains(id) && !self.taken.contains(id) {
                return Some(id);
            }
            self.cursors[c] += 1;
        }
        None
    }

    fn take(&mut self, id: &str) {
        self.taken.insert(id.to_owned());
        if let Some(&c) = self.clusters.cluster_of.get(id) {
            self.counts[c] += 1;
        }
    }

    fn next(&mut self) -> Option<String> {
        let mut best: Option<(usize, usize)> = None;
        for c in 0..self.counts.len() {
            if self.available(c).is_none() {
                continue;
            }
            if best.is_none_or(|(n, _)| self.counts[c] < n) {
                best = Some((self.counts[c], c));
            }
        }
        let (_, c) = best?;
        let id = self.available(c)?.clone();
        self.take(&id);
        Some(id)
    }
}

fn balanced_pick(clusters: &ClusterIndex, ctx: &PickContext<'_>, class_weight: f64) -> Result<Vec<String>> {
    let mut class_counts = vec![0usize; ctx.num_classes];
    for l in ctx.labeled.values() {
        for b in &l.boxes {
            if let Some(n) = class_counts.get_mut(b.class_id as usize) {
                *n += 1;
            }
        }
    }
    let max_count = class_counts.iter().copied().max().unwrap_or(0);
    let bonus = |dets: &[Detection]| -> f64 {
        if max_count == 0 {
            return 0.0;
        }
        dets.iter()
            .filter_map(|d| class_counts.get(d.class_id as usize))
            .map(|&n| 1.0 - n as f64 / max_count as f64)
            .fold(0.0, f64::max)
    };
    let mut ranked = Vec::with_capacity(ctx.candidates.len());
    for id in ctx.candidates {
        let dets = ctx.detections.get(id).map(Vec::as_slice).unwrap_or(&[]);
        let confs: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
        let key = average_confidence(&confs)? - class_weight * bonus(dets);
        ranked.push((key, id.clone()));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));

    let mut cover = Coverage::new(clusters, ctx);
    let mut uncertain = ranked.into_iter().map(|(_, id)| id);
    let mut out = Vec::with_capacity(ctx.budget);
    let mut turn = 0usize;
    let mut stalled = 0;
    while out.len() < ctx.budget && stalled < 2 {
        let next = if turn.is_multiple_of(2) {
            uncertain.by_ref().find(|id| !cover.taken.contains(id))
        } else {
            cover.next()
        };
        turn += 1;
        match next {
            Some(id) => {
                stalled = 0;
                if turn % 2 == 1 {
                    cover.take(&id);
                }
                out.push(id);
            }
            None => stalled += 1,
        }
    }
    Ok(out)
}
