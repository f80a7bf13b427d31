use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weightgen::LayerId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityEntry {
    pub similarity: f64,
    pub a: LayerId,
    pub b: LayerId,
}

impl Eq for SimilarityEntry {}

impl Ord for SimilarityEntry {
    /// Larger similarity first; on ties the smaller `(a, b)` pair first.
    fn cmp(&self, other: &Self) -> Ordering {
        self.similarity
            .total_cmp(&other.similarity)
            .then_with(|| (other.a, other.b).cmp(&(self.a, self.b)))
    }
}

impl PartialOrd for SimilarityEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Max-priority queue of layer-pair similarities.
#[derive(Debug, Clone, Default)]
pub struct SimilarityQueue {
    heap: BinaryHeap<SimilarityEntry>,
}

impl SimilarityQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pairs are stored with the smaller layer id first.
    pub fn push(&mut self, similarity: f64, a: LayerId, b: LayerId) {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.heap.push(SimilarityEntry { similarity, a, b });
    }

    pub fn pop(&mut self) -> Option<SimilarityEntry> {
        self.heap.pop()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Entries in pop order, without consuming the queue.
    pub fn sorted_entries(&self) -> Vec<SimilarityEntry> {
        let mut v = self.heap.clone().into_sorted_vec();
        v.reverse();
        v
    }
}

impl FromIterator<(f64, LayerId, LayerId)> for SimilarityQueue {
    fn from_iter<I: IntoIterator<Item = (f64, LayerId, LayerId)>>(iter: I) -> Self {
        let mut q = Self::new();
        for (s, a, b) in iter {
            q.push(s, a, b);
        }
        q
    }
}

/// Disjoint, non-empty sets of layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroups {
    groups: Vec<BTreeSet<LayerId>>,
}

impl LayerGroups {
    pub fn new(groups: Vec<BTreeSet<LayerId>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for g in &groups {
            if g.is_empty() {
                return Err(Error::InvalidGrouping("empty group".into()));
            }
            for &l in g {
                if !seen.insert(l) {
                    return Err(Error::InvalidGrouping(format!("layer {l} appears in two groups")));
                }
            }
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[BTreeSet<LayerId>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn layers(&self) -> BTreeSet<LayerId> {
        self.groups.iter().flatten().copied().collect()
    }

    /// Adds a singleton group for every layer of `all` not yet grouped.
    pub fn with_singletons(mut self, all: impl IntoIterator<Item = LayerId>) -> Self {
        let present = self.layers();
        for l in all {
            if !present.contains(&l) {
                self.groups.push(BTreeSet::from([l]));
            }
        }
        self
    }

    /// Groups ordered by their smallest layer id.
    pub fn canonical(mut self) -> Self {
        self.groups.sort_by_key(|g| *g.iter().next().expect("groups are non-empty"));
        self
    }

    pub fn to_vecs(&self) -> Vec<Vec<LayerId>> {
        self.groups.iter().map(|g| g.iter().copied().collect()).collect()
    }
}

/// Priority-queue group assignment: pops pairs in descending similarity;
/// pairs above `epsilon` merge or extend groups (or open a new pair group),
/// and pairs at or below it place any still-ungrouped layer in a singleton.
pub fn group_by_queue(mut queue: SimilarityQueue, epsilon: f64) -> LayerGroups {
    let mut groups: Vec<BTreeSet<LayerId>> = Vec::new();
    let find = |groups: &[BTreeSet<LayerId>], l: LayerId| groups.iter().position(|g| g.contains(&l));
    while let Some(SimilarityEntry { similarity, a, b }) = queue.pop() {
        if similarity > epsilon {
            match (find(&groups, a), find(&groups, b)) {
                (Some(ga), Some(gb)) if ga == gb => {}
                (Some(ga), Some(gb)) => {
                    let (hi, lo) = (ga.max(gb), ga.min(gb));
                    let g_hi = groups.remove(hi);
                    let g_lo = groups.remove(lo);
                    groups.push(g_lo.union(&g_hi).copied().collect());
                }
                (Some(ga), None) => {
                    groups[ga].insert(b);
                }
                (None, Some(gb)) => {
                    groups[gb].insert(a);
                }
                (None, None) => groups.push(BTreeSet::from([a, b])),
            }
        } else {
            if find(&groups, a).is_none() {
                groups.push(BTreeSet::from([a]));
            }
            if find(&groups, b).is_none() {
                groups.push(BTreeSet::from([b]));
            }
        }
    }
    LayerGroups::new(groups).expect("algorithm keeps groups disjoint and non-empty")
}
