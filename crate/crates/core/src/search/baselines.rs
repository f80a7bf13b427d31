use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::LayerGroups;
use crate::weightgen::{LayerId, LayerSpec, MemberId};

/// Fixed groupings used as comparisons to the gradient-similarity search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    Single,
    Random,
    DepthBin,
    CoeffCluster,
}

impl FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "random" => Ok(Self::Random),
            "depth_bin" => Ok(Self::DepthBin),
            "coeff_cluster" => Ok(Self::CoeffCluster),
            other => Err(Error::InvalidMode(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BaselineContext {
    /// Group count for `random`, bin count for `depth_bin`, k for `coeff_cluster`.
    pub groups: usize,
    pub seed: u64,
    /// Per-layer coefficient features for `coeff_cluster`.
    pub features: BTreeMap<LayerId, Vec<f64>>,
}

/// `layers` must list each member's layers in forward order.
pub fn baseline_grouping(mode: BaselineMode, layers: &[LayerSpec], ctx: &BaselineContext) -> Result<LayerGroups> {
    if layers.is_empty() {
        return Err(Error::InvalidGrouping("no layers to group".into()));
    }
    let need_groups = || {
        if ctx.groups == 0 {
            Err(Error::InvalidGrouping(format!("{mode:?} needs a positive group count")))
        } else {
            Ok(ctx.groups)
        }
    };
    let labels: Vec<usize> = match mode {
        BaselineMode::Single => vec![0; layers.len()],
        BaselineMode::Random => {
            let k = need_groups()?;
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            layers.iter().map(|_| rng.gen_range(0..k)).collect()
        }
        BaselineMode::DepthBin => depth_bins(layers, need_groups()?),
        BaselineMode::CoeffCluster => {
            let k = need_groups()?;
            let points = layers
                .iter()
                .map(|l| {
                    ctx.features.get(&l.layer_id).cloned().ok_or_else(|| {
                        Error::InvalidGrouping(format!("no coefficient features for layer {}", l.layer_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            kmeans(&points, k, ctx.seed)?
        }
    };
    let mut by_label: BTreeMap<usize, BTreeSet<LayerId>> = BTreeMap::new();
    for (l, label) in layers.iter().zip(labels) {
        by_label.entry(label).or_default().insert(l.layer_id);
    }
    Ok(LayerGroups::new(by_label.into_values().collect())?.canonical())
}

/// Equal-width bins over relative depth `index / member depth`.
fn depth_bins(layers: &[LayerSpec], bins: usize) -> Vec<usize> {
    let mut depth: BTreeMap<MemberId, usize> = BTreeMap::new();
    for l in layers {
        *depth.entry(l.member_id).or_default() += 1;
    }
    let mut seen: BTreeMap<MemberId, usize> = BTreeMap::new();
    layers
        .iter()
        .map(|l| {
            let idx = seen.entry(l.member_id).or_default();
            let rel = *idx as f64 / depth[&l.member_id] as f64;
            *idx += 1;
            ((rel * bins as f64).floor() as usize).min(bins - 1)
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means from `k` distinct seeded starting points. Returns a label
/// per point; distance ties go to the lower center index.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidGrouping("feature vectors differ in length".into()));
    }
    let k = k.min(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = sample(&mut rng, points.len(), k).into_iter().map(|i| points[i].clone()).collect();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..100 {
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if sq_dist(p, &centers[c]) < sq_dist(p, &centers[best]) {
                        best = c;
                    }
                }
                best
            })
            .collect();
        if next == labels {
            break;
        }
        labels = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weightgen::{LayerKind, WeightShape};

    fn member_layers(member: u32, first_id: u32, depth: u32) -> Vec<LayerSpec> {
        (0..depth)
            .map(|i| LayerSpec {
                layer_id: LayerId(first_id + i),
                member_id: MemberId(member),
                kind: LayerKind::Affine,
                shape: WeightShape::affine(4, 4),
            })
            .collect()
    }

    #[test]
    fn single_is_one_group() {
        let layers = member_layers(0, 0, 7);
        let g = baseline_grouping(BaselineMode::Single, &layers, &BaselineContext::default()).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.groups()[0].len(), 7);
    }

    #[test]
    fn depth_bins_follow_relative_depth() {
        let mut layers = member_layers(0, 0, 4);
        layers.extend(member_layers(1, 4, 8));
        let ctx = BaselineContext { groups: 4, ..Default::default() };
        let g = baseline_grouping(BaselineMode::DepthBin, &layers, &ctx).unwrap();
        let ids: Vec<u32> = g.groups()[0].iter().map(|l| l.0).collect();
        assert_eq!(ids, vec![0, 4, 5]);
        assert_eq!(g.len(), 4);
    }

    #[test]
    fn random_is_deterministic_per_seed() {
        let layers = member_layers(0, 0, 12);
        let ctx = BaselineContext { groups: 3, seed: 9, ..Default::default() };
        let a = baseline_grouping(BaselineMode::Random, &layers, &ctx).unwrap();
        let b = baseline_grouping(BaselineMode::Random, &layers, &ctx).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers().len(), 12);
    }

    #[test]
    fn coeff_cluster_separates_distinct_alphas() {
        let layers = member_layers(0, 0, 4);
        let features = BTreeMap::from([
            (LayerId(0), vec![1.0, 0.0]),
            (LayerId(1), vec![0.0, 1.0]),
            (LayerId(2), vec![0.95, 0.05]),
            (LayerId(3), vec![0.1, 0.9]),
        ]);
        let ctx = BaselineContext { groups: 2, seed: 1, features };
        let g = baseline_grouping(BaselineMode::CoeffCluster, &layers, &ctx).unwrap();
        let ids: Vec<Vec<u32>> = g.to_vecs().iter().map(|v| v.iter().map(|l| l.0).collect()).collect();
        assert_eq!(ids, vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn unknown_mode_is_an_error() {
        assert!(matches!("depth".parse::<BaselineMode>(), Err(Error::InvalidMode(_))));
        assert_eq!("coeff_cluster".parse::<BaselineMode>().unwrap(), BaselineMode::CoeffCluster);
    }
}
