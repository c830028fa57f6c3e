//! MIL bag construction.
//!
//! Training bags draw evenly across the phenotype clusters of one group via
//! a shuffled round-robin. Test bags ignore clusters and are cut from a
//! stream of random permutations of the group's patches, which gives every
//! patch the same number of appearances up to one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toydata::derive_seed;

pub const DEFAULT_BAG_SIZE: usize = 8;
pub const DEFAULT_TEST_BAGS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bag {
    pub bag_id: usize,
    pub group_id: usize,
    /// Row indices into the feature set.
    pub instances: Vec<usize>,
    pub label: u8,
}

/// The patches of one slide / region, with its weak label and (for
/// training) per-patch cluster assignments.
#[derive(Clone, Debug)]
pub struct Group {
    pub group_id: usize,
    pub label: u8,
    pub members: Vec<usize>,
    /// Cluster index of each member, parallel to `members`.
    pub clusters: Option<Vec<usize>>,
}

/// Draws bags from one group by shuffled round-robin over its clusters.
///
/// Within a cluster, patches are drawn without replacement until it runs
/// out, then the cluster is refilled. Without cluster labels the whole group
/// acts as a single cluster.
pub fn make_train_bags(
    group: &Group,
    bag_size: usize,
    n_bags: usize,
    seed: u64,
    first_bag_id: usize,
) -> Result<Vec<Bag>> {
    if group.members.is_empty() {
        return Err(Error::Data(format!("group {} has no patches", group.group_id)));
    }
    if bag_size == 0 {
        return Err(Error::Config("bag size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7472_6169, group.group_id as u64));

    let mut pools: Vec<Vec<usize>> = match &group.clusters {
        Some(cl) => {
            if cl.len() != group.members.len() {
                return Err(Error::Data(format!(
                    "group {}: {} cluster labels for {} members",
                    group.group_id,
                    cl.len(),
                    group.members.len()
                )));
            }
            let k = cl.iter().copied().max().unwrap_or(0) + 1;
            let mut pools = vec![Vec::new(); k];
            for (&m, &c) in group.members.iter().zip(cl) {
                pools[c].push(m);
            }
            pools.retain(|p| !p.is_empty());
            pools
        }
        None => vec![group.members.clone()],
    };
    let sources: Vec<Vec<usize>> = pools.clone();
    for p in pools.iter_mut() {
        p.shuffle(&mut rng);
    }

    let mut bags = Vec::with_capacity(n_bags);
    for b in 0..n_bags {
        let mut order: Vec<usize> = (0..pools.len()).collect();
        order.shuffle(&mut rng);
        let mut instances = Vec::with_capacity(bag_size);
        let mut slot = 0;
        while instances.len() < bag_size {
            let c = order[slot % order.len()];
            slot += 1;
            if pools[c].is_empty() {
                pools[c] = sources[c].clone();
                pools[c].shuffle(&mut rng);
            }
            instances.push(pools[c].pop().unwrap());
        }
        bags.push(Bag {
            bag_id: first_bag_id + b,
            group_id: group.group_id,
            instances,
            label: group.label,
        });
    }
    Ok(bags)
}

/// Cuts `n_bags` bags from consecutive random permutations of the group.
/// When `n_bags * bag_size >= r * |group|`, every patch appears at least
/// `r` times.
pub fn make_test_bags(
    group: &Group,
    bag_size: usize,
    n_bags: usize,
    seed: u64,
    first_bag_id: usize,
) -> Result<Vec<Bag>> {
    if n_bags == 0 {
        return Err(Error::Config("need at least one test bag".into()));
    }
    if bag_size == 0 {
        return Err(Error::Config("bag size must be positive".into()));
    }
    if group.members.is_empty() {
        return Err(Error::Data(format!("group {} has no patches", group.group_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7465_7374, group.group_id as u64));
    let mut stream: Vec<usize> = Vec::new();
    let mut bags = Vec::with_capacity(n_bags);
    for b in 0..n_bags {
        let mut instances = Vec::with_capacity(bag_size);
        while instances.len() < bag_size {
            if stream.is_empty() {
                stream = group.members.clone();
                stream.shuffle(&mut rng);
            }
            instances.push(stream.pop().unwrap());
        }
        bags.push(Bag {
            bag_id: first_bag_id + b,
            group_id: group.group_id,
            instances,
            label: group.label,
        });
    }
    Ok(bags)
}

/// Smallest bag count giving every patch of a `group_len`-patch group at
/// least `min_hits` appearances.
pub fn bags_for_coverage(group_len: usize, bag_size: usize, min_hits: usize) -> usize {
    (min_hits * group_len).div_ceil(bag_size)
}

/// Splits row indices into groups keyed by `group_ids`, in ascending id order.
pub fn group_rows(group_ids: &[usize], labels: &[u8], rows: impl IntoIterator<Item = usize>) -> Vec<Group> {
    let mut map: std::collections::BTreeMap<usize, Group> = std::collections::BTreeMap::new();
    for i in rows {
        let g = map.entry(group_ids[i]).or_insert_with(|| Group {
            group_id: group_ids[i],
            label: labels[i],
            members: Vec::new(),
            clusters: None,
        });
        g.members.push(i);
    }
    map.into_values().collect()
}

/// Shuffles `items` with a seed-derived generator.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = items.to_vec();
    v.shuffle(&mut rng);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(n: usize, k: Option<usize>) -> Group {
        Group {
            group_id: 3,
            label: 1,
            members: (100..100 + n).collect(),
            clusters: k.map(|k| (0..n).map(|i| i % k).collect()),
        }
    }

    fn cluster_of(g: &Group, m: usize) -> usize {
        let pos = g.members.iter().position(|&x| x == m).unwrap();
        g.clusters.as_ref().unwrap()[pos]
    }

    #[test]
    fn one_per_cluster_with_eight() {
        let g = group(16, Some(8));
        for bag in make_train_bags(&g, 8, 50, 1, 0).unwrap() {
            let mut seen = [0; 8];
            bag.instances.iter().for_each(|&m| seen[cluster_of(&g, m)] += 1);
            assert_eq!(seen, [1; 8]);
            assert_eq!(bag.label, 1);
            assert_eq!(bag.group_id, 3);
        }
    }

    #[test]
    fn two_per_cluster_with_four() {
        let g = group(16, Some(4));
        for bag in make_train_bags(&g, 8, 50, 2, 0).unwrap() {
            let mut seen = [0; 4];
            bag.instances.iter().for_each(|&m| seen[cluster_of(&g, m)] += 1);
            assert_eq!(seen, [2; 4]);
        }
    }

    #[test]
    fn cluster_frequency_is_uniform_over_many_bags() {
        // 3 clusters do not divide 8 slots, so which cluster gets the short
        // share varies per bag
        let g = group(30, Some(3));
        let bags = make_train_bags(&g, 8, 10_000, 11, 0).unwrap();
        let mut freq = [0f64; 3];
        for b in &bags {
            b.instances.iter().for_each(|&m| freq[cluster_of(&g, m)] += 1.0);
        }
        let n: f64 = 80_000.0;
        let p = 1.0 / 3.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for f in freq {
            assert!((f - n * p).abs() <= 3.0 * sigma, "{freq:?}");
        }
    }

    #[test]
    fn uneven_clusters_are_drawn_without_replacement_until_exhausted() {
        let g = Group {
            group_id: 0,
            label: 0,
            members: vec![0, 1, 2, 3, 4],
            clusters: Some(vec![0, 1, 1, 1, 1]),
        };
        let bags = make_train_bags(&g, 4, 1, 0, 0).unwrap();
        let inst = &bags[0].instances;
        let from_big: Vec<_> = inst.iter().filter(|&&m| m != 0).collect();
        let mut dedup = from_big.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(from_big.len(), dedup.len());
        assert_eq!(inst.iter().filter(|&&m| m == 0).count(), 2);
    }

    #[test]
    fn empty_group_fails() {
        let g = Group {
            group_id: 0,
            label: 0,
            members: vec![],
            clusters: None,
        };
        assert!(make_train_bags(&g, 8, 1, 0, 0).is_err());
        assert!(make_test_bags(&g, 8, 1, 0, 0).is_err());
    }

    #[test]
    fn test_bag_slots_and_coverage() {
        let g = group(16, None);
        let bags = make_test_bags(&g, 8, 100, 0, 0).unwrap();
        assert_eq!(bags.iter().map(|b| b.instances.len()).sum::<usize>(), 800);

        for n in [5usize, 16, 23, 50] {
            let g = group(n, None);
            let nb = bags_for_coverage(n, 8, 10);
            let bags = make_test_bags(&g, 8, nb, 7, 0).unwrap();
            let mut hits = std::collections::HashMap::new();
            for b in &bags {
                for &m in &b.instances {
                    *hits.entry(m).or_insert(0usize) += 1;
                }
            }
            assert_eq!(hits.len(), n);
            assert!(hits.values().all(|&h| h >= 10), "n={n} {hits:?}");
        }
    }

    #[test]
    fn seeded() {
        let g = group(16, Some(8));
        assert_eq!(make_train_bags(&g, 8, 5, 9, 0).unwrap(), make_train_bags(&g, 8, 5, 9, 0).unwrap());
        assert_ne!(make_train_bags(&g, 8, 5, 9, 0).unwrap(), make_train_bags(&g, 8, 5, 10, 0).unwrap());
        assert_eq!(make_test_bags(&g, 8, 5, 9, 0).unwrap(), make_test_bags(&g, 8, 5, 9, 0).unwrap());
    }

    #[test]
    fn group_rows_orders_by_id() {
        let ids = [5, 2, 5, 2, 9];
        let labels = [1, 0, 1, 0, 1];
        let g = group_rows(&ids, &labels, 0..5);
        assert_eq!(g.iter().map(|g| g.group_id).collect::<Vec<_>>(), [2, 5, 9]);
        assert_eq!(g[1].members, [0, 2]);
    }
}
