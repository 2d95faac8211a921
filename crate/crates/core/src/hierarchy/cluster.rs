use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{HierarchyGraph, RelationVocab};
use crate::error::{Error, Result};
use crate::kg::VectorTable;
use crate::scalar::Scalar;

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_ALL_STARTS: usize = 32;
const KMEANS_SAMPLED_STARTS: usize = 10;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn leaf_points<S: Scalar>(vocab: &RelationVocab, emb: &VectorTable<S>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut names = Vec::new();
    let mut points = Vec::new();
    for (_, name) in vocab.non_na() {
        let v = emb.get(name).ok_or_else(|| Error::MissingEmbedding(name.to_string()))?;
        names.push(name.to_string());
        points.push(v.iter().map(|x| x.to_f64_lossless()).collect());
    }
    Ok((names, points))
}

fn sse(points: &[Vec<f64>], assign: &[usize], k: usize) -> f64 {
    let cents = centroids(points, assign, k);
    points.iter().zip(assign).map(|(p, &a)| sq_dist(p, &cents[a])).sum()
}

fn centroids(points: &[Vec<f64>], assign: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    sums
}

fn lloyd(points: &[Vec<f64>], k: usize, first: usize) -> Vec<usize> {
    let n = points.len();
    // farthest-point seeding; ties go to the lowest index
    let mut centers = vec![points[first].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        centers.push(points[best].clone());
        for (m, p) in nearest.iter_mut().zip(points) {
            *m = m.min(sq_dist(p, &points[best]));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut next: Vec<usize> = points
            .iter()
            .map(|p| {
                let mut best = 0;
                let mut best_d = sq_dist(p, &centers[0]);
                for (c, center) in centers.iter().enumerate().skip(1) {
                    let d = sq_dist(p, center);
                    if d < best_d {
                        best = c;
                        best_d = d;
                    }
                }
                best
            })
            .collect();
        fill_empty_clusters(points, &mut next, k);
        if next == assign {
            break;
        }
        assign = next;
        centers = centroids(points, &assign, k);
    }
    assign
}

/// Moves the point farthest from its centroid (within a cluster of at least
/// two) into each empty cluster.
fn fill_empty_clusters(points: &[Vec<f64>], assign: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        assign.iter().for_each(|&a| counts[a] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let cents = centroids(points, assign, k);
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if counts[assign[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &cents[assign[i]]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        match best {
            Some((i, _)) => assign[i] = empty,
            None => return,
        }
    }
}

/// Deterministic k-means over Euclidean points.
///
/// Farthest-point seeding is restarted from several first centers (every
/// point for small inputs, otherwise a seeded sample) and the lowest-SSE
/// assignment wins, earlier restarts breaking ties. Every cluster is
/// non-empty. Cluster labels are in `0..k`.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} is invalid for {n} points")));
    }
    let starts: Vec<usize> = if n <= KMEANS_ALL_STARTS {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..KMEANS_SAMPLED_STARTS).map(|_| rng.gen_range(0..n)).collect()
    };
    let mut best: Option<(f64, Vec<usize>)> = None;
    for first in starts {
        let assign = lloyd(points, k, first);
        let cost = sse(points, &assign, k);
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, assign));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// Recursive k-means hierarchy: layer 1 clusters the relation embeddings,
/// each further layer clusters the centroids of the layer below, and the
/// virtual root closes the tree. `layers` counts every layer including the
/// root, so `k_per_layer` has `layers - 2` entries.
pub fn build_kmeans<S: Scalar>(
    vocab: &RelationVocab,
    embeddings: &VectorTable<S>,
    layers: usize,
    k_per_layer: &[usize],
    seed: u64,
) -> Result<HierarchyGraph> {
    if layers < 2 || k_per_layer.len() != layers - 2 {
        return Err(Error::Config(format!(
            "{layers} layers need {} cluster counts, got {}",
            layers.saturating_sub(2),
            k_per_layer.len()
        )));
    }
    let (names, mut points) = leaf_points(vocab, embeddings)?;
    if names.is_empty() {
        return Err(Error::Data("no relations to cluster".into()));
    }
    let mut levels = Vec::new();
    for &k in k_per_layer {
        let assign = kmeans(&points, k, seed)?;
        points = centroids(&points, &assign, k);
        levels.push(assign);
    }
    HierarchyGraph::from_levels(&names, &levels, "km")
}

/// One agglomeration step: two clusters (sorted member indices) joined at
/// `distance`.
#[derive(Clone, Debug, PartialEq)]
pub struct Merge {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub distance: f64,
}

/// Complete-linkage agglomerative clustering with Euclidean distance.
///
/// Cluster distances are maintained with the Lance-Williams update
/// `d(i∪j, k) = max(d(i, k), d(j, k))`. At each step the closest pair of
/// live clusters merges (ties: lowest slot pair); the merged cluster keeps
/// the lower slot.
pub fn complete_linkage(points: &[Vec<f64>]) -> Vec<Merge> {
    let n = points.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            dist[i][j] = sq_dist(&points[i], &points[j]).sqrt();
        }
    }
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for _ in 1..n {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in i + 1..n {
                if members[j].is_none() {
                    continue;
                }
                if best.is_none_or(|(_, _, d)| dist[i][j] < d) {
                    best = Some((i, j, dist[i][j]));
                }
            }
        }
        let (i, j, d) = best.expect("two live clusters");
        let right = members[j].take().expect("live");
        let left = members[i].take().expect("live");
        let row: Vec<f64> = dist[i].iter().zip(&dist[j]).map(|(a, b)| a.max(*b)).collect();
        for (k, &m) in row.iter().enumerate() {
            dist[k][i] = m;
        }
        dist[i] = row;
        let mut joined = [left.clone(), right.clone()].concat();
        joined.sort_unstable();
        members[i] = Some(joined);
        merges.push(Merge {
            left,
            right,
            distance: d,
        });
    }
    merges
}

/// Partition (cluster label per point) after applying the first `steps`
/// merges.
fn partition_after(n: usize, merges: &[Merge], steps: usize) -> Vec<usize> {
    let mut label: Vec<usize> = (0..n).collect();
    for m in &merges[..steps] {
        let target = label[m.left[0]];
        for &p in &m.right {
            let old = label[p];
            for l in label.iter_mut() {
                if *l == old {
                    *l = target;
                }
            }
        }
    }
    label
}

/// Agglomerative hierarchy: the complete-linkage dendrogram is cut at the
/// `layers - 2` largest gaps between consecutive merge distances (the first
/// gap measured from zero), lower cut first.
pub fn build_agglomerative<S: Scalar>(
    vocab: &RelationVocab,
    embeddings: &VectorTable<S>,
    layers: usize,
) -> Result<HierarchyGraph> {
    let (names, points) = leaf_points(vocab, embeddings)?;
    let n = points.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "agglomerative clustering needs >= 2 relations, got {n}"
        )));
    }
    if layers < 2 {
        return Err(Error::Config(format!("{layers} layers is too few")));
    }
    let cuts_needed = layers - 2;
    // cut position i applies merges 0..i; valid i are 0..=n-2
    if cuts_needed > n - 1 {
        return Err(Error::Data(format!(
            "{n} relations cannot be cut into {cuts_needed} internal levels"
        )));
    }
    let merges = complete_linkage(&points);
    let mut gaps: Vec<(usize, f64)> = (0..n - 1)
        .map(|i| {
            let prev = if i == 0 { 0.0 } else { merges[i - 1].distance };
            (i, merges[i].distance - prev)
        })
        .collect();
    gaps.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cuts: Vec<usize> = gaps.iter().take(cuts_needed).map(|g| g.0).collect();
    cuts.sort_unstable();

    // convert nested leaf partitions into level-to-level assignments
    let mut levels = Vec::new();
    let mut prev_labels: Vec<usize> = (0..n).collect();
    for &cut in &cuts {
        let labels = partition_after(n, &merges, cut);
        let mut prev_ids: Vec<usize> = Vec::new();
        let mut assign = Vec::new();
        for (p, &pl) in prev_labels.iter().enumerate() {
            if !prev_ids.contains(&pl) {
                prev_ids.push(pl);
                assign.push(labels[p]);
            }
        }
        levels.push(assign);
        prev_labels = labels;
    }
    HierarchyGraph::from_levels(&names, &levels, "hc")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(vals: &[(&str, Vec<f64>)]) -> (RelationVocab, VectorTable<f64>) {
        let vocab = RelationVocab::new(vals.iter().map(|(n, _)| *n)).unwrap();
        let mut t = VectorTable::new(vals[0].1.len());
        for (n, v) in vals {
            t.insert(n, v.clone()).unwrap();
        }
        (vocab, t)
    }

    fn siblings(g: &HierarchyGraph, a: &str, b: &str) -> bool {
        g.node(g.node_id(a).unwrap()).parent == g.node(g.node_id(b).unwrap()).parent
    }

    #[test]
    fn kmeans_separated_clusters() {
        let (v, t) = table(&[
            ("r1", vec![0.0]),
            ("r2", vec![0.1]),
            ("r3", vec![10.0]),
            ("r4", vec![10.1]),
        ]);
        let g = build_kmeans(&v, &t, 3, &[2], 0).unwrap();
        assert!(siblings(&g, "r1", "r2"));
        assert!(siblings(&g, "r3", "r4"));
        assert!(!siblings(&g, "r1", "r3"));
    }

    #[test]
    fn kmeans_k_equals_n_gives_singletons() {
        let (v, t) = table(&[("a", vec![0.0, 1.0]), ("b", vec![3.0, 1.0]), ("c", vec![-2.0, 5.0])]);
        let g = build_kmeans(&v, &t, 3, &[3], 0).unwrap();
        assert_eq!(g.len(), 3 + 3 + 1);
        for leaf in g.leaves() {
            assert_eq!(g.node(g.node(leaf).parent.unwrap()).children.len(), 1);
        }
    }

    #[test]
    fn kmeans_rejects_large_k() {
        let (v, t) = table(&[("a", vec![0.0]), ("b", vec![1.0])]);
        assert!(build_kmeans(&v, &t, 3, &[3], 0).is_err());
        assert!(build_kmeans(&v, &t, 4, &[2], 0).is_err());
    }

    #[test]
    fn kmeans_with_duplicates_keeps_clusters_nonempty() {
        let pts = vec![vec![1.0], vec![1.0], vec![1.0], vec![2.0]];
        let a = kmeans(&pts, 3, 0).unwrap();
        for c in 0..3 {
            assert!(a.contains(&c));
        }
    }

    #[test]
    fn agglomerative_separated_clusters() {
        let (v, t) = table(&[
            ("r1", vec![0.0]),
            ("r2", vec![0.1]),
            ("r3", vec![10.0]),
            ("r4", vec![10.1]),
        ]);
        let g = build_agglomerative(&v, &t, 3).unwrap();
        assert!(siblings(&g, "r1", "r2"));
        assert!(siblings(&g, "r3", "r4"));
        assert!(!siblings(&g, "r1", "r3"));
    }

    #[test]
    fn identical_points_merge_first_at_zero() {
        let m = complete_linkage(&[vec![5.0, 1.0], vec![0.0, 0.0], vec![5.0, 1.0]]);
        assert_eq!(m[0].distance, 0.0);
        assert_eq!(m[0].left, vec![0]);
        assert_eq!(m[0].right, vec![2]);
    }

    #[test]
    fn agglomerative_four_layers() {
        let (v, t) = table(&[
            ("a", vec![0.0]),
            ("b", vec![0.1]),
            ("c", vec![1.0]),
            ("d", vec![1.1]),
            ("e", vec![100.0]),
            ("f", vec![100.1]),
        ]);
        let g = build_agglomerative(&v, &t, 4).unwrap();
        assert_eq!(g.depth(), 3);
        assert!(siblings(&g, "a", "b"));
        g.validate().unwrap();
    }

    #[test]
    fn agglomerative_too_few_relations() {
        let (v, t) = table(&[("a", vec![0.0]), ("b", vec![1.0])]);
        assert!(build_agglomerative(&v, &t, 4).is_err());
        let (v1, t1) = table(&[("a", vec![0.0])]);
        assert!(build_agglomerative(&v1, &t1, 3).is_err());
    }
}
