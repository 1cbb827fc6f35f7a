//! 2-D embedding of a distance matrix, K-means with elbow selection, and
//! per-cluster summaries.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeries;
use crate::error::{Error, Result};
use crate::model::{AttributionMask, PredictionResult};
use crate::par;
use crate::seed;
use crate::similarity::DistanceMatrix;

pub const KMEANS_MAX_ITER: usize = 300;
const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub ids: Vec<String>,
    pub points: Vec<[f64; 2]>,
}

fn sq_dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

/// Classical metric MDS onto two axes.
///
/// Double-centres the squared distances and keeps the top two eigenvectors
/// scaled by the square root of their (non-negative) eigenvalues. Each axis
/// is oriented so its first nonzero coordinate is positive.
pub fn embed_2d(m: &DistanceMatrix) -> Result<Embedding2D> {
    let n = m.len();
    if n == 0 {
        return Ok(Embedding2D {
            ids: Vec::new(),
            points: Vec::new(),
        });
    }
    let d2 = DMatrix::from_fn(n, n, |i, j| m.get(i, j).powi(2));
    let row_mean: Vec<f64> = (0..n).map(|i| d2.row(i).sum() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_mean[i] - row_mean[j] + grand));
    let eig = SymmetricEigen::try_new(b, f64::EPSILON, EIGEN_MAX_ITER).ok_or(Error::EigenNotConverged {
        max_iterations: EIGEN_MAX_ITER,
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut points = vec![[0.0; 2]; n];
    for (axis, &e) in order.iter().take(2).enumerate() {
        let scale = eig.eigenvalues[e].max(0.0).sqrt();
        let col: Vec<f64> = (0..n).map(|i| eig.eigenvectors[(i, e)] * scale).collect();
        let flip = col.iter().find(|v| v.abs() > 1e-12).is_some_and(|v| *v < 0.0);
        for (p, v) in points.iter_mut().zip(&col) {
            p[axis] = if flip { -v } else { *v };
        }
    }
    Ok(Embedding2D {
        ids: m.ids.clone(),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    /// Cluster index per point; indices are contiguous from 0.
    pub assignment: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    pub sse: f64,
    /// SSE after every assignment step.
    pub sse_trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

fn nearest(p: &[f64; 2], centroids: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, q) in centroids.iter().enumerate() {
        let d = sq_dist(p, q);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &[[f64; 2]], centroids: &[[f64; 2]]) -> (Vec<usize>, Vec<f64>) {
    par::map_slice(points, |p| nearest(p, centroids)).into_iter().unzip()
}

fn plus_plus_init(points: &[[f64; 2]], k: usize, rng: &mut seed::Rng) -> Vec<[f64; 2]> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 && r < *w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            // Rounding can exhaust `r` early; fall back to the last positive weight.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|w| *w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick];
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// K-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or [`KMEANS_MAX_ITER`] is reached. A cluster left empty is
/// re-seeded at the point farthest from its centroid; clusters that stay
/// empty (fewer distinct points than `k`) are dropped and indices compacted.
pub fn kmeans(points: &[[f64; 2]], k: usize, seed_value: u64) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!("k = {k} must lie in 1..={n}")));
    }
    let mut rng = seed::stream(seed_value, "kmeans");
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let (mut labels, mut dist) = assign(points, &centroids);
    let mut trace = vec![dist.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            sums[c][0] += p[0];
            sums[c][1] += p[1];
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            }
        }
        let mut own: Vec<f64> = points
            .iter()
            .zip(&labels)
            .map(|(p, &c)| sq_dist(p, &centroids[c]))
            .collect();
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n).fold(0, |best, i| if own[i] > own[best] { i } else { best });
                if own[far] > 0.0 {
                    centroids[c] = points[far];
                    own[far] = 0.0;
                }
            }
        }
        let (next, d) = assign(points, &centroids);
        trace.push(d.iter().sum());
        dist = d;
        if next == labels {
            break;
        }
        labels = next;
    }
    let _ = dist;
    // Drop clusters without members, keeping the order of the rest.
    let mut remap = vec![usize::MAX; k];
    let mut kept = Vec::new();
    for c in 0..k {
        if labels.contains(&c) {
            remap[c] = kept.len();
            kept.push(centroids[c]);
        }
    }
    let assignment: Vec<usize> = labels.iter().map(|&c| remap[c]).collect();
    Ok(KMeansResult {
        assignment,
        centroids: kept,
        sse: *trace.last().unwrap_or(&0.0),
        sse_trace: trace,
        iterations,
    })
}

pub fn distinct_points(points: &[[f64; 2]]) -> usize {
    let mut keys: Vec<(u64, u64)> = points.iter().map(|p| (p[0].to_bits(), p[1].to_bits())).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowChoice {
    pub k: usize,
    /// `sse[k - 1]` is the final SSE of K-means with `k` clusters.
    pub sse: Vec<f64>,
}

/// Picks `k` maximizing `SSE[k-1] - 2 SSE[k] + SSE[k+1]`, ties to smaller `k`.
/// `k_max` is capped at the number of distinct points.
pub fn choose_k_elbow(embedding: &Embedding2D, k_max: usize, seed_value: u64) -> Result<ElbowChoice> {
    let pts = &embedding.points;
    if pts.is_empty() {
        return Err(Error::InvalidConfig("cannot cluster an empty embedding".into()));
    }
    let cap = k_max.min(distinct_points(pts));
    let sse = (1..=cap)
        .map(|k| kmeans(pts, k, seed_value).map(|r| r.sse))
        .collect::<Result<Vec<_>>>()?;
    if cap < 3 {
        return Ok(ElbowChoice { k: cap, sse });
    }
    let mut best = (2, f64::NEG_INFINITY);
    for k in 2..cap {
        let curvature = sse[k - 2] - 2.0 * sse[k - 1] + sse[k];
        if curvature > best.1 {
            best = (k, curvature);
        }
    }
    Ok(ElbowChoice { k: best.0, sse })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryMode {
    #[default]
    Mean,
    /// The member minimizing the summed distance to the other members.
    Medoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorCluster {
    pub cluster_id: usize,
    pub member_ids: Vec<String>,
    pub centroid_2d: [f64; 2],
    pub summary_sequence: Vec<Vec<f64>>,
    pub summary_attribution: Vec<f64>,
    /// Fraction of members whose prediction matches the label.
    pub accuracy: f64,
    pub mean_confidence: f64,
}

/// Inputs aligned by position: `instances[i]`, `masks[i]`, `predictions[i]`,
/// `embedding.points[i]` and `assignment[i]` describe the same instance.
pub struct ClusterInputs<'a> {
    pub instances: &'a [&'a TimeSeries],
    pub masks: &'a [AttributionMask],
    pub predictions: &'a [PredictionResult],
    pub embedding: &'a Embedding2D,
    pub assignment: &'a [usize],
}

pub fn summarize_clusters(
    inputs: &ClusterInputs<'_>,
    mode: SummaryMode,
    distances: Option<&DistanceMatrix>,
) -> Result<Vec<BehaviorCluster>> {
    let n = inputs.instances.len();
    for (what, len) in [
        ("masks", inputs.masks.len()),
        ("predictions", inputs.predictions.len()),
        ("embedded points", inputs.embedding.points.len()),
        ("assignments", inputs.assignment.len()),
    ] {
        if len != n {
            return Err(Error::Mismatch {
                what,
                expected: n,
                found: len,
            });
        }
    }
    if mode == SummaryMode::Medoid && distances.is_none_or(|d| d.len() != n) {
        return Err(Error::InvalidConfig("medoid summaries need the matching distance matrix".into()));
    }
    let k = inputs.assignment.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in inputs.assignment.iter().enumerate() {
        members[c].push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(Error::UnknownCluster(c));
    }
    Ok(members
        .iter()
        .enumerate()
        .map(|(cluster_id, idx)| {
            let m = idx.len() as f64;
            let first = inputs.instances[idx[0]];
            let (summary_sequence, summary_attribution) = match (mode, distances) {
                (SummaryMode::Medoid, Some(d)) => {
                    let medoid = *idx
                        .iter()
                        .min_by(|&&a, &&b| {
                            let sa: f64 = idx.iter().map(|&j| d.get(a, j)).sum();
                            let sb: f64 = idx.iter().map(|&j| d.get(b, j)).sum();
                            sa.total_cmp(&sb)
                        })
                        .expect("nonempty cluster");
                    (
                        inputs.instances[medoid].values.clone(),
                        inputs.masks[medoid].weights.clone(),
                    )
                }
                _ => {
                    let mut seq = vec![vec![0.0; first.len()]; first.channels()];
                    let mut att = vec![0.0; inputs.masks[idx[0]].len()];
                    for &i in idx {
                        for (row, src) in seq.iter_mut().zip(&inputs.instances[i].values) {
                            row.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                        att.iter_mut()
                            .zip(&inputs.masks[i].weights)
                            .for_each(|(a, b)| *a += b);
                    }
                    seq.iter_mut().flatten().for_each(|v| *v /= m);
                    att.iter_mut().for_each(|v| *v = (*v / m).clamp(0.0, 1.0));
                    (seq, att)
                }
            };
            let correct = idx
                .iter()
                .filter(|&&i| inputs.predictions[i].predicted == inputs.instances[i].label)
                .count();
            let mut centroid = [0.0; 2];
            for &i in idx {
                centroid[0] += inputs.embedding.points[i][0];
                centroid[1] += inputs.embedding.points[i][1];
            }
            BehaviorCluster {
                cluster_id,
                member_ids: idx.iter().map(|&i| inputs.instances[i].id.clone()).collect(),
                centroid_2d: [centroid[0] / m, centroid[1] / m],
                summary_sequence,
                summary_attribution,
                accuracy: correct as f64 / m,
                mean_confidence: idx.iter().map(|&i| inputs.predictions[i].confidence).sum::<f64>() / m,
            }
        })
        .collect())
}

/// Everything the cluster views need, as served and cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub alpha: f64,
    pub embedding: Embedding2D,
    pub assignment: Vec<usize>,
    pub elbow_sse: Vec<f64>,
    pub clusters: Vec<BehaviorCluster>,
}

impl ClusterReport {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn cluster_of(&self, instance_id: &str) -> Option<usize> {
        self.embedding
            .ids
            .iter()
            .position(|id| id == instance_id)
            .map(|i| self.assignment[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Split};
    use crate::similarity::DistanceKind;
    use rand_distr::{Distribution, Normal};

    fn matrix_from_points(pts: &[[f64; 2]]) -> DistanceMatrix {
        let n = pts.len();
        DistanceMatrix {
            ids: (0..n).map(|i| format!("p{i}")).collect(),
            kind: DistanceKind::Aggregated,
            alpha: None,
            entries: (0..n * n)
                .map(|idx| sq_dist(&pts[idx / n], &pts[idx % n]).sqrt())
                .collect(),
        }
    }

    pub(crate) fn blobs(seed_value: u64) -> (Vec<[f64; 2]>, Vec<usize>) {
        let mut rng = seed::rng(seed_value);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let centers = [[0.0, 0.0], [10.0, 0.0], [5.0, 9.0]];
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..30 {
                pts.push([c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
                truth.push(b);
            }
        }
        (pts, truth)
    }

    #[test]
    fn mds_recovers_triangle() {
        let pts = [[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]];
        let m = matrix_from_points(&pts);
        let e = embed_2d(&m).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((sq_dist(&e.points[i], &e.points[j]).sqrt() - m.get(i, j)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mds_single_point_at_origin() {
        let e = embed_2d(&matrix_from_points(&[[2.0, 2.0]])).unwrap();
        assert_eq!(e.points, vec![[0.0, 0.0]]);
    }

    #[test]
    fn mds_duplicates_coincide() {
        let e = embed_2d(&matrix_from_points(&[[0.0, 0.0], [1.0, 2.0], [1.0, 2.0], [4.0, 1.0]])).unwrap();
        assert!(sq_dist(&e.points[1], &e.points[2]).sqrt() < 1e-9);
    }

    #[test]
    fn mds_sign_convention() {
        let (pts, _) = blobs(3);
        let e = embed_2d(&matrix_from_points(&pts)).unwrap();
        for axis in 0..2 {
            let first = e.points.iter().map(|p| p[axis]).find(|v| v.abs() > 1e-12).unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn kmeans_extremes() {
        let (pts, _) = blobs(1);
        let one = kmeans(&pts, 1, 0).unwrap();
        let mean = pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / 90.0, a[1] + p[1] / 90.0]);
        let total: f64 = pts.iter().map(|p| sq_dist(p, &mean)).sum();
        assert!((one.sse - total).abs() < 1e-9 * total);
        let all = kmeans(&pts, pts.len(), 0).unwrap();
        assert_eq!(all.sse, 0.0);
        assert_eq!(all.k(), pts.len());
        assert!(kmeans(&pts, 0, 0).is_err());
    }

    #[test]
    fn kmeans_recovers_blobs_and_sse_falls() {
        let (pts, truth) = blobs(7);
        let r = kmeans(&pts, 3, 5).unwrap();
        // Same partition up to relabelling: co-membership agrees on every pair.
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert_eq!(r.assignment[i] == r.assignment[j], truth[i] == truth[j]);
            }
        }
        assert!(r.sse_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn kmeans_compacts_when_points_repeat() {
        let pts = vec![[1.0, 1.0]; 4];
        let r = kmeans(&pts, 3, 0).unwrap();
        assert_eq!(r.k(), 1);
        assert!(r.assignment.iter().all(|&c| c == 0));
    }

    #[test]
    fn elbow_finds_three_blobs() {
        let (pts, _) = blobs(11);
        let e = Embedding2D {
            ids: (0..pts.len()).map(|i| i.to_string()).collect(),
            points: pts,
        };
        let choice = choose_k_elbow(&e, 8, 2).unwrap();
        assert_eq!(choice.k, 3);
        assert_eq!(choose_k_elbow(&e, 8, 2).unwrap(), choice);
    }

    #[test]
    fn elbow_caps_at_distinct_points() {
        let e = Embedding2D {
            ids: (0..6).map(|i| i.to_string()).collect(),
            points: vec![[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [5.0, 5.0], [5.0, 5.0], [0.0, 0.0]],
        };
        assert!(choose_k_elbow(&e, 5, 0).unwrap().k <= 2);
    }

    fn series(id: &str, label: Label, v: Vec<f64>) -> TimeSeries {
        TimeSeries {
            id: id.into(),
            label,
            split: Split::Train,
            values: vec![v],
            truth_mask: None,
        }
    }

    fn pred(label: Label, confidence: f64) -> PredictionResult {
        PredictionResult {
            predicted: label,
            confidence,
            logits: vec![0.0, 0.0],
        }
    }

    #[test]
    fn summaries_recount() {
        let xs = [
            series("a", Label::Anomaly, vec![1.0, 2.0]),
            series("b", Label::Anomaly, vec![3.0, 4.0]),
            series("c", Label::Normal, vec![0.0, 0.0]),
        ];
        let refs: Vec<&TimeSeries> = xs.iter().collect();
        let masks = vec![
            AttributionMask::new("a", vec![1.0, 0.0]).unwrap(),
            AttributionMask::new("b", vec![0.0, 1.0]).unwrap(),
            AttributionMask::new("c", vec![0.5, 0.5]).unwrap(),
        ];
        let preds = vec![pred(Label::Anomaly, 0.9), pred(Label::Normal, 0.6), pred(Label::Anomaly, 0.7)];
        let embedding = Embedding2D {
            ids: vec!["a".into(), "b".into(), "c".into()],
            points: vec![[0.0, 0.0], [2.0, 2.0], [9.0, 9.0]],
        };
        let assignment = [0, 0, 1];
        let inputs = ClusterInputs {
            instances: &refs,
            masks: &masks,
            predictions: &preds,
            embedding: &embedding,
            assignment: &assignment,
        };
        let cl = summarize_clusters(&inputs, SummaryMode::Mean, None).unwrap();
        assert_eq!(cl.len(), 2);
        assert_eq!(cl[0].member_ids, vec!["a", "b"]);
        assert_eq!(cl[0].summary_sequence, vec![vec![2.0, 3.0]]);
        assert_eq!(cl[0].summary_attribution, vec![0.5, 0.5]);
        assert_eq!(cl[0].accuracy, 0.5);
        assert!((cl[0].mean_confidence - 0.75).abs() < 1e-12);
        assert_eq!(cl[0].centroid_2d, [1.0, 1.0]);
        // Singleton: summary is the instance itself.
        assert_eq!(cl[1].summary_sequence, xs[2].values);
        assert_eq!(cl[1].accuracy, 0.0);

        let d = matrix_from_points(&embedding.points);
        let med = summarize_clusters(&inputs, SummaryMode::Medoid, Some(&d)).unwrap();
        assert_eq!(med[0].summary_sequence, xs[0].values);
        assert!(summarize_clusters(&inputs, SummaryMode::Medoid, None).is_err());
    }
}
