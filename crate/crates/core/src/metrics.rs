//! Clustering evaluation: representation extraction, k-means with k-means++
//! seeding, and the standard external metrics — accuracy under the optimal
//! cluster-to-class assignment, normalized mutual information, and purity.

use rand::Rng;
use serde::Serialize;

use crate::data::MultiViewDataset;
use crate::distributions::{gaussian_sample, gumbel_softmax_sample};
use crate::error::{Error, Result};
use crate::model::{fuse_shared, DccmvcModel};
use crate::numerics::{Tape, Tensor};
use crate::stream::{keyed_rng, DOMAIN_EMBED, DOMAIN_KMEANS};

pub const DEFAULT_KMEANS_MAX_ITER: usize = 300;
pub const DEFAULT_KMEANS_RESTARTS: usize = 10;

/// A hard assignment of every sample to one of `k` clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    labels: Vec<usize>,
    k: usize,
}

impl Partition {
    /// Labels must be non-empty and every label must lie in `[0, k)`.
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument {
                op: "Partition::new",
                expected: "at least one sample".into(),
                actual: "empty label vector".into(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument {
                op: "Partition::new",
                expected: format!("labels < k = {}", k),
                actual: bad.to_string(),
            });
        }
        Ok(Self { labels, k })
    }

    /// Infers `k` as `max(label) + 1`.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        let k = labels.iter().copied().max().map_or(0, |m| m + 1);
        Self::new(labels, k)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// External clustering scores; serializes to a flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub acc: f64,
    pub nmi: f64,
    pub pur: f64,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn compute(pred: &Partition, truth: &Partition, seed: u64) -> Result<Self> {
        Ok(Self {
            acc: accuracy(pred, truth)?,
            nmi: nmi(pred, truth)?,
            pur: purity(pred, truth)?,
            k: pred.k(),
            n: pred.len(),
            seed,
        })
    }
}

/// Rows processed per forward pass in [`extract_representation`]; keeps the
/// tape footprint bounded on large datasets without changing the output.
const EXTRACT_CHUNK: usize = 512;

/// Per-sample representation: each view's private posterior mean followed by
/// the fused shared probabilities, `n x (V*d_p + K)`.
///
/// With `noise_free` (the default for evaluation) the codes are the posterior
/// means/probabilities themselves; otherwise one reparameterized sample is
/// drawn per code from a stream keyed by `seed`.
pub fn extract_representation(
    model: &DccmvcModel,
    dataset: &MultiViewDataset,
    noise_free: bool,
    seed: u64,
) -> Result<Tensor> {
    model.check_compatible(&dataset.view_dims())?;
    let n = dataset.n();
    let v = model.num_views();
    let width = v * model.d_p + model.k;
    let mut out = vec![0.0f64; n * width];

    let mut chunk_index = 0u64;
    let mut start = 0usize;
    while start < n {
        let end = (start + EXTRACT_CHUNK).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false);
        let mut shared = Vec::with_capacity(v);
        let mut blocks = Vec::with_capacity(v + 1);
        for view in 0..v {
            let x = tape.constant(dataset.view(view).gather_rows(&rows)?);
            let (gauss, cat) = binding.encode(&mut tape, view, x)?;
            let private = if noise_free {
                gauss.mu
            } else {
                let mut rng = keyed_rng(seed, DOMAIN_EMBED, chunk_index, view as u64);
                let noise = draw_normal(&mut tape, &mut rng, rows.len(), model.d_p);
                gaussian_sample(&mut tape, &gauss, noise)?
            };
            blocks.push(private);
            shared.push(cat);
        }
        let fused = fuse_shared(&mut tape, &shared)?;
        let consensus = if noise_free {
            fused.probs(&mut tape)?
        } else {
            let mut rng = keyed_rng(seed, DOMAIN_EMBED, chunk_index, v as u64);
            let uniform = draw_uniform(&mut tape, &mut rng, rows.len(), model.k);
            gumbel_softmax_sample(&mut tape, &fused, uniform)?
        };
        blocks.push(consensus);

        let mut col = 0usize;
        for id in blocks {
            let value = tape.value(id);
            for (r, abs) in (start..end).enumerate() {
                let row = value.row(r);
                out[abs * width + col..abs * width + col + row.len()].copy_from_slice(row);
            }
            col += value.cols();
        }
        start = end;
        chunk_index += 1;
    }
    Tensor::new(vec![n, width], out)
}

fn draw_normal(
    tape: &mut Tape,
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
) -> crate::numerics::TensorId {
    use rand_distr::{Distribution, StandardNormal};
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    tape.constant(Tensor::new(vec![rows, cols], data).expect("valid shape"))
}

fn draw_uniform(
    tape: &mut Tape,
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
) -> crate::numerics::TensorId {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| loop {
            let u: f64 = rng.gen();
            if u > 0.0 {
                break u;
            }
        })
        .collect();
    tape.constant(Tensor::new(vec![rows, cols], data).expect("valid shape"))
}

/// Lloyd's algorithm with k-means++ seeding. Runs `restarts` independent
/// restarts (seeds derived from `seed`) and returns the partition with the
/// lowest inertia; ties keep the earliest restart. An empty cluster is
/// re-seeded to the point farthest from its current centroid.
pub fn kmeans(
    points: &Tensor,
    k: usize,
    seed: u64,
    max_iter: usize,
    restarts: usize,
) -> Result<Partition> {
    let n = points.rows();
    if points.rank() != 2 || !points.is_finite() {
        return Err(Error::InvalidArgument {
            op: "kmeans",
            expected: "finite rank-2 point matrix".into(),
            actual: format!("shape {:?}", points.shape()),
        });
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument {
            op: "kmeans",
            expected: format!("1 <= k <= n = {}", n),
            actual: k.to_string(),
        });
    }
    if max_iter == 0 || restarts == 0 {
        return Err(Error::InvalidArgument {
            op: "kmeans",
            expected: "max_iter >= 1 and restarts >= 1".into(),
            actual: format!("max_iter={}, restarts={}", max_iter, restarts),
        });
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..restarts {
        let mut rng = keyed_rng(seed, DOMAIN_KMEANS, restart as u64, 0);
        let centroids = kmeanspp_init(points, k, &mut rng);
        let (labels, inertia) = lloyd(points, k, centroids, max_iter);
        if best.as_ref().map_or(true, |(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    Partition::new(best.expect("restarts >= 1").1, k)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
}

/// k-means++: first centroid uniform, then distance²-proportional picks.
fn kmeanspp_init(points: &Tensor, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let first = rng.gen_range(0..n);
    let mut centroids = vec![points.row(first).to_vec()];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| dist2(points.row(i), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc >= target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All remaining distances zero (duplicate points): uniform pick.
            rng.gen_range(0..n)
        };
        centroids.push(points.row(pick).to_vec());
        for i in 0..n {
            let d = dist2(points.row(i), centroids.last().expect("non-empty"));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

fn lloyd(
    points: &Tensor,
    k: usize,
    mut centroids: Vec<Vec<f64>>,
    max_iter: usize,
) -> (Vec<usize>, f64) {
    let (n, d) = (points.rows(), points.cols());
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for i in 0..n {
            let row = points.row(i);
            let mut nearest = 0;
            let mut nearest_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let dd = dist2(row, centroid);
                if dd < nearest_d {
                    nearest_d = dd;
                    nearest = c;
                }
            }
            if labels[i] != nearest {
                labels[i] = nearest;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        // Re-seed empty clusters to the point farthest from its centroid.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = dist2(points.row(a), &centroids[labels[a]]);
                    let db = dist2(points.row(b), &centroids[labels[b]]);
                    da.partial_cmp(&db).expect("finite distances")
                })
                .expect("n >= 1");
            counts[labels[far]] -= 1;
            labels[far] = c;
            counts[c] = 1;
            centroids[c] = points.row(far).to_vec();
            changed = true;
        }
        for centroid in centroids.iter_mut() {
            centroid.iter_mut().for_each(|x| *x = 0.0);
        }
        for i in 0..n {
            let row = points.row(i);
            for j in 0..d {
                centroids[labels[i]][j] += row[j];
            }
        }
        for c in 0..k {
            for j in 0..d {
                centroids[c][j] /= counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = (0..n)
        .map(|i| dist2(points.row(i), &centroids[labels[i]]))
        .sum();
    (labels, inertia)
}

fn check_lengths(op: &'static str, pred: &Partition, truth: &Partition) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument {
            op,
            expected: format!("{} predictions", truth.len()),
            actual: pred.len().to_string(),
        });
    }
    Ok(())
}

/// Contingency counts, `counts[pred][truth]`, padded square to
/// `max(pred.k, truth.k)`.
fn contingency(pred: &Partition, truth: &Partition) -> (Vec<f64>, usize) {
    let m = pred.k().max(truth.k());
    let mut counts = vec![0.0f64; m * m];
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        counts[p * m + t] += 1.0;
    }
    (counts, m)
}

/// Clustering accuracy: fraction of samples matched under the best
/// cluster-to-class bijection, found exactly by optimal assignment on the
/// contingency matrix.
pub fn accuracy(pred: &Partition, truth: &Partition) -> Result<f64> {
    check_lengths("accuracy", pred, truth)?;
    let (counts, m) = contingency(pred, truth);
    let negated: Vec<f64> = counts.iter().map(|&c| -c).collect();
    let row_of_col = min_cost_assignment(&negated, m);
    let matched: f64 = (0..m).map(|j| counts[row_of_col[j] * m + j]).sum();
    Ok(matched / pred.len() as f64)
}

/// NMI normalization convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmiNormalization {
    /// `I / sqrt(H(pred) * H(truth))` — the default.
    Geometric,
    /// `2I / (H(pred) + H(truth))`.
    Arithmetic,
}

/// Normalized mutual information with geometric-mean normalization.
///
/// Convention for degenerate partitions: if both are constant they determine
/// each other exactly and the score is 1; if exactly one is constant the
/// score is 0.
pub fn nmi(pred: &Partition, truth: &Partition) -> Result<f64> {
    nmi_with(pred, truth, NmiNormalization::Geometric)
}

pub fn nmi_with(
    pred: &Partition,
    truth: &Partition,
    normalization: NmiNormalization,
) -> Result<f64> {
    check_lengths("nmi", pred, truth)?;
    let (counts, m) = contingency(pred, truth);
    let n = pred.len() as f64;
    let row_sums: Vec<f64> = (0..m).map(|i| (0..m).map(|j| counts[i * m + j]).sum()).collect();
    let col_sums: Vec<f64> = (0..m).map(|j| (0..m).map(|i| counts[i * m + j]).sum()).collect();
    let entropy = |sums: &[f64]| -> f64 {
        -sums
            .iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| s / n * (s / n).ln())
            .sum::<f64>()
    };
    let h_pred = entropy(&row_sums);
    let h_truth = entropy(&col_sums);
    if h_pred == 0.0 && h_truth == 0.0 {
        return Ok(1.0);
    }
    if h_pred == 0.0 || h_truth == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for i in 0..m {
        for j in 0..m {
            let c = counts[i * m + j];
            if c > 0.0 {
                mi += c / n * (c * n / (row_sums[i] * col_sums[j])).ln();
            }
        }
    }
    let denom = match normalization {
        NmiNormalization::Geometric => (h_pred * h_truth).sqrt(),
        NmiNormalization::Arithmetic => 0.5 * (h_pred + h_truth),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Purity: fraction of samples that belong to the majority true class of
/// their assigned cluster.
pub fn purity(pred: &Partition, truth: &Partition) -> Result<f64> {
    check_lengths("purity", pred, truth)?;
    let (counts, m) = contingency(pred, truth);
    let majority: f64 = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| counts[i * m + j])
                .fold(0.0f64, f64::max)
        })
        .sum();
    Ok(majority / pred.len() as f64)
}

/// Exact minimum-cost perfect assignment on an `m x m` cost matrix via the
/// Hungarian algorithm with potentials, O(m³). Returns `row_of_col[j] = i`.
fn min_cost_assignment(cost: &[f64], m: usize) -> Vec<usize> {
    // 1-indexed internals; p[j] is the row matched to column j, p[0] scratch.
    let mut u = vec![0.0f64; m + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).map(|j| p[j] - 1).collect()
}
