//! The training objective. Five terms combine into the total loss:
//!
//! * `rec` — within-view reconstruction from each view's own sampled codes;
//! * `within` — per-view ELBO-style term: reconstruction plus both KLs;
//! * `cross` — dual-consistency term: every view must reconstruct from its own
//!   private code and the *fused* shared code, with the KLs paired across
//!   views;
//! * `shared_inference` — each view's shared code, with a fresh prior private
//!   draw, must explain every *other* view;
//! * `contrastive` — mutual information between the shared assignment
//!   distributions of view pairs, plus a marginal-entropy bonus.
//!
//! `total = alpha * rec + beta * (cross + within + shared_inference) + gamma *
//! contrastive`. Terms with a zero weight are skipped entirely (and reported
//! as 0), so an ablated objective never contributes gradients.
//!
//! All randomness enters through a [`NoiseBundle`] drawn ahead of the forward
//! pass, which keeps every term reproducible and lets tests freeze noise.

use rand::Rng;

use crate::distributions::{
    gaussian_sample, gumbel_softmax_sample, kl_categorical_uniform, kl_gaussian_standard,
    CategoricalPosterior, GaussianPosterior,
};
use crate::error::{Error, Result};
use crate::model::{fuse_shared, ModelBinding};
use crate::numerics::{Tape, Tensor, TensorId, DEFAULT_LOG_FLOOR};

/// Scalar weights of the total objective and of the inner terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the reconstruction term.
    pub alpha: f64,
    /// Weight of the consistency block (cross + within + shared inference).
    pub beta: f64,
    /// Weight of the contrastive term.
    pub gamma: f64,
    /// Reconstruction weight inside the within-view term.
    pub epsilon: f64,
    /// Reconstruction weight inside the cross-view term.
    pub omega: f64,
    /// Extra emphasis on the marginal terms of the mutual information.
    pub eta: f64,
    /// Weight of the marginal-entropy bonus in the contrastive term.
    pub entropy_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.01,
            gamma: 0.01,
            epsilon: 1.0,
            omega: 1.0,
            eta: 0.0,
            entropy_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
            ("omega", self.omega),
            ("eta", self.eta),
            ("entropy_weight", self.entropy_weight),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument {
                    op: "loss_weights",
                    expected: format!("non-negative finite {}", name),
                    actual: v.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Unweighted values of every loss term plus the weighted total, as computed
/// for one batch or averaged over an epoch. Terms whose weight was zero are
/// reported as exactly 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub rec: f64,
    pub within: f64,
    pub cross: f64,
    pub shared_inference: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl LossReport {
    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("rec", self.rec),
            ("within", self.within),
            ("cross", self.cross),
            ("shared_inference", self.shared_inference),
            ("contrastive", self.contrastive),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// All stochastic inputs for one optimization step, drawn up front in a fixed
/// order so that a step is a pure function of (parameters, batch, bundle).
///
/// Draw order: per-view private Gaussian noise, then per-view shared uniform
/// noise, then the fused shared uniform noise, then per ordered view pair the
/// prior private Gaussian noise (pairs in `(0,1), (0,2), ..., (1,0), ...`
/// order).
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    /// Standard-normal noise for each view's private code, `n x d_p`.
    pub private: Vec<Tensor>,
    /// Open-interval uniform noise for each view's shared code, `n x K`.
    pub shared: Vec<Tensor>,
    /// Open-interval uniform noise for the fused shared code, `n x K`.
    pub fused_shared: Tensor,
    /// Standard-normal prior draws for the shared-inference term, one `n x
    /// d_p` tensor per ordered view pair.
    pub prior_private: Vec<Tensor>,
}

/// Ordered view pairs `(i, j)` with `i != j`, i-major.
pub fn ordered_pairs(num_views: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(num_views.saturating_sub(1) * num_views);
    for i in 0..num_views {
        for j in 0..num_views {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

/// Unordered view pairs `(i, j)` with `i < j`.
pub fn unordered_pairs(num_views: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..num_views {
        for j in i + 1..num_views {
            out.push((i, j));
        }
    }
    out
}

fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape/data consistent")
}

fn open_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| loop {
            // gen::<f64>() is in [0, 1); reject the measure-zero 0 so the
            // Gumbel transform stays finite.
            let u: f64 = rng.gen();
            if u > 0.0 {
                break u;
            }
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape/data consistent")
}

impl NoiseBundle {
    pub fn draw(rng: &mut impl Rng, n: usize, num_views: usize, d_p: usize, k: usize) -> Self {
        let private = (0..num_views)
            .map(|_| standard_normal(rng, n, d_p))
            .collect();
        let shared = (0..num_views).map(|_| open_uniform(rng, n, k)).collect();
        let fused_shared = open_uniform(rng, n, k);
        let prior_private = ordered_pairs(num_views)
            .iter()
            .map(|_| standard_normal(rng, n, d_p))
            .collect();
        Self {
            private,
            shared,
            fused_shared,
            prior_private,
        }
    }

    /// Noise at the center of each distribution: zero Gaussian noise (samples
    /// collapse to the mean) and 0.5 uniforms (a constant Gumbel shift, which
    /// the softmax cancels). Useful for deterministic tests.
    pub fn centered(n: usize, num_views: usize, d_p: usize, k: usize) -> Self {
        Self {
            private: (0..num_views).map(|_| Tensor::zeros(vec![n, d_p])).collect(),
            shared: (0..num_views)
                .map(|_| Tensor::full(vec![n, k], 0.5))
                .collect(),
            fused_shared: Tensor::full(vec![n, k], 0.5),
            prior_private: ordered_pairs(num_views)
                .iter()
                .map(|_| Tensor::zeros(vec![n, d_p]))
                .collect(),
        }
    }
}

/// Mean-per-sample squared error: `sum((xhat - x)^2) / rows`.
fn mse(tape: &mut Tape, x: TensorId, xhat: TensorId) -> Result<TensorId> {
    let n = tape.value(x).rows() as f64;
    let diff = tape.sub(xhat, x)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    tape.scalar_mul(s, 1.0 / n)
}

fn add_all(tape: &mut Tape, terms: &[TensorId]) -> Result<TensorId> {
    let mut iter = terms.iter();
    let first = *iter.next().ok_or_else(|| Error::InvalidArgument {
        op: "loss",
        expected: "at least one term".into(),
        actual: "none".into(),
    })?;
    iter.try_fold(first, |acc, &t| tape.add(acc, t))
}

fn check_batch(tape: &Tape, binding: &ModelBinding, x: &[TensorId]) -> Result<usize> {
    if x.len() != binding.num_views() {
        return Err(Error::InvalidArgument {
            op: "loss",
            expected: format!("{} views", binding.num_views()),
            actual: x.len().to_string(),
        });
    }
    let n = tape.value(x[0]).rows();
    for (i, &xv) in x.iter().enumerate() {
        if tape.value(xv).rows() != n {
            return Err(Error::RowCountMismatch {
                view_a: 0,
                rows_a: n,
                view_b: i,
                rows_b: tape.value(xv).rows(),
            });
        }
    }
    Ok(n)
}

/// Per-view posteriors and sampled codes for one batch; shared by the loss
/// terms so that encoding happens once.
struct ViewCodes {
    gauss: Vec<GaussianPosterior>,
    cat: Vec<CategoricalPosterior>,
    z_private: Vec<TensorId>,
    z_shared: Vec<TensorId>,
}

fn encode_views(
    tape: &mut Tape,
    binding: &ModelBinding,
    x: &[TensorId],
    noise: &NoiseBundle,
) -> Result<ViewCodes> {
    let v = binding.num_views();
    if noise.private.len() != v || noise.shared.len() != v {
        return Err(Error::InvalidArgument {
            op: "loss",
            expected: format!("noise bundle covering {} views", v),
            actual: format!(
                "{} private / {} shared tensors",
                noise.private.len(),
                noise.shared.len()
            ),
        });
    }
    let mut codes = ViewCodes {
        gauss: Vec::with_capacity(v),
        cat: Vec::with_capacity(v),
        z_private: Vec::with_capacity(v),
        z_shared: Vec::with_capacity(v),
    };
    for (view, &xv) in x.iter().enumerate() {
        let (gauss, cat) = binding.encode(tape, view, xv)?;
        let eps = tape.constant(noise.private[view].clone());
        let z_p = gaussian_sample(tape, &gauss, eps)?;
        let u = tape.constant(noise.shared[view].clone());
        let z_s = gumbel_softmax_sample(tape, &cat, u)?;
        codes.gauss.push(gauss);
        codes.cat.push(cat);
        codes.z_private.push(z_p);
        codes.z_shared.push(z_s);
    }
    Ok(codes)
}

/// Within-view reconstruction loss from explicit `(private, shared)` code
/// pairs: `sum_v sum((X_v - decode_v(codes_v))^2) / n`.
pub fn loss_rec(
    tape: &mut Tape,
    binding: &ModelBinding,
    x: &[TensorId],
    codes: &[(TensorId, TensorId)],
) -> Result<TensorId> {
    check_batch(tape, binding, x)?;
    if codes.len() != x.len() {
        return Err(Error::InvalidArgument {
            op: "loss_rec",
            expected: format!("{} code pairs", x.len()),
            actual: codes.len().to_string(),
        });
    }
    let mut terms = Vec::with_capacity(x.len());
    for (view, (&xv, &(z_p, z_s))) in x.iter().zip(codes).enumerate() {
        let xhat = binding.decode(tape, view, z_p, z_s)?;
        terms.push(mse(tape, xv, xhat)?);
    }
    add_all(tape, &terms)
}

/// Per-view ELBO-style loss: `sum_v [epsilon * mse_v + KL(private_v || N(0,I))
/// + KL(shared_v || Uniform)]`, with codes sampled from the bundle.
pub fn loss_within(
    tape: &mut Tape,
    binding: &ModelBinding,
    x: &[TensorId],
    noise: &NoiseBundle,
    epsilon: f64,
) -> Result<TensorId> {
    check_batch(tape, binding, x)?;
    let codes = encode_views(tape, binding, x, noise)?;
    within_from_codes(tape, binding, x, &codes, epsilon)
}

fn within_from_codes(
    tape: &mut Tape,
    binding: &ModelBinding,
    x: &[TensorId],
    codes: &ViewCodes,
    epsilon: f64,
) -> Result<TensorId> {
    let mut terms = Vec::new();
    for view in 0..x.len() {
        if epsilon != 0.0 {
            let xhat = binding.decode(tape, view, codes.z_private[view], codes.z_shared[view])?;
            let m = mse(tape, x[view], xhat)?;
            terms.push(tape.scalar_mul(m, epsilon)?);
        }
        terms.push(kl_gaussian_standard(tape, &codes.gauss[view])?);
        terms.push(kl_categorical_uniform(tape, &codes.cat[view])?);
    }
    add_all(tape, &terms)
}

/// Dual-consistency cross-view loss. For every ordered view pair `(i, j)`
/// (including `i == j`) the term is `omega * mse_i + KL(private_i) +
/// KL(shared_j)`, where `mse_i` reconstructs view `i` from its own private
/// code and the *fused* shared code. The pair sum collapses to `V * (omega *
/// sum_i mse_i + sum_i KL(private_i) + sum_j KL(shared_j))`.
pub fn loss_cross(
    tape: &mut Tape,
    binding: &ModelBinding,
    x: &[TensorId],
    noise: &NoiseBundle,
    omega: f64,
) -> Result<TensorId> {
    check_batch(tape, binding, x)?;
    let codes = encode_views(tape, binding, x, noise)?;
    cross_from_codes(tape, binding, x, &codes, noise, omega)
}

fn cross_from_codes(
    tape: &mut Tape,
    binding: &ModelBinding,
    x: &[TensorId],
    codes: &ViewCodes,
    noise: &NoiseBundle,
    omega: f64,
) -> Result<TensorId> {
    let v = x.len();
    let fused = fuse_shared(tape, &codes.cat)?;
    let mut terms = Vec::new();
    if omega != 0.0 {
        let u = tape.constant(noise.fused_shared.clone());
        let z_fused = gumbel_softmax_sample(tape, &fused, u)?;
        let mut mses = Vec::with_capacity(v);
        for view in 0..v {
            let xhat = binding.decode(tape, view, codes.z_private[view], z_fused)?;
            mses.push(mse(tape, x[view], xhat)?);
        }
        let sum_mse = add_all(tape, &mses)?;
        terms.push(tape.scalar_mul(sum_mse, omega)?);
    }
    let klp: Vec<TensorId> = codes
        .gauss
        .iter()
        .map(|g| kl_gaussian_standard(tape, g))
        .collect::<Result<_>>()?;
    terms.push(add_all(tape, &klp)?);
    let kls: Vec<TensorId> = codes
        .cat
        .iter()
        .map(|c| kl_categorical_uniform(tape, c))
        .collect::<Result<_>>()?;
    terms.push(add_all(tape, &kls)?);
    let inner = add_all(tape, &terms)?;
    tape.scalar_mul(inner, v as f64)
}

/// Shared-information consistency loss: for every ordered pair `(i, j)` with
/// `i != j`, view `j` is reconstructed from a *prior* private draw and view
/// `i`'s sampled shared code. A single view yields a constant zero.
pub fn loss_shared_inference(
    tape: &mut Tape,
    binding: &ModelBinding,
    x: &[TensorId],
    noise: &NoiseBundle,
) -> Result<TensorId> {
    check_batch(tape, binding, x)?;
    let codes = encode_views(tape, binding, x, noise)?;
    shared_inference_from_codes(tape, binding, x, &codes, noise)
}

fn shared_inference_from_codes(
    tape: &mut Tape,
    binding: &ModelBinding,
    x: &[TensorId],
    codes: &ViewCodes,
    noise: &NoiseBundle,
) -> Result<TensorId> {
    let pairs = ordered_pairs(x.len());
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    if noise.prior_private.len() != pairs.len() {
        return Err(Error::InvalidArgument {
            op: "loss_shared_inference",
            expected: format!("{} prior noise tensors", pairs.len()),
            actual: noise.prior_private.len().to_string(),
        });
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for (idx, &(i, j)) in pairs.iter().enumerate() {
        let z_prior = tape.constant(noise.prior_private[idx].clone());
        let xhat = binding.decode(tape, j, z_prior, codes.z_shared[i])?;
        terms.push(mse(tape, x[j], xhat)?);
    }
    add_all(tape, &terms)
}

/// Contrastive mutual-information loss between two assignment matrices
/// (rows on the probability simplex): the negative of the symmetrized
/// joint-assignment mutual information plus `entropy_weight` times the
/// marginal entropies. `eta` over-weights the marginal terms inside the MI.
pub fn loss_contrastive(
    tape: &mut Tape,
    q1: TensorId,
    q2: TensorId,
    eta: f64,
    entropy_weight: f64,
) -> Result<TensorId> {
    let (s1, s2) = (tape.shape(q1).to_vec(), tape.shape(q2).to_vec());
    if s1 != s2 || s1.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "loss_contrastive",
            lhs: s1,
            rhs: s2,
        });
    }
    let (n, k) = (tape.value(q1).rows(), tape.value(q1).cols());
    for &q in &[q1, q2] {
        let v = tape.value(q);
        for r in 0..n {
            let row = v.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < -1e-6) {
                return Err(Error::InvalidArgument {
                    op: "loss_contrastive",
                    expected: "rows on the probability simplex (within 1e-6)".into(),
                    actual: format!("row {} sums to {}", r, sum),
                });
            }
        }
    }

    // Joint assignment matrix, symmetrized: P = (Q1^T Q2 / n + transpose) / 2.
    let q1t = tape.transpose(q1)?;
    let raw = tape.matmul(q1t, q2)?;
    let p = tape.scalar_mul(raw, 1.0 / n as f64)?;
    let pt = tape.transpose(p)?;
    let psum = tape.add(p, pt)?;
    let p = tape.scalar_mul(psum, 0.5)?;

    // Marginals via matmul with ones (row sums and column sums of P).
    let ones_k1 = tape.constant(Tensor::full(vec![k, 1], 1.0));
    let ones_1k = tape.constant(Tensor::full(vec![1, k], 1.0));
    let pk = tape.matmul(p, ones_k1)?;
    let pl = tape.matmul(ones_1k, p)?;

    let plogp = {
        let lp = tape.log_clamped(p, DEFAULT_LOG_FLOOR)?;
        let h = tape.hadamard(p, lp)?;
        tape.sum(h)?
    };
    let klogk = {
        let lk = tape.log_clamped(pk, DEFAULT_LOG_FLOOR)?;
        let h = tape.hadamard(pk, lk)?;
        tape.sum(h)?
    };
    let llogl = {
        let ll = tape.log_clamped(pl, DEFAULT_LOG_FLOOR)?;
        let h = tape.hadamard(pl, ll)?;
        tape.sum(h)?
    };
    let marg = tape.add(klogk, llogl)?;
    let marg = tape.scalar_mul(marg, eta + 1.0)?;
    let mi = tape.sub(plogp, marg)?;

    // Batch-marginal entropies of each view's assignments.
    let ones_1n = tape.constant(Tensor::full(vec![1, n], 1.0));
    let mut entropies = Vec::with_capacity(2);
    for &q in &[q1, q2] {
        let m = tape.matmul(ones_1n, q)?;
        let m = tape.scalar_mul(m, 1.0 / n as f64)?;
        let lm = tape.log_clamped(m, DEFAULT_LOG_FLOOR)?;
        let h = tape.hadamard(m, lm)?;
        let s = tape.sum(h)?;
        entropies.push(tape.scalar_mul(s, -1.0)?);
    }
    let hsum = tape.add(entropies[0], entropies[1])?;
    let hterm = tape.scalar_mul(hsum, entropy_weight)?;
    let objective = tape.add(mi, hterm)?;
    tape.scalar_mul(objective, -1.0)
}

fn contrastive_views(
    tape: &mut Tape,
    codes: &ViewCodes,
    eta: f64,
    entropy_weight: f64,
) -> Result<TensorId> {
    let pairs = unordered_pairs(codes.cat.len());
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let probs: Vec<TensorId> = codes
        .cat
        .iter()
        .map(|c| tape.row_softmax(c.logits))
        .collect::<Result<_>>()?;
    let mut terms = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        terms.push(loss_contrastive(tape, probs[i], probs[j], eta, entropy_weight)?);
    }
    let s = add_all(tape, &terms)?;
    tape.scalar_mul(s, 1.0 / pairs.len() as f64)
}

/// Build the full objective on the tape. Returns the scalar node of the
/// weighted total and the report with every term's unweighted value.
pub fn loss_total(
    tape: &mut Tape,
    binding: &ModelBinding,
    x: &[TensorId],
    noise: &NoiseBundle,
    weights: &LossWeights,
) -> Result<(TensorId, LossReport)> {
    weights.validate()?;
    check_batch(tape, binding, x)?;
    let codes = encode_views(tape, binding, x, noise)?;
    let scalar = |tape: &Tape, id: TensorId| tape.value(id).data()[0];

    let mut report = LossReport::default();
    let mut weighted = Vec::new();

    if weights.alpha != 0.0 || (weights.beta != 0.0 && weights.epsilon != 0.0) {
        // Reconstruction from each view's own sampled codes; `rec` and
        // `within` share these decode nodes.
        let mut mses = Vec::with_capacity(x.len());
        for view in 0..x.len() {
            let xhat = binding.decode(tape, view, codes.z_private[view], codes.z_shared[view])?;
            mses.push(mse(tape, x[view], xhat)?);
        }
        if weights.alpha != 0.0 {
            let rec = add_all(tape, &mses)?;
            report.rec = scalar(tape, rec);
            weighted.push(tape.scalar_mul(rec, weights.alpha)?);
        }
        if weights.beta != 0.0 {
            // Within-view term, reusing the per-view mse nodes.
            let mut terms = Vec::new();
            for view in 0..x.len() {
                if weights.epsilon != 0.0 {
                    terms.push(tape.scalar_mul(mses[view], weights.epsilon)?);
                }
                terms.push(kl_gaussian_standard(tape, &codes.gauss[view])?);
                terms.push(kl_categorical_uniform(tape, &codes.cat[view])?);
            }
            let within = add_all(tape, &terms)?;
            report.within = scalar(tape, within);

            let cross = cross_from_codes(tape, binding, x, &codes, noise, weights.omega)?;
            report.cross = scalar(tape, cross);
            let si = shared_inference_from_codes(tape, binding, x, &codes, noise)?;
            report.shared_inference = scalar(tape, si);
            let block = add_all(tape, &[cross, within, si])?;
            weighted.push(tape.scalar_mul(block, weights.beta)?);
        }
    } else if weights.beta != 0.0 {
        // alpha == 0 and epsilon == 0: consistency block without within-mse.
        let within = within_from_codes(tape, binding, x, &codes, weights.epsilon)?;
        report.within = scalar(tape, within);
        let cross = cross_from_codes(tape, binding, x, &codes, noise, weights.omega)?;
        report.cross = scalar(tape, cross);
        let si = shared_inference_from_codes(tape, binding, x, &codes, noise)?;
        report.shared_inference = scalar(tape, si);
        let block = add_all(tape, &[cross, within, si])?;
        weighted.push(tape.scalar_mul(block, weights.beta)?);
    }

    if weights.gamma != 0.0 {
        let cl = contrastive_views(tape, &codes, weights.eta, weights.entropy_weight)?;
        report.contrastive = scalar(tape, cl);
        weighted.push(tape.scalar_mul(cl, weights.gamma)?);
    }

    let total = if weighted.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        add_all(tape, &weighted)?
    };
    report.total = scalar(tape, total);
    Ok((total, report))
}
