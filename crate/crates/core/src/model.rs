//! The multi-view model: per-view encoder/decoder networks whose latent code
//! is split into a Gaussian private part (`d_p` dimensions) and a relaxed
//! categorical shared part (`K` classes), plus logit-space fusion of the
//! shared posteriors across views.
//!
//! Parameters live in [`DccmvcModel`] as plain tensors. Each training step
//! binds them onto a fresh [`Tape`](crate::numerics::Tape) via
//! [`DccmvcModel::bind`], which yields a [`ModelBinding`] holding the tape ids;
//! all forward passes go through the binding so gradients reach the stored
//! parameters by position.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::distributions::{CategoricalPosterior, GaussianPosterior};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, TensorId};

/// Default encoder hidden stack; the decoder mirrors it.
pub const DEFAULT_HIDDEN: [usize; 4] = [500, 500, 500, 2000];
/// Default Gumbel-Softmax temperature.
pub const DEFAULT_TAU: f64 = 0.5;
/// Default private code width.
pub const DEFAULT_PRIVATE_DIM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalActivation {
    Identity,
    Sigmoid,
}

/// Widths and output activation of a fully-connected stack. Hidden layers are
/// always ReLU; `final_activation` applies to the last layer only.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub final_activation: FinalActivation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, final_activation: FinalActivation) -> Result<Self> {
        if layer_widths.len() < 2 || layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument {
                op: "mlp_spec",
                expected: "at least two positive layer widths".into(),
                actual: format!("{:?}", layer_widths),
            });
        }
        Ok(Self {
            layer_widths,
            final_activation,
        })
    }
}

/// One dense layer: `y = x W + b` with `W` stored input-major (in x out).
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    fn zeroed(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![input, output]),
            bias: Tensor::zeros(vec![output]),
        }
    }

    fn init(&mut self, rng: &mut ChaCha8Rng) {
        // He fan-in scaling, suited to the ReLU stacks this model is built of.
        let fan_in = self.weight.shape()[0];
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for w in self.weight.data_mut() {
            *w = rng.sample(normal);
        }
        // Biases stay zero.
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    spec: MlpSpec,
    layers: Vec<Affine>,
}

impl Mlp {
    fn zeroed(spec: MlpSpec) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Affine::zeroed(w[0], w[1]))
            .collect();
        Self { spec, layers }
    }
}

/// Encoder/decoder pair for a single view.
#[derive(Debug, Clone)]
pub struct ViewNetwork {
    input_dim: usize,
    trunk: Mlp,
    mu_head: Affine,
    log_var_head: Affine,
    shared_head: Affine,
    decoder: Mlp,
}

/// Everything needed to build a model, minus the weights.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Feature width of each view, in view order.
    pub view_dims: Vec<usize>,
    /// Number of clusters (width of the shared code).
    pub k: usize,
    /// Width of the per-view private code.
    pub d_p: usize,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    /// Squash reconstructions with a sigmoid (for data normalized to [0, 1]).
    pub sigmoid_output: bool,
}

impl ModelConfig {
    pub fn new(view_dims: Vec<usize>, k: usize) -> Self {
        Self {
            view_dims,
            k,
            d_p: DEFAULT_PRIVATE_DIM,
            tau: DEFAULT_TAU,
            hidden: DEFAULT_HIDDEN.to_vec(),
            sigmoid_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_dims.is_empty() || self.view_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument {
                op: "model_config",
                expected: "at least one view with positive width".into(),
                actual: format!("view_dims = {:?}", self.view_dims),
            });
        }
        if self.k < 2 {
            return Err(Error::InvalidArgument {
                op: "model_config",
                expected: "k >= 2".into(),
                actual: format!("k = {}", self.k),
            });
        }
        if self.d_p == 0 {
            return Err(Error::InvalidArgument {
                op: "model_config",
                expected: "d_p >= 1".into(),
                actual: "d_p = 0".into(),
            });
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidArgument {
                op: "model_config",
                expected: "tau > 0".into(),
                actual: self.tau.to_string(),
            });
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument {
                op: "model_config",
                expected: "non-empty positive hidden widths".into(),
                actual: format!("hidden = {:?}", self.hidden),
            });
        }
        Ok(())
    }
}

/// The full multi-view model: one [`ViewNetwork`] per view plus the latent
/// hyperparameters shared by all of them.
#[derive(Debug, Clone)]
pub struct DccmvcModel {
    pub k: usize,
    pub d_p: usize,
    pub tau: f64,
    pub sigmoid_output: bool,
    views: Vec<ViewNetwork>,
}

impl DccmvcModel {
    /// Model with all weights and biases at zero (useful as a fixed point in
    /// tests; training always starts from [`DccmvcModel::init`]).
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let views = config
            .view_dims
            .iter()
            .map(|&d_v| {
                let mut trunk_widths = vec![d_v];
                trunk_widths.extend_from_slice(&config.hidden);
                let trunk_spec = MlpSpec::new(trunk_widths, FinalActivation::Identity)?;
                let feature = *config.hidden.last().expect("validated non-empty");

                let mut dec_widths = vec![config.d_p + config.k];
                dec_widths.extend(config.hidden.iter().rev());
                dec_widths.push(d_v);
                let dec_act = if config.sigmoid_output {
                    FinalActivation::Sigmoid
                } else {
                    FinalActivation::Identity
                };
                let dec_spec = MlpSpec::new(dec_widths, dec_act)?;

                Ok(ViewNetwork {
                    input_dim: d_v,
                    trunk: Mlp::zeroed(trunk_spec),
                    mu_head: Affine::zeroed(feature, config.d_p),
                    log_var_head: Affine::zeroed(feature, config.d_p),
                    shared_head: Affine::zeroed(feature, config.k),
                    decoder: Mlp::zeroed(dec_spec),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            k: config.k,
            d_p: config.d_p,
            tau: config.tau,
            sigmoid_output: config.sigmoid_output,
            views,
        })
    }

    /// Freshly initialized model: weights are He fan-in Gaussian, biases zero,
    /// drawn in declaration order from a ChaCha stream. The same seed always
    /// reproduces the same bits.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut model = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for view in &mut model.views {
            for affine in view.affines_mut() {
                affine.init(&mut rng);
            }
        }
        Ok(model)
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.input_dim).collect()
    }

    /// Width of the concatenated evaluation representation.
    pub fn representation_width(&self) -> usize {
        self.num_views() * self.d_p + self.k
    }

    /// All parameter tensors in declaration order (per view: trunk, mu head,
    /// log-var head, shared head, decoder; weight before bias).
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.views
            .iter()
            .flat_map(|v| v.affines())
            .flat_map(|a| [&a.weight, &a.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.views
            .iter_mut()
            .flat_map(|v| v.affines_mut())
            .flat_map(|a| [&mut a.weight, &mut a.bias])
            .collect()
    }

    /// Stable dotted names aligned with [`DccmvcModel::parameters`], used in
    /// optimizer diagnostics.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (vi, view) in self.views.iter().enumerate() {
            let push_affine = |names: &mut Vec<String>, label: String| {
                names.push(format!("view{}.{}.weight", vi, label));
                names.push(format!("view{}.{}.bias", vi, label));
            };
            for li in 0..view.trunk.layers.len() {
                push_affine(&mut names, format!("trunk.{}", li));
            }
            push_affine(&mut names, "mu".into());
            push_affine(&mut names, "log_var".into());
            push_affine(&mut names, "shared".into());
            for li in 0..view.decoder.layers.len() {
                push_affine(&mut names, format!("decoder.{}", li));
            }
        }
        names
    }

    /// Put every parameter on the tape as a leaf, in declaration order.
    /// `trainable` controls whether gradients are tracked.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelBinding {
        let mut param_ids = Vec::new();
        let views = self
            .views
            .iter()
            .map(|view| {
                let bind_affine = |tape: &mut Tape, ids: &mut Vec<TensorId>, a: &Affine| {
                    let w = tape.leaf(a.weight.clone(), trainable);
                    let b = tape.leaf(a.bias.clone(), trainable);
                    ids.push(w);
                    ids.push(b);
                    AffineIds { weight: w, bias: b }
                };
                ViewBinding {
                    trunk: view
                        .trunk
                        .layers
                        .iter()
                        .map(|a| bind_affine(tape, &mut param_ids, a))
                        .collect(),
                    mu: bind_affine(tape, &mut param_ids, &view.mu_head),
                    log_var: bind_affine(tape, &mut param_ids, &view.log_var_head),
                    shared: bind_affine(tape, &mut param_ids, &view.shared_head),
                    decoder: view
                        .decoder
                        .layers
                        .iter()
                        .map(|a| bind_affine(tape, &mut param_ids, a))
                        .collect(),
                    decoder_final: view.decoder.spec.final_activation,
                    input_dim: view.input_dim,
                }
            })
            .collect();
        ModelBinding {
            k: self.k,
            d_p: self.d_p,
            tau: self.tau,
            views,
            param_ids,
        }
    }
}

impl ViewNetwork {
    fn affines(&self) -> impl Iterator<Item = &Affine> {
        self.trunk
            .layers
            .iter()
            .chain([&self.mu_head, &self.log_var_head, &self.shared_head])
            .chain(self.decoder.layers.iter())
    }

    fn affines_mut(&mut self) -> impl Iterator<Item = &mut Affine> {
        self.trunk
            .layers
            .iter_mut()
            .chain([
                &mut self.mu_head,
                &mut self.log_var_head,
                &mut self.shared_head,
            ])
            .chain(self.decoder.layers.iter_mut())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AffineIds {
    pub weight: TensorId,
    pub bias: TensorId,
}

#[derive(Debug, Clone)]
struct ViewBinding {
    trunk: Vec<AffineIds>,
    mu: AffineIds,
    log_var: AffineIds,
    shared: AffineIds,
    decoder: Vec<AffineIds>,
    decoder_final: FinalActivation,
    input_dim: usize,
}

/// Tape-bound view of a [`DccmvcModel`]: holds the parameter leaf ids for one
/// forward/backward pass.
#[derive(Debug, Clone)]
pub struct ModelBinding {
    k: usize,
    d_p: usize,
    tau: f64,
    views: Vec<ViewBinding>,
    param_ids: Vec<TensorId>,
}

fn affine_forward(tape: &mut Tape, x: TensorId, ids: AffineIds) -> Result<TensorId> {
    let xw = tape.matmul(x, ids.weight)?;
    tape.add(xw, ids.bias)
}

impl ModelBinding {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_p(&self) -> usize {
        self.d_p
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    /// Parameter leaf ids in declaration order (aligned with
    /// [`DccmvcModel::parameters`]).
    pub fn param_ids(&self) -> &[TensorId] {
        &self.param_ids
    }

    /// Run view `view`'s encoder on a batch (rows = samples). Returns the
    /// private Gaussian posterior and the shared categorical posterior.
    pub fn encode(
        &self,
        tape: &mut Tape,
        view: usize,
        x: TensorId,
    ) -> Result<(GaussianPosterior, CategoricalPosterior)> {
        let vb = self.view_binding("encode", view)?;
        let got = tape.value(x);
        if got.rank() != 2 || got.cols() != vb.input_dim {
            return Err(Error::ViewWidthMismatch {
                view,
                expected: vb.input_dim,
                actual: got.cols(),
            });
        }
        // ReLU after every trunk layer; the heads read nonlinear features.
        let mut h = x;
        for ids in &vb.trunk {
            h = affine_forward(tape, h, *ids)?;
            h = tape.relu(h)?;
        }
        let mu = affine_forward(tape, h, vb.mu)?;
        let log_var = affine_forward(tape, h, vb.log_var)?;
        let logits = affine_forward(tape, h, vb.shared)?;
        Ok((
            GaussianPosterior::new(tape, mu, log_var)?,
            CategoricalPosterior::new(tape, logits, self.tau)?,
        ))
    }

    /// Run view `view`'s decoder on a `(private, shared)` code pair; the codes
    /// are concatenated columns, private first.
    pub fn decode(
        &self,
        tape: &mut Tape,
        view: usize,
        z_private: TensorId,
        z_shared: TensorId,
    ) -> Result<TensorId> {
        let vb = self.view_binding("decode", view)?;
        let (vp, vs) = (tape.value(z_private), tape.value(z_shared));
        if vp.rank() != 2 || vp.cols() != self.d_p {
            return Err(Error::InvalidArgument {
                op: "decode",
                expected: format!("private code with {} columns", self.d_p),
                actual: format!("shape {:?}", vp.shape()),
            });
        }
        if vs.rank() != 2 || vs.cols() != self.k || vs.rows() != vp.rows() {
            return Err(Error::InvalidArgument {
                op: "decode",
                expected: format!("shared code {} x {}", vp.rows(), self.k),
                actual: format!("shape {:?}", vs.shape()),
            });
        }
        let mut h = tape.concat_cols(z_private, z_shared)?;
        let last = vb.decoder.len() - 1;
        for (li, ids) in vb.decoder.iter().enumerate() {
            h = affine_forward(tape, h, *ids)?;
            if li < last {
                h = tape.relu(h)?;
            } else if vb.decoder_final == FinalActivation::Sigmoid {
                h = tape.sigmoid(h)?;
            }
        }
        Ok(h)
    }

    fn view_binding(&self, op: &'static str, view: usize) -> Result<&ViewBinding> {
        self.views.get(view).ok_or_else(|| Error::InvalidArgument {
            op,
            expected: format!("view index < {}", self.views.len()),
            actual: view.to_string(),
        })
    }
}

/// Fuse per-view shared posteriors into a consensus posterior by summing
/// logits on the tape. Summed logits are the log of the (unnormalized) product
/// of the per-view probabilities, so fusion behaves like a product of experts
/// and is invariant to view order.
pub fn fuse_shared(
    tape: &mut Tape,
    posteriors: &[CategoricalPosterior],
) -> Result<CategoricalPosterior> {
    let first = posteriors.first().ok_or_else(|| Error::InvalidArgument {
        op: "fuse_shared",
        expected: "at least one posterior".into(),
        actual: "0".into(),
    })?;
    let shape = tape.shape(first.logits).to_vec();
    for p in &posteriors[1..] {
        if tape.shape(p.logits) != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "fuse_shared",
                lhs: shape.clone(),
                rhs: tape.shape(p.logits).to_vec(),
            });
        }
        if p.tau != first.tau {
            return Err(Error::InvalidArgument {
                op: "fuse_shared",
                expected: format!("matching temperatures ({})", first.tau),
                actual: p.tau.to_string(),
            });
        }
    }
    let mut logits = first.logits;
    for p in &posteriors[1..] {
        logits = tape.add(logits, p.logits)?;
    }
    Ok(CategoricalPosterior {
        logits,
        tau: first.tau,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "DCCM", then little-endian u32 version, u32 K,
// u32 d_p, f64 tau, u32 view count, u8 sigmoid flag; per view, u32 input
// width, u32 trunk layer count, u32 decoder layer count, then every parameter
// tensor in declaration order as (u32 rank, u32 dims..., f64 payload...).
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"DCCM";
const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn fmt_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| fmt_err(path, format!("truncated while reading {}", what)))?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_f64(r: &mut impl Read, path: &Path, what: &str) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| fmt_err(path, format!("truncated while reading {}", what)))?;
    Ok(f64::from_le_bytes(buf))
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    write_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    for &v in t.data() {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read, path: &Path) -> Result<Tensor> {
    let rank = read_u32(r, path, "tensor rank")? as usize;
    if rank == 0 || rank > 2 {
        return Err(fmt_err(path, format!("invalid tensor rank {}", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, path, "tensor dimension")? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(read_f64(r, path, "tensor payload")?);
    }
    Tensor::new(shape, data)
}

impl DccmvcModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut w, CHECKPOINT_VERSION)?;
        write_u32(&mut w, self.k as u32)?;
        write_u32(&mut w, self.d_p as u32)?;
        write_f64(&mut w, self.tau)?;
        write_u32(&mut w, self.views.len() as u32)?;
        w.write_all(&[self.sigmoid_output as u8])?;
        for view in &self.views {
            write_u32(&mut w, view.input_dim as u32)?;
            write_u32(&mut w, view.trunk.layers.len() as u32)?;
            write_u32(&mut w, view.decoder.layers.len() as u32)?;
            for affine in view.affines() {
                write_tensor(&mut w, &affine.weight)?;
                write_tensor(&mut w, &affine.bias)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| fmt_err(path, "truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt_err(path, "not a model checkpoint (bad magic)"));
        }
        let version = read_u32(&mut r, path, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt_err(path, format!("unsupported version {}", version)));
        }
        let k = read_u32(&mut r, path, "k")? as usize;
        let d_p = read_u32(&mut r, path, "d_p")? as usize;
        let tau = read_f64(&mut r, path, "tau")?;
        let num_views = read_u32(&mut r, path, "view count")? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)
            .map_err(|_| fmt_err(path, "truncated while reading output flag"))?;
        let sigmoid_output = flag[0] != 0;
        if !(tau.is_finite() && tau > 0.0) || k < 2 || d_p == 0 || num_views == 0 {
            return Err(fmt_err(path, "invalid header values"));
        }

        let mut views = Vec::with_capacity(num_views);
        for _ in 0..num_views {
            let input_dim = read_u32(&mut r, path, "view width")? as usize;
            let trunk_n = read_u32(&mut r, path, "trunk layer count")? as usize;
            let dec_n = read_u32(&mut r, path, "decoder layer count")? as usize;
            if input_dim == 0 || trunk_n == 0 || dec_n == 0 {
                return Err(fmt_err(path, "invalid view header"));
            }
            let read_affine = |r: &mut BufReader<File>| -> Result<Affine> {
                let weight = read_tensor(r, path)?;
                let bias = read_tensor(r, path)?;
                if weight.rank() != 2 || bias.rank() != 1 || weight.shape()[1] != bias.numel() {
                    return Err(fmt_err(path, "inconsistent layer shapes"));
                }
                if !weight.is_finite() || !bias.is_finite() {
                    return Err(fmt_err(path, "non-finite parameter payload"));
                }
                Ok(Affine { weight, bias })
            };
            let trunk_layers: Vec<Affine> = (0..trunk_n)
                .map(|_| read_affine(&mut r))
                .collect::<Result<_>>()?;
            let mu_head = read_affine(&mut r)?;
            let log_var_head = read_affine(&mut r)?;
            let shared_head = read_affine(&mut r)?;
            let dec_layers: Vec<Affine> = (0..dec_n)
                .map(|_| read_affine(&mut r))
                .collect::<Result<_>>()?;

            // Reconstruct specs from the stored shapes and sanity-check the
            // chain: trunk starts at the view width, heads read the trunk
            // output, the decoder starts at d_p + K and ends at the view width.
            let mut trunk_widths = vec![trunk_layers[0].weight.shape()[0]];
            for l in &trunk_layers {
                if l.weight.shape()[0] != *trunk_widths.last().expect("non-empty") {
                    return Err(fmt_err(path, "trunk layer widths do not chain"));
                }
                trunk_widths.push(l.weight.shape()[1]);
            }
            let feature = *trunk_widths.last().expect("non-empty");
            if trunk_widths[0] != input_dim
                || mu_head.weight.shape() != [feature, d_p]
                || log_var_head.weight.shape() != [feature, d_p]
                || shared_head.weight.shape() != [feature, k]
            {
                return Err(fmt_err(path, "head shapes do not match trunk"));
            }
            let mut dec_widths = vec![dec_layers[0].weight.shape()[0]];
            for l in &dec_layers {
                if l.weight.shape()[0] != *dec_widths.last().expect("non-empty") {
                    return Err(fmt_err(path, "decoder layer widths do not chain"));
                }
                dec_widths.push(l.weight.shape()[1]);
            }
            if dec_widths[0] != d_p + k || *dec_widths.last().expect("non-empty") != input_dim {
                return Err(fmt_err(path, "decoder does not map code to view width"));
            }

            let dec_act = if sigmoid_output {
                FinalActivation::Sigmoid
            } else {
                FinalActivation::Identity
            };
            views.push(ViewNetwork {
                input_dim,
                trunk: Mlp {
                    spec: MlpSpec::new(trunk_widths, FinalActivation::Identity)?,
                    layers: trunk_layers,
                },
                mu_head,
                log_var_head,
                shared_head,
                decoder: Mlp {
                    spec: MlpSpec::new(dec_widths, dec_act)?,
                    layers: dec_layers,
                },
            });
        }
        Ok(Self {
            k,
            d_p,
            tau,
            sigmoid_output,
            views,
        })
    }

    /// Check that a checkpointed model can evaluate the given view widths.
    pub fn check_compatible(&self, view_dims: &[usize]) -> Result<()> {
        if view_dims.len() != self.views.len() {
            return Err(Error::CheckpointMismatch {
                dimension: "view count".into(),
                in_checkpoint: self.views.len(),
                in_dataset: view_dims.len(),
            });
        }
        for (i, (&want, view)) in view_dims.iter().zip(&self.views).enumerate() {
            if view.input_dim != want {
                return Err(Error::CheckpointMismatch {
                    dimension: format!("view {} width", i),
                    in_checkpoint: view.input_dim,
                    in_dataset: want,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::gumbel_softmax_sample;

    fn small_config() -> ModelConfig {
        ModelConfig {
            view_dims: vec![6, 4],
            k: 3,
            d_p: 2,
            tau: 0.5,
            hidden: vec![8, 5],
            sigmoid_output: false,
        }
    }

    fn batch(tape: &mut Tape, rows: usize, cols: usize, scale: f64) -> TensorId {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((i % 7) as f64 - 3.0) * scale).collect();
        tape.constant(Tensor::new(vec![rows, cols], data).unwrap())
    }

    #[test]
    fn zeroed_encoder_gives_zero_mean_and_flat_logits() {
        let model = DccmvcModel::zeroed(&small_config()).unwrap();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false);
        let x = batch(&mut tape, 3, 6, 0.3);
        let (gauss, cat) = binding.encode(&mut tape, 0, x).unwrap();
        assert!(tape.value(gauss.mu).data().iter().all(|&v| v == 0.0));
        let logits = tape.value(cat.logits);
        for i in 0..3 {
            let row = logits.row(i);
            assert!(row.iter().all(|&v| v == row[0]));
        }
        // Shapes: batch x d_p and batch x K.
        assert_eq!(tape.shape(gauss.mu), &[3, 2]);
        assert_eq!(tape.shape(cat.logits), &[3, 3]);
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let model = DccmvcModel::zeroed(&small_config()).unwrap();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false);
        let x = batch(&mut tape, 3, 5, 0.3);
        let err = binding.encode(&mut tape, 0, x).unwrap_err().to_string();
        assert!(err.contains("view 0"), "{}", err);
        assert!(err.contains('6'), "{}", err);
    }

    #[test]
    fn encode_matches_hand_unrolled_network() {
        let config = small_config();
        let model = DccmvcModel::init(&config, 42).unwrap();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false);
        let x_data: Vec<f64> = (0..3 * 6).map(|i| (i as f64) * 0.1 - 0.9).collect();
        let x = tape.constant(Tensor::new(vec![3, 6], x_data.clone()).unwrap());
        let (gauss, _) = binding.encode(&mut tape, 0, x).unwrap();

        // Independent recomputation with plain loops over the raw parameters.
        let params = model.parameters();
        let names = model.param_names();
        let get = |name: &str| -> &Tensor {
            let idx = names.iter().position(|n| n == name).unwrap();
            params[idx]
        };
        let affine = |x: &[Vec<f64>], w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    (0..w.shape()[1])
                        .map(|j| {
                            let mut s = b.data()[j];
                            for (i, xi) in row.iter().enumerate() {
                                s += xi * w.at(i, j);
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        };
        let relu = |x: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            x.into_iter()
                .map(|row| row.into_iter().map(|v| v.max(0.0)).collect())
                .collect()
        };
        let rows: Vec<Vec<f64>> = x_data.chunks(6).map(|c| c.to_vec()).collect();
        let h0 = relu(affine(&rows, get("view0.trunk.0.weight"), get("view0.trunk.0.bias")));
        let h1 = relu(affine(&h0, get("view0.trunk.1.weight"), get("view0.trunk.1.bias")));
        let mu = affine(&h1, get("view0.mu.weight"), get("view0.mu.bias"));

        let got = tape.value(gauss.mu);
        for i in 0..3 {
            for j in 0..2 {
                assert!(
                    (got.at(i, j) - mu[i][j]).abs() <= 1e-12 * (1.0 + mu[i][j].abs()),
                    "({}, {}): {} vs {}",
                    i,
                    j,
                    got.at(i, j),
                    mu[i][j]
                );
            }
        }
    }

    #[test]
    fn zeroed_decoder_maps_any_code_to_zero() {
        let model = DccmvcModel::zeroed(&small_config()).unwrap();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false);
        let zp = batch(&mut tape, 4, 2, 1.7);
        let zs = batch(&mut tape, 4, 3, 0.9);
        let out = binding.decode(&mut tape, 1, zp, zs).unwrap();
        assert_eq!(tape.shape(out), &[4, 4]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_decoder_stays_in_unit_interval() {
        let mut config = small_config();
        config.sigmoid_output = true;
        let model = DccmvcModel::init(&config, 7).unwrap();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false);
        let zp = batch(&mut tape, 5, 2, 2.0);
        let zs = batch(&mut tape, 5, 3, 1.0);
        let out = binding.decode(&mut tape, 0, zp, zs).unwrap();
        assert!(tape
            .value(out)
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn encode_decode_round_trip_has_input_shape() {
        let config = small_config();
        let model = DccmvcModel::init(&config, 3).unwrap();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false);
        let x = batch(&mut tape, 3, 4, 0.2);
        let (gauss, cat) = binding.encode(&mut tape, 1, x).unwrap();
        let u = tape.constant(Tensor::full(vec![3, 3], 0.37));
        let zs = gumbel_softmax_sample(&mut tape, &cat, u).unwrap();
        let xhat = binding.decode(&mut tape, 1, gauss.mu, zs).unwrap();
        assert_eq!(tape.shape(xhat), tape.shape(x));
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let config = small_config();
        let a = DccmvcModel::init(&config, 9).unwrap();
        let b = DccmvcModel::init(&config, 9).unwrap();
        let c = DccmvcModel::init(&config, 10).unwrap();
        for (pa, pb) in a.parameters().iter().zip(b.parameters().iter()) {
            assert_eq!(pa.data(), pb.data());
        }
        let differs = a
            .parameters()
            .iter()
            .zip(c.parameters().iter())
            .any(|(pa, pc)| pa.data() != pc.data());
        assert!(differs);
    }

    #[test]
    fn init_weight_scale_tracks_fan_in() {
        let config = ModelConfig {
            view_dims: vec![64],
            k: 3,
            d_p: 2,
            tau: 0.5,
            hidden: vec![256],
            sigmoid_output: false,
        };
        let model = DccmvcModel::init(&config, 1).unwrap();
        let names = model.param_names();
        let params = model.parameters();
        let idx = names.iter().position(|n| n == "view0.trunk.0.weight").unwrap();
        let w = params[idx];
        let n = w.numel() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let std: f64 =
            (w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let want = (2.0 / 64.0f64).sqrt();
        assert!((std - want).abs() < 0.1 * want, "std {} vs {}", std, want);
    }

    #[test]
    fn fuse_single_posterior_is_identity() {
        let model = DccmvcModel::init(&small_config(), 5).unwrap();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false);
        let x = batch(&mut tape, 2, 6, 0.4);
        let (_, cat) = binding.encode(&mut tape, 0, x).unwrap();
        let fused = fuse_shared(&mut tape, &[cat]).unwrap();
        assert_eq!(
            tape.value(fused.logits).data(),
            tape.value(cat.logits).data()
        );
    }

    #[test]
    fn fuse_uniform_posteriors_stays_uniform() {
        let mut tape = Tape::new();
        let l1 = tape.constant(Tensor::full(vec![2, 4], 0.3));
        let l2 = tape.constant(Tensor::full(vec![2, 4], -1.1));
        let p1 = CategoricalPosterior::new(&tape, l1, 0.5).unwrap();
        let p2 = CategoricalPosterior::new(&tape, l2, 0.5).unwrap();
        let fused = fuse_shared(&mut tape, &[p1, p2]).unwrap();
        let probs = fused.probs(&mut tape).unwrap();
        for &v in tape.value(probs).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_matches_product_of_probabilities() {
        let mut tape = Tape::new();
        let l1 = tape.constant(Tensor::new(vec![1, 3], vec![0.2, -0.4, 1.1]).unwrap());
        let l2 = tape.constant(Tensor::new(vec![1, 3], vec![-0.9, 0.3, 0.5]).unwrap());
        let p1 = CategoricalPosterior::new(&tape, l1, 0.5).unwrap();
        let p2 = CategoricalPosterior::new(&tape, l2, 0.5).unwrap();

        let q1 = p1.probs(&mut tape).unwrap();
        let q2 = p2.probs(&mut tape).unwrap();
        let prod: Vec<f64> = tape
            .value(q1)
            .data()
            .iter()
            .zip(tape.value(q2).data())
            .map(|(a, b)| a * b)
            .collect();
        let z: f64 = prod.iter().sum();
        let want: Vec<f64> = prod.iter().map(|v| v / z).collect();

        let fused = fuse_shared(&mut tape, &[p1, p2]).unwrap();
        let probs = fused.probs(&mut tape).unwrap();
        for (got, want) in tape.value(probs).data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
        }
    }

    #[test]
    fn fuse_is_order_invariant() {
        let mut tape = Tape::new();
        let l1 = tape.constant(Tensor::new(vec![1, 3], vec![0.2, -0.4, 1.1]).unwrap());
        let l2 = tape.constant(Tensor::new(vec![1, 3], vec![-0.9, 0.3, 0.5]).unwrap());
        let l3 = tape.constant(Tensor::new(vec![1, 3], vec![2.0, 0.0, -0.7]).unwrap());
        let ps: Vec<CategoricalPosterior> = [l1, l2, l3]
            .iter()
            .map(|&l| CategoricalPosterior::new(&tape, l, 0.5).unwrap())
            .collect();
        let fwd = fuse_shared(&mut tape, &ps).unwrap();
        let rev: Vec<CategoricalPosterior> = ps.iter().rev().cloned().collect();
        let bwd = fuse_shared(&mut tape, &rev).unwrap();
        let a = fwd.probs(&mut tape).unwrap();
        let b = bwd.probs(&mut tape).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dccm");
        let model = DccmvcModel::init(&small_config(), 11).unwrap();
        model.save(&path).unwrap();
        let loaded = DccmvcModel::load(&path).unwrap();
        assert_eq!(loaded.k, model.k);
        assert_eq!(loaded.d_p, model.d_p);
        assert_eq!(loaded.tau, model.tau);
        assert_eq!(loaded.view_dims(), model.view_dims());
        for (a, b) in model.parameters().iter().zip(loaded.parameters().iter()) {
            assert_eq!(a.data(), b.data());
            assert_eq!(a.shape(), b.shape());
        }
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.dccm");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        let err = DccmvcModel::load(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{}", err);
    }

    #[test]
    fn compatibility_check_names_dimension() {
        let model = DccmvcModel::zeroed(&small_config()).unwrap();
        let err = model.check_compatible(&[6, 9]).unwrap_err().to_string();
        assert!(err.contains("view 1 width"), "{}", err);
        assert!(model.check_compatible(&[6, 4]).is_ok());
    }
}
