//! Multi-view dataset handling: loading, saving, normalization, and a
//! synthetic generator with known shared/private factor structure.
//!
//! Two on-disk layouts are supported. The CSV layout is a directory holding
//! one headerless file per view (`view0.csv`, `view1.csv`, ...) plus an
//! optional `labels.csv` with one integer per line. The binary `dccb` layout
//! is a single file that round-trips datasets bit-exactly:
//!
//! ```text
//! magic "DCCB" | u32 version=1 | u32 V | u8 has_labels
//! per view: u32 n | u32 D_v | n*D_v little-endian f64, row-major
//! if has_labels: u32 n | n * u32
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fmt_err, read_f64, read_u32, write_f64, write_u32};
use crate::numerics::Tensor;
use crate::stream::{keyed_rng, DOMAIN_SYNTH};

const DCCB_MAGIC: &[u8; 4] = b"DCCB";
const DCCB_VERSION: u32 = 1;

/// `n` aligned samples observed through `V` views. Row `i` of every view is
/// the same sample; labels, when present, are class ids in `[0, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    views: Vec<Tensor>,
    labels: Option<Vec<usize>>,
    name: String,
}

impl MultiViewDataset {
    pub fn new(
        name: impl Into<String>,
        views: Vec<Tensor>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidArgument {
                op: "MultiViewDataset::new",
                expected: "at least one view".into(),
                actual: "zero views".into(),
            });
        }
        let n = views[0].rows();
        for (v, view) in views.iter().enumerate() {
            if view.shape().len() != 2 {
                return Err(Error::InvalidArgument {
                    op: "MultiViewDataset::new",
                    expected: "rank-2 view matrices".into(),
                    actual: format!("view {} has shape {:?}", v, view.shape()),
                });
            }
            if view.rows() != n {
                return Err(Error::RowCountMismatch {
                    view_a: 0,
                    rows_a: n,
                    view_b: v,
                    rows_b: view.rows(),
                });
            }
            if !view.is_finite() {
                return Err(Error::InvalidArgument {
                    op: "MultiViewDataset::new",
                    expected: "finite entries".into(),
                    actual: format!("non-finite value in view {}", v),
                });
            }
        }
        if let Some(ref l) = labels {
            if l.len() != n {
                return Err(Error::InvalidArgument {
                    op: "MultiViewDataset::new",
                    expected: format!("{} labels (one per sample)", n),
                    actual: format!("{} labels", l.len()),
                });
            }
        }
        Ok(Self {
            views,
            labels,
            name: name.into(),
        })
    }

    /// Number of samples.
    pub fn n(&self) -> usize {
        self.views[0].rows()
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.cols()).collect()
    }

    pub fn views(&self) -> &[Tensor] {
        &self.views
    }

    pub fn view(&self, v: usize) -> &Tensor {
        &self.views[v]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Class count `max(label)+1`, when labels are present.
    pub fn k(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Row subset in the given order; labels follow along. Indices may repeat.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        for &i in indices {
            if i >= self.n() {
                return Err(Error::InvalidArgument {
                    op: "MultiViewDataset::gather",
                    expected: format!("indices < {}", self.n()),
                    actual: format!("index {}", i),
                });
            }
        }
        let views = self
            .views
            .iter()
            .map(|v| v.gather_rows(indices))
            .collect::<Result<Vec<_>>>()?;
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(self.name.clone(), views, labels)
    }
}

/// On-disk dataset layouts understood by [`load`] and [`save`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// Directory of `view{i}.csv` files plus optional `labels.csv`.
    Csv,
    /// Single binary file with exact round-trip semantics.
    Dccb,
}

pub fn load(path: &Path, format: DataFormat) -> Result<MultiViewDataset> {
    match format {
        DataFormat::Csv => load_csv_dir(path),
        DataFormat::Dccb => load_dccb(path),
    }
}

pub fn save(dataset: &MultiViewDataset, path: &Path, format: DataFormat) -> Result<()> {
    match format {
        DataFormat::Csv => save_csv_dir(dataset, path),
        DataFormat::Dccb => save_dccb(dataset, path),
    }
}

/// Loads `view0.csv`, `view1.csv`, ... (consecutive from 0) and an optional
/// `labels.csv` from a directory.
pub fn load_csv_dir(dir: &Path) -> Result<MultiViewDataset> {
    let mut views = Vec::new();
    loop {
        let path = dir.join(format!("view{}.csv", views.len()));
        if !path.exists() {
            break;
        }
        views.push(read_csv_matrix(&path)?);
    }
    if views.is_empty() {
        return Err(fmt_err(dir, "no view0.csv found"));
    }
    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        Some(read_csv_labels(&labels_path)?)
    } else {
        None
    };
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    MultiViewDataset::new(name, views, labels)
}

pub fn save_csv_dir(dataset: &MultiViewDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (v, view) in dataset.views.iter().enumerate() {
        let mut w = BufWriter::new(File::create(dir.join(format!("view{}.csv", v)))?);
        for i in 0..view.rows() {
            let row: Vec<String> = view.row(i).iter().map(|x| x.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
    }
    if let Some(labels) = dataset.labels() {
        let mut w = BufWriter::new(File::create(dir.join("labels.csv"))?);
        for l in labels {
            writeln!(w, "{}", l)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn read_csv_matrix(path: &Path) -> Result<Tensor> {
    let reader = BufReader::new(File::open(path)?);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (r, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut width = 0usize;
        for (c, token) in line.split(',').enumerate() {
            let value: f64 = token.trim().parse().map_err(|_| Error::CsvParse {
                path: path.display().to_string(),
                row: r + 1,
                col: c + 1,
                token: token.to_string(),
            })?;
            data.push(value);
            width += 1;
        }
        match cols {
            None => cols = Some(width),
            Some(w) if w != width => {
                return Err(fmt_err(
                    path,
                    format!("row {} has {} columns, expected {}", r + 1, width, w),
                ));
            }
            _ => {}
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(fmt_err(path, "empty view file"));
    }
    Tensor::new(vec![rows, cols.unwrap()], data)
}

fn read_csv_labels(path: &Path) -> Result<Vec<usize>> {
    let reader = BufReader::new(File::open(path)?);
    let mut labels = Vec::new();
    for (r, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let value: usize = line.trim().parse().map_err(|_| Error::CsvParse {
            path: path.display().to_string(),
            row: r + 1,
            col: 1,
            token: line.clone(),
        })?;
        labels.push(value);
    }
    Ok(labels)
}

pub fn load_dccb(path: &Path) -> Result<MultiViewDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| fmt_err(path, "truncated while reading magic"))?;
    if &magic != DCCB_MAGIC {
        return Err(fmt_err(path, "bad magic (not a dccb file)"));
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != DCCB_VERSION {
        return Err(fmt_err(path, format!("unsupported version {}", version)));
    }
    let num_views = read_u32(&mut r, path, "view count")? as usize;
    if num_views == 0 {
        return Err(fmt_err(path, "zero views"));
    }
    let mut has_labels = [0u8; 1];
    r.read_exact(&mut has_labels)
        .map_err(|_| fmt_err(path, "truncated while reading label flag"))?;
    if has_labels[0] > 1 {
        return Err(fmt_err(path, "label flag must be 0 or 1"));
    }
    let mut views: Vec<Tensor> = Vec::with_capacity(num_views);
    for v in 0..num_views {
        let n = read_u32(&mut r, path, "row count")? as usize;
        let d = read_u32(&mut r, path, "column count")? as usize;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(read_f64(&mut r, path, "view data")?);
        }
        let view = Tensor::new(vec![n, d], data)?;
        if v > 0 && view.rows() != views[0].rows() {
            return Err(Error::RowCountMismatch {
                view_a: 0,
                rows_a: views[0].rows(),
                view_b: v,
                rows_b: view.rows(),
            });
        }
        views.push(view);
    }
    let labels = if has_labels[0] == 1 {
        let n = read_u32(&mut r, path, "label count")? as usize;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(read_u32(&mut r, path, "label")? as usize);
        }
        Some(labels)
    } else {
        None
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    MultiViewDataset::new(name, views, labels)
}

pub fn save_dccb(dataset: &MultiViewDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DCCB_MAGIC)?;
    write_u32(&mut w, DCCB_VERSION)?;
    write_u32(&mut w, dataset.num_views() as u32)?;
    w.write_all(&[dataset.labels.is_some() as u8])?;
    for view in &dataset.views {
        write_u32(&mut w, view.rows() as u32)?;
        write_u32(&mut w, view.cols() as u32)?;
        for &x in view.data() {
            write_f64(&mut w, x)?;
        }
    }
    if let Some(labels) = dataset.labels() {
        write_u32(&mut w, labels.len() as u32)?;
        for &l in labels {
            if l > u32::MAX as usize {
                return Err(fmt_err(path, format!("label {} exceeds u32 range", l)));
            }
            write_u32(&mut w, l as u32)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Feature scaling applied before training and evaluation. Evaluation must
/// use the same normalization the checkpoint was trained with; the CLI
/// records it in the run config for that reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Per-column map to `[0, 1]`; constant columns map to 0.
    #[default]
    MinMax,
    /// Per-column zero mean, unit (population) variance; constant columns map
    /// to 0.
    ZScore,
    /// Use the data as-is.
    None,
}

impl Normalization {
    pub fn apply(self, dataset: &MultiViewDataset) -> MultiViewDataset {
        match self {
            Normalization::MinMax => normalize_minmax(dataset),
            Normalization::ZScore => normalize_zscore(dataset),
            Normalization::None => dataset.clone(),
        }
    }
}

/// Maps every feature column to `[0, 1]` via `(x - min) / (max - min)`.
/// Constant columns become all zeros. Applying twice equals applying once.
pub fn normalize_minmax(dataset: &MultiViewDataset) -> MultiViewDataset {
    rescale_columns(dataset, |col| {
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max > min {
            (min, max - min)
        } else {
            (min, 0.0)
        }
    })
}

/// Maps every feature column to zero mean and unit population variance.
/// Constant columns become all zeros.
pub fn normalize_zscore(dataset: &MultiViewDataset) -> MultiViewDataset {
    rescale_columns(dataset, |col| {
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    })
}

/// Per-column affine rescale `(x - shift) / scale`, with `scale == 0`
/// signalling "constant column, output zeros".
fn rescale_columns(
    dataset: &MultiViewDataset,
    stats: impl Fn(&[f64]) -> (f64, f64),
) -> MultiViewDataset {
    let views = dataset
        .views
        .iter()
        .map(|view| {
            let (n, d) = (view.rows(), view.cols());
            let mut out = vec![0.0; n * d];
            let mut col = vec![0.0; n];
            for j in 0..d {
                for i in 0..n {
                    col[i] = view.at(i, j);
                }
                let (shift, scale) = stats(&col);
                if scale > 0.0 {
                    for i in 0..n {
                        out[i * d + j] = (col[i] - shift) / scale;
                    }
                }
            }
            Tensor::new(vec![n, d], out).expect("shape preserved")
        })
        .collect();
    MultiViewDataset {
        views,
        labels: dataset.labels.clone(),
        name: dataset.name.clone(),
    }
}

/// How latent factors are mixed into observations by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mixing {
    Linear,
    #[default]
    Tanh,
}

/// Recipe for [`synth_generate`]. The generator plants a shared cluster
/// factor and per-view private factors, so shared/private recovery is
/// testable against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Sample count.
    pub n: usize,
    /// Cluster count; must not exceed `n`.
    pub k: usize,
    /// Number of views.
    pub views: usize,
    /// Dimension of the shared (cluster) factor.
    pub d_shared: usize,
    /// Dimension of each view's private factor; may be 0.
    pub d_private: usize,
    /// Observed dimension of every view.
    pub view_dim: usize,
    pub mixing: Mixing,
    /// Scale of the shared-factor jitter and the observation noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 600,
            k: 3,
            views: 2,
            d_shared: 3,
            d_private: 4,
            view_dim: 20,
            mixing: Mixing::Tanh,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 4] = [
            ("n", self.n),
            ("k", self.k),
            ("views", self.views),
            ("d_shared", self.d_shared),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::InvalidArgument {
                    op: "SynthSpec::validate",
                    expected: format!("{} >= 1", field),
                    actual: "0".into(),
                });
            }
        }
        if self.view_dim == 0 {
            return Err(Error::InvalidArgument {
                op: "SynthSpec::validate",
                expected: "view_dim >= 1".into(),
                actual: "0".into(),
            });
        }
        if self.k > self.n {
            return Err(Error::InvalidArgument {
                op: "SynthSpec::validate",
                expected: "k <= n".into(),
                actual: format!("k={}, n={}", self.k, self.n),
            });
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument {
                op: "SynthSpec::validate",
                expected: "noise_sigma >= 0 and finite".into(),
                actual: format!("{}", self.noise_sigma),
            });
        }
        Ok(())
    }
}

/// Class means are rescaled so the minimum pairwise distance is at least
/// `max(4 * noise_sigma, SEPARATION_FLOOR)`. The absolute floor keeps classes
/// separable against the unit-variance private factors, which the
/// noise-relative rule alone does not cover.
pub const SEPARATION_FLOOR: f64 = 6.0;

/// Generates a labeled multi-view dataset with planted factor structure.
///
/// Per sample: a uniform class label picks a class mean in shared-factor
/// space (means separated by at least `max(4·noise_sigma, SEPARATION_FLOOR)`);
/// the shared factor is that mean plus `N(0, noise_sigma²)` jitter; each view
/// adds its own `N(0, I)` private factor, mixes `[shared; private]` through a
/// fixed random matrix (optionally through `tanh`), and adds
/// `N(0, noise_sigma²)` observation noise.
///
/// Deterministic given the spec: all draws come from one stream in a fixed
/// order (labels, class means, shared jitter, then per view private factors,
/// mixing matrix, observation noise).
pub fn synth_generate(spec: &SynthSpec) -> Result<MultiViewDataset> {
    spec.validate()?;
    let mut rng = keyed_rng(spec.seed, DOMAIN_SYNTH, 0, 0);
    let normal = StandardNormal;

    let labels: Vec<usize> = (0..spec.n).map(|_| rng.gen_range(0..spec.k)).collect();

    let mut means = vec![0.0f64; spec.k * spec.d_shared];
    for m in means.iter_mut() {
        *m = normal.sample(&mut rng);
    }
    if spec.k > 1 {
        let mut min_dist = f64::INFINITY;
        for a in 0..spec.k {
            for b in a + 1..spec.k {
                let d: f64 = (0..spec.d_shared)
                    .map(|j| {
                        let diff = means[a * spec.d_shared + j] - means[b * spec.d_shared + j];
                        diff * diff
                    })
                    .sum();
                min_dist = min_dist.min(d.sqrt());
            }
        }
        if min_dist <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "synth_generate",
                expected: "distinct class means".into(),
                actual: "coincident draws; change the seed".into(),
            });
        }
        let target = (4.0 * spec.noise_sigma).max(SEPARATION_FLOOR);
        if min_dist < target {
            let scale = target / min_dist;
            for m in means.iter_mut() {
                *m *= scale;
            }
        }
    }

    let mut shared = vec![0.0f64; spec.n * spec.d_shared];
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..spec.d_shared {
            let jitter: f64 = normal.sample(&mut rng);
            shared[i * spec.d_shared + j] =
                means[y * spec.d_shared + j] + spec.noise_sigma * jitter;
        }
    }

    let d_latent = spec.d_shared + spec.d_private;
    let w_scale = 1.0 / (d_latent as f64).sqrt();
    let mut views = Vec::with_capacity(spec.views);
    for _ in 0..spec.views {
        let mut private = vec![0.0f64; spec.n * spec.d_private];
        for p in private.iter_mut() {
            *p = normal.sample(&mut rng);
        }
        let mut w = vec![0.0f64; d_latent * spec.view_dim];
        for e in w.iter_mut() {
            let g: f64 = normal.sample(&mut rng);
            *e = w_scale * g;
        }
        let mut x = vec![0.0f64; spec.n * spec.view_dim];
        for i in 0..spec.n {
            for j in 0..spec.view_dim {
                let mut acc = 0.0;
                for f in 0..spec.d_shared {
                    acc += shared[i * spec.d_shared + f] * w[f * spec.view_dim + j];
                }
                for f in 0..spec.d_private {
                    acc += private[i * spec.d_private + f]
                        * w[(spec.d_shared + f) * spec.view_dim + j];
                }
                let mixed = match spec.mixing {
                    Mixing::Linear => acc,
                    Mixing::Tanh => acc.tanh(),
                };
                let noise: f64 = normal.sample(&mut rng);
                x[i * spec.view_dim + j] = mixed + spec.noise_sigma * noise;
            }
        }
        views.push(Tensor::new(vec![spec.n, spec.view_dim], x)?);
    }

    let name = format!("synth-n{}-k{}-v{}", spec.n, spec.k, spec.views);
    MultiViewDataset::new(name, views, Some(labels))
}
