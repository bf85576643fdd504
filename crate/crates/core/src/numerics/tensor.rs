use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values, rank 1 or 2.
///
/// `Tensor` is a plain value: gradients live on the [`Tape`](super::Tape)
/// nodes that reference tensors, not on the tensors themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::InvalidArgument {
                op: "tensor",
                expected: "rank 1 or 2".into(),
                actual: format!("rank {}", shape.len()),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument {
                op: "tensor",
                expected: format!("{} elements for shape {:?}", numel, shape),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("zeros: shape/data always consistent")
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("full: shape/data always consistent")
    }

    /// A scalar represented as a 1-element rank-1 tensor.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Rank-2 tensor from rows; all rows must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::InvalidArgument {
                op: "tensor",
                expected: format!("rows of length {}", d),
                actual: format!("row of length {}", bad.len()),
            });
        }
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self::new(vec![n, d], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows (a rank-1 tensor counts as a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns (length for rank-1 tensors).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor rank >= 1")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows() && col < self.cols());
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// New tensor containing the given rows in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                expected: "rank-2 tensor".into(),
                actual: format!("rank {}", self.rank()),
            });
        }
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= self.rows() {
                return Err(Error::InvalidArgument {
                    op: "gather_rows",
                    expected: format!("row index < {}", self.rows()),
                    actual: i.to_string(),
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(vec![idx.len(), c], data)
    }
}

// ---------------------------------------------------------------------------
// Matrix kernels. All three are cache-tiled so that a single core sustains
// multi-GFLOP throughput on the layer sizes used by the model; each kernel
// accumulates in a fixed order, so results are bit-deterministic.
// ---------------------------------------------------------------------------

/// C = A * B with A (m x k), B (k x n), both row-major.
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f64; m * n];
    const TJ: usize = 256;
    let mut jb = 0;
    while jb < n {
        let je = (jb + TJ).min(n);
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for j in jb..je {
                    crow[j] += aip * brow[j];
                }
            }
        }
        jb = je;
    }
    c
}

/// C = A * B^T with A (m x k), B (n x k); returns (m x n).
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0f64; m * n];
    const TJ: usize = 32;
    let mut jb = 0;
    while jb < n {
        let je = (jb + TJ).min(n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in jb..je {
                let brow = &b[j * k..(j + 1) * k];
                // Four accumulators give the ILP that a straight fold lacks;
                // the grouping is fixed, so the sum order is deterministic.
                let mut s0 = 0.0;
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                let mut s3 = 0.0;
                let mut p = 0;
                while p + 4 <= k {
                    s0 += arow[p] * brow[p];
                    s1 += arow[p + 1] * brow[p + 1];
                    s2 += arow[p + 2] * brow[p + 2];
                    s3 += arow[p + 3] * brow[p + 3];
                    p += 4;
                }
                let mut s = (s0 + s1) + (s2 + s3);
                while p < k {
                    s += arow[p] * brow[p];
                    p += 1;
                }
                c[i * n + j] = s;
            }
        }
        jb = je;
    }
    c
}

/// C = A^T * B with A (k x m), B (k x n); returns (m x n).
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f64; m * n];
    const TI: usize = 32;
    let mut ib = 0;
    while ib < m {
        let ie = (ib + TI).min(m);
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for i in ib..ie {
                let api = a[p * m + i];
                let crow = &mut c[i * n..(i + 1) * n];
                for (cj, bj) in crow.iter_mut().zip(brow.iter()) {
                    *cj += api * bj;
                }
            }
        }
        ib = ie;
    }
    c
}

pub(crate) fn transpose_data(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
