use crate::error::{Error, Result};
use crate::numerics::tensor::{mm_nn, mm_nt, mm_tn, transpose_data, Tensor};

/// Default clamp floor for [`Tape::log_clamped`].
pub const DEFAULT_LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    /// (n x d) + (d): the rank-1 rhs is added to every row.
    AddBias(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Hadamard(TensorId, TensorId),
    ScalarMul(TensorId, f64),
    Relu(TensorId),
    Sigmoid(TensorId),
    Exp(TensorId),
    Log(TensorId),
    LogClamped(TensorId, f64),
    Square(TensorId),
    RowSoftmax(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    ConcatCols(TensorId, TensorId),
    SliceCols(TensorId, usize, usize),
    Transpose(TensorId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Reverse-mode autodiff tape.
///
/// Every operation records its result as a new node and returns a [`TensorId`];
/// ids increase in recording order, so replaying the tape backwards from a loss
/// node visits each node after all of its consumers. [`Tape::backward`] clears
/// previous gradients, seeds the scalar loss with 1, and sweeps once; nodes the
/// loss never touched keep `grad = None`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input node. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Record a non-differentiable input (data, noise, fixed constants).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` call, `None` if the node was never
    /// reached (or `backward` has not run).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, id: TensorId) -> Option<Tensor> {
        self.nodes[id.0].grad.as_ref().map(|g| {
            Tensor::new(self.nodes[id.0].value.shape().to_vec(), g.clone())
                .expect("gradient shape always matches value")
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn unary(&mut self, input: TensorId, op: Op, value: Tensor) -> TensorId {
        let rg = self.requires(input);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: TensorId, b: TensorId, op: Op, value: Tensor) -> TensorId {
        let rg = self.requires(a) || self.requires(b);
        self.push(value, op, rg)
    }

    // -- forward ops --------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let data = mm_nn(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.binary(a, b, Op::Matmul(a, b), value))
    }

    /// Elementwise addition of same-shape tensors, or broadcast of a rank-1
    /// bias over the rows of a rank-2 tensor.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data: Vec<f64> = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x + y)
                .collect();
            let value = Tensor::new(va.shape().to_vec(), data)?;
            return Ok(self.binary(a, b, Op::Add(a, b), value));
        }
        if va.rank() == 2 && vb.rank() == 1 && va.cols() == vb.numel() {
            let (n, d) = (va.rows(), va.cols());
            let mut data = Vec::with_capacity(n * d);
            for i in 0..n {
                for (x, y) in va.row(i).iter().zip(vb.data()) {
                    data.push(x + y);
                }
            }
            let value = Tensor::new(vec![n, d], data)?;
            return Ok(self.binary(a, b, Op::AddBias(a, b), value));
        }
        Err(Error::ShapeMismatch {
            op: "add",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.binary(a, b, Op::Sub(a, b), value))
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "hadamard",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.binary(a, b, Op::Hadamard(a, b), value))
    }

    pub fn scalar_mul(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        if !c.is_finite() {
            return Err(Error::InvalidArgument {
                op: "scalar_mul",
                expected: "finite scalar".into(),
                actual: c.to_string(),
            });
        }
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.unary(a, Op::ScalarMul(a, c), value))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.unary(a, Op::Relu(a), value))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        let data: Vec<f64> = va
            .data()
            .iter()
            .map(|&x| {
                // Branch keeps the exponent negative, so neither arm overflows.
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.unary(a, Op::Sigmoid(a), value))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|x| x.exp()).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.unary(a, Op::Exp(a), value))
    }

    /// Natural log. Rejects non-positive entries; use [`Tape::log_clamped`]
    /// when inputs may touch zero.
    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        if let Some((index, &value)) = va.data().iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(Error::LogDomain { value, index });
        }
        let data: Vec<f64> = va.data().iter().map(|x| x.ln()).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.unary(a, Op::Log(a), value))
    }

    /// `ln(max(x, floor))`; entries at or below the floor get zero gradient.
    pub fn log_clamped(&mut self, a: TensorId, floor: f64) -> Result<TensorId> {
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "log_clamped",
                expected: "positive finite floor".into(),
                actual: floor.to_string(),
            });
        }
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|x| x.max(floor).ln()).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.unary(a, Op::LogClamped(a, floor), value))
    }

    pub fn square(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|x| x * x).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.unary(a, Op::Square(a), value))
    }

    /// Numerically stable softmax over the last dimension, row by row.
    /// Rank-1 input is treated as a single row.
    pub fn row_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        let cols = va.cols();
        if cols == 0 {
            return Err(Error::InvalidArgument {
                op: "row_softmax",
                expected: "non-empty rows".into(),
                actual: format!("shape {:?}", va.shape()),
            });
        }
        let mut data = Vec::with_capacity(va.numel());
        for chunk in va.data().chunks(cols) {
            let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut sum = 0.0;
            for &x in chunk {
                let e = (x - max).exp();
                sum += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= sum;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.unary(a, Op::RowSoftmax(a), value))
    }

    /// Sum of all entries; result is a 1-element tensor.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let total: f64 = self.value(a).data().iter().sum();
        Ok(self.unary(a, Op::Sum(a), Tensor::scalar(total)))
    }

    /// Mean of all entries; result is a 1-element tensor.
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        if va.numel() == 0 {
            return Err(Error::InvalidArgument {
                op: "mean",
                expected: "non-empty tensor".into(),
                actual: "0 elements".into(),
            });
        }
        let total: f64 = va.data().iter().sum();
        let n = va.numel() as f64;
        Ok(self.unary(a, Op::Mean(a), Tensor::scalar(total / n)))
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.rows() != vb.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (n, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let value = Tensor::new(vec![n, ca + cb], data)?;
        Ok(self.binary(a, b, Op::ConcatCols(a, b), value))
    }

    /// Columns `lo..hi` (half-open) of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: TensorId, lo: usize, hi: usize) -> Result<TensorId> {
        let va = self.value(a);
        if va.rank() != 2 || lo >= hi || hi > va.cols() {
            return Err(Error::InvalidArgument {
                op: "slice_cols",
                expected: format!("0 <= lo < hi <= {} on shape {:?}", va.cols(), va.shape()),
                actual: format!("lo={}, hi={}", lo, hi),
            });
        }
        let n = va.rows();
        let mut data = Vec::with_capacity(n * (hi - lo));
        for i in 0..n {
            data.extend_from_slice(&va.row(i)[lo..hi]);
        }
        let value = Tensor::new(vec![n, hi - lo], data)?;
        Ok(self.unary(a, Op::SliceCols(a, lo, hi), value))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::InvalidArgument {
                op: "transpose",
                expected: "rank-2 tensor".into(),
                actual: format!("shape {:?}", va.shape()),
            });
        }
        let (r, c) = (va.rows(), va.cols());
        let data = transpose_data(va.data(), r, c);
        let value = Tensor::new(vec![c, r], data)?;
        Ok(self.unary(a, Op::Transpose(a), value))
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Clears gradients from any previous
    /// sweep, then fills `grad` for every node that (transitively) requires a
    /// gradient and is reachable from `loss`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // constant loss: nothing depends on parameters
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("checked above");
            let op = self.nodes[i].op;
            self.propagate(i, &g, op);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(node.value.numel(), contrib.len());
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    fn propagate(&mut self, node_index: usize, g: &[f64], op: Op) {
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                if self.requires(a) {
                    // dA = G * B^T
                    let ga = mm_nt(g, self.value(b).data(), m, n, k);
                    self.accumulate(a, &ga);
                }
                if self.requires(b) {
                    // dB = A^T * G
                    let gb = mm_tn(self.value(a).data(), g, k, m, n);
                    self.accumulate(b, &gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::AddBias(a, b) => {
                self.accumulate(a, g);
                if self.requires(b) {
                    let d = self.value(b).numel();
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (s, x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    self.accumulate(b, &gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                if self.requires(b) {
                    let gb: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.accumulate(b, &gb);
                }
            }
            Op::Hadamard(a, b) => {
                if self.requires(a) {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    self.accumulate(a, &ga);
                }
                if self.requires(b) {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    self.accumulate(b, &gb);
                }
            }
            Op::ScalarMul(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accumulate(a, &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[node_index].value.data();
                let ga: Vec<f64> = g.iter().zip(out).map(|(gi, s)| gi * s * (1.0 - s)).collect();
                self.accumulate(a, &ga);
            }
            Op::Exp(a) => {
                let out = self.nodes[node_index].value.data();
                let ga: Vec<f64> = g.iter().zip(out).map(|(gi, e)| gi * e).collect();
                self.accumulate(a, &ga);
            }
            Op::Log(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gi, x)| gi / x)
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::LogClamped(a, floor) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gi, &x)| if x > floor { gi / x } else { 0.0 })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Square(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gi, x)| 2.0 * gi * x)
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::RowSoftmax(a) => {
                let out = self.nodes[node_index].value.data();
                let cols = self.nodes[node_index].value.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (grow, srow) in g.chunks(cols).zip(out.chunks(cols)) {
                    let dot: f64 = grow.iter().zip(srow).map(|(x, y)| x * y).sum();
                    for (gi, si) in grow.iter().zip(srow) {
                        ga.push(si * (gi - dot));
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(a).numel()];
                self.accumulate(a, &ga);
            }
            Op::Mean(a) => {
                let n = self.value(a).numel();
                let ga = vec![g[0] / n as f64; n];
                self.accumulate(a, &ga);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(a).cols(), self.value(b).cols());
                let rows = self.value(a).rows();
                if self.requires(a) {
                    let mut ga = Vec::with_capacity(rows * ca);
                    for row in g.chunks(ca + cb) {
                        ga.extend_from_slice(&row[..ca]);
                    }
                    self.accumulate(a, &ga);
                }
                if self.requires(b) {
                    let mut gb = Vec::with_capacity(rows * cb);
                    for row in g.chunks(ca + cb) {
                        gb.extend_from_slice(&row[ca..]);
                    }
                    self.accumulate(b, &gb);
                }
            }
            Op::SliceCols(a, lo, hi) => {
                let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
                let w = hi - lo;
                let mut ga = vec![0.0; rows * cols];
                for (i, row) in g.chunks(w).enumerate() {
                    ga[i * cols + lo..i * cols + hi].copy_from_slice(row);
                }
                self.accumulate(a, &ga);
            }
            Op::Transpose(a) => {
                // Node value is (c x r); transposing G lands back on (r x c).
                let (c, r) = {
                    let v = &self.nodes[node_index].value;
                    (v.rows(), v.cols())
                };
                let ga = transpose_data(g, c, r);
                self.accumulate(a, &ga);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn row_softmax_uniform_on_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[0.0, 0.0, 0.0]));
        let y = tape.row_softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn row_softmax_rows_sum_to_one_and_shift_invariant() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 3, &[1.0, 2.0, 3.0, 1000.0, 1001.0, 1002.0]));
        let y = tape.row_softmax(x).unwrap();
        let v = tape.value(y);
        for i in 0..2 {
            let s: f64 = v.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Rows differ by a constant shift, so the softmaxes agree.
        for j in 0..3 {
            assert!((v.at(0, j) - v.at(1, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_naive() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(3, 4, &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]));
        let b = tape.constant(t2(4, 2, &[1., -1., 0.5, 2., -3., 1., 4., 0.]));
        let c = tape.matmul(a, b).unwrap();
        let va = tape.value(a).clone();
        let vb = tape.value(b).clone();
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0;
                for p in 0..4 {
                    want += va.at(i, p) * vb.at(p, j);
                }
                assert!((tape.value(c).at(i, j) - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{}", err);
        assert!(err.contains("[2, 3]"), "{}", err);
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[1.0, -1.0]));
        let err = tape.log(x).unwrap_err().to_string();
        assert!(err.contains("non-positive"), "{}", err);
        // Clamped variant accepts the same input.
        let y = tape.log_clamped(x, DEFAULT_LOG_FLOOR).unwrap();
        assert!((tape.value(y).data()[1] - DEFAULT_LOG_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_square_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_through_relu_masks_negative() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[-1.0, 2.0]), true);
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        let err = tape.backward(y).unwrap_err().to_string();
        assert!(err.contains("scalar"), "{}", err);
    }

    #[test]
    fn untouched_nodes_keep_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let unused = tape.leaf(Tensor::scalar(5.0), true);
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(x).is_some());
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let c = tape.constant(Tensor::scalar(4.0));
        let p = tape.hadamard(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn concat_slice_round_trip_with_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 2, &[1., 2., 3., 4.]), true);
        let b = tape.leaf(t2(2, 1, &[5., 6.]), true);
        let cat = tape.concat_cols(a, b).unwrap();
        let left = tape.slice_cols(cat, 0, 2).unwrap();
        assert_eq!(tape.value(left).data(), tape.value(a).data());
        let right = tape.slice_cols(cat, 2, 3).unwrap();
        let s = tape.sum(right).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);
        assert!(tape.grad(a).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bias_broadcast_grad_is_column_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(3, 2, &[1., 2., 3., 4., 5., 6.]), true);
        let b = tape.leaf(t1(&[10.0, 20.0]), true);
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).at(2, 1), 26.0);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 3.0]);
    }

    /// Central-difference gradient of a scalar-valued builder, used to verify
    /// the chain rule on a composite expression.
    fn fd_grad(build: impl Fn(&mut Tape, Tensor) -> TensorId, x0: &Tensor, h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x0.numel());
        for i in 0..x0.numel() {
            let eval = |delta: f64| -> f64 {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut tape = Tape::new();
                let id = build(&mut tape, xp);
                tape.value(id).data()[0]
            };
            out.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        out
    }

    #[test]
    fn chain_rule_matches_finite_differences() {
        let x0 = t2(2, 3, &[0.3, -0.7, 1.2, 0.05, -1.4, 0.9]);
        let build = |tape: &mut Tape, x: Tensor| -> TensorId {
            let xid = tape.leaf(x, true);
            let s = tape.sigmoid(xid).unwrap();
            let sm = tape.row_softmax(s).unwrap();
            let sq = tape.square(sm).unwrap();
            tape.mean(sq).unwrap()
        };
        let fd = fd_grad(build, &x0, 1e-5);

        let mut tape = Tape::new();
        let xid = tape.leaf(x0.clone(), true);
        let s = tape.sigmoid(xid).unwrap();
        let sm = tape.row_softmax(s).unwrap();
        let sq = tape.square(sm).unwrap();
        let loss = tape.mean(sq).unwrap();
        tape.backward(loss).unwrap();
        let an = tape.grad(xid).unwrap();
        for (a, f) in an.iter().zip(&fd) {
            assert!(
                (a - f).abs() <= 1e-7 + 1e-4 * f.abs(),
                "analytic {} vs fd {}",
                a,
                f
            );
        }
    }

    #[test]
    fn gradient_is_linear_in_loss_combination() {
        let x0 = t1(&[0.4, -0.9, 1.7]);
        let grads = |alpha: f64, beta: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), true);
            let f = {
                let sq = tape.square(x).unwrap();
                tape.sum(sq).unwrap()
            };
            let g = {
                let sg = tape.sigmoid(x).unwrap();
                tape.mean(sg).unwrap()
            };
            let fa = tape.scalar_mul(f, alpha).unwrap();
            let gb = tape.scalar_mul(g, beta).unwrap();
            let total = tape.add(fa, gb).unwrap();
            tape.backward(total).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let gf = grads(1.0, 0.0);
        let gg = grads(0.0, 1.0);
        let combined = grads(2.5, -1.25);
        for i in 0..3 {
            let want = 2.5 * gf[i] - 1.25 * gg[i];
            assert!((combined[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_backward_is_bit_deterministic() {
        let run = || -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let a = tape.leaf(t2(2, 2, &[0.1, -0.2, 0.3, 0.4]), true);
            let b = tape.leaf(t2(2, 2, &[1.0, 2.0, -0.5, 0.25]), true);
            let c = tape.matmul(a, b).unwrap();
            let s = tape.sigmoid(c).unwrap();
            let l = tape.sum(s).unwrap();
            tape.backward(l).unwrap();
            (
                tape.value(l).data().to_vec(),
                tape.grad(a).unwrap().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
