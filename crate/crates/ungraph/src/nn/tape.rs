//! Reverse-mode autodiff on a flat tape of dense 2-D tensors.
//!
//! Every value is an `Array2<f64>`; vectors are single-row or single-column
//! matrices and scalars are 1x1. The backward pass emits its
//! vector-Jacobian products as ordinary tape nodes, so gradients are
//! themselves differentiable — this is what lets the WGAN gradient penalty
//! backpropagate through a gradient norm.

use ndarray::{concatenate, Array2, Axis};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    /// Broadcast-add a 1xk row to every row of an nxk matrix.
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    /// Broadcast-add an nx1 column to every column of an nxk matrix.
    AddCol(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    AddScalar(NodeId, f64),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    SumAll(NodeId),
    SumAxis0(NodeId),
    SumAxis1(NodeId),
    BroadcastScalar(NodeId, usize, usize),
    BroadcastRows(NodeId, usize),
    BroadcastCols(NodeId, usize),
    Sqrt(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    GatherRows(NodeId, Rc<Vec<usize>>),
    /// Scatter-add rows of the input into a zero matrix with `usize` rows.
    ScatterAddRows(NodeId, Rc<Vec<usize>>, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    /// Embed at column offset into a zero matrix of the given width.
    PadCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    Reshape(NodeId, usize, usize),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | MulRow(a, b)
            | AddCol(a, b) | MulCol(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(a) | AddScalar(a, _) | Scale(a, _) | Transpose(a) | SumAll(a) | SumAxis0(a)
            | SumAxis1(a) | BroadcastScalar(a, _, _) | BroadcastRows(a, _)
            | BroadcastCols(a, _) | Sqrt(a) | Exp(a) | Ln(a) | Tanh(a) | Sigmoid(a)
            | LeakyRelu(a, _) | GatherRows(a, _) | ScatterAddRows(a, _, _)
            | SliceCols(a, _, _) | PadCols(a, _, _) | SliceRows(a, _, _) | Reshape(a, _, _) => {
                vec![*a]
            }
            ConcatCols(v) | ConcatRows(v) => v.clone(),
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient nodes produced by a backward pass, indexed by the id of the
/// forward node they differentiate.
pub struct Grads {
    grad: Vec<Option<NodeId>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<NodeId> {
        self.grad.get(id.0).copied().flatten()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), &[1, 1], "scalar() on non-1x1 node");
        v[(0, 0)]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = self.value(id);
        (v.nrows(), v.ncols())
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, x: f64) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -&self.nodes[a.0].value;
        self.push(v, Op::Neg(a))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (n, k) = self.shape(a);
        assert_eq!(self.shape(row), (1, k), "add_row shape mismatch ({n}x{k})");
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, k) = self.shape(a);
        assert_eq!(self.shape(row), (1, k), "mul_row shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[row.0].value;
        self.push(v, Op::MulRow(a, row))
    }

    pub fn add_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "add_col shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[col.0].value;
        self.push(v, Op::AddCol(a, col))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "mul_col shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[col.0].value;
        self.push(v, Op::MulCol(a, col))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (_, ka) = self.shape(a);
        let (kb, _) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dim mismatch");
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn sum_axis0(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumAxis0(a))
    }

    pub fn sum_axis1(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumAxis1(a))
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, r: usize, c: usize) -> NodeId {
        assert_eq!(self.shape(a), (1, 1));
        let v = Array2::from_elem((r, c), self.nodes[a.0].value[(0, 0)]);
        self.push(v, Op::BroadcastScalar(a, r, c))
    }

    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        let (r, k) = self.shape(a);
        assert_eq!(r, 1);
        let row = self.nodes[a.0].value.row(0).to_owned();
        let v = Array2::from_shape_fn((n, k), |(_, j)| row[j]);
        self.push(v, Op::BroadcastRows(a, n))
    }

    pub fn broadcast_cols(&mut self, a: NodeId, k: usize) -> NodeId {
        let (n, c) = self.shape(a);
        assert_eq!(c, 1);
        let col = self.nodes[a.0].value.column(0).to_owned();
        let v = Array2::from_shape_fn((n, k), |(i, _)| col[i]);
        self.push(v, Op::BroadcastCols(a, k))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let src = &self.nodes[a.0].value;
        let mut v = Array2::zeros((idx.len(), src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&src.row(r));
        }
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn scatter_add_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>, n_out: usize) -> NodeId {
        let src = &self.nodes[a.0].value;
        assert_eq!(src.nrows(), idx.len());
        let mut v = Array2::zeros((n_out, src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            let mut row = v.row_mut(r);
            row += &src.row(i);
        }
        self.push(v, Op::ScatterAddRows(a, idx, n_out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let v = self.nodes[a.0].value.slice(ndarray::s![.., lo..hi]).to_owned();
        self.push(v, Op::SliceCols(a, lo, hi))
    }

    pub fn pad_cols(&mut self, a: NodeId, lo: usize, total: usize) -> NodeId {
        let src = &self.nodes[a.0].value;
        assert!(lo + src.ncols() <= total);
        let mut v = Array2::zeros((src.nrows(), total));
        v.slice_mut(ndarray::s![.., lo..lo + src.ncols()]).assign(src);
        self.push(v, Op::PadCols(a, lo, total))
    }

    pub fn slice_rows(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let v = self.nodes[a.0].value.slice(ndarray::s![lo..hi, ..]).to_owned();
        self.push(v, Op::SliceRows(a, lo, hi))
    }

    pub fn reshape(&mut self, a: NodeId, r: usize, c: usize) -> NodeId {
        let src = &self.nodes[a.0].value;
        assert_eq!(src.len(), r * c, "reshape size mismatch");
        let flat: Vec<f64> = src.iter().copied().collect();
        let v = Array2::from_shape_vec((r, c), flat).unwrap();
        self.push(v, Op::Reshape(a, r, c))
    }

    /// Detached copy: same value, no gradient path.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.clone();
        self.leaf(v)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// Row-wise softmax with a constant max-shift for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let maxes: Array2<f64> = {
            let v = self.value(a);
            Array2::from_shape_fn((v.nrows(), 1), |(i, _)| {
                v.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            })
        };
        let shift = self.leaf(maxes);
        let shift = self.neg(shift);
        let centered = self.add_col(a, shift);
        let e = self.exp(centered);
        let sums = self.sum_axis1(e);
        let inv = {
            let ones = self.leaf(Array2::ones(self.shape(sums)));
            self.div(ones, sums)
        };
        self.mul_col(e, inv)
    }

    /// Backward pass from a scalar root with seed gradient 1.
    pub fn backward(&mut self, root: NodeId) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        self.backward_seeded(vec![(root, Array2::ones((1, 1)))])
    }

    /// Backward pass with explicit output gradients. Gradients are created
    /// as new tape nodes, so they can be differentiated again.
    pub fn backward_seeded(&mut self, seeds: Vec<(NodeId, Array2<f64>)>) -> Grads {
        let n = self.nodes.len();
        let mut needed = vec![false; n];
        for (id, _) in &seeds {
            needed[id.0] = true;
        }
        for i in (0..n).rev() {
            if needed[i] {
                for p in self.nodes[i].op.parents() {
                    needed[p.0] = true;
                }
            }
        }
        let mut grad: Vec<Option<NodeId>> = vec![None; n];
        for (id, seed) in seeds {
            assert_eq!(self.shape(id), (seed.nrows(), seed.ncols()), "seed shape mismatch");
            let s = self.leaf(seed);
            grad[id.0] = Some(match grad[id.0] {
                Some(old) => self.add(old, s),
                None => s,
            });
        }
        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            let g = match grad[i] {
                Some(g) => g,
                None => continue,
            };
            let out = NodeId(i);
            let op = self.nodes[i].op.clone();
            let acc = |tape: &mut Tape, grad: &mut Vec<Option<NodeId>>, p: NodeId, inc: NodeId| {
                grad[p.0] = Some(match grad[p.0] {
                    Some(old) => tape.add(old, inc),
                    None => inc,
                });
            };
            use Op::*;
            match op {
                Leaf => {}
                Add(a, b) => {
                    acc(self, &mut grad, a, g);
                    acc(self, &mut grad, b, g);
                }
                Sub(a, b) => {
                    acc(self, &mut grad, a, g);
                    let nb = self.neg(g);
                    acc(self, &mut grad, b, nb);
                }
                Mul(a, b) => {
                    let ga = self.mul(g, b);
                    let gb = self.mul(g, a);
                    acc(self, &mut grad, a, ga);
                    acc(self, &mut grad, b, gb);
                }
                Div(a, b) => {
                    let ga = self.div(g, b);
                    let q = self.div(out, b);
                    let gb0 = self.mul(g, q);
                    let gb = self.neg(gb0);
                    acc(self, &mut grad, a, ga);
                    acc(self, &mut grad, b, gb);
                }
                Neg(a) => {
                    let ga = self.neg(g);
                    acc(self, &mut grad, a, ga);
                }
                AddRow(a, r) => {
                    acc(self, &mut grad, a, g);
                    let gr = self.sum_axis0(g);
                    acc(self, &mut grad, r, gr);
                }
                MulRow(a, r) => {
                    let ga = self.mul_row(g, r);
                    let prod = self.mul(g, a);
                    let gr = self.sum_axis0(prod);
                    acc(self, &mut grad, a, ga);
                    acc(self, &mut grad, r, gr);
                }
                AddCol(a, c) => {
                    acc(self, &mut grad, a, g);
                    let gc = self.sum_axis1(g);
                    acc(self, &mut grad, c, gc);
                }
                MulCol(a, c) => {
                    let ga = self.mul_col(g, c);
                    let prod = self.mul(g, a);
                    let gc = self.sum_axis1(prod);
                    acc(self, &mut grad, a, ga);
                    acc(self, &mut grad, c, gc);
                }
                AddScalar(a, _) => acc(self, &mut grad, a, g),
                Scale(a, c) => {
                    let ga = self.scale(g, c);
                    acc(self, &mut grad, a, ga);
                }
                MatMul(a, b) => {
                    let bt = self.transpose(b);
                    let ga = self.matmul(g, bt);
                    let at = self.transpose(a);
                    let gb = self.matmul(at, g);
                    acc(self, &mut grad, a, ga);
                    acc(self, &mut grad, b, gb);
                }
                Transpose(a) => {
                    let ga = self.transpose(g);
                    acc(self, &mut grad, a, ga);
                }
                SumAll(a) => {
                    let (r, c) = self.shape(a);
                    let ga = self.broadcast_scalar(g, r, c);
                    acc(self, &mut grad, a, ga);
                }
                SumAxis0(a) => {
                    let (r, _) = self.shape(a);
                    let ga = self.broadcast_rows(g, r);
                    acc(self, &mut grad, a, ga);
                }
                SumAxis1(a) => {
                    let (_, c) = self.shape(a);
                    let ga = self.broadcast_cols(g, c);
                    acc(self, &mut grad, a, ga);
                }
                BroadcastScalar(a, _, _) => {
                    let ga = self.sum_all(g);
                    acc(self, &mut grad, a, ga);
                }
                BroadcastRows(a, _) => {
                    let ga = self.sum_axis0(g);
                    acc(self, &mut grad, a, ga);
                }
                BroadcastCols(a, _) => {
                    let ga = self.sum_axis1(g);
                    acc(self, &mut grad, a, ga);
                }
                Sqrt(a) => {
                    let half = self.scale(g, 0.5);
                    let ga = self.div(half, out);
                    acc(self, &mut grad, a, ga);
                }
                Exp(a) => {
                    let ga = self.mul(g, out);
                    acc(self, &mut grad, a, ga);
                }
                Ln(a) => {
                    let ga = self.div(g, a);
                    acc(self, &mut grad, a, ga);
                }
                Tanh(a) => {
                    let sq = self.mul(out, out);
                    let neg = self.neg(sq);
                    let one_minus = self.add_scalar(neg, 1.0);
                    let ga = self.mul(g, one_minus);
                    acc(self, &mut grad, a, ga);
                }
                Sigmoid(a) => {
                    let neg = self.neg(out);
                    let one_minus = self.add_scalar(neg, 1.0);
                    let deriv = self.mul(out, one_minus);
                    let ga = self.mul(g, deriv);
                    acc(self, &mut grad, a, ga);
                }
                LeakyRelu(a, slope) => {
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { slope });
                    let m = self.leaf(mask);
                    let ga = self.mul(g, m);
                    acc(self, &mut grad, a, ga);
                }
                GatherRows(a, idx) => {
                    let (r, _) = self.shape(a);
                    let ga = self.scatter_add_rows(g, idx, r);
                    acc(self, &mut grad, a, ga);
                }
                ScatterAddRows(a, idx, _) => {
                    let ga = self.gather_rows(g, idx);
                    acc(self, &mut grad, a, ga);
                }
                ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (_, w) = self.shape(p);
                        let gp = self.slice_cols(g, off, off + w);
                        acc(self, &mut grad, p, gp);
                        off += w;
                    }
                }
                ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (h, _) = self.shape(p);
                        let gp = self.slice_rows(g, off, off + h);
                        acc(self, &mut grad, p, gp);
                        off += h;
                    }
                }
                SliceCols(a, lo, _) => {
                    let (_, total) = self.shape(a);
                    let ga = self.pad_cols(g, lo, total);
                    acc(self, &mut grad, a, ga);
                }
                PadCols(a, lo, _) => {
                    let (_, w) = self.shape(a);
                    let ga = self.slice_cols(g, lo, lo + w);
                    acc(self, &mut grad, a, ga);
                }
                SliceRows(a, lo, _) => {
                    let (rows, cols) = self.shape(a);
                    // pad rows: scatter the slice back
                    let (h, _) = self.shape(g);
                    let idx: Rc<Vec<usize>> = Rc::new((lo..lo + h).collect());
                    let _ = cols;
                    let ga = self.scatter_add_rows(g, idx, rows);
                    acc(self, &mut grad, a, ga);
                }
                Reshape(a, _, _) => {
                    let (r, c) = self.shape(a);
                    let ga = self.reshape(g, r, c);
                    acc(self, &mut grad, a, ga);
                }
            }
        }
        Grads { grad }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn chain_through_matmul_and_activation() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[1.0, 2.0]]));
        let w = t.leaf(arr2(&[[0.5, -1.0], [0.25, 1.5]]));
        let y = t.matmul(x, w);
        let z = t.tanh(y);
        let loss = t.sum_all(z);
        let grads = t.backward(loss);
        let gx = grads.get(x).unwrap();
        // finite-difference check on x[0,0]
        let f = |x00: f64| {
            let y0 = x00 * 0.5 + 2.0 * 0.25;
            let y1 = x00 * -1.0 + 2.0 * 1.5;
            y0.tanh() + y1.tanh()
        };
        let h = 1e-6;
        let fd = (f(1.0 + h) - f(1.0 - h)) / (2.0 * h);
        assert!((t.value(gx)[(0, 0)] - fd).abs() < 1e-8);
    }

    #[test]
    fn second_order_gradient() {
        // f(x) = sum(x^3); df/dx = 3x^2; d2f/dx2 (as grad of sum of df/dx) = 6x.
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[2.0, -1.0]]));
        let sq = t.mul(x, x);
        let cu = t.mul(sq, x);
        let loss = t.sum_all(cu);
        let g1 = t.backward(loss);
        let gx = g1.get(x).unwrap();
        let gsum = t.sum_all(gx);
        let g2 = t.backward(gsum);
        let ggx = g2.get(x).unwrap();
        assert_eq!(t.value(ggx), &arr2(&[[12.0, -6.0]]));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]));
        let p = t.softmax_rows(x);
        let v = t.value(p);
        for r in v.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
            assert!(r.iter().all(|&x| x >= 0.0));
        }
        let eq = t.leaf(arr2(&[[7.0, 7.0, 7.0, 7.0]]));
        let p = t.softmax_rows(eq);
        for &x in t.value(p) {
            assert!((x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_scatter_round_trip_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[1.0], [2.0], [3.0]]));
        let idx = Rc::new(vec![0usize, 2, 2]);
        let g = t.gather_rows(x, idx);
        let s = t.sum_all(g);
        let grads = t.backward(s);
        let gx = grads.get(x).unwrap();
        assert_eq!(t.value(gx), &arr2(&[[1.0], [0.0], [2.0]]));
    }
}
