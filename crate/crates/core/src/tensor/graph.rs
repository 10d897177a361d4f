//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its 64-bit value and the handles of
//! its inputs. Node indices are a topological order, so the backward sweep is a
//! single reverse pass in which each node is visited once, after all of its
//! consumers.

use super::kernels::{self, ConvGeom};
use super::{check_shape, Tensor, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used to prove the gradient checker bites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// tanh backward uses `1 - y` instead of `1 - y^2`.
    TanhBackward,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Row(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sqrt(Var),
    Softplus(Var),
    Recip(Var),
    Powf(Var, f64),
    Pow(Var, Var),
    Clamp(Var, f64, f64),
    Softmax { x: Var, axis: usize, temperature: f64 },
    L2Norm(Var),
    XCorr(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    AddColBias(Var, Var),
    MulRows(Var, Var),
    AddRows(Var, Var),
    BatchNorm { x: Var, eps: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of the right length when it received none.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; graph.value(v).len()])
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::dim(op, a, b))
    }
}

fn matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        &[m, n] => Ok((m, n)),
        other => Err(Error::dim(op, other, &[0, 0])),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        let n = check_shape(&shape)?;
        if n != value.len() {
            return Err(Error::dim("leaf", &shape, &[value.len()]));
        }
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; gradients do not flow into it.
    pub fn constant(&mut self, value: Vec<f64>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.leaf(value, shape.into(), false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Vec<f64>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.leaf(value, shape.into(), true)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.leaf(vec![value], vec![1], false).expect("scalar shape")
    }

    /// Leaf initialised from a stored tensor, honouring its `requires_grad` flag.
    pub fn tensor(&mut self, t: &Tensor) -> Var {
        self.leaf(t.to_f64(), t.shape().to_vec(), t.requires_grad())
            .expect("tensor invariants guarantee a valid leaf")
    }

    /// Copies the current value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (value, shape) = (node.value.clone(), node.shape.clone());
        self.leaf(value, shape, false).expect("existing node shape")
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::from_f64(node.shape.clone(), &node.value).expect("node shape invariant")
    }

    /// First node, if any, holding a NaN or infinite value.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.nodes
            .iter()
            .position(|n| n.value.iter().any(|v| !v.is_finite()))
            .map(Var)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let node = &self.nodes[x.0];
        let value = node.value.iter().map(|&v| f(v)).collect();
        let shape = node.shape.clone();
        self.push(value, shape, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(name, &self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(value, shape, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `s * x` where `s` is a single-element node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(Error::dim("mul_scalar", &self.nodes[s.0].shape, &[1]));
        }
        let sv = self.nodes[s.0].value[0];
        let value = self.nodes[x.0].value.iter().map(|v| v * sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(value, shape, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix("matmul", &self.nodes[a.0].shape)?;
        let (k2, n) = matrix("matmul", &self.nodes[b.0].shape)?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        let value = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        Ok(self.push(value, vec![m, n], Op::MatMul(a, b), &[a, b]))
    }

    /// `w · x` for `w: [m, k]`, `x: [k]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, k) = matrix("matvec", &self.nodes[w.0].shape)?;
        if self.nodes[x.0].shape != [k] {
            return Err(Error::dim("matvec", &self.nodes[w.0].shape, &self.nodes[x.0].shape));
        }
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let value = (0..m).map(|i| kernels::dot(&wv[i * k..(i + 1) * k], xv)).collect();
        Ok(self.push(value, vec![m], Op::MatVec(w, x), &[w, x]))
    }

    /// `w · x + b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let y = self.matvec(w, x)?;
        self.add(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix("transpose", &self.nodes[x.0].shape)?;
        let src = &self.nodes[x.0].value;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(value, vec![n, m], Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != self.nodes[x.0].value.len() {
            return Err(Error::dim("reshape", &self.nodes[x.0].shape, &shape));
        }
        let value = self.nodes[x.0].value.clone();
        Ok(self.push(value, shape, Op::Reshape(x), &[x]))
    }

    /// Concatenation along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let tail = self.nodes[first.0].shape[1..].to_vec();
        let mut lead = 0;
        let mut value = Vec::new();
        for p in parts {
            let shape = &self.nodes[p.0].shape;
            if shape[1..] != tail[..] {
                return Err(Error::dim("concat", &self.nodes[first.0].shape, shape));
            }
            lead += shape[0];
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(value, shape, Op::Concat(parts.to_vec()), parts))
    }

    /// Stacks equal-length vectors into a `[count, len]` matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let flat = self.concat(rows)?;
        let len = self.nodes[rows[0].0].value.len();
        self.reshape(flat, [rows.len(), len])
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (m, n) = matrix("row", &self.nodes[x.0].shape)?;
        if i >= m {
            return Err(Error::Usage(format!("row {i} out of range for {m} rows")));
        }
        let value = self.nodes[x.0].value[i * n..(i + 1) * n].to_vec();
        Ok(self.push(value, vec![n], Op::Row(x, i), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = vec![self.nodes[x.0].value.iter().sum()];
        self.push(value, vec![1], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let values = &self.nodes[x.0].value;
        let value = vec![values.iter().sum::<f64>() / values.len() as f64];
        self.push(value, vec![1], Op::Mean(x), &[x])
    }

    /// Mean of a matrix along `axis` (0: over rows, 1: over columns).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = matrix("mean_axis", &self.nodes[x.0].shape)?;
        let v = &self.nodes[x.0].value;
        let value: Vec<f64> = match axis {
            0 => (0..n).map(|j| (0..m).map(|i| v[i * n + j]).sum::<f64>() / m as f64).collect(),
            1 => (0..m).map(|i| v[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect(),
            _ => return Err(Error::Usage(format!("mean_axis: axis {axis} on a matrix"))),
        };
        let len = value.len();
        Ok(self.push(value, vec![len], Op::MeanAxis(x, axis), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), kernels::softplus)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip(x), f64::recip)
    }

    /// Elementwise power with a fixed exponent.
    pub fn powf(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Powf(x, c), |v| v.powf(c))
    }

    /// Elementwise power with a single-element exponent node; inputs must be positive.
    pub fn pow(&mut self, x: Var, p: Var) -> Result<Var> {
        if self.nodes[p.0].value.len() != 1 {
            return Err(Error::dim("pow", &self.nodes[p.0].shape, &[1]));
        }
        let pv = self.nodes[p.0].value[0];
        let value = self.nodes[x.0].value.iter().map(|v| v.powf(pv)).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(value, shape, Op::Pow(x, p), &[x, p]))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Softmax of `x / temperature` along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Parameter(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let value = kernels::softmax(&self.nodes[x.0].value, &shape, axis, temperature);
        Ok(self.push(value, shape, Op::Softmax { x, axis, temperature }, &[x]))
    }

    pub fn l2_norm(&mut self, x: Var) -> Var {
        let value = vec![kernels::l2_norm(&self.nodes[x.0].value)];
        self.push(value, vec![1], Op::L2Norm(x), &[x])
    }

    /// `x / ‖x‖₂`; errors rather than dividing by a vanishing norm.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let norm = self.l2_norm(x);
        let n = self.scalar(norm);
        if n <= NORM_EPS {
            return Err(Error::Degenerate(format!(
                "cannot normalize a vector of norm {n:e}"
            )));
        }
        let inv = self.recip(norm);
        self.mul_scalar(x, inv)
    }

    /// Euclidean distance between two same-shaped nodes.
    pub fn distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        Ok(self.l2_norm(d))
    }

    /// 1×1 cross-correlation of a `[C, H, W]` volume with a `[C]` kernel: the
    /// channelwise dot product at each site, giving `[H, W]`.
    pub fn xcorr(&mut self, v: Var, k: Var) -> Result<Var> {
        let shape = self.nodes[v.0].shape.clone();
        let &[c, h, w] = shape.as_slice() else {
            return Err(Error::dim("xcorr", &shape, &self.nodes[k.0].shape));
        };
        if self.nodes[k.0].shape != [c] {
            return Err(Error::dim("xcorr", &shape, &self.nodes[k.0].shape));
        }
        let vv = &self.nodes[v.0].value;
        let kv = &self.nodes[k.0].value;
        let n = h * w;
        let mut value = vec![0.0; n];
        for ch in 0..c {
            let kc = kv[ch];
            for (o, x) in value.iter_mut().zip(&vv[ch * n..(ch + 1) * n]) {
                *o += kc * x;
            }
        }
        Ok(self.push(value, vec![h, w], Op::XCorr(v, k), &[v, k]))
    }

    /// 2-D convolution (cross-correlation) of `x: [C_in, H, W]` with
    /// `w: [C_out, C_in, kh, kw]` plus bias `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, stride, pad)?;
        if self.nodes[b.0].shape != [geom.c_out] {
            return Err(Error::dim("conv2d bias", &self.nodes[b.0].shape, &[geom.c_out]));
        }
        let value = kernels::conv2d(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            &geom,
        );
        let (ho, wo) = geom.out_hw();
        Ok(self.push(value, vec![geom.c_out, ho, wo], Op::Conv2d { x, w, b, stride, pad }, &[x, w, b]))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        match (xs.as_slice(), ws.as_slice()) {
            (&[c_in, h, wd], &[c_out, c_w, kh, kw])
                if c_in == c_w && stride > 0 && h + 2 * pad >= kh && wd + 2 * pad >= kw =>
            {
                Ok(ConvGeom {
                    c_in,
                    h,
                    w: wd,
                    c_out,
                    kh,
                    kw,
                    stride,
                    pad,
                })
            }
            _ => Err(Error::dim("conv2d", xs, ws)),
        }
    }

    /// Adds `b[i]` to every entry of row `i` of `x: [m, n]`.
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = matrix("add_col_bias", &self.nodes[x.0].shape)?;
        if self.nodes[b.0].shape != [m] {
            return Err(Error::dim("add_col_bias", &self.nodes[x.0].shape, &self.nodes[b.0].shape));
        }
        let bv = &self.nodes[b.0].value;
        let value = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(idx, v)| v + bv[idx / n])
            .collect();
        Ok(self.push(value, vec![m, n], Op::AddColBias(x, b), &[x, b]))
    }

    /// Multiplies every row of `x: [m, n]` elementwise by `s: [n]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = matrix("mul_rows", &self.nodes[x.0].shape)?;
        if self.nodes[s.0].shape != [n] {
            return Err(Error::dim("mul_rows", &self.nodes[x.0].shape, &self.nodes[s.0].shape));
        }
        let sv = &self.nodes[s.0].value;
        let value = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(idx, v)| v * sv[idx % n])
            .collect();
        Ok(self.push(value, vec![m, n], Op::MulRows(x, s), &[x, s]))
    }

    /// Adds `b: [n]` to every row of `x: [m, n]`.
    pub fn add_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = matrix("add_rows", &self.nodes[x.0].shape)?;
        if self.nodes[b.0].shape != [n] {
            return Err(Error::dim("add_rows", &self.nodes[x.0].shape, &self.nodes[b.0].shape));
        }
        let bv = &self.nodes[b.0].value;
        let value = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(idx, v)| v + bv[idx % n])
            .collect();
        Ok(self.push(value, vec![m, n], Op::AddRows(x, b), &[x, b]))
    }

    /// Per-column standardisation of `x: [batch, features]` with batch
    /// statistics (biased variance). Needs at least two rows.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = matrix("batch_norm", &self.nodes[x.0].shape)?;
        if m < 2 {
            return Err(Error::Usage("batch_norm with batch statistics needs at least two rows".into()));
        }
        let (mean, var) = column_stats(&self.nodes[x.0].value, m, n);
        let xv = &self.nodes[x.0].value;
        let value = (0..m * n)
            .map(|idx| {
                let j = idx % n;
                (xv[idx] - mean[j]) / (var[j] + eps).sqrt()
            })
            .collect();
        Ok(self.push(value, vec![m, n], Op::BatchNorm { x, eps }, &[x]))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with_seed(loss, &[1.0])
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_with_seed(&self, out: Var, seed: &[f64]) -> Result<Gradients> {
        let node = &self.nodes[out.0];
        if seed.len() == 1 && node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if seed.len() != node.value.len() {
            return Err(Error::dim("backward seed", &node.shape, &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.to_vec());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulate `f` into the gradient slot of `v` if it needs one.
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if wants(v) {
                    let len = self.nodes[v.0].value.len();
                    add_into(&mut grads[v.0], len, |$buf: &mut [f64]| $body);
                }
            }};
        }
        macro_rules! elementwise {
            ($x:expr, |$k:ident, $xv:ident| $d:expr) => {{
                let x: Var = $x;
                #[allow(unused_variables)]
                let $xv = val(x);
                acc!(x, |buf| for $k in 0..buf.len() {
                    buf[$k] += g[$k] * $d;
                });
            }};
        }

        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(a, |buf| buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv));
                acc!(b, |buf| buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv));
            }
            Op::Sub(a, b) => {
                acc!(a, |buf| buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv));
                acc!(b, |buf| buf.iter_mut().zip(g).for_each(|(o, gv)| *o -= gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc!(a, |buf| for k in 0..buf.len() {
                    buf[k] += g[k] * bv[k];
                });
                acc!(b, |buf| for k in 0..buf.len() {
                    buf[k] += g[k] * av[k];
                });
            }
            Op::Scale(x, c) => elementwise!(x, |k, xv| c),
            Op::AddScalar(x) => elementwise!(x, |k, xv| 1.0),
            Op::MulScalar(x, s) => {
                let sv = val(s)[0];
                let xv = val(x);
                acc!(x, |buf| for k in 0..buf.len() {
                    buf[k] += g[k] * sv;
                });
                acc!(s, |buf| buf[0] += kernels::dot(g, xv));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let (av, bv) = (val(a), val(b));
                acc!(a, |buf| for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        buf[r * k + p] += kernels::dot(grow, &bv[p * n..(p + 1) * n]);
                    }
                });
                acc!(b, |buf| for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let a_rp = av[r * k + p];
                        if a_rp == 0.0 {
                            continue;
                        }
                        for (o, gv) in buf[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += a_rp * gv;
                        }
                    }
                });
            }
            Op::MatVec(w, x) => {
                let (m, k) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[1]);
                let (wv, xv) = (val(w), val(x));
                acc!(w, |buf| for (brow, &gr) in buf.chunks_exact_mut(k).zip(&g[..m]) {
                    for (o, &xc) in brow.iter_mut().zip(xv) {
                        *o += gr * xc;
                    }
                });
                acc!(x, |buf| for (wrow, &gr) in wv.chunks_exact(k).zip(&g[..m]) {
                    for (o, &wc) in buf.iter_mut().zip(wrow) {
                        *o += wc * gr;
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                acc!(x, |buf| for r in 0..m {
                    for c in 0..n {
                        buf[r * n + c] += g[c * m + r];
                    }
                });
            }
            Op::Reshape(x) => {
                acc!(x, |buf| buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv));
            }
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    let slice = &g[offset..offset + len];
                    acc!(p, |buf| buf.iter_mut().zip(slice).for_each(|(o, gv)| *o += gv));
                    offset += len;
                }
            }
            Op::Row(x, r) => {
                let n = self.nodes[x.0].shape[1];
                acc!(x, |buf| for c in 0..n {
                    buf[r * n + c] += g[c];
                });
            }
            Op::Sum(x) => acc!(x, |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                acc!(x, |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::MeanAxis(x, axis) => {
                let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                acc!(x, |buf| for r in 0..m {
                    for c in 0..n {
                        buf[r * n + c] += if axis == 0 { g[c] / m as f64 } else { g[r] / n as f64 };
                    }
                });
            }
            Op::Exp(x) => elementwise!(x, |k, xv| y[k]),
            Op::Log(x) => elementwise!(x, |k, xv| 1.0 / xv[k]),
            Op::Sigmoid(x) => elementwise!(x, |k, xv| y[k] * (1.0 - y[k])),
            Op::Tanh(x) => {
                if self.fault == Some(Fault::TanhBackward) {
                    elementwise!(x, |k, xv| 1.0 - y[k])
                } else {
                    elementwise!(x, |k, xv| 1.0 - y[k] * y[k])
                }
            }
            Op::Relu(x) => elementwise!(x, |k, xv| if xv[k] > 0.0 { 1.0 } else { 0.0 }),
            Op::Sqrt(x) => elementwise!(x, |k, xv| 0.5 / y[k]),
            Op::Softplus(x) => elementwise!(x, |k, xv| kernels::sigmoid(xv[k])),
            Op::Recip(x) => elementwise!(x, |k, xv| -y[k] * y[k]),
            Op::Powf(x, c) => elementwise!(x, |k, xv| c * xv[k].powf(c - 1.0)),
            Op::Pow(x, p) => {
                let pv = val(p)[0];
                elementwise!(x, |k, xv| pv * xv[k].powf(pv - 1.0));
                let xv = val(x);
                acc!(p, |buf| for k in 0..y.len() {
                    buf[0] += g[k] * y[k] * xv[k].ln();
                });
            }
            Op::Clamp(x, lo, hi) => {
                elementwise!(x, |k, xv| if xv[k] >= lo && xv[k] <= hi { 1.0 } else { 0.0 })
            }
            Op::Softmax { x, axis, temperature } => {
                let (outer, len, inner) = kernels::axis_split(&node.shape, axis);
                acc!(x, |buf| for o in 0..outer {
                    for j in 0..inner {
                        let idx = |t: usize| o * len * inner + t * inner + j;
                        let dot: f64 = (0..len).map(|t| g[idx(t)] * y[idx(t)]).sum();
                        for t in 0..len {
                            buf[idx(t)] += y[idx(t)] * (g[idx(t)] - dot) / temperature;
                        }
                    }
                });
            }
            Op::L2Norm(x) => {
                let norm = y[0];
                if norm > 0.0 {
                    let xv = val(x);
                    acc!(x, |buf| for k in 0..buf.len() {
                        buf[k] += g[0] * xv[k] / norm;
                    });
                }
            }
            Op::XCorr(v, kern) => {
                let c = self.nodes[v.0].shape[0];
                let n = y.len();
                let (vv, kv) = (val(v), val(kern));
                acc!(v, |buf| for ch in 0..c {
                    for s in 0..n {
                        buf[ch * n + s] += g[s] * kv[ch];
                    }
                });
                acc!(kern, |buf| for ch in 0..c {
                    buf[ch] += kernels::dot(g, &vv[ch * n..(ch + 1) * n]);
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let geom = self.conv_geom(x, w, stride, pad).expect("validated in forward");
                let mut gx = wants(x).then(|| vec![0.0; val(x).len()]);
                let mut gw = wants(w).then(|| vec![0.0; val(w).len()]);
                let mut gb = wants(b).then(|| vec![0.0; val(b).len()]);
                kernels::conv2d_backward(
                    val(x),
                    val(w),
                    g,
                    &geom,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, d) in [(x, gx), (w, gw), (b, gb)] {
                    if let Some(d) = d {
                        acc!(v, |buf| buf.iter_mut().zip(&d).for_each(|(o, dv)| *o += dv));
                    }
                }
            }
            Op::AddColBias(x, b) => {
                let n = node.shape[1];
                acc!(x, |buf| buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv));
                acc!(b, |buf| for (idx, gv) in g.iter().enumerate() {
                    buf[idx / n] += gv;
                });
            }
            Op::MulRows(x, s) => {
                let n = node.shape[1];
                let (xv, sv) = (val(x), val(s));
                acc!(x, |buf| for idx in 0..buf.len() {
                    buf[idx] += g[idx] * sv[idx % n];
                });
                acc!(s, |buf| for (idx, gv) in g.iter().enumerate() {
                    buf[idx % n] += gv * xv[idx];
                });
            }
            Op::AddRows(x, b) => {
                let n = node.shape[1];
                acc!(x, |buf| buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv));
                acc!(b, |buf| for (idx, gv) in g.iter().enumerate() {
                    buf[idx % n] += gv;
                });
            }
            Op::BatchNorm { x, eps } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let (_, var) = column_stats(val(x), m, n);
                acc!(x, |buf| for c in 0..n {
                    let inv_std = 1.0 / (var[c] + eps).sqrt();
                    let mut sum_g = 0.0;
                    let mut sum_gy = 0.0;
                    for r in 0..m {
                        sum_g += g[r * n + c];
                        sum_gy += g[r * n + c] * y[r * n + c];
                    }
                    for r in 0..m {
                        let idx = r * n + c;
                        buf[idx] += inv_std * (g[idx] - sum_g / m as f64 - y[idx] * sum_gy / m as f64);
                    }
                });
            }
        }
    }
}

/// Per-column mean and biased variance of a row-major `[m, n]` matrix.
pub(crate) fn column_stats(x: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; n];
    for r in 0..m {
        for c in 0..n {
            mean[c] += x[r * n + c];
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0; n];
    for r in 0..m {
        for c in 0..n {
            let d = x[r * n + c] - mean[c];
            var[c] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(vec![1.0, -2.0, 3.5], [3]).unwrap();
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_norm_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.variable(vec![0.5, -1.5, 2.0], [3]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        for (gv, xv) in grads.get(x).unwrap().iter().zip([0.5, -1.5, 2.0]) {
            assert_abs_diff_eq!(*gv, 2.0 * xv, epsilon = 1e-12);
        }
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let mut g = Graph::new();
        let x = g.variable(vec![1.0, 2.0], [2]).unwrap();
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(vec![2.0], [1]).unwrap();
        let c = g.constant(vec![3.0], [1]).unwrap();
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0]);
        assert!(grads.get(c).is_none());
        assert!(!g.requires_grad(c));
    }

    #[test]
    fn shared_node_accumulates_from_all_consumers() {
        let mut g = Graph::new();
        let x = g.variable(vec![3.0], [1]).unwrap();
        let a = g.scale(x, 2.0);
        let b = g.mul(x, x).unwrap();
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_abs_diff_eq!(grads.get(x).unwrap()[0], 2.0 + 6.0, epsilon = 1e-12);
    }

    #[test]
    fn matmul_gradient_is_column_sums_of_b() {
        let mut g = Graph::new();
        let a = g.variable(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [2, 3]).unwrap();
        let b = g.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [3, 2]).unwrap();
        let p = g.matmul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        // d sum(AB) / dA[i, p] = sum_j B[p, j]
        assert_eq!(grads.get(a).unwrap(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn normalize_refuses_zero_vector() {
        let mut g = Graph::new();
        let z = g.variable(vec![0.0; 4], [4]).unwrap();
        assert!(matches!(g.normalize(z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn conv_shapes_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0; 3 * 8 * 8], [3, 8, 8]).unwrap();
        let w = g.constant(vec![0.0; 4 * 3 * 9], [4, 3, 3, 3]).unwrap();
        let b = g.constant(vec![1.0, 2.0, 3.0, 4.0], [4]).unwrap();
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[4, 4, 4]);
        assert_eq!(g.value(y)[16], 2.0);
    }

    #[test]
    fn batch_norm_standardises_columns() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let x = g.constant(data, [8, 3]).unwrap();
        let y = g.batch_norm(x, 1e-5).unwrap();
        let (mean, var) = column_stats(g.value(y), 8, 3);
        for c in 0..3 {
            assert_abs_diff_eq!(mean[c], 0.0, epsilon = 1e-4);
            assert_abs_diff_eq!(var[c], 1.0, epsilon = 1e-4);
        }
    }
}
