use super::kernels::{self, Stencil, Volume};
use super::{AutodiffError, Result, Tensor};
use crate::geometry::{in_domain, Vec3};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Deliberate adjoint defects used to show that gradient checks catch them.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the convolution weight gradient.
    ConvWeightGradSign,
}

enum Op {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Trilinear { grid: Var, stencils: Vec<Stencil> },
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Bce { logits: Var, labels: Vec<f64> },
    WeightedSum { x: Var, weights: Vec<f64> },
    MeanPool { x: Var },
    RepeatRows { x: Var },
    Reshape { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations. Values are computed eagerly; the
/// reverse sweep visits nodes in exact reverse execution order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Adjoints of every differentiable leaf reached by a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Node indices whose adjoint was propagated, in visit order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn volume(op: &'static str, t: &Tensor) -> Result<Volume> {
    match *t.shape() {
        [channels, d, h, w] => Ok(Volume { channels, d, h, w }),
        _ => Err(AutodiffError::shape(
            op,
            format!("expected [C, D, H, W], got {:?}", t.shape()),
        )),
    }
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(AutodiffError::shape(
            op,
            format!("expected a matrix, got {:?}", t.shape()),
        )),
    }
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

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    /// Differentiable leaf, e.g. a weight tensor.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient, e.g. an input grid.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn record(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::new(shape, data)?, op, needs))
    }

    /// 3^3 convolution, zero padding 1, stride 1.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = volume("conv3d", self.value(x))?;
        let ws = self.value(w).shape().to_vec();
        let c_out = ws[0];
        if ws.len() != 5 || ws[1] != v.channels || ws[2..] != [3, 3, 3] {
            return Err(AutodiffError::shape(
                "conv3d",
                format!("weight {ws:?} does not fit {} input channels", v.channels),
            ));
        }
        if self.value(b).shape() != [c_out] {
            return Err(AutodiffError::shape(
                "conv3d",
                format!("bias {:?}, expected [{c_out}]", self.value(b).shape()),
            ));
        }
        let out = kernels::conv3d_forward(
            self.value(x).data(),
            &v,
            self.value(w).data(),
            self.value(b).data(),
            c_out,
        );
        self.record(
            "conv3d",
            vec![c_out, v.d, v.h, v.w],
            out,
            Op::Conv3d { x, w, b },
            &[x, w, b],
        )
    }

    /// 2^3 max pooling; ties route the gradient to the lowest flat index.
    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        let v = volume("downsample2", self.value(x))?;
        if v.d % 2 + v.h % 2 + v.w % 2 != 0 {
            return Err(AutodiffError::shape(
                "downsample2",
                format!("odd spatial dims {:?}", self.value(x).shape()),
            ));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), &v);
        let shape = vec![v.channels, v.d / 2, v.h / 2, v.w / 2];
        self.record("downsample2", shape, out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Samples a `[C, K, K, K]` grid at points of the closed canonical
    /// cube, giving `[Q, C]`. Not differentiable in the query positions.
    pub fn trilinear_sample(&mut self, grid: Var, queries: &[Vec3]) -> Result<Var> {
        let s = self.value(grid).shape().to_vec();
        let (c, k) = match s[..] {
            [c, d, h, w] if d == h && h == w => (c, d),
            _ => {
                return Err(AutodiffError::shape(
                    "trilinear_sample",
                    format!("expected a cubic grid, got {s:?}"),
                ))
            }
        };
        if queries.is_empty() {
            return Err(AutodiffError::shape("trilinear_sample", "no queries".into()));
        }
        if let Some(index) = queries.iter().position(|p| !in_domain(p)) {
            return Err(AutodiffError::QueryOutOfDomain { index });
        }
        let stencils: Vec<Stencil> = queries.iter().map(|p| kernels::trilinear_stencil(p, k)).collect();
        let out = kernels::trilinear_forward(self.value(grid).data(), c, k, &stencils);
        self.record(
            "trilinear_sample",
            vec![queries.len(), c],
            out,
            Op::Trilinear { grid, stencils },
            &[grid],
        )
    }

    /// Row-wise affine map `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (q, f_in) = matrix("linear", self.value(x))?;
        let (f_out, w_in) = matrix("linear", self.value(w))?;
        if w_in != f_in || self.value(b).shape() != [f_out] {
            return Err(AutodiffError::shape(
                "linear",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.value(x).shape(),
                    self.value(w).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let y = kernels::linear_forward(
            self.value(x).data(),
            q,
            f_in,
            self.value(w).data(),
            self.value(b).data(),
        );
        self.record("linear", vec![q, f_out], y, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(0.0)).collect();
        self.record("relu", t.shape().to_vec(), out, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        self.record("sigmoid", t.shape().to_vec(), out, Op::Sigmoid { x }, &[x])
    }

    /// Joins tensors of equal rank along `axis`; other dims must match.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(
                *inputs
                    .first()
                    .ok_or_else(|| AutodiffError::shape("concat", "no inputs".into()))?,
            )
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == first.len() && (0..s.len()).all(|a| a == axis || s[a] == first[a]);
            if !compatible {
                return Err(AutodiffError::shape(
                    "concat",
                    format!("{s:?} does not match {first:?} off axis {axis}"),
                ));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.len() / outer;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        self.record(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Mean binary cross-entropy computed from logits; labels must be 0 or 1.
    pub fn bce_loss(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != labels.len() {
            return Err(AutodiffError::shape(
                "bce_loss",
                format!("{} logits, {} labels", x.len(), labels.len()),
            ));
        }
        if let Some(index) = labels.iter().position(|&y| y != 0.0 && y != 1.0) {
            return Err(AutodiffError::InvalidLabel {
                index,
                value: labels[index],
            });
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| kernels::bce_with_logit(x, y))
            .sum();
        let mean = total / labels.len() as f64;
        self.record(
            "bce_loss",
            Vec::new(),
            vec![mean],
            Op::Bce {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Scalar `sum_i weights_i x_i`, with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != weights.len() {
            return Err(AutodiffError::shape(
                "weighted_sum",
                format!("{} values, {} weights", t.len(), weights.len()),
            ));
        }
        let s = t.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        self.record(
            "weighted_sum",
            Vec::new(),
            vec![s],
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        )
    }

    /// Per-channel mean of a `[C, ...]` tensor, giving `[C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(AutodiffError::shape(
                "mean_pool",
                format!("expected [C, ...], got {:?}", t.shape()),
            ));
        }
        let c = t.shape()[0];
        let per = t.len() / c;
        let out = t
            .data()
            .chunks_exact(per)
            .map(|ch| ch.iter().sum::<f64>() / per as f64)
            .collect();
        self.record("mean_pool", vec![c], out, Op::MeanPool { x }, &[x])
    }

    /// Stacks a `[C]` vector into `rows` identical rows, giving `[rows, C]`.
    pub fn repeat_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || rows == 0 {
            return Err(AutodiffError::shape(
                "repeat_rows",
                format!("{:?} into {rows} rows", t.shape()),
            ));
        }
        let out = t.data().repeat(rows);
        let c = t.len();
        self.record("repeat_rows", vec![rows, c], out, Op::RepeatRows { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() || shape.contains(&0) {
            return Err(AutodiffError::shape("reshape", format!("{:?} to {shape:?}", t.shape())));
        }
        let data = t.data().to_vec();
        self.record("reshape", shape.to_vec(), data, Op::Reshape { x }, &[x])
    }

    /// Reverse sweep from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        let seed = Tensor::full(self.value(output).shape(), 1.0);
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (input, d) in self.adjoint(node, &g)? {
                if !d.is_finite() {
                    return Err(AutodiffError::NonFinite { op: "backward" });
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot => *slot = Some(d),
                }
            }
        }
        Ok(Gradients { grads, visited })
    }

    /// Input adjoints of one node, for the inputs that need them.
    fn adjoint(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let shaped = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b } => {
                let v = volume("conv3d", self.value(*x))?;
                let c_out = self.value(*w).shape()[0];
                let (dx, mut dw, db) = kernels::conv3d_backward(
                    self.value(*x).data(),
                    &v,
                    self.value(*w).data(),
                    c_out,
                    g.data(),
                    self.needs(*x),
                );
                if self.fault == Some(Fault::ConvWeightGradSign) {
                    dw.iter_mut().for_each(|d| *d = -*d);
                }
                if let Some(dx) = dx {
                    out.push((*x, shaped(*x, dx)?));
                }
                if self.needs(*w) {
                    out.push((*w, shaped(*w, dw)?));
                }
                if self.needs(*b) {
                    out.push((*b, shaped(*b, db)?));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let dx = kernels::maxpool2_backward(argmax, self.value(*x).len(), g.data());
                out.push((*x, shaped(*x, dx)?));
            }
            Op::Trilinear { grid, stencils } => {
                let s = self.value(*grid).shape();
                let dg = kernels::trilinear_backward(s[0], s[1], stencils, g.data());
                out.push((*grid, shaped(*grid, dg)?));
            }
            Op::Linear { x, w, b } => {
                let (q, f_in) = matrix("linear", self.value(*x))?;
                let f_out = self.value(*b).len();
                let (dx, dw, db) = kernels::linear_backward(
                    self.value(*x).data(),
                    q,
                    f_in,
                    self.value(*w).data(),
                    f_out,
                    g.data(),
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    out.push((*x, shaped(*x, dx)?));
                }
                if self.needs(*w) {
                    out.push((*w, shaped(*w, dw)?));
                }
                if self.needs(*b) {
                    out.push((*b, shaped(*b, db)?));
                }
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                out.push((*x, shaped(*x, dx)?));
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                out.push((*x, shaped(*x, dx)?));
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|&v| Vec::with_capacity(self.value(v).len()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (part, &v) in parts.iter_mut().zip(inputs) {
                        let block = self.value(v).len() / outer;
                        part.extend_from_slice(&g.data()[offset..offset + block]);
                        offset += block;
                    }
                }
                for (part, &v) in parts.into_iter().zip(inputs) {
                    if self.needs(v) {
                        out.push((v, shaped(v, part)?));
                    }
                }
            }
            Op::Bce { logits, labels } => {
                let scale = g.item() / labels.len() as f64;
                let dx = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&x, &y)| (kernels::sigmoid(x) - y) * scale)
                    .collect();
                out.push((*logits, shaped(*logits, dx)?));
            }
            Op::WeightedSum { x, weights } => {
                let s = g.item();
                out.push((*x, shaped(*x, weights.iter().map(|w| w * s).collect())?));
            }
            Op::MeanPool { x } => {
                let t = self.value(*x);
                let per = t.len() / t.shape()[0];
                let dx = g
                    .data()
                    .iter()
                    .flat_map(|&gc| std::iter::repeat_n(gc / per as f64, per))
                    .collect();
                out.push((*x, shaped(*x, dx)?));
            }
            Op::RepeatRows { x } => {
                let c = self.value(*x).len();
                let mut dx = vec![0.0; c];
                for row in g.data().chunks_exact(c) {
                    for (d, r) in dx.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                out.push((*x, shaped(*x, dx)?));
            }
            Op::Reshape { x } => {
                out.push((*x, shaped(*x, g.data().to_vec())?));
            }
        }
        Ok(out)
    }
}
