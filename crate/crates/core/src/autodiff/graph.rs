use super::kernels::{self, CompositeConsts};
use super::tensor::{Real, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation. The built-in fused kernels cover
/// everything the engine needs; this exists for experiments and for test
/// fixtures that need a deliberately broken backward rule.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// One optional gradient per input, each shaped like that input.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Tanh,
    Relu,
    Abs,
    Sqrt,
    Square,
    AddScalar(f64),
    MulScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the operands of a binary op line up. Broadcasting is only ever over the
/// leading dimension of the larger operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs shape == lhs shape[1..]
    Rhs,
    /// lhs shape == rhs shape[1..]
    Lhs,
}

enum Op<T: Real> {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var, Bcast),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Slice(Var, usize),
    SelectColumns(Var, Vec<usize>),
    GridSample { plane: Var, coords: Var },
    ChannelMean(Var),
    ChannelStd(Var),
    ChannelStandardize { x: Var, mean: Var, std: Var },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Composite {
        sigma: Var,
        color: Var,
        logits: Var,
        consts: Box<CompositeConsts<T>>,
    },
    SoftHistogram { image: Var, mask: Var, bins: usize },
    BlurDown(Var),
    Custom(Box<dyn CustomOp<T>>, Vec<Var>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of a forward computation. Nodes are stored in creation
/// order, which is a topological order.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `v`; zeros when `v` did not
    /// influence the root.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---------------------------------------------------------------- unary

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let x = self.value(a);
        let out = x.map(|v| unary_forward(op, v));
        let g = self.any_grad(&[a]);
        self.push(out, Op::Unary(op, a), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Abs, a)
    }

    /// Square root with a zero gradient where the output is exactly zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::AddScalar(c), a)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::MulScalar(c), a)
    }

    // --------------------------------------------------------------- binary

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = if sa == sb {
            Bcast::Same
        } else if !sa.is_empty() && &sa[1..] == sb {
            Bcast::Rhs
        } else if !sb.is_empty() && &sb[1..] == sa {
            Bcast::Lhs
        } else {
            let name = match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
                BinaryOp::Div => "div",
            };
            return Err(shape_err(name, sa, sb));
        };
        let (xa, xb) = (self.value(a), self.value(b));
        let f = |p: T, q: T| match op {
            BinaryOp::Add => p + q,
            BinaryOp::Sub => p - q,
            BinaryOp::Mul => p * q,
            BinaryOp::Div => p / q,
        };
        let out = match bc {
            Bcast::Same => Tensor::from_parts(
                sa.to_vec(),
                xa.data().iter().zip(xb.data()).map(|(&p, &q)| f(p, q)).collect(),
            ),
            Bcast::Rhs => Tensor::from_parts(
                sa.to_vec(),
                xa.data().iter().zip(xb.data().iter().cycle()).map(|(&p, &q)| f(p, q)).collect(),
            ),
            Bcast::Lhs => Tensor::from_parts(
                sb.to_vec(),
                xa.data().iter().cycle().zip(xb.data()).map(|(&p, &q)| f(p, q)).collect(),
            ),
        };
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Binary(op, a, b, bc), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    // ----------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.sum() / T::c(x.numel() as f64);
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), g)
    }

    /// Sums over the last axis: `[.., n] -> [..]`.
    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let Some((&n, lead)) = x.shape().split_last() else {
            return Err(invalid("sum_last_axis on a scalar"));
        };
        let data = x.data().chunks(n).map(|row| row.iter().copied().sum()).collect();
        let out = Tensor::from_parts(lead.to_vec(), data);
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::SumLastAxis(a), g))
    }

    // --------------------------------------------------------------- linear

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), g))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), g))
    }

    /// Contiguous flat range `[start, start + prod(shape))` of `a`, viewed
    /// with `shape`.
    pub fn slice(&mut self, a: Var, start: usize, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let x = self.value(a);
        if start + n > x.numel() || n == 0 {
            return Err(shape_err("slice", x.shape(), &shape));
        }
        let out = Tensor::from_parts(shape, x.data()[start..start + n].to_vec());
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::Slice(a, start), g))
    }

    /// Picks columns of a `[rows, width]` matrix, in the given order.
    pub fn select_columns(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() != 2 || cols.is_empty() || cols.iter().any(|&c| c >= s[1]) {
            return Err(invalid(format!(
                "select_columns {cols:?} out of range for shape {s:?}"
            )));
        }
        let (rows, width) = (s[0], s[1]);
        let mut data = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            let row = &x.data()[r * width..(r + 1) * width];
            data.extend(cols.iter().map(|&c| row[c]));
        }
        let out = Tensor::from_parts(vec![rows, cols.len()], data);
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::SelectColumns(a, cols.to_vec()), g))
    }

    // ---------------------------------------------------------------- fused

    /// Bilinear lookup of a `[C, R, R]` plane at `[K, 2]` coordinates in
    /// `[-1, 1]²` (x selects the column, y the row). Align-corners mapping;
    /// coordinates outside the square clamp to the border.
    pub fn grid_sample(&mut self, plane: Var, coords: Var) -> Result<Var> {
        let (sp, sc) = (self.shape(plane), self.shape(coords));
        if sp.len() != 3 || sp[1] != sp[2] || sc.len() != 2 || sc[1] != 2 {
            return Err(shape_err("grid_sample", sp, sc));
        }
        if sp[1] < 2 {
            return Err(invalid(format!("grid_sample needs R >= 2, got plane {sp:?}")));
        }
        let out = kernels::grid_sample_forward(self.value(plane), self.value(coords));
        let g = self.any_grad(&[plane, coords]);
        Ok(self.push(out, Op::GridSample { plane, coords }, g))
    }

    /// Per-channel mean over everything but the leading axis.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() < 2 {
            return Err(invalid(format!("channel_mean needs [C, ..], got {:?}", x.shape())));
        }
        let out = kernels::channel_mean(x);
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::ChannelMean(a), g))
    }

    /// Per-channel `sqrt(population variance + eps)`.
    pub fn channel_std(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() < 2 {
            return Err(invalid(format!("channel_std needs [C, ..], got {:?}", x.shape())));
        }
        if eps < 0.0 {
            return Err(invalid("channel_std eps must be non-negative"));
        }
        let out = kernels::channel_std(x, T::c(eps));
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::ChannelStd(a), g))
    }

    fn check_channel_args(&self, op: &'static str, x: Var, p: Var, q: Var) -> Result<()> {
        let sx = self.shape(x);
        let c = sx.first().copied().unwrap_or(0);
        for v in [p, q] {
            if self.shape(v) != [c] {
                return Err(shape_err(op, sx, self.shape(v)));
            }
        }
        Ok(())
    }

    /// `(x - mean[c]) / std[c]` channelwise.
    pub fn channel_standardize(&mut self, x: Var, mean: Var, std: Var) -> Result<Var> {
        self.check_channel_args("channel_standardize", x, mean, std)?;
        let out = kernels::channel_standardize(self.value(x), self.value(mean), self.value(std));
        let g = self.any_grad(&[x, mean, std]);
        Ok(self.push(out, Op::ChannelStandardize { x, mean, std }, g))
    }

    /// `x * scale[c] + shift[c]` channelwise.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.check_channel_args("channel_affine", x, scale, shift)?;
        let out = kernels::channel_affine(self.value(x), self.value(scale), self.value(shift));
        let g = self.any_grad(&[x, scale, shift]);
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift }, g))
    }

    /// Emission-absorption quadrature over `P` rays of `M` samples each.
    ///
    /// `sigma` is `[P, M]`, `color` is `[P, M, 3]`, `logits` is `[P, M, N]`.
    /// Output is `[P, 5 + N]` laid out as rgb, depth, class probabilities,
    /// alpha (see [`kernels::composite_layout`]).
    pub fn composite(
        &mut self,
        sigma: Var,
        color: Var,
        logits: Var,
        consts: CompositeConsts<T>,
    ) -> Result<Var> {
        let (ss, sc, sl) = (self.shape(sigma), self.shape(color), self.shape(logits));
        if ss.len() != 2 || sc != [ss[0], ss[1], 3] || sl.len() != 3 || sl[..2] != ss[..] {
            return Err(Error::ShapeMismatch {
                op: "composite",
                lhs: ss.to_vec(),
                rhs: if sc.len() == 3 && sc[2] == 3 {
                    sl.to_vec()
                } else {
                    sc.to_vec()
                },
            });
        }
        consts.validate(ss[0], ss[1])?;
        let out = kernels::composite_forward(
            self.value(sigma),
            self.value(color),
            self.value(logits),
            &consts,
        );
        let g = self.any_grad(&[sigma, color, logits]);
        Ok(self.push(
            out,
            Op::Composite {
                sigma,
                color,
                logits,
                consts: Box::new(consts),
            },
            g,
        ))
    }

    /// Normalized soft color histogram `[3, bins]` of a `[P, 3]` image with
    /// per-pixel weights `[P]`.
    pub fn soft_histogram(&mut self, image: Var, mask: Var, bins: usize) -> Result<Var> {
        let (si, sm) = (self.shape(image), self.shape(mask));
        if si.len() != 2 || si[1] != 3 || sm != [si[0]] {
            return Err(shape_err("soft_histogram", si, sm));
        }
        if bins == 0 {
            return Err(invalid("soft_histogram needs at least one bin"));
        }
        let out = kernels::soft_histogram_forward(self.value(image), self.value(mask), bins);
        let g = self.any_grad(&[image, mask]);
        Ok(self.push(out, Op::SoftHistogram { image, mask, bins }, g))
    }

    /// 5-tap binomial blur followed by 2x decimation of an `[H, W, C]` image.
    pub fn blur_down(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(invalid(format!("blur_down needs [H, W, C], got {s:?}")));
        }
        let out = kernels::blur_down_forward(self.value(a));
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::BlurDown(a), g))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&vals)?;
        let g = self.any_grad(inputs);
        Ok(self.push(out, Op::Custom(op, inputs.to_vec()), g))
    }

    // ------------------------------------------------------------- backward

    /// Reverse-mode pass from a scalar root. Only leaf gradients are kept.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.backward_impl(root, false)
    }

    /// Like [`Graph::backward`] but retains the gradient of every node.
    pub fn backward_retain(&self, root: Var) -> Result<Gradients<T>> {
        self.backward_impl(root, true)
    }

    fn backward_impl(&self, root: Var, retain: bool) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::ones(rv.shape().to_vec()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, gin) in self.input_grads(i, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => *acc += &gin,
                    slot @ None => *slot = Some(gin),
                }
            }
            if retain {
                grads[i] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Unary(op, a) => {
                let x = val(a);
                let data = unary_backward(*op, g.data(), x.data(), y.data());
                vec![(*a, Tensor::from_parts(x.shape().to_vec(), data))]
            }
            Op::Binary(op, a, b, bc) => {
                binary_backward(*op, *bc, (*a, val(a), wants(a)), (*b, val(b), wants(b)), g)
            }
            Op::Sum(a) => {
                let s = g.item();
                vec![(*a, Tensor::full(val(a).shape().to_vec(), s))]
            }
            Op::Mean(a) => {
                let x = val(a);
                let s = g.item() / T::c(x.numel() as f64);
                vec![(*a, Tensor::full(x.shape().to_vec(), s))]
            }
            Op::SumLastAxis(a) => {
                let x = val(a);
                let n = *x.shape().last().unwrap();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi, n))
                    .collect();
                vec![(*a, Tensor::from_parts(x.shape().to_vec(), data))]
            }
            Op::MatMul(a, b) => {
                let (xa, xb) = (val(a), val(b));
                let (m, k, n) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
                let mut out = Vec::new();
                if wants(a) {
                    let da = kernels::matmul_grad_lhs(g.data(), xb.data(), m, k, n);
                    out.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if wants(b) {
                    let db = kernels::matmul_grad_rhs(xa.data(), g.data(), m, k, n);
                    out.push((*b, Tensor::from_parts(vec![k, n], db)));
                }
                out
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(a).shape().to_vec()).unwrap())],
            Op::Slice(a, start) => {
                let x = val(a);
                let mut d = Tensor::zeros(x.shape().to_vec());
                d.data_mut()[*start..*start + g.numel()].copy_from_slice(g.data());
                vec![(*a, d)]
            }
            Op::SelectColumns(a, cols) => {
                let x = val(a);
                let (rows, width) = (x.shape()[0], x.shape()[1]);
                let mut d = Tensor::zeros(x.shape().to_vec());
                let dd = d.data_mut();
                for r in 0..rows {
                    for (j, &c) in cols.iter().enumerate() {
                        dd[r * width + c] += g.data()[r * cols.len() + j];
                    }
                }
                vec![(*a, d)]
            }
            Op::GridSample { plane, coords } => {
                let (dp, dc) = kernels::grid_sample_backward(
                    val(plane),
                    val(coords),
                    g,
                    wants(plane),
                    wants(coords),
                );
                let mut out = Vec::new();
                if let Some(dp) = dp {
                    out.push((*plane, dp));
                }
                if let Some(dc) = dc {
                    out.push((*coords, dc));
                }
                out
            }
            Op::ChannelMean(a) => vec![(*a, kernels::channel_mean_backward(val(a), g))],
            Op::ChannelStd(a) => vec![(*a, kernels::channel_std_backward(val(a), y, g))],
            Op::ChannelStandardize { x, mean, std } => {
                let (dx, dm, ds) =
                    kernels::channel_standardize_backward(val(x), val(mean), val(std), y, g);
                vec![(*x, dx), (*mean, dm), (*std, ds)]
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (dx, da, db) = kernels::channel_affine_backward(val(x), val(scale), g);
                vec![(*x, dx), (*scale, da), (*shift, db)]
            }
            Op::Composite {
                sigma,
                color,
                logits,
                consts,
            } => {
                let (ds, dc, dl) =
                    kernels::composite_backward(val(sigma), val(color), val(logits), consts, g);
                vec![(*sigma, ds), (*color, dc), (*logits, dl)]
            }
            Op::SoftHistogram { image, mask, bins } => {
                let (di, dm) =
                    kernels::soft_histogram_backward(val(image), val(mask), *bins, y, g);
                vec![(*image, di), (*mask, dm)]
            }
            Op::BlurDown(a) => vec![(*a, kernels::blur_down_backward(val(a).shape(), g))],
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(val).collect();
                op.backward(&vals, y, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, v)| gi.map(|t| (*v, t)))
                    .collect()
            }
        }
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn unary_forward<T: Real>(op: UnaryOp, x: T) -> T {
    match op {
        UnaryOp::Neg => -x,
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Softplus => softplus(x),
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::Tanh => x.tanh(),
        UnaryOp::Relu => x.max(T::zero()),
        UnaryOp::Abs => x.abs(),
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Square => x * x,
        UnaryOp::AddScalar(c) => x + T::c(c),
        UnaryOp::MulScalar(c) => x * T::c(c),
    }
}

fn zip3<T: Real>(g: &[T], x: &[T], y: &[T], f: impl Fn(T, T, T) -> T) -> Vec<T> {
    g.iter()
        .zip(x)
        .zip(y)
        .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
        .collect()
}

/// Chain rule through a unary op, dispatched once per tensor.
fn unary_backward<T: Real>(op: UnaryOp, g: &[T], x: &[T], y: &[T]) -> Vec<T> {
    let zero = T::zero();
    match op {
        UnaryOp::Relu => zip3(g, x, y, |gi, xi, _| if xi > zero { gi } else { zero }),
        UnaryOp::Sigmoid => zip3(g, x, y, |gi, _, yi| gi * yi * (T::one() - yi)),
        UnaryOp::Tanh => zip3(g, x, y, |gi, _, yi| gi * (T::one() - yi * yi)),
        UnaryOp::Exp => zip3(g, x, y, |gi, _, yi| gi * yi),
        UnaryOp::Neg => g.iter().map(|&gi| -gi).collect(),
        UnaryOp::AddScalar(_) => g.to_vec(),
        UnaryOp::MulScalar(c) => {
            let c = T::c(c);
            g.iter().map(|&gi| gi * c).collect()
        }
        _ => zip3(g, x, y, |gi, xi, yi| gi * unary_derivative(op, xi, yi)),
    }
}

fn unary_derivative<T: Real>(op: UnaryOp, x: T, y: T) -> T {
    let zero = T::zero();
    match op {
        UnaryOp::Neg => -T::one(),
        UnaryOp::Exp => y,
        UnaryOp::Log => T::one() / x,
        UnaryOp::Softplus => sigmoid(x),
        UnaryOp::Sigmoid => y * (T::one() - y),
        UnaryOp::Tanh => T::one() - y * y,
        UnaryOp::Relu => {
            if x > zero {
                T::one()
            } else {
                zero
            }
        }
        UnaryOp::Abs => {
            if x > zero {
                T::one()
            } else if x < zero {
                -T::one()
            } else {
                zero
            }
        }
        UnaryOp::Sqrt => {
            if y > zero {
                T::c(0.5) / y
            } else {
                zero
            }
        }
        UnaryOp::Square => T::c(2.0) * x,
        UnaryOp::AddScalar(_) => T::one(),
        UnaryOp::MulScalar(c) => T::c(c),
    }
}

/// Sums a full-size gradient down to an operand of `size` elements that was
/// broadcast over the leading dimension.
fn fold_leading<T: Real>(full: Vec<T>, size: usize) -> Vec<T> {
    if full.len() == size {
        return full;
    }
    let mut d = vec![T::zero(); size];
    for chunk in full.chunks_exact(size) {
        for (dv, &v) in d.iter_mut().zip(chunk) {
            *dv += v;
        }
    }
    d
}

fn binary_backward<T: Real>(
    op: BinaryOp,
    bc: Bcast,
    (a, xa, want_a): (Var, &Tensor<T>, bool),
    (b, xb, want_b): (Var, &Tensor<T>, bool),
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    debug_assert!(match bc {
        Bcast::Same => xa.numel() == xb.numel(),
        Bcast::Rhs => g.numel() == xa.numel(),
        Bcast::Lhs => g.numel() == xb.numel(),
    });
    let gd = g.data();
    // Operand values aligned with the output, repeating the broadcast one.
    let pa = || xa.data().iter().cycle();
    let pb = || xb.data().iter().cycle();
    let mut out = Vec::with_capacity(2);
    if want_a {
        let full: Vec<T> = match op {
            BinaryOp::Add | BinaryOp::Sub => gd.to_vec(),
            BinaryOp::Mul => gd.iter().zip(pb()).map(|(&gi, &q)| gi * q).collect(),
            BinaryOp::Div => gd.iter().zip(pb()).map(|(&gi, &q)| gi / q).collect(),
        };
        out.push((a, Tensor::from_parts(xa.shape().to_vec(), fold_leading(full, xa.numel()))));
    }
    if want_b {
        let full: Vec<T> = match op {
            BinaryOp::Add => gd.to_vec(),
            BinaryOp::Sub => gd.iter().map(|&gi| -gi).collect(),
            BinaryOp::Mul => gd.iter().zip(pa()).map(|(&gi, &p)| gi * p).collect(),
            BinaryOp::Div => gd
                .iter()
                .zip(pa())
                .zip(pb())
                .map(|((&gi, &p), &q)| -gi * p / (q * q))
                .collect(),
        };
        out.push((b, Tensor::from_parts(xb.shape().to_vec(), fold_leading(full, xb.numel()))));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn add_and_matmul_forward() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);

        let m = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let n = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(m, n).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.softplus(x);
        assert!((g.value(y).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([4]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
        let err = g.matmul(a, a).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn leading_dim_broadcast() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(&[2], &[10.0, 20.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(b).data(), &[2.0, 2.0]);
        assert_eq!(grads.wrt(a).data(), &[1.0; 4]);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 6.0);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.leaf(Tensor::scalar(5.0));
        let z = g.mul(x, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.wrt(x).item(), 5.0);
        assert_eq!(grads.wrt(y).item(), 2.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros([3]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let unused = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0; 3]);
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn retained_gradients_match_value_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
        let w = g.leaf(t(&[3, 2], &[1.0, 0.5, -0.5, 0.2, 0.3, 0.1]));
        let y = g.matmul(x, w).unwrap();
        let z = g.tanh(y);
        let r = g.sum_last_axis(z).unwrap();
        let s = g.mean(r);
        let grads = g.backward_retain(s).unwrap();
        for v in [x, w, y, z, r, s] {
            assert_eq!(grads.get(v).unwrap().shape(), g.shape(v));
        }
    }

    #[test]
    fn sqrt_gradient_is_zero_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[0.0, 4.0]));
        let y = g.sqrt(x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.25]);
    }
}
