//! Reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its output value; [`Tape::backward`] walks the nodes once in
//! reverse execution order. A tape can be differentiated only once: after
//! `backward` every further op or backward call returns
//! [`TensorError::TapeConsumed`].

use crate::conv::{self, ConvGeom};
use crate::error::{dim_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-10;

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    SumLast(Var),
    MeanLast(Var),
    SumAll(Var),
    MeanAll(Var),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var) -> Option<Tensor<T>> {
        self.get(var)
            .map(|g| Tensor::from_parts(self.shapes[var.0].clone(), g.to_vec()))
    }
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn leading(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let n = shape.iter().product::<usize>().checked_div(last).unwrap_or(0);
    (n, last)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Records a leaf. Gradients flow into it iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        let mut value = tensor.clone();
        value.grad = None;
        let requires_grad = value.requires_grad;
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var> {
        let mut value = tensor;
        value.grad = None;
        value.requires_grad = false;
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn data(&self, var: Var) -> &[T] {
        self.nodes[var.0].value.data()
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        mut value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn map_unary(
        &mut self,
        name: &'static str,
        x: Var,
        op: Op<T>,
        f: impl Fn(T) -> T,
    ) -> Result<Var> {
        let src = self.value(x);
        let out = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(x);
        self.push(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let c = T::of(factor);
        self.map_unary("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Result<Var> {
        let c = T::of(offset);
        self.map_unary("add_scalar", x, Op::AddScalar(x), |v| v + c)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map_unary("square", x, Op::Square(x), |v| v * v)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary("relu", x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        self.map_unary("leaky_relu", x, Op::LeakyRelu(x, s), |v| {
            if v > T::zero() {
                v
            } else {
                v * s
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    /// Affine map over the trailing axis: `x · wᵀ + b`, batched over every
    /// leading axis. `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(dim_err("linear", format!("weight must be 2-d, got {ws:?}")));
        }
        let (fout, fin) = (ws[0], ws[1]);
        let xs = self.shape(x).to_vec();
        if xs.last().copied() != Some(fin) {
            return Err(dim_err(
                "linear",
                format!("input {xs:?} does not end in {fin}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(dim_err(
                    "linear",
                    format!("bias {:?} != [{fout}]", self.shape(b)),
                ));
            }
        }
        let (n, _) = leading(&xs);
        let mut out = vec![T::zero(); n * fout];
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            self.data(x),
            (fin as isize, 1),
            self.data(w),
            (1, fin as isize),
            T::zero(),
            &mut out,
            (fout as isize, 1),
        );
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = fout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            "linear",
            Tensor::from_parts(shape, out),
            Op::Linear { x, w, b },
            rg,
        )
    }

    fn split_image_batch(
        &self,
        op: &'static str,
        x: Var,
    ) -> Result<(usize, [usize; 3], bool)> {
        let s = self.shape(x);
        match s.len() {
            3 => Ok((1, [s[0], s[1], s[2]], false)),
            4 => Ok((s[0], [s[1], s[2], s[3]], true)),
            _ => Err(dim_err(op, format!("expected [C,H,W] or [N,C,H,W], got {s:?}"))),
        }
    }

    /// 2-d cross-correlation. `x` is `[C,H,W]` or `[N,C,H,W]`, `k` is
    /// `[C_out,C_in,kH,kW]`, `b` is `[C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (batch, [c, h, w], batched) = self.split_image_batch("conv2d", x)?;
        let ks = self.shape(k).to_vec();
        if ks.len() != 4 {
            return Err(dim_err("conv2d", format!("kernel must be 4-d, got {ks:?}")));
        }
        if ks[1] != c {
            return Err(dim_err(
                "conv2d",
                format!("kernel expects {} input channels, input has {c}", ks[1]),
            ));
        }
        let geom = ConvGeom::new("conv2d", [c, h, w], ks[0], [ks[2], ks[3]], stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [ks[0]] {
                return Err(dim_err("conv2d", format!("bias {:?} != [{}]", self.shape(b), ks[0])));
            }
        }
        let out = conv::forward(
            &geom,
            batch,
            self.data(x),
            self.data(k),
            b.map(|b| self.data(b)),
        );
        let mut shape = vec![geom.out_channels, geom.out_h, geom.out_w];
        if batched {
            shape.insert(0, batch);
        }
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        self.push(
            "conv2d",
            Tensor::from_parts(shape, out),
            Op::Conv2d { x, k, b, geom, batch },
            rg,
        )
    }

    /// Transposed convolution (the adjoint of [`Tape::conv2d`]). `x` is
    /// `[C_in,H,W]` or `[N,C_in,H,W]`, `k` is `[C_in,C_out,kH,kW]`. Output
    /// extent is `(H-1)·stride - 2·padding + kH`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (batch, [c, h, w], batched) = self.split_image_batch("conv_transpose2d", x)?;
        let ks = self.shape(k).to_vec();
        if ks.len() != 4 || ks[0] != c {
            return Err(dim_err(
                "conv_transpose2d",
                format!("kernel {ks:?} incompatible with {c} input channels"),
            ));
        }
        if stride == 0 {
            return Err(dim_err("conv_transpose2d", "stride must be positive"));
        }
        let oh = ((h - 1) * stride + ks[2]).checked_sub(2 * padding);
        let ow = ((w - 1) * stride + ks[3]).checked_sub(2 * padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(dim_err("conv_transpose2d", "padding exceeds output extent"));
        };
        // Geometry of the forward convolution this op is the adjoint of.
        let geom = ConvGeom::new("conv_transpose2d", [ks[1], oh, ow], c, [ks[2], ks[3]], stride, padding)?;
        if geom.out_h != h || geom.out_w != w {
            return Err(dim_err("conv_transpose2d", "stride does not tile the output"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ks[1]] {
                return Err(dim_err("conv_transpose2d", "bias length != output channels"));
            }
        }
        let out = conv::transpose_forward(
            &geom,
            batch,
            self.data(x),
            self.data(k),
            b.map(|b| self.data(b)),
        );
        let mut shape = vec![ks[1], oh, ow];
        if batched {
            shape.insert(0, batch);
        }
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        self.push(
            "conv_transpose2d",
            Tensor::from_parts(shape, out),
            Op::ConvTranspose2d { x, k, b, geom, batch },
            rg,
        )
    }

    /// Normalizes each trailing slice to zero mean and unit variance, then
    /// applies `gain * x̂ + offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, f) = leading(&xs);
        if xs.is_empty() || f < 2 {
            return Err(TensorError::Degenerate {
                op: "layer_norm",
                detail: format!("trailing axis of {xs:?} must have length >= 2"),
            });
        }
        if self.shape(gain) != [f] || self.shape(offset) != [f] {
            return Err(dim_err("layer_norm", "gain/offset must match trailing axis"));
        }
        let src = self.data(x);
        let g = self.data(gain);
        let o = self.data(offset);
        let mut out = vec![T::zero(); n * f];
        let mut xhat = vec![T::zero(); n * f];
        let mut rstd = vec![T::zero(); n];
        let inv_f = T::one() / T::of(f as f64);
        for r in 0..n {
            let row = &src[r * f..(r + 1) * f];
            let mean = row.iter().copied().sum::<T>() * inv_f;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_f;
            let rs = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..f {
                let xh = (row[j] - mean) * rs;
                xhat[r * f + j] = xh;
                out[r * f + j] = g[j] * xh + o[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(offset);
        self.push(
            "layer_norm",
            Tensor::from_parts(xs, out),
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", out, Op::Reshape(x), rg)
    }

    /// Selects rows (slices along the first axis) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let Some(&rows) = xs.first() else {
            return Err(dim_err("gather_rows", "input must have at least one axis"));
        };
        let width = self.value(x).len().checked_div(rows).unwrap_or(0);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(dim_err("gather_rows", format!("index {bad} out of {rows} rows")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = xs;
        shape[0] = index.len();
        let rg = self.rg(x);
        self.push(
            "gather_rows",
            Tensor::from_parts(shape, out),
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Sums row `r` of `x` into output row `index[r]`; output has `rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.first().copied() != Some(index.len()) {
            return Err(dim_err(
                "scatter_add_rows",
                format!("{} indices for input {xs:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(dim_err("scatter_add_rows", format!("index {bad} out of {rows} rows")));
        }
        let width = if index.is_empty() { xs[1..].iter().product() } else { self.value(x).len() / index.len() };
        let src = self.data(x);
        let mut out = vec![T::zero(); rows * width];
        for (r, &dst) in index.iter().enumerate() {
            let s = &src[r * width..(r + 1) * width];
            for (o, &v) in out[dst * width..(dst + 1) * width].iter_mut().zip(s) {
                *o += v;
            }
        }
        let mut shape = xs;
        shape[0] = rows;
        let rg = self.rg(x);
        self.push(
            "scatter_add_rows",
            Tensor::from_parts(shape, out),
            Op::ScatterAddRows {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Concatenates along the trailing axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(dim_err("concat", "nothing to concatenate"));
        };
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        if self.shape(first).is_empty() {
            return Err(dim_err("concat", "scalars cannot be concatenated"));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(dim_err(
                    "concat",
                    format!("leading axes {:?} vs {lead:?}", s),
                ));
            }
            widths.push(*s.last().expect("non-empty"));
        }
        let n: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    fn reduce_last(&mut self, x: Var, mean: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return Err(dim_err("reduce_last", "scalar has no trailing axis"));
        }
        let (n, f) = leading(&xs);
        let scale = if mean { T::one() / T::of(f as f64) } else { T::one() };
        let src = self.data(x);
        let out: Vec<T> = (0..n)
            .map(|r| src[r * f..(r + 1) * f].iter().copied().sum::<T>() * scale)
            .collect();
        let shape = xs[..xs.len() - 1].to_vec();
        let rg = self.rg(x);
        let (name, op) = if mean {
            ("mean_last", Op::MeanLast(x))
        } else {
            ("sum_last", Op::SumLast(x))
        };
        self.push(name, Tensor::from_parts(shape, out), op, rg)
    }

    /// Sums over the trailing axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        self.reduce_last(x, false)
    }

    /// Averages over the trailing axis, dropping it.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        self.reduce_last(x, true)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::Degenerate {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s = self.data(x).iter().copied().sum::<T>() / T::of(n as f64);
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Differentiates the scalar `loss` with respect to every node that
    /// requires grad. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        // Only nodes that require grad carry meaningful gradients.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        // Inputs always precede node `i`, so taking their gradient buffer out
        // and putting it back never touches `g`.
        macro_rules! with_slot {
            ($v:expr, |$acc:ident| $body:block) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let len = nodes[v.0].value.len();
                    let mut buf = grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len]);
                    {
                        let $acc: &mut Vec<T> = &mut buf;
                        $body
                    }
                    grads[v.0] = Some(buf);
                }
            }};
        }
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_slot!(*a, |acc| {
                    acc.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                });
                with_slot!(*b, |acc| {
                    acc.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                });
            }
            Op::Sub(a, b) => {
                with_slot!(*a, |acc| {
                    acc.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                });
                with_slot!(*b, |acc| {
                    acc.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                with_slot!(*a, |acc| {
                    for ((d, &s), &o) in acc.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                });
                with_slot!(*b, |acc| {
                    for ((d, &s), &o) in acc.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                });
            }
            Op::Scale(x, c) => with_slot!(*x, |acc| {
                acc.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c);
            }),
            Op::AddScalar(x) => with_slot!(*x, |acc| {
                acc.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }),
            Op::Square(x) => {
                let xv = self.data(*x);
                with_slot!(*x, |acc| {
                    for ((d, &s), &v) in acc.iter_mut().zip(g).zip(xv) {
                        *d += T::of(2.0) * v * s;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                with_slot!(*x, |acc| {
                    for ((d, &s), &v) in acc.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += s;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.data(*x);
                with_slot!(*x, |acc| {
                    for ((d, &s), &v) in acc.iter_mut().zip(g).zip(xv) {
                        *d += if v > T::zero() { s } else { s * *slope };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                with_slot!(*x, |acc| {
                    for ((d, &s), &yv) in acc.iter_mut().zip(g).zip(y) {
                        *d += s * yv * (T::one() - yv);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (fout, fin) = (ws[0], ws[1]);
                let n = g.len().checked_div(fout).unwrap_or(0);
                with_slot!(*x, |acc| {
                    T::gemm(
                        n,
                        fout,
                        fin,
                        T::one(),
                        g,
                        (fout as isize, 1),
                        self.data(*w),
                        (fin as isize, 1),
                        T::one(),
                        acc,
                        (fin as isize, 1),
                    );
                });
                with_slot!(*w, |acc| {
                    T::gemm(
                        fout,
                        n,
                        fin,
                        T::one(),
                        g,
                        (1, fout as isize),
                        self.data(*x),
                        (fin as isize, 1),
                        T::one(),
                        acc,
                        (fin as isize, 1),
                    );
                });
                if let Some(b) = b {
                    with_slot!(*b, |acc| {
                        for row in g.chunks(fout) {
                            acc.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                        }
                    });
                }
            }
            Op::Conv2d { x, k, b, geom, batch } => {
                let need_x = nodes[x.0].requires_grad;
                let need_k = nodes[k.0].requires_grad;
                let mut dx = if need_x { Some(vec![T::zero(); nodes[x.0].value.len()]) } else { None };
                let mut dk = if need_k { Some(vec![T::zero(); nodes[k.0].value.len()]) } else { None };
                conv::backward(
                    geom,
                    *batch,
                    self.data(*x),
                    self.data(*k),
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    with_slot!(*x, |acc| {
                        acc.iter_mut().zip(&dx).for_each(|(d, &s)| *d += s);
                    });
                }
                if let Some(dk) = dk {
                    with_slot!(*k, |acc| {
                        acc.iter_mut().zip(&dk).for_each(|(d, &s)| *d += s);
                    });
                }
                if let Some(b) = b {
                    let plane = geom.out_h * geom.out_w;
                    with_slot!(*b, |acc| {
                        for img in g.chunks(geom.out_channels * plane) {
                            for (c, ch) in img.chunks(plane).enumerate() {
                                acc[c] += ch.iter().copied().sum::<T>();
                            }
                        }
                    });
                }
            }
            Op::ConvTranspose2d { x, k, b, geom, batch } => {
                let need_x = nodes[x.0].requires_grad;
                let need_k = nodes[k.0].requires_grad;
                let mut dx = if need_x { Some(vec![T::zero(); nodes[x.0].value.len()]) } else { None };
                let mut dk = if need_k { Some(vec![T::zero(); nodes[k.0].value.len()]) } else { None };
                conv::transpose_backward(
                    geom,
                    *batch,
                    self.data(*x),
                    self.data(*k),
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    with_slot!(*x, |acc| {
                        acc.iter_mut().zip(&dx).for_each(|(d, &s)| *d += s);
                    });
                }
                if let Some(dk) = dk {
                    with_slot!(*k, |acc| {
                        acc.iter_mut().zip(&dk).for_each(|(d, &s)| *d += s);
                    });
                }
                if let Some(b) = b {
                    let plane = geom.in_h * geom.in_w;
                    with_slot!(*b, |acc| {
                        for img in g.chunks(geom.in_channels * plane) {
                            for (c, ch) in img.chunks(plane).enumerate() {
                                acc[c] += ch.iter().copied().sum::<T>();
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            } => {
                let f = self.shape(*gain)[0];
                let gv = self.data(*gain);
                let inv_f = T::one() / T::of(f as f64);
                with_slot!(*x, |acc| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * f..(r + 1) * f];
                        let xh = &xhat[r * f..(r + 1) * f];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..f {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d *= inv_f;
                        mean_dx *= inv_f;
                        for j in 0..f {
                            let d = gr[j] * gv[j];
                            acc[r * f + j] += rs * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                with_slot!(*gain, |acc| {
                    for (gr, xh) in g.chunks(f).zip(xhat.chunks(f)) {
                        for j in 0..f {
                            acc[j] += gr[j] * xh[j];
                        }
                    }
                });
                with_slot!(*offset, |acc| {
                    for gr in g.chunks(f) {
                        acc.iter_mut().zip(gr).for_each(|(d, &s)| *d += s);
                    }
                });
            }
            Op::Reshape(x) => with_slot!(*x, |acc| {
                acc.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }),
            Op::GatherRows { x, index } => {
                let width = if index.is_empty() { 0 } else { g.len() / index.len() };
                with_slot!(*x, |acc| {
                    for (r, &src) in index.iter().enumerate() {
                        for (d, &s) in acc[src * width..(src + 1) * width]
                            .iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::ScatterAddRows { x, index } => {
                let width = if index.is_empty() { 0 } else { nodes[x.0].value.len() / index.len() };
                with_slot!(*x, |acc| {
                    for (r, &dst) in index.iter().enumerate() {
                        for (d, &s) in acc[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(&g[dst * width..(dst + 1) * width])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.shape(p).last().expect("non-empty"))
                    .collect();
                let total: usize = widths.iter().sum();
                let n = g.len().checked_div(total).unwrap_or(0);
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    with_slot!(p, |acc| {
                        for r in 0..n {
                            for (d, &s) in acc[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + w])
                            {
                                *d += s;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SumLast(x) | Op::MeanLast(x) => {
                let f = *self.shape(*x).last().expect("non-empty");
                let scale = if matches!(node.op, Op::MeanLast(_)) {
                    T::one() / T::of(f as f64)
                } else {
                    T::one()
                };
                with_slot!(*x, |acc| {
                    for (r, &s) in g.iter().enumerate() {
                        for d in &mut acc[r * f..(r + 1) * f] {
                            *d += s * scale;
                        }
                    }
                });
            }
            Op::SumAll(x) => with_slot!(*x, |acc| {
                acc.iter_mut().for_each(|d| *d += g[0]);
            }),
            Op::MeanAll(x) => {
                let n = nodes[x.0].value.len();
                let s = g[0] / T::of(n as f64);
                with_slot!(*x, |acc| {
                    acc.iter_mut().for_each(|d| *d += s);
                });
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
