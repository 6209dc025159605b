//! A small reverse-mode tape covering exactly the operations the networks use.
//!
//! Every value lives on the tape as a [`Var`]. Leaves are created with an
//! explicit `requires_grad` flag; interior nodes require a gradient iff any of
//! their inputs does. [`Tape::stop_gradient`] produces a value-identical node
//! that never requires a gradient, so nothing upstream of it can receive one
//! through that path.
//!
//! Feature maps are channel-first: `[C, T, H, W]`. Two-dimensional maps are the
//! `T == 1` case.

use crate::error::{Error, Result};
use crate::tensor::{dims4, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        kernel: [usize; 3],
        cols: Vec<F>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: [usize; 3],
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    TimeSlice {
        x: Var,
        t: usize,
    },
    ChannelSlice {
        x: Var,
        start: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    L1NormalizeRows {
        x: Var,
        rows: usize,
    },
    CrossConv {
        x: Var,
        k: Var,
    },
    StopGradient,
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    WeightedL1 {
        x: Var,
        target: Tensor<F>,
        weights: Vec<F>,
    },
    MeanAbs {
        x: Var,
        target: Tensor<F>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    SoftmaxXent {
        logits: Var,
        label: usize,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Smallest L1 mass a kernel row is divided by.
pub const L1_NORM_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// `None` when no gradient reached `v` (it is then exactly zero).
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, materializing zeros when none flowed.
    pub fn wrt(&self, tape: &Tape<F>, v: Var) -> Tensor<F> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
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

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Stride-1 convolution with zero "same" padding. `x: [Ci, T, H, W]`,
    /// `w: [Co, Ci, kt, kh, kw]` with odd kernel extents, `b: [Co]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 5 {
            return shape_err(format!("conv: input {xs:?}, weight {ws:?}"));
        }
        let [ci, t, h, wd] = dims4(&xs);
        let (co, kernel) = (ws[0], [ws[2], ws[3], ws[4]]);
        if ws[1] != ci {
            return shape_err(format!(
                "conv: weight expects {} input channels, got {ci}",
                ws[1]
            ));
        }
        if kernel.iter().any(|k| k % 2 == 0) {
            return shape_err(format!("conv: kernel {kernel:?} must be odd"));
        }
        if self.value(b).shape() != [co] {
            return shape_err(format!("conv: bias {:?}, want [{co}]", self.value(b).shape()));
        }
        let n = t * h * wd;
        let k = ci * kernel.iter().product::<usize>();
        let mut cols = vec![F::zero(); k * n];
        im2col(self.value(x).data(), [ci, t, h, wd], kernel, &mut cols);
        let mut out = vec![F::zero(); co * n];
        F::gemm(
            co,
            k,
            n,
            F::one(),
            self.value(w).data(),
            (k as isize, 1),
            &cols,
            (n as isize, 1),
            F::zero(),
            &mut out,
            (n as isize, 1),
        );
        for (row, &bias) in out.chunks_mut(n).zip(self.value(b).data()) {
            for v in row {
                *v += bias;
            }
        }
        let needs = self.any_grad(&[x, w, b]);
        let weight_grad = self.any_grad(&[w]);
        let value = Tensor::from_vec(&[co, t, h, wd], out)?;
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                kernel,
                cols: if weight_grad { cols } else { Vec::new() },
            },
            needs,
        ))
    }

    /// Non-overlapping max pooling; every extent must divide evenly.
    pub fn max_pool(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let [c, t, h, w] = dims4(self.value(x).shape());
        let [pt, ph, pw] = factor;
        if pt == 0 || ph == 0 || pw == 0 || t % pt != 0 || h % ph != 0 || w % pw != 0 {
            return shape_err(format!(
                "max_pool: {:?} not divisible by {factor:?}",
                [c, t, h, w]
            ));
        }
        let (ot, oh, ow) = (t / pt, h / ph, w / pw);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * ot * oh * ow);
        let mut argmax = Vec::with_capacity(c * ot * oh * ow);
        for ch in 0..c {
            for a in 0..ot {
                for b in 0..oh {
                    for d in 0..ow {
                        let mut best = usize::MAX;
                        let mut best_v = F::neg_infinity();
                        for dt in 0..pt {
                            for dh in 0..ph {
                                let row = ((ch * t + a * pt + dt) * h + b * ph + dh) * w + d * pw;
                                for dw in 0..pw {
                                    let v = src[row + dw];
                                    if best == usize::MAX || v > best_v {
                                        best = row + dw;
                                        best_v = v;
                                    }
                                }
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let needs = self.any_grad(&[x]);
        let value = Tensor::from_vec(&[c, ot, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, needs))
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let [c, t, h, w] = dims4(self.value(x).shape());
        let [ft, fh, fw] = factor;
        let (ot, oh, ow) = (t * ft, h * fh, w * fw);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * ot * oh * ow);
        for ch in 0..c {
            for a in 0..ot {
                for b in 0..oh {
                    let row = ((ch * t + a / ft) * h + b / fh) * w;
                    out.extend((0..ow).map(|d| src[row + d / fw]));
                }
            }
        }
        let needs = self.any_grad(&[x]);
        let value = Tensor::from_vec(&[c, ot, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(F::zero()));
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Tanh { x }, needs)
    }

    /// `[C, T, H, W] -> [C, 1, H, W]` at time index `t`.
    pub fn time_slice(&mut self, x: Var, t: usize) -> Result<Var> {
        let tt = self.value(x).shape()[1];
        if t >= tt {
            return shape_err(format!("time_slice: index {t} out of range {tt}"));
        }
        let value = self.value(x).time_slice(t);
        let needs = self.any_grad(&[x]);
        Ok(self.push(value, Op::TimeSlice { x, t }, needs))
    }

    pub fn channel_slice(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let c = self.value(x).shape()[0];
        if start + count > c {
            return shape_err(format!(
                "channel_slice: [{start}, {}) exceeds {c} channels",
                start + count
            ));
        }
        let value = self.value(x).channel_range(start, count);
        let needs = self.any_grad(&[x]);
        Ok(self.push(value, Op::ChannelSlice { x, start }, needs))
    }

    /// Mean over every axis but the first: `[C, ...] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let per = xv.len() / c;
        let inv = F::one() / F::from_usize(per).unwrap();
        let data = xv
            .data()
            .chunks(per)
            .map(|ch| ch.iter().copied().sum::<F>() * inv)
            .collect();
        let value = Tensor::from_vec(&[c], data).expect("pool shape");
        let needs = self.any_grad(&[x]);
        self.push(value, Op::GlobalAvgPool { x }, needs)
    }

    /// Affine map of the flattened input: `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.value(w).shape().to_vec();
        let n_in = self.value(x).len();
        if ws.len() != 2 || ws[1] != n_in || self.value(b).shape() != [ws[0]] {
            return shape_err(format!(
                "linear: weight {ws:?}, bias {:?}, input of {n_in} values",
                self.value(b).shape()
            ));
        }
        let mut out = self.value(b).data().to_vec();
        F::gemm(
            ws[0],
            n_in,
            1,
            F::one(),
            self.value(w).data(),
            (n_in as isize, 1),
            self.value(x).data(),
            (1, 1),
            F::one(),
            &mut out,
            (1, 1),
        );
        let needs = self.any_grad(&[x, w, b]);
        let value = Tensor::from_vec(&[ws[0]], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Divides each of `rows` equal-length rows by its L1 mass.
    pub fn l1_normalize_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if rows == 0 || xv.len() % rows != 0 {
            return shape_err(format!("l1_normalize_rows: {} values into {rows} rows", xv.len()));
        }
        let per = xv.len() / rows;
        let floor = F::from_f64_lossy(L1_NORM_FLOOR);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(per) {
            let mass = row.iter().map(|v| v.abs()).sum::<F>().max(floor);
            data.extend(row.iter().map(|&v| v / mass));
        }
        let value = Tensor::from_vec(xv.shape(), data)?;
        let needs = self.any_grad(&[x]);
        Ok(self.push(value, Op::L1NormalizeRows { x, rows }, needs))
    }

    /// Per-channel 2-D convolution of `x: [C, 1, H, W]` with `k: [C, K, K]`,
    /// zero fill outside the map, no channel mixing. The kernel is flipped
    /// (true convolution), so a delta one column right of centre moves the
    /// map one column right.
    pub fn cross_conv(&mut self, x: Var, k: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        if xs.len() != 4 || xs[1] != 1 || ks.len() != 3 || ks[1] != ks[2] || ks[1] % 2 == 0 {
            return shape_err(format!("cross_conv: features {xs:?}, kernels {ks:?}"));
        }
        if xs[0] != ks[0] {
            return shape_err(format!(
                "cross_conv: {} feature channels but {} kernels",
                xs[0], ks[0]
            ));
        }
        let out = cross_conv_forward(self.value(x).data(), self.value(k).data(), xs[0], xs[2], xs[3], ks[1]);
        let needs = self.any_grad(&[x, k]);
        let value = Tensor::from_vec(&xs, out)?;
        Ok(self.push(value, Op::CrossConv { x, k }, needs))
    }

    /// Identity in value; blocks every gradient flowing back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Sum { x }, needs)
    }

    /// `(1/P) Σ_p weights[p] · (1/C) Σ_c |x[c,p] - target[c,p]|` where the
    /// trailing axes of `x` flatten to `P` pixels.
    pub fn weighted_l1(&mut self, x: Var, target: Tensor<F>, weights: Vec<F>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return shape_err(format!(
                "weighted_l1: reconstruction {:?} vs target {:?}",
                xv.shape(),
                target.shape()
            ));
        }
        let c = xv.shape()[0];
        if weights.len() * c != xv.len() {
            return shape_err(format!(
                "weighted_l1: {} weights for {} pixels",
                weights.len(),
                xv.len() / c
            ));
        }
        let value = weighted_l1_value(xv.data(), target.data(), &weights, c);
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::WeightedL1 { x, target, weights }, needs))
    }

    /// Mean absolute difference over every element.
    pub fn mean_abs(&mut self, x: Var, target: Tensor<F>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return shape_err(format!("mean_abs: {:?} vs {:?}", xv.shape(), target.shape()));
        }
        let n = F::from_usize(xv.len()).unwrap();
        let value = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<F>()
            / n;
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::MeanAbs { x, target }, needs))
    }

    /// Mean squared difference over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("mse: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let n = F::from_usize(av.len()).unwrap();
        let value = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum::<F>()
            / n;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(value), Op::Mse { a, b }, needs))
    }

    /// Cross-entropy of softmax(logits) against a class index.
    pub fn softmax_xent(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if label >= lv.len() {
            return shape_err(format!("softmax_xent: label {label} for {} classes", lv.len()));
        }
        let probs = softmax(lv.data());
        let value = -probs[label].max(F::min_positive_value()).ln();
        let needs = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SoftmaxXent {
                logits,
                label,
                probs,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar `root`.
    /// Which side of its switching point every non-smooth element sits on:
    /// ReLU input sign, max-pool argmax, L1 residual sign, kernel entry sign.
    /// One entry per non-smooth node, in tape order. Two evaluations with equal
    /// patterns lie on the same smooth piece of the computed function.
    pub fn branch_pattern(&self) -> Vec<(&'static str, Vec<i64>)> {
        let sign = |v: F| if v > F::zero() { 1 } else if v < F::zero() { -1 } else { 0 };
        let residuals = |x: Var, target: &Tensor<F>| -> Vec<i64> {
            self.value(x).data().iter().zip(target.data()).map(|(&a, &b)| sign(a - b)).collect()
        };
        self.nodes
            .iter()
            .filter_map(|node| match &node.op {
                Op::Relu { x } => Some(("relu", self.value(*x).data().iter().map(|&v| sign(v)).collect())),
                Op::MaxPool { argmax, .. } => Some(("max_pool", argmax.iter().map(|&i| i as i64).collect())),
                Op::WeightedL1 { x, target, .. } | Op::MeanAbs { x, target } => Some(("l1", residuals(*x, target))),
                Op::L1NormalizeRows { x, .. } => {
                    Some(("l1_normalize", self.value(*x).data().iter().map(|&v| sign(v)).collect()))
                }
                _ => None,
            })
            .collect()
    }

    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Conv {
                x,
                w,
                b,
                kernel,
                cols,
            } => {
                let xshape = self.value(*x).shape().to_vec();
                let [ci, t, h, wd] = dims4(&xshape);
                let co = node.value.shape()[0];
                let n = t * h * wd;
                let k = ci * kernel.iter().product::<usize>();
                if self.requires_grad(*b) {
                    let db = gd.chunks(n).map(|row| row.iter().copied().sum()).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(&[co], db).unwrap());
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![F::zero(); co * k];
                    F::gemm(
                        co,
                        n,
                        k,
                        F::one(),
                        gd,
                        (n as isize, 1),
                        cols,
                        (1, n as isize),
                        F::zero(),
                        &mut dw,
                        (k as isize, 1),
                    );
                    let wshape = self.value(*w).shape().to_vec();
                    self.accumulate(grads, *w, Tensor::from_vec(&wshape, dw).unwrap());
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![F::zero(); k * n];
                    F::gemm(
                        k,
                        co,
                        n,
                        F::one(),
                        self.value(*w).data(),
                        (1, k as isize),
                        gd,
                        (n as isize, 1),
                        F::zero(),
                        &mut dcols,
                        (n as isize, 1),
                    );
                    let mut dx = vec![F::zero(); ci * n];
                    col2im(&dcols, [ci, t, h, wd], *kernel, &mut dx);
                    self.accumulate(grads, *x, Tensor::from_vec(&xshape, dx).unwrap());
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(gd) {
                    d[src] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample { x, factor } => {
                let [c, t, h, w] = dims4(self.value(*x).shape());
                let [ft, fh, fw] = *factor;
                let (ot, oh, ow) = (t * ft, h * fh, w * fw);
                let mut dx = Tensor::zeros(&[c, t, h, w]);
                let d = dx.data_mut();
                for ch in 0..c {
                    for a in 0..ot {
                        for bb in 0..oh {
                            let dst = ((ch * t + a / ft) * h + bb / fh) * w;
                            let src = ((ch * ot + a) * oh + bb) * ow;
                            for dd in 0..ow {
                                d[dst + dd / fw] += gd[src + dd];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let data = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > F::zero() { gv } else { F::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data).unwrap());
            }
            Op::Tanh { x } => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| gv * (F::one() - y * y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data).unwrap());
            }
            Op::TimeSlice { x, t } => {
                let [c, tt, h, w] = dims4(self.value(*x).shape());
                let plane = h * w;
                let mut dx = Tensor::zeros(&[c, tt, h, w]);
                let d = dx.data_mut();
                for ch in 0..c {
                    let dst = (ch * tt + t) * plane;
                    d[dst..dst + plane].copy_from_slice(&gd[ch * plane..(ch + 1) * plane]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelSlice { x, start } => {
                let xs = self.value(*x).shape();
                let per = self.value(*x).len() / xs[0];
                let mut dx = Tensor::zeros(xs);
                dx.data_mut()[start * per..start * per + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let per = xv.len() / xv.shape()[0];
                let inv = F::one() / F::from_usize(per).unwrap();
                let data = gd
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * inv, per))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), data).unwrap());
            }
            Op::Linear { x, w, b } => {
                let n_out = gd.len();
                let n_in = self.value(*x).len();
                self.accumulate(grads, *b, g.clone());
                if self.requires_grad(*w) {
                    let xv = self.value(*x).data();
                    let mut dw = Vec::with_capacity(n_out * n_in);
                    for &gv in gd {
                        dw.extend(xv.iter().map(|&v| gv * v));
                    }
                    self.accumulate(grads, *w, Tensor::from_vec(&[n_out, n_in], dw).unwrap());
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![F::zero(); n_in];
                    F::gemm(
                        n_in,
                        n_out,
                        1,
                        F::one(),
                        self.value(*w).data(),
                        (1, n_in as isize),
                        gd,
                        (1, 1),
                        F::zero(),
                        &mut dx,
                        (1, 1),
                    );
                    let xshape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::from_vec(&xshape, dx).unwrap());
                }
            }
            Op::Reshape { x } => {
                let dx = g.clone().reshape(self.value(*x).shape()).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::L1NormalizeRows { x, rows } => {
                let xv = self.value(*x);
                let per = xv.len() / rows;
                let floor = F::from_f64_lossy(L1_NORM_FLOOR);
                let mut dx = Vec::with_capacity(xv.len());
                for (row, grow) in xv.data().chunks(per).zip(gd.chunks(per)) {
                    let mass = row.iter().map(|v| v.abs()).sum::<F>();
                    if mass < floor {
                        dx.extend(grow.iter().map(|&gv| gv / floor));
                        continue;
                    }
                    let dot: F = row.iter().zip(grow).map(|(&v, &gv)| v * gv).sum();
                    let m2 = mass * mass;
                    dx.extend(row.iter().zip(grow).map(|(&v, &gv)| {
                        let sign = if v > F::zero() {
                            F::one()
                        } else if v < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        gv / mass - sign * dot / m2
                    }));
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::CrossConv { x, k } => {
                let xs = self.value(*x).shape().to_vec();
                let ks = self.value(*k).shape().to_vec();
                let (dx, dk) = cross_conv_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    gd,
                    xs[0],
                    xs[2],
                    xs[3],
                    ks[1],
                );
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, dx).unwrap());
                }
                if self.requires_grad(*k) {
                    self.accumulate(grads, *k, Tensor::from_vec(&ks, dk).unwrap());
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sum { x } => {
                let gv = gd[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::WeightedL1 { x, target, weights } => {
                let xv = self.value(*x);
                let c = xv.shape()[0];
                let p = weights.len();
                let scale = gd[0] / F::from_usize(p * c).unwrap();
                let mut dx = Vec::with_capacity(xv.len());
                for ch in 0..c {
                    let xr = &xv.data()[ch * p..(ch + 1) * p];
                    let tr = &target.data()[ch * p..(ch + 1) * p];
                    dx.extend(
                        xr.iter()
                            .zip(tr)
                            .zip(weights)
                            .map(|((&a, &b), &wt)| signum0(a - b) * wt * scale),
                    );
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::MeanAbs { x, target } => {
                let xv = self.value(*x);
                let scale = gd[0] / F::from_usize(xv.len()).unwrap();
                let dx = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| signum0(a - b) * scale)
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = gd[0] * F::from_f64_lossy(2.0) / F::from_usize(av.len()).unwrap();
                let da: Vec<F> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&p, &q)| (p - q) * scale)
                    .collect();
                if self.requires_grad(*b) {
                    let db = da.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), db).unwrap());
                }
                self.accumulate(grads, *a, Tensor::from_vec(av.shape(), da).unwrap());
            }
            Op::SoftmaxXent {
                logits,
                label,
                probs,
            } => {
                let dl = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let target = if i == *label { F::one() } else { F::zero() };
                        (p - target) * gd[0]
                    })
                    .collect();
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::from_vec(&shape, dl).unwrap());
            }
        }
    }
}

/// Sign with `signum0(0) == 0`, the L1 subgradient used throughout.
pub(crate) fn signum0<F: Real>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

pub(crate) fn weighted_l1_value<F: Real>(x: &[F], target: &[F], weights: &[F], channels: usize) -> F {
    let p = weights.len();
    let mut total = F::zero();
    for (pix, &wt) in weights.iter().enumerate() {
        let mut d = F::zero();
        for ch in 0..channels {
            d += (x[ch * p + pix] - target[ch * p + pix]).abs();
        }
        total += wt * d;
    }
    total / F::from_usize(p * channels).unwrap()
}

/// Numerically stable softmax.
pub fn softmax<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Copies `src[lo + shift .. hi + shift]` into `dst[lo..hi]`, zeroing the rest.
#[inline]
fn shifted_row<F: Real>(dst: &mut [F], src: &[F], shift: isize) {
    let w = dst.len() as isize;
    let lo = (-shift).clamp(0, w) as usize;
    let hi = (w - shift).clamp(0, w) as usize;
    dst[..lo].fill(F::zero());
    if lo < hi {
        dst[lo..hi].copy_from_slice(&src[(lo as isize + shift) as usize..(hi as isize + shift) as usize]);
        dst[hi..].fill(F::zero());
    } else {
        dst[lo..].fill(F::zero());
    }
}

#[inline]
fn shifted_row_acc<F: Real>(dst: &mut [F], src: &[F], shift: isize) {
    // dst[j + shift] += src[j]
    let w = dst.len() as isize;
    let lo = (-shift).clamp(0, w) as usize;
    let hi = (w - shift).clamp(0, w) as usize;
    for j in lo..hi {
        dst[(j as isize + shift) as usize] += src[j];
    }
}

fn im2col<F: Real>(x: &[F], dims: [usize; 4], kernel: [usize; 3], cols: &mut [F]) {
    let [ci, t, h, w] = dims;
    let [kt, kh, kw] = kernel;
    let (pt, ph, pw) = ((kt / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let n = t * h * w;
    let mut row = 0;
    for c in 0..ci {
        for a in 0..kt {
            for b in 0..kh {
                for d in 0..kw {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let shift = d as isize - pw;
                    for tt in 0..t {
                        let st = tt as isize + a as isize - pt;
                        for hh in 0..h {
                            let sh = hh as isize + b as isize - ph;
                            let seg = &mut dst[(tt * h + hh) * w..(tt * h + hh + 1) * w];
                            if st < 0 || st >= t as isize || sh < 0 || sh >= h as isize {
                                seg.fill(F::zero());
                                continue;
                            }
                            let src = ((c * t + st as usize) * h + sh as usize) * w;
                            shifted_row(seg, &x[src..src + w], shift);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<F: Real>(cols: &[F], dims: [usize; 4], kernel: [usize; 3], dx: &mut [F]) {
    let [ci, t, h, w] = dims;
    let [kt, kh, kw] = kernel;
    let (pt, ph, pw) = ((kt / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let n = t * h * w;
    let mut row = 0;
    for c in 0..ci {
        for a in 0..kt {
            for b in 0..kh {
                for d in 0..kw {
                    let src = &cols[row * n..(row + 1) * n];
                    let shift = d as isize - pw;
                    for tt in 0..t {
                        let st = tt as isize + a as isize - pt;
                        if st < 0 || st >= t as isize {
                            continue;
                        }
                        for hh in 0..h {
                            let sh = hh as isize + b as isize - ph;
                            if sh < 0 || sh >= h as isize {
                                continue;
                            }
                            let dst = ((c * t + st as usize) * h + sh as usize) * w;
                            let seg = &src[(tt * h + hh) * w..(tt * h + hh + 1) * w];
                            shifted_row_acc(&mut dx[dst..dst + w], seg, shift);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn cross_conv_forward<F: Real>(x: &[F], k: &[F], c: usize, h: usize, w: usize, ks: usize) -> Vec<F> {
    let r = (ks / 2) as isize;
    let mut out = vec![F::zero(); c * h * w];
    for ch in 0..c {
        let xm = &x[ch * h * w..(ch + 1) * h * w];
        let km = &k[ch * ks * ks..(ch + 1) * ks * ks];
        let om = &mut out[ch * h * w..(ch + 1) * h * w];
        for u in 0..ks {
            for v in 0..ks {
                let kv = km[u * ks + v];
                if kv == F::zero() {
                    continue;
                }
                // out[i, j] += kv * x[i - (u - r), j - (v - r)]
                let (du, dv) = (u as isize - r, v as isize - r);
                for i in 0..h as isize {
                    let si = i - du;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w as isize {
                        let sj = j - dv;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        om[(i * w as isize + j) as usize] += kv * xm[(si * w as isize + sj) as usize];
                    }
                }
            }
        }
    }
    out
}

fn cross_conv_backward<F: Real>(
    x: &[F],
    k: &[F],
    g: &[F],
    c: usize,
    h: usize,
    w: usize,
    ks: usize,
) -> (Vec<F>, Vec<F>) {
    let r = (ks / 2) as isize;
    let mut dx = vec![F::zero(); c * h * w];
    let mut dk = vec![F::zero(); c * ks * ks];
    for ch in 0..c {
        let base = ch * h * w;
        for u in 0..ks {
            for v in 0..ks {
                let kv = k[ch * ks * ks + u * ks + v];
                let (du, dv) = (u as isize - r, v as isize - r);
                let mut acc = F::zero();
                for i in 0..h as isize {
                    let si = i - du;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w as isize {
                        let sj = j - dv;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let gi = base + (i * w as isize + j) as usize;
                        let xi = base + (si * w as isize + sj) as usize;
                        acc += g[gi] * x[xi];
                        dx[xi] += kv * g[gi];
                    }
                }
                dk[ch * ks * ks + u * ks + v] = acc;
            }
        }
    }
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn stop_gradient_forward_is_identity_and_blocks() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[3], &[1.5, -2.0, 0.25]), true);
        let s = tape.stop_gradient(a);
        assert_eq!(tape.value(s), tape.value(a));
        let total = tape.sum(s);
        let grads = tape.backward(total);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.wrt(&tape, a).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn only_unblocked_path_contributes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]), true);
        let s = tape.stop_gradient(a);
        let both = tape.add(a, s).unwrap();
        let total = tape.sum(both);
        let grads = tape.backward(total);
        assert_eq!(grads.wrt(&tape, a).data(), &[1.0; 4]);
    }

    #[test]
    fn conv_with_centre_delta_is_identity() {
        let mut tape = Tape::<f64>::new();
        let xv: Vec<f64> = (0..2 * 2 * 3 * 3).map(|v| v as f64 * 0.1 - 0.7).collect();
        let x = tape.constant(t(&[2, 2, 3, 3], &xv));
        let mut wv = vec![0.0; 2 * 2 * 27];
        wv[13] = 1.0; // out 0 <- in 0 centre
        wv[3 * 27 + 13] = 1.0; // out 1 <- in 1 centre
        let w = tape.constant(t(&[2, 2, 3, 3, 3], &wv));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.conv(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &xv[..]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[0.1, 0.9, -0.3, 0.2]), true);
        let p = tape.max_pool(x, [1, 2, 2]).unwrap();
        assert_eq!(tape.value(p).data(), &[0.9]);
        let s = tape.sum(p);
        let g = tape.backward(s);
        assert_eq!(g.wrt(&tape, x).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_indivisible_extent() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(tape.max_pool(x, [2, 2, 2]).is_err());
    }

    #[test]
    fn l1_rows_have_unit_mass() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, -3.0, 4.0, 0.5, 0.5, 0.0]));
        let y = tape.l1_normalize_rows(x, 2).unwrap();
        for row in tape.value(y).data().chunks(3) {
            let mass: f64 = row.iter().map(|v| v.abs()).sum();
            assert!((mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0f64, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
