//! Reverse-mode autodiff over a flat operation tape.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};

use super::functional as f;
use super::Scalar;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op<F>,
}

enum Op<F: Scalar> {
    Leaf,
    /// stride-1 conv; `x` (N,Cin,H,W), `w` (Cout,Cin,KH,KW)
    Conv2d { x: usize, w: usize, bias: Option<usize>, pad: usize },
    /// `batch_stats` selects the train-mode backward (stats depend on x)
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Array1<F>,
        var: Array1<F>,
        eps: F,
        batch_stats: bool,
    },
    LeakyRelu { x: usize, slope: F },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    AvgPool2 { x: usize },
    AdaptiveAvgPool { x: usize },
    Add { a: usize, b: usize },
    /// (N,C,H,W) -> (N, C*H*W)
    Flatten { x: usize },
    /// mean of selected rows per group: (M,D) -> (G,D)
    GroupMeanRows { x: usize, groups: Vec<Vec<usize>> },
    /// Euclidean distances: q (A,D), s (B,D) -> (A,B)
    PairwiseDist { q: usize, s: usize },
    LogSoftmaxRows { x: usize },
    Scale { x: usize, c: F },
    /// scalar: -sum_i x[i,i]
    NegDiagSum { x: usize },
    Sum { x: usize },
    SumSq { x: usize },
    /// scalar: sum(x * coef) for a fixed coefficient array
    DotFixed { x: usize, coef: ArrayD<F> },
}

/// Gradients keyed by tape node; only leaves retain gradients after
/// [`Tape::backward`].
pub struct Grads<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros if the leaf never reached the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<F> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

/// The autodiff tape. Build a graph with the op methods, then call
/// [`Tape::backward`] on a scalar node.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, v: Var) -> F {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().expect("scalar node")
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("conv input");
        let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("conv weight");
        let bv = bias.map(|b| {
            self.value(b)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("conv bias")
                .to_owned()
        });
        let out = f::conv2d_fwd(&xv, &wv, bv.as_ref(), pad);
        self.push(out.into_dyn(), Op::Conv2d { x: x.0, w: w.0, bias: bias.map(|b| b.0), pad })
    }

    /// Batch norm with caller-supplied statistics. `batch_stats = true`
    /// means the statistics were computed from `x` (train mode).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Array1<F>,
        var: Array1<F>,
        eps: F,
        batch_stats: bool,
    ) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("bn input");
        let g = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let b = self.value(beta).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let out = f::bn_fwd(&xv, &mean, &var, &g, &b, eps);
        self.push(
            out.into_dyn(),
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, mean, var, eps, batch_stats },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("relu input");
        let out = f::leaky_relu_fwd(&xv, slope);
        self.push(out.into_dyn(), Op::LeakyRelu { x: x.0, slope })
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("pool input");
        let (out, argmax) = f::maxpool2_fwd(&xv);
        self.push(out.into_dyn(), Op::MaxPool2 { x: x.0, argmax })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("pool input");
        let out = f::avgpool2_fwd(&xv);
        self.push(out.into_dyn(), Op::AvgPool2 { x: x.0 })
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_t: usize, out_f: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("pool input");
        let out = f::adaptive_avgpool_fwd(&xv, out_t, out_f);
        self.push(out.into_dyn(), Op::AdaptiveAvgPool { x: x.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add { a: a.0, b: b.0 })
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, rest) = (xv.shape()[0], xv.len() / xv.shape()[0]);
        let out = xv
            .to_owned()
            .into_shape_with_order(IxDyn(&[n, rest]))
            .expect("flatten reshape");
        self.push(out, Op::Flatten { x: x.0 })
    }

    pub fn group_mean_rows(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().expect("2-d input");
        let d = xv.ncols();
        let mut out = Array2::<F>::zeros((groups.len(), d));
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "empty prototype group");
            let inv = F::from_f64(1.0 / members.len() as f64);
            for &m in members {
                let row = xv.row(m);
                let mut dst = out.row_mut(g);
                for (o, &v) in dst.iter_mut().zip(row.iter()) {
                    *o += v * inv;
                }
            }
        }
        self.push(out.into_dyn(), Op::GroupMeanRows { x: x.0, groups })
    }

    pub fn pairwise_dist(&mut self, q: Var, s: Var) -> Var {
        let qv = self.value(q).view().into_dimensionality::<Ix2>().expect("2-d queries");
        let sv = self.value(s).view().into_dimensionality::<Ix2>().expect("2-d supports");
        assert_eq!(qv.ncols(), sv.ncols(), "embedding dim mismatch");
        let mut out = Array2::<F>::zeros((qv.nrows(), sv.nrows()));
        for i in 0..qv.nrows() {
            for j in 0..sv.nrows() {
                let mut acc = F::zero();
                for (a, b) in qv.row(i).iter().zip(sv.row(j).iter()) {
                    let d = *a - *b;
                    acc += d * d;
                }
                out[[i, j]] = acc.sqrt();
            }
        }
        self.push(out.into_dyn(), Op::PairwiseDist { q: q.0, s: s.0 })
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().expect("2-d input");
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            row.mapv_inplace(|v| v - lse);
        }
        self.push(out.into_dyn(), Op::LogSoftmaxRows { x: x.0 })
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).mapv(|v| v * c);
        self.push(out, Op::Scale { x: x.0, c })
    }

    pub fn neg_diag_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().expect("2-d input");
        let n = xv.nrows().min(xv.ncols());
        let mut acc = F::zero();
        for i in 0..n {
            acc += xv[[i, i]];
        }
        self.push(scalar_array(-acc), Op::NegDiagSum { x: x.0 })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let acc = self.value(x).iter().copied().sum::<F>();
        self.push(scalar_array(acc), Op::Sum { x: x.0 })
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let acc = self.value(x).iter().map(|&v| v * v).sum::<F>();
        self.push(scalar_array(acc), Op::SumSq { x: x.0 })
    }

    pub fn dot_fixed(&mut self, x: Var, coef: ArrayD<F>) -> Var {
        assert_eq!(self.value(x).shape(), coef.shape());
        let acc = self
            .value(x)
            .iter()
            .zip(coef.iter())
            .map(|(&a, &b)| a * b)
            .sum::<F>();
        self.push(scalar_array(acc), Op::DotFixed { x: x.0, coef })
    }

    /// Reverse pass from a scalar loss node. Returns leaf gradients.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), F::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g); // retain for the caller
                }
                Op::Conv2d { x, w, bias, pad } => {
                    let xv = self.nodes[*x].value.view().into_dimensionality::<Ix4>().unwrap();
                    let wv = self.nodes[*w].value.view().into_dimensionality::<Ix4>().unwrap();
                    let dout = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (dx, dw, db) = f::conv2d_bwd(&xv, &wv, bias.is_some(), *pad, &dout);
                    accumulate(&mut grads, *x, dx.into_dyn());
                    accumulate(&mut grads, *w, dw.into_dyn());
                    if let (Some(b), Some(db)) = (bias, db) {
                        accumulate(&mut grads, *b, db.into_dyn());
                    }
                }
                Op::BatchNorm { x, gamma, beta, mean, var, eps, batch_stats } => {
                    let xv = self.nodes[*x].value.view().into_dimensionality::<Ix4>().unwrap();
                    let gv = self.nodes[*gamma]
                        .value
                        .view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .unwrap();
                    let dout = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = xv.dim();
                    let count = F::from_f64((n * h * w) as f64);
                    let mut dgamma = Array1::<F>::zeros(c);
                    let mut dbeta = Array1::<F>::zeros(c);
                    let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
                    for ch in 0..c {
                        let inv_std = F::one() / (var[ch] + *eps).sqrt();
                        let mu = mean[ch];
                        // reductions
                        let mut sum_dy = F::zero();
                        let mut sum_dy_xhat = F::zero();
                        for bi in 0..n {
                            let xp = xv.index_axis(Axis(0), bi);
                            let xp = xp.index_axis(Axis(0), ch);
                            let dp = dout.index_axis(Axis(0), bi);
                            let dp = dp.index_axis(Axis(0), ch);
                            for (xi, di) in xp.iter().zip(dp.iter()) {
                                let xhat = (*xi - mu) * inv_std;
                                sum_dy += *di;
                                sum_dy_xhat += *di * xhat;
                            }
                        }
                        dgamma[ch] = sum_dy_xhat;
                        dbeta[ch] = sum_dy;
                        let gain = gv[ch] * inv_std;
                        for bi in 0..n {
                            let xp = xv.index_axis(Axis(0), bi);
                            let xp = xp.index_axis(Axis(0), ch);
                            let dp = dout.index_axis(Axis(0), bi);
                            let dp = dp.index_axis(Axis(0), ch);
                            let mut dxp = dx.index_axis_mut(Axis(0), bi);
                            let mut dxp = dxp.index_axis_mut(Axis(0), ch);
                            for ((xi, di), oi) in xp.iter().zip(dp.iter()).zip(dxp.iter_mut()) {
                                if *batch_stats {
                                    let xhat = (*xi - mu) * inv_std;
                                    *oi = gain
                                        * (*di - sum_dy / count - xhat * sum_dy_xhat / count);
                                } else {
                                    *oi = gain * *di;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                    accumulate(&mut grads, *gamma, dgamma.into_dyn());
                    accumulate(&mut grads, *beta, dbeta.into_dyn());
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = g.clone();
                    for (d, &v) in dx.iter_mut().zip(xv.iter()) {
                        if v <= F::zero() {
                            *d *= *slope;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = ArrayD::<F>::zeros(self.nodes[*x].value.raw_dim());
                    {
                        let dxs = dx.as_slice_mut().expect("standard layout");
                        for (&idx, &gv) in argmax.iter().zip(g.iter()) {
                            dxs[idx] += gv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::AvgPool2 { x } => {
                    let xs = self.nodes[*x].value.shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let dout = g.view().into_dimensionality::<Ix4>().unwrap();
                    let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
                    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
                    for i in 0..n {
                        for ch in 0..c {
                            for oh in 0..ho {
                                for ow in 0..wo {
                                    let mut cells = Vec::with_capacity(4);
                                    for dh in 0..2 {
                                        for dw in 0..2 {
                                            let (ih, iw) = (oh * 2 + dh, ow * 2 + dw);
                                            if ih < h && iw < w {
                                                cells.push((ih, iw));
                                            }
                                        }
                                    }
                                    let share = dout[[i, ch, oh, ow]]
                                        / F::from_f64(cells.len() as f64);
                                    for (ih, iw) in cells {
                                        dx[[i, ch, ih, iw]] += share;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::AdaptiveAvgPool { x } => {
                    let xs = self.nodes[*x].value.shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let dout = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (_, _, ot, of) = dout.dim();
                    let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
                    for i in 0..n {
                        for ch in 0..c {
                            for t in 0..ot {
                                let (t0, t1) = f::adaptive_region(t, ot, h);
                                for fq in 0..of {
                                    let (f0, f1) = f::adaptive_region(fq, of, w);
                                    let share = dout[[i, ch, t, fq]]
                                        / F::from_f64(((t1 - t0) * (f1 - f0)) as f64);
                                    for it in t0..t1 {
                                        for iw in f0..f1 {
                                            dx[[i, ch, it, iw]] += share;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Flatten { x } => {
                    let dx = g
                        .into_shape_with_order(self.nodes[*x].value.raw_dim())
                        .expect("unflatten");
                    accumulate(&mut grads, *x, dx);
                }
                Op::GroupMeanRows { x, groups } => {
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let xs = self.nodes[*x].value.shape();
                    let mut dx = Array2::<F>::zeros((xs[0], xs[1]));
                    for (gi, members) in groups.iter().enumerate() {
                        let inv = F::from_f64(1.0 / members.len() as f64);
                        for &m in members {
                            let src = gv.row(gi);
                            let mut dst = dx.row_mut(m);
                            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                                *d += s * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::PairwiseDist { q, s } => {
                    let qv = self.nodes[*q].value.view().into_dimensionality::<Ix2>().unwrap();
                    let sv = self.nodes[*s].value.view().into_dimensionality::<Ix2>().unwrap();
                    let dval = self.nodes[i].value.view().into_dimensionality::<Ix2>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let tiny = F::from_f64(1e-12);
                    let mut dq = Array2::<F>::zeros(qv.dim());
                    let mut ds = Array2::<F>::zeros(sv.dim());
                    for a in 0..qv.nrows() {
                        for b in 0..sv.nrows() {
                            let scale = gv[[a, b]] / dval[[a, b]].max(tiny);
                            if scale == F::zero() {
                                continue;
                            }
                            for d in 0..qv.ncols() {
                                let diff = qv[[a, d]] - sv[[b, d]];
                                dq[[a, d]] += scale * diff;
                                ds[[b, d]] -= scale * diff;
                            }
                        }
                    }
                    accumulate(&mut grads, *q, dq.into_dyn());
                    accumulate(&mut grads, *s, ds.into_dyn());
                }
                Op::LogSoftmaxRows { x } => {
                    let yv = self.nodes[i].value.view().into_dimensionality::<Ix2>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = Array2::<F>::zeros(yv.dim());
                    for r in 0..yv.nrows() {
                        let dy_sum = gv.row(r).iter().copied().sum::<F>();
                        for c in 0..yv.ncols() {
                            dx[[r, c]] = gv[[r, c]] - yv[[r, c]].exp() * dy_sum;
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, g.mapv(|v| v * *c));
                }
                Op::NegDiagSum { x } => {
                    let gs = *g.iter().next().unwrap();
                    let xs = self.nodes[*x].value.shape();
                    let mut dx = Array2::<F>::zeros((xs[0], xs[1]));
                    for d in 0..xs[0].min(xs[1]) {
                        dx[[d, d]] = -gs;
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::Sum { x } => {
                    let gs = *g.iter().next().unwrap();
                    let dx = ArrayD::from_elem(self.nodes[*x].value.raw_dim(), gs);
                    accumulate(&mut grads, *x, dx);
                }
                Op::SumSq { x } => {
                    let gs = *g.iter().next().unwrap();
                    let two = F::from_f64(2.0);
                    let dx = self.nodes[*x].value.mapv(|v| two * v * gs);
                    accumulate(&mut grads, *x, dx);
                }
                Op::DotFixed { x, coef } => {
                    let gs = *g.iter().next().unwrap();
                    let dx = coef.mapv(|v| v * gs);
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<ArrayD<F>>], idx: usize, delta: ArrayD<F>) {
    match &mut grads[idx] {
        Some(existing) => *existing = &*existing + &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn scalar_array<F: Scalar>(v: F) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(&[]), v)
}
