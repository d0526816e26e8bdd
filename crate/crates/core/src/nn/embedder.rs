//! The convolutional embedding network.
//!
//! Three convolutional blocks (hidden channels 64, 128, 64 by default), each
//! made of three 3x3 conv + batch-norm + leaky-ReLU layers with a trailing
//! 2x2 max pool, plus a residual path through a 1x1 conv and a 2x2 average
//! pool. Adaptive average pooling maps any input length onto a fixed
//! C x T x F grid, so the flattened embedding has the same dimension (2048
//! by default) for any segment length.

use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::functional as f;
use super::{Scalar, Tape, Var};
use crate::hash::fnv1a64;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedderConfig {
    /// Feature bins of the input (stacked PCEN + delta-MFCC).
    pub in_bins: usize,
    /// Hidden channels of the three blocks.
    pub channels: [usize; 3],
    /// Adaptive pooling grid (time cells).
    pub pool_t: usize,
    /// Adaptive pooling grid (frequency cells).
    pub pool_f: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            in_bins: 159,
            channels: [64, 128, 64],
            pool_t: 4,
            pool_f: 8,
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl EmbedderConfig {
    pub fn embedding_dim(&self) -> usize {
        self.channels[2] * self.pool_t * self.pool_f
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bins == 0 || self.channels.contains(&0) || self.pool_t == 0 || self.pool_f == 0 {
            return Err(Error::Config("embedder dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        format!(
            "in_bins={};channels={},{},{};pool={}x{};slope={:e};bn_momentum={:e};bn_eps={:e}",
            self.in_bins,
            self.channels[0],
            self.channels[1],
            self.channels[2],
            self.pool_t,
            self.pool_f,
            self.leaky_slope,
            self.bn_momentum,
            self.bn_eps
        )
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }
}

/// Forward mode: train updates batch-norm running statistics, eval uses them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Conv2dParams<F: Scalar> {
    pub weight: Array4<F>,
    pub bias: Option<Array1<F>>,
}

#[derive(Debug, Clone)]
pub struct BnParams<F: Scalar> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

impl<F: Scalar> BnParams<F> {
    fn new(channels: usize) -> Self {
        BnParams {
            gamma: Array1::from_elem(channels, F::one()),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, F::one()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams<F: Scalar> {
    pub convs: [Conv2dParams<F>; 3],
    pub bns: [BnParams<F>; 3],
    pub skip: Conv2dParams<F>,
}

/// The embedding network: configuration plus all parameters.
#[derive(Debug, Clone)]
pub struct Embedder<F: Scalar> {
    pub cfg: EmbedderConfig,
    pub blocks: [BlockParams<F>; 3],
}

impl<F: Scalar> Embedder<F> {
    /// Kaiming-uniform initialization for convs, ones/zeros for batch norm.
    pub fn init(cfg: EmbedderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let chans = [1, cfg.channels[0], cfg.channels[1], cfg.channels[2]];
        let gain = (2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope)).sqrt();
        let mut blocks = Vec::with_capacity(3);
        for b in 0..3 {
            let (cin, cout) = (chans[b], chans[b + 1]);
            let convs = [
                kaiming_conv(cout, cin, 3, gain, false, rng),
                kaiming_conv(cout, cout, 3, gain, false, rng),
                kaiming_conv(cout, cout, 3, gain, false, rng),
            ];
            let bns = [BnParams::new(cout), BnParams::new(cout), BnParams::new(cout)];
            let skip = kaiming_conv(cout, cin, 1, gain, true, rng);
            blocks.push(BlockParams { convs, bns, skip });
        }
        let blocks: [BlockParams<F>; 3] =
            blocks.try_into().unwrap_or_else(|_| unreachable!("exactly three blocks"));
        Ok(Embedder { cfg, blocks })
    }

    fn check_input(&self, frames: usize, bins: usize) -> Result<()> {
        if bins != self.cfg.in_bins {
            return Err(Error::Shape(format!(
                "segment has {bins} bins, embedder expects {}",
                self.cfg.in_bins
            )));
        }
        if frames < 4 {
            return Err(Error::Shape(format!("segment has {frames} frames, need at least 4")));
        }
        Ok(())
    }

    /// Training-mode forward on the tape. Returns the embedding node
    /// (batch x dim) and the parameter leaves in canonical order.
    /// Batch-norm running statistics are updated in place.
    pub fn forward_train(&mut self, tape: &mut Tape<F>, batch: Array4<F>) -> Result<(Var, Vec<Var>)> {
        let (_, c, h, w) = batch.dim();
        if c != 1 {
            return Err(Error::Shape("input batch must have one channel".into()));
        }
        self.check_input(h, w)?;
        let eps = F::from_f64(self.cfg.bn_eps);
        let slope = F::from_f64(self.cfg.leaky_slope);
        let momentum = self.cfg.bn_momentum;

        let mut pvars = Vec::with_capacity(3 * 11);
        let mut x = tape.leaf(batch.into_dyn());
        for block in self.blocks.iter_mut() {
            let block_input = x;
            let mut main = x;
            for i in 0..3 {
                let w_var = tape.leaf(block.convs[i].weight.clone().into_dyn());
                pvars.push(w_var);
                main = tape.conv2d(main, w_var, None, 1);

                let conv_out = tape.value(main).view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (mean, var) = f::bn_stats(&conv_out);
                update_running(&mut block.bns[i], &mean, &var, momentum, conv_out.dim());

                let g_var = tape.leaf(block.bns[i].gamma.clone().into_dyn());
                let b_var = tape.leaf(block.bns[i].beta.clone().into_dyn());
                pvars.push(g_var);
                pvars.push(b_var);
                main = tape.batch_norm(main, g_var, b_var, mean, var, eps, true);
                main = tape.leaky_relu(main, slope);
            }
            main = tape.max_pool2(main);

            let sw = tape.leaf(block.skip.weight.clone().into_dyn());
            let sb = tape.leaf(block.skip.bias.as_ref().expect("skip conv has bias").clone().into_dyn());
            pvars.push(sw);
            pvars.push(sb);
            let mut skip = tape.conv2d(block_input, sw, Some(sb), 0);
            skip = tape.avg_pool2(skip);

            x = tape.add(main, skip);
        }
        let pooled = tape.adaptive_avg_pool(x, self.cfg.pool_t, self.cfg.pool_f);
        let emb = tape.flatten(pooled);
        Ok((emb, pvars))
    }

    /// Eval-mode forward: pure function of (params, input), using running
    /// batch-norm statistics. Returns `(batch, embedding_dim)`.
    pub fn forward_eval(&self, batch: &Array4<F>) -> Result<Array2<F>> {
        let (n, c, h, w) = batch.dim();
        if c != 1 {
            return Err(Error::Shape("input batch must have one channel".into()));
        }
        self.check_input(h, w)?;
        let eps = F::from_f64(self.cfg.bn_eps);
        let slope = F::from_f64(self.cfg.leaky_slope);

        let mut x = batch.clone();
        for block in &self.blocks {
            let mut main = x.clone();
            for i in 0..3 {
                main = f::conv2d_fwd(&main.view(), &block.convs[i].weight.view(), None, 1);
                main = f::bn_fwd(
                    &main.view(),
                    &block.bns[i].running_mean,
                    &block.bns[i].running_var,
                    &block.bns[i].gamma,
                    &block.bns[i].beta,
                    eps,
                );
                main = f::leaky_relu_fwd(&main.view(), slope);
            }
            let (pooled, _) = f::maxpool2_fwd(&main.view());
            let skip = f::conv2d_fwd(
                &x.view(),
                &block.skip.weight.view(),
                block.skip.bias.as_ref(),
                0,
            );
            let skip = f::avgpool2_fwd(&skip.view());
            x = pooled + skip;
        }
        let pooled = f::adaptive_avgpool_fwd(&x.view(), self.cfg.pool_t, self.cfg.pool_f);
        let dim = self.cfg.embedding_dim();
        Ok(pooled
            .into_shape_with_order((n, dim))
            .expect("embedding reshape"))
    }

    /// Embed one `frames x bins` segment in eval mode.
    pub fn embed_segment(&self, segment: &Array2<F>) -> Result<Array1<F>> {
        let (h, w) = segment.dim();
        let batch = segment
            .clone()
            .into_shape_with_order((1, 1, h, w))
            .expect("segment reshape");
        Ok(self.forward_eval(&batch)?.index_axis(Axis(0), 0).to_owned())
    }

    /// Walk trainable parameters in canonical order.
    pub fn for_each_trainable(&self, mut visit: impl FnMut(ArrayViewD<F>)) {
        for block in &self.blocks {
            for i in 0..3 {
                visit(block.convs[i].weight.view().into_dyn());
                visit(block.bns[i].gamma.view().into_dyn());
                visit(block.bns[i].beta.view().into_dyn());
            }
            visit(block.skip.weight.view().into_dyn());
            visit(block.skip.bias.as_ref().expect("skip bias").view().into_dyn());
        }
    }

    pub fn for_each_trainable_mut(&mut self, mut visit: impl FnMut(ArrayViewMutD<F>)) {
        for block in &mut self.blocks {
            for i in 0..3 {
                visit(block.convs[i].weight.view_mut().into_dyn());
                visit(block.bns[i].gamma.view_mut().into_dyn());
                visit(block.bns[i].beta.view_mut().into_dyn());
            }
            visit(block.skip.weight.view_mut().into_dyn());
            visit(block.skip.bias.as_mut().expect("skip bias").view_mut().into_dyn());
        }
    }

    /// Walk batch-norm running statistics in canonical order.
    pub fn for_each_running(&self, mut visit: impl FnMut(ArrayViewD<F>)) {
        for block in &self.blocks {
            for bn in &block.bns {
                visit(bn.running_mean.view().into_dyn());
                visit(bn.running_var.view().into_dyn());
            }
        }
    }

    pub fn for_each_running_mut(&mut self, mut visit: impl FnMut(ArrayViewMutD<F>)) {
        for block in &mut self.blocks {
            for bn in &mut block.bns {
                visit(bn.running_mean.view_mut().into_dyn());
                visit(bn.running_var.view_mut().into_dyn());
            }
        }
    }

    /// Learnable parameter count.
    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.for_each_trainable(|v| n += v.len());
        n
    }

    /// Learnable plus running-statistic floats (the checkpoint payload size).
    pub fn total_count(&self) -> usize {
        let mut n = self.trainable_count();
        self.for_each_running(|v| n += v.len());
        n
    }
}

fn kaiming_conv<F: Scalar>(
    cout: usize,
    cin: usize,
    k: usize,
    gain: f64,
    with_bias: bool,
    rng: &mut impl Rng,
) -> Conv2dParams<F> {
    let fan_in = (cin * k * k) as f64;
    let bound = gain * (3.0 / fan_in).sqrt();
    let weight = Array4::from_shape_simple_fn((cout, cin, k, k), || {
        F::from_f64(rng.random_range(-bound..bound))
    });
    let bias = with_bias.then(|| {
        let b = 1.0 / fan_in.sqrt();
        Array1::from_shape_simple_fn(cout, || F::from_f64(rng.random_range(-b..b)))
    });
    Conv2dParams { weight, bias }
}

fn update_running<F: Scalar>(
    bn: &mut BnParams<F>,
    mean: &Array1<F>,
    var: &Array1<F>,
    momentum: f64,
    dim: (usize, usize, usize, usize),
) {
    let (n, _, h, w) = dim;
    let count = (n * h * w) as f64;
    // unbiased variance for the running estimate
    let correction = if count > 1.5 { count / (count - 1.0) } else { 1.0 };
    let m = F::from_f64(momentum);
    let keep = F::one() - m;
    let corr = F::from_f64(correction);
    for c in 0..bn.running_mean.len() {
        bn.running_mean[c] = keep * bn.running_mean[c] + m * mean[c];
        bn.running_var[c] = keep * bn.running_var[c] + m * var[c] * corr;
    }
}

/// Stack equal-shaped `frames x bins` segments into a (N, 1, frames, bins) batch.
pub fn batch_from_segments<F: Scalar>(segments: &[Array2<F>]) -> Result<Array4<F>> {
    let first = segments
        .first()
        .ok_or_else(|| Error::EmptyInput("no segments to batch".into()))?;
    let (h, w) = first.dim();
    let mut batch = Array4::<F>::zeros((segments.len(), 1, h, w));
    for (i, seg) in segments.iter().enumerate() {
        if seg.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "segment {i} has shape {:?}, expected {:?}",
                seg.dim(),
                (h, w)
            )));
        }
        batch
            .index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(seg);
    }
    Ok(batch)
}
