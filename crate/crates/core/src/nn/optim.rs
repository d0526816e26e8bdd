//! SGD with momentum and the exponential-decay learning-rate schedule.

use ndarray::ArrayD;

use super::{Embedder, Scalar};
use crate::{Error, Result};

/// `lr(epoch) = lr0 * decay^floor(epoch / every)`.
pub fn lr_at_epoch(lr0: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    lr0 * decay.powi((epoch / every.max(1)) as i32)
}

/// Classic momentum: `v = mu * v + g; p -= lr * v`.
pub struct SgdMomentum<F: Scalar> {
    momentum: F,
    velocity: Vec<ArrayD<F>>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum { momentum: F::from_f64(momentum), velocity: Vec::new() }
    }

    /// Apply one update. `grads` must be in the embedder's canonical
    /// trainable order. Non-finite gradients abort training.
    pub fn step(&mut self, params: &mut Embedder<F>, grads: &[ArrayD<F>], lr: f64) -> Result<()> {
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingAborted(format!(
                    "non-finite gradient in parameter tensor {i}"
                )));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        if self.velocity.len() != grads.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} tensors, got {} gradients",
                self.velocity.len(),
                grads.len()
            )));
        }
        let lr = F::from_f64(lr);
        let mu = self.momentum;
        let mut idx = 0;
        params.for_each_trainable_mut(|mut p| {
            let v = &mut self.velocity[idx];
            let g = &grads[idx];
            debug_assert_eq!(p.shape(), g.shape());
            ndarray::Zip::from(v.view_mut()).and(g.view()).for_each(|v, &g| {
                *v = mu * *v + g;
            });
            ndarray::Zip::from(&mut p).and(v.view()).for_each(|p, &v| {
                *p -= lr * v;
            });
            idx += 1;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{batch_from_segments, EmbedderConfig, Tape};
    use crate::rng::substream;
    use ndarray::Array2;

    #[test]
    fn schedule_matches_reported_values() {
        assert_eq!(lr_at_epoch(0.001, 0.65, 10, 0), 0.001);
        assert_eq!(lr_at_epoch(0.001, 0.65, 10, 10), 0.001 * 0.65f64.powi(1));
        assert_eq!(lr_at_epoch(0.001, 0.65, 10, 25), 0.001 * 0.65f64.powi(2));
        // decimal values as reported
        assert!((lr_at_epoch(0.001, 0.65, 10, 10) - 0.00065).abs() < 1e-15);
        assert!((lr_at_epoch(0.001, 0.65, 10, 25) - 0.0004225).abs() < 1e-15);
        // boundary epochs of each decade
        assert_eq!(lr_at_epoch(0.001, 0.65, 10, 9), 0.001);
        assert_eq!(lr_at_epoch(0.001, 0.65, 10, 20), 0.001 * 0.65f64.powi(2));
    }

    #[test]
    fn zero_gradient_zero_momentum_leaves_params_unchanged() {
        let mut rng = substream(5, "init");
        let cfg = EmbedderConfig { in_bins: 6, channels: [2, 2, 2], pool_t: 2, pool_f: 2, ..EmbedderConfig::default() };
        let mut emb = crate::nn::Embedder::<f64>::init(cfg, &mut rng).unwrap();
        let before: Vec<ArrayD<f64>> = {
            let mut v = Vec::new();
            emb.for_each_trainable(|p| v.push(p.to_owned()));
            v
        };
        let zeros: Vec<ArrayD<f64>> = before.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        let mut opt = SgdMomentum::new(0.0);
        opt.step(&mut emb, &zeros, 0.1).unwrap();
        let mut i = 0;
        emb.for_each_trainable(|p| {
            assert_eq!(p.to_owned(), before[i]);
            i += 1;
        });
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut rng = substream(5, "init");
        let cfg = EmbedderConfig { in_bins: 6, channels: [2, 2, 2], pool_t: 2, pool_f: 2, ..EmbedderConfig::default() };
        let mut emb = crate::nn::Embedder::<f64>::init(cfg, &mut rng).unwrap();
        let mut grads: Vec<ArrayD<f64>> = Vec::new();
        emb.for_each_trainable(|p| grads.push(ArrayD::zeros(p.raw_dim())));
        grads[0][[0, 0, 0, 0].as_slice()] = f64::NAN;
        let mut opt = SgdMomentum::new(0.9);
        assert!(matches!(
            opt.step(&mut emb, &grads, 0.1),
            Err(Error::TrainingAborted(_))
        ));
    }

    #[test]
    fn single_step_descends_on_quadratic_proxy() {
        // One SGD step on the squared-embedding objective reduces it.
        let mut rng = substream(9, "init");
        let cfg = EmbedderConfig { in_bins: 6, channels: [2, 2, 2], pool_t: 2, pool_f: 2, ..EmbedderConfig::default() };
        let mut emb = crate::nn::Embedder::<f64>::init(cfg, &mut rng).unwrap();
        let seg = Array2::from_shape_fn((8, 6), |(i, j)| ((i * 6 + j) as f64 * 0.13).sin());
        let batch = batch_from_segments(&[seg]).unwrap();

        let loss_of = |emb: &mut crate::nn::Embedder<f64>| {
            let mut tape = Tape::new();
            let (e, pvars) = emb.forward_train(&mut tape, batch.clone()).unwrap();
            let l = tape.sum_sq(e);
            (tape.scalar(l), tape, l, pvars)
        };

        let (before, tape, l, pvars) = loss_of(&mut emb);
        let grads_map = tape.backward(l);
        let grads: Vec<ArrayD<f64>> = {
            let mut v = Vec::new();
            let mut i = 0;
            emb.for_each_trainable(|p| {
                v.push(grads_map.get_or_zeros(pvars[i], p.shape()));
                i += 1;
            });
            v
        };
        let mut opt = SgdMomentum::new(0.0);
        opt.step(&mut emb, &grads, 1e-3).unwrap();
        let (after, ..) = loss_of(&mut emb);
        assert!(after < before, "{after} !< {before}");
    }
}
