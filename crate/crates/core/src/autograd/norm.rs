//! Per-channel batch normalization over `[B, C, ...]`.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

/// Exponential moving averages of per-channel batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// False until the first training-mode update.
    pub tracked: bool,
    /// While set, updates form a plain average over this many batches so far
    /// instead of the moving average.
    pub averaging: Option<usize>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels], tracked: false, averaging: None }
    }

    fn update(&mut self, mean: &[T], var: &[T]) {
        let m = match self.averaging.as_mut() {
            Some(k) => {
                *k += 1;
                T::from_usize_lossy(*k - 1) / T::from_usize_lossy(*k)
            }
            None => T::from_f64_lossy(BN_MOMENTUM),
        };
        let rest = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(mean) {
            *r = m * *r + rest * b;
        }
        for (r, &b) in self.var.iter_mut().zip(var) {
            *r = m * *r + rest * b;
        }
        self.tracked = true;
    }
}

pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics and fold them into `stats`.
    Train(&'a mut RunningStats<T>),
    /// Normalize with the stored running statistics.
    Eval(&'a RunningStats<T>),
}

pub(crate) struct BnSaved<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn batchnorm3d(&mut self, input: Var, scale: Var, shift: Var, mode: BatchNormMode<'_, T>) -> Result<Var> {
        let x = self.value(input);
        if x.rank() < 3 {
            return Err(Error::dim("batchnorm3d", format!("expected [B, C, ...], got {:?}", x.shape())));
        }
        let (batch, ch) = (x.shape()[0], x.shape()[1]);
        let inner: usize = x.shape()[2..].iter().product();
        for v in [scale, shift] {
            if self.value(v).shape() != [ch] {
                return Err(Error::dim(
                    "batchnorm3d",
                    format!("affine shape {:?}, expected [{ch}]", self.value(v).shape()),
                ));
            }
        }
        let count = batch * inner;
        let eps = T::from_f64_lossy(BN_EPSILON);
        let xd = x.data();
        let (mean, var, train) = match &mode {
            BatchNormMode::Train(_) => {
                if count < 2 {
                    return Err(Error::Contract("batchnorm3d train mode needs B·l·m·n >= 2".into()));
                }
                let n = T::from_usize_lossy(count);
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                for c in 0..ch {
                    let mut s = T::zero();
                    for b in 0..batch {
                        let o = (b * ch + c) * inner;
                        s = xd[o..o + inner].iter().fold(s, |a, &v| a + v);
                    }
                    let mu = s / n;
                    let mut q = T::zero();
                    for b in 0..batch {
                        let o = (b * ch + c) * inner;
                        q = xd[o..o + inner].iter().fold(q, |a, &v| a + (v - mu) * (v - mu));
                    }
                    mean[c] = mu;
                    var[c] = q / n;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval(stats) => {
                if !stats.tracked {
                    return Err(Error::Config("batchnorm3d eval mode before any running statistics exist".into()));
                }
                (stats.mean.clone(), stats.var.clone(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let o = (b * ch + c) * inner;
                for i in o..o + inner {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gamma[c] * h + beta[c];
                }
            }
        }
        let out = Tensor::from_vec(x.shape(), out)?;
        if let BatchNormMode::Train(stats) = mode {
            stats.update(&mean, &var);
        }
        Ok(self.record(out, Op::BatchNorm(BnSaved { xhat, inv_std, train }), vec![input, scale, shift]))
    }
}

pub(super) fn backward<T: Scalar>(
    saved: &BnSaved<T>,
    inputs: &[&Tensor<T>],
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let x = inputs[0];
    let gamma = inputs[1].data();
    let (batch, ch) = (x.shape()[0], x.shape()[1]);
    let inner: usize = x.shape()[2..].iter().product();
    let n = T::from_usize_lossy(batch * inner);
    let mut sum_g = vec![T::zero(); ch];
    let mut sum_gx = vec![T::zero(); ch];
    for b in 0..batch {
        for c in 0..ch {
            let o = (b * ch + c) * inner;
            for i in o..o + inner {
                sum_g[c] += g[i];
                sum_gx[c] += g[i] * saved.xhat[i];
            }
        }
    }
    let dx = needs[0].then(|| {
        let mut dx = vec![T::zero(); x.len()];
        for b in 0..batch {
            for c in 0..ch {
                let o = (b * ch + c) * inner;
                let k = gamma[c] * saved.inv_std[c];
                for i in o..o + inner {
                    dx[i] = if saved.train {
                        k * (g[i] - sum_g[c] / n - saved.xhat[i] * sum_gx[c] / n)
                    } else {
                        k * g[i]
                    };
                }
            }
        }
        dx
    });
    vec![dx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
}
