//! Pointwise, reduction, pooling, linear and loss-building operations.

use super::{check_rank, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::{matmul, matmul_a_bt, matmul_at_b, Scalar};
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let out = Tensor::from_vec(t.shape(), data).expect("same shape");
        self.record(out, Op::Relu, vec![x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.record(out, Op::Add, vec![a, b]))
    }

    pub fn scalar_mul(&mut self, x: Var, k: T) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * k).collect();
        let out = Tensor::from_vec(t.shape(), data).expect("same shape");
        self.record(out, Op::ScalarMul(k), vec![x])
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.record(Tensor::scalar(s), Op::Sum, vec![x])
    }

    /// Mean over every axis after the first two: `[B, C, ...] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 3 {
            return Err(Error::dim("global_avg_pool", format!("expected [B, C, ...], got {:?}", t.shape())));
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        let inner: usize = t.shape()[2..].iter().product();
        let n = T::from_usize_lossy(inner);
        let data = t
            .data()
            .chunks(inner)
            .map(|row| row.iter().fold(T::zero(), |a, &v| a + v) / n)
            .collect();
        let out = Tensor::from_vec(&[b, c], data)?;
        Ok(self.record(out, Op::GlobalAvgPool, vec![x]))
    }

    /// Unpadded max pooling over (t, h, w). Ties resolve to the first index.
    pub fn max_pool3d(&mut self, x: Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let t = self.value(x);
        check_rank("max_pool3d", t, 5)?;
        let s = t.shape();
        let mut out_ext = [0; 3];
        for a in 0..3 {
            out_ext[a] = super::conv3d_output_extent(s[2 + a], kernel[a], stride[a], 0).ok_or_else(|| {
                Error::dim("max_pool3d", format!("kernel {kernel:?} / stride {stride:?} invalid for {s:?}"))
            })?;
        }
        let (bc, [d, h, w]) = (s[0] * s[1], [s[2], s[3], s[4]]);
        let [od, oh, ow] = out_ext;
        let mut data = Vec::with_capacity(bc * od * oh * ow);
        let mut argmax = Vec::with_capacity(data.capacity());
        let xd = t.data();
        for p in 0..bc {
            let base = p * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut best = None::<(T, usize)>;
                        for a in 0..kernel[0] {
                            for b in 0..kernel[1] {
                                for e in 0..kernel[2] {
                                    let i = base + ((z * stride[0] + a) * h + y * stride[1] + b) * w + xo * stride[2] + e;
                                    if best.map_or(true, |(v, _)| xd[i] > v) {
                                        best = Some((xd[i], i));
                                    }
                                }
                            }
                        }
                        let (v, i) = best.expect("non-empty window");
                        data.push(v);
                        argmax.push(i);
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[s[0], s[1], od, oh, ow], data)?;
        Ok(self.record(out, Op::MaxPool3d { argmax }, vec![x]))
    }

    /// `x·W + b` with `x: [B, F]`, `W: [F, K]`, `b: [K]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(weight), self.value(bias));
        check_rank("linear", tx, 2)?;
        check_rank("linear", tw, 2)?;
        let (b, f, k) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
        if tw.shape()[0] != f || tb.shape() != [k] {
            return Err(Error::dim(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let mut data: Vec<T> = (0..b).flat_map(|_| tb.data().iter().copied()).collect();
        matmul(tx.data(), tw.data(), &mut data, b, f, k, true);
        let out = Tensor::from_vec(&[b, k], data)?;
        Ok(self.record(out, Op::Linear, vec![x, weight, bias]))
    }

    /// Softmax jointly over the trailing `axes` axes.
    pub fn softmax(&mut self, x: Var, axes: usize) -> Result<Var> {
        let group = trailing_group("softmax", self.value(x), axes)?;
        let t = self.value(x);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(group) {
            softmax_in_place(row);
        }
        let out = Tensor::from_vec(t.shape(), data)?;
        Ok(self.record(out, Op::Softmax { group }, vec![x]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let group = trailing_group("log_softmax", self.value(x), 1)?;
        let t = self.value(x);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(group) {
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = m + row.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let out = Tensor::from_vec(t.shape(), data)?;
        Ok(self.record(out, Op::LogSoftmax { group }, vec![x]))
    }

    /// Mean over rows of `-x[row, label]` for `x: [B, K]`.
    pub fn nll(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(log_probs);
        check_rank("nll", t, 2)?;
        let (b, k) = (t.shape()[0], t.shape()[1]);
        if labels.len() != b {
            return Err(Error::dim("nll", format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Index(format!("label {l} of sample {i} outside [0, {k})")));
        }
        let s = labels.iter().enumerate().fold(T::zero(), |a, (i, &l)| a - t.data()[i * k + l]);
        let out = Tensor::scalar(s / T::from_usize_lossy(b));
        Ok(self.record(out, Op::Nll { labels: labels.to_vec() }, vec![log_probs]))
    }

    /// Expected grid position of each `[.., m, n]` slice: output `[.., 2]` as (x, y).
    pub fn dsnt_expectation(&mut self, probs: Var, grid_x: &[T], grid_y: &[T]) -> Result<Var> {
        let t = self.value(probs);
        let group = trailing_group("dsnt", t, 2)?;
        if grid_x.len() != group || grid_y.len() != group {
            return Err(Error::dim("dsnt", format!("grid of {} cells for slices of {group}", grid_x.len())));
        }
        let mut data = Vec::with_capacity(2 * t.len() / group);
        for row in t.data().chunks(group) {
            let x = row.iter().zip(grid_x).fold(T::zero(), |a, (&p, &g)| a + p * g);
            let y = row.iter().zip(grid_y).fold(T::zero(), |a, (&p, &g)| a + p * g);
            data.push(x);
            data.push(y);
        }
        let mut shape = t.shape()[..t.rank() - 2].to_vec();
        shape.push(2);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.record(
            out,
            Op::Dsnt { grid_x: grid_x.to_vec(), grid_y: grid_y.to_vec() },
            vec![probs],
        ))
    }

    /// Per-slice Jensen–Shannon divergence between distributions over the
    /// trailing `axes` axes of `p` and a constant `target` of the same size.
    pub fn js_to_target(&mut self, p: Var, target: Vec<T>, axes: usize) -> Result<Var> {
        let t = self.value(p);
        let group = trailing_group("js_divergence", t, axes)?;
        if target.len() != t.len() {
            return Err(Error::dim("js_divergence", format!("target has {} values, input {}", target.len(), t.len())));
        }
        let data: Vec<T> = t
            .data()
            .chunks(group)
            .zip(target.chunks(group))
            .map(|(pr, qr)| js_slice(pr, qr))
            .collect();
        let shape = if t.rank() > axes { t.shape()[..t.rank() - axes].to_vec() } else { vec![1] };
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.record(out, Op::JsToTarget { target, group }, vec![p]))
    }

    /// Per-point Euclidean distance from `[.., 2]` coordinates to a constant target.
    pub fn euclid_to_target(&mut self, coords: Var, target: Vec<T>) -> Result<Var> {
        let t = self.value(coords);
        if t.shape().last() != Some(&2) || target.len() != t.len() {
            return Err(Error::dim("euclidean", format!("coords {:?}, target of {}", t.shape(), target.len())));
        }
        let data = t
            .data()
            .chunks(2)
            .zip(target.chunks(2))
            .map(|(c, g)| ((c[0] - g[0]) * (c[0] - g[0]) + (c[1] - g[1]) * (c[1] - g[1])).sqrt())
            .collect();
        let shape = if t.rank() > 1 { t.shape()[..t.rank() - 1].to_vec() } else { vec![1] };
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.record(out, Op::EuclidToTarget { target }, vec![coords]))
    }

    /// Mean over entries whose mask is set.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(Error::dim("masked_mean", format!("mask of {} for {} values", mask.len(), t.len())));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptySupervision);
        }
        let s = t.data().iter().zip(mask).filter(|(_, &m)| m).fold(T::zero(), |a, (&v, _)| a + v);
        let out = Tensor::scalar(s / T::from_usize_lossy(count));
        Ok(self.record(out, Op::MaskedMean { mask: mask.to_vec() }, vec![x]))
    }
}

impl<T: Scalar> Graph<T> {
    /// `Σ x ⊙ weights` as a `[1]` tensor.
    pub fn dot_const(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.len() {
            return Err(Error::dim("dot_const", format!("{} weights for {} values", weights.len(), t.len())));
        }
        let s = t.data().iter().zip(&weights).fold(T::zero(), |a, (&v, &w)| a + v * w);
        Ok(self.record(Tensor::scalar(s), Op::DotConst { weights }, vec![x]))
    }
}

fn trailing_group<T: Scalar>(op: &'static str, t: &Tensor<T>, axes: usize) -> Result<usize> {
    if axes == 0 || axes > t.rank() {
        return Err(Error::dim(op, format!("axis count {axes} out of range for shape {:?}", t.shape())));
    }
    Ok(t.shape()[t.rank() - axes..].iter().product())
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / s);
}

fn xlogy_ratio<T: Scalar>(a: T, mix: T) -> T {
    if a <= T::zero() {
        T::zero()
    } else {
        a * (a / mix).ln()
    }
}

/// `½ KL(p‖m) + ½ KL(q‖m)`, `m = ½(p + q)`.
pub(crate) fn js_slice<T: Scalar>(p: &[T], q: &[T]) -> T {
    let half = T::from_f64_lossy(0.5);
    p.iter().zip(q).fold(T::zero(), |acc, (&a, &b)| {
        let m = half * (a + b);
        if m <= T::zero() {
            acc
        } else {
            acc + half * (xlogy_ratio(a, m) + xlogy_ratio(b, m))
        }
    })
}

pub(super) fn backward<T: Scalar>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let x = inputs[0];
    match op {
        Op::Relu => vec![Some(x.data().iter().zip(g).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect())],
        Op::Add => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())],
        Op::ScalarMul(k) => vec![Some(g.iter().map(|&d| d * *k).collect())],
        Op::Sum => vec![Some(vec![g[0]; x.len()])],
        Op::GlobalAvgPool => {
            let inner: usize = x.shape()[2..].iter().product();
            let n = T::from_usize_lossy(inner);
            let mut dx = Vec::with_capacity(x.len());
            for &d in g {
                dx.extend(std::iter::repeat(d / n).take(inner));
            }
            vec![Some(dx)]
        }
        Op::MaxPool3d { argmax } => {
            let mut dx = vec![T::zero(); x.len()];
            for (&i, &d) in argmax.iter().zip(g) {
                dx[i] += d;
            }
            vec![Some(dx)]
        }
        Op::Linear => {
            let (w, b, f, k) = (inputs[1], x.shape()[0], x.shape()[1], inputs[1].shape()[1]);
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); b * f];
                matmul_a_bt(g, w.data(), &mut dx, b, k, f, false);
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![T::zero(); f * k];
                matmul_at_b(x.data(), g, &mut dw, f, b, k, false);
                dw
            });
            let db = needs[2].then(|| {
                let mut db = vec![T::zero(); k];
                for row in g.chunks(k) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                db
            });
            vec![dx, dw, db]
        }
        Op::Softmax { group } => {
            let mut dx = vec![T::zero(); x.len()];
            for ((y, d), o) in output.data().chunks(*group).zip(g.chunks(*group)).zip(dx.chunks_mut(*group)) {
                let dot = y.iter().zip(d).fold(T::zero(), |a, (&yy, &dd)| a + yy * dd);
                for i in 0..*group {
                    o[i] = y[i] * (d[i] - dot);
                }
            }
            vec![Some(dx)]
        }
        Op::LogSoftmax { group } => {
            let mut dx = vec![T::zero(); x.len()];
            for ((y, d), o) in output.data().chunks(*group).zip(g.chunks(*group)).zip(dx.chunks_mut(*group)) {
                let s = d.iter().fold(T::zero(), |a, &v| a + v);
                for i in 0..*group {
                    o[i] = d[i] - y[i].exp() * s;
                }
            }
            vec![Some(dx)]
        }
        Op::Nll { labels } => {
            let k = x.shape()[1];
            let mut dx = vec![T::zero(); x.len()];
            let scale = g[0] / T::from_usize_lossy(labels.len());
            for (i, &l) in labels.iter().enumerate() {
                dx[i * k + l] = -scale;
            }
            vec![Some(dx)]
        }
        Op::Dsnt { grid_x, grid_y } => {
            let group = grid_x.len();
            let mut dx = vec![T::zero(); x.len()];
            for (o, d) in dx.chunks_mut(group).zip(g.chunks(2)) {
                for i in 0..group {
                    o[i] = d[0] * grid_x[i] + d[1] * grid_y[i];
                }
            }
            vec![Some(dx)]
        }
        Op::JsToTarget { target, group } => {
            // dJS/dp_i = ½ ln(2 p_i / (p_i + q_i))
            let half = T::from_f64_lossy(0.5);
            let two = T::from_f64_lossy(2.0);
            let tiny = T::min_positive_value();
            let mut dx = vec![T::zero(); x.len()];
            for ((o, p), (q, &d)) in dx
                .chunks_mut(*group)
                .zip(x.data().chunks(*group))
                .zip(target.chunks(*group).zip(g))
            {
                for i in 0..*group {
                    let pi = p[i].max(tiny);
                    o[i] = d * half * (two * pi / (pi + q[i])).ln();
                }
            }
            vec![Some(dx)]
        }
        Op::EuclidToTarget { target } => {
            let mut dx = vec![T::zero(); x.len()];
            for (((o, c), t), (&dist, &d)) in dx
                .chunks_mut(2)
                .zip(x.data().chunks(2))
                .zip(target.chunks(2))
                .zip(output.data().iter().zip(g))
            {
                if dist > T::zero() {
                    o[0] = d * (c[0] - t[0]) / dist;
                    o[1] = d * (c[1] - t[1]) / dist;
                }
            }
            vec![Some(dx)]
        }
        Op::MaskedMean { mask } => {
            let count = T::from_usize_lossy(mask.iter().filter(|&&m| m).count());
            vec![Some(mask.iter().map(|&m| if m { g[0] / count } else { T::zero() }).collect())]
        }
        Op::DotConst { weights } => vec![Some(weights.iter().map(|&w| w * g[0]).collect())],
        Op::Leaf | Op::Conv3d(_) | Op::BatchNorm(_) => unreachable!("dispatched elsewhere"),
    }
}
