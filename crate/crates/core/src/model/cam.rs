//! Class activation maps over the shared feature map.

use std::path::{Path, PathBuf};

use super::{TaskHead, TaskKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `Σ_k W[k, class] · features[:, k]`, min–max normalized per sample to `[0, 1]`.
///
/// A sample whose map has zero range maps to all zeros.
pub fn class_activation_map<T: Scalar>(features: &Tensor<T>, head: &TaskHead<T>, class_id: usize) -> Result<Tensor<T>> {
    let TaskKind::Classification { num_classes } = head.spec().kind else {
        return Err(Error::Contract(format!("head {:?} is not a classification head", head.name())));
    };
    if class_id >= num_classes {
        return Err(Error::Index(format!("class {class_id} outside [0, {num_classes})")));
    }
    let s = features.shape();
    let w = head.weight();
    if s.len() != 5 || s[1] != w.shape()[0] {
        return Err(Error::dim("class_activation_map", format!("features {s:?}, weight {:?}", w.shape())));
    }
    let (b, c) = (s[0], s[1]);
    let vol: usize = s[2..].iter().product();
    let mut out = vec![T::zero(); b * vol];
    for n in 0..b {
        let dst = &mut out[n * vol..(n + 1) * vol];
        for k in 0..c {
            let wk = w.data()[k * num_classes + class_id];
            let src = &features.data()[(n * c + k) * vol..(n * c + k + 1) * vol];
            dst.iter_mut().zip(src).for_each(|(d, &f)| *d += wk * f);
        }
        let lo = dst.iter().copied().fold(T::infinity(), T::min);
        let hi = dst.iter().copied().fold(T::neg_infinity(), T::max);
        let range = hi - lo;
        dst.iter_mut().for_each(|v| *v = if range > T::zero() { (*v - lo) / range } else { T::zero() });
    }
    Tensor::from_vec(&[b, s[2], s[3], s[4]], out)
}

/// Writes one PGM per frame of a single sample's `[l, m, n]` map as
/// `<clip_id>_f<frame>_c<class>.pgm`.
pub fn export_cam_pgm<T: Scalar>(dir: &Path, clip_id: &str, class_id: usize, cam: &Tensor<T>) -> Result<Vec<PathBuf>> {
    let s = cam.shape();
    if s.len() != 3 {
        return Err(Error::dim("export_cam", format!("expected [l, m, n], got {s:?}")));
    }
    let (l, m, n) = (s[0], s[1], s[2]);
    let mut paths = Vec::with_capacity(l);
    for f in 0..l {
        let path = dir.join(format!("{clip_id}_f{f}_c{class_id}.pgm"));
        let vals: Vec<f64> = cam.data()[f * m * n..(f + 1) * m * n].iter().map(|v| v.to_f64_lossy()).collect();
        crate::pgm::write(&path, n, m, &vals)?;
        paths.push(path);
    }
    Ok(paths)
}
