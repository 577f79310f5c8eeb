//! Differentiable spatial-to-numerical transform and the coordinate loss.
//!
//! Heatmaps are `[B, P, l, m, n]`: one `m × n` map per sample, point and frame.
//! After a joint softmax over `(m, n)` each map is a distribution whose
//! expectation over a cell-centered grid in `(-1, 1)` is the predicted point.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A heatmap stack living in a graph.
#[derive(Clone, Copy, Debug)]
pub struct HeatmapStack {
    pub values: Var,
    pub normalized: bool,
}

impl HeatmapStack {
    pub fn raw(values: Var) -> Self {
        HeatmapStack { values, normalized: false }
    }
}

/// Cell-centered coordinate matrices: `X[i][j] = (2j − n + 1)/n`, `Y[i][j] = (2i − m + 1)/m`
/// with zero-based `i, j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid<T> {
    pub m: usize,
    pub n: usize,
    pub x: Vec<T>,
    pub y: Vec<T>,
}

pub fn grid_value(index: usize, extent: usize) -> f64 {
    (2.0 * index as f64 + 1.0 - extent as f64) / extent as f64
}

pub fn coordinate_grid<T: Scalar>(m: usize, n: usize) -> Result<CoordinateGrid<T>> {
    if m < 2 || n < 2 {
        return Err(Error::dim("coordinate_grid", format!("heatmap must be at least 2×2, got {m}×{n}")));
    }
    let mut x = Vec::with_capacity(m * n);
    let mut y = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            x.push(T::from_f64_lossy(grid_value(j, n)));
            y.push(T::from_f64_lossy(grid_value(i, m)));
        }
    }
    Ok(CoordinateGrid { m, n, x, y })
}

/// Per-frame, per-point coordinates in `[-1, 1]` with a validity mask.
/// Storage is frame-major: entry `t * num_points + p`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateTrack {
    pub num_points: usize,
    pub points: Vec<[f32; 2]>,
    pub valid: Vec<bool>,
}

impl CoordinateTrack {
    pub fn new(num_points: usize, points: Vec<[f32; 2]>, valid: Vec<bool>) -> Result<Self> {
        if num_points == 0 || points.len() % num_points != 0 || points.len() != valid.len() {
            return Err(Error::dim(
                "coordinate_track",
                format!("{} points, {} flags for {num_points} points per frame", points.len(), valid.len()),
            ));
        }
        let bad = points
            .iter()
            .zip(&valid)
            .any(|(p, &v)| v && !p.iter().all(|c| c.is_finite() && (-1.0..=1.0).contains(c)));
        if bad {
            return Err(Error::Contract("valid coordinates must be finite and inside [-1, 1]".into()));
        }
        Ok(CoordinateTrack { num_points, points, valid })
    }

    pub fn frames(&self) -> usize {
        self.points.len() / self.num_points
    }

    pub fn point(&self, t: usize, p: usize) -> [f32; 2] {
        self.points[t * self.num_points + p]
    }

    pub fn is_valid(&self, t: usize, p: usize) -> bool {
        self.valid[t * self.num_points + p]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Selects frames by index (used for clip sampling).
    pub fn select_frames(&self, frames: &[usize]) -> Self {
        let mut points = Vec::with_capacity(frames.len() * self.num_points);
        let mut valid = Vec::with_capacity(points.capacity());
        for &t in frames {
            for p in 0..self.num_points {
                points.push(self.point(t, p));
                valid.push(self.is_valid(t, p));
            }
        }
        CoordinateTrack { num_points: self.num_points, points, valid }
    }

    /// Aligns a track of `T` input frames with `l` feature frames: feature frame
    /// `t` takes input frame `floor(t·T/l)`, the center of a stride-aligned window.
    pub fn resample(&self, l: usize) -> Self {
        let total = self.frames();
        let frames: Vec<usize> = (0..l).map(|t| (t * total / l).min(total - 1)).collect();
        self.select_frames(&frames)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoordLossConfig {
    /// Weight of the Euclidean term; `1 − lambda` weighs the divergence term.
    pub lambda: f64,
    /// Standard deviation of the target Gaussian in normalized units.
    /// `None` means one heatmap cell, `2 / max(m, n)`.
    pub sigma: Option<f64>,
}

impl Default for CoordLossConfig {
    fn default() -> Self {
        CoordLossConfig { lambda: 0.5, sigma: None }
    }
}

impl CoordLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::Config(format!("sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn sigma_for(&self, m: usize, n: usize) -> f64 {
        self.sigma.unwrap_or(2.0 / m.max(n) as f64)
    }
}

fn heatmap_dims<T: Scalar>(g: &Graph<T>, hm: &HeatmapStack) -> Result<[usize; 5]> {
    let s = g.shape(hm.values);
    if s.len() != 5 {
        return Err(Error::dim("heatmap", format!("expected [B, P, l, m, n], got {s:?}")));
    }
    if s[3] < 2 || s[4] < 2 {
        return Err(Error::dim("heatmap", format!("maps must be at least 2×2, got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

/// Softmax jointly over `(m, n)` of every `(b, p, t)` slice.
pub fn normalize_heatmap<T: Scalar>(g: &mut Graph<T>, raw: HeatmapStack) -> Result<HeatmapStack> {
    if raw.normalized {
        return Err(Error::Contract("heatmap is already normalized".into()));
    }
    heatmap_dims(g, &raw)?;
    let values = g.softmax(raw.values, 2)?;
    Ok(HeatmapStack { values, normalized: true })
}

/// Expected `(x, y)` of every slice: `[B, P, l, 2]`.
pub fn dsnt<T: Scalar>(g: &mut Graph<T>, hm: &HeatmapStack) -> Result<Var> {
    if !hm.normalized {
        return Err(Error::Contract("dsnt needs a normalized heatmap".into()));
    }
    let [_, _, _, m, n] = heatmap_dims(g, hm)?;
    let grid = coordinate_grid::<T>(m, n)?;
    g.dsnt_expectation(hm.values, &grid.x, &grid.y)
}

/// Isotropic Gaussian centred at `center`, sampled at the cell centres and
/// renormalized to sum to one.
pub fn gaussian_target<T: Scalar>(center: [f64; 2], sigma: f64, m: usize, n: usize) -> Result<Vec<T>> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    if center.iter().any(|c| !c.is_finite() || c.abs() > 1.0) {
        return Err(Error::Contract(format!("target centre {center:?} outside [-1, 1]")));
    }
    let grid = coordinate_grid::<f64>(m, n)?;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let expo: Vec<f64> = grid
        .x
        .iter()
        .zip(&grid.y)
        .map(|(&x, &y)| -((x - center[0]).powi(2) + (y - center[1]).powi(2)) * inv)
        .collect();
    let top = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = expo.iter().map(|e| (e - top).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| T::from_f64_lossy(v / s)).collect())
}

/// Jensen–Shannon divergence with natural logarithms; lies in `[0, ln 2]`.
pub fn js_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::dim("js_divergence", format!("{} vs {} entries", p.len(), q.len())));
    }
    if p.iter().chain(q).any(|&v| v < T::zero()) {
        return Err(Error::Contract("distributions must be nonnegative".into()));
    }
    Ok(crate::autograd::js_slice(p, q))
}

/// Scalar graph nodes of one coordinate loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CoordLoss {
    /// `lambda · euclidean + (1 − lambda) · regularizer`.
    pub total: Var,
    /// Mean Euclidean distance over valid entries.
    pub euclidean: Var,
    /// Mean JS divergence to the Gaussian target over valid entries.
    pub regularizer: Var,
}

/// Blended coordinate loss averaged over valid `(p, t)` entries of every sample.
///
/// `gt[b]` must hold `l` frames of `P` points. Entries flagged invalid add
/// nothing to the value or the gradient.
pub fn coord_loss<T: Scalar>(
    g: &mut Graph<T>,
    hm: &HeatmapStack,
    gt: &[CoordinateTrack],
    cfg: &CoordLossConfig,
) -> Result<CoordLoss> {
    cfg.validate()?;
    let [b, p, l, m, n] = heatmap_dims(g, hm)?;
    if gt.len() != b || gt.iter().any(|t| t.num_points != p || t.frames() != l) {
        return Err(Error::dim(
            "coord_loss",
            format!("ground truth does not match heatmap [{b}, {p}, {l}, {m}, {n}]"),
        ));
    }
    let sigma = cfg.sigma_for(m, n);
    let cells = m * n;
    let mut mask = Vec::with_capacity(b * p * l);
    let mut coords = Vec::with_capacity(2 * b * p * l);
    let mut targets = Vec::with_capacity(b * p * l * cells);
    for track in gt {
        for pi in 0..p {
            for t in 0..l {
                let valid = track.is_valid(t, pi);
                mask.push(valid);
                if valid {
                    let c = track.point(t, pi);
                    coords.extend([T::from_f32(c[0]).expect("finite"), T::from_f32(c[1]).expect("finite")]);
                    targets.extend(gaussian_target::<T>([c[0] as f64, c[1] as f64], sigma, m, n)?);
                } else {
                    coords.extend([T::zero(), T::zero()]);
                    targets.extend(std::iter::repeat(T::one() / T::from_usize_lossy(cells)).take(cells));
                }
            }
        }
    }
    if !mask.iter().any(|&v| v) {
        return Err(Error::EmptySupervision);
    }
    let pred = dsnt(g, hm)?;
    let dist = g.euclid_to_target(pred, coords)?;
    let euclidean = g.masked_mean(dist, &mask)?;
    let js = g.js_to_target(hm.values, targets, 2)?;
    let regularizer = g.masked_mean(js, &mask)?;
    let lambda = T::from_f64_lossy(cfg.lambda);
    let a = g.scalar_mul(euclidean, lambda);
    let r = g.scalar_mul(regularizer, T::one() - lambda);
    let total = g.add(a, r)?;
    Ok(CoordLoss { total, euclidean, regularizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{relative_error, FD_STEP, REL_TOL};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn heatmap_from(g: &mut Graph<f64>, shape: [usize; 5], data: Vec<f64>, normalized: bool) -> HeatmapStack {
        let v = g.leaf(Tensor::from_vec(&shape, data).unwrap());
        HeatmapStack { values: v, normalized }
    }

    fn coords(g: &mut Graph<f64>, shape: [usize; 5], data: Vec<f64>) -> Vec<f64> {
        let hm = heatmap_from(g, shape, data, true);
        let c = dsnt(g, &hm).unwrap();
        g.value(c).data().to_vec()
    }

    #[test]
    fn grid_formula() {
        let g2 = coordinate_grid::<f64>(2, 2).unwrap();
        assert_eq!(&g2.x[..2], &[-0.5, 0.5]);
        let g4 = coordinate_grid::<f64>(3, 4).unwrap();
        assert_eq!(&g4.x[..4], &[-0.75, -0.25, 0.25, 0.75]);
        // uniform-spacing oracle: n equal cells over [-1, 1], take midpoints
        for n in 2..9 {
            let grid = coordinate_grid::<f64>(2, n).unwrap();
            for j in 0..n {
                let lo = -1.0 + 2.0 * j as f64 / n as f64;
                let hi = -1.0 + 2.0 * (j + 1) as f64 / n as f64;
                assert!((grid.x[j] - 0.5 * (lo + hi)).abs() < 1e-15);
            }
        }
        assert!(matches!(coordinate_grid::<f64>(1, 4), Err(Error::Dimension { .. })));
        assert!(matches!(coordinate_grid::<f64>(4, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn grid_is_antisymmetric_and_constant_along_copies() {
        let grid = coordinate_grid::<f64>(5, 6).unwrap();
        for i in 0..5 {
            let row = &grid.x[i * 6..(i + 1) * 6];
            assert_eq!(row, &grid.x[..6]);
            for j in 0..6 {
                assert_eq!(row[j], -row[5 - j]);
                if j > 0 {
                    assert!(row[j] > row[j - 1]);
                }
                assert!(row[j] > -1.0 && row[j] < 1.0);
            }
        }
        for j in 0..6 {
            for i in 0..5 {
                assert_eq!(grid.y[i * 6 + j], grid.y[i * 6]);
                assert_eq!(grid.y[i * 6], -grid.y[(4 - i) * 6]);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let mut g = Graph::<f64>::new();
        let hm = heatmap_from(&mut g, [1, 1, 1, 2, 2], vec![0.0; 4], false);
        let n = normalize_heatmap(&mut g, hm).unwrap();
        assert!(g.value(n.values).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert!(matches!(normalize_heatmap(&mut g, n), Err(Error::Contract(_))));

        let mut data = vec![0.0; 9];
        data[4] = 1000.0;
        let hm = heatmap_from(&mut g, [1, 1, 1, 3, 3], data, false);
        let n = normalize_heatmap(&mut g, hm).unwrap();
        assert!((g.value(n.values).data()[4] - 1.0).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw: Vec<f64> = (0..2 * 12).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let hm = heatmap_from(&mut g, [1, 1, 2, 3, 4], raw.clone(), false);
        let n = normalize_heatmap(&mut g, hm).unwrap();
        for (slice, out) in raw.chunks(12).zip(g.value(n.values).data().chunks(12)) {
            let z: f64 = slice.iter().map(|v| v.exp()).sum();
            for (r, o) in slice.iter().zip(out) {
                assert!((r.exp() / z - o).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dsnt_examples() {
        let mut g = Graph::<f64>::new();
        assert_eq!(coords(&mut g, [1, 1, 1, 2, 2], vec![0.25; 4]), vec![0.0, 0.0]);
        assert_eq!(coords(&mut g, [1, 1, 1, 2, 2], vec![0.0, 1.0, 0.0, 0.0]), vec![0.5, -0.5]);
        assert_eq!(coords(&mut g, [1, 1, 1, 2, 4], vec![0.5, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0]), vec![0.0, -0.5]);

        let hm = heatmap_from(&mut g, [1, 1, 1, 2, 2], vec![0.25; 4], false);
        assert!(matches!(dsnt(&mut g, &hm), Err(Error::Contract(_))));
    }

    #[test]
    fn gaussian_target_examples() {
        let t = gaussian_target::<f64>([0.25, -0.75], 0.02, 4, 4).unwrap();
        assert!(t[2] > 0.99);
        assert!(matches!(gaussian_target::<f64>([0.0, 0.0], 0.0, 4, 4), Err(Error::Config(_))));
        let t = gaussian_target::<f64>([0.0, 0.0], 0.3, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                // 90° rotation maps (i, j) to (j, 3 - i)
                assert!((t[i * 4 + j] - t[j * 4 + 3 - i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn js_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert!((js_divergence(&a, &b).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(js_divergence(&[-0.1, 1.1], &a), Err(Error::Contract(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let mut p: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut q: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
            p.iter_mut().for_each(|v| *v /= sp);
            q.iter_mut().for_each(|v| *v /= sq);
            let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
            let kl = |x: &[f64]| x.iter().zip(&m).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
            let oracle = 0.5 * kl(&p) + 0.5 * kl(&q);
            assert!((js_divergence(&p, &q).unwrap() - oracle).abs() < 1e-7);
        }
    }

    fn track(points: Vec<[f32; 2]>, valid: Vec<bool>) -> CoordinateTrack {
        CoordinateTrack::new(1, points, valid).unwrap()
    }

    #[test]
    fn coord_loss_on_rasterized_target_is_discretization_only() {
        let (m, n) = (8, 8);
        let cfg = CoordLossConfig { lambda: 1.0, sigma: None };
        let c = [0.3f32, -0.45];
        let target = gaussian_target::<f64>([c[0] as f64, c[1] as f64], cfg.sigma_for(m, n), m, n).unwrap();
        let mut g = Graph::<f64>::new();
        let hm = heatmap_from(&mut g, [1, 1, 1, m, n], target, true);
        let loss = coord_loss(&mut g, &hm, &[track(vec![c], vec![true])], &cfg).unwrap();
        let pred = dsnt(&mut g, &hm).unwrap();
        let p = g.value(pred).data().to_vec();
        let residual = ((p[0] - c[0] as f64).powi(2) + (p[1] - c[1] as f64).powi(2)).sqrt();
        let value = g.value(loss.total).item();
        assert!((value - residual).abs() < 1e-6);
        assert!(value <= 0.02, "{value}");
    }

    #[test]
    fn coord_loss_blends_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let raw: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let hm = heatmap_from(&mut g, [1, 1, 3, 4, 4], raw, false);
        let hm = normalize_heatmap(&mut g, hm).unwrap();
        let gt = track(vec![[0.1, 0.2], [-0.5, 0.9], [0.0, -0.3]], vec![true, true, false]);
        let loss = coord_loss(&mut g, &hm, &[gt.clone()], &CoordLossConfig::default()).unwrap();
        let (t, e, r) = (g.value(loss.total).item(), g.value(loss.euclidean).item(), g.value(loss.regularizer).item());
        assert_eq!(t, 0.5 * e + 0.5 * r);

        // separately computed halves
        let probs = g.value(hm.values).data().to_vec();
        let grid = coordinate_grid::<f64>(4, 4).unwrap();
        let mut euc = 0.0;
        let mut reg = 0.0;
        for f in 0..2 {
            let z = &probs[f * 16..(f + 1) * 16];
            let x: f64 = z.iter().zip(&grid.x).map(|(a, b)| a * b).sum();
            let y: f64 = z.iter().zip(&grid.y).map(|(a, b)| a * b).sum();
            let c = gt.point(f, 0);
            euc += ((x - c[0] as f64).powi(2) + (y - c[1] as f64).powi(2)).sqrt();
            let q = gaussian_target::<f64>([c[0] as f64, c[1] as f64], 0.5, 4, 4).unwrap();
            reg += js_divergence(z, &q).unwrap();
        }
        assert!((e - euc / 2.0).abs() < 1e-12);
        assert!((r - reg / 2.0).abs() < 1e-12);
    }

    #[test]
    fn coord_loss_single_valid_frame_and_empty_supervision() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let raw: Vec<f64> = (0..3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = CoordLossConfig::default();
        let mut g = Graph::<f64>::new();
        let hm = heatmap_from(&mut g, [1, 1, 3, 3, 3], raw.clone(), false);
        let hm = normalize_heatmap(&mut g, hm).unwrap();
        let gt = track(vec![[0.9, 0.9], [0.2, -0.1], [-0.4, 0.4]], vec![false, true, false]);
        let all = coord_loss(&mut g, &hm, &[gt], &cfg).unwrap();

        let mut g2 = Graph::<f64>::new();
        let hm2 = heatmap_from(&mut g2, [1, 1, 1, 3, 3], raw[9..18].to_vec(), false);
        let hm2 = normalize_heatmap(&mut g2, hm2).unwrap();
        let single = coord_loss(&mut g2, &hm2, &[track(vec![[0.2, -0.1]], vec![true])], &cfg).unwrap();
        assert!((g.value(all.total).item() - g2.value(single.total).item()).abs() < 1e-12);

        let none = track(vec![[0.0, 0.0]; 3], vec![false; 3]);
        assert!(matches!(coord_loss(&mut g, &hm, &[none], &cfg), Err(Error::EmptySupervision)));
    }

    #[test]
    fn coord_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let shape = [2, 2, 2, 3, 4];
        let raw: Vec<f64> = (0..96).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tracks = Vec::new();
        for _ in 0..2 {
            let pts: Vec<[f32; 2]> = (0..4).map(|_| [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)]).collect();
            tracks.push(CoordinateTrack::new(2, pts, vec![true, false, true, true]).unwrap());
        }
        let cfg = CoordLossConfig::default();
        let eval = |data: &[f64], grad: bool| {
            let mut g = Graph::<f64>::new();
            let v = g.leaf(Tensor::from_vec(&shape, data.to_vec()).unwrap().with_requires_grad(true));
            let hm = normalize_heatmap(&mut g, HeatmapStack::raw(v)).unwrap();
            let loss = coord_loss(&mut g, &hm, &tracks, &cfg).unwrap();
            if grad {
                g.backward(loss.total).unwrap();
            }
            (g.value(loss.total).item(), g.grad(v).unwrap().to_vec())
        };
        let (_, analytic) = eval(&raw, true);
        for i in 0..raw.len() {
            let mut plus = raw.clone();
            plus[i] += FD_STEP;
            let mut minus = raw.clone();
            minus[i] -= FD_STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            assert!(relative_error(analytic[i], numeric) < REL_TOL, "{i}: {} vs {numeric}", analytic[i]);
        }
    }

    #[test]
    fn resample_takes_stride_aligned_frames() {
        let pts: Vec<[f32; 2]> = (0..16).map(|t| [t as f32 / 16.0, 0.0]).collect();
        let t = CoordinateTrack::new(1, pts, vec![true; 16]).unwrap();
        let r = t.resample(8);
        assert_eq!(r.frames(), 8);
        assert_eq!(r.point(3, 0)[0], 6.0 / 16.0);
    }

    proptest! {
        #[test]
        fn dsnt_stays_in_open_box(m in 2usize..6, n in 2usize..6, seed in any::<u64>(), spike in 0usize..36) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut raw: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            raw[spike % (m * n)] += 40.0;
            let mut g = Graph::<f64>::new();
            let hm = heatmap_from(&mut g, [1, 1, 1, m, n], raw, false);
            let hm = normalize_heatmap(&mut g, hm).unwrap();
            let c = dsnt(&mut g, &hm).unwrap();
            for &v in g.value(c).data() {
                prop_assert!(v > -1.0 && v < 1.0);
            }
        }

        #[test]
        fn one_cell_translation_shifts_by_grid_step(m in 2usize..7, n in 2usize..7, i in 0usize..7, j in 0usize..7) {
            let (i, j) = (i % m, j % n);
            let mut g = Graph::<f64>::new();
            let at = |g: &mut Graph<f64>, r: usize, c: usize| {
                let mut d = vec![0.0; m * n];
                d[r * n + c] = 1.0;
                coords(g, [1, 1, 1, m, n], d)
            };
            let base = at(&mut g, i, j);
            if j + 1 < n {
                let moved = at(&mut g, i, j + 1);
                prop_assert!((moved[0] - base[0] - 2.0 / n as f64).abs() < 1e-12);
                prop_assert_eq!(moved[1], base[1]);
            }
            if i + 1 < m {
                let moved = at(&mut g, i + 1, j);
                prop_assert!((moved[1] - base[1] - 2.0 / m as f64).abs() < 1e-12);
                prop_assert_eq!(moved[0], base[0]);
            }
        }

        #[test]
        fn coord_loss_ignores_frame_order(seed in any::<u64>(), shift in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = 4;
            let raw: Vec<f64> = (0..l * 9).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let pts: Vec<[f32; 2]> = (0..l).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            let valid: Vec<bool> = (0..l).map(|_| rng.gen_bool(0.7)).collect();
            prop_assume!(valid.iter().any(|&v| v));
            let value = |order: &[usize]| {
                let data: Vec<f64> = order.iter().flat_map(|&t| raw[t * 9..(t + 1) * 9].to_vec()).collect();
                let tr = CoordinateTrack::new(1, order.iter().map(|&t| pts[t]).collect(), order.iter().map(|&t| valid[t]).collect()).unwrap();
                let mut g = Graph::<f64>::new();
                let hm = heatmap_from(&mut g, [1, 1, l, 3, 3], data, false);
                let hm = normalize_heatmap(&mut g, hm).unwrap();
                let loss = coord_loss(&mut g, &hm, &[tr], &CoordLossConfig::default()).unwrap();
                g.value(loss.total).item()
            };
            let ident: Vec<usize> = (0..l).collect();
            let rotated: Vec<usize> = (0..l).map(|t| (t + shift) % l).collect();
            prop_assert!((value(&ident) - value(&rotated)).abs() < 1e-12);
        }
    }
}
