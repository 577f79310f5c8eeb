//! 3D cross-correlation via im2col + GEMM.

use super::{check_rank, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::parallel;
use crate::scalar::{matmul, matmul_a_bt, matmul_at_b, Scalar};
use crate::tensor::Tensor;

/// Stride and zero padding along (t, h, w).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Conv3dSpec { stride: [1; 3], padding: [0; 3] }
    }
}

/// `floor((input + 2·pad − kernel) / stride) + 1`, or `None` if the padded
/// input is smaller than the kernel.
pub fn conv3d_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    cout: usize,
    ind: [usize; 3],
    k: [usize; 3],
    out: [usize; 3],
    spec: Conv3dSpec,
}

impl Geometry {
    fn in_vol(&self) -> usize {
        self.ind.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
    fn krows(&self) -> usize {
        self.cin * self.k.iter().product::<usize>()
    }

    fn from(x: &[usize], w: &[usize], spec: Conv3dSpec) -> Result<Self> {
        if x[1] != w[1] {
            return Err(Error::dim(
                "conv3d",
                format!("input channels differ: input {x:?}, kernel {w:?}"),
            ));
        }
        if spec.stride.iter().any(|&s| s == 0) {
            return Err(Error::dim("conv3d", "stride components must be >= 1"));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = conv3d_output_extent(x[2 + a], w[2 + a], spec.stride[a], spec.padding[a])
                .ok_or_else(|| {
                    Error::dim(
                        "conv3d",
                        format!("padded input {x:?} smaller than kernel {w:?} on axis {a}"),
                    )
                })?;
        }
        Ok(Geometry {
            cin: x[1],
            cout: w[0],
            ind: [x[2], x[3], x[4]],
            k: [w[2], w[3], w[4]],
            out,
            spec,
        })
    }

    /// For each kernel offset along w, the input column read by each output
    /// column (`usize::MAX` when it falls in the padding).
    fn column_tables(&self) -> Vec<Vec<usize>> {
        let (iw, kw, ow, sw, pw) = (self.ind[2], self.k[2], self.out[2], self.spec.stride[2], self.spec.padding[2]);
        (0..kw)
            .map(|e| {
                (0..ow)
                    .map(|xo| {
                        let xi = (xo * sw + e) as isize - pw as isize;
                        if xi >= 0 && (xi as usize) < iw { xi as usize } else { usize::MAX }
                    })
                    .collect()
            })
            .collect()
    }

    /// Visits every (column-row, output-row) pair of the unfolded matrix:
    /// `f(row_offset_in_cols, Some(input_row_offset) | None, column_table)`.
    fn for_each_row(&self, mut f: impl FnMut(usize, Option<usize>, &[usize])) {
        let [id, ih, iw] = self.ind;
        let [kd, kh, kw] = self.k;
        let [od, oh, ow] = self.out;
        let [sd, sh, _] = self.spec.stride;
        let [pd, ph, _] = self.spec.padding;
        let ov = self.out_vol();
        let tables = self.column_tables();
        let mut row = 0;
        for c in 0..self.cin {
            let cbase = c * id * ih * iw;
            for a in 0..kd {
                for b in 0..kh {
                    for table in tables.iter().take(kw) {
                        let mut p = row * ov;
                        for z in 0..od {
                            let zi = (z * sd + a) as isize - pd as isize;
                            for y in 0..oh {
                                let yi = (y * sh + b) as isize - ph as isize;
                                let valid = zi >= 0 && (zi as usize) < id && yi >= 0 && (yi as usize) < ih;
                                let src = valid.then(|| cbase + ((zi as usize) * ih + yi as usize) * iw);
                                f(p, src, table);
                                p += ow;
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Unfolds one sample `[cin, d, h, w]` into `[krows, out_vol]`.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let ow = self.out[2];
        self.for_each_row(|p, src, table| {
            let dst = &mut cols[p..p + ow];
            match src {
                None => dst.iter_mut().for_each(|v| *v = T::zero()),
                Some(s) => {
                    let line = &x[s..];
                    for (d, &xi) in dst.iter_mut().zip(table) {
                        *d = if xi == usize::MAX { T::zero() } else { line[xi] };
                    }
                }
            }
        });
    }

    /// Adjoint of [`Self::im2col`]: scatters `[krows, out_vol]` back into `dx`.
    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let ow = self.out[2];
        self.for_each_row(|p, src, table| {
            if let Some(s) = src {
                let line = &mut dx[s..];
                for (&v, &xi) in cols[p..p + ow].iter().zip(table) {
                    if xi != usize::MAX {
                        line[xi] += v;
                    }
                }
            }
        });
    }

    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.spec.stride == [1, 1, 1] && self.spec.padding == [0, 0, 0]
    }
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of `[B, C_in, t, h, w]` with `[C_out, C_in, kt, kh, kw]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Option<Var>, spec: Conv3dSpec) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(kernel));
        check_rank("conv3d", x, 5)?;
        check_rank("conv3d", w, 5)?;
        let geo = Geometry::from(x.shape(), w.shape(), spec)?;
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.shape() != [geo.cout] {
                return Err(Error::dim("conv3d", format!("bias shape {:?}, expected [{}]", bt.shape(), geo.cout)));
            }
        }
        let batch = x.shape()[0];
        let (iv, ov, kr) = (geo.cin * geo.in_vol(), geo.cout * geo.out_vol(), geo.krows());
        let xd = x.data();
        let wd = w.data();
        let bd = bias.map(|b| self.value(b).data());
        let parts = parallel::map_chunks(batch, |range| {
            let mut out = vec![T::zero(); range.len() * ov];
            let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); kr * geo.out_vol()] };
            for (slot, b) in range.enumerate() {
                let xs = &xd[b * iv..(b + 1) * iv];
                let ys = &mut out[slot * ov..(slot + 1) * ov];
                let src: &[T] = if geo.is_pointwise() {
                    xs
                } else {
                    geo.im2col(xs, &mut cols);
                    &cols
                };
                matmul(wd, src, ys, geo.cout, kr, geo.out_vol(), false);
                if let Some(bd) = bd {
                    for (co, row) in ys.chunks_mut(geo.out_vol()).enumerate() {
                        row.iter_mut().for_each(|v| *v += bd[co]);
                    }
                }
            }
            out
        });
        let data = parts.concat();
        let shape = [batch, geo.cout, geo.out[0], geo.out[1], geo.out[2]];
        let out = Tensor::from_vec(&shape, data)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.record(out, Op::Conv3d(spec), inputs))
    }
}

pub(super) fn backward<T: Scalar>(
    spec: &Conv3dSpec,
    inputs: &[&Tensor<T>],
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let (x, w) = (inputs[0], inputs[1]);
    let geo = Geometry::from(x.shape(), w.shape(), *spec).expect("validated in forward");
    let batch = x.shape()[0];
    let (iv, ov, kr, vol) = (geo.cin * geo.in_vol(), geo.cout * geo.out_vol(), geo.krows(), geo.out_vol());
    let need_x = needs[0];
    let need_w = needs[1];
    let xd = x.data();
    let wd = w.data();
    let parts = parallel::map_chunks(batch, |range| {
        let mut dx = if need_x { vec![T::zero(); range.len() * iv] } else { Vec::new() };
        let mut dw = if need_w { vec![T::zero(); w.len()] } else { Vec::new() };
        let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { kr * vol }];
        let mut dcols = vec![T::zero(); if need_x && !geo.is_pointwise() { kr * vol } else { 0 }];
        for (slot, b) in range.enumerate() {
            let xs = &xd[b * iv..(b + 1) * iv];
            let gs = &g[b * ov..(b + 1) * ov];
            if need_w {
                let src: &[T] = if geo.is_pointwise() {
                    xs
                } else {
                    geo.im2col(xs, &mut cols);
                    &cols
                };
                matmul_a_bt(gs, src, &mut dw, geo.cout, vol, kr, true);
            }
            if need_x {
                let dxs = &mut dx[slot * iv..(slot + 1) * iv];
                if geo.is_pointwise() {
                    matmul_at_b(wd, gs, dxs, kr, geo.cout, vol, false);
                } else {
                    matmul_at_b(wd, gs, &mut dcols, kr, geo.cout, vol, false);
                    geo.col2im(&dcols, dxs);
                }
            }
        }
        (dx, dw)
    });
    let mut dx_all = Vec::with_capacity(if need_x { x.len() } else { 0 });
    let mut dw_all: Option<Vec<T>> = None;
    for (dx, dw) in parts {
        dx_all.extend(dx);
        if need_w {
            match &mut dw_all {
                None => dw_all = Some(dw),
                Some(acc) => acc.iter_mut().zip(&dw).for_each(|(a, b)| *a += *b),
            }
        }
    }
    let mut out = vec![need_x.then_some(dx_all), dw_all];
    if inputs.len() > 2 && needs[2] {
        let mut db = vec![T::zero(); geo.cout];
        for b in 0..batch {
            for co in 0..geo.cout {
                let s = (b * geo.cout + co) * vol;
                db[co] += g[s..s + vol].iter().fold(T::zero(), |acc, &v| acc + v);
            }
        }
        out.push(Some(db));
    } else if inputs.len() > 2 {
        out.push(None);
    }
    out
}
