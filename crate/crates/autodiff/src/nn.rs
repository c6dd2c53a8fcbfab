//! Differentiable primitives for convolutional and attention networks.
//!
//! Image tensors are NCHW and contiguous.

use ndarray::{s, Array2, ArrayView2, Axis, Ix2, Ix3, IxDyn, Zip};

use crate::tape::{Array, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ow` whose input column `ow * stride + kj - pad` lies
/// inside `0..w`.
fn valid_cols(w: usize, wo: usize, kj: usize, g: ConvGeometry) -> std::ops::Range<usize> {
    let lo = if g.pad > kj {
        (g.pad - kj).div_ceil(g.stride)
    } else {
        0
    };
    let hi = if w + g.pad > kj {
        ((w - 1 + g.pad - kj) / g.stride + 1).min(wo)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Unfolds one CHW sample into a `[C*k*k, Ho*Wo]` matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry) -> Array2<f64> {
    let (ho, wo) = g.output_size(h, w);
    let k = g.kernel;
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    let out = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut out[row * ho * wo..(row + 1) * ho * wo];
                let cols = valid_cols(w, wo, kj, g);
                if cols.is_empty() {
                    continue;
                }
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    let d = &mut dst[oh * wo + cols.start..oh * wo + cols.end];
                    let first = cols.start * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        d.copy_from_slice(&src[first..first + d.len()]);
                    } else {
                        for (i, v) in d.iter_mut().enumerate() {
                            *v = src[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulating into `dx`.
fn col2im(cols: &Array2<f64>, dx: &mut [f64], c: usize, h: usize, w: usize, g: ConvGeometry) {
    let (ho, wo) = g.output_size(h, w);
    let k = g.kernel;
    let cols = cols.as_standard_layout();
    let src_all = cols.as_slice().unwrap();
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &src_all[row * ho * wo..(row + 1) * ho * wo];
                let valid = valid_cols(w, wo, kj, g);
                if valid.is_empty() {
                    continue;
                }
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let s = &src[oh * wo + valid.start..oh * wo + valid.end];
                    let first = valid.start * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (i, v) in s.iter().enumerate() {
                            dst[first + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn sample_matrix(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry) -> Array2<f64> {
    if g.is_pointwise() {
        ArrayView2::from_shape((c, h * w), x)
            .expect("pointwise view")
            .to_owned()
    } else {
        im2col(x, c, h, w, g)
    }
}

fn dims4(shape: &[usize], what: &str) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "{what}: expected NCHW, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation of NCHW `self` with `[Co, Ci, k, k]` weights.
    pub fn conv2d(self, weight: Var<'t>, g: ConvGeometry) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let (n, c, h, wd) = dims4(x.shape(), "conv2d input");
        let (co, ci, kh, kw) = dims4(w.shape(), "conv2d weight");
        assert_eq!(c, ci, "conv2d: channel mismatch");
        assert!(kh == g.kernel && kw == g.kernel, "conv2d: kernel mismatch");
        let (ho, wo) = g.output_size(h, wd);
        let x = if x.is_standard_layout() {
            x
        } else {
            std::rc::Rc::new(x.as_standard_layout().into_owned())
        };
        let w2 = w
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((co, ci * kh * kw))
            .unwrap();
        let xs = x.as_slice().unwrap();
        let mut out = Array::zeros(IxDyn(&[n, co, ho, wo]));
        {
            let out_s = out.as_slice_mut().unwrap();
            for b in 0..n {
                let cols = sample_matrix(&xs[b * c * h * wd..(b + 1) * c * h * wd], c, h, wd, g);
                let y = w2.dot(&cols);
                out_s[b * co * ho * wo..(b + 1) * co * ho * wo]
                    .copy_from_slice(y.as_slice().unwrap());
            }
        }
        let need_x = self.requires_grad();
        let need_w = weight.requires_grad();
        self.tape.record(out, &[self, weight], move |gout| {
            let gout = gout.as_standard_layout();
            let gs = gout.as_slice().unwrap();
            let xs = x.as_slice().unwrap();
            let mut dw2 = Array2::<f64>::zeros((co, ci * kh * kw));
            let mut dx = need_x.then(|| vec![0.0; n * c * h * wd]);
            for b in 0..n {
                let gy = ArrayView2::from_shape((co, ho * wo), &gs[b * co * ho * wo..(b + 1) * co * ho * wo])
                    .unwrap();
                if need_w {
                    let cols =
                        sample_matrix(&xs[b * c * h * wd..(b + 1) * c * h * wd], c, h, wd, g);
                    ndarray::linalg::general_mat_mul(1.0, &gy, &cols.t(), 1.0, &mut dw2);
                }
                if let Some(dx) = dx.as_mut() {
                    let dcols = w2.t().dot(&gy);
                    let dst = &mut dx[b * c * h * wd..(b + 1) * c * h * wd];
                    if g.is_pointwise() {
                        for (d, v) in dst.iter_mut().zip(dcols.iter()) {
                            *d += v;
                        }
                    } else {
                        col2im(&dcols, dst, c, h, wd, g);
                    }
                }
            }
            let dx = dx.map(|v| Array::from_shape_vec(IxDyn(&[n, c, h, wd]), v).unwrap());
            let dw = need_w.then(|| {
                dw2.into_shape_with_order(IxDyn(&[co, ci, kh, kw]))
                    .unwrap()
            });
            vec![dx, dw]
        })
    }

    /// Average pooling over non-overlapping `f x f` windows.
    pub fn avg_pool(self, f: usize) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(x.shape(), "avg_pool");
        assert!(h % f == 0 && w % f == 0, "avg_pool: {h}x{w} not divisible by {f}");
        let value = avg_pool_array(&x, f);
        self.tape.record(value, &[self], move |g| {
            let scale = 1.0 / (f * f) as f64;
            let mut dx = upsample_nearest_array(g, f);
            dx.mapv_inplace(|v| v * scale);
            debug_assert_eq!(dx.shape(), &[n, c, h, w]);
            vec![Some(dx)]
        })
    }

    /// Nearest-neighbour upsampling: every element is copied into an `f x f` block.
    pub fn upsample_nearest(self, f: usize) -> Var<'t> {
        let x = self.value();
        let value = upsample_nearest_array(&x, f);
        self.tape.record(value, &[self], move |g| {
            let mut dx = avg_pool_array(g, f);
            dx.mapv_inplace(|v| v * (f * f) as f64);
            vec![Some(dx)]
        })
    }

    /// Standardizes each row of a 2-D value to zero mean and unit variance.
    pub fn standardize_rows(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let x2 = x
            .view()
            .into_dimensionality::<Ix2>()
            .expect("standardize_rows needs a 2-D value");
        let (rows, len) = x2.dim();
        let mut y = Array2::<f64>::zeros((rows, len));
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = x2.row(r);
            let mean = row.sum() / len as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in y.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * is;
            }
        }
        let y_keep = y.clone();
        self.tape.record(y.into_dyn(), &[self], move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = Array2::<f64>::zeros((rows, len));
            for r in 0..rows {
                let gr = g2.row(r);
                let yr = y_keep.row(r);
                let mg = gr.sum() / len as f64;
                let mgy = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / len as f64;
                for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr.iter()).zip(yr.iter()) {
                    *d = inv_std[r] * (gv - mg - yv * mgy);
                }
            }
            vec![Some(dx.into_dyn())]
        })
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Var<'t> {
        let x = self.value();
        let y = softmax_array(&x, axis);
        let y_keep = y.clone();
        self.tape.record(y, &[self], move |g| {
            let mut dx = Array::zeros(g.raw_dim());
            Zip::from(dx.lanes_mut(Axis(axis)))
                .and(g.lanes(Axis(axis)))
                .and(y_keep.lanes(Axis(axis)))
                .for_each(|mut d, gl, yl| {
                    let dot: f64 = gl.iter().zip(yl.iter()).map(|(a, b)| a * b).sum();
                    for ((dv, &gv), &yv) in d.iter_mut().zip(gl.iter()).zip(yl.iter()) {
                        *dv = yv * (gv - dot);
                    }
                });
            vec![Some(dx)]
        })
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(self, axis: usize) -> Var<'t> {
        let x = self.value();
        let p = softmax_array(&x, axis);
        let mut y = Array::zeros(x.raw_dim());
        Zip::from(y.lanes_mut(Axis(axis)))
            .and(x.lanes(Axis(axis)))
            .for_each(|mut yl, xl| {
                let m = xl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + xl.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                for (o, &v) in yl.iter_mut().zip(xl.iter()) {
                    *o = v - lse;
                }
            });
        self.tape.record(y, &[self], move |g| {
            let mut dx = Array::zeros(g.raw_dim());
            Zip::from(dx.lanes_mut(Axis(axis)))
                .and(g.lanes(Axis(axis)))
                .and(p.lanes(Axis(axis)))
                .for_each(|mut d, gl, pl| {
                    let total: f64 = gl.sum();
                    for ((dv, &gv), &pv) in d.iter_mut().zip(gl.iter()).zip(pl.iter()) {
                        *dv = gv - pv * total;
                    }
                });
            vec![Some(dx)]
        })
    }

    /// Matrix product. Both operands 2-D, or both 3-D with a shared batch axis.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        match (a.ndim(), b.ndim()) {
            (2, 2) => {
                let a2 = a.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let b2 = b.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let value = a2.dot(&b2).into_dyn();
                self.tape.record(value, &[self, other], move |g| {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    vec![
                        Some(g2.dot(&b2.t()).into_dyn()),
                        Some(a2.t().dot(&g2).into_dyn()),
                    ]
                })
            }
            (3, 3) => {
                let a3 = a.view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let b3 = b.view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let (bn, m, k) = a3.dim();
                let (bn2, k2, nn) = b3.dim();
                assert!(bn == bn2 && k == k2, "matmul: shapes {:?} {:?}", a3.dim(), b3.dim());
                let mut out = ndarray::Array3::<f64>::zeros((bn, m, nn));
                for i in 0..bn {
                    out.slice_mut(s![i, .., ..])
                        .assign(&a3.slice(s![i, .., ..]).dot(&b3.slice(s![i, .., ..])));
                }
                self.tape.record(out.into_dyn(), &[self, other], move |g| {
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let mut da = ndarray::Array3::<f64>::zeros((bn, m, k));
                    let mut db = ndarray::Array3::<f64>::zeros((bn, k, nn));
                    for i in 0..bn {
                        let gi = g3.slice(s![i, .., ..]);
                        da.slice_mut(s![i, .., ..])
                            .assign(&gi.dot(&b3.slice(s![i, .., ..]).t()));
                        db.slice_mut(s![i, .., ..])
                            .assign(&a3.slice(s![i, .., ..]).t().dot(&gi));
                    }
                    vec![Some(da.into_dyn()), Some(db.into_dyn())]
                })
            }
            (x, y) => panic!("matmul: unsupported ranks {x} and {y}"),
        }
    }

    /// Swaps the last two axes of a 3-D value.
    pub fn transpose_last(self) -> Var<'t> {
        assert_eq!(self.shape().len(), 3, "transpose_last needs a 3-D value");
        self.permute(&[0, 2, 1])
    }

    /// Row lookup: `out[i] = self[indices[i]]` for a 2-D table.
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t> {
        let table = self.value();
        let t2 = table.view().into_dimensionality::<Ix2>().expect("gather_rows table");
        let (rows, width) = t2.dim();
        let mut out = Array2::<f64>::zeros((indices.len(), width));
        for (i, &j) in indices.iter().enumerate() {
            assert!(j < rows, "gather_rows: index {j} out of {rows}");
            out.row_mut(i).assign(&t2.row(j));
        }
        let indices = indices.to_vec();
        self.tape.record(out.into_dyn(), &[self], move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dt = Array2::<f64>::zeros((rows, width));
            for (i, &j) in indices.iter().enumerate() {
                let mut row = dt.row_mut(j);
                row += &g2.row(i);
            }
            vec![Some(dt.into_dyn())]
        })
    }
}

pub fn softmax_array(x: &Array, axis: usize) -> Array {
    let mut y = Array::zeros(x.raw_dim());
    Zip::from(y.lanes_mut(Axis(axis)))
        .and(x.lanes(Axis(axis)))
        .for_each(|mut yl, xl| {
            let m = xl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in yl.iter_mut().zip(xl.iter()) {
                *o = (v - m).exp();
                total += *o;
            }
            yl.mapv_inplace(|v| v / total);
        });
    y
}

pub fn avg_pool_array(x: &Array, f: usize) -> Array {
    let (n, c, h, w) = dims4(x.shape(), "avg_pool");
    let (ho, wo) = (h / f, w / f);
    let scale = 1.0 / (f * f) as f64;
    let x = x.as_standard_layout();
    let src = x.as_slice().unwrap();
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let sp = &src[plane * h * w..(plane + 1) * h * w];
        let dp = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for i in 0..h {
            let row = &sp[i * w..(i + 1) * w];
            let drow = &mut dp[(i / f) * wo..(i / f + 1) * wo];
            for (j, &v) in row.iter().enumerate() {
                drow[j / f] += v * scale;
            }
        }
    }
    Array::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap()
}

pub fn upsample_nearest_array(x: &Array, f: usize) -> Array {
    let (n, c, h, w) = dims4(x.shape(), "upsample");
    let (ho, wo) = (h * f, w * f);
    let x = x.as_standard_layout();
    let src = x.as_slice().unwrap();
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let sp = &src[plane * h * w..(plane + 1) * h * w];
        let dp = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for i in 0..ho {
            let row = &sp[(i / f) * w..(i / f + 1) * w];
            for (j, d) in dp[i * wo..(i + 1) * wo].iter_mut().enumerate() {
                *d = row[j / f];
            }
        }
    }
    Array::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap()
}
