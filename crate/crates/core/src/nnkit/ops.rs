//! Forward and backward kernels for every differentiable op in the kit.
//!
//! All kernels are pure functions of their inputs. Shapes are (batch, channels, height, width);
//! convolution kernels are stored as (out_channels, in_channels, k, k).

use crate::error::{Error, Result};
use crate::nnkit::tensor::{Real, Tensor};

/// Output extent of a strided window op: `floor((n + 2 * pad - k) / stride) + 1`.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::contract("stride must be >= 1"));
    }
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::contract(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Real>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [cout, cin, kh, kw] = w.shape();
        if kh != kw {
            return Err(Error::contract("only square kernels are supported"));
        }
        if x.channels() != cin {
            return Err(Error::contract(format!(
                "conv2d expects {cin} input channels, got {}",
                x.channels()
            )));
        }
        if let Some(b) = b {
            if b.len() != cout {
                return Err(Error::contract(format!(
                    "conv2d bias has {} entries for {cout} output channels",
                    b.len()
                )));
            }
        }
        let (h, wd) = x.hw();
        Ok(ConvGeom {
            cin,
            cout,
            k: kh,
            stride,
            pad,
            h,
            w: wd,
            ho: conv_out_dim(h, kh, stride, pad)?,
            wo: conv_out_dim(wd, kh, stride, pad)?,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let npix = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let npix = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, w, b, stride, pad)?;
    let n = x.batch();
    let npix = g.ho * g.wo;
    let rows = g.col_rows();
    let mut out = Tensor::zeros([n, g.cout, g.ho, g.wo]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * npix]
    };
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * npix;
    for bi in 0..n {
        let xs = &x.data()[bi * in_per..(bi + 1) * in_per];
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut col);
            &col
        };
        let os = &mut out.data_mut()[bi * out_per..(bi + 1) * out_per];
        if let Some(b) = b {
            for (co, chunk) in os.chunks_mut(npix).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        T::gemm(
            g.cout,
            rows,
            npix,
            T::one(),
            w.data(),
            rows as isize,
            1,
            cols,
            npix as isize,
            1,
            T::one(),
            os,
            npix as isize,
            1,
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(x, w, None, stride, pad)?;
    let n = x.batch();
    let npix = g.ho * g.wo;
    let rows = g.col_rows();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([g.cout, 1, 1, 1]);
    let mut col = vec![T::zero(); rows * npix];
    let mut dcol = vec![T::zero(); rows * npix];
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * npix;
    for bi in 0..n {
        let xs = &x.data()[bi * in_per..(bi + 1) * in_per];
        let ds = &dout.data()[bi * out_per..(bi + 1) * out_per];
        for (co, chunk) in ds.chunks(npix).enumerate() {
            db.data_mut()[co] += chunk.iter().copied().sum();
        }
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut col);
            &col
        };
        // dW += dout · col^T
        T::gemm(
            g.cout,
            npix,
            rows,
            T::one(),
            ds,
            npix as isize,
            1,
            cols,
            1,
            npix as isize,
            T::one(),
            dw.data_mut(),
            rows as isize,
            1,
        );
        // dcol = W^T · dout
        let dxs = &mut dx.data_mut()[bi * in_per..(bi + 1) * in_per];
        if g.is_pointwise() {
            T::gemm(
                rows,
                g.cout,
                npix,
                T::one(),
                w.data(),
                1,
                rows as isize,
                ds,
                npix as isize,
                1,
                T::zero(),
                dxs,
                npix as isize,
                1,
            );
        } else {
            T::gemm(
                rows,
                g.cout,
                npix,
                T::one(),
                w.data(),
                1,
                rows as isize,
                ds,
                npix as isize,
                1,
                T::zero(),
                &mut dcol,
                npix as isize,
                1,
            );
            col2im(&g, &dcol, dxs);
        }
    }
    Ok((dx, dw, db))
}

/// 2x2 stride-2 max pooling with ceil output size; partial windows at odd edges take the max
/// of the cells that exist. Returns the pooled map and the flat source index of every output.
pub fn maxpool2x2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut arg = Vec::with_capacity(out.len());
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = x.index(b, ch, 2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                        if y < h && xx < w {
                            let i = x.index(b, ch, y, xx);
                            if x.data()[i] > x.data()[best] {
                                best = i;
                            }
                        }
                    }
                    let o = out.index(b, ch, oy, ox);
                    out.data_mut()[o] = x.data()[best];
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

/// Routes each output gradient back to the cell that won its pooling window.
pub fn scatter_argmax<T: Real>(shape: [usize; 4], arg: &[usize], dout: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(shape);
    for (&src, &g) in arg.iter().zip(dout.data()) {
        if src != usize::MAX {
            dx.data_mut()[src] += g;
        }
    }
    dx
}

/// Source taps for one output coordinate of a 2x bilinear upsample with half-pixel centers:
/// output `o` samples input position `(o + 0.5) / 2 - 0.5`, clamped to the valid range.
fn upsample_taps(o: usize, n: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear 2x upsampling (half-pixel-centers convention, edge clamped).
pub fn bilinear_upsample2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let ys: Vec<_> = (0..2 * h).map(|o| upsample_taps(o, h)).collect();
    let xs: Vec<_> = (0..2 * w).map(|o| upsample_taps(o, w)).collect();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for b in 0..n {
        for ch in 0..c {
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                let ly = T::lit(ly);
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let lx = T::lit(lx);
                    let top = x.at(b, ch, y0, x0) * (T::one() - lx) + x.at(b, ch, y0, x1) * lx;
                    let bot = x.at(b, ch, y1, x0) * (T::one() - lx) + x.at(b, ch, y1, x1) * lx;
                    out.set(b, ch, oy, ox, top * (T::one() - ly) + bot * ly);
                }
            }
        }
    }
    out
}

pub fn bilinear_upsample2x_backward<T: Real>(shape: [usize; 4], dout: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = shape;
    let ys: Vec<_> = (0..2 * h).map(|o| upsample_taps(o, h)).collect();
    let xs: Vec<_> = (0..2 * w).map(|o| upsample_taps(o, w)).collect();
    let mut dx = Tensor::zeros(shape);
    for b in 0..n {
        for ch in 0..c {
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                let ly = T::lit(ly);
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let lx = T::lit(lx);
                    let g = dout.at(b, ch, oy, ox);
                    let d = dx.data_mut();
                    let base = (b * c + ch) * h;
                    d[(base + y0) * w + x0] += g * (T::one() - ly) * (T::one() - lx);
                    d[(base + y0) * w + x1] += g * (T::one() - ly) * lx;
                    d[(base + y1) * w + x0] += g * ly * (T::one() - lx);
                    d[(base + y1) * w + x1] += g * ly * lx;
                }
            }
        }
    }
    dx
}

/// Resizes the spatial extent by appending zero rows/columns at the bottom/right or by
/// dropping trailing ones. Cells present in both shapes are copied unchanged.
pub fn pad_or_crop<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, xh, xw] = x.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    let (ch_, cw) = (xh.min(h), xw.min(w));
    for b in 0..n {
        for ch in 0..c {
            for y in 0..ch_ {
                let src = x.index(b, ch, y, 0);
                let dst = out.index(b, ch, y, 0);
                out.data_mut()[dst..dst + cw].copy_from_slice(&x.data()[src..src + cw]);
            }
        }
    }
    out
}

/// Appends `pad_bottom` zero rows and `pad_right` zero columns.
pub fn zero_pad<T: Real>(x: &Tensor<T>, pad_right: usize, pad_bottom: usize) -> Tensor<T> {
    pad_or_crop(x, x.height() + pad_bottom, x.width() + pad_right)
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::contract(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for bi in 0..n {
        data.extend_from_slice(&a.data()[bi * ca * plane..(bi + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    Tensor::from_vec([n, ca + cb, h, w], data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Real>(d: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = d.shape();
    let cb = c - ca;
    let plane = h * w;
    let mut da = Vec::with_capacity(n * ca * plane);
    let mut db = Vec::with_capacity(n * cb * plane);
    for bi in 0..n {
        let base = bi * c * plane;
        da.extend_from_slice(&d.data()[base..base + ca * plane]);
        db.extend_from_slice(&d.data()[base + ca * plane..base + c * plane]);
    }
    (
        Tensor::from_vec([n, ca, h, w], da).expect("split shape"),
        Tensor::from_vec([n, cb, h, w], db).expect("split shape"),
    )
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// ReLU followed by division by the per-sample maximum, mapping each sample into [0, 1].
/// Returns the output and, per sample, the flat index of the max (or `None` when all zero).
pub fn relu_max_norm<T: Real>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<Option<usize>>) {
    let per = x.channels() * x.height() * x.width();
    let mut out = relu(x);
    let mut arg = Vec::with_capacity(x.batch());
    for b in 0..x.batch() {
        let s = &mut out.data_mut()[b * per..(b + 1) * per];
        let (mut best, mut m) = (None, T::zero());
        for (i, &v) in s.iter().enumerate() {
            if v > m {
                m = v;
                best = Some(b * per + i);
            }
        }
        let denom = m + eps;
        for v in s.iter_mut() {
            *v = *v / denom;
        }
        arg.push(best);
    }
    (out, arg)
}

pub fn relu_max_norm_backward<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    arg: &[Option<usize>],
    eps: T,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let per = x.channels() * x.height() * x.width();
    let mut dx = Tensor::zeros(x.shape());
    for b in 0..x.batch() {
        let range = b * per..(b + 1) * per;
        let m = arg[b].map(|i| x.data()[i]).unwrap_or(T::zero());
        let denom = m + eps;
        let mut dm = T::zero();
        for i in range.clone() {
            if x.data()[i] > T::zero() {
                dx.data_mut()[i] += dy.data()[i] / denom;
            }
            dm -= dy.data()[i] * y.data()[i] / denom;
        }
        if let Some(i) = arg[b] {
            dx.data_mut()[i] += dm;
        }
    }
    dx
}

/// Fully connected layer: treats `x` as (rows, features) and `w` as (out, features).
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let rows = x.batch();
    let fin = x.len() / rows.max(1);
    let fout = w.batch();
    if w.len() != fout * fin || b.len() != fout {
        return Err(Error::contract(format!(
            "linear layer {:?} cannot consume {fin} features",
            w.shape()
        )));
    }
    let mut out = Tensor::zeros([rows, fout, 1, 1]);
    for r in 0..rows {
        out.data_mut()[r * fout..(r + 1) * fout].copy_from_slice(b.data());
    }
    T::gemm(
        rows,
        fin,
        fout,
        T::one(),
        x.data(),
        fin as isize,
        1,
        w.data(),
        1,
        fin as isize,
        T::one(),
        out.data_mut(),
        fout as isize,
        1,
    );
    Ok(out)
}

pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let rows = x.batch();
    let fin = x.len() / rows.max(1);
    let fout = w.batch();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([fout, 1, 1, 1]);
    for r in 0..rows {
        for (o, d) in db.data_mut().iter_mut().enumerate() {
            *d += dout.data()[r * fout + o];
        }
    }
    // dx = dout · W
    T::gemm(
        rows,
        fout,
        fin,
        T::one(),
        dout.data(),
        fout as isize,
        1,
        w.data(),
        fin as isize,
        1,
        T::zero(),
        dx.data_mut(),
        fin as isize,
        1,
    );
    // dW = dout^T · x
    T::gemm(
        fout,
        rows,
        fin,
        T::one(),
        dout.data(),
        1,
        fout as isize,
        x.data(),
        fin as isize,
        1,
        T::zero(),
        dw.data_mut(),
        fin as isize,
        1,
    );
    (dx, dw, db)
}

/// Max ROI pooling of regions given in image pixels on a feature map with the given stride.
///
/// Region corners are rounded to feature cells; each region is split into `out x out` bins of
/// equal (fractional) size and every bin takes the max over the cells it touches. Bins that fall
/// entirely outside the map output 0. Returns (rois, channels, out, out) plus argmax indices.
pub fn roi_pool<T: Real>(
    feature: &Tensor<T>,
    rois: &[[f64; 4]],
    stride: f64,
    out: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if feature.batch() != 1 {
        return Err(Error::contract("roi_pool expects a single feature map"));
    }
    let [_, c, h, w] = feature.shape();
    let scale = 1.0 / stride;
    let mut pooled = Tensor::zeros([rois.len(), c, out, out]);
    let mut arg = vec![usize::MAX; pooled.len()];
    for (r, roi) in rois.iter().enumerate() {
        let sx = (roi[0] * scale).round() as isize;
        let sy = (roi[1] * scale).round() as isize;
        let ex = (roi[2] * scale).round() as isize;
        let ey = (roi[3] * scale).round() as isize;
        let rw = (ex - sx + 1).max(1) as f64;
        let rh = (ey - sy + 1).max(1) as f64;
        let (bw, bh) = (rw / out as f64, rh / out as f64);
        for py in 0..out {
            let hs = ((py as f64 * bh).floor() as isize + sy).clamp(0, h as isize) as usize;
            let he = (((py + 1) as f64 * bh).ceil() as isize + sy).clamp(0, h as isize) as usize;
            for px in 0..out {
                let ws = ((px as f64 * bw).floor() as isize + sx).clamp(0, w as isize) as usize;
                let we =
                    (((px + 1) as f64 * bw).ceil() as isize + sx).clamp(0, w as isize) as usize;
                if he <= hs || we <= ws {
                    continue;
                }
                for ch in 0..c {
                    let mut best = feature.index(0, ch, hs, ws);
                    for y in hs..he {
                        for x in ws..we {
                            let i = feature.index(0, ch, y, x);
                            if feature.data()[i] > feature.data()[best] {
                                best = i;
                            }
                        }
                    }
                    let o = pooled.index(r, ch, py, px);
                    pooled.data_mut()[o] = feature.data()[best];
                    arg[o] = best;
                }
            }
        }
    }
    Ok((pooled, arg))
}

/// Elementwise product.
pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    a.zip_map(b, |x, y| x * y)
}
