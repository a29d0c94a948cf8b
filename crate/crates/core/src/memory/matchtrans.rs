//! Correlation-driven memory warping.

use crate::error::{Error, Result};
use crate::nnkit::{CustomOp, Real, Tape, Tensor, Var};

/// Stabiliser added to squared feature norms before the cosine denominator.
const NORM_EPS: f64 = 1e-6;

/// Per-cell convex weights over the `(2k+1)^2` neighbourhood of the previous frame.
///
/// Weights for cell `(y, x)` and offset `(i, j)` live at
/// `((b * height + y) * width + x) * (2k+1)^2 + (i + k) * (2k+1) + (j + k)`; out-of-bounds
/// neighbours hold exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityField<T> {
    pub radius: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub weights: Vec<T>,
}

impl<T: Real> AffinityField<T> {
    pub fn window(&self) -> usize {
        2 * self.radius + 1
    }

    /// Weights of one output cell, row-major over offsets `(-k..=k)²`.
    pub fn at(&self, b: usize, y: usize, x: usize) -> &[T] {
        let n = self.window() * self.window();
        let o = ((b * self.height + y) * self.width + x) * n;
        &self.weights[o..o + n]
    }

    /// Offset `(dy, dx)` carrying the largest weight at a cell.
    pub fn peak(&self, b: usize, y: usize, x: usize) -> (isize, isize) {
        let w = self.at(b, y, x);
        let win = self.window();
        let mut best = 0;
        for (i, &v) in w.iter().enumerate() {
            if v > w[best] {
                best = i;
            }
        }
        let k = self.radius as isize;
        ((best / win) as isize - k, (best % win) as isize - k)
    }
}

fn neighbours(y: usize, x: usize, h: usize, w: usize, k: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let win = 2 * k + 1;
    (0..win).flat_map(move |di| {
        (0..win).filter_map(move |dj| {
            let py = y as isize + di as isize - k as isize;
            let px = x as isize + dj as isize - k as isize;
            if py < 0 || px < 0 || py >= h as isize || px >= w as isize {
                None
            } else {
                Some((di * win + dj, py as usize, px as usize))
            }
        })
    })
}

fn norms<T: Real>(f: &Tensor<T>) -> Vec<T> {
    let eps = T::lit(NORM_EPS);
    f.channel_norm()
        .data()
        .iter()
        .map(|&n| (n * n + eps).sqrt())
        .collect()
}

fn check_shapes<T: Real>(m: &Tensor<T>, fp: &Tensor<T>, ft: &Tensor<T>) -> Result<()> {
    let [n, _, h, w] = m.shape();
    if fp.shape() != ft.shape() || fp.batch() != n || fp.hw() != (h, w) {
        return Err(Error::contract(format!(
            "matchtrans needs matching maps: memory {:?}, previous {:?}, current {:?}",
            m.shape(),
            fp.shape(),
            ft.shape()
        )));
    }
    Ok(())
}

/// Affinity between `f_t(y, x)` and `f_prev(y+i, x+j)`: softmax over in-bounds neighbours of
/// cosine similarity divided by `temperature`.
pub fn affinity_field<T: Real>(
    f_prev: &Tensor<T>,
    f_t: &Tensor<T>,
    radius: usize,
    temperature: f64,
) -> Result<AffinityField<T>> {
    if f_prev.shape() != f_t.shape() {
        return Err(Error::contract("affinity needs equally shaped features"));
    }
    let [n, c, h, w] = f_t.shape();
    let win = 2 * radius + 1;
    let (np, nt) = (norms(f_prev), norms(f_t));
    let inv_tau = T::lit(1.0 / temperature);
    let mut weights = vec![T::zero(); n * h * w * win * win];
    let plane = h * w;
    let mut scores = vec![T::zero(); win * win];
    for b in 0..n {
        let base = b * c * plane;
        for y in 0..h {
            for x in 0..w {
                let q = y * w + x;
                let mut mx = T::neg_infinity();
                for (slot, py, px) in neighbours(y, x, h, w, radius) {
                    let p = py * w + px;
                    let mut d = T::zero();
                    for ch in 0..c {
                        d += f_t.data()[base + ch * plane + q] * f_prev.data()[base + ch * plane + p];
                    }
                    let s = d / (nt[b * plane + q] * np[b * plane + p]) * inv_tau;
                    scores[slot] = s;
                    mx = mx.max(s);
                }
                let o = (b * plane + q) * win * win;
                let mut z = T::zero();
                for (slot, _, _) in neighbours(y, x, h, w, radius) {
                    let e = (scores[slot] - mx).exp();
                    weights[o + slot] = e;
                    z += e;
                }
                for v in &mut weights[o..o + win * win] {
                    *v = *v / z;
                }
            }
        }
    }
    Ok(AffinityField {
        radius,
        batch: n,
        height: h,
        width: w,
        weights,
    })
}

/// `M'(y, x) = Σ a(y, x; i, j) · M(y+i, x+j)`.
pub fn apply_affinity<T: Real>(m: &Tensor<T>, a: &AffinityField<T>) -> Tensor<T> {
    let [n, c, h, w] = m.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(m.shape());
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let q = y * w + x;
                let wts = a.at(b, y, x);
                for (slot, py, px) in neighbours(y, x, h, w, a.radius) {
                    let wt = wts[slot];
                    let p = py * w + px;
                    for ch in 0..c {
                        let i = (b * c + ch) * plane;
                        out.data_mut()[i + q] += wt * m.data()[i + p];
                    }
                }
            }
        }
    }
    out
}

struct MatchTransOp<T> {
    field: AffinityField<T>,
    temperature: f64,
}

impl<T: Real> CustomOp<T> for MatchTransOp<T> {
    fn name(&self) -> &'static str {
        "matchtrans"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, dout: &Tensor<T>) -> Vec<Tensor<T>> {
        let (m, fp, ft) = (inputs[0], inputs[1], inputs[2]);
        let [n, c, h, w] = m.shape();
        let fc = ft.channels();
        let plane = h * w;
        let k = self.field.radius;
        let win = self.field.window();
        let (np, nt) = (norms(fp), norms(ft));
        let inv_tau = T::lit(1.0 / self.temperature);
        let mut dm = Tensor::zeros(m.shape());
        let mut dfp = Tensor::zeros(fp.shape());
        let mut dft = Tensor::zeros(ft.shape());
        let mut da = vec![T::zero(); win * win];
        for b in 0..n {
            let mbase = b * c * plane;
            let fbase = b * fc * plane;
            for y in 0..h {
                for x in 0..w {
                    let q = y * w + x;
                    let a = self.field.at(b, y, x);
                    let mut mean = T::zero();
                    for (slot, py, px) in neighbours(y, x, h, w, k) {
                        let p = py * w + px;
                        let mut s = T::zero();
                        for ch in 0..c {
                            let g = dout.data()[mbase + ch * plane + q];
                            dm.data_mut()[mbase + ch * plane + p] += a[slot] * g;
                            s += g * m.data()[mbase + ch * plane + p];
                        }
                        da[slot] = s;
                        mean += a[slot] * s;
                    }
                    let nq = nt[b * plane + q];
                    for (slot, py, px) in neighbours(y, x, h, w, k) {
                        let ds = a[slot] * (da[slot] - mean) * inv_tau;
                        if ds == T::zero() {
                            continue;
                        }
                        let p = py * w + px;
                        let npp = np[b * plane + p];
                        let mut d = T::zero();
                        for ch in 0..fc {
                            d += ft.data()[fbase + ch * plane + q] * fp.data()[fbase + ch * plane + p];
                        }
                        let inv = T::one() / (nq * npp);
                        for ch in 0..fc {
                            let u = ft.data()[fbase + ch * plane + q];
                            let v = fp.data()[fbase + ch * plane + p];
                            dft.data_mut()[fbase + ch * plane + q] += ds * (v * inv - d * u * inv / (nq * nq));
                            dfp.data_mut()[fbase + ch * plane + p] += ds * (u * inv - d * v * inv / (npp * npp));
                        }
                    }
                }
            }
        }
        vec![dm, dfp, dft]
    }
}

/// Warps `m_prev` into the current frame with affinities computed from `f_prev` and `f_t`.
/// Differentiable with respect to all three inputs.
pub fn matchtrans_warp<T: Real>(
    tape: &mut Tape<T>,
    m_prev: Var,
    f_prev: Var,
    f_t: Var,
    radius: usize,
    temperature: f64,
) -> Result<Var> {
    if radius == 0 {
        return Err(Error::contract("matchtrans radius must be at least 1"));
    }
    check_shapes(tape.value(m_prev), tape.value(f_prev), tape.value(f_t))?;
    let field = affinity_field(tape.value(f_prev), tape.value(f_t), radius, temperature)?;
    let out = apply_affinity(tape.value(m_prev), &field);
    Ok(tape.custom(
        &[m_prev, f_prev, f_t],
        out,
        Box::new(MatchTransOp { field, temperature }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// One-hot channel per cell: every cell carries a distinct pattern.
    fn unique_pattern(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([1, h * w, h, w], |[_, c, y, x]| if c == y * w + x { 1.0 } else { 0.0 })
    }

    #[test]
    fn self_correlation_peaks_at_zero_offset() {
        let f = unique_pattern(6, 6);
        let a = affinity_field(&f, &f, 2, 0.1).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(a.peak(0, y, x), (0, 0));
                let s: f64 = a.at(0, y, x).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let m = Tensor::from_fn([1, 2, 6, 6], |[_, c, y, x]| (c * 36 + y * 6 + x) as f64);
        let warped = apply_affinity(&m, &a);
        // cos = |u|^2 / (|u|^2 + eps) at the centre and 0 elsewhere.
        let s = 10.0 / (1.0 + NORM_EPS);
        let interior = s.exp() / (s.exp() + 24.0);
        assert!((a.at(0, 3, 3)[12] - interior).abs() < 1e-12);
        for (o, i) in warped.data().iter().zip(m.data()) {
            assert!((o - i).abs() < 0.1 * (1.0 + i.abs()));
        }
    }

    #[test]
    fn constant_memory_stays_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fp = random([1, 3, 5, 7], &mut rng);
        let ft = random([1, 3, 5, 7], &mut rng);
        let a = affinity_field(&fp, &ft, 2, 0.1).unwrap();
        let m = Tensor::full([1, 4, 5, 7], 2.5);
        let out = apply_affinity(&m, &a);
        assert!(out.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn translation_is_tracked() {
        let (h, w) = (7, 7);
        let fp = unique_pattern(h, w);
        // Current frame: content moved one cell to the right.
        let ft = Tensor::from_fn(fp.shape(), |[_, c, y, x]| if x == 0 { 0.0 } else { fp.at(0, c, y, x - 1) });
        let mut m = Tensor::zeros([1, 1, h, w]);
        for (i, v) in m.data_mut().iter_mut().enumerate() {
            *v = (i * 7 % 11) as f64;
        }
        let mut tape = Tape::new();
        let (mv, pv, tv) = (tape.constant(m.clone()), tape.constant(fp), tape.constant(ft));
        let out = matchtrans_warp(&mut tape, mv, pv, tv, 1, 0.01).unwrap();
        let out = tape.value(out);
        for y in 1..h - 1 {
            for x in 2..w - 1 {
                assert!((out.at(0, 0, y, x) - m.at(0, 0, y, x - 1)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            random([1, 2, 4, 5], &mut rng),
            random([1, 3, 4, 5], &mut rng),
            random([1, 3, 4, 5], &mut rng),
        ];
        let report = grad_check(&inputs, 1e-5, |t, v| matchtrans_warp(t, v[0], v[1], v[2], 1, 0.5)).unwrap();
        assert!(report.passed(1e-4), "{report:?}");
        let report = grad_check(&inputs, 1e-5, |t, v| matchtrans_warp(t, v[0], v[1], v[2], 2, 0.1)).unwrap();
        assert!(report.passed(1e-3), "{report:?}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let f = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let g = tape.constant(Tensor::zeros([1, 2, 4, 5]));
        assert!(matchtrans_warp(&mut tape, m, f, g, 2, 0.1).is_err());
    }
}
