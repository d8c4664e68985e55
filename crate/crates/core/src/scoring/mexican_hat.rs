use crate::error::{Error, Result};
use crate::image::LumaPlane;

/// Default scale cascade in pixels, coarse to fine.
pub const DEFAULT_SIGMAS: [f64; 3] = [50.0, 20.0, 9.0];

/// Zero-sum Mexican-Hat (Ricker) kernel over the full crop.
#[derive(Debug, Clone, PartialEq)]
pub struct RealFilter {
    size: usize,
    sigma: f64,
    weights: Vec<f64>,
    /// Mean removed from the raw kernel.
    offset: f64,
}

impl RealFilter {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn l1_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }
}

/// Unnormalized Ricker profile `(1 - q) exp(-q)` with `q = r^2 / (2 sigma^2)`.
pub fn ricker(x: f64, y: f64, sigma: f64) -> f64 {
    let q = (x * x + y * y) / (2.0 * sigma * sigma);
    (1.0 - q) * (-q).exp()
}

fn center(k: usize) -> f64 {
    (k as f64 - 1.0) / 2.0
}

pub fn make_mexican_hat_kernel(sigma: f64, k: usize) -> Result<RealFilter> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma {sigma} must be positive")));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("kernel size must be at least 1".into()));
    }
    let c = center(k);
    let mut weights = Vec::with_capacity(k * k);
    for r in 0..k {
        for col in 0..k {
            weights.push(ricker(col as f64 - c, r as f64 - c, sigma));
        }
    }
    let n = (k * k) as f64;
    let mut offset = compensated_sum(&weights) / n;
    for w in weights.iter_mut() {
        *w -= offset;
    }
    // Second pass removes the rounding left by the first subtraction.
    let residual = compensated_sum(&weights) / n;
    for w in weights.iter_mut() {
        *w -= residual;
    }
    offset += residual;
    Ok(RealFilter {
        size: k,
        sigma,
        weights,
        offset,
    })
}

/// Neumaier-compensated sum.
fn compensated_sum(values: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Dot product of one crop row with one kernel row. Four interleaved partial
/// sums, combined as `(s0 + s1) + (s2 + s3)`, then the tail in order. The
/// order is fixed so results are bit-identical on every platform.
#[inline]
fn row_dot(pixels: &[f64], weights: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let mut px = pixels.chunks_exact(4);
    let mut wt = weights.chunks_exact(4);
    for (p, w) in (&mut px).zip(&mut wt) {
        for l in 0..4 {
            lanes[l] += p[l] * w[l];
        }
    }
    let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (p, w) in px.remainder().iter().zip(wt.remainder()) {
        acc += p * w;
    }
    acc
}

/// Reference per-crop score: rows accumulated top to bottom.
pub(crate) fn dot_at(plane: &[f64], width: usize, top: usize, left: usize, f: &RealFilter) -> f64 {
    let k = f.size;
    let mut acc = 0.0;
    for r in 0..k {
        let start = (top + r) * width + left;
        acc += row_dot(&plane[start..start + k], &f.weights[r * k..(r + 1) * k]);
    }
    acc
}

pub(crate) fn as_f64(plane: &LumaPlane) -> Vec<f64> {
    plane.values().iter().map(|&v| v as f64).collect()
}

pub fn score_mexican_hat(crop: &LumaPlane, f: &RealFilter) -> Result<f64> {
    if crop.width() != f.size || crop.height() != f.size {
        return Err(Error::SizeMismatch {
            expected: format!("{k}x{k} crop", k = f.size),
            got: format!("{}x{}", crop.height(), crop.width()),
        });
    }
    Ok(dot_at(&as_f64(crop), f.size, 0, 0, f))
}

pub(crate) fn naive_map(ext: &LumaPlane, rows: usize, cols: usize, f: &RealFilter) -> Vec<f64> {
    let plane = as_f64(ext);
    let w = ext.width();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(dot_at(&plane, w, i, j, f));
        }
    }
    out
}

/// Rank-4 separable evaluation.
///
/// The raw kernel factors as `g(x)g(y) - a(x)g(y) - g(x)a(y)` with
/// `g(t) = exp(-t^2 / 2 sigma^2)` and `a(t) = t^2 / (2 sigma^2) g(t)`; the
/// mean offset becomes a box sum read from an integral image.
pub(crate) fn separable_map(ext: &LumaPlane, rows: usize, cols: usize, f: &RealFilter) -> Vec<f64> {
    let k = f.size;
    let c = center(k);
    let s2 = 2.0 * f.sigma * f.sigma;
    let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - c).powi(2)) / s2).exp()).collect();
    let a: Vec<f64> = (0..k)
        .map(|i| (i as f64 - c).powi(2) / s2 * g[i])
        .collect();
    let g_minus_a: Vec<f64> = g.iter().zip(&a).map(|(g, a)| g - a).collect();

    let (eh, ew) = (ext.height(), ext.width());
    let plane = as_f64(ext);
    // Horizontal passes over every row of the extended plane.
    let mut hg = vec![0.0; eh * cols];
    let mut ha = vec![0.0; eh * cols];
    for y in 0..eh {
        let row = &plane[y * ew..(y + 1) * ew];
        for j in 0..cols {
            let window = &row[j..j + k];
            hg[y * cols + j] = row_dot(window, &g);
            ha[y * cols + j] = row_dot(window, &a);
        }
    }
    let sat = integral(ext);
    let mut out = vec![0.0; rows * cols];
    let mut col_g = vec![0.0; k];
    let mut col_a = vec![0.0; k];
    for j in 0..cols {
        for y0 in 0..rows {
            for r in 0..k {
                col_g[r] = hg[(y0 + r) * cols + j];
                col_a[r] = ha[(y0 + r) * cols + j];
            }
            let box_sum = sat.sum(y0, j, k) as f64;
            out[y0 * cols + j] = row_dot(&col_g, &g_minus_a) - row_dot(&col_a, &g) - f.offset * box_sum;
        }
    }
    out
}

/// Summed-area table with a zero top row and left column.
pub(crate) struct Integral {
    width: usize,
    table: Vec<u64>,
}

impl Integral {
    /// Sum over the `k x k` block with top-left corner `(top, left)`.
    pub(crate) fn sum(&self, top: usize, left: usize, k: usize) -> u64 {
        let w = self.width + 1;
        let at = |r: usize, c: usize| self.table[r * w + c];
        at(top + k, left + k) + at(top, left) - at(top, left + k) - at(top + k, left)
    }
}

pub(crate) fn integral(plane: &LumaPlane) -> Integral {
    let (h, w) = (plane.height(), plane.width());
    let mut table = vec![0u64; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut run = 0u64;
        for c in 0..w {
            run += plane.get(r, c) as u64;
            table[(r + 1) * (w + 1) + c + 1] = table[r * (w + 1) + c + 1] + run;
        }
    }
    Integral { width: w, table }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ricker_center_is_one() {
        assert_eq!(ricker(0.0, 0.0, 50.0), 1.0);
        assert_eq!(ricker(0.0, 0.0, 0.5), 1.0);
    }

    /// Exactly rounded sum (Shewchuk partials).
    fn fsum(values: &[f64]) -> f64 {
        let mut partials: Vec<f64> = Vec::new();
        for &v in values {
            let mut x = v;
            let mut kept = 0;
            for i in 0..partials.len() {
                let mut y = partials[i];
                if x.abs() < y.abs() {
                    std::mem::swap(&mut x, &mut y);
                }
                let hi = x + y;
                let lo = y - (hi - x);
                if lo != 0.0 {
                    partials[kept] = lo;
                    kept += 1;
                }
                x = hi;
            }
            partials.truncate(kept);
            partials.push(x);
        }
        partials.iter().sum()
    }

    #[test]
    fn kernel_is_zero_sum() {
        for (sigma, k) in [(50.0, 140), (20.0, 33), (9.0, 16), (1.0, 1), (2.5, 7)] {
            let f = make_mexican_hat_kernel(sigma, k).unwrap();
            let s = fsum(f.weights());
            assert!(s.abs() < 1e-12, "sigma {sigma} k {k}: sum {s}");
        }
    }

    #[test]
    fn kernel_has_fourfold_symmetry() {
        let k = 9;
        let f = make_mexican_hat_kernel(3.0, k).unwrap();
        let w = |r: usize, c: usize| f.weights()[r * k + c];
        for r in 0..k {
            for c in 0..k {
                assert_eq!(w(r, c), w(r, k - 1 - c));
                assert_eq!(w(r, c), w(k - 1 - r, c));
            }
        }
    }

    #[test]
    fn rejects_bad_sigma() {
        assert!(make_mexican_hat_kernel(0.0, 3).is_err());
        assert!(make_mexican_hat_kernel(f64::NAN, 3).is_err());
        assert!(make_mexican_hat_kernel(1.0, 0).is_err());
    }

    #[test]
    fn integral_box_sums() {
        let p = LumaPlane::from_fn(5, 4, |r, c| (r * 5 + c) as u8).unwrap();
        let sat = integral(&p);
        let mut direct = 0u64;
        for r in 1..4 {
            for c in 2..5 {
                direct += p.get(r, c) as u64;
            }
        }
        assert_eq!(sat.sum(1, 2, 3), direct);
    }
}
