use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::image::LumaPlane;

/// Quantization step applied to standard-normal draws.
pub const WEIGHT_SCALE: f64 = 127.0;
/// Weights are clamped to +-4 quantized standard deviations.
pub const WEIGHT_LIMIT: i32 = 508;
/// Default RandHash modulus, the Mersenne prime 2^31 - 1.
pub const DEFAULT_MODULUS: u64 = (1 << 31) - 1;
/// Moduli above 2^53 would not survive storage in an `f64` score map.
pub const MAX_MODULUS: u64 = 1 << 53;
/// Keeps every per-row partial dot product inside `i32`.
pub const MAX_CROP: usize = 16_384;

/// Integer-quantized random filter.
///
/// Weights are drawn row-major from `Pcg64::seed_from_u64(seed)` through
/// `rand_distr::StandardNormal`, mapped to `round(127 z)` and clamped to
/// `[-508, 508]`. The seed fully determines the filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntFilter {
    size: usize,
    weights: Vec<i16>,
}

impl IntFilter {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> impl Iterator<Item = i32> + '_ {
        self.weights.iter().map(|&w| w as i32)
    }

    pub(crate) fn raw(&self) -> &[i16] {
        &self.weights
    }

    /// Sum of absolute weights; `255 * l1` bounds every dot product.
    pub fn l1_norm(&self) -> u64 {
        self.weights.iter().map(|w| w.unsigned_abs() as u64).sum()
    }
}

pub fn make_randhash_filter(seed: u64, k: usize) -> Result<IntFilter> {
    if k == 0 || k > MAX_CROP {
        return Err(Error::InvalidConfig(format!(
            "RandHash crop size {k} outside [1, {MAX_CROP}]"
        )));
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let weights = (0..k * k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (WEIGHT_SCALE * z)
                .round()
                .clamp(-WEIGHT_LIMIT as f64, WEIGHT_LIMIT as f64) as i16
        })
        .collect();
    Ok(IntFilter { size: k, weights })
}

/// Exact dot product of `k` consecutive samples with one filter row.
#[inline]
fn row_dot(pixels: &[u8], weights: &[i16]) -> i32 {
    pixels
        .iter()
        .zip(weights)
        .map(|(&x, &w)| x as i16 as i32 * w as i32)
        .sum()
}

/// Exact (unreduced) dot product of the crop whose top-left corner is at
/// `(top, left)` in `plane`.
pub(crate) fn dot_at(plane: &LumaPlane, top: usize, left: usize, f: &IntFilter) -> i64 {
    let (w, k) = (plane.width(), f.size);
    let values = plane.values();
    let mut acc = 0i64;
    for r in 0..k {
        let start = (top + r) * w + left;
        acc += row_dot(&values[start..start + k], &f.weights[r * k..(r + 1) * k]) as i64;
    }
    acc
}

#[inline]
pub(crate) fn reduce(dot: i64, modulus: u64) -> u64 {
    dot.rem_euclid(modulus as i64) as u64
}

/// RandHash score of one `k x k` crop: exact dot product, Euclidean modulo.
pub fn score_randhash(crop: &LumaPlane, f: &IntFilter, modulus: u64) -> Result<u64> {
    if crop.width() != f.size || crop.height() != f.size {
        return Err(Error::SizeMismatch {
            expected: format!("{k}x{k} crop", k = f.size),
            got: format!("{}x{}", crop.height(), crop.width()),
        });
    }
    check_modulus(modulus)?;
    Ok(reduce(dot_at(crop, 0, 0, f), modulus))
}

pub(crate) fn check_modulus(modulus: u64) -> Result<()> {
    if !(2..=MAX_MODULUS).contains(&modulus) {
        return Err(Error::InvalidConfig(format!(
            "RandHash modulus {modulus} outside [2, 2^53]"
        )));
    }
    Ok(())
}

/// Reference engine: every crop evaluated directly.
pub(crate) fn naive_map(ext: &LumaPlane, rows: usize, cols: usize, f: &IntFilter, modulus: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(reduce(dot_at(ext, i, j, f), modulus) as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn filters_are_deterministic() {
        let a = make_randhash_filter(42, 9).unwrap();
        let b = make_randhash_filter(42, 9).unwrap();
        assert_eq!(a, b);
        let one = make_randhash_filter(3, 1).unwrap();
        assert_eq!(one.weights().count(), 1);
    }

    #[test]
    fn distinct_seeds_give_distinct_filters() {
        for s in 0..100u64 {
            let a = make_randhash_filter(2 * s, 8).unwrap();
            let b = make_randhash_filter(2 * s + 1, 8).unwrap();
            assert_ne!(a, b, "seeds {} and {}", 2 * s, 2 * s + 1);
        }
    }

    #[test]
    fn weights_follow_quantized_normal() {
        let f = make_randhash_filter(5, 64).unwrap();
        let w: Vec<f64> = f.weights().map(f64::from).collect();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 5.0, "mean {mean}");
        assert!((sd - 127.0).abs() < 5.0, "sd {sd}");
        assert!(w.iter().all(|v| v.abs() <= 508.0));
    }

    #[test]
    fn zero_crop_scores_zero() {
        let f = make_randhash_filter(1, 4).unwrap();
        let crop = LumaPlane::new(4, 4, vec![0; 16]).unwrap();
        assert_eq!(score_randhash(&crop, &f, DEFAULT_MODULUS).unwrap(), 0);
    }

    #[test]
    fn single_pixel_change_is_linear() {
        let mut rng = Pcg64::seed_from_u64(11);
        let f = make_randhash_filter(17, 5).unwrap();
        let weights: Vec<i64> = f.weights().map(i64::from).collect();
        let m = DEFAULT_MODULUS as i64;
        for _ in 0..200 {
            let mut px: Vec<u8> = (0..25).map(|_| rng.gen()).collect();
            let a = score_randhash(&LumaPlane::new(5, 5, px.clone()).unwrap(), &f, DEFAULT_MODULUS).unwrap();
            let p = rng.gen_range(0..25);
            let old = px[p];
            px[p] = rng.gen();
            let delta = px[p] as i64 - old as i64;
            let b = score_randhash(&LumaPlane::new(5, 5, px).unwrap(), &f, DEFAULT_MODULUS).unwrap();
            assert_eq!((b as i64 - a as i64).rem_euclid(m), (weights[p] * delta).rem_euclid(m));
        }
    }

    #[test]
    fn three_by_three_against_big_integer_oracle() {
        // Independent oracle: decimal schoolbook arithmetic on digit strings,
        // so no machine-integer path is shared with the implementation.
        fn dec_mul_small(a: &str, b: u32) -> String {
            let mut carry = 0u32;
            let mut out = Vec::new();
            for ch in a.bytes().rev() {
                let v = (ch - b'0') as u32 * b + carry;
                out.push((v % 10) as u8 + b'0');
                carry = v / 10;
            }
            while carry > 0 {
                out.push((carry % 10) as u8 + b'0');
                carry /= 10;
            }
            while out.len() > 1 && *out.last().unwrap() == b'0' {
                out.pop();
            }
            out.reverse();
            String::from_utf8(out).unwrap()
        }
        fn dec_cmp(a: &str, b: &str) -> std::cmp::Ordering {
            a.len().cmp(&b.len()).then(a.cmp(b))
        }
        fn dec_add(a: &str, b: &str) -> String {
            let (a, b): (Vec<u8>, Vec<u8>) = (a.bytes().rev().collect(), b.bytes().rev().collect());
            let mut out = Vec::new();
            let mut carry = 0;
            for i in 0..a.len().max(b.len()) {
                let v = a.get(i).map_or(0, |c| c - b'0') + b.get(i).map_or(0, |c| c - b'0') + carry;
                out.push(v % 10 + b'0');
                carry = v / 10;
            }
            if carry > 0 {
                out.push(carry + b'0');
            }
            out.reverse();
            String::from_utf8(out).unwrap()
        }
        fn dec_sub(a: &str, b: &str) -> String {
            // requires a >= b
            let (a, b): (Vec<u8>, Vec<u8>) = (a.bytes().rev().collect(), b.bytes().rev().collect());
            let mut out = Vec::new();
            let mut borrow = 0i32;
            for i in 0..a.len() {
                let mut v = (a[i] - b'0') as i32 - b.get(i).map_or(0, |c| (c - b'0') as i32) - borrow;
                borrow = (v < 0) as i32;
                if v < 0 {
                    v += 10;
                }
                out.push(v as u8 + b'0');
            }
            while out.len() > 1 && *out.last().unwrap() == b'0' {
                out.pop();
            }
            out.reverse();
            String::from_utf8(out).unwrap()
        }
        fn dec_mod(a: &str, m: &str) -> String {
            let mut r = a.to_string();
            while dec_cmp(&r, m) != std::cmp::Ordering::Less {
                // subtract the largest m * 10^j not exceeding r
                let mut chunk = m.to_string();
                while dec_cmp(&format!("{chunk}0"), &r) != std::cmp::Ordering::Greater {
                    chunk.push('0');
                }
                r = dec_sub(&r, &chunk);
            }
            r
        }

        let f = make_randhash_filter(2024, 3).unwrap();
        let pixels = [255u8, 0, 17, 200, 99, 1, 128, 254, 73];
        let crop = LumaPlane::new(3, 3, pixels.to_vec()).unwrap();
        for modulus in [DEFAULT_MODULUS, 97, 2] {
            let (mut pos, mut neg) = ("0".to_string(), "0".to_string());
            for (w, &x) in f.weights().zip(&pixels) {
                let term = dec_mul_small(&w.unsigned_abs().to_string(), x as u32);
                if w >= 0 {
                    pos = dec_add(&pos, &term);
                } else {
                    neg = dec_add(&neg, &term);
                }
            }
            let m = modulus.to_string();
            let expected = if dec_cmp(&pos, &neg) != std::cmp::Ordering::Less {
                dec_mod(&dec_sub(&pos, &neg), &m)
            } else {
                let r = dec_mod(&dec_sub(&neg, &pos), &m);
                if r == "0" {
                    r
                } else {
                    dec_sub(&m, &r)
                }
            };
            let got = score_randhash(&crop, &f, modulus).unwrap();
            assert_eq!(got.to_string(), expected, "modulus {modulus}");
        }
    }

    #[test]
    fn size_mismatch_and_bad_modulus() {
        let f = make_randhash_filter(1, 3).unwrap();
        let crop = LumaPlane::new(4, 4, vec![1; 16]).unwrap();
        assert!(matches!(score_randhash(&crop, &f, 7), Err(Error::SizeMismatch { .. })));
        let crop = LumaPlane::new(3, 3, vec![1; 9]).unwrap();
        assert!(score_randhash(&crop, &f, 1).is_err());
        assert!(make_randhash_filter(1, 0).is_err());
    }
}
