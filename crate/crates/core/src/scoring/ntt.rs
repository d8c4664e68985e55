//! Exact integer 2-D correlation over the prime field `p = 2^64 - 2^32 + 1`.
//!
//! Scores are recovered from their residues as signed integers, which is exact
//! whenever every true correlation value lies in `(-p/2, p/2)`. Callers check
//! that bound before using this path.

const P: u64 = 0xFFFF_FFFF_0000_0001;
const EPS: u64 = 0xFFFF_FFFF; // 2^64 mod p
const GENERATOR: u64 = 7;

/// Largest magnitude that survives the signed residue round trip.
pub(crate) const SIGNED_LIMIT: u128 = (P / 2) as u128;

#[inline]
fn reduce128(x: u128) -> u64 {
    let lo = x as u64;
    let hi = (x >> 64) as u64;
    let hi_hi = hi >> 32;
    let hi_lo = hi & EPS;
    // 2^96 = -1 (mod p)
    let (mut t0, borrow) = lo.overflowing_sub(hi_hi);
    if borrow {
        t0 = t0.wrapping_sub(EPS);
    }
    // 2^64 = EPS (mod p)
    let t1 = hi_lo * EPS;
    let (res, carry) = t0.overflowing_add(t1);
    let res = res.wrapping_add(EPS * carry as u64);
    if res >= P {
        res - P
    } else {
        res
    }
}

#[inline]
fn mul(a: u64, b: u64) -> u64 {
    reduce128(a as u128 * b as u128)
}

#[inline]
fn add(a: u64, b: u64) -> u64 {
    let (s, over) = a.overflowing_add(b);
    let (t, under) = s.overflowing_sub(P);
    if over || !under {
        t
    } else {
        s
    }
}

#[inline]
fn sub(a: u64, b: u64) -> u64 {
    if a >= b {
        a - b
    } else {
        a.wrapping_sub(b).wrapping_add(P)
    }
}

fn pow(mut base: u64, mut exp: u64) -> u64 {
    let mut acc = 1;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul(acc, base);
        }
        base = mul(base, base);
        exp >>= 1;
    }
    acc
}

fn inverse(a: u64) -> u64 {
    pow(a, P - 2)
}

pub(crate) fn from_i64(v: i64) -> u64 {
    if v >= 0 {
        v as u64 % P
    } else {
        sub(0, v.unsigned_abs() % P)
    }
}

pub(crate) fn to_i64(v: u64) -> i64 {
    if v > P / 2 {
        -((P - v) as i64)
    } else {
        v as i64
    }
}

/// Precomputed twiddles for one power-of-two length.
struct Plan {
    n: usize,
    forward: Vec<u64>,
    backward: Vec<u64>,
    n_inv: u64,
}

impl Plan {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two() && n as u64 <= 1 << 32);
        let root = pow(GENERATOR, (P - 1) / n as u64);
        let root_inv = inverse(root);
        let half = n / 2;
        let mut forward = Vec::with_capacity(half);
        let mut backward = Vec::with_capacity(half);
        let (mut f, mut b) = (1, 1);
        for _ in 0..half {
            forward.push(f);
            backward.push(b);
            f = mul(f, root);
            b = mul(b, root_inv);
        }
        Plan {
            n,
            forward,
            backward,
            n_inv: inverse(n as u64),
        }
    }

    /// In-place iterative radix-2 transform; the inverse is unscaled.
    fn run(&self, a: &mut [u64], invert: bool) {
        let n = self.n;
        let mut j = 0;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                a.swap(i, j);
            }
        }
        let tw = if invert { &self.backward } else { &self.forward };
        let mut len = 2;
        while len <= n {
            let step = n / len;
            for chunk in a.chunks_exact_mut(len) {
                let (lo, hi) = chunk.split_at_mut(len / 2);
                for (t, (u, v)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
                    let x = *u;
                    let y = mul(*v, tw[t * step]);
                    *u = add(x, y);
                    *v = sub(x, y);
                }
            }
            len <<= 1;
        }
    }
}

/// Row-major `rows x cols` 2-D transform (both sides powers of two).
pub(crate) struct Transform2d {
    rows: usize,
    cols: usize,
    row_plan: Plan,
    col_plan: Plan,
}

impl Transform2d {
    pub(crate) fn new(rows: usize, cols: usize) -> Self {
        Transform2d {
            rows,
            cols,
            row_plan: Plan::new(cols),
            col_plan: Plan::new(rows),
        }
    }

    pub(crate) fn forward(&self, data: &mut [u64]) {
        self.run(data, false);
    }

    /// Inverse transform including the `1 / (rows * cols)` scaling.
    pub(crate) fn inverse(&self, data: &mut [u64]) {
        self.run(data, true);
        let scale = mul(self.row_plan.n_inv, self.col_plan.n_inv);
        for v in data.iter_mut() {
            *v = mul(*v, scale);
        }
    }

    fn run(&self, data: &mut [u64], invert: bool) {
        debug_assert_eq!(data.len(), self.rows * self.cols);
        for row in data.chunks_exact_mut(self.cols) {
            self.row_plan.run(row, invert);
        }
        let mut column = vec![0u64; self.rows];
        for c in 0..self.cols {
            for (r, slot) in column.iter_mut().enumerate() {
                *slot = data[r * self.cols + c];
            }
            self.col_plan.run(&mut column, invert);
            for (r, v) in column.iter().enumerate() {
                data[r * self.cols + c] = *v;
            }
        }
    }
}

pub(crate) fn pointwise_mul(a: &mut [u64], b: &[u64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x = mul(*x, *y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn reduction_matches_u128_remainder() {
        let mut rng = rand_pcg::Pcg64::seed_from_u64(1);
        let edge = [0u128, 1, P as u128 - 1, P as u128, u64::MAX as u128, u128::MAX];
        for &x in edge.iter() {
            assert_eq!(reduce128(x) as u128, x % P as u128, "x = {x}");
        }
        for _ in 0..100_000 {
            let x: u128 = rng.gen();
            assert_eq!(reduce128(x) as u128, x % P as u128);
            let (a, b) = (rng.gen::<u64>() % P, rng.gen::<u64>() % P);
            assert_eq!(add(a, b) as u128, (a as u128 + b as u128) % P as u128);
            assert_eq!(sub(a, b) as u128, (a as u128 + P as u128 - b as u128) % P as u128);
        }
    }

    #[test]
    fn signed_round_trip() {
        for v in [0i64, 1, -1, 123_456_789, -987_654_321, i64::MAX / 4, -(i64::MAX / 4)] {
            assert_eq!(to_i64(from_i64(v)), v);
        }
    }

    #[test]
    fn cyclic_convolution_matches_direct() {
        let mut rng = rand_pcg::Pcg64::seed_from_u64(9);
        let (rows, cols) = (8, 16);
        let a: Vec<i64> = (0..rows * cols).map(|_| rng.gen_range(-1000..1000)).collect();
        let b: Vec<i64> = (0..rows * cols).map(|_| rng.gen_range(-1000..1000)).collect();
        let mut direct = vec![0i64; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                for r in 0..rows {
                    for c in 0..cols {
                        direct[((i + r) % rows) * cols + (j + c) % cols] +=
                            a[i * cols + j] * b[r * cols + c];
                    }
                }
            }
        }
        let t = Transform2d::new(rows, cols);
        let mut fa: Vec<u64> = a.iter().map(|&v| from_i64(v)).collect();
        let mut fb: Vec<u64> = b.iter().map(|&v| from_i64(v)).collect();
        t.forward(&mut fa);
        t.forward(&mut fb);
        pointwise_mul(&mut fa, &fb);
        t.inverse(&mut fa);
        let got: Vec<i64> = fa.into_iter().map(to_i64).collect();
        assert_eq!(got, direct);
    }
}
