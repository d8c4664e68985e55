use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// 2-D complex transform over a row-major `rows x cols` buffer. The inverse
/// is unscaled.
pub(crate) fn fft2(planner: &mut FftPlanner<f64>, data: &mut [Complex<f64>], rows: usize, cols: usize, inverse: bool) {
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    row_fft.process(data);
    let mut t = transpose(data, rows, cols);
    col_fft.process(&mut t);
    data.copy_from_slice(&transpose(&t, cols, rows));
}

fn transpose(data: &[Complex<f64>], rows: usize, cols: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::default(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Spectrum of a `k x k` kernel zero-padded to `rows x cols`, conjugated so
/// that a pointwise product yields correlation.
pub(crate) fn kernel_spectrum(weights: &[f64], k: usize, rows: usize, cols: usize) -> Vec<Complex<f64>> {
    let mut buf = vec![Complex::default(); rows * cols];
    for r in 0..k {
        for c in 0..k {
            buf[r * cols + c] = Complex::new(weights[r * k + c], 0.0);
        }
    }
    let mut planner = FftPlanner::new();
    fft2(&mut planner, &mut buf, rows, cols, false);
    for v in buf.iter_mut() {
        *v = v.conj();
    }
    buf
}

/// Valid-region correlation `out(i, j) = sum w(r, c) x(i + r, j + c)` of the
/// `rows x cols` plane with a kernel spectrum from [`kernel_spectrum`].
pub(crate) fn correlate(plane: &[f64], rows: usize, cols: usize, spectrum: &[Complex<f64>], out_rows: usize, out_cols: usize) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    fft2(&mut planner, &mut buf, rows, cols, false);
    for (v, s) in buf.iter_mut().zip(spectrum) {
        *v *= s;
    }
    fft2(&mut planner, &mut buf, rows, cols, true);
    let scale = 1.0 / (rows * cols) as f64;
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for i in 0..out_rows {
        for j in 0..out_cols {
            out.push(buf[i * cols + j].re * scale);
        }
    }
    out
}
