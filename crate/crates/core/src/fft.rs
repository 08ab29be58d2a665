//! Thin 2D FFT layer over rustfft.
//!
//! Transforms are unnormalized: `ifft2(fft2(x)) == N * x` with `N = h * w`.
//! The adjoint of the forward transform is therefore the unnormalized
//! inverse, which the gradient code relies on.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::tensor::{Field, Real};

/// Planned transforms for one (h, w) grid.
pub struct Fft2<T: Real> {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> Fft2<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn transform(&self, data: &mut [Complex<T>], forward: bool) {
        assert_eq!(data.len(), self.h * self.w, "field size mismatch");
        let row = if forward { &self.row_fwd } else { &self.row_inv };
        let col = if forward { &self.col_fwd } else { &self.col_inv };
        for r in data.chunks_exact_mut(self.w) {
            row.process(r);
        }
        // columns via transpose buffer
        let mut colbuf = vec![Complex::new(T::zero(), T::zero()); self.h];
        for c in 0..self.w {
            for r in 0..self.h {
                colbuf[r] = data[r * self.w + c];
            }
            col.process(&mut colbuf);
            for r in 0..self.h {
                data[r * self.w + c] = colbuf[r];
            }
        }
    }

    /// In-place unnormalized forward DFT.
    pub fn forward(&self, f: &mut Field<T>) {
        self.transform(&mut f.data, true);
    }

    /// In-place unnormalized inverse DFT (conjugate transform, no 1/N).
    pub fn inverse_unnormalized(&self, f: &mut Field<T>) {
        self.transform(&mut f.data, false);
    }

    /// In-place normalized inverse: `inverse(forward(x)) == x`.
    pub fn inverse(&self, f: &mut Field<T>) {
        self.transform(&mut f.data, false);
        let scale = T::one() / T::of((self.h * self.w) as f64);
        for v in &mut f.data {
            *v = *v * scale;
        }
    }
}

/// DFT sample frequencies for n points at the given pitch (1/angstrom),
/// matching the standard fftfreq layout.
pub fn fft_freqs(n: usize, pitch: f64) -> Vec<f64> {
    let d = n as f64 * pitch;
    (0..n)
        .map(|i| {
            let idx = if i <= (n - 1) / 2 { i as f64 } else { i as f64 - n as f64 };
            idx / d
        })
        .collect()
}

/// Swap quadrants so zero frequency lands at (h/2, w/2).
pub fn fftshift_2d<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    let hh = h / 2;
    let hw = w / 2;
    for r in 0..h {
        let src_r = (r + h - hh) % h;
        for c in 0..w {
            let src_c = (c + w - hw) % w;
            out.push(data[src_r * w + src_c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let fft = Fft2::<f64>::new(4, 6);
        let mut f = Field::zeros(4, 6);
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = Complex::new(i as f64 * 0.3, -(i as f64) * 0.1);
        }
        let orig = f.clone();
        fft.forward(&mut f);
        fft.inverse(&mut f);
        for (a, b) in f.data.iter().zip(&orig.data) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn freqs_match_fftfreq_layout() {
        let f = fft_freqs(4, 0.5);
        assert_eq!(f, vec![0.0, 0.5, -1.0, -0.5]);
        let f5 = fft_freqs(5, 1.0);
        assert_eq!(f5, vec![0.0, 0.2, 0.4, -0.4, -0.2]);
    }

    #[test]
    fn fftshift_centers_origin() {
        let data: Vec<i32> = (0..16).collect();
        let s = fftshift_2d(&data, 4, 4);
        assert_eq!(s[2 * 4 + 2], 0);
    }
}
