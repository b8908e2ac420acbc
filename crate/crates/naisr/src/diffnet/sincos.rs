//! Float abstraction for the network math.
//!
//! Training runs in `f32` for speed; every finite-difference check runs in
//! `f64`. The `f32` sine/cosine use a range-reduced polynomial so the hot
//! loops vectorize; the `f64` path defers to the standard library so the
//! 64-bit mode is as exact as the platform libm.

use ndarray::NdFloat;

/// Scalar type usable throughout the differentiable-network stack.
pub trait DiffFloat: NdFloat + Send + Sync + 'static {
    /// Simultaneous sine and cosine.
    fn sin_cos_fast(self) -> (Self, Self);

    fn sin_fast(self) -> Self {
        self.sin_cos_fast().0
    }
}

/// Lossless-enough conversion for numeric constants.
#[inline]
pub fn from_f64<F: DiffFloat>(x: f64) -> F {
    F::from(x).expect("finite constant")
}

impl DiffFloat for f64 {
    #[inline]
    fn sin_cos_fast(self) -> (f64, f64) {
        self.sin_cos()
    }

    #[inline]
    fn sin_fast(self) -> f64 {
        self.sin()
    }
}

// pi split so that k*PI_A is exact for |k| < 2^17.
const PI_A: f32 = 3.140_625;
const PI_B: f32 = 9.676_535_9e-4;

impl DiffFloat for f32 {
    /// Valid to ~4e-6 absolute error for |x| <= 200, degrading gradually for
    /// larger arguments; network pre-activations stay far inside that range.
    #[inline]
    fn sin_cos_fast(self) -> (f32, f32) {
        let k = (self * std::f32::consts::FRAC_1_PI).round();
        let r = (self - k * PI_A) - k * PI_B;
        let r2 = r * r;
        // Taylor series about 0, adequate over [-pi/2, pi/2].
        let mut sp = -2.505_210_7e-8f32;
        sp = sp * r2 + 2.755_731_9e-6;
        sp = sp * r2 - 1.984_127_0e-4;
        sp = sp * r2 + 8.333_333_3e-3;
        sp = sp * r2 - 1.666_666_7e-1;
        let s = r + r * r2 * sp;
        let mut cp = -2.755_731_9e-7f32;
        cp = cp * r2 + 2.480_158_7e-5;
        cp = cp * r2 - 1.388_888_9e-3;
        cp = cp * r2 + 4.166_666_7e-2;
        cp = cp * r2 - 0.5;
        let c = 1.0 + r2 * cp;
        // x = k*pi + r, so both values flip sign with odd k.
        if (k as i32) & 1 == 0 {
            (s, c)
        } else {
            (-s, -c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_sin_cos_tracks_std() {
        let mut max_err = 0.0f64;
        for i in 0..400_000 {
            let x = i as f64 * 5e-4 - 100.0;
            let (s, c) = (x as f32).sin_cos_fast();
            max_err = max_err.max((s as f64 - x.sin()).abs());
            max_err = max_err.max((c as f64 - x.cos()).abs());
        }
        assert!(max_err < 5e-6, "max abs error {max_err}");
    }

    #[test]
    fn f64_path_is_std() {
        let x = 1.234_567_f64;
        assert_eq!(x.sin_fast(), x.sin());
        assert_eq!(x.sin_cos_fast(), x.sin_cos());
    }
}
