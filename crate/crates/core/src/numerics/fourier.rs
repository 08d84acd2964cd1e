//! Discrete Fourier transform of real or complex series, backed by
//! `rustfft` in double precision whatever the scalar type.

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::scalar::Scalar;

/// Forward transform of a real series: `X[k] = Σ x[n] e^{-2πi kn/S}`.
pub fn dft<T: Scalar>(x: &[T]) -> Vec<Complex<T>> {
    let buf = x.iter().map(|v| Complex::new(v.to_f64_lossy(), 0.0)).collect();
    transform(buf, false, 1.0)
}

/// Inverse transform, including the `1/S` normalisation.
pub fn idft<T: Scalar>(spectrum: &[Complex<T>]) -> Vec<Complex<T>> {
    let scale = 1.0 / spectrum.len().max(1) as f64;
    transform(widen(spectrum), true, scale)
}

/// Complex forward transform.
pub fn dft_complex<T: Scalar>(x: &[Complex<T>]) -> Vec<Complex<T>> {
    transform(widen(x), false, 1.0)
}

fn widen<T: Scalar>(x: &[Complex<T>]) -> Vec<Complex<f64>> {
    x.iter().map(|c| Complex::new(c.re.to_f64_lossy(), c.im.to_f64_lossy())).collect()
}

fn transform<T: Scalar>(mut buf: Vec<Complex<f64>>, inverse: bool, scale: f64) -> Vec<Complex<T>> {
    if !buf.is_empty() {
        let mut planner = FftPlanner::new();
        let fft = if inverse {
            planner.plan_fft_inverse(buf.len())
        } else {
            planner.plan_fft_forward(buf.len())
        };
        fft.process(&mut buf);
    }
    buf.into_iter()
        .map(|c| Complex::new(T::lit(c.re * scale), T::lit(c.im * scale)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_series_has_energy_only_at_dc() {
        for n in [8usize, 12] {
            let x = vec![2.5f64; n];
            let s = dft(&x);
            assert!((s[0].re - 2.5 * n as f64).abs() < 1e-12);
            assert!(s.iter().skip(1).all(|c| c.norm() < 1e-12));
        }
    }

    #[test]
    fn impulse_has_flat_unit_spectrum() {
        for n in [16usize, 10] {
            let mut x = vec![0.0f64; n];
            x[0] = 1.0;
            assert!(dft(&x).iter().all(|c| (c.norm() - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn complex_transform_agrees_with_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [32usize, 21] {
            let x: Vec<Complex<f64>> = (0..n)
                .map(|_| Complex::new(rng.random::<f64>(), rng.random::<f64>()))
                .collect();
            let fast = dft_complex(&x);
            for (k, f) in fast.iter().enumerate() {
                let direct: Complex<f64> = x
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v * Complex::from_polar(1.0, -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64))
                    .sum();
                assert!((f - direct).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_random_length_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let back = idft(&dft(&x));
        let err = x
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b.re).abs().max(b.im.abs()))
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }
}
