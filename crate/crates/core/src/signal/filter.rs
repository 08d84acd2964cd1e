//! Windowed-sinc FIR design, zero-phase band-pass filtering and polyphase
//! rational resampling.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::Recording;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn hamming(n: usize, len: usize) -> f64 {
    if len == 1 {
        return 1.0;
    }
    0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos()
}

/// Hamming-windowed low-pass kernel with cutoff `fc` in cycles per sample.
pub fn lowpass_taps(fc: f64, len: usize) -> Vec<f64> {
    let mid = (len - 1) as f64 / 2.0;
    (0..len)
        .map(|n| 2.0 * fc * sinc(2.0 * fc * (n as f64 - mid)) * hamming(n, len))
        .collect()
}

/// Band-pass kernel as the difference of two low-pass kernels.
pub fn bandpass_taps(low_hz: f64, high_hz: f64, rate_hz: f64) -> Vec<f64> {
    // transition width ≈ 3.3 fs / N for a Hamming window; keep it at `low_hz`
    let mut len = (3.3 * rate_hz / low_hz).ceil() as usize;
    if len % 2 == 0 {
        len += 1;
    }
    let hi = lowpass_taps(high_hz / rate_hz, len);
    let lo = lowpass_taps(low_hz / rate_hz, len);
    hi.iter().zip(&lo).map(|(a, b)| a - b).collect()
}

fn causal_fir(taps: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (n, out) in y.iter_mut().enumerate() {
        let kmax = taps.len().min(n + 1);
        let mut acc = 0.0;
        for (k, &h) in taps[..kmax].iter().enumerate() {
            acc += h * x[n - k];
        }
        *out = acc;
    }
    y
}

/// Forward-backward FIR application with odd-reflection edge padding.
pub fn filtfilt(taps: &[f64], x: &[f64]) -> Vec<f64> {
    let s = x.len();
    if s == 0 {
        return Vec::new();
    }
    let pad = (3 * taps.len()).min(s - 1);
    let mut ext = Vec::with_capacity(s + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[s - 1] - x[s - 1 - i]);
    }
    let mut y = causal_fir(taps, &ext);
    y.reverse();
    let mut y = causal_fir(taps, &y);
    y.reverse();
    y[pad..pad + s].to_vec()
}

fn map_channels<T: Scalar>(rec: &Recording<T>, samples: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Recording<T>> {
    let mut data = Vec::with_capacity(rec.channels() * samples);
    for c in 0..rec.channels() {
        let x: Vec<f64> = rec.channel(c).iter().map(|v| v.to_f64_lossy()).collect();
        data.extend(f(&x).into_iter().map(T::lit));
    }
    Ok(Recording {
        subject_id: rec.subject_id.clone(),
        label: rec.label,
        sampling_rate_hz: rec.sampling_rate_hz,
        series: Tensor::new(vec![rec.channels(), samples], data)?,
    })
}

/// Zero-phase linear-phase FIR band-pass applied to every channel.
pub fn bandpass<T: Scalar>(rec: &Recording<T>, low_hz: f64, high_hz: f64) -> Result<Recording<T>> {
    let nyquist = rec.sampling_rate_hz / 2.0;
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < nyquist) {
        return Err(Error::Parameter(format!(
            "band {low_hz}-{high_hz} Hz must satisfy 0 < low < high < {nyquist} Hz"
        )));
    }
    let taps = bandpass_taps(low_hz, high_hz, rec.sampling_rate_hz);
    map_channels(rec, rec.samples(), |x| filtfilt(&taps, x))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `(up, down)` with `up/down ≈ target/source`.
fn rational_ratio(target: f64, source: f64) -> (usize, usize) {
    let integral = |v: f64| (v - v.round()).abs() < 1e-9 && v.round() > 0.0;
    if integral(target) && integral(source) {
        let (t, s) = (target.round() as u64, source.round() as u64);
        let g = gcd(t, s);
        return ((t / g) as usize, (s / g) as usize);
    }
    // best approximation with a bounded denominator
    let r = target / source;
    let mut best = (1usize, 1usize, f64::INFINITY);
    for q in 1..=1000usize {
        let p = (r * q as f64).round().max(1.0) as usize;
        let err = (p as f64 / q as f64 - r).abs();
        if err < best.2 - 1e-15 {
            best = (p, q, err);
        }
    }
    (best.0, best.1)
}

/// Polyphase resampling of one channel by `up/down` with an anti-alias
/// low-pass designed at the upsampled rate.
pub fn resample_poly(x: &[f64], up: usize, down: usize, out_len: usize) -> Vec<f64> {
    let factor = up.max(down);
    let half = 10 * factor;
    let len = 2 * half + 1;
    let fc = 0.9 * 0.5 / factor as f64;
    let taps = lowpass_taps(fc, len);
    let gain = up as f64;
    let s = x.len();
    (0..out_len)
        .map(|m| {
            // output sample m sits at m·down on the upsampled grid
            let centre = m * down + half;
            let lo = centre.saturating_sub(len - 1);
            let first = lo.div_ceil(up) * up;
            let mut acc = 0.0;
            let mut j = first;
            while j <= centre {
                let idx = j / up;
                if idx >= s {
                    break;
                }
                acc += taps[centre - j] * x[idx];
                j += up;
            }
            gain * acc
        })
        .collect()
}

/// Downsamples to `target_hz`; equal rates return the input unchanged.
pub fn resample<T: Scalar>(rec: &Recording<T>, target_hz: f64) -> Result<Recording<T>> {
    let source = rec.sampling_rate_hz;
    if !(target_hz > 0.0) {
        return Err(Error::Parameter(format!("target rate {target_hz} must be positive")));
    }
    if target_hz > source * (1.0 + 1e-12) {
        return Err(Error::Unsupported(format!(
            "upsampling from {source} Hz to {target_hz} Hz"
        )));
    }
    if (target_hz - source).abs() <= 1e-12 * source {
        return Ok(rec.clone());
    }
    let (up, down) = rational_ratio(target_hz, source);
    let out_len = (rec.samples() as f64 * target_hz / source).round() as usize;
    let mut out = map_channels(rec, out_len, |x| resample_poly(x, up, down, out_len))?;
    out.sampling_rate_hz = target_hz;
    Ok(out)
}
