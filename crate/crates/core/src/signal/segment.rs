use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::{bandpass, resample, Recording, Segment};

/// Scope of the per-sample z-score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZScoreScope {
    /// One mean and deviation over the whole `T × C` window.
    #[default]
    Joint,
    PerChannel,
}

/// How recordings are cut into training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationPolicy {
    pub window_len: usize,
    pub overlap_ratio: f64,
    pub target_rate_hz: f64,
    pub bandpass: Option<(f64, f64)>,
    pub zscore: ZScoreScope,
}

impl Default for SegmentationPolicy {
    fn default() -> Self {
        Self {
            window_len: 128,
            overlap_ratio: 0.5,
            target_rate_hz: 128.0,
            bandpass: Some((0.5, 45.0)),
            zscore: ZScoreScope::Joint,
        }
    }
}

impl SegmentationPolicy {
    pub fn stride(&self) -> usize {
        (self.window_len as f64 * (1.0 - self.overlap_ratio)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(Error::Parameter("window length must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap_ratio) {
            return Err(Error::Parameter(format!(
                "overlap ratio {} must lie in [0, 1)",
                self.overlap_ratio
            )));
        }
        if self.stride() < 1 {
            return Err(Error::Parameter(format!(
                "overlap ratio {} leaves a zero stride for window {}",
                self.overlap_ratio, self.window_len
            )));
        }
        if !(self.target_rate_hz > 0.0) {
            return Err(Error::Parameter("target rate must be positive".into()));
        }
        Ok(())
    }

    /// Number of windows a series of `samples` timestamps yields.
    pub fn window_count(&self, samples: usize) -> usize {
        let t = self.window_len;
        if samples < t {
            0
        } else {
            (samples - t) / self.stride() + 1
        }
    }
}

/// Cuts a recording into ordered `T × C` windows. Trailing partial windows
/// are dropped.
pub fn segment<T: Scalar>(rec: &Recording<T>, policy: &SegmentationPolicy) -> Result<Vec<Segment<T>>> {
    policy.validate()?;
    let (c, t, stride) = (rec.channels(), policy.window_len, policy.stride());
    let count = policy.window_count(rec.samples());
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        let mut data = Tensor::zeros(&[t, c]);
        for ch in 0..c {
            let src = &rec.channel(ch)[start..start + t];
            for (ti, &v) in src.iter().enumerate() {
                data.set(ti, ch, v);
            }
        }
        out.push(Segment {
            subject_id: rec.subject_id.clone(),
            label: rec.label,
            data,
            window_index: w,
        });
    }
    Ok(out)
}

const SIGMA_FLOOR: f64 = 1e-8;

fn standardize<T: Scalar>(values: &mut [T], get: impl Fn(usize) -> usize, n: usize) {
    let first = values[get(0)];
    if (0..n).all(|i| values[get(i)] == first) {
        for i in 0..n {
            values[get(i)] = T::zero();
        }
        return;
    }
    let nn = T::from_usize_lossy(n);
    let mean = (0..n).map(|i| values[get(i)]).sum::<T>() / nn;
    let var = (0..n)
        .map(|i| {
            let d = values[get(i)] - mean;
            d * d
        })
        .sum::<T>()
        / nn;
    let denom = var.sqrt() + T::lit(SIGMA_FLOOR);
    for i in 0..n {
        let idx = get(i);
        values[idx] = (values[idx] - mean) / denom;
    }
}

/// `(x − μ)/(σ + 1e-8)`; constant windows map to zeros.
pub fn zscore<T: Scalar>(seg: &Segment<T>, scope: ZScoreScope) -> Segment<T> {
    let mut out = seg.clone();
    let (t, c) = (seg.data.rows(), seg.data.cols());
    if t * c == 0 {
        return out;
    }
    let values = out.data.data_mut();
    match scope {
        ZScoreScope::Joint => standardize(values, |i| i, t * c),
        ZScoreScope::PerChannel => {
            for ch in 0..c {
                standardize(values, |i| i * c + ch, t);
            }
        }
    }
    out
}

/// Result of running the full preprocessing chain over a dataset.
#[derive(Debug, Clone)]
pub struct Preprocessed<T> {
    pub segments: Vec<Segment<T>>,
    /// Subjects whose recording was shorter than one window.
    pub too_short: Vec<String>,
}

/// Band-pass → resample → segment → z-score for one recording.
pub fn preprocess<T: Scalar>(rec: &Recording<T>, policy: &SegmentationPolicy) -> Result<Vec<Segment<T>>> {
    policy.validate()?;
    let filtered = match policy.bandpass {
        Some((lo, hi)) => bandpass(rec, lo, hi)?,
        None => rec.clone(),
    };
    let resampled = resample(&filtered, policy.target_rate_hz)?;
    Ok(segment(&resampled, policy)?
        .iter()
        .map(|s| zscore(s, policy.zscore))
        .collect())
}

/// Preprocesses every recording in parallel, keeping recording order.
pub fn preprocess_all<T: Scalar>(recs: &[Recording<T>], policy: &SegmentationPolicy) -> Result<Preprocessed<T>> {
    use rayon::prelude::*;
    let per: Vec<Vec<Segment<T>>> = recs
        .par_iter()
        .map(|r| preprocess(r, policy))
        .collect::<Result<_>>()?;
    let mut too_short = Vec::new();
    let mut segments = Vec::new();
    for (r, segs) in recs.iter().zip(per) {
        if segs.is_empty() {
            log::warn!("recording {} is shorter than one window", r.subject_id);
            too_short.push(r.subject_id.clone());
        }
        segments.extend(segs);
    }
    Ok(Preprocessed { segments, too_short })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(samples: usize) -> Recording<f64> {
        let data = (0..samples * 2).map(|i| i as f64).collect();
        Recording::new("r", 1, 128.0, Tensor::new(vec![2, samples], data).unwrap()).unwrap()
    }

    fn policy(t: usize, r: f64) -> SegmentationPolicy {
        SegmentationPolicy {
            window_len: t,
            overlap_ratio: r,
            ..Default::default()
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(segment(&ramp(1280), &policy(128, 0.5)).unwrap().len(), 19);
        for r in [0.0, 0.2, 0.5, 0.8] {
            assert_eq!(segment(&ramp(128), &policy(128, r)).unwrap().len(), 1);
        }
        assert!(segment(&ramp(100), &policy(128, 0.5)).unwrap().is_empty());
    }

    #[test]
    fn windows_are_time_major_and_indexed() {
        let segs = segment(&ramp(10), &policy(4, 0.5)).unwrap();
        assert_eq!(segs.len(), 4);
        assert_eq!(segs[1].window_index, 1);
        assert_eq!(segs[1].data.shape(), &[4, 2]);
        // channel 0 holds 0..10, channel 1 holds 10..20; window 1 starts at t=2
        assert_eq!(segs[1].data.row(0), &[2.0, 12.0]);
        assert!(segs.iter().all(|s| s.subject_id == "r" && s.label == 1));
    }

    #[test]
    fn full_overlap_is_rejected() {
        assert!(policy(128, 1.0).validate().is_err());
        assert!(policy(2, 0.9).validate().is_err());
    }

    fn seg(values: &[f64], c: usize) -> Segment<f64> {
        Segment {
            subject_id: "s".into(),
            label: 0,
            data: Tensor::from_f64(vec![values.len() / c, c], values).unwrap(),
            window_index: 0,
        }
    }

    fn moments(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
    }

    #[test]
    fn zscore_examples() {
        let z = zscore(&seg(&[0.1; 12], 3), ZScoreScope::Joint);
        assert!(z.data.data().iter().all(|&v| v == 0.0));
        let z = zscore(&seg(&[-1.0, 0.0, 1.0], 1), ZScoreScope::Joint);
        assert!((z.data.data()[0] + 1.2247).abs() < 1e-4);
        assert_eq!(z.data.data()[1], 0.0);
        let z = zscore(&seg(&[3.0, -2.0, 7.5, 0.25, 9.0, 1.0], 2), ZScoreScope::Joint);
        let (m, s) = moments(z.data.data());
        assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn per_channel_scope_standardizes_columns() {
        let z = zscore(&seg(&[1.0, 100.0, 2.0, 300.0, 3.0, 200.0], 2), ZScoreScope::PerChannel);
        for ch in 0..2 {
            let col: Vec<f64> = (0..3).map(|t| z.data.at(t, ch)).collect();
            let (m, s) = moments(&col);
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-6);
        }
    }

    fn walk_windows(s: usize, t: usize, stride: usize) -> usize {
        let mut start = 0;
        let mut n = 0;
        while start + t <= s {
            n += 1;
            start += stride;
        }
        n
    }

    proptest! {
        #[test]
        fn count_formula_matches_window_walker(s in 0usize..3000, t in 1usize..400, r in 0.0f64..0.99) {
            let p = policy(t, r);
            prop_assume!(p.validate().is_ok());
            prop_assert_eq!(p.window_count(s), walk_windows(s, t, p.stride()));
        }

        #[test]
        fn zscore_is_idempotent(values in proptest::collection::vec(-50.0f64..50.0, 8..64)) {
            let s = seg(&values, 1);
            let (_, sd) = moments(&values);
            prop_assume!(sd > 1e-3);
            let once = zscore(&s, ZScoreScope::Joint);
            let twice = zscore(&once, ZScoreScope::Joint);
            prop_assert!(once.data.max_abs_diff(&twice.data) < 1e-6);
        }
    }
}
