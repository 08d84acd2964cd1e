use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Tape, Tensor, Var};

/// Absolute differences at or below this count as agreement.
pub const ABS_FLOOR: f64 = 1e-8;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(tensor index, flat element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative disagreement of one coordinate, zero when within [`ABS_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Checks every coordinate of every tensor in `theta`.
pub fn check_gradients<T, F>(f: F, theta: &[Tensor<T>], eps: T) -> Result<GradCheck>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let coords: Vec<(usize, usize)> = theta
        .iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.len()).map(move |i| (t, i)))
        .collect();
    check_at(&f, theta, eps, &coords)
}

/// Checks `samples` coordinates drawn uniformly without replacement.
pub fn check_gradients_sampled<T, F, R>(
    f: F,
    theta: &[Tensor<T>],
    eps: T,
    samples: usize,
    rng: &mut R,
) -> Result<GradCheck>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
    R: Rng + ?Sized,
{
    let total: usize = theta.iter().map(Tensor::len).sum();
    let picks = index::sample(rng, total, samples.min(total));
    let mut picked: Vec<usize> = picks.into_iter().collect();
    picked.sort_unstable();
    let mut coords = Vec::with_capacity(picked.len());
    let mut base = 0;
    let mut t = 0;
    for flat in picked {
        while flat >= base + theta[t].len() {
            base += theta[t].len();
            t += 1;
        }
        coords.push((t, flat - base));
    }
    check_at(&f, theta, eps, &coords)
}

fn evaluate<T, F>(f: &F, theta: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, T>> = theta.iter().map(|x| tape.constant(x.clone())).collect();
    let y = f(&tape, &vars)?.item();
    if !y.is_finite() {
        return Err(Error::Numeric(format!("objective is not finite: {y}")));
    }
    Ok(y)
}

fn check_at<T, F>(f: &F, theta: &[Tensor<T>], eps: T, coords: &[(usize, usize)]) -> Result<GradCheck>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let e = eps.to_f64_lossy();
    if !(1e-7..=1e-3).contains(&e) {
        return Err(Error::Parameter(format!(
            "finite-difference step {e} outside [1e-7, 1e-3]"
        )));
    }
    let analytic: Vec<Tensor<T>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_, T>> = theta.iter().map(|x| tape.param(x.clone())).collect();
        let y = f(&tape, &vars)?;
        if !y.item().is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        let mut g = y.backward()?;
        vars.iter()
            .zip(theta)
            .map(|(v, x)| g.take(*v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };

    let mut work = theta.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: coords.len(),
    };
    let two = T::lit(2.0);
    for &(t, i) in coords {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + eps;
        let up = evaluate(f, &work)?;
        work[t].data_mut()[i] = orig - eps;
        let down = evaluate(f, &work)?;
        work[t].data_mut()[i] = orig;
        let numeric = ((up - down) / (two * eps)).to_f64_lossy();
        let err = relative_error(analytic[t].data()[i].to_f64_lossy(), numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((t, i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = vec![random(&[5], &mut rng)];
        let r = check_gradients(|_, v| Ok(v[0].mul(v[0])?.sum()), &theta, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn constant_objective_stays_under_floor() {
        let theta = vec![Tensor::<f64>::filled(&[3], 0.3)];
        let r = check_gradients(
            |t, _| Ok(t.constant(Tensor::scalar(4.0)).sum()),
            &theta,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn two_layer_network_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 6], &mut rng);
        let theta = vec![
            random(&[6, 5], &mut rng),
            random(&[5], &mut rng),
            random(&[5, 3], &mut rng),
        ];
        let r = check_gradients(
            move |t, v| {
                let h = t.constant(x.clone()).matmul(v[0])?.add_row(v[1])?.gelu();
                h.matmul(v[2])?.cross_entropy(1)
            },
            &theta,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn rejects_step_outside_range() {
        let theta = vec![Tensor::<f64>::zeros(&[1])];
        assert!(check_gradients(|_, v| Ok(v[0].sum()), &theta, 1e-2).is_err());
    }

    #[test]
    fn rejects_non_finite_objective() {
        let theta = vec![Tensor::<f64>::filled(&[1], f64::INFINITY)];
        assert!(matches!(
            check_gradients(|_, v| Ok(v[0].sum()), &theta, 1e-5),
            Err(Error::Numeric(_))
        ));
    }
}
