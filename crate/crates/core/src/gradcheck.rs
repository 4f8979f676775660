//! Central-difference gradient checking.

use crate::autograd::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|a − n| / max(1, |a|, |n|)`.
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// The analytic gradient is identically zero while the numeric one is not:
    /// the input only reaches the output through a detached path.
    pub detached_path: bool,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn scalar_output(tape: &Tape, out: Var) -> TensorResult<f64> {
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

fn summarize(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    let max_rel_error = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_error(*a, *n))
        .fold(0.0, f64::max);
    let detached_path =
        analytic.iter().all(|a| *a == 0.0) && numeric.iter().any(|n| n.abs() > 1e-9);
    GradCheckReport {
        max_rel_error,
        coordinates: analytic.len(),
        detached_path,
    }
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> TensorResult<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> TensorResult<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let out = f(&mut tape, xv)?;
    scalar_output(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |point: Tensor| -> TensorResult<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        scalar_output(&tape, out)
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(summarize(&analytic, &numeric))
}

/// Gradient check of a scalar function of stored parameters, over every
/// coordinate of the listed parameters.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    h: f64,
) -> TensorResult<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> TensorResult<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    scalar_output(&tape, out)?;
    let grads = tape.backward(out)?;
    let by_id: std::collections::HashMap<ParamId, Tensor> =
        tape.param_grads(&grads).into_iter().collect();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = store.clone();
    for &id in ids {
        let n = store.get(id).numel();
        match by_id.get(&id) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
        for i in 0..n {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let mut t = Tape::new();
            let plus = f(&mut t, &probe).and_then(|o| scalar_output(&t, o))?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let mut t = Tape::new();
            let minus = f(&mut t, &probe).and_then(|o| scalar_output(&t, o))?;
            probe.get_mut(id).data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    Ok(summarize(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l2_distance_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Tensor::randn(&[6], 1.0, &mut rng);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let r = grad_check(
            |t, x| {
                let c = t.constant(c.clone());
                t.l2_distance(x, c)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert!(!r.detached_path);
    }

    #[test]
    fn softmax_cross_entropy_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let r = grad_check(|t, x| t.softmax_cross_entropy(x, &[0, 4, 2]), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn detached_path_is_flagged() {
        let x = Tensor::from_vec(vec![0.3, -0.7]);
        let r = grad_check(
            |t, x| {
                let s = t.stop_gradient(x)?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.detached_path);
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn non_scalar_function_errors() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = grad_check(|t, x| t.scale(x, 2.0), &x, 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss(_)));
    }
}
