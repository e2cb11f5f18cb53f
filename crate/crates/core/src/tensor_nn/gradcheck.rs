//! Central finite-difference gradient verification.

use rand::seq::index::sample;
use rand::Rng;

use super::params::ParameterGroup;
use super::tape::{Tape, Var};
use super::NnError;

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coordinates_checked: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

fn eval<F>(f: &mut F, group: &ParameterGroup) -> Result<f64, NnError>
where
    F: FnMut(&mut Tape, &ParameterGroup) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, group)?;
    Ok(tape.value(loss).item())
}

/// Compares the tape gradient of `f` against central differences for every
/// trainable coordinate of `group`.
pub fn grad_check<F>(f: F, group: &ParameterGroup, eps: f64) -> Result<GradCheckReport, NnError>
where
    F: FnMut(&mut Tape, &ParameterGroup) -> Result<Var, NnError>,
{
    grad_check_sampled(f, group, eps, usize::MAX, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))
}

/// Like [`grad_check`] but probes at most `max_per_tensor` random
/// coordinates of each tensor.
pub fn grad_check_sampled<F, R>(
    f: F,
    group: &ParameterGroup,
    eps: f64,
    max_per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport, NnError>
where
    F: FnMut(&mut Tape, &ParameterGroup) -> Result<Var, NnError>,
    R: Rng + ?Sized,
{
    check(f, group, &[eps], max_per_tensor, rng)
}

/// Checks every coordinate against central differences at each step in
/// `steps` and keeps the best agreement. Large steps can straddle a ReLU
/// kink and small ones drown in roundoff; an incorrect gradient disagrees
/// at every step.
pub fn grad_check_ladder<F>(f: F, group: &ParameterGroup, steps: &[f64]) -> Result<GradCheckReport, NnError>
where
    F: FnMut(&mut Tape, &ParameterGroup) -> Result<Var, NnError>,
{
    check(f, group, steps, usize::MAX, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))
}

fn check<F, R>(
    mut f: F,
    group: &ParameterGroup,
    steps: &[f64],
    max_per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport, NnError>
where
    F: FnMut(&mut Tape, &ParameterGroup) -> Result<Var, NnError>,
    R: Rng + ?Sized,
{
    if steps.is_empty() {
        return Err(NnError::InvalidArgument("no finite-difference steps given".into()));
    }
    if let Some(eps) = steps.iter().find(|e| !(1e-7..=1e-3).contains(*e)) {
        return Err(NnError::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, group)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut work = group.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), coordinates_checked: 0 };
    for key in group.trainable_keys() {
        let name = group.entries()[key.index].name.clone();
        let n = group.value(key).len();
        let coords: Vec<usize> = if n <= max_per_tensor {
            (0..n).collect()
        } else {
            sample(rng, n, max_per_tensor).into_vec()
        };
        for i in coords {
            let analytic = grads.get(key).map(|g| g.data()[i]).unwrap_or(0.0);
            let orig = group.value(key).data()[i];
            let mut err = f64::INFINITY;
            for &eps in steps {
                work.value_mut(key).data_mut()[i] = orig + eps;
                let up = eval(&mut f, &work)?;
                work.value_mut(key).data_mut()[i] = orig - eps;
                let down = eval(&mut f, &work)?;
                work.value_mut(key).data_mut()[i] = orig;
                err = err.min(relative_error(analytic, (up - down) / (2.0 * eps)));
            }
            report.coordinates_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_nn::Tensor;

    #[test]
    fn quadratic_at_three() {
        let mut group = ParameterGroup::new();
        let k = group.add("x", Tensor::scalar(3.0));
        let f = |tape: &mut Tape, g: &ParameterGroup| {
            let x = tape.param(g, k);
            let sq = tape.mul(x, x)?;
            Ok(tape.sum(sq))
        };
        let mut tape = Tape::new();
        let loss = f(&mut tape, &group).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(k).unwrap().item(), 6.0);
        let report = grad_check(f, &group, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn eps_range_is_enforced() {
        let group = ParameterGroup::new();
        let f = |tape: &mut Tape, _: &ParameterGroup| Ok(tape.constant(Tensor::scalar(0.0)));
        assert!(grad_check(f, &group, 1e-2).is_err());
        assert!(grad_check_ladder(f, &group, &[]).is_err());
    }

    #[test]
    fn ladder_tolerates_a_kink_but_not_a_wrong_gradient() {
        let mut group = ParameterGroup::new();
        let k = group.add("x", Tensor::scalar(2e-5));
        let relu = |tape: &mut Tape, g: &ParameterGroup| {
            let x = tape.param(g, k);
            Ok(tape.relu(x))
        };
        assert!(grad_check(relu, &group, 1e-4).unwrap().max_rel_error > 0.1);
        assert!(grad_check_ladder(relu, &group, &[1e-4, 1e-5, 1e-6]).unwrap().max_rel_error < 1e-8);
        // Scaling the constant after the fact gives the tape a wrong gradient.
        let wrong = |tape: &mut Tape, g: &ParameterGroup| {
            let x = tape.param(g, k);
            let c = tape.constant(Tensor::scalar(g.value(k).item()));
            tape.mul(x, c)
        };
        assert!(grad_check_ladder(wrong, &group, &[1e-4, 1e-5, 1e-6]).unwrap().max_rel_error > 0.1);
    }
}
