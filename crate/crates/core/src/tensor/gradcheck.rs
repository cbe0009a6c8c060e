//! Central-difference verification of tape gradients.

use crate::error::{shape_err, Error, Result};

use super::{Tape, Tensor, Var};

/// Smallest denominator used when turning an absolute gradient error into a
/// relative one, so that entries that are zero in both routes compare as
/// absolute errors.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
    pub checked: usize,
}

fn eval_scalar<F>(f: &F, x: &Tensor, requires_grad: bool) -> Result<(Tape, Var, Var)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), requires_grad)?;
    let y = f(&mut tape, xv)?;
    let value = tape.value(y);
    if value.numel() != 1 {
        return Err(shape_err("grad_check", format!("f returned shape {:?}", value.shape())));
    }
    if !value.item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok((tape, xv, y))
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / 2eps` over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, eps, &all)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("grad_check eps must be positive".into()));
    }
    let (mut tape, xv, y) = eval_scalar(&f, x, true)?;
    let analytic = tape.backward(y)?.data_or_zeros(xv);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: 0,
        checked: 0,
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (t, _, y) = eval_scalar(&f, &probe, false)?;
        let plus = t.value(y).item();
        probe.data_mut()[i] = orig - eps;
        let (t, _, y) = eval_scalar(&f, &probe, false)?;
        let minus = t.value(y).item();
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let abs = (numeric - analytic[i]).abs();
        let rel = abs / numeric.abs().max(analytic[i].abs()).max(REL_ERROR_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
        report.checked += 1;
    }
    Ok(report)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 0.0]).unwrap();
        let r = grad_check(|t, x| t.sum(x), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn sum_of_squares_has_gradient_two_x() {
        let x = Tensor::new(vec![3], vec![0.7, -1.3, 1.9]).unwrap();
        let r = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                t.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let mut tape = Tape::new();
        let xv = tape.param(x.clone()).unwrap();
        let y = tape.mul(xv, xv).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap().get(xv).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_scalar_and_bad_eps() {
        let x = Tensor::zeros(&[2]);
        assert!(grad_check(|_, x| Ok(x), &x, 1e-5).is_err());
        assert!(grad_check(|t, x| t.sum(x), &x, 0.0).is_err());
    }
}
