use super::dense::Tensor;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// (parameter index, flat entry) of the worst entry.
    pub worst: (usize, usize),
    pub entries: usize,
}

/// Compares the analytic gradient of `f` against central finite differences.
///
/// `f` records a scalar-valued computation on a fresh tape given one tracked
/// leaf per entry of `params`. The per-entry error is
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, params, epsilon, None)
}

/// Like [`grad_check`], but for entries whose analytic gradient `a` is tiny
/// next to the loss. The step starts at `clamp(target / |a|, epsilon, 1e-2)`
/// (`epsilon` when `a == 0`) and is halved, at most 24 times, while any of
/// the probes at `±h` and `±h/2` takes a different branch of a non-smooth op
/// than the unperturbed point (see [`Tape::branch_signature`]). The quotients
/// at `h` and `h/2` are then Richardson-extrapolated.
///
/// The step depends on the analytic value but the difference quotient does
/// not, so a wrong gradient still disagrees with the difference estimate.
pub fn grad_check_scaled<F>(f: F, params: &[Tensor], epsilon: f64, target: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::invalid("grad_check", format!("step target {target} must be positive")));
    }
    check(f, params, epsilon, Some(target))
}

fn check<F>(f: F, params: &[Tensor], epsilon: f64, target: Option<f64>) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid("grad_check", format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let eval_branch = |values: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((scalar_of(&tape, out)?, tape.branch_signature()))
    };
    let eval = |values: &[Tensor]| eval_branch(values).map(|(v, _)| v);

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = scalar_of(&tape, loss)?;
    let branch = tape.branch_signature();
    tape.backward(loss)?;
    let again = eval(params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: (0, 0),
        entries: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape().to_vec()));
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            let a = analytic.data()[e];
            // Central quotient at `h` and whether both probes kept the base branch.
            let mut quotient = |h: f64| -> Result<(f64, bool)> {
                work[pi].data_mut()[e] = orig + h;
                let (plus, bp) = eval_branch(&work)?;
                work[pi].data_mut()[e] = orig - h;
                let (minus, bm) = eval_branch(&work)?;
                work[pi].data_mut()[e] = orig;
                Ok(((plus - minus) / (2.0 * h), bp == branch && bm == branch))
            };
            let fd = match target {
                None => quotient(epsilon)?.0,
                Some(t) => {
                    let mut h = if a == 0.0 { epsilon } else { (t / a.abs()).clamp(epsilon, 1e-2) };
                    let mut halvings = 0;
                    loop {
                        let (d1, s1) = quotient(h)?;
                        let (d2, s2) = quotient(h / 2.0)?;
                        if (s1 && s2) || halvings == 24 {
                            break (4.0 * d2 - d1) / 3.0;
                        }
                        h /= 2.0;
                        halvings += 1;
                    }
                }
            };
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            report.entries += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (pi, e);
            }
        }
    }
    Ok(report)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{inject_backward_fault, OpKind};

    fn relu_sum(tape: &mut Tape, v: &[Var]) -> Result<Var> {
        let r = tape.relu(v[0]);
        Ok(tape.sum(r))
    }

    #[test]
    fn kink_inside_the_step_is_avoided() {
        let x = [Tensor::new(vec![2], vec![3e-7, -0.4]).unwrap()];
        let fixed = grad_check(relu_sum, &x, 1e-5).unwrap();
        assert!(fixed.max_relative_error > 0.1);
        let scaled = grad_check_scaled(relu_sum, &x, 1e-5, 1e-9).unwrap();
        assert!(scaled.max_relative_error < 1e-9, "{scaled:?}");
    }

    #[test]
    fn weak_smooth_gradient_is_resolved() {
        // d/dx of 1 + 1e-7 sigmoid(x) is far below what a 1e-5 step resolves on a loss near 1.
        let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let s = tape.sigmoid(v[0]);
            let s = tape.scale(s, 1e-7);
            let one = tape.constant(Tensor::scalar(1.0));
            let y = tape.add(one, s)?;
            Ok(tape.sum(y))
        };
        let x = [Tensor::scalar(0.3)];
        assert!(grad_check(f, &x, 1e-5).unwrap().max_relative_error > 1e-4);
        assert!(grad_check_scaled(f, &x, 1e-5, 1e-9).unwrap().max_relative_error < 1e-6);
    }

    #[test]
    fn scaled_check_still_catches_wrong_rules() {
        let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let s = tape.sigmoid(v[0]);
            Ok(tape.sum(s))
        };
        let x = [Tensor::new(vec![3], vec![-1.0, 0.2, 2.0]).unwrap()];
        inject_backward_fault(Some(OpKind::Sigmoid));
        let r = grad_check_scaled(f, &x, 1e-5, 1e-9);
        inject_backward_fault(None);
        assert!(r.unwrap().max_relative_error > 0.3);
    }

    #[test]
    fn bad_target_is_rejected() {
        let x = [Tensor::scalar(1.0)];
        assert!(grad_check_scaled(relu_sum, &x, 1e-5, 0.0).is_err());
        assert!(grad_check_scaled(relu_sum, &x, 0.5, 1e-9).is_err());
    }
}
