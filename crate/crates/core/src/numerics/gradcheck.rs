use super::{NumericsError, Tape, Tensor, Var};

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` receives a fresh tape and one trainable leaf per entry of `params`
/// and must return a one-element loss. The result is the maximum over all
/// coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(params: &[Tensor], step: f64, f: F) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    grad_check_with(params, step, f)
}

/// [`grad_check`] for objectives whose construction can fail with a
/// richer error type.
pub fn grad_check_with<F, E>(params: &[Tensor], step: f64, f: F) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect::<Vec<_>>()
    };

    let eval = |ps: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..params[pi].numel() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (grad.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
