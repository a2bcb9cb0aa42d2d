use super::{Bound, ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// Runs `program` on a fresh tape with `params` bound as leaves.
pub fn forward<F>(params: &ParamSet, program: F) -> Result<(Tape, Var)>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let out = program(&mut tape, &bound)?;
    Ok((tape, out))
}

/// Forward plus backward; returns the scalar value and parameter gradients.
pub fn value_and_grad<F>(params: &ParamSet, program: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var>,
{
    let (mut tape, out) = forward(params, program)?;
    let value = scalar_of(&tape, out)?;
    tape.backward(out)?;
    Ok((value, tape.param_gradients()?))
}

fn scalar_of(tape: &Tape, out: Var) -> Result<f64> {
    tape.value(out)
        .item()
        .ok_or_else(|| Error::Shape(format!("expected scalar output, got {:?}", tape.value(out).shape())))
}

/// Largest `|analytic - central| / max(1, |central|)` over every parameter
/// value, where `central` is the symmetric difference quotient at `epsilon`.
/// An empty parameter set gives 0.
pub fn finite_diff_check<F>(params: &ParamSet, program: F, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Invalid(format!("epsilon must lie in (0, 1e-2], got {epsilon}")));
    }
    let (_, analytic) = value_and_grad(params, &program)?;
    let eval = |p: &ParamSet| -> Result<f64> {
        let (tape, out) = forward(p, &program)?;
        scalar_of(&tape, out)
    };

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, grad) in analytic.iter() {
        for (i, &g) in grad.values().iter().enumerate() {
            let orig = params.get(name).expect("same layout").values()[i];
            *probe.value_mut(name, i).expect("in range") = orig + epsilon;
            let plus = eval(&probe)?;
            *probe.value_mut(name, i).expect("in range") = orig - epsilon;
            let minus = eval(&probe)?;
            *probe.value_mut(name, i).expect("in range") = orig;
            let central = (plus - minus) / (2.0 * epsilon);
            worst = worst.max((g - central).abs() / central.abs().max(1.0));
        }
    }
    Ok(worst)
}
