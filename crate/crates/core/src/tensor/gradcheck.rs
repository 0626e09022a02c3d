use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradient magnitudes below this are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every input element.
    pub max_rel_error: f64,
    /// Largest relative error per input tensor.
    pub per_input: Vec<f64>,
    pub tol: f64,
    /// Number of elements compared.
    pub elements: usize,
    /// Elements where a central probe left the smooth piece of the base
    /// point.
    pub refined: usize,
    /// Elements where even the smallest step crossed a piece boundary.
    pub straddled: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], requires_grad: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), requires_grad))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Oracle(format!(
            "checked function must return a scalar, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok((tape, vars, out))
}

/// Step reductions tried when a probe lands on another smooth piece.
pub const MAX_REFINEMENTS: usize = 3;

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences `(f(x+h) − f(x−h)) / 2h`, element by element, with `h = eps`.
/// When a probe's structure fingerprint differs from the base point's, the
/// second-order one-sided difference `±(4f(x±h) − 3f(x) − f(x±2h)) / 2h` of
/// the side that stays on the base piece is used; if neither side does, `h`
/// shrinks tenfold, up to `MAX_REFINEMENTS` times.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let (tape, leaves, out) = evaluate(&f, inputs, true)?;
    let reference = tape.value(out).data()[0];
    let (again, _, out2) = evaluate(&f, inputs, false)?;
    let repeat = again.value(out2).data()[0];
    let base_structure = again.structure_fingerprint();
    if reference.to_bits() != repeat.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {reference} then {repeat}"
        )));
    }
    let grads = tape.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let (mut elements, mut refined, mut straddled) = (0, 0, 0);
    for (i, input) in inputs.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(leaves[i]) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; input.len()];
                &zeros
            }
        };
        let mut worst = 0.0f64;
        for e in 0..input.len() {
            let probe = |delta: f64| -> Result<(f64, bool)> {
                let mut data = input.to_vec();
                data[e] += delta;
                let mut shifted = inputs.to_vec();
                shifted[i] = Tensor::new(input.shape().to_vec(), data)?;
                let (t, _, o) = evaluate(&f, &shifted, false)?;
                Ok((t.value(o).data()[0], t.structure_fingerprint() == base_structure))
            };
            let mut h = eps;
            let mut numeric;
            let mut attempt = 0;
            loop {
                let ((up, same_up), (down, same_down)) = (probe(h)?, probe(-h)?);
                numeric = (up - down) / (2.0 * h);
                if same_up && same_down {
                    break;
                }
                if attempt == 0 {
                    refined += 1;
                }
                let one_sided = |dir: f64, near: f64| -> Result<Option<f64>> {
                    let (far, same_far) = probe(2.0 * dir * h)?;
                    Ok(same_far.then(|| dir * (4.0 * near - 3.0 * reference - far) / (2.0 * h)))
                };
                let sided = match (same_up, same_down) {
                    (true, false) => one_sided(1.0, up)?,
                    (false, true) => one_sided(-1.0, down)?,
                    _ => None,
                };
                if let Some(d) = sided {
                    numeric = d;
                    break;
                }
                if attempt == MAX_REFINEMENTS {
                    straddled += 1;
                    break;
                }
                attempt += 1;
                h /= 10.0;
            }
            worst = worst.max(relative_error(analytic[e], numeric));
            elements += 1;
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
        tol,
        elements,
        refined,
        straddled,
    })
}
