use super::{SeededRng, Tensor};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this in magnitude are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

/// A named collection of parameter tensors, visited in a fixed order.
pub trait ParamSet: Clone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        z
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates_checked: usize,
    pub pass: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`; zero when both are exactly zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn perturb<P: ParamSet>(params: &P, tensor: usize, coord: usize, delta: f64) -> P {
    let mut p = params.clone();
    let mut idx = 0;
    p.visit_mut(&mut |_, t| {
        if idx == tensor {
            t.data_mut()[coord] += delta;
        }
        idx += 1;
    });
    p
}

/// Compares `analytic` against central finite differences of `loss` around `params`.
///
/// Every coordinate is checked for tensors with at most `samples` entries; larger tensors get
/// `samples` distinct coordinates drawn from `rng`.
pub fn grad_check<P, F>(
    loss: F,
    params: &P,
    analytic: &P,
    tol: f64,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<Vec<GradCheckReport>>
where
    P: ParamSet,
    F: Fn(&P) -> Result<f64>,
{
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check base loss".into()));
    }
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    analytic.visit(&mut |n, t| grads.push((n.to_string(), t.data().to_vec())));
    let mut reports = Vec::with_capacity(grads.len());
    for (ti, (name, g)) in grads.iter().enumerate() {
        let coords: Vec<usize> = if g.len() <= samples {
            (0..g.len()).collect()
        } else {
            let mut all: Vec<usize> = (0..g.len()).collect();
            rng.shuffle(&mut all);
            all.truncate(samples);
            all.sort_unstable();
            all
        };
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let up = loss(&perturb(params, ti, c, FD_STEP))?;
            let down = loss(&perturb(params, ti, c, -FD_STEP))?;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("grad_check loss at {name}[{c}]")));
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(g[c], numeric));
        }
        reports.push(GradCheckReport {
            name: name.clone(),
            max_rel_error: worst,
            coordinates_checked: coords.len(),
            pass: worst < tol,
        });
    }
    Ok(reports)
}
