//! Central finite-difference checks of graph gradients, run in `f64`.

use std::fmt;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;
use rand::seq::index::sample;

/// A finite-difference comparison: perturbation size, tolerance, and how many
/// coordinates of each input to probe (`None` probes all of them).
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-3, tol: 1e-3, max_coords: None, seed: 0 }
    }
}

impl GradCheckOptions {
    pub fn sampled(max_coords: usize) -> Self {
        Self { max_coords: Some(max_coords), ..Self::default() }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// `(input, coordinate)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub probed: usize,
    /// Coordinates whose finite difference straddles a kink (ReLU) and were
    /// excluded from the error.
    pub kinks: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol && self.kinks * 4 <= self.probed
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} over {} coords, {} kinks (worst input {} idx {}: analytic {:.6e}, numeric {:.6e}), tol {:.0e}",
            self.name, self.max_rel_err, self.probed, self.kinks, self.worst.0, self.worst.1, self.analytic, self.numeric, self.tol
        )
    }
}

/// Elementwise relative error `|a - n| / max(|a|, |n|, floor)`. The floor is the
/// larger of `1e-3` times the largest numeric gradient of the same input and
/// `1e-6` times the largest analytic gradient of any input (plus `1e-10`), so
/// entries many orders below the gradient scale are judged against that scale
/// rather than against finite-difference roundoff.
///
/// A coordinate that fails is re-differenced with step `h / 8`. If the two
/// estimates disagree beyond the tolerance the objective is not smooth within
/// `±h` there, so the coordinate is counted as a kink instead of an error. A
/// wrong analytic gradient cannot produce a kink, only a smooth mismatch; kinks
/// reduce coverage, so at most a quarter of the probed coordinates may be kinks.
pub fn check_gradients(
    name: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::dim("check_gradients", "objective must be scalar"));
        }
        Ok(v.data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let global =
        vars.iter().filter_map(|v| grads.get(*v)).flat_map(|t| t.data().iter()).fold(0.0f64, |m, v| m.max(v.abs()));

    let mut rng = seeded(opts.seed);
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        probed: 0,
        kinks: 0,
        tol: opts.tol,
    };
    let mut work = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let analytic = grads.get(vars[ii]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut central = |ci: usize, h: f64| -> Result<f64> {
            let orig = work[ii].data()[ci];
            work[ii].data_mut()[ci] = orig + h;
            let up = eval(&work)?;
            work[ii].data_mut()[ci] = orig - h;
            let down = eval(&work)?;
            work[ii].data_mut()[ci] = orig;
            Ok((up - down) / (2.0 * h))
        };
        let numeric = coords.iter().map(|&ci| central(ci, opts.h)).collect::<Result<Vec<f64>>>()?;
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (1e-3 * scale).max(1e-6 * global) + 1e-10;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(floor);
        for (&ci, &num) in coords.iter().zip(&numeric) {
            let a = analytic.data()[ci];
            let mut err = rel(a, num);
            if err > opts.tol {
                let fine = central(ci, opts.h / 8.0)?;
                if rel(num, fine) > opts.tol {
                    report.kinks += 1;
                    continue;
                }
                err = err.min(rel(a, fine));
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (ii, ci);
                report.analytic = a;
                report.numeric = num;
            }
        }
        report.probed += coords.len();
    }
    Ok(report)
}
