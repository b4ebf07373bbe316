//! Central-difference gradient checking for `f64` graphs.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so gradients that are
/// numerically zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen elements per leaf.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, tolerance: 1e-4, max_elements: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub leaf: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

impl GradCheck {
    /// Compares the tape gradient of `build` against central differences
    /// `(f(x+h) - f(x-h)) / 2h` for each element of each leaf.
    ///
    /// `build` receives fresh leaf variables (in `leaves` order) and must
    /// return the output; non-scalar outputs are summed.
    pub fn run<B>(&self, leaves: &[Tensor<f64>], build: B) -> Result<GradCheckReport>
    where
        B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
            let mut out = build(&mut g, &vars)?;
            if g.value(out).numel() != 1 {
                out = g.sum(out)?;
            }
            Ok((g, vars, out))
        };

        let (g, vars, out) = eval(leaves)?;
        let grads = g.backward(out)?;
        let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
        drop(g);

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: 0,
            worst: None,
            tolerance: self.tolerance,
        };
        let mut perturbed: Vec<Tensor<f64>> = leaves.to_vec();
        for (li, leaf) in leaves.iter().enumerate() {
            let elements: Vec<usize> = match self.max_elements {
                Some(m) if m < leaf.numel() => {
                    let mut idx = sample(&mut rng, leaf.numel(), m).into_vec();
                    idx.sort_unstable();
                    idx
                }
                _ => (0..leaf.numel()).collect(),
            };
            for e in elements {
                let x0 = leaf.data()[e];
                perturbed[li].data_mut()[e] = x0 + self.step;
                let (g, _, out) = eval(&perturbed)?;
                let fp = g.value(out).item();
                perturbed[li].data_mut()[e] = x0 - self.step;
                let (g, _, out) = eval(&perturbed)?;
                let fm = g.value(out).item();
                perturbed[li].data_mut()[e] = x0;

                let numeric = (fp - fm) / (2.0 * self.step);
                let a = analytic[li].data()[e];
                let rel = relative_error(a, numeric);
                report.checked += 1;
                report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(rel);
                    report.worst = Some(Mismatch { leaf: li, element: e, analytic: a, numeric });
                }
            }
        }
        Ok(report)
    }
}

/// Convenience wrapper using every element of every leaf.
pub fn grad_check<B>(leaves: &[Tensor<f64>], step: f64, tolerance: f64, build: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    GradCheck { step, tolerance, ..GradCheck::default() }.run(leaves, build)
}
