//! Central finite-difference gradient checking in 64-bit arithmetic.
//!
//! The function under test is rebuilt from scratch on a fresh [`Graph<f64>`]
//! for every perturbation, so the numerical derivative never shares state with
//! the analytic backward pass it is compared against.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Finite-difference settings.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound of the relative-error denominator; gradients smaller than
    /// this are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-3, floor: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` with the largest error.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Reduces any tensor to a scalar through a fixed random projection so that
/// every output element influences the checked loss.
pub fn random_projection(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SeededRng::new(seed);
    let shape = g.value(y).shape().to_vec();
    let weights = Tensor::from_fn(&shape, |_| rng.range(-1.0, 1.0));
    let w = g.constant(weights);
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

impl GradCheck {
    /// Checks every element of every input.
    pub fn check<B>(&self, inputs: &[Tensor<f64>], build: B) -> Result<GradCheckReport>
    where
        B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let picks: Vec<(usize, usize)> =
            inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
        self.check_elements(inputs, &picks, build)
    }

    /// Checks the listed `(input, element)` coordinates only.
    pub fn check_elements<B>(
        &self,
        inputs: &[Tensor<f64>],
        picks: &[(usize, usize)],
        build: B,
    ) -> Result<GradCheckReport>
    where
        B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let analytic = analytic_gradients(inputs, &build)?;
        let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for &(i, j) in picks {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + self.step;
            let plus = evaluate(&work, &build)?;
            work[i].data_mut()[j] = orig - self.step;
            let minus = evaluate(&work, &build)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * self.step);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric, self.floor);
            if !err.is_finite() {
                return Err(Error::Contract(format!("non-finite gradient comparison at input {i}, element {j}")));
            }
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
        }
        Ok(report)
    }
}

/// Loss value of `build` on untracked inputs.
pub fn evaluate<B>(inputs: &[Tensor<f64>], build: &B) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    scalar_of(&g, out)
}

/// Backpropagated gradient of `build` with respect to every input.
pub fn analytic_gradients<B>(inputs: &[Tensor<f64>], build: &B) -> Result<Vec<Tensor<f64>>>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    Ok(vars.iter().zip(inputs).map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect())
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!("gradient check needs a scalar output, got {:?}", t.shape())));
    }
    Ok(t.item())
}
