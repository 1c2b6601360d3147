//! Central finite-difference verification of backward rules.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dense::Tensor;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks every coordinate of every input tensor.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, point, h, usize::MAX, 0)
}

/// Like [`grad_check`] but checks at most `per_input` randomly chosen
/// coordinates of each input.
pub fn grad_check_sampled<F>(
    f: F,
    point: &[Tensor<f64>],
    h: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = point
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(loss).to_vec()));
    }
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs = inputs
            .iter()
            .map(|x| t.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = point.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = point[i].len();
        let zeros = Tensor::zeros(point[i].shape().to_vec());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        let coords: Vec<usize> = if per_input >= n {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, per_input).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let x0 = point[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic.data()[j], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
