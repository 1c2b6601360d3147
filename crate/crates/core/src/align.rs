//! Conditional gradient reversal, the domain discriminator and the weighted
//! adversarial loss.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Mlp, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainLabel {
    pub domain_id: u32,
    pub is_primary: bool,
}

impl DomainLabel {
    pub fn new(domain_id: u32, primary_id: u32) -> Self {
        Self {
            domain_id,
            is_primary: domain_id == primary_id,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainWeights {
    pub w_main: f64,
    pub w_aux: f64,
}

impl Default for DomainWeights {
    fn default() -> Self {
        Self {
            w_main: 1.0,
            w_aux: 1.0,
        }
    }
}

impl DomainWeights {
    pub fn for_label(&self, label: DomainLabel) -> f64 {
        if label.is_primary {
            self.w_main
        } else {
            self.w_aux
        }
    }
}

/// Inverse-size weights that give both classes a total mass of `T/2`.
///
/// With no auxiliary data the auxiliary weight is irrelevant and set to 1.
pub fn domain_weights(sizes: &BTreeMap<u32, usize>, primary_id: u32) -> Result<DomainWeights> {
    let n_main = *sizes
        .get(&primary_id)
        .ok_or_else(|| Error::InvalidBatch(format!("primary domain {primary_id} has no size entry")))?;
    if let Some((id, _)) = sizes.iter().find(|(_, &n)| n == 0) {
        return Err(Error::InvalidBatch(format!("domain {id} has zero samples")));
    }
    let n_aux: usize = sizes.iter().filter(|(&id, _)| id != primary_id).map(|(_, &n)| n).sum();
    let total = (n_main + n_aux) as f64;
    if n_aux == 0 {
        return Ok(DomainWeights {
            w_main: 1.0,
            w_aux: 1.0,
        });
    }
    Ok(DomainWeights {
        w_main: total / (2.0 * n_main as f64),
        w_aux: total / (2.0 * n_aux as f64),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// No discriminator branch at all.
    None,
    /// Reverse gradients of every sample.
    Grl,
    /// Reverse auxiliary samples, block primary samples.
    #[default]
    Cgrl,
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignMode::None => "none",
            AlignMode::Grl => "grl",
            AlignMode::Cgrl => "cgrl",
        })
    }
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AlignMode::None),
            "grl" => Ok(AlignMode::Grl),
            "cgrl" => Ok(AlignMode::Cgrl),
            other => Err(Error::Config(format!("unknown align mode {other:?} (expected none, grl or cgrl)"))),
        }
    }
}

/// Per-row backward multipliers for the reversal layer of `mode`.
pub fn reversal_scales(mode: AlignMode, labels: &[DomainLabel], lambda: f64) -> Vec<f64> {
    labels
        .iter()
        .map(|l| match mode {
            AlignMode::None => 1.0,
            AlignMode::Grl => -lambda,
            AlignMode::Cgrl if l.is_primary => 0.0,
            AlignMode::Cgrl => -lambda,
        })
        .collect()
}

fn check_rows<S: Scalar>(tape: &Tape<S>, x: Var, labels: &[DomainLabel], lambda: f64) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::InvalidBatch(format!("reversal layer expects N x C features with C > 0, got {shape:?}")));
    }
    if shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::InvalidBatch(format!("{} feature rows but {} labels", shape[0], labels.len())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidBatch(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(())
}

/// Conditional reversal layer: identity forward; backward scales auxiliary
/// rows by `-lambda` and zeroes primary rows.
pub fn cgrl<S: Scalar>(tape: &mut Tape<S>, x: Var, labels: &[DomainLabel], lambda: f64) -> Result<Var> {
    reverse(tape, x, labels, lambda, AlignMode::Cgrl)
}

/// Unconditional reversal layer: backward scales every row by `-lambda`.
pub fn grl<S: Scalar>(tape: &mut Tape<S>, x: Var, labels: &[DomainLabel], lambda: f64) -> Result<Var> {
    reverse(tape, x, labels, lambda, AlignMode::Grl)
}

pub fn reverse<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    labels: &[DomainLabel],
    lambda: f64,
    mode: AlignMode,
) -> Result<Var> {
    check_rows(tape, x, labels, lambda)?;
    let scales: Vec<S> = reversal_scales(mode, labels, lambda).into_iter().map(S::of).collect();
    tape.grad_scale_rows(x, &scales)
}

/// Features and labels for one adversarial loss evaluation.
#[derive(Clone, Debug)]
pub struct AlignmentBatch<'a> {
    /// `N x C` pooled encoder features.
    pub features: Var,
    pub labels: &'a [DomainLabel],
    pub lambda: f64,
    pub weights: DomainWeights,
}

/// MLP `C -> hidden -> 1` with a sigmoid output.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub mlp: Mlp,
    pub input: usize,
}

impl Discriminator {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, input: usize, hidden: usize) -> Self {
        Self {
            mlp: Mlp::new(b, &[input, hidden, 1]),
            input,
        }
    }

    /// Primary-domain probability per row, shape `N x 1`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.input {
            return Err(Error::shape("discriminator", shape, &[0, self.input]));
        }
        let logits = self.mlp.forward(g, x)?;
        g.sigmoid(logits)
    }
}

/// Weighted adversarial loss on discriminator outputs `probs` (`N x 1`).
pub fn weighted_domain_bce<S: Scalar>(
    tape: &mut Tape<S>,
    probs: Var,
    labels: &[DomainLabel],
    weights: DomainWeights,
) -> Result<Var> {
    let n = labels.len();
    if tape.shape(probs) != [n, 1] {
        return Err(Error::shape("cgrl loss", tape.shape(probs), &[n, 1]));
    }
    let target = Tensor::from_fn([n, 1], |i| if labels[i].is_primary { S::one() } else { S::zero() });
    let w = Tensor::from_fn([n, 1], |i| S::of(weights.for_label(labels[i])));
    tape.bce(probs, &target, Some(&w))
}

/// Reversal layer, discriminator and weighted loss in one call.
pub fn cgrl_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    batch: &AlignmentBatch<'_>,
    disc: &Discriminator,
    mode: AlignMode,
) -> Result<Var> {
    let reversed = reverse(g, batch.features, batch.labels, batch.lambda, mode)?;
    let probs = disc.forward(g, reversed)?;
    weighted_domain_bce(g, probs, batch.labels, batch.weights)
}

/// `lambda` at a given optimizer step under linear warm-up over the first
/// `warmup_frac` of `total_steps`.
pub fn lambda_at(lambda: f64, warmup_frac: f64, step: usize, total_steps: usize) -> f64 {
    let warm = warmup_frac * total_steps as f64;
    if warm <= 0.0 {
        return lambda;
    }
    lambda * ((step as f64 + 1.0) / warm).min(1.0)
}
