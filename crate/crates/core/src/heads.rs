//! Linear probes over features, the meta-linear ensemble, and the
//! binary cross-entropy loss.

use crate::error::{Error, Result};
use crate::numerics::{affine_vec, softmax, Matrix, ProbVector};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// A fully connected layer `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(in_dim, out_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        affine_vec(x, &self.weights, &self.bias)
    }

    /// Accumulates `xᵀ·dy` and `dy` into `grads`; returns `W·dy`.
    pub(crate) fn backward(&self, x: &[f64], dy: &[f64], grads: &mut DenseLayer) -> Vec<f64> {
        let out = self.out_dim();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = grads.weights.row_mut(i);
            for j in 0..out {
                row[j] += xi * dy[j];
            }
        }
        for (b, &g) in grads.bias.iter_mut().zip(dy) {
            *b += g;
        }
        (0..self.in_dim())
            .map(|i| {
                self.weights
                    .row(i)
                    .iter()
                    .zip(dy)
                    .map(|(w, g)| w * g)
                    .sum()
            })
            .collect()
    }
}

/// Probe for one feature branch: a single linear layer, optionally
/// preceded by a tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchHead {
    pub hidden: Option<DenseLayer>,
    pub output: DenseLayer,
}

impl BranchHead {
    pub fn linear(in_dim: usize) -> Self {
        Self {
            hidden: None,
            output: DenseLayer::zeros(in_dim, 2),
        }
    }

    pub fn with_hidden(in_dim: usize, hidden_units: usize) -> Self {
        Self {
            hidden: Some(DenseLayer::zeros(in_dim, hidden_units)),
            output: DenseLayer::zeros(hidden_units, 2),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.output).in_dim()
    }
}

/// Hidden activations (if any) and class probabilities of a branch.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub hidden: Option<Vec<f64>>,
    pub probs: ProbVector,
}

pub fn branch_forward(feature: &[f64], head: &BranchHead) -> Result<ProbVector> {
    Ok(branch_forward_traced(feature, head)?.probs)
}

pub(crate) fn branch_forward_traced(feature: &[f64], head: &BranchHead) -> Result<BranchOutput> {
    if feature.len() != head.in_dim() {
        return Err(Error::Dimension(format!(
            "branch head expects width {}, feature has width {}",
            head.in_dim(),
            feature.len()
        )));
    }
    match &head.hidden {
        None => Ok(BranchOutput {
            hidden: None,
            probs: softmax(&head.output.forward(feature)?)?,
        }),
        Some(layer) => {
            let h: Vec<f64> = layer.forward(feature)?.into_iter().map(f64::tanh).collect();
            let probs = softmax(&head.output.forward(&h)?)?;
            Ok(BranchOutput {
                hidden: Some(h),
                probs,
            })
        }
    }
}

/// Meta-linear classifier over the concatenated inputs of `z` branches.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaHead {
    pub layer: DenseLayer,
    pub z: usize,
}

impl MetaHead {
    /// Meta head over `z` branch probability pairs.
    pub fn over_probabilities(z: usize) -> Self {
        Self {
            layer: DenseLayer::zeros(2 * z, 2),
            z,
        }
    }

    /// Meta head over raw concatenated features of total width `width`.
    pub fn over_features(z: usize, width: usize) -> Self {
        Self {
            layer: DenseLayer::zeros(width, 2),
            z,
        }
    }
}

/// Softmax over the affine map of the concatenated branch probabilities,
/// in branch order.
pub fn meta_forward(branch_probs: &[ProbVector], head: &MetaHead) -> Result<ProbVector> {
    if branch_probs.len() != head.z {
        return Err(Error::Dimension(format!(
            "meta head expects {} branch outputs, got {}",
            head.z,
            branch_probs.len()
        )));
    }
    let input: Vec<f64> = branch_probs
        .iter()
        .flat_map(|p| p.as_slice().iter().copied())
        .collect();
    softmax(&head.layer.forward(&input)?)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `-ln p_y` with the probability of the true class clamped first.
pub fn cross_entropy(label: u8, y_hat: &ProbVector) -> Result<f64> {
    if label > 1 {
        return Err(Error::InvalidInput(format!("label {label} is not binary")));
    }
    if y_hat.len() != 2 {
        return Err(Error::Dimension(format!(
            "cross_entropy expects 2 classes, got {}",
            y_hat.len()
        )));
    }
    Ok(-clamp_prob(y_hat[usize::from(label)]).ln())
}

/// Gradient of [`cross_entropy`] with respect to the logits that produced
/// `y_hat`. Zero where the clamp is active.
pub(crate) fn cross_entropy_logit_grad(label: u8, y_hat: &ProbVector) -> [f64; 2] {
    let p = y_hat[usize::from(label)];
    if p != clamp_prob(p) {
        return [0.0, 0.0];
    }
    let y = f64::from(label);
    [y_hat[0] - (1.0 - y), y_hat[1] - y]
}

/// Backpropagates a gradient on branch probabilities to its logits.
pub(crate) fn softmax_backward(p: &ProbVector, dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.as_slice().iter().zip(dp).map(|(a, b)| a * b).sum();
    p.as_slice()
        .iter()
        .zip(dp)
        .map(|(pi, gi)| pi * (gi - inner))
        .collect()
}
