use nalgebra::{DMatrix, DVector};

use super::EditConfig;
use crate::error::{EditError, Result};
use crate::linalg::check_len;

/// Cross-entropy of `target` under logits, via log-sum-exp.
fn target_loss(logits: &DVector<f64>, target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Logit of `target` minus the best competing logit.
fn target_margin(logits: &DVector<f64>, target: usize) -> f64 {
    let rival = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[target] - rival
}

#[derive(Debug, Clone)]
pub struct ResidualFit {
    pub residual: DVector<f64>,
    /// Loss before each gradient step that was taken.
    pub losses: Vec<f64>,
    pub steps_taken: usize,
}

/// Gradient descent on the output-space residual `R` so that
/// `embed · (W k + R)` ranks `target` first.
///
/// Starts at `R = 0` and stops early once the target leads by
/// `config.early_stop_margin`. With a projector, `R ← P R` after every step.
pub fn train_residual_traced(
    w: &DMatrix<f64>,
    key: &DVector<f64>,
    target: usize,
    embed: &DMatrix<f64>,
    projector: Option<&DMatrix<f64>>,
    config: &EditConfig,
) -> Result<ResidualFit> {
    check_len(key, w.ncols(), "key vs W columns")?;
    if embed.ncols() != w.nrows() {
        return Err(EditError::DimensionMismatch {
            expected: w.nrows(),
            found: embed.ncols(),
            context: "embed columns vs W rows",
        });
    }
    if target >= embed.nrows() {
        return Err(EditError::InvalidConfig(format!("target token {target} outside vocabulary")));
    }
    if config.train_steps == 0 {
        return Err(EditError::InvalidConfig("train_steps must be >= 1".into()));
    }

    let base = w * key;
    let mut residual = DVector::zeros(w.nrows());
    let mut losses = Vec::with_capacity(config.train_steps);
    let mut steps_taken = 0;
    for step in 0..config.train_steps {
        let logits = embed * (&base + &residual);
        let loss = target_loss(&logits, target);
        if !loss.is_finite() {
            return Err(EditError::NonFiniteLoss { step });
        }
        if target_margin(&logits, target) >= config.early_stop_margin {
            break;
        }
        losses.push(loss);

        let mut err = crate::world::softmax(&logits);
        err[target] -= 1.0;
        let grad = embed.transpose() * err;
        residual.axpy(-config.learn_rate, &grad, 1.0);
        if let Some(p) = projector {
            residual = p * residual;
        }
        steps_taken += 1;
    }
    let final_loss = target_loss(&(embed * (&base + &residual)), target);
    if !final_loss.is_finite() || residual.iter().any(|x| !x.is_finite()) {
        return Err(EditError::NonFiniteLoss { step: steps_taken });
    }
    Ok(ResidualFit {
        residual,
        losses,
        steps_taken,
    })
}

pub fn train_residual(
    w: &DMatrix<f64>,
    key: &DVector<f64>,
    target: usize,
    embed: &DMatrix<f64>,
    projector: Option<&DMatrix<f64>>,
    config: &EditConfig,
) -> Result<DVector<f64>> {
    train_residual_traced(w, key, target, embed, projector, config).map(|fit| fit.residual)
}
