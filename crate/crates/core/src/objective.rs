//! Next-token cross-entropy with a position mask, plus the z-loss penalty on
//! the softmax normaliser.
//!
//! Both terms average over unmasked positions and share the same mask.

use crate::error::{Error, Result};
use crate::numerics::{kernels, Graph, Scalar, Tensor, Var};
use crate::TokenId;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Nats per unmasked token.
    pub cross_entropy: Scalar,
    pub z_loss: Scalar,
    pub total: Scalar,
    pub unmasked_token_count: usize,
}

/// Graph nodes of a composed loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cross_entropy: Var,
    pub z_loss: Var,
    pub total: Var,
    pub unmasked_token_count: usize,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            cross_entropy: g.value(self.cross_entropy).data()[0],
            z_loss: g.value(self.z_loss).data()[0],
            total: g.value(self.total).data()[0],
            unmasked_token_count: self.unmasked_token_count,
        }
    }
}

fn rows(logits: &Tensor, targets: usize, mask: &[bool]) -> Result<usize> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!("logits must be [seq, vocab], got {:?}", logits.shape())));
    }
    let seq = logits.shape()[0];
    if targets != seq || mask.len() != seq {
        return Err(Error::shape(format!(
            "{seq} logit rows, {targets} targets, {} mask bits",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::AllMasked);
    }
    Ok(seq)
}

/// Mean negative log-likelihood of `targets` over unmasked rows.
pub fn cross_entropy_masked(logits: &Tensor, targets: &[TokenId], mask: &[bool]) -> Result<Scalar> {
    let seq = rows(logits, targets.len(), mask)?;
    let vocab = logits.last_dim();
    let (mut total, mut n) = (0.0, 0usize);
    for r in (0..seq).filter(|&r| mask[r]) {
        let t = targets[r] as usize;
        if t >= vocab {
            return Err(Error::TokenOutOfRange { id: targets[r], size: vocab });
        }
        let row = logits.row(r);
        total += kernels::logsumexp(row) - row[t];
        n += 1;
    }
    Ok(total / n as Scalar)
}

/// `coeff · mean (log Z)²` over unmasked rows.
pub fn z_loss(logits: &Tensor, coeff: Scalar, mask: &[bool]) -> Result<Scalar> {
    let seq = rows(logits, mask.len(), mask)?;
    if coeff < 0.0 {
        return Err(Error::config("z-loss coefficient must be non-negative"));
    }
    let (mut total, mut n) = (0.0, 0usize);
    for r in (0..seq).filter(|&r| mask[r]) {
        let lz = kernels::logsumexp(logits.row(r));
        total += lz * lz;
        n += 1;
    }
    Ok(coeff * total / n as Scalar)
}

pub fn total_loss(
    logits: &Tensor,
    targets: &[TokenId],
    mask: &[bool],
    z_loss_coeff: Scalar,
) -> Result<LossBreakdown> {
    let cross_entropy = cross_entropy_masked(logits, targets, mask)?;
    let z = z_loss(logits, z_loss_coeff, mask)?;
    Ok(LossBreakdown {
        cross_entropy,
        z_loss: z,
        total: cross_entropy + z,
        unmasked_token_count: mask.iter().filter(|&&m| m).count(),
    })
}

/// Differentiable form of [`total_loss`].
pub fn total_loss_graph(
    g: &mut Graph,
    logits: Var,
    targets: &[TokenId],
    mask: &[bool],
    z_loss_coeff: Scalar,
) -> Result<LossVars> {
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let cross_entropy = g.cross_entropy(logits, &idx, mask)?;
    let z = g.z_loss(logits, mask, z_loss_coeff)?;
    let total = g.add(cross_entropy, z)?;
    Ok(LossVars {
        cross_entropy,
        z_loss: z,
        total,
        unmasked_token_count: mask.iter().filter(|&&m| m).count(),
    })
}

/// Inputs and targets for next-token prediction over one sequence: position
/// `i` predicts token `i + 1`, and its mask bit is the target's.
pub fn shift_for_next_token<'a>(
    tokens: &'a [TokenId],
    loss_mask: &[bool],
) -> Result<(&'a [TokenId], &'a [TokenId], Vec<bool>)> {
    if tokens.len() != loss_mask.len() {
        return Err(Error::shape("token and mask lengths differ"));
    }
    if tokens.len() < 2 {
        return Err(Error::Empty("next-token prediction needs at least two tokens".into()));
    }
    Ok((
        &tokens[..tokens.len() - 1],
        &tokens[1..],
        loss_mask[1..].to_vec(),
    ))
}
