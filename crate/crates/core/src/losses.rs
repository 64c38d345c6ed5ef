//! Training objective: reconstruction, abundance sum-to-one, KL sparsity and
//! spatial-spectral consistency, each mean-reduced over elements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Forward;
use crate::tensor::{Axis, Element, Tape, Tensor, Var};

/// Trade-off weights of the total loss and the sparsity target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Sum-to-one term.
    pub alpha: f64,
    /// Sparsity term.
    pub beta: f64,
    /// Consistency term.
    pub gamma: f64,
    /// Sparsity target.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1e-4,
            gamma: 1.0,
            epsilon: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!("loss weights must be finite and >= 0, got {:?}", all)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::invalid(format!("sparsity target {} outside (0, 0.5)", self.epsilon)));
        }
        Ok(())
    }
}

/// Per-pixel weights `[1, h, w]` and `[1, H, W]` restricting every term to a
/// subset of LR and HR pixels.
#[derive(Clone, Copy, Debug)]
pub struct PixelMasks {
    pub lr: Var,
    pub hr: Var,
}

/// Tape handles of the four terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub reconstruction: Var,
    pub asc: Var,
    pub sparsity: Var,
    pub consistency: Var,
    pub total: Var,
}

/// Evaluated loss values, as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub reconstruction: f64,
    pub asc: f64,
    pub sparsity: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values<T: Element>(&self, tape: &Tape<T>) -> LossParts {
        let v = |x: Var| tape.value(x).data()[0].as_f64();
        LossParts {
            reconstruction: v(self.reconstruction),
            asc: v(self.asc),
            sparsity: v(self.sparsity),
            consistency: v(self.consistency),
            total: v(self.total),
        }
    }
}

fn l1<T: Element>(tape: &mut Tape<T>, a: Var, b: Var, mask: Option<Var>) -> Result<Var> {
    match mask {
        Some(m) => tape.l1_loss_masked(a, b, m),
        None => tape.l1_loss(a, b),
    }
}

fn sum_all<T: Element>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// `L1(f(X), X) + L1(g(Y), Y)`.
pub fn loss_reconstruction<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    x_rec: Var,
    y_rec: Var,
    masks: Option<PixelMasks>,
) -> Result<Var> {
    let a = l1(tape, x_rec, x, masks.map(|m| m.lr))?;
    let b = l1(tape, y_rec, y, masks.map(|m| m.hr))?;
    tape.add(a, b)
}

fn asc_branch<T: Element>(tape: &mut Tape<T>, s: Var, mask: Option<Var>) -> Result<Var> {
    let sums = tape.reduce_sum(s, Axis::Channel)?;
    let ones = tape.constant(Tensor::full(tape.value(sums).shape().to_vec(), T::one()))?;
    l1(tape, sums, ones, mask)
}

/// Mean `|1 - sum_k s_k|` over pixels, summed over both branches.
pub fn loss_asc<T: Element>(tape: &mut Tape<T>, s_hs: Var, s_ms: Var, masks: Option<PixelMasks>) -> Result<Var> {
    let a = asc_branch(tape, s_hs, masks.map(|m| m.lr))?;
    let b = asc_branch(tape, s_ms, masks.map(|m| m.hr))?;
    tape.add(a, b)
}

/// Mean `KL(eps || s)` over abundance entries, summed over both branches.
pub fn loss_sparsity<T: Element>(
    tape: &mut Tape<T>,
    s_hs: Var,
    s_ms: Var,
    epsilon: f64,
    masks: Option<PixelMasks>,
) -> Result<Var> {
    let a = tape.kl_div_mean(epsilon, s_hs, masks.map(|m| m.lr))?;
    let b = tape.kl_div_mean(epsilon, s_ms, masks.map(|m| m.hr))?;
    tape.add(a, b)
}

/// `L1(U_ms, U_hs) + L1(X_hat, X) + L1(Y_hat, Y)`.
///
/// Without the learned operators only `L1(X_hat, X)` is available, `X_hat`
/// then being the block average of the fused image.
pub fn loss_consistency<T: Element>(tape: &mut Tape<T>, fwd: &Forward, masks: Option<PixelMasks>) -> Result<Var> {
    let lr = masks.map(|m| m.lr);
    let mut terms = vec![l1(tape, fwd.fused_lr, fwd.x, lr)?];
    if let (Some(ux), Some(uy)) = (fwd.lr_msi_from_x, fwd.lr_msi_from_y) {
        terms.push(l1(tape, uy, ux, lr)?);
    }
    if let Some(ym) = fwd.fused_ms {
        terms.push(l1(tape, ym, fwd.y, masks.map(|m| m.hr))?);
    }
    sum_all(tape, &terms)
}

/// `L_R + alpha L_ASC + beta L_S + gamma L_C`.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    fwd: &Forward,
    weights: &LossWeights,
    masks: Option<PixelMasks>,
) -> Result<LossTerms> {
    let reconstruction = loss_reconstruction(tape, fwd.x, fwd.y, fwd.x_rec, fwd.y_rec, masks)?;
    let asc = loss_asc(tape, fwd.abundances.hs, fwd.abundances.ms, masks)?;
    let sparsity = loss_sparsity(tape, fwd.abundances.hs, fwd.abundances.ms, weights.epsilon, masks)?;
    let consistency = loss_consistency(tape, fwd, masks)?;
    let total = weighted_sum(tape, [reconstruction, asc, sparsity, consistency], weights)?;
    Ok(LossTerms {
        reconstruction,
        asc,
        sparsity,
        consistency,
        total,
    })
}

/// Weighted sum of already-built component terms.
pub fn weighted_sum<T: Element>(tape: &mut Tape<T>, parts: [Var; 4], weights: &LossWeights) -> Result<Var> {
    let [r, a, s, c] = parts;
    let a = tape.scale(a, weights.alpha)?;
    let s = tape.scale(s, weights.beta)?;
    let c = tape.scale(c, weights.gamma)?;
    sum_all(tape, &[r, a, s, c])
}
