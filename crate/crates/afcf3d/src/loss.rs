//! Training losses: binary cross-entropy plus Dice overlap, summed without
//! weighting.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor5};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before the logs; the
/// clamp is treated as a hard stop (zero gradient outside).
pub const CLAMP: f64 = 1e-7;
/// Smoothing of the Dice ratio; defines the all-empty case as loss 0.
pub const DICE_EPS: f64 = 1e-7;

fn check_target<E: Element>(g: &Graph<E>, p: NodeId, t: &Tensor5<E>) -> Result<()> {
    let ps = g.value(p).shape;
    if ps != t.shape {
        return Err(Error::config(format!(
            "loss shapes differ: prediction {ps:?} vs target {:?}",
            t.shape
        )));
    }
    if t.data().iter().any(|&v| v != E::zero() && v != E::one()) {
        return Err(Error::config("loss target must be strictly binary"));
    }
    Ok(())
}

/// Mean binary cross-entropy `-(1/N) * sum(t*log p + (1-t)*log(1-p))`.
pub fn bce_loss<E: Element>(g: &mut Graph<E>, p: NodeId, t: &Tensor5<E>) -> Result<NodeId> {
    check_target(g, p, t)?;
    let pv = g.value(p).clone();
    let n = pv.numel();
    let inv_n = 1.0 / n as f64;
    let lo = CLAMP;
    let hi = 1.0 - CLAMP;
    let mut acc = 0.0f64;
    for (&pi, &ti) in pv.data().iter().zip(t.data()) {
        let pc = pi.to_f64x().clamp(lo, hi);
        let tv = ti.to_f64x();
        acc -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
    }
    g.add_flops(n as u64 * 6);
    let tgt = t.clone();
    let shape = pv.shape;
    g.push(
        Tensor5::scalar(E::from_real(acc * inv_n)),
        vec![p],
        Box::new(move |gout| {
            let go = gout.item().to_f64x();
            let d: Vec<E> = pv
                .data()
                .iter()
                .zip(tgt.data())
                .map(|(&pi, &ti)| {
                    let praw = pi.to_f64x();
                    if praw < lo || praw > hi {
                        return E::zero();
                    }
                    let tv = ti.to_f64x();
                    E::from_real(go * inv_n * (-tv / praw + (1.0 - tv) / (1.0 - praw)))
                })
                .collect();
            vec![Some(Tensor5::new(shape, d))]
        }),
    )
}

/// One minus the smoothed Dice coefficient
/// `(2 * sum(t*p) + eps) / (sum t + sum p + eps)`.
pub fn dice_loss<E: Element>(g: &mut Graph<E>, p: NodeId, t: &Tensor5<E>) -> Result<NodeId> {
    check_target(g, p, t)?;
    let pv = g.value(p).clone();
    let mut inter = 0.0f64;
    let mut sum_p = 0.0f64;
    let mut sum_t = 0.0f64;
    for (&pi, &ti) in pv.data().iter().zip(t.data()) {
        let (pf, tf) = (pi.to_f64x(), ti.to_f64x());
        inter += pf * tf;
        sum_p += pf;
        sum_t += tf;
    }
    let denom = sum_t + sum_p + DICE_EPS;
    let coeff = (2.0 * inter + DICE_EPS) / denom;
    g.add_flops(pv.numel() as u64 * 3);
    let tgt = t.clone();
    let shape = pv.shape;
    g.push(
        Tensor5::scalar(E::from_real(1.0 - coeff)),
        vec![p],
        Box::new(move |gout| {
            let go = gout.item().to_f64x();
            // d/dp_i [1 - (2I+e)/D] = -(2 t_i D - (2I+e)) / D^2.
            let num = 2.0 * inter + DICE_EPS;
            let d: Vec<E> = tgt
                .data()
                .iter()
                .map(|&ti| {
                    let tv = ti.to_f64x();
                    E::from_real(go * -(2.0 * tv * denom - num) / (denom * denom))
                })
                .collect();
            vec![Some(Tensor5::new(shape, d))]
        }),
    )
}

/// Component nodes of one hybrid loss evaluation.
pub struct HybridLoss {
    pub total: NodeId,
    pub bce: NodeId,
    pub dice: NodeId,
}

/// Unweighted sum of the two losses.
pub fn hybrid_loss<E: Element>(
    g: &mut Graph<E>,
    p: NodeId,
    t: &Tensor5<E>,
) -> Result<HybridLoss> {
    let bce = bce_loss(g, p, t)?;
    let dice = dice_loss(g, p, t)?;
    let total = crate::ops::add(g, bce, dice)?;
    Ok(HybridLoss { total, bce, dice })
}
