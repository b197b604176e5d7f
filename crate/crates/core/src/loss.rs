//! Segmentation losses and their gradients with respect to the prediction.
//!
//! The smoothed Dice loss treats each sigmoid activation as a soft set
//! membership: `1 − (2·Σ(P·T) + s) / (ΣP + ΣT + s)`. In training it is
//! evaluated per slice and averaged over the minibatch.

use std::fmt;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    DiceSmooth,
    Bce,
    Mse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::DiceSmooth => "dice_smooth",
            LossKind::Bce => "bce",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice_smooth" | "dice" => Ok(LossKind::DiceSmooth),
            "bce" => Ok(LossKind::Bce),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

fn check<F: Float>(p: &[F], t: &[F]) -> Result<()> {
    if p.len() != t.len() {
        return Err(Error::Shape(format!(
            "prediction has {} elements, target has {}",
            p.len(),
            t.len()
        )));
    }
    if t.iter().any(|&v| v != F::zero() && v != F::one()) {
        return Err(Error::Shape("target is not binary".into()));
    }
    Ok(())
}

fn dice_terms<F: Float>(p: &[F], t: &[F], smooth: F) -> (F, F) {
    let two = F::one() + F::one();
    let mut inter = F::zero();
    let mut sum = F::zero();
    for (&pi, &ti) in p.iter().zip(t) {
        inter = inter + pi * ti;
        sum = sum + pi + ti;
    }
    (two * inter + smooth, sum + smooth)
}

pub fn dice_loss<F: Float>(p: &[F], t: &[F], smooth: F) -> Result<F> {
    check(p, t)?;
    let (num, den) = dice_terms(p, t, smooth);
    Ok(if den == F::zero() { F::zero() } else { F::one() - num / den })
}

/// `∂ dice_loss / ∂ p_i = (N − 2·t_i·D) / D²` with `N`, `D` the loss numerator and denominator.
pub fn dice_loss_grad<F: Float>(p: &[F], t: &[F], smooth: F) -> Result<Vec<F>> {
    check(p, t)?;
    let (num, den) = dice_terms(p, t, smooth);
    if den == F::zero() {
        return Ok(vec![F::zero(); p.len()]);
    }
    let two = F::one() + F::one();
    let d2 = den * den;
    Ok(t.iter().map(|&ti| (num - two * ti * den) / d2).collect())
}

fn bce_eps<F: Float>() -> F {
    F::from(1e-7).expect("representable")
}

pub fn bce_loss<F: Float>(p: &[F], t: &[F]) -> Result<F> {
    check(p, t)?;
    let eps = bce_eps::<F>();
    let n = F::from(p.len().max(1)).expect("representable");
    let total = p.iter().zip(t).fold(F::zero(), |acc, (&pi, &ti)| {
        let q = pi.max(eps).min(F::one() - eps);
        acc - (ti * q.ln() + (F::one() - ti) * (F::one() - q).ln())
    });
    Ok(total / n)
}

pub fn bce_loss_grad<F: Float>(p: &[F], t: &[F]) -> Result<Vec<F>> {
    check(p, t)?;
    let eps = bce_eps::<F>();
    let n = F::from(p.len().max(1)).expect("representable");
    Ok(p.iter()
        .zip(t)
        .map(|(&pi, &ti)| {
            let q = pi.max(eps).min(F::one() - eps);
            (q - ti) / (q * (F::one() - q)) / n
        })
        .collect())
}

pub fn mse_loss<F: Float>(p: &[F], t: &[F]) -> Result<F> {
    check(p, t)?;
    let n = F::from(p.len().max(1)).expect("representable");
    Ok(p.iter()
        .zip(t)
        .fold(F::zero(), |acc, (&pi, &ti)| acc + (pi - ti) * (pi - ti))
        / n)
}

pub fn mse_loss_grad<F: Float>(p: &[F], t: &[F]) -> Result<Vec<F>> {
    check(p, t)?;
    let n = F::from(p.len().max(1)).expect("representable");
    let two = F::one() + F::one();
    Ok(p.iter().zip(t).map(|(&pi, &ti)| two * (pi - ti) / n).collect())
}

/// Mean per-image loss over a single-channel batch, and its gradient.
pub fn batch_loss(kind: LossKind, preds: &Tensor4, targets: &[f32], smooth: f32) -> Result<(f32, Tensor4)> {
    if preds.c != 1 || preds.data.len() != targets.len() {
        return Err(Error::Shape(format!(
            "batch of shape {:?} does not match {} target values",
            preds.shape(),
            targets.len()
        )));
    }
    let hw = preds.h * preds.w;
    let n = preds.n.max(1) as f32;
    let mut grad = preds.clone();
    let mut total = 0.0f64;
    for i in 0..preds.n {
        let p = preds.image(i, 0);
        let t = &targets[i * hw..(i + 1) * hw];
        let (loss, g) = match kind {
            LossKind::DiceSmooth => (dice_loss(p, t, smooth)?, dice_loss_grad(p, t, smooth)?),
            LossKind::Bce => (bce_loss(p, t)?, bce_loss_grad(p, t)?),
            LossKind::Mse => (mse_loss(p, t)?, mse_loss_grad(p, t)?),
        };
        total += loss as f64;
        grad.image_mut(i, 0)
            .iter_mut()
            .zip(g)
            .for_each(|(o, v)| *o = v / n);
    }
    Ok(((total / preds.n.max(1) as f64) as f32, grad))
}
