//! Mask losses and token–mask cycle consistency.

use crate::config::LossWeights;
use crate::error::{contract, Result};
use crate::grounding::similarity_map;
use crate::imaging::{gaussian_smooth, nearest_resize, resize_long_side_pad, GaussianSpec, GridMap};
use crate::tensor::{Real, Var};

pub const DICE_SMOOTH: f64 = 1.0;

/// Gaussian-softened copy of a binary mask.
pub fn soften_mask<T: Real>(mask: &GridMap<T>, spec: &GaussianSpec) -> Result<GridMap<T>> {
    gaussian_smooth(mask, spec)
}

/// The normalized responses taken to image resolution, `[h, w]`.
pub fn token_map_upsampled<'t, T: Real>(raw: Var<'t, T>, h: usize, w: usize, l_vl: usize) -> Result<Var<'t, T>> {
    Ok(similarity_map(raw, h, w, l_vl)?.upsampled)
}

/// Token-grid target: long-side resize and pad to `l_vl`, nearest down to
/// `grid × grid`, soften on the grid, flatten row-major.
pub fn downsample_target<T: Real>(mask: &GridMap<T>, grid: usize, l_vl: usize, spec: &GaussianSpec) -> Result<Vec<T>> {
    let (padded, _, _) = resize_long_side_pad(mask, l_vl)?;
    let tokens = nearest_resize(&padded, grid, grid)?;
    Ok(gaussian_smooth(&tokens, spec)?.data)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<'t, T: Real>(p: Var<'t, T>, t: Var<'t, T>) -> Result<Var<'t, T>> {
    p.bce(t)
}

/// `1 - (2 Σ p t + 1) / (Σ p + Σ t + 1)`.
pub fn dice_loss<'t, T: Real>(p: Var<'t, T>, t: Var<'t, T>) -> Result<Var<'t, T>> {
    p.dice(t, T::lit(DICE_SMOOTH))
}

/// `λ_bce · bce + λ_dice · dice`.
pub fn weighted_bce_dice<'t, T: Real>(p: Var<'t, T>, t: Var<'t, T>, w: &LossWeights) -> Result<Var<'t, T>> {
    if p.shape() != t.shape() {
        return Err(contract(
            "mask loss",
            format!("prediction {:?} and target {:?} differ", p.shape(), t.shape()),
        ));
    }
    Ok(bce_loss(p, t)?
        .scale(T::lit(w.bce))
        .add(dice_loss(p, t)?.scale(T::lit(w.dice)))?)
}

/// Token-to-mask term: upsampled responses against the softened mask.
pub fn loss_t2m<'t, T: Real>(s_up: Var<'t, T>, m_sigma: Var<'t, T>, w: &LossWeights) -> Result<Var<'t, T>> {
    weighted_bce_dice(s_up, m_sigma, w)
}

/// Mask-to-token term: normalized responses against the token-grid target.
pub fn loss_m2t<'t, T: Real>(s_norm: Var<'t, T>, m_down: Var<'t, T>, w: &LossWeights) -> Result<Var<'t, T>> {
    let (a, b) = (s_norm.value().numel(), m_down.value().numel());
    if a != b {
        return Err(contract("loss_m2t", format!("{a} responses against {b} targets")));
    }
    weighted_bce_dice(s_norm.reshape([a])?, m_down.reshape([b])?, w)
}

pub fn loss_tmcc<'t, T: Real>(t2m: Var<'t, T>, m2t: Var<'t, T>) -> Result<Var<'t, T>> {
    t2m.add(m2t)
}

/// Scalar components of the total objective.
#[derive(Clone, Debug)]
pub struct LossTerms<'t, T: Real> {
    pub mask: Var<'t, T>,
    pub tmcc: Option<Var<'t, T>>,
    pub total: Var<'t, T>,
}

/// `λ_txt · txt + λ_mask · (λ_bce · bce(σ(logits), M) + λ_dice · dice(σ(logits), M)) + λ_TMCC · tmcc`.
pub fn loss_total<'t, T: Real>(
    logits: Var<'t, T>,
    mask: Var<'t, T>,
    tmcc: Option<Var<'t, T>>,
    external_txt: Option<Var<'t, T>>,
    w: &LossWeights,
) -> Result<LossTerms<'t, T>> {
    let mask_loss = weighted_bce_dice(logits.sigmoid(), mask, w)?;
    let mut total = mask_loss.scale(T::lit(w.mask));
    if let Some(t) = tmcc {
        total = total.add(t.scale(T::lit(w.tmcc)))?;
    }
    if let Some(txt) = external_txt {
        total = total.add(txt.reshape(Vec::<usize>::new())?.scale(T::lit(w.txt)))?;
    }
    Ok(LossTerms {
        mask: mask_loss,
        tmcc,
        total,
    })
}
