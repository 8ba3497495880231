//! Extended low-power high-gain observers, one per output channel.
//!
//! Channel `k` carries `rₖ` two-dimensional blocks `ηₖ,ᵢ = (η¹ₖ,ᵢ, η²ₖ,ᵢ)`.
//! Flat layout: channel `k` starts at `2·offsetₖ`, block `i` at `+2i`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control_law::{perturbation_sigma_at, ControlError, ControllerConfig};
use crate::normal_form::{ModelError, PlantModel, PlantState, StructureIndices};

#[derive(Debug, Error)]
pub enum ObserverError {
    #[error("invalid observer gains: {0}")]
    InvalidGains(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

/// Gains `Γₖ,ᵢ = (γ¹ₖ,ᵢ, γ²ₖ,ᵢ)` and high-gain parameters `ℓₖ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverGains {
    gamma: Vec<Vec<(f64, f64)>>,
    ell: Vec<f64>,
}

/// Shipped `Γ` for orders 2 and 3.
pub fn default_gamma(r: usize) -> Option<Vec<(f64, f64)>> {
    match r {
        2 => Some(vec![(2.5, 4.6), (2.5, 1.533)]),
        3 => Some(vec![(2.5, 4.6), (2.5, 1.533), (2.5, 0.511)]),
        _ => None,
    }
}

impl ObserverGains {
    pub fn new(gamma: Vec<Vec<(f64, f64)>>, ell: Vec<f64>) -> Result<Self, ObserverError> {
        if gamma.len() != ell.len() {
            return Err(ObserverError::InvalidGains(format!(
                "{} gamma tables for {} high-gain parameters",
                gamma.len(),
                ell.len()
            )));
        }
        for (k, g) in gamma.iter().enumerate() {
            if g.iter().any(|&(a, b)| !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite())) {
                return Err(ObserverError::InvalidGains(format!("gamma of channel {} must be positive", k + 1)));
            }
        }
        if let Some(k) = ell.iter().position(|l| !(*l >= 1.0 && l.is_finite())) {
            return Err(ObserverError::InvalidGains(format!("ell[{}] = {} must be >= 1", k + 1, ell[k])));
        }
        Ok(Self { gamma, ell })
    }

    /// Default `Γ` for every channel of `ix`.
    pub fn with_default_gamma(ix: &StructureIndices, ell: Vec<f64>) -> Result<Self, ObserverError> {
        let gamma = ix
            .r()
            .iter()
            .map(|&r| default_gamma(r).ok_or_else(|| ObserverError::InvalidGains(format!("no default gamma for order {r}"))))
            .collect::<Result<_, _>>()?;
        Self::new(gamma, ell)
    }

    pub fn check(&self, ix: &StructureIndices) -> Result<(), ObserverError> {
        if self.gamma.len() != ix.m() {
            return Err(ObserverError::InvalidGains(format!("{} channels, expected {}", self.gamma.len(), ix.m())));
        }
        for (k, (g, &r)) in self.gamma.iter().zip(ix.r()).enumerate() {
            if g.len() != r {
                return Err(ObserverError::InvalidGains(format!(
                    "channel {} has {} gamma pairs but order {r}",
                    k + 1,
                    g.len()
                )));
            }
        }
        Ok(())
    }

    pub fn gamma(&self) -> &[Vec<(f64, f64)>] {
        &self.gamma
    }

    pub fn ell(&self) -> &[f64] {
        &self.ell
    }

    pub fn with_ell(&self, ell: Vec<f64>) -> Result<Self, ObserverError> {
        Self::new(self.gamma.clone(), ell)
    }
}

/// Observer state as ragged per-channel blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub blocks: Vec<Vec<[f64; 2]>>,
}

impl ObserverState {
    pub fn zeros(ix: &StructureIndices) -> Self {
        Self { blocks: ix.r().iter().map(|&r| vec![[0.0; 2]; r]).collect() }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flatten().flat_map(|b| *b).collect()
    }

    pub fn unflatten(ix: &StructureIndices, flat: &[f64]) -> Result<Self, ModelError> {
        if flat.len() != 2 * ix.total_order() {
            return Err(ModelError::Dimension(format!(
                "observer state has length {}, expected {}",
                flat.len(),
                2 * ix.total_order()
            )));
        }
        let blocks = (0..ix.m())
            .map(|k| {
                let off = 2 * ix.xi_offset(k);
                (0..ix.r()[k]).map(|i| [flat[off + 2 * i], flat[off + 2 * i + 1]]).collect()
            })
            .collect();
        Ok(Self { blocks })
    }
}

/// Rescaled estimation errors `η̃` and `σ̃ₖ = η̃²ₖ,ᵣₖ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledError {
    pub eta_tilde: Vec<Vec<[f64; 2]>>,
    pub sigma_tilde: Vec<f64>,
}

impl RescaledError {
    pub fn flatten(&self) -> Vec<f64> {
        self.eta_tilde.iter().flatten().flat_map(|b| *b).collect()
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct ObserverWorkspace {
    multipliers: Vec<f64>,
    bu: Vec<f64>,
    forcing: Vec<f64>,
}

pub fn observer_workspace(plant: &PlantModel) -> ObserverWorkspace {
    let m = plant.indices().m();
    ObserverWorkspace { multipliers: plant.workspace().multipliers, bu: vec![0.0; m], forcing: vec![0.0; m] }
}

/// Observer vector field on the flat state, without allocation.
#[allow(clippy::too_many_arguments)]
pub fn observer_rhs_into(
    plant: &PlantModel,
    cfg: &ControllerConfig,
    gains: &ObserverGains,
    eta: &[f64],
    y: &[f64],
    u: &[f64],
    out: &mut [f64],
    ws: &mut ObserverWorkspace,
) -> Result<(), ModelError> {
    let ix = plant.indices();
    let m = ix.m();
    cfg.mul_bhat_into(false, u, &mut ws.bu);
    for j in 0..m {
        let top = 2 * (ix.xi_offset(j) + ix.r()[j]) - 1;
        ws.forcing[j] = eta[top] + ws.bu[j];
    }
    if m > 1 {
        plant.multipliers_into(y, &mut ws.multipliers)?;
    }
    for k in 0..m {
        let r = ix.r()[k];
        let off = 2 * ix.xi_offset(k);
        let e = &eta[off..off + 2 * r];
        let d = &mut out[off..off + 2 * r];
        let l = gains.ell[k];
        for i in 0..r {
            let (g1, g2) = gains.gamma[k][i];
            let seed = if i == 0 { y[k] } else { e[2 * i - 1] };
            let innov = seed - e[2 * i];
            let mut d1 = e[2 * i + 1] + l * g1 * innov;
            let mut d2 = l * l * g2 * innov;
            if i + 1 < r {
                d2 += e[2 * i + 3];
                for j in 0..k {
                    let mv = plant.multiplier_slice(&ws.multipliers, k, j);
                    d1 += mv[i] * ws.forcing[j];
                    d2 += mv[i + 1] * ws.forcing[j];
                }
            }
            if i + 2 == r {
                d2 += ws.bu[k];
            }
            if i + 1 == r {
                d1 += ws.bu[k];
            }
            d[2 * i] = d1;
            d[2 * i + 1] = d2;
        }
    }
    Ok(())
}

pub fn observer_rhs(
    plant: &PlantModel,
    cfg: &ControllerConfig,
    gains: &ObserverGains,
    eta: &ObserverState,
    y: &[f64],
    u: &[f64],
) -> Result<ObserverState, ObserverError> {
    let ix = plant.indices();
    gains.check(ix)?;
    let flat = eta.flatten();
    if flat.len() != 2 * ix.total_order() || y.len() != ix.m() || u.len() != ix.m() {
        return Err(ModelError::Dimension("observer inputs do not match the structure".into()).into());
    }
    let mut out = vec![0.0; flat.len()];
    observer_rhs_into(plant, cfg, gains, &flat, y, u, &mut out, &mut observer_workspace(plant))?;
    Ok(ObserverState::unflatten(ix, &out)?)
}

/// `ξ̂ₖ,ᵢ = η¹ₖ,ᵢ` and `σ̂ₖ = η²ₖ,ᵣₖ` from a flat state.
pub fn extract_into(ix: &StructureIndices, eta: &[f64], xi_hat: &mut [f64], sigma_hat: &mut [f64]) {
    for (j, v) in xi_hat.iter_mut().enumerate() {
        *v = eta[2 * j];
    }
    for (k, s) in sigma_hat.iter_mut().enumerate() {
        *s = eta[2 * (ix.xi_offset(k) + ix.r()[k]) - 1];
    }
}

pub fn extract_estimates(ix: &StructureIndices, eta: &ObserverState) -> (Vec<f64>, Vec<f64>) {
    let mut xi_hat = vec![0.0; ix.total_order()];
    let mut sigma_hat = vec![0.0; ix.m()];
    extract_into(ix, &eta.flatten(), &mut xi_hat, &mut sigma_hat);
    (xi_hat, sigma_hat)
}

/// Observer state carrying the true signals: `η¹ₖ,ᵢ = ξₖ,ᵢ`,
/// `η²ₖ,ᵢ = ξₖ,ᵢ₊₁` and `η²ₖ,ᵣₖ = σₖ`.
pub fn embed(ix: &StructureIndices, xi: &[f64], sigma: &[f64]) -> ObserverState {
    let blocks = (0..ix.m())
        .map(|k| {
            let (off, r) = (ix.xi_offset(k), ix.r()[k]);
            (0..r)
                .map(|i| [xi[off + i], if i + 1 < r { xi[off + i + 1] } else { sigma[k] }])
                .collect()
        })
        .collect();
    ObserverState { blocks }
}

/// Rescaled errors from a flat `ξ`, the true `σ` and a flat observer state.
pub fn rescale_into(ix: &StructureIndices, ell: &[f64], xi: &[f64], sigma: &[f64], eta: &[f64], out: &mut [f64]) {
    for k in 0..ix.m() {
        let (off, r, l) = (ix.xi_offset(k), ix.r()[k], ell[k]);
        let mut p = l.powi(r as i32);
        for i in 0..r {
            let (a, b) = (2 * (off + i), 2 * (off + i) + 1);
            out[a] = p * (xi[off + i] - eta[a]);
            out[b] = if i + 1 < r { p / l * (xi[off + i + 1] - eta[b]) } else { sigma[k] - eta[b] };
            p /= l;
        }
    }
}

pub fn error_coordinates(
    plant: &PlantModel,
    cfg: &ControllerConfig,
    gains: &ObserverGains,
    x: &PlantState,
    eta: &ObserverState,
    u: &[f64],
    t: f64,
) -> Result<RescaledError, ObserverError> {
    let ix = plant.indices();
    gains.check(ix)?;
    let sigma = perturbation_sigma_at(plant, cfg, x, u, t)?;
    let mut flat = vec![0.0; 2 * ix.total_order()];
    rescale_into(ix, gains.ell(), &x.xi_flat(), &sigma, &eta.flatten(), &mut flat);
    let eta_tilde = ObserverState::unflatten(ix, &flat)?.blocks;
    let sigma_tilde = eta_tilde.iter().map(|c| c[c.len() - 1][1]).collect();
    Ok(RescaledError { eta_tilde, sigma_tilde })
}

/// `(Λ_ℓ⁻¹ ⊗ C₂)η̃`, i.e. the gap `ξ − ξ̂` recovered from `η̃`.
pub fn state_gap(ix: &StructureIndices, ell: &[f64], eta_tilde: &[f64]) -> Vec<f64> {
    let mut gap = vec![0.0; ix.total_order()];
    for k in 0..ix.m() {
        let (off, r, l) = (ix.xi_offset(k), ix.r()[k], ell[k]);
        for i in 0..r {
            gap[off + i] = eta_tilde[2 * (off + i)] / l.powi((r - i) as i32);
        }
    }
    gap
}
