//! Difficulty-based re-weighting of the shape-related vs shape-erased
//! objectives from representation-level gradient norms.

use crate::array::Array;
use crate::error::{Error, Result};

/// Objective weights; always sums to one exactly.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct AlphaPair {
    pub alpha_sr: f64,
    pub alpha_se: f64,
}

impl AlphaPair {
    pub fn even() -> Self {
        AlphaPair {
            alpha_sr: 0.5,
            alpha_se: 0.5,
        }
    }
}

/// Weight each objective by its share of the squared gradient norm taken at
/// the integrated representation: the objective with the larger gradient norm
/// is the harder one and receives the larger weight. Inputs are treated as
/// constants; no gradient flows through the weights. Both norms zero falls
/// back to an even split.
pub fn reweight(grad_sr_z: &Array, grad_se_z: &Array) -> Result<AlphaPair> {
    if grad_sr_z.shape() != grad_se_z.shape() {
        return Err(Error::ShapeMismatch {
            context: "reweight".into(),
            left: grad_sr_z.shape().to_vec(),
            right: grad_se_z.shape().to_vec(),
        });
    }
    let sr = grad_sr_z.sq_norm();
    let se = grad_se_z.sq_norm();
    if sr + se == 0.0 {
        return Ok(AlphaPair::even());
    }
    let alpha_sr = sr / (sr + se);
    Ok(AlphaPair {
        alpha_sr,
        alpha_se: 1.0 - alpha_sr,
    })
}
