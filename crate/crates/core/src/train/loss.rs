//! Reconstruction, entropy and combined objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{neg_w_ln_w, Graph, Mat, Var};

/// Which terms enter the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// `rec + λ·entr`
    #[default]
    Both,
    /// `rec` only.
    Rec,
    /// `entr` only.
    Entr,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "rec" => Ok(Self::Rec),
            "entr" => Ok(Self::Entr),
            other => Err(Error::Config(format!(
                "unknown loss mode {other:?} (expected both, rec or entr)"
            ))),
        }
    }
}

/// `(1/N) Σ_s ‖X_s − X̂_s‖²_F`
pub fn reconstruction_loss(inputs: &[Mat], reconstructions: &[Mat]) -> Result<f64> {
    if inputs.len() != reconstructions.len() || inputs.is_empty() {
        return Err(Error::shape(
            format!("{} non-empty windows", inputs.len()),
            format!("{} reconstructions", reconstructions.len()),
        ));
    }
    let mut total = 0.0;
    for (x, xh) in inputs.iter().zip(reconstructions) {
        if x.dim() != xh.dim() {
            return Err(Error::shape(
                format!("{:?}", x.dim()),
                format!("{:?}", xh.dim()),
            ));
        }
        total += x
            .iter()
            .zip(xh.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / inputs.len() as f64)
}

/// `(1/N) Σ_s Σ_t Σ_i −w ln w`, natural log, `0·ln 0 = 0`.
pub fn entropy_loss(read_weights: &[Mat]) -> Result<f64> {
    if read_weights.is_empty() {
        return Err(Error::Data("entropy loss needs at least one window".into()));
    }
    let mut total = 0.0;
    for w in read_weights {
        if let Some(bad) = w.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "read weight {bad} is not a probability"
            )));
        }
        total += w.iter().map(|&v| neg_w_ln_w(v)).sum::<f64>();
    }
    Ok(total / read_weights.len() as f64)
}

pub fn total_loss(rec: f64, entr: f64, lambda: f64) -> f64 {
    rec + lambda * entr
}

/// Objective terms as graph handles.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub total: Var,
    pub rec: Var,
    pub entr: Var,
}

/// Builds the objective over `windows` windows stacked along rows.
pub fn objective_vars(
    g: &mut Graph,
    reconstruction: Var,
    target: Var,
    read_weights: Var,
    windows: usize,
    lambda: f64,
    mode: LossMode,
) -> ObjectiveVars {
    let inv_n = 1.0 / windows as f64;
    let diff = g.sub(reconstruction, target);
    let sq = g.sum_squares(diff);
    let rec = g.scale(sq, inv_n);
    let ent = g.entropy(read_weights);
    let entr = g.scale(ent, inv_n);
    let total = match mode {
        LossMode::Both => {
            let weighted = g.scale(entr, lambda);
            g.add(rec, weighted)
        }
        LossMode::Rec => g.scale(rec, 1.0),
        LossMode::Entr => g.scale(entr, 1.0),
    };
    ObjectiveVars { total, rec, entr }
}
