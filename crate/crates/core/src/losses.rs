//! Loss families: quadratic, and margin losses ℓ(y, f) = ℓ̃(yᵀf) with the
//! constants certified for them.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseLoss {
    Exp,
    Logistic,
    Hinge,
}

impl BaseLoss {
    /// ℓ̃(z).
    pub fn eval(self, z: f64) -> f64 {
        match self {
            BaseLoss::Exp => (-z).exp(),
            BaseLoss::Logistic => {
                if z < -30.0 {
                    // log(1+e^{-z}) = -z + log1p(e^{z}) and e^{z} is tiny here
                    -z + z.exp()
                } else {
                    (-z).exp().ln_1p()
                }
            }
            BaseLoss::Hinge => (1.0 - z).max(0.0),
        }
    }

    /// ℓ̃′(z). Hinge uses 0 at the kink z = 1.
    pub fn deriv(self, z: f64) -> f64 {
        match self {
            BaseLoss::Exp => -(-z).exp(),
            BaseLoss::Logistic => {
                if z >= 0.0 {
                    let e = (-z).exp();
                    -e / (1.0 + e)
                } else {
                    -1.0 / (1.0 + z.exp())
                }
            }
            BaseLoss::Hinge => {
                if z < 1.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Left limit of ℓ̃′ at z; differs from [`deriv`](Self::deriv) only at the hinge kink.
    pub fn deriv_left(self, z: f64) -> f64 {
        match self {
            BaseLoss::Hinge if z <= 1.0 => -1.0,
            _ => self.deriv(z),
        }
    }

    /// ℓ̃″(z); identically 0 for the hinge.
    pub fn second_deriv(self, z: f64) -> f64 {
        match self {
            BaseLoss::Exp => (-z).exp(),
            BaseLoss::Logistic => {
                // e^{-|z|}/(1+e^{-|z|})², symmetric in z; avoids s(1−s) cancelling
                let e = (-z.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            BaseLoss::Hinge => 0.0,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            BaseLoss::Exp => "exp",
            BaseLoss::Logistic => "logistic",
            BaseLoss::Hinge => "hinge",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossFamily {
    /// ½(f − y)², or ½‖f − y‖² for vector outputs.
    Quadratic,
    /// Constants of the general-loss assumption on [0, z0].
    General { z0: f64, g_min: f64, g_max: f64, h_max: f64, base: BaseLoss },
    /// Constants of the exponential-type assumption.
    ExpType { g_a: f64, g_b: f64, h: f64, base: BaseLoss },
}

impl LossFamily {
    /// General-loss constants for each base loss.
    pub fn general(base: BaseLoss) -> Self {
        let (z0, g_min, g_max, h_max) = match base {
            BaseLoss::Exp => (1.0, 1.0 / E, 1.0, 1.0),
            BaseLoss::Logistic => (1.0, 1.0 / (E + 1.0), 0.5, 0.25),
            BaseLoss::Hinge => (1.0, 1.0, 1.0, 0.0),
        };
        LossFamily::General { z0, g_min, g_max, h_max, base }
    }

    /// Exponential-type constants; the hinge is not exponential-type.
    pub fn exp_type(base: BaseLoss) -> Result<Self> {
        let (g_a, g_b, h) = match base {
            BaseLoss::Exp => (1.0, 1.0, 1.0),
            BaseLoss::Logistic => (0.5, 1.0, 1.0),
            BaseLoss::Hinge => {
                return Err(Error::IncompatibleLoss("hinge is not an exponential-type loss".into()))
            }
        };
        Ok(LossFamily::ExpType { g_a, g_b, h, base })
    }

    /// Parses a config key. Margin losses get their general-loss constants;
    /// use [`exp_type`](Self::exp_type) for the global theorems.
    pub fn from_key(key: &str) -> Result<Self> {
        match key {
            "quadratic" => Ok(LossFamily::Quadratic),
            "exp" => Ok(Self::general(BaseLoss::Exp)),
            "logistic" => Ok(Self::general(BaseLoss::Logistic)),
            "hinge" => Ok(Self::general(BaseLoss::Hinge)),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (expected quadratic, exp, logistic or hinge)"
            ))),
        }
    }

    pub fn key(&self) -> &'static str {
        match self.base() {
            None => "quadratic",
            Some(b) => b.key(),
        }
    }

    pub fn base(&self) -> Option<BaseLoss> {
        match *self {
            LossFamily::Quadratic => None,
            LossFamily::General { base, .. } | LossFamily::ExpType { base, .. } => Some(base),
        }
    }

    /// ℓ̃(z) for margin families.
    pub fn eval(&self, z: f64) -> f64 {
        match self.base() {
            Some(b) => b.eval(z),
            None => panic!("eval(z) is undefined for the quadratic family; use quadratic()"),
        }
    }

    pub fn deriv(&self, z: f64) -> f64 {
        match self.base() {
            Some(b) => b.deriv(z),
            None => panic!("deriv(z) is undefined for the quadratic family"),
        }
    }

    pub fn second_deriv(&self, z: f64) -> f64 {
        match self.base() {
            Some(b) => b.second_deriv(z),
            None => panic!("second_deriv(z) is undefined for the quadratic family"),
        }
    }
}

/// ½(ŷ − y)².
pub fn quadratic(y: f64, yhat: f64) -> f64 {
    0.5 * (yhat - y) * (yhat - y)
}

/// Result of a grid verification: `pass` and the smallest slack seen per inequality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantsCheck {
    pub pass: bool,
    /// (name, min slack, where) for every checked inequality.
    pub slacks: Vec<(String, f64, f64)>,
}

fn track(slacks: &mut Vec<(String, f64, f64)>, name: &str, slack: f64, z: f64) {
    if let Some(entry) = slacks.iter_mut().find(|e| e.0 == name) {
        if slack < entry.1 {
            entry.1 = slack;
            entry.2 = z;
        }
    } else {
        slacks.push((name.to_string(), slack, z));
    }
}

fn grid(lo: f64, hi: f64, points: usize) -> impl Iterator<Item = f64> {
    let step = if points > 1 { (hi - lo) / (points - 1) as f64 } else { 0.0 };
    (0..points).map(move |k| if k + 1 == points { hi } else { lo + step * k as f64 })
}

/// Checks g_min ≤ −ℓ̃′ ≤ g_max and 0 ≤ ℓ̃″ ≤ h_max on a uniform grid over
/// [0, z0]. The derivative at the right endpoint is the limit from inside the
/// interval, which only matters for the hinge kink at z0 = 1.
pub fn verify_general_constants(family: &LossFamily, grid_points: usize) -> Result<ConstantsCheck> {
    let LossFamily::General { z0, g_min, g_max, h_max, base } = *family else {
        return Err(Error::IncompatibleLoss("verify_general_constants needs a General family".into()));
    };
    let mut slacks = Vec::new();
    for z in grid(0.0, z0, grid_points) {
        let g = -if z == z0 { base.deriv_left(z) } else { base.deriv(z) };
        let h = base.second_deriv(z);
        track(&mut slacks, "g_min <= -l'", g - g_min, z);
        track(&mut slacks, "-l' <= g_max", g_max - g, z);
        track(&mut slacks, "0 <= l''", h, z);
        track(&mut slacks, "l'' <= h_max", h_max - h, z);
    }
    let pass = slacks.iter().all(|s| s.1 >= 0.0);
    Ok(ConstantsCheck { pass, slacks })
}

/// Checks −ℓ̃′/ℓ̃ ≤ g_b and 0 ≤ ℓ̃″/ℓ̃ ≤ h on [−R, R], and g_a ≤ −ℓ̃′/ℓ̃ on [0, R].
pub fn verify_exptype_constants(family: &LossFamily, z_range: f64, grid_points: usize) -> Result<ConstantsCheck> {
    let LossFamily::ExpType { g_a, g_b, h, base } = *family else {
        return Err(Error::IncompatibleLoss("verify_exptype_constants needs an ExpType family".into()));
    };
    let mut slacks = Vec::new();
    for z in grid(-z_range, z_range, grid_points) {
        let l = base.eval(z);
        track(&mut slacks, "l > 0", l, z);
        let r1 = -base.deriv(z) / l;
        let r2 = base.second_deriv(z) / l;
        track(&mut slacks, "-l'/l <= g_b", g_b - r1, z);
        track(&mut slacks, "0 <= l''/l", r2, z);
        track(&mut slacks, "l''/l <= h", h - r2, z);
    }
    for z in grid(0.0, z_range, grid_points) {
        let r1 = -base.deriv(z) / base.eval(z);
        track(&mut slacks, "g_a <= -l'/l", r1 - g_a, z);
    }
    let pass = slacks.iter().all(|s| if s.0 == "l > 0" { s.1 > 0.0 } else { s.1 >= 0.0 });
    Ok(ConstantsCheck { pass, slacks })
}
