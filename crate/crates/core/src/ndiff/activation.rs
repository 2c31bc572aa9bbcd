use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

/// Pointwise nonlinearity used between dense layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Exact `x·Φ(x)`, not the tanh approximation.
    Gelu,
    Tanh,
    Identity,
}

/// Highest derivative order the tape can take through an activation.
pub const MAX_DERIVATIVE_ORDER: u8 = 4;

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

impl Activation {
    /// The `order`-th derivative evaluated at `x` (order 0 is the function itself).
    pub fn eval(self, order: u8, x: f64) -> f64 {
        assert!(
            order <= MAX_DERIVATIVE_ORDER,
            "activation derivative of order {order} is not supported"
        );
        match self {
            Activation::Gelu => {
                let pdf = std_normal_pdf(x);
                match order {
                    0 => x * std_normal_cdf(x),
                    1 => std_normal_cdf(x) + x * pdf,
                    2 => pdf * (2.0 - x * x),
                    3 => pdf * (x * x * x - 4.0 * x),
                    _ => pdf * (-x.powi(4) + 7.0 * x * x - 4.0),
                }
            }
            Activation::Tanh => {
                let y = x.tanh();
                let dy = 1.0 - y * y;
                match order {
                    0 => y,
                    1 => dy,
                    2 => -2.0 * y * dy,
                    3 => dy * (6.0 * y * y - 2.0),
                    _ => dy * (16.0 * y - 24.0 * y * y * y),
                }
            }
            Activation::Identity => match order {
                0 => x,
                1 => 1.0,
                _ => 0.0,
            },
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(crate::Error::Format(format!("unknown activation {other:?}"))),
        }
    }
}
