use crate::error::{Error, Result};

/// Constants of the smoothness/variance assumptions plus the training
/// hyperparameters the bound depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub l0: f64,
    pub lstar: f64,
    pub l1: f64,
    pub l2: f64,
    pub b: f64,
    pub sigma2: f64,
    pub classes: usize,
    pub epochs: usize,
    pub eta: f64,
    pub xi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundResult {
    pub omega1: f64,
    pub omega2: f64,
    pub denominator: f64,
    /// Minimum number of rounds, or `None` when the denominator is not
    /// positive and no round count satisfies the bound.
    pub r_min: Option<f64>,
    pub eta_max: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l0, self.lstar, self.l1, self.l2, self.b, self.sigma2, self.eta, self.xi];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("bound inputs must be finite".into()));
        }
        if self.l2 < 0.0 || self.b < 0.0 || self.sigma2 < 0.0 {
            return Err(Error::InvalidInput("L2, B and sigma^2 must be non-negative".into()));
        }
        if !(self.l1 > 0.0 && self.eta > 0.0 && self.xi > 0.0) {
            return Err(Error::InvalidInput("L1, eta and xi must be positive".into()));
        }
        if self.classes == 0 || self.epochs == 0 {
            return Err(Error::InvalidInput("class count and local epochs must be positive".into()));
        }
        if self.l0 < self.lstar {
            return Err(Error::InvalidInput("initial loss must not be below the optimum".into()));
        }
        Ok(())
    }
}

/// Rounds needed for the expected gradient norm to fall below `xi`, and the
/// largest learning rate for which the bound can hold.
pub fn convergence_bound(x: &BoundInputs) -> Result<BoundResult> {
    x.validate()?;
    let e = x.epochs as f64;
    let c1 = (x.classes - 1) as f64;
    let omega1 = 2.0 * c1 * x.l2 * e * x.eta * x.b;
    let omega2 = x.l1 * e * x.eta * x.eta * x.sigma2;
    let denominator = x.xi * e * x.eta * (2.0 - x.l1 * x.eta) - omega1 - omega2;
    let r_min = (denominator > 0.0).then(|| 2.0 * (x.l0 - x.lstar) / denominator);
    let eta_max = (2.0 * x.xi - 2.0 * c1 * x.l2 * x.b) / (x.l1 * (x.xi + x.sigma2));
    Ok(BoundResult {
        omega1,
        omega2,
        denominator,
        r_min,
        eta_max,
    })
}
