use serde::{Deserialize, Serialize};

use super::{shape_err, NumError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NumError::InvalidSpec(format!("bad optimizer config {self:?}")))
        }
    }
}

/// Adaptive moment estimation with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    #[cfg(test)]
    fn moments(&self) -> impl Iterator<Item = f64> + '_ {
        self.m.iter().chain(&self.v).flatten().copied()
    }

    /// Moves every parameter against its gradient. Gradients are left in
    /// place; the caller clears them.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(shape_err(
                "adam",
                format!("optimizer tracks {} tensors, got {}", self.m.len(), params.len()),
            ));
        }
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(NumError::MissingGrad(i));
        }
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.m[i].len() {
                return Err(shape_err(
                    "adam",
                    format!("parameter {i} has {} values, moments hold {}", p.len(), self.m[i].len()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad().expect("checked above").to_vec();
            for (((w, mi), vi), gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g) {
                *mi = flush(beta1 * *mi + (1.0 - beta1) * gi);
                *vi = flush(beta2 * *vi + (1.0 - beta2) * gi * gi);
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Zero for magnitudes below the normal range. Moments of parameters
/// whose gradient stays zero decay geometrically and would otherwise end
/// up subnormal, which is very slow on most CPUs.
fn flush(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}
