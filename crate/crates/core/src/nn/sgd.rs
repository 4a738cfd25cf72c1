use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Plain or momentum SGD over an ordered parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: Option<f64>,
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, momentum: None, velocity: Vec::new() }
    }

    pub fn with_momentum(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Contract(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self { learning_rate, momentum: Some(momentum), velocity: Vec::new() })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// `p ← p − η·g`, or with momentum `v ← μv + g; p ← p − η·v`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "parameter {i} has shape {:?} but gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        let lr = self.learning_rate;
        match self.momentum {
            None => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            Some(mu) => {
                if self.velocity.is_empty() {
                    self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                }
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
                    for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vv = mu * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
        }
        for (i, p) in params.iter().enumerate() {
            p.check_finite(&format!("parameter {i}"))?;
        }
        Ok(())
    }
}
