//! First-order optimizers over a flat list of parameter matrices.

use crate::error::{CoreError, Result};
use crate::registry::Registry;
use crate::tensor::Matrix;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    /// Applies one update. `grads[i]` pairs with `params[i]` and is multiplied
    /// by `grad_scale` first (used for norm clipping).
    fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], lr: f32, grad_scale: f32) -> Result<()>;
}

fn check_pairs(params: &[&mut Matrix], grads: &[Matrix]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(CoreError::Dimension {
            what: "optimizer parameter/gradient count".into(),
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(CoreError::Shape {
                op: "optimizer step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    Ok(())
}

fn check_finite(params: &[&mut Matrix]) -> Result<()> {
    if params.iter().all(|p| p.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::NonFinite("parameters after optimizer step"))
    }
}

#[derive(Debug, Default)]
pub struct Sgd;

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, mut params: Vec<&mut Matrix>, grads: &[Matrix], lr: f32, grad_scale: f32) -> Result<()> {
        check_pairs(&params, grads)?;
        let k = lr * grad_scale;
        for (p, g) in params.iter_mut().zip(grads) {
            for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= k * d;
            }
        }
        check_finite(&params)
    }
}

#[derive(Debug, Default)]
pub struct Adam {
    t: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, mut params: Vec<&mut Matrix>, grads: &[Matrix], lr: f32, grad_scale: f32) -> Result<()> {
        check_pairs(&params, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(CoreError::Contract("adam state does not match parameter set".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let d = d * grad_scale;
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * d;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * d * d;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        check_finite(&params)
    }
}

pub fn optimizers() -> Registry<dyn Optimizer> {
    let mut r: Registry<dyn Optimizer> = Registry::new("optimizer");
    r.register("sgd", || Box::new(Sgd)).register("adam", || Box::<Adam>::default());
    r
}
