//! Adam with decoupled weight decay over an explicit parameter list.
//!
//! Only registered parameters are ever written, which is what keeps frozen
//! groups bitwise unchanged.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

struct Slot {
    var: Var,
    decay: bool,
    m: Tensor,
    v: Tensor,
}

pub struct AdamW {
    slots: Vec<Slot>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            slots: Vec::new(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
        }
    }

    /// Registers a parameter. `decay` enables weight decay for it.
    pub fn add(&mut self, var: &Var, decay: bool) -> Result<()> {
        if self
            .slots
            .iter()
            .any(|s| s.var.as_tensor().id() == var.as_tensor().id())
        {
            return Ok(());
        }
        self.slots.push(Slot {
            var: var.clone(),
            decay,
            m: var.as_tensor().zeros_like()?,
            v: var.as_tensor().zeros_like()?,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn contains(&self, var: &Var) -> bool {
        self.slots
            .iter()
            .any(|s| s.var.as_tensor().id() == var.as_tensor().id())
    }

    /// One update at learning rate `lr`. Parameters without a gradient are skipped.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // Moments must not hold on to the graph that produced `g`.
            let g = &g.detach();
            slot.m = ((&slot.m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            slot.v = ((&slot.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let mut theta = slot.var.as_tensor().detach();
            if slot.decay && self.weight_decay > 0.0 {
                theta = (&theta * (1.0 - lr * self.weight_decay))?;
            }
            slot.var.set(&(theta - (update * lr)?)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;

    #[test]
    fn minimizes_a_quadratic_and_skips_unregistered() {
        let dev = Device::Cpu;
        let x = Var::new(&[3.0f64, -2.0], &dev).unwrap();
        let frozen = Var::new(&[1.0f64], &dev).unwrap();
        let mut opt = AdamW::new(0.0);
        opt.add(&x, true).unwrap();
        for _ in 0..500 {
            let loss = (x.as_tensor().sqr().unwrap().sum_all().unwrap()
                + frozen.as_tensor().sum_all().unwrap())
            .unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&grads, 0.05).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-2), "{v:?}");
        assert_eq!(frozen.as_tensor().to_vec1::<f64>().unwrap(), vec![1.0]);
    }

    #[test]
    fn first_step_applies_decoupled_decay_and_unit_update() {
        let dev = Device::Cpu;
        let x = Var::new(&[2.0f64], &dev).unwrap();
        let mut opt = AdamW::new(0.5);
        opt.add(&x, true).unwrap();
        let loss = (x.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&grads, 0.1).unwrap();
        let v = x.as_tensor().to_vec1::<f64>().unwrap()[0];
        // bias-corrected first step moves by lr * g/|g|, decay scales by (1 - lr*wd)
        let expected = 2.0 * (1.0 - 0.05) - 0.1 * 3.0 / (3.0 + 1e-8);
        assert!((v - expected).abs() < 1e-12, "{v}");
    }
}
