//! Adam with bias correction, decoupled weight decay and an LR schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Cosine decay from `lr` to `lr * final_frac` over `total_steps`.
    Cosine {
        total_steps: usize,
        final_frac: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    /// Clip the global gradient norm to this value.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_schedule() -> Schedule {
    Schedule::Constant
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            grad_clip: None,
        }
    }

    pub fn cosine(mut self, total_steps: usize) -> Self {
        self.schedule = Schedule::Cosine {
            total_steps,
            final_frac: 0.0,
        };
        self
    }

    pub fn clip(mut self, norm: f64) -> Self {
        self.grad_clip = Some(norm);
        self
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real = f32> {
    pub config: AdamConfig,
    pub step: usize,
    pub seed: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamConfig, param_shapes: &[&[usize]], seed: u64) -> Self {
        OptimizerState {
            config,
            step: 0,
            seed,
            first: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Learning rate applied at the next step.
    pub fn current_lr(&self) -> f64 {
        lr_at(&self.config, self.step)
    }

    /// One Adam update. `params` and `grads` are aligned by position.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} params, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::contract(format!(
                    "param {i}: shape {:?}, grad {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    self.first[i].shape()
                )));
            }
        }
        let c = &self.config;
        let lr = lr_at(c, self.step);
        self.step += 1;
        let clip_scale = match c.grad_clip {
            Some(max) => {
                let sq: f64 = grads
                    .iter()
                    .flat_map(|g| g.data().iter())
                    .map(|v| {
                        let v = v.to_f64().unwrap();
                        v * v
                    })
                    .sum();
                let norm = sq.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let cs = T::lit(clip_scale);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                let gj = gd[j] * cs;
                md[j] = b1 * md[j] + one_b1 * gj;
                vd[j] = b2 * vd[j] + one_b2 * gj * gj;
                let denom = vd[j].sqrt() * inv_bc2_sqrt + eps;
                if c.weight_decay != 0.0 {
                    pd[j] = pd[j] * decay;
                }
                pd[j] = pd[j] - step_size * md[j] / denom;
            }
        }
        Ok(())
    }
}

pub fn lr_at(c: &AdamConfig, step: usize) -> f64 {
    match c.schedule {
        Schedule::Constant => c.lr,
        Schedule::Cosine {
            total_steps,
            final_frac,
        } => {
            let progress = (step as f64 / total_steps.max(1) as f64).min(1.0);
            let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            c.lr * (final_frac + (1.0 - final_frac) * cos)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_but_advances_step() {
        let mut p = Tensor::<f64>::from_vec(vec![1.0, -2.0]);
        let before = p.clone();
        let mut opt = OptimizerState::new(AdamConfig::new(0.1).cosine(10), &[&[2]], 0);
        opt.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step, 1);
        assert!(opt.current_lr() < 0.1);
    }

    #[test]
    fn first_step_is_bounded_by_lr() {
        let lr = 1e-6;
        for g in [1e-3, 5.0, -200.0] {
            let mut p = Tensor::<f64>::scalar(0.5);
            let mut opt = OptimizerState::new(AdamConfig::new(lr), &[&[]], 0);
            opt.step(&mut [&mut p], &[Tensor::scalar(g)]).unwrap();
            let delta = p.item() - 0.5;
            assert!(delta.abs() <= lr * (1.0 + 1e-6));
            assert!(delta.signum() == -g.signum());
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut w = Tensor::<f64>::scalar(0.0);
        let mut opt = OptimizerState::new(AdamConfig::new(0.1), &[&[]], 0);
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * (w.item() - 3.0));
            opt.step(&mut [&mut w], &[g]).unwrap();
        }
        assert!((w.item() - 3.0).abs() < 1e-2, "w = {}", w.item());
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut opt = OptimizerState::new(AdamConfig::new(0.1), &[&[2]], 0);
        assert!(matches!(
            opt.step(&mut [&mut p], &[Tensor::zeros(&[3])]),
            Err(Error::Contract(_))
        ));
    }
}
