//! SGD with momentum and Adam, each owning the parameters of some groups.
//!
//! Weight decay is added to the gradient (`g + λ·w`) before either update.

use crate::error::{Error, Result};
use crate::params::{Param, ParamGroup, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

fn decayed_grad<S: Scalar>(p: &Param<S>, wd: S) -> Result<Vec<S>> {
    let g = p
        .grad
        .as_ref()
        .ok_or_else(|| Error::Usage(format!("parameter {} has no gradient", p.name)))?;
    Ok(g.iter()
        .zip(p.value.data())
        .map(|(&g, &w)| g + wd * w)
        .collect())
}

/// Momentum buffers, one per parameter of the owned groups (in store order).
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<S> {
    pub config: SgdConfig,
    groups: Vec<ParamGroup>,
    buffers: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(config: SgdConfig, groups: &[ParamGroup]) -> Self {
        Sgd {
            config,
            groups: groups.to_vec(),
            buffers: Vec::new(),
        }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    /// `buf = μ·buf + g + λ·w; w -= lr·buf`.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        let (lr, mu, wd) = (
            S::of(lr),
            S::of(self.config.momentum),
            S::of(self.config.weight_decay),
        );
        for (k, p) in store
            .iter_mut()
            .filter(|p| self.groups.contains(&p.group))
            .enumerate()
        {
            let g = decayed_grad(p, wd)?;
            if self.buffers.len() == k {
                self.buffers.push(vec![S::zero(); g.len()]);
            }
            let buf = &mut self.buffers[k];
            if buf.len() != g.len() {
                return Err(Error::dim("sgd state", &[buf.len()], &[g.len()]));
            }
            for ((b, w), g) in buf.iter_mut().zip(p.value.data_mut()).zip(g) {
                *b = mu * *b + g;
                *w -= lr * *b;
            }
        }
        Ok(())
    }
}

/// First/second moment estimates and the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub config: AdamConfig,
    groups: Vec<ParamGroup>,
    steps: u32,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, groups: &[ParamGroup]) -> Self {
        Adam {
            config,
            groups: groups.to_vec(),
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        let c = self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let correct1 = S::one() - b1.powi(t);
        let correct2 = S::one() - b2.powi(t);
        let (lr, eps, wd) = (S::of(lr), S::of(c.eps), S::of(c.weight_decay));
        for (k, p) in store
            .iter_mut()
            .filter(|p| self.groups.contains(&p.group))
            .enumerate()
        {
            let g = decayed_grad(p, wd)?;
            if self.first.len() == k {
                self.first.push(vec![S::zero(); g.len()]);
                self.second.push(vec![S::zero(); g.len()]);
            }
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            if m.len() != g.len() {
                return Err(Error::dim("adam state", &[m.len()], &[g.len()]));
            }
            for (((m, v), w), g) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(p.value.data_mut())
                .zip(g)
            {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let m_hat = *m / correct1;
                let v_hat = *v / correct2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning-rate multiplier at `epoch`: the product of every milestone
/// multiplier whose epoch is `<= epoch`.
pub fn schedule_multiplier(schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule
        .iter()
        .filter(|&&(at, _)| at <= epoch)
        .map(|&(_, m)| m)
        .product()
}
