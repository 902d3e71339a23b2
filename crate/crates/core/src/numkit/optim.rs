//! AdamW with decoupled weight decay. State is two moment buffers per
//! parameter, keyed by the same names as the parameter table.

use std::collections::BTreeMap;

use crate::{Error, Result};

use super::tape::GradMap;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    /// Allocates zeroed moments for every tensor in `params` up front, so the
    /// optimizer-state footprint is fixed at construction.
    pub fn new(cfg: AdamWConfig, params: &BTreeMap<String, Tensor<f32>>) -> Self {
        let m = params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
        let v = params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
        AdamW { cfg, t: 0, m, v }
    }

    /// Total scalar entries across both moment buffers (2 per parameter).
    pub fn moment_entries(&self) -> usize {
        let ms: usize = self.m.values().map(|v| v.len()).sum();
        let vs: usize = self.v.values().map(|v| v.len()).sum();
        ms + vs
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update with the given learning rate. Parameters without a gradient
    /// entry are left untouched; a zero gradient with zero weight decay leaves
    /// the parameter bit-identical.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<f32>>,
        grads: &GradMap<f32>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let (b1, b2) = (self.cfg.beta1 as f32, self.cfg.beta2 as f32);
        let eps = self.cfg.eps as f32;
        let wd = self.cfg.weight_decay as f32;
        let lr = lr as f32;

        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if p.numel() != g.numel() {
                return Err(Error::Shape {
                    op: "adamw.step",
                    detail: format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            let m = self.m.get_mut(name).expect("moments allocated at construction");
            let v = self.v.get_mut(name).expect("moments allocated at construction");
            let (c1, c2) = (bc1 as f32, bc2 as f32);
            for ((pv, &gv), (mv, vv)) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_one(v: Vec<f32>) -> BTreeMap<String, Tensor<f32>> {
        let mut p = BTreeMap::new();
        p.insert("w".to_string(), Tensor::from_vec(v));
        p
    }

    /// [TRIVIAL] zero gradient and zero weight decay leave params bit-identical.
    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut params = params_one(vec![1.25, -0.0, 0.0, 3.5e-8]);
        let before = params["w"].data().to_vec();
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        let mut grads = GradMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![0.0; 4]));
        opt.step(&mut params, &grads, 1e-3).unwrap();
        let after: Vec<u32> = params["w"].data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = before.iter().map(|v| v.to_bits()).collect();
        assert_eq!(after, want);
    }

    /// [DERIVED] first AdamW step moves by -lr * g/(|g| + eps) after bias
    /// correction; for g=2, lr=0.1: mhat=2, vhat=4, delta = 0.1*2/(2+1e-8).
    #[test]
    fn first_step_matches_hand_computation() {
        let mut params = params_one(vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        let mut grads = GradMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![2.0]));
        opt.step(&mut params, &grads, 0.1).unwrap();
        let want = 1.0 - 0.1 * (2.0 / (2.0 + 1e-8));
        assert!((params["w"].data()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn unknown_gradient_key_errors() {
        let mut params = params_one(vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        let mut grads = GradMap::new();
        grads.insert("nope".to_string(), Tensor::from_vec(vec![1.0]));
        assert_eq!(opt.step(&mut params, &grads, 0.1).unwrap_err().code(), "config");
    }

    #[test]
    fn moment_entries_are_two_per_parameter() {
        let mut p = params_one(vec![0.0; 5]);
        p.insert("b".to_string(), Tensor::from_vec(vec![0.0; 3]));
        let opt = AdamW::new(AdamWConfig::default(), &p);
        assert_eq!(opt.moment_entries(), 2 * 8);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient_signal() {
        let mut params = params_one(vec![10.0]);
        let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
        let mut opt = AdamW::new(cfg, &params);
        let mut grads = GradMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![0.0]));
        opt.step(&mut params, &grads, 0.5).unwrap();
        // decoupled decay: 10 - 0.5*0.1*10
        assert!((params["w"].data()[0] - 9.5).abs() < 1e-6);
    }
}
