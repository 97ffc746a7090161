//! Adaptive-moment optimizer with decoupled weight decay.
//!
//! The decay term is applied directly (`p -= wd * p`) rather than folded
//! into the gradient or scaled by the learning rate, so decay-flagged
//! parameters shrink even at zero learning rate.

use crate::diff::Tensor;
use crate::encoders::{ParamGroup, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::config::TrainConfig;

#[derive(Clone, Debug)]
pub struct AdamState<F: Scalar> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    /// Completed optimizer steps (for bias correction).
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let m = params.iter().map(|(_, t)| vec![F::ZERO; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![F::ZERO; t.numel()]).collect();
        AdamState { m, v, t: 0 }
    }

    /// Per-group learning rate: backbones run slower by the configured
    /// multiplier, heads and fusion at the full rate.
    pub fn group_lr(cfg: &TrainConfig, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => cfg.lr / cfg.head_lr_multiplier,
            ParamGroup::Fusion | ParamGroup::Head => cfg.lr,
        }
    }

    /// One optimizer step over `params`. `grads[i]` is the gradient for
    /// parameter `i`, or `None` when no gradient flowed there this step;
    /// such parameters are left completely untouched.
    pub fn step(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &[Option<Tensor<F>>],
        cfg: &TrainConfig,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        self.t += 1;
        let b1 = F::cast(cfg.adam_beta1);
        let b2 = F::cast(cfg.adam_beta2);
        let eps = F::cast(cfg.adam_eps);
        let one = F::ONE;
        let bc1 = one - F::cast(cfg.adam_beta1.powi(self.t as i32));
        let bc2 = one - F::cast(cfg.adam_beta2.powi(self.t as i32));
        let wd = F::cast(cfg.weight_decay);
        for i in 0..params.len() {
            let Some(grad) = &grads[i] else { continue };
            let def = &params.defs()[i];
            let lr = F::cast(Self::group_lr(cfg, def.group));
            let current = params.value(i);
            if grad.shape() != current.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "gradient {:?} for parameter {} of shape {:?}",
                        grad.shape(),
                        def.name,
                        current.shape()
                    ),
                ));
            }
            let gv = grad.values();
            let mut pv = current.values().to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..pv.len() {
                let g = gv[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                pv[j] = pv[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            if def.decay && cfg.weight_decay != 0.0 {
                for p in pv.iter_mut() {
                    *p = *p - wd * *p;
                }
            }
            let shape = current.shape().to_vec();
            params.set_value(i, Tensor::new(shape, pv)?)?;
        }
        Ok(())
    }
}

/// EMA shadow of the parameter values, updated every
/// `param_ema_interval` steps.
#[derive(Clone, Debug)]
pub struct ParamEma<F: Scalar> {
    pub shadow: Vec<Vec<F>>,
    pub updates: u64,
}

impl<F: Scalar> ParamEma<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        ParamEma {
            shadow: params.iter().map(|(_, t)| t.values().to_vec()).collect(),
            updates: 0,
        }
    }

    pub fn update(&mut self, params: &ParamSet<F>, decay: f64) {
        let d = F::cast(decay);
        let one = F::ONE;
        for (s, (_, t)) in self.shadow.iter_mut().zip(params.iter()) {
            for (sj, &pj) in s.iter_mut().zip(t.values()) {
                *sj = d * *sj + (one - d) * pj;
            }
        }
        self.updates += 1;
    }

    /// A copy of `params` with the shadow values substituted in.
    pub fn materialize(&self, params: &ParamSet<F>) -> Result<ParamSet<F>> {
        let mut out = params.clone();
        for i in 0..out.len() {
            let shape = out.value(i).shape().to_vec();
            out.set_value(i, Tensor::new(shape, self.shadow[i].clone())?)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ParamGroup;

    fn tiny_params() -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("backbone.w", ParamGroup::Backbone, false, Tensor::vector(vec![1.0, 2.0]))
            .unwrap();
        p.insert("fusion.w", ParamGroup::Fusion, false, Tensor::vector(vec![3.0])).unwrap();
        p.insert("head.w", ParamGroup::Head, true, Tensor::vector(vec![4.0, -4.0])).unwrap();
        p
    }

    #[test]
    fn zero_lr_with_decay_shrinks_only_heads() {
        let mut params = tiny_params();
        let mut opt = AdamState::new(&params);
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.0;
        cfg.weight_decay = 0.1;
        let grads = vec![
            Some(Tensor::vector(vec![0.5, -0.5])),
            Some(Tensor::vector(vec![1.0])),
            Some(Tensor::vector(vec![2.0, 2.0])),
        ];
        for _ in 0..3 {
            opt.step(&mut params, &grads, &cfg).unwrap();
        }
        assert_eq!(params.tensor("backbone.w").unwrap().values(), &[1.0, 2.0]);
        assert_eq!(params.tensor("fusion.w").unwrap().values(), &[3.0]);
        let head = params.tensor("head.w").unwrap().values();
        let want = 4.0 * 0.9f64.powi(3);
        assert!((head[0] - want).abs() < 1e-12);
        assert!((head[1] + want).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_leaves_parameter_untouched() {
        let mut params = tiny_params();
        let mut opt = AdamState::new(&params);
        let cfg = TrainConfig::default();
        let grads = vec![Some(Tensor::vector(vec![0.5, -0.5])), None, None];
        opt.step(&mut params, &grads, &cfg).unwrap();
        assert_ne!(params.tensor("backbone.w").unwrap().values(), &[1.0, 2.0]);
        assert_eq!(params.tensor("fusion.w").unwrap().values(), &[3.0]);
        // Head has decay but received no gradient: untouched.
        assert_eq!(params.tensor("head.w").unwrap().values(), &[4.0, -4.0]);
        assert!(opt.m[1].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut params = ParamSet::new();
        params.insert("head.w", ParamGroup::Head, false, Tensor::vector(vec![1.0])).unwrap();
        let mut opt = AdamState::new(&params);
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.1;
        cfg.weight_decay = 0.0;
        let g: f64 = 0.3;
        opt.step(&mut params, &[Some(Tensor::vector(vec![g]))], &cfg).unwrap();
        // Bias correction cancels the moment mixing on step one, so the
        // update is lr * g / (|g| + eps).
        let want = 1.0 - 0.1 * g / (g.abs() + cfg.adam_eps);
        let got = params.tensor("head.w").unwrap().values()[0];
        assert!((got - want).abs() < 1e-15, "got {} want {}", got, want);
    }

    #[test]
    fn backbone_lr_is_scaled_down() {
        let cfg = TrainConfig::default();
        assert!((AdamState::<f64>::group_lr(&cfg, ParamGroup::Backbone) - 0.00005).abs() < 1e-18);
        assert_eq!(AdamState::<f64>::group_lr(&cfg, ParamGroup::Fusion), 0.0005);
        assert_eq!(AdamState::<f64>::group_lr(&cfg, ParamGroup::Head), 0.0005);
    }

    #[test]
    fn ema_matches_direct_recurrence() {
        let mut params = tiny_params();
        let mut opt = AdamState::new(&params);
        let cfg = TrainConfig::default();
        let mut ema = ParamEma::new(&params);
        let mut direct: Vec<Vec<f64>> =
            params.iter().map(|(_, t)| t.values().to_vec()).collect();
        for step in 1..=40u64 {
            let grads = vec![
                Some(Tensor::vector(vec![(step as f64 * 0.3).sin(), 0.2])),
                Some(Tensor::vector(vec![-0.1])),
                Some(Tensor::vector(vec![0.05, (step as f64).cos()])),
            ];
            opt.step(&mut params, &grads, &cfg).unwrap();
            if step % cfg.param_ema_interval == 0 {
                ema.update(&params, cfg.param_ema_decay);
                for (d, (_, t)) in direct.iter_mut().zip(params.iter()) {
                    for (dj, &pj) in d.iter_mut().zip(t.values()) {
                        *dj = cfg.param_ema_decay * *dj + (1.0 - cfg.param_ema_decay) * pj;
                    }
                }
            }
        }
        assert_eq!(ema.updates, 4);
        for (s, d) in ema.shadow.iter().zip(&direct) {
            for (a, b) in s.iter().zip(d) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        let shadow_set = ema.materialize(&params).unwrap();
        assert_eq!(shadow_set.tensor("fusion.w").unwrap().values(), ema.shadow[1].as_slice());
    }
}
