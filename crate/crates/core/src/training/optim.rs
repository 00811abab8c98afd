use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::persist::Checkpoint;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Adam moments keyed by qualified parameter name, plus the update count.
///
/// Only parameters that have been stepped at least once have an entry, so
/// frozen parameters never acquire state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

/// One store's worth of parameters and their gradients, aligned by index.
pub struct ParamGroup<'a> {
    pub prefix: &'a str,
    pub params: &'a mut ParamStore,
    pub grads: &'a [Tensor],
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn n_tracked(&self) -> usize {
        self.moments.len()
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.moments.get(name).map(|m| &m.m)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.moments.get(name).map(|m| &m.v)
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("opt.step", self.step);
        ckpt.set_meta("opt.beta1", self.config.beta1);
        ckpt.set_meta("opt.beta2", self.config.beta2);
        ckpt.set_meta("opt.eps", self.config.eps);
        ckpt.set_meta("opt.params", self.moments.keys().cloned().collect::<Vec<_>>().join(","));
        for (name, m) in &self.moments {
            ckpt.push(format!("opt.m.{name}"), m.m.clone());
            ckpt.push(format!("opt.v.{name}"), m.v.clone());
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = AdamConfig {
            beta1: ckpt.meta_parse("opt.beta1")?,
            beta2: ckpt.meta_parse("opt.beta2")?,
            eps: ckpt.meta_parse("opt.eps")?,
        };
        config.validate()?;
        let mut moments = BTreeMap::new();
        let names = ckpt.meta_str("opt.params")?;
        for name in names.split(',').filter(|n| !n.is_empty()) {
            let fetch = |kind: &str| {
                ckpt.block(&format!("opt.{kind}.{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Input(format!("checkpoint lacks optimizer block {kind} for {name}")))
            };
            moments.insert(name.to_string(), Moments { m: fetch("m")?, v: fetch("v")? });
        }
        Ok(Self {
            config,
            step: ckpt.meta_parse("opt.step")?,
            moments,
        })
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [Tensor]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One bias-corrected Adam update over every parameter in `groups`.
///
/// All gradients are checked before anything is modified; a non-finite
/// gradient aborts the step with an error naming the parameter.
pub fn adam_step(groups: &mut [ParamGroup<'_>], opt: &mut OptimizerState, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {lr} must be finite and non-negative")));
    }
    for g in groups.iter() {
        if g.grads.len() != g.params.len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} parameters in group {:?}",
                g.grads.len(),
                g.params.len(),
                g.prefix
            )));
        }
        for ((name, p), grad) in g.params.iter().zip(g.grads) {
            if p.shape() != grad.shape() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            if !grad.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}{name}", g.prefix)));
            }
        }
    }
    opt.step += 1;
    let AdamConfig { beta1, beta2, eps } = opt.config;
    let bc1 = 1.0 - beta1.powi(opt.step as i32);
    let bc2 = 1.0 - beta2.powi(opt.step as i32);
    for g in groups.iter_mut() {
        for ((name, p), grad) in g.params.tensors_mut().zip(g.grads) {
            let st = opt
                .moments
                .entry(format!("{}{name}", g.prefix))
                .or_insert_with(|| Moments {
                    m: Tensor::zeros(p.shape()),
                    v: Tensor::zeros(p.shape()),
                });
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vals.to_vec()));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(&[1.0, -2.0, 0.5]);
        let g = [Tensor::vector(vec![0.3, -4.0, 1e-3])];
        let mut opt = OptimizerState::new(AdamConfig::default());
        adam_step(&mut [ParamGroup { prefix: "", params: &mut p, grads: &g }], &mut opt, 0.01).unwrap();
        let got = p.iter().next().unwrap().1.data().to_vec();
        // m_hat = g, v_hat = g^2 after bias correction
        for ((w, w0), gi) in got.iter().zip([1.0, -2.0, 0.5]).zip([0.3f64, -4.0, 1e-3]) {
            let expected = w0 - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-12, "{w} vs {expected}");
        }
    }

    #[test]
    fn zero_grad_and_zero_lr_leave_params() {
        let mut p = store(&[1.0, 2.0]);
        let mut opt = OptimizerState::new(AdamConfig::default());
        let zero = [Tensor::zeros(&[2])];
        adam_step(&mut [ParamGroup { prefix: "", params: &mut p, grads: &zero }], &mut opt, 0.1).unwrap();
        assert_eq!(p.iter().next().unwrap().1.data(), &[1.0, 2.0]);

        let g = [Tensor::vector(vec![1.0, -1.0])];
        adam_step(&mut [ParamGroup { prefix: "", params: &mut p, grads: &g }], &mut opt, 0.0).unwrap();
        assert_eq!(p.iter().next().unwrap().1.data(), &[1.0, 2.0]);
        assert_ne!(opt.first_moment("w").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(opt.step(), 2);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = store(&[1.0]);
        let g = [Tensor::vector(vec![f64::NAN])];
        let mut opt = OptimizerState::new(AdamConfig::default());
        let err = adam_step(&mut [ParamGroup { prefix: "enc.", params: &mut p, grads: &g }], &mut opt, 0.1)
            .unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("enc.w")), "{err}");
        assert_eq!(opt.step(), 0);
        assert_eq!(opt.n_tracked(), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = store(&[1.0, 2.0]);
        let g = [Tensor::vector(vec![0.5, -1.0])];
        let mut opt = OptimizerState::new(AdamConfig::default());
        adam_step(&mut [ParamGroup { prefix: "x.", params: &mut p, grads: &g }], &mut opt, 0.1).unwrap();
        let mut ck = Checkpoint::new();
        opt.write_checkpoint(&mut ck);
        assert_eq!(OptimizerState::from_checkpoint(&ck).unwrap(), opt);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut a = vec![Tensor::vector(vec![3.0, 4.0])];
        let n = clip_global_norm(&mut [&mut a[..]], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0].data()[0] - 0.6).abs() < 1e-15);
    }
}
