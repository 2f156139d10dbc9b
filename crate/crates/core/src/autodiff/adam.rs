use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam with bias correction. Moments are stored in the parameter type and
/// the update is computed in `f64`.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, t)| t.len()).collect();
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            v: sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left alone.
    /// Fails without touching anything if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        if ids.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                ids.len()
            )));
        }
        for &id in &ids {
            if let Some(g) = grads.param(id) {
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient(store.name(id).to_string()));
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv.to_f64();
                let mn = beta1 * mv.to_f64() + (1.0 - beta1) * gv;
                let vn = beta2 * vv.to_f64() + (1.0 - beta2) * gv * gv;
                *mv = T::from_f64(mn);
                *vv = T::from_f64(vn);
                let mh = mn / bc1;
                let vh = vn / bc2;
                *pv = T::from_f64(pv.to_f64() - lr * mh / (vh.sqrt() + eps));
            }
        }
        Ok(())
    }

    /// Moment buffers in parameter order: `(step, m, v)`.
    pub fn state(&self) -> (u64, &[Vec<T>], &[Vec<T>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<()> {
        let ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
            && v.iter().zip(&self.v).all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Graph, Tensor};
    use super::*;

    #[test]
    fn first_step_matches_closed_form() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::scalar(0.0)).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &grads).unwrap();
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((store.get(p).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_no_op() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::scalar(0.7)).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let loss = g.scale(x, 0.0);
        let loss = g.sum(loss);
        let grads = g.backward(loss).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(p).item(), 0.7);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("enc.w0", Tensor::scalar(0.0)).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let y = g.ln(x);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        match adam.step(&mut store, &grads) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "enc.w0"),
            other => panic!("expected non-finite gradient error, got {other:?}"),
        }
        assert_eq!(store.get(p).item(), 0.0);
    }
}
