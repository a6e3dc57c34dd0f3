//! Adam and an exponential moving average of weights.

use crate::tensor::{Element, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam without weight decay. Moments are kept per parameter, including
/// frozen ones (which simply never move).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<E> {
    pub config: AdamConfig,
    pub first: Vec<Tensor<E>>,
    pub second: Vec<Tensor<E>>,
    pub steps: u64,
}

impl<E: Element> Adam<E> {
    pub fn new(store: &ParamStore<E>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<E>> = store.ids().map(|id| Tensor::zeros(store.shape(id).to_vec())).collect();
        Self { config, first: zeros.clone(), second: zeros, steps: 0 }
    }

    /// One update. `grads[i]` belongs to the i-th parameter of `store`;
    /// `None` counts as a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &[Option<Tensor<E>>]) {
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let (b1, b2) = (E::lit(c.beta1), E::lit(c.beta2));
        let (ob1, ob2) = (E::lit(1.0 - c.beta1), E::lit(1.0 - c.beta2));
        let step_size = E::lit(c.lr / bc1);
        let rbc2 = E::lit(1.0 / bc2.sqrt());
        let eps = E::lit(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(Some(g)) = grads.get(id.index()) else { continue };
            let i = id.index();
            let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
            let w = store.get_mut(id).data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *w -= step_size * *m / ((*v).sqrt() * rbc2 + eps);
            }
        }
    }
}

/// Shadow copy of the trainable weights, updated as
/// `shadow ← d·shadow + (1 − d)·weights` with `d = min(decay, (1+n)/(10+n))`
/// after `n` earlier updates. The warm-up keeps the initial weights from
/// lingering in the average during short runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema<E> {
    pub decay: f64,
    pub updates: u64,
    pub shadow: Vec<Tensor<E>>,
}

impl<E: Element> Ema<E> {
    pub fn new(store: &ParamStore<E>, decay: f64) -> Self {
        Self { decay, updates: 0, shadow: store.ids().map(|id| store.get(id).clone()).collect() }
    }

    /// Decay applied by the next update.
    pub fn current_decay(&self) -> f64 {
        let n = self.updates as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }

    pub fn update(&mut self, store: &ParamStore<E>) {
        let decay = self.current_decay();
        self.updates += 1;
        let (d, od) = (E::lit(decay), E::lit(1.0 - decay));
        for id in store.ids().filter(|&id| store.is_trainable(id)) {
            for (s, &w) in self.shadow[id.index()].data_mut().iter_mut().zip(store.get(id).data()) {
                *s = d * *s + od * w;
            }
        }
    }

    /// A copy of `store` carrying the averaged weights.
    pub fn apply(&self, store: &ParamStore<E>) -> ParamStore<E> {
        let mut out = store.clone();
        for id in store.ids() {
            out.set(id, self.shadow[id.index()].clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.add("w", &[3], Init::Zeros);
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.1, ..Default::default() });
        let g = Tensor::from_f64([3], &[2.0, -0.5, 0.0]).unwrap();
        opt.step(&mut store, &[Some(g)]);
        let w = store.get(id).data();
        assert!((w[0] + 0.1).abs() < 1e-6 && (w[1] - 0.1).abs() < 1e-6 && w[2] == 0.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.add("w", &[2], Init::Const(3.0));
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..500 {
            let g = store.get(id).map(|w| 2.0 * (w - 1.0));
            opt.step(&mut store, &[Some(g)]);
        }
        assert!(store.get(id).data().iter().all(|w| (w - 1.0).abs() < 1e-2));
    }

    #[test]
    fn ema_tracks_weights_and_skips_frozen() {
        let mut store = ParamStore::<f64>::new(0);
        let a = store.add("a", &[1], Init::Const(0.0));
        let f = store.add_frozen("f", &[1], Init::Const(5.0));
        let mut ema = Ema::new(&store, 0.5);
        ema.updates = 100;
        store.set(a, Tensor::scalar(1.0).reshape([1]).unwrap());
        store.set(f, Tensor::scalar(7.0).reshape([1]).unwrap());
        ema.update(&store);
        assert_eq!(ema.shadow[a.index()].data(), &[0.5]);
        assert_eq!(ema.shadow[f.index()].data(), &[5.0]);
    }

    #[test]
    fn ema_warm_up_follows_early_weights() {
        let ema = Ema::<f64>::new(&ParamStore::new(0), 0.9999);
        assert_eq!(ema.current_decay(), 0.1);
        let late = Ema::<f64> { updates: 1_000_000, ..ema };
        assert_eq!(late.current_decay(), 0.9999);
    }
}
