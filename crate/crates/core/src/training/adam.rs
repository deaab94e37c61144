use crate::tensor::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with moments kept in f64, one slot per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Adam { beta1: BETA1, beta2: BETA2, eps: EPSILON, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Completed update count.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Moment buffers of one slot.
    pub fn moments(&self, slot: usize) -> (&[f64], &[f64]) {
        (&self.m[slot], &self.v[slot])
    }

    /// Bias-corrected update of slot `slot` in place. Call
    /// [`Adam::begin_step`] once before updating the slots of a step.
    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64) {
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        assert_eq!(m.len(), param.len(), "moment shape does not match its parameter");
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            param[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// One step over every parameter from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step_with(store, |_| lr);
    }

    /// Like [`Adam::step`], with the rate chosen per parameter name.
    pub fn step_with(&mut self, store: &mut ParamStore, lr_of: impl Fn(&str) -> f64) {
        self.begin_step();
        let mut p64 = Vec::new();
        let mut g64 = Vec::new();
        for (slot, p) in store.iter_mut().enumerate() {
            p64.clear();
            p64.extend(p.value.data().iter().map(|&x| x as f64));
            g64.clear();
            g64.extend(p.grad.data().iter().map(|&x| x as f64));
            self.update(slot, &mut p64, &g64, lr_of(&p.name));
            for (d, s) in p.value.data_mut().iter_mut().zip(&p64) {
                *d = *s as f32;
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|&g| g as f64 * g as f64)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let f = (max_norm / norm) as f32;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= f);
        }
    }
    norm
}
