use crate::model::ModelParams;

/// Adam with bias correction; the moment buffers mirror the parameter
/// layout flattened in tensor order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        let n = params.len();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = self.learning_rate;
        let mut k = 0;
        for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (w, &gi) in p.iter_mut().zip(g) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w -= update;
                k += 1;
            }
        }
    }
}
