use std::f64::consts::PI;

use bdc_tensor::{GradAccumulator, ParamStore, Real, Tensor};

use super::TrainConfig;

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (warm, total) = (cfg.warmup_steps, cfg.total_steps);
    if step < warm {
        return cfg.base_lr * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam with decoupled weight decay applied to every parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<S: Real>(params: &ParamStore<S>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<S: Real>(&mut self, params: &mut ParamStore<S>, grads: &GradAccumulator<S>, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let p = params.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data: Vec<S> = p
                .data()
                .iter()
                .enumerate()
                .map(|(j, &w)| {
                    let gj = g[j].as_f64();
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                    let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                    let w = w.as_f64();
                    S::lit(w - lr * (update + self.weight_decay * w))
                })
                .collect();
            let t = Tensor::new(p.shape(), data).expect("same shape");
            params.set(id, t);
        }
    }
}
