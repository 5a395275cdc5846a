//! Adam with decoupled weight decay and the one-cycle learning-rate policy.

use super::Detector;

/// Adam optimizer. Weight decay is decoupled from the moment estimates and
/// applied only to kernel blocks, scaled by the current learning rate.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update over every parameter block of the model, using whatever
    /// gradients are currently accumulated.
    pub fn step(&mut self, model: &mut Detector, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (beta1, beta2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);

        let mut idx = 0usize;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        model.visit_params(&mut |_, decay, w, g| {
            if m_all.len() == idx {
                m_all.push(vec![0.0; w.len()]);
                v_all.push(vec![0.0; w.len()]);
            }
            let m = &mut m_all[idx];
            let v = &mut v_all[idx];
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let mut upd = m_hat / (v_hat.sqrt() + eps);
                if decay {
                    upd += wd * w[i];
                }
                w[i] -= lr * upd;
            }
            idx += 1;
        });
    }

    /// Flattened first/second moments, in parameter-block order.
    pub fn state_flat(&self) -> (Vec<f64>, Vec<f64>) {
        (self.m.concat(), self.v.concat())
    }

    /// Restores moments from flattened vectors laid out like the model's
    /// parameter blocks.
    pub fn restore_state(&mut self, model: &mut Detector, m: &[f64], v: &[f64], t: u64) {
        self.m.clear();
        self.v.clear();
        let mut offset = 0usize;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        model.visit_params(&mut |_, _, w, _| {
            m_all.push(m[offset..offset + w.len()].to_vec());
            v_all.push(v[offset..offset + w.len()].to_vec());
            offset += w.len();
        });
        self.t = t;
    }
}

/// One-cycle learning-rate schedule with cosine ramps.
///
/// Starts at `max_lr / div_factor`, rises along a cosine to `max_lr` at
/// `peak_fraction` of the total steps, then cosine-anneals to
/// `max_lr / final_div`. Continuous and piecewise monotone.
#[derive(Debug, Clone, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub div_factor: f64,
    pub final_div: f64,
    pub peak_fraction: f64,
    pub total_steps: usize,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            div_factor: 25.0,
            final_div: 1e4,
            peak_fraction: 0.3,
            total_steps: total_steps.max(1),
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let start = self.max_lr / self.div_factor;
        let end = self.max_lr / self.final_div;
        let peak_at = (self.peak_fraction * self.total_steps as f64).max(1.0);
        let t = step as f64;
        if t <= peak_at {
            let progress = t / peak_at;
            // cosine ramp up: (1 - cos) / 2 runs 0 → 1
            start + (self.max_lr - start) * 0.5 * (1.0 - (std::f64::consts::PI * progress).cos())
        } else {
            let span = (self.total_steps as f64 - peak_at).max(1.0);
            let progress = ((t - peak_at) / span).min(1.0);
            end + (self.max_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}
