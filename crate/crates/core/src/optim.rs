//! Adam with L2 weight decay and per-group step counters.

use serde::{Deserialize, Serialize};

use crate::network::{Gradients, Group, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient (`g + wd * w`).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments for every parameter, in canonical tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Updates applied so far to each group.
    pub steps: [u64; 3],
}

impl Adam {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.layers.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: [0; 3],
        }
    }

    /// Updates every group that received gradient in `grads`; untouched
    /// groups keep their parameters and moments.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) {
        let c = self.config;
        let mut tensor = 0;
        for g in Group::ALL {
            let layers = params.layers.group_mut(g);
            let count = layers.len() * 2;
            if !grads.touched(g) {
                tensor += count;
                continue;
            }
            self.steps[g.index()] += 1;
            let t = self.steps[g.index()] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let grad_layers = grads.layers.group(g);
            for (layer, glayer) in layers.iter_mut().zip(grad_layers) {
                for (p, d) in [(&mut layer.weight, &glayer.weight), (&mut layer.bias, &glayer.bias)] {
                    let (m, v) = (&mut self.m[tensor], &mut self.v[tensor]);
                    for i in 0..p.len() {
                        let gi = d[i] + c.weight_decay * p[i];
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        p[i] -= lr * mh / (vh.sqrt() + c.eps);
                    }
                    tensor += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Mode, NetworkConfig, OutputGrads, Task};
    use crate::PointCloud;

    fn model() -> ModelParams {
        let mut c = NetworkConfig::compact(Task::Classification, 3);
        c.point_widths = vec![4];
        c.global_width = 6;
        c.sup_widths = vec![5];
        c.ssl_widths = vec![5];
        ModelParams::init(c, 3).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = model();
        let before = p.clone();
        let mut opt = Adam::new(&p, AdamConfig::default());
        let mut g = Gradients::zeros(&p.config);
        g.touched = [true; 3];
        opt.step(&mut p, &g, 1e-3);
        assert_eq!(p, before);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_weights() {
        let mut p = model();
        let before = p.clone();
        let mut opt = Adam::new(
            &p,
            AdamConfig {
                weight_decay: 0.1,
                ..AdamConfig::default()
            },
        );
        let mut g = Gradients::zeros(&p.config);
        g.touched = [true; 3];
        opt.step(&mut p, &g, 1e-3);
        let w0 = &before.layers.encoder[0].weight;
        let w1 = &p.layers.encoder[0].weight;
        assert!(w0.iter().zip(w1).all(|(a, b)| b.abs() < a.abs() || *a == 0.0));
    }

    #[test]
    fn untouched_groups_are_left_alone() {
        let mut p = model();
        let cloud = PointCloud::new(vec![[0.1, 0.2, 0.3], [-0.2, 0.0, 0.4]]).unwrap();
        let tr = p.forward(&cloud, Some(Mode::Eval), false).unwrap();
        let g = p
            .backward(&tr, &OutputGrads { sup: Some(vec![0.5, -0.2, -0.3]), ssl: None })
            .unwrap();
        let before = p.clone();
        let mut opt = Adam::new(&p, AdamConfig { weight_decay: 0.01, ..AdamConfig::default() });
        opt.step(&mut p, &g, 1e-2);
        assert_eq!(p.layers.ssl, before.layers.ssl);
        assert_ne!(p.layers.sup, before.layers.sup);
        assert_eq!(opt.steps, [1, 1, 0]);
    }

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut p = model();
        let before = p.clone();
        let mut g = Gradients::zeros(&p.config);
        for t in g.layers.tensors_mut() {
            t.iter_mut().enumerate().for_each(|(i, v)| *v = if i % 2 == 0 { 3.0 } else { -0.01 });
        }
        g.touched = [true; 3];
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &g, 0.01);
        for (a, b) in before.layers.tensors().zip(p.layers.tensors()) {
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                let expect = if i % 2 == 0 { -0.01 } else { 0.01 };
                assert!(((y - x) - expect).abs() < 1e-8);
            }
        }
    }
}
