use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`. Parameters without a gradient
    /// still decay and coast on their velocity.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f32) {
        assert_eq!(self.velocity.len(), params.len());
        for id in params.ids().collect::<Vec<_>>() {
            let wd = if params.decays(id) {
                self.weight_decay
            } else {
                0.0
            };
            let grad = grads.get(id).map(Tensor::data);
            let vel = self.velocity[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let g = grad.map_or(0.0, |g| g[i]) + wd * p[i];
                vel[i] = self.momentum * vel[i] + g;
                p[i] -= lr * vel[i];
            }
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}
