//! Parameterised building blocks. Each layer owns the [`ParamId`]s of its
//! tensors; values live in a [`ParamStore`] so that several stores can share
//! one architecture.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square `kernel`, "same" padding, He-normal weights and zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self::with_init(
            store,
            name,
            [in_ch, out_ch, kernel, stride],
            Init::Kaiming { fan_in },
            bias.then_some(0.0),
            rng,
        )
    }

    /// `dims` is `[in_ch, out_ch, kernel, stride]`; `bias` is the constant bias
    /// initialiser, or `None` for no bias.
    pub fn with_init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 4],
        init: Init,
        bias: Option<f32>,
        rng: &mut R,
    ) -> Self {
        let [in_ch, out_ch, kernel, stride] = dims;
        let weight = store.add_init(
            format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            init,
            true,
            rng,
        );
        let bias = bias.map(|b| {
            store.add_init(
                format!("{name}.bias"),
                &[out_ch],
                Init::Constant(b),
                false,
                rng,
            )
        });
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        assert_eq!(channels % groups, 0);
        Self {
            gamma: store.add_init(
                format!("{name}.weight"),
                &[channels],
                Init::Constant(1.0),
                false,
                rng,
            ),
            beta: store.add_init(
                format!("{name}.bias"),
                &[channels],
                Init::Constant(0.0),
                false,
                rng,
            ),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// conv → group norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                in_ch,
                out_ch,
                kernel,
                stride,
                false,
                rng,
            ),
            norm: GroupNorm::new(store, &format!("{name}.norm"), out_ch, groups, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.norm.forward(g, y);
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_init(
                format!("{name}.weight"),
                &[out_features, in_features],
                init,
                true,
                rng,
            ),
            bias: store.add_init(
                format!("{name}.bias"),
                &[out_features],
                Init::Constant(0.0),
                false,
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }
}
