//! Layer building blocks over the parameter store.

use super::params::{Ctx, Init, ParamId, ParamStore};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    /// Normal with std `sqrt(gain / fan_in)`.
    FanIn { gain: f64 },
    /// Uniform in `[-bound, bound]`.
    Uniform { bound: f64 },
    Zero,
}

impl WeightInit {
    pub const RELU: WeightInit = WeightInit::FanIn { gain: 2.0 };
    pub const LINEAR: WeightInit = WeightInit::FanIn { gain: 1.0 };

    fn tensor(self, init: &mut Init, shape: Vec<usize>, fan_in: usize) -> Tensor<f32> {
        match self {
            WeightInit::FanIn { gain } => init.normal(shape, (gain / fan_in as f64).sqrt()),
            WeightInit::Uniform { bound } => init.uniform(shape, bound),
            WeightInit::Zero => Tensor::zeros(shape),
        }
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore<f32>, init: &mut Init, name: &str, input: usize, output: usize, w: WeightInit, bias: bool) -> Self {
        let wt = w.tensor(init, vec![input, output], input);
        let w = store.add(format!("{name}.w"), wt);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![output])));
        Linear { w, b, input, output }
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, x: Var) -> Var {
        cx.g.linear(x, cx.p(self.w), self.b.map(|b| cx.p(b)))
    }

    pub fn param_count(&self) -> usize {
        self.input * self.output + if self.b.is_some() { self.output } else { 0 }
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new(store: &mut ParamStore<f32>, init: &mut Init, name: &str, dims: [usize; 3], last: WeightInit) -> Self {
        Mlp2 {
            l1: Linear::new(store, init, &format!("{name}.0"), dims[0], dims[1], WeightInit::RELU, true),
            l2: Linear::new(store, init, &format!("{name}.1"), dims[1], dims[2], last, true),
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, x: Var) -> Var {
        let h = cx.g.relu(self.l1.forward(cx, x));
        self.l2.forward(cx, h)
    }
}

/// Zero-padded stride-1 3D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3 {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv3 {
    pub fn new(store: &mut ParamStore<f32>, init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, w: WeightInit) -> Self {
        let fan_in = cin * k * k * k;
        let wt = w.tensor(init, vec![cout, cin, k, k, k], fan_in);
        Conv3 {
            w: store.add(format!("{name}.w"), wt),
            b: store.add(format!("{name}.b"), Tensor::zeros(vec![cout])),
            cin,
            cout,
            k,
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, x: Var) -> Var {
        cx.g.conv3d(x, cx.p(self.w), cx.p(self.b))
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k.pow(3) + self.cout
    }
}
