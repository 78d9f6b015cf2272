use std::rc::Rc;

use super::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{kernels, Shape3};

fn grid_dims(shape: &[usize]) -> (usize, Shape3) {
    assert_eq!(shape.len(), 4, "expected a [C, X, Y, Z] grid, got {shape:?}");
    (shape[0], [shape[1], shape[2], shape[3]])
}

impl<S: Scalar> Graph<S> {
    /// Trilinear resize of a `[C, X, Y, Z]` grid onto `dst`.
    pub fn resize(&self, x: Var, dst: Shape3) -> Var {
        let vx = self.value(x);
        let (c, src) = grid_dims(vx.shape());
        let out = kernels::resize(vx.data(), c, src, dst);
        self.push(
            Tensor::new(vec![c, dst[0], dst[1], dst[2]], out),
            vec![x],
            Box::new(move |g, _| {
                let d = kernels::resize_adjoint(g.data(), c, src, dst);
                vec![Some(Tensor::new(vec![c, src[0], src[1], src[2]], d))]
            }),
        )
    }

    /// Trilinear samples of a `[C, X, Y, Z]` grid at normalized points, as `[K, C]`.
    pub fn grid_sample(&self, x: Var, points: Rc<Vec<[f64; 3]>>) -> Var {
        let vx = self.value(x);
        let (c, shape) = grid_dims(vx.shape());
        let out = kernels::grid_sample(vx.data(), c, shape, &points);
        let k = points.len();
        self.push(
            Tensor::new(vec![k, c], out),
            vec![x],
            Box::new(move |g, _| {
                let d = kernels::grid_sample_adjoint(g.data(), c, shape, &points);
                vec![Some(Tensor::new(vec![c, shape[0], shape[1], shape[2]], d))]
            }),
        )
    }

    /// Block mean over non-overlapping `factor` windows.
    pub fn avg_pool(&self, x: Var, factor: [usize; 3]) -> Var {
        let vx = self.value(x);
        let (c, shape) = grid_dims(vx.shape());
        for a in 0..3 {
            assert!(factor[a] >= 1 && shape[a] % factor[a] == 0, "avg_pool: factor {factor:?} does not divide {shape:?}");
        }
        let out = kernels::avg_pool(vx.data(), c, shape, factor);
        let pooled = [shape[0] / factor[0], shape[1] / factor[1], shape[2] / factor[2]];
        self.push(
            Tensor::new(vec![c, pooled[0], pooled[1], pooled[2]], out),
            vec![x],
            Box::new(move |g, _| {
                let d = kernels::avg_pool_adjoint(g.data(), c, shape, factor);
                vec![Some(Tensor::new(vec![c, shape[0], shape[1], shape[2]], d))]
            }),
        )
    }
}
