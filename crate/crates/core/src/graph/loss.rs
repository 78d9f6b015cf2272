use std::rc::Rc;

use super::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// Mean squared error between a prediction of `K` values and fixed targets.
    pub fn mse(&self, pred: Var, target: Rc<Vec<S>>) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.len(), target.len(), "mse: {} predictions for {} targets", vp.len(), target.len());
        let n = vp.len() as f64;
        let loss: f64 = vp.data().iter().zip(target.iter()).map(|(&p, &t)| (p - t).as_f64().powi(2)).sum::<f64>() / n;
        let shape = vp.shape().to_vec();
        self.push(
            Tensor::scalar(S::from_f64(loss)),
            vec![pred],
            Box::new(move |g, _| {
                let s = g.item() * S::from_f64(2.0 / n);
                let d = vp.data().iter().zip(target.iter()).map(|(&p, &t)| s * (p - t)).collect();
                vec![Some(Tensor::new(shape.clone(), d))]
            }),
        )
    }

    /// Mean over rows of the squared Euclidean distance between matching rows.
    pub fn mean_sq_distance(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mean_sq_distance: shape mismatch");
        let rows = va.shape()[0] as f64;
        let loss: f64 = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>() / rows;
        let shape = va.shape().to_vec();
        self.push(
            Tensor::scalar(S::from_f64(loss)),
            vec![a, b],
            Box::new(move |g, needs| {
                let s = g.item() * S::from_f64(2.0 / rows);
                let diff: Vec<S> = va.data().iter().zip(vb.data()).map(|(&x, &y)| s * (x - y)).collect();
                let gb = needs[1].then(|| Tensor::new(shape.clone(), diff.iter().map(|&v| -v).collect()));
                vec![Some(Tensor::new(shape.clone(), diff)), gb]
            }),
        )
    }

    /// `(1 / C) * || mean_rows(a) - mean_rows(b) ||_1`; row counts may differ.
    pub fn mean_feature_l1(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape().len(), 2, "mean_feature_l1 expects matrices");
        let (ka, c) = (va.shape()[0], va.shape()[1]);
        let kb = vb.shape()[0];
        assert_eq!(vb.shape()[1], c, "mean_feature_l1: width mismatch");
        let col_mean = |t: &Tensor<S>, k: usize| -> Vec<f64> {
            let mut m = vec![0.0; c];
            for row in t.data().chunks(c) {
                for (acc, &v) in m.iter_mut().zip(row) {
                    *acc += v.as_f64();
                }
            }
            m.iter_mut().for_each(|v| *v /= k as f64);
            m
        };
        let (ma, mb) = (col_mean(&va, ka), col_mean(&vb, kb));
        let loss = ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum::<f64>() / c as f64;
        let sign: Vec<f64> = ma.iter().zip(&mb).map(|(x, y)| (x - y).signum() * ((x - y) != 0.0) as u8 as f64).collect();
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            Tensor::scalar(S::from_f64(loss)),
            vec![a, b],
            Box::new(move |g, needs| {
                let gv = g.item().as_f64() / c as f64;
                let spread = |k: usize, sgn: f64, shape: &Vec<usize>| {
                    let row: Vec<S> = sign.iter().map(|&s| S::from_f64(sgn * gv * s / k as f64)).collect();
                    let mut d = Vec::with_capacity(k * c);
                    for _ in 0..k {
                        d.extend_from_slice(&row);
                    }
                    Tensor::new(shape.clone(), d)
                };
                vec![needs[0].then(|| spread(ka, 1.0, &sa)), needs[1].then(|| spread(kb, -1.0, &sb))]
            }),
        )
    }

    /// Mean softmax cross-entropy of `K x N` logits against class indices.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: Rc<Vec<usize>>) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape().len(), 2, "softmax_cross_entropy expects K x N logits");
        let (k, n) = (vl.shape()[0], vl.shape()[1]);
        assert_eq!(labels.len(), k, "softmax_cross_entropy: {} labels for {k} rows", labels.len());
        let mut loss = 0.0f64;
        let mut probs = Vec::with_capacity(k * n);
        for (row, &y) in vl.data().chunks(n).zip(labels.iter()) {
            assert!(y < n, "label {y} out of range for {n} classes");
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            loss += lse - row[y].as_f64();
            probs.extend(row.iter().map(|v| S::from_f64((v.as_f64() - lse).exp())));
        }
        loss /= k as f64;
        self.push(
            Tensor::scalar(S::from_f64(loss)),
            vec![logits],
            Box::new(move |g, _| {
                let s = g.item() / S::from_f64(k as f64);
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * n + y] -= S::one();
                }
                d.iter_mut().for_each(|v| *v *= s);
                vec![Some(Tensor::new(vec![k, n], d))]
            }),
        )
    }
}
