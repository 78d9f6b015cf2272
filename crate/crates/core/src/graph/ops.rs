use std::rc::Rc;

use super::{Graph, Var};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected a matrix, got shape {shape:?}");
    (shape[0], shape[1])
}

impl<S: Scalar> Graph<S> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let mut out = (*va).clone();
        out.add_assign(&vb);
        self.push(out, vec![a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(out, vec![a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let s = S::from_f64(s);
        let out = self.value(a).map(|v| v * s);
        self.push(out, vec![a], Box::new(move |g, _| vec![Some(g.map(|v| v * s))]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(
            out,
            vec![a],
            Box::new(move |g, _| {
                let data = g.data().iter().zip(va.data()).map(|(&g, &x)| if x > S::zero() { g } else { S::zero() }).collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data))]
            }),
        )
    }

    /// `sin(omega * a)`.
    pub fn sin(&self, a: Var, omega: f64) -> Var {
        let va = self.value(a);
        let w = S::from_f64(omega);
        let out = va.map(|v| (w * v).sin());
        self.push(
            out,
            vec![a],
            Box::new(move |g, _| {
                let data = g.data().iter().zip(va.data()).map(|(&g, &x)| g * w * (w * x).cos()).collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data))]
            }),
        )
    }

    /// `op(a) * op(b)` for row-major matrices.
    pub fn matmul_t(&self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (ar, ac) = dims2(va.shape());
        let (br, bc) = dims2(vb.shape());
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        gemm(trans_a, trans_b, m, k, n, S::one(), va.data(), vb.data(), S::zero(), &mut out);
        self.push(
            Tensor::new(vec![m, n], out),
            vec![a, b],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    // dA = dC op(B)^T, transposed back when A was used transposed.
                    let mut d = vec![S::zero(); m * k];
                    gemm(false, !trans_b, m, n, k, S::one(), g.data(), vb.data(), S::zero(), &mut d);
                    let t = Tensor::new(vec![m, k], d);
                    if trans_a { transpose(&t) } else { t }
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![S::zero(); k * n];
                    gemm(!trans_a, false, k, m, n, S::one(), va.data(), g.data(), S::zero(), &mut d);
                    let t = Tensor::new(vec![k, n], d);
                    if trans_b { transpose(&t) } else { t }
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// Adds a length-`n` bias to every row of a `m x n` matrix.
    pub fn add_row_bias(&self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (m, n) = dims2(vx.shape());
        assert_eq!(vb.len(), n, "row bias length");
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let bshape = vb.shape().to_vec();
        self.push(
            out,
            vec![x, bias],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![S::zero(); n];
                    for row in g.data().chunks(n) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::new(bshape.clone(), acc)
                });
                let _ = m;
                vec![Some(g.clone()), gb]
            }),
        )
    }

    /// `x w + b` with `x: K x in`, `w: in x out`, `b: out`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => y,
        }
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = transpose(&self.value(a));
        self.push(out, vec![a], Box::new(|g, _| vec![Some(transpose(g))]))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Var {
        let va = self.value(a);
        let old = va.shape().to_vec();
        let out = (*va).clone().reshaped(shape);
        self.push(out, vec![a], Box::new(move |g, _| vec![Some(g.clone().reshaped(old.clone()))]))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let vals: Vec<Rc<Tensor<S>>> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = dims2(vals[0].shape()).0;
        let widths: Vec<usize> = vals
            .iter()
            .map(|v| {
                let (r, c) = dims2(v.shape());
                assert_eq!(r, rows, "concat_cols: row count mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            Tensor::new(vec![rows, total], out),
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let start = offset;
                        offset += w;
                        need.then(|| {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                d.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                            }
                            Tensor::new(vec![rows, w], d)
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let (rows, cols) = dims2(va.shape());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&va.data()[r * cols + start..r * cols + start + len]);
        }
        self.push(
            Tensor::new(vec![rows, len], out),
            vec![a],
            Box::new(move |g, _| {
                let mut d = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                vec![Some(Tensor::new(vec![rows, cols], d))]
            }),
        )
    }

    /// Concatenates along the leading axis (channels of a feature grid).
    pub fn concat_leading(&self, parts: &[Var]) -> Var {
        let vals: Vec<Rc<Tensor<S>>> = parts.iter().map(|&p| self.value(p)).collect();
        let tail = vals[0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut sizes = Vec::with_capacity(vals.len());
        for v in &vals {
            assert_eq!(&v.shape()[1..], &tail[..], "concat_leading: trailing shape mismatch");
            lead += v.shape()[0];
            sizes.push(v.len());
        }
        let mut data = Vec::with_capacity(sizes.iter().sum());
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        self.push(
            Tensor::new(shape, data),
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .zip(&shapes)
                    .map(|((&n, &need), shape)| {
                        let start = offset;
                        offset += n;
                        need.then(|| Tensor::new(shape.clone(), g.data()[start..start + n].to_vec()))
                    })
                    .collect()
            }),
        )
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, cols) = dims2(va.shape());
        let mut out = Vec::with_capacity(rows * cols);
        for row in va.data().chunks(cols) {
            out.extend(softmax(row));
        }
        let out = Rc::new(Tensor::new(vec![rows, cols], out));
        let y = Rc::clone(&out);
        self.push(
            (*out).clone(),
            vec![a],
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(rows * cols);
                for (gr, yr) in g.data().chunks(cols).zip(y.data().chunks(cols)) {
                    let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                vec![Some(Tensor::new(vec![rows, cols], d))]
            }),
        )
    }

    /// `a + s * d` for a scalar variable `s` and a constant tensor `d`.
    pub fn add_scaled_const(&self, a: Var, s: Var, d: Rc<Tensor<S>>) -> Var {
        let (va, vs) = (self.value(a), self.value(s));
        assert_eq!(va.shape(), d.shape(), "add_scaled_const: shape mismatch");
        let sv = vs.item();
        let sshape = vs.shape().to_vec();
        let data = va.data().iter().zip(d.data()).map(|(&x, &dv)| x + sv * dv).collect();
        self.push(
            Tensor::new(va.shape().to_vec(), data),
            vec![a, s],
            Box::new(move |g, needs| {
                let gs = needs[1].then(|| {
                    let v: S = g.data().iter().zip(d.data()).map(|(&a, &b)| a * b).sum();
                    Tensor::new(sshape.clone(), vec![v])
                });
                vec![Some(g.clone()), gs]
            }),
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let v: f64 = va.data().iter().map(|x| x.as_f64()).sum();
        self.push(
            Tensor::scalar(S::from_f64(v)),
            vec![a],
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `sum_i w_i * t_i` over scalar terms, accumulated in double precision.
    pub fn weighted_sum(&self, terms: &[(Var, f64)]) -> Var {
        let mut acc = 0.0f64;
        for &(v, w) in terms {
            acc += w * self.value(v).item().as_f64();
        }
        let weights: Vec<S> = terms.iter().map(|&(_, w)| S::from_f64(w)).collect();
        self.push(
            Tensor::scalar(S::from_f64(acc)),
            terms.iter().map(|&(v, _)| v).collect(),
            Box::new(move |g, needs| {
                weights.iter().zip(needs).map(|(&w, &n)| n.then(|| Tensor::scalar(w * g.item()))).collect()
            }),
        )
    }
}

pub(crate) fn transpose<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (r, c) = dims2(t.shape());
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

pub(crate) fn softmax<S: Scalar>(row: &[S]) -> impl Iterator<Item = S> + '_ {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
    row.iter().map(move |&v| (v - max).exp() / sum)
}
