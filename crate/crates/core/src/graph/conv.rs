use super::{Graph, Var};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;
use crate::volume::{voxel_count, Shape3};

// Patch matrix `[Cin * k^3][N]` for a stride-1 convolution with zero padding
// `k / 2` on every side.
fn im2col<S: Scalar>(x: &[S], cin: usize, shape: Shape3, k: usize) -> Vec<S> {
    let n = voxel_count(shape);
    let [sx, sy, sz] = shape;
    let pad = (k / 2) as isize;
    let mut cols = vec![S::zero(); cin * k * k * k * n];
    let mut row = 0;
    for c in 0..cin {
        let src = &x[c * n..(c + 1) * n];
        for kx in 0..k as isize {
            for ky in 0..k as isize {
                for kz in 0..k as isize {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    row += 1;
                    let dz = kz - pad;
                    let z_lo = (-dz).max(0) as usize;
                    let z_hi = (sz as isize - dz).min(sz as isize).max(0) as usize;
                    if z_lo >= z_hi {
                        continue;
                    }
                    for x_o in 0..sx {
                        let x_i = x_o as isize + kx - pad;
                        if x_i < 0 || x_i >= sx as isize {
                            continue;
                        }
                        for y_o in 0..sy {
                            let y_i = y_o as isize + ky - pad;
                            if y_i < 0 || y_i >= sy as isize {
                                continue;
                            }
                            let o = (x_o * sy + y_o) * sz;
                            let i = (x_i as usize * sy + y_i as usize) * sz;
                            let si = (i as isize + z_lo as isize + dz) as usize;
                            dst[o + z_lo..o + z_hi].copy_from_slice(&src[si..si + (z_hi - z_lo)]);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], cin: usize, shape: Shape3, k: usize) -> Vec<S> {
    let n = voxel_count(shape);
    let [sx, sy, sz] = shape;
    let pad = (k / 2) as isize;
    let mut x = vec![S::zero(); cin * n];
    let mut row = 0;
    for c in 0..cin {
        let dst = &mut x[c * n..(c + 1) * n];
        for kx in 0..k as isize {
            for ky in 0..k as isize {
                for kz in 0..k as isize {
                    let src = &cols[row * n..(row + 1) * n];
                    row += 1;
                    let dz = kz - pad;
                    let z_lo = (-dz).max(0) as usize;
                    let z_hi = (sz as isize - dz).min(sz as isize).max(0) as usize;
                    if z_lo >= z_hi {
                        continue;
                    }
                    for x_o in 0..sx {
                        let x_i = x_o as isize + kx - pad;
                        if x_i < 0 || x_i >= sx as isize {
                            continue;
                        }
                        for y_o in 0..sy {
                            let y_i = y_o as isize + ky - pad;
                            if y_i < 0 || y_i >= sy as isize {
                                continue;
                            }
                            let o = (x_o * sy + y_o) * sz;
                            let i = (x_i as usize * sy + y_i as usize) * sz;
                            let si = (i as isize + z_lo as isize + dz) as usize;
                            for (d, &s) in dst[si..si + (z_hi - z_lo)].iter_mut().zip(&src[o + z_lo..o + z_hi]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl<S: Scalar> Graph<S> {
    /// Stride-1, zero-padded 3D convolution with an odd cubic kernel.
    ///
    /// `x: [Cin, X, Y, Z]`, `w: [Cout, Cin, k, k, k]`, `b: [Cout]`; the output
    /// keeps the spatial shape of `x`.
    pub fn conv3d(&self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let xs = vx.shape();
        assert_eq!(xs.len(), 4, "conv3d input must be [C, X, Y, Z]");
        let ws = vw.shape();
        assert_eq!(ws.len(), 5, "conv3d weight must be [Cout, Cin, k, k, k]");
        let (cin, shape) = (xs[0], [xs[1], xs[2], xs[3]]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv3d: weight expects {} input channels, got {cin}", ws[1]);
        assert!(k % 2 == 1 && ws[3] == k && ws[4] == k, "conv3d: kernel must be odd and cubic");
        assert_eq!(vb.len(), cout, "conv3d: bias length");
        let n = voxel_count(shape);
        let kk = cin * k * k * k;

        let mut out = vec![S::zero(); cout * n];
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.fill(vb.data()[o]);
        }
        if k == 1 {
            gemm(false, false, cout, kk, n, S::one(), vw.data(), vx.data(), S::one(), &mut out);
        } else {
            let cols = im2col(vx.data(), cin, shape, k);
            gemm(false, false, cout, kk, n, S::one(), vw.data(), &cols, S::one(), &mut out);
        }

        let wshape = ws.to_vec();
        let xshape = xs.to_vec();
        self.push(
            Tensor::new(vec![cout, shape[0], shape[1], shape[2]], out),
            vec![x, w, b],
            Box::new(move |g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut dcols = vec![S::zero(); kk * n];
                    gemm(true, false, kk, cout, n, S::one(), vw.data(), gd, S::zero(), &mut dcols);
                    let dx = if k == 1 { dcols } else { col2im(&dcols, cin, shape, k) };
                    Tensor::new(xshape.clone(), dx)
                });
                let gw = needs[1].then(|| {
                    let mut dw = vec![S::zero(); cout * kk];
                    if k == 1 {
                        gemm(false, true, cout, n, kk, S::one(), gd, vx.data(), S::zero(), &mut dw);
                    } else {
                        let cols = im2col(vx.data(), cin, shape, k);
                        gemm(false, true, cout, n, kk, S::one(), gd, &cols, S::zero(), &mut dw);
                    }
                    Tensor::new(wshape.clone(), dw)
                });
                let gb = needs[2].then(|| {
                    let db = gd.chunks(n).map(|row| row.iter().copied().sum()).collect();
                    Tensor::new(vec![cout], db)
                });
                vec![gx, gw, gb]
            }),
        )
    }
}
