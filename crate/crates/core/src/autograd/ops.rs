use std::rc::Rc;

use super::{Graph, Var};
use crate::tensor::Tensor;

/// A sparse linear resampling: output row `r` is `sum_k w_k * src[row_k]`
/// over the taps `offsets[r]..offsets[r + 1]`. Rows without taps are zero.
///
/// Bilinear feature lifting and trilinear frustum sampling both compile to
/// this form, so their backward pass is a plain scatter.
#[derive(Clone, Debug, PartialEq)]
pub struct GatherPlan {
    pub src_rows: usize,
    pub channels: usize,
    pub out_shape: Vec<usize>,
    pub offsets: Vec<usize>,
    pub taps: Vec<(usize, f64)>,
}

impl GatherPlan {
    pub fn n_out(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn taps_of(&self, row: usize) -> &[(usize, f64)] {
        &self.taps[self.offsets[row]..self.offsets[row + 1]]
    }

    pub fn apply(&self, src: &[f64]) -> Tensor {
        assert_eq!(src.len(), self.src_rows * self.channels, "gather source size");
        let c = self.channels;
        let mut out = Tensor::zeros(&self.out_shape);
        let data = out.data_mut();
        for r in 0..self.n_out() {
            let dst = &mut data[r * c..(r + 1) * c];
            for &(s, w) in self.taps_of(r) {
                for (d, x) in dst.iter_mut().zip(&src[s * c..(s + 1) * c]) {
                    *d += w * x;
                }
            }
        }
        out
    }

    pub fn apply_transpose(&self, grad: &[f64], src_shape: &[usize]) -> Tensor {
        let c = self.channels;
        let mut out = Tensor::zeros(src_shape);
        let data = out.data_mut();
        for r in 0..self.n_out() {
            let g = &grad[r * c..(r + 1) * c];
            for &(s, w) in self.taps_of(r) {
                for (d, x) in data[s * c..(s + 1) * c].iter_mut().zip(g) {
                    *d += w * x;
                }
            }
        }
        out
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape");
        let mut out = va.clone();
        out.add_assign(vb);
        self.custom(out, &[a, b], Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            assert_eq!(self.value(x).shape(), out.shape(), "add_n shape");
            out.add_assign(self.value(x));
        }
        let n = xs.len();
        self.custom(out, xs, Box::new(move |ctx| vec![Some(ctx.grad.clone()); n]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scaled(c);
        self.custom(out, &[a], Box::new(move |ctx| vec![Some(ctx.grad.scaled(c))]))
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&mut self, a: Var, m: &Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), m.shape(), "mul_const shape");
        let mut out = va.clone();
        for (o, k) in out.data_mut().iter_mut().zip(m.data()) {
            *o *= k;
        }
        let m = m.clone();
        self.custom(
            out,
            &[a],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                for (o, k) in g.data_mut().iter_mut().zip(m.data()) {
                    *o *= k;
                }
                vec![Some(g)]
            }),
        )
    }

    /// Scalar `sum(a * w)` for a constant `w`.
    pub fn dot_const(&mut self, a: Var, w: &Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), w.len(), "dot_const size");
        let out = Tensor::scalar(va.dot(w));
        let w = w.clone();
        self.custom(
            out,
            &[a],
            Box::new(move |ctx| {
                let s = ctx.grad.item();
                let g = Tensor::from_vec(ctx.inputs[0].shape(), w.data().iter().map(|x| x * s).collect())
                    .expect("same size");
                vec![Some(g)]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.custom(
            out,
            &[a],
            Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                for (gi, &y) in g.data_mut().iter_mut().zip(ctx.output.data()) {
                    if y <= 0.0 {
                        *gi = 0.0;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape).expect("reshape size");
        self.custom(
            out,
            &[a],
            Box::new(|ctx| vec![Some(ctx.grad.clone().reshaped(ctx.inputs[0].shape()).expect("same size"))]),
        )
    }

    /// Concatenate along the trailing axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat leading axes");
        let (ca, cb) = (va.last_dim(), vb.last_dim());
        let rows = va.rows();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let out = Tensor::from_vec(&shape, data).expect("concat size");
        self.custom(
            out,
            &[a, b],
            Box::new(move |ctx| {
                let mut ga = Tensor::zeros(ctx.inputs[0].shape());
                let mut gb = Tensor::zeros(ctx.inputs[1].shape());
                for r in 0..rows {
                    let g = ctx.grad.row(r);
                    ga.row_mut(r).copy_from_slice(&g[..ca]);
                    gb.row_mut(r).copy_from_slice(&g[ca..]);
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// Softmax over the trailing axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.custom(
            out,
            &[x],
            Box::new(|ctx| {
                let y = ctx.output;
                let mut g = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), ctx.grad.row(r));
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in g.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - s);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn gather(&mut self, src: Var, plan: Rc<GatherPlan>) -> Var {
        let out = plan.apply(self.value(src).data());
        self.custom(
            out,
            &[src],
            Box::new(move |ctx| vec![Some(plan.apply_transpose(ctx.grad.data(), ctx.inputs[0].shape()))]),
        )
    }

    /// Multiply every row of `x` (`[.., C]`) by the matching entry of `w`.
    pub fn scale_rows(&mut self, w: Var, x: Var) -> Var {
        let (vw, vx) = (self.value(w), self.value(x));
        assert_eq!(vw.len(), vx.rows(), "scale_rows size");
        let mut out = vx.clone();
        for r in 0..vx.rows() {
            let k = vw.data()[r];
            for o in out.row_mut(r) {
                *o *= k;
            }
        }
        self.custom(
            out,
            &[w, x],
            Box::new(|ctx| {
                let (vw, vx) = (ctx.inputs[0], ctx.inputs[1]);
                let gw = ctx.needs[0].then(|| {
                    let mut gw = Tensor::zeros(vw.shape());
                    for (r, o) in gw.data_mut().iter_mut().enumerate() {
                        *o = vx.row(r).iter().zip(ctx.grad.row(r)).map(|(a, b)| a * b).sum();
                    }
                    gw
                });
                let gx = ctx.needs[1].then(|| {
                    let mut gx = ctx.grad.clone();
                    for r in 0..vx.rows() {
                        let k = vw.data()[r];
                        for o in gx.row_mut(r) {
                            *o *= k;
                        }
                    }
                    gx
                });
                vec![gw, gx]
            }),
        )
    }

    /// `sum_i c_i * x_i` over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total: f64 = terms.iter().map(|&(v, c)| c * self.value(v).item()).sum();
        let coeffs: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.custom(
            Tensor::scalar(total),
            &vars,
            Box::new(move |ctx| coeffs.iter().map(|&c| Some(Tensor::scalar(c * ctx.grad.item()))).collect()),
        )
    }

    /// 2x average pooling of an `[X, Y, Z, C]` volume with even extents.
    pub fn avg_pool3d_2(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        assert!(s.len() == 4 && s[..3].iter().all(|d| d % 2 == 0), "pool needs even [X,Y,Z,C]");
        let (nx, ny, nz, c) = (s[0] / 2, s[1] / 2, s[2] / 2, s[3]);
        let mut out = Tensor::zeros(&[nx, ny, nz, c]);
        for_each_pool_pair(&s, |src, dst| {
            let (o, i) = (dst * c, src * c);
            for ch in 0..c {
                out.data_mut()[o + ch] += 0.125 * vx.data()[i + ch];
            }
        });
        self.custom(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&s);
                for_each_pool_pair(&s, |src, dst| {
                    for ch in 0..c {
                        g.data_mut()[src * c + ch] = 0.125 * ctx.grad.data()[dst * c + ch];
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of an `[X, Y, Z, C]` volume.
    pub fn upsample3d_2(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        let big = [s[0] * 2, s[1] * 2, s[2] * 2, s[3]];
        let c = s[3];
        let mut out = Tensor::zeros(&big);
        for_each_pool_pair(&big, |dst, src| {
            out.data_mut()[dst * c..(dst + 1) * c].copy_from_slice(&vx.data()[src * c..(src + 1) * c]);
        });
        self.custom(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&s);
                for_each_pool_pair(&big, |fine, coarse| {
                    for ch in 0..c {
                        g.data_mut()[coarse * c + ch] += ctx.grad.data()[fine * c + ch];
                    }
                });
                vec![Some(g)]
            }),
        )
    }
}

/// Calls `f(fine_voxel, coarse_voxel)` for every voxel of the fine grid
/// `shape` (`[X, Y, Z, C]`, even extents) in row-major order.
fn for_each_pool_pair(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let (x, y, z) = (shape[0], shape[1], shape[2]);
    let (cy, cz) = (y / 2, z / 2);
    for i in 0..x {
        for j in 0..y {
            for k in 0..z {
                let fine = (i * y + j) * z + k;
                let coarse = ((i / 2) * cy + j / 2) * cz + k / 2;
                f(fine, coarse);
            }
        }
    }
}

/// Numerically stable softmax over the trailing axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_then_upsample_roundtrips_constant() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2, 2, 2, 3], 1.5));
        let p = g.avg_pool3d_2(x);
        assert_eq!(g.value(p).shape(), &[1, 1, 1, 3]);
        assert!(g.value(p).data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
        let u = g.upsample3d_2(p);
        assert_eq!(g.value(u), g.value(x));
    }

    #[test]
    fn softmax_of_constants_is_uniform() {
        let y = softmax_rows(&Tensor::zeros(&[3, 4]));
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
