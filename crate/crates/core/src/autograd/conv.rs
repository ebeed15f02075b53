//! Channels-last convolutions.
//!
//! Kernels are stored tap-major as `[taps, C_in, C_out]` so the innermost
//! loop of forward, input-gradient and weight-gradient passes all run over a
//! contiguous `C_out` slice.

use super::{Graph, Var};
use crate::tensor::Tensor;

/// For each output position, the input position of each kernel tap (or
/// `None` when the tap falls in the zero padding).
struct TapTable {
    taps: usize,
    entries: Vec<Option<usize>>,
}

impl TapTable {
    fn conv2d(h: usize, w: usize, stride: usize) -> (Self, usize, usize) {
        let (ho, wo) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
        let mut entries = Vec::with_capacity(ho * wo * 9);
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        let ix = (ox * stride + kx) as isize - 1;
                        entries.push(
                            (iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w)
                                .then(|| iy as usize * w + ix as usize),
                        );
                    }
                }
            }
        }
        (TapTable { taps: 9, entries }, ho, wo)
    }

    fn conv3d(dims: [usize; 3]) -> Self {
        let [nx, ny, nz] = dims;
        let mut entries = Vec::with_capacity(nx * ny * nz * 27);
        for i in 0..nx as isize {
            for j in 0..ny as isize {
                for k in 0..nz as isize {
                    for di in -1..=1isize {
                        for dj in -1..=1isize {
                            for dk in -1..=1isize {
                                let (a, b, c) = (i + di, j + dj, k + dk);
                                let inside = a >= 0
                                    && b >= 0
                                    && c >= 0
                                    && (a as usize) < nx
                                    && (b as usize) < ny
                                    && (c as usize) < nz;
                                entries.push(inside.then(|| ((a as usize) * ny + b as usize) * nz + c as usize));
                            }
                        }
                    }
                }
            }
        }
        TapTable { taps: 27, entries }
    }

    fn n_out(&self) -> usize {
        self.entries.len() / self.taps
    }
}

fn conv_forward(x: &[f64], cin: usize, w: &[f64], b: &[f64], table: &TapTable) -> Vec<f64> {
    let cout = b.len();
    let n_out = table.n_out();
    let mut out = vec![0.0; n_out * cout];
    for o in 0..n_out {
        let row = &mut out[o * cout..(o + 1) * cout];
        row.copy_from_slice(b);
        for t in 0..table.taps {
            let Some(src) = table.entries[o * table.taps + t] else { continue };
            let xin = &x[src * cin..(src + 1) * cin];
            let wt = &w[t * cin * cout..(t + 1) * cin * cout];
            for (ci, &xv) in xin.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (r, wv) in row.iter_mut().zip(&wt[ci * cout..(ci + 1) * cout]) {
                    *r += xv * wv;
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`, each only when requested.
fn conv_backward(
    x: &[f64],
    cin: usize,
    w: &[f64],
    cout: usize,
    grad: &[f64],
    table: &TapTable,
    needs: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gx = needs[0].then(|| vec![0.0; x.len()]);
    let mut gw = needs[1].then(|| vec![0.0; w.len()]);
    let mut gb = needs[2].then(|| vec![0.0; cout]);
    for o in 0..table.n_out() {
        let g = &grad[o * cout..(o + 1) * cout];
        if let Some(gb) = gb.as_mut() {
            for (a, b) in gb.iter_mut().zip(g) {
                *a += b;
            }
        }
        for t in 0..table.taps {
            let Some(src) = table.entries[o * table.taps + t] else { continue };
            let wt = &w[t * cin * cout..(t + 1) * cin * cout];
            if let Some(gx) = gx.as_mut() {
                let gxi = &mut gx[src * cin..(src + 1) * cin];
                for (ci, acc) in gxi.iter_mut().enumerate() {
                    *acc += wt[ci * cout..(ci + 1) * cout].iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if let Some(gw) = gw.as_mut() {
                let xin = &x[src * cin..(src + 1) * cin];
                let gwt = &mut gw[t * cin * cout..(t + 1) * cin * cout];
                for (ci, &xv) in xin.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (a, gv) in gwt[ci * cout..(ci + 1) * cout].iter_mut().zip(g) {
                        *a += xv * gv;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

impl Graph {
    /// 3x3 convolution with zero padding 1 over an `[H, W, C_in]` map.
    /// `w` is `[9, C_in, C_out]`, `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let s = vx.shape();
        assert_eq!(s.len(), 3, "conv2d input must be [H, W, C]");
        let (h, wd, cin) = (s[0], s[1], s[2]);
        let cout = vb.len();
        assert_eq!(vw.shape(), &[9, cin, cout], "conv2d kernel shape");
        let (table, ho, wo) = TapTable::conv2d(h, wd, stride);
        let out = conv_forward(vx.data(), cin, vw.data(), vb.data(), &table);
        let out = Tensor::from_vec(&[ho, wo, cout], out).expect("conv2d size");
        self.custom(out, &[x, w, b], conv_backward_fn(table, cin, cout))
    }

    /// 3x3x3 convolution with zero padding 1 over an `[X, Y, Z, C_in]`
    /// volume. `w` is `[27, C_in, C_out]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let s = vx.shape();
        assert_eq!(s.len(), 4, "conv3d input must be [X, Y, Z, C]");
        let cin = s[3];
        let cout = vb.len();
        assert_eq!(vw.shape(), &[27, cin, cout], "conv3d kernel shape");
        let table = TapTable::conv3d([s[0], s[1], s[2]]);
        let out = conv_forward(vx.data(), cin, vw.data(), vb.data(), &table);
        let out = Tensor::from_vec(&[s[0], s[1], s[2], cout], out).expect("conv3d size");
        self.custom(out, &[x, w, b], conv_backward_fn(table, cin, cout))
    }

    /// Per-position linear map over the trailing axis. `w` is
    /// `[C_in, C_out]`.
    pub fn pointwise(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let cin = vx.last_dim();
        let cout = vb.len();
        assert_eq!(vw.shape(), &[cin, cout], "pointwise kernel shape");
        let rows = vx.rows();
        let table = TapTable { taps: 1, entries: (0..rows).map(Some).collect() };
        let out = conv_forward(vx.data(), cin, vw.data(), vb.data(), &table);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let out = Tensor::from_vec(&shape, out).expect("pointwise size");
        self.custom(out, &[x, w, b], conv_backward_fn(table, cin, cout))
    }
}

fn conv_backward_fn(table: TapTable, cin: usize, cout: usize) -> super::BackwardFn {
    Box::new(move |ctx| {
        let (x, w, b) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
        let needs = [ctx.needs[0], ctx.needs[1], ctx.needs[2]];
        let (gx, gw, gb) = conv_backward(x.data(), cin, w.data(), cout, ctx.grad.data(), &table, needs);
        vec![
            gx.map(|g| Tensor::from_vec(x.shape(), g).expect("grad x")),
            gw.map(|g| Tensor::from_vec(w.shape(), g).expect("grad w")),
            gb.map(|g| Tensor::from_vec(b.shape(), g).expect("grad b")),
        ]
    })
}
