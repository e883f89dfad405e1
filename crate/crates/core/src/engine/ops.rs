//! Primitive operations: eager forward evaluation plus a recorded backward
//! rule per op. Backward rules recompute from saved buffer ids rather than
//! stashing extra state, so the op record stays small.

use super::{acc_flow, Tape, Tensor, LOG_EPS};
use std::sync::Arc;

pub enum Op {
    Noop,
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Div { a: usize, b: usize, out: usize },
    AddScalar { a: usize, out: usize },
    Scale { a: usize, c: f64, out: usize },
    Exp { a: usize, out: usize },
    Log { a: usize, out: usize },
    Abs { a: usize, out: usize },
    Square { a: usize, out: usize },
    Sum { a: usize, out: usize },
    Mean { a: usize, out: usize },
    SumLastAxis { a: usize, rows: usize, cols: usize, out: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize, out: usize },
    Conv2d { input: usize, weight: usize, bias: usize, dims: ConvDims, out: usize },
    LeakyRelu { a: usize, slope: f64, out: usize },
    SoftmaxLastAxis { a: usize, rows: usize, cols: usize, out: usize },
    L2NormalizeRows { a: usize, rows: usize, cols: usize, out: usize },
    Gather { a: usize, idx: Arc<Vec<usize>>, out: usize },
    GatherRows { a: usize, idx: Arc<Vec<usize>>, cols: usize, out: usize },
    ScatterAdd { src: usize, idx: Arc<Vec<usize>>, out: usize },
    ScatterAddRows { src: usize, idx: Arc<Vec<usize>>, cols: usize, out: usize },
    BilinearSample { input: usize, coords: usize, dims: SampleDims, out: usize },
}

#[derive(Clone, Copy)]
pub struct ConvDims {
    pub ic: usize,
    pub oc: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

#[derive(Clone, Copy)]
pub struct SampleDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Output range of `o` with `0 <= o*stride + k - pad < size`, clipped to `[0, out)`.
#[inline]
fn conv_range(k: usize, stride: usize, pad: usize, size: usize, out: usize) -> (usize, usize) {
    let k = k as i64;
    let s = stride as i64;
    let p = pad as i64;
    let lo = (p - k + s - 1).div_euclid(s).max(0) as usize;
    let hi = ((size as i64 - 1 + p - k).div_euclid(s) + 1).clamp(0, out as i64) as usize;
    (lo.min(hi), hi)
}

impl Tape {
    fn req(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.bufs[i].requires_grad)
    }

    fn binary_shapes(a: &Tensor, b: &Tensor, name: &str) {
        assert_eq!(a.shape, b.shape, "{name}: shape mismatch {:?} vs {:?}", a.shape, b.shape);
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        Self::binary_shapes(a, b, "add");
        let data = self.bufs[a.id]
            .data
            .iter()
            .zip(&self.bufs[b.id].data)
            .map(|(x, y)| x + y)
            .collect();
        self.record(data, a.shape.clone(), self.req(&[a.id, b.id]), Op::Add { a: a.id, b: b.id, out: self.bufs.len() })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        Self::binary_shapes(a, b, "sub");
        let data = self.bufs[a.id]
            .data
            .iter()
            .zip(&self.bufs[b.id].data)
            .map(|(x, y)| x - y)
            .collect();
        self.record(data, a.shape.clone(), self.req(&[a.id, b.id]), Op::Sub { a: a.id, b: b.id, out: self.bufs.len() })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        Self::binary_shapes(a, b, "mul");
        let data = self.bufs[a.id]
            .data
            .iter()
            .zip(&self.bufs[b.id].data)
            .map(|(x, y)| x * y)
            .collect();
        self.record(data, a.shape.clone(), self.req(&[a.id, b.id]), Op::Mul { a: a.id, b: b.id, out: self.bufs.len() })
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        Self::binary_shapes(a, b, "div");
        let data = self.bufs[a.id]
            .data
            .iter()
            .zip(&self.bufs[b.id].data)
            .map(|(x, y)| x / y)
            .collect();
        self.record(data, a.shape.clone(), self.req(&[a.id, b.id]), Op::Div { a: a.id, b: b.id, out: self.bufs.len() })
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        let data = self.bufs[a.id].data.iter().map(|x| x + c).collect();
        self.record(data, a.shape.clone(), self.req(&[a.id]), Op::AddScalar { a: a.id, out: self.bufs.len() })
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        let data = self.bufs[a.id].data.iter().map(|x| x * c).collect();
        self.record(data, a.shape.clone(), self.req(&[a.id]), Op::Scale { a: a.id, c, out: self.bufs.len() })
    }

    pub fn exp(&mut self, a: &Tensor) -> Tensor {
        let data = self.bufs[a.id].data.iter().map(|x| x.exp()).collect();
        self.record(data, a.shape.clone(), self.req(&[a.id]), Op::Exp { a: a.id, out: self.bufs.len() })
    }

    /// Natural log with the argument clamped below at `LOG_EPS`.
    pub fn log(&mut self, a: &Tensor) -> Tensor {
        let data = self.bufs[a.id].data.iter().map(|x| x.max(LOG_EPS).ln()).collect();
        self.record(data, a.shape.clone(), self.req(&[a.id]), Op::Log { a: a.id, out: self.bufs.len() })
    }

    pub fn abs(&mut self, a: &Tensor) -> Tensor {
        let data = self.bufs[a.id].data.iter().map(|x| x.abs()).collect();
        self.record(data, a.shape.clone(), self.req(&[a.id]), Op::Abs { a: a.id, out: self.bufs.len() })
    }

    pub fn square(&mut self, a: &Tensor) -> Tensor {
        let data = self.bufs[a.id].data.iter().map(|x| x * x).collect();
        self.record(data, a.shape.clone(), self.req(&[a.id]), Op::Square { a: a.id, out: self.bufs.len() })
    }

    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let s: f64 = self.bufs[a.id].data.iter().sum();
        self.record(vec![s], vec![], self.req(&[a.id]), Op::Sum { a: a.id, out: self.bufs.len() })
    }

    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        assert!(a.numel() > 0, "mean of empty tensor");
        let s: f64 = self.bufs[a.id].data.iter().sum();
        let m = s / a.numel() as f64;
        self.record(vec![m], vec![], self.req(&[a.id]), Op::Mean { a: a.id, out: self.bufs.len() })
    }

    /// Sums over the last axis: [.., cols] -> [..].
    pub fn sum_last_axis(&mut self, a: &Tensor) -> Tensor {
        let cols = *a.shape.last().expect("sum_last_axis needs rank >= 1");
        let rows = a.numel() / cols;
        let src = &self.bufs[a.id].data;
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            data[r] = src[r * cols..(r + 1) * cols].iter().sum();
        }
        let shape = a.shape[..a.shape.len() - 1].to_vec();
        self.record(data, shape, self.req(&[a.id]), Op::SumLastAxis { a: a.id, rows, cols, out: self.bufs.len() })
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape.len(), 2, "matmul lhs must be 2-d, got {:?}", a.shape);
        assert_eq!(b.shape.len(), 2, "matmul rhs must be 2-d, got {:?}", b.shape);
        assert_eq!(a.shape[1], b.shape[0], "matmul inner dims {:?} x {:?}", a.shape, b.shape);
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let av = &self.bufs[a.id].data;
        let bv = &self.bufs[b.id].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = av[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[kk * n..(kk + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        self.record(data, vec![m, n], self.req(&[a.id, b.id]), Op::Matmul { a: a.id, b: b.id, m, k, n, out: self.bufs.len() })
    }

    /// 2-d convolution, input [ic,h,w], weight [oc,ic,kh,kw], bias [oc].
    pub fn conv2d(&mut self, input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        assert_eq!(input.shape.len(), 3, "conv2d input must be [c,h,w], got {:?}", input.shape);
        assert_eq!(weight.shape.len(), 4, "conv2d weight must be [oc,ic,kh,kw], got {:?}", weight.shape);
        let (ic, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
        let (oc, kh, kw) = (weight.shape[0], weight.shape[2], weight.shape[3]);
        assert_eq!(weight.shape[1], ic, "conv2d channel mismatch");
        assert_eq!(bias.shape, vec![oc], "conv2d bias must be [oc]");
        assert!(stride >= 1);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let dims = ConvDims { ic, oc, h, w, kh, kw, stride, pad, oh, ow };

        let xv = &self.bufs[input.id].data;
        let wv = &self.bufs[weight.id].data;
        let bv = &self.bufs[bias.id].data;
        let mut data = vec![0.0; oc * oh * ow];
        for o in 0..oc {
            let plane = &mut data[o * oh * ow..(o + 1) * oh * ow];
            plane.fill(bv[o]);
        }
        for o in 0..oc {
            for i in 0..ic {
                for ky in 0..kh {
                    let (ylo, yhi) = conv_range(ky, stride, pad, h, oh);
                    for kx in 0..kw {
                        let (xlo, xhi) = conv_range(kx, stride, pad, w, ow);
                        let wt = wv[((o * ic + i) * kh + ky) * kw + kx];
                        if wt == 0.0 {
                            continue;
                        }
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - pad;
                            let irow = &xv[(i * h + iy) * w..(i * h + iy) * w + w];
                            let orow = &mut data[(o * oh + oy) * ow..(o * oh + oy) * ow + ow];
                            for ox in xlo..xhi {
                                orow[ox] += wt * irow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
        self.record(
            data,
            vec![oc, oh, ow],
            self.req(&[input.id, weight.id, bias.id]),
            Op::Conv2d { input: input.id, weight: weight.id, bias: bias.id, dims, out: self.bufs.len() },
        )
    }

    pub fn leaky_relu(&mut self, a: &Tensor, slope: f64) -> Tensor {
        let data = self.bufs[a.id].data.iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
        self.record(data, a.shape.clone(), self.req(&[a.id]), Op::LeakyRelu { a: a.id, slope, out: self.bufs.len() })
    }

    /// Row-wise softmax over the last axis with max subtraction.
    pub fn softmax_last_axis(&mut self, a: &Tensor) -> Tensor {
        let cols = *a.shape.last().expect("softmax needs rank >= 1");
        assert!(cols > 0);
        let rows = a.numel() / cols;
        let src = &self.bufs[a.id].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - mx).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        self.record(data, a.shape.clone(), self.req(&[a.id]), Op::SoftmaxLastAxis { a: a.id, rows, cols, out: self.bufs.len() })
    }

    /// Scales each row of [rows, cols] to unit l2 norm (epsilon-stabilized).
    pub fn l2_normalize_rows(&mut self, a: &Tensor) -> Tensor {
        let cols = *a.shape.last().expect("l2_normalize needs rank >= 1");
        let rows = a.numel() / cols;
        let src = &self.bufs[a.id].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let ss: f64 = row.iter().map(|x| x * x).sum();
            let inv = 1.0 / (ss + 1e-24).sqrt();
            for (o, &x) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = x * inv;
            }
        }
        self.record(data, a.shape.clone(), self.req(&[a.id]), Op::L2NormalizeRows { a: a.id, rows, cols, out: self.bufs.len() })
    }

    /// Flat element gather: out[i] = a[idx[i]].
    pub fn gather(&mut self, a: &Tensor, idx: &Arc<Vec<usize>>) -> Tensor {
        let src = &self.bufs[a.id].data;
        let n = src.len();
        let data = idx
            .iter()
            .map(|&i| {
                assert!(i < n, "gather index {i} out of bounds for {n} elements");
                src[i]
            })
            .collect();
        self.record(data, vec![idx.len()], self.req(&[a.id]), Op::Gather { a: a.id, idx: idx.clone(), out: self.bufs.len() })
    }

    /// Row gather from [n, cols]: out[i, :] = a[idx[i], :].
    pub fn gather_rows(&mut self, a: &Tensor, idx: &Arc<Vec<usize>>) -> Tensor {
        assert_eq!(a.shape.len(), 2, "gather_rows input must be 2-d, got {:?}", a.shape);
        let (n, cols) = (a.shape[0], a.shape[1]);
        let src = &self.bufs[a.id].data;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            assert!(i < n, "gather_rows index {i} out of bounds for {n} rows");
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        self.record(
            data,
            vec![idx.len(), cols],
            self.req(&[a.id]),
            Op::GatherRows { a: a.id, idx: idx.clone(), cols, out: self.bufs.len() },
        )
    }

    /// Flat scatter-add into a fresh zero buffer: out[idx[i]] += src[i].
    pub fn scatter_add(&mut self, src: &Tensor, idx: &Arc<Vec<usize>>, out_len: usize) -> Tensor {
        assert_eq!(src.numel(), idx.len(), "scatter_add: {} values vs {} indices", src.numel(), idx.len());
        let sv = &self.bufs[src.id].data;
        let mut data = vec![0.0; out_len];
        for (&i, &v) in idx.iter().zip(sv) {
            assert!(i < out_len, "scatter_add index {i} out of bounds for {out_len}");
            data[i] += v;
        }
        self.record(data, vec![out_len], self.req(&[src.id]), Op::ScatterAdd { src: src.id, idx: idx.clone(), out: self.bufs.len() })
    }

    /// Row scatter-add: out[idx[i], :] += src[i, :].
    pub fn scatter_add_rows(&mut self, src: &Tensor, idx: &Arc<Vec<usize>>, out_rows: usize) -> Tensor {
        assert_eq!(src.shape.len(), 2, "scatter_add_rows src must be 2-d");
        let (m, cols) = (src.shape[0], src.shape[1]);
        assert_eq!(m, idx.len(), "scatter_add_rows: {m} rows vs {} indices", idx.len());
        let sv = &self.bufs[src.id].data;
        let mut data = vec![0.0; out_rows * cols];
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < out_rows, "scatter_add_rows index {i} out of bounds for {out_rows}");
            for c in 0..cols {
                data[i * cols + c] += sv[r * cols + c];
            }
        }
        self.record(
            data,
            vec![out_rows, cols],
            self.req(&[src.id]),
            Op::ScatterAddRows { src: src.id, idx: idx.clone(), cols, out: self.bufs.len() },
        )
    }

    /// Samples `input` [c,h,w] at `coords` [2,oh,ow] (x plane then y plane,
    /// absolute pixel units), bilinear with clamp-to-edge. Differentiable in
    /// both the map and the coordinates.
    pub fn bilinear_sample(&mut self, input: &Tensor, coords: &Tensor) -> Tensor {
        assert_eq!(input.shape.len(), 3, "bilinear_sample input must be [c,h,w]");
        assert_eq!(coords.shape.len(), 3, "bilinear_sample coords must be [2,oh,ow]");
        assert_eq!(coords.shape[0], 2, "bilinear_sample coords must have x and y planes");
        let dims = SampleDims {
            c: input.shape[0],
            h: input.shape[1],
            w: input.shape[2],
            oh: coords.shape[1],
            ow: coords.shape[2],
        };
        let data = {
            let xv = &self.bufs[input.id].data;
            let cv = &self.bufs[coords.id].data;
            bilinear_forward(xv, cv, &dims)
        };
        self.record(
            data,
            vec![dims.c, dims.oh, dims.ow],
            self.req(&[input.id, coords.id]),
            Op::BilinearSample { input: input.id, coords: coords.id, dims, out: self.bufs.len() },
        )
    }

    // ── backward rules ──────────────────────────────────────────────────────

    pub(crate) fn backward_op(&self, op: &Op, flow: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Noop => {}
            Op::Add { a, b, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    acc_flow(flow, a, &g);
                }
                if self.bufs[b].requires_grad {
                    acc_flow(flow, b, &g);
                }
            }
            Op::Sub { a, b, out } => {
                let Some(mut g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    acc_flow(flow, a, &g);
                }
                if self.bufs[b].requires_grad {
                    for v in g.iter_mut() {
                        *v = -*v;
                    }
                    acc_flow(flow, b, &g);
                }
            }
            Op::Mul { a, b, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    let da: Vec<f64> = g.iter().zip(&self.bufs[b].data).map(|(g, y)| g * y).collect();
                    acc_flow(flow, a, &da);
                }
                if self.bufs[b].requires_grad {
                    let db: Vec<f64> = g.iter().zip(&self.bufs[a].data).map(|(g, x)| g * x).collect();
                    acc_flow(flow, b, &db);
                }
            }
            Op::Div { a, b, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    let da: Vec<f64> = g.iter().zip(&self.bufs[b].data).map(|(g, y)| g / y).collect();
                    acc_flow(flow, a, &da);
                }
                if self.bufs[b].requires_grad {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.bufs[out].data)
                        .zip(&self.bufs[b].data)
                        .map(|((g, o), y)| -g * o / y)
                        .collect();
                    acc_flow(flow, b, &db);
                }
            }
            Op::AddScalar { a, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    acc_flow(flow, a, &g);
                }
            }
            Op::Scale { a, c, out } => {
                let Some(mut g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    for v in g.iter_mut() {
                        *v *= c;
                    }
                    acc_flow(flow, a, &g);
                }
            }
            Op::Exp { a, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    let da: Vec<f64> = g.iter().zip(&self.bufs[out].data).map(|(g, o)| g * o).collect();
                    acc_flow(flow, a, &da);
                }
            }
            Op::Log { a, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.bufs[a].data)
                        .map(|(g, &x)| if x >= LOG_EPS { g / x } else { 0.0 })
                        .collect();
                    acc_flow(flow, a, &da);
                }
            }
            Op::Abs { a, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.bufs[a].data)
                        .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -*g } else { 0.0 })
                        .collect();
                    acc_flow(flow, a, &da);
                }
            }
            Op::Square { a, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    let da: Vec<f64> = g.iter().zip(&self.bufs[a].data).map(|(g, x)| 2.0 * g * x).collect();
                    acc_flow(flow, a, &da);
                }
            }
            Op::Sum { a, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    let da = vec![g[0]; self.bufs[a].data.len()];
                    acc_flow(flow, a, &da);
                }
            }
            Op::Mean { a, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    let n = self.bufs[a].data.len();
                    let da = vec![g[0] / n as f64; n];
                    acc_flow(flow, a, &da);
                }
            }
            Op::SumLastAxis { a, rows, cols, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gr = g[r];
                        for v in da[r * cols..(r + 1) * cols].iter_mut() {
                            *v = gr;
                        }
                    }
                    acc_flow(flow, a, &da);
                }
            }
            Op::Matmul { a, b, m, k, n, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    // dA = g . B^T
                    let bv = &self.bufs[b].data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + kk] = s;
                        }
                    }
                    acc_flow(flow, a, &da);
                }
                if self.bufs[b].requires_grad {
                    // dB = A^T . g
                    let av = &self.bufs[a].data;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                drow[j] += aik * grow[j];
                            }
                        }
                    }
                    acc_flow(flow, b, &db);
                }
            }
            Op::Conv2d { input, weight, bias, dims, out } => {
                let Some(g) = flow[out].take() else { return };
                self.conv2d_backward(input, weight, bias, &dims, &g, flow);
            }
            Op::LeakyRelu { a, slope, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.bufs[a].data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                        .collect();
                    acc_flow(flow, a, &da);
                }
            }
            Op::SoftmaxLastAxis { a, rows, cols, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    let y = &self.bufs[out].data;
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, &yv), &gv) in da[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    acc_flow(flow, a, &da);
                }
            }
            Op::L2NormalizeRows { a, rows, cols, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    let x = &self.bufs[a].data;
                    let y = &self.bufs[out].data;
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let xr = &x[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let ss: f64 = xr.iter().map(|v| v * v).sum();
                        let inv = 1.0 / (ss + 1e-24).sqrt();
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, &yv), &gv) in da[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                            *d = (gv - yv * dot) * inv;
                        }
                    }
                    acc_flow(flow, a, &da);
                }
            }
            Op::Gather { a, ref idx, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    let mut da = vec![0.0; self.bufs[a].data.len()];
                    for (&i, &gv) in idx.iter().zip(&g) {
                        da[i] += gv;
                    }
                    acc_flow(flow, a, &da);
                }
            }
            Op::GatherRows { a, ref idx, cols, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[a].requires_grad {
                    let mut da = vec![0.0; self.bufs[a].data.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            da[i * cols + c] += g[r * cols + c];
                        }
                    }
                    acc_flow(flow, a, &da);
                }
            }
            Op::ScatterAdd { src, ref idx, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[src].requires_grad {
                    let da: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
                    acc_flow(flow, src, &da);
                }
            }
            Op::ScatterAddRows { src, ref idx, cols, out } => {
                let Some(g) = flow[out].take() else { return };
                if self.bufs[src].requires_grad {
                    let mut da = vec![0.0; idx.len() * cols];
                    for (r, &i) in idx.iter().enumerate() {
                        da[r * cols..(r + 1) * cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                    }
                    acc_flow(flow, src, &da);
                }
            }
            Op::BilinearSample { input, coords, dims, out } => {
                let Some(g) = flow[out].take() else { return };
                self.bilinear_backward(input, coords, &dims, &g, flow);
            }
        }
    }

    fn conv2d_backward(&self, input: usize, weight: usize, bias: usize, d: &ConvDims, g: &[f64], flow: &mut [Option<Vec<f64>>]) {
        let need_in = self.bufs[input].requires_grad;
        let need_w = self.bufs[weight].requires_grad;
        let need_b = self.bufs[bias].requires_grad;
        if need_b {
            let mut db = vec![0.0; d.oc];
            for (o, dbo) in db.iter_mut().enumerate() {
                *dbo = g[o * d.oh * d.ow..(o + 1) * d.oh * d.ow].iter().sum();
            }
            acc_flow(flow, bias, &db);
        }
        if !(need_in || need_w) {
            return;
        }
        let xv = &self.bufs[input].data;
        let wv = &self.bufs[weight].data;
        let mut dx = if need_in { vec![0.0; xv.len()] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0; wv.len()] } else { Vec::new() };
        for o in 0..d.oc {
            for i in 0..d.ic {
                for ky in 0..d.kh {
                    let (ylo, yhi) = conv_range(ky, d.stride, d.pad, d.h, d.oh);
                    for kx in 0..d.kw {
                        let (xlo, xhi) = conv_range(kx, d.stride, d.pad, d.w, d.ow);
                        let wi = ((o * d.ic + i) * d.kh + ky) * d.kw + kx;
                        let wt = wv[wi];
                        let mut wsum = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy * d.stride + ky - d.pad;
                            let grow = &g[(o * d.oh + oy) * d.ow..(o * d.oh + oy) * d.ow + d.ow];
                            let xbase = (i * d.h + iy) * d.w;
                            if need_w {
                                for ox in xlo..xhi {
                                    wsum += grow[ox] * xv[xbase + ox * d.stride + kx - d.pad];
                                }
                            }
                            if need_in {
                                let dxrow = &mut dx[xbase..xbase + d.w];
                                for ox in xlo..xhi {
                                    dxrow[ox * d.stride + kx - d.pad] += wt * grow[ox];
                                }
                            }
                        }
                        if need_w {
                            dw[wi] += wsum;
                        }
                    }
                }
            }
        }
        if need_in {
            acc_flow(flow, input, &dx);
        }
        if need_w {
            acc_flow(flow, weight, &dw);
        }
    }

    fn bilinear_backward(&self, input: usize, coords: usize, d: &SampleDims, g: &[f64], flow: &mut [Option<Vec<f64>>]) {
        let need_in = self.bufs[input].requires_grad;
        let need_co = self.bufs[coords].requires_grad;
        if !(need_in || need_co) {
            return;
        }
        let xv = &self.bufs[input].data;
        let cv = &self.bufs[coords].data;
        let np = d.oh * d.ow;
        let plane = d.h * d.w;
        let mut dx = if need_in { vec![0.0; xv.len()] } else { Vec::new() };
        let mut dc = if need_co { vec![0.0; cv.len()] } else { Vec::new() };
        for p in 0..np {
            let xr = cv[p];
            let yr = cv[np + p];
            let xc = xr.clamp(0.0, (d.w - 1) as f64);
            let yc = yr.clamp(0.0, (d.h - 1) as f64);
            let x0 = xc.floor();
            let y0 = yc.floor();
            let fx = xc - x0;
            let fy = yc - y0;
            let x0 = x0 as usize;
            let y0 = y0 as usize;
            let x1 = (x0 + 1).min(d.w - 1);
            let y1 = (y0 + 1).min(d.h - 1);
            let in_x = xr > 0.0 && xr < (d.w - 1) as f64;
            let in_y = yr > 0.0 && yr < (d.h - 1) as f64;
            let mut gx = 0.0;
            let mut gy = 0.0;
            for c in 0..d.c {
                let gv = g[c * np + p];
                let base = c * plane;
                let v00 = xv[base + y0 * d.w + x0];
                let v01 = xv[base + y0 * d.w + x1];
                let v10 = xv[base + y1 * d.w + x0];
                let v11 = xv[base + y1 * d.w + x1];
                if need_in {
                    dx[base + y0 * d.w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    dx[base + y0 * d.w + x1] += gv * (1.0 - fy) * fx;
                    dx[base + y1 * d.w + x0] += gv * fy * (1.0 - fx);
                    dx[base + y1 * d.w + x1] += gv * fy * fx;
                }
                if need_co {
                    gx += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                    gy += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            if need_co {
                // Clamped coordinates are flat: no gradient outside the map.
                dc[p] = if in_x { gx } else { 0.0 };
                dc[np + p] = if in_y { gy } else { 0.0 };
            }
        }
        if need_in {
            acc_flow(flow, input, &dx);
        }
        if need_co {
            acc_flow(flow, coords, &dc);
        }
    }
}

fn bilinear_forward(xv: &[f64], cv: &[f64], d: &SampleDims) -> Vec<f64> {
    let np = d.oh * d.ow;
    let plane = d.h * d.w;
    let mut out = vec![0.0; d.c * np];
    for p in 0..np {
        let xc = cv[p].clamp(0.0, (d.w - 1) as f64);
        let yc = cv[np + p].clamp(0.0, (d.h - 1) as f64);
        let x0f = xc.floor();
        let y0f = yc.floor();
        let fx = xc - x0f;
        let fy = yc - y0f;
        let x0 = x0f as usize;
        let y0 = y0f as usize;
        let x1 = (x0 + 1).min(d.w - 1);
        let y1 = (y0 + 1).min(d.h - 1);
        for c in 0..d.c {
            let base = c * plane;
            let v00 = xv[base + y0 * d.w + x0];
            let v01 = xv[base + y0 * d.w + x1];
            let v10 = xv[base + y1 * d.w + x0];
            let v11 = xv[base + y1 * d.w + x1];
            out[c * np + p] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    }
    out
}
