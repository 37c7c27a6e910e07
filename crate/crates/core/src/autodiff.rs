//! Reverse-mode automatic differentiation over f64 tensors.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! replays the record in reverse and returns gradients for every node. Graphs
//! are built fresh per step and are single-use.
//!
//! Shape errors inside the graph are programming errors and panic; public
//! model entry points validate user-facing dimensions before building one.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// `a[.., n] + b[n]`
    AddBias(Var, Var),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    /// Row-wise softmax; masked (causal) entries are exactly zero.
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Conv3d {
        x: Var,
        w: Var,
        spec: Conv3dSpec,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    MseLoss {
        pred: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mean(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Statistics produced by a batch-statistics normalization node, used by
/// the caller to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Population variance.
    pub var: Vec<f64>,
    /// Elements per channel the statistics were computed over.
    pub count: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    assert_eq!(t.rank(), 2, "expected a matrix, got shape {:?}", t.shape());
    (t.shape()[0], t.shape()[1])
}

fn dims5(t: &Tensor) -> [usize; 5] {
    assert_eq!(t.rank(), 5, "expected [N, C, X, Y, Z], got {:?}", t.shape());
    let s = t.shape();
    [s[0], s[1], s[2], s[3], s[4]]
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `out[m,n] += a[m,k] · b[k,n]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Valid output index range `[lo, hi)` along one axis for kernel offset `kk`:
/// those `o` with `0 <= o*stride + kk - pad < n_in`.
fn valid_range(n_in: usize, n_out: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    // o*stride + kk - pad <= n_in - 1  =>  o <= (n_in - 1 + pad - kk) / stride
    let hi = if n_in + pad > kk {
        ((n_in - 1 + pad - kk) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct ConvGeom {
    n: usize,
    c: usize,
    o: usize,
    k: usize,
    inp: [usize; 3],
    out: [usize; 3],
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, spec: Conv3dSpec) -> Self {
        let [n, c, xi, yi, zi] = dims5(x);
        let ws = w.shape();
        assert_eq!(ws.len(), 5);
        assert_eq!(ws[1], c, "conv3d channel mismatch");
        assert!(ws[2] == ws[3] && ws[3] == ws[4], "cubic kernels only");
        let k = ws[2];
        let out = [
            conv_out(xi, k, spec.stride, spec.pad),
            conv_out(yi, k, spec.stride, spec.pad),
            conv_out(zi, k, spec.stride, spec.pad),
        ];
        ConvGeom {
            n,
            c,
            o: ws[0],
            k,
            inp: [xi, yi, zi],
            out,
            stride: spec.stride,
            pad: spec.pad,
        }
    }

    /// Visits every (input offset, output offset) pair touched by kernel tap
    /// (kx, ky, kz), calling `f(in_idx, out_idx)` with offsets within one
    /// channel volume.
    #[inline]
    fn for_tap(&self, kx: usize, ky: usize, kz: usize, mut f: impl FnMut(usize, usize)) {
        let [xi, yi, zi] = self.inp;
        let [xo, yo, zo] = self.out;
        let s = self.stride;
        let p = self.pad;
        let (x0, x1) = valid_range(xi, xo, kx, s, p);
        let (y0, y1) = valid_range(yi, yo, ky, s, p);
        let (z0, z1) = valid_range(zi, zo, kz, s, p);
        for ox in x0..x1 {
            let ix = ox * s + kx - p;
            for oy in y0..y1 {
                let iy = oy * s + ky - p;
                let in_row = (ix * yi + iy) * zi;
                let out_row = (ox * yo + oy) * zo;
                for oz in z0..z1 {
                    let iz = oz * s + kz - p;
                    f(in_row + iz, out_row + oz);
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ta) = a.split_at(a.len() / 4 * 4);
    let (cb, tb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ta.iter().zip(tb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gathers each receptive field into a zero-padded patch laid out like one
/// filter, then takes one dot product per output channel.
fn conv3d_forward(x: &Tensor, w: &Tensor, spec: Conv3dSpec) -> Tensor {
    let g = ConvGeom::new(x, w, spec);
    let [xi, yi, zi] = g.inp;
    let [xo, yo, zo] = g.out;
    let in_vol = xi * yi * zi;
    let out_vol = xo * yo * zo;
    let k = g.k;
    let ck = g.c * k * k * k;
    let mut out = vec![0.0; g.n * g.o * out_vol];
    let mut patch = vec![0.0; ck];
    let xd = x.data();
    let wd = w.data();
    let (s, p) = (g.stride as isize, g.pad as isize);
    for n in 0..g.n {
        let xb = &xd[n * g.c * in_vol..(n + 1) * g.c * in_vol];
        for ox in 0..xo {
            for oy in 0..yo {
                for oz in 0..zo {
                    let z0 = oz as isize * s - p;
                    let kz0 = (-z0).max(0) as usize;
                    let kz1 = (zi as isize - z0).clamp(0, k as isize) as usize;
                    patch.fill(0.0);
                    for c in 0..g.c {
                        for kx in 0..k {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix < 0 || ix >= xi as isize {
                                continue;
                            }
                            for ky in 0..k {
                                let iy = oy as isize * s - p + ky as isize;
                                if iy < 0 || iy >= yi as isize || kz0 >= kz1 {
                                    continue;
                                }
                                let row = c * in_vol + (ix as usize * yi + iy as usize) * zi;
                                let src = row + (z0 + kz0 as isize) as usize;
                                let dst = ((c * k + kx) * k + ky) * k;
                                patch[dst + kz0..dst + kz1].copy_from_slice(&xb[src..src + kz1 - kz0]);
                            }
                        }
                    }
                    let j = (ox * yo + oy) * zo + oz;
                    for o in 0..g.o {
                        out[(n * g.o + o) * out_vol + j] = dot(&wd[o * ck..(o + 1) * ck], &patch);
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![g.n, g.o, xo, yo, zo], out)
}

fn conv3d_backward(x: &Tensor, w: &Tensor, spec: Conv3dSpec, gy: &Tensor) -> (Tensor, Tensor) {
    let g = ConvGeom::new(x, w, spec);
    let in_vol: usize = g.inp.iter().product();
    let out_vol: usize = g.out.iter().product();
    let k3 = g.k * g.k * g.k;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let xd = x.data();
    let wd = w.data();
    let gyd = gy.data();
    for n in 0..g.n {
        for o in 0..g.o {
            let gb = &gyd[(n * g.o + o) * out_vol..(n * g.o + o + 1) * out_vol];
            for c in 0..g.c {
                let ib = &xd[(n * g.c + c) * in_vol..(n * g.c + c + 1) * in_vol];
                let gib = &mut gx[(n * g.c + c) * in_vol..(n * g.c + c + 1) * in_vol];
                let wbase = (o * g.c + c) * k3;
                for kx in 0..g.k {
                    for ky in 0..g.k {
                        for kz in 0..g.k {
                            let widx = wbase + (kx * g.k + ky) * g.k + kz;
                            let wv = wd[widx];
                            let mut acc = 0.0;
                            g.for_tap(kx, ky, kz, |i, j| {
                                acc += gb[j] * ib[i];
                                gib[i] += wv * gb[j];
                            });
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
    )
}

/// 3x3x3 max pool, stride 2, padding 1.
fn maxpool3d_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let [n, c, xi, yi, zi] = dims5(x);
    let (k, s, p) = (3usize, 2usize, 1usize);
    let (xo, yo, zo) = (conv_out(xi, k, s, p), conv_out(yi, k, s, p), conv_out(zi, k, s, p));
    let in_vol = xi * yi * zi;
    let mut out = Vec::with_capacity(n * c * xo * yo * zo);
    let mut argmax = Vec::with_capacity(out.capacity());
    let xd = x.data();
    for b in 0..n * c {
        let base = b * in_vol;
        for ox in 0..xo {
            for oy in 0..yo {
                for oz in 0..zo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for kx in 0..k {
                        let Some(ix) = (ox * s + kx).checked_sub(p).filter(|&v| v < xi) else { continue };
                        for ky in 0..k {
                            let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&v| v < yi) else { continue };
                            for kz in 0..k {
                                let Some(iz) = (oz * s + kz).checked_sub(p).filter(|&v| v < zi) else { continue };
                                let idx = base + (ix * yi + iy) * zi + iz;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_i = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    (Tensor::from_parts(vec![n, c, xo, yo, zo], out), argmax)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(t, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.len();
        assert_eq!(*av.shape().last().unwrap(), n, "bias length mismatch");
        let mut data = av.data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (x, y) in chunk.iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(t, Op::AddBias(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul_t inner dimension");
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect());
        self.push(t, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|x| x.max(0.0)).collect());
        self.push(t, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|&x| gelu(x)).collect());
        self.push(t, Op::Gelu(a))
    }

    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let (r, c) = dims2(xv);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let width = if causal { (i + 1).min(c) } else { c };
            let row = &xv.data()[i * c..i * c + width];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            for o in &mut out[i * c..i * c + width] {
                *o /= z;
            }
        }
        self.push(Tensor::from_parts(vec![r, c], out), Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (r, c) = dims2(self.value(x));
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        assert_eq!(gd.len(), c);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gd[j] + bd[j];
            }
        }
        let t = Tensor::from_parts(vec![r, c], out);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, c) = dims2(self.value(table));
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < rows, "gather index {id} out of {rows}");
            out.extend_from_slice(&td[id * c..(id + 1) * c]);
        }
        let t = Tensor::from_parts(vec![ids.len(), c], out);
        self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = dims2(self.value(parts[0])).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = dims2(self.value(p));
            assert_eq!(pc, c, "concat_rows width mismatch");
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::from_parts(vec![rows, c], out), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = dims2(self.value(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = dims2(self.value(p));
                assert_eq!(pr, r, "concat_cols height mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::from_parts(vec![r, total], out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = dims2(self.value(x));
        assert!(start + len <= r, "slice_rows out of range");
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::from_parts(vec![len, c], out), Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = dims2(self.value(x));
        assert!(start + len <= c, "slice_cols out of range");
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshape(shape.to_vec())
            .expect("reshape element count");
        self.push(t, Op::Reshape(x))
    }

    /// 3D convolution without bias. `x`: [N, C, X, Y, Z], `w`: [O, C, k, k, k].
    pub fn conv3d(&mut self, x: Var, w: Var, spec: Conv3dSpec) -> Var {
        let t = conv3d_forward(self.value(x), self.value(w), spec);
        self.push(t, Op::Conv3d { x, w, spec })
    }

    /// 3x3x3 max pooling with stride 2 and padding 1.
    pub fn max_pool3d(&mut self, x: Var) -> Var {
        let (t, argmax) = maxpool3d_forward(self.value(x));
        self.push(t, Op::MaxPool3d { x, argmax })
    }

    /// Per-channel normalization of a [N, C, ...] tensor. With `running`
    /// set, the given mean/variance are used as constants (inference);
    /// otherwise batch statistics (population variance) are used and
    /// returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> (Var, Option<BatchStats>) {
        let xv = self.value(x);
        let s = xv.shape();
        assert!(s.len() >= 2);
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let m = (n * inner) as f64;
        let xd = xv.data();
        let (mean, var, batch_stats) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), false),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for b in 0..n {
                        sum += xd[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().sum::<f64>();
                    }
                    let mu = sum / m;
                    let mut sq = 0.0;
                    for b in 0..n {
                        sq += xd[(b * c + ch) * inner..(b * c + ch + 1) * inner]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * gd[ch] + bd[ch];
                }
            }
        }
        let t = Tensor::from_parts(s.to_vec(), out);
        let stats = batch_stats.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count: n * inner,
        });
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        (v, stats)
    }

    /// [N, C, ...] -> [N, C], mean over all trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let out = xv
            .data()
            .chunks_exact(inner)
            .map(|ch| ch.iter().sum::<f64>() / inner as f64)
            .collect();
        self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool(x))
    }

    /// Mean over all elements of the squared difference to a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse target shape");
        let n = pv.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::MseLoss {
                pred,
                target: target.data().to_vec(),
            },
        )
    }

    /// Mean negative log-softmax of `targets[i]` under row `i` of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (r, v) = dims2(self.value(logits));
        assert_eq!(r, targets.len(), "one target per logit row");
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; r * v];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &ld[i * v..(i + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            assert!(targets[i] < v, "target id out of vocabulary");
            loss += lse - row[targets[i]];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        self.push(
            Tensor::scalar(loss / r as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, parts: &[Var]) -> Var {
        let s: f64 = parts.iter().map(|&p| self.value(p).item()).sum();
        self.push(Tensor::scalar(s / parts.len() as f64), Op::Mean(parts.to_vec()))
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, gd);
                accumulate(grads, *b, gd);
            }
            Op::AddBias(a, b) => {
                accumulate(grads, *a, gd);
                let n = self.value(*b).len();
                let mut gb = vec![0.0; n];
                for chunk in gd.chunks_exact(n) {
                    for (o, x) in gb.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                accumulate(grads, *b, &gb);
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = dims2(self.value(*b)).1;
                let mut ga = vec![0.0; m * k];
                gemm_nt_acc(gd, self.value(*b).data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                gemm_tn_acc(self.value(*a).data(), gd, &mut gb, m, k, n);
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: ga = g b, gb = gᵀ a
                let (m, k) = dims2(self.value(*a));
                let n = dims2(self.value(*b)).0;
                let mut ga = vec![0.0; m * k];
                gemm_acc(gd, self.value(*b).data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; n * k];
                gemm_tn_acc(gd, self.value(*a).data(), &mut gb, m, n, k);
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = gd.iter().map(|x| x * c).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Gelu(a) => {
                let ga: Vec<f64> = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (r, c) = dims2(&node.value);
                let mut gx = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &gd[row * c..(row + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = dims2(&node.value);
                let gam = self.value(*gamma).data();
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for row in 0..r {
                    let off = row * c;
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        let dh = gd[off + j] * gam[j];
                        s1 += dh;
                        s2 += dh * xhat[off + j];
                        gg[j] += gd[off + j] * xhat[off + j];
                        gb[j] += gd[off + j];
                    }
                    for j in 0..c {
                        let dh = gd[off + j] * gam[j];
                        gx[off + j] = inv_std[row] * (dh - s1 / c as f64 - xhat[off + j] * s2 / c as f64);
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *gamma, &gg);
                accumulate(grads, *beta, &gb);
            }
            Op::Gather { table, ids } => {
                let (rows, c) = dims2(self.value(*table));
                let mut gt = vec![0.0; rows * c];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[id * c + j] += gd[k * c + j];
                    }
                }
                accumulate(grads, *table, &gt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    accumulate(grads, p, &gd[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dims2(&node.value);
                let mut col = 0;
                for &p in parts {
                    let w = dims2(self.value(p)).1;
                    let mut gp = Vec::with_capacity(r * w);
                    for row in 0..r {
                        gp.extend_from_slice(&gd[row * total + col..row * total + col + w]);
                    }
                    accumulate(grads, p, &gp);
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                let c = dims2(&node.value).1;
                gx[start * c..start * c + gd.len()].copy_from_slice(gd);
                accumulate(grads, *x, &gx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = dims2(self.value(*x));
                let w = dims2(&node.value).1;
                let mut gx = vec![0.0; r * c];
                for row in 0..r {
                    gx[row * c + start..row * c + start + w].copy_from_slice(&gd[row * w..(row + 1) * w]);
                }
                accumulate(grads, *x, &gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, gd),
            Op::Conv3d { x, w, spec } => {
                let (gx, gw) = conv3d_backward(self.value(*x), self.value(*w), *spec, g);
                accumulate(grads, *x, gx.data());
                accumulate(grads, *w, gw.data());
            }
            Op::MaxPool3d { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (k, &src) in argmax.iter().enumerate() {
                    gx[src] += gd[k];
                }
                accumulate(grads, *x, &gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = node.value.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let m = (n * inner) as f64;
                let gam = self.value(*gamma).data();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for k in off..off + inner {
                            gg[ch] += gd[k] * xhat[k];
                            gb[ch] += gd[k];
                        }
                    }
                }
                let mut gx = vec![0.0; gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        let scale = gam[ch] * inv_std[ch];
                        for k in off..off + inner {
                            gx[k] = if *batch_stats {
                                scale * (gd[k] - gb[ch] / m - xhat[k] * gg[ch] / m)
                            } else {
                                scale * gd[k]
                            };
                        }
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *gamma, &gg);
                accumulate(grads, *beta, &gb);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let inner: usize = xv.shape()[2..].iter().product();
                let mut gx = Vec::with_capacity(xv.len());
                for &gv in gd {
                    gx.extend(std::iter::repeat(gv / inner as f64).take(inner));
                }
                accumulate(grads, *x, &gx);
            }
            Op::MseLoss { pred, target } => {
                let pv = self.value(*pred).data();
                let scale = 2.0 * gd[0] / pv.len() as f64;
                let gp: Vec<f64> = pv.iter().zip(target).map(|(p, t)| scale * (p - t)).collect();
                accumulate(grads, *pred, &gp);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (r, v) = dims2(self.value(*logits));
                let scale = gd[0] / r as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    gl[row * v + t] -= scale;
                }
                accumulate(grads, *logits, &gl);
            }
            Op::Mean(parts) => {
                let share = gd[0] / parts.len() as f64;
                for &p in parts {
                    accumulate(grads, p, &[share]);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::from_parts(vec![g.len()], g.to_vec()));
        }
    }
}
