//! Decoder-only transformer: forward pass with activation cache and the
//! matching hand-written backward pass. Everything is f32 on ndarray.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const LN_EPS: f32 = 1e-5;

// tensor slots inside one layer
pub const LN1_G: usize = 0;
pub const LN1_B: usize = 1;
pub const QKV_W: usize = 2;
pub const QKV_B: usize = 3;
pub const O_W: usize = 4;
pub const O_B: usize = 5;
pub const LN2_G: usize = 6;
pub const LN2_B: usize = 7;
pub const FC_W: usize = 8;
pub const FC_B: usize = 9;
pub const PROJ_W: usize = 10;
pub const PROJ_B: usize = 11;
pub const PER_LAYER: usize = 12;

pub const WTE: usize = 0;
pub const WPE: usize = 1;

const LAYER_NAMES: [&str; PER_LAYER] = [
    "ln1_g", "ln1_b", "qkv_w", "qkv_b", "o_w", "o_b", "ln2_g", "ln2_b", "fc_w", "fc_b", "proj_w", "proj_b",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub vocab: usize,
    pub positions: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Dims {
    pub fn layer(&self, l: usize, k: usize) -> usize {
        2 + l * PER_LAYER + k
    }
    pub fn lnf_g(&self) -> usize {
        2 + self.n_layers * PER_LAYER
    }
    pub fn lnf_b(&self) -> usize {
        self.lnf_g() + 1
    }
    pub fn cls_w(&self) -> usize {
        self.lnf_g() + 2
    }
    pub fn cls_b(&self) -> usize {
        self.lnf_g() + 3
    }
    pub fn num_tensors(&self) -> usize {
        self.lnf_g() + 4
    }

    /// `(name, rows, cols, decayed)` for every tensor slot, in storage order.
    pub fn layout(&self) -> Vec<(String, usize, usize, bool)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("wte".to_string(), self.vocab, d, true),
            ("wpe".to_string(), self.positions, d, true),
        ];
        for l in 0..self.n_layers {
            let shapes = [
                (1, d, false),
                (1, d, false),
                (d, 3 * d, true),
                (1, 3 * d, false),
                (d, d, true),
                (1, d, false),
                (1, d, false),
                (1, d, false),
                (d, f, true),
                (1, f, false),
                (f, d, true),
                (1, d, false),
            ];
            for (name, (r, c, decay)) in LAYER_NAMES.iter().zip(shapes) {
                out.push((format!("h{l}.{name}"), r, c, decay));
            }
        }
        out.push(("lnf_g".into(), 1, d, false));
        out.push(("lnf_b".into(), 1, d, false));
        out.push(("cls_w".into(), 1, d, true));
        out.push(("cls_b".into(), 1, 1, false));
        out
    }
}

/// All trainable tensors; 1-D parameters are stored as `[1, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: Vec<Array2<f32>>,
}

impl Params {
    pub fn zeros(dims: &Dims) -> Self {
        Params {
            tensors: dims.layout().iter().map(|(_, r, c, _)| Array2::zeros((*r, *c))).collect(),
        }
    }

    pub fn zeros_like(other: &Params) -> Self {
        Params {
            tensors: other.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    /// Gaussian weights, unit LayerNorm gains, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &Dims, std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let mut p = Self::zeros(dims);
        for (t, (name, _, _, decayed)) in p.tensors.iter_mut().zip(dims.layout()) {
            if decayed {
                t.mapv_inplace(|_| normal.sample(rng));
            } else if name.ends_with("_g") {
                t.fill(1.0);
            }
        }
        p
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum()
    }
}

pub fn gelu(x: f32) -> f32 {
    let c = (2.0f32 / std::f32::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let c = (2.0f32 / std::f32::consts::PI).sqrt();
    let t = (c * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LnCache {
    xhat: Array2<f32>,
    rstd: Array1<f32>,
}

fn ln_forward(x: &Array2<f32>, g: &Array2<f32>, b: &Array2<f32>) -> (Array2<f32>, LnCache) {
    let mean = x.mean_axis(Axis(1)).expect("non-empty row").insert_axis(Axis(1));
    let centered = x - &mean;
    let var = (&centered * &centered).mean_axis(Axis(1)).expect("non-empty row");
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = &centered * &rstd.view().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn ln_backward(dy: &Array2<f32>, cache: &LnCache, g: &Array2<f32>, dg: &mut Array2<f32>, db: &mut Array2<f32>) -> Array2<f32> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let m1 = dxhat.mean_axis(Axis(1)).expect("row").insert_axis(Axis(1));
    let m2 = (&dxhat * &cache.xhat).mean_axis(Axis(1)).expect("row").insert_axis(Axis(1));
    (dxhat - &m1 - &cache.xhat * &m2) * &cache.rstd.view().insert_axis(Axis(1))
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f32>,
    qkv: Array2<f32>,
    probs: Vec<Array2<f32>>,
    o: Array2<f32>,
    ln2: LnCache,
    c: Array2<f32>,
    f: Array2<f32>,
    gl: Array2<f32>,
}

pub struct Cache {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Output of the final LayerNorm, `[T, d]`.
    pub hidden: Array2<f32>,
}

/// Token ids, role ids and positions of one sequence.
#[derive(Clone, Copy)]
pub struct Inputs<'a> {
    pub tokens: &'a [u32],
    pub roles: &'a [u32],
    pub positions: &'a [u32],
}

fn row_softmax_causal(mut sc: Array2<f32>) -> Array2<f32> {
    let t = sc.nrows();
    for i in 0..t {
        let mut row = sc.row_mut(i);
        let max = row.iter().take(i + 1).fold(f32::NEG_INFINITY, |m, &x| m.max(x));
        let mut sum = 0.0;
        for j in 0..t {
            if j <= i {
                row[j] = (row[j] - max).exp();
                sum += row[j];
            } else {
                row[j] = 0.0;
            }
        }
        row.mapv_inplace(|x| x / sum);
    }
    sc
}

pub fn forward(p: &Params, dims: &Dims, inputs: Inputs) -> Cache {
    let (d, h) = (dims.d_model, dims.n_heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f32).sqrt();
    let t = inputs.tokens.len();
    let wte = &p.tensors[WTE];
    let wpe = &p.tensors[WPE];

    let mut x = Array2::<f32>::zeros((t, d));
    for i in 0..t {
        let mut row = x.row_mut(i);
        row += &wte.row(inputs.tokens[i] as usize);
        row += &wte.row(inputs.roles[i] as usize);
        row += &wpe.row(inputs.positions[i] as usize);
    }

    let mut layers = Vec::with_capacity(dims.n_layers);
    for l in 0..dims.n_layers {
        let w = |k| &p.tensors[dims.layer(l, k)];
        let (a, ln1) = ln_forward(&x, w(LN1_G), w(LN1_B));
        let qkv = a.dot(w(QKV_W)) + w(QKV_B);
        let mut o = Array2::<f32>::zeros((t, d));
        let mut probs = Vec::with_capacity(h);
        for head in 0..h {
            let q = qkv.slice(s![.., head * dh..(head + 1) * dh]);
            let k = qkv.slice(s![.., d + head * dh..d + (head + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + head * dh..2 * d + (head + 1) * dh]);
            let pr = row_softmax_causal(q.dot(&k.t()) * scale);
            o.slice_mut(s![.., head * dh..(head + 1) * dh]).assign(&pr.dot(&v));
            probs.push(pr);
        }
        x = x + o.dot(w(O_W)) + w(O_B);
        let (c, ln2) = ln_forward(&x, w(LN2_G), w(LN2_B));
        let f = c.dot(w(FC_W)) + w(FC_B);
        let gl = f.mapv(gelu);
        x = x + gl.dot(w(PROJ_W)) + w(PROJ_B);
        layers.push(LayerCache {
            ln1,
            a,
            qkv,
            probs,
            o,
            ln2,
            c,
            f,
            gl,
        });
    }
    let (hidden, lnf) = ln_forward(&x, &p.tensors[dims.lnf_g()], &p.tensors[dims.lnf_b()]);
    Cache { layers, lnf, hidden }
}

fn add_matmul_tn(acc: &mut Array2<f32>, a: ArrayView2<f32>, b: ArrayView2<f32>) {
    ndarray::linalg::general_mat_mul(1.0, &a.t(), &b, 1.0, acc);
}

/// Accumulates into `grads` the gradient of a loss whose derivative with
/// respect to `cache.hidden` is `dhidden`. Head parameters (LM projection,
/// classifier) are handled by the caller.
pub fn backward(p: &Params, dims: &Dims, inputs: Inputs, cache: &Cache, dhidden: &Array2<f32>, grads: &mut Params) {
    let (d, h) = (dims.d_model, dims.n_heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f32).sqrt();
    let t = inputs.tokens.len();

    let (gf, bf) = (dims.lnf_g(), dims.lnf_b());
    let mut dx = {
        let (dg, db) = two_mut(&mut grads.tensors, gf, bf);
        ln_backward(dhidden, &cache.lnf, &p.tensors[gf], dg, db)
    };

    for l in (0..dims.n_layers).rev() {
        let lc = &cache.layers[l];
        let idx = |k| dims.layer(l, k);
        let w = |k| &p.tensors[idx(k)];

        // MLP
        add_matmul_tn(&mut grads.tensors[idx(PROJ_W)], lc.gl.view(), dx.view());
        grads.tensors[idx(PROJ_B)] += &dx.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut df = dx.dot(&w(PROJ_W).t());
        df.zip_mut_with(&lc.f, |g, &f| *g *= gelu_grad(f));
        add_matmul_tn(&mut grads.tensors[idx(FC_W)], lc.c.view(), df.view());
        grads.tensors[idx(FC_B)] += &df.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dc = df.dot(&w(FC_W).t());
        let dln2 = {
            let (dg, db) = two_mut(&mut grads.tensors, idx(LN2_G), idx(LN2_B));
            ln_backward(&dc, &lc.ln2, w(LN2_G), dg, db)
        };
        dx += &dln2;

        // attention
        add_matmul_tn(&mut grads.tensors[idx(O_W)], lc.o.view(), dx.view());
        grads.tensors[idx(O_B)] += &dx.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_o = dx.dot(&w(O_W).t());
        let mut dqkv = Array2::<f32>::zeros((t, 3 * d));
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            let q = lc.qkv.slice(s![.., cols.clone()]);
            let k = lc.qkv.slice(s![.., d + cols.start..d + cols.end]);
            let v = lc.qkv.slice(s![.., 2 * d + cols.start..2 * d + cols.end]);
            let pr = &lc.probs[head];
            let do_h = d_o.slice(s![.., cols.clone()]);
            let dp = do_h.dot(&v.t());
            let dv = pr.t().dot(&do_h);
            let rs = (&dp * pr).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (dp - &rs) * pr * scale;
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., cols.clone()]).assign(&dq);
            dqkv.slice_mut(s![.., d + cols.start..d + cols.end]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + cols.start..2 * d + cols.end]).assign(&dv);
        }
        add_matmul_tn(&mut grads.tensors[idx(QKV_W)], lc.a.view(), dqkv.view());
        grads.tensors[idx(QKV_B)] += &dqkv.sum_axis(Axis(0)).insert_axis(Axis(0));
        let da = dqkv.dot(&w(QKV_W).t());
        let dln1 = {
            let (dg, db) = two_mut(&mut grads.tensors, idx(LN1_G), idx(LN1_B));
            ln_backward(&da, &lc.ln1, w(LN1_G), dg, db)
        };
        dx += &dln1;
    }

    for i in 0..t {
        let row = dx.row(i);
        let mut r = grads.tensors[WTE].row_mut(inputs.tokens[i] as usize);
        r += &row;
        let mut r = grads.tensors[WTE].row_mut(inputs.roles[i] as usize);
        r += &row;
        let mut r = grads.tensors[WPE].row_mut(inputs.positions[i] as usize);
        r += &row;
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a < b);
    let (left, right) = v.split_at_mut(b);
    (&mut left[a], &mut right[0])
}
