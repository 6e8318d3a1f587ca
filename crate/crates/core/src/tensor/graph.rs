//! Reverse-mode tape over dense f64 tensors.
//!
//! A `Graph` owns every intermediate of one forward pass; ops append nodes
//! and `backward` walks the tape in reverse creation order. Gradients
//! accumulate additively into each node until the graph is dropped.

use crate::error::{Error, Result};

/// Handle into a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Reshape { a: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddConst { a: Var },
    AddBias { a: Var, b: Var },
    Matmul { a: Var, b: Var },
    MatmulTB { a: Var, b: Var },
    SoftmaxRows { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Exp { a: Var },
    ScaledTanh { a: Var, s: f64 },
    DwConv5x5 { x: Var, w: Var, b: Var },
    GridSample { x: Var, loc: Var },
    MulChan { x: Var, a: Var },
    ScaleByScalar { a: Var, s: Var },
    SliceRows { a: Var, r0: usize },
    SliceCols { a: Var, c0: usize, c1: usize },
    ConcatRows { parts: Vec<Var> },
    SumAll { a: Var },
    BceWithLogitsMean { x: Var, target: Vec<f64> },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Op,
}

/// One recorded forward pass.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    /// (group name, param name, var) for harvesting gradients after backward.
    pub(crate) binds: Vec<(String, String, Var)>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn erf(x: f64) -> f64 {
    // Abramowitz & Stegun 7.1.26 is too coarse for the gradient suites;
    // use the double-precision series/continued-fraction split instead.
    // Accuracy ~1e-16 relative over the range the models exercise.
    if x == 0.0 {
        return 0.0;
    }
    let ax = x.abs();
    let v = if ax < 3.0 {
        // Taylor series erf(x) = 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1))
        let mut term = ax;
        let mut sum = ax;
        let x2 = ax * ax;
        let mut n = 0usize;
        loop {
            n += 1;
            term *= -x2 / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-18 * sum.abs() || n > 200 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // tail: erfc via asymptotic continued fraction, erf = 1 - erfc
        let mut cf = 0.0;
        for k in (1..=40).rev() {
            cf = 0.5 * k as f64 / (ax + cf);
        }
        let erfc = (-ax * ax).exp() / ((ax + cf) * std::f64::consts::PI.sqrt());
        1.0 - erfc
    };
    if x < 0.0 {
        -v
    } else {
        v
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bilinear sample weights for one normalized location.
/// Returns ((x0, x1, wx), (y0, y1, wy), in_range_x, in_range_y).
#[allow(clippy::type_complexity)]
fn sample_coeffs(
    u: f64,
    v: f64,
    w: usize,
    h: usize,
) -> ((usize, usize, f64), (usize, usize, f64), bool, bool) {
    let px_raw = (u + 1.0) * 0.5 * (w as f64 - 1.0);
    let py_raw = (v + 1.0) * 0.5 * (h as f64 - 1.0);
    let in_x = px_raw > 0.0 && px_raw < w as f64 - 1.0;
    let in_y = py_raw > 0.0 && py_raw < h as f64 - 1.0;
    let px = px_raw.clamp(0.0, w as f64 - 1.0);
    let py = py_raw.clamp(0.0, h as f64 - 1.0);
    let x0 = (px.floor() as usize).min(w.saturating_sub(2));
    let y0 = (py.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let wx = px - x0 as f64;
    let wy = py - y0 as f64;
    ((x0, x1, wx), (y0, y1, wy), in_x, in_y)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite output from {op:?}"
        );
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Accumulated gradient of a node; empty slice if none has been computed.
    pub fn grad(&self, v: Var) -> &[f64] {
        self.nodes[v.0].grad.as_deref().unwrap_or(&[])
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Var {
        assert_eq!(numel(shape), data.len(), "leaf shape/data mismatch");
        self.push(shape.to_vec(), data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(&[1], vec![v])
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let req = self.req(a) || self.req(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let req = self.req(a) || self.req(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x / y)
            .collect();
        let req = self.req(a) || self.req(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, Op::Div { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, req, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, req, Op::AddConst { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| gelu_scalar(x)).collect();
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, req, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| sigmoid_scalar(x)).collect();
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, req, Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, req, Op::Exp { a })
    }

    /// `s_p * tanh(x)`, the offset clamp. `s_p` must be positive.
    pub fn scaled_tanh(&mut self, a: Var, s: f64) -> Result<Var> {
        if s <= 0.0 {
            return Err(Error::Config(format!("scaled_tanh scale must be > 0, got {s}")));
        }
        // tanh rounds to exactly +/-1 in f64 once |x| exceeds ~19; pull it
        // strictly inside so the output bound |y| < s is strict for any input
        let cap = 1.0 - f64::EPSILON;
        let data = self
            .nodes[a.0]
            .data
            .iter()
            .map(|x| s * x.tanh().clamp(-cap, cap))
            .collect();
        let req = self.req(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, Op::ScaledTanh { a, s }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[a.0].data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let req = self.req(a);
        Ok(self.push(shape.to_vec(), data, req, Op::Reshape { a }))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * row[j];
                }
            }
        }
        let req = self.req(a) || self.req(b);
        Ok(self.push(vec![m, n], out, req, Op::Matmul { a, b }))
    }

    /// `a @ b^T` with `a: m×k`, `b: n×k`.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape { op: "matmul_tb", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += da[i * k + p] * db[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        let req = self.req(a) || self.req(b);
        Ok(self.push(vec![m, n], out, req, Op::MatmulTB { a, b }))
    }

    /// Broadcast-add a bias vector over the last axis.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let c = *sa.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != c {
            return Err(Error::Shape { op: "add_bias", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let bias = self.nodes[b.0].data.clone();
        let data = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias[i % c])
            .collect();
        let req = self.req(a) || self.req(b);
        Ok(self.push(sa.to_vec(), data, req, Op::AddBias { a, b }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::Shape { op: "softmax_rows", lhs: sa, rhs: vec![] });
        }
        let (r, c) = (sa[0], sa[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[a.0].data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let req = self.req(a);
        Ok(self.push(sa, out, req, Op::SoftmaxRows { a }))
    }

    /// LayerNorm over the last axis, per leading position.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape { op: "layer_norm", lhs: sx, rhs: self.shape(gamma).to_vec() });
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let n = self.nodes[x.0].data.len() / c;
        let mut out = vec![0.0; n * c];
        for p in 0..n {
            let xs = &self.nodes[x.0].data[p * c..(p + 1) * c];
            let mean = xs.iter().sum::<f64>() / c as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                let xhat = (xs[j] - mean) * rstd;
                out[p * c + j] = self.nodes[gamma.0].data[j] * xhat + self.nodes[beta.0].data[j];
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(sx, out, req, Op::LayerNorm { x, gamma, beta, eps }))
    }

    // ---- convolutions & sampling ----

    /// 1x1 convolution over an `H×W×Cin` map: per-position linear map.
    pub fn conv_1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sx[2] != sw[0] {
            return Err(Error::Shape { op: "conv_1x1", lhs: sx, rhs: sw });
        }
        let (h, wd, cout) = (sx[0], sx[1], sw[1]);
        let flat = self.reshape(x, &[h * wd, sx[2]])?;
        let y = self.matmul(flat, w)?;
        let y = self.add_bias(y, b)?;
        self.reshape(y, &[h, wd, cout])
    }

    /// 5x5 depthwise convolution, zero padding 2, same-size output.
    pub fn depthwise_conv5x5(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw != [5, 5, sx[2]] {
            return Err(Error::Shape { op: "depthwise_conv5x5", lhs: sx, rhs: sw });
        }
        let (h, wd, c) = (sx[0], sx[1], sx[2]);
        let xd = &self.nodes[x.0].data;
        let wdta = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0; h * wd * c];
        for i in 0..h {
            for j in 0..wd {
                for ch in 0..c {
                    let mut acc = bd[ch];
                    for di in 0..5usize {
                        let ii = i as isize + di as isize - 2;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for dj in 0..5usize {
                            let jj = j as isize + dj as isize - 2;
                            if jj < 0 || jj >= wd as isize {
                                continue;
                            }
                            acc += wdta[(di * 5 + dj) * c + ch]
                                * xd[(ii as usize * wd + jj as usize) * c + ch];
                        }
                    }
                    out[(i * wd + j) * c + ch] = acc;
                }
            }
        }
        let req = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(vec![h, wd, c], out, req, Op::DwConv5x5 { x, w, b }))
    }

    /// Bilinear sampling of `x: H×W×C` at normalized locations `loc: H'×W'×2`
    /// (align-corners; u=-1 maps to column 0, u=+1 to column W-1; border clamp).
    pub fn grid_sample_bilinear(&mut self, x: Var, loc: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sl = self.shape(loc).to_vec();
        if sx.len() != 3 || sl.len() != 3 || sl[2] != 2 {
            return Err(Error::Shape { op: "grid_sample_bilinear", lhs: sx, rhs: sl });
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let (ho, wo) = (sl[0], sl[1]);
        let xd = &self.nodes[x.0].data;
        let ld = &self.nodes[loc.0].data;
        let mut out = vec![0.0; ho * wo * c];
        for o in 0..ho * wo {
            let (u, v) = (ld[o * 2], ld[o * 2 + 1]);
            let ((x0, x1, wx), (y0, y1, wy), _, _) = sample_coeffs(u, v, w, h);
            for ch in 0..c {
                let v00 = xd[(y0 * w + x0) * c + ch];
                let v01 = xd[(y0 * w + x1) * c + ch];
                let v10 = xd[(y1 * w + x0) * c + ch];
                let v11 = xd[(y1 * w + x1) * c + ch];
                out[o * c + ch] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                    + wy * ((1.0 - wx) * v10 + wx * v11);
            }
        }
        let req = self.req(x) || self.req(loc);
        Ok(self.push(vec![ho, wo, c], out, req, Op::GridSample { x, loc }))
    }

    /// Per-position channel scaling: `x: H×W×C` times `a: H×W×1`.
    pub fn mul_channels(&mut self, x: Var, a: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sa = self.shape(a).to_vec();
        if sx.len() != 3 || sa != [sx[0], sx[1], 1] {
            return Err(Error::Shape { op: "mul_channels", lhs: sx, rhs: sa });
        }
        let c = sx[2];
        let ad = self.nodes[a.0].data.clone();
        let data = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * ad[i / c])
            .collect();
        let req = self.req(x) || self.req(a);
        Ok(self.push(sx, data, req, Op::MulChan { x, a }))
    }

    /// Multiply every element of `a` by a 1-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.nodes[s.0].data[0];
        let data = self.nodes[a.0].data.iter().map(|x| x * sv).collect();
        let req = self.req(a) || self.req(s);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, Op::ScaleByScalar { a, s }))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || r0 >= r1 || r1 > sa[0] {
            return Err(Error::Shape { op: "slice_rows", lhs: sa, rhs: vec![r0, r1] });
        }
        let c = sa[1];
        let data = self.nodes[a.0].data[r0 * c..r1 * c].to_vec();
        let req = self.req(a);
        Ok(self.push(vec![r1 - r0, c], data, req, Op::SliceRows { a, r0 }))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || c0 >= c1 || c1 > sa[1] {
            return Err(Error::Shape { op: "slice_cols", lhs: sa, rhs: vec![c0, c1] });
        }
        let (r, c) = (sa[0], sa[1]);
        let w = c1 - c0;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.nodes[a.0].data[i * c + c0..i * c + c1]);
        }
        let req = self.req(a);
        Ok(self.push(vec![r, w], data, req, Op::SliceCols { a, c0, c1 }))
    }

    /// Stack 2-D pieces with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows needs at least one part".into()));
        }
        let c = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let sp = self.shape(p).to_vec();
            if sp.len() != 2 || sp[1] != c {
                return Err(Error::Shape { op: "concat_rows", lhs: vec![rows, c], rhs: sp });
            }
            rows += sp[0];
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let req = parts.iter().any(|&p| self.req(p));
        Ok(self.push(vec![rows, c], data, req, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let req = self.req(a);
        self.push(vec![1], vec![s], req, Op::SumAll { a })
    }

    /// Mean of the numerically-stable binary cross entropy with logits.
    pub fn bce_with_logits_mean(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        if self.nodes[x.0].data.len() != target.len() {
            return Err(Error::Shape {
                op: "bce_with_logits_mean",
                lhs: self.shape(x).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = target.len() as f64;
        let mut acc = 0.0;
        for (&xi, &ti) in self.nodes[x.0].data.iter().zip(target) {
            acc += xi.max(0.0) - xi * ti + (-xi.abs()).exp().ln_1p();
        }
        let req = self.req(x);
        Ok(self.push(
            vec![1],
            vec![acc / n],
            req,
            Op::BceWithLogitsMean { x, target: target.to_vec() },
        ))
    }

    // ---- parameters ----

    /// Leaf bound to a named parameter; gradients are harvested back into the
    /// owning group by [`Graph::write_grads`].
    pub fn bind_param(
        &mut self,
        group_name: &str,
        param_name: &str,
        shape: &[usize],
        data: Vec<f64>,
        trainable: bool,
    ) -> Var {
        let v = self.leaf(shape, data, trainable);
        self.binds.push((group_name.to_string(), param_name.to_string(), v));
        v
    }

    /// Accumulated gradients for all params bound under `group_name`.
    pub fn collect_grads(&self, group_name: &str) -> Vec<(String, Vec<f64>)> {
        self.binds
            .iter()
            .filter(|(g, _, v)| g == group_name && self.nodes[v.0].grad.is_some())
            .map(|(_, name, v)| (name.clone(), self.nodes[v.0].grad.clone().unwrap()))
            .collect()
    }

    // ---- reverse pass ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    /// Reverse-mode accumulation from a scalar loss. Repeated calls without
    /// a fresh graph add into existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let gy = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(id, &gy, &mut grads);
            // surface the gradient on the node itself, accumulating
            let slot = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; gy.len()]);
            for (s, g) in slot.iter_mut().zip(&gy) {
                *s += g;
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    fn apply_backward(&mut self, id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Reshape { a } => self.acc(grads, a, gy),
            Op::Add { a, b } => {
                self.acc(grads, a, gy);
                self.acc(grads, b, gy);
            }
            Op::Mul { a, b } => {
                let ga: Vec<f64> =
                    gy.iter().zip(&self.nodes[b.0].data).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> =
                    gy.iter().zip(&self.nodes[a.0].data).map(|(g, x)| g * x).collect();
                self.acc(grads, a, &ga);
                self.acc(grads, b, &gb);
            }
            Op::Div { a, b } => {
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                let ga: Vec<f64> = gy.iter().zip(bd).map(|(g, y)| g / y).collect();
                let gb: Vec<f64> = gy
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.acc(grads, a, &ga);
                self.acc(grads, b, &gb);
            }
            Op::Scale { a, c } => {
                let ga: Vec<f64> = gy.iter().map(|g| g * c).collect();
                self.acc(grads, a, &ga);
            }
            Op::AddConst { a, .. } => self.acc(grads, a, gy),
            Op::AddBias { a, b } => {
                self.acc(grads, a, gy);
                let c = self.nodes[b.0].data.len();
                let mut gb = vec![0.0; c];
                for (i, g) in gy.iter().enumerate() {
                    gb[i % c] += g;
                }
                self.acc(grads, b, &gb);
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let nn = self.shape(b)[1];
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                // dA = dC * B^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..nn {
                            acc += gy[i * nn + j] * bd[p * nn + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                // dB = A^T * dC
                let mut gb = vec![0.0; k * nn];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..nn {
                            gb[p * nn + j] += av * gy[i * nn + j];
                        }
                    }
                }
                self.acc(grads, a, &ga);
                self.acc(grads, b, &gb);
            }
            Op::MatmulTB { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let nn = self.shape(b)[0];
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                // C = A B^T : dA = dC * B ; dB = dC^T * A
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..nn {
                        let g = gy[i * nn + j];
                        if g == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[i * k + p] += g * bd[j * k + p];
                        }
                    }
                }
                let mut gb = vec![0.0; nn * k];
                for i in 0..m {
                    for j in 0..nn {
                        let g = gy[i * nn + j];
                        if g == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            gb[j * k + p] += g * ad[i * k + p];
                        }
                    }
                }
                self.acc(grads, a, &ga);
                self.acc(grads, b, &gb);
            }
            Op::SoftmaxRows { a } => {
                let sa = self.shape(a).to_vec();
                let (r, c) = (sa[0], sa[1]);
                let y = &self.nodes[id].data;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let dot: f64 =
                        (0..c).map(|j| gy[i * c + j] * y[i * c + j]).sum();
                    for j in 0..c {
                        ga[i * c + j] = y[i * c + j] * (gy[i * c + j] - dot);
                    }
                }
                self.acc(grads, a, &ga);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let c = *self.shape(x).last().unwrap();
                let n = self.nodes[x.0].data.len() / c;
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                let mut gx = vec![0.0; n * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for p in 0..n {
                    let xs = &xd[p * c..(p + 1) * c];
                    let mean = xs.iter().sum::<f64>() / c as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let gys = &gy[p * c..(p + 1) * c];
                    let mut m1 = 0.0; // mean(gamma*dy)
                    let mut m2 = 0.0; // mean(gamma*dy*xhat)
                    for j in 0..c {
                        let xhat = (xs[j] - mean) * rstd;
                        let gdy = gd[j] * gys[j];
                        m1 += gdy;
                        m2 += gdy * xhat;
                        gg[j] += gys[j] * xhat;
                        gb[j] += gys[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        let xhat = (xs[j] - mean) * rstd;
                        gx[p * c + j] = (gd[j] * gys[j] - m1 - xhat * m2) * rstd;
                    }
                }
                self.acc(grads, x, &gx);
                self.acc(grads, gamma, &gg);
                self.acc(grads, beta, &gb);
            }
            Op::Gelu { a } => {
                let ga: Vec<f64> = gy
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| g * gelu_grad_scalar(x))
                    .collect();
                self.acc(grads, a, &ga);
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[id].data;
                let ga: Vec<f64> = gy.iter().zip(y).map(|(g, &s)| g * s * (1.0 - s)).collect();
                self.acc(grads, a, &ga);
            }
            Op::Exp { a } => {
                let y = &self.nodes[id].data;
                let ga: Vec<f64> = gy.iter().zip(y).map(|(g, &e)| g * e).collect();
                self.acc(grads, a, &ga);
            }
            Op::ScaledTanh { a, s } => {
                let ga: Vec<f64> = gy
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| {
                        let t = x.tanh();
                        g * s * (1.0 - t * t)
                    })
                    .collect();
                self.acc(grads, a, &ga);
            }
            Op::DwConv5x5 { x, w, b } => {
                let sx = self.shape(x).to_vec();
                let (h, wd, c) = (sx[0], sx[1], sx[2]);
                let xd = &self.nodes[x.0].data;
                let wdta = &self.nodes[w.0].data;
                let mut gx = vec![0.0; h * wd * c];
                let mut gw = vec![0.0; 25 * c];
                let mut gb = vec![0.0; c];
                for i in 0..h {
                    for j in 0..wd {
                        for ch in 0..c {
                            let g = gy[(i * wd + j) * c + ch];
                            if g == 0.0 {
                                continue;
                            }
                            gb[ch] += g;
                            for di in 0..5usize {
                                let ii = i as isize + di as isize - 2;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for dj in 0..5usize {
                                    let jj = j as isize + dj as isize - 2;
                                    if jj < 0 || jj >= wd as isize {
                                        continue;
                                    }
                                    let xi = (ii as usize * wd + jj as usize) * c + ch;
                                    gx[xi] += g * wdta[(di * 5 + dj) * c + ch];
                                    gw[(di * 5 + dj) * c + ch] += g * xd[xi];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, x, &gx);
                self.acc(grads, w, &gw);
                self.acc(grads, b, &gb);
            }
            Op::GridSample { x, loc } => {
                let sx = self.shape(x).to_vec();
                let (h, w, c) = (sx[0], sx[1], sx[2]);
                let no = self.nodes[loc.0].data.len() / 2;
                let xd = &self.nodes[x.0].data;
                let ld = &self.nodes[loc.0].data;
                let mut gx = vec![0.0; h * w * c];
                let mut gl = vec![0.0; no * 2];
                for o in 0..no {
                    let (u, v) = (ld[o * 2], ld[o * 2 + 1]);
                    let ((x0, x1, wx), (y0, y1, wy), in_x, in_y) = sample_coeffs(u, v, w, h);
                    let dpx_du = if in_x { 0.5 * (w as f64 - 1.0) } else { 0.0 };
                    let dpy_dv = if in_y { 0.5 * (h as f64 - 1.0) } else { 0.0 };
                    let mut du = 0.0;
                    let mut dv = 0.0;
                    for ch in 0..c {
                        let g = gy[o * c + ch];
                        if g == 0.0 {
                            continue;
                        }
                        let v00 = xd[(y0 * w + x0) * c + ch];
                        let v01 = xd[(y0 * w + x1) * c + ch];
                        let v10 = xd[(y1 * w + x0) * c + ch];
                        let v11 = xd[(y1 * w + x1) * c + ch];
                        gx[(y0 * w + x0) * c + ch] += g * (1.0 - wy) * (1.0 - wx);
                        gx[(y0 * w + x1) * c + ch] += g * (1.0 - wy) * wx;
                        gx[(y1 * w + x0) * c + ch] += g * wy * (1.0 - wx);
                        gx[(y1 * w + x1) * c + ch] += g * wy * wx;
                        du += g * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                        dv += g * (((1.0 - wx) * v10 + wx * v11) - ((1.0 - wx) * v00 + wx * v01));
                    }
                    gl[o * 2] = du * dpx_du;
                    gl[o * 2 + 1] = dv * dpy_dv;
                }
                self.acc(grads, x, &gx);
                self.acc(grads, loc, &gl);
            }
            Op::MulChan { x, a } => {
                let c = *self.shape(x).last().unwrap();
                let xd = &self.nodes[x.0].data;
                let ad = &self.nodes[a.0].data;
                let gx: Vec<f64> =
                    gy.iter().enumerate().map(|(i, g)| g * ad[i / c]).collect();
                let mut ga = vec![0.0; ad.len()];
                for (i, g) in gy.iter().enumerate() {
                    ga[i / c] += g * xd[i];
                }
                self.acc(grads, x, &gx);
                self.acc(grads, a, &ga);
            }
            Op::ScaleByScalar { a, s } => {
                let sv = self.nodes[s.0].data[0];
                let ad = &self.nodes[a.0].data;
                let ga: Vec<f64> = gy.iter().map(|g| g * sv).collect();
                let gs: f64 = gy.iter().zip(ad).map(|(g, x)| g * x).sum();
                self.acc(grads, a, &ga);
                self.acc(grads, s, &[gs]);
            }
            Op::SliceRows { a, r0, .. } => {
                let c = self.shape(a)[1];
                let mut ga = vec![0.0; self.nodes[a.0].data.len()];
                ga[r0 * c..r0 * c + gy.len()].copy_from_slice(gy);
                self.acc(grads, a, &ga);
            }
            Op::SliceCols { a, c0, c1 } => {
                let sa = self.shape(a).to_vec();
                let (r, c) = (sa[0], sa[1]);
                let w = c1 - c0;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + c0..i * c + c1].copy_from_slice(&gy[i * w..(i + 1) * w]);
                }
                self.acc(grads, a, &ga);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    let piece = gy[off..off + len].to_vec();
                    self.acc(grads, p, &piece);
                    off += len;
                }
            }
            Op::SumAll { a } => {
                let ga = vec![gy[0]; self.nodes[a.0].data.len()];
                self.acc(grads, a, &ga);
            }
            Op::BceWithLogitsMean { x, target } => {
                let n = target.len() as f64;
                let ga: Vec<f64> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(&target)
                    .map(|(&xi, &ti)| gy[0] * (sigmoid_scalar(xi) - ti) / n)
                    .collect();
                self.acc(grads, x, &ga);
            }
        }
    }
}
