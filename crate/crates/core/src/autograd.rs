//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are kept on
//! the tape, so a forward pass doubles as inference. [`Tape::backward`] walks
//! the record in reverse and returns gradients for every node, including the
//! parameter leaves registered through [`Tape::param`].
//!
//! Everything is single-threaded and evaluated in a fixed order, so repeated
//! runs produce bitwise-identical values and gradients.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a parameter array across tapes: `group` names the owning
/// parameter set, `index` the array inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: u32,
    pub index: u32,
}

enum Op {
    Constant,
    Param,
    Linear { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Array2<f64>> },
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    BceWithLogits { logits: Var, targets: Array2<f64> },
    GiouLoss { pred: Var, target: Array2<f64> },
    L1Loss { pred: Var, target: Array2<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
    stopped: Vec<Array2<f64>>,
    replay: Option<std::vec::IntoIter<Array2<f64>>>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.mapv_inplace(|x| x / sum);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose [`Tape::stop_gradient`] calls return `values` in order
    /// instead of their arguments. Evaluating a perturbed forward pass this
    /// way holds every stop-gradient input at its unperturbed value, which is
    /// the function whose derivative `backward` computes.
    pub fn replaying(values: Vec<Array2<f64>>) -> Self {
        Self { replay: Some(values.into_iter()), ..Self::default() }
    }

    /// Marks `value` as cut from the graph and records it.
    pub fn stop_gradient(&mut self, value: Array2<f64>) -> Array2<f64> {
        let value = match &mut self.replay {
            Some(it) => it.next().expect("replay shorter than forward pass"),
            None => value,
        };
        self.stopped.push(value.clone());
        value
    }

    /// Values passed through [`Tape::stop_gradient`], in call order.
    pub fn stopped_values(&self) -> &[Array2<f64>] {
        &self.stopped
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// A leaf that never receives a gradient worth collecting.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Registers a parameter leaf. Repeated registration of the same key on
    /// one tape returns the existing node so that gradients accumulate.
    pub fn param(&mut self, key: ParamKey, value: &Array2<f64>) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param);
        self.params.insert(key, v);
        v
    }

    /// `x · w + b` with `b` a single row broadcast over the rows of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut out = self.value(x).dot(self.value(w));
        out += self.value(b);
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `(1, n)` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise layer normalization with learned `(1, n)` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Scaled dot-product attention of `q` (n, d) over `k`, `v` (m, d), split
    /// into `heads` equal column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        self.attention_with_bias(q, k, v, heads, None)
    }

    /// [`Tape::attention`] with a constant `(n, m)` bias added to every head's
    /// logits before the softmax.
    pub fn attention_with_bias(&mut self, q: Var, k: Var, v: Var, heads: usize, bias: Option<&Array2<f64>>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = qv.slice(cols).dot(&kv.slice(cols).t()) * scale;
            if let Some(b) = bias {
                scores += b;
            }
            softmax_rows(&mut scores);
            out.slice_mut(cols).assign(&scores.dot(&vv.slice(cols)));
            probs.push(scores);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), rows);
        self.push(out, Op::GatherRows(a, rows.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Sum of elementwise binary cross-entropy between `sigmoid(logits)` and
    /// `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim());
        let total: f64 = Zip::from(lv)
            .and(&targets)
            .fold(0.0, |acc, &x, &t| acc + x.max(0.0) - x * t + (-x.abs()).exp().ln_1p());
        self.push(Array2::from_elem((1, 1), total), Op::BceWithLogits { logits, targets })
    }

    /// Sum over rows of `1 - giou(pred_row, target_row)`, boxes in
    /// center-size form.
    pub fn giou_loss(&mut self, pred: Var, target: Array2<f64>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim());
        let total: f64 = pv
            .rows()
            .into_iter()
            .zip(target.rows())
            .map(|(p, t)| giou_terms(&[p[0], p[1], p[2], p[3]], &[t[0], t[1], t[2], t[3]]).0)
            .sum();
        self.push(Array2::from_elem((1, 1), total), Op::GiouLoss { pred, target })
    }

    /// Sum of absolute differences.
    pub fn l1_loss(&mut self, pred: Var, target: Array2<f64>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim());
        let total: f64 = Zip::from(pv).and(&target).fold(0.0, |acc, &p, &t| acc + (p - t).abs());
        self.push(Array2::from_elem((1, 1), total), Op::L1Loss { pred, target })
    }

    /// Reverse pass from a scalar `(1, 1)` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    acc(&mut grads, *x, g.dot(&self.value(*w).t()));
                    acc(&mut grads, *w, self.value(*x).t().dot(&g));
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    acc(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                        *g *= 0.5 * (1.0 + t) + 0.5 * x * dt;
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for (r, ((mut out, dh), xh)) in
                        dx.rows_mut().into_iter().zip(dxhat.rows()).zip(xhat.rows()).enumerate()
                    {
                        let mean_dh = dh.sum() / n;
                        let mean_dh_xh = dh.dot(&xh) / n;
                        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &xv| {
                            *o = rstd[r] * (d - mean_dh - xv * mean_dh_xh);
                        });
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dh = qv.ncols() / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(cols).t());
                        let mut ds = &dp * p;
                        let row_dot = ds.sum_axis(Axis(1));
                        Zip::from(ds.rows_mut()).and(p.rows()).and(&row_dot).for_each(
                            |mut dsr, pr, &rd| {
                                Zip::from(&mut dsr).and(&pr).for_each(|d, &pv| *d -= pv * rd);
                            },
                        );
                        ds *= scale;
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    acc(&mut grads, *v, dv);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *q, dq);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let c = g[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(self.value(*a).dim(), c));
                }
                Op::BceWithLogits { logits, targets } => {
                    let c = g[[0, 0]];
                    let mut ga = self.value(*logits).mapv(sigmoid);
                    ga -= targets;
                    ga *= c;
                    acc(&mut grads, *logits, ga);
                }
                Op::GiouLoss { pred, target } => {
                    let c = g[[0, 0]];
                    let pv = self.value(*pred);
                    let mut ga = Array2::zeros(pv.dim());
                    for ((p, t), mut out) in pv.rows().into_iter().zip(target.rows()).zip(ga.rows_mut()) {
                        let (_, d) = giou_terms(&[p[0], p[1], p[2], p[3]], &[t[0], t[1], t[2], t[3]]);
                        for j in 0..4 {
                            out[j] = c * d[j];
                        }
                    }
                    acc(&mut grads, *pred, ga);
                }
                Op::L1Loss { pred, target } => {
                    let c = g[[0, 0]];
                    let mut ga = self.value(*pred) - target;
                    ga.mapv_inplace(|d| c * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 });
                    acc(&mut grads, *pred, ga);
                }
            }
        }

        Gradients { grads, params: self.params.clone() }
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

/// `1 - giou` for center-size boxes and its gradient with respect to the
/// first box.
fn giou_terms(p: &[f64; 4], t: &[f64; 4]) -> (f64, [f64; 4]) {
    let (x1, x2) = (p[0] - 0.5 * p[2], p[0] + 0.5 * p[2]);
    let (y1, y2) = (p[1] - 0.5 * p[3], p[1] + 0.5 * p[3]);
    let (tx1, tx2) = (t[0] - 0.5 * t[2], t[0] + 0.5 * t[2]);
    let (ty1, ty2) = (t[1] - 0.5 * t[3], t[1] + 0.5 * t[3]);

    let iw = (x2.min(tx2) - x1.max(tx1)).max(0.0);
    let ih = (y2.min(ty2) - y1.max(ty1)).max(0.0);
    let inter = iw * ih;
    let area_p = (x2 - x1) * (y2 - y1);
    let area_t = (tx2 - tx1) * (ty2 - ty1);
    let union = area_p + area_t - inter;
    let cw = x2.max(tx2) - x1.min(tx1);
    let ch = y2.max(ty2) - y1.min(ty1);
    let hull = cw * ch;
    if hull <= 0.0 {
        return (1.0, [0.0; 4]);
    }
    if union <= 0.0 {
        // IoU is taken as 0 here; only the hull term remains and it is constant.
        return (1.0 - (0.0 - (hull - union) / hull), [0.0; 4]);
    }
    let loss = 2.0 - inter / union - union / hull;

    let dl_dinter = -(union + inter) / (union * union) + 1.0 / hull;
    let dl_darea = inter / (union * union) - 1.0 / hull;
    let dl_dhull = union / (hull * hull);

    // Partials with respect to the corners x1, x2, y1, y2.
    let mut dc = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        if x1 > tx1 {
            dc[0] -= dl_dinter * ih;
        }
        if x2 < tx2 {
            dc[1] += dl_dinter * ih;
        }
        if y1 > ty1 {
            dc[2] -= dl_dinter * iw;
        }
        if y2 < ty2 {
            dc[3] += dl_dinter * iw;
        }
    }
    dc[0] -= dl_darea * (y2 - y1);
    dc[1] += dl_darea * (y2 - y1);
    dc[2] -= dl_darea * (x2 - x1);
    dc[3] += dl_darea * (x2 - x1);
    if x1 < tx1 {
        dc[0] -= dl_dhull * ch;
    }
    if x2 > tx2 {
        dc[1] += dl_dhull * ch;
    }
    if y1 < ty1 {
        dc[2] -= dl_dhull * cw;
    }
    if y2 > ty2 {
        dc[3] += dl_dhull * cw;
    }

    let grad = [
        dc[0] + dc[1],
        dc[2] + dc[3],
        0.5 * (dc[1] - dc[0]),
        0.5 * (dc[3] - dc[2]),
    ];
    (loss, grad)
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    params: HashMap<ParamKey, Var>,
}

impl Gradients {
    /// Gradient of a leaf node. Interior gradients are released during the
    /// reverse pass.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every registered parameter that the output depends on.
    pub fn params(&self) -> BTreeMap<ParamKey, Array2<f64>> {
        self.params
            .iter()
            .filter_map(|(k, v)| self.wrt(*v).map(|g| (*k, g.clone())))
            .collect()
    }
}
