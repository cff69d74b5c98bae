//! Parameter storage, the handful of layers the detector needs, and AdamW.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamKey, Tape, Var};

/// Index of one array inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub u32);

/// Named parameter arrays owned by one model component.
///
/// The `group` tag keeps parameters of different sets apart when they are
/// registered on a shared [`Tape`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    group: u32,
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    lookup: HashMap<String, u32>,
}

impl ParamSet {
    pub fn new(group: u32) -> Self {
        Self { group, names: Vec::new(), values: Vec::new(), lookup: HashMap::new() }
    }

    pub fn group(&self) -> u32 {
        self.group
    }

    pub fn set_group(&mut self, group: u32) {
        self.group = group;
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len() as u32;
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Overwrites every value with the one stored under the same name in
    /// `other`. Both sets must hold exactly the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamSet) -> crate::error::Result<()> {
        use crate::error::Error;
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} differs from expected {}",
                other.len(),
                self.len()
            )));
        }
        for (name, value) in other.iter() {
            let id = self.id(name).ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            if self.get(id).dim() != value.dim() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            *self.get_mut(id) = value.clone();
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0 as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0 as usize]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0 as usize]
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey { group: self.group, index: id.0 }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(self.key(id), self.get(id))
    }

    /// Gradients from a backward pass that belong to this set, by id.
    pub fn own_grads<'a>(
        &self,
        grads: &'a BTreeMap<ParamKey, Array2<f64>>,
    ) -> impl Iterator<Item = (ParamId, &'a Array2<f64>)> + 'a {
        let group = self.group;
        grads
            .iter()
            .filter(move |(k, _)| k.group == group)
            .map(|(k, g)| (ParamId(k.index), g))
    }
}

/// Uniform Xavier/Glorot initialization.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-bound..bound))
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = ps.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out));
        let b = ps.add(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Self { w, b }
    }

    /// Weight and bias both start at zero.
    pub fn zeros(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = ps.add(format!("{name}.weight"), Array2::zeros((fan_in, fan_out)));
        let b = ps.add(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Self { w, b }
    }

    pub fn forward(&self, ps: &ParamSet, tape: &mut Tape, x: Var) -> Var {
        let w = ps.var(tape, self.w);
        let b = ps.var(tape, self.b);
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Array2::ones((1, width)));
        let beta = ps.add(format!("{name}.beta"), Array2::zeros((1, width)));
        Self { gamma, beta }
    }

    pub fn forward(&self, ps: &ParamSet, tape: &mut Tape, x: Var) -> Var {
        let g = ps.var(tape, self.gamma);
        let b = ps.var(tape, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, width: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(ps, rng, &format!("{name}.q"), width, width),
            k: Linear::new(ps, rng, &format!("{name}.k"), width, width),
            v: Linear::new(ps, rng, &format!("{name}.v"), width, width),
            out: Linear::new(ps, rng, &format!("{name}.out"), width, width),
            heads,
        }
    }

    pub fn forward(&self, ps: &ParamSet, tape: &mut Tape, query: Var, key: Var, value: Var) -> Var {
        self.forward_with_bias(ps, tape, query, key, value, None)
    }

    pub fn forward_with_bias(
        &self,
        ps: &ParamSet,
        tape: &mut Tape,
        query: Var,
        key: Var,
        value: Var,
        bias: Option<&Array2<f64>>,
    ) -> Var {
        let q = self.q.forward(ps, tape, query);
        let k = self.k.forward(ps, tape, key);
        let v = self.v.forward(ps, tape, value);
        let attn = tape.attention_with_bias(q, k, v, self.heads, bias);
        self.out.forward(ps, tape, attn)
    }
}

/// Two-layer perceptron with a ReLU between the layers.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn forward(&self, ps: &ParamSet, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden.forward(ps, tape, x);
        let h = tape.relu(h);
        self.out.forward(ps, tape, h)
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<ParamKey, (Array2<f64>, Array2<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter. Call once per optimization step,
    /// before [`AdamW::update`] on each parameter set.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update to every parameter of `ps` that has a gradient and
    /// passes `trainable`. Others are left untouched, bit for bit.
    pub fn update(
        &mut self,
        ps: &mut ParamSet,
        grads: &BTreeMap<ParamKey, Array2<f64>>,
        trainable: impl Fn(&str) -> bool,
    ) {
        assert!(self.step > 0, "begin_step must precede update");
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let owned: Vec<(ParamId, Array2<f64>)> =
            ps.own_grads(grads).map(|(id, g)| (id, g.clone())).collect();
        for (id, g) in owned {
            if !trainable(ps.name(id)) {
                continue;
            }
            let key = ps.key(id);
            let (m, v) = self
                .moments
                .entry(key)
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            let (b1, b2) = (self.beta1, self.beta2);
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
            ndarray::Zip::from(ps.get_mut(id)).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * wd * *p;
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Rescales all gradients in place so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut BTreeMap<ParamKey, Array2<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}
