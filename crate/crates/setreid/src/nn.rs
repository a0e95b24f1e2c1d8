//! Parameter storage, initialization, the Adam optimizer and the
//! multi-head attention builder shared by both encoders.

use crate::tape::{Graph, Grads, Tid};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// How a parameter is filled at construction time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
}

/// Declares one named parameter: the same spec drives allocation and
/// parameter counting, so audits can never drift from the real model.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Group = name prefix up to the first '.'.
    pub fn group(&self) -> &str {
        group_of(&self.name)
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap()
}

pub fn count_group(specs: &[ParamSpec], group: &str) -> usize {
    specs
        .iter()
        .filter(|s| s.group() == group)
        .map(|s| s.count())
        .sum()
}

/// Ordered, named f64 parameter arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates every spec in order, drawing initial values from `rng`.
    pub fn from_specs(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Self {
        let mut store = Self::new();
        for spec in specs {
            let arr = match spec.init {
                Init::Zeros => ArrayD::zeros(IxDyn(&spec.shape)),
                Init::Ones => ArrayD::ones(IxDyn(&spec.shape)),
                Init::Normal(std) => {
                    ArrayD::from_shape_fn(IxDyn(&spec.shape), |_| normal_sample(rng) * std)
                }
            };
            store.insert(spec.name.clone(), arr);
        }
        store
    }

    pub fn insert(&mut self, name: String, value: ArrayD<f64>) {
        self.entries.insert(name, value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove_group(&mut self, group: &str) {
        self.entries.retain(|k, _| group_of(k) != group);
    }

    /// SHA-256 over the raw little-endian bytes of every parameter in a
    /// group, in store order. Used by the freezing-contract checks.
    pub fn group_hash(&self, group: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, arr) in &self.entries {
            if group_of(name) != group {
                continue;
            }
            h.update(name.as_bytes());
            for v in arr.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for name in self.entries.keys() {
            let g = group_of(name);
            if !seen.iter().any(|s: &String| s == g) {
                seen.push(g.to_string());
            }
        }
        seen
    }
}

/// Box-Muller standard normal; two uniforms per sample keeps the stream
/// layout identical across platforms.
pub fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Binds store parameters to graph leaves on demand, remembering which
/// leaf belongs to which name so gradients can be routed back.
pub struct Binder<'s> {
    store: &'s ParamStore,
    trainable: Vec<String>,
    bound: IndexMap<String, Tid>,
}

impl<'s> Binder<'s> {
    /// `trainable`: group names whose parameters need gradients.
    pub fn new(store: &'s ParamStore, trainable: &[String]) -> Self {
        Binder {
            store,
            trainable: trainable.to_vec(),
            bound: IndexMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Tid {
        if let Some(&t) = self.bound.get(name) {
            return t;
        }
        let value = self.store.get(name).clone();
        let t = if self.trainable.iter().any(|g| g == group_of(name)) {
            g.leaf(value)
        } else {
            g.constant(value)
        };
        self.bound.insert(name.to_string(), t);
        t
    }

    /// Collects (name, gradient) pairs for every bound trainable parameter.
    pub fn collect_grads(&self, grads: &Grads) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        for (name, &tid) in &self.bound {
            if !self.trainable.iter().any(|g| g == group_of(name)) {
                continue;
            }
            if let Some(g) = grads.get(tid) {
                out.push((name.clone(), g.clone()));
            }
        }
        out
    }
}

/// Adam with decoupled constant hyperparameters (beta1=0.9, beta2=0.999).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: IndexMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(String, ArrayD<f64>)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let param = store.get_mut(name);
            let mut g = grad.clone();
            if self.weight_decay > 0.0 {
                g = g + &param.view().mapv(|p| p * self.weight_decay);
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            *m = m.mapv(|x| x * self.beta1) + &g.mapv(|x| x * (1.0 - self.beta1));
            *v = v.mapv(|x| x * self.beta2) + &g.mapv(|x| x * x * (1.0 - self.beta2));
            let mhat = m.mapv(|x| x / bc1);
            let vhat = v.mapv(|x| x / bc2);
            let update = &mhat / &vhat.mapv(|x| x.sqrt() + self.eps);
            *param -= &update.mapv(|x| x * self.lr);
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (&String, &(ArrayD<f64>, ArrayD<f64>))> {
        self.moments.iter()
    }

    pub fn set_moment(&mut self, name: String, m: ArrayD<f64>, v: ArrayD<f64>) {
        self.moments.insert(name, (m, v));
    }
}

/// Multi-head attention weight names under a prefix.
pub fn msa_specs(prefix: &str, dim: usize, std: f64) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    for w in ["wq", "wk", "wv", "wo"] {
        s.push(ParamSpec::new(
            format!("{prefix}.{w}"),
            &[dim, dim],
            Init::Normal(std),
        ));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        s.push(ParamSpec::new(format!("{prefix}.{b}"), &[dim], Init::Zeros));
    }
    s
}

/// Builds multi-head self-attention over the middle (sequence) axis of a
/// `[batch, seq, dim]` tensor. `mask` is added to the raw scores and must
/// broadcast to `[seq, seq]`.
pub fn msa_forward(
    g: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    x: Tid,
    heads: usize,
    mask: Option<Tid>,
) -> Tid {
    let shape = g.shape(x).to_vec();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(d % heads, 0, "dim not divisible by heads");
    let dh = d / heads;

    let proj = |g: &mut Graph, binder: &mut Binder, w: &str, bias: &str| -> Tid {
        let wt = binder.get(g, &format!("{prefix}.{w}"));
        let bt = binder.get(g, &format!("{prefix}.{bias}"));
        let y = g.matmul(x, wt);
        g.add_broadcast(y, bt)
    };
    let q = proj(g, binder, "wq", "bq");
    let k = proj(g, binder, "wk", "bk");
    let v = proj(g, binder, "wv", "bv");

    // [b, s, d] -> [b*heads, s, dh]
    let split = |g: &mut Graph, t: Tid| -> Tid {
        let t = g.reshape(t, &[b, s, heads, dh]);
        let t = g.permute(t, &[0, 2, 1, 3]);
        g.reshape(t, &[b * heads, s, dh])
    };
    let q = split(g, q);
    let k = split(g, k);
    let v = split(g, v);

    let kt = g.permute(k, &[0, 2, 1]);
    let scores = g.bmm(q, kt);
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let scores = match mask {
        Some(m) => g.add_broadcast(scores, m),
        None => scores,
    };
    let attn = g.softmax(scores);
    let ctx = g.bmm(attn, v);

    // [b*heads, s, dh] -> [b, s, d]
    let ctx = g.reshape(ctx, &[b, heads, s, dh]);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    let ctx = g.reshape(ctx, &[b, s, d]);

    let wo = binder.get(g, &format!("{prefix}.wo"));
    let bo = binder.get(g, &format!("{prefix}.bo"));
    let y = g.matmul(ctx, wo);
    g.add_broadcast(y, bo)
}

pub fn layer_norm_bound(
    g: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    x: Tid,
) -> Tid {
    let gamma = binder.get(g, &format!("{prefix}.g"));
    let beta = binder.get(g, &format!("{prefix}.b"));
    g.layer_norm(x, gamma, beta)
}

pub fn linear_bound(
    g: &mut Graph,
    binder: &mut Binder,
    x: Tid,
    w: &str,
    b: Option<&str>,
) -> Tid {
    let wt = binder.get(g, w);
    let y = g.matmul(x, wt);
    match b {
        Some(b) => {
            let bt = binder.get(g, b);
            g.add_broadcast(y, bt)
        }
        None => y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    #[test]
    fn store_from_specs_respects_init() {
        let specs = vec![
            ParamSpec::new("a.w", &[2, 3], Init::Normal(0.1)),
            ParamSpec::new("a.b", &[3], Init::Zeros),
            ParamSpec::new("b.g", &[3], Init::Ones),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = ParamStore::from_specs(&specs, &mut rng);
        assert_eq!(store.get("a.w").shape(), &[2, 3]);
        assert!(store.get("a.b").iter().all(|&v| v == 0.0));
        assert!(store.get("b.g").iter().all(|&v| v == 1.0));
        assert_eq!(store.groups(), vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn group_hash_tracks_only_its_group() {
        let specs = vec![
            ParamSpec::new("a.w", &[4], Init::Normal(1.0)),
            ParamSpec::new("b.w", &[4], Init::Normal(1.0)),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::from_specs(&specs, &mut rng);
        let ha = store.group_hash("a");
        let hb = store.group_hash("b");
        store.get_mut("b.w")[IxDyn(&[0])] += 1.0;
        assert_eq!(ha, store.group_hash("a"));
        assert_ne!(hb, store.group_hash("b"));
    }

    #[test]
    fn adam_moves_params_toward_minimum() {
        // minimize (x - 3)^2 elementwise
        let specs = vec![ParamSpec::new("p.x", &[4], Init::Zeros)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::from_specs(&specs, &mut rng);
        let mut opt = Adam::new(0.1, 0.0);
        for _ in 0..300 {
            let grad = store.get("p.x").mapv(|x| 2.0 * (x - 3.0));
            opt.apply(&mut store, &[("p.x".to_string(), grad)]);
        }
        for &v in store.get("p.x").iter() {
            assert!((v - 3.0).abs() < 1e-3, "got {v}");
        }
    }

    #[test]
    fn binder_marks_frozen_groups_constant() {
        let specs = vec![
            ParamSpec::new("a.w", &[2], Init::Ones),
            ParamSpec::new("b.w", &[2], Init::Ones),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = ParamStore::from_specs(&specs, &mut rng);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &["a".to_string()]);
        let aw = binder.get(&mut g, "a.w");
        let bw = binder.get(&mut g, "b.w");
        let y = g.mul(aw, bw);
        let s = g.sum(y);
        let grads = g.backward(s);
        let collected = binder.collect_grads(&grads);
        assert_eq!(collected.len(), 1);
        assert_eq!(collected[0].0, "a.w");
    }
}
