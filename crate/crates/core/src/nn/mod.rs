//! Named parameters, layer builders, the optimizer and checkpointing.

mod checkpoint;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointManifest};
pub use optim::{AdamW, AdamWConfig};

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Stable handle to one named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named parameter set. Insertion order is the checkpoint order.
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<S>>,
    index: HashMap<String, usize>,
    /// Master seed the store was initialized from (per-name rngs derive from
    /// it, so init is independent of insertion order).
    pub master_seed: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(master_seed: u64) -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            master_seed,
        }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<S>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter '{name}'"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), self.values.len() - 1);
        ParamId(self.values.len() - 1)
    }

    /// Deterministic rng for one tensor, derived from the master seed and the
    /// parameter name.
    pub fn rng_for(&self, name: &str) -> ChaCha12Rng {
        let mut h = Sha256::new();
        h.update(self.master_seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        ChaCha12Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
    }

    pub fn init(&mut self, name: &str, shape: &[usize], scheme: InitScheme) -> ParamId {
        let mut rng = self.rng_for(name);
        let value = match scheme {
            InitScheme::Zero => ArrayD::zeros(IxDyn(shape)),
            InitScheme::XavierUniform { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(shape), |_| {
                    S::from_f64(rng.gen_range(-limit..limit))
                })
            }
            InitScheme::Normal { std } => ArrayD::from_shape_fn(IxDyn(shape), |_| {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                S::from_f64(n * std)
            }),
            InitScheme::Ones => ArrayD::from_elem(IxDyn(shape), S::one()),
        };
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.values[id.0]
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<ParamId, NnError> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Copy the value of `src` into `dst` (shape-checked).
    pub fn copy_value(&mut self, src: ParamId, dst: ParamId) {
        assert_eq!(
            self.values[src.0].shape(),
            self.values[dst.0].shape(),
            "copy between {} and {}",
            self.names[src.0],
            self.names[dst.0]
        );
        let v = self.values[src.0].clone();
        self.values[dst.0] = v;
    }

    /// Register every parameter as a graph leaf; returns the binding used to
    /// look up the leaf [`Var`] of a [`ParamId`] and map gradients back.
    pub fn bind(&self, graph: &mut Graph<S>) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| graph.leaf(v.clone()))
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and raw bytes of every parameter accepted
    /// by the filter; used to verify freezing.
    pub fn hash_params(&self, filter: impl Fn(&str) -> bool) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, value) in self.iter() {
            if !filter(name) {
                continue;
            }
            h.update(name.as_bytes());
            for d in value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in value.iter() {
                h.update(x.to_le_bytes_vec());
            }
        }
        h.finalize().into()
    }

    /// Cast every tensor to another scalar type.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new(self.master_seed);
        for (name, value) in self.iter() {
            out.add(name, value.mapv(|v| T::from_f64(v.to_f64())));
        }
        out
    }
}

/// A pattern matches a parameter name if the name starts with or contains it.
pub fn name_matches(name: &str, pattern: &str) -> bool {
    pattern == "*" || name.starts_with(pattern) || name.contains(pattern)
}

/// Per-parameter trainable mask from a pattern list.
pub fn trainable_mask<S: Scalar>(store: &ParamStore<S>, patterns: &[String]) -> Vec<bool> {
    store
        .names
        .iter()
        .map(|n| patterns.iter().any(|p| name_matches(n, p)))
        .collect()
}

/// Leaf variables of one graph binding, parallel to the store.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy)]
pub enum InitScheme {
    Zero,
    Ones,
    XavierUniform { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
}

/// Fully connected layer handle.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.init(
            &format!("{name}.w"),
            &[fan_in, fan_out],
            InitScheme::XavierUniform { fan_in, fan_out },
        );
        let b = store.init(&format!("{name}.b"), &[fan_out], InitScheme::Zero);
        Self { w, b }
    }

    pub fn init_zero<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.init(&format!("{name}.w"), &[fan_in, fan_out], InitScheme::Zero);
        let b = store.init(&format!("{name}.b"), &[fan_out], InitScheme::Zero);
        Self { w, b }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> Var {
        g.linear(x, bound.var(self.w), bound.var(self.b))
    }
}

/// 3-d convolution layer handle (kernel 3, padding 1).
#[derive(Debug, Clone, Copy)]
pub struct Conv3dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: (usize, usize, usize),
}

impl Conv3dLayer {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: (usize, usize, usize),
    ) -> Self {
        let fan_in = c_in * 27;
        let w = store.init(
            &format!("{name}.w"),
            &[c_out, c_in, 3, 3, 3],
            InitScheme::Normal {
                std: (2.0 / fan_in as f64).sqrt(),
            },
        );
        let b = store.init(&format!("{name}.b"), &[c_out], InitScheme::Zero);
        Self { w, b, stride }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> Var {
        g.conv3d(x, bound.var(self.w), bound.var(self.b), self.stride)
    }
}

/// Group norm layer handle with per-channel affine.
#[derive(Debug, Clone, Copy)]
pub struct GroupNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNormLayer {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        groups: usize,
        eps: f64,
    ) -> Self {
        let gamma = store.init(&format!("{name}.gamma"), &[channels], InitScheme::Ones);
        let beta = store.init(&format!("{name}.beta"), &[channels], InitScheme::Zero);
        Self {
            gamma,
            beta,
            groups,
            eps,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> Var {
        g.group_norm(
            x,
            self.groups,
            bound.var(self.gamma),
            bound.var(self.beta),
            S::from_f64(self.eps),
        )
    }
}

/// One failed comparison from [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub param: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare analytic parameter gradients against central finite differences.
///
/// `analytic` maps store indices to gradients (missing entries are treated as
/// zero gradients). `loss` must be a deterministic function of the store.
pub fn finite_diff_check<S: Scalar>(
    store: &mut ParamStore<S>,
    analytic: &HashMap<usize, ArrayD<S>>,
    filter: impl Fn(&str) -> bool,
    samples_per_tensor: usize,
    h: f64,
    tol: f64,
    seed: u64,
    loss: &mut dyn FnMut(&ParamStore<S>) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let n_params = store.len();
    for idx in 0..n_params {
        let name = store.names[idx].clone();
        if !filter(&name) {
            continue;
        }
        let len = store.values[idx].len();
        if len == 0 {
            continue;
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9e3779b9));
        for _ in 0..samples_per_tensor.min(len) {
            let j = rng.gen_range(0..len);
            let orig = store.values[idx].as_slice().unwrap()[j];
            store.values[idx].as_slice_mut().unwrap()[j] = orig + S::from_f64(h);
            let plus = loss(store);
            store.values[idx].as_slice_mut().unwrap()[j] = orig - S::from_f64(h);
            let minus = loss(store);
            store.values[idx].as_slice_mut().unwrap()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let an = analytic
                .get(&idx)
                .map(|g| g.as_slice().unwrap()[j].to_f64())
                .unwrap_or(0.0);
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
            }
            if rel > tol {
                report.failures.push(GradCheckFailure {
                    param: name.clone(),
                    element: j,
                    analytic: an,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report
}
