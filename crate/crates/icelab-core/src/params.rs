//! Named parameter sets and the operations the edit loop performs on
//! them: snapshot/restore, gradient clipping, projection onto an
//! infinity-norm ball around a reference point, plain gradient-descent
//! steps, and a central finite-difference oracle used to audit the
//! autodiff engine.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Named collection of parameter tensors. Iteration order is the name
/// order (`BTreeMap`), so every loop over a parameter set is
/// deterministic. `version` counts mutations, which makes it cheap to
/// assert that a procedure did or did not touch the weights.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
    version: u64,
}

/// Plain value copy of a parameter set, used as the frozen origin for
/// ball projection and as the restore point between edits.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    values: BTreeMap<String, Vec<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            self.entries.insert(String::from(name), tensor).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.version += 1;
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.version += 1;
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.all_finite())
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            values: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.data.clone()))
                .collect(),
        }
    }

    /// Restore values from a snapshot of the same parameter set.
    pub fn restore(&mut self, snap: &ParamSnapshot) {
        assert_eq!(snap.values.len(), self.entries.len(), "snapshot does not match parameter set");
        for (name, tensor) in self.entries.iter_mut() {
            let vals = snap
                .values
                .get(name)
                .unwrap_or_else(|| panic!("snapshot is missing parameter {name:?}"));
            tensor.data.copy_from_slice(vals);
        }
        self.version += 1;
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    /// Largest absolute gradient entry across the given names (all
    /// names when `names` is `None`). Missing gradients count as zero.
    pub fn grad_inf_norm(&self, names: Option<&BTreeSet<String>>) -> f64 {
        let mut m: f64 = 0.0;
        for (name, t) in &self.entries {
            if let Some(filter) = names {
                if !filter.contains(name) {
                    continue;
                }
            }
            if let Some(g) = &t.grad {
                for &x in g {
                    m = m.max(x.abs());
                }
            }
        }
        m
    }

    /// Largest absolute difference from a snapshot.
    pub fn delta_inf_norm(&self, origin: &ParamSnapshot) -> f64 {
        let mut m: f64 = 0.0;
        for (name, t) in &self.entries {
            let o = &origin.values[name];
            for (x, y) in t.data.iter().zip(o) {
                m = m.max((x - y).abs());
            }
        }
        m
    }

    /// One gradient-descent step `θ ← θ - η · grad` on the named
    /// parameters. Parameters without a gradient are left alone.
    pub fn sgd_step(&mut self, eta: f64, names: &BTreeSet<String>) {
        assert!(eta > 0.0, "learning rate must be positive, got {eta}");
        for name in names {
            let t = self
                .entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("sgd_step on unknown parameter {name:?}"));
            if let Some(g) = &t.grad {
                for (x, &d) in t.data.iter_mut().zip(g.iter()) {
                    *x -= eta * d;
                }
            }
        }
        self.version += 1;
    }

    /// Project the named parameters back into the infinity-norm ball of
    /// radius `eps` around `origin`: each entry is clamped to
    /// `[origin - eps, origin + eps]`. Projecting twice is a no-op.
    pub fn clamp_to_ball(&mut self, origin: &ParamSnapshot, eps: f64, names: &BTreeSet<String>) {
        assert!(eps > 0.0, "ball radius must be positive, got {eps}");
        for name in names {
            let t = self
                .entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("clamp_to_ball on unknown parameter {name:?}"));
            let o = &origin.values[name.as_str()];
            for (x, &c) in t.data.iter_mut().zip(o.iter()) {
                *x = x.min(c + eps).max(c - eps);
            }
        }
        self.version += 1;
    }
}

impl ParamSnapshot {
    pub fn values(&self, name: &str) -> &[f64] {
        &self.values[name]
    }
}

/// Clamp every gradient entry to `[-eps_g, eps_g]`. Entries already in
/// range are untouched, so the operation is idempotent. Panics on a
/// non-positive bound.
pub fn clip_gradients(params: &mut ParamSet, eps_g: f64) {
    assert!(eps_g > 0.0, "gradient clip bound must be positive, got {eps_g}");
    for name in params.names().map(String::from).collect::<Vec<_>>() {
        let t = params.get_mut(&name);
        if let Some(g) = &mut t.grad {
            for x in g.iter_mut() {
                *x = x.min(eps_g).max(-eps_g);
            }
        }
    }
}

/// Central finite-difference derivative estimates for every entry of
/// every parameter: `(f(θ + h·e) - f(θ - h·e)) / 2h`. This is the
/// independent oracle the autodiff gradients are audited against; it
/// never touches the tape.
pub fn finite_difference_gradient(
    params: &ParamSet,
    h: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> BTreeMap<String, Vec<f64>> {
    assert!(h > 0.0, "finite-difference step must be positive, got {h}");
    let mut work = params.clone();
    let names: Vec<String> = work.names().map(String::from).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let n = work.get(&name).len();
        let mut grad = Vec::with_capacity(n);
        for i in 0..n {
            let base = work.get(&name).data[i];
            work.get_mut(&name).data[i] = base + h;
            let up = f(&work);
            work.get_mut(&name).data[i] = base - h;
            let down = f(&work);
            work.get_mut(&name).data[i] = base;
            grad.push((up - down) / (2.0 * h));
        }
        out.insert(name, grad);
    }
    out
}
