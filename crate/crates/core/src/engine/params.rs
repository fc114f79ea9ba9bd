use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor together with its Adam moment estimates.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let n = value.len();
        Self { value, m: vec![0.0; n], v: vec![0.0; n], steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Named collection of parameters. Iteration order is the lexical name order,
/// which fixes the serialization order of checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

/// Tape handles for every parameter of a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Adds the handles of `other`, replacing entries with the same name.
    pub fn merge(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }

    /// Binds `name` to an existing tape variable.
    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        match self.params.get_mut(name) {
            Some(p) => p.value = value,
            None => self.insert(name, value),
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name).map(|p| p.value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    /// Places every parameter on the tape as a differentiable named leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.params.iter().map(|(k, p)| (k.clone(), tape.leaf(k.clone(), p.value.clone()))).collect();
        Bound { vars }
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self.params.iter().map(|(k, p)| (k.clone(), tape.constant(p.value.clone()))).collect();
        Bound { vars }
    }

    /// Binds only the parameters whose name starts with one of `prefixes`.
    pub fn bind_selected(&self, tape: &mut Tape, prefixes: &[&str], trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, p)| {
                let v = if trainable { tape.leaf(k.clone(), p.value.clone()) } else { tape.constant(p.value.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Digest of all parameter names, shapes and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, p) in &self.params {
            h.update(k.as_bytes());
            for s in p.value.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rounds every value to the nearest `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for p in self.params.values_mut() {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub(crate) fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }
}

/// Adam optimizer hyper-parameters.
#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AdamReport {
    pub updated: usize,
    pub skipped_non_finite: usize,
}

impl Adam {
    /// One bias-corrected Adam step for every parameter that has a gradient.
    ///
    /// Each parameter keeps its own step count, so parameters that only receive
    /// gradients occasionally (per-sample latent codes) get correct bias
    /// correction. Parameters with a non-finite gradient are left untouched.
    pub fn update(&self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<AdamReport> {
        let mut report = AdamReport::default();
        for (name, g) in grads {
            let Some(p) = params.param_mut(name) else { continue };
            if g.len() != p.value.len() {
                return Err(Error::Dimension(format!(
                    "gradient for `{name}` has {} values, parameter has {}",
                    g.len(),
                    p.value.len()
                )));
            }
            if !g.is_finite() {
                report.skipped_non_finite += 1;
                continue;
            }
            p.steps += 1;
            let t = p.steps as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let values = p.value.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * gi;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                values[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
            report.updated += 1;
        }
        if report.skipped_non_finite > 0 {
            log::warn!("adam: skipped {} parameters with non-finite gradients", report.skipped_non_finite);
        }
        Ok(report)
    }
}

/// Step decay: `lr * factor^(floor(epoch / interval))`.
pub fn decayed_lr(lr: f64, factor: f64, interval: usize, epoch: usize) -> f64 {
    if interval == 0 {
        return lr;
    }
    lr * factor.powi((epoch / interval) as i32)
}
