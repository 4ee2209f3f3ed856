//! Named parameter storage and the Adam optimizer.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub trainable: bool,
    m: Tensor,
    v: Tensor,
    step: u64,
}

impl ParamEntry {
    fn new(value: Tensor, trainable: bool) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        ParamEntry { value, trainable, m, v, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&Tensor, &Tensor) {
        (&self.m, &self.v)
    }
}

/// Ordered map of named parameters. Iteration follows insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; re-registering an existing name is an error.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Consistency(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, ParamEntry::new(value, trainable));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).map(|e| &e.value).ok_or_else(|| Error::Consistency(format!("unknown parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Consistency(format!("unknown parameter {name}")))
    }

    /// Replaces a value, keeping shape, flag and optimizer state.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.value_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_value", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.trainable = trainable)
            .ok_or_else(|| Error::Consistency(format!("unknown parameter {name}")))
    }

    /// Sets the flag on every parameter whose name satisfies `pred`.
    pub fn set_trainable_where(&mut self, trainable: bool, pred: impl Fn(&str) -> bool) {
        for (name, e) in &mut self.entries {
            if pred(name) {
                e.trainable = trainable;
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Copies values (not flags or optimizer state) from another store with the same names.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, e) in &mut self.entries {
            let src = other.value(name)?;
            if src.shape() != e.value.shape() {
                return Err(Error::shape("copy_values_from", e.value.shape(), src.shape()));
            }
            e.value = src.clone();
        }
        Ok(())
    }

    /// Resets moment estimates and step counters.
    pub fn reset_optimizer(&mut self) {
        for e in self.entries.values_mut() {
            e.m = Tensor::zeros(e.value.shape());
            e.v = Tensor::zeros(e.value.shape());
            e.step = 0;
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Elementwise sum; names missing on one side are taken from the other.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            g.scale_assign(s);
        }
    }

    /// Adds zero gradients for trainable parameters that received none.
    pub fn fill_missing(&mut self, store: &ParamStore) {
        for (name, e) in store.iter() {
            if e.trainable && !self.map.contains_key(name) {
                self.map.insert(name.to_string(), Tensor::zeros(e.value.shape()));
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().flat_map(|g| g.data().iter()).map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of every trainable entry.
///
/// `lr` maps a parameter name to its learning rate, which is how per-layer
/// rates are applied. Frozen entries are left untouched, including their
/// moments and step counters.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, lr: impl Fn(&str) -> f64, cfg: AdamConfig) -> Result<()> {
    for (name, e) in &store.entries {
        if !e.trainable {
            continue;
        }
        match grads.get(name) {
            None => return Err(Error::Consistency(format!("no gradient for trainable parameter {name}"))),
            Some(g) if g.shape() != e.value.shape() => {
                return Err(Error::shape("adam_step", e.value.shape(), g.shape()))
            }
            Some(_) => {}
        }
    }
    for (name, e) in &mut store.entries {
        if !e.trainable {
            continue;
        }
        let g = &grads.map[name];
        let rate = lr(name);
        e.step += 1;
        let t = e.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (m, v, p) = (e.m.data_mut(), e.v.data_mut(), e.value.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row(vec![1.0, -2.0]), true).unwrap();
        s.insert("frozen", Tensor::row(vec![5.0]), false).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let mut g = Gradients::new();
        g.insert("w", Tensor::zeros(&[1, 2]));
        adam_step(&mut s, &g, |_| 0.1, AdamConfig::default()).unwrap();
        assert_eq!(s.value("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store();
        let mut g = Gradients::new();
        g.insert("w", Tensor::ones(&[1, 2]));
        g.insert("frozen", Tensor::ones(&[1, 1]));
        adam_step(&mut s, &g, |_| 0.1, AdamConfig::default()).unwrap();
        let w = s.value("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 2.1).abs() < 1e-7);
        assert_eq!(s.value("frozen").unwrap().data(), &[5.0]);
        assert_eq!(s.get("frozen").unwrap().step(), 0);
    }

    #[test]
    fn missing_gradient_is_a_consistency_error() {
        let mut s = store();
        let err = adam_step(&mut s, &Gradients::new(), |_| 0.1, AdamConfig::default());
        assert!(matches!(err, Err(Error::Consistency(_))));
    }

    #[test]
    fn per_parameter_rates() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::row(vec![0.0]), true).unwrap();
        s.insert("b", Tensor::row(vec![0.0]), true).unwrap();
        let mut g = Gradients::new();
        g.insert("a", Tensor::row(vec![1.0]));
        g.insert("b", Tensor::row(vec![1.0]));
        adam_step(&mut s, &g, |n| if n == "a" { 0.1 } else { 0.01 }, AdamConfig::default()).unwrap();
        assert!((s.value("a").unwrap().data()[0] + 0.1).abs() < 1e-7);
        assert!((s.value("b").unwrap().data()[0] + 0.01).abs() < 1e-7);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut a = store();
        let mut b = store();
        let mut g = Gradients::new();
        g.insert("w", Tensor::row(vec![0.3, -0.7]));
        for _ in 0..5 {
            adam_step(&mut a, &g, |_| 0.01, AdamConfig::default()).unwrap();
            adam_step(&mut b, &g, |_| 0.01, AdamConfig::default()).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.insert("w", Tensor::zeros(&[1]), true).is_err());
    }
}
