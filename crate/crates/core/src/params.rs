//! Named parameter sets and task-vector algebra.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Prefix of per-task classification head parameters; heads never merge.
pub const HEAD_PREFIX: &str = "heads.";

pub fn is_head(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX)
}

/// Ordered map from parameter name to tensor.
///
/// Iteration follows insertion order, which is part of congruence.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedParamSet<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for NamedParamSet<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Real> NamedParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces; a replaced entry keeps its position.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = tensor,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, tensor));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Like [`get`](Self::get) but reports the missing name.
    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Subset of entries satisfying `keep`, order preserved.
    pub fn filter(&self, mut keep: impl FnMut(&str) -> bool) -> Self {
        let mut out = Self::new();
        for (n, t) in self.iter() {
            if keep(n) {
                out.insert(n, t.clone());
            }
        }
        out
    }

    /// Everything except classification heads.
    pub fn encoder(&self) -> Self {
        self.filter(|n| !is_head(n))
    }

    pub fn heads(&self) -> Self {
        self.filter(is_head)
    }

    /// Copies every entry of `other` into `self`, replacing existing names.
    pub fn merge_from(&mut self, other: &NamedParamSet<T>) {
        for (n, t) in other.iter() {
            self.insert(n, t.clone());
        }
    }

    pub fn cast<U: Real>(&self) -> NamedParamSet<U> {
        let mut out = NamedParamSet::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        for (_, t) in self.entries.iter_mut() {
            t.set_requires_grad(requires_grad);
        }
    }

    /// Same names, same shapes, same order.
    pub fn check_congruent(&self, other: &NamedParamSet<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Congruence(format!(
                "{} entries vs {} entries",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(Error::Congruence(format!("name `{na}` vs `{nb}`")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Congruence(format!(
                    "`{na}` has shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_congruent(&self, other: &NamedParamSet<T>) -> bool {
        self.check_congruent(other).is_ok()
    }

    /// Bit-level equality of every entry.
    pub fn bit_eq(&self, other: &NamedParamSet<T>) -> bool {
        self.is_congruent(other) && self.iter().zip(other.iter()).all(|((_, a), (_, b))| a.bit_eq(b))
    }

    /// Largest elementwise absolute difference against a congruent set.
    pub fn max_abs_diff(&self, other: &NamedParamSet<T>) -> Result<T> {
        self.check_congruent(other)?;
        Ok(self
            .iter()
            .zip(other.iter())
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(T::zero(), T::max))
    }
}

/// Difference between a fine-tuned and the pretrained encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector<T: Real = f32>(NamedParamSet<T>);

impl<T: Real> TaskVector<T> {
    /// Wraps a set of deltas; head entries are rejected.
    pub fn from_params(params: NamedParamSet<T>) -> Result<Self> {
        if let Some(head) = params.names().find(|n| is_head(n)) {
            return Err(Error::Contract(format!("task vectors exclude heads, found `{head}`")));
        }
        Ok(Self(params))
    }

    pub fn params(&self) -> &NamedParamSet<T> {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.0.iter()
    }

    pub fn into_params(self) -> NamedParamSet<T> {
        self.0
    }

    pub fn cast<U: Real>(&self) -> TaskVector<U> {
        TaskVector(self.0.cast())
    }

    /// Elementwise sum with a congruent task vector.
    pub fn add(&self, other: &TaskVector<T>) -> Result<TaskVector<T>> {
        self.0.check_congruent(&other.0)?;
        let mut out = NamedParamSet::new();
        for ((n, a), (_, b)) in self.iter().zip(other.iter()) {
            out.insert(n, a.add(b)?);
        }
        Ok(TaskVector(out))
    }
}

/// `τ = θᵢ − θ₀` over encoder parameters; heads are dropped.
pub fn task_vector<T: Real>(theta_i: &NamedParamSet<T>, theta_0: &NamedParamSet<T>) -> Result<TaskVector<T>> {
    theta_i.check_congruent(theta_0)?;
    let mut out = NamedParamSet::new();
    for ((name, ti), (_, t0)) in theta_i.iter().zip(theta_0.iter()) {
        if is_head(name) {
            continue;
        }
        out.insert(name, ti.sub(t0)?);
    }
    Ok(TaskVector(out))
}

/// `θ₀ + scale · τ`; entries of `theta_0` that `tau` does not cover (heads)
/// are copied unchanged.
pub fn apply_vector<T: Real>(theta_0: &NamedParamSet<T>, tau: &TaskVector<T>, scale: T) -> Result<NamedParamSet<T>> {
    check_covers(theta_0, tau)?;
    let mut out = theta_0.clone();
    for (name, delta) in tau.iter() {
        let target = out.get_mut(name).expect("checked by check_covers");
        target.axpy(scale, delta)?;
    }
    Ok(out)
}

/// `tau` must be congruent with the encoder part of `theta_0`.
pub fn check_covers<T: Real>(theta_0: &NamedParamSet<T>, tau: &TaskVector<T>) -> Result<()> {
    let mut names = theta_0.iter().filter(|(n, _)| !is_head(n));
    for (name, delta) in tau.iter() {
        match names.next() {
            Some((n0, t0)) if n0 == name && t0.shape() == delta.shape() => {}
            Some((n0, t0)) => {
                return Err(Error::Congruence(format!(
                    "task vector entry `{name}` {:?} vs `{n0}` {:?}",
                    delta.shape(),
                    t0.shape()
                )))
            }
            None => {
                return Err(Error::Congruence(format!(
                    "task vector entry `{name}` has no counterpart"
                )))
            }
        }
    }
    if let Some((n0, _)) = names.next() {
        return Err(Error::Congruence(format!("task vector lacks entry `{n0}`")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn set(entries: &[(&str, &[f32])]) -> NamedParamSet {
        let mut s = NamedParamSet::new();
        for (n, v) in entries {
            s.insert(*n, Tensor::from_slice([v.len()], v).unwrap());
        }
        s
    }

    #[test]
    fn task_vector_hand_example() {
        let t0 = set(&[("w", &[1.0, 2.0])]);
        let ti = set(&[("w", &[1.5, 1.0])]);
        let tau = task_vector(&ti, &t0).unwrap();
        assert_eq!(tau.get("w").unwrap().data(), &[0.5, -1.0]);
    }

    #[test]
    fn identical_models_give_zero_vector() {
        let t0 = set(&[("a", &[0.3, -0.7]), ("b", &[4.0])]);
        let tau = task_vector(&t0, &t0).unwrap();
        assert!(tau.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn heads_are_dropped() {
        let t0 = set(&[("w", &[1.0]), ("heads.0.weight", &[2.0])]);
        let ti = set(&[("w", &[3.0]), ("heads.0.weight", &[5.0])]);
        let tau = task_vector(&ti, &t0).unwrap();
        assert_eq!(tau.params().len(), 1);
        let back = apply_vector(&t0, &tau, 1.0).unwrap();
        assert_eq!(back.get("heads.0.weight").unwrap().data(), &[2.0]);
    }

    #[test]
    fn apply_vector_examples() {
        let t0 = set(&[("w", &[1.0])]);
        let tau = TaskVector::from_params(set(&[("w", &[2.0])])).unwrap();
        assert_eq!(apply_vector(&t0, &tau, 0.0).unwrap(), t0);
        let v = apply_vector(&t0, &tau, 0.3).unwrap();
        assert!((v.get("w").unwrap().data()[0] - 1.6).abs() < 1e-7);
    }

    #[test]
    fn inverse_is_bit_exact_in_the_same_binade() {
        let t0 = set(&[("w", &[1.0, 1.25, -3.5])]);
        let ti = set(&[("w", &[1.5, 1.75, -2.0])]);
        let tau = task_vector(&ti, &t0).unwrap();
        assert!(apply_vector(&t0, &tau, 1.0).unwrap().bit_eq(&ti));
    }

    #[test]
    fn congruence_error_names_first_mismatch() {
        let a = set(&[("w", &[1.0]), ("v", &[1.0])]);
        let b = set(&[("w", &[1.0]), ("u", &[1.0])]);
        match task_vector(&a, &b) {
            Err(Error::Congruence(msg)) => assert!(msg.contains("`v`") && msg.contains("`u`")),
            other => panic!("{other:?}"),
        }
        let c = set(&[("w", &[1.0, 2.0]), ("v", &[1.0])]);
        assert!(matches!(a.check_congruent(&c), Err(Error::Congruence(_))));
    }

    #[test]
    fn insert_replaces_in_place() {
        let mut s = set(&[("a", &[1.0]), ("b", &[2.0])]);
        s.insert("a", Tensor::from_slice([1], &[9.0]).unwrap());
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(s.get("a").unwrap().data(), &[9.0]);
    }

    #[test]
    fn task_vector_rejects_heads() {
        assert!(TaskVector::from_params(set(&[("heads.1.bias", &[0.0])])).is_err());
    }
}
