use std::collections::BTreeMap;
use std::ops::Index;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{GradError, Gradients, Graph, Tensor, Var};

/// Named parameters, kept in name order so iteration and serialization are
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Gradients keyed like the [`ParamSet`] they belong to.
pub type ParamGrads = BTreeMap<String, Tensor>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    /// Gaussian init with standard deviation `gain / sqrt(fan_in)`.
    pub fn insert_normal<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
    }

    pub fn insert_filled(&mut self, name: &str, shape: &[usize], value: f64) {
        let numel = shape.iter().product();
        self.insert(name, Tensor::new(shape.to_vec(), vec![value; numel]).expect("shape matches"));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// The tensors whose names start with `prefix`, names unchanged.
    pub fn select(&self, prefix: &str) -> ParamSet {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamSet { tensors }
    }

    /// Inserts every tensor of `other`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<(), GradError> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(GradError::Checkpoint(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                None => return Err(GradError::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(GradError::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// Places every tensor on `graph`, trainable or frozen.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        self.bind_with(graph, |_| trainable)
    }

    /// Places every tensor on `graph`; `trainable(name)` decides which ones
    /// receive gradients.
    pub fn bind_with(&self, graph: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let train = trainable(k);
                let var = if train { graph.param(v) } else { graph.constant(v.clone()) };
                (k.clone(), (var, train))
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, (Var, bool)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var, GradError> {
        self.vars.get(name).map(|(v, _)| *v).ok_or_else(|| GradError::MissingParam(name.to_string()))
    }

    /// Every bound name with its handle, trainable or not.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter().map(|(k, (v, _))| (k, v))
    }

    /// Pulls the trainable entries' gradients out of a backward result.
    pub fn collect(&self, grads: &mut Gradients) -> ParamGrads {
        self.vars
            .iter()
            .filter(|(_, (_, train))| *train)
            .filter_map(|(k, (v, _))| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars.get(name).map(|(v, _)| v).unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }
}

/// `acc += g` entrywise, inserting names seen for the first time.
pub(crate) fn accumulate_grads(acc: &mut ParamGrads, g: ParamGrads) {
    for (name, t) in g {
        match acc.get_mut(&name) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                    *x += y;
                }
            }
            None => {
                acc.insert(name, t);
            }
        }
    }
}

pub(crate) fn scale_grads(g: &mut ParamGrads, factor: f64) {
    for t in g.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
}

pub(crate) fn grad_norm(g: &ParamGrads) -> f64 {
    g.values().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert_filled("a.w", &[2, 2], 1.0);
        p.insert_filled("a.b", &[1, 2], 0.0);
        p.insert_filled("b.w", &[3, 1], 2.0);
        p
    }

    #[test]
    fn select_keeps_full_names() {
        let a = sample().select("a.");
        assert_eq!(a.names().cloned().collect::<Vec<_>>(), vec!["a.b".to_string(), "a.w".to_string()]);
        assert_eq!(a.numel(), 6);
    }

    #[test]
    fn split_binding_collects_only_trainable_entries() {
        let p = sample();
        let mut g = Graph::new();
        let b = p.bind_with(&mut g, |n| n.starts_with("a."));
        let w = b["a.w"];
        let frozen = b["b.w"];
        let s1 = g.sum(w).unwrap();
        let s2 = g.sum(frozen).unwrap();
        let loss = g.add(s1, s2).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let got = b.collect(&mut grads);
        assert_eq!(got.keys().cloned().collect::<Vec<_>>(), vec!["a.b".to_string(), "a.w".to_string()]);
        assert_eq!(got["a.w"], Tensor::full(&[2, 2], 1.0));
        assert_eq!(got["a.b"], Tensor::zeros(&[1, 2]));
    }

    #[test]
    fn compatibility_checks_names_and_shapes() {
        let p = sample();
        assert!(p.check_compatible(&p.clone()).is_ok());
        let mut q = p.clone();
        q.insert_filled("a.w", &[2, 3], 1.0);
        assert!(p.check_compatible(&q).is_err());
        assert!(p.check_compatible(&p.select("a.")).is_err());
    }

    #[test]
    fn gradient_helpers() {
        let mut acc = ParamGrads::new();
        accumulate_grads(&mut acc, BTreeMap::from([("x".to_string(), Tensor::full(&[2], 1.0))]));
        accumulate_grads(&mut acc, BTreeMap::from([("x".to_string(), Tensor::full(&[2], 2.0))]));
        scale_grads(&mut acc, 0.5);
        assert_eq!(acc["x"], Tensor::full(&[2], 1.5));
        assert!((grad_norm(&acc) - (4.5f64).sqrt()).abs() < 1e-15);
    }
}
