//! Named parameter storage split into frozen and trainable groups.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::graph::{numel, Graph, Var};

#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Ordered map name -> parameter. Frozen groups never receive updates.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub frozen: bool,
    entries: Vec<(String, Param)>,
    index: HashMap<String, usize>,
}

impl ParamGroup {
    pub fn new(name: &str) -> Self {
        ParamGroup {
            name: name.to_string(),
            frozen: false,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        assert_eq!(numel(shape), data.len(), "param {name} shape/data mismatch");
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        let grad = vec![0.0; data.len()];
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((
            name.to_string(),
            Param { shape: shape.to_vec(), data, grad },
        ));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, shape, vec![0.0; numel(shape)]);
    }

    /// Gaussian init scaled like fan-in Xavier.
    pub fn randn(&mut self, name: &str, shape: &[usize], rng: &mut Rng) {
        let fan_in = if shape.len() >= 2 { shape[..shape.len() - 1].iter().product() } else { shape[0] };
        let std = (1.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..numel(shape)).map(|_| std * rng.gaussian()).collect();
        self.insert(name, shape, data);
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, shape, vec![1.0; numel(shape)]);
    }

    pub fn get(&self, name: &str) -> &Param {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown param {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown param {name}"));
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in &mut self.entries {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Bind a parameter into a graph as a leaf; trainable iff the group is
    /// not frozen.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Var {
        let p = self.get(name);
        g.bind_param(&self.name, name, &p.shape, p.data.clone(), !self.frozen)
    }

    /// Pull gradients accumulated in `g` back into this group (additive).
    pub fn absorb_grads(&mut self, g: &Graph) {
        for (name, grad) in g.collect_grads(&self.name) {
            let p = self.get_mut(&name);
            for (pg, ng) in p.grad.iter_mut().zip(&grad) {
                *pg += ng;
            }
        }
    }
}

/// Adam with bias correction and zero weight decay.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every entry of the group, consuming current grads.
    pub fn step(&mut self, group: &mut ParamGroup) -> Result<()> {
        if group.frozen {
            return Err(Error::Contract(format!(
                "adam_step on frozen group '{}'",
                group.name
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in &mut group.entries {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.data.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.data.len()]);
            for i in 0..p.data.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
