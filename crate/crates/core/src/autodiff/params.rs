use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

/// Which network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Source,
    Parity,
    Relay,
    Decoder,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Source, Component::Parity, Component::Relay, Component::Decoder];

    pub fn name(self) -> &'static str {
        match self {
            Component::Source => "source",
            Component::Parity => "parity",
            Component::Relay => "relay",
            Component::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Entry {
    name: String,
    component: Component,
    value: Tensor,
}

/// Flat store of named, component-tagged trainable tensors.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, component: Component, value: Tensor) -> ParamId {
        self.entries.push(Entry { name: name.into(), component, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn component(&self, id: ParamId) -> Component {
        self.entries[id.0].component
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_of(&self, component: Component) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |&id| self.component(id) == component)
    }

    /// Number of scalar parameters, optionally restricted to one component.
    pub fn scalar_count(&self, component: Option<Component>) -> usize {
        self.entries
            .iter()
            .filter(|e| component.is_none_or(|c| e.component == c))
            .map(|e| e.value.len())
            .sum()
    }

    /// Components that own at least one parameter.
    pub fn components(&self) -> Vec<Component> {
        let mut out: Vec<Component> = self.entries.iter().map(|e| e.component).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|e| graph.param(e.value.clone())).collect()
    }

    /// Registers every parameter as a constant (inference without gradients).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|e| graph.constant(e.value.clone())).collect()
    }

    /// Extracts per-parameter gradients (zeros for parameters the loss ignores).
    pub fn collect_grads(&self, bound: &[Var], grads: &mut Gradients) -> Vec<Tensor> {
        self.entries
            .iter()
            .zip(bound)
            .map(|(e, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(e.value.rows(), e.value.cols())))
            .collect()
    }

    /// Copies parameters whose names match between two stores (used to share
    /// initializations across protocols).
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if let Some(o) = other.entries.iter().find(|o| o.name == e.name && o.value.shape() == e.value.shape()) {
                e.value = o.value.clone();
                n += 1;
            }
        }
        n
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Subset of this store belonging to one component (for per-component archives).
    pub fn subset(&self, component: Component) -> ParamStore {
        ParamStore { entries: self.entries.iter().filter(|e| e.component == component).cloned().collect() }
    }

    /// Overwrites values from a subset archive, matching by name.
    pub fn load_subset(&mut self, subset: &ParamStore) -> Result<(), String> {
        for s in &subset.entries {
            let Some(e) = self.entries.iter_mut().find(|e| e.name == s.name) else {
                return Err(format!("unknown parameter `{}` in archive", s.name));
            };
            if e.value.shape() != s.value.shape() {
                return Err(format!(
                    "parameter `{}` has shape {:?} in archive but {:?} in model",
                    s.name,
                    s.value.shape(),
                    e.value.shape()
                ));
            }
            e.value = s.value.clone();
        }
        Ok(())
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = |p: &ParamStore| p.entries.iter().map(|e| Tensor::zeros(e.value.rows(), e.value.cols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState { step: 0, m: zeros(params), v: zeros(params) },
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len());
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let p = params.entries[i].value.data_mut();
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
