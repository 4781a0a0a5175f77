use std::collections::HashMap;

use super::{Graph, Tensor, TensorError, Var};

/// Ordered collection of named `f32` parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace a parameter, returning its slot.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
            return i;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>, TensorError> {
        self.slot(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>, TensorError> {
        match self.slot(name) {
            Some(i) => Ok(&mut self.tensors[i]),
            None => Err(TensorError::UnknownParameter(name.to_string())),
        }
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor<f32> {
        &mut self.tensors[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Bind every parameter as a graph leaf. `trainable` selects which
    /// slots receive gradients; the rest enter as constants.
    pub fn bind(&self, g: &mut Graph<f32>, trainable: impl Fn(&str) -> bool) -> Vec<Var> {
        self.iter()
            .map(|(name, t)| if trainable(name) { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect()
    }

    /// Gradients for bound parameters, in slot order.
    pub fn collect_grads(&self, g: &mut Graph<f32>, vars: &[Var]) -> Vec<Option<Vec<f32>>> {
        vars.iter().map(|&v| g.take_grad(v)).collect()
    }

    /// Keep only parameters whose name satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter().filter(|(n, _)| keep(n)) {
            out.insert(n, t.clone());
        }
        out
    }

    /// FNV-1a over names, shapes and raw bits; used to verify that frozen
    /// parameters really did not move.
    pub fn checksum(&self, include: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.iter().filter(|(n, _)| include(n)) {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
