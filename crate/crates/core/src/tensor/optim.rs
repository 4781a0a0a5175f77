use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

/// SGD or Adam over a [`ParamStore`], with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step_count: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer { kind, learning_rate, step_count: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::adam(), learning_rate)
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn ensure_buffers(&mut self, params: &ParamStore) {
        if self.first.len() != params.len() {
            self.first = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            self.second = self.first.clone();
        }
    }

    /// One update. `grads[i]` belongs to slot `i` of `params`; `None`
    /// leaves the slot (and its moments) untouched. Gradients are checked
    /// for NaN/inf before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f32>>]) -> Result<(), TensorError> {
        if grads.len() != params.len() {
            return Err(TensorError::Shape {
                op: "optimizer_step",
                detail: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != params.tensors()[i].numel() {
                    return Err(TensorError::Shape {
                        op: "optimizer_step",
                        detail: format!("gradient of `{}` has {} values", params.names()[i], g.len()),
                    });
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFiniteGradient(params.names()[i].clone()));
                }
            }
        }
        self.ensure_buffers(params);
        self.step_count += 1;
        let lr = self.learning_rate as f32;
        match self.kind {
            OptimizerKind::Sgd => {
                for (i, g) in grads.iter().enumerate() {
                    let Some(g) = g else { continue };
                    for (p, &gv) in params.tensor_mut(i).data_mut().iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let t = self.step_count as i32;
                let bc1 = (1.0 - beta1.powi(t)) as f32;
                let bc2 = (1.0 - beta2.powi(t)) as f32;
                let (b1, b2, eps) = (beta1 as f32, beta2 as f32, epsilon as f32);
                for (i, g) in grads.iter().enumerate() {
                    let Some(g) = g else { continue };
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    for (((p, &gv), mi), vi) in params.tensor_mut(i).data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (1.0 - b1) * gv;
                        *vi = b2 * *vi + (1.0 - b2) * gv * gv;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors, for checkpointing.
    pub fn state_tensors(&self, params: &ParamStore) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        if self.first.len() != params.len() {
            return out;
        }
        for (i, (name, t)) in params.iter().enumerate() {
            let shape = t.shape().to_vec();
            out.push((format!("optim.m.{name}"), Tensor::new(shape.clone(), self.first[i].clone()).expect("moment shape")));
            out.push((format!("optim.v.{name}"), Tensor::new(shape, self.second[i].clone()).expect("moment shape")));
        }
        out
    }

    /// Restore moments written by [`Optimizer::state_tensors`].
    pub fn restore(&mut self, params: &ParamStore, step_count: u64, state: &ParamStore) -> Result<(), TensorError> {
        self.step_count = step_count;
        if state.is_empty() {
            self.first.clear();
            self.second.clear();
            return Ok(());
        }
        let mut first = Vec::with_capacity(params.len());
        let mut second = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let m = state.get(&format!("optim.m.{name}"))?;
            let v = state.get(&format!("optim.v.{name}"))?;
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(TensorError::Shape { op: "optimizer_restore", detail: format!("moments of `{name}`") });
            }
            first.push(m.data().to_vec());
            second.push(v.data().to_vec());
        }
        self.first = first;
        self.second = second;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn sgd_definition() {
        let mut p = store(1.0);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut p, &[Some(vec![2.0])]).unwrap();
        assert!((p.get("p").unwrap().item() - 0.8).abs() < 1e-7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut p = store(0.37);
        Optimizer::sgd(0.5).step(&mut p, &[Some(vec![0.0])]).unwrap();
        assert_eq!(p.get("p").unwrap().item(), 0.37);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // t=1: m = 0.1*3, v = 0.001*9, mhat = 3, vhat = 9 -> step = lr * 3 / (3 + 1e-8)
        let mut p = store(0.0);
        let mut opt = Optimizer::adam(0.1);
        opt.step(&mut p, &[Some(vec![3.0])]).unwrap();
        let expected = -0.1 * 3.0 / (3.0 + 1e-8);
        assert!((p.get("p").unwrap().item() as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = store(0.0);
        let err = Optimizer::adam(0.1).step(&mut p, &[Some(vec![f32::NAN])]).unwrap_err();
        assert!(err.to_string().contains("`p`"));
        assert_eq!(p.get("p").unwrap().item(), 0.0);
    }
}
