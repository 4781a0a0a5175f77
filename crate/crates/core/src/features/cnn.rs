use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::FeatureError;
use crate::tensor::{BatchStats, Graph, ParamStore, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
const STAGE_WIDTHS: [f64; 4] = [64.0, 128.0, 256.0, 512.0];

/// What the patch head predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Low / High.
    Grade,
    /// The five subtypes; High probability is the mass on high-grade subtypes.
    Subtype,
}

impl HeadKind {
    pub fn classes(self) -> usize {
        match self {
            HeadKind::Grade => 2,
            HeadKind::Subtype => 5,
        }
    }
}

/// ResNet-18 layout: 7x7 stem, four stages of two basic blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    /// Scales the 64/128/256/512 stage widths.
    pub width: f64,
    pub head: HeadKind,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig { width: 0.25, head: HeadKind::Grade }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(FeatureError::InvalidWidth(self.width));
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        STAGE_WIDTHS.map(|c| ((c * self.width).round() as usize).max(1))
    }

    /// Feature dimension: channels of the last stage.
    pub fn feature_dim(&self) -> usize {
        self.stage_channels()[3]
    }
}

/// Parameters (`params`) and batch-norm running statistics (`buffers`).
#[derive(Clone, Debug)]
pub struct Cnn {
    pub config: CnnConfig,
    pub params: ParamStore,
    pub buffers: ParamStore,
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    params: ParamStore,
    buffers: ParamStore,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) {
        let std = (2.0 / (inp * k * k) as f64).sqrt() as f32;
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let t = Tensor::from_fn(&[out, inp, k, k], |_| normal.sample(self.rng));
        self.params.insert(format!("{name}.weight"), t);
    }

    fn bn(&mut self, name: &str, c: usize, gamma: f32) {
        self.params.insert(format!("{name}.weight"), Tensor::full(&[c], gamma));
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.running_var"), Tensor::full(&[c], 1.0));
    }
}

fn block_name(stage: usize, block: usize) -> String {
    format!("cnn.layer{}.{}", stage + 1, block)
}

fn block_stride(stage: usize, block: usize) -> usize {
    if stage > 0 && block == 0 {
        2
    } else {
        1
    }
}

/// Outputs of one forward pass.
pub struct CnnOutput {
    /// `[N, D]` pooled features.
    pub features: Var,
    /// `[N, classes]`.
    pub logits: Var,
    /// Batch statistics per batch-norm layer (training mode only).
    pub stats: Vec<(String, BatchStats<f32>)>,
}

impl Cnn {
    /// He-normal convolutions; the second batch norm of every residual
    /// block starts with zero scale so each block begins as the identity.
    pub fn new(config: CnnConfig, seed: u64) -> Result<Self, FeatureError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.stage_channels();
        let mut init = Init { rng: &mut rng, params: ParamStore::new(), buffers: ParamStore::new() };
        init.conv("cnn.stem.conv", ch[0], 3, 7);
        init.bn("cnn.stem.bn", ch[0], 1.0);
        let mut inp = ch[0];
        for (s, &out) in ch.iter().enumerate() {
            for b in 0..2 {
                let name = block_name(s, b);
                init.conv(&format!("{name}.conv1"), out, inp, 3);
                init.bn(&format!("{name}.bn1"), out, 1.0);
                init.conv(&format!("{name}.conv2"), out, out, 3);
                init.bn(&format!("{name}.bn2"), out, 0.0);
                if block_stride(s, b) != 1 || inp != out {
                    init.conv(&format!("{name}.downsample.conv"), out, inp, 1);
                    init.bn(&format!("{name}.downsample.bn"), out, 1.0);
                }
                inp = out;
            }
        }
        let d = config.feature_dim();
        let k = config.head.classes();
        let bound = 1.0 / (d as f32).sqrt();
        let uni = Uniform::new(-bound, bound).expect("bound > 0");
        let head = Tensor::from_fn(&[d, k], |_| uni.sample(init.rng));
        init.params.insert("cnn.head.weight", head);
        init.params.insert("cnn.head.bias", Tensor::zeros(&[k]));
        Ok(Cnn { config, params: init.params, buffers: init.buffers })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Forward pass on `[N, 3, 224, 224]` normalized input. `vars` must come
    /// from `self.params.bind`.
    pub fn forward(&self, g: &mut Graph<f32>, vars: &[Var], x: Var, train: bool) -> Result<CnnOutput, FeatureError> {
        let mut f = Forward { cnn: self, g, vars, train, stats: Vec::new() };
        let mut h = f.conv_bn("cnn.stem.conv", "cnn.stem.bn", x, 2, 3)?;
        h = f.g.relu(h);
        h = f.g.max_pool(h, 3, 2, 1)?;
        for s in 0..4 {
            for b in 0..2 {
                let name = block_name(s, b);
                let stride = block_stride(s, b);
                let mut y = f.conv_bn(&format!("{name}.conv1"), &format!("{name}.bn1"), h, stride, 1)?;
                y = f.g.relu(y);
                y = f.conv_bn(&format!("{name}.conv2"), &format!("{name}.bn2"), y, 1, 1)?;
                let skip = if self.params.slot(&format!("{name}.downsample.conv.weight")).is_some() {
                    f.conv_bn(&format!("{name}.downsample.conv"), &format!("{name}.downsample.bn"), h, stride, 0)?
                } else {
                    h
                };
                let sum = f.g.add(y, skip)?;
                h = f.g.relu(sum);
            }
        }
        let features = f.g.global_avg_pool(h)?;
        let w = f.var("cnn.head.weight")?;
        let bias = f.var("cnn.head.bias")?;
        let z = f.g.matmul(features, w)?;
        let logits = f.g.add(z, bias)?;
        Ok(CnnOutput { features, logits, stats: f.stats })
    }

    /// Exponential moving update of running statistics.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<f32>)]) -> Result<(), FeatureError> {
        for (name, st) in stats {
            let m = self.buffers.get_mut(&format!("{name}.running_mean"))?;
            for (r, &b) in m.data_mut().iter_mut().zip(&st.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            let v = self.buffers.get_mut(&format!("{name}.running_var"))?;
            for (r, &b) in v.data_mut().iter_mut().zip(&st.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        Ok(())
    }
}

struct Forward<'a> {
    cnn: &'a Cnn,
    g: &'a mut Graph<f32>,
    vars: &'a [Var],
    train: bool,
    stats: Vec<(String, BatchStats<f32>)>,
}

impl Forward<'_> {
    fn var(&self, name: &str) -> Result<Var, FeatureError> {
        let slot = self
            .cnn
            .params
            .slot(name)
            .ok_or_else(|| FeatureError::Tensor(crate::tensor::TensorError::UnknownParameter(name.to_string())))?;
        Ok(self.vars[slot])
    }

    fn conv_bn(&mut self, conv: &str, bn: &str, x: Var, stride: usize, pad: usize) -> Result<Var, FeatureError> {
        let w = self.var(&format!("{conv}.weight"))?;
        let y = self.g.conv2d(x, w, stride, pad)?;
        let gamma = self.var(&format!("{bn}.weight"))?;
        let beta = self.var(&format!("{bn}.bias"))?;
        if self.train {
            let (out, st) = self.g.batch_norm_train(y, gamma, beta, BN_EPS)?;
            self.stats.push((bn.to_string(), st));
            Ok(out)
        } else {
            let rm = self.cnn.buffers.get(&format!("{bn}.running_mean"))?.data();
            let rv = self.cnn.buffers.get(&format!("{bn}.running_var"))?.data();
            Ok(self.g.batch_norm_eval(y, gamma, beta, rm, rv, BN_EPS)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_dims() {
        assert_eq!(CnnConfig { width: 1.0, head: HeadKind::Grade }.feature_dim(), 512);
        assert_eq!(CnnConfig::default().feature_dim(), 128);
        assert!(matches!(Cnn::new(CnnConfig { width: 0.0, head: HeadKind::Grade }, 0), Err(FeatureError::InvalidWidth(_))));
    }

    #[test]
    fn same_seed_same_init() {
        let a = Cnn::new(CnnConfig::default(), 5).unwrap();
        let b = Cnn::new(CnnConfig::default(), 5).unwrap();
        assert_eq!(a.params.checksum(|_| true), b.params.checksum(|_| true));
        let c = Cnn::new(CnnConfig::default(), 6).unwrap();
        assert_ne!(a.params.checksum(|_| true), c.params.checksum(|_| true));
    }

    #[test]
    fn full_width_parameter_count() {
        // torchvision resnet18 has 11,689,512 parameters with a 1000-way fc;
        // swapping to a 2-way head gives 11,689,512 - 512*998 - 998.
        let cnn = Cnn::new(CnnConfig { width: 1.0, head: HeadKind::Grade }, 0).unwrap();
        assert_eq!(cnn.num_parameters(), 11_689_512 - 512 * 998 - 998);
    }
}
