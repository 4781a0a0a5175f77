use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EncoderConfig, SlotKind, TokenSequence, TransformerError};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

const INIT_STD: f32 = 0.02;

/// Per layer, per head, the `S x S` attention weights (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub seq_len: usize,
    pub heads: usize,
    pub layers: Vec<Vec<Vec<f32>>>,
}

impl AttentionTrace {
    pub fn row(&self, layer: usize, head: usize, i: usize) -> &[f32] {
        let s = self.seq_len;
        &self.layers[layer][head][i * s..(i + 1) * s]
    }
}

pub struct Encoded {
    /// `[S, d_model]` after the final layer norm.
    pub hidden: Var,
    pub trace: Option<AttentionTrace>,
}

/// Slide-level output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlideLogits {
    /// (Low, High).
    pub logits: [f32; 2],
    pub prob_high: f64,
}

/// Transformer parameters. Names: `tokens.class`, `tokens.mask`,
/// `pos.table`, `encoder.*` and `heads.recon.*` / `heads.cls.*`.
#[derive(Clone, Debug)]
pub struct EndoNet {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

fn layer(l: usize) -> String {
    format!("encoder.layer{l}")
}

impl EndoNet {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, TransformerError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, INIT_STD).expect("finite std");
        let mut p = ParamStore::new();
        let (d, f, dd) = (config.d_model, config.ffn, config.feature_dim);
        let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| normal.sample(&mut rng));
        p.insert("tokens.class", rand(&[1, d]));
        p.insert("tokens.mask", rand(&[1, d]));
        p.insert("pos.table", rand(&[config.grid_rows * config.grid_cols, d]));
        p.insert("encoder.proj.weight", rand(&[dd, d]));
        p.insert("encoder.proj.bias", Tensor::zeros(&[d]));
        for l in 0..config.layers {
            let n = layer(l);
            p.insert(format!("{n}.ln1.weight"), Tensor::full(&[d], 1.0));
            p.insert(format!("{n}.ln1.bias"), Tensor::zeros(&[d]));
            p.insert(format!("{n}.attn.qkv.weight"), rand(&[d, 3 * d]));
            p.insert(format!("{n}.attn.qkv.bias"), Tensor::zeros(&[3 * d]));
            p.insert(format!("{n}.attn.out.weight"), rand(&[d, d]));
            p.insert(format!("{n}.attn.out.bias"), Tensor::zeros(&[d]));
            p.insert(format!("{n}.ln2.weight"), Tensor::full(&[d], 1.0));
            p.insert(format!("{n}.ln2.bias"), Tensor::zeros(&[d]));
            p.insert(format!("{n}.ffn.fc1.weight"), rand(&[d, f]));
            p.insert(format!("{n}.ffn.fc1.bias"), Tensor::zeros(&[f]));
            p.insert(format!("{n}.ffn.fc2.weight"), rand(&[f, d]));
            p.insert(format!("{n}.ffn.fc2.bias"), Tensor::zeros(&[d]));
        }
        p.insert("encoder.norm.weight", Tensor::full(&[d], 1.0));
        p.insert("encoder.norm.bias", Tensor::zeros(&[d]));
        p.insert("heads.recon.weight", rand(&[d, dd]));
        p.insert("heads.recon.bias", Tensor::zeros(&[dd]));
        p.insert("heads.cls.weight", rand(&[d, 2]));
        p.insert("heads.cls.bias", Tensor::zeros(&[2]));
        Ok(EndoNet { config, params: p })
    }

    /// Everything except the two heads.
    pub fn is_encoder_param(name: &str) -> bool {
        !name.starts_with("heads.")
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Check that stored tensors match the config (after loading).
    pub fn check_shapes(&self) -> Result<(), TransformerError> {
        let fresh = EndoNet::new(self.config, 0)?;
        for (name, t) in fresh.params.iter() {
            let got = self.params.get(name)?;
            if got.shape() != t.shape() {
                return Err(TransformerError::Config(format!("`{name}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        Ok(())
    }

    fn var(&self, vars: &[Var], name: &str) -> Result<Var, TransformerError> {
        let slot = self.params.slot(name).ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        Ok(vars[slot])
    }

    fn linear(&self, g: &mut Graph<f32>, vars: &[Var], x: Var, name: &str) -> Result<Var, TransformerError> {
        let w = self.var(vars, &format!("{name}.weight"))?;
        let b = self.var(vars, &format!("{name}.bias"))?;
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }

    fn norm(&self, g: &mut Graph<f32>, vars: &[Var], x: Var, name: &str) -> Result<Var, TransformerError> {
        let w = self.var(vars, &format!("{name}.weight"))?;
        let b = self.var(vars, &format!("{name}.bias"))?;
        Ok(g.layer_norm(x, w, b, self.config.ln_eps)?)
    }

    /// `[S, d_model]` tokens: projected features (or the mask token) plus
    /// the positional row of each slot, zeros for padding, class token
    /// first.
    pub fn embed(&self, g: &mut Graph<f32>, vars: &[Var], seq: &TokenSequence) -> Result<Var, TransformerError> {
        let cfg = &self.config;
        if seq.dim != cfg.feature_dim {
            return Err(TransformerError::DimMismatch { expected: cfg.feature_dim, got: seq.dim });
        }
        let n = seq.positions.len();
        let d = cfg.d_model;
        let x = g.input(Tensor::new(vec![n, seq.dim], seq.features.clone())?);
        let proj = self.linear(g, vars, x, "encoder.proj")?;
        let zero = g.input(Tensor::zeros(&[1, d]));
        let mask_tok = self.var(vars, "tokens.mask")?;
        let content_table = g.concat(&[proj, mask_tok, zero], 0)?;
        let pos_table = self.var(vars, "pos.table")?;
        let pos_table = g.concat(&[pos_table, zero], 0)?;
        let pad_pos = cfg.grid_rows * cfg.grid_cols;
        let mut content_idx = Vec::with_capacity(n);
        let mut pos_idx = Vec::with_capacity(n);
        for (i, (&kind, &(r, c))) in seq.kinds[1..].iter().zip(&seq.positions).enumerate() {
            if r as usize >= cfg.grid_rows || c as usize >= cfg.grid_cols {
                return Err(TransformerError::GridMismatch { row: r, col: c, rows: cfg.grid_rows, cols: cfg.grid_cols });
            }
            let pos = r as usize * cfg.grid_cols + c as usize;
            match kind {
                SlotKind::Patch => {
                    content_idx.push(i);
                    pos_idx.push(pos);
                }
                SlotKind::Masked => {
                    content_idx.push(n);
                    pos_idx.push(pos);
                }
                SlotKind::Padding | SlotKind::Class => {
                    content_idx.push(n + 1);
                    pos_idx.push(pad_pos);
                }
            }
        }
        let content = g.embedding_lookup(content_table, &content_idx)?;
        let pos = g.embedding_lookup(pos_table, &pos_idx)?;
        let tokens = g.add(content, pos)?;
        let class = self.var(vars, "tokens.class")?;
        Ok(g.concat(&[class, tokens], 0)?)
    }

    /// Pre-norm encoder over `tokens` (`[S, d_model]`). Padding columns are
    /// masked with `-inf` before the softmax.
    pub fn encode(
        &self,
        g: &mut Graph<f32>,
        vars: &[Var],
        tokens: Var,
        seq: &TokenSequence,
        capture: bool,
    ) -> Result<Encoded, TransformerError> {
        let cfg = &self.config;
        let s = seq.len();
        if g.shape(tokens) != [s, cfg.d_model] {
            return Err(TransformerError::Config(format!("tokens {:?} for a sequence of {s}", g.shape(tokens))));
        }
        let (d, heads) = (cfg.d_model, cfg.heads);
        let dh = d / heads;
        let pad_mask = (seq.padding_count() > 0).then(|| {
            let row: Vec<f32> =
                seq.kinds.iter().map(|&k| if k == SlotKind::Padding { f32::NEG_INFINITY } else { 0.0 }).collect();
            g.input(Tensor::new(vec![1, s], row).expect("1 x S"))
        });
        let mut trace = capture.then(|| AttentionTrace { seq_len: s, heads, layers: Vec::with_capacity(cfg.layers) });
        let mut h = tokens;
        for l in 0..cfg.layers {
            let n = layer(l);
            let a = self.norm(g, vars, h, &format!("{n}.ln1"))?;
            let qkv = self.linear(g, vars, a, &format!("{n}.attn.qkv"))?;
            let mut outs = Vec::with_capacity(heads);
            let mut maps = Vec::new();
            for hh in 0..heads {
                let q = g.slice(qkv, 1, hh * dh, (hh + 1) * dh)?;
                let k = g.slice(qkv, 1, d + hh * dh, d + (hh + 1) * dh)?;
                let v = g.slice(qkv, 1, 2 * d + hh * dh, 2 * d + (hh + 1) * dh)?;
                let scores = g.matmul_t(q, k, false, true)?;
                let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
                if let Some(m) = pad_mask {
                    scores = g.add(scores, m)?;
                }
                let p = g.softmax(scores)?;
                if trace.is_some() {
                    maps.push(g.value(p).data().to_vec());
                }
                outs.push(g.matmul(p, v)?);
            }
            if let Some(t) = trace.as_mut() {
                t.layers.push(maps);
            }
            let o = g.concat(&outs, 1)?;
            let o = self.linear(g, vars, o, &format!("{n}.attn.out"))?;
            h = g.add(h, o)?;
            let f = self.norm(g, vars, h, &format!("{n}.ln2"))?;
            let f = self.linear(g, vars, f, &format!("{n}.ffn.fc1"))?;
            let f = g.gelu(f);
            let f = self.linear(g, vars, f, &format!("{n}.ffn.fc2"))?;
            h = g.add(h, f)?;
            if !g.value(h).all_finite() {
                return Err(TransformerError::NonFinite { layer: l });
            }
        }
        let hidden = self.norm(g, vars, h, "encoder.norm")?;
        Ok(Encoded { hidden, trace })
    }

    /// [`EndoNet::embed`] followed by [`EndoNet::encode`].
    pub fn forward_region(
        &self,
        g: &mut Graph<f32>,
        vars: &[Var],
        seq: &TokenSequence,
        capture: bool,
    ) -> Result<Encoded, TransformerError> {
        let tokens = self.embed(g, vars, seq)?;
        self.encode(g, vars, tokens, seq, capture)
    }

    /// Mean squared error between the reconstruction head on masked slots
    /// and the original features of those slots.
    pub fn reconstruction_loss(
        &self,
        g: &mut Graph<f32>,
        vars: &[Var],
        hidden: Var,
        seq: &TokenSequence,
    ) -> Result<Var, TransformerError> {
        let masked = seq.masked_slots();
        if masked.is_empty() {
            return Err(TransformerError::EmptyMask);
        }
        let rows: Vec<usize> = masked.iter().map(|&i| i + 1).collect();
        let h = g.embedding_lookup(hidden, &rows)?;
        let recon = self.linear(g, vars, h, "heads.recon")?;
        let mut target = Vec::with_capacity(masked.len() * seq.dim);
        for &i in &masked {
            target.extend_from_slice(seq.feature_row(i));
        }
        let target = g.input(Tensor::new(vec![masked.len(), seq.dim], target)?);
        Ok(g.mse(recon, target)?)
    }

    /// `[1, 2]` logits from the mean of `K x d_model` class tokens.
    pub fn slide_logits(&self, g: &mut Graph<f32>, vars: &[Var], class_tokens: Var) -> Result<Var, TransformerError> {
        let shape = g.shape(class_tokens).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(TransformerError::NoRegions);
        }
        let mean = g.mean(class_tokens, Some(0))?;
        let mean = g.reshape(mean, &[1, shape[1]])?;
        self.linear(g, vars, mean, "heads.cls")
    }

    /// Eval-mode class token of one region, with the attention trace when
    /// `capture` is set.
    pub fn region_class_token(
        &self,
        seq: &TokenSequence,
        capture: bool,
    ) -> Result<(Vec<f32>, Option<AttentionTrace>), TransformerError> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, |_| false);
        let enc = self.forward_region(&mut g, &vars, seq, capture)?;
        Ok((g.value(enc.hidden).row(0).to_vec(), enc.trace))
    }
}

/// Mean of the class tokens, linear head, softmax.
pub fn classify_slide(model: &EndoNet, class_tokens: &[Vec<f32>]) -> Result<SlideLogits, TransformerError> {
    if class_tokens.is_empty() {
        return Err(TransformerError::NoRegions);
    }
    let d = model.config.d_model;
    let mut data = Vec::with_capacity(class_tokens.len() * d);
    for t in class_tokens {
        if t.len() != d {
            return Err(TransformerError::DimMismatch { expected: d, got: t.len() });
        }
        data.extend_from_slice(t);
    }
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g, |_| false);
    let tokens = g.input(Tensor::new(vec![class_tokens.len(), d], data)?);
    let logits = model.slide_logits(&mut g, &vars, tokens)?;
    let l = g.value(logits).data();
    let logits = [l[0], l[1]];
    Ok(SlideLogits { logits, prob_high: prob_high(logits) })
}

/// Softmax probability of the High logit, in f64.
pub(crate) fn prob_high(logits: [f32; 2]) -> f64 {
    let (lo, hi) = (logits[0] as f64, logits[1] as f64);
    1.0 / (1.0 + (lo - hi).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::apply_mask;

    fn small() -> EncoderConfig {
        EncoderConfig { feature_dim: 6, d_model: 8, layers: 2, heads: 2, ffn: 16, grid_rows: 4, grid_cols: 4, ..Default::default() }
    }

    fn seq(cfg: &EncoderConfig, n_real: usize, n_pad: usize, seed: u64) -> TokenSequence {
        let n = n_real + n_pad;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let mut features: Vec<f32> = (0..n * cfg.feature_dim).map(|_| normal.sample(&mut rng)).collect();
        features[n_real * cfg.feature_dim..].fill(0.0);
        let mut kinds = vec![SlotKind::Class];
        kinds.extend((0..n).map(|i| if i < n_real { SlotKind::Patch } else { SlotKind::Padding }));
        TokenSequence {
            slide_id: "s".into(),
            region_id: "x0_y0".into(),
            kinds,
            positions: (0..n).map(|i| ((i / cfg.grid_cols) as u16, (i % cfg.grid_cols) as u16)).collect(),
            dim: cfg.feature_dim,
            features,
        }
    }

    #[test]
    fn shapes_and_attention_rows() {
        let cfg = small();
        let m = EndoNet::new(cfg, 1).unwrap();
        let s = seq(&cfg, 12, 4, 2);
        let mut g = Graph::new();
        let vars = m.params.bind(&mut g, |_| false);
        let enc = m.forward_region(&mut g, &vars, &s, true).unwrap();
        assert_eq!(g.shape(enc.hidden), &[17, 8]);
        let tr = enc.trace.unwrap();
        for l in 0..2 {
            for h in 0..2 {
                for i in 0..17 {
                    let row = tr.row(l, h, i);
                    let total: f64 = row.iter().map(|&v| v as f64).sum();
                    assert!((total - 1.0).abs() < 1e-6);
                    assert!(row[13..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn padding_does_not_change_class_token() {
        let cfg = small();
        let m = EndoNet::new(cfg, 3).unwrap();
        let padded = seq(&cfg, 12, 4, 5);
        let mut bare = padded.clone();
        bare.kinds.truncate(13);
        bare.positions.truncate(12);
        bare.features.truncate(12 * cfg.feature_dim);
        let (a, _) = m.region_class_token(&padded, false).unwrap();
        let (b, _) = m.region_class_token(&bare, false).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn mask_token_gradient_only_when_masking() {
        let cfg = small();
        let m = EndoNet::new(cfg, 4).unwrap();
        let s = seq(&cfg, 16, 0, 6);
        let slot = m.params.slot("tokens.mask").unwrap();
        for (ratio, expect_zero) in [(0.5, false), (0.0, true)] {
            let (masked, _) = apply_mask(&s, ratio, 1, None);
            let mut g = Graph::new();
            let vars = m.params.bind(&mut g, |_| true);
            let enc = m.forward_region(&mut g, &vars, &masked, false).unwrap();
            // a class-token loss reaches every input even without masking
            let cls = g.slice(enc.hidden, 0, 0, 1).unwrap();
            let loss = g.mean(cls, None).unwrap();
            g.backward(loss).unwrap();
            let grad = g.grad(vars[slot]).map(|v| v.to_vec()).unwrap_or_default();
            assert_eq!(grad.iter().all(|&v| v == 0.0), expect_zero);
            for name in ["pos.table", "encoder.proj.weight"] {
                assert!(g.grad(vars[m.params.slot(name).unwrap()]).unwrap().iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn reconstruction_loss_contract() {
        let cfg = small();
        let m = EndoNet::new(cfg, 4).unwrap();
        let s = seq(&cfg, 16, 0, 6);
        let mut g = Graph::new();
        let vars = m.params.bind(&mut g, |_| false);
        let enc = m.forward_region(&mut g, &vars, &s, false).unwrap();
        assert!(matches!(m.reconstruction_loss(&mut g, &vars, enc.hidden, &s), Err(TransformerError::EmptyMask)));
    }

    #[test]
    fn slide_head() {
        let cfg = small();
        let mut m = EndoNet::new(cfg, 4).unwrap();
        let t = vec![0.5f32; 8];
        let one = classify_slide(&m, std::slice::from_ref(&t)).unwrap();
        let many = classify_slide(&m, &[t.clone(), t.clone(), t.clone()]).unwrap();
        assert!((one.prob_high - many.prob_high).abs() < 1e-6);
        assert!(matches!(classify_slide(&m, &[]), Err(TransformerError::NoRegions)));
        m.params.get_mut("heads.cls.weight").unwrap().data_mut().fill(0.0);
        assert_eq!(classify_slide(&m, &[t]).unwrap().prob_high, 0.5);
    }
}
