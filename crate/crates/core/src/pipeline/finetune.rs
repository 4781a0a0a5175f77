use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    epoch_rng, predict_all, require_both_classes, Checkpoint, CheckpointMeta, EpochRecord, PipelineError, RunLog,
    SlideFeatures, Stage, FINETUNE_STREAM,
};
use crate::metrics::{auc_from_scores, weighted_f1_from_labels};
use crate::tensor::{pairwise_sum, Graph, Optimizer, OptimizerKind};
use crate::transformer::{EndoNet, TokenSequence};
use crate::wsi::{sample_from_candidates, Grade};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub regions_per_slide_train: usize,
    pub regions_per_slide_eval: usize,
    /// Train only the classification head.
    pub freeze_encoder: bool,
    /// (Low, High) loss weights; inverse class frequency of the training
    /// split when absent.
    pub class_weights: Option<[f64; 2]>,
    /// Stop after this many epochs without a better validation result.
    pub patience: usize,
    pub threshold: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            regions_per_slide_train: 8,
            regions_per_slide_eval: 25,
            freeze_encoder: false,
            class_weights: None,
            patience: 5,
            threshold: 0.5,
            optimizer: OptimizerKind::adam(),
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.epochs == 0 || self.regions_per_slide_train == 0 || self.regions_per_slide_eval == 0 {
            return Err(PipelineError::Config("epochs and region counts must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(PipelineError::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if let Some(w) = self.class_weights {
            if !w.iter().all(|&v| v >= 0.0 && v.is_finite()) || w[0] + w[1] <= 0.0 {
                return Err(PipelineError::Config(format!("class weights {w:?}")));
            }
        }
        Ok(())
    }
}

pub struct FinetuneRun {
    /// Weights of the selected epoch.
    pub model: EndoNet,
    pub log: RunLog,
    pub checkpoint: Checkpoint,
    pub selected_epoch: usize,
    pub val_auc: f64,
}

fn inverse_frequency(slides: &[SlideFeatures]) -> [f64; 2] {
    let n = slides.len() as f64;
    let high = slides.iter().filter(|s| s.grade() == Grade::High).count() as f64;
    [n / (2.0 * (n - high)), n / (2.0 * high)]
}

struct Validation {
    loss: f64,
    auc: f64,
    f1: f64,
}

fn validate_epoch(model: &EndoNet, val: &[SlideFeatures], cfg: &FinetuneConfig, w: [f64; 2]) -> Result<Validation, PipelineError> {
    let preds = predict_all(model, val, cfg.regions_per_slide_eval, cfg.seed)?;
    let probs: Vec<f64> = preds.iter().map(|p| p.prob_high).collect();
    let positive: Vec<bool> = val.iter().map(|s| s.grade() == Grade::High).collect();
    let truth: Vec<Grade> = val.iter().map(|s| s.grade()).collect();
    let pred: Vec<Grade> = probs.iter().map(|&p| if p >= cfg.threshold { Grade::High } else { Grade::Low }).collect();
    let mut terms = Vec::with_capacity(val.len());
    let mut total_w = Vec::with_capacity(val.len());
    for (p, s) in preds.iter().zip(val) {
        let (lo, hi) = (p.logits[0] as f64, p.logits[1] as f64);
        let mx = lo.max(hi);
        let lse = mx + ((lo - mx).exp() + (hi - mx).exp()).ln();
        let y = s.grade().index();
        terms.push(w[y] * (lse - [lo, hi][y]));
        total_w.push(w[y]);
    }
    Ok(Validation {
        loss: pairwise_sum(&terms) / pairwise_sum(&total_w),
        auc: auc_from_scores(&positive, &probs)?,
        f1: weighted_f1_from_labels(&truth, &pred)?,
    })
}

/// Slide-level fine-tuning from a pre-trained encoder.
///
/// Each step takes one training slide, encodes `regions_per_slide_train`
/// sampled regions without masking, averages their class tokens and applies
/// the class-weighted cross-entropy `w[y] * nll`. After every epoch the
/// validation slides are scored with `regions_per_slide_eval` regions; the
/// epoch with the highest validation AUC is kept (ties: lower validation
/// loss, then the earlier epoch).
pub fn finetune(
    train: &[SlideFeatures],
    val: &[SlideFeatures],
    init: &EndoNet,
    cfg: &FinetuneConfig,
) -> Result<FinetuneRun, PipelineError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(PipelineError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(PipelineError::EmptySplit("validation"));
    }
    require_both_classes(train, "training")?;
    require_both_classes(val, "validation")?;
    if let Some(s) = train.iter().chain(val).find(|s| s.regions.is_empty()) {
        return Err(PipelineError::NoTissue(s.slide_id().to_string()));
    }
    let w = cfg.class_weights.unwrap_or_else(|| inverse_frequency(train));
    let mut log = RunLog::new("finetune", cfg.seed, cfg);
    log.config["class_weights_used"] = serde_json::json!(w);
    let mut model = init.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let trainable = |n: &str| {
        if cfg.freeze_encoder {
            n.starts_with("heads.cls")
        } else {
            !n.starts_with("heads.recon")
        }
    };
    let mut best: Option<(f64, f64, usize, EndoNet)> = None;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = epoch_rng(cfg.seed, FINETUNE_STREAM | epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(train.len());
        for &si in &order {
            let slide = &train[si];
            let (idx, _) = sample_from_candidates(slide.regions.len(), cfg.regions_per_slide_train, &mut rng)?;
            let mut distinct = idx.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let mut g = Graph::new();
            let vars = model.params.bind(&mut g, trainable);
            let mut cls = Vec::with_capacity(distinct.len());
            for &r in &distinct {
                let seq = TokenSequence::from_bundle(&slide.regions[r], &model.config)?;
                let enc = model.forward_region(&mut g, &vars, &seq, false)?;
                cls.push(g.slice(enc.hidden, 0, 0, 1)?);
            }
            let stack = g.concat(&cls, 0)?;
            let pick: Vec<usize> = idx.iter().map(|r| distinct.binary_search(r).expect("sampled")).collect();
            let tokens = g.embedding_lookup(stack, &pick)?;
            let logits = model.slide_logits(&mut g, &vars, tokens)?;
            let y = slide.grade().index();
            let nll = g.cross_entropy(logits, &[y], None)?;
            let loss = g.scale(nll, w[y]);
            losses.push(g.value(loss).item() as f64);
            g.backward(loss)?;
            let grads = model.params.collect_grads(&mut g, &vars);
            opt.step(&mut model.params, &grads)?;
        }
        let v = validate_epoch(&model, val, cfg, w)?;
        let train_loss = pairwise_sum(&losses) / losses.len() as f64;
        log::info!(
            "finetune epoch {epoch}: loss {train_loss:.4}, val loss {:.4}, val AUC {:.4}, val F1 {:.4}",
            v.loss,
            v.auc,
            v.f1
        );
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: Some(v.loss),
            val_auc: Some(v.auc),
            val_f1: Some(v.f1),
            seconds: started.elapsed().as_secs_f64(),
        });
        let better = best.as_ref().is_none_or(|(auc, loss, _, _)| v.auc > *auc || (v.auc == *auc && v.loss < *loss));
        if better {
            best = Some((v.auc, v.loss, epoch, model.clone()));
        } else if best.as_ref().is_some_and(|(_, _, e, _)| epoch - e >= cfg.patience) {
            log::info!("finetune: no improvement for {} epochs, stopping", cfg.patience);
            break;
        }
    }
    let (val_auc, _, selected_epoch, model) = best.expect("at least one epoch");
    log.selected_epoch = Some(selected_epoch);
    let meta = CheckpointMeta { epoch: selected_epoch, log: Some(log.without_timings()), ..CheckpointMeta::new(cfg, cfg.seed) };
    let checkpoint = Checkpoint::from_model(Stage::Finetune, &model, None, meta);
    Ok(FinetuneRun { model, log, checkpoint, selected_epoch, val_auc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::testutil::toy_slides;
    use crate::transformer::EncoderConfig;

    fn model() -> EndoNet {
        let cfg = EncoderConfig { feature_dim: 6, d_model: 8, layers: 1, heads: 2, ffn: 16, grid_rows: 4, grid_cols: 4, ..Default::default() };
        EndoNet::new(cfg, 2).unwrap()
    }

    fn cfg() -> FinetuneConfig {
        FinetuneConfig { epochs: 3, regions_per_slide_train: 2, regions_per_slide_eval: 3, learning_rate: 1e-2, seed: 5, ..Default::default() }
    }

    #[test]
    fn frozen_encoder_untouched() {
        let slides = toy_slides(8, 6, 4, 2, 3);
        let init = model();
        let run = finetune(&slides[..6], &slides[6..], &init, &FinetuneConfig { freeze_encoder: true, ..cfg() }).unwrap();
        let enc = |n: &str| !n.starts_with("heads.cls");
        assert_eq!(run.model.params.checksum(enc), init.params.checksum(enc));
        assert_ne!(run.model.params.checksum(|_| true), init.params.checksum(|_| true));
    }

    #[test]
    fn learns_separable_toy_data_and_is_deterministic() {
        let slides = toy_slides(12, 6, 4, 2, 3);
        let a = finetune(&slides[..8], &slides[8..], &model(), &cfg()).unwrap();
        let b = finetune(&slides[..8], &slides[8..], &model(), &cfg()).unwrap();
        assert_eq!(a.log.metrics(), b.log.metrics());
        assert_eq!(a.val_auc, 1.0);
    }

    #[test]
    fn split_errors() {
        let slides = toy_slides(6, 6, 4, 1, 3);
        let low: Vec<SlideFeatures> = slides.iter().filter(|s| s.grade() == Grade::Low).cloned().collect();
        assert!(matches!(finetune(&low, &slides[..2], &model(), &cfg()), Err(PipelineError::SingleClass(_))));
        assert!(matches!(finetune(&slides, &[], &model(), &cfg()), Err(PipelineError::EmptySplit(_))));
    }
}
