use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{epoch_rng, Checkpoint, CheckpointMeta, EpochRecord, PipelineError, RunLog, SlideFeatures, Stage};
use crate::tensor::{pairwise_sum, Graph, Optimizer, OptimizerKind};
use crate::transformer::{apply_mask, EncoderConfig, EndoNet, TokenSequence};
use crate::wsi::sample_from_candidates;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub regions_per_slide_per_epoch: usize,
    /// Overrides `encoder.mask_ratio`.
    pub mask_ratio: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            encoder: EncoderConfig::default(),
            epochs: 5,
            regions_per_slide_per_epoch: 1,
            mask_ratio: 0.5,
            optimizer: OptimizerKind::adam(),
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.epochs == 0 {
            return Err(PipelineError::Config("epochs must be >= 1".into()));
        }
        if self.regions_per_slide_per_epoch == 0 {
            return Err(PipelineError::Config("regions_per_slide_per_epoch must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(PipelineError::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        self.encoder().validate()?;
        Ok(())
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig { mask_ratio: self.mask_ratio, ..self.encoder }
    }
}

pub struct PretrainRun {
    pub model: EndoNet,
    pub log: RunLog,
    /// Resumable state after the last step taken.
    pub checkpoint: Checkpoint,
}

#[derive(Clone, Copy)]
struct Step {
    slide: usize,
    region: usize,
    mask_seed: u64,
}

/// Steps of one epoch: `r` regions per slide, shuffled, each with its own
/// mask seed.
fn schedule(slides: &[&SlideFeatures], r: usize, seed: u64, epoch: usize) -> Result<Vec<Step>, PipelineError> {
    let mut rng = epoch_rng(seed, epoch as u64);
    let mut steps = Vec::with_capacity(slides.len() * r);
    for (si, s) in slides.iter().enumerate() {
        let (idx, _) = sample_from_candidates(s.regions.len(), r, &mut rng)?;
        steps.extend(idx.into_iter().map(|region| Step { slide: si, region, mask_seed: 0 }));
    }
    steps.shuffle(&mut rng);
    for st in steps.iter_mut() {
        st.mask_seed = rng.random();
    }
    Ok(steps)
}

/// Masked-feature pre-training from scratch.
pub fn pretrain(slides: &[SlideFeatures], cfg: &PretrainConfig) -> Result<PretrainRun, PipelineError> {
    pretrain_from(slides, cfg, None, None)
}

/// Pre-training, optionally resumed from a checkpoint written by an earlier
/// (possibly interrupted) run, and optionally stopped after
/// `stop_after_steps` optimizer steps in total.
///
/// Each step samples a region, masks it, encodes it and takes one optimizer
/// step on the masked-slot reconstruction loss.
pub fn pretrain_from(
    slides: &[SlideFeatures],
    cfg: &PretrainConfig,
    resume: Option<&Checkpoint>,
    stop_after_steps: Option<u64>,
) -> Result<PretrainRun, PipelineError> {
    cfg.validate()?;
    let train: Vec<&SlideFeatures> = slides.iter().filter(|s| !s.regions.is_empty()).collect();
    if train.is_empty() {
        return Err(PipelineError::EmptySplit("training"));
    }
    let enc = cfg.encoder();
    let (mut model, mut opt, mut epoch, mut step, mut losses, mut log) = match resume {
        None => (
            EndoNet::new(enc, cfg.seed)?,
            Optimizer::new(cfg.optimizer, cfg.learning_rate),
            1,
            0,
            Vec::new(),
            RunLog::new("pretrain", cfg.seed, cfg),
        ),
        Some(ck) => {
            let saved: PretrainConfig = serde_json::from_value(ck.meta.config.clone())
                .map_err(|e| PipelineError::Incompatible(format!("pretrain config: {e}")))?;
            if &saved != cfg {
                return Err(PipelineError::Incompatible("config differs from the checkpoint's".into()));
            }
            ck.expect_stage(&[Stage::Pretrain])?;
            let model = ck.to_model()?;
            let opt = ck.to_optimizer()?.unwrap_or_else(|| Optimizer::new(cfg.optimizer, cfg.learning_rate));
            let log = ck.meta.log.clone().unwrap_or_else(|| RunLog::new("pretrain", cfg.seed, cfg));
            (model, opt, ck.meta.epoch + 1, ck.meta.step, ck.meta.partial_losses.clone(), log)
        }
    };
    let block = enc.block_masking.then_some(enc.block_side);
    let checkpoint = |model: &EndoNet, opt: &Optimizer, done: usize, step: usize, losses: &[f64], log: &RunLog| {
        let meta = CheckpointMeta {
            epoch: done,
            step,
            partial_losses: losses.to_vec(),
            log: Some(log.without_timings()),
            ..CheckpointMeta::new(cfg, cfg.seed)
        };
        Checkpoint::from_model(Stage::Pretrain, model, Some(opt), meta)
    };
    while epoch <= cfg.epochs {
        let started = Instant::now();
        let steps = schedule(&train, cfg.regions_per_slide_per_epoch, cfg.seed, epoch)?;
        while step < steps.len() {
            if stop_after_steps.is_some_and(|n| opt.step_count() >= n) {
                let ck = checkpoint(&model, &opt, epoch - 1, step, &losses, &log);
                return Ok(PretrainRun { model, log, checkpoint: ck });
            }
            let st = steps[step];
            let seq = TokenSequence::from_bundle(&train[st.slide].regions[st.region], &enc)?;
            let (masked, _) = apply_mask(&seq, enc.mask_ratio, st.mask_seed, block);
            let mut g = Graph::new();
            let vars = model.params.bind(&mut g, |n| !n.starts_with("heads.cls"));
            let out = model.forward_region(&mut g, &vars, &masked, false)?;
            let loss = model.reconstruction_loss(&mut g, &vars, out.hidden, &masked)?;
            losses.push(g.value(loss).item() as f64);
            g.backward(loss)?;
            let grads = model.params.collect_grads(&mut g, &vars);
            opt.step(&mut model.params, &grads)?;
            step += 1;
        }
        let train_loss = pairwise_sum(&losses) / losses.len() as f64;
        log::info!("pretrain epoch {epoch}: reconstruction loss {train_loss:.5}");
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: None,
            val_auc: None,
            val_f1: None,
            seconds: started.elapsed().as_secs_f64(),
        });
        losses.clear();
        step = 0;
        epoch += 1;
    }
    let ck = checkpoint(&model, &opt, cfg.epochs, 0, &[], &log);
    Ok(PretrainRun { model, log, checkpoint: ck })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::testutil::toy_slides;

    fn cfg() -> PretrainConfig {
        PretrainConfig {
            encoder: EncoderConfig {
                feature_dim: 6,
                d_model: 8,
                layers: 1,
                heads: 2,
                ffn: 16,
                grid_rows: 4,
                grid_cols: 4,
                ..Default::default()
            },
            epochs: 3,
            regions_per_slide_per_epoch: 2,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let slides = toy_slides(4, 6, 4, 3, 1);
        let full = pretrain(&slides, &cfg()).unwrap();
        let half = pretrain_from(&slides, &cfg(), None, Some(11)).unwrap();
        assert_eq!(half.checkpoint.meta.epoch, 1);
        assert_eq!(half.checkpoint.meta.step, 3);
        let mut buf = Vec::new();
        crate::pipeline::write_checkpoint_to(&mut buf, &half.checkpoint).unwrap();
        let ck = crate::pipeline::read_checkpoint_from(&mut buf.as_slice()).unwrap();
        let resumed = pretrain_from(&slides, &cfg(), Some(&ck), None).unwrap();
        assert_eq!(resumed.log.metrics(), full.log.metrics());
        assert_eq!(resumed.model.params, full.model.params);
    }

    #[test]
    fn errors() {
        let slides = toy_slides(2, 6, 4, 1, 1);
        let c = PretrainConfig { mask_ratio: 0.0, ..cfg() };
        assert!(matches!(
            pretrain(&slides, &c),
            Err(PipelineError::Transformer(crate::transformer::TransformerError::EmptyMask))
        ));
        assert!(matches!(pretrain(&[], &cfg()), Err(PipelineError::EmptySplit(_))));
        assert!(pretrain(&slides, &PretrainConfig { epochs: 0, ..cfg() }).is_err());
    }
}
