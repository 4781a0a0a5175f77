use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{encode_patches, patches_to_tensor, Cnn, CnnConfig, FeatureError, Flip, HeadKind};
use crate::metrics::{auc_from_scores, weighted_f1_from_labels};
use crate::tensor::{Graph, Optimizer};
use crate::wsi::{Grade, LabeledPatch, RgbPlane, Subtype};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchTrainConfig {
    pub cnn: CnnConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of slides (per class) whose patches go to training.
    pub split_fraction: f64,
    pub flips: bool,
    pub seed: u64,
}

impl Default for PatchTrainConfig {
    fn default() -> Self {
        PatchTrainConfig {
            cnn: CnnConfig::default(),
            epochs: 5,
            batch_size: 16,
            learning_rate: 1e-3,
            split_fraction: 0.8,
            flips: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchEpoch {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchClassifierReport {
    pub epochs: Vec<PatchEpoch>,
    /// Epoch with the highest validation AUC; ties keep the earlier one.
    pub selected_epoch: usize,
    pub train_patches: usize,
    pub val_patches: usize,
    pub train_slides: Vec<String>,
    pub val_slides: Vec<String>,
    pub num_parameters: usize,
}

pub struct TrainedCnn {
    /// Weights of the selected epoch.
    pub cnn: Cnn,
    pub report: PatchClassifierReport,
}

fn target(head: HeadKind, p: &LabeledPatch) -> usize {
    match head {
        HeadKind::Grade => p.grade.index(),
        HeadKind::Subtype => p.subtype.index(),
    }
}

/// Probability of High from one row of logits.
pub(crate) fn prob_high(head: HeadKind, logits: &[f32]) -> f64 {
    let mx = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    match head {
        HeadKind::Grade => e[Grade::High.index()] / z,
        HeadKind::Subtype => {
            Subtype::ALL.iter().filter(|s| s.grade() == Grade::High).map(|s| e[s.index()]).sum::<f64>() / z
        }
    }
}

/// Slide-grouped split stratified by each slide's majority grade.
fn split_by_slide(patches: &[LabeledPatch], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let mut order: Vec<&str> = Vec::new();
    let mut votes: HashMap<&str, [usize; 2]> = HashMap::new();
    for p in patches {
        let v = votes.entry(p.slide_id.as_str()).or_insert_with(|| {
            order.push(p.slide_id.as_str());
            [0, 0]
        });
        v[p.grade.index()] += 1;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in [Grade::Low, Grade::High] {
        let mut slides: Vec<&str> = order
            .iter()
            .copied()
            .filter(|s| {
                let v = votes[s];
                Grade::from_index(usize::from(v[1] > v[0])) == class
            })
            .collect();
        slides.shuffle(rng);
        let n = slides.len();
        let mut k = (fraction * n as f64).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        }
        train.extend(slides[..k].iter().map(|s| s.to_string()));
        val.extend(slides[k..].iter().map(|s| s.to_string()));
    }
    (train, val)
}

fn evaluate(cnn: &Cnn, patches: &[&LabeledPatch], batch: usize) -> Result<(f64, f64), FeatureError> {
    let planes: Vec<&RgbPlane> = patches.iter().map(|p| &p.patch).collect();
    let (_, logits) = encode_patches(cnn, &planes, batch)?;
    let k = cnn.config.head.classes();
    let probs: Vec<f64> = logits.chunks(k).map(|l| prob_high(cnn.config.head, l)).collect();
    let positive: Vec<bool> = patches.iter().map(|p| p.grade == Grade::High).collect();
    let truth: Vec<Grade> = patches.iter().map(|p| p.grade).collect();
    let pred: Vec<Grade> = probs.iter().map(|&p| if p >= 0.5 { Grade::High } else { Grade::Low }).collect();
    Ok((auc_from_scores(&positive, &probs)?, weighted_f1_from_labels(&truth, &pred)?))
}

/// Supervised training of the patch CNN with a slide-grouped 80/20 split;
/// keeps the weights of the epoch with the best validation AUC.
pub fn train_patch_classifier(patches: &[LabeledPatch], cfg: &PatchTrainConfig) -> Result<TrainedCnn, FeatureError> {
    if cfg.epochs == 0 {
        return Err(FeatureError::NoEpochs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_slides, val_slides) = split_by_slide(patches, cfg.split_fraction, &mut rng);
    let train: Vec<&LabeledPatch> = patches.iter().filter(|p| train_slides.contains(&p.slide_id)).collect();
    let val: Vec<&LabeledPatch> = patches.iter().filter(|p| val_slides.contains(&p.slide_id)).collect();
    for (name, part) in [("train", &train), ("validation", &val)] {
        let high = part.iter().filter(|p| p.grade == Grade::High).count();
        if high == 0 || high == part.len() {
            return Err(FeatureError::SingleClass(format!("{name} partition has {} patches, {high} High", part.len())));
        }
    }
    let mut cnn = Cnn::new(cfg.cnn, cfg.seed)?;
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut best: Option<(f64, Cnn)> = None;
    let mut report = PatchClassifierReport {
        epochs: Vec::new(),
        selected_epoch: 0,
        train_patches: train.len(),
        val_patches: val.len(),
        train_slides,
        val_slides,
        num_parameters: cnn.num_parameters(),
    };
    let bs = cfg.batch_size.max(1);
    for epoch in 1..=cfg.epochs {
        let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed);
        erng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut erng);
        let mut losses = Vec::new();
        for chunk in order.chunks(bs) {
            // Training-mode batch norm needs two values per channel.
            if chunk.len() < 2 {
                continue;
            }
            let planes: Vec<&RgbPlane> = chunk.iter().map(|&i| &train[i].patch).collect();
            let flips: Vec<Flip> = chunk
                .iter()
                .map(|_| {
                    if cfg.flips {
                        Flip { horizontal: erng.random(), vertical: erng.random() }
                    } else {
                        Flip::default()
                    }
                })
                .collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| target(cfg.cnn.head, train[i])).collect();
            let mut g = Graph::<f32>::new();
            let vars = cnn.params.bind(&mut g, |_| true);
            let x = g.input(patches_to_tensor(&planes, Some(&flips))?);
            let out = cnn.forward(&mut g, &vars, x, true)?;
            let loss = g.cross_entropy(out.logits, &targets, None)?;
            losses.push(g.value(loss).item() as f64);
            g.backward(loss)?;
            let grads = cnn.params.collect_grads(&mut g, &vars);
            opt.step(&mut cnn.params, &grads)?;
            cnn.update_running_stats(&out.stats)?;
        }
        let (val_auc, val_f1) = evaluate(&cnn, &val, bs)?;
        let train_loss = if losses.is_empty() { f64::NAN } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        log::info!("patch classifier epoch {epoch}: loss {train_loss:.4}, val AUC {val_auc:.4}, val F1 {val_f1:.4}");
        report.epochs.push(PatchEpoch { epoch, train_loss, val_auc, val_f1 });
        if best.as_ref().is_none_or(|(a, _)| val_auc > *a) {
            best = Some((val_auc, cnn.clone()));
            report.selected_epoch = epoch;
        }
    }
    let (_, cnn) = best.expect("at least one epoch");
    Ok(TrainedCnn { cnn, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(slide: &str, grade: Grade) -> LabeledPatch {
        let subtype = if grade == Grade::High { Subtype::Serous } else { Subtype::EndometrioidG1 };
        LabeledPatch { slide_id: slide.into(), x: 0, y: 0, subtype, grade, patch: RgbPlane::filled(224, 224, [0, 0, 0]) }
    }

    #[test]
    fn split_never_straddles_slides() {
        let mut patches = Vec::new();
        for s in 0..10 {
            let grade = if s % 2 == 0 { Grade::Low } else { Grade::High };
            for _ in 0..3 {
                patches.push(lp(&format!("s{s}"), grade));
            }
        }
        let (train, val) = split_by_slide(&patches, 0.8, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(train.len(), 8);
        assert!(train.iter().all(|s| !val.contains(s)));
    }

    #[test]
    fn zero_epochs_and_single_class_rejected() {
        let patches = vec![lp("a", Grade::Low), lp("b", Grade::Low)];
        let cfg = PatchTrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(train_patch_classifier(&patches, &cfg), Err(FeatureError::NoEpochs)));
        let cfg = PatchTrainConfig { epochs: 1, ..Default::default() };
        assert!(matches!(train_patch_classifier(&patches, &cfg), Err(FeatureError::SingleClass(_))));
    }

    #[test]
    fn subtype_head_probability() {
        let p = prob_high(HeadKind::Subtype, &[0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((p - 0.6).abs() < 1e-12);
        assert!((prob_high(HeadKind::Grade, &[0.0, 0.0]) - 0.5).abs() < 1e-12);
    }
}
