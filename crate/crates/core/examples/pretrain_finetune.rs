//! Build features for a small synthetic cohort, then run masked
//! pre-training and slide-level fine-tuning and print both logs.
//!
//! cargo run --release --example pretrain_finetune -- [slides] [seed]

use endonet::experiment::{featurize, ExperimentConfig};
use endonet::pipeline::{finetune, predict_all, pretrain, select_split, FinetuneConfig, PretrainConfig};
use endonet::wsi::Split;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let slides: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let cfg = ExperimentConfig { slides, high_fraction: 0.5, ..ExperimentConfig::benchmark(seed) };
    let data = featurize(&cfg)?;
    let train = select_split(&data.slides, Split::Train);
    let val = select_split(&data.slides, Split::Val);
    let test = select_split(&data.slides, Split::Test);
    println!("{} train / {} val / {} test slides", train.len(), val.len(), test.len());

    let pre = pretrain(&train, &PretrainConfig { epochs: 3, ..cfg.pretrain.clone() })?;
    for e in &pre.log.epochs {
        println!("pretrain epoch {}: reconstruction loss {:.4}", e.epoch, e.train_loss);
    }
    let fine = finetune(&train, &val, &pre.model, &FinetuneConfig { epochs: 8, ..cfg.finetune.clone() })?;
    for e in &fine.log.epochs {
        println!(
            "finetune epoch {}: loss {:.4} val loss {:.4} val AUC {:.3}",
            e.epoch,
            e.train_loss,
            e.val_loss.unwrap_or(f64::NAN),
            e.val_auc.unwrap_or(f64::NAN)
        );
    }
    println!("selected epoch {:?}", fine.selected_epoch);
    for p in predict_all(&fine.model, &test, 25, seed)? {
        let truth = test.iter().find(|s| s.slide_id() == p.slide_id).map(|s| s.grade());
        println!("  {} P(high) {:.3} truth {:?}", p.slide_id, p.prob_high, truth);
    }
    Ok(())
}
