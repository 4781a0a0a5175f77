use std::collections::HashMap;

use proptest::prelude::*;

use endonet::metrics::{auc_from_scores, bootstrap_ci, Metric, ScoredSlide};
use endonet::transformer::{apply_mask, SlotKind, TokenSequence};
use endonet::viz::{normalize_and_stitch, RegionAttention};
use endonet::wsi::{downsample_plane, split_dataset, Grade, RegionSpec, RgbPlane, SlideManifestEntry, SplitFractions, Subtype};

fn sequence(real: usize, padding: usize) -> TokenSequence {
    let n = real + padding;
    let mut kinds = vec![SlotKind::Class];
    kinds.extend((0..n).map(|i| if i < real { SlotKind::Patch } else { SlotKind::Padding }));
    TokenSequence {
        slide_id: "s".into(),
        region_id: "x0_y0".into(),
        kinds,
        positions: (0..n).map(|i| ((i / 20) as u16, (i % 20) as u16)).collect(),
        dim: 1,
        features: (0..n).map(|i| i as f32).collect(),
    }
}

fn scored(labels: &[bool], scores: &[f64]) -> Vec<ScoredSlide> {
    labels
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (&high, &p))| ScoredSlide {
            slide_id: format!("s{i}"),
            subtype: if high { Subtype::Serous } else { Subtype::EndometrioidG1 },
            true_grade: if high { Grade::High } else { Grade::Low },
            prob_high: p,
        })
        .collect()
}

fn two_classes() -> impl Strategy<Value = (Vec<bool>, Vec<f64>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(any::<bool>(), n).prop_map(|mut v| {
                v[0] = true;
                v[1] = false;
                v
            }),
            prop::collection::vec(0u8..10, n).prop_map(|v| v.into_iter().map(|x| x as f64 / 10.0).collect()),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_count_and_exclusions(real in 1usize..=400, ratio in 0.0f64..=1.0, seed in any::<u64>(), block in prop::option::of(1usize..5)) {
        let padding = 400 - real;
        let seq = sequence(real, padding);
        let (masked, chosen) = apply_mask(&seq, ratio, seed, block);
        prop_assert_eq!(chosen.len(), (ratio * real as f64).round() as usize);
        prop_assert_eq!(masked.kinds[0], SlotKind::Class);
        prop_assert_eq!(masked.padding_count(), padding);
        prop_assert!(chosen.iter().all(|&i| i < real));
        prop_assert_eq!(&masked.features, &seq.features);
    }

    #[test]
    fn auc_is_pair_counting((labels, scores) in two_classes()) {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        prop_assert_eq!(auc_from_scores(&labels, &scores).unwrap(), num / den);
    }

    #[test]
    fn narrower_interval_nests((labels, scores) in two_classes(), seed in any::<u64>()) {
        let s = scored(&labels, &scores);
        for metric in [Metric::Auc, Metric::WeightedF1] {
            let wide = bootstrap_ci(&s, metric, 0.5, 200, 0.95, seed).unwrap();
            let narrow = bootstrap_ci(&s, metric, 0.5, 200, 0.90, seed).unwrap();
            prop_assert!(wide.lower <= narrow.lower && narrow.upper <= wide.upper);
            prop_assert!(wide.lower <= wide.upper);
        }
    }

    #[test]
    fn patients_stay_together(patients in prop::collection::vec((1usize..4, any::<bool>()), 6..30), seed in any::<u64>()) {
        let mut entries = Vec::new();
        for (p, &(n, high)) in patients.iter().enumerate() {
            let subtype = if high { Subtype::Serous } else { Subtype::EndometrioidG1 };
            for k in 0..n {
                entries.push(SlideManifestEntry::new(&format!("s{p}_{k}"), &format!("p{p}"), "x", subtype, 1.0));
            }
        }
        let out = split_dataset(&entries, SplitFractions::default(), seed).unwrap();
        let mut seen = HashMap::new();
        for e in &out.entries {
            prop_assert!(e.split.is_some());
            let first = *seen.entry(e.patient_id.clone()).or_insert(e.split);
            prop_assert_eq!(first, e.split);
        }
    }

    #[test]
    fn stitched_scores_are_normalized(raw in prop::collection::vec(prop::option::of(-5.0f64..5.0), 400)) {
        prop_assume!(raw.iter().any(Option::is_some));
        let maps = [RegionAttention { region: RegionSpec::new(0, 0), scores: raw }];
        let canvas = normalize_and_stitch(&maps, 4480, 4480, None).unwrap();
        let vals: Vec<f64> = canvas.scores.iter().flatten().copied().collect();
        prop_assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
        if canvas.bounds.0 < canvas.bounds.1 {
            prop_assert!(vals.contains(&0.0) && vals.contains(&1.0));
        }
    }

    #[test]
    fn integer_downsampling_keeps_constant_planes(w in 4usize..40, h in 4usize..40, rgb in any::<[u8; 3]>(), factor in 1usize..4) {
        let out = downsample_plane(&RgbPlane::filled(w, h, rgb), factor as f64);
        prop_assert_eq!(out.width(), (w as f64 / factor as f64).round() as usize);
        prop_assert!(out.data().chunks(3).all(|p| p == rgb));
    }
}
