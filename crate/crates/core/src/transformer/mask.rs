use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SlotKind, TokenSequence};

/// Mask exactly `round(ratio * real)` patch slots, chosen by `seed`.
///
/// With `block_side = Some(b)`, slots are taken in `b x b` squares anchored
/// at a random unmasked slot (row-major within the square) until the count
/// is reached; otherwise slots are drawn independently. Class and padding
/// slots are never masked. Returns the new sequence and the masked slot
/// indices in ascending order.
pub fn apply_mask(seq: &TokenSequence, ratio: f64, seed: u64, block_side: Option<usize>) -> (TokenSequence, Vec<usize>) {
    let mut out = seq.clone();
    let real: Vec<usize> = seq
        .kinds
        .iter()
        .skip(1)
        .enumerate()
        .filter(|(_, k)| matches!(k, SlotKind::Patch | SlotKind::Masked))
        .map(|(i, _)| i)
        .collect();
    for &i in &real {
        out.kinds[i + 1] = SlotKind::Patch;
    }
    let target = ((ratio.clamp(0.0, 1.0) * real.len() as f64).round() as usize).min(real.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = match block_side {
        None => index::sample(&mut rng, real.len(), target).into_iter().map(|j| real[j]).collect(),
        Some(b) => blocks(seq, &real, target, b.max(1), &mut rng),
    };
    chosen.sort_unstable();
    for &i in &chosen {
        out.kinds[i + 1] = SlotKind::Masked;
    }
    (out, chosen)
}

fn blocks(seq: &TokenSequence, real: &[usize], target: usize, b: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let at: HashMap<(u16, u16), usize> = real.iter().map(|&i| (seq.positions[i], i)).collect();
    let mut masked = vec![false; seq.positions.len()];
    let mut chosen = Vec::with_capacity(target);
    while chosen.len() < target {
        let open: Vec<usize> = real.iter().copied().filter(|&i| !masked[i]).collect();
        let (r0, c0) = seq.positions[open[rng.random_range(0..open.len())]];
        'square: for r in r0 as usize..r0 as usize + b {
            for c in c0 as usize..c0 as usize + b {
                if chosen.len() == target {
                    break 'square;
                }
                let (Ok(r), Ok(c)) = (u16::try_from(r), u16::try_from(c)) else { continue };
                if let Some(&i) = at.get(&(r, c)) {
                    if !masked[i] {
                        masked[i] = true;
                        chosen.push(i);
                    }
                }
            }
        }
    }
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n_real: usize, n_pad: usize) -> TokenSequence {
        let n = n_real + n_pad;
        let mut kinds = vec![SlotKind::Class];
        kinds.extend((0..n).map(|i| if i < n_real { SlotKind::Patch } else { SlotKind::Padding }));
        TokenSequence {
            slide_id: "s".into(),
            region_id: "x0_y0".into(),
            kinds,
            positions: (0..n).map(|i| ((i / 20) as u16, (i % 20) as u16)).collect(),
            dim: 1,
            features: vec![1.0; n],
        }
    }

    #[test]
    fn exact_counts_and_exclusions() {
        let s = seq(380, 20);
        for block in [None, Some(4)] {
            let (m, idx) = apply_mask(&s, 0.5, 3, block);
            assert_eq!(idx.len(), 190);
            assert_eq!(m.masked_slots(), idx);
            assert_eq!(m.kinds[0], SlotKind::Class);
            assert_eq!(m.padding_count(), 20);
            assert!(idx.iter().all(|&i| i < 380));
        }
        assert!(apply_mask(&s, 0.0, 1, None).1.is_empty());
        assert_eq!(apply_mask(&s, 1.0, 1, None).1.len(), 380);
    }

    #[test]
    fn seed_determines_mask() {
        let s = seq(400, 0);
        assert_eq!(apply_mask(&s, 0.5, 9, None), apply_mask(&s, 0.5, 9, None));
        assert_ne!(apply_mask(&s, 0.5, 9, None).1, apply_mask(&s, 0.5, 10, None).1);
    }
}
