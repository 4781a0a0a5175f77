use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Grade, SlideManifestEntry, Split, WsiError};

const MAX_ATTEMPTS: u64 = 100;
const COMPOSITION_TOLERANCE: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<(), WsiError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(*f >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(WsiError::InvalidFractions(format!("{parts:?} must be >= 0 and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SplitOutcome {
    /// Input entries, in input order, with `split` filled in.
    pub entries: Vec<SlideManifestEntry>,
    /// Shuffles tried before the composition check passed (or gave up).
    pub attempts: u64,
    /// Largest |High fraction of a split - global High fraction|.
    pub max_deviation: f64,
    pub warnings: Vec<String>,
}

impl SplitOutcome {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == Some(split)).count()
    }
}

/// Largest-remainder allocation of `n` items over `fractions`; ties go to
/// the earlier bucket.
fn allocate(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Assign every slide a split so that all slides of a patient share it.
///
/// Patients whose slides already carry a split tag keep it. The remaining
/// patients are shuffled and allocated by largest-remainder rounding; the
/// shuffle is redrawn (up to 100 times) until every split's High fraction
/// lies within 0.10 of the overall fraction, otherwise the closest attempt
/// is kept with a warning.
pub fn split_dataset(entries: &[SlideManifestEntry], fractions: SplitFractions, seed: u64) -> Result<SplitOutcome, WsiError> {
    fractions.validate()?;
    let mut patients: Vec<&str> = Vec::new();
    let mut slides_of: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, e) in entries.iter().enumerate() {
        let list = slides_of.entry(e.patient_id.as_str()).or_default();
        if list.is_empty() {
            patients.push(e.patient_id.as_str());
        }
        list.push(i);
    }
    let mut pinned: HashMap<&str, Split> = HashMap::new();
    for &p in &patients {
        let mut tag = None;
        for &i in &slides_of[p] {
            match (tag, entries[i].split) {
                (None, t) => tag = t,
                (Some(a), Some(b)) if a != b => return Err(WsiError::ConflictingSplit(p.to_string())),
                _ => {}
            }
        }
        if let Some(t) = tag {
            pinned.insert(p, t);
        }
    }
    let free: Vec<&str> = patients.iter().copied().filter(|p| !pinned.contains_key(p)).collect();
    let high = |slides: &[usize]| slides.iter().filter(|&&i| entries[i].grade == Grade::High).count();
    let free_slides: Vec<usize> = free.iter().flat_map(|p| slides_of[p].iter().copied()).collect();
    let global = if free_slides.is_empty() { 0.0 } else { high(&free_slides) as f64 / free_slides.len() as f64 };
    let counts = allocate(free.len(), &[fractions.train, fractions.val, fractions.test]);
    let targets = [Split::Train, Split::Val, Split::Test];

    let mut best: Option<(f64, Vec<&str>)> = None;
    let mut attempts = 0;
    for attempt in 0..MAX_ATTEMPTS {
        attempts = attempt + 1;
        let mut order = free.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        order.shuffle(&mut rng);
        let mut dev: f64 = 0.0;
        let mut start = 0;
        for &c in &counts {
            let slides: Vec<usize> = order[start..start + c].iter().flat_map(|p| slides_of[p].iter().copied()).collect();
            if !slides.is_empty() {
                dev = dev.max((high(&slides) as f64 / slides.len() as f64 - global).abs());
            }
            start += c;
        }
        if best.as_ref().is_none_or(|(d, _)| dev < *d) {
            best = Some((dev, order));
        }
        if dev <= COMPOSITION_TOLERANCE + 1e-12 {
            break;
        }
    }
    let (max_deviation, order) = best.unwrap_or((0.0, Vec::new()));
    let mut warnings = Vec::new();
    if max_deviation > COMPOSITION_TOLERANCE + 1e-12 {
        let msg = format!(
            "split composition deviates from the overall High fraction by {max_deviation:.3} after {attempts} shuffles"
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut assigned: HashMap<&str, Split> = pinned;
    let mut start = 0;
    for (&c, &t) in counts.iter().zip(&targets) {
        for &p in &order[start..start + c] {
            assigned.insert(p, t);
        }
        start += c;
    }
    let mut out = entries.to_vec();
    for e in &mut out {
        e.split = Some(assigned[e.patient_id.as_str()]);
    }
    Ok(SplitOutcome { entries: out, attempts, max_deviation, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wsi::Subtype;

    fn entry(slide: &str, patient: &str, subtype: Subtype) -> SlideManifestEntry {
        SlideManifestEntry::new(slide, patient, slide, subtype, 1.0)
    }

    #[test]
    fn largest_remainder_ten() {
        assert_eq!(allocate(10, &[0.7, 0.1, 0.2]), [7, 1, 2]);
        assert_eq!(allocate(959, &[0.7, 0.1, 0.2]).iter().sum::<usize>(), 959);
        assert_eq!(allocate(100, &[0.6, 0.2, 0.2]), [60, 20, 20]);
    }

    #[test]
    fn ten_patients_seven_one_two() {
        let entries: Vec<_> = (0..10).map(|i| entry(&format!("s{i}"), &format!("p{i}"), Subtype::EndometrioidG1)).collect();
        let out = split_dataset(&entries, SplitFractions::default(), 0).unwrap();
        assert_eq!((out.count(Split::Train), out.count(Split::Val), out.count(Split::Test)), (7, 1, 2));
    }

    #[test]
    fn patient_slides_stay_together() {
        let mut entries = vec![entry("a", "p0", Subtype::Serous), entry("b", "p0", Subtype::Serous), entry("c", "p0", Subtype::Serous)];
        entries.extend((1..10).map(|i| entry(&format!("s{i}"), &format!("p{i}"), Subtype::EndometrioidG2)));
        let out = split_dataset(&entries, SplitFractions::default(), 3).unwrap();
        let s = out.entries[0].split;
        assert!(out.entries[..3].iter().all(|e| e.split == s));
    }

    #[test]
    fn prior_tags_pinned_and_conflicts_rejected() {
        let mut a = entry("a", "p0", Subtype::Serous);
        a.split = Some(Split::External);
        let b = entry("b", "p0", Subtype::Serous);
        let out = split_dataset(&[a.clone(), b, entry("c", "p1", Subtype::Serous)], SplitFractions::default(), 0).unwrap();
        assert_eq!(out.entries[1].split, Some(Split::External));
        let mut c = entry("c", "p0", Subtype::Serous);
        c.split = Some(Split::Train);
        assert!(matches!(split_dataset(&[a, c], SplitFractions::default(), 0), Err(WsiError::ConflictingSplit(_))));
    }

    #[test]
    fn bad_fractions_rejected() {
        let f = SplitFractions { train: 0.5, val: 0.1, test: 0.1 };
        assert!(split_dataset(&[], f, 0).is_err());
    }
}
