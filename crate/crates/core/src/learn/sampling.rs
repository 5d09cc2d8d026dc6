use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::LearnError;

/// Mixes a master seed with a path of stream indices (repeat, fold, tree…)
/// into an independent seed. SplitMix64 finaliser per step.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p.wrapping_add(0x632b_e59b_d9b4_e019))))
}

/// Draws `n_out` indices with replacement, each example weighted by the
/// inverse of its class frequency so every class is equally likely.
///
/// Every class in `0..n_classes` must occur at least once.
pub fn balanced_sample<R: Rng + ?Sized>(
    labels: &[usize],
    n_classes: usize,
    n_out: usize,
    rng: &mut R,
) -> Result<Vec<usize>, LearnError> {
    if n_classes < 2 {
        return Err(LearnError::MissingClass(format!("balanced sampling needs at least 2 classes, got {n_classes}")));
    }
    let mut freq = vec![0usize; n_classes];
    for &c in labels {
        if c >= n_classes {
            return Err(LearnError::Invalid(format!("label {c} >= n_classes {n_classes}")));
        }
        freq[c] += 1;
    }
    if let Some(c) = freq.iter().position(|f| *f == 0) {
        return Err(LearnError::MissingClass(format!("class {c} has no examples")));
    }
    let weights: Vec<f64> = labels.iter().map(|&c| 1.0 / freq[c] as f64).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| LearnError::Invalid(e.to_string()))?;
    Ok((0..n_out).map(|_| dist.sample(rng)).collect())
}
