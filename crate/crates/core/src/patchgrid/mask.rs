use rand::seq::SliceRandom;

use crate::error::{bail, Result};
use crate::rng::{self, tag};

/// One random masking draw over `token_count` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub seed: u64,
    pub ratio: f64,
    /// Visible tokens, ascending.
    pub kept: Vec<usize>,
    /// Hidden tokens, ascending.
    pub masked: Vec<usize>,
    /// The shuffled order the split was taken from: the first `kept.len()`
    /// entries are the visible tokens.
    pub permutation: Vec<usize>,
}

impl MaskPlan {
    pub fn token_count(&self) -> usize {
        self.permutation.len()
    }

    /// Per-token flag, `true` where the token is masked.
    pub fn masked_flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.token_count()];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }
}

/// Visible-token count `max(1, round(n·(1−ρ)))`.
pub fn kept_count(token_count: usize, ratio: f64) -> usize {
    ((token_count as f64 * (1.0 - ratio)).round() as usize).clamp(1, token_count.max(1))
}

/// Uniform subset of visible tokens via a seeded Fisher-Yates shuffle.
pub fn sample_mask(token_count: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        bail!(Config, "masking ratio {ratio} outside [0, 1)");
    }
    if token_count == 0 {
        bail!(Config, "cannot mask an empty token set");
    }
    let mut perm: Vec<usize> = (0..token_count).collect();
    perm.shuffle(&mut rng::stream(seed, &[tag::MASK]));
    let k = kept_count(token_count, ratio);
    let mut kept = perm[..k].to_vec();
    let mut masked = perm[k..].to_vec();
    kept.sort_unstable();
    masked.sort_unstable();
    Ok(MaskPlan {
        seed,
        ratio,
        kept,
        masked,
        permutation: perm,
    })
}
