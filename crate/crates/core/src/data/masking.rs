use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::vocab::{CLS, MASK, PAD, SEP, SYS, USR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// Every selected position becomes `[MASK]`.
    #[default]
    Pure,
    /// 80% `[MASK]`, 10% random token, 10% unchanged.
    Bert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub ratio: f64,
    pub strategy: MaskStrategy,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.15,
            strategy: MaskStrategy::Pure,
        }
    }
}

/// A context with masked positions and the original ids found there.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedContext {
    pub ids: Vec<u32>,
    /// Ascending positions of masked tokens.
    pub positions: Vec<usize>,
    pub labels: Vec<u32>,
    /// Set when the context had no maskable token.
    pub empty: bool,
}

/// Content tokens only: never `[CLS]`, `[SEP]`, `[PAD]`, `[MASK]`, `[USR]`, `[SYS]`.
pub fn is_maskable(id: u32) -> bool {
    !matches!(id, PAD | CLS | SEP | MASK | USR | SYS)
}

/// `round_half_up(ratio · n)`, at least 1 when `n > 0` and `ratio > 0`.
pub fn mask_count(maskable: usize, ratio: f64) -> usize {
    if maskable == 0 || ratio <= 0.0 {
        return 0;
    }
    let n = (ratio * maskable as f64 + 0.5).floor() as usize;
    n.clamp(1, maskable)
}

pub fn apply_masking<R: Rng + ?Sized>(ids: &[u32], ratio: f64, rng: &mut R) -> MaskedContext {
    apply_masking_with(
        ids,
        &MaskConfig {
            ratio,
            strategy: MaskStrategy::Pure,
        },
        0,
        rng,
    )
}

/// Masks `mask_count` maskable positions chosen uniformly without replacement.
/// `vocab_size` is only consulted by [`MaskStrategy::Bert`].
pub fn apply_masking_with<R: Rng + ?Sized>(
    ids: &[u32],
    cfg: &MaskConfig,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedContext {
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| is_maskable(ids[i])).collect();
    let n = mask_count(candidates.len(), cfg.ratio);
    let mut positions: Vec<usize> = sample(rng, candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    positions.sort_unstable();
    let labels = positions.iter().map(|&p| ids[p]).collect();
    let mut out = ids.to_vec();
    for &p in &positions {
        out[p] = match cfg.strategy {
            MaskStrategy::Pure => MASK,
            MaskStrategy::Bert => {
                let r: f64 = rng.gen();
                if r < 0.8 || vocab_size <= SYS as usize + 1 {
                    MASK
                } else if r < 0.9 {
                    rng.gen_range(SYS + 1..vocab_size as u32)
                } else {
                    ids[p]
                }
            }
        };
    }
    MaskedContext {
        ids: out,
        positions,
        labels,
        empty: candidates.is_empty(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rounding_rule() {
        assert_eq!(mask_count(20, 0.15), 3);
        assert_eq!(mask_count(2, 0.15), 1);
        assert_eq!(mask_count(10, 0.15), 2);
        assert_eq!(mask_count(0, 0.15), 0);
        assert_eq!(mask_count(20, 0.0), 0);
    }

    #[test]
    fn masks_exact_count_and_records_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ids = vec![CLS, USR];
        ids.extend(10..30);
        ids.push(SEP);
        let m = apply_masking(&ids, 0.15, &mut rng);
        assert_eq!(m.positions.len(), 3);
        for (p, l) in m.positions.iter().zip(&m.labels) {
            assert_eq!(m.ids[*p], MASK);
            assert_eq!(ids[*p], *l);
        }
    }

    #[test]
    fn no_maskable_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = apply_masking(&[CLS, USR, SYS, SEP], 0.15, &mut rng);
        assert!(m.empty);
        assert!(m.positions.is_empty());
    }

    #[test]
    fn bert_strategy_keeps_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ids: Vec<u32> = (10..110).collect();
        let cfg = MaskConfig {
            ratio: 0.5,
            strategy: MaskStrategy::Bert,
        };
        let m = apply_masking_with(&ids, &cfg, 200, &mut rng);
        let masked = m.positions.iter().filter(|&&p| m.ids[p] == MASK).count();
        assert!(masked > 25 && masked < 50);
        assert_eq!(m.labels.len(), 50);
    }
}
