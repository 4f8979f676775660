use rand::Rng;

use super::masking::{apply_masking_with, MaskConfig};
use super::sampler::{truncate, SplitSample};
use crate::encoder::TokenBatch;
use crate::error::{Error, Result};

/// Two padded input streams: the masked context and the unmasked context+response.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub context: TokenBatch,
    pub full: TokenBatch,
    /// Masked positions per example (indices into the context stream).
    pub mask_positions: Vec<Vec<usize>>,
    pub mlm_labels: Vec<Vec<u32>>,
    /// Examples whose context had nothing to mask.
    pub unmasked_examples: usize,
    pub truncated_examples: usize,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.context.batch
    }

    pub fn is_empty(&self) -> bool {
        self.context.batch == 0
    }

    pub fn mask_count(&self) -> usize {
        self.mask_positions.iter().map(Vec::len).sum()
    }
}

/// Truncates to `max_len`, masks each context, and pads both streams.
pub fn make_pretrain_batch<R: Rng + ?Sized>(
    samples: &[SplitSample],
    mask: &MaskConfig,
    vocab_size: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<MaskedBatch> {
    if samples.is_empty() {
        return Err(Error::Data("cannot build an empty pre-training batch".into()));
    }
    let mut contexts = Vec::with_capacity(samples.len());
    let mut fulls = Vec::with_capacity(samples.len());
    let mut mask_positions = Vec::with_capacity(samples.len());
    let mut mlm_labels = Vec::with_capacity(samples.len());
    let mut unmasked_examples = 0;
    let mut truncated_examples = 0;
    for s in samples {
        let s = truncate(s, max_len);
        if s.truncated {
            truncated_examples += 1;
        }
        let m = apply_masking_with(&s.context_ids, mask, vocab_size, rng);
        if m.positions.is_empty() {
            unmasked_examples += 1;
        }
        contexts.push(m.ids);
        fulls.push(s.full_ids);
        mask_positions.push(m.positions);
        mlm_labels.push(m.labels);
    }
    Ok(MaskedBatch {
        context: TokenBatch::from_sequences(&contexts),
        full: TokenBatch::from_sequences(&fulls),
        mask_positions,
        mlm_labels,
        unmasked_examples,
        truncated_examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sampler::PMode;
    use crate::vocab::{CLS, PAD, SEP, SYS, USR};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(ctx_tokens: usize, resp_tokens: usize) -> SplitSample {
        let ctx = vec![std::iter::once(USR).chain((0..ctx_tokens as u32).map(|i| 10 + i)).collect()];
        let resp: Vec<Vec<u32>> = vec![std::iter::once(SYS).chain((0..resp_tokens as u32).map(|i| 50 + i)).collect()];
        let wrap = |u: &[Vec<u32>]| {
            let mut v = vec![CLS];
            u.iter().for_each(|x| v.extend(x));
            v.push(SEP);
            v
        };
        let full: Vec<Vec<u32>> = ctx.iter().chain(&resp).cloned().collect();
        SplitSample {
            dialogue_id: "d".into(),
            t: 1,
            context_ids: wrap(&ctx),
            full_ids: wrap(&full),
            context_utts: ctx,
            response_utts: resp,
            response_len_utts: 1,
            mode: PMode::All,
            truncated: false,
        }
    }

    #[test]
    fn pads_each_stream_separately() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // context lengths: 5 + 3 = 8 and 9 + 3 = 12
        let b = make_pretrain_batch(&[sample(5, 2), sample(9, 4)], &MaskConfig::default(), 100, 64, &mut rng)
            .unwrap();
        assert_eq!(b.context.seq, 12);
        assert_eq!(b.context.lens, vec![8, 12]);
        assert_eq!(b.full.seq, 12 + 5);
        assert_eq!(&b.context.ids[8..12], &[PAD; 4]);
        assert!(!b.context.mask[8]);
        for (ex, pos) in b.mask_positions.iter().enumerate() {
            for &p in pos {
                assert!(p < b.context.lens[ex]);
            }
        }
    }

    #[test]
    fn truncated_examples_keep_cls() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_pretrain_batch(&[sample(30, 30)], &MaskConfig::default(), 100, 16, &mut rng).unwrap();
        assert_eq!(b.truncated_examples, 1);
        assert!(b.full.seq <= 16);
        assert_eq!(b.full.ids[0], CLS);
        assert_eq!(b.context.ids[0], CLS);
    }

    #[test]
    fn empty_batch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_pretrain_batch(&[], &MaskConfig::default(), 100, 16, &mut rng).is_err());
    }
}
