use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{wrap, TokenizedDialogue};
use crate::error::Error;

/// Maximum response length mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PMode {
    /// No response appended.
    Zero,
    /// Uniform over candidate lengths of at most `k` utterances.
    Cap(usize),
    /// Uniform over every candidate length.
    All,
    /// Always the full remainder of the dialogue.
    Fix,
}

impl fmt::Display for PMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PMode::Zero => write!(f, "0"),
            PMode::Cap(k) => write!(f, "{k}"),
            PMode::All => write!(f, "all"),
            PMode::Fix => write!(f, "fix"),
        }
    }
}

impl FromStr for PMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "0" | "zero" => Ok(PMode::Zero),
            "all" => Ok(PMode::All),
            "fix" => Ok(PMode::Fix),
            other => match other.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(PMode::Cap(k)),
                _ => Err(Error::Config(format!(
                    "invalid response-length mode {s:?} (expected 0, a positive cap, all, or fix)"
                ))),
            },
        }
    }
}

impl TryFrom<String> for PMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl From<PMode> for String {
    fn from(p: PMode) -> String {
        p.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub p_mode: PMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            p_mode: PMode::All,
            seed: 0,
        }
    }
}

/// One pre-training instance split at turn `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSample {
    pub dialogue_id: String,
    /// Split turn, 1-based.
    pub t: usize,
    pub context_utts: Vec<Vec<u32>>,
    pub response_utts: Vec<Vec<u32>>,
    /// `[CLS] ⊕ context ⊕ [SEP]`.
    pub context_ids: Vec<u32>,
    /// `[CLS] ⊕ context ⊕ response ⊕ [SEP]`.
    pub full_ids: Vec<u32>,
    /// Number of appended response utterances (odd, or zero in mode Zero).
    pub response_len_utts: usize,
    pub mode: PMode,
    pub truncated: bool,
}

impl SplitSample {
    fn build(
        dialogue_id: String,
        t: usize,
        context_utts: Vec<Vec<u32>>,
        response_utts: Vec<Vec<u32>>,
        response_len_utts: usize,
        mode: PMode,
        truncated: bool,
    ) -> Self {
        let context_ids = wrap(&context_utts);
        let full: Vec<Vec<u32>> = context_utts.iter().chain(&response_utts).cloned().collect();
        let full_ids = wrap(&full);
        Self {
            dialogue_id,
            t,
            context_utts,
            response_utts,
            context_ids,
            full_ids,
            response_len_utts,
            mode,
            truncated,
        }
    }
}

/// Candidate response lengths (in utterances) given `future` utterances
/// `S_t, U_{t+1}, …, S_n` remaining after the split.
pub fn response_candidates(future: usize, mode: PMode) -> Vec<usize> {
    let odd = (1..=future).step_by(2);
    match mode {
        PMode::Zero => vec![0],
        PMode::Cap(k) => odd.filter(|&l| l <= k).collect(),
        PMode::All => odd.collect(),
        PMode::Fix => vec![future],
    }
}

pub fn sample_response_len<R: Rng + ?Sized>(future: usize, mode: PMode, rng: &mut R) -> usize {
    let c = response_candidates(future, mode);
    c[rng.gen_range(0..c.len())]
}

/// Splits at `t ~ Uniform{1..n}` and samples a response target per `mode`.
pub fn split_and_sample<R: Rng + ?Sized>(d: &TokenizedDialogue, mode: PMode, rng: &mut R) -> SplitSample {
    let n = d.num_pairs();
    assert!(n >= 1, "dialogue {} has no turn pairs", d.id);
    let t = rng.gen_range(1..=n);
    let ctx_end = 2 * t - 1;
    let future = d.utterances.len() - ctx_end;
    let len = sample_response_len(future, mode, rng);
    SplitSample::build(
        d.id.clone(),
        t,
        d.utterances[..ctx_end].to_vec(),
        d.utterances[ctx_end..ctx_end + len].to_vec(),
        len,
        mode,
        false,
    )
}

/// Fits a sample into `max_len` tokens: drops whole context utterances from the
/// oldest end (keeping the last one), then trims the response tail, then the
/// front of the remaining context utterance (after its role token).
pub fn truncate(sample: &SplitSample, max_len: usize) -> SplitSample {
    let size = |c: &[Vec<u32>], r: &[Vec<u32>]| 2 + c.iter().chain(r).map(Vec::len).sum::<usize>();
    if sample.full_ids.len() <= max_len {
        return sample.clone();
    }
    let mut ctx = sample.context_utts.clone();
    let mut resp = sample.response_utts.clone();
    while size(&ctx, &resp) > max_len && ctx.len() > 1 {
        ctx.remove(0);
    }
    while size(&ctx, &resp) > max_len {
        let Some(last) = resp.last_mut() else { break };
        last.pop();
        if last.is_empty() {
            resp.pop();
        }
    }
    let excess = size(&ctx, &resp).saturating_sub(max_len);
    if excess > 0 {
        let u = &mut ctx[0];
        let keep_from = (1 + excess).min(u.len());
        u.drain(1..keep_from);
    }
    SplitSample::build(
        sample.dialogue_id.clone(),
        sample.t,
        ctx,
        resp,
        sample.response_len_utts,
        sample.mode,
        true,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{SYS, USR};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dialogue(pairs: usize) -> TokenizedDialogue {
        let utterances = (0..2 * pairs)
            .map(|i| {
                let role = if i % 2 == 0 { USR } else { SYS };
                vec![role, 100 + i as u32, 200 + i as u32]
            })
            .collect();
        TokenizedDialogue {
            id: "d".into(),
            utterances,
        }
    }

    #[test]
    fn five_future_utterances() {
        assert_eq!(response_candidates(5, PMode::Cap(3)), vec![1, 3]);
        assert_eq!(response_candidates(5, PMode::All), vec![1, 3, 5]);
        assert_eq!(response_candidates(5, PMode::Fix), vec![5]);
        assert_eq!(response_candidates(5, PMode::Zero), vec![0]);
        assert_eq!(response_candidates(1, PMode::All), vec![1]);
    }

    #[test]
    fn single_pair_all_mode() {
        let d = dialogue(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let s = split_and_sample(&d, PMode::All, &mut rng);
            assert_eq!(s.t, 1);
            assert_eq!(s.response_utts, vec![d.utterances[1].clone()]);
        }
    }

    #[test]
    fn context_is_prefix_of_full() {
        let d = dialogue(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [PMode::Zero, PMode::Cap(3), PMode::All, PMode::Fix] {
            for _ in 0..50 {
                let s = split_and_sample(&d, mode, &mut rng);
                let body = &s.context_ids[..s.context_ids.len() - 1];
                assert!(s.full_ids.starts_with(body));
                if mode == PMode::Zero {
                    assert_eq!(s.full_ids, s.context_ids);
                } else {
                    assert!(s.full_ids.len() > s.context_ids.len());
                    assert_eq!(s.response_utts.last().unwrap()[0], SYS);
                }
                assert_eq!(s.context_utts.last().unwrap()[0], USR);
            }
        }
    }

    #[test]
    fn pmode_parsing() {
        assert_eq!("0".parse::<PMode>().unwrap(), PMode::Zero);
        assert_eq!("3".parse::<PMode>().unwrap(), PMode::Cap(3));
        assert_eq!("ALL".parse::<PMode>().unwrap(), PMode::All);
        assert_eq!("fix".parse::<PMode>().unwrap(), PMode::Fix);
        assert!("-1".parse::<PMode>().is_err());
        assert!("bogus".parse::<PMode>().is_err());
    }

    #[test]
    fn truncation_drops_oldest_context_first() {
        let d = dialogue(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = loop {
            let s = split_and_sample(&d, PMode::Fix, &mut rng);
            if s.t == 3 {
                break s;
            }
        };
        // 5 context utts (15 tokens) + 3 response utts (9) + 2 = 26 tokens.
        assert_eq!(s.full_ids.len(), 26);
        let t = truncate(&s, 20);
        assert!(t.truncated);
        assert!(t.full_ids.len() <= 20);
        assert_eq!(t.full_ids[0], crate::vocab::CLS);
        assert_eq!(t.context_utts.last(), s.context_utts.last());
        assert_eq!(t.response_utts, s.response_utts);

        let tight = truncate(&s, 8);
        assert_eq!(tight.full_ids.len(), 8);
        assert_eq!(tight.context_utts.len(), 1);
        assert_eq!(tight.full_ids[0], crate::vocab::CLS);
        assert_eq!(*tight.full_ids.last().unwrap(), crate::vocab::SEP);
    }
}
