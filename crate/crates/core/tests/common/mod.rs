#![allow(dead_code)]

use boottod_core::data::synthetic::{generate_synthetic_corpus, SyntheticConfig, SyntheticCorpus};
use boottod_core::data::{
    make_pretrain_batch, split_and_sample, MaskConfig, MaskedBatch, PMode, TokenizedDialogue,
};
use boottod_core::encoder::EncoderConfig;
use boottod_core::objective::{PredictorWeights, PretrainModel};
use boottod_core::params::{ParamStore, Precision};
use boottod_core::tensor::Tensor;
use boottod_core::vocab::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn small_corpus(dialogues: usize, seed: u64) -> (SyntheticCorpus, Vocab) {
    let cfg = SyntheticConfig {
        dialogues,
        seed,
        ..SyntheticConfig::default()
    };
    let corpus = generate_synthetic_corpus(&cfg).unwrap();
    let vocab = Vocab::build(corpus.all_dialogues(), 1).unwrap();
    (corpus, vocab)
}

pub fn tokenized(corpus: &SyntheticCorpus, vocab: &Vocab) -> Vec<TokenizedDialogue> {
    corpus.all_dialogues().map(|d| TokenizedDialogue::new(d, vocab)).collect()
}

pub fn encoder_config(vocab_size: usize, layers: usize, d: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        num_layers: layers,
        hidden_dim: d,
        num_heads: 2,
        ffn_dim: 2 * d,
        max_len: 96,
        dropout_p: 0.1,
        init_std: 0.1,
        ln_eps: 1e-5,
    }
}

pub fn model(vocab_size: usize, layers: usize, d: usize, seed: u64) -> PretrainModel {
    let cfg = encoder_config(vocab_size, layers, d);
    PretrainModel::init(&cfg, Precision::F64, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn batch(dialogues: &[TokenizedDialogue], mode: PMode, ratio: f64, vocab_size: usize, seed: u64) -> MaskedBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<_> = dialogues.iter().map(|d| split_and_sample(d, mode, &mut rng)).collect();
    let mask = MaskConfig {
        ratio,
        ..MaskConfig::default()
    };
    make_pretrain_batch(&samples, &mask, vocab_size, 96, &mut rng).unwrap()
}

/// Overwrites a `d → 2d → d` ReLU predictor so it computes the identity:
/// `relu(x) − relu(−x) = x`.
pub fn set_identity(store: &mut ParamStore, p: &PredictorWeights) {
    let d = store.get(p.fc1.0).shape()[0];
    assert_eq!(store.get(p.fc1.0).shape(), &[d, 2 * d], "identity needs a hidden width of 2d");
    let mut w1 = Tensor::zeros(&[d, 2 * d]);
    let mut w2 = Tensor::zeros(&[2 * d, d]);
    for i in 0..d {
        w1.data_mut()[i * 2 * d + i] = 1.0;
        w1.data_mut()[i * 2 * d + d + i] = -1.0;
        w2.data_mut()[i * d + i] = 1.0;
        w2.data_mut()[(d + i) * d + i] = -1.0;
    }
    *store.get_mut(p.fc1.0) = w1;
    *store.get_mut(p.fc2.0) = w2;
    store.get_mut(p.fc1.1).data_mut().fill(0.0);
    store.get_mut(p.fc2.1).data_mut().fill(0.0);
}

pub fn identity_predictor(d: usize) -> (ParamStore, PredictorWeights) {
    let mut store = ParamStore::new(Precision::F64);
    let p = PredictorWeights::init(&mut store, d, 2 * d, 0.1, &mut ChaCha8Rng::seed_from_u64(0));
    set_identity(&mut store, &p);
    (store, p)
}
