mod common;

use std::collections::BTreeMap;
use std::fs;

use boottod_core::checkpoint::{load_checkpoint, read_manifest, save_checkpoint, MANIFEST_FILE, PARAMS_FILE, VOCAB_FILE};
use boottod_core::data::TokenizedDialogue;
use boottod_core::encoder::cls_embeddings;
use boottod_core::trainer::{dev_mlm_loss, dev_batches, init_model, train, TrainConfig};
use boottod_core::vocab::Vocab;
use boottod_core::Error;

fn trained() -> (boottod_core::objective::PretrainModel, Vocab, Vec<TokenizedDialogue>) {
    let (corpus, vocab) = common::small_corpus(40, 12);
    let dialogues = common::tokenized(&corpus, &vocab);
    let enc = common::encoder_config(vocab.len(), 2, 16);
    let cfg = TrainConfig {
        max_steps: 6,
        eval_every: 3,
        batch_size: 4,
        dev_batches: 1,
        lr: 1e-3,
        seed: 4,
        ..TrainConfig::default()
    };
    let out = train(init_model(&enc, 4).unwrap(), &dialogues[..30], &dialogues[30..], &cfg).unwrap();
    (out.model, vocab, dialogues)
}

fn save(dir: &std::path::Path, model: &boottod_core::objective::PretrainModel, vocab: &Vocab) {
    let metrics = BTreeMap::from([("dev_ppl".to_string(), 12.5)]);
    save_checkpoint(dir, model, vocab, 6, metrics, serde_json::json!({"seed": 4})).unwrap();
}

#[test]
fn round_trip_preserves_parameters_and_outputs_bitwise() {
    let (model, vocab, dialogues) = trained();
    let dir = tempfile::tempdir().unwrap();
    save(dir.path(), &model, &vocab);
    let ck = load_checkpoint(dir.path()).unwrap();

    assert_eq!(ck.manifest.step, 6);
    assert_eq!(ck.manifest.metrics["dev_ppl"], 12.5);
    assert_eq!(ck.vocab.tokens(), vocab.tokens());
    assert_eq!(ck.model.store.len(), model.store.len());
    for ((_, na, ta), (_, nb, tb)) in model.store.iter().zip(ck.model.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        assert!(ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{na}");
    }

    let seqs: Vec<Vec<u32>> = dialogues.iter().take(8).map(|d| boottod_core::data::wrap(&d.utterances)).collect();
    let before = cls_embeddings(&model.store, &model.encoder, &seqs).unwrap();
    let after = cls_embeddings(&ck.model.store, &ck.model.encoder, &seqs).unwrap();
    assert_eq!(before, after);

    let cfg = TrainConfig::default();
    let dev = dev_batches(&dialogues[30..], &cfg, vocab.len(), 96, 2, 1).unwrap();
    assert_eq!(dev_mlm_loss(&model, &dev).unwrap().to_bits(), dev_mlm_loss(&ck.model, &dev).unwrap().to_bits());

    let again = tempfile::tempdir().unwrap();
    save(again.path(), &ck.model, &ck.vocab);
    assert_eq!(fs::read(dir.path().join(PARAMS_FILE)).unwrap(), fs::read(again.path().join(PARAMS_FILE)).unwrap());
}

#[test]
fn truncated_and_corrupted_parameters_are_rejected() {
    let (model, vocab, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    save(dir.path(), &model, &vocab);
    let params = dir.path().join(PARAMS_FILE);
    let bytes = fs::read(&params).unwrap();

    fs::write(&params, &bytes[..bytes.len() - 7]).unwrap();
    match load_checkpoint(dir.path()).unwrap_err() {
        Error::Checkpoint { msg, .. } => assert!(msg.contains("bytes"), "{msg}"),
        e => panic!("unexpected error {e}"),
    }

    let mut flipped = bytes.clone();
    flipped[17] ^= 0x40;
    fs::write(&params, &flipped).unwrap();
    match load_checkpoint(dir.path()).unwrap_err() {
        Error::Checkpoint { msg, .. } => assert!(msg.contains("checksum"), "{msg}"),
        e => panic!("unexpected error {e}"),
    }

    fs::remove_file(&params).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

#[test]
fn unknown_format_version_is_a_version_error() {
    let (model, vocab, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    save(dir.path(), &model, &vocab);
    let p = dir.path().join(MANIFEST_FILE);
    let mut raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
    raw["format_version"] = serde_json::json!(7);
    fs::write(&p, raw.to_string()).unwrap();
    match read_manifest(dir.path()).unwrap_err() {
        Error::Version { found, expected } => assert_eq!((found, expected), (7, 1)),
        e => panic!("unexpected error {e}"),
    }
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Version { .. })));
}

#[test]
fn vocabulary_must_match_the_encoder() {
    let (model, vocab, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    save(dir.path(), &model, &vocab);
    let p = dir.path().join(VOCAB_FILE);
    let text = fs::read_to_string(&p).unwrap();
    let fewer: Vec<&str> = text.lines().take(vocab.len() - 2).collect();
    fs::write(&p, fewer.join("\n") + "\n").unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint { .. })));
}
