mod common;

use boottod_core::data::TokenizedDialogue;
use boottod_core::trainer::{init_model, train, LogRecord, TrainConfig, TrainOutcome};

fn run(dialogues: &[TokenizedDialogue], vocab_size: usize, seed: u64) -> TrainOutcome {
    let enc = common::encoder_config(vocab_size, 2, 16);
    let cfg = TrainConfig {
        max_steps: 12,
        eval_every: 4,
        batch_size: 6,
        dev_batches: 2,
        lr: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    train(init_model(&enc, seed).unwrap(), &dialogues[..40], &dialogues[40..], &cfg).unwrap()
}

fn log_text(log: &[LogRecord]) -> String {
    log.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect()
}

fn param_bits(o: &TrainOutcome) -> Vec<u64> {
    o.model.store.iter().flat_map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn identical_seed_gives_identical_log_and_parameters() {
    let (corpus, vocab) = common::small_corpus(50, 2);
    let dialogues = common::tokenized(&corpus, &vocab);
    let a = run(&dialogues, vocab.len(), 9);
    let b = run(&dialogues, vocab.len(), 9);
    assert_eq!(log_text(&a.log), log_text(&b.log));
    assert_eq!(param_bits(&a), param_bits(&b));
    assert_eq!(a.best_dev_ppl.to_bits(), b.best_dev_ppl.to_bits());

    let c = run(&dialogues, vocab.len(), 10);
    assert_ne!(log_text(&a.log), log_text(&c.log));
}

#[test]
fn log_has_an_initial_eval_and_one_record_per_step() {
    let (corpus, vocab) = common::small_corpus(50, 2);
    let dialogues = common::tokenized(&corpus, &vocab);
    let o = run(&dialogues, vocab.len(), 1);
    assert!(matches!(o.log[0], LogRecord::Eval { step: 0, .. }));
    let steps: Vec<usize> = o
        .log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step { step, .. } => Some(*step),
            _ => None,
        })
        .collect();
    assert_eq!(steps, (1..=o.steps_run).collect::<Vec<_>>());
    let evals: Vec<usize> = o
        .log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Eval { step, .. } => Some(*step),
            _ => None,
        })
        .collect();
    assert_eq!(evals, vec![0, 4, 8, 12]);
}
