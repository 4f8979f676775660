//! Procedural task-oriented dialogue corpus.
//!
//! Each intent owns a private lexicon of pseudo-words and a scripted flow of
//! user/system templates. A dialogue picks an intent and a slot value, then
//! walks the flow; system templates carry generic dialogue-act labels. User and
//! system turns both realize the slot value, so responses are tied to their
//! history beyond the intent alone.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dialogue, DialogueLabels, Role, Turn};
use crate::error::{Error, Result};

const FUNCTION_WORDS: [&str; 30] = [
    "i", "want", "to", "the", "a", "please", "can", "you", "for", "my", "is", "it", "that", "yes",
    "no", "ok", "thanks", "what", "when", "where", "how", "would", "like", "need", "at", "on",
    "with", "and", "of", "there",
];

const ACTS: [(&str, [&str; 2]); 8] = [
    ("greet", ["welcome", "hello"]),
    ("request", ["which", "one"]),
    ("inform", ["found", "available"]),
    ("confirm", ["confirmed", "booked"]),
    ("offer", ["recommend", "try"]),
    ("select", ["either", "or"]),
    ("reqmore", ["anything", "else"]),
    ("bye", ["goodbye", "bye"]),
];

const SLOT: &str = "{slot}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_intents: usize,
    pub templates_per_intent: usize,
    pub dialogues: usize,
    pub min_pairs: usize,
    pub max_pairs: usize,
    /// Per-word probability of replacing a template word with a distractor.
    pub noise: f64,
    pub words_per_intent: usize,
    pub slot_values: usize,
    /// The last `ood_intents` intents are flagged out-of-domain.
    pub ood_intents: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_intents: 8,
            templates_per_intent: 4,
            dialogues: 500,
            min_pairs: 2,
            max_pairs: 4,
            noise: 0.1,
            words_per_intent: 24,
            slot_values: 40,
            ood_intents: 1,
            dev_fraction: 0.1,
            test_fraction: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_intents < 2 {
            return fail("num_intents must be at least 2");
        }
        if self.templates_per_intent == 0 || self.dialogues == 0 || self.words_per_intent < 4 {
            return fail("templates_per_intent, dialogues and words_per_intent (>= 4) must be positive");
        }
        if self.min_pairs == 0 || self.min_pairs > self.max_pairs {
            return fail("turn-pair range must satisfy 1 <= min_pairs <= max_pairs");
        }
        if self.slot_values == 0 {
            return fail("slot_values must be positive");
        }
        if self.ood_intents >= self.num_intents {
            return fail("ood_intents must leave at least one in-domain intent");
        }
        if !(0.0..1.0).contains(&self.noise) {
            return fail("noise must be in [0, 1)");
        }
        if self.dev_fraction < 0.0 || self.test_fraction < 0.0 || self.dev_fraction + self.test_fraction >= 1.0 {
            return fail("dev_fraction + test_fraction must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemTemplate {
    pub words: Vec<String>,
    pub acts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentTemplates {
    pub intent: String,
    pub lexicon: Vec<String>,
    pub user: Vec<Vec<String>>,
    pub system: Vec<SystemTemplate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub train_labels: Vec<DialogueLabels>,
    pub dev_labels: Vec<DialogueLabels>,
    pub test_labels: Vec<DialogueLabels>,
    pub intents: Vec<String>,
    pub ood_intents: Vec<String>,
    pub acts: Vec<String>,
    pub templates: Vec<IntentTemplates>,
}

impl SyntheticCorpus {
    pub fn all_dialogues(&self) -> impl Iterator<Item = &Dialogue> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

struct WordFactory {
    used: HashSet<String>,
}

impl WordFactory {
    fn new() -> Self {
        let mut used: HashSet<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
        for (_, words) in ACTS {
            used.extend(words.iter().map(|s| s.to_string()));
        }
        Self { used }
    }

    fn fresh<R: Rng>(&mut self, rng: &mut R) -> String {
        const CONS: &[u8] = b"bdfgklmnprstvz";
        const VOWELS: &[u8] = b"aeiou";
        loop {
            let syllables = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(CONS[rng.gen_range(0..CONS.len())] as char);
                w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn pick<'a, R: Rng>(pool: &'a [String], rng: &mut R) -> &'a str {
    &pool[rng.gen_range(0..pool.len())]
}

fn build_templates<R: Rng>(cfg: &SyntheticConfig, words: &mut WordFactory, rng: &mut R) -> Vec<IntentTemplates> {
    let functions: Vec<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
    let steps = cfg.templates_per_intent;
    (0..cfg.num_intents)
        .map(|k| {
            let lexicon: Vec<String> = (0..cfg.words_per_intent).map(|_| words.fresh(rng)).collect();
            let user = (0..steps)
                .map(|i| {
                    let mut w: Vec<String> = Vec::new();
                    w.extend((0..2).map(|_| pick(&functions, rng).to_string()));
                    w.extend((0..3).map(|_| pick(&lexicon, rng).to_string()));
                    if i == 0 || rng.gen_bool(0.5) {
                        w.push(SLOT.to_string());
                    }
                    w.shuffle(rng);
                    w
                })
                .collect();
            let system = (0..steps)
                .map(|i| {
                    let acts: Vec<&str> = if i == 0 {
                        vec![["request", "inform", "offer"][rng.gen_range(0..3)]]
                    } else if i + 1 == steps {
                        if rng.gen_bool(0.5) {
                            vec!["reqmore", "bye"]
                        } else {
                            vec!["bye"]
                        }
                    } else {
                        let pool = ["inform", "confirm", "offer", "request", "select", "reqmore"];
                        let n = rng.gen_range(1..=2);
                        let mut chosen: Vec<&str> = pool.choose_multiple(rng, n).copied().collect();
                        chosen.sort_by_key(|a| ACTS.iter().position(|(n, _)| n == a));
                        chosen
                    };
                    let mut w: Vec<String> = Vec::new();
                    for a in &acts {
                        let (_, phrase) = ACTS.iter().find(|(n, _)| n == a).expect("known act");
                        w.extend(phrase.iter().map(|s| s.to_string()));
                    }
                    let mut rest: Vec<String> = (0..2).map(|_| pick(&lexicon, rng).to_string()).collect();
                    rest.push(pick(&functions, rng).to_string());
                    if acts.iter().any(|a| matches!(*a, "inform" | "confirm" | "offer")) {
                        rest.push(SLOT.to_string());
                    }
                    rest.shuffle(rng);
                    w.extend(rest);
                    SystemTemplate {
                        words: w,
                        acts: acts.iter().map(|s| s.to_string()).collect(),
                    }
                })
                .collect();
            IntentTemplates {
                intent: format!("intent{k:02}"),
                lexicon,
                user,
                system,
            }
        })
        .collect()
}

fn realize<R: Rng>(
    template: &[String],
    slot: &str,
    lexicon: &[String],
    chatter: &[String],
    noise: f64,
    rng: &mut R,
) -> String {
    template
        .iter()
        .map(|w| {
            if w == SLOT {
                slot.to_string()
            } else if noise > 0.0 && rng.gen_bool(noise) {
                if rng.gen_bool(0.5) {
                    pick(lexicon, rng).to_string()
                } else {
                    pick(chatter, rng).to_string()
                }
            } else {
                w.clone()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates a corpus that is a pure function of `cfg` (including its seed).
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut words = WordFactory::new();
    let templates = build_templates(cfg, &mut words, &mut rng);
    let slots: Vec<String> = (0..cfg.slot_values).map(|_| words.fresh(&mut rng)).collect();
    let chatter: Vec<String> = (0..30).map(|_| words.fresh(&mut rng)).collect();

    let mut dialogues = Vec::with_capacity(cfg.dialogues);
    let mut labels = Vec::with_capacity(cfg.dialogues);
    for i in 0..cfg.dialogues {
        let tpl = &templates[rng.gen_range(0..templates.len())];
        let n = rng.gen_range(cfg.min_pairs..=cfg.max_pairs);
        let slot = pick(&slots, &mut rng).to_string();
        let mut turns = Vec::with_capacity(2 * n);
        let mut acts = Vec::with_capacity(n);
        for step in 0..n {
            let s = step % tpl.user.len();
            turns.push(Turn {
                role: Role::User,
                text: realize(&tpl.user[s], &slot, &tpl.lexicon, &chatter, cfg.noise, &mut rng),
            });
            let sys = &tpl.system[s];
            turns.push(Turn {
                role: Role::System,
                text: realize(&sys.words, &slot, &tpl.lexicon, &chatter, cfg.noise, &mut rng),
            });
            acts.push(sys.acts.clone());
        }
        let id = format!("dlg-{i:05}");
        labels.push(DialogueLabels {
            id: id.clone(),
            intent: tpl.intent.clone(),
            acts,
        });
        dialogues.push(Dialogue { id, turns });
    }

    let mut order: Vec<usize> = (0..cfg.dialogues).collect();
    order.shuffle(&mut rng);
    let n_test = (cfg.test_fraction * cfg.dialogues as f64).round() as usize;
    let n_dev = (cfg.dev_fraction * cfg.dialogues as f64).round() as usize;
    let take = |idx: &[usize]| -> (Vec<Dialogue>, Vec<DialogueLabels>) {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        (
            idx.iter().map(|&i| dialogues[i].clone()).collect(),
            idx.iter().map(|&i| labels[i].clone()).collect(),
        )
    };
    let (test, test_labels) = take(&order[..n_test]);
    let (dev, dev_labels) = take(&order[n_test..n_test + n_dev]);
    let (train, train_labels) = take(&order[n_test + n_dev..]);

    let intents: Vec<String> = templates.iter().map(|t| t.intent.clone()).collect();
    let ood_intents = intents[cfg.num_intents - cfg.ood_intents..].to_vec();
    Ok(SyntheticCorpus {
        train,
        dev,
        test,
        train_labels,
        dev_labels,
        test_labels,
        intents,
        ood_intents,
        acts: ACTS.iter().map(|(n, _)| n.to_string()).collect(),
        templates,
    })
}
