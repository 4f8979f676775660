//! Fine-tuning heads on [CLS] embeddings and the three downstream protocols.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{f1_metrics, hits_at_k, intent_metrics, multilabel_counts, rank_of};
use crate::autograd::{Tape, Var};
use crate::data::{serialize, wrap, encode_utterance, Dialogue, DialogueLabels, Upto};
use crate::encoder::{cls_embeddings, encode, EncoderWeights, TokenBatch};
use crate::error::{Error, Result};
use crate::objective::PretrainModel;
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::stream_rng;
use crate::vocab::{Vocab, CLS, SEP};

pub const OUT_LABEL: &str = "out";

const STREAM_HEAD: u64 = 11;
const STREAM_BATCH: u64 = 12;
const STREAM_DROPOUT: u64 = 13;
const STREAM_DISTRACTORS: u64 = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train only the task head.
    pub freeze_encoder: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
            freeze_encoder: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::Config("finetune.lr and finetune.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Keeps `[CLS]`, `[SEP]` and the most recent tokens when `ids` is too long.
pub fn clip_recent(ids: &[u32], max_len: usize) -> Vec<u32> {
    if ids.len() <= max_len {
        return ids.to_vec();
    }
    let body = &ids[1..ids.len() - 1];
    let keep = max_len.saturating_sub(2);
    let mut out = vec![CLS];
    out.extend_from_slice(&body[body.len() - keep..]);
    out.push(SEP);
    out
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

/// Copy of a pre-trained model extended with a task head.
#[derive(Clone, Debug)]
pub struct FinetuneModel {
    pub store: ParamStore,
    pub encoder: EncoderWeights,
    pub head: Option<ClassifierHead>,
}

impl FinetuneModel {
    pub fn new(base: &PretrainModel, classes: Option<usize>, seed: u64) -> Self {
        let mut store = base.store.clone();
        let d = base.config().hidden_dim;
        let head = classes.map(|n| {
            let mut rng = stream_rng(seed, STREAM_HEAD);
            let std = base.config().init_std;
            ClassifierHead {
                weight: store.add("head.weight", Tensor::randn(&[d, n], std, &mut rng)),
                bias: store.add("head.bias", Tensor::zeros(&[n])),
                classes: n,
            }
        });
        Self {
            store,
            encoder: base.encoder.clone(),
            head,
        }
    }

    fn cls_var<R: Rng + ?Sized>(&self, tape: &mut Tape, seqs: &[Vec<u32>], rng: &mut R) -> Result<Var> {
        let batch = TokenBatch::from_sequences(seqs);
        let states = encode(tape, &self.store, &self.encoder, &batch, true, rng)?;
        Ok(tape.gather_rows(states.top(), &states.cls_rows())?)
    }

    fn head_logits(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let head = self.head.as_ref().expect("classifier head");
        let w = tape.param(&self.store, head.weight);
        let b = tape.param(&self.store, head.bias);
        Ok(tape.linear(h, w, Some(b))?)
    }

    /// Eval-mode logits for each input.
    pub fn logits(&self, inputs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let head = self.head.as_ref().expect("classifier head");
        let emb = cls_embeddings(&self.store, &self.encoder, inputs)?;
        let w = self.store.get(head.weight);
        let b = self.store.get(head.bias).data();
        let n = head.classes;
        Ok(emb
            .iter()
            .map(|h| {
                let mut out = b.to_vec();
                for (i, hi) in h.iter().enumerate() {
                    let row = &w.data()[i * n..(i + 1) * n];
                    for (o, wv) in out.iter_mut().zip(row) {
                        *o += hi * wv;
                    }
                }
                out
            })
            .collect())
    }

    pub fn embeddings(&self, inputs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        cls_embeddings(&self.store, &self.encoder, inputs)
    }

    fn trainable(&self, grads: Vec<(ParamId, Tensor)>, freeze: bool) -> Vec<(ParamId, Tensor)> {
        if !freeze {
            return grads;
        }
        let head: Vec<ParamId> = self.head.iter().flat_map(|h| [h.weight, h.bias]).collect();
        grads.into_iter().filter(|(id, _)| head.contains(id)).collect()
    }
}

/// Epoch-shuffled mini-batch index stream.
struct Batches<R> {
    order: Vec<usize>,
    cursor: usize,
    n: usize,
    rng: R,
}

impl<R: Rng> Batches<R> {
    fn new(n: usize, rng: R) -> Self {
        Self {
            order: Vec::new(),
            cursor: 0,
            n,
            rng,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + size).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

pub enum Targets<'a> {
    /// One class index per input (softmax cross-entropy).
    Single(&'a [usize]),
    /// Multi-hot targets per input (per-label binary cross-entropy).
    Multi(&'a [Vec<f64>]),
}

/// Fine-tunes encoder and head on `inputs` for `cfg.steps` steps.
pub fn train_classifier(model: &mut FinetuneModel, inputs: &[Vec<u32>], targets: Targets<'_>, cfg: &FinetuneConfig) -> Result<()> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::Data("no training examples for fine-tuning".into()));
    }
    let mut batches = Batches::new(inputs.len(), stream_rng(cfg.seed, STREAM_BATCH));
    let mut dropout = stream_rng(cfg.seed, STREAM_DROPOUT);
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..cfg.steps {
        let idx = batches.next(cfg.batch_size);
        let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| inputs[i].clone()).collect();
        let mut tape = Tape::new();
        let h = model.cls_var(&mut tape, &seqs, &mut dropout)?;
        let logits = model.head_logits(&mut tape, h)?;
        let loss = match &targets {
            Targets::Single(t) => {
                let t: Vec<usize> = idx.iter().map(|&i| t[i]).collect();
                tape.softmax_cross_entropy(logits, &t)?
            }
            Targets::Multi(t) => {
                let flat: Vec<f64> = idx.iter().flat_map(|&i| t[i].iter().copied()).collect();
                tape.bce_with_logits(logits, &flat)?
            }
        };
        let grads = tape.backward(loss)?;
        let grads = model.trainable(tape.param_grads(&grads), cfg.freeze_encoder);
        adam.step(&mut model.store, &grads, cfg.lr)?;
    }
    Ok(())
}

/// Serialized metrics of one downstream run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    /// Metrics that are undefined for this evaluation set.
    pub absent: Vec<String>,
    pub meta: ReportMeta,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub checkpoint: Option<String>,
    pub init: String,
    pub finetune_steps: usize,
    pub train_examples: usize,
    pub test_examples: usize,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,metric,value\n");
        for (k, v) in &self.metrics {
            s.push_str(&format!("{},{},{}\n", self.task, k, v));
        }
        for k in &self.absent {
            s.push_str(&format!("{},{},\n", self.task, k));
        }
        s
    }
}

/// Intent label space: in-domain intents followed by the single "out" class.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentSpace {
    pub labels: Vec<String>,
    ood: Vec<String>,
}

impl IntentSpace {
    pub fn new(all_intents: &[String], ood: &[String]) -> Self {
        let mut labels: Vec<String> = all_intents.iter().filter(|i| !ood.contains(i)).cloned().collect();
        labels.sort();
        labels.dedup();
        labels.push(OUT_LABEL.to_string());
        Self {
            labels,
            ood: ood.to_vec(),
        }
    }

    pub fn out_class(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn class_of(&self, intent: &str) -> Result<usize> {
        if self.ood.iter().any(|o| o == intent) {
            return Ok(self.out_class());
        }
        self.labels[..self.out_class()]
            .iter()
            .position(|l| l == intent)
            .ok_or_else(|| Error::Data(format!("intent {intent:?} is outside the declared label space")))
    }
}

fn labels_by_id(labels: &[DialogueLabels]) -> HashMap<&str, &DialogueLabels> {
    labels.iter().map(|l| (l.id.as_str(), l)).collect()
}

fn label_for<'a>(map: &HashMap<&str, &'a DialogueLabels>, id: &str) -> Result<&'a DialogueLabels> {
    map.get(id)
        .copied()
        .ok_or_else(|| Error::Data(format!("no labels for dialogue {id:?}")))
}

/// Input: `[CLS] [USR] U_1 [SEP]`; target: intent class.
pub fn intent_examples(
    dialogues: &[Dialogue],
    labels: &[DialogueLabels],
    vocab: &Vocab,
    space: &IntentSpace,
    max_len: usize,
) -> Result<(Vec<Vec<u32>>, Vec<usize>)> {
    let map = labels_by_id(labels);
    let mut xs = Vec::with_capacity(dialogues.len());
    let mut ys = Vec::with_capacity(dialogues.len());
    for d in dialogues {
        let l = label_for(&map, &d.id)?;
        xs.push(clip_recent(&serialize(d, Upto::Context(1), vocab), max_len));
        ys.push(space.class_of(&l.intent)?);
    }
    Ok((xs, ys))
}

pub fn finetune_intent(
    base: &PretrainModel,
    train: (&[Vec<u32>], &[usize]),
    test: (&[Vec<u32>], &[usize]),
    space: &IntentSpace,
    cfg: &FinetuneConfig,
) -> Result<MetricsReport> {
    let mut model = FinetuneModel::new(base, Some(space.labels.len()), cfg.seed);
    train_classifier(&mut model, train.0, Targets::Single(train.1), cfg)?;
    let pred: Vec<usize> = model.logits(test.0)?.iter().map(|l| argmax(l)).collect();
    let m = intent_metrics(&pred, test.1, space.out_class());
    let mut metrics = BTreeMap::new();
    let mut absent = Vec::new();
    for (name, v) in [
        ("acc_all", Some(m.acc_all)),
        ("acc_in", m.acc_in),
        ("acc_out", m.acc_out),
        ("recall_out", m.recall_out),
    ] {
        match v {
            Some(v) => {
                metrics.insert(name.to_string(), v);
            }
            None => absent.push(name.to_string()),
        }
    }
    Ok(report("intent", metrics, absent, cfg, train.0.len(), test.0.len()))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn report(
    task: &str,
    metrics: BTreeMap<String, f64>,
    absent: Vec<String>,
    cfg: &FinetuneConfig,
    n_train: usize,
    n_test: usize,
) -> MetricsReport {
    MetricsReport {
        task: task.to_string(),
        metrics,
        absent,
        meta: ReportMeta {
            seed: cfg.seed,
            finetune_steps: cfg.steps,
            train_examples: n_train,
            test_examples: n_test,
            ..ReportMeta::default()
        },
    }
}

/// Input: history `U_1 … U_t`; target: multi-hot acts of `S_t`.
pub fn act_examples(
    dialogues: &[Dialogue],
    labels: &[DialogueLabels],
    vocab: &Vocab,
    acts: &[String],
    max_len: usize,
) -> Result<(Vec<Vec<u32>>, Vec<Vec<f64>>)> {
    let map = labels_by_id(labels);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for d in dialogues {
        let l = label_for(&map, &d.id)?;
        if l.acts.len() != d.num_pairs() {
            return Err(Error::Data(format!(
                "dialogue {:?} has {} system turns but {} act label sets",
                d.id,
                d.num_pairs(),
                l.acts.len()
            )));
        }
        for (t, turn_acts) in l.acts.iter().enumerate() {
            let mut y = vec![0.0; acts.len()];
            for a in turn_acts {
                let k = acts
                    .iter()
                    .position(|x| x == a)
                    .ok_or_else(|| Error::Data(format!("unknown act {a:?} in dialogue {:?}", d.id)))?;
                y[k] = 1.0;
            }
            xs.push(clip_recent(&serialize(d, Upto::Context(t + 1), vocab), max_len));
            ys.push(y);
        }
    }
    Ok((xs, ys))
}

pub fn finetune_dialogue_act(
    base: &PretrainModel,
    train: (&[Vec<u32>], &[Vec<f64>]),
    test: (&[Vec<u32>], &[Vec<f64>]),
    num_acts: usize,
    cfg: &FinetuneConfig,
) -> Result<MetricsReport> {
    let mut model = FinetuneModel::new(base, Some(num_acts), cfg.seed);
    train_classifier(&mut model, train.0, Targets::Multi(train.1), cfg)?;
    // sigmoid(z) > 0.5 exactly when z > 0
    let pred: Vec<Vec<bool>> = model
        .logits(test.0)?
        .iter()
        .map(|l| l.iter().map(|&z| z > 0.0).collect())
        .collect();
    let gold: Vec<Vec<bool>> = test.1.iter().map(|y| y.iter().map(|&v| v > 0.5).collect()).collect();
    let f = f1_metrics(&multilabel_counts(&pred, &gold, num_acts));
    let metrics = BTreeMap::from([("micro_f1".to_string(), f.micro), ("macro_f1".to_string(), f.macro_)]);
    Ok(report("act", metrics, Vec::new(), cfg, train.0.len(), test.0.len()))
}

/// One (history, true response) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponsePair {
    pub history: Vec<u32>,
    pub response: Vec<u32>,
    pub response_text: String,
}

/// Every `(U_1 … U_t, S_t)` pair of every dialogue.
pub fn response_pairs(dialogues: &[Dialogue], vocab: &Vocab, max_len: usize) -> Vec<ResponsePair> {
    let mut out = Vec::new();
    for d in dialogues {
        for t in 1..=d.num_pairs() {
            let sys = &d.turns[2 * t - 1];
            out.push(ResponsePair {
                history: clip_recent(&serialize(d, Upto::Context(t), vocab), max_len),
                response: clip_recent(&wrap(&[encode_utterance(sys, vocab)]), max_len),
                response_text: sys.text.clone(),
            });
        }
    }
    out
}

/// Distractor pool: every system response of `dialogues`.
pub fn response_pool(dialogues: &[Dialogue], vocab: &Vocab, max_len: usize) -> Vec<(String, Vec<u32>)> {
    response_pairs(dialogues, vocab, max_len)
        .into_iter()
        .map(|p| (p.response_text, p.response))
        .collect()
}

/// Dual-encoder fine-tuning with in-batch negatives.
pub fn train_dual_encoder(model: &mut FinetuneModel, pairs: &[ResponsePair], cfg: &FinetuneConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.freeze_encoder || cfg.steps == 0 {
        return Ok(());
    }
    if pairs.len() < 2 {
        return Err(Error::Data("in-batch fine-tuning needs at least two pairs".into()));
    }
    let mut batches = Batches::new(pairs.len(), stream_rng(cfg.seed, STREAM_BATCH));
    let mut dropout = stream_rng(cfg.seed, STREAM_DROPOUT);
    let mut adam = Adam::new(AdamConfig::default());
    let mut step = 0;
    while step < cfg.steps {
        let idx = batches.next(cfg.batch_size);
        if idx.len() < 2 {
            continue;
        }
        let hs: Vec<Vec<u32>> = idx.iter().map(|&i| pairs[i].history.clone()).collect();
        let rs: Vec<Vec<u32>> = idx.iter().map(|&i| pairs[i].response.clone()).collect();
        let mut tape = Tape::new();
        let h = model.cls_var(&mut tape, &hs, &mut dropout)?;
        let r = model.cls_var(&mut tape, &rs, &mut dropout)?;
        let rt = tape.transpose(r)?;
        let scores = tape.matmul(h, rt)?;
        let targets: Vec<usize> = (0..idx.len()).collect();
        let loss = tape.softmax_cross_entropy(scores, &targets)?;
        let grads = tape.backward(loss)?;
        adam.step(&mut model.store, &tape.param_grads(&grads), cfg.lr)?;
        step += 1;
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ranks of the true response among `pool_size - 1` distinct distractors.
/// The truth sits at a random slot; ties favour the lower slot.
pub fn response_ranks(
    model: &FinetuneModel,
    pairs: &[ResponsePair],
    pool: &[(String, Vec<u32>)],
    pool_size: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if pool_size < 2 {
        return Err(Error::Config("pool_size must be at least 2".into()));
    }
    let hist: Vec<Vec<u32>> = pairs.iter().map(|p| p.history.clone()).collect();
    let truth: Vec<Vec<u32>> = pairs.iter().map(|p| p.response.clone()).collect();
    let pool_ids: Vec<Vec<u32>> = pool.iter().map(|p| p.1.clone()).collect();
    let h = model.embeddings(&hist)?;
    let t = model.embeddings(&truth)?;
    let pe = model.embeddings(&pool_ids)?;
    let mut rng = stream_rng(seed, STREAM_DISTRACTORS);
    let mut ranks = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let eligible: Vec<usize> = (0..pool.len()).filter(|&j| pool[j].0 != p.response_text).collect();
        if eligible.len() < pool_size - 1 {
            return Err(Error::Data(format!(
                "response pool too small: {} distractors available, {} needed",
                eligible.len(),
                pool_size - 1
            )));
        }
        let mut scores: Vec<f64> = sample(&mut rng, eligible.len(), pool_size - 1)
            .into_iter()
            .map(|k| dot(&h[i], &pe[eligible[k]]))
            .collect();
        let slot = rng.gen_range(0..pool_size);
        scores.insert(slot, dot(&h[i], &t[i]));
        ranks.push(rank_of(&scores, slot));
    }
    Ok(ranks)
}

pub fn response_selection_eval(
    base: &PretrainModel,
    train: &[ResponsePair],
    test: &[ResponsePair],
    pool: &[(String, Vec<u32>)],
    pool_size: usize,
    ks: &[usize],
    cfg: &FinetuneConfig,
) -> Result<MetricsReport> {
    let mut model = FinetuneModel::new(base, None, cfg.seed);
    train_dual_encoder(&mut model, train, cfg)?;
    let ranks = response_ranks(&model, test, pool, pool_size, cfg.seed)?;
    let metrics = ks
        .iter()
        .map(|&k| (format!("{k}-to-{pool_size}"), hits_at_k(&ranks, k)))
        .collect();
    Ok(report("response-selection", metrics, Vec::new(), cfg, train.len(), test.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_keeps_recent_tokens() {
        let ids = vec![CLS, 10, 11, 12, 13, SEP];
        assert_eq!(clip_recent(&ids, 4), vec![CLS, 12, 13, SEP]);
        assert_eq!(clip_recent(&ids, 10), ids);
    }

    #[test]
    fn intent_space_maps_ood_to_out() {
        let all: Vec<String> = ["b", "a", "z"].iter().map(|s| s.to_string()).collect();
        let s = IntentSpace::new(&all, &["z".to_string()]);
        assert_eq!(s.labels, vec!["a", "b", "out"]);
        assert_eq!(s.class_of("z").unwrap(), 2);
        assert_eq!(s.class_of("b").unwrap(), 1);
        assert!(s.class_of("q").is_err());
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }

    #[test]
    fn csv_lists_absent_metrics_empty() {
        let r = MetricsReport {
            task: "intent".into(),
            metrics: BTreeMap::from([("acc_all".to_string(), 0.5)]),
            absent: vec!["acc_out".into()],
            meta: ReportMeta::default(),
        };
        assert_eq!(r.to_csv(), "task,metric,value\nintent,acc_all,0.5\nintent,acc_out,\n");
    }
}
