//! Downstream protocols: intent recognition, dialogue act prediction and
//! response selection, plus their metric kernels.

pub mod finetune;
pub mod metrics;

pub use finetune::{
    act_examples, finetune_dialogue_act, finetune_intent, intent_examples, response_pairs, response_pool,
    response_selection_eval, FinetuneConfig, FinetuneModel, IntentSpace, MetricsReport, ReportMeta, ResponsePair,
};
pub use metrics::{
    f1_metrics, hits_at_k, intent_metrics, multilabel_counts, rank_of, F1Scores, IntentMetrics, LabelCounts,
};
