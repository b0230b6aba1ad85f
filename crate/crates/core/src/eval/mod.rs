//! Intrinsic evaluation: perplexity, fact-recall MRR, linking F1 and
//! candidate-restricted linking accuracy.

pub mod metrics;
pub mod probes;
pub mod report;

pub use metrics::{perplexity_from_nll, rank_of, strong_match_prf, Link, Prf, RankAggregation};
pub use probes::{
    el_f1, mrr_probe, perplexity, predict_links, restricted_linking_accuracy, ElPrediction, MrrConfig, MrrResult, ProbeTuple,
    RestrictedInstance, RestrictedResult, Slot,
};
pub use report::Report;
