//! Tokenized training examples shared by both rankers.

use crate::text::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleDoc {
    pub id: String,
    pub token_ids: Vec<TokenId>,
    /// Graded training target (ranked > excluded > negatives).
    pub graded: f64,
    /// 1 relevant, 0 irrelevant.
    pub binary: u8,
    pub reasoning_ids: Vec<TokenId>,
}

/// All labeled documents of one query; the unit of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryExample {
    pub query_id: String,
    pub query_ids: Vec<TokenId>,
    pub docs: Vec<ExampleDoc>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ranknet: Option<f64>,
    pub clf: Option<f64>,
    pub gen: Option<f64>,
}
