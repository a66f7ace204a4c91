//! Reranking pipelines: pointwise scoring over the top of a first-stage run,
//! and listwise sliding-window reordering.

use std::collections::HashMap;

use crate::compress::LtcConfig;
use crate::error::{Error, Result};
use crate::model::{listwise_identifier_logits, pointwise_score, ModelConfig, Parameters, K_MAX};
use crate::trec::{Candidate, RunEntry};

/// Scores one (query, document) pair at a time.
pub trait PointwiseScorer {
    fn score(&mut self, query_tokens: &[u32], doc_id: &str, doc_tokens: &[u32]) -> Result<f32>;
}

/// Scores a whole group of documents against a query, returning one logit per
/// document; higher means more relevant.
pub trait ListwiseScorer {
    fn rank_logits(
        &mut self,
        query_tokens: &[u32],
        docs: &[(String, Vec<u32>)],
    ) -> Result<Vec<f32>>;
}

/// Pointwise scorer backed by the transformer.
pub struct ModelPointwise<'a> {
    pub params: &'a Parameters<f32>,
    pub cfg: &'a ModelConfig,
    pub ltc: LtcConfig,
}

impl PointwiseScorer for ModelPointwise<'_> {
    fn score(&mut self, query_tokens: &[u32], _doc_id: &str, doc_tokens: &[u32]) -> Result<f32> {
        pointwise_score(query_tokens, doc_tokens, self.params, self.cfg, &self.ltc)
    }
}

/// Listwise scorer backed by the transformer. Documents are truncated so the
/// whole group (instruction, query, per-document markers, trigger) fits in
/// the context window.
pub struct ModelListwise<'a> {
    pub params: &'a Parameters<f32>,
    pub cfg: &'a ModelConfig,
    pub ltc: LtcConfig,
    pub instruction_tokens: Vec<u32>,
    pub max_doc_tokens: usize,
}

impl ModelListwise<'_> {
    fn doc_budget(&self, query_len: usize, k: usize) -> Result<usize> {
        let fixed = self.instruction_tokens.len() + query_len + 1;
        let per_doc = (self.cfg.max_seq.saturating_sub(fixed) / k).saturating_sub(1);
        if per_doc == 0 {
            return Err(Error::Input(format!(
                "no room for document tokens: instruction + query take {fixed} of {} positions",
                self.cfg.max_seq
            )));
        }
        Ok(per_doc.min(self.max_doc_tokens))
    }
}

impl ListwiseScorer for ModelListwise<'_> {
    fn rank_logits(
        &mut self,
        query_tokens: &[u32],
        docs: &[(String, Vec<u32>)],
    ) -> Result<Vec<f32>> {
        let budget = self.doc_budget(query_tokens.len(), docs.len().max(1))?;
        let trimmed: Vec<Vec<u32>> = docs
            .iter()
            .map(|(_, toks)| toks[..toks.len().min(budget)].to_vec())
            .collect();
        listwise_identifier_logits(
            &self.instruction_tokens,
            query_tokens,
            &trimmed,
            self.params,
            self.cfg,
            &self.ltc,
        )
    }
}

/// Split candidates into those with tokenized text and those missing from the
/// corpus; the missing ones keep first-stage order and are reported.
fn split_missing<'a>(
    query_id: &str,
    candidates: &'a [Candidate],
    docs: &HashMap<String, Vec<u32>>,
) -> (Vec<&'a Candidate>, Vec<&'a Candidate>) {
    let mut present = Vec::new();
    let mut missing = Vec::new();
    for cand in candidates {
        if docs.contains_key(&cand.doc_id) {
            present.push(cand);
        } else {
            log::warn!("query {query_id}: no text for document {}, leaving it at the tail", cand.doc_id);
            missing.push(cand);
        }
    }
    (present, missing)
}

/// Append `tail` candidates below the already-ranked block, synthesizing
/// strictly decreasing scores that stay under the block's minimum.
fn extend_with_tail(entries: &mut Vec<RunEntry>, query_id: &str, tail: &[&Candidate]) {
    let base = entries.last().map_or(0.0, |e| e.score);
    for (i, cand) in tail.iter().enumerate() {
        entries.push(RunEntry {
            query_id: query_id.to_string(),
            doc_id: cand.doc_id.clone(),
            rank: entries.len() + 1,
            score: base - 1.0 - i as f32,
        });
    }
}

/// Rerank the top `depth` candidates of one query with a pointwise scorer.
/// Candidates beyond the depth keep their first-stage order below the
/// reranked block; model-score ties break toward the better first-stage rank.
pub fn rerank_pointwise<S: PointwiseScorer>(
    query_id: &str,
    query_tokens: &[u32],
    candidates: &[Candidate],
    docs: &HashMap<String, Vec<u32>>,
    depth: usize,
    scorer: &mut S,
) -> Result<Vec<RunEntry>> {
    let (present, missing) = split_missing(query_id, candidates, docs);
    let depth = depth.min(present.len());
    let (head, beyond) = present.split_at(depth);

    let mut scored: Vec<(f32, &Candidate)> = Vec::with_capacity(head.len());
    for cand in head {
        let s = scorer.score(query_tokens, &cand.doc_id, &docs[&cand.doc_id])?;
        scored.push((s, cand));
    }
    scored.sort_by(|(sa, ca), (sb, cb)| {
        sb.partial_cmp(sa)
            .expect("scores are finite")
            .then(ca.first_stage_rank.cmp(&cb.first_stage_rank))
    });

    let mut entries: Vec<RunEntry> = scored
        .iter()
        .enumerate()
        .map(|(i, (score, cand))| RunEntry {
            query_id: query_id.to_string(),
            doc_id: cand.doc_id.clone(),
            rank: i + 1,
            score: *score,
        })
        .collect();
    // Clamp synthesized tail scores below the block even when the block's
    // minimum is positive.
    if let Some(last) = entries.last() {
        if last.score.is_nan() {
            return Err(Error::Numeric("pointwise score is NaN".into()));
        }
    }
    extend_with_tail(&mut entries, query_id, beyond);
    extend_with_tail(&mut entries, query_id, &missing);
    Ok(entries)
}

/// Rerank one query's candidates with overlapping windows walked from the
/// bottom of the list to the top, so strong documents can bubble upward
/// across window boundaries.
pub fn sliding_window_rerank<S: ListwiseScorer>(
    query_id: &str,
    query_tokens: &[u32],
    candidates: &[Candidate],
    docs: &HashMap<String, Vec<u32>>,
    window: usize,
    step: usize,
    scorer: &mut S,
) -> Result<Vec<RunEntry>> {
    if step == 0 || window <= step {
        return Err(Error::InvalidArgument(format!(
            "window ({window}) must exceed step ({step}) and step must be positive"
        )));
    }
    if window > K_MAX {
        return Err(Error::InvalidArgument(format!(
            "window ({window}) exceeds the identifier budget ({K_MAX})"
        )));
    }
    let (present, missing) = split_missing(query_id, candidates, docs);
    let mut working: Vec<&Candidate> = present;

    if !working.is_empty() {
        let mut end = working.len();
        loop {
            let start = end.saturating_sub(window);
            if end - start >= 2 {
                let block: Vec<(String, Vec<u32>)> = working[start..end]
                    .iter()
                    .map(|c| (c.doc_id.clone(), docs[&c.doc_id].clone()))
                    .collect();
                let logits = scorer.rank_logits(query_tokens, &block)?;
                if logits.len() != block.len() {
                    return Err(Error::InvalidArgument(format!(
                        "scorer returned {} logits for {} documents",
                        logits.len(),
                        block.len()
                    )));
                }
                let mut order: Vec<usize> = (0..block.len()).collect();
                order.sort_by(|&a, &b| {
                    logits[b].partial_cmp(&logits[a]).expect("logits are finite")
                });
                let reordered: Vec<&Candidate> =
                    order.iter().map(|&i| working[start + i]).collect();
                working[start..end].copy_from_slice(&reordered);
            }
            if start == 0 {
                break;
            }
            end -= step;
        }
    }

    let n = working.len();
    let mut entries: Vec<RunEntry> = working
        .iter()
        .enumerate()
        .map(|(i, cand)| RunEntry {
            query_id: query_id.to_string(),
            doc_id: cand.doc_id.clone(),
            rank: i + 1,
            score: (n - i) as f32,
        })
        .collect();
    extend_with_tail(&mut entries, query_id, &missing);
    Ok(entries)
}
