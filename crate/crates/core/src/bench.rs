//! Efficiency accounting: an analytical attention-cost model, wall-clock QPS
//! measurement, and the (rate × target-layer) sweep grid behind the heatmaps.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::compress::{compressed_length, LtcConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, paired_deltas, paired_t_test, MetricReport};
use crate::model::{ModelConfig, Parameters};
use crate::rank::{rerank_pointwise, ModelPointwise};
use crate::trec::Candidate;

/// Analytical attention cost split: score + mix terms only, which scale with
/// the square of the sequence length per layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub baseline_cost: f64,
    pub ltc_cost: f64,
    pub speedup_ratio: f64,
}

/// Quadratic-attention cost of a full forward at length `n` versus one that
/// compresses to `max(1, floor(n * rate))` positions from `target_layer` on.
pub fn attention_cost_model(
    num_layers: usize,
    n: usize,
    target_layer: usize,
    rate: f64,
) -> Result<CostModel> {
    if num_layers == 0 || n == 0 {
        return Err(Error::InvalidArgument(
            "cost model needs at least one layer and one position".into(),
        ));
    }
    if target_layer < 1 || target_layer > num_layers {
        return Err(Error::InvalidArgument(format!(
            "target layer {target_layer} outside 1..={num_layers}"
        )));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rate must be in (0, 1], got {rate}"
        )));
    }
    let n2 = (n * n) as f64;
    let np = compressed_length(n, rate);
    let np2 = (np * np) as f64;
    let baseline_cost = num_layers as f64 * n2;
    let ltc_cost =
        (target_layer - 1) as f64 * n2 + (num_layers - target_layer + 1) as f64 * np2;
    Ok(CostModel {
        baseline_cost,
        ltc_cost,
        speedup_ratio: baseline_cost / ltc_cost,
    })
}

/// Companion model for the per-layer terms that are linear in sequence
/// length (projections, MLP); compression helps these far less, which is why
/// measured throughput gains sit below the attention-only prediction.
pub fn linear_cost_model(
    num_layers: usize,
    n: usize,
    target_layer: usize,
    rate: f64,
) -> Result<CostModel> {
    // Reuse the same validation; only the exponent differs.
    attention_cost_model(num_layers, n, target_layer, rate)?;
    let np = compressed_length(n, rate);
    let baseline_cost = (num_layers * n) as f64;
    let ltc_cost = ((target_layer - 1) * n + (num_layers - target_layer + 1) * np) as f64;
    Ok(CostModel {
        baseline_cost,
        ltc_cost,
        speedup_ratio: baseline_cost / ltc_cost,
    })
}

/// One query's reranking workload.
#[derive(Debug, Clone)]
pub struct WorkItem {
    pub query_id: String,
    pub query_tokens: Vec<u32>,
    pub candidates: Vec<Candidate>,
}

/// Wall-clock throughput of pointwise reranking, queries per second.
/// `warmup` full passes are discarded, then each of `repeats` passes is timed
/// over the whole workload; the median per-pass QPS is returned.
#[allow(clippy::too_many_arguments)]
pub fn measure_qps(
    items: &[WorkItem],
    docs: &HashMap<String, Vec<u32>>,
    params: &Parameters<f32>,
    cfg: &ModelConfig,
    ltc: &LtcConfig,
    depth: usize,
    warmup: usize,
    repeats: usize,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("QPS workload is empty".into()));
    }
    if repeats < 1 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let pass = || -> Result<()> {
        let mut scorer = ModelPointwise { params, cfg, ltc: *ltc };
        for item in items {
            rerank_pointwise(
                &item.query_id,
                &item.query_tokens,
                &item.candidates,
                docs,
                depth,
                &mut scorer,
            )?;
        }
        Ok(())
    };
    for _ in 0..warmup {
        pass()?;
    }
    let mut rates = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        pass()?;
        let secs = start.elapsed().as_secs_f64();
        if secs <= 0.0 {
            return Err(Error::Numeric(
                "timed pass finished below clock resolution".into(),
            ));
        }
        rates.push(items.len() as f64 / secs);
    }
    rates.sort_by(|a, b| a.partial_cmp(b).expect("QPS values are finite"));
    let mid = rates.len() / 2;
    Ok(if rates.len() % 2 == 1 {
        rates[mid]
    } else {
        0.5 * (rates[mid - 1] + rates[mid])
    })
}

/// One cell of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub target_layer: usize,
    pub rate: f64,
    pub ndcg_at_10: f64,
    pub p_value: f64,
    pub qps: f64,
    pub predicted_attn_ratio: f64,
}

/// Evaluation data shared by every sweep cell.
pub struct SweepData<'a> {
    pub run: &'a [(String, Vec<Candidate>)],
    pub query_tokens: &'a HashMap<String, Vec<u32>>,
    pub docs: &'a HashMap<String, Vec<u32>>,
    pub qrels: &'a HashMap<String, HashMap<String, i64>>,
}

/// Knobs for the sweep that are not part of the grid itself.
#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub depth: usize,
    pub warmup: usize,
    pub repeats: usize,
    /// Sequence length fed to the analytical cost model; defaults to the
    /// model's context window.
    pub predicted_n: Option<usize>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings { depth: 100, warmup: 1, repeats: 3, predicted_n: None }
    }
}

fn cell_context(target_layer: usize, rate: f64, err: Error) -> Error {
    match err {
        Error::InvalidArgument(m) => {
            Error::InvalidArgument(format!("cell (l*={target_layer}, r={rate}): {m}"))
        }
        Error::Numeric(m) => Error::Numeric(format!("cell (l*={target_layer}, r={rate}): {m}")),
        other => other,
    }
}

fn work_items(data: &SweepData) -> Result<Vec<WorkItem>> {
    data.run
        .iter()
        .map(|(qid, cands)| {
            let tokens = data.query_tokens.get(qid).ok_or_else(|| {
                Error::InvalidArgument(format!("no query tokens for {qid}"))
            })?;
            Ok(WorkItem {
                query_id: qid.clone(),
                query_tokens: tokens.clone(),
                candidates: cands.clone(),
            })
        })
        .collect()
}

fn rerank_report(
    data: &SweepData,
    params: &Parameters<f32>,
    cfg: &ModelConfig,
    ltc: &LtcConfig,
    depth: usize,
) -> Result<MetricReport> {
    let mut entries = Vec::new();
    for (qid, cands) in data.run {
        let tokens = data
            .query_tokens
            .get(qid)
            .ok_or_else(|| Error::InvalidArgument(format!("no query tokens for {qid}")))?;
        let mut scorer = ModelPointwise { params, cfg, ltc: *ltc };
        entries.push((
            qid.clone(),
            rerank_pointwise(qid, tokens, cands, data.docs, depth, &mut scorer)?,
        ));
    }
    let reranked: Vec<(String, Vec<Candidate>)> = entries
        .into_iter()
        .map(|(qid, es)| {
            let cands = es
                .into_iter()
                .map(|e| Candidate {
                    doc_id: e.doc_id,
                    first_stage_rank: e.rank,
                    first_stage_score: e.score,
                })
                .collect();
            (qid, cands)
        })
        .collect();
    Ok(evaluate_run(&reranked, data.qrels))
}

/// Run the full (rate × target-layer) grid: rerank, score, test against the
/// rate-1.0 baseline, time, and predict. Rows come out layer-major,
/// rate-minor, and are also written to `out_path` as CSV. Quality evaluation
/// runs cells concurrently; QPS timing runs strictly one cell at a time.
pub fn sweep_grid(
    rates: &[f64],
    layers: &[usize],
    data: &SweepData,
    params: &Parameters<f32>,
    cfg: &ModelConfig,
    settings: &SweepSettings,
    out_path: &Path,
) -> Result<Vec<SweepCell>> {
    if rates.is_empty() || layers.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    if !rates.contains(&1.0) {
        return Err(Error::InvalidArgument(
            "rates must include the 1.0 baseline column".into(),
        ));
    }
    for &l in layers {
        if l < 1 || l > cfg.num_layers {
            return Err(Error::InvalidArgument(format!(
                "target layer {l} outside 1..={}",
                cfg.num_layers
            )));
        }
    }
    let baseline = rerank_report(data, params, cfg, &LtcConfig::Disabled, settings.depth)?;
    let predicted_n = settings.predicted_n.unwrap_or(cfg.max_seq);

    let grid: Vec<(usize, f64)> = layers
        .iter()
        .flat_map(|&l| rates.iter().map(move |&r| (l, r)))
        .collect();

    // Quality phase: independent cells, safe to run concurrently.
    let quality: Vec<Result<(f64, f64, f64)>> = grid
        .par_iter()
        .map(|&(layer, rate)| {
            let ltc = LtcConfig::enabled(layer, rate).map_err(|e| cell_context(layer, rate, e))?;
            ltc.validate_for(cfg.num_layers)
                .map_err(|e| cell_context(layer, rate, e))?;
            let report = rerank_report(data, params, cfg, &ltc, settings.depth)
                .map_err(|e| cell_context(layer, rate, e))?;
            let deltas = paired_deltas(&report, &baseline);
            let p = paired_t_test(&deltas)
                .map_err(|e| cell_context(layer, rate, e))?
                .p;
            let ratio = attention_cost_model(cfg.num_layers, predicted_n, layer, rate)
                .map_err(|e| cell_context(layer, rate, e))?
                .speedup_ratio;
            Ok((report.mean, p, ratio))
        })
        .collect();

    // Timing phase: one cell at a time, nothing else running.
    let items = work_items(data)?;
    let mut cells = Vec::with_capacity(grid.len());
    for (&(layer, rate), quality) in grid.iter().zip(quality) {
        let (ndcg, p_value, ratio) = quality?;
        let ltc = LtcConfig::enabled(layer, rate)?;
        let qps = measure_qps(
            &items,
            data.docs,
            params,
            cfg,
            &ltc,
            settings.depth,
            settings.warmup,
            settings.repeats,
        )
        .map_err(|e| cell_context(layer, rate, e))?;
        cells.push(SweepCell {
            target_layer: layer,
            rate,
            ndcg_at_10: ndcg,
            p_value,
            qps,
            predicted_attn_ratio: ratio,
        });
    }

    write_sweep_csv(&cells, out_path)?;
    Ok(cells)
}

/// CSV emission for the sweep table.
pub fn write_sweep_csv(cells: &[SweepCell], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "target_layer,rate,ndcg_at_10,p_value,qps,predicted_attn_ratio")
        .map_err(|e| Error::io(path, e))?;
    for c in cells {
        writeln!(
            w,
            "{},{},{},{},{:.3},{:.6}",
            c.target_layer, c.rate, c.ndcg_at_10, c.p_value, c.qps, c.predicted_attn_ratio
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
