//! Ranking evaluation: nDCG@10 with exponential gains, per-query reports,
//! and a paired two-sided t-test for comparing two runs.

use std::collections::HashMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::trec::Candidate;

/// Rank cutoff for the quality metric.
pub const NDCG_CUTOFF: usize = 10;

fn gain(grade: i64) -> f64 {
    if grade > 0 {
        (2.0f64).powi(grade as i32) - 1.0
    } else {
        0.0
    }
}

fn discount(position: usize) -> f64 {
    // 1-based rank i contributes 1 / log2(i + 1).
    ((position + 2) as f64).log2()
}

/// nDCG at rank 10 for one query. Graded judgments use exponential gain
/// `2^g - 1`; unjudged documents count as grade 0. A query with no relevant
/// documents evaluates to 0.
pub fn ndcg_at_10<S: AsRef<str>>(ranked: &[S], judgments: &HashMap<String, i64>) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(NDCG_CUTOFF)
        .enumerate()
        .map(|(i, d)| gain(*judgments.get(d.as_ref()).unwrap_or(&0)) / discount(i))
        .sum();
    let mut grades: Vec<i64> = judgments.values().copied().filter(|&g| g > 0).collect();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = grades
        .iter()
        .take(NDCG_CUTOFF)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i))
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// One query's metric value. `judged` marks whether the query had at least
/// one relevant document and therefore contributes to the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryMetric {
    pub query_id: String,
    pub value: f64,
    pub judged: bool,
}

/// Per-query metric values plus their mean over judged queries.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_query: Vec<QueryMetric>,
    pub mean: f64,
    pub judged_queries: usize,
}

/// Evaluate a loaded run (queries in order, candidates rank-sorted) against
/// qrels. Queries without any relevant document are listed with value 0 but
/// excluded from the mean.
pub fn evaluate_run(
    run: &[(String, Vec<Candidate>)],
    qrels: &HashMap<String, HashMap<String, i64>>,
) -> MetricReport {
    let mut per_query = Vec::with_capacity(run.len());
    let mut sum = 0.0;
    let mut judged_queries = 0;
    for (qid, cands) in run {
        let ranked: Vec<&str> = cands.iter().map(|c| c.doc_id.as_str()).collect();
        let empty = HashMap::new();
        let judgments = qrels.get(qid).unwrap_or(&empty);
        let judged = judgments.values().any(|&g| g > 0);
        let value = if judged { ndcg_at_10(&ranked, judgments) } else { 0.0 };
        if judged {
            sum += value;
            judged_queries += 1;
        }
        per_query.push(QueryMetric { query_id: qid.clone(), value, judged });
    }
    let mean = if judged_queries == 0 { 0.0 } else { sum / judged_queries as f64 };
    MetricReport { per_query, mean, judged_queries }
}

/// Write the report as TSV: one `query_id<TAB>value` line per query and a
/// final `all<TAB>mean` line.
pub fn write_report<W: Write>(report: &MetricReport, mut w: W) -> std::io::Result<()> {
    for q in &report.per_query {
        writeln!(w, "{}\t{:.4}", q.query_id, q.value)?;
    }
    writeln!(w, "all\t{:.4}", report.mean)
}

/// Result of a paired two-sided t-test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Paired two-sided t-test on per-query deltas. With zero variance the test
/// degenerates: p = 1 when the deltas are all zero, otherwise p = 0.
pub fn paired_t_test(deltas: &[f64]) -> Result<TTest> {
    let n = deltas.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "paired t-test needs at least 2 deltas, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = deltas.iter().sum::<f64>() / nf;
    let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (nf - 1.0);
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, df }
        } else {
            TTest { t: mean.signum() * f64::INFINITY, p: 0.0, df }
        });
    }
    let t = mean / (var.sqrt() / nf.sqrt());
    let dff = df as f64;
    let x = dff / (dff + t * t);
    let p = regularized_incomplete_beta(dff / 2.0, 0.5, x)?;
    Ok(TTest { t, p, df })
}

/// Per-query deltas (`a - b`) over queries judged in both reports, in `a`'s
/// order.
pub fn paired_deltas(a: &MetricReport, b: &MetricReport) -> Vec<f64> {
    let b_values: HashMap<&str, f64> = b
        .per_query
        .iter()
        .filter(|q| q.judged)
        .map(|q| (q.query_id.as_str(), q.value))
        .collect();
    a.per_query
        .iter()
        .filter(|q| q.judged)
        .filter_map(|q| b_values.get(q.query_id.as_str()).map(|bv| q.value - bv))
        .collect()
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function (Lanczos approximation, g = 7).
fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = LANCZOS[0];
        for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + LANCZOS_G + 0.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

/// Absolute convergence tolerance for the continued fraction.
const BETA_TOL: f64 = 1e-10;
const BETA_MAX_ITER: usize = 400;

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> Result<f64> {
    let tiny = 1e-30;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=BETA_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + even * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + even / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let odd = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + odd * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + odd / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < BETA_TOL {
            return Ok(h);
        }
    }
    Err(Error::Numeric(
        "incomplete beta continued fraction did not converge".into(),
    ))
}

/// Regularized incomplete beta function I_x(a, b).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if a <= 0.0 || b <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "incomplete beta parameters must be positive, got a={a}, b={b}"
        )));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidArgument(format!(
            "incomplete beta argument must be in [0, 1], got {x}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_continued_fraction(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_continued_fraction(b, a, 1.0 - x)? / b)
    }
}
