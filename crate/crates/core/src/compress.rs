//! Token compression: adaptive average pooling of hidden states at a chosen
//! layer, rebuilding of positions and causal masks, and the document-masked
//! variant that pools each document span independently so listwise prompts
//! never blend tokens across documents.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

/// Where and how much to compress. `target_layer` is 1-based: layers
/// `1..target_layer` see the full sequence, layers `target_layer..=L` the
/// compressed one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LtcConfig {
    Disabled,
    Enabled { target_layer: usize, rate: f64 },
}

impl LtcConfig {
    /// Validated constructor for the enabled variant.
    pub fn enabled(target_layer: usize, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Config(format!(
                "compression rate must lie in (0, 1], got {rate}"
            )));
        }
        if target_layer == 0 {
            return Err(Error::Config(
                "target layer is 1-based; 0 is not a layer".to_string(),
            ));
        }
        Ok(LtcConfig::Enabled { target_layer, rate })
    }

    /// Check the target layer against a concrete model depth.
    pub fn validate_for(&self, num_layers: usize) -> Result<()> {
        match *self {
            LtcConfig::Disabled => Ok(()),
            LtcConfig::Enabled { target_layer, rate } => {
                if !(rate > 0.0 && rate <= 1.0) {
                    return Err(Error::Config(format!(
                        "compression rate must lie in (0, 1], got {rate}"
                    )));
                }
                if target_layer == 0 || target_layer > num_layers {
                    return Err(Error::Config(format!(
                        "target layer {target_layer} out of range for a {num_layers}-layer model"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// What a token span contains. Document indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Instruction,
    Query,
    Doc(usize),
}

/// One contiguous token range `[start, end)` with a single role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub role: Role,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Maps every token of a listwise prompt to its role. Spans tile `[0, n)` in
/// order; each document index below `k` appears in exactly one span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentLayout {
    spans: Vec<Span>,
    total_len: usize,
    num_docs: usize,
}

impl DocumentLayout {
    pub fn new(spans: Vec<Span>) -> Result<Self> {
        let mut cursor = 0usize;
        let mut doc_seen = Vec::new();
        for span in &spans {
            if span.start != cursor || span.end < span.start {
                return Err(Error::InvalidArgument(format!(
                    "layout spans must tile [0, n) in order; got [{}, {}) at offset {}",
                    span.start, span.end, cursor
                )));
            }
            cursor = span.end;
            if let Role::Doc(j) = span.role {
                if doc_seen.contains(&j) {
                    return Err(Error::InvalidArgument(format!(
                        "document {j} appears in more than one span"
                    )));
                }
                doc_seen.push(j);
            }
        }
        let num_docs = doc_seen.len();
        for j in 0..num_docs {
            if !doc_seen.contains(&j) {
                return Err(Error::InvalidArgument(format!(
                    "document indices must be exactly 0..{num_docs}; missing {j}"
                )));
            }
        }
        Ok(DocumentLayout {
            spans,
            total_len: cursor,
            num_docs,
        })
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    /// The n×k document-membership indicator: entry (i, j) is one exactly when
    /// token i belongs to document j.
    pub fn document_mask<F: Scalar>(&self) -> Matrix<F> {
        let mut m = Matrix::zeros(self.total_len, self.num_docs);
        for span in &self.spans {
            if let Role::Doc(j) = span.role {
                for i in span.start..span.end {
                    m.set(i, j, F::one());
                }
            }
        }
        m
    }
}

/// Number of tokens kept when pooling `n` tokens at rate `r`: `⌊n·r⌋`, clamped
/// to at least one so no sequence or document vanishes.
pub fn compressed_length(n: usize, r: f64) -> usize {
    debug_assert!(n >= 1 && r > 0.0 && r <= 1.0);
    ((n as f64 * r).floor() as usize).clamp(1, n)
}

/// 1D adaptive average pooling over rows: output row i is the mean of input
/// rows in `[⌊i·n/n_out⌋, ⌈(i+1)·n/n_out⌉)`. Segments overlap when `n_out`
/// does not divide `n`; `n_out = n` returns a bit-identical copy.
pub fn adaptive_avg_pool<F: Scalar>(h: &Matrix<F>, n_out: usize) -> Result<Matrix<F>> {
    let n = h.rows();
    if n_out == 0 || n_out > n {
        return Err(Error::InvalidArgument(format!(
            "pool output length must be in [1, {n}], got {n_out}"
        )));
    }
    if n_out == n {
        return Ok(h.clone());
    }
    let mut out = Matrix::zeros(n_out, h.cols());
    for i in 0..n_out {
        let (start, end) = pool_segment(n, n_out, i);
        let inv_len = F::lit(1.0 / (end - start) as f64);
        let row = out.row_mut(i);
        for src in start..end {
            for (o, &v) in row.iter_mut().zip(h.row(src)) {
                *o += v * inv_len;
            }
        }
    }
    Ok(out)
}

/// Source row range `[start, end)` feeding pooled row `i`.
pub fn pool_segment(n: usize, n_out: usize, i: usize) -> (usize, usize) {
    let start = i * n / n_out;
    let end = ((i + 1) * n).div_ceil(n_out);
    (start, end)
}

/// Fresh consecutive positions and a lower-triangular additive causal mask
/// (zero on and below the diagonal, -inf above) for a sequence of `n_out`
/// tokens.
pub fn rebuild_positions_and_mask<F: Scalar>(n_out: usize) -> (Vec<usize>, Matrix<F>) {
    let positions = (0..n_out).collect();
    let mut mask = Matrix::zeros(n_out, n_out);
    for i in 0..n_out {
        for j in i + 1..n_out {
            mask.set(i, j, F::neg_infinity());
        }
    }
    (positions, mask)
}

/// Pool each document span of `h` independently at rate `r`, copying
/// instruction and query spans verbatim. Returns the shortened matrix and a
/// layout describing the new token ranges. No output row ever mixes two roles
/// or two documents.
pub fn masked_document_pool<F: Scalar>(
    h: &Matrix<F>,
    layout: &DocumentLayout,
    r: f64,
) -> Result<(Matrix<F>, DocumentLayout)> {
    if layout.total_len() != h.rows() {
        return Err(Error::InvalidArgument(format!(
            "layout covers {} tokens but matrix has {} rows",
            layout.total_len(),
            h.rows()
        )));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "compression rate must lie in (0, 1], got {r}"
        )));
    }
    let mut blocks: Vec<Matrix<F>> = Vec::with_capacity(layout.spans().len());
    let mut new_spans = Vec::with_capacity(layout.spans().len());
    let mut cursor = 0usize;
    for span in layout.spans() {
        let block = h.row_range(span.start, span.end);
        let pooled = match span.role {
            Role::Doc(_) if !span.is_empty() => {
                adaptive_avg_pool(&block, compressed_length(span.len(), r))?
            }
            _ => block,
        };
        new_spans.push(Span {
            role: span.role,
            start: cursor,
            end: cursor + pooled.rows(),
        });
        cursor += pooled.rows();
        blocks.push(pooled);
    }
    let mut out = Matrix::zeros(cursor, h.cols());
    for (span, block) in new_spans.iter().zip(&blocks) {
        for (i, row) in (span.start..span.end).zip(0..block.rows()) {
            out.row_mut(i).copy_from_slice(block.row(row));
        }
    }
    Ok((out, DocumentLayout::new(new_spans)?))
}
