//! Decoder-only causal transformer with a compression hook: layers before the
//! target layer run at full sequence length, the hook pools the hidden states,
//! and the remaining layers run on the shortened sequence. Exposes pointwise
//! pair scoring and listwise identifier logits.

use crate::compress::{
    adaptive_avg_pool, compressed_length, masked_document_pool, rebuild_positions_and_mask,
    DocumentLayout, LtcConfig, Role, Span,
};
use crate::error::{Error, Result};
use crate::tensor::{
    gelu, rms_norm_rows, rope_apply, softmax_rows, Matrix, RngSeed, Scalar, WeightRng,
};

/// RMS normalization epsilon used everywhere in the model.
pub const NORM_EPS: f64 = 1e-6;

/// Number of identifier token ids reserved at the top of the vocabulary for
/// listwise ranking; also the maximum listwise group size.
pub const K_MAX: usize = 20;

/// Separator between query and document in the pointwise template.
pub const SEP_TOKEN: u32 = 0;

/// Ranking trigger closing the listwise template.
pub const TRIGGER_TOKEN: u32 = 1;

/// Reserved ids at the bottom of the vocabulary (separator + trigger).
pub const BOTTOM_RESERVED: usize = 2;

/// Architecture hyperparameters. `head_dim` is derived as `hidden/num_heads`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_base: f64,
}

impl ModelConfig {
    /// Desk-scale default used by the CLI and the training lab.
    pub fn desk_default() -> Self {
        ModelConfig {
            num_layers: 8,
            hidden: 64,
            num_heads: 4,
            mlp_dim: 256,
            vocab_size: 4096,
            max_seq: 1024,
            rope_base: 10_000.0,
        }
    }

    /// Tiny configuration for gradient checking and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            num_layers: 2,
            hidden: 8,
            num_heads: 2,
            mlp_dim: 16,
            vocab_size: 128,
            max_seq: 64,
            rope_base: 10_000.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden == 0 || self.num_heads == 0 || self.mlp_dim == 0 {
            return Err(Error::Config(
                "layer count, hidden size, head count, and mlp size must be positive".to_string(),
            ));
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.num_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary positions",
                self.head_dim()
            )));
        }
        if self.max_seq == 0 {
            return Err(Error::Config("max_seq must be at least 1".to_string()));
        }
        if self.vocab_size <= BOTTOM_RESERVED + K_MAX {
            return Err(Error::Config(format!(
                "vocabulary of {} leaves no room for {} reserved ids plus words",
                self.vocab_size,
                BOTTOM_RESERVED + K_MAX
            )));
        }
        Ok(())
    }

    /// Identifier token id for listwise slot `j` (0-based). Identifiers occupy
    /// the top `K_MAX` ids of the vocabulary.
    pub fn identifier_token(&self, j: usize) -> u32 {
        debug_assert!(j < K_MAX);
        (self.vocab_size - K_MAX + j) as u32
    }

    /// Number of ids available for hashed words.
    pub fn word_id_range(&self) -> usize {
        self.vocab_size - BOTTOM_RESERVED - K_MAX
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub attn_norm_gain: Vec<F>,
    pub wq: Matrix<F>,
    pub wk: Matrix<F>,
    pub wv: Matrix<F>,
    pub wo: Matrix<F>,
    pub mlp_norm_gain: Vec<F>,
    pub w_in: Matrix<F>,
    pub w_out: Matrix<F>,
}

/// All learnable weights. Tensor declaration order here is the checkpoint
/// serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    pub embedding: Matrix<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm_gain: Vec<F>,
    pub score_head: Vec<F>,
    pub id_logit_rows: Matrix<F>,
}

impl<F: Scalar> Parameters<F> {
    /// Deterministic initialization: uniform ±1/√fan_in for projections,
    /// ones for norm gains. The same seed yields bit-identical weights.
    pub fn init(cfg: &ModelConfig, seed: RngSeed) -> Result<Self> {
        cfg.validate()?;
        let mut rng = WeightRng::new(seed);
        let h = cfg.hidden;
        let h_scale = 1.0 / (h as f64).sqrt();
        let mlp_scale = 1.0 / (cfg.mlp_dim as f64).sqrt();
        let embedding = Matrix::random(cfg.vocab_size, h, h_scale, &mut rng);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                attn_norm_gain: vec![F::one(); h],
                wq: Matrix::random(h, h, h_scale, &mut rng),
                wk: Matrix::random(h, h, h_scale, &mut rng),
                wv: Matrix::random(h, h, h_scale, &mut rng),
                wo: Matrix::random(h, h, h_scale, &mut rng),
                mlp_norm_gain: vec![F::one(); h],
                w_in: Matrix::random(h, cfg.mlp_dim, h_scale, &mut rng),
                w_out: Matrix::random(cfg.mlp_dim, h, mlp_scale, &mut rng),
            })
            .collect();
        Ok(Parameters {
            embedding,
            layers,
            final_norm_gain: vec![F::one(); h],
            score_head: (0..h).map(|_| rng.uniform(h_scale)).collect(),
            id_logit_rows: Matrix::random(K_MAX, h, h_scale, &mut rng),
        })
    }

    /// Every tensor as a flat slice, in checkpoint serialization order.
    pub fn flat_tensors(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = vec![self.embedding.data()];
        for layer in &self.layers {
            out.push(&layer.attn_norm_gain);
            out.push(layer.wq.data());
            out.push(layer.wk.data());
            out.push(layer.wv.data());
            out.push(layer.wo.data());
            out.push(&layer.mlp_norm_gain);
            out.push(layer.w_in.data());
            out.push(layer.w_out.data());
        }
        out.push(&self.final_norm_gain);
        out.push(&self.score_head);
        out.push(self.id_logit_rows.data());
        out
    }

    /// Mutable view of every tensor, same order as [`Self::flat_tensors`].
    pub fn flat_tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![self.embedding.data_mut()];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm_gain);
            out.push(layer.wq.data_mut());
            out.push(layer.wk.data_mut());
            out.push(layer.wv.data_mut());
            out.push(layer.wo.data_mut());
            out.push(&mut layer.mlp_norm_gain);
            out.push(layer.w_in.data_mut());
            out.push(layer.w_out.data_mut());
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.score_head);
        out.push(self.id_logit_rows.data_mut());
        out
    }

    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        Parameters {
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm_gain: l.attn_norm_gain.iter().map(|v| G::lit(v.as_f64())).collect(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm_gain: l.mlp_norm_gain.iter().map(|v| G::lit(v.as_f64())).collect(),
                    w_in: l.w_in.cast(),
                    w_out: l.w_out.cast(),
                })
                .collect(),
            final_norm_gain: self.final_norm_gain.iter().map(|v| G::lit(v.as_f64())).collect(),
            score_head: self.score_head.iter().map(|v| G::lit(v.as_f64())).collect(),
            id_logit_rows: self.id_logit_rows.cast(),
        }
    }
}

/// Activations at some layer, with the position indices and additive causal
/// mask they move under. `current_layer` counts completed blocks.
#[derive(Debug, Clone)]
pub struct HiddenStates<F> {
    pub activations: Matrix<F>,
    pub positions: Vec<usize>,
    pub mask: Matrix<F>,
    pub current_layer: usize,
}

/// Look up token embeddings and build initial positions and causal mask.
pub fn embed<F: Scalar>(
    tokens: &[u32],
    params: &Parameters<F>,
    cfg: &ModelConfig,
) -> Result<HiddenStates<F>> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".to_string()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    let mut activations = Matrix::zeros(tokens.len(), cfg.hidden);
    for (t, &id) in tokens.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(Error::Input(format!(
                "token id {} outside vocabulary of {}",
                id, cfg.vocab_size
            )));
        }
        activations
            .row_mut(t)
            .copy_from_slice(params.embedding.row(id as usize));
    }
    let (positions, mask) = rebuild_positions_and_mask(tokens.len());
    Ok(HiddenStates {
        activations,
        positions,
        mask,
        current_layer: 0,
    })
}

/// One pre-norm block: attention with rotary positions, then a GELU MLP, each
/// behind a residual connection. Sequence length is unchanged.
pub fn layer_forward<F: Scalar>(
    hs: HiddenStates<F>,
    layer: &LayerParams<F>,
    cfg: &ModelConfig,
) -> Result<HiddenStates<F>> {
    if hs.current_layer >= cfg.num_layers {
        return Err(Error::InvalidArgument(format!(
            "layer_forward past the last layer ({})",
            cfg.num_layers
        )));
    }
    let HiddenStates {
        activations: x,
        positions,
        mask,
        current_layer,
    } = hs;

    let x_norm = rms_norm_rows(&x, &layer.attn_norm_gain, F::lit(NORM_EPS));
    let q = x_norm.matmul(&layer.wq)?;
    let k = x_norm.matmul(&layer.wk)?;
    let v = x_norm.matmul(&layer.wv)?;

    let dh = cfg.head_dim();
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let n = x.rows();
    let mut ctx = Matrix::zeros(n, cfg.hidden);
    for head in 0..cfg.num_heads {
        let lo = head * dh;
        let hi = lo + dh;
        let q_h = rope_apply(&q.col_slice(lo, hi), &positions, cfg.rope_base)?;
        let k_h = rope_apply(&k.col_slice(lo, hi), &positions, cfg.rope_base)?;
        let scores = q_h.matmul_transpose_b(&k_h)?.scale(scale);
        let sm = softmax_rows(&scores, Some(&mask))?;
        if !sm.all_masked.is_empty() {
            return Err(Error::Numeric(format!(
                "attention row(s) {:?} fully masked",
                sm.all_masked
            )));
        }
        let ctx_h = sm.probs.matmul(&v.col_slice(lo, hi))?;
        ctx.set_col_slice(lo, &ctx_h);
    }
    let attn_out = ctx.matmul(&layer.wo)?;
    let mut mid = x;
    mid.add_assign(&attn_out)?;

    let mid_norm = rms_norm_rows(&mid, &layer.mlp_norm_gain, F::lit(NORM_EPS));
    let mlp_out = mid_norm.matmul(&layer.w_in)?.map(gelu).matmul(&layer.w_out)?;
    mid.add_assign(&mlp_out)?;

    Ok(HiddenStates {
        activations: mid,
        positions,
        mask,
        current_layer: current_layer + 1,
    })
}

/// Full forward pass with the compression hook. The hook fires on the hidden
/// states entering `target_layer` (1-based): plain pooling when `layout` is
/// absent, document-masked pooling otherwise. The returned states are
/// post-final-norm; their length is the compressed length when compression is
/// enabled.
pub fn forward_with_ltc<F: Scalar>(
    tokens: &[u32],
    params: &Parameters<F>,
    cfg: &ModelConfig,
    ltc: &LtcConfig,
    layout: Option<&DocumentLayout>,
) -> Result<HiddenStates<F>> {
    ltc.validate_for(cfg.num_layers)?;
    let mut hs = embed(tokens, params, cfg)?;
    for (idx, layer) in params.layers.iter().enumerate() {
        if let LtcConfig::Enabled { target_layer, rate } = *ltc {
            // the hook runs even at rate 1.0; pooling n -> n is a bit-exact copy
            if idx + 1 == target_layer {
                let pooled = match layout {
                    Some(layout) => masked_document_pool(&hs.activations, layout, rate)?.0,
                    None => {
                        let n_out = compressed_length(hs.activations.rows(), rate);
                        adaptive_avg_pool(&hs.activations, n_out)?
                    }
                };
                let (positions, mask) = rebuild_positions_and_mask(pooled.rows());
                hs = HiddenStates {
                    activations: pooled,
                    positions,
                    mask,
                    current_layer: hs.current_layer,
                };
            }
        }
        hs = layer_forward(hs, layer, cfg)?;
    }
    hs.activations = rms_norm_rows(&hs.activations, &params.final_norm_gain, F::lit(NORM_EPS));
    Ok(hs)
}

/// Assemble the pointwise template `[query] [separator] [document]`,
/// truncating the document tail (never the query) when the result would
/// exceed `max_seq`.
pub fn assemble_pointwise(
    query_tokens: &[u32],
    doc_tokens: &[u32],
    cfg: &ModelConfig,
) -> Result<Vec<u32>> {
    if query_tokens.len() + 1 > cfg.max_seq {
        return Err(Error::Input(format!(
            "query of {} tokens leaves no room in max_seq {}",
            query_tokens.len(),
            cfg.max_seq
        )));
    }
    let doc_budget = (cfg.max_seq - 1 - query_tokens.len()).min(doc_tokens.len());
    let mut tokens = Vec::with_capacity(query_tokens.len() + 1 + doc_budget);
    tokens.extend_from_slice(query_tokens);
    tokens.push(SEP_TOKEN);
    tokens.extend_from_slice(&doc_tokens[..doc_budget]);
    Ok(tokens)
}

/// Relevance score of one query-document pair: forward pass over the
/// pointwise template, then the score head applied to the final hidden state
/// at the last position.
pub fn pointwise_score<F: Scalar>(
    query_tokens: &[u32],
    doc_tokens: &[u32],
    params: &Parameters<F>,
    cfg: &ModelConfig,
    ltc: &LtcConfig,
) -> Result<F> {
    let tokens = assemble_pointwise(query_tokens, doc_tokens, cfg)?;
    let hs = forward_with_ltc(&tokens, params, cfg, ltc, None)?;
    let last = hs.activations.row(hs.activations.rows() - 1);
    Ok(last
        .iter()
        .zip(&params.score_head)
        .map(|(&a, &b)| a * b)
        .sum())
}

/// Token sequence and document layout for a listwise prompt:
/// `[instruction][query][ID_1][doc_1]...[ID_k][doc_k][trigger]`. Identifier
/// markers and the trigger carry the instruction role so only document spans
/// are ever pooled.
pub fn assemble_listwise(
    instruction_tokens: &[u32],
    query_tokens: &[u32],
    docs: &[Vec<u32>],
    cfg: &ModelConfig,
) -> Result<(Vec<u32>, DocumentLayout)> {
    let k = docs.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "listwise ranking needs at least 2 documents, got {k}"
        )));
    }
    if k > K_MAX {
        return Err(Error::Config(format!(
            "{k} documents exceed the {K_MAX} reserved identifiers"
        )));
    }
    let mut tokens = Vec::new();
    let mut spans: Vec<Span> = Vec::new();
    tokens.extend_from_slice(instruction_tokens);
    spans.push(Span { role: Role::Instruction, start: 0, end: tokens.len() });
    let q_start = tokens.len();
    tokens.extend_from_slice(query_tokens);
    spans.push(Span { role: Role::Query, start: q_start, end: tokens.len() });
    for (j, doc) in docs.iter().enumerate() {
        let marker_start = tokens.len();
        tokens.push(cfg.identifier_token(j));
        spans.push(Span { role: Role::Instruction, start: marker_start, end: tokens.len() });
        let doc_start = tokens.len();
        tokens.extend_from_slice(doc);
        spans.push(Span { role: Role::Doc(j), start: doc_start, end: tokens.len() });
    }
    let trigger_start = tokens.len();
    tokens.push(TRIGGER_TOKEN);
    spans.push(Span { role: Role::Instruction, start: trigger_start, end: tokens.len() });
    if tokens.len() > cfg.max_seq {
        return Err(Error::Input(format!(
            "listwise prompt of {} tokens exceeds max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    Ok((tokens, DocumentLayout::new(spans)?))
}

/// Listwise ranking signal: one logit per document slot, read from the
/// reserved identifier rows at the final position of the prompt.
pub fn listwise_identifier_logits<F: Scalar>(
    instruction_tokens: &[u32],
    query_tokens: &[u32],
    docs: &[Vec<u32>],
    params: &Parameters<F>,
    cfg: &ModelConfig,
    ltc: &LtcConfig,
) -> Result<Vec<F>> {
    let (tokens, layout) = assemble_listwise(instruction_tokens, query_tokens, docs, cfg)?;
    let hs = forward_with_ltc(&tokens, params, cfg, ltc, Some(&layout))?;
    let last = hs.activations.row(hs.activations.rows() - 1);
    Ok((0..docs.len())
        .map(|j| {
            params
                .id_logit_rows
                .row(j)
                .iter()
                .zip(last)
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect())
}
