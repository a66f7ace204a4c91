//! Reverse-mode gradients through an explicit op tape. The tape records the
//! fixed forward topology of the model — embedding lookup, norms, attention,
//! rotary positions, pooling, MLP — and plays it backward to accumulate
//! parameter gradients. Each op's forward calls the exact same kernels as the
//! plain forward pass, so traced and plain scores agree bit for bit.

use crate::compress::{
    adaptive_avg_pool, compressed_length, pool_segment, rebuild_positions_and_mask, LtcConfig,
};
use crate::error::{Error, Result};
use crate::model::{assemble_pointwise, ModelConfig, Parameters};
use crate::tensor::{gelu, gelu_grad, rms_norm_rows, rope_apply, softmax_rows, Matrix, Scalar};

pub type NodeId = usize;

enum Op<F> {
    /// Parameter or constant input; gradients accumulate here and stop.
    Leaf,
    /// Row gather from an embedding table.
    EmbedLookup { table: NodeId, token_ids: Vec<u32> },
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Row-wise RMS norm with a 1×h gain node broadcast over rows.
    RmsNormRows { x: NodeId, gain: NodeId, eps: F },
    Rope { x: NodeId, positions: Vec<usize>, base: f64 },
    /// scale · q · kᵀ
    ScaledScores { q: NodeId, k: NodeId, scale: F },
    /// Row softmax; the constant mask needn't be kept — masked entries have
    /// zero probability and therefore zero gradient.
    SoftmaxRows { x: NodeId },
    Gelu { x: NodeId },
    /// 1D adaptive average pooling over rows.
    Pool { x: NodeId, n_out: usize },
    ColSlice { x: NodeId, start: usize, end: usize },
    /// Horizontal concatenation of equal-height blocks.
    ColConcat { parts: Vec<NodeId> },
    /// Single row as a 1×cols matrix.
    RowSlice { x: NodeId, row: usize },
}

/// Recorded forward computation: op list plus the primal value of every node.
pub struct Tape<F: Scalar> {
    ops: Vec<Op<F>>,
    values: Vec<Matrix<F>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), values: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Matrix<F> {
        &self.values[id]
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: Matrix<F>) -> NodeId {
        self.ops.push(op);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn leaf(&mut self, value: Matrix<F>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn embed_lookup(&mut self, table: NodeId, token_ids: &[u32]) -> NodeId {
        let tbl = &self.values[table];
        let mut out = Matrix::zeros(token_ids.len(), tbl.cols());
        for (t, &id) in token_ids.iter().enumerate() {
            out.row_mut(t).copy_from_slice(tbl.row(id as usize));
        }
        self.push(Op::EmbedLookup { table, token_ids: token_ids.to_vec() }, out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.values[a].matmul(&self.values[b])?;
        Ok(self.push(Op::Matmul { a, b }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.values[a].add(&self.values[b])?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn rms_norm_rows(&mut self, x: NodeId, gain: NodeId, eps: F) -> NodeId {
        let value = rms_norm_rows(&self.values[x], self.values[gain].row(0), eps);
        self.push(Op::RmsNormRows { x, gain, eps }, value)
    }

    pub fn rope(&mut self, x: NodeId, positions: &[usize], base: f64) -> Result<NodeId> {
        let value = rope_apply(&self.values[x], positions, base)?;
        Ok(self.push(Op::Rope { x, positions: positions.to_vec(), base }, value))
    }

    pub fn scaled_scores(&mut self, q: NodeId, k: NodeId, scale: F) -> Result<NodeId> {
        let value = self.values[q].matmul_transpose_b(&self.values[k])?.scale(scale);
        Ok(self.push(Op::ScaledScores { q, k, scale }, value))
    }

    pub fn softmax_rows(&mut self, x: NodeId, mask: &Matrix<F>) -> Result<NodeId> {
        let sm = softmax_rows(&self.values[x], Some(mask))?;
        if !sm.all_masked.is_empty() {
            return Err(Error::Numeric(format!(
                "attention row(s) {:?} fully masked",
                sm.all_masked
            )));
        }
        Ok(self.push(Op::SoftmaxRows { x }, sm.probs))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.values[x].map(gelu);
        self.push(Op::Gelu { x }, value)
    }

    pub fn pool(&mut self, x: NodeId, n_out: usize) -> Result<NodeId> {
        let value = adaptive_avg_pool(&self.values[x], n_out)?;
        Ok(self.push(Op::Pool { x, n_out }, value))
    }

    pub fn col_slice(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let value = self.values[x].col_slice(start, end);
        self.push(Op::ColSlice { x, start, end }, value)
    }

    pub fn col_concat(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.values[parts[0]].rows();
        let total: usize = parts.iter().map(|&p| self.values[p].cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            out.set_col_slice(off, &self.values[p]);
            off += self.values[p].cols();
        }
        self.push(Op::ColConcat { parts: parts.to_vec() }, out)
    }

    pub fn row_slice(&mut self, x: NodeId, row: usize) -> NodeId {
        let value = self.values[x].row_range(row, row + 1);
        self.push(Op::RowSlice { x, row }, value)
    }

    /// Reverse sweep. Seeds set the output gradients; the result holds one
    /// gradient per node (None where nothing flowed).
    pub fn backward(&self, seeds: Vec<(NodeId, Matrix<F>)>) -> Result<Vec<Option<Matrix<F>>>> {
        let mut grads: Vec<Option<Matrix<F>>> = vec![None; self.ops.len()];
        for (id, g) in seeds {
            accumulate(&mut grads, &self.values, id, &g)?;
        }
        for id in (0..self.ops.len()).rev() {
            let Some(grad) = grads[id].take() else { continue };
            match &self.ops[id] {
                Op::Leaf => {
                    grads[id] = Some(grad); // keep for the caller
                    continue;
                }
                Op::EmbedLookup { table, token_ids } => {
                    let mut dt = Matrix::zeros(self.values[*table].rows(), grad.cols());
                    for (t, &tok) in token_ids.iter().enumerate() {
                        for (o, &g) in dt.row_mut(tok as usize).iter_mut().zip(grad.row(t)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, &self.values, *table, &dt)?;
                }
                Op::Matmul { a, b } => {
                    let da = grad.matmul_transpose_b(&self.values[*b])?;
                    let db = self.values[*a].matmul_transpose_a(&grad)?;
                    accumulate(&mut grads, &self.values, *a, &da)?;
                    accumulate(&mut grads, &self.values, *b, &db)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, &self.values, *a, &grad)?;
                    accumulate(&mut grads, &self.values, *b, &grad)?;
                }
                Op::RmsNormRows { x, gain, eps } => {
                    let xv = &self.values[*x];
                    let gv = self.values[*gain].row(0);
                    let h = F::lit(xv.cols() as f64);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut dg = Matrix::zeros(1, xv.cols());
                    for i in 0..xv.rows() {
                        let xr = xv.row(i);
                        let gr = grad.row(i);
                        let mean_sq = xr.iter().map(|&v| v * v).sum::<F>() / h;
                        let inv = (mean_sq + *eps).sqrt().recip();
                        let dot: F = gr
                            .iter()
                            .zip(xr)
                            .zip(gv)
                            .map(|((&dy, &x), &g)| dy * x * g)
                            .sum();
                        let coef = inv * inv * inv * dot / h;
                        for j in 0..xv.cols() {
                            dx.row_mut(i)[j] = gr[j] * gv[j] * inv - xr[j] * coef;
                        }
                        for j in 0..xv.cols() {
                            dg.row_mut(0)[j] += gr[j] * xr[j] * inv;
                        }
                    }
                    accumulate(&mut grads, &self.values, *x, &dx)?;
                    accumulate(&mut grads, &self.values, *gain, &dg)?;
                }
                Op::Rope { x, positions, base } => {
                    // transpose of a rotation is the rotation by the negated angle
                    let mut dx = Matrix::zeros(grad.rows(), grad.cols());
                    let d = grad.cols();
                    for (t, &pos) in positions.iter().enumerate() {
                        let src = grad.row(t);
                        let dst = dx.row_mut(t);
                        for pair in 0..d / 2 {
                            let freq = base.powf(-2.0 * pair as f64 / d as f64);
                            let angle = F::lit(pos as f64 * freq);
                            let (sin, cos) = angle.sin_cos();
                            let gx = src[2 * pair];
                            let gy = src[2 * pair + 1];
                            dst[2 * pair] = gx * cos + gy * sin;
                            dst[2 * pair + 1] = -gx * sin + gy * cos;
                        }
                    }
                    accumulate(&mut grads, &self.values, *x, &dx)?;
                }
                Op::ScaledScores { q, k, scale } => {
                    let dq = grad.matmul(&self.values[*k])?.scale(*scale);
                    let dk = grad.matmul_transpose_a(&self.values[*q])?.scale(*scale);
                    accumulate(&mut grads, &self.values, *q, &dq)?;
                    accumulate(&mut grads, &self.values, *k, &dk)?;
                }
                Op::SoftmaxRows { x } => {
                    let p = &self.values[id];
                    let mut dx = Matrix::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let pr = p.row(i);
                        let gr = grad.row(i);
                        let dot: F = gr.iter().zip(pr).map(|(&g, &pv)| g * pv).sum();
                        for j in 0..p.cols() {
                            dx.row_mut(i)[j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, &self.values, *x, &dx)?;
                }
                Op::Gelu { x } => {
                    let xv = &self.values[*x];
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (o, (&g, &v)) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data().iter().zip(xv.data()))
                    {
                        *o = g * gelu_grad(v);
                    }
                    accumulate(&mut grads, &self.values, *x, &dx)?;
                }
                Op::Pool { x, n_out } => {
                    // transpose of the pooling linear map: each output gradient
                    // is spread uniformly over its source segment, and
                    // overlapping segments accumulate
                    let n = self.values[*x].rows();
                    let mut dx = Matrix::zeros(n, grad.cols());
                    for i in 0..*n_out {
                        let (start, end) = pool_segment(n, *n_out, i);
                        let inv_len = F::lit(1.0 / (end - start) as f64);
                        for src in start..end {
                            for (o, &g) in dx.row_mut(src).iter_mut().zip(grad.row(i)) {
                                *o += g * inv_len;
                            }
                        }
                    }
                    accumulate(&mut grads, &self.values, *x, &dx)?;
                }
                Op::ColSlice { x, start, end } => {
                    let xv = &self.values[*x];
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        dx.row_mut(i)[*start..*end].copy_from_slice(grad.row(i));
                    }
                    accumulate(&mut grads, &self.values, *x, &dx)?;
                }
                Op::ColConcat { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.values[p].cols();
                        let dp = grad.col_slice(off, off + w);
                        accumulate(&mut grads, &self.values, p, &dp)?;
                        off += w;
                    }
                }
                Op::RowSlice { x, row } => {
                    let xv = &self.values[*x];
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    dx.row_mut(*row).copy_from_slice(grad.row(0));
                    accumulate(&mut grads, &self.values, *x, &dx)?;
                }
            }
        }
        Ok(grads)
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<F: Scalar>(
    grads: &mut [Option<Matrix<F>>],
    values: &[Matrix<F>],
    id: NodeId,
    delta: &Matrix<F>,
) -> Result<()> {
    match &mut grads[id] {
        Some(g) => g.add_assign(delta),
        slot @ None => {
            let mut g = Matrix::zeros(values[id].rows(), values[id].cols());
            g.add_assign(delta)?;
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Parameter leaves registered on a tape, one per learnable tensor that the
/// pointwise path touches. Identifier-logit rows are listwise-only and stay
/// off the tape.
pub struct ParamNodes {
    pub embedding: NodeId,
    pub layers: Vec<LayerNodes>,
    pub final_norm_gain: NodeId,
    pub score_head: NodeId,
}

pub struct LayerNodes {
    pub attn_norm_gain: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub mlp_norm_gain: NodeId,
    pub w_in: NodeId,
    pub w_out: NodeId,
}

impl ParamNodes {
    /// Register every pointwise-path parameter as a leaf.
    pub fn register<F: Scalar>(tape: &mut Tape<F>, params: &Parameters<F>) -> Self {
        let embedding = tape.leaf(params.embedding.clone());
        let layers = params
            .layers
            .iter()
            .map(|l| LayerNodes {
                attn_norm_gain: tape.leaf(row_matrix(&l.attn_norm_gain)),
                wq: tape.leaf(l.wq.clone()),
                wk: tape.leaf(l.wk.clone()),
                wv: tape.leaf(l.wv.clone()),
                wo: tape.leaf(l.wo.clone()),
                mlp_norm_gain: tape.leaf(row_matrix(&l.mlp_norm_gain)),
                w_in: tape.leaf(l.w_in.clone()),
                w_out: tape.leaf(l.w_out.clone()),
            })
            .collect();
        ParamNodes {
            embedding,
            layers,
            final_norm_gain: tape.leaf(row_matrix(&params.final_norm_gain)),
            score_head: tape.leaf(col_matrix(&params.score_head)),
        }
    }

    /// Gather leaf gradients back into parameter shape. Tensors that nothing
    /// flowed into (including the listwise identifier rows) come back zero.
    pub fn collect_grads<F: Scalar>(
        &self,
        template: &Parameters<F>,
        node_grads: &[Option<Matrix<F>>],
    ) -> Parameters<F> {
        let mut out = zeros_like(template);
        let take_mat = |id: NodeId| -> Option<&Matrix<F>> { node_grads[id].as_ref() };
        if let Some(g) = take_mat(self.embedding) {
            out.embedding = g.clone();
        }
        for (layer, nodes) in out.layers.iter_mut().zip(&self.layers) {
            if let Some(g) = take_mat(nodes.attn_norm_gain) {
                layer.attn_norm_gain.copy_from_slice(g.row(0));
            }
            if let Some(g) = take_mat(nodes.wq) {
                layer.wq = g.clone();
            }
            if let Some(g) = take_mat(nodes.wk) {
                layer.wk = g.clone();
            }
            if let Some(g) = take_mat(nodes.wv) {
                layer.wv = g.clone();
            }
            if let Some(g) = take_mat(nodes.wo) {
                layer.wo = g.clone();
            }
            if let Some(g) = take_mat(nodes.mlp_norm_gain) {
                layer.mlp_norm_gain.copy_from_slice(g.row(0));
            }
            if let Some(g) = take_mat(nodes.w_in) {
                layer.w_in = g.clone();
            }
            if let Some(g) = take_mat(nodes.w_out) {
                layer.w_out = g.clone();
            }
        }
        if let Some(g) = take_mat(self.final_norm_gain) {
            out.final_norm_gain.copy_from_slice(g.row(0));
        }
        if let Some(g) = take_mat(self.score_head) {
            for (o, &v) in out.score_head.iter_mut().zip(g.data()) {
                *o = v;
            }
        }
        out
    }
}

fn row_matrix<F: Scalar>(v: &[F]) -> Matrix<F> {
    Matrix::from_vec(1, v.len(), v.to_vec()).expect("row matrix")
}

fn col_matrix<F: Scalar>(v: &[F]) -> Matrix<F> {
    Matrix::from_vec(v.len(), 1, v.to_vec()).expect("column matrix")
}

/// All-zero parameter set with the same shapes as `p` — the gradient
/// accumulator shape.
pub fn zeros_like<F: Scalar>(p: &Parameters<F>) -> Parameters<F> {
    Parameters {
        embedding: Matrix::zeros(p.embedding.rows(), p.embedding.cols()),
        layers: p
            .layers
            .iter()
            .map(|l| crate::model::LayerParams {
                attn_norm_gain: vec![F::zero(); l.attn_norm_gain.len()],
                wq: Matrix::zeros(l.wq.rows(), l.wq.cols()),
                wk: Matrix::zeros(l.wk.rows(), l.wk.cols()),
                wv: Matrix::zeros(l.wv.rows(), l.wv.cols()),
                wo: Matrix::zeros(l.wo.rows(), l.wo.cols()),
                mlp_norm_gain: vec![F::zero(); l.mlp_norm_gain.len()],
                w_in: Matrix::zeros(l.w_in.rows(), l.w_in.cols()),
                w_out: Matrix::zeros(l.w_out.rows(), l.w_out.cols()),
            })
            .collect(),
        final_norm_gain: vec![F::zero(); p.final_norm_gain.len()],
        score_head: vec![F::zero(); p.score_head.len()],
        id_logit_rows: Matrix::zeros(p.id_logit_rows.rows(), p.id_logit_rows.cols()),
    }
}

/// Traced pointwise forward: the same template assembly and layer math as the
/// plain scorer, recorded op by op. Returns the 1×1 score node.
pub fn traced_pointwise_score<F: Scalar>(
    tape: &mut Tape<F>,
    nodes: &ParamNodes,
    query_tokens: &[u32],
    doc_tokens: &[u32],
    cfg: &ModelConfig,
    ltc: &LtcConfig,
) -> Result<NodeId> {
    ltc.validate_for(cfg.num_layers)?;
    let tokens = assemble_pointwise(query_tokens, doc_tokens, cfg)?;
    let mut x = tape.embed_lookup(nodes.embedding, &tokens);
    let (mut positions, mut mask) = rebuild_positions_and_mask::<F>(tokens.len());
    let eps = F::lit(crate::model::NORM_EPS);
    let dh = cfg.head_dim();
    let scale = F::lit(1.0 / (dh as f64).sqrt());

    for (idx, layer) in nodes.layers.iter().enumerate() {
        if let LtcConfig::Enabled { target_layer, rate } = *ltc {
            if idx + 1 == target_layer {
                let n_out = compressed_length(tape.value(x).rows(), rate);
                x = tape.pool(x, n_out)?;
                let rebuilt = rebuild_positions_and_mask::<F>(n_out);
                positions = rebuilt.0;
                mask = rebuilt.1;
            }
        }
        let x_norm = tape.rms_norm_rows(x, layer.attn_norm_gain, eps);
        let q = tape.matmul(x_norm, layer.wq)?;
        let k = tape.matmul(x_norm, layer.wk)?;
        let v = tape.matmul(x_norm, layer.wv)?;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let lo = head * dh;
            let hi = lo + dh;
            let q_h = tape.col_slice(q, lo, hi);
            let q_h = tape.rope(q_h, &positions, cfg.rope_base)?;
            let k_h = tape.col_slice(k, lo, hi);
            let k_h = tape.rope(k_h, &positions, cfg.rope_base)?;
            let scores = tape.scaled_scores(q_h, k_h, scale)?;
            let probs = tape.softmax_rows(scores, &mask)?;
            let v_h = tape.col_slice(v, lo, hi);
            heads.push(tape.matmul(probs, v_h)?);
        }
        let ctx = tape.col_concat(&heads);
        let attn_out = tape.matmul(ctx, layer.wo)?;
        x = tape.add(x, attn_out)?;
        let mid_norm = tape.rms_norm_rows(x, layer.mlp_norm_gain, eps);
        let pre = tape.matmul(mid_norm, layer.w_in)?;
        let act = tape.gelu(pre);
        let mlp_out = tape.matmul(act, layer.w_out)?;
        x = tape.add(x, mlp_out)?;
    }
    let final_norm = tape.rms_norm_rows(x, nodes.final_norm_gain, eps);
    let last = tape.row_slice(final_norm, tape.value(final_norm).rows() - 1);
    tape.matmul(last, nodes.score_head)
}
