//! Forward pass with optional per-head capture, and the cache-based backward
//! pass used by base-model pretraining.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{ModelBundle, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::lens::TokenDistribution;

/// Per-(layer, head, position) contributions to the residual stream.
///
/// A head's contribution is its attention-weighted value output multiplied by
/// that head's rows of the attention output projection. The output-projection
/// bias belongs to no head; summing all heads and adding the bias gives the
/// attention block output, which is kept alongside for verification.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCapture {
    n_layers: usize,
    n_heads: usize,
    seq_len: usize,
    d_model: usize,
    /// Flattened `[layer][head][position][d_model]`.
    contributions: Vec<f32>,
    /// Attention block output per layer (`seq_len × d_model`), before the residual add.
    block_outputs: Vec<Array2<f32>>,
}

impl HeadCapture {
    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn get(&self, layer: usize, head: usize, position: usize) -> Result<&[f32]> {
        if layer >= self.n_layers {
            return Err(Error::index("layer", layer, self.n_layers));
        }
        if head >= self.n_heads {
            return Err(Error::index("head", head, self.n_heads));
        }
        if position >= self.seq_len {
            return Err(Error::index("position", position, self.seq_len));
        }
        let start = ((layer * self.n_heads + head) * self.seq_len + position) * self.d_model;
        Ok(&self.contributions[start..start + self.d_model])
    }

    pub fn block_output(&self, layer: usize) -> Result<ArrayView2<'_, f32>> {
        self.block_outputs
            .get(layer)
            .map(|a| a.view())
            .ok_or_else(|| Error::index("layer", layer, self.n_layers))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    /// Final logits, `seq_len × vocab_size`.
    pub logits: Array2<f32>,
    pub capture: Option<HeadCapture>,
}

impl ForwardResult {
    pub fn seq_len(&self) -> usize {
        self.logits.nrows()
    }

    /// The model's output logits at `position` as a distribution.
    pub fn output(&self, position: usize) -> Result<TokenDistribution> {
        if position >= self.seq_len() {
            return Err(Error::index("position", position, self.seq_len()));
        }
        Ok(TokenDistribution::from_logits_f32(
            self.logits.row(position).iter().copied(),
        ))
    }

    pub fn head_contribution(&self, layer: usize, head: usize, position: usize) -> Result<&[f32]> {
        let capture = self.capture.as_ref().ok_or_else(|| {
            Error::State("forward pass was run without head capture".into())
        })?;
        capture.get(layer, head, position)
    }
}

pub fn forward_with_capture(
    model: &ModelBundle,
    tokens: &[u32],
    capture_heads: bool,
) -> Result<ForwardResult> {
    check_tokens(model.config(), tokens)?;
    let (logits, capture, _) = run(model.config(), model.weights(), tokens, capture_heads, false);
    Ok(ForwardResult { logits, capture })
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::input("token sequence is empty"));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::index("token", bad as usize, cfg.vocab_size));
    }
    Ok(())
}

pub(crate) struct LnCache {
    xhat: Array2<f32>,
    rstd: Array1<f32>,
}

pub(crate) struct LayerCache {
    ln1: LnCache,
    ln1_out: Array2<f32>,
    qkv: Array2<f32>,
    /// One `T × T` attention pattern per head.
    patterns: Vec<Array2<f32>>,
    z: Array2<f32>,
    ln2: LnCache,
    ln2_out: Array2<f32>,
    fc_pre: Array2<f32>,
    fc_act: Array2<f32>,
}

pub(crate) struct Cache {
    layers: Vec<LayerCache>,
    final_ln: LnCache,
    final_out: Array2<f32>,
}

pub(crate) fn layer_norm(
    x: &Array2<f32>,
    gain: &Array1<f32>,
    bias: &Array1<f32>,
    eps: f32,
) -> (Array2<f32>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut rstd = Array1::zeros(t);
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let r = 1.0 / (var + eps).sqrt();
        rstd[i] = r;
        for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
    }
    let out = &xhat * gain + bias;
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f32>,
    gain: &Array1<f32>,
    cache: &LnCache,
    dgain: &mut Array1<f32>,
    dbias: &mut Array1<f32>,
) -> Array2<f32> {
    let d = dy.ncols() as f32;
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let r = cache.rstd[i];
        for ((o, gv), xv) in dx.row_mut(i).iter_mut().zip(g).zip(xh) {
            *o = r * (gv - mean_g - xv * mean_gx);
        }
    }
    dx
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_causal(scores: &mut Array2<f32>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let max = row.iter().take(i + 1).fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j > i {
                *v = 0.0;
            } else {
                *v = (*v - max).exp();
                sum += *v;
            }
        }
        row /= sum;
    }
}

/// Core forward pass. Callers validate `tokens` first.
pub(crate) fn run(
    cfg: &ModelConfig,
    w: &Weights,
    tokens: &[u32],
    capture_heads: bool,
    keep_cache: bool,
) -> (Array2<f32>, Option<HeadCapture>, Option<Cache>) {
    let t = tokens.len();
    let d = cfg.d_model;
    let dh = cfg.d_head;
    let scale = 1.0 / (dh as f32).sqrt();

    let mut x = Array2::<f32>::zeros((t, d));
    for (p, &tok) in tokens.iter().enumerate() {
        let mut row = x.row_mut(p);
        row += &w.token_embedding.row(tok as usize);
        row += &w.position_embedding.row(p);
    }

    let mut contributions = Vec::new();
    let mut block_outputs = Vec::new();
    if capture_heads {
        contributions.reserve(cfg.n_layers * cfg.n_heads * t * d);
    }
    let mut layer_caches = Vec::new();

    for lw in &w.layers {
        let (ln1_out, ln1) = layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias, cfg.layernorm_epsilon);
        let qkv = ln1_out.dot(&lw.qkv_weight) + &lw.qkv_bias;
        let mut z = Array2::<f32>::zeros((t, d));
        let mut patterns = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&k.t()) * scale;
            softmax_causal(&mut scores);
            z.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&scores.dot(&v));
            if keep_cache {
                patterns.push(scores);
            }
        }
        let attn = z.dot(&lw.out_weight) + &lw.out_bias;
        if capture_heads {
            for h in 0..cfg.n_heads {
                let zh = z.slice(s![.., h * dh..(h + 1) * dh]);
                let wo_h = lw.out_weight.slice(s![h * dh..(h + 1) * dh, ..]);
                let contrib = zh.dot(&wo_h);
                contributions.extend(contrib.iter().copied());
            }
            block_outputs.push(attn.clone());
        }
        x += &attn;

        let (ln2_out, ln2) = layer_norm(&x, &lw.ln2_gain, &lw.ln2_bias, cfg.layernorm_epsilon);
        let fc_pre = ln2_out.dot(&lw.fc_weight) + &lw.fc_bias;
        let fc_act = fc_pre.mapv(gelu);
        let mlp = fc_act.dot(&lw.proj_weight) + &lw.proj_bias;
        x += &mlp;

        if keep_cache {
            layer_caches.push(LayerCache {
                ln1,
                ln1_out,
                qkv,
                patterns,
                z,
                ln2,
                ln2_out,
                fc_pre,
                fc_act,
            });
        }
    }

    let (final_out, final_ln) =
        layer_norm(&x, &w.final_ln_gain, &w.final_ln_bias, cfg.layernorm_epsilon);
    let logits = final_out.dot(&w.unembedding);

    let capture = capture_heads.then(|| HeadCapture {
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        seq_len: t,
        d_model: d,
        contributions,
        block_outputs,
    });
    let cache = keep_cache.then_some(Cache {
        layers: layer_caches,
        final_ln,
        final_out,
    });
    (logits, capture, cache)
}

/// Accumulates parameter gradients into `grads` given `dlogits` (`T × |V|`).
pub(crate) fn backward(
    cfg: &ModelConfig,
    w: &Weights,
    tokens: &[u32],
    cache: &Cache,
    dlogits: &Array2<f32>,
    grads: &mut Weights,
) {
    let d = cfg.d_model;
    let dh = cfg.d_head;
    let scale = 1.0 / (dh as f32).sqrt();

    grads.unembedding += &cache.final_out.t().dot(dlogits);
    let dfinal = dlogits.dot(&w.unembedding.t());
    let mut dx = layer_norm_backward(
        &dfinal,
        &w.final_ln_gain,
        &cache.final_ln,
        &mut grads.final_ln_gain,
        &mut grads.final_ln_bias,
    );

    for (li, (lw, lc)) in w.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g = &mut grads.layers[li];

        // MLP branch
        g.proj_weight += &lc.fc_act.t().dot(&dx);
        g.proj_bias += &dx.sum_axis(Axis(0));
        let mut dfc = dx.dot(&lw.proj_weight.t());
        dfc.zip_mut_with(&lc.fc_pre, |dv, &pre| *dv *= gelu_grad(pre));
        g.fc_weight += &lc.ln2_out.t().dot(&dfc);
        g.fc_bias += &dfc.sum_axis(Axis(0));
        let dln2 = dfc.dot(&lw.fc_weight.t());
        dx += &layer_norm_backward(&dln2, &lw.ln2_gain, &lc.ln2, &mut g.ln2_gain, &mut g.ln2_bias);

        // attention branch
        g.out_weight += &lc.z.t().dot(&dx);
        g.out_bias += &dx.sum_axis(Axis(0));
        let dz = dx.dot(&lw.out_weight.t());
        let mut dqkv = Array2::<f32>::zeros(lc.qkv.dim());
        for h in 0..cfg.n_heads {
            let (qc, kc, vc) = (h * dh, d + h * dh, 2 * d + h * dh);
            let q = lc.qkv.slice(s![.., qc..qc + dh]);
            let k = lc.qkv.slice(s![.., kc..kc + dh]);
            let v = lc.qkv.slice(s![.., vc..vc + dh]);
            let a = &lc.patterns[h];
            let dzh = dz.slice(s![.., h * dh..(h + 1) * dh]);
            let da = dzh.dot(&v.t());
            dqkv.slice_mut(s![.., vc..vc + dh]).assign(&a.t().dot(&dzh));
            let mut dscores = Array2::<f32>::zeros(a.dim());
            for i in 0..a.nrows() {
                let ar: ArrayView1<f32> = a.row(i);
                let dar = da.row(i);
                let inner: f32 = ar.iter().zip(dar).take(i + 1).map(|(p, g)| p * g).sum();
                for j in 0..=i {
                    dscores[[i, j]] = ar[j] * (dar[j] - inner) * scale;
                }
            }
            dqkv.slice_mut(s![.., qc..qc + dh]).assign(&dscores.dot(&k));
            dqkv.slice_mut(s![.., kc..kc + dh]).assign(&dscores.t().dot(&q));
        }
        g.qkv_weight += &lc.ln1_out.t().dot(&dqkv);
        g.qkv_bias += &dqkv.sum_axis(Axis(0));
        let dln1 = dqkv.dot(&lw.qkv_weight.t());
        dx += &layer_norm_backward(&dln1, &lw.ln1_gain, &lc.ln1, &mut g.ln1_gain, &mut g.ln1_bias);
    }

    for (p, &tok) in tokens.iter().enumerate() {
        let row = dx.row(p);
        let mut te = grads.token_embedding.row_mut(tok as usize);
        te += &row;
        let mut pe = grads.position_embedding.row_mut(p);
        pe += &row;
    }
}
