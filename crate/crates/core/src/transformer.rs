//! Post-norm Transformer encoder-decoder and its output head.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::futurecost::FutureConfig;
use crate::model::{init_uniform, xavier, Model};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub use crate::data::causal_mask;

/// Additive score for blocked attention positions. Finite so gradients stay finite.
pub const MASK_VALUE: f64 = -1e9;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Residual and attention dropout.
    pub dropout: f64,
    pub max_len: usize,
    /// Sinusoidal position encodings; switching them off makes the encoder
    /// permutation-equivariant.
    pub positional_encoding: bool,
    /// Reuse the target embedding (transposed) as `W_o`.
    pub tie_output_embedding: bool,
    pub future: FutureConfig,
}

impl ModelConfig {
    /// Small defaults that train in minutes on one core.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            d_model: 64,
            d_ffn: 128,
            n_heads: 2,
            n_layers: 2,
            src_vocab,
            tgt_vocab,
            dropout: 0.1,
            max_len: crate::data::MAX_SEQ_LEN,
            positional_encoding: true,
            tie_output_embedding: false,
            future: FutureConfig::default(),
        }
    }

    /// Transformer-base dimensions.
    pub fn paper(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            d_model: 512,
            d_ffn: 2048,
            n_heads: 8,
            n_layers: 6,
            ..Self::desk(src_vocab, tgt_vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub self_attn: AttentionParams,
    pub ln1: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub ln2: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub ln1: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub ln3: LayerNormParams,
}

/// Parameter handles of the encoder-decoder and its output head.
#[derive(Clone, Debug)]
pub struct TransformerParams {
    pub src_embed: ParamId,
    pub tgt_embed: ParamId,
    pub encoder: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
    /// `W_w`, `[d_model, d_model]`.
    pub out_w: ParamId,
    /// `W_o`, `[d_model, V_tgt]`; absent when tied to the target embedding.
    pub out_o: Option<ParamId>,
}

impl TransformerParams {
    pub fn init(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let emb_bound = (3.0 / d as f64).sqrt();
        let src_embed = store.add(
            "src_embed",
            init_uniform(rng, &[cfg.src_vocab, d], emb_bound),
        );
        let tgt_embed = store.add(
            "tgt_embed",
            init_uniform(rng, &[cfg.tgt_vocab, d], emb_bound),
        );
        let encoder = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncoderLayerParams {
                    self_attn: attention_params(store, rng, &format!("{p}.self_attn"), d),
                    ln1: layer_norm_params(store, &format!("{p}.ln1"), d),
                    ffn: ffn_params(store, rng, &format!("{p}.ffn"), d, cfg.d_ffn),
                    ln2: layer_norm_params(store, &format!("{p}.ln2"), d),
                }
            })
            .collect();
        let decoder = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecoderLayerParams {
                    self_attn: attention_params(store, rng, &format!("{p}.self_attn"), d),
                    ln1: layer_norm_params(store, &format!("{p}.ln1"), d),
                    cross_attn: attention_params(store, rng, &format!("{p}.cross_attn"), d),
                    ln2: layer_norm_params(store, &format!("{p}.ln2"), d),
                    ffn: ffn_params(store, rng, &format!("{p}.ffn"), d, cfg.d_ffn),
                    ln3: layer_norm_params(store, &format!("{p}.ln3"), d),
                }
            })
            .collect();
        let out_w = store.add("out.w_w", xavier(rng, d, d));
        let out_o = (!cfg.tie_output_embedding)
            .then(|| store.add("out.w_o", xavier(rng, d, cfg.tgt_vocab)));
        TransformerParams {
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            out_w,
            out_o,
        }
    }
}

fn attention_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
) -> AttentionParams {
    let mut proj = |name: &str| {
        let w = store.add(format!("{prefix}.w{name}"), xavier(rng, d, d));
        let b = store.add(format!("{prefix}.b{name}"), Tensor::zeros(&[d]));
        (w, b)
    };
    let (wq, bq) = proj("q");
    let (wk, bk) = proj("k");
    let (wv, bv) = proj("v");
    let (wo, bo) = proj("o");
    AttentionParams {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

fn layer_norm_params(store: &mut ParamStore, prefix: &str, d: usize) -> LayerNormParams {
    LayerNormParams {
        gain: store.add(format!("{prefix}.gain"), Tensor::filled(&[d], 1.0)),
        bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
    }
}

fn ffn_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    hidden: usize,
) -> FeedForwardParams {
    FeedForwardParams {
        w1: store.add(format!("{prefix}.w1"), xavier(rng, d, hidden)),
        b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
        w2: store.add(format!("{prefix}.w2"), xavier(rng, hidden, d)),
        b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
    }
}

/// Sinusoidal position table `[len, d]`.
pub fn position_encoding(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[len, d], data).expect("position table shape")
}

/// Additive attention bias `[batch·heads, queries, keys]`.
fn attention_bias(
    batch: usize,
    heads: usize,
    queries: usize,
    key_pad: &[bool],
    causal: bool,
) -> Tensor {
    let keys = key_pad.len() / batch;
    let mut data = Vec::with_capacity(batch * heads * queries * keys);
    for b in 0..batch {
        let pad = &key_pad[b * keys..(b + 1) * keys];
        for _ in 0..heads {
            for i in 0..queries {
                for (j, &is_pad) in pad.iter().enumerate() {
                    let blocked = is_pad || (causal && j > i);
                    data.push(if blocked { MASK_VALUE } else { 0.0 });
                }
            }
        }
    }
    Tensor::new(&[batch * heads, queries, keys], data).expect("bias shape")
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (w, b) = (g.param(store, w), g.param(store, b));
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn split_heads(
    g: &mut Graph,
    x: Var,
    batch: usize,
    len: usize,
    heads: usize,
    dh: usize,
) -> Result<Var> {
    let x = g.reshape(x, &[batch, len, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch * heads, len, dh])
}

/// Scaled dot-product attention with `heads` heads. Returns `[batch, q_len, d]`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    model: &Model,
    p: &AttentionParams,
    query: Var,
    memory: Var,
    bias: Var,
    batch: usize,
    q_len: usize,
    k_len: usize,
) -> Result<Var> {
    let cfg = &model.config;
    let (d, h) = (cfg.d_model, cfg.n_heads);
    let dh = cfg.head_dim();
    let store = &model.params;
    let q = linear(g, store, query, p.wq, p.bq)?;
    let k = linear(g, store, memory, p.wk, p.bk)?;
    let v = linear(g, store, memory, p.wv, p.bv)?;
    let q = split_heads(g, q, batch, q_len, h, dh)?;
    let k = split_heads(g, k, batch, k_len, h, dh)?;
    let v = split_heads(g, v, batch, k_len, h, dh)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let scores = g.add(scores, bias)?;
    let weights = g.softmax(scores);
    let weights = g.dropout(weights, cfg.dropout)?;
    let ctx = g.bmm(weights, v, false)?;
    let ctx = g.reshape(ctx, &[batch, h, q_len, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch, q_len, d])?;
    linear(g, store, ctx, p.wo, p.bo)
}

fn feed_forward(g: &mut Graph, store: &ParamStore, p: &FeedForwardParams, x: Var) -> Result<Var> {
    let h = linear(g, store, x, p.w1, p.b1)?;
    let h = g.relu(h);
    linear(g, store, h, p.w2, p.b2)
}

/// `LN(x + dropout(sublayer))`.
fn residual_norm(
    g: &mut Graph,
    model: &Model,
    x: Var,
    sub: Var,
    ln: &LayerNormParams,
) -> Result<Var> {
    let sub = g.dropout(sub, model.config.dropout)?;
    let sum = g.add(x, sub)?;
    let (gain, bias) = (
        g.param(&model.params, ln.gain),
        g.param(&model.params, ln.bias),
    );
    g.layer_norm(sum, gain, bias, LN_EPS)
}

fn embed(g: &mut Graph, model: &Model, table: ParamId, ids: &[usize], batch: usize) -> Result<Var> {
    let cfg = &model.config;
    let len = ids.len() / batch;
    if len > cfg.max_len + 1 {
        return Err(Error::input(format!(
            "sequence of length {len} exceeds max_len {}",
            cfg.max_len
        )));
    }
    let t = g.param(&model.params, table);
    let x = g.embedding(t, ids)?;
    let x = g.scale(x, (cfg.d_model as f64).sqrt());
    let mut x = g.reshape(x, &[batch, len, cfg.d_model])?;
    if cfg.positional_encoding {
        let pe = g.constant(position_encoding(len, cfg.d_model));
        x = g.add(x, pe)?;
    }
    g.dropout(x, cfg.dropout)
}

fn check_ids<T>(ids: &[T], mask: &[bool], batch: usize) -> Result<usize> {
    if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) || mask.len() != ids.len() {
        return Err(Error::input(format!(
            "{} ids / {} mask entries do not form {batch} rows",
            ids.len(),
            mask.len()
        )));
    }
    Ok(ids.len() / batch)
}

/// Encoder stack over `src_ids` (`[batch, J]` flattened). Returns `H_e^N` as `[batch, J, d]`.
pub fn encode(
    g: &mut Graph,
    model: &Model,
    src_ids: &[usize],
    src_pad_mask: &[bool],
    batch: usize,
) -> Result<Var> {
    let len = check_ids(src_ids, src_pad_mask, batch)?;
    if len > model.config.max_len {
        return Err(Error::input(format!(
            "source of length {len} exceeds max_len {}",
            model.config.max_len
        )));
    }
    let p = &model.transformer;
    let mut h = embed(g, model, p.src_embed, src_ids, batch)?;
    let bias = g.constant(attention_bias(
        batch,
        model.config.n_heads,
        len,
        src_pad_mask,
        false,
    ));
    for layer in &p.encoder {
        let a = multi_head_attention(g, model, &layer.self_attn, h, h, bias, batch, len, len)?;
        let c = residual_norm(g, model, h, a, &layer.ln1)?;
        let f = feed_forward(g, &model.params, &layer.ffn, c)?;
        h = residual_norm(g, model, c, f, &layer.ln2)?;
    }
    Ok(h)
}

/// Decoder stack over teacher-forced inputs `tgt_in_ids` (`[batch, I]`),
/// attending causally to itself and to `memory = H_e^N`. Returns `[batch, I, d]`.
pub fn decode(
    g: &mut Graph,
    model: &Model,
    tgt_in_ids: &[usize],
    tgt_pad_mask: &[bool],
    memory: Var,
    src_pad_mask: &[bool],
    batch: usize,
) -> Result<Var> {
    let len = check_ids(tgt_in_ids, tgt_pad_mask, batch)?;
    let src_len = check_ids(src_pad_mask, src_pad_mask, batch)?;
    if g.shape(memory) != [batch, src_len, model.config.d_model] {
        return Err(Error::Dimension {
            op: "decode",
            lhs: g.shape(memory).to_vec(),
            rhs: vec![batch, src_len, model.config.d_model],
        });
    }
    let heads = model.config.n_heads;
    let p = &model.transformer;
    let mut h = embed(g, model, p.tgt_embed, tgt_in_ids, batch)?;
    let self_bias = g.constant(attention_bias(batch, heads, len, tgt_pad_mask, true));
    let cross_bias = g.constant(attention_bias(batch, heads, len, src_pad_mask, false));
    for layer in &p.decoder {
        let a = multi_head_attention(g, model, &layer.self_attn, h, h, self_bias, batch, len, len)?;
        let c = residual_norm(g, model, h, a, &layer.ln1)?;
        let x = multi_head_attention(
            g,
            model,
            &layer.cross_attn,
            c,
            memory,
            cross_bias,
            batch,
            len,
            src_len,
        )?;
        let dd = residual_norm(g, model, c, x, &layer.ln2)?;
        let f = feed_forward(g, &model.params, &layer.ffn, dd)?;
        h = residual_norm(g, model, dd, f, &layer.ln3)?;
    }
    Ok(h)
}

/// `tanh(H·W_w)·W_o`: unnormalized translation scores over the target vocabulary.
pub fn output_logits(g: &mut Graph, model: &Model, h: Var) -> Result<Var> {
    let p = &model.transformer;
    let ww = g.param(&model.params, p.out_w);
    let wo = match p.out_o {
        Some(id) => g.param(&model.params, id),
        None => {
            let e = g.param(&model.params, p.tgt_embed);
            g.permute(e, &[1, 0])?
        }
    };
    let x = g.matmul(h, ww)?;
    let x = g.tanh(x);
    g.matmul(x, wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::tiny;
    use crate::model::Variant;

    #[test]
    fn position_table_values() {
        let pe = position_encoding(2, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(pe.get(&[1, 0]), 0.8414709848078965);
        assert_eq!(pe.get(&[1, 1]), 0.5403023058681398);
        assert!((pe.get(&[1, 2]) - 0.009999833334166664).abs() < 1e-17);
    }

    #[test]
    fn config_checks() {
        assert!(ModelConfig::desk(10, 10).validate().is_ok());
        assert!(ModelConfig::paper(10, 10).validate().is_ok());
        let odd = ModelConfig {
            n_heads: 3,
            ..ModelConfig::desk(10, 10)
        };
        assert!(matches!(odd.validate(), Err(Error::Config(_))));
        let empty = ModelConfig::desk(0, 10);
        assert!(matches!(empty.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn attention_bias_blocks_padding_and_future() {
        let b = attention_bias(1, 1, 2, &[false, false], true);
        assert_eq!(b.data(), &[0.0, MASK_VALUE, 0.0, 0.0]);
        let b = attention_bias(1, 1, 1, &[false, true], false);
        assert_eq!(b.data(), &[0.0, MASK_VALUE]);
    }

    #[test]
    fn tied_output_uses_target_embedding() {
        let mut m = tiny(4, 2, 7, Variant::Baseline, 2);
        m.config.tie_output_embedding = true;
        let m = Model::new(m.config.clone(), Variant::Baseline, 2).unwrap();
        assert!(m.transformer.out_o.is_none());
        let mut g = Graph::eval();
        let h = g.constant(Tensor::zeros(&[1, 4]));
        let logits = output_logits(&mut g, &m, h).unwrap();
        assert_eq!(g.shape(logits), &[1, 7]);
    }

    #[test]
    fn overlong_source_is_rejected() {
        let mut m = tiny(4, 2, 7, Variant::Baseline, 2);
        m.config.max_len = 3;
        let mut g = Graph::eval();
        let err = encode(&mut g, &m, &[4; 4], &[false; 4], 1).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }
}
