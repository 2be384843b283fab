//! Future-context cell, its prediction head, and the fusion gate.
//!
//! The cell reads a target token embedding `E[y]` and a decoder state `H` and
//! produces a future context `F` that is trained to predict the token after
//! `y`. All operations accept any number of leading axes (`[B, d]` or
//! `[B, L, d]`).

use rand_chacha::ChaCha8Rng;

use crate::data::EOS;
use crate::error::{Error, Result};
use crate::model::{init_uniform, xavier, Model};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::transformer::ModelConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FutureConfig {
    /// Add bias vectors to the three cell pre-activations.
    pub biases: bool,
    /// Give the cell its own target embedding instead of sharing the decoder's.
    pub separate_embedding: bool,
    /// Apply the model dropout rate to the candidate state `S`.
    pub candidate_dropout: bool,
}

#[derive(Clone, Debug)]
pub struct FutureCostParams {
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub w: ParamId,
    pub u: ParamId,
    /// Biases of `R`, `Z` and `S`, when enabled.
    pub biases: Option<[ParamId; 3]>,
    pub embed: Option<ParamId>,
    /// Prediction head, distinct from the translation head.
    pub head_w: ParamId,
    pub head_o: ParamId,
    /// `W_g`, `[2·d_model, 1]`; only present when the context is fused.
    pub gate: Option<ParamId>,
}

impl FutureCostParams {
    pub fn init(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        with_gate: bool,
    ) -> Self {
        let d = cfg.d_model;
        let mut square = |name: &str| store.add(format!("future.{name}"), xavier(rng, d, d));
        let (w_r, u_r, w_z, u_z, w, u) = (
            square("w_r"),
            square("u_r"),
            square("w_z"),
            square("u_z"),
            square("w"),
            square("u"),
        );
        let biases = cfg.future.biases.then(|| {
            ["b_r", "b_z", "b"].map(|n| store.add(format!("future.{n}"), Tensor::zeros(&[d])))
        });
        let embed = cfg.future.separate_embedding.then(|| {
            let bound = (3.0 / d as f64).sqrt();
            store.add(
                "future.embed",
                init_uniform(rng, &[cfg.tgt_vocab, d], bound),
            )
        });
        let head_w = store.add("future.head_w", xavier(rng, d, d));
        let head_o = store.add("future.head_o", xavier(rng, d, cfg.tgt_vocab));
        let gate = with_gate.then(|| store.add("future.w_g", xavier(rng, 2 * d, 1)));
        FutureCostParams {
            w_r,
            u_r,
            w_z,
            u_z,
            w,
            u,
            biases,
            embed,
            head_w,
            head_o,
            gate,
        }
    }
}

/// Every intermediate of one cell application.
#[derive(Clone, Copy, Debug)]
pub struct CellOutput {
    pub r: Var,
    pub z: Var,
    pub s: Var,
    pub f: Var,
}

fn future_params(model: &Model) -> Result<&FutureCostParams> {
    model.future.as_ref().ok_or_else(|| {
        Error::Contract(format!(
            "{} model has no future-cost parameters",
            model.variant
        ))
    })
}

/// Cell input embeddings `[n, d]` for `tokens`.
pub fn embed_tokens(g: &mut Graph, model: &Model, tokens: &[usize]) -> Result<Var> {
    let p = future_params(model)?;
    let table = g.param(
        &model.params,
        p.embed.unwrap_or(model.transformer.tgt_embed),
    );
    g.embedding(table, tokens)
}

/// `x·W + h·U (+ b)`.
fn gate_input(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    w: ParamId,
    h: Var,
    u: ParamId,
    b: Option<ParamId>,
) -> Result<Var> {
    let (w, u) = (g.param(store, w), g.param(store, u));
    let a = g.matmul(x, w)?;
    let c = g.matmul(h, u)?;
    let sum = g.add(a, c)?;
    match b {
        Some(b) => {
            let b = g.param(store, b);
            g.add(sum, b)
        }
        None => Ok(sum),
    }
}

/// Applies the gated cell to embeddings `e` and decoder states `h` of equal shape.
pub fn cell(g: &mut Graph, model: &Model, e: Var, h: Var) -> Result<CellOutput> {
    let p = future_params(model)?;
    if g.shape(e) != g.shape(h) {
        return Err(Error::Dimension {
            op: "future cell",
            lhs: g.shape(e).to_vec(),
            rhs: g.shape(h).to_vec(),
        });
    }
    let store = &model.params;
    let bias = |i: usize| p.biases.map(|b| b[i]);
    let r = gate_input(g, store, e, p.w_r, h, p.u_r, bias(0))?;
    let r = g.sigmoid(r);
    let z = gate_input(g, store, e, p.w_z, h, p.u_z, bias(1))?;
    let z = g.sigmoid(z);
    let rh = g.mul(r, h)?;
    let s = gate_input(g, store, e, p.w, rh, p.u, bias(2))?;
    let mut s = g.relu(s);
    if model.config.future.candidate_dropout {
        s = g.dropout(s, model.config.dropout)?;
    }
    let f = g.interpolate(z, s, h)?;
    Ok(CellOutput { r, z, s, f })
}

/// `F` for one token per row of `h` (`[B, d]`).
pub fn future_step(g: &mut Graph, model: &Model, tokens: &[usize], h: Var) -> Result<Var> {
    let rows = g.shape(h)[0];
    if g.shape(h).len() != 2 || tokens.len() != rows {
        return Err(Error::Dimension {
            op: "future_step",
            lhs: g.shape(h).to_vec(),
            rhs: vec![tokens.len()],
        });
    }
    let e = embed_tokens(g, model, tokens)?;
    Ok(cell(g, model, e, h)?.f)
}

/// Masked mean over source positions: `[B, J, d]` to `[B, d]`.
pub fn source_mean(g: &mut Graph, memory: Var, src_pad_mask: &[bool], batch: usize) -> Result<Var> {
    let shape = g.shape(memory).to_vec();
    if shape.len() != 3 || shape[0] != batch || src_pad_mask.len() != batch * shape[1] {
        return Err(Error::Dimension {
            op: "source_mean",
            lhs: shape,
            rhs: vec![batch, src_pad_mask.len()],
        });
    }
    let (len, d) = (shape[1], shape[2]);
    let mut weights = Vec::with_capacity(batch * len);
    for row in src_pad_mask.chunks(len) {
        let count = row.iter().filter(|&&p| !p).count();
        if count == 0 {
            return Err(Error::input("source row with no tokens"));
        }
        weights.extend(
            row.iter()
                .map(|&p| if p { 0.0 } else { 1.0 / count as f64 }),
        );
    }
    let w = g.constant(Tensor::new(&[batch, 1, len], weights)?);
    let mean = g.bmm(w, memory, false)?;
    g.reshape(mean, &[batch, d])
}

/// `F_0`: the cell applied to `E[</s>]` and the mean encoder state.
pub fn init_future_state(
    g: &mut Graph,
    model: &Model,
    memory: Var,
    src_pad_mask: &[bool],
    batch: usize,
) -> Result<Var> {
    let mean = source_mean(g, memory, src_pad_mask, batch)?;
    future_step(g, model, &vec![EOS; batch], mean)
}

/// `tanh(F·𝒲_w)·𝒲_o`: scores for the token after the one `F` was built from.
pub fn future_logits(g: &mut Graph, model: &Model, f: Var) -> Result<Var> {
    let p = future_params(model)?;
    let (hw, ho) = (
        g.param(&model.params, p.head_w),
        g.param(&model.params, p.head_o),
    );
    let x = g.matmul(f, hw)?;
    let x = g.tanh(x);
    g.matmul(x, ho)
}

/// `H̄ = H + g·F` with the scalar gate `g = σ([H : F]·W_g)`. Returns `(H̄, g)`.
pub fn fuse_context(g: &mut Graph, model: &Model, h: Var, f: Var) -> Result<(Var, Var)> {
    let p = future_params(model)?;
    let wg = p
        .gate
        .ok_or_else(|| Error::Contract(format!("{} model has no fusion gate", model.variant)))?;
    let axis = g.shape(h).len() - 1;
    let hf = g.concat(&[h, f], axis)?;
    let wg = g.param(&model.params, wg);
    let gate = g.matmul(hf, wg)?;
    let gate = g.sigmoid(gate);
    let scaled = g.row_scale(f, gate)?;
    let fused = g.add(h, scaled)?;
    Ok((fused, gate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::{set, tiny};
    use crate::model::Variant;

    const EYE2: [f64; 4] = [1.0, 0.0, 0.0, 1.0];
    const SIG1: f64 = 0.7310585786300049;

    fn identity_cell() -> Model {
        let mut m = tiny(2, 1, 5, Variant::Model2, 0);
        for name in ["w_r", "u_r", "w_z", "u_z", "w", "u"] {
            set(&mut m, &format!("future.{name}"), &EYE2);
        }
        let mut emb = m.params.get(m.transformer.tgt_embed).data().to_vec();
        emb[8..10].copy_from_slice(&[1.0, 0.0]);
        set(&mut m, "tgt_embed", &emb);
        m
    }

    #[test]
    fn identity_weights_hand_case() {
        let m = identity_cell();
        let mut g = Graph::eval();
        let h = g.constant(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap());
        let e = embed_tokens(&mut g, &m, &[4]).unwrap();
        let out = cell(&mut g, &m, e, h).unwrap();
        let close = |v: Var, want: [f64; 2]| {
            for (a, b) in g.value(v).data().iter().zip(want) {
                assert!((a - b).abs() < 1e-15, "{a} vs {b}");
            }
        };
        close(out.r, [SIG1, SIG1]);
        close(out.z, [SIG1, SIG1]);
        close(out.s, [1.0, SIG1]);
        close(out.f, [SIG1, 0.8033880667585181]);
        let f = future_step(&mut g, &m, &[4], h).unwrap();
        assert_eq!(g.value(f).data(), g.value(out.f).data());
    }

    #[test]
    fn gate_hand_case() {
        let mut m = identity_cell();
        set(&mut m, "future.w_g", &[0.1, 0.0, 0.0, 0.05]);
        let mut g = Graph::eval();
        let h = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let f = g.constant(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap());
        let (fused, gate) = fuse_context(&mut g, &m, h, f).unwrap();
        assert!((g.value(gate).item() - 0.574442516811659).abs() < 1e-15);
        for (a, b) in g
            .value(fused)
            .data()
            .iter()
            .zip([2.723327550434977, 4.297770067246637])
        {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn prediction_head_hand_case() {
        let mut m = tiny(2, 1, 3, Variant::Model1, 0);
        set(&mut m, "future.head_w", &EYE2);
        set(&mut m, "future.head_o", &[1.0, 2.0, 0.0, 0.0, 1.0, -1.0]);
        let mut g = Graph::eval();
        let f = g.constant(Tensor::new(&[1, 2], vec![0.5, -1.0]).unwrap());
        let logits = future_logits(&mut g, &m, f).unwrap();
        let want = [0.46211715726000974, 0.16264015856425462, 0.7615941559557649];
        for (a, b) in g.value(logits).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn source_mean_skips_padding_and_rejects_empty_rows() {
        let mut g = Graph::eval();
        let mem =
            g.constant(Tensor::new(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]).unwrap());
        let mean = source_mean(&mut g, mem, &[false, false, true], 1).unwrap();
        assert_eq!(g.value(mean).data(), &[2.0, 3.0]);
        assert!(matches!(
            source_mean(&mut g, mem, &[true; 3], 1),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn baseline_has_no_cell() {
        let m = tiny(2, 1, 5, Variant::Baseline, 0);
        let mut g = Graph::eval();
        let h = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            future_step(&mut g, &m, &[4], h),
            Err(Error::Contract(_))
        ));
    }
}
