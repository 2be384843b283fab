//! Model container: configuration, variant, parameters, and the
//! teacher-forced forward pass shared by training and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, EOS};
use crate::error::{Error, Result};
use crate::futurecost::{self, FutureCostParams};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::transformer::{self, ModelConfig, TransformerParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    /// Auxiliary future-cost loss only.
    Model1,
    /// Auxiliary loss plus gated fusion of the future context.
    Model2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Model1, Variant::Model2];

    pub fn has_future(self) -> bool {
        self != Variant::Baseline
    }

    pub fn fuses(self) -> bool {
        self == Variant::Model2
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Model1 => "model1",
            Variant::Model2 => "model2",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "model1" => Ok(Variant::Model1),
            "model2" => Ok(Variant::Model2),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected baseline, model1 or model2)"
            ))),
        }
    }
}

/// Uniform samples in `[-bound, bound)`.
pub(crate) fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (2.0 * rng.gen::<f64>() - 1.0) * bound)
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Glorot-uniform `[fan_in, fan_out]` matrix.
pub(crate) fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    init_uniform(rng, &[fan_in, fan_out], bound)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: Variant,
    pub params: ParamStore,
    pub transformer: TransformerParams,
    pub future: Option<FutureCostParams>,
}

impl Model {
    /// Fresh parameters. The encoder-decoder is drawn from its own stream, so
    /// every variant built from the same seed shares identical values there.
    pub fn new(config: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transformer = TransformerParams::init(&config, &mut params, &mut rng);
        let future = variant.has_future().then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            FutureCostParams::init(&config, &mut params, &mut rng, variant.fuses())
        });
        Ok(Model {
            config,
            variant,
            params,
            transformer,
            future,
        })
    }

    /// Rebuilds the parameter layout around stored tensors, checking every
    /// name and shape against what the configuration implies.
    pub fn from_tensors(
        config: ModelConfig,
        variant: Variant,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut model = Model::new(config, variant, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (id, (name, tensor)) in model
            .params
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(tensors)
        {
            let expected = model.params.name(id);
            if name != expected {
                return Err(Error::checkpoint(format!(
                    "tensor {name} found where {expected} was expected"
                )));
            }
            if tensor.shape() != model.params.get(id).shape() {
                return Err(Error::checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = tensor;
        }
        Ok(model)
    }

    /// Parameter ids present in every variant, in store order.
    pub fn shared_param_count(&self) -> usize {
        self.future
            .as_ref()
            .map_or(self.params.len(), |f| f.w_r.index())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Block the future loss from reaching the decoder states it reads.
    pub stop_gradient: bool,
}

/// Graph handles produced by one teacher-forced pass.
#[derive(Clone, Copy, Debug)]
pub struct TeacherForced {
    pub memory: Var,
    /// Top decoder layer `[B, L, d]`, before any fusion.
    pub decoder_states: Var,
    /// Translation scores `[B, L, V]`.
    pub logits: Var,
    /// `F_0..F_{L-1}` as `[B, L, d]`; position `t` predicts `tgt_out[t]`.
    pub future_states: Option<Var>,
    pub future_logits: Option<Var>,
    /// Fusion gates `[B, L, 1]`.
    pub gates: Option<Var>,
}

/// Cell inputs for every teacher-forced position: `F_0` reads `E[</s>]` with
/// the mean source state and `F_t` reads the ground-truth `y_t` with the
/// decoder state that predicted it.
pub fn future_sequence(
    g: &mut Graph,
    model: &Model,
    batch: &Batch,
    memory: Var,
    decoder_states: Var,
) -> Result<Var> {
    let (b, len, d) = (batch.size, batch.tgt_len, model.config.d_model);
    let mean = futurecost::source_mean(g, memory, &batch.src_pad_mask, b)?;
    let mean = g.reshape(mean, &[b, 1, d])?;
    let states = if len > 1 {
        let prev = g.narrow(decoder_states, 1, 0, len - 1)?;
        g.concat(&[mean, prev], 1)?
    } else {
        mean
    };
    let mut tokens = Vec::with_capacity(b * len);
    for r in 0..b {
        tokens.push(EOS);
        tokens.extend_from_slice(&batch.tgt_in_row(r)[1..]);
    }
    let e = futurecost::embed_tokens(g, model, &tokens)?;
    let e = g.reshape(e, &[b, len, d])?;
    Ok(futurecost::cell(g, model, e, states)?.f)
}

pub fn teacher_forced(
    g: &mut Graph,
    model: &Model,
    batch: &Batch,
    opts: ForwardOptions,
) -> Result<TeacherForced> {
    let b = batch.size;
    let memory = transformer::encode(g, model, &batch.src_ids, &batch.src_pad_mask, b)?;
    let decoder_states = transformer::decode(
        g,
        model,
        &batch.tgt_in_ids,
        &batch.tgt_pad_mask,
        memory,
        &batch.src_pad_mask,
        b,
    )?;
    let mut out = TeacherForced {
        memory,
        decoder_states,
        logits: decoder_states,
        future_states: None,
        future_logits: None,
        gates: None,
    };
    let mut top = decoder_states;
    if model.variant.has_future() {
        let (mem, dec) = if opts.stop_gradient {
            (g.detach(memory), g.detach(decoder_states))
        } else {
            (memory, decoder_states)
        };
        let f = future_sequence(g, model, batch, mem, dec)?;
        out.future_states = Some(f);
        out.future_logits = Some(futurecost::future_logits(g, model, f)?);
        if model.variant.fuses() {
            let (fused, gate) = futurecost::fuse_context(g, model, decoder_states, f)?;
            top = fused;
            out.gates = Some(gate);
        }
    }
    out.logits = transformer::output_logits(g, model, top)?;
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::testutil::tiny;
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("model3".parse::<Variant>(), Err(Error::Config(_))));
    }

    #[test]
    fn shared_parameters_do_not_depend_on_variant() {
        let models: Vec<Model> = Variant::ALL.iter().map(|&v| tiny(8, 2, 9, v, 5)).collect();
        let n = models[0].shared_param_count();
        assert_eq!(n, models[0].params.len());
        for m in &models[1..] {
            assert_eq!(m.shared_param_count(), n);
            for (a, b) in models[0].params.iter().zip(m.params.iter()).take(n) {
                assert_eq!(a.1, b.1);
                assert_eq!(a.2, b.2, "{}", a.1);
            }
        }
        assert!(models[1].params.find("future.w_g").is_none());
        assert!(models[2].params.find("future.w_g").is_some());
    }

    #[test]
    fn from_tensors_rejects_a_renamed_tensor() {
        let m = tiny(8, 2, 9, Variant::Model1, 1);
        let mut tensors: Vec<(String, Tensor)> = m
            .params
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect();
        tensors[3].0 = "bogus".into();
        let err = Model::from_tensors(m.config.clone(), m.variant, tensors).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn teacher_forced_outputs_match_variant() {
        let batch =
            Batch::from_ids(&[vec![4, 5, 6], vec![7, 8]], &[vec![4, 5], vec![6, 7, 8]]).unwrap();
        for v in Variant::ALL {
            let m = tiny(8, 2, 9, v, 3);
            let mut g = Graph::eval();
            let out = teacher_forced(&mut g, &m, &batch, ForwardOptions::default()).unwrap();
            assert_eq!(g.shape(out.logits), &[2, 4, 9]);
            assert_eq!(out.future_states.is_some(), v.has_future());
            assert_eq!(out.future_logits.is_some(), v.has_future());
            assert_eq!(out.gates.is_some(), v.fuses());
            if let Some(gate) = out.gates {
                assert_eq!(g.shape(gate), &[2, 4, 1]);
            }
        }
    }
}
