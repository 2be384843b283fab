use fcnmt::data::{Batch, BOS, EOS, PAD};
use fcnmt::decoding::{Scorer, TransformerScorer};
use fcnmt::model::{teacher_forced, ForwardOptions, Model, Variant};
use fcnmt::tensor::{Graph, Tensor};
use fcnmt::transformer::{self, ModelConfig};
use proptest::prelude::*;

const V: usize = 11;

fn model(variant: Variant, positional: bool, seed: u64) -> Model {
    let cfg = ModelConfig {
        d_model: 8,
        d_ffn: 16,
        n_heads: 2,
        n_layers: 2,
        dropout: 0.0,
        positional_encoding: positional,
        ..ModelConfig::desk(V, V)
    };
    Model::new(cfg, variant, seed).unwrap()
}

fn sentence() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(4..V, 1..7)
}

/// `[B, L, ·]` row `r`, first `len` positions.
fn rows(t: &Tensor, r: usize, len: usize) -> Vec<f64> {
    let (l, w) = (t.shape()[1], t.shape()[2]);
    t.data()[r * l * w..(r * l + len) * w].to_vec()
}

fn forward(
    m: &Model,
    src: &[Vec<usize>],
    tgt: &[Vec<usize>],
) -> (Graph, fcnmt::model::TeacherForced) {
    let batch = Batch::from_ids(src, tgt).unwrap();
    let mut g = Graph::eval();
    let out = teacher_forced(&mut g, m, &batch, ForwardOptions::default()).unwrap();
    (g, out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn padding_is_inert(src in sentence(), tgt in sentence(), other_src in sentence(), other_tgt in sentence(), seed in 0u64..4) {
        for v in Variant::ALL {
            let m = model(v, true, seed);
            let (g1, alone) = forward(&m, std::slice::from_ref(&src), std::slice::from_ref(&tgt));
            let long_src = [other_src.clone(), vec![5; 9]].concat();
            let long_tgt = [other_tgt.clone(), vec![6; 9]].concat();
            let (g2, batched) = forward(&m, &[long_src, src.clone()], &[long_tgt, tgt.clone()]);
            let n = tgt.len() + 1;
            prop_assert_eq!(rows(g1.value(alone.logits), 0, n), rows(g2.value(batched.logits), 1, n));
            if let (Some(a), Some(b)) = (alone.future_logits, batched.future_logits) {
                prop_assert_eq!(rows(g1.value(a), 0, n), rows(g2.value(b), 1, n));
            }
        }
    }

    #[test]
    fn decoder_is_causal(src in sentence(), tgt in sentence(), tail in sentence(), cut in 0usize..6) {
        let cut = cut.min(tgt.len());
        let changed: Vec<usize> = tgt[..cut].iter().copied().chain(tail.iter().copied()).collect();
        for v in Variant::ALL {
            let m = model(v, true, 1);
            let (g1, a) = forward(&m, std::slice::from_ref(&src), std::slice::from_ref(&tgt));
            let (g2, b) = forward(&m, std::slice::from_ref(&src), std::slice::from_ref(&changed));
            // tgt_in positions 0..=cut agree, so outputs there must too.
            prop_assert_eq!(rows(g1.value(a.logits), 0, cut + 1), rows(g2.value(b.logits), 0, cut + 1));
        }
    }

    #[test]
    fn encoder_without_positions_is_permutation_equivariant(src in prop::collection::vec(4..V, 2..7), rot in 1usize..6) {
        let m = model(Variant::Baseline, false, 2);
        let rot = rot % src.len();
        let mut permuted = src.clone();
        permuted.rotate_left(rot);
        let encode = |s: &[usize]| {
            let mut g = Graph::eval();
            let mem = transformer::encode(&mut g, &m, s, &vec![false; s.len()], 1).unwrap();
            g.value(mem).data().to_vec()
        };
        let (a, b) = (encode(&src), encode(&permuted));
        let d = m.config.d_model;
        for j in 0..src.len() {
            let k = (j + src.len() - rot) % src.len();
            for (x, y) in a[j * d..(j + 1) * d].iter().zip(&b[k * d..(k + 1) * d]) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

/// Forcing the reference through the decode-time scorer reproduces the
/// teacher-forced future contexts and output distributions.
#[test]
fn decode_time_future_matches_teacher_forcing() {
    let src = vec![4, 7, 9, 5];
    let tgt = vec![6, 8, 10];
    for v in Variant::ALL {
        let m = model(v, true, 3);
        let (g, out) = forward(&m, std::slice::from_ref(&src), std::slice::from_ref(&tgt));
        let d = m.config.d_model;
        let (scorer, mut states) = TransformerScorer::new(&m, std::slice::from_ref(&src)).unwrap();
        let mut state = states.remove(0);
        let mut prefix = vec![BOS];
        let logp = g.value(out.logits);
        let vsize = logp.last_dim();
        for (t, &next) in tgt.iter().chain([EOS].iter()).enumerate() {
            if let Some(f) = out.future_states {
                let want = &g.value(f).data()[t * d..(t + 1) * d];
                if v.fuses() {
                    assert_eq!(state.future.as_deref().unwrap(), want, "{v} F_{t}");
                }
            } else {
                assert!(state.future.is_none());
            }
            let scored = scorer.score(&[&prefix], &[&state]).unwrap();
            let row = &logp.data()[t * vsize..(t + 1) * vsize];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (a, b) in scored[0].0.iter().zip(row) {
                assert!((a - (b - lse)).abs() < 1e-12, "{v} step {t}");
            }
            if next == EOS {
                break;
            }
            state = scorer
                .advance(&[(&state, &scored[0].1, next)])
                .unwrap()
                .remove(0);
            prefix.push(next);
        }
    }
}

#[test]
fn teacher_forcing_shifts_targets() {
    let b = Batch::from_ids(&[vec![4], vec![4, 5, 6]], &[vec![7, 8], vec![9]]).unwrap();
    assert_eq!(b.tgt_in_row(0), &[BOS, 7, 8]);
    assert_eq!(b.tgt_in_row(1), &[BOS, 9, PAD]);
    assert_eq!(b.tgt_out_row(1), &[9, EOS, PAD]);
}
