mod common;

use safa::encoders::{EncodedSeq, EncoderOutput};
use safa::numeric::{Rng, Tape, Tensor};
use safa::Error;

#[test]
fn aggregate_matches_dense_oracle() {
    let err = common::safa_oracle_error(150);
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn heads_are_convex_combinations_of_value_rows() {
    let (u, d, k) = (5, 6, 3);
    let (store, safa) = common::safa_module(k, d, 21);
    let features: Tensor<f64> = Rng::new(22).normal_tensor(&[u + 1, d], 2.0);
    let mask = vec![true, true, false, true, true, false];
    let out = EncoderOutput {
        features: features.clone(),
        mask: mask.clone(),
    };
    let (heads, trace) = safa.aggregate(&store, &out).unwrap();
    for (i, h) in safa.heads().iter().enumerate() {
        let alpha = trace.weights.row(i);
        assert!(alpha.iter().all(|&a| a >= 0.0));
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (j, &ok) in mask.iter().enumerate() {
            if !ok {
                assert_eq!(alpha[j], 0.0);
            }
        }
        let values = features.matmul(&store.get(h.value).value).unwrap();
        for c in 0..d {
            let rebuilt: f64 = (0..=u).map(|j| alpha[j] * values.at(j, c)).sum();
            assert!((rebuilt - heads.head(i)[c]).abs() < 1e-5);
        }
    }
}

#[test]
fn width_mismatch_is_a_shape_error() {
    let (store, safa) = common::safa_module(2, 4, 0);
    let out = EncoderOutput {
        features: Tensor::<f64>::zeros(&[3, 5]),
        mask: vec![true; 3],
    };
    assert!(matches!(safa.aggregate(&store, &out), Err(Error::Shape(_))));
}

#[test]
fn one_module_serves_both_modalities() {
    let model = common::shared_model();
    let safa_params = model.store.iter().filter(|p| p.name.starts_with("safa.")).count();
    assert_eq!(safa_params, model.safa.num_heads() * 3);
    let (via_image, via_text) = common::shared_embeddings(&model);
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&via_image), bits(&via_text));
}

#[test]
fn gradient_reaches_every_head() {
    let (store, safa) = common::safa_module(4, 5, 3);
    let features: Tensor<f64> = Rng::new(4).normal_tensor(&[4, 5], 1.0);
    let tape = Tape::new();
    let vars = tape.bind_all(&store);
    let seq = EncodedSeq {
        features: tape.constant(features),
        mask: vec![true; 4],
    };
    let (rows, _) = safa.aggregate_seq(&vars, &seq).unwrap();
    let weights = Rng::new(5).normal_tensor(&[4, 5], 1.0);
    let loss = rows.mul_const(&weights).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    for h in safa.heads() {
        for id in [h.query, h.key, h.value] {
            let g = grads.wrt(vars[id.0]).expect("head parameter has a gradient");
            assert!(g.data().iter().any(|&x| x != 0.0), "{}", store.get(id).name);
        }
    }
}
