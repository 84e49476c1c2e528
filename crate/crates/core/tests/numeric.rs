mod common;

use common::{grad_error, readout, Case};
use proptest::prelude::*;
use safa::encoders::{ImageSample, TextSample};
use safa::losses::LossConfig;
use safa::model::{Model, ModelConfig};
use safa::numeric::{cosine, softmax_rows, Adam, Real, Rng, Tape, Tensor, Var};
use safa::Result;

macro_rules! op_case {
    ($name:ident, [$($shape:expr),+], |$tape:ident, $v:ident| $body:expr) => {
        struct $name;
        impl Case for $name {
            fn shapes(&self) -> Vec<Vec<usize>> {
                vec![$($shape.to_vec()),+]
            }
            #[allow(unused_variables)]
            fn build<'t, T: Real>(&self, $tape: &'t Tape<T>, $v: &[Var<'t, T>]) -> Result<Var<'t, T>> {
                $body
            }
        }
    };
}

op_case!(MatMul, [[3, 4], [4, 2]], |t, v| readout(v[0].matmul(v[1])?));
op_case!(MatMulT, [[3, 4], [2, 4]], |t, v| readout(v[0].matmul_t(v[1])?));
op_case!(AddSubMul, [[2, 3], [2, 3]], |t, v| readout(v[0].add(v[1])?.mul(v[0])?.sub(v[1])?));
op_case!(RowBias, [[3, 4], [4]], |t, v| readout(v[0].add_row_bias(v[1])?.exp()));
op_case!(MulCol, [[3, 4], [3, 1]], |t, v| readout(v[0].mul_col(v[1])?));
op_case!(RowDot, [[3, 4], [3, 4]], |t, v| readout(v[0].row_dot(v[1])?));
op_case!(Softmax, [[3, 5]], |t, v| readout(v[0].softmax_rows(T::of(0.8))?));
op_case!(MaskedSoftmax, [[3, 5]], |t, v| {
    readout(v[0].masked_softmax_rows(T::of(0.5), Some(&[true, false, true, true, false]))?)
});
op_case!(LogSoftmax, [[3, 5]], |t, v| readout(v[0].log_softmax_rows()?));
op_case!(Gelu, [[4, 3]], |t, v| readout(v[0].gelu()));
op_case!(LayerNorm, [[3, 6], [6], [6]], |t, v| {
    readout(v[0].layer_norm(v[1], v[2], T::of(1e-5))?)
});
op_case!(Normalize, [[3, 4]], |t, v| readout(v[0].normalize_rows(T::of(1e-12))));
op_case!(Gather, [[5, 3]], |t, v| readout(v[0].select_rows(&[4, 0, 4, 2])?.exp()));
op_case!(Slices, [[3, 6]], |t, v| {
    let a = v[0].slice_cols(0, 2)?;
    let b = v[0].slice_cols(3, 3)?.gelu();
    readout(Var::concat_cols(&[b, a])?)
});
op_case!(Stack, [[2, 3], [1, 3]], |t, v| {
    readout(Var::concat_rows(&[v[1], v[0].row(1)?, v[0]])?.transpose().exp())
});
op_case!(Pick, [[3, 4]], |t, v| v[0].log_softmax_rows()?.pick_per_row(&[3, 0, 1]).map(Var::mean));

fn check<C: Case>(case: C, name: &str) {
    for seed in 0..3 {
        let e32 = grad_error::<f32>(&case, seed);
        let e64 = grad_error::<f64>(&case, seed);
        assert!(e32 < 1e-3, "{name} f32 seed {seed}: {e32:e}");
        assert!(e64 < 1e-5, "{name} f64 seed {seed}: {e64:e}");
    }
}

#[test]
fn every_op_matches_finite_differences() {
    check(MatMul, "matmul");
    check(MatMulT, "matmul_t");
    check(AddSubMul, "add/sub/mul");
    check(RowBias, "add_row_bias");
    check(MulCol, "mul_col");
    check(RowDot, "row_dot");
    check(Softmax, "softmax");
    check(MaskedSoftmax, "masked softmax");
    check(LogSoftmax, "log_softmax");
    check(Gelu, "gelu");
    check(LayerNorm, "layer_norm");
    check(Normalize, "normalize_rows");
    check(Gather, "select_rows");
    check(Slices, "slice/concat cols");
    check(Stack, "row/concat rows/transpose");
    check(Pick, "pick_per_row");
}

#[test]
fn trivial_gradients() {
    let tape = Tape::<f32>::new();
    let w = tape.variable(Tensor::vector(vec![0.3, -2.0, 5.0]));
    let g = tape.backward(w.sum()).unwrap();
    assert_eq!(g.wrt(w).unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::<f64>::new();
    let w = tape.variable(Tensor::from_f64_rows(&[&[0.3, -2.0, 5.0]]));
    let n = w.normalize_rows(1e-12);
    let cos = n.row_dot(n).unwrap().sum();
    let g = tape.backward(cos).unwrap();
    assert!(g.wrt(w).unwrap().data().iter().all(|x| x.abs() < 1e-12));
}

fn naive(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            for t in 0..k {
                c[i * p + j] += a[i * k + t] * b[t * p + j];
            }
        }
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_agrees_with_triple_loop(a in prop::collection::vec(-3.0f64..3.0, 35), b in prop::collection::vec(-3.0f64..3.0, 15)) {
        let ta = Tensor::<f32>::new(vec![7, 5], a.iter().map(|&x| x as f32).collect()).unwrap();
        let tb = Tensor::<f32>::new(vec![5, 3], b.iter().map(|&x| x as f32).collect()).unwrap();
        let got = ta.matmul(&tb).unwrap();
        let a32: Vec<f64> = ta.data().iter().map(|&x| f64::from(x)).collect();
        let b32: Vec<f64> = tb.data().iter().map(|&x| f64::from(x)).collect();
        let want = naive(&a32, &b32, 7, 5, 3);
        for (g, w) in got.data().iter().zip(&want) {
            prop_assert!((f64::from(*g) - w).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(x in prop::collection::vec(-50.0f32..50.0, 12)) {
        let t = Tensor::new(vec![3, 4], x).unwrap();
        let s = softmax_rows(&t, 1.0).unwrap();
        for r in 0..3 {
            let sum: f32 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_is_scale_invariant(
        u in prop::collection::vec(-5.0f64..5.0, 6),
        v in prop::collection::vec(-5.0f64..5.0, 6),
        alpha in 0.01f64..100.0,
        beta in 0.01f64..100.0,
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let su: Vec<f64> = u.iter().map(|x| x * alpha).collect();
        let sv: Vec<f64> = v.iter().map(|x| x * beta).collect();
        prop_assert!((cosine(&su, &sv).unwrap() - cosine(&u, &v).unwrap()).abs() < 1e-6);
    }
}

fn tiny() -> ModelConfig {
    safa::diagnostics::check_model_config()
}

fn batch(seed: u64) -> (Vec<ImageSample>, Vec<TextSample>, Vec<usize>) {
    safa::diagnostics::check_batch(&tiny(), seed)
}

fn trajectory(seed: u64) -> Vec<u32> {
    let mut model = Model::<f32>::new(&tiny(), seed).unwrap();
    let (images, texts, labels) = batch(seed);
    let cfg = LossConfig {
        num_identities: 3,
        ..LossConfig::default()
    };
    let adam = Adam::default();
    let mut bits = Vec::new();
    for _ in 0..10 {
        let tape = Tape::new();
        let vars = tape.bind_all(&model.store);
        let terms = model.loss(&tape, &vars, &images, &texts, &labels, &cfg, None).unwrap();
        bits.push(terms.total.item().to_bits());
        let g = tape.backward(terms.total).unwrap();
        model.store.accumulate(&g);
        drop(tape);
        adam.step(&mut model.store);
        model.store.zero_grad();
    }
    bits.extend(model.store.iter().flat_map(|p| p.value.data().iter().map(|x| x.to_bits())));
    bits
}

#[test]
fn same_seed_same_training_trajectory() {
    assert_eq!(trajectory(4), trajectory(4));
    assert_ne!(trajectory(4), trajectory(5));
}

#[test]
fn same_seed_same_forward_pass() {
    let (images, texts, _) = batch(1);
    let run = || {
        let model = Model::<f32>::new(&tiny(), 1).unwrap();
        let img = model.embed_images(&images).unwrap();
        let txt = model.embed_texts(&texts).unwrap();
        img.iter()
            .chain(&txt)
            .flat_map(|(e, _)| e.global.iter().chain(e.parts.rows.data()).map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn rng_streams_are_reproducible() {
    let a: Vec<f64> = (0..5).map({
        let mut r = Rng::new(3).fork(2);
        move |_| r.normal()
    })
    .collect();
    let mut r = Rng::new(3).fork(2);
    let b: Vec<f64> = (0..5).map(|_| r.normal()).collect();
    assert_eq!(a, b);
}
