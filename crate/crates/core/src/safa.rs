//! Semantic-aligned feature aggregation: K full-width attention heads, one
//! parameter set shared by both modalities. Head `i` projects the encoder
//! rows to queries, keys and values with its own `d×d` matrices, attends
//! with scale `1/√d`, and keeps only row 0 of `A_i·V_i` as its part
//! embedding. There is no output projection and no residual.

use crate::encoders::{EncodedSeq, EncoderOutput};
use crate::error::{Error, Result};
use crate::numeric::tensor::softmax_in_place;
use crate::numeric::{ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};

/// Per-sample part embeddings, one row per head (`K×d`).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadEmbeddings<T: Real = f32> {
    pub rows: Tensor<T>,
}

impl<T: Real> HeadEmbeddings<T> {
    pub fn num_heads(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn head(&self, k: usize) -> &[T] {
        self.rows.row(k)
    }
}

/// Row-0 attention weights of every head over the input rows (`K×(U+1)`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace<T: Real = f32> {
    pub weights: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct SafaHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug)]
pub struct SafaParams {
    d: usize,
    heads: Vec<SafaHead>,
}

/// Full `A = softmax(Q·Kᵀ/√d)` with masked columns forced to zero.
pub fn attention_weights<T: Real>(q: &Tensor<T>, k: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    if q.shape() != k.shape() || q.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "attention needs equal QK shapes, got {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if let Some(m) = mask {
        if m.len() != q.rows() || !m.iter().any(|&b| b) {
            return Err(Error::Shape(format!(
                "mask of length {} (or fully masked) for {} rows",
                m.len(),
                q.rows()
            )));
        }
    }
    let scale = T::of(1.0 / (q.cols() as f64).sqrt());
    let mut a = q.matmul(&k.transpose())?;
    let n = a.cols();
    for row in a.data_mut().chunks_mut(n) {
        softmax_in_place(row, scale, mask);
    }
    Ok(a)
}

impl SafaParams {
    /// Weights drawn from `N(0, 1/d)` so heads start out distinguishable.
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, heads: usize, d: usize) -> Result<Self> {
        if heads == 0 || d == 0 {
            return Err(Error::Config(format!("SAFA needs K >= 1 and d >= 1, got K={heads} d={d}")));
        }
        let std = 1.0 / (d as f64).sqrt();
        let heads = (0..heads)
            .map(|i| SafaHead {
                query: store.add(format!("safa.h{i}.q"), rng.normal_tensor(&[d, d], std)),
                key: store.add(format!("safa.h{i}.k"), rng.normal_tensor(&[d, d], std)),
                value: store.add(format!("safa.h{i}.v"), rng.normal_tensor(&[d, d], std)),
            })
            .collect();
        Ok(SafaParams { d, heads })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn heads(&self) -> &[SafaHead] {
        &self.heads
    }

    /// Taped aggregation: returns the `K×d` part embeddings and the trace.
    pub fn aggregate_seq<'t, T: Real>(
        &self,
        vars: &[Var<'t, T>],
        seq: &EncodedSeq<'t, T>,
    ) -> Result<(Var<'t, T>, AttentionTrace<T>)> {
        let e = seq.features;
        if e.cols() != self.d {
            return Err(Error::Shape(format!(
                "SAFA expects width {}, features have {}",
                self.d,
                e.cols()
            )));
        }
        if seq.mask.len() != e.rows() {
            return Err(Error::Shape(format!(
                "mask of length {} for {} rows",
                seq.mask.len(),
                e.rows()
            )));
        }
        let scale = T::of(1.0 / (self.d as f64).sqrt());
        let global = e.row(0)?;
        let mut rows = Vec::with_capacity(self.heads.len());
        let mut trace = Vec::with_capacity(self.heads.len() * e.rows());
        for h in &self.heads {
            let q0 = global.matmul(vars[h.query.0])?;
            let keys = e.matmul(vars[h.key.0])?;
            let values = e.matmul(vars[h.value.0])?;
            let attn = q0.matmul_t(keys)?.masked_softmax_rows(scale, Some(&seq.mask))?;
            trace.extend_from_slice(attn.value().data());
            rows.push(attn.matmul(values)?);
        }
        let weights = Tensor::new(vec![self.heads.len(), e.rows()], trace)?;
        Ok((Var::concat_rows(&rows)?, AttentionTrace { weights }))
    }

    /// Untaped aggregation of a finished encoder output.
    pub fn aggregate<T: Real>(
        &self,
        store: &ParamStore<T>,
        feats: &EncoderOutput<T>,
    ) -> Result<(HeadEmbeddings<T>, AttentionTrace<T>)> {
        let tape = Tape::new();
        let vars = tape.bind_all(store);
        let seq = EncodedSeq {
            features: tape.constant(feats.features.clone()),
            mask: feats.mask.clone(),
        };
        let (rows, trace) = self.aggregate_seq(&vars, &seq)?;
        Ok((HeadEmbeddings { rows: rows.to_tensor() }, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln2() -> f64 {
        2f64.ln()
    }

    #[test]
    fn attention_weight_examples() {
        let one = Tensor::<f64>::from_f64_rows(&[&[0.3, -0.2]]);
        assert_eq!(attention_weights(&one, &one, None).unwrap().data(), &[1.0]);

        let z = Tensor::<f64>::zeros(&[4, 3]);
        let a = attention_weights(&z, &z, None).unwrap();
        assert!(a.data().iter().all(|&x| (x - 0.25).abs() < 1e-12));

        // d = 1 so the scale is 1: Q·Kᵀ = [[0, ln2], [0, 0]]
        let q = Tensor::<f64>::from_f64_rows(&[&[ln2()], &[0.0]]);
        let k = Tensor::<f64>::from_f64_rows(&[&[0.0], &[1.0]]);
        let a = attention_weights(&q, &k, None).unwrap();
        let want = [1.0 / 3.0, 2.0 / 3.0, 0.5, 0.5];
        for (x, w) in a.data().iter().zip(want) {
            assert!((x - w).abs() < 1e-12);
        }

        let mask = [true, false];
        let a = attention_weights(&q, &k, Some(&mask)).unwrap();
        assert_eq!(a.data(), &[1.0, 0.0, 1.0, 0.0]);

        assert!(matches!(
            attention_weights(&z, &Tensor::zeros(&[3, 3]), None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn identity_values_with_uniform_attention_average_rows() {
        let d = 3;
        let mut store = ParamStore::<f64>::new();
        let params = SafaParams::new(&mut store, &mut Rng::new(0), 1, d).unwrap();
        let h = &params.heads()[0];
        store.get_mut(h.query).value = Tensor::zeros(&[d, d]);
        store.get_mut(h.value).value = Tensor::identity(d);
        let feats = EncoderOutput {
            features: Tensor::from_f64_rows(&[&[1., 2., 3.], &[4., 5., 6.], &[-2., 0., 9.]]),
            mask: vec![true; 3],
        };
        let (emb, trace) = params.aggregate(&store, &feats).unwrap();
        assert!(trace.weights.data().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-12));
        for (x, want) in emb.head(0).iter().zip([1.0, 7.0 / 3.0, 6.0]) {
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_rows_get_zero_attention() {
        let mut store = ParamStore::<f32>::new();
        let params = SafaParams::new(&mut store, &mut Rng::new(1), 3, 4).unwrap();
        let feats = EncoderOutput {
            features: Rng::new(2).normal_tensor(&[5, 4], 1.0),
            mask: vec![true, true, false, true, false],
        };
        let (_, trace) = params.aggregate(&store, &feats).unwrap();
        for k in 0..3 {
            let row = trace.weights.row(k);
            assert_eq!((row[2], row[4]), (0.0, 0.0));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        let params = SafaParams::new(&mut store, &mut Rng::new(1), 2, 4).unwrap();
        let feats = EncoderOutput {
            features: Tensor::zeros(&[3, 5]),
            mask: vec![true; 3],
        };
        assert!(matches!(params.aggregate(&store, &feats), Err(Error::Shape(_))));
    }
}
