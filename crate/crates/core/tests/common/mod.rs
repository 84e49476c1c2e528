#![allow(dead_code)]

use safa::numeric::{finite_diff_check_with, ParamStore, Real, Rng, Stencil, Tape, Tensor, Var};
use safa::encoders::{EncodedSeq, EncoderConfig, EncoderOutput, ImageSample, TextSample};
use safa::model::{Model, ModelConfig};
use safa::retrieval::{cmc_ranks, similarity_matrix, SampleEmbedding, ScoringMode};
use safa::safa::{HeadEmbeddings, SafaParams};
use safa::Result;

/// A scalar function of a few tensors, buildable at any precision.
pub trait Case {
    fn shapes(&self) -> Vec<Vec<usize>>;
    fn build<'t, T: Real>(&self, tape: &'t Tape<T>, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>>;
}

/// Weighted sum with fixed, uneven weights so every output element matters.
pub fn readout<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| T::of((i as f64 * 1.37 + 0.4).sin())).collect();
    x.mul_const(&Tensor::new(shape, w)?).map(Var::sum)
}

pub fn inputs(case: &impl Case, seed: u64) -> ParamStore<f64> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    for (i, s) in case.shapes().iter().enumerate() {
        store.add(format!("in{i}"), rng.normal_tensor(s, 1.0));
    }
    store
}

/// Max relative error of analytic gradients computed at precision `T`
/// against 4th-order central differences evaluated in f64.
pub fn grad_error<T: Real>(case: &impl Case, seed: u64) -> f64 {
    let values = inputs(case, seed);
    let mut store: ParamStore<T> = values.cast();
    let tape = Tape::new();
    let vars = tape.bind_all(&store);
    let out = case.build(&tape, &vars).expect("forward");
    let grads = tape.backward(out).expect("backward");
    store.accumulate(&grads);
    drop(tape);
    let mut reference: ParamStore<f64> = store.cast();
    let report = finite_diff_check_with(&mut reference, 1e-3, Stencil::Central4, |s| {
        let tape = Tape::new();
        let vars = tape.bind_all(s);
        Ok(case.build(&tape, &vars)?.item())
    })
    .expect("finite differences");
    report.max_rel_error
}

/// Element-wise closeness in f64.
pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
    }
}

fn random_embedding(rng: &mut Rng, k: usize, d: usize, identity: usize) -> SampleEmbedding<f64> {
    SampleEmbedding {
        global: (0..d).map(|_| rng.normal()).collect(),
        parts: HeadEmbeddings {
            rows: rng.normal_tensor(&[k, d], 1.0),
        },
        identity,
    }
}

/// Position of the first same-identity item, counting items that score
/// higher or tie at a lower index.
fn first_hit_oracle(row: &[f64], qid: usize, gallery_ids: &[usize]) -> Option<usize> {
    (0..row.len())
        .filter(|&j| gallery_ids[j] == qid)
        .map(|j| {
            (0..row.len())
                .filter(|&o| row[o] > row[j] || (row[o] == row[j] && o < j))
                .count()
        })
        .min()
}

/// Checks the retrieval invariants on `instances` random problems and
/// returns the first violation.
pub fn retrieval_properties(instances: u64, seed: u64) -> std::result::Result<(), String> {
    for t in 0..instances {
        let mut rng = Rng::new(seed).fork(t);
        let (k, d) = (1 + rng.below(4), 2 + rng.below(5));
        let (nq, ng, ids) = (1 + rng.below(8), 1 + rng.below(14), 1 + rng.below(5));
        let queries: Vec<_> = (0..nq).map(|_| {
            let id = rng.below(ids);
            random_embedding(&mut rng, k, d, id)
        }).collect();
        let gallery: Vec<_> = (0..ng).map(|_| {
            let id = rng.below(ids);
            random_embedding(&mut rng, k, d, id)
        }).collect();
        let qids: Vec<usize> = queries.iter().map(|q| q.identity).collect();
        let gids: Vec<usize> = gallery.iter().map(|g| g.identity).collect();
        let mut gperm: Vec<usize> = (0..ng).collect();
        rng.shuffle(&mut gperm);
        let mut qperm: Vec<usize> = (0..nq).collect();
        rng.shuffle(&mut qperm);
        let fail = |what: &str| Err(format!("instance {t} (K={k} nq={nq} ng={ng}): {what}"));

        let mut by_mode = Vec::new();
        for mode in ScoringMode::ALL {
            let s = similarity_matrix(&queries, &gallery, mode).map_err(|e| e.to_string())?;
            by_mode.push(s.clone());
            let bound = match mode {
                ScoringMode::Global => 1.0,
                ScoringMode::Part => k as f64,
                ScoringMode::Both => k as f64 + 1.0,
            };
            if s.data().iter().any(|x| x.abs() > bound + 1e-9) {
                return fail("similarity exceeds its bound");
            }
            let m = cmc_ranks(&s, &qids, &gids, mode).map_err(|e| e.to_string())?;
            if !(m.rank1 <= m.rank5 && m.rank5 <= m.rank10) {
                return fail("rank-k not monotone");
            }
            let mut hits = [0usize; 3];
            let mut scored = 0;
            for (i, &qid) in qids.iter().enumerate() {
                if let Some(r) = first_hit_oracle(s.row(i), qid, &gids) {
                    scored += 1;
                    for (h, kk) in hits.iter_mut().zip([1, 5, 10]) {
                        *h += usize::from(r < kk);
                    }
                }
            }
            let rate = |h: usize| if scored == 0 { 0.0 } else { h as f64 / scored as f64 };
            if m.num_queries != scored
                || m.excluded != nq - scored
                || [m.rank1, m.rank5, m.rank10] != [rate(hits[0]), rate(hits[1]), rate(hits[2])]
            {
                return fail("metrics disagree with the oracle");
            }

            let pg: Vec<_> = gperm.iter().map(|&j| gallery[j].clone()).collect();
            let pgids: Vec<usize> = gperm.iter().map(|&j| gids[j]).collect();
            let ps = similarity_matrix(&queries, &pg, mode).map_err(|e| e.to_string())?;
            if cmc_ranks(&ps, &qids, &pgids, mode).map_err(|e| e.to_string())? != m {
                return fail("gallery permutation changed the metrics");
            }
            let pq: Vec<_> = qperm.iter().map(|&i| queries[i].clone()).collect();
            let pqids: Vec<usize> = qperm.iter().map(|&i| qids[i]).collect();
            let ps = similarity_matrix(&pq, &gallery, mode).map_err(|e| e.to_string())?;
            if cmc_ranks(&ps, &pqids, &gids, mode).map_err(|e| e.to_string())? != m {
                return fail("query permutation changed the metrics");
            }
        }
        let sum = by_mode[0].data().iter().zip(by_mode[1].data()).zip(by_mode[2].data());
        if sum.into_iter().any(|((g, p), b)| (g + p - b).abs() > 1e-9) {
            return fail("global + part differs from both");
        }
    }
    Ok(())
}

fn to_mat(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let inner = b.len();
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| (0..inner).map(|t| row[t] * b[t][j]).sum())
                .collect()
        })
        .collect()
}

/// Dense evaluation of every row of every head, then row 0 is read off.
fn brute_force(e: &[Vec<f64>], wq: &[Vec<f64>], wk: &[Vec<f64>], wv: &[Vec<f64>], mask: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let d = e[0].len() as f64;
    let (q, k, v) = (mat_mul(e, wq), mat_mul(e, wk), mat_mul(e, wv));
    let mut a = Vec::new();
    for qi in &q {
        let logits: Vec<f64> = k
            .iter()
            .zip(mask)
            .map(|(kj, &ok)| {
                if ok {
                    qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() / d.sqrt()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = ex.iter().sum();
        a.push(ex.iter().map(|x| x / z).collect::<Vec<f64>>());
    }
    let out = mat_mul(&a, &v);
    (out[0].clone(), a[0].clone())
}

pub fn safa_module(k: usize, d: usize, seed: u64) -> (ParamStore<f64>, SafaParams) {
    let mut store = ParamStore::new();
    let safa = SafaParams::new(&mut store, &mut Rng::new(seed), k, d).unwrap();
    (store, safa)
}

/// Largest deviation of `aggregate` from the dense oracle over random
/// `U=3, d=4, K=2` instances, a third of them with one masked row.
pub fn safa_oracle_error(trials: u64) -> f64 {
    let (u, d, k) = (3, 4, 2);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let (store, safa) = safa_module(k, d, trial);
        let features: Tensor<f64> = Rng::new(1000 + trial).normal_tensor(&[u + 1, d], 1.0);
        let mut mask = vec![true; u + 1];
        if trial % 3 == 0 {
            mask[1 + (trial as usize / 3) % u] = false;
        }
        let out = EncoderOutput {
            features: features.clone(),
            mask: mask.clone(),
        };
        let (heads, trace) = safa.aggregate(&store, &out).expect("aggregate");
        assert_eq!(heads.rows.shape(), &[k, d]);
        assert_eq!(trace.weights.shape(), &[k, u + 1]);
        let e = to_mat(&features);
        for (i, h) in safa.heads().iter().enumerate() {
            let w = |id| to_mat(&store.get(id).value);
            let (row, attn) = brute_force(&e, &w(h.query), &w(h.key), &w(h.value), &mask);
            let pairs = heads.head(i).iter().zip(&row).chain(trace.weights.row(i).iter().zip(&attn));
            for (a, b) in pairs {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// Model whose image and text paths produce equally sized feature matrices:
/// 16 patches plus `[IMG]`, 16 words plus `[CLS]`.
pub fn shared_model() -> Model<f32> {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            d: 8,
            layers: 1,
            attn_heads: 2,
            patch_size: 2,
            image_height: 8,
            image_width: 8,
            channels: 1,
            max_len: 16,
            vocab_size: 20,
            ..EncoderConfig::default()
        },
        heads: 3,
        num_identities: 2,
    };
    Model::new(&cfg, 6).expect("model")
}

/// Feeds one image's encoder output to the SAFA module through the image
/// path and, relabelled as a fully valid caption, through the text path.
pub fn shared_embeddings(model: &Model<f32>) -> (Tensor<f32>, Tensor<f32>) {
    let img = ImageSample {
        pixels: Rng::new(1).uniform_tensor(&[8, 8, 1], 0.0, 1.0),
        identity: 0,
    };
    let caption = TextSample {
        tokens: vec![3; 16],
        length: 16,
        identity: 0,
    };
    let tape = Tape::new();
    let vars = tape.bind_all(&model.store);
    let seq = model.image.encode_one(&tape, &vars, &img, None).expect("image");
    let (via_image, _) = model.safa.aggregate_seq(&vars, &seq).expect("image path");
    let txt = model.text.encode_one(&vars, &caption, None).expect("text");
    assert_eq!(txt.features.shape(), seq.features.shape());
    let as_text = EncodedSeq {
        features: tape.constant(seq.features.to_tensor()),
        mask: txt.mask,
    };
    let (via_text, _) = model.safa.aggregate_seq(&vars, &as_text).expect("text path");
    (via_image.to_tensor(), via_text.to_tensor())
}
