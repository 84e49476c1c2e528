//! Whole-model gradient check and attention dumps.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::encoders::{EncoderConfig, ImageSample, TextSample};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{Model, ModelConfig};
use crate::numeric::rtf::save_tensor;
use crate::numeric::{finite_diff_check_with, GradCheckReport, ParamStore, Real, Rng, Stencil, Tape, Tensor};
use crate::safa::AttentionTrace;

/// Standard deviation of the noise added to every parameter of the check
/// model. At initialization the residual stream is tiny, LayerNorm sits in
/// its most curved regime and the loss is far from locally smooth at any
/// usable step size.
pub const CHECK_PERTURB_STD: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn threshold(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub precision: Precision,
    pub seed: u64,
    pub h: f64,
    pub stencil: Stencil,
    /// Flip the sign of the largest analytic gradient entry.
    pub corrupt: bool,
    pub lambda: f64,
}

impl GradCheckOptions {
    pub fn new(precision: Precision, seed: u64) -> Self {
        GradCheckOptions {
            precision,
            seed,
            h: 1e-3,
            stencil: Stencil::Central4,
            corrupt: false,
            lambda: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    pub threshold: f64,
    pub loss: f64,
    pub global: f64,
    pub part: f64,
    pub diversity: f64,
    pub num_values: usize,
}

impl ModelGradCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.threshold
    }
}

/// `d=8`, one layer, two encoder attention heads, `K=2`, 4×4×1 images in
/// 2×2 patches, captions of up to 4 words over 8 tokens, 3 identities.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d: 8,
            layers: 1,
            attn_heads: 2,
            mlp_ratio: 2.0,
            patch_size: 2,
            image_height: 4,
            image_width: 4,
            channels: 1,
            max_len: 4,
            vocab_size: 8,
            dropout: 0.0,
        },
        heads: 2,
        num_identities: 3,
    }
}

/// Four pairs with labels `[0, 1, 2, 0]`, so the batch has both a positive
/// pair and singleton identities.
pub fn check_batch(cfg: &ModelConfig, seed: u64) -> (Vec<ImageSample>, Vec<TextSample>, Vec<usize>) {
    let e = &cfg.encoder;
    let mut rng = Rng::new(seed).fork(7);
    let labels = vec![0, 1, 2, 0];
    let images = labels
        .iter()
        .map(|&identity| ImageSample {
            pixels: rng.uniform_tensor(&[e.image_height, e.image_width, e.channels], 0.0, 1.0),
            identity,
        })
        .collect();
    let texts = labels
        .iter()
        .map(|&identity| {
            let length = 1 + rng.below(e.max_len);
            let mut tokens: Vec<usize> = (0..length).map(|_| 1 + rng.below(e.vocab_size - 1)).collect();
            tokens.resize(e.max_len, 0);
            TextSample { tokens, length, identity }
        })
        .collect();
    (images, texts, labels)
}

fn check_in<T: Real>(opts: &GradCheckOptions) -> Result<ModelGradCheck> {
    let cfg = check_model_config();
    let mut base = Model::<T>::new(&cfg, opts.seed)?;
    let mut jitter = Rng::new(opts.seed).fork(11);
    for id in base.store.ids().collect::<Vec<_>>() {
        for v in base.store.get_mut(id).value.data_mut() {
            *v = T::of(v.f64() + CHECK_PERTURB_STD * jitter.normal());
        }
    }
    let (images, texts, labels) = check_batch(&cfg, opts.seed);
    let loss_cfg = LossConfig {
        lambda: opts.lambda,
        num_identities: cfg.num_identities,
        ..LossConfig::default()
    };

    let tape = Tape::new();
    let vars = tape.bind_all(&base.store);
    let terms = base.loss(&tape, &vars, &images, &texts, &labels, &loss_cfg, None)?;
    let (loss, global, part, diversity) = (terms.total.item().f64(), terms.global, terms.part, terms.diversity);
    let grads = tape.backward(terms.total)?;
    base.store.accumulate(&grads);
    drop(tape);

    // numeric derivatives are always taken in f64 at the same point
    let reference = base.cast::<f64>();
    let mut store: ParamStore<f64> = base.store.cast();
    if opts.corrupt {
        let (id, i) = store
            .ids()
            .flat_map(|id| (0..store.get(id).grad.len()).map(move |i| (id, i)))
            .max_by(|&(a, i), &(b, j)| {
                let ga = store.get(a).grad.data()[i].abs();
                let gb = store.get(b).grad.data()[j].abs();
                ga.total_cmp(&gb)
            })
            .expect("model has parameters");
        let g = &mut store.get_mut(id).grad.data_mut()[i];
        *g = -*g;
    }
    let report = finite_diff_check_with(&mut store, opts.h, opts.stencil, |s| {
        let tape = Tape::new();
        let vars = tape.bind_all(s);
        let terms = reference.loss(&tape, &vars, &images, &texts, &labels, &loss_cfg, None)?;
        Ok(terms.total.item())
    })?;
    Ok(ModelGradCheck {
        report,
        threshold: opts.precision.threshold(),
        loss,
        global,
        part,
        diversity,
        num_values: store.num_values(),
    })
}

/// Analytic gradients of the full objective on the check model against
/// finite differences. In `F32` the analytic pass runs in 32-bit; the
/// finite differences are evaluated in 64-bit at the same parameter values.
pub fn model_gradcheck(opts: &GradCheckOptions) -> Result<ModelGradCheck> {
    match opts.precision {
        Precision::F32 => check_in::<f32>(opts),
        Precision::F64 => check_in::<f64>(opts),
    }
}

/// Attention traces of one manifest entry.
#[derive(Clone, Debug)]
pub struct AttentionDump {
    /// `K×(N+1)`.
    pub image: AttentionTrace<f32>,
    /// `K×(max_len+1)`.
    pub text: AttentionTrace<f32>,
    pub text_mask: Vec<bool>,
    /// Per head, up to three `(word, weight)` pairs by descending weight.
    pub top_words: Vec<Vec<(String, f32)>>,
}

pub fn attention_dump(model: &Model<f32>, data: &Dataset, entry: usize) -> Result<AttentionDump> {
    let pair = data
        .pairs
        .iter()
        .find(|p| p.entry == entry)
        .ok_or_else(|| Error::Data(format!("no manifest entry {entry} (dataset has {})", data.pairs.len())))?;
    let (_, image) = model.embed_images(std::slice::from_ref(&data.images[pair.image]))?.remove(0);
    let (_, text) = model.embed_texts(std::slice::from_ref(&pair.text))?.remove(0);
    let text_mask: Vec<bool> = (0..=data.max_len).map(|i| i <= pair.text.length).collect();
    let words: Vec<String> = pair.caption.split_whitespace().map(str::to_lowercase).collect();
    let top_words = (0..text.weights.rows())
        .map(|k| {
            let row = text.weights.row(k);
            let mut ranked: Vec<(usize, f32)> = (1..=pair.text.length).map(|i| (i, row[i])).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked
                .into_iter()
                .take(3)
                .map(|(i, w)| (words[i - 1].clone(), w))
                .collect()
        })
        .collect();
    Ok(AttentionDump {
        image,
        text,
        text_mask,
        top_words,
    })
}

impl AttentionDump {
    /// Writes `image_trace.rtf`, `text_trace.rtf` and `top_words.txt`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let image = dir.join("image_trace.rtf");
        let text = dir.join("text_trace.rtf");
        let words = dir.join("top_words.txt");
        save_tensor(&image, &self.image.weights)?;
        save_tensor(&text, &self.text.weights)?;
        let lines: String = self
            .top_words
            .iter()
            .enumerate()
            .map(|(k, ws)| {
                let items: Vec<String> = ws.iter().map(|(w, a)| format!("{w}:{a:.4}")).collect();
                format!("head{k} {}\n", items.join(" "))
            })
            .collect();
        fs::write(&words, lines).map_err(|e| Error::io(&words, e))?;
        Ok(vec![image, text, words])
    }
}

/// Row sums over valid positions must be 1 and masked positions 0.
pub fn trace_violation(weights: &Tensor<f32>, mask: &[bool]) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..weights.rows() {
        let row = weights.row(k);
        let mut sum = 0.0f64;
        for (&w, &valid) in row.iter().zip(mask) {
            if valid {
                sum += f64::from(w);
            } else {
                worst = worst.max(f64::from(w.abs()));
            }
        }
        worst = worst.max((sum - 1.0).abs());
    }
    worst
}
