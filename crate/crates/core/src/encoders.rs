//! Image and text encoders: small randomly initialized pre-norm transformer
//! stacks producing one global row followed by one row per patch or word.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const OOV_TOKEN: &str = "<oov>";

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub attn_heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 32,
            layers: 2,
            attn_heads: 4,
            mlp_ratio: 2.0,
            patch_size: 8,
            image_height: 32,
            image_width: 32,
            channels: 3,
            max_len: 16,
            vocab_size: 64,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.attn_heads == 0 || !self.d.is_multiple_of(self.attn_heads) {
            return bad(format!("d={} must be a positive multiple of attn_heads={}", self.d, self.attn_heads));
        }
        if self.patch_size == 0
            || !self.image_height.is_multiple_of(self.patch_size)
            || !self.image_width.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.channels == 0 || self.max_len == 0 || self.vocab_size < 2 {
            return bad("channels, max_len must be >= 1 and vocab_size >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.mlp_ratio > 0.0) {
            return bad(format!("mlp_ratio {} must be > 0", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    fn hidden(&self) -> usize {
        ((self.d as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `H×W×C`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub identity: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextSample {
    /// Padded to the tokenizer's `max_len`.
    pub tokens: Vec<usize>,
    /// Words before padding.
    pub length: usize,
    pub identity: usize,
}

/// Encoded sample: row 0 is the global feature, rows `1..` the unit features.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T: Real = f32> {
    pub features: Tensor<T>,
    pub mask: Vec<bool>,
}

/// An [`EncoderOutput`] still attached to a tape.
#[derive(Clone, Debug)]
pub struct EncodedSeq<'t, T: Real> {
    pub features: Var<'t, T>,
    pub mask: Vec<bool>,
}

impl<T: Real> EncodedSeq<'_, T> {
    pub fn to_output(&self) -> EncoderOutput<T> {
        EncoderOutput {
            features: self.features.to_tensor(),
            mask: self.mask.clone(),
        }
    }
}

/// Splits an `H×W×C` image into `N` flattened `P×P×C` patches, enumerated
/// row-major over the patch grid.
pub fn patchify<T: Real>(pixels: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let shape = pixels.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("image must be HxWxC, got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w * c);
    let px = pixels.data();
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * w + gx * patch) * c;
                data.extend_from_slice(&px[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch * c], data)
}

/// Word-level vocabulary; ids 0 and 1 are reserved for padding and
/// out-of-vocabulary words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[OOV_ID] != OOV_TOKEN {
            return Err(Error::Data(format!(
                "vocabulary must start with {PAD_TOKEN} and {OOV_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Sorted word set of `corpus` after the two reserved entries.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = corpus.into_iter().flat_map(words).collect();
        let tokens = [PAD_TOKEN.to_string(), OOV_TOKEN.to_string()]
            .into_iter()
            .chain(set.into_iter().filter(|w| w != PAD_TOKEN && w != OOV_TOKEN))
            .collect();
        Vocab::from_tokens(tokens).expect("reserved entries present")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Lowercases, splits on whitespace, maps unknown words to OOV and pads
    /// or truncates to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TextSample {
        let mut tokens: Vec<usize> = words(text).take(max_len).map(|w| self.id(&w)).collect();
        let length = tokens.len();
        tokens.resize(max_len, PAD_ID);
        TextSample {
            tokens,
            length,
            identity: 0,
        }
    }

    /// Fraction of words in `texts` that map to OOV.
    pub fn oov_rate<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> f64 {
        let (mut total, mut oov) = (0usize, 0usize);
        for w in texts.into_iter().flat_map(words) {
            total += 1;
            oov += usize::from(self.id(&w) == OOV_ID);
        }
        if total == 0 {
            0.0
        } else {
            oov as f64 / total as f64
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read vocabulary {}: {e}", path.display())))?;
        Vocab::from_tokens(s.lines().map(str::to_string).collect())
    }
}

fn init_weight<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: String, shape: &[usize]) -> ParamId {
    store.add(name, rng.trunc_normal_tensor(shape, INIT_STD))
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `h + MLP(LN(h))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    heads: usize,
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: ParamId,
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

fn linear<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> (ParamId, ParamId) {
    let w = init_weight(store, rng, format!("{name}.w"), &[fan_in, fan_out]);
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    (w, b)
}

fn norm_params<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.g"), Tensor::full(&[d], T::one()));
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[d]));
    (g, b)
}

fn apply_linear<'t, T: Real>(
    vars: &[Var<'t, T>],
    x: Var<'t, T>,
    (w, b): (ParamId, ParamId),
) -> Result<Var<'t, T>> {
    x.matmul(vars[w.0])?.add_row_bias(vars[b.0])
}

fn apply_norm<'t, T: Real>(
    vars: &[Var<'t, T>],
    x: Var<'t, T>,
    (g, b): (ParamId, ParamId),
) -> Result<Var<'t, T>> {
    x.layer_norm(vars[g.0], vars[b.0], T::of(LN_EPS))
}

/// Inverted dropout; identity when `rng` is `None` or `p == 0`.
fn dropout<'t, T: Real>(x: Var<'t, T>, p: f64, rng: Option<&mut Rng>) -> Result<Var<'t, T>> {
    match rng {
        Some(rng) if p > 0.0 => {
            let shape = x.shape();
            let keep = T::of(1.0 / (1.0 - p));
            let n = shape.iter().product();
            let mask = (0..n)
                .map(|_| if rng.uniform() < p { T::zero() } else { keep })
                .collect();
            x.mul_const(&Tensor::new(shape, mask)?)
        }
        _ => Ok(x),
    }
}

impl TransformerBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, cfg: &EncoderConfig) -> Self {
        let d = cfg.d;
        let h = cfg.hidden();
        TransformerBlock {
            heads: cfg.attn_heads,
            ln1: norm_params(store, &format!("{name}.ln1"), d),
            wq: linear(store, rng, &format!("{name}.attn.q"), d, d),
            // no key bias: it shifts every score in a row equally
            wk: init_weight(store, rng, format!("{name}.attn.k.w"), &[d, d]),
            wv: linear(store, rng, &format!("{name}.attn.v"), d, d),
            wo: linear(store, rng, &format!("{name}.attn.o"), d, d),
            ln2: norm_params(store, &format!("{name}.ln2"), d),
            fc1: linear(store, rng, &format!("{name}.mlp.fc1"), d, h),
            fc2: linear(store, rng, &format!("{name}.mlp.fc2"), h, d),
        }
    }

    /// Masked rows are never attended to; row 0 must be valid.
    pub fn forward<'t, T: Real>(
        &self,
        vars: &[Var<'t, T>],
        x: Var<'t, T>,
        mask: &[bool],
        drop_p: f64,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var<'t, T>> {
        let (rows, d) = (x.rows(), x.cols());
        if mask.len() != rows {
            return Err(Error::Shape(format!("mask of length {} for {rows} rows", mask.len())));
        }
        if !mask.first().copied().unwrap_or(false) {
            return Err(Error::Contract("row 0 must be unmasked".into()));
        }
        let hd = d / self.heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());

        let h = apply_norm(vars, x, self.ln1)?;
        let q = apply_linear(vars, h, self.wq)?;
        let k = h.matmul(vars[self.wk.0])?;
        let v = apply_linear(vars, h, self.wv)?;
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (qh, kh, vh) = (
                q.slice_cols(head * hd, hd)?,
                k.slice_cols(head * hd, hd)?,
                v.slice_cols(head * hd, hd)?,
            );
            let attn = qh.matmul_t(kh)?.masked_softmax_rows(scale, Some(mask))?;
            outs.push(attn.matmul(vh)?);
        }
        let attn_out = apply_linear(vars, Var::concat_cols(&outs)?, self.wo)?;
        let attn_out = dropout(attn_out, drop_p, rng.as_deref_mut())?;
        let x = x.add(attn_out)?;

        let h = apply_norm(vars, x, self.ln2)?;
        let h = apply_linear(vars, apply_linear(vars, h, self.fc1)?.gelu(), self.fc2)?;
        let h = dropout(h, drop_p, rng)?;
        x.add(h)
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    cfg: EncoderConfig,
    patch_proj: (ParamId, ParamId),
    img_token: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_final: (ParamId, ParamId),
}

impl ImageEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        Ok(ImageEncoder {
            cfg: cfg.clone(),
            patch_proj: linear(store, rng, "img.patch", cfg.patch_dim(), d),
            img_token: init_weight(store, rng, "img.token".into(), &[1, d]),
            pos: init_weight(store, rng, "img.pos".into(), &[cfg.num_patches() + 1, d]),
            blocks: (0..cfg.layers)
                .map(|l| TransformerBlock::new(store, rng, &format!("img.blk{l}"), cfg))
                .collect(),
            ln_final: norm_params(store, "img.ln", d),
        })
    }

    fn check_image(&self, img: &ImageSample) -> Result<()> {
        let want = [self.cfg.image_height, self.cfg.image_width, self.cfg.channels];
        if img.pixels.shape() != want {
            return Err(Error::Shape(format!(
                "image shape {:?}, encoder expects {want:?}",
                img.pixels.shape()
            )));
        }
        Ok(())
    }

    /// `[IMG]` row plus projected patches plus positions, before any block.
    pub fn embed<'t, T: Real>(&self, tape: &'t Tape<T>, vars: &[Var<'t, T>], img: &ImageSample) -> Result<Var<'t, T>> {
        self.check_image(img)?;
        let patches = tape.constant(patchify(&img.pixels.cast::<T>(), self.cfg.patch_size)?);
        let proj = apply_linear(vars, patches, self.patch_proj)?;
        Var::concat_rows(&[vars[self.img_token.0], proj])?.add(vars[self.pos.0])
    }

    pub fn encode_one<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        vars: &[Var<'t, T>],
        img: &ImageSample,
        mut rng: Option<&mut Rng>,
    ) -> Result<EncodedSeq<'t, T>> {
        let mut x = self.embed(tape, vars, img)?;
        let mask = vec![true; x.rows()];
        for blk in &self.blocks {
            x = blk.forward(vars, x, &mask, self.cfg.dropout, rng.as_deref_mut())?;
        }
        Ok(EncodedSeq {
            features: apply_norm(vars, x, self.ln_final)?,
            mask,
        })
    }

    pub fn encode<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        vars: &[Var<'t, T>],
        images: &[ImageSample],
        mut rng: Option<&mut Rng>,
    ) -> Result<Vec<EncodedSeq<'t, T>>> {
        if let Some(first) = images.first() {
            if images.iter().any(|i| i.pixels.shape() != first.pixels.shape()) {
                return Err(Error::Shape("images in a batch differ in size".into()));
            }
        }
        images
            .iter()
            .map(|img| self.encode_one(tape, vars, img, rng.as_deref_mut()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: EncoderConfig,
    tok_emb: ParamId,
    cls_token: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_final: (ParamId, ParamId),
}

impl TextEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        Ok(TextEncoder {
            cfg: cfg.clone(),
            tok_emb: init_weight(store, rng, "txt.tok".into(), &[cfg.vocab_size, d]),
            cls_token: init_weight(store, rng, "txt.cls".into(), &[1, d]),
            pos: init_weight(store, rng, "txt.pos".into(), &[cfg.max_len + 1, d]),
            blocks: (0..cfg.layers)
                .map(|l| TransformerBlock::new(store, rng, &format!("txt.blk{l}"), cfg))
                .collect(),
            ln_final: norm_params(store, "txt.ln", d),
        })
    }

    pub fn encode_one<'t, T: Real>(
        &self,
        vars: &[Var<'t, T>],
        text: &TextSample,
        mut rng: Option<&mut Rng>,
    ) -> Result<EncodedSeq<'t, T>> {
        let max_len = self.cfg.max_len;
        if text.tokens.len() > max_len || text.length > text.tokens.len() {
            return Err(Error::Data(format!(
                "text of {} tokens (length {}) exceeds max_len {max_len}",
                text.tokens.len(),
                text.length
            )));
        }
        if let Some(&bad) = text.tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let mut ids = text.tokens.clone();
        ids.resize(max_len, PAD_ID);
        let emb = vars[self.tok_emb.0].select_rows(&ids)?;
        let mut x = Var::concat_rows(&[vars[self.cls_token.0], emb])?.add(vars[self.pos.0])?;
        let mask: Vec<bool> = (0..=max_len).map(|i| i <= text.length).collect();
        for blk in &self.blocks {
            x = blk.forward(vars, x, &mask, self.cfg.dropout, rng.as_deref_mut())?;
        }
        Ok(EncodedSeq {
            features: apply_norm(vars, x, self.ln_final)?,
            mask,
        })
    }

    pub fn encode<'t, T: Real>(
        &self,
        vars: &[Var<'t, T>],
        texts: &[TextSample],
        mut rng: Option<&mut Rng>,
    ) -> Result<Vec<EncodedSeq<'t, T>>> {
        texts
            .iter()
            .map(|t| self.encode_one(vars, t, rng.as_deref_mut()))
            .collect()
    }
}
