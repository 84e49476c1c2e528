//! Flat `key = value` run configuration.
//!
//! Resolution order: built-in defaults, then the `--config` file, then
//! `--set key=value` overrides, then dedicated command-line flags. The
//! resolved configuration is written into every run directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Split, SynthSpec};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::retrieval::ScoringMode;

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub d: usize,
    pub layers: usize,
    pub attn_heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Number of SAFA heads.
    pub k: usize,
    pub lambda: f64,
    pub eps: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: ScoringMode,
    pub eval_split: Split,
    pub data: PathBuf,
    pub out: PathBuf,
    pub num_ids: usize,
    pub images_per_id: usize,
    pub captions_per_image: usize,
    pub image_size: usize,
    pub words_per_id: usize,
    pub noise_std: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let enc = EncoderConfig::default();
        RunConfig {
            d: enc.d,
            layers: enc.layers,
            attn_heads: enc.attn_heads,
            mlp_ratio: enc.mlp_ratio,
            patch_size: enc.patch_size,
            max_len: enc.max_len,
            dropout: enc.dropout,
            k: 4,
            lambda: 0.2,
            eps: 1e-8,
            lr: 1e-3,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            mode: ScoringMode::Both,
            eval_split: Split::Test,
            data: PathBuf::from("data/manifest.jsonl"),
            out: PathBuf::from("runs/default"),
            num_ids: synth.num_ids,
            images_per_id: synth.images_per_id,
            captions_per_image: synth.captions_per_image,
            image_size: synth.image_size,
            words_per_id: synth.vocab_words_per_id,
            noise_std: synth.noise_std,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 24] = [
        "d",
        "layers",
        "attn_heads",
        "mlp_ratio",
        "patch_size",
        "max_len",
        "dropout",
        "K",
        "lambda",
        "eps",
        "lr",
        "batch_size",
        "epochs",
        "seed",
        "mode",
        "eval_split",
        "data",
        "out",
        "num_ids",
        "images_per_id",
        "captions_per_image",
        "image_size",
        "words_per_id",
        "noise_std",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "d" => self.d = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "attn_heads" => self.attn_heads = parse(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "K" => self.k = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "eval_split" => self.eval_split = v.parse()?,
            "data" => self.data = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "num_ids" => self.num_ids = parse(key, v)?,
            "images_per_id" => self.images_per_id = parse(key, v)?,
            "captions_per_image" => self.captions_per_image = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "words_per_id" => self.words_per_id = parse(key, v)?,
            "noise_std" => self.noise_std = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "d" => self.d.to_string(),
            "layers" => self.layers.to_string(),
            "attn_heads" => self.attn_heads.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "max_len" => self.max_len.to_string(),
            "dropout" => self.dropout.to_string(),
            "K" => self.k.to_string(),
            "lambda" => self.lambda.to_string(),
            "eps" => self.eps.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "mode" => self.mode.to_string(),
            "eval_split" => self.eval_split.to_string(),
            "data" => self.data.display().to_string(),
            "out" => self.out.display().to_string(),
            "num_ids" => self.num_ids.to_string(),
            "images_per_id" => self.images_per_id.to_string(),
            "captions_per_image" => self.captions_per_image.to_string(),
            "image_size" => self.image_size.to_string(),
            "words_per_id" => self.words_per_id.to_string(),
            "noise_std" => self.noise_std.to_string(),
            _ => unreachable!("key list and accessor disagree"),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment. Each key may
    /// appear once.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", n + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Config(format!("{origin}:{}: duplicate key {key}", n + 1)));
            }
            seen.push(key);
            self.set(key, value)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// `key=value` strings as given to `--set`.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.lambda > 0.0 && self.k < 2 {
            return Err(Error::Config(format!(
                "lambda = {} needs K >= 2: head diversity is undefined for one head",
                self.lambda
            )));
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("lr and eps must be > 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        self.synth_spec().validate()?;
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_ids: self.num_ids,
            images_per_id: self.images_per_id,
            captions_per_image: self.captions_per_image,
            image_size: self.image_size,
            vocab_words_per_id: self.words_per_id,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }

    /// Model architecture for images of `image_shape` (`H×W×C`).
    pub fn model_config(&self, image_shape: &[usize], vocab_size: usize, num_identities: usize) -> Result<ModelConfig> {
        let [h, w, c] = image_shape else {
            return Err(Error::Shape(format!("image shape {image_shape:?} is not HxWxC")));
        };
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                d: self.d,
                layers: self.layers,
                attn_heads: self.attn_heads,
                mlp_ratio: self.mlp_ratio,
                patch_size: self.patch_size,
                image_height: *h,
                image_width: *w,
                channels: *c,
                max_len: self.max_len,
                vocab_size,
                dropout: self.dropout,
            },
            heads: self.k,
            num_identities,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_config(&self, num_identities: usize) -> LossConfig {
        LossConfig {
            epsilon: self.eps,
            lambda: self.lambda,
            num_identities,
        }
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
