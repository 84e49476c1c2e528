//! Full network: both encoders, the shared aggregation module and one
//! identity classifier per alignment slot (global + K parts).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::encoders::{EncodedSeq, EncoderConfig, ImageEncoder, ImageSample, TextEncoder, TextSample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, LossTerms};
use crate::numeric::rtf::{read_rtf, write_rtf};
use crate::numeric::{ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};
use crate::retrieval::SampleEmbedding;
use crate::safa::{AttentionTrace, HeadEmbeddings, SafaParams};

const CKPT_MAGIC: &str = "SAFA-CKPT1";
const EMBED_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: usize,
    pub num_identities: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.heads == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if self.num_identities == 0 {
            return Err(Error::Config("num_identities must be >= 1".into()));
        }
        Ok(())
    }
}

/// Forward results for a batch of image/caption pairs.
#[derive(Debug)]
pub struct BatchForward<'t, T: Real> {
    pub global_visual: Var<'t, T>,
    pub global_textual: Var<'t, T>,
    pub heads_visual: Vec<Var<'t, T>>,
    pub heads_textual: Vec<Var<'t, T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub safa: SafaParams,
    pub classifiers: Vec<ParamId>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(seed);
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(&mut store, &mut root.fork(1), &cfg.encoder)?;
        let text = TextEncoder::new(&mut store, &mut root.fork(2), &cfg.encoder)?;
        let safa = SafaParams::new(&mut store, &mut root.fork(3), cfg.heads, cfg.encoder.d)?;
        let mut crng = root.fork(4);
        let std = 1.0 / (cfg.encoder.d as f64).sqrt();
        let classifiers = (0..=cfg.heads)
            .map(|slot| {
                let name = if slot == 0 { "cls.global".to_string() } else { format!("cls.part{}", slot - 1) };
                store.add(name, crng.normal_tensor(&[cfg.num_identities, cfg.encoder.d], std))
            })
            .collect();
        Ok(Model {
            cfg: cfg.clone(),
            store,
            image,
            text,
            safa,
            classifiers,
        })
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            image: self.image.clone(),
            text: self.text.clone(),
            safa: self.safa.clone(),
            classifiers: self.classifiers.clone(),
        }
    }

    fn stack_globals<'t>(seqs: &[EncodedSeq<'t, T>]) -> Result<Var<'t, T>> {
        let rows = seqs
            .iter()
            .map(|s| s.features.row(0))
            .collect::<Result<Vec<_>>>()?;
        Var::concat_rows(&rows)
    }

    pub fn forward_batch<'t>(
        &self,
        tape: &'t Tape<T>,
        vars: &[Var<'t, T>],
        images: &[ImageSample],
        texts: &[TextSample],
        mut rng: Option<&mut Rng>,
    ) -> Result<BatchForward<'t, T>> {
        if images.len() != texts.len() || images.is_empty() {
            return Err(Error::Shape(format!(
                "{} images paired with {} texts",
                images.len(),
                texts.len()
            )));
        }
        let img = self.image.encode(tape, vars, images, rng.as_deref_mut())?;
        let txt = self.text.encode(vars, texts, rng)?;
        let mut heads_visual = Vec::with_capacity(img.len());
        let mut heads_textual = Vec::with_capacity(txt.len());
        for (i, t) in img.iter().zip(&txt) {
            heads_visual.push(self.safa.aggregate_seq(vars, i)?.0);
            heads_textual.push(self.safa.aggregate_seq(vars, t)?.0);
        }
        Ok(BatchForward {
            global_visual: Self::stack_globals(&img)?,
            global_textual: Self::stack_globals(&txt)?,
            heads_visual,
            heads_textual,
        })
    }

    pub fn classifier_vars<'t>(&self, vars: &[Var<'t, T>]) -> Vec<Var<'t, T>> {
        self.classifiers.iter().map(|id| vars[id.0]).collect()
    }

    /// Total objective on one batch; `labels[i]` is the identity of pair `i`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<'t>(
        &self,
        tape: &'t Tape<T>,
        vars: &[Var<'t, T>],
        images: &[ImageSample],
        texts: &[TextSample],
        labels: &[usize],
        loss_cfg: &LossConfig,
        rng: Option<&mut Rng>,
    ) -> Result<LossTerms<'t, T>> {
        let fwd = self.forward_batch(tape, vars, images, texts, rng)?;
        total_loss(
            fwd.global_visual,
            fwd.global_textual,
            &fwd.heads_visual,
            &fwd.heads_textual,
            labels,
            loss_cfg,
            &self.classifier_vars(vars),
        )
    }

    fn embed_seq(&self, vars: &[Var<'_, T>], seq: &EncodedSeq<'_, T>, identity: usize) -> Result<(SampleEmbedding<T>, AttentionTrace<T>)> {
        let (parts, trace) = self.safa.aggregate_seq(vars, seq)?;
        let global = seq.features.row(0)?.to_tensor().into_data();
        Ok((
            SampleEmbedding {
                global,
                parts: HeadEmbeddings { rows: parts.to_tensor() },
                identity,
            },
            trace,
        ))
    }

    /// Inference embeddings and per-head traces for images.
    pub fn embed_images(&self, images: &[ImageSample]) -> Result<Vec<(SampleEmbedding<T>, AttentionTrace<T>)>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EMBED_CHUNK) {
            let tape = Tape::new();
            let vars = tape.bind_all(&self.store);
            for img in chunk {
                let seq = self.image.encode_one(&tape, &vars, img, None)?;
                out.push(self.embed_seq(&vars, &seq, img.identity)?);
            }
        }
        Ok(out)
    }

    pub fn embed_texts(&self, texts: &[TextSample]) -> Result<Vec<(SampleEmbedding<T>, AttentionTrace<T>)>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(EMBED_CHUNK) {
            let tape = Tape::new();
            let vars = tape.bind_all(&self.store);
            for t in chunk {
                let seq = self.text.encode_one(&vars, t, None)?;
                out.push(self.embed_seq(&vars, &seq, t.identity)?);
            }
        }
        Ok(out)
    }

    /// Checkpoint: a `SAFA-CKPT1 <count>` line, one `<name> <step>` line per
    /// parameter, then value, first-moment and second-moment RTF1 blocks
    /// for each parameter in manifest order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(w, "{CKPT_MAGIC} {}", self.store.len()).map_err(io)?;
        for p in self.store.iter() {
            writeln!(w, "{} {}", p.name, p.step).map_err(io)?;
        }
        for p in self.store.iter() {
            for t in [&p.value, &p.first_moment, &p.second_moment] {
                write_rtf(&mut w, t).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Loads values and optimizer state; names and shapes must match this
    /// model's architecture.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let f = File::open(path)
            .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
        let mut r = BufReader::new(f);
        let what = path.display().to_string();
        let mut line = String::new();
        let read_line = |r: &mut BufReader<File>, line: &mut String| -> Result<()> {
            line.clear();
            r.read_line(line).map_err(|e| Error::io(path, e))?;
            Ok(())
        };
        read_line(&mut r, &mut line)?;
        let count: usize = line
            .trim_end()
            .strip_prefix(CKPT_MAGIC)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Data(format!("{what}: not a checkpoint")))?;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            read_line(&mut r, &mut line)?;
            let (name, step) = line
                .trim_end()
                .rsplit_once(' ')
                .and_then(|(n, s)| Some((n.to_string(), s.parse::<u64>().ok()?)))
                .ok_or_else(|| Error::Data(format!("{what}: bad manifest line {line:?}")))?;
            manifest.push((name, step));
        }
        let mut values = Vec::with_capacity(count);
        let mut state = Vec::with_capacity(count);
        for (name, step) in &manifest {
            let v: Tensor<T> = read_rtf(&mut r, &format!("{what}:{name}"))?;
            let m: Tensor<T> = read_rtf(&mut r, &format!("{what}:{name}"))?;
            let s: Tensor<T> = read_rtf(&mut r, &format!("{what}:{name}"))?;
            values.push((name.clone(), v));
            state.push((name.clone(), m, s, *step));
        }
        self.store.load_values(&values)?;
        for (name, m, s, step) in state {
            let id = self.store.find(&name).expect("validated by load_values");
            let p = self.store.get_mut(id);
            if m.shape() != p.value.shape() || s.shape() != p.value.shape() {
                return Err(Error::Data(format!("{what}: optimizer state shape for {name}")));
            }
            p.first_moment = m;
            p.second_moment = s;
            p.step = step;
        }
        Ok(())
    }
}
