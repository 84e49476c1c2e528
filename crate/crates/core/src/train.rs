//! Training loop, run directories and evaluation.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, CONFIG_FILE};
use crate::data::{load_dataset_with, BatchMode, Dataset, IdentityMap, LoadOptions, Split};
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::tensor::cosine_unchecked;
use crate::numeric::{Adam, Rng, Tape};
use crate::retrieval::{cmc_ranks, similarity_matrix, RankMetrics, SampleEmbedding, ScoringMode};

/// Files of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("log.txt")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }

    pub fn state(&self) -> PathBuf {
        self.root.join("state.json")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn identities(&self) -> PathBuf {
        self.root.join("identities.json")
    }

    pub fn metrics(&self, mode: ScoringMode) -> PathBuf {
        self.root.join(format!("metrics_{mode}.json"))
    }

    fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }

    /// Model, resolved config and dataset of a finished run. The dataset is
    /// read from `manifest` (or the run's `data` key) with the run's
    /// vocabulary and identity mapping.
    pub fn open(&self, manifest: Option<&Path>) -> Result<(RunConfig, Model<f32>, Dataset)> {
        let cfg = RunConfig::from_file(&self.config())?;
        let vocab = Vocab::load(&self.vocab())?;
        let identities = IdentityMap::load(&self.identities())?;
        let trained_ids = identities.len();
        let data = load_dataset_with(
            manifest.unwrap_or(&cfg.data),
            cfg.max_len,
            LoadOptions {
                vocab: Some(vocab),
                identities: Some(identities),
            },
        )?;
        let shape = data.images[0].pixels.shape().to_vec();
        let mcfg = cfg.model_config(&shape, data.vocab.len(), trained_ids)?;
        let mut model = Model::new(&mcfg, cfg.seed)?;
        model.load(&self.checkpoint())?;
        Ok((cfg, model, data))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct TrainState {
    epochs_done: usize,
    steps_done: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// One line per optimizer step, in the loss log format.
    pub log: Vec<String>,
    pub steps: usize,
    pub epochs: usize,
}

/// Trains on the train split of `data`. With `run_dir`, writes the resolved
/// config, vocabulary, identity mapping, step log, checkpoint and state
/// after every epoch; with `resume`, continues from the stored state.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    run_dir: Option<&RunDir>,
    resume: bool,
    mut on_line: impl FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let shape = data.images[0].pixels.shape().to_vec();
    let mcfg = cfg.model_config(&shape, data.vocab.len(), data.num_identities())?;
    let loss_cfg = cfg.loss_config(data.num_identities());
    loss_cfg.validate()?;
    let mut model = Model::<f32>::new(&mcfg, cfg.seed)?;
    let mut state = TrainState {
        epochs_done: 0,
        steps_done: 0,
    };
    // validates batch size against the split before any update
    data.epoch_batches(Split::Train, cfg.batch_size, cfg.seed, 0, BatchMode::Train)?;

    let mut log_file = None;
    if let Some(dir) = run_dir {
        dir.create()?;
        let resuming = resume && dir.checkpoint().is_file() && dir.state().is_file();
        if resuming {
            // only the epoch budget may change between sessions
            let mut stored = RunConfig::from_file(&dir.config())?;
            stored.epochs = cfg.epochs;
            if stored != *cfg {
                return Err(Error::Config(format!(
                    "cannot resume {}: configuration differs from the stored one",
                    dir.root.display()
                )));
            }
            cfg.save(&dir.config())?;
            model.load(&dir.checkpoint())?;
            let s = fs::read_to_string(dir.state()).map_err(|e| Error::io(dir.state(), e))?;
            state = serde_json::from_str(&s).map_err(|e| Error::Data(format!("{}: {e}", dir.state().display())))?;
        } else {
            cfg.save(&dir.config())?;
            data.vocab.save(&dir.vocab())?;
            data.identities.save(&dir.identities())?;
            File::create(dir.log()).map_err(|e| Error::io(dir.log(), e))?;
        }
        log_file = Some(
            OpenOptions::new()
                .append(true)
                .open(dir.log())
                .map_err(|e| Error::io(dir.log(), e))?,
        );
    }

    let adam = Adam::with_lr(cfg.lr);
    let dropout_root = Rng::new(cfg.seed).fork(0xD0);
    let mut log = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let batches = data.epoch_batches(Split::Train, cfg.batch_size, cfg.seed, epoch as u64, BatchMode::Train)?;
        let mut epoch_lines = Vec::with_capacity(batches.len());
        for batch in &batches {
            let step = state.steps_done;
            let mut drop_rng = dropout_root.fork(step as u64);
            let tape = Tape::new();
            let vars = tape.bind_all(&model.store);
            let terms = model
                .loss(&tape, &vars, &batch.images, &batch.texts, &batch.labels, &loss_cfg, Some(&mut drop_rng))
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                    other => other,
                })?;
            let total = terms.total.item();
            if !total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {total} at step {step}")));
            }
            let line = terms.log_line(step);
            let grads = tape.backward(terms.total)?;
            model.store.accumulate(&grads);
            drop(tape);
            model
                .store
                .ensure_finite_grads()
                .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
            adam.step(&mut model.store);
            model.store.zero_grad();
            on_line(&line);
            epoch_lines.push(line);
            state.steps_done += 1;
        }
        state.epochs_done = epoch + 1;
        if let (Some(dir), Some(f)) = (run_dir, log_file.as_mut()) {
            for l in &epoch_lines {
                writeln!(f, "{l}").map_err(|e| Error::io(dir.log(), e))?;
            }
            model.save(&dir.checkpoint())?;
            let s = serde_json::to_string(&state).expect("state serializes");
            fs::write(dir.state(), s + "\n").map_err(|e| Error::io(dir.state(), e))?;
        }
        log.extend(epoch_lines);
    }
    Ok(TrainOutcome {
        model,
        log,
        steps: state.steps_done,
        epochs: state.epochs_done,
    })
}

/// Gallery and query embeddings for one evaluation split.
#[derive(Clone, Debug)]
pub struct Embedded {
    /// Every image in the dataset.
    pub gallery: Vec<SampleEmbedding<f32>>,
    /// Captions of the evaluation split.
    pub queries: Vec<SampleEmbedding<f32>>,
}

impl Embedded {
    pub fn new(model: &Model<f32>, data: &Dataset, split: Split) -> Result<Self> {
        let texts: Vec<_> = data.split_pairs(split).map(|(_, p)| p.text.clone()).collect();
        if texts.is_empty() {
            return Err(Error::Data(format!("no {split} captions to evaluate")));
        }
        let gallery = model.embed_images(&data.images)?.into_iter().map(|(e, _)| e).collect();
        let queries = model.embed_texts(&texts)?.into_iter().map(|(e, _)| e).collect();
        Ok(Embedded { gallery, queries })
    }

    pub fn metrics(&self, mode: ScoringMode) -> Result<RankMetrics> {
        let scores = similarity_matrix(&self.queries, &self.gallery, mode)?;
        let qids: Vec<usize> = self.queries.iter().map(|q| q.identity).collect();
        let gids: Vec<usize> = self.gallery.iter().map(|g| g.identity).collect();
        cmc_ranks(&scores, &qids, &gids, mode)
    }

    /// Mean pairwise cosine between heads, averaged over images and
    /// captions separately.
    pub fn head_cosine(&self) -> (f64, f64) {
        (mean_head_cosine(&self.gallery), mean_head_cosine(&self.queries))
    }
}

/// Mean over samples of the mean off-diagonal cosine among the K heads;
/// 0 when `K < 2`.
pub fn mean_head_cosine(embeddings: &[SampleEmbedding<f32>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for e in embeddings {
        let k = e.parts.num_heads();
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    total += f64::from(cosine_unchecked(e.parts.head(i), e.parts.head(j)));
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn evaluate(model: &Model<f32>, data: &Dataset, split: Split, mode: ScoringMode) -> Result<RankMetrics> {
    Embedded::new(model, data, split)?.metrics(mode)
}
