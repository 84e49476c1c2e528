//! Synthetic paired datasets, JSON Lines manifests and batching.
//!
//! A manifest line is
//! `{"image":"images/id000_00.rtf","caption":"...","identity":7,"split":"train"}`
//! with image paths relative to the manifest's directory. Images are RTF1
//! tensors of shape `H×W×C`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{ImageSample, TextSample, Vocab};
use crate::error::{Error, Result};
use crate::numeric::rtf::{load_tensor, save_tensor};
use crate::numeric::{Rng, Tensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

const CHANNELS: usize = 3;
const GRID: usize = 4;
const FILLER: [&str; 8] = ["a", "person", "wearing", "with", "and", "the", "walking", "has"];
const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ru", "te", "zo", "pa", "ne", "shi", "vu", "do", "be"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train|val|test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub caption: String,
    pub identity: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path)
            .map_err(|e| Error::Data(format!("cannot open manifest {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(entry);
        }
        if entries.is_empty() {
            return Err(Error::Data(format!("manifest {} has no entries", path.display())));
        }
        Ok(DatasetManifest {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn write(&self) -> Result<()> {
        let io = |e| Error::io(&self.path, e);
        let mut w = BufWriter::new(File::create(&self.path).map_err(io)?);
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("entry serializes");
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn root(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_ids: usize,
    pub images_per_id: usize,
    pub captions_per_image: usize,
    /// Square side length in pixels.
    pub image_size: usize,
    pub vocab_words_per_id: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_ids: 20,
            images_per_id: 5,
            captions_per_image: 2,
            image_size: 32,
            vocab_words_per_id: 4,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_ids", self.num_ids),
            ("images_per_id", self.images_per_id),
            ("captions_per_image", self.captions_per_image),
            ("image_size", self.image_size),
            ("vocab_words_per_id", self.vocab_words_per_id),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be >= 1")));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if !self.image_size.is_multiple_of(GRID) {
            return Err(Error::Config(format!(
                "image_size {} must be a multiple of {GRID}",
                self.image_size
            )));
        }
        let available = SYLLABLES.len().pow(3);
        if self.num_ids * self.vocab_words_per_id > available {
            return Err(Error::Config(format!(
                "at most {available} identity words available, asked for {}",
                self.num_ids * self.vocab_words_per_id
            )));
        }
        Ok(())
    }

    /// Held-out policy: with two or more captions per image the last caption
    /// of every image is a test query; otherwise the last image of every
    /// identity is.
    fn split_of(&self, image: usize, caption: usize) -> Split {
        let last_caption = caption + 1 == self.captions_per_image;
        let last_image = image + 1 == self.images_per_id;
        let held_out = if self.captions_per_image >= 2 {
            last_caption
        } else {
            self.images_per_id >= 2 && last_image
        };
        if held_out {
            Split::Test
        } else {
            Split::Train
        }
    }
}

fn identity_words(rng: &mut Rng, spec: &SynthSpec) -> Vec<Vec<String>> {
    let mut pool: Vec<String> = SYLLABLES
        .iter()
        .flat_map(|a| SYLLABLES.iter().flat_map(move |b| SYLLABLES.iter().map(move |c| format!("{a}{b}{c}"))))
        .collect();
    rng.shuffle(&mut pool);
    pool.chunks(spec.vocab_words_per_id)
        .take(spec.num_ids)
        .map(<[String]>::to_vec)
        .collect()
}

/// One random RGB color per cell of a `GRID×GRID` layout.
fn base_pattern(rng: &mut Rng, size: usize) -> Tensor<f32> {
    let colors: Vec<[f32; CHANNELS]> = (0..GRID * GRID)
        .map(|_| [rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32])
        .collect();
    let cell = size / GRID;
    let mut data = Vec::with_capacity(size * size * CHANNELS);
    for y in 0..size {
        for x in 0..size {
            data.extend_from_slice(&colors[(y / cell) * GRID + x / cell]);
        }
    }
    Tensor::new(vec![size, size, CHANNELS], data).expect("pattern shape")
}

fn caption(rng: &mut Rng, words: &[String]) -> String {
    let mut tokens: Vec<&str> = words.iter().map(String::as_str).collect();
    rng.shuffle(&mut tokens);
    for _ in 0..2 {
        let at = rng.below(tokens.len() + 1);
        tokens.insert(at, FILLER[rng.below(FILLER.len())]);
    }
    tokens.join(" ")
}

/// Writes `out_dir/manifest.jsonl` and `out_dir/images/*.rtf`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let root = Rng::new(spec.seed);
    let words = identity_words(&mut root.fork(1), spec);
    let mut pattern_rng = root.fork(2);
    let mut noise_rng = root.fork(3);
    let mut caption_rng = root.fork(4);
    let mut entries = Vec::with_capacity(spec.num_ids * spec.images_per_id * spec.captions_per_image);
    for id in 0..spec.num_ids {
        let base = base_pattern(&mut pattern_rng, spec.image_size);
        for j in 0..spec.images_per_id {
            let noisy = base
                .data()
                .iter()
                .map(|&v| (f64::from(v) + spec.noise_std * noise_rng.normal()).clamp(0.0, 1.0) as f32)
                .collect();
            let pixels = Tensor::new(base.shape().to_vec(), noisy)?;
            let rel = format!("images/id{id:03}_{j:02}.rtf");
            save_tensor(&out_dir.join(&rel), &pixels)?;
            for c in 0..spec.captions_per_image {
                entries.push(ManifestEntry {
                    image: rel.clone(),
                    caption: caption(&mut caption_rng, &words[id]),
                    identity: id as u64,
                    split: spec.split_of(j, c),
                });
            }
        }
    }
    let manifest = DatasetManifest {
        path: out_dir.join(MANIFEST_FILE),
        entries,
    };
    manifest.write()?;
    Ok(manifest)
}

/// Original identity labels in contiguous order: index `i` holds the label
/// that was remapped to `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityMap {
    pub original: Vec<u64>,
}

impl IdentityMap {
    /// Train identities first (sorted), then any identity seen only in
    /// other splits.
    pub fn from_entries(entries: &[ManifestEntry]) -> Self {
        let mut train: Vec<u64> = entries.iter().filter(|e| e.split == Split::Train).map(|e| e.identity).collect();
        train.sort_unstable();
        train.dedup();
        let mut rest: Vec<u64> = entries
            .iter()
            .map(|e| e.identity)
            .filter(|id| train.binary_search(id).is_err())
            .collect();
        rest.sort_unstable();
        rest.dedup();
        train.extend(rest);
        IdentityMap { original: train }
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    fn index(&self) -> HashMap<u64, usize> {
        self.original.iter().enumerate().map(|(i, &o)| (o, i)).collect()
    }

    /// Appends identities not yet mapped, keeping existing indices.
    pub fn extend_with(&mut self, entries: &[ManifestEntry]) {
        let known = self.index();
        let mut extra: Vec<u64> = entries.iter().map(|e| e.identity).filter(|id| !known.contains_key(id)).collect();
        extra.sort_unstable();
        extra.dedup();
        self.original.extend(extra);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("map serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read identity map {}: {e}", path.display())))?;
        let map: IdentityMap = serde_json::from_str(&s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut seen = map.original.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != map.original.len() {
            return Err(Error::Data(format!("{}: duplicate identities", path.display())));
        }
        Ok(map)
    }
}

/// One caption with its image and remapped identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    /// Index into [`Dataset::images`].
    pub image: usize,
    /// Line index in the manifest.
    pub entry: usize,
    pub caption: String,
    pub text: TextSample,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<ImageSample>,
    pub image_paths: Vec<String>,
    pub pairs: Vec<Pair>,
    pub vocab: Vocab,
    pub identities: IdentityMap,
    pub max_len: usize,
}

/// Vocabulary and identity mapping to reuse instead of deriving them from
/// the manifest, as when evaluating a trained model.
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    pub vocab: Option<Vocab>,
    pub identities: Option<IdentityMap>,
}

pub fn load_dataset(manifest_path: &Path, max_len: usize) -> Result<Dataset> {
    load_dataset_with(manifest_path, max_len, LoadOptions::default())
}

pub fn load_dataset_with(manifest_path: &Path, max_len: usize, opts: LoadOptions) -> Result<Dataset> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    let manifest = DatasetManifest::read(manifest_path)?;
    let root = manifest.root().to_path_buf();
    let vocab = opts.vocab.unwrap_or_else(|| {
        Vocab::build(
            manifest
                .entries
                .iter()
                .filter(|e| e.split == Split::Train)
                .map(|e| e.caption.as_str()),
        )
    });
    let identities = match opts.identities {
        Some(mut m) => {
            m.extend_with(&manifest.entries);
            m
        }
        None => IdentityMap::from_entries(&manifest.entries),
    };
    let id_index = identities.index();

    let mut image_index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut images: Vec<ImageSample> = Vec::new();
    let mut image_paths = Vec::new();
    let mut pairs = Vec::with_capacity(manifest.entries.len());
    for (n, e) in manifest.entries.iter().enumerate() {
        let identity = id_index[&e.identity];
        let image = match image_index.get(e.image.as_str()) {
            Some(&i) => {
                if images[i].identity != identity {
                    return Err(Error::Data(format!(
                        "manifest line {}: image {} listed under identities {} and {}",
                        n + 1,
                        e.image,
                        identities.original[images[i].identity],
                        e.identity
                    )));
                }
                i
            }
            None => {
                let path = root.join(&e.image);
                if !path.is_file() {
                    return Err(Error::Data(format!(
                        "manifest line {}: missing image file {}",
                        n + 1,
                        path.display()
                    )));
                }
                let pixels: Tensor<f32> = load_tensor(&path)
                    .map_err(|err| Error::Data(format!("manifest line {}: {err}", n + 1)))?;
                if pixels.shape().len() != 3 {
                    return Err(Error::Data(format!(
                        "manifest line {}: {} has shape {:?}, expected HxWxC",
                        n + 1,
                        path.display(),
                        pixels.shape()
                    )));
                }
                if let Some(first) = images.first() {
                    if first.pixels.shape() != pixels.shape() {
                        return Err(Error::Data(format!(
                            "manifest line {}: {} has shape {:?}, others are {:?}",
                            n + 1,
                            path.display(),
                            pixels.shape(),
                            first.pixels.shape()
                        )));
                    }
                }
                images.push(ImageSample { pixels, identity });
                image_paths.push(e.image.clone());
                image_index.insert(&e.image, images.len() - 1);
                images.len() - 1
            }
        };
        let mut text = vocab.tokenize(&e.caption, max_len);
        text.identity = identity;
        if text.length == 0 {
            return Err(Error::Data(format!("manifest line {}: empty caption", n + 1)));
        }
        pairs.push(Pair {
            image,
            entry: n,
            caption: e.caption.clone(),
            text,
            split: e.split,
        });
    }
    Ok(Dataset {
        images,
        image_paths,
        pairs,
        vocab,
        identities,
        max_len,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled, partial final batch dropped.
    Train,
    /// In order, partial final batch kept.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Vec<ImageSample>,
    pub texts: Vec<TextSample>,
    pub labels: Vec<usize>,
    /// Pair indices, for tracing a batch back to manifest entries.
    pub pairs: Vec<usize>,
}

impl Dataset {
    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn split_pairs(&self, split: Split) -> impl Iterator<Item = (usize, &Pair)> {
        self.pairs.iter().enumerate().filter(move |(_, p)| p.split == split)
    }

    /// Images with at least one caption in `split`, each with those captions.
    pub fn images_with_captions(&self, split: Split) -> Vec<(usize, Vec<usize>)> {
        let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.split_pairs(split) {
            by_image.entry(p.image).or_default().push(i);
        }
        by_image.into_iter().collect()
    }

    /// Fraction of words in `split` captions that fall outside the vocabulary.
    pub fn oov_rate(&self, split: Split) -> f64 {
        self.vocab.oov_rate(self.split_pairs(split).map(|(_, p)| p.caption.as_str()))
    }

    /// Batches of one epoch over the images that have `split` captions. Each
    /// image is paired with one of its captions drawn uniformly for the epoch.
    pub fn epoch_batches(&self, split: Split, batch_size: usize, seed: u64, epoch: u64, mode: BatchMode) -> Result<Vec<Batch>> {
        let units = self.images_with_captions(split);
        if batch_size == 0 || (mode == BatchMode::Train && batch_size > units.len()) {
            return Err(Error::Config(format!(
                "batch_size {batch_size} must be in 1..={} for the {split} split",
                units.len()
            )));
        }
        let mut rng = Rng::new(seed).fork(epoch);
        let mut order: Vec<usize> = (0..units.len()).collect();
        if mode == BatchMode::Train {
            rng.shuffle(&mut order);
        }
        let picks: Vec<usize> = order
            .iter()
            .map(|&u| {
                let captions = &units[u].1;
                captions[rng.below(captions.len())]
            })
            .collect();
        let batches = picks
            .chunks(batch_size)
            .filter(|c| mode == BatchMode::Eval || c.len() == batch_size)
            .map(|chunk| {
                let mut b = Batch {
                    images: Vec::with_capacity(chunk.len()),
                    texts: Vec::with_capacity(chunk.len()),
                    labels: Vec::with_capacity(chunk.len()),
                    pairs: chunk.to_vec(),
                };
                for &pi in chunk {
                    let p = &self.pairs[pi];
                    let img = &self.images[p.image];
                    b.images.push(img.clone());
                    b.texts.push(p.text.clone());
                    b.labels.push(img.identity);
                }
                b
            })
            .collect();
        Ok(batches)
    }
}
