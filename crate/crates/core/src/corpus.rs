//! Recipe/image pairs: tokenization, vocabulary, JSON-lines ingestion, the
//! synthetic paired-corpus generator and padded mini-batches.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercase and split on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> std::result::Result<Self, String> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err("vocabulary must start with the reserved pad and unk entries".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(format!("duplicate vocabulary entry {t:?}"));
            }
        }
        Ok(Vocab { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Keep tokens seen at least `min_count` times, in lexicographic order.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a [String]>, min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in sentences {
            for t in s {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(
            counts
                .into_iter()
                .filter(|(t, c)| *c >= min_count.max(1) && *t != PAD_TOKEN && *t != UNK_TOKEN)
                .map(|(t, _)| t.to_string()),
        );
        Vocab::try_from(tokens).expect("reserved entries are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK_TOKEN)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|i| self.token(*i).to_string()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One line of the JSON-lines corpus format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecipe {
    pub id: String,
    pub ingredients: Vec<String>,
    pub instructions: Vec<String>,
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeDoc {
    pub id: String,
    pub ingredients: Vec<Vec<u32>>,
    pub instructions: Vec<Vec<u32>>,
    pub image_refs: Vec<String>,
}

/// Truncation limits applied at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Caps {
    pub max_ingredients: usize,
    pub max_instructions: usize,
    pub max_words: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            max_ingredients: 20,
            max_instructions: 20,
            max_words: 20,
        }
    }
}

fn tokenize_sentences(
    lines: &[String],
    max_sentences: usize,
    max_words: usize,
) -> Vec<Vec<String>> {
    lines
        .iter()
        .map(|l| {
            let mut t = tokenize(l);
            t.truncate(max_words);
            t
        })
        .filter(|t| !t.is_empty())
        .take(max_sentences)
        .collect()
}

/// Tokenized text of one recipe before id assignment.
#[derive(Debug, Clone)]
struct Tokenized {
    id: String,
    ingredients: Vec<Vec<String>>,
    instructions: Vec<Vec<String>>,
    images: Vec<String>,
}

fn tokenize_raw(raw: &RawRecipe, caps: &Caps) -> Tokenized {
    Tokenized {
        id: raw.id.clone(),
        ingredients: tokenize_sentences(&raw.ingredients, caps.max_ingredients, caps.max_words),
        instructions: tokenize_sentences(&raw.instructions, caps.max_instructions, caps.max_words),
        images: raw.images.clone(),
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub docs: Vec<RecipeDoc>,
    pub vocab: Vocab,
    /// Lines dropped for having no usable ingredients or instructions.
    pub skipped: usize,
}

/// Tokenize raw recipes, building a vocabulary when none is given.
pub fn docs_from_raw(
    raws: &[RawRecipe],
    vocab: Option<&Vocab>,
    min_count: usize,
    caps: &Caps,
) -> Result<LoadedCorpus> {
    let mut kept = Vec::new();
    let mut skipped = 0;
    for raw in raws {
        let t = tokenize_raw(raw, caps);
        if t.ingredients.is_empty() || t.instructions.is_empty() {
            skipped += 1;
            continue;
        }
        kept.push(t);
    }
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} recipes without ingredients or instructions");
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocab::build(
            kept.iter()
                .flat_map(|t| t.ingredients.iter().chain(&t.instructions))
                .map(Vec::as_slice),
            min_count,
        ),
    };
    let docs = kept
        .into_iter()
        .map(|t| RecipeDoc {
            id: t.id,
            ingredients: t.ingredients.iter().map(|s| vocab.encode(s)).collect(),
            instructions: t.instructions.iter().map(|s| vocab.encode(s)).collect(),
            image_refs: t.images,
        })
        .collect();
    Ok(LoadedCorpus {
        docs,
        vocab,
        skipped,
    })
}

pub fn read_raw_corpus(path: &Path) -> Result<Vec<RawRecipe>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecipe = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(raw);
    }
    Ok(out)
}

/// Read a JSON-lines recipe file.
pub fn load_recipe_corpus(
    path: &Path,
    vocab: Option<&Vocab>,
    min_count: usize,
    caps: &Caps,
) -> Result<LoadedCorpus> {
    docs_from_raw(&read_raw_corpus(path)?, vocab, min_count, caps)
}

/// RGB image, row-major HWC, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        ImageTensor {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|v| *v as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dims")
    }

    /// Load and resize to `size × size`.
    pub fn load(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let img = if img.width() as usize != size || img.height() as usize != size {
            image::imageops::resize(
                &img,
                size as u32,
                size as u32,
                image::imageops::FilterType::Triangle,
            )
        } else {
            img
        };
        Ok(Self::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Recipes with every referenced image decoded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub docs: Vec<RecipeDoc>,
    /// `images[i]` holds the images of `docs[i]`; each has at least one.
    pub images: Vec<Vec<ImageTensor>>,
}

impl Dataset {
    pub fn new(docs: Vec<RecipeDoc>, images: Vec<Vec<ImageTensor>>) -> Result<Self> {
        if docs.len() != images.len() {
            return Err(Error::shape("dataset images", docs.len(), images.len()));
        }
        if let Some(d) = docs.iter().zip(&images).find(|(_, im)| im.is_empty()) {
            return Err(Error::InvalidArgument(format!(
                "recipe {} has no image",
                d.0.id
            )));
        }
        Ok(Dataset { docs, images })
    }

    /// Decode the images of `docs` from `root`; recipes whose images are all
    /// missing are dropped with a warning.
    pub fn load_images(docs: Vec<RecipeDoc>, root: &Path, size: usize) -> Result<Self> {
        let mut kept = Vec::new();
        let mut images = Vec::new();
        let mut missing = 0;
        for doc in docs {
            let mut imgs = Vec::new();
            for r in &doc.image_refs {
                let p = root.join(r);
                match ImageTensor::load(&p, size) {
                    Ok(img) => imgs.push(img),
                    Err(Error::Image(image::ImageError::IoError(_))) => missing += 1,
                    Err(e) => return Err(e),
                }
            }
            if !imgs.is_empty() {
                kept.push(doc);
                images.push(imgs);
            }
        }
        if missing > 0 {
            log::warn!("{missing} referenced images could not be read");
        }
        if kept.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Dataset::new(kept, images)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            docs: idx.iter().map(|i| self.docs[*i].clone()).collect(),
            images: idx.iter().map(|i| self.images[*i].clone()).collect(),
        }
    }
}

// ---- synthetic corpus ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOptions {
    pub classes: usize,
    pub pairs: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub pixel_noise: f64,
    /// Distractor tokens inserted into every sentence.
    pub distractors: usize,
    /// Draw one randomly placed, randomly colored patch per image.
    pub clutter: bool,
}

impl SynthOptions {
    pub fn new(classes: usize, pairs: usize, seed: u64) -> Self {
        SynthOptions {
            classes,
            pairs,
            seed,
            image_size: 64,
            pixel_noise: 0.05,
            distractors: 1,
            clutter: true,
        }
    }

    /// Class templates only: no pixel noise, distractors or clutter.
    pub fn noiseless(mut self) -> Self {
        self.pixel_noise = 0.0;
        self.distractors = 0;
        self.clutter = false;
        self
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub raw: Vec<RawRecipe>,
    pub docs: Vec<RecipeDoc>,
    pub images: Vec<ImageTensor>,
    pub vocab: Vocab,
    /// Latent class of every pair.
    pub classes: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn dataset(&self) -> Dataset {
        Dataset::new(
            self.docs.clone(),
            self.images.iter().map(|i| vec![i.clone()]).collect(),
        )
        .expect("generator emits one image per recipe")
    }

    /// Re-encode the text with another vocabulary (e.g. a training split's).
    pub fn with_vocab(&self, vocab: &Vocab) -> Dataset {
        let loaded = docs_from_raw(&self.raw, Some(vocab), 1, &Caps::default())
            .expect("generator emits text");
        Dataset::new(
            loaded.docs,
            self.images.iter().map(|i| vec![i.clone()]).collect(),
        )
        .expect("generator emits one image per recipe")
    }

    /// Write `corpus.jsonl`, `images/<id>.png` and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path, opts: &SynthOptions) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let path = dir.join("corpus.jsonl");
        let mut out = Vec::new();
        for (raw, img) in self.raw.iter().zip(&self.images) {
            serde_json::to_writer(&mut out, raw)?;
            out.push(b'\n');
            img.save_png(&dir.join(&raw.images[0]))?;
        }
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(&path, e))?;
        let manifest = serde_json::json!({
            "generator": opts,
            "pairs": self.raw.len(),
            "vocab_size": self.vocab.len(),
            "classes": self.classes,
        });
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&mpath, e))
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const DISTRACTOR_POOL: usize = 48;
const INGREDIENT_WORDS: usize = 6;
const INSTRUCTION_WORDS: usize = 6;

/// Pronounceable, collision-free pseudo-word for index `i`.
fn pseudo_word(i: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut n = i + base;
    let mut out = String::new();
    while n > 0 {
        let s = n % base;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
        n /= base;
    }
    out
}

fn distractor_word(i: usize) -> String {
    pseudo_word(1_000_000 + i)
}

struct ClassTemplate {
    background: [f32; 3],
    /// `(row, col, color)` of each patch in units of a quarter image.
    patches: Vec<(usize, usize, [f32; 3])>,
    ingredients: Vec<Vec<String>>,
    instructions: Vec<Vec<String>>,
}

/// Deterministic in the class index alone, so independently seeded corpora
/// share their classes.
fn class_template(c: usize) -> ClassTemplate {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d63_656e_0000 + c as u64);
    let color = |rng: &mut ChaCha8Rng| {
        [
            rng.gen_range(0.1..0.95),
            rng.gen_range(0.1..0.95),
            rng.gen_range(0.1..0.95),
        ]
    };
    let background = {
        let g = rng.gen_range(0.35..0.65f32);
        [g, g, g]
    };
    let mut cells: Vec<usize> = (0..16).collect();
    cells.shuffle(&mut rng);
    let patches = cells[..3]
        .iter()
        .map(|cell| (cell / 4, cell % 4, color(&mut rng)))
        .collect();

    let ing_vocab: Vec<String> = (0..INGREDIENT_WORDS)
        .map(|j| pseudo_word(c * 64 + j))
        .collect();
    let ins_vocab: Vec<String> = (0..INSTRUCTION_WORDS)
        .map(|j| pseudo_word(c * 64 + 32 + j))
        .collect();
    let sentence = |rng: &mut ChaCha8Rng, words: &[String], len: usize| -> Vec<String> {
        (0..len)
            .map(|_| words[rng.gen_range(0..words.len())].clone())
            .collect()
    };
    let ingredients = (0..3)
        .map(|_| {
            let len = rng.gen_range(2..=3);
            sentence(&mut rng, &ing_vocab, len)
        })
        .collect();
    let instructions = (0..2)
        .map(|_| {
            let len = rng.gen_range(3..=4);
            sentence(&mut rng, &ins_vocab, len)
        })
        .collect();
    ClassTemplate {
        background,
        patches,
        ingredients,
        instructions,
    }
}

fn render(
    t: &ClassTemplate,
    size: usize,
    opts: &SynthOptions,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    let mut data = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        data.extend_from_slice(&t.background);
    }
    let fill =
        |data: &mut Vec<f32>, top: usize, left: usize, h: usize, w: usize, color: [f32; 3]| {
            for y in top..(top + h).min(size) {
                for x in left..(left + w).min(size) {
                    let o = (y * size + x) * 3;
                    data[o..o + 3].copy_from_slice(&color);
                }
            }
        };
    let q = size / 4;
    for (r, c, color) in &t.patches {
        fill(&mut data, r * q, c * q, q, q, *color);
    }
    if opts.clutter {
        let side = (size / 8).max(1);
        let top = rng.gen_range(0..=size - side);
        let left = rng.gen_range(0..=size - side);
        let color = [
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        ];
        fill(&mut data, top, left, side, side, color);
    }
    if opts.pixel_noise > 0.0 {
        let normal = Normal::new(0.0, opts.pixel_noise).expect("finite std");
        for v in data.iter_mut() {
            *v += normal.sample(rng) as f32;
        }
    }
    // quantize so written PNGs reload bit-identically
    for v in data.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    ImageTensor {
        height: size,
        width: size,
        data,
    }
}

fn with_distractors(rng: &mut ChaCha8Rng, sentence: &[String], count: usize) -> String {
    let mut words = sentence.to_vec();
    for _ in 0..count {
        let pos = rng.gen_range(0..=words.len());
        words.insert(pos, distractor_word(rng.gen_range(0..DISTRACTOR_POOL)));
    }
    words.join(" ")
}

/// Paired corpus of `pairs` recipes over `classes` latent classes. Same
/// options give a bit-identical corpus.
pub fn generate_synthetic(opts: &SynthOptions) -> Result<SyntheticCorpus> {
    if opts.classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            opts.classes
        )));
    }
    if opts.pairs < opts.classes {
        return Err(Error::InvalidArgument(format!(
            "{} pairs cannot cover {} classes",
            opts.pairs, opts.classes
        )));
    }
    if opts.image_size < 8 {
        return Err(Error::InvalidArgument(format!(
            "image size {} below 8",
            opts.image_size
        )));
    }
    let templates: Vec<ClassTemplate> = (0..opts.classes).map(class_template).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut classes: Vec<usize> = (0..opts.pairs).map(|i| i % opts.classes).collect();
    classes.shuffle(&mut rng);

    let mut raw = Vec::with_capacity(opts.pairs);
    let mut images = Vec::with_capacity(opts.pairs);
    for (i, &c) in classes.iter().enumerate() {
        let t = &templates[c];
        let id = format!("s{:05}", i);
        let ingredients = t
            .ingredients
            .iter()
            .map(|s| with_distractors(&mut rng, s, opts.distractors))
            .collect();
        let instructions = t
            .instructions
            .iter()
            .map(|s| with_distractors(&mut rng, s, opts.distractors))
            .collect();
        images.push(render(t, opts.image_size, opts, &mut rng));
        raw.push(RawRecipe {
            images: vec![format!("images/{id}.png")],
            id,
            ingredients,
            instructions,
        });
    }
    let loaded = docs_from_raw(&raw, None, 1, &Caps::default())?;
    Ok(SyntheticCorpus {
        raw,
        docs: loaded.docs,
        images,
        vocab: loaded.vocab,
        classes,
    })
}

// ---- batching ----

/// Sentences of a batch padded to per-batch maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBlock {
    pub batch: usize,
    pub n_max: usize,
    pub l_max: usize,
    /// `batch × n_max × l_max` ids, row-major, [`PAD`] on padding.
    pub tokens: Vec<u32>,
    /// Real sentences per row.
    pub sentences: Vec<usize>,
    /// Real words per `(row, sentence)`; 0 for padded sentences.
    pub words: Vec<usize>,
}

impl TextBlock {
    pub fn from_docs(sentences: &[&[Vec<u32>]]) -> Self {
        let batch = sentences.len();
        let n_max = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
        let l_max = sentences
            .iter()
            .flat_map(|s| s.iter().map(Vec::len))
            .max()
            .unwrap_or(0);
        let mut tokens = vec![PAD; batch * n_max * l_max];
        let mut words = vec![0; batch * n_max];
        for (b, doc) in sentences.iter().enumerate() {
            for (j, sent) in doc.iter().enumerate() {
                words[b * n_max + j] = sent.len();
                let o = (b * n_max + j) * l_max;
                tokens[o..o + sent.len()].copy_from_slice(sent);
            }
        }
        TextBlock {
            batch,
            n_max,
            l_max,
            tokens,
            sentences: sentences.iter().map(|s| s.len()).collect(),
            words,
        }
    }

    pub fn token(&self, b: usize, j: usize, t: usize) -> u32 {
        self.tokens[(b * self.n_max + j) * self.l_max + t]
    }

    pub fn sentence_mask(&self, b: usize, j: usize) -> bool {
        j < self.sentences[b]
    }

    pub fn word_mask(&self, b: usize, j: usize, t: usize) -> bool {
        t < self.words[b * self.n_max + j]
    }

    /// `batch × n_max` sentence mask as 0/1.
    pub fn sentence_masks(&self) -> Array2<u8> {
        Array2::from_shape_fn((self.batch, self.n_max), |(b, j)| {
            self.sentence_mask(b, j) as u8
        })
    }

    /// `(batch·n_max) × l_max` word mask as 0/1.
    pub fn word_masks(&self) -> Array2<u8> {
        Array2::from_shape_fn((self.batch * self.n_max, self.l_max), |(r, t)| {
            (t < self.words[r]) as u8
        })
    }

    /// `(row, sentence)` of every real sentence, row-major.
    pub fn real_sentences(&self) -> Vec<(usize, usize)> {
        (0..self.batch)
            .flat_map(|b| (0..self.sentences[b]).map(move |j| (b, j)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PairBatch<T> {
    /// `B × (H·W·3)` HWC rows.
    pub images: Array2<T>,
    pub image_size: (usize, usize),
    pub ingredients: TextBlock,
    pub instructions: TextBlock,
    pub pair_ids: Vec<String>,
    /// Dataset index of every row.
    pub indices: Vec<usize>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }

    /// Build a batch from dataset rows, taking image `pick[k]` of row `idx[k]`.
    pub fn build(data: &Dataset, idx: &[usize], pick: &[usize]) -> Result<Self> {
        let first = &data.images[idx[0]][pick[0]];
        let (h, w) = (first.height, first.width);
        let mut images = Array2::zeros((idx.len(), h * w * ImageTensor::CHANNELS));
        for (k, (&i, &p)) in idx.iter().zip(pick).enumerate() {
            let img = &data.images[i][p];
            if (img.height, img.width) != (h, w) {
                return Err(Error::shape(
                    "batch image",
                    format!("{h}x{w}"),
                    format!("{}x{}", img.height, img.width),
                ));
            }
            for (dst, src) in images.row_mut(k).iter_mut().zip(&img.data) {
                *dst = T::of(*src as f64);
            }
        }
        let ing: Vec<&[Vec<u32>]> = idx
            .iter()
            .map(|i| data.docs[*i].ingredients.as_slice())
            .collect();
        let ins: Vec<&[Vec<u32>]> = idx
            .iter()
            .map(|i| data.docs[*i].instructions.as_slice())
            .collect();
        Ok(PairBatch {
            images,
            image_size: (h, w),
            ingredients: TextBlock::from_docs(&ing),
            instructions: TextBlock::from_docs(&ins),
            pair_ids: idx.iter().map(|i| data.docs[*i].id.clone()).collect(),
            indices: idx.to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled order, random image per recipe, short final batch dropped.
    Train { seed: u64, epoch: u64 },
    /// Corpus order, first image, final short batch kept.
    Eval,
}

/// Rows and image choices of every batch of one pass.
pub fn batch_plan(
    data: &Dataset,
    batch_size: usize,
    mode: BatchMode,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let n = data.len();
    match mode {
        BatchMode::Train { seed, epoch } => {
            if batch_size < 2 {
                return Err(Error::BatchTooSmall(batch_size));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            Ok(order
                .chunks_exact(batch_size)
                .map(|c| {
                    let pick = c
                        .iter()
                        .map(|i| rng.gen_range(0..data.images[*i].len()))
                        .collect();
                    (c.to_vec(), pick)
                })
                .collect())
        }
        BatchMode::Eval => {
            if batch_size < 1 {
                return Err(Error::InvalidArgument("batch size 0".into()));
            }
            let order: Vec<usize> = (0..n).collect();
            Ok(order
                .chunks(batch_size)
                .map(|c| (c.to_vec(), vec![0; c.len()]))
                .collect())
        }
    }
}

/// Lazily built batches of one pass over `data`.
pub fn make_batches<T: Scalar>(
    data: &Dataset,
    batch_size: usize,
    mode: BatchMode,
) -> Result<impl Iterator<Item = Result<PairBatch<T>>> + '_> {
    let plan = batch_plan(data, batch_size, mode)?;
    Ok(plan
        .into_iter()
        .map(move |(idx, pick)| PairBatch::build(data, &idx, &pick)))
}

/// Path of `rel` relative to the corpus file's directory.
pub fn resolve_image_root(corpus: &Path, images: Option<&Path>) -> PathBuf {
    match images {
        Some(p) => p.to_path_buf(),
        None => corpus.parent().map(Path::to_path_buf).unwrap_or_default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(id: &str, ing: &[&str], ins: &[&str]) -> RawRecipe {
        RawRecipe {
            id: id.into(),
            ingredients: ing.iter().map(|s| s.to_string()).collect(),
            instructions: ins.iter().map(|s| s.to_string()).collect(),
            images: vec![format!("{id}.jpg")],
        }
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("2 Cups flour, sifted."),
            vec!["2", "cups", "flour", "sifted"]
        );
        assert!(tokenize("  ... ").is_empty());
    }

    #[test]
    fn line_maps_to_doc() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(
            &p,
            r#"{"id":"a","ingredients":["salt","2 cups flour"],"instructions":["mix well"],"images":["a.jpg"]}"#,
        )
        .unwrap();
        let c = load_recipe_corpus(&p, None, 1, &Caps::default()).unwrap();
        assert_eq!(c.docs.len(), 1);
        assert_eq!(c.docs[0].ingredients.len(), 2);
        assert_eq!(c.docs[0].instructions.len(), 1);
        assert_eq!(c.docs[0].image_refs, vec!["a.jpg"]);
    }

    #[test]
    fn empty_corpus_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(&p, "\n").unwrap();
        let err = load_recipe_corpus(&p, None, 2, &Caps::default()).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
        let raws = vec![raw("x", &[], &["stir"])];
        assert!(matches!(
            docs_from_raw(&raws, None, 1, &Caps::default()),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn malformed_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let good = serde_json::to_string(&raw("a", &["salt"], &["mix"])).unwrap();
        fs::write(&p, format!("{good}\n{{oops\n")).unwrap();
        let err = load_recipe_corpus(&p, None, 1, &Caps::default()).unwrap_err();
        assert!(err.to_string().starts_with("line 2:"), "{err}");
    }

    #[test]
    fn rare_tokens_become_unk() {
        let raws = vec![
            raw("a", &["salt pepper"], &["mix"]),
            raw("b", &["salt"], &["mix"]),
        ];
        let c = docs_from_raw(&raws, None, 2, &Caps::default()).unwrap();
        assert_eq!(c.docs[0].ingredients[0][1], UNK);
        assert_ne!(c.docs[0].ingredients[0][0], UNK);
        assert_eq!(c.skipped, 0);
    }

    #[test]
    fn docs_without_text_are_skipped() {
        let raws = vec![raw("a", &["salt"], &["mix"]), raw("b", &["!!"], &["mix"])];
        let c = docs_from_raw(&raws, None, 1, &Caps::default()).unwrap();
        assert_eq!(c.docs.len(), 1);
        assert_eq!(c.skipped, 1);
    }

    #[test]
    fn caps_truncate() {
        let caps = Caps {
            max_ingredients: 1,
            max_instructions: 1,
            max_words: 2,
        };
        let raws = vec![raw("a", &["a b c", "d"], &["e f g h", "i"])];
        let c = docs_from_raw(&raws, None, 1, &caps).unwrap();
        assert_eq!(
            c.docs[0].ingredients,
            vec![vec![c.vocab.id("a"), c.vocab.id("b")]]
        );
        assert_eq!(c.docs[0].instructions.len(), 1);
    }

    #[test]
    fn vocab_json_round_trip() {
        let toks: Vec<String> = tokenize("b a c a");
        let v = Vocab::build([toks.as_slice()], 1);
        let back: Vocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(v, back);
        assert!(serde_json::from_str::<Vocab>(r#"["a","b"]"#).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let opts = SynthOptions::new(4, 64, 7);
        let a = generate_synthetic(&opts).unwrap();
        let b = generate_synthetic(&opts).unwrap();
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.images, b.images);
        assert_eq!(a.vocab, b.vocab);
        let c = generate_synthetic(&SynthOptions::new(4, 64, 8)).unwrap();
        assert_ne!(a.raw, c.raw);
    }

    #[test]
    fn synthetic_same_class_shares_template_tokens() {
        let opts = SynthOptions::new(4, 16, 3);
        let s = generate_synthetic(&opts).unwrap();
        let clean = generate_synthetic(&opts.clone().noiseless()).unwrap();
        let (i, j) = (0..16)
            .flat_map(|i| (i + 1..16).map(move |j| (i, j)))
            .find(|(i, j)| s.classes[*i] == s.classes[*j])
            .unwrap();
        assert_eq!(clean.raw[i].ingredients, clean.raw[j].ingredients);
        assert_ne!(s.raw[i].ingredients, s.raw[j].ingredients);
        // every class word of the clean text also appears in the noisy text
        let noisy: Vec<String> = s.raw[i]
            .ingredients
            .iter()
            .flat_map(|l| tokenize(l))
            .collect();
        for w in clean.raw[i].ingredients.iter().flat_map(|l| tokenize(l)) {
            assert!(noisy.contains(&w));
        }
    }

    #[test]
    fn synthetic_preconditions() {
        assert!(generate_synthetic(&SynthOptions::new(2, 1, 0)).is_err());
        assert!(generate_synthetic(&SynthOptions::new(1, 4, 0)).is_err());
    }

    #[test]
    fn written_corpus_reloads() {
        let opts = SynthOptions::new(3, 6, 1);
        let s = generate_synthetic(&opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.write(dir.path(), &opts).unwrap();
        let c = load_recipe_corpus(
            &dir.path().join("corpus.jsonl"),
            Some(&s.vocab),
            1,
            &Caps::default(),
        )
        .unwrap();
        assert_eq!(c.docs, s.docs);
        let d = Dataset::load_images(c.docs, dir.path(), 64).unwrap();
        for (a, b) in d.images.iter().zip(&s.images) {
            assert_eq!(&a[0], b);
        }
    }

    fn tiny_dataset(ins_counts: &[usize]) -> Dataset {
        let docs = ins_counts
            .iter()
            .enumerate()
            .map(|(i, m)| RecipeDoc {
                id: format!("d{i}"),
                ingredients: vec![vec![2, 3]],
                instructions: (0..*m).map(|k| vec![4; k + 1]).collect(),
                image_refs: vec![],
            })
            .collect();
        let img = ImageTensor {
            height: 2,
            width: 2,
            data: vec![0.5; 12],
        };
        Dataset::new(docs, vec![vec![img]; ins_counts.len()]).unwrap()
    }

    #[test]
    fn padding_and_masks() {
        let d = tiny_dataset(&[1, 3]);
        let b = PairBatch::<f32>::build(&d, &[0, 1], &[0, 0]).unwrap();
        assert_eq!(b.instructions.n_max, 3);
        assert_eq!(
            b.instructions.sentence_masks().row(0).to_vec(),
            vec![1, 0, 0]
        );
        assert_eq!(b.instructions.l_max, 3);
        let wm = b.instructions.word_masks();
        assert_eq!(wm.row(0).to_vec(), vec![1, 0, 0]);
        assert_eq!(wm.row(1).to_vec(), vec![0, 0, 0]);
        assert_eq!(wm.row(5).to_vec(), vec![1, 1, 1]);
    }

    #[test]
    fn training_drops_short_batch() {
        let d = tiny_dataset(&vec![1; 65]);
        let train: Vec<_> = make_batches::<f32>(&d, 32, BatchMode::Train { seed: 1, epoch: 0 })
            .unwrap()
            .collect();
        assert_eq!(train.len(), 2);
        let eval: Vec<_> = make_batches::<f32>(&d, 32, BatchMode::Eval)
            .unwrap()
            .collect();
        assert_eq!(eval.len(), 3);
        assert!(matches!(
            batch_plan(&d, 1, BatchMode::Train { seed: 0, epoch: 0 }),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn epochs_shuffle_differently() {
        let d = tiny_dataset(&vec![1; 40]);
        let a = batch_plan(&d, 8, BatchMode::Train { seed: 3, epoch: 0 }).unwrap();
        let b = batch_plan(&d, 8, BatchMode::Train { seed: 3, epoch: 1 }).unwrap();
        let a2 = batch_plan(&d, 8, BatchMode::Train { seed: 3, epoch: 0 }).unwrap();
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(words in proptest::collection::vec("[a-z]{1,6}", 1..12)) {
            let v = Vocab::build([words.as_slice()], 1);
            prop_assert_eq!(v.decode(&v.encode(&words)), words);
        }

        #[test]
        fn batch_masks_follow_lengths(lens in proptest::collection::vec(proptest::collection::vec(1usize..6, 1..5), 2..6)) {
            let docs: Vec<Vec<Vec<u32>>> = lens.iter().map(|d| d.iter().map(|l| vec![7; *l]).collect()).collect();
            let refs: Vec<&[Vec<u32>]> = docs.iter().map(Vec::as_slice).collect();
            let block = TextBlock::from_docs(&refs);
            let wm = block.word_masks();
            for b in 0..block.batch {
                for j in 0..block.n_max {
                    let row = wm.row(b * block.n_max + j);
                    let sum: usize = row.iter().map(|x| *x as usize).sum();
                    if block.sentence_mask(b, j) {
                        prop_assert!(sum >= 1);
                        prop_assert_eq!(sum, lens[b][j]);
                    } else {
                        prop_assert_eq!(sum, 0);
                    }
                    for t in 0..block.l_max {
                        prop_assert_eq!(block.token(b, j, t) != PAD, block.word_mask(b, j, t));
                    }
                }
            }
        }

        #[test]
        fn noiseless_tokens_equal_iff_same_class(seed in 0u64..200) {
            let s = generate_synthetic(&SynthOptions::new(3, 9, seed).noiseless()).unwrap();
            for i in 0..9 {
                for j in 0..9 {
                    let same = s.docs[i].ingredients == s.docs[j].ingredients
                        && s.docs[i].instructions == s.docs[j].instructions;
                    prop_assert_eq!(same, s.classes[i] == s.classes[j]);
                }
            }
        }
    }
}
