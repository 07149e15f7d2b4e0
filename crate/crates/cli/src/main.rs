use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcen_core::config::{load_run_data, RunConfig};
use mcen_core::corpus::{
    docs_from_raw, generate_synthetic, read_raw_corpus, resolve_image_root, Caps, Dataset,
    ImageTensor, SynthOptions, TextBlock,
};
use mcen_core::eval::{evaluate_model, write_embeddings, EmbeddingFormat, EmbeddingRecord};
use mcen_core::model::Modality;
use mcen_core::trainer::{load_checkpoint, Checkpoint, FitOutput, Trainer};
use mcen_core::viz::{attention_maps, write_attention};
use mcen_core::{DType, Error, ErrorKind, Result, Scalar};
use ndarray::Array2;

#[derive(Parser)]
#[command(name = "mcen", version, about = "Cross-modal recipe/image embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// Class templates only: no pixel noise, distractor words or clutter.
        #[arg(long)]
        noiseless: bool,
    },
    /// Train from a run configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the `last/` checkpoint in the configured run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Retrieval metrics of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Image root; defaults to the corpus file's directory.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export inference embeddings of one modality.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file or directory of images, or a JSON-lines recipe file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        modality: Modality,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "binary")]
        format: EmbeddingFormat,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Export region and ingredient attention with heat-map overlays.
    Attnviz {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON-lines corpus with images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Export at most this many pairs.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Print the default run configuration.
    PrintDefaultConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[config]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (tag, code) = match e.kind() {
                ErrorKind::Config => ("config", 2),
                ErrorKind::Data => ("data", 3),
                ErrorKind::Numeric => ("numeric", 4),
            };
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{tag}]: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            classes,
            pairs,
            seed,
            out,
            image_size,
            noiseless,
        } => {
            let mut opts = SynthOptions::new(classes, pairs, seed);
            opts.image_size = image_size;
            if noiseless {
                opts = opts.noiseless();
            }
            let corpus = generate_synthetic(&opts)?;
            corpus.write(&out, &opts)?;
            log::info!("wrote {pairs} pairs to {}", out.display());
            Ok(())
        }
        Command::Train { config, resume } => {
            let config = RunConfig::load(&config)?;
            match config.data.precision {
                DType::F32 => train::<f32>(&config, resume),
                DType::F64 => train::<f64>(&config, resume),
            }
        }
        Command::Eval {
            checkpoint,
            corpus,
            images,
            size,
            repeats,
            seed,
            batch_size,
            out,
        } => {
            let report = with_checkpoint(&checkpoint, |dtype| match dtype {
                DType::F32 => eval::<f32>(
                    &checkpoint,
                    &corpus,
                    images.as_deref(),
                    size,
                    repeats,
                    seed,
                    batch_size,
                ),
                DType::F64 => eval::<f64>(
                    &checkpoint,
                    &corpus,
                    images.as_deref(),
                    size,
                    repeats,
                    seed,
                    batch_size,
                ),
            })?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(path) = out {
                fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
        Command::Embed {
            checkpoint,
            input,
            modality,
            out,
            format,
            batch_size,
        } => {
            let records = with_checkpoint(&checkpoint, |dtype| match dtype {
                DType::F32 => embed::<f32>(&checkpoint, &input, modality, batch_size),
                DType::F64 => embed::<f64>(&checkpoint, &input, modality, batch_size),
            })?;
            write_embeddings(&out, &records, format)?;
            log::info!(
                "wrote {} {} embeddings to {}",
                records.len(),
                modality_name(modality),
                out.display()
            );
            Ok(())
        }
        Command::Attnviz {
            checkpoint,
            input,
            images,
            out,
            limit,
        } => with_checkpoint(&checkpoint, |dtype| match dtype {
            DType::F32 => attnviz::<f32>(&checkpoint, &input, images.as_deref(), &out, limit),
            DType::F64 => attnviz::<f64>(&checkpoint, &input, images.as_deref(), &out, limit),
        }),
        Command::PrintDefaultConfig => {
            print!("{}", RunConfig::default().to_toml()?);
            Ok(())
        }
    }
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Image => "image",
        Modality::Recipe => "recipe",
    }
}

/// Peek at the stored precision, then run `f` with it.
fn with_checkpoint<R>(dir: &Path, f: impl FnOnce(DType) -> Result<R>) -> Result<R> {
    let path = dir.join("manifest.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&text)?;
    let dtype: DType = serde_json::from_value(value["dtype"].clone())
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    f(dtype)
}

fn train<T: Scalar>(config: &RunConfig, resume: bool) -> Result<()> {
    let data = load_run_data(config)?;
    log::info!(
        "{} training and {} validation pairs, vocabulary of {}",
        data.train.len(),
        data.val.len(),
        data.vocab.len()
    );
    let run_dir = &config.paths.checkpoints;
    let mut trainer = if resume {
        let mut t = Trainer::<T>::resume(run_dir)?;
        if t.model.config != config.model {
            return Err(Error::Config(
                "model section differs from the checkpoint being resumed".into(),
            ));
        }
        if t.config.seed != config.train.seed || t.config.batch_size != config.train.batch_size {
            return Err(Error::Config(
                "train.seed and train.batch_size must match the checkpoint".into(),
            ));
        }
        t.config = config.train.clone();
        log::info!("resuming at epoch {} step {}", t.state.epoch, t.state.step);
        t
    } else {
        Trainer::<T>::new(&config.model, config.train.clone(), data.vocab.len())?
    };
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let cfg_path = run_dir.join("config.toml");
    fs::write(&cfg_path, config.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    let summary = trainer.fit(
        &data.train,
        &data.val,
        Some(FitOutput {
            dir: run_dir,
            vocab: Some(&data.vocab),
        }),
    )?;
    let outputs = &config.paths.outputs;
    fs::create_dir_all(outputs).map_err(|e| Error::io(outputs, e))?;
    let path = outputs.join("summary.json");
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
    println!("{json}");
    Ok(())
}

fn load<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let c = load_checkpoint::<T>(dir)?;
    if c.vocab.is_none() {
        return Err(Error::Checkpoint(format!(
            "{} has no vocab.json",
            dir.display()
        )));
    }
    Ok(c)
}

fn corpus_dataset<T: Scalar>(
    ckpt: &Checkpoint<T>,
    corpus: &Path,
    images: Option<&Path>,
) -> Result<Dataset> {
    let raws = read_raw_corpus(corpus)?;
    let loaded = docs_from_raw(&raws, ckpt.vocab.as_ref(), 1, &Caps::default())?;
    Dataset::load_images(
        loaded.docs,
        &resolve_image_root(corpus, images),
        ckpt.model.image_size(),
    )
}

fn eval<T: Scalar>(
    dir: &Path,
    corpus: &Path,
    images: Option<&Path>,
    size: usize,
    repeats: usize,
    seed: u64,
    batch_size: usize,
) -> Result<mcen_core::eval::RetrievalReport> {
    let ckpt = load::<T>(dir)?;
    let data = corpus_dataset(&ckpt, corpus, images)?;
    if size > data.len() {
        log::warn!(
            "subset size {size} exceeds {} pairs; using all pairs once",
            data.len()
        );
    }
    evaluate_model(
        &ckpt.model,
        &ckpt.store,
        &data,
        size,
        repeats,
        seed,
        batch_size,
    )
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(files)
}

fn embed<T: Scalar>(
    dir: &Path,
    input: &Path,
    modality: Modality,
    batch_size: usize,
) -> Result<Vec<EmbeddingRecord>> {
    let bs = batch_size.max(1);
    let to_f32 =
        |e: &Array2<T>, r: usize| e.row(r).iter().map(|v| v.f64() as f32).collect::<Vec<_>>();
    match modality {
        Modality::Image => {
            let ckpt = load_checkpoint::<T>(dir)?;
            let size = ckpt.model.image_size();
            let files = image_files(input)?;
            let mut out = Vec::with_capacity(files.len());
            for chunk in files.chunks(bs) {
                let imgs = chunk
                    .iter()
                    .map(|p| ImageTensor::load(p, size))
                    .collect::<Result<Vec<_>>>()?;
                let mut px = Array2::<T>::zeros((imgs.len(), imgs[0].len()));
                for (mut row, img) in px.rows_mut().into_iter().zip(&imgs) {
                    row.iter_mut()
                        .zip(&img.data)
                        .for_each(|(d, s)| *d = T::of(*s as f64));
                }
                let e = ckpt.model.embed_images(&ckpt.store, &px)?;
                for (r, p) in chunk.iter().enumerate() {
                    let id = p
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    out.push(EmbeddingRecord {
                        id,
                        vector: to_f32(&e, r),
                        modality,
                    });
                }
            }
            Ok(out)
        }
        Modality::Recipe => {
            let ckpt = load::<T>(dir)?;
            let raws = read_raw_corpus(input)?;
            let docs = docs_from_raw(&raws, ckpt.vocab.as_ref(), 1, &Caps::default())?.docs;
            let mut out = Vec::with_capacity(docs.len());
            for chunk in docs.chunks(bs) {
                let ing: Vec<&[Vec<u32>]> =
                    chunk.iter().map(|d| d.ingredients.as_slice()).collect();
                let ins: Vec<&[Vec<u32>]> =
                    chunk.iter().map(|d| d.instructions.as_slice()).collect();
                let e = ckpt.model.embed_recipes(
                    &ckpt.store,
                    &TextBlock::from_docs(&ing),
                    &TextBlock::from_docs(&ins),
                )?;
                for (r, d) in chunk.iter().enumerate() {
                    out.push(EmbeddingRecord {
                        id: d.id.clone(),
                        vector: to_f32(&e, r),
                        modality,
                    });
                }
            }
            Ok(out)
        }
    }
}

fn attnviz<T: Scalar>(
    dir: &Path,
    input: &Path,
    images: Option<&Path>,
    out: &Path,
    limit: Option<usize>,
) -> Result<()> {
    let ckpt = load::<T>(dir)?;
    let mut data = corpus_dataset(&ckpt, input, images)?;
    if let Some(n) = limit {
        let idx: Vec<usize> = (0..n.min(data.len())).collect();
        data = data.subset(&idx);
    }
    let export = attention_maps(&ckpt.model, &ckpt.store, &data, ckpt.vocab.as_ref(), 32)?;
    write_attention(out, &export, &data)?;
    log::info!(
        "wrote attention for {} pairs to {}",
        data.len(),
        out.display()
    );
    Ok(())
}
