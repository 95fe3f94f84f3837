use std::collections::HashMap;
use std::path::Path;

use cca_core::concepts::{select_concepts, ConceptVocabulary, StopWords, DEFAULT_STOP_WORDS};
use cca_core::encoders::ClipFeatures;
use cca_core::gallery::{bench, precompute_gallery, BenchQuery, Gallery, QueryEngine};
use cca_core::io::{load_corpus, load_embeddings, load_features, load_vocabulary, read_text, save_vocabulary, ModelArchive};
use cca_core::synth::{generate_synthetic, layout, write_dataset, SynthConfig};
use cca_core::train::{prepare_samples, train};
use cca_core::{CcaError, Result, TrainConfig};
use serde_json::{json, Value};

use crate::Command;

pub fn run(command: Command) -> Result<Value> {
    match command {
        Command::BuildConcepts {
            annotations,
            min_freq,
            embeddings,
            stopwords,
            extra_concepts,
            out,
        } => build_concepts(
            &annotations,
            min_freq,
            &embeddings,
            stopwords.as_deref(),
            extra_concepts.as_deref(),
            &out,
        ),
        Command::Synth {
            seed,
            out_dir,
            config,
            n_train,
            n_eval,
        } => synth(seed, &out_dir, config.as_deref(), n_train, n_eval),
        Command::Train {
            config,
            out_model,
            annotations,
            features,
            vocab,
        } => train_model(&config, &out_model, &annotations, &features, &vocab),
        Command::Gallery {
            model,
            features,
            out,
            vocab,
            annotations,
        } => build_gallery(&model, &features, &out, &vocab, &annotations),
        Command::Query {
            gallery,
            model,
            vocab,
            sentence,
            video_id,
            top_k,
            nms_threshold,
        } => {
            let (gallery, mut engine) = open(&gallery, &model, &vocab, nms_threshold)?;
            let result = engine.query(&gallery, &video_id, &sentence, top_k)?;
            Ok(serde_json::to_value(result)?)
        }
        Command::Eval {
            gallery,
            model,
            vocab,
            annotations,
            nms_threshold,
        } => {
            let (gallery, mut engine) = open(&gallery, &model, &vocab, nms_threshold)?;
            let (_, stop) = load_vocabulary(&vocab)?;
            let corpus = load_corpus(&annotations, &stop)?;
            Ok(engine.evaluate(&gallery, &corpus)?.to_json())
        }
        Command::Bench {
            gallery,
            queries,
            reps,
            model,
            vocab,
            features,
            nms_threshold,
        } => {
            let (gallery, mut engine) = open(&gallery, &model, &vocab, nms_threshold)?;
            let (_, stop) = load_vocabulary(&vocab)?;
            let corpus = load_corpus(&queries, &stop)?;
            let clips = video_features(&features, &corpus, &gallery)?;
            let qs: Vec<BenchQuery> = corpus
                .samples
                .iter()
                .map(|s| BenchQuery {
                    video_id: s.video_id.clone(),
                    sentence: s.sentence.clone(),
                })
                .collect();
            Ok(serde_json::to_value(bench(&mut engine, &gallery, &clips, &qs, reps)?)?)
        }
    }
}

fn build_concepts(
    annotations: &Path,
    min_freq: usize,
    embeddings: &Path,
    stopwords: Option<&Path>,
    extra: Option<&Path>,
    out: &Path,
) -> Result<Value> {
    let stop = match stopwords {
        Some(p) => StopWords::parse(&read_text(p)?),
        None => StopWords::parse(DEFAULT_STOP_WORDS),
    };
    let corpus = load_corpus(annotations, &stop)?;
    let text = read_text(embeddings)?;
    let dim = text
        .lines()
        .find_map(|l| {
            let n = l.split_whitespace().count();
            (n > 0).then(|| n - 1)
        })
        .ok_or_else(|| CcaError::Data(format!("{}: no embedding rows", embeddings.display())))?;
    let table = load_embeddings(embeddings, dim)?;
    let mut vocab = select_concepts(&corpus, min_freq, &table, &stop)?;
    if let Some(p) = extra {
        let words: Vec<String> = read_text(p)?.split_whitespace().map(str::to_lowercase).collect();
        vocab.extend(&words, &table)?;
    }
    vocab.build_graph(&corpus, &stop)?;
    save_vocabulary(out, &vocab, &stop)?;
    Ok(json!({
        "concepts": vocab.len(),
        "unseen": vocab.seen.iter().filter(|s| !**s).count(),
        "embed_dim": dim,
        "lexicon": vocab.lexicon.len(),
        "out": out.display().to_string(),
    }))
}

fn synth(seed: u64, out_dir: &Path, config: Option<&Path>, n_train: Option<usize>, n_eval: Option<usize>) -> Result<Value> {
    let mut cfg: SynthConfig = match config {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| CcaError::Config(format!("{}: {e}", p.display())))?,
        None => SynthConfig::default(),
    };
    cfg.seed = seed;
    cfg.n_train = n_train.unwrap_or(cfg.n_train);
    cfg.n_eval = n_eval.unwrap_or(cfg.n_eval);
    let ds = generate_synthetic(&cfg)?;
    write_dataset(&ds, &cfg, out_dir)?;
    let train_cfg = TrainConfig {
        seed,
        n_clips: cfg.n_clips,
        d_v: cfg.d_v,
        d_c: cfg.d_v,
        embed_dim: cfg.embed_dim,
        ..TrainConfig::default()
    };
    let train_cfg_path = out_dir.join("train_config.json");
    std::fs::write(&train_cfg_path, serde_json::to_string_pretty(&train_cfg)?).map_err(|e| CcaError::io(&train_cfg_path, e))?;
    Ok(json!({
        "train": ds.train.len(),
        "eval": ds.eval.len(),
        "videos": ds.features.len(),
        "concepts": ds.concept_names.len(),
        "out_dir": out_dir.display().to_string(),
        "files": [layout::TRAIN, layout::EVAL, layout::EMBEDDINGS, layout::FEATURES, layout::SYNTH_CONFIG, "train_config.json"],
    }))
}

fn train_model(config: &Path, out_model: &Path, annotations: &Path, features: &Path, vocab_dir: &Path) -> Result<Value> {
    let cfg = TrainConfig::from_json(&read_text(config)?).map_err(|e| match e {
        CcaError::Json(j) => CcaError::Config(format!("{}: {j}", config.display())),
        other => other,
    })?;
    cfg.validate()?;
    let (vocab, stop) = load_vocabulary(vocab_dir)?;
    check_embed_dim(&cfg, &vocab)?;
    let corpus = load_corpus(annotations, &stop)?;
    let clips = load_features(features, &corpus)?;
    let samples = prepare_samples(&corpus, &clips, &cfg.model(), cfg.t_min, cfg.t_max, &stop)?;
    let out = train(&cfg, &samples, &vocab)?;
    let archive = ModelArchive::new(cfg.model(), &out.params);
    archive.save(out_model)?;
    Ok(json!({
        "samples": samples.len(),
        "epochs": cfg.epochs,
        "final_loss": out.epoch_losses.last(),
        "epoch_losses": out.epoch_losses,
        "model_hash": archive.hash(),
        "out_model": out_model.display().to_string(),
    }))
}

fn check_embed_dim(cfg: &TrainConfig, vocab: &ConceptVocabulary) -> Result<()> {
    if vocab.embeddings.cols() != cfg.embed_dim {
        return Err(CcaError::Config(format!(
            "config embed_dim {} but vocabulary vectors are {}-dimensional",
            cfg.embed_dim,
            vocab.embeddings.cols()
        )));
    }
    Ok(())
}

fn build_gallery(model: &Path, features: &Path, out: &Path, vocab_dir: &Path, annotations: &Path) -> Result<Value> {
    let archive = ModelArchive::load(model)?;
    let (vocab, stop) = load_vocabulary(vocab_dir)?;
    let corpus = load_corpus(annotations, &stop)?;
    let clips = load_features(features, &corpus)?;
    let mut videos: Vec<ClipFeatures> = clips.into_values().collect();
    videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let gallery = precompute_gallery(&archive, &vocab, &videos)?;
    gallery.save(out)?;
    Ok(json!({
        "videos": gallery.len(),
        "model_hash": gallery.model_hash,
        "out": out.display().to_string(),
    }))
}

fn open(gallery: &Path, model: &Path, vocab_dir: &Path, nms_threshold: f64) -> Result<(Gallery, QueryEngine)> {
    let gallery = Gallery::load(gallery)?;
    let archive = ModelArchive::load(model)?;
    let (vocab, stop) = load_vocabulary(vocab_dir)?;
    let engine = QueryEngine::new(&archive, &vocab, stop, nms_threshold)?;
    engine.check(&gallery)?;
    Ok((gallery, engine))
}

fn video_features(dir: &Path, corpus: &cca_core::concepts::Corpus, gallery: &Gallery) -> Result<HashMap<String, ClipFeatures>> {
    let mut clips = load_features(dir, corpus)?;
    for (id, c) in clips.iter_mut() {
        c.duration_s = gallery.entry(id)?.duration_s;
    }
    Ok(clips)
}
