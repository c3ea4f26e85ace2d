//! Training, evaluation and generation stages, in memory and on files.

use std::fs;
use std::path::Path;

use anole_core::decoder::{generate, Generation, SamplingParams};
use anole_core::finetune::{count_trainable, finetune_run, FinetuneReport};
use anole_core::transformer::{token_nll, train_step, ModelParams, TrainState};
use anole_core::vocab::{MultimodalDocument, Segment, VocabLayout};
use anole_core::vq::{psnr, Image, VqModel, VqTrainer};

use crate::checkpoint::Checkpoint;
use crate::config::{stage_seed, stream, RunConfig};
use crate::error::{Error, Result};
use crate::ingest::{tokenize, BatchStream, IndexStream, Weighting};
use crate::manifest::Manifest;
use crate::ppm;
use crate::report::{self, KeyValues};
use crate::synth::{check_label, Label};

pub const GENERATION_MANIFEST: &str = "generation.txt";
const LOG_EVERY: usize = 100;

/// Splits off every `every`-th item (1-based) as held-out data.
pub fn split_holdout<T: Clone>(items: &[T], every: usize) -> (Vec<T>, Vec<T>) {
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, item) in items.iter().enumerate() {
        if every > 0 && (i + 1) % every == 0 { &mut held } else { &mut train }.push(item.clone());
    }
    (train, held)
}

pub fn document_images(docs: &[MultimodalDocument]) -> Vec<Image> {
    docs.iter()
        .flat_map(|d| &d.segments)
        .filter_map(|s| match s {
            Segment::Pixels(img) => Some(img.clone()),
            _ => None,
        })
        .collect()
}

pub fn train_vq(config: &RunConfig, images: &[Image], log: &mut dyn FnMut(&str)) -> Result<VqModel<f32>> {
    config.validate()?;
    let mut trainer = VqTrainer::new(VqModel::<f32>::new(config.vq_config())?);
    let mut order = IndexStream::new(images.len(), stage_seed(config.seed, stream::VQ_BATCHES));
    for step in 0..config.vq.steps {
        let idx = order.take(config.vq.batch_size);
        if idx.is_empty() {
            break;
        }
        let batch: Vec<Image> = idx.iter().map(|&i| images[i].clone()).collect();
        let loss = trainer.train_step(&batch)?;
        if (step + 1) % LOG_EVERY == 0 || step + 1 == config.vq.steps {
            log(&format!(
                "vq step {}: reconstruction {:.5} commitment {:.5}",
                step + 1,
                loss.reconstruction,
                loss.commitment
            ));
        }
    }
    Ok(trainer.model)
}

/// Mean PSNR of tokenize-then-decode reconstructions.
pub fn mean_psnr(vq: &VqModel<f32>, images: &[Image]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Config("no images to evaluate".into()));
    }
    let mut total = 0.0;
    for img in images {
        total += psnr(img, &vq.decode(&vq.tokenize(img)?)?)?;
    }
    Ok(total / images.len() as f64)
}

/// Pre-training with image targets down-weighted; the learning rate decays
/// linearly to `final_learning_rate`.
pub fn train_lm(
    config: &RunConfig,
    params: &mut ModelParams<f32>,
    layout: &VocabLayout,
    sequences: &[Vec<u32>],
    log: &mut dyn FnMut(&str),
) -> Result<()> {
    let lm = &config.lm;
    let weighting = Weighting::Pretrain { image: lm.image_loss_weight };
    let seed = stage_seed(config.seed, stream::LM_BATCHES);
    let mut batches = BatchStream::new(sequences, *layout, lm.batch_size, params.config().max_seq_len, weighting, seed)?;
    let mut state = TrainState::new(lm.momentum, lm.clip_norm);
    let mut recent = 0.0;
    for step in 0..lm.steps {
        let Some(batch) = batches.next() else { break };
        let t = step as f64 / (lm.steps.max(2) - 1) as f64;
        let lr = lm.learning_rate + (lm.final_learning_rate - lm.learning_rate) * t;
        recent += train_step(params, &mut state, &batch, lr)?;
        if (step + 1) % LOG_EVERY == 0 || step + 1 == lm.steps {
            let n = (step % LOG_EVERY + 1) as f64;
            log(&format!("lm step {}: loss {:.4} lr {lr:.4}", step + 1, recent / n));
            recent = 0.0;
        }
    }
    Ok(())
}

/// Head fine-tuning on the image-bearing sequences.
pub fn finetune_head(
    config: &RunConfig,
    params: &mut ModelParams<f32>,
    layout: &VocabLayout,
    sequences: &[Vec<u32>],
) -> Result<FinetuneReport> {
    let with_images: Vec<Vec<u32>> = sequences.iter().filter(|s| s.iter().any(|&t| layout.is_image(t))).cloned().collect();
    let seed = stage_seed(config.seed, stream::FINETUNE_BATCHES);
    let batches = BatchStream::new(
        &with_images,
        *layout,
        config.finetune.batch_size,
        params.config().max_seq_len,
        Weighting::Finetune,
        seed,
    )?;
    Ok(finetune_run(params, layout, batches, &config.finetune_hyper())?)
}

/// Mean next-token cross-entropy over image-id targets.
pub fn image_token_ce(params: &ModelParams<f32>, layout: &VocabLayout, sequences: &[Vec<u32>]) -> Result<f64> {
    let v = params.config().vocab_size;
    let (mut total, mut count) = (0.0, 0usize);
    for seq in sequences {
        if seq.len() < 2 {
            continue;
        }
        let logits = params.forward_sequence(&seq[..seq.len() - 1])?;
        for (t, &target) in seq[1..].iter().enumerate() {
            if layout.is_image(target) {
                total += token_nll(&logits[t * v..(t + 1) * v], target);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Config("no image tokens to evaluate".into()));
    }
    Ok(total / count as f64)
}

/// Caption prompts cycling through all 18 labels.
pub fn caption_prompts(count: usize) -> Vec<Label> {
    let all = Label::all();
    (0..count).map(|i| all[i % all.len()]).collect()
}

/// Generates with `--force-image` semantics, decoded images rounded to
/// what a PPM file holds.
pub fn generate_document(
    prompt: &str,
    params: &ModelParams<f32>,
    layout: &VocabLayout,
    vq: &VqModel<f32>,
    sampling: &SamplingParams,
    force_image: bool,
) -> Result<Generation> {
    let text = anole_core::vocab::ByteTokenizer::default();
    let doc = MultimodalDocument::text(prompt);
    let mut g = generate(&doc, params, layout, &text, vq, sampling, force_image)?;
    g.images = g.images.iter().map(ppm::quantize_image).collect();
    for seg in &mut g.document.segments {
        if let Segment::Pixels(img) = seg {
            *img = ppm::quantize_image(img);
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agreement {
    pub matched: usize,
    pub total: usize,
}

impl Agreement {
    pub fn rate(&self) -> f64 {
        if self.total == 0 { 0.0 } else { self.matched as f64 / self.total as f64 }
    }
}

/// Label-checker agreement of forced-image generations for `count` caption
/// prompts; prompt `i` samples with seed `seed + i`.
pub fn label_agreement(
    params: &ModelParams<f32>,
    layout: &VocabLayout,
    vq: &VqModel<f32>,
    sampling: &SamplingParams,
    count: usize,
    seed: u64,
) -> Result<Agreement> {
    let mut matched = 0;
    for (i, label) in caption_prompts(count).into_iter().enumerate() {
        let params_i = SamplingParams { seed: seed.wrapping_add(i as u64), ..*sampling };
        let g = generate_document(&label.caption(), params, layout, vq, &params_i, true)?;
        matched += g.images.first().and_then(check_label).is_some_and(|l| l == label) as usize;
    }
    Ok(Agreement { matched, total: count })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

/// Applies a `--seed` override.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = load_config(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn metadata(ck: &mut Checkpoint, config: &RunConfig, stage: &str) {
    ck.header.metadata.insert("stage".into(), stage.into());
    ck.header.metadata.insert(format!("{stage}.config"), config.to_toml());
}

fn held_out_sequences(config: &RunConfig, manifest: &Manifest, vq: &VqModel<f32>, layout: &VocabLayout) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
    let c = vq.config();
    let docs = manifest.documents(c.image_height, c.image_width)?;
    let seqs = tokenize(&docs, layout, Some(vq))?;
    Ok(split_holdout(&seqs, config.data.holdout_every))
}

pub fn stage_train_vq(config: &RunConfig, data: &Path, out: &Path, log: &mut dyn FnMut(&str)) -> Result<KeyValues> {
    let manifest = Manifest::load(data)?;
    let vc = config.vq_config();
    let docs = manifest.documents(vc.image_height, vc.image_width)?;
    let (train, held) = split_holdout(&docs, config.data.holdout_every);
    let (train, held) = (document_images(&train), document_images(&held));
    if train.is_empty() {
        return Err(Error::Config(format!("{} contains no training images", data.display())));
    }
    let vq = train_vq(config, &train, log)?;
    let mut ck = Checkpoint::default();
    ck.put_vq(&vq);
    metadata(&mut ck, config, "train-vq");
    ck.save(out)?;
    let mut kv = KeyValues::default();
    kv.push("train_images", train.len()).push("heldout_images", held.len()).push("steps", config.vq.steps);
    if !held.is_empty() {
        kv.push("heldout_psnr_db", format!("{:.3}", mean_psnr(&vq, &held)?));
    }
    Ok(kv)
}

/// Writes each record's composed token sequence as a JSON array per line.
pub fn stage_tokenize(tokenizer: &Path, data: &Path, out: &Path) -> Result<KeyValues> {
    let ck = Checkpoint::load(tokenizer)?;
    let vq = ck.vq_model()?;
    let c = vq.config();
    let layout = crate::config::layout_for(c)?;
    let manifest = Manifest::load(data)?;
    let seqs = tokenize(&manifest.documents(c.image_height, c.image_width)?, &layout, Some(&vq))?;
    let mut text = String::new();
    for s in &seqs {
        text.push_str(&serde_json::to_string(s).expect("ids serialize"));
        text.push('\n');
    }
    fs::write(out, text).map_err(Error::io(out))?;
    let mut kv = KeyValues::default();
    kv.push("sequences", seqs.len()).push("tokens", seqs.iter().map(Vec::len).sum::<usize>());
    Ok(kv)
}

pub fn stage_train_lm(
    config: &RunConfig,
    tokenizer: &Path,
    data: &Path,
    out: &Path,
    init: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<KeyValues> {
    let vq = Checkpoint::load(tokenizer)?.vq_model()?;
    let (mut params, layout) = match init {
        Some(path) => Checkpoint::load(path)?.model()?,
        None => (ModelParams::<f32>::init(config.model_config()?)?, config.layout()?),
    };
    params.config().check_layout(&layout)?;
    if vq.config().codebook_size != layout.image_vocab() as usize || vq.config().tokens_per_image() != layout.block_len() {
        return Err(Error::Config("tokenizer checkpoint does not match the model's vocabulary layout".into()));
    }
    let manifest = Manifest::load(data)?;
    let (train, held) = held_out_sequences(config, &manifest, &vq, &layout)?;
    train_lm(config, &mut params, &layout, &train, log)?;
    let mut ck = Checkpoint::default();
    ck.put_vq(&vq);
    ck.put_model(&params, &layout);
    metadata(&mut ck, config, "train-lm");
    ck.save(out)?;
    let mut kv = KeyValues::default();
    kv.push("train_sequences", train.len()).push("steps", config.lm.steps);
    if held.iter().any(|s| s.iter().any(|&t| layout.is_image(t))) {
        kv.push("heldout_image_ce", format!("{:.4}", image_token_ce(&params, &layout, &held)?));
    }
    Ok(kv)
}

/// Path of the report written next to a fine-tuned checkpoint.
pub fn finetune_report_path(out: &Path) -> std::path::PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".report.txt");
    out.with_file_name(name)
}

pub fn stage_finetune_head(
    config: &RunConfig,
    base: &Path,
    data: &Path,
    out: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<FinetuneReport> {
    let ck = Checkpoint::load(base)?;
    let (mut params, layout) = ck.model()?;
    let vq = ck.vq_model()?;
    log(&format!("trainable parameters: {}", report::thousands(count_trainable(&layout, params.config()))));
    let manifest = Manifest::load(data)?;
    let (train, _) = held_out_sequences(config, &manifest, &vq, &layout)?;
    let result = finetune_head(config, &mut params, &layout, &train)?;
    let mut out_ck = ck.clone();
    out_ck.put_model(&params, &layout);
    metadata(&mut out_ck, config, "finetune-head");
    out_ck.save(out)?;
    report::finetune_report(&result).write(&finetune_report_path(out))?;
    Ok(result)
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    pub prompt: String,
    pub force_image: bool,
    pub seed: u64,
    pub max_tokens: Option<usize>,
    pub max_images: Option<usize>,
}

pub fn stage_generate(config: &RunConfig, ckpt: &Path, opts: &GenerateOptions, out: &Path) -> Result<KeyValues> {
    let ck = Checkpoint::load(ckpt)?;
    let (params, layout) = ck.model()?;
    let vq = ck.vq_model()?;
    let mut sampling = config.sampling(opts.seed);
    sampling.max_tokens = opts.max_tokens.unwrap_or(sampling.max_tokens);
    sampling.max_images = opts.max_images.unwrap_or(sampling.max_images);
    let g = generate_document(&opts.prompt, &params, &layout, &vq, &sampling, opts.force_image)?;
    let rendered = report::render(&g.document, out, Some(&vq))?;
    let mut kv = KeyValues::default();
    kv.push_str("checkpoint", &ckpt.file_name().unwrap_or_default().to_string_lossy())
        .push_str("prompt", &opts.prompt)
        .push("seed", opts.seed)
        .push("force_image", opts.force_image);
    for (name, s) in [("text", sampling.text), ("image", sampling.image)] {
        kv.push(&format!("{name}_temperature"), s.temperature)
            .push(&format!("{name}_top_k"), s.top_k)
            .push(&format!("{name}_top_p"), s.top_p);
    }
    kv.push("max_tokens", sampling.max_tokens)
        .push("max_images", sampling.max_images)
        .push("prompt_tokens", g.prompt_len)
        .push("generated_tokens", g.tokens.len() - g.prompt_len)
        .push("total_tokens", g.tokens.len())
        .push("generated_images", g.images.len())
        .push("report_images", rendered.images.len())
        .push("tokens", serde_json::to_string(&g.tokens).expect("ids serialize"));
    kv.write(&out.join(GENERATION_MANIFEST))?;
    Ok(kv)
}

#[derive(Debug, Clone)]
pub struct EvalOptions<'a> {
    pub ckpt: &'a Path,
    pub base: Option<&'a Path>,
    pub data: Option<&'a Path>,
    pub prompts: usize,
    pub seed: u64,
}

pub fn stage_eval(config: &RunConfig, opts: &EvalOptions) -> Result<KeyValues> {
    let ck = Checkpoint::load(opts.ckpt)?;
    let vq = ck.vq_model()?;
    let mut kv = KeyValues::default();
    let model = if ck.header.model.is_some() { Some(ck.model()?) } else { None };
    if let Some(data) = opts.data {
        let manifest = Manifest::load(data)?;
        let c = vq.config();
        let docs = manifest.documents(c.image_height, c.image_width)?;
        let (_, held) = split_holdout(&docs, config.data.holdout_every);
        let images = document_images(&held);
        kv.push("heldout_images", images.len());
        if !images.is_empty() {
            kv.push("vq_psnr_db", format!("{:.3}", mean_psnr(&vq, &images)?));
        }
        if let Some((params, layout)) = &model {
            let seqs = tokenize(&held, layout, Some(&vq))?;
            let ce = image_token_ce(params, layout, &seqs)?;
            kv.push("image_token_ce", format!("{ce:.4}"));
            if let Some(base) = opts.base {
                let (base_params, base_layout) = Checkpoint::load(base)?.model()?;
                if base_layout != *layout {
                    return Err(Error::Config("base checkpoint has a different vocabulary layout".into()));
                }
                let base_ce = image_token_ce(&base_params, layout, &seqs)?;
                kv.push("base_image_token_ce", format!("{base_ce:.4}"))
                    .push("ce_reduction", format!("{:.4}", (base_ce - ce) / base_ce));
            }
        }
    }
    if let (Some((params, layout)), true) = (&model, opts.prompts > 0) {
        let sampling = config.sampling(opts.seed);
        let a = label_agreement(params, layout, &vq, &sampling, opts.prompts, opts.seed)?;
        kv.push("label_prompts", a.total)
            .push("label_matches", a.matched)
            .push("label_agreement", format!("{:.4}", a.rate()));
    }
    Ok(kv)
}
