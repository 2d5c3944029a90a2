use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tablediff::annotations::{
    generate_toy_table, parse_voc_xml, random_structure, render_mask, toy_corpus, write_voc_xml, StructureMask,
    TableAnnotation,
};
use tablediff::autoencoder::{cache_latents, psnr, to_signed, train_vae_from, EncodeMode, LatentCache, VaeParams};
use tablediff::diffusion::{train_loop, Checkpoint, SampleConfig, SampleOutput, Sampler, Trainer, METRICS_HEADER};
use tablediff::dit::DiTParams;
use tablediff::evaluation::{
    export_detection_dataset, extract_features, frechet_distance, gaussian_stats, structure_adherence, EvalReport,
};
use tablediff::image_io::{load_mask_png, load_png, read_file, save_mask_png, save_png, write_atomic};
use tablediff::numerics::{derive_seed, Tensor};
use tablediff::schedule::NoiseSchedule;

use crate::artifacts::{content_hash, require, write_json, Layout, Staging};
use crate::config::RunConfig;

/// Resolved inputs shared by every subcommand.
pub struct Ctx {
    pub cfg: RunConfig,
    pub layout: Layout,
    pub force: bool,
}

/// Result line printed on success.
pub struct Outcome {
    pub status: &'static str,
    pub artifact: PathBuf,
    pub details: Value,
}

impl Outcome {
    fn new(status: &'static str, artifact: PathBuf) -> Self {
        Self {
            status,
            artifact,
            details: Value::Null,
        }
    }

    fn with(mut self, details: Value) -> Self {
        self.details = details;
        self
    }
}

fn done(ctx: &Ctx, marker: &Path) -> bool {
    !ctx.force && marker.exists()
}

fn id(i: usize) -> String {
    format!("{i:06}")
}

#[derive(Serialize, Deserialize)]
struct DataIndex {
    count: usize,
    width: u32,
    height: u32,
    /// Where each sample came from: a toy id or an XML file stem.
    sources: Vec<String>,
}

fn voc_samples(ctx: &Ctx, voc_dir: &Path) -> Result<Vec<(String, Tensor<f32>, TableAnnotation)>> {
    let c = &ctx.cfg.data.constraints;
    let mut files: Vec<PathBuf> = fs::read_dir(voc_dir)
        .with_context(|| format!("listing {}", voc_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xml"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .xml files in {}", voc_dir.display());
    }
    files
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
            let ann = parse_voc_xml(&read_file(path)?)
                .with_context(|| format!("parsing {}", path.display()))?
                .annotation;
            if (ann.width, ann.height) != (c.width, c.height) {
                bail!(
                    "{} is {}x{} but data.constraints expects {}x{}",
                    path.display(),
                    ann.width,
                    ann.height,
                    c.width,
                    c.height
                );
            }
            let image = match &ctx.cfg.data.image_dir {
                Some(dir) => {
                    let p = dir.join(format!("{stem}.png"));
                    let img = load_png(&p)?;
                    if img.shape() != [3, c.height as usize, c.width as usize] {
                        bail!("{} has shape {:?}, expected {}x{}", p.display(), img.shape(), c.width, c.height);
                    }
                    img
                }
                None => generate_toy_table(&ann, derive_seed(ctx.cfg.data.seed, 2 * i as u64 + 1)),
            };
            Ok((stem, image, ann))
        })
        .collect()
}

pub fn gen_data(ctx: &Ctx) -> Result<Outcome> {
    let target = &ctx.layout.data;
    if done(ctx, &target.join("index.json")) {
        return Ok(Outcome::new("up-to-date", target.clone()));
    }
    let d = &ctx.cfg.data;
    let samples = match &d.voc_dir {
        Some(dir) => voc_samples(ctx, dir)?,
        None => toy_corpus(d.count, &d.constraints, d.seed)?
            .into_iter()
            .enumerate()
            .map(|(i, s)| (format!("toy-{}", id(i)), s.image, s.annotation))
            .collect(),
    };
    let stage = Staging::begin(target)?;
    fs::create_dir_all(stage.dir.join("images"))?;
    fs::create_dir_all(stage.dir.join("annotations"))?;
    samples.par_iter().enumerate().try_for_each(|(i, (_, img, ann))| -> Result<()> {
        save_png(img, &stage.dir.join("images").join(format!("{}.png", id(i))))?;
        let xml = write_voc_xml(ann, &format!("{}.png", id(i)));
        write_atomic(&stage.dir.join("annotations").join(format!("{}.xml", id(i))), xml.as_bytes())?;
        Ok(())
    })?;
    let index = DataIndex {
        count: samples.len(),
        width: d.constraints.width,
        height: d.constraints.height,
        sources: samples.iter().map(|s| s.0.clone()).collect(),
    };
    write_json(&stage.dir.join("index.json"), &index)?;
    write_json(&stage.dir.join("config.json"), &ctx.cfg)?;
    let path = stage.commit()?;
    Ok(Outcome::new("created", path).with(json!({ "samples": index.count })))
}

fn read_index(data_dir: &Path) -> Result<DataIndex> {
    let path = require(data_dir.join("index.json"), "gen-data")?;
    Ok(serde_json::from_slice(&read_file(&path)?)?)
}

fn load_annotations(data_dir: &Path, count: usize) -> Result<Vec<TableAnnotation>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let p = data_dir.join("annotations").join(format!("{}.xml", id(i)));
            Ok(parse_voc_xml(&read_file(&p)?)?.annotation)
        })
        .collect()
}

fn load_images(dir: &Path, ids: &[usize]) -> Result<Vec<Tensor<f32>>> {
    ids.par_iter()
        .map(|&i| Ok(load_png(&dir.join(format!("{}.png", id(i))))?))
        .collect()
}

fn load_masks(data_dir: &Path, ids: &[usize]) -> Result<Vec<StructureMask>> {
    let masks = require(data_dir.join("masks"), "render-masks")?;
    ids.par_iter()
        .map(|&i| Ok(load_mask_png(&masks.join(format!("{}.png", id(i))))?))
        .collect()
}

pub fn render_masks(ctx: &Ctx) -> Result<Outcome> {
    let data = &ctx.layout.data;
    let index = read_index(data)?;
    let target = data.join("masks");
    if done(ctx, &target) {
        return Ok(Outcome::new("up-to-date", target));
    }
    let anns = load_annotations(data, index.count)?;
    let stage = Staging::begin(&target)?;
    anns.par_iter().enumerate().try_for_each(|(i, a)| -> Result<()> {
        save_mask_png(&render_mask(a, index.height, index.width), &stage.dir.join(format!("{}.png", id(i))))?;
        Ok(())
    })?;
    let path = stage.commit()?;
    Ok(Outcome::new("created", path).with(json!({ "masks": anns.len() })))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn metrics_line(out: &mut String, it: u64, loss: f64, start: &Instant) {
    let _ = writeln!(out, "{it},{loss},{}", start.elapsed().as_millis());
}

pub fn train_vae(ctx: &Ctx) -> Result<Outcome> {
    let target = &ctx.layout.vae;
    if done(ctx, &target.join("vae.json")) {
        return Ok(Outcome::new("up-to-date", target.clone()));
    }
    let data = &ctx.layout.data;
    let index = read_index(data)?;
    let v = &ctx.cfg.vae;
    let n = v.images.min(index.count);
    let train_ids: Vec<usize> = (0..n).collect();
    let images = load_images(&data.join("images"), &train_ids)?;
    let masks = load_masks(data, &train_ids)?;
    // Interleaved so the scale estimate pools images and masks.
    let mut list = Vec::with_capacity(2 * n);
    for (img, m) in images.iter().zip(&masks) {
        list.push(to_signed(img));
        list.push(to_signed(&m.to_rgb()));
    }
    let start = Instant::now();
    let mut metrics = format!("{METRICS_HEADER}\n");
    let init = VaeParams::init(v.model.clone(), v.train.seed);
    let (vae, history) = train_vae_from(init, &list, &v.train, |step, loss| {
        metrics_line(&mut metrics, step as u64 + 1, loss, &start);
        if (step + 1) % 100 == 0 {
            log::info!("vae step {} loss {loss:.5}", step + 1);
        }
    })?;
    let eval_ids: Vec<usize> = if index.count > n {
        (n..index.count.min(n + 64)).collect()
    } else {
        (0..index.count.min(64)).collect()
    };
    let eval = load_images(&data.join("images"), &eval_ids)?;
    let scores = eval
        .par_iter()
        .map(|img| {
            let x = to_signed(img);
            let r = vae.decode(&vae.encode(&x, EncodeMode::Mean)?)?;
            Ok(psnr(&x, &r)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let median_psnr = median(scores);
    let stage = Staging::begin(target)?;
    vae.save(&stage.dir.join("vae"))?;
    write_atomic(&stage.dir.join("metrics.csv"), metrics.as_bytes())?;
    let summary = json!({
        "steps": history.loss.len(),
        "scale": vae.scale,
        "median_psnr_db": median_psnr,
        "psnr_images": eval_ids.len(),
        "held_out": index.count > n,
    });
    write_json(&stage.dir.join("summary.json"), &summary)?;
    write_json(&stage.dir.join("config.json"), &ctx.cfg)?;
    let path = stage.commit()?;
    Ok(Outcome::new("created", path).with(summary))
}

fn load_vae(ctx: &Ctx) -> Result<VaeParams> {
    let stem = ctx.layout.vae_stem();
    require(stem.with_extension("json"), "train-vae")?;
    Ok(VaeParams::load(&stem)?)
}

pub fn cache(ctx: &Ctx) -> Result<Outcome> {
    let target = &ctx.layout.latents;
    if done(ctx, &ctx.layout.latent_file()) {
        return Ok(Outcome::new("up-to-date", target.clone()));
    }
    let vae = load_vae(ctx)?;
    let data = &ctx.layout.data;
    let index = read_index(data)?;
    let ids: Vec<usize> = (0..index.count).collect();
    let masks = load_masks(data, &ids)?;
    let images = load_images(&data.join("images"), &ids)?;
    let pairs: Vec<(Tensor<f32>, Tensor<f32>)> = images
        .iter()
        .zip(&masks)
        .map(|(img, m)| (to_signed(img), to_signed(&m.to_rgb())))
        .collect();
    let stage = Staging::begin(target)?;
    let count = cache_latents(&pairs, &vae, &stage.dir.join("latents.tdlc"))?;
    write_json(&stage.dir.join("config.json"), &ctx.cfg)?;
    let path = stage.commit()?;
    Ok(Outcome::new("created", path).with(json!({ "records": count, "scale": vae.scale })))
}

fn latest_numbered(dir: &Path) -> Option<PathBuf> {
    let mut stems: Vec<PathBuf> = fs::read_dir(dir.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .map(|p| p.with_extension(""))
        .collect();
    stems.sort();
    stems.pop()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn train_dit(ctx: &Ctx) -> Result<Outcome> {
    let dir = &ctx.layout.dit;
    let latent_file = require(ctx.layout.latent_file(), "cache-latents")?;
    if ctx.force && dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    let final_stem = ctx.layout.checkpoint_stem();
    let (state, status) = if final_stem.with_extension("json").exists() {
        let state = Checkpoint::load(&final_stem)?;
        if state.iteration >= state.train.iterations {
            return Ok(Outcome::new("up-to-date", dir.clone()));
        }
        (state, "resumed")
    } else if let Some(stem) = latest_numbered(dir) {
        (Checkpoint::load(&stem)?, "resumed")
    } else {
        let vae = load_vae(ctx)?;
        let dit = DiTParams::init(ctx.cfg.dit_config()?, ctx.cfg.train.seed)?;
        (Checkpoint::new(dit, vae, ctx.cfg.schedule, ctx.cfg.train.clone()), "created")
    };
    if state.train != ctx.cfg.train {
        bail!("checkpoint in {} was written with a different train config", dir.display());
    }
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), &ctx.cfg)?;
    let latents = LatentCache::open(&latent_file)?.load_all()?;
    let from = state.iteration;
    let mut trainer = Trainer::new(state, &latents)?;
    let losses = train_loop(&mut trainer, Some(dir), |it, loss| {
        if it % 100 == 0 {
            log::info!("dit step {it} loss {loss:.5}");
        }
    })?;
    let k = losses.len().min(100);
    Ok(Outcome::new(status, dir.clone()).with(json!({
        "from_iteration": from,
        "iterations": trainer.state.iteration,
        "first_100_mean": mean(&losses[..k]),
        "last_100_mean": mean(&losses[losses.len() - k..]),
    })))
}

/// Which samples a `sample`, `evaluate` or `export` call refers to.
pub struct Selection {
    pub mask: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
}

struct Target {
    seed: u64,
    annotation: TableAnnotation,
    mask: Option<StructureMask>,
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    id: String,
    seed: u64,
    image: String,
    annotation: String,
    mask: Option<String>,
}

fn samples_dir(ctx: &Ctx, sel: &Selection) -> Result<PathBuf> {
    let mask_bytes = match &sel.mask {
        Some(p) => Some(read_file(p)?),
        None => None,
    };
    let dit_name = ctx.layout.dit.file_name().unwrap().to_string_lossy().into_owned();
    let key = content_hash(&(&dit_name, &ctx.cfg.sample, &mask_bytes, &sel.seeds));
    Ok(ctx.layout.root.join(format!("samples-{key}")))
}

fn targets(ctx: &Ctx, sel: &Selection, conditional: bool) -> Result<Vec<Target>> {
    let s = &ctx.cfg.sample;
    let c = &ctx.cfg.data.constraints;
    if let Some(path) = &sel.mask {
        if !conditional {
            bail!("--mask requires a conditional model (drop --unconditional)");
        }
        let loaded = load_mask_png(path)?;
        let mut annotation = loaded.to_annotation();
        if (loaded.width(), loaded.height()) != (c.width, c.height) {
            annotation = render_mask(&annotation, c.height, c.width).to_annotation();
        }
        let mask = render_mask(&annotation, c.height, c.width);
        let seeds = sel.seeds.clone().unwrap_or_else(|| vec![s.seed]);
        return Ok(seeds
            .into_iter()
            .map(|seed| Target {
                seed,
                annotation: annotation.clone(),
                mask: Some(mask.clone()),
            })
            .collect());
    }
    let n = sel.seeds.as_ref().map_or(s.count, Vec::len);
    (0..n)
        .map(|i| {
            let annotation = random_structure(derive_seed(s.seed, 2 * i as u64), c)?;
            let seed = match &sel.seeds {
                Some(v) => v[i],
                None => derive_seed(s.seed, 2 * i as u64 + 1),
            };
            let mask = conditional.then(|| render_mask(&annotation, c.height, c.width));
            Ok(Target {
                seed,
                annotation,
                mask,
            })
        })
        .collect()
}

/// Image with the mask blended in red.
pub fn overlay(image: &Tensor<f32>, mask: &StructureMask) -> Tensor<f32> {
    const ALPHA: f32 = 0.45;
    let plane = mask.bits();
    let hw = plane.len();
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if plane[i % hw] == 1 {
            let red = if i / hw == 0 { 1.0 } else { 0.0 };
            *v = *v * (1.0 - ALPHA) + red * ALPHA;
        }
    }
    out
}

fn write_overlays(dir: &Path, entries: &[SampleEntry]) -> Result<()> {
    entries.par_iter().try_for_each(|e| -> Result<()> {
        let Some(mask) = &e.mask else { return Ok(()) };
        let img = load_png(&dir.join(&e.image))?;
        let m = load_mask_png(&dir.join(mask))?;
        save_png(&overlay(&img, &m), &dir.join(format!("{}.overlay.png", e.id)))?;
        Ok(())
    })
}

fn read_entries(dir: &Path) -> Result<Vec<SampleEntry>> {
    let text = fs::read_to_string(require(dir.join("index.jsonl"), "sample")?)?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn sample(ctx: &Ctx, sel: &Selection, with_overlay: bool) -> Result<Outcome> {
    let target = samples_dir(ctx, sel)?;
    if done(ctx, &target.join("index.jsonl")) {
        if with_overlay {
            write_overlays(&target, &read_entries(&target)?)?;
            return Ok(Outcome::new("updated", target));
        }
        return Ok(Outcome::new("up-to-date", target));
    }
    let stem = require(ctx.layout.checkpoint_stem().with_extension("json"), "train-dit")?.with_extension("");
    let ck = Checkpoint::load(&stem)?;
    let schedule = NoiseSchedule::new(ck.schedule)?;
    let sampler = Sampler::new(&ck.dit, &ck.vae, &schedule)?;
    let conditional = ck.dit.config.conditional();
    let items = targets(ctx, sel, conditional)?;
    if items.is_empty() {
        bail!("nothing to sample: empty --seeds list or sample.count = 0");
    }
    let cfg = SampleConfig {
        steps: ctx.cfg.sample.steps,
        eta: ctx.cfg.sample.eta,
    };
    let start = Instant::now();
    let outputs: Vec<Vec<SampleOutput>> = items
        .par_chunks(ctx.cfg.sample.batch)
        .map(|chunk| {
            let masks: Vec<Option<&StructureMask>> = chunk.iter().map(|t| t.mask.as_ref()).collect();
            let seeds: Vec<u64> = chunk.iter().map(|t| t.seed).collect();
            Ok(sampler.sample_batch(&masks, &seeds, &cfg, false)?)
        })
        .collect::<Result<_>>()?;
    log::info!("sampled {} images in {:.1}s", items.len(), start.elapsed().as_secs_f64());
    let stage = Staging::begin(&target)?;
    let outputs: Vec<SampleOutput> = outputs.into_iter().flatten().collect();
    let entries: Vec<SampleEntry> = items
        .par_iter()
        .zip(outputs.par_iter())
        .enumerate()
        .map(|(i, (t, out))| {
            let name = id(i);
            save_png(&out.image, &stage.dir.join(format!("{name}.png")))?;
            let xml = write_voc_xml(&t.annotation, &format!("{name}.png"));
            write_atomic(&stage.dir.join(format!("{name}.xml")), xml.as_bytes())?;
            let mask = match &t.mask {
                Some(m) => {
                    save_mask_png(m, &stage.dir.join(format!("{name}.mask.png")))?;
                    Some(format!("{name}.mask.png"))
                }
                None => None,
            };
            Ok(SampleEntry {
                image: format!("{name}.png"),
                annotation: format!("{name}.xml"),
                id: name,
                seed: t.seed,
                mask,
            })
        })
        .collect::<Result<_>>()?;
    if with_overlay {
        write_overlays(&stage.dir, &entries)?;
    }
    let mut index = String::new();
    for e in &entries {
        index.push_str(&serde_json::to_string(e)?);
        index.push('\n');
    }
    write_atomic(&stage.dir.join("index.jsonl"), index.as_bytes())?;
    write_json(&stage.dir.join("config.json"), &ctx.cfg)?;
    let path = stage.commit()?;
    Ok(Outcome::new("created", path).with(json!({ "samples": entries.len(), "conditional": conditional })))
}

fn load_samples(dir: &Path) -> Result<Vec<(Tensor<f32>, TableAnnotation)>> {
    let entries = read_entries(dir)?;
    entries
        .par_iter()
        .map(|e| {
            let img = load_png(&dir.join(&e.image))?;
            let ann = parse_voc_xml(&read_file(&dir.join(&e.annotation))?)?.annotation;
            Ok((img, ann))
        })
        .collect()
}

pub fn evaluate(ctx: &Ctx, sel: &Selection) -> Result<Outcome> {
    let samples = samples_dir(ctx, sel)?;
    let name = samples.file_name().unwrap().to_string_lossy().into_owned();
    let target = ctx.layout.root.join(format!("eval-{}", content_hash(&(&name, &ctx.cfg.eval, &ctx.cfg.data.constraints))));
    let report_path = target.join("report.json");
    if done(ctx, &report_path) {
        let report: Value = serde_json::from_slice(&read_file(&report_path)?)?;
        return Ok(Outcome::new("up-to-date", target).with(report));
    }
    let generated = load_samples(&samples)?;
    let e = &ctx.cfg.eval;
    let reference: Vec<Tensor<f32>> = toy_corpus(e.reference_count, &ctx.cfg.data.constraints, e.reference_seed)?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let images: Vec<Tensor<f32>> = generated.iter().map(|g| g.0.clone()).collect();
    let anns: Vec<TableAnnotation> = generated.iter().map(|g| g.1.clone()).collect();
    let fd = frechet_distance(
        &gaussian_stats(&extract_features(&images, &e.extractor)?)?,
        &gaussian_stats(&extract_features(&reference, &e.extractor)?)?,
    )?;
    let adherence = structure_adherence(&images, &anns, &e.extract)?;
    let report = EvalReport {
        extractor: e.extractor.name(),
        n_generated: images.len(),
        n_reference: reference.len(),
        frechet: fd.distance,
        clamped_eigenvalues: fd.clamped,
        rows: adherence.rows,
        columns: adherence.columns,
        mean_f1: adherence.mean_f1,
    };
    let stage = Staging::begin(&target)?;
    write_json(&stage.dir.join("report.json"), &report)?;
    write_json(&stage.dir.join("config.json"), &ctx.cfg)?;
    let path = stage.commit()?;
    Ok(Outcome::new("created", path).with(serde_json::to_value(&report)?))
}

pub fn export(ctx: &Ctx, sel: &Selection) -> Result<Outcome> {
    let samples = samples_dir(ctx, sel)?;
    let name = samples.file_name().unwrap().to_string_lossy().into_owned();
    let target = ctx.layout.root.join(name.replacen("samples-", "export-", 1));
    if done(ctx, &target.join("index.jsonl")) {
        return Ok(Outcome::new("up-to-date", target));
    }
    let generated = load_samples(&samples)?;
    let stage = Staging::begin(&target)?;
    let summary = export_detection_dataset(&generated, &stage.dir)?;
    let path = stage.commit()?;
    Ok(Outcome::new("created", path).with(json!({ "samples": summary.entries.len() })))
}
