//! The subcommands. Each one wires library pieces into a batch step and
//! drops a provenance record into every directory it writes.

use crate::config::AppConfig;
use crate::figures;
use crate::record::{write_run_record, RunRecord};
use attnguide_core::attention::{write_map_png, write_probe_sidecar, ProbeSidecar};
use attnguide_core::conditioning::{
    encode_prompt, prior_prompt, PromptBank, Vocabulary,
};
use attnguide_core::datasets::{
    generate_priors, load_dataset, load_mask, load_priors, prior_dir, ConceptManifest, Dataset,
};
use attnguide_core::diffusion::toy::ToyBackbone;
use attnguide_core::diffusion::{
    generate_latent_probed, image_from_latent, Backbone, LatentSpec, NoiseSchedule, ParamKind,
    ParamSelector, ParamStore, ProbeOptions,
};
use attnguide_core::eval::{
    evaluate, generate_samples, write_report_csv, write_report_markdown, BlockPerceptual,
    BuiltinEmbedder, EmbeddingProvider, GeneratedSample, PrecomputedEmbedder, SampleSubject,
};
use attnguide_core::optim::AdamW;
use attnguide_core::synthetic::{write_dataset, SyntheticOptions};
use attnguide_core::trainer::{finetune, prepare_dataset, PriorExample, Trainer};
use attnguide_core::{Error, Result};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Resolved invocation context shared by all subcommands.
pub struct Ctx {
    pub config: AppConfig,
    pub config_hash: String,
    pub out: PathBuf,
}

/// Weight init draws from a stream distinct from the training stream, so
/// one seed replays both identically.
const INIT_STREAM: u64 = 0x9e37_79b9;

const PROJECTIONS: [ParamKind; 3] = [ParamKind::AttnQ, ParamKind::AttnK, ParamKind::AttnV];

fn fresh_store(backbone: &ToyBackbone, vocab: &Vocabulary, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ INIT_STREAM);
    backbone.init_params(vocab.size(), &mut rng)
}

fn manifest_path(ctx: &Ctx, explicit: Option<&Path>) -> Result<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| ctx.config.dataset.manifest.clone())
        .ok_or_else(|| {
            Error::validation("no manifest: pass a path or set dataset.manifest in the config")
        })
}

fn prompt_bank(ctx: &Ctx) -> Result<PromptBank> {
    match &ctx.config.dataset.prompt_bank {
        Some(path) => PromptBank::from_file(path),
        None => Ok(PromptBank::builtin()),
    }
}

/// Provenance string for a RunRecord input. Paths under the output root are
/// recorded relative to it, so runs into different roots compare equal.
fn provenance(out: &Path, path: &Path) -> String {
    path.strip_prefix(out)
        .unwrap_or(path)
        .display()
        .to_string()
        .replace(std::path::MAIN_SEPARATOR, "/")
}

// ----- prepare -----

pub fn cmd_prepare(ctx: &Ctx, manifest: Option<&Path>, strict: bool, demo: bool) -> Result<()> {
    let path = if demo {
        let dir = ctx.out.join("dataset");
        let opts = SyntheticOptions { seed: ctx.config.train.seed, ..SyntheticOptions::default() };
        let path = write_dataset(&dir, &opts)?;
        write_run_record(&dir, RunRecord::new("prepare", "dataset", &ctx.config_hash))?;
        println!("demo dataset written to {}", dir.display());
        path
    } else {
        manifest_path(ctx, manifest)?
    };

    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    let parsed = ConceptManifest::parse(&text)?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut violations = parsed.validate(&root);

    // masks with values strictly between 0 and 255 are legal (soft edges
    // survive resizing as fractional coverage) but worth flagging
    if violations.is_empty() {
        for c in &parsed.concepts {
            for entry in &c.images {
                let mask = load_mask(&root.join(&entry.mask))?;
                if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    let msg = format!(
                        "concept {:?}: mask {} is not binary (soft edges)",
                        c.id,
                        entry.mask.display()
                    );
                    if strict {
                        violations.push(msg);
                    } else {
                        println!("warning: {msg}");
                    }
                }
            }
        }
    }
    if !violations.is_empty() {
        return Err(Error::validation(format!(
            "manifest {}:\n  - {}",
            path.display(),
            violations.join("\n  - ")
        )));
    }

    println!(
        "dataset {:?}: {} concepts, images {}x{}",
        parsed.name,
        parsed.concepts.len(),
        parsed.image_size[0],
        parsed.image_size[1]
    );
    for c in &parsed.concepts {
        println!(
            "  {} ({}, identifier {}): {} images",
            c.id,
            c.class,
            c.identifier,
            c.images.len()
        );
    }
    for g in &parsed.groups {
        println!("  group: {}", g.members.join(" + "));
    }
    Ok(())
}

// ----- priors -----

pub fn cmd_priors(
    ctx: &Ctx,
    class: Option<&str>,
    count: Option<usize>,
    weights: Option<&Path>,
) -> Result<()> {
    let count = count.unwrap_or(ctx.config.priors.count);
    let classes: Vec<String> = match class {
        Some(c) => vec![c.to_string()],
        None => {
            let path = manifest_path(ctx, None)?;
            let (manifest, _) = ConceptManifest::load(&path)?;
            let set: BTreeSet<String> =
                manifest.concepts.iter().map(|c| c.class.clone()).collect();
            set.into_iter().collect()
        }
    };
    let backbone = ToyBackbone::default();
    let vocab = Vocabulary::standard();
    let store = match weights {
        Some(p) => ParamStore::load_json(p)?,
        None => fresh_store(&backbone, &vocab, ctx.config.train.seed),
    };
    let schedule = NoiseSchedule::linear(ctx.config.sample.steps);
    for class in &classes {
        let prov = generate_priors(
            &backbone,
            &store,
            &schedule,
            &vocab,
            class,
            count,
            ctx.config.priors.seed,
            &ctx.out,
            "toy",
        )?;
        let dir = prior_dir(&ctx.out, class);
        let mut record = RunRecord::new("priors", &format!("priors/{class}"), &ctx.config_hash);
        if let Some(p) = weights {
            record = record.with_input("weights", provenance(&ctx.out, p));
        }
        write_run_record(&dir, record)?;
        println!("{class}: {count} images of {:?} -> {}", prov.prompt, dir.display());
    }
    Ok(())
}

/// Prior latents for every class in the dataset, tokenized with the bare
/// class prompt.
fn load_prior_examples(
    base: &Path,
    dataset: &Dataset,
    vocab: &Vocabulary,
    latent: &LatentSpec,
) -> Result<Vec<PriorExample>> {
    let classes: BTreeSet<&String> =
        dataset.manifest.concepts.iter().map(|c| &c.class).collect();
    let mut out = Vec::new();
    for class in classes {
        let (latents, _) = load_priors(base, class, latent)?;
        let token_ids = vocab.tokenize(&prior_prompt(class));
        out.extend(
            latents.into_iter().map(|l| PriorExample { latent: l, token_ids: token_ids.clone() }),
        );
    }
    Ok(out)
}

// ----- train -----

pub fn cmd_train(ctx: &Ctx, resume: Option<&Path>) -> Result<()> {
    let manifest = manifest_path(ctx, None)?;
    let backbone = ToyBackbone::default();
    let dataset = load_dataset(&manifest, &backbone.latent)?;
    let mut vocab = Vocabulary::standard();
    let bank = prompt_bank(ctx)?;

    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.train.seed ^ INIT_STREAM);
    let mut store = match resume {
        Some(p) => ParamStore::load_json(p)?,
        None => backbone.init_params(vocab.size(), &mut rng),
    };
    // prepare_dataset reseeds identifier embeddings; a resumed checkpoint
    // already carries trained rows, so preparation runs on a scratch copy
    // and only the fresh path keeps it.
    let mut seeded = store.clone();
    let prepared = prepare_dataset(
        &dataset,
        &mut vocab,
        &bank,
        &backbone,
        &ctx.config.train,
        &mut seeded,
        &mut rng,
    )?;
    if resume.is_none() {
        store = seeded;
    }

    let priors = if ctx.config.train.lambda_prior > 0.0 {
        load_prior_examples(&ctx.out, &dataset, &vocab, &backbone.latent)?
    } else {
        Vec::new()
    };

    let mut trainer = Trainer::new(&backbone, ctx.config.train.clone(), prepared, priors)?;
    for unit in trainer.units() {
        println!("unit [{}]: {:?}", unit.concept_ids.join(", "), unit.prompt_text);
    }
    let out_dir = ctx.out.join("train");
    let artifacts = finetune(&mut trainer, &mut store, &out_dir)?;

    let mut record = RunRecord::new("train", "train", &ctx.config_hash)
        .with_input("manifest", provenance(&ctx.out, &manifest));
    if let Some(p) = resume {
        record = record.with_input("resume", provenance(&ctx.out, p));
    }
    write_run_record(&out_dir, record)?;

    let f = &artifacts.final_record;
    println!(
        "step {}: denoise {:.6}, prior {:.6}, attn {:.6}, total {:.6}",
        f.step, f.l_denoise, f.l_prior, f.l_attn, f.total
    );
    for kind in PROJECTIONS {
        println!("  mean weight change {}: {:.3e}", kind.label(), mean_rate(&artifacts.weight_changes, kind));
    }
    println!("weights: {}", artifacts.weights.display());
    Ok(())
}

fn mean_rate(changes: &[attnguide_core::diffusion::WeightChange], kind: ParamKind) -> f64 {
    let rates: Vec<f64> =
        changes.iter().filter(|c| c.kind == kind).map(|c| c.rate).collect();
    rates.iter().sum::<f64>() / rates.len().max(1) as f64
}

// ----- sample -----

/// One line of `samples.json`. Paths are relative to the output root so
/// metadata is identical across runs into different directories.
#[derive(Debug, Serialize, Deserialize)]
struct SampleEntry {
    concept_id: String,
    prompt_idx: usize,
    sample_idx: usize,
    prompt_text: String,
    path: String,
}

pub fn cmd_sample(ctx: &Ctx, run: &str, weights: &Path) -> Result<()> {
    let manifest = manifest_path(ctx, None)?;
    let (parsed, _) = ConceptManifest::load(&manifest)?;
    let backbone = ToyBackbone::default();
    let store = ParamStore::load_json(weights)?;
    let bank = prompt_bank(ctx)?;

    // identifiers registered in manifest order, matching training, so the
    // checkpoint's embedding rows line up
    let mut vocab = Vocabulary::standard();
    let mut subjects = Vec::new();
    for c in &parsed.concepts {
        let token = vocab.register_identifier(&c.identifier)?;
        subjects.push(SampleSubject {
            concept_id: c.id.clone(),
            class: c.class.clone(),
            identifier: token,
        });
    }

    let schedule = NoiseSchedule::linear(ctx.config.sample.steps);
    let samples = generate_samples(
        &backbone,
        &store,
        &schedule,
        &vocab,
        &bank,
        &subjects,
        ctx.config.sample.samples_per_prompt,
        ctx.config.sample.seed,
        &ctx.out,
        run,
    )?;

    let run_dir = ctx.out.join("runs").join(run);
    let entries: Vec<SampleEntry> = samples
        .iter()
        .map(|s| SampleEntry {
            concept_id: s.concept_id.clone(),
            prompt_idx: s.prompt_idx,
            sample_idx: s.sample_idx,
            prompt_text: s.prompt_text.clone(),
            path: provenance(&ctx.out, &s.path),
        })
        .collect();
    std::fs::write(run_dir.join("samples.json"), serde_json::to_string_pretty(&entries)?)?;
    write_run_record(
        &run_dir,
        RunRecord::new("sample", run, &ctx.config_hash)
            .with_input("manifest", provenance(&ctx.out, &manifest))
            .with_input("weights", provenance(&ctx.out, weights)),
    )?;
    println!("{} samples into {}", samples.len(), run_dir.display());
    Ok(())
}

// ----- attn -----

fn map_stem(surface: &str, position: usize) -> String {
    let stem: String = surface.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
    if stem.is_empty() {
        format!("token{position}")
    } else {
        stem
    }
}

pub fn cmd_attn(ctx: &Ctx, prompt: &str, weights: &Path) -> Result<()> {
    let manifest = manifest_path(ctx, None)?;
    let (parsed, _) = ConceptManifest::load(&manifest)?;
    let backbone = ToyBackbone::default();
    let store = ParamStore::load_json(weights)?;

    let mut vocab = Vocabulary::standard();
    for c in &parsed.concepts {
        vocab.register_identifier(&c.identifier)?;
    }
    let ids = vocab.tokenize(prompt);
    let by_id: BTreeMap<usize, String> =
        vocab.registered_identifiers().map(|(s, id)| (id, s.clone())).collect();
    let targets: Vec<(usize, String)> = ids
        .iter()
        .enumerate()
        .filter_map(|(pos, id)| by_id.get(id).map(|s| (pos, s.clone())))
        .collect();
    if targets.is_empty() {
        let known: Vec<&String> = by_id.values().collect();
        return Err(Error::validation(format!(
            "prompt {prompt:?} contains no identifier token; known: {known:?}"
        )));
    }

    let params = store.bind_frozen();
    let text = encode_prompt(&backbone, &params, &ids)?;
    let schedule = NoiseSchedule::linear(ctx.config.sample.steps);
    let map_size = ctx.config.train.map_size;
    let dir = ctx.out.join("attn");
    std::fs::create_dir_all(&dir)?;

    let mut sample_img: Option<RgbImage> = None;
    let mut panels = Vec::new();
    for (pos, surface) in &targets {
        // identical seed per probe: every map watches the same trajectory
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.sample.seed);
        let opts = ProbeOptions {
            factors: ctx.config.train.capture_factors.clone(),
            token_index: *pos,
            out_h: map_size,
            out_w: map_size,
        };
        let (latent, probe) =
            generate_latent_probed(&backbone, &params, &schedule, &text, &mut rng, Some(&opts))?;
        let probe = probe.expect("probe options were supplied");
        if sample_img.is_none() {
            let img = image_from_latent(&latent, &backbone.latent)?;
            img.save(dir.join("sample.png"))?;
            sample_img = Some(img);
        }
        let stem = map_stem(surface, *pos);
        write_map_png(&probe.mean_map, &dir.join(format!("map_{stem}.png")))?;
        write_probe_sidecar(
            &ProbeSidecar {
                layer_ids: probe.layer_ids,
                token_index: *pos,
                timestep_range: probe.timestep_range,
            },
            &dir.join(format!("map_{stem}.json")),
        )?;
        // grid panels are max-normalized for visibility; the raw map files
        // stay value-faithful
        let peak = probe.mean_map.iter().cloned().fold(0.0f64, f64::max);
        let display = if peak > 0.0 { &probe.mean_map / peak } else { probe.mean_map.clone() };
        panels.push(figures::map_panel(&display)?);
        println!("{surface} at token {pos}: map_{stem}.png");
    }

    let sample = sample_img.expect("at least one probe ran");
    let factor = (map_size as u32 / sample.width()).max(1);
    let mut cells = vec![figures::upscale_nearest(&sample, factor)];
    cells.extend(panels);
    figures::hstack(&cells, 4).save(dir.join("grid.png"))?;

    write_run_record(
        &dir,
        RunRecord::new("attn", "attn", &ctx.config_hash)
            .with_input("manifest", provenance(&ctx.out, &manifest))
            .with_input("weights", provenance(&ctx.out, weights)),
    )?;
    println!("figure: {}", dir.join("grid.png").display());
    Ok(())
}

// ----- eval -----

pub fn cmd_eval(ctx: &Ctx, run: &str) -> Result<()> {
    let run_dir = ctx.out.join("runs").join(run);
    let meta_path = run_dir.join("samples.json");
    if !meta_path.is_file() {
        return Err(Error::validation(format!(
            "no sample metadata at {} (run the sample step first)",
            meta_path.display()
        )));
    }
    let entries: Vec<SampleEntry> =
        serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    let samples: Vec<GeneratedSample> = entries
        .iter()
        .map(|e| {
            let path = ctx.out.join(&e.path);
            let image = image::open(&path)?.to_rgb8();
            Ok(GeneratedSample {
                concept_id: e.concept_id.clone(),
                prompt_idx: e.prompt_idx,
                sample_idx: e.sample_idx,
                prompt_text: e.prompt_text.clone(),
                path,
                image,
            })
        })
        .collect::<Result<_>>()?;

    let manifest = manifest_path(ctx, None)?;
    let (parsed, root) = ConceptManifest::load(&manifest)?;
    let mut refs: BTreeMap<String, Vec<RgbImage>> = BTreeMap::new();
    for c in &parsed.concepts {
        let images = c
            .images
            .iter()
            .map(|e| Ok(image::open(root.join(&e.image))?.to_rgb8()))
            .collect::<Result<Vec<_>>>()?;
        refs.insert(c.id.clone(), images);
    }
    let surfaces: Vec<String> = parsed.concepts.iter().map(|c| c.identifier.clone()).collect();

    let embedder: Box<dyn EmbeddingProvider> = match ctx.config.eval.embedder.as_str() {
        "builtin" => Box::new(BuiltinEmbedder),
        "precomputed" => {
            let path = ctx.config.eval.precomputed.as_ref().ok_or_else(|| {
                Error::validation("eval.embedder = \"precomputed\" needs eval.precomputed = <path>")
            })?;
            Box::new(PrecomputedEmbedder::load_json(path)?)
        }
        other => {
            return Err(Error::validation(format!(
                "unknown embedder {other:?}; expected \"builtin\" or \"precomputed\""
            )))
        }
    };

    let report = evaluate(run, &samples, &refs, &surfaces, embedder.as_ref(), &BlockPerceptual)?;
    let eval_dir = run_dir.join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    write_report_csv(&report, &eval_dir.join("report.csv"))?;
    write_report_markdown(&report, &eval_dir.join("report.md"))?;
    std::fs::write(eval_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write_run_record(
        &eval_dir,
        RunRecord::new("eval", &format!("{run}/eval"), &ctx.config_hash)
            .with_input("samples", provenance(&ctx.out, &meta_path))
            .with_input("manifest", provenance(&ctx.out, &manifest)),
    )?;

    for c in &report.concepts {
        let kid = c
            .kernel_distance
            .map(|k| format!("{k:.6}"))
            .unwrap_or_else(|| "n/a".to_string());
        println!(
            "{}: image {:.4}, text {:.4}, diversity {:.4}, kid {kid}",
            c.concept_id, c.mean_image_similarity, c.mean_text_similarity, c.mean_diversity
        );
    }
    println!("reports in {}", eval_dir.display());
    Ok(())
}

// ----- ablate -----

fn parse_selector(name: &str) -> Result<ParamSelector> {
    match name.to_ascii_lowercase().as_str() {
        "kv" => Ok(ParamSelector::Kv),
        "qv" => Ok(ParamSelector::Qv),
        "qkv" => Ok(ParamSelector::Qkv),
        "all" => Ok(ParamSelector::All),
        other => Err(Error::validation(format!(
            "unknown parameter set {other:?}; expected kv, qv, qkv, or all"
        ))),
    }
}

pub fn cmd_ablate(ctx: &Ctx, sets: &[String]) -> Result<()> {
    let mut selectors = Vec::new();
    for s in sets {
        let sel = parse_selector(s)?;
        let label = s.to_ascii_lowercase();
        if selectors.iter().any(|(l, _)| l == &label) {
            return Err(Error::validation(format!("parameter set {label:?} listed twice")));
        }
        selectors.push((label, sel));
    }
    if selectors.is_empty() {
        return Err(Error::validation("no parameter sets to ablate"));
    }

    let manifest = manifest_path(ctx, None)?;
    let backbone = ToyBackbone::default();
    let dataset = load_dataset(&manifest, &backbone.latent)?;
    let dir = ctx.out.join("ablate");
    std::fs::create_dir_all(&dir)?;

    let mut curves = std::io::BufWriter::new(std::fs::File::create(dir.join("curves.csv"))?);
    writeln!(curves, "set,step,kind,mean_rate")?;
    let mut finals = std::io::BufWriter::new(std::fs::File::create(dir.join("rates.csv"))?);
    writeln!(finals, "set,name,kind,rate")?;
    let mut summary: Vec<(String, [f64; 3])> = Vec::new();
    let mut series: Vec<figures::Series> = Vec::new();

    for (label, selector) in &selectors {
        // one seed for every set: differences come from the selector alone
        let mut config = ctx.config.train.clone();
        config.selector = *selector;
        let mut vocab = Vocabulary::standard();
        let bank = prompt_bank(ctx)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ INIT_STREAM);
        let mut store = backbone.init_params(vocab.size(), &mut rng);
        let prepared = prepare_dataset(
            &dataset,
            &mut vocab,
            &bank,
            &backbone,
            &config,
            &mut store,
            &mut rng,
        )?;
        let baseline = store.clone();
        let priors = if config.lambda_prior > 0.0 {
            load_prior_examples(&ctx.out, &dataset, &vocab, &backbone.latent)?
        } else {
            Vec::new()
        };
        let mut trainer = Trainer::new(&backbone, config.clone(), prepared, priors)?;
        let mut opt = AdamW::new(config.lr);

        let every = (config.steps / 20).max(1);
        let mut per_kind: BTreeMap<&'static str, Vec<(f64, f64)>> = BTreeMap::new();
        for step in 0..config.steps {
            trainer.training_step(&mut store, &mut opt, step)?;
            if (step + 1) % every == 0 || step + 1 == config.steps {
                let changes = store.weight_change_by_kind(&baseline, &PROJECTIONS)?;
                for kind in PROJECTIONS {
                    let mean = mean_rate(&changes, kind);
                    writeln!(curves, "{label},{},{},{mean}", step + 1, kind.label())?;
                    per_kind.entry(kind.label()).or_default().push(((step + 1) as f64, mean));
                }
            }
        }

        let changes = store.weight_change_by_kind(&baseline, &PROJECTIONS)?;
        for c in &changes {
            writeln!(finals, "{label},{},{},{}", c.name, c.kind.label(), c.rate)?;
        }
        let means =
            [ParamKind::AttnQ, ParamKind::AttnK, ParamKind::AttnV].map(|k| mean_rate(&changes, k));
        println!(
            "{label}: mean rate q {:.3e}, k {:.3e}, v {:.3e}",
            means[0], means[1], means[2]
        );
        summary.push((label.clone(), means));
        for (kind, points) in per_kind {
            series.push(figures::Series { label: format!("{label} {kind}"), points });
        }
    }
    curves.flush()?;
    finals.flush()?;

    figures::write_line_plot(&dir.join("curves.svg"), "weight change rate", &series)?;
    let mut md = String::from("| set | attn_q | attn_k | attn_v |\n|---|---|---|---|\n");
    for (label, m) in &summary {
        md.push_str(&format!("| {label} | {:.6e} | {:.6e} | {:.6e} |\n", m[0], m[1], m[2]));
    }
    std::fs::write(dir.join("summary.md"), md)?;
    write_run_record(
        &dir,
        RunRecord::new("ablate", "ablate", &ctx.config_hash)
            .with_input("manifest", provenance(&ctx.out, &manifest)),
    )?;
    println!("curves and rates in {}", dir.display());
    Ok(())
}
