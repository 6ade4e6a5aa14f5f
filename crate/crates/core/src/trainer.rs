//! The fine-tuning loop: sample a timestep, noise a training image, run the
//! denoiser with text conditioning, and descend on
//! `L = L_denoise + lambda * L_prior + delta * L_attn`,
//! where the attention term compares each subject identifier's aggregated
//! cross-attention map against that subject's segmentation mask.
//!
//! Everything is driven by a single seeded RNG, so a run is reproducible
//! down to the bit from `(config, dataset, priors)`.

use crate::attention::{aggregate_record_maps, aggregate_token_map, CapturedAttention};
use crate::conditioning::{
    init_identifier_embedding, render_prompt, IdentifierToken, PromptBank, Vocabulary,
};
use crate::datasets::{resize_mask, Dataset, MaskResize};
use crate::diffusion::{
    adapter::{check_backbone, BackboneClaims, BackboneRequirements},
    sample_noise, Backbone, NoiseSchedule, ParamKind, ParamSelector, ParamStore,
    TrainableSelection, WeightChange,
};
use crate::guidance::{combine_losses, mse, multi_concept_attn_loss, GuidanceMode, SegMask};
use crate::optim::AdamW;
use crate::tensor::{average, Tensor};
use crate::{Error, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the class-prior preservation term.
    pub lambda_prior: f64,
    /// Weight of the attention guidance term.
    pub delta_attn: f64,
    pub selector: ParamSelector,
    pub include_text_encoder: bool,
    pub guidance: GuidanceMode,
    /// Downsampling factors whose attention layers feed the guidance loss.
    pub capture_factors: Vec<u32>,
    /// Side length of the common grid maps and masks are compared on.
    pub map_size: usize,
    pub schedule_steps: usize,
    pub mask_resize: MaskResize,
    /// Noise added to a freshly seeded identifier embedding.
    pub identifier_jitter: f64,
    pub seed: u64,
    /// Checkpoint every n steps; 0 keeps only the final weights.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 1e-5,
            batch_size: 2,
            lambda_prior: 1.0,
            delta_attn: 1.0,
            selector: ParamSelector::Kv,
            include_text_encoder: true,
            guidance: GuidanceMode::Hard,
            capture_factors: vec![2, 4, 8],
            map_size: 256,
            schedule_steps: 1000,
            mask_resize: MaskResize::Binary,
            identifier_jitter: 0.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.steps == 0 {
            problems.push("steps must be positive".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            problems.push(format!("learning rate {} is not positive", self.lr));
        }
        if self.batch_size == 0 {
            problems.push("batch size must be positive".to_string());
        }
        for (name, v) in [("lambda_prior", self.lambda_prior), ("delta_attn", self.delta_attn)] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.capture_factors.is_empty() {
            problems.push("capture_factors is empty".to_string());
        }
        if self.capture_factors.contains(&0) {
            problems.push("capture factor 0 is meaningless".to_string());
        }
        if self.map_size == 0 {
            problems.push("map size must be positive".to_string());
        }
        if self.schedule_steps == 0 {
            problems.push("schedule needs at least one step".to_string());
        }
        if !(self.identifier_jitter.is_finite() && self.identifier_jitter >= 0.0) {
            problems.push("identifier jitter must be finite and non-negative".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(problems.join("; ")))
        }
    }

    pub fn selection(&self) -> TrainableSelection {
        TrainableSelection {
            selector: self.selector,
            include_text_encoder: self.include_text_encoder,
        }
    }
}

/// One image shared by all subjects of a unit, with each subject's mask
/// already on the comparison grid.
#[derive(Debug, Clone)]
pub struct UnitImage {
    pub latent: Array2<f64>,
    pub masks: Vec<SegMask>,
}

/// A training unit: one concept alone, or a group that shares photos and a
/// composite prompt.
#[derive(Debug, Clone)]
pub struct TrainUnit {
    pub concept_ids: Vec<String>,
    pub classes: Vec<String>,
    pub identifiers: Vec<IdentifierToken>,
    pub prompt_text: String,
    pub prompt_tokens: Vec<usize>,
    /// Position of each subject's identifier in `prompt_tokens`.
    pub identifier_positions: Vec<usize>,
    pub images: Vec<UnitImage>,
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub units: Vec<TrainUnit>,
    pub identifiers: BTreeMap<String, IdentifierToken>,
}

/// Register identifiers, seed their embeddings, and assemble training
/// units. Grouped concepts train only through their group's composite
/// prompt; ungrouped ones get the single-subject prompt.
pub fn prepare_dataset(
    dataset: &Dataset,
    vocab: &mut Vocabulary,
    bank: &PromptBank,
    backbone: &dyn Backbone,
    config: &TrainConfig,
    store: &mut ParamStore,
    rng: &mut dyn rand::RngCore,
) -> Result<PreparedDataset> {
    config.validate()?;
    let mut identifiers = BTreeMap::new();
    for c in &dataset.manifest.concepts {
        let token = vocab.register_identifier(&c.identifier)?;
        init_identifier_embedding(
            store,
            &token,
            vocab.identifier_seed_id(),
            config.identifier_jitter,
            rng,
        )?;
        identifiers.insert(c.id.clone(), token);
    }

    let mut units = Vec::new();
    let grouped: BTreeSet<&String> =
        dataset.manifest.groups.iter().flat_map(|g| g.members.iter()).collect();

    for group in &dataset.manifest.groups {
        if group.members.len() != 2 {
            return Err(Error::validation(format!(
                "group {:?} has {} members; joint prompts support exactly two",
                group.members,
                group.members.len()
            )));
        }
        let template = bank
            .pairs()
            .first()
            .ok_or_else(|| Error::validation("prompt bank has no two-subject template"))?;
        let members: Vec<_> = group
            .members
            .iter()
            .map(|id| dataset.concepts.get(id).expect("validated member"))
            .collect();
        let toks: Vec<&IdentifierToken> =
            group.members.iter().map(|id| &identifiers[id]).collect();
        let rendered = render_prompt(
            vocab,
            template,
            &[(toks[0], members[0].class.as_str()), (toks[1], members[1].class.as_str())],
        )?;
        let mut images = Vec::with_capacity(members[0].latents.len());
        for i in 0..members[0].latents.len() {
            let masks = members
                .iter()
                .map(|m| resize_mask(&m.masks[i], config.map_size, config.map_size, config.mask_resize))
                .collect::<Result<Vec<_>>>()?;
            images.push(UnitImage { latent: members[0].latents[i].clone(), masks });
        }
        units.push(TrainUnit {
            concept_ids: group.members.clone(),
            classes: members.iter().map(|m| m.class.clone()).collect(),
            identifiers: toks.into_iter().cloned().collect(),
            prompt_text: rendered.text,
            prompt_tokens: rendered.token_ids,
            identifier_positions: rendered.identifier_positions,
            images,
        });
    }

    for c in &dataset.manifest.concepts {
        if grouped.contains(&c.id) {
            continue;
        }
        let template = bank
            .singles()
            .first()
            .ok_or_else(|| Error::validation("prompt bank has no single-subject template"))?;
        let loaded = &dataset.concepts[&c.id];
        let token = &identifiers[&c.id];
        let rendered = render_prompt(vocab, template, &[(token, loaded.class.as_str())])?;
        let mut images = Vec::with_capacity(loaded.latents.len());
        for i in 0..loaded.latents.len() {
            let mask =
                resize_mask(&loaded.masks[i], config.map_size, config.map_size, config.mask_resize)?;
            images.push(UnitImage { latent: loaded.latents[i].clone(), masks: vec![mask] });
        }
        units.push(TrainUnit {
            concept_ids: vec![c.id.clone()],
            classes: vec![loaded.class.clone()],
            identifiers: vec![token.clone()],
            prompt_text: rendered.text,
            prompt_tokens: rendered.token_ids,
            identifier_positions: rendered.identifier_positions,
            images,
        });
    }

    let longest = units.iter().map(|u| u.prompt_tokens.len()).max().unwrap_or(0);
    let claims = BackboneClaims::for_backbone("backbone", backbone);
    let requirements = BackboneRequirements {
        capture_factors: config.capture_factors.clone(),
        text_conditioning: true,
        min_tokens: longest,
    };
    check_backbone(&claims, &requirements).into_result()?;

    Ok(PreparedDataset { units, identifiers })
}

/// A class-prior example: a generated image of the bare class prompt.
#[derive(Debug, Clone)]
pub struct PriorExample {
    pub latent: Array2<f64>,
    pub token_ids: Vec<usize>,
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub l_denoise: f64,
    pub l_prior: f64,
    pub l_attn: f64,
    pub total: f64,
}

pub struct Trainer<'a> {
    pub backbone: &'a dyn Backbone,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    units: Vec<TrainUnit>,
    priors: Vec<PriorExample>,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(
        backbone: &'a dyn Backbone,
        config: TrainConfig,
        prepared: PreparedDataset,
        priors: Vec<PriorExample>,
    ) -> Result<Self> {
        config.validate()?;
        if prepared.units.is_empty() {
            return Err(Error::validation("no training units"));
        }
        if config.lambda_prior > 0.0 && priors.is_empty() {
            return Err(Error::validation(
                "lambda_prior is positive but no prior images were supplied",
            ));
        }
        let schedule = NoiseSchedule::linear(config.schedule_steps);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer { backbone, config, schedule, units: prepared.units, priors, rng })
    }

    pub fn units(&self) -> &[TrainUnit] {
        &self.units
    }

    /// One optimizer step over a sampled batch. The whole batch shares one
    /// timestep; each element draws its own unit, image, and noise.
    pub fn training_step(
        &mut self,
        store: &mut ParamStore,
        opt: &mut AdamW,
        step: usize,
    ) -> Result<StepRecord> {
        let selection = self.config.selection();
        let bound = store.bind(&selection);
        let spec = self.backbone.latent();
        let t = self.rng.random_range(1..=self.schedule.steps());

        let mut denoise_terms = Vec::with_capacity(self.config.batch_size);
        let mut attn_terms = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let unit = &self.units[self.rng.random_range(0..self.units.len())];
            let image = &unit.images[self.rng.random_range(0..unit.images.len())];
            let eps = sample_noise(&spec, &mut self.rng);
            let z0 = Tensor::constant(image.latent.clone().into_dyn());
            let z_t = self.schedule.add_noise_graph(&z0, &Tensor::constant(eps.clone()), t);
            let text = self.backbone.encode_text(&bound, &unit.prompt_tokens);
            let out = self.backbone.denoise(&bound, &z_t, t as u32, &text);
            denoise_terms.push(mse(&out.eps_hat, &Tensor::constant(eps)));

            let caps: Vec<&CapturedAttention> = out
                .captures
                .iter()
                .filter(|c| self.config.capture_factors.contains(&c.downsample_factor))
                .collect();
            if caps.is_empty() {
                return Err(Error::capability(format!(
                    "backbone produced no attention at factors {:?}",
                    self.config.capture_factors
                )));
            }
            let pairs: Vec<(Tensor, &SegMask)> = unit
                .identifier_positions
                .iter()
                .zip(&image.masks)
                .map(|(&pos, mask)| {
                    let map = aggregate_token_map(
                        &caps,
                        pos,
                        self.config.map_size,
                        self.config.map_size,
                    );
                    (map, mask)
                })
                .collect();
            attn_terms.push(multi_concept_attn_loss(&pairs, self.config.guidance));
        }
        let l_denoise = average(&denoise_terms);
        let l_attn = average(&attn_terms);

        let l_prior = if self.config.lambda_prior > 0.0 {
            let prior = &self.priors[self.rng.random_range(0..self.priors.len())];
            let t_prior = self.rng.random_range(1..=self.schedule.steps());
            let eps = sample_noise(&spec, &mut self.rng);
            let z0 = Tensor::constant(prior.latent.clone().into_dyn());
            let z_t = self.schedule.add_noise_graph(&z0, &Tensor::constant(eps.clone()), t_prior);
            let text = self.backbone.encode_text(&bound, &prior.token_ids);
            let out = self.backbone.denoise(&bound, &z_t, t_prior as u32, &text);
            mse(&out.eps_hat, &Tensor::constant(eps))
        } else {
            Tensor::scalar(0.0)
        };

        let (total, breakdown) = combine_losses(
            &l_denoise,
            &l_prior,
            &l_attn,
            self.config.lambda_prior,
            self.config.delta_attn,
        )?;
        total.backward();

        for name in store.trainable_names(&selection) {
            if let Some(grad) = bound[&name].grad() {
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("gradient of {name} at step {step}"),
                    });
                }
                opt.step(&name, &mut store.get_mut(&name).unwrap().data, &grad);
            }
        }

        Ok(StepRecord {
            step,
            t,
            l_denoise: breakdown.l_denoise,
            l_prior: breakdown.l_prior,
            l_attn: breakdown.l_attn,
            total: breakdown.total,
        })
    }
}

/// Files a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub final_record: StepRecord,
    pub weights: PathBuf,
    pub log: PathBuf,
    pub weight_change_report: PathBuf,
    pub weight_changes: Vec<WeightChange>,
}

/// Run the full loop: JSONL step log, optional periodic checkpoints, final
/// weights, and a per-projection weight-change report.
pub fn finetune(
    trainer: &mut Trainer,
    store: &mut ParamStore,
    out_dir: &Path,
) -> Result<RunArtifacts> {
    std::fs::create_dir_all(out_dir)?;
    let baseline = store.clone();
    let mut opt = AdamW::new(trainer.config.lr);

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let mut last = None;
    for step in 0..trainer.config.steps {
        let record = trainer.training_step(store, &mut opt, step)?;
        serde_json::to_writer(&mut log, &record)?;
        log.write_all(b"\n")?;
        if trainer.config.checkpoint_every > 0
            && (step + 1) % trainer.config.checkpoint_every == 0
            && step + 1 < trainer.config.steps
        {
            let dir = out_dir.join("checkpoints");
            std::fs::create_dir_all(&dir)?;
            store.save_json(&dir.join(format!("step_{:06}.json", step + 1)))?;
        }
        last = Some(record);
    }
    log.flush()?;

    let weights = out_dir.join("model.json");
    store.save_json(&weights)?;

    let changes = store.weight_change_by_kind(
        &baseline,
        &[ParamKind::AttnQ, ParamKind::AttnK, ParamKind::AttnV],
    )?;
    let report = out_dir.join("weight_change.csv");
    {
        let mut csv = std::io::BufWriter::new(std::fs::File::create(&report)?);
        writeln!(csv, "name,kind,rate")?;
        for c in &changes {
            writeln!(csv, "{},{},{}", c.name, c.kind.label(), c.rate)?;
        }
    }

    Ok(RunArtifacts {
        final_record: last.expect("steps >= 1 guarantees at least one record"),
        weights,
        log: log_path,
        weight_change_report: report,
        weight_changes: changes,
    })
}

/// Measure where a subject's attention lands on one of its own training
/// images: noise it to each requested timestep (fresh seeded noise), run
/// the denoiser, and average the aggregated identifier maps.
#[allow(clippy::too_many_arguments)]
pub fn probe_concept_map(
    backbone: &dyn Backbone,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    unit: &TrainUnit,
    image_idx: usize,
    concept_idx: usize,
    factors: &[u32],
    out_size: usize,
    timesteps: &[usize],
    seed: u64,
) -> Result<Array2<f64>> {
    if image_idx >= unit.images.len() || concept_idx >= unit.concept_ids.len() {
        return Err(Error::validation("probe indices out of range"));
    }
    if timesteps.is_empty() {
        return Err(Error::validation("no probe timesteps"));
    }
    let bound = store.bind_frozen();
    let text = backbone.encode_text(&bound, &unit.prompt_tokens);
    let token_pos = unit.identifier_positions[concept_idx];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = backbone.latent();
    let z0 = unit.images[image_idx].latent.clone().into_dyn();

    let mut acc = Array2::<f64>::zeros((out_size, out_size));
    for &t in timesteps {
        if t < 1 || t > schedule.steps() {
            return Err(Error::validation(format!("probe timestep {t} out of range")));
        }
        let eps = sample_noise(&spec, &mut rng);
        let z_t = Tensor::constant(schedule.add_noise(&z0, &eps, t));
        let out = backbone.denoise(&bound, &z_t, t as u32, &text);
        let records: Vec<_> = out
            .captures
            .iter()
            .filter(|c| factors.contains(&c.downsample_factor))
            .map(|c| c.to_record())
            .collect();
        if records.is_empty() {
            return Err(Error::capability(format!("no attention at factors {factors:?}")));
        }
        let refs: Vec<_> = records.iter().collect();
        acc += &aggregate_record_maps(&refs, token_pos, out_size, out_size)?;
    }
    Ok(acc / timesteps.len() as f64)
}
