//! Concept datasets: the manifest that names concepts, their identifiers
//! and per-image masks; mask loading/resizing; and class-prior image sets.
//!
//! Manifest validation is exhaustive: it collects every violation instead
//! of stopping at the first, because hand-written manifests tend to have
//! several problems at once.

use crate::diffusion::{
    generate_latent, latent_from_image, image_from_latent, Backbone, LatentSpec, NoiseSchedule,
    ParamStore,
};
use crate::conditioning::{prior_prompt, Vocabulary};
use crate::guidance::SegMask;
use crate::{Error, Result};
use ndarray::Array2;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestConcept {
    pub id: String,
    pub class: String,
    pub identifier: String,
    pub images: Vec<ImageEntry>,
}

/// Concepts that appear together in the same photos and are trained jointly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptGroup {
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptManifest {
    pub name: String,
    /// `[height, width]` every image and mask must match.
    pub image_size: [usize; 2],
    pub concepts: Vec<ManifestConcept>,
    #[serde(default)]
    pub groups: Vec<ConceptGroup>,
}

impl ConceptManifest {
    pub fn parse(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    /// Parse and fully validate; file references are resolved relative to
    /// the manifest's directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path)?;
        let manifest = ConceptManifest::parse(&text)?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let violations = manifest.validate(&root);
        if violations.is_empty() {
            Ok((manifest, root))
        } else {
            Err(Error::validation(format!(
                "manifest {}:\n  - {}",
                path.display(),
                violations.join("\n  - ")
            )))
        }
    }

    /// Every violated rule, one message each. Empty means valid.
    pub fn validate(&self, root: &Path) -> Vec<String> {
        let mut out = Vec::new();
        if self.name.trim().is_empty() {
            out.push("dataset name is empty".to_string());
        }
        if self.concepts.is_empty() {
            out.push("no concepts defined".to_string());
        }
        let (h, w) = (self.image_size[0], self.image_size[1]);
        if h == 0 || w == 0 {
            out.push(format!("image size {h}x{w} is degenerate"));
        }

        let mut seen_ids = BTreeSet::new();
        let mut seen_identifiers = BTreeSet::new();
        for c in &self.concepts {
            let label = format!("concept {:?}", c.id);
            if c.id.trim().is_empty() {
                out.push("a concept has an empty id".to_string());
            } else if !seen_ids.insert(c.id.clone()) {
                out.push(format!("{label}: duplicate id"));
            }
            if c.class.trim().is_empty() {
                out.push(format!("{label}: empty class noun"));
            }
            if c.identifier.is_empty() || c.identifier.chars().any(|ch| ch.is_whitespace()) {
                out.push(format!("{label}: identifier {:?} is not a single token", c.identifier));
            } else if !seen_identifiers.insert(c.identifier.clone()) {
                out.push(format!("{label}: identifier {:?} reused", c.identifier));
            }
            if c.images.is_empty() {
                out.push(format!("{label}: no images"));
            }
            for entry in &c.images {
                for (what, rel) in [("image", &entry.image), ("mask", &entry.mask)] {
                    let path = root.join(rel);
                    if !path.is_file() {
                        out.push(format!("{label}: {what} {} not found", rel.display()));
                        continue;
                    }
                    match image::open(&path) {
                        Err(e) => out.push(format!("{label}: {what} {}: {e}", rel.display())),
                        Ok(img) => {
                            if (img.height() as usize, img.width() as usize) != (h, w) {
                                out.push(format!(
                                    "{label}: {what} {} is {}x{}, manifest says {h}x{w}",
                                    rel.display(),
                                    img.height(),
                                    img.width(),
                                ));
                            } else if what == "mask" {
                                if let Err(e) = mask_from_image(&img) {
                                    out.push(format!(
                                        "{label}: mask {}: {e}",
                                        rel.display()
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }

        for (gi, g) in self.groups.iter().enumerate() {
            let label = format!("group {gi}");
            if g.members.len() < 2 {
                out.push(format!("{label}: needs at least two members"));
            }
            let mut seen = BTreeSet::new();
            for m in &g.members {
                if !seen.insert(m.clone()) {
                    out.push(format!("{label}: member {m:?} listed twice"));
                }
                if !self.concepts.iter().any(|c| &c.id == m) {
                    out.push(format!("{label}: member {m:?} is not a concept"));
                }
            }
            // joint training assumes the members were segmented out of the
            // same photos
            let lists: Vec<Vec<&PathBuf>> = g
                .members
                .iter()
                .filter_map(|m| self.concepts.iter().find(|c| &c.id == m))
                .map(|c| c.images.iter().map(|e| &e.image).collect())
                .collect();
            if lists.len() >= 2 && !lists.iter().all(|l| *l == lists[0]) {
                out.push(format!("{label}: members do not share the same image list"));
            }
        }
        out
    }

    pub fn concept(&self, id: &str) -> Option<&ManifestConcept> {
        self.concepts.iter().find(|c| c.id == id)
    }
}

/// Collapse any decoded image to a `[0, 1]` mask: color inputs go through
/// the usual luminance weighting, then every pixel is `v / 255`.
pub fn mask_from_image(img: &image::DynamicImage) -> Result<SegMask> {
    let luma = img.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    let mut data = Array2::<f64>::zeros((h, w));
    for (x, y, px) in luma.enumerate_pixels() {
        data[[y as usize, x as usize]] = px.0[0] as f64 / 255.0;
    }
    SegMask::new(data)
}

pub fn load_mask(path: &Path) -> Result<SegMask> {
    let img = image::open(path)?;
    mask_from_image(&img).map_err(|e| match e {
        Error::Validation(msg) => Error::validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskResize {
    /// Area-weighted average; fractional coverage survives.
    Soft,
    /// Area-weighted average thresholded at 0.5 back to `{0, 1}`.
    Binary,
}

/// Resize a mask with an exact box filter. Soft mode preserves the mean
/// coverage; binary mode re-quantizes afterwards. Fails if a binary resize
/// rounds the whole mask away.
pub fn resize_mask(mask: &SegMask, out_h: usize, out_w: usize, mode: MaskResize) -> Result<SegMask> {
    let src = mask.data();
    let (h, w) = src.dim();
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for oy in 0..out_h {
        let (y0, y1) = ((oy * h) as f64 / out_h as f64, ((oy + 1) * h) as f64 / out_h as f64);
        for ox in 0..out_w {
            let (x0, x1) = ((ox * w) as f64 / out_w as f64, ((ox + 1) * w) as f64 / out_w as f64);
            let mut acc = 0.0;
            let mut area = 0.0;
            let mut sy = y0.floor() as usize;
            while (sy as f64) < y1 && sy < h {
                let wy = (y1.min((sy + 1) as f64) - y0.max(sy as f64)).max(0.0);
                let mut sx = x0.floor() as usize;
                while (sx as f64) < x1 && sx < w {
                    let wx = (x1.min((sx + 1) as f64) - x0.max(sx as f64)).max(0.0);
                    acc += src[[sy, sx]] * wy * wx;
                    area += wy * wx;
                    sx += 1;
                }
                sy += 1;
            }
            out[[oy, ox]] = (acc / area).clamp(0.0, 1.0);
        }
    }
    if mode == MaskResize::Binary {
        out.mapv_inplace(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    }
    SegMask::new(out).map_err(|e| match e {
        Error::Validation(msg) => {
            Error::validation(format!("resize to {out_h}x{out_w}: {msg}"))
        }
        other => other,
    })
}

/// One concept with its pixels in latent form.
#[derive(Debug, Clone)]
pub struct LoadedConcept {
    pub id: String,
    pub class: String,
    pub identifier: String,
    /// Relative image paths, parallel to `latents`/`masks`; members of a
    /// group recognize shared photos through these.
    pub image_paths: Vec<PathBuf>,
    pub latents: Vec<Array2<f64>>,
    pub masks: Vec<SegMask>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: ConceptManifest,
    pub root: PathBuf,
    pub concepts: BTreeMap<String, LoadedConcept>,
}

pub fn load_dataset(manifest_path: &Path, latent: &LatentSpec) -> Result<Dataset> {
    let (manifest, root) = ConceptManifest::load(manifest_path)?;
    if manifest.image_size != [latent.h, latent.w] {
        return Err(Error::validation(format!(
            "manifest images are {}x{}, backbone latent wants {}x{}",
            manifest.image_size[0], manifest.image_size[1], latent.h, latent.w
        )));
    }
    let mut concepts = BTreeMap::new();
    for c in &manifest.concepts {
        let mut latents = Vec::with_capacity(c.images.len());
        let mut masks = Vec::with_capacity(c.images.len());
        let mut image_paths = Vec::with_capacity(c.images.len());
        for entry in &c.images {
            let img = image::open(root.join(&entry.image))?.to_rgb8();
            latents.push(latent_from_image(&img, latent)?);
            masks.push(load_mask(&root.join(&entry.mask))?);
            image_paths.push(entry.image.clone());
        }
        concepts.insert(
            c.id.clone(),
            LoadedConcept {
                id: c.id.clone(),
                class: c.class.clone(),
                identifier: c.identifier.clone(),
                image_paths,
                latents,
                masks,
            },
        );
    }
    Ok(Dataset { manifest, root, concepts })
}

/// Where a class's prior images and their provenance live.
pub fn prior_dir(base: &Path, class: &str) -> PathBuf {
    base.join("priors").join(class)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorProvenance {
    pub backbone: String,
    pub seed: u64,
    pub count: usize,
    pub prompt: String,
}

/// Sample `count` images of the bare class prompt from the frozen model and
/// write them (plus provenance) under `base/priors/<class>/`.
#[allow(clippy::too_many_arguments)]
pub fn generate_priors(
    backbone: &dyn Backbone,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    class: &str,
    count: usize,
    seed: u64,
    base: &Path,
    backbone_name: &str,
) -> Result<PriorProvenance> {
    if count == 0 {
        return Err(Error::validation("prior count must be positive"));
    }
    let dir = prior_dir(base, class);
    std::fs::create_dir_all(&dir)?;
    let prompt = prior_prompt(class);
    let ids = vocab.tokenize(&prompt);
    let params = store.bind_frozen();
    let text = crate::conditioning::encode_prompt(backbone, &params, &ids)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = backbone.latent();
    for i in 0..count {
        let latent = generate_latent(backbone, &params, schedule, &text, &mut rng)?;
        let img = image_from_latent(&latent, &spec)?;
        img.save(dir.join(format!("{i}.png")))?;
    }
    let provenance = PriorProvenance {
        backbone: backbone_name.to_string(),
        seed,
        count,
        prompt,
    };
    std::fs::write(
        dir.join("provenance.json"),
        serde_json::to_string_pretty(&provenance)?,
    )?;
    Ok(provenance)
}

/// Load a previously generated prior set back as latents.
pub fn load_priors(
    base: &Path,
    class: &str,
    latent: &LatentSpec,
) -> Result<(Vec<Array2<f64>>, PriorProvenance)> {
    let dir = prior_dir(base, class);
    let prov_path = dir.join("provenance.json");
    if !prov_path.is_file() {
        return Err(Error::validation(format!(
            "no prior set for class {class:?} under {} (run the priors step first)",
            dir.display()
        )));
    }
    let provenance: PriorProvenance =
        serde_json::from_str(&std::fs::read_to_string(&prov_path)?)?;
    let mut latents = Vec::with_capacity(provenance.count);
    for i in 0..provenance.count {
        let path = dir.join(format!("{i}.png"));
        if !path.is_file() {
            return Err(Error::validation(format!(
                "prior set for {class:?} claims {} images but {} is missing",
                provenance.count,
                path.display()
            )));
        }
        let img = image::open(&path)?.to_rgb8();
        latents.push(latent_from_image(&img, latent)?);
    }
    Ok((latents, provenance))
}
