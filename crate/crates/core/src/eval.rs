//! Sample generation and evaluation: subject fidelity (mean pairwise image
//! similarity against the training images), prompt fidelity (image-text
//! similarity with identifiers stripped), distribution distance (unbiased
//! kernel MMD with the cubic polynomial kernel), and sample diversity (mean
//! pairwise perceptual distance).
//!
//! Embeddings come from an [`EmbeddingProvider`]. The built-in provider is a
//! deterministic hand-rolled feature extractor, good enough to rank obvious
//! differences and to keep the whole pipeline self-contained; real encoder
//! embeddings can be supplied from sidecar files via [`PrecomputedEmbedder`].

use crate::conditioning::{strip_identifier_text, IdentifierToken, PromptBank, Vocabulary};
use crate::diffusion::{generate_latent, image_from_latent, Backbone, NoiseSchedule, ParamStore};
use crate::{Error, Result};
use image::RgbImage;
use ndarray::Array1;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn name(&self) -> &str;
    fn embed_image(&self, img: &RgbImage) -> Result<Array1<f64>>;
    fn embed_text(&self, text: &str) -> Result<Array1<f64>>;
}

pub trait PerceptualDistance {
    fn name(&self) -> &str;
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64>;
}

// ----- metrics -----

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation("embedding dimensions differ"));
    }
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::validation("zero-norm embedding"));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Subject fidelity: mean cosine over all (generated, reference) pairs.
pub fn image_set_similarity(gen: &[Array1<f64>], refs: &[Array1<f64>]) -> Result<f64> {
    if gen.is_empty() || refs.is_empty() {
        return Err(Error::validation("similarity needs both sets non-empty"));
    }
    let mut acc = 0.0;
    for g in gen {
        for r in refs {
            acc += cosine(g, r)?;
        }
    }
    Ok(acc / (gen.len() * refs.len()) as f64)
}

fn poly3(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let d = a.len() as f64;
    (a.dot(b) / d + 1.0).powi(3)
}

/// Unbiased squared MMD with the cubic polynomial kernel. Both sets need at
/// least two elements.
pub fn kernel_distance(x: &[Array1<f64>], y: &[Array1<f64>]) -> Result<f64> {
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        return Err(Error::validation(format!(
            "kernel distance needs two samples per set, got {m} and {n}"
        )));
    }
    let mut kxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += poly3(&x[i], &x[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kyy += poly3(&y[i], &y[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for xi in x {
        for yj in y {
            kxy += poly3(xi, yj);
        }
    }
    Ok(kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64 - 2.0 * kxy / (m * n) as f64)
}

/// Mean pairwise perceptual distance within a sample set.
pub fn sample_diversity(
    images: &[RgbImage],
    perceptual: &dyn PerceptualDistance,
) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::validation("diversity needs at least two samples"));
    }
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            acc += perceptual.distance(&images[i], &images[j])?;
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}

// ----- built-in providers -----

/// Deterministic color-and-layout features in a shared image/text space:
/// `[r, g, b, left, right, top, bottom, bias]`, L2-normalized. Text gets
/// there through a small lexicon of color and position words.
#[derive(Debug, Clone, Default)]
pub struct BuiltinEmbedder;

const BUILTIN_DIM: usize = 8;

impl BuiltinEmbedder {
    fn normalize(mut v: Array1<f64>) -> Array1<f64> {
        let n = v.dot(&v).sqrt();
        if n > 0.0 {
            v /= n;
        }
        v
    }
}

impl EmbeddingProvider for BuiltinEmbedder {
    fn dim(&self) -> usize {
        BUILTIN_DIM
    }

    fn name(&self) -> &str {
        "builtin"
    }

    fn embed_image(&self, img: &RgbImage) -> Result<Array1<f64>> {
        let (w, h) = (img.width() as f64, img.height() as f64);
        if w == 0.0 || h == 0.0 {
            return Err(Error::validation("empty image"));
        }
        let mut v = Array1::<f64>::zeros(BUILTIN_DIM);
        let mut lum_total = 0.0;
        let mut lum_left = 0.0;
        let mut lum_top = 0.0;
        for (x, y, px) in img.enumerate_pixels() {
            let [r, g, b] = px.0.map(|c| c as f64 / 255.0);
            v[0] += r;
            v[1] += g;
            v[2] += b;
            let lum = (r + g + b) / 3.0;
            lum_total += lum;
            if (x as f64) < w / 2.0 {
                lum_left += lum;
            }
            if (y as f64) < h / 2.0 {
                lum_top += lum;
            }
        }
        let count = w * h;
        v[0] /= count;
        v[1] /= count;
        v[2] /= count;
        let (left, top) = if lum_total > 0.0 {
            (lum_left / lum_total, lum_top / lum_total)
        } else {
            (0.5, 0.5)
        };
        v[3] = left;
        v[4] = 1.0 - left;
        v[5] = top;
        v[6] = 1.0 - top;
        v[7] = 1.0;
        Ok(Self::normalize(v))
    }

    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        let mut v = Array1::<f64>::zeros(BUILTIN_DIM);
        for word in text.split_whitespace() {
            let word = word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            let rgb: Option<[f64; 3]> = match word.as_str() {
                "red" => Some([1.0, 0.0, 0.0]),
                "green" => Some([0.0, 1.0, 0.0]),
                "blue" => Some([0.0, 0.0, 1.0]),
                "yellow" => Some([0.7, 0.7, 0.0]),
                "magenta" | "pink" => Some([0.7, 0.0, 0.7]),
                "cyan" => Some([0.0, 0.7, 0.7]),
                "orange" => Some([0.8, 0.5, 0.0]),
                "white" | "bright" => Some([0.6, 0.6, 0.6]),
                "black" | "dark" => Some([-0.6, -0.6, -0.6]),
                _ => None,
            };
            if let Some([r, g, b]) = rgb {
                v[0] += r;
                v[1] += g;
                v[2] += b;
            }
            match word.as_str() {
                "left" => v[3] += 0.5,
                "right" => v[4] += 0.5,
                "top" | "above" => v[5] += 0.5,
                "bottom" | "under" => v[6] += 0.5,
                _ => {}
            }
        }
        v[7] = 1.0;
        Ok(Self::normalize(v))
    }
}

/// Perceptual distance as mean absolute difference over 8x8 block-averaged
/// RGB; crude, monotone in visible difference, and exactly zero for
/// identical images.
#[derive(Debug, Clone, Default)]
pub struct BlockPerceptual;

const BLOCK_GRID: usize = 8;

fn block_means(img: &RgbImage) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut sums = vec![0.0; BLOCK_GRID * BLOCK_GRID * 3];
    let mut counts = vec![0.0; BLOCK_GRID * BLOCK_GRID];
    for (x, y, px) in img.enumerate_pixels() {
        let bx = (x as usize * BLOCK_GRID / w.max(1)).min(BLOCK_GRID - 1);
        let by = (y as usize * BLOCK_GRID / h.max(1)).min(BLOCK_GRID - 1);
        let cell = by * BLOCK_GRID + bx;
        for ch in 0..3 {
            sums[cell * 3 + ch] += px.0[ch] as f64 / 255.0;
        }
        counts[cell] += 1.0;
    }
    for cell in 0..BLOCK_GRID * BLOCK_GRID {
        if counts[cell] > 0.0 {
            for ch in 0..3 {
                sums[cell * 3 + ch] /= counts[cell];
            }
        }
    }
    sums
}

impl PerceptualDistance for BlockPerceptual {
    fn name(&self) -> &str {
        "block8"
    }

    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        let (ma, mb) = (block_means(a), block_means(b));
        let d = ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ma.len() as f64;
        Ok(d)
    }
}

/// Content hash that identifies an image independent of its path.
pub fn image_key(img: &RgbImage) -> String {
    let mut hasher = Sha256::new();
    hasher.update(img.width().to_le_bytes());
    hasher.update(img.height().to_le_bytes());
    hasher.update(img.as_raw());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct PrecomputedFile {
    dim: usize,
    #[serde(default)]
    images: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    texts: BTreeMap<String, Vec<f64>>,
}

/// Embeddings computed offline by a real encoder: images are looked up by
/// content hash, texts by exact string.
pub struct PrecomputedEmbedder {
    dim: usize,
    images: BTreeMap<String, Array1<f64>>,
    texts: BTreeMap<String, Array1<f64>>,
}

impl PrecomputedEmbedder {
    pub fn load_json(path: &Path) -> Result<Self> {
        let file: PrecomputedFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let convert = |map: BTreeMap<String, Vec<f64>>, what: &str| -> Result<BTreeMap<String, Array1<f64>>> {
            map.into_iter()
                .map(|(k, v)| {
                    if v.len() != file.dim {
                        return Err(Error::validation(format!(
                            "{what} entry {k:?} has {} values, header says {}",
                            v.len(),
                            file.dim
                        )));
                    }
                    Ok((k, Array1::from_vec(v)))
                })
                .collect()
        };
        Ok(PrecomputedEmbedder {
            dim: file.dim,
            images: convert(file.images, "image")?,
            texts: convert(file.texts, "text")?,
        })
    }
}

impl EmbeddingProvider for PrecomputedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        "precomputed"
    }

    fn embed_image(&self, img: &RgbImage) -> Result<Array1<f64>> {
        let key = image_key(img);
        self.images
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::validation(format!("no precomputed embedding for image {key}")))
    }

    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        self.texts
            .get(text)
            .cloned()
            .ok_or_else(|| Error::validation(format!("no precomputed embedding for text {text:?}")))
    }
}

// ----- sample generation -----

/// `base/runs/<run>/<concept>/<prompt_idx>/<sample_idx>.png`
pub fn sample_path(
    base: &Path,
    run: &str,
    concept: &str,
    prompt_idx: usize,
    sample_idx: usize,
) -> PathBuf {
    base.join("runs").join(run).join(concept).join(prompt_idx.to_string()).join(format!(
        "{sample_idx}.png"
    ))
}

/// A concept to sample: its identifier must already be registered in the
/// vocabulary the prompts are tokenized with.
#[derive(Debug, Clone)]
pub struct SampleSubject {
    pub concept_id: String,
    pub class: String,
    pub identifier: IdentifierToken,
}

#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub concept_id: String,
    pub prompt_idx: usize,
    pub sample_idx: usize,
    pub prompt_text: String,
    pub path: PathBuf,
    pub image: RgbImage,
}

/// Sample every single-subject template for every subject, writing images
/// into the run layout. Deterministic for a fixed seed: subjects, prompts,
/// and samples are generated in order from one seeded stream.
#[allow(clippy::too_many_arguments)]
pub fn generate_samples(
    backbone: &dyn Backbone,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    bank: &PromptBank,
    subjects: &[SampleSubject],
    samples_per_prompt: usize,
    seed: u64,
    base: &Path,
    run: &str,
) -> Result<Vec<GeneratedSample>> {
    if samples_per_prompt == 0 {
        return Err(Error::validation("samples_per_prompt must be positive"));
    }
    if subjects.is_empty() {
        return Err(Error::validation("no subjects to sample"));
    }
    let params = store.bind_frozen();
    let spec = backbone.latent();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for subject in subjects {
        for (prompt_idx, template) in bank.singles().iter().enumerate() {
            let rendered = crate::conditioning::render_prompt(
                vocab,
                template,
                &[(&subject.identifier, subject.class.as_str())],
            )?;
            let text =
                crate::conditioning::encode_prompt(backbone, &params, &rendered.token_ids)?;
            for sample_idx in 0..samples_per_prompt {
                let latent = generate_latent(backbone, &params, schedule, &text, &mut rng)?;
                let image = image_from_latent(&latent, &spec)?;
                let path = sample_path(base, run, &subject.concept_id, prompt_idx, sample_idx);
                std::fs::create_dir_all(path.parent().expect("sample path has a parent"))?;
                image.save(&path)?;
                out.push(GeneratedSample {
                    concept_id: subject.concept_id.clone(),
                    prompt_idx,
                    sample_idx,
                    prompt_text: rendered.text.clone(),
                    path,
                    image,
                });
            }
        }
    }
    Ok(out)
}

// ----- reports -----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptEval {
    pub prompt_idx: usize,
    pub prompt: String,
    pub scored_text: String,
    pub samples: usize,
    pub image_similarity: f64,
    pub text_similarity: f64,
    pub diversity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptEval {
    pub concept_id: String,
    pub prompts: Vec<PromptEval>,
    pub mean_image_similarity: f64,
    pub mean_text_similarity: f64,
    pub mean_diversity: f64,
    /// Unbiased kernel distance to the reference set; absent when either
    /// side has fewer than two images.
    pub kernel_distance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub run: String,
    pub embedder: String,
    pub perceptual: String,
    pub concepts: Vec<ConceptEval>,
}

/// Score generated samples against per-concept reference images.
/// `identifier_surfaces` are removed from prompts before text scoring.
pub fn evaluate(
    run: &str,
    samples: &[GeneratedSample],
    refs: &BTreeMap<String, Vec<RgbImage>>,
    identifier_surfaces: &[String],
    embedder: &dyn EmbeddingProvider,
    perceptual: &dyn PerceptualDistance,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::validation("no samples to evaluate"));
    }
    let surfaces: Vec<&str> = identifier_surfaces.iter().map(|s| s.as_str()).collect();

    let mut by_concept: BTreeMap<&str, BTreeMap<usize, Vec<&GeneratedSample>>> = BTreeMap::new();
    for s in samples {
        by_concept
            .entry(&s.concept_id)
            .or_default()
            .entry(s.prompt_idx)
            .or_default()
            .push(s);
    }

    let mut concepts = Vec::new();
    for (concept_id, by_prompt) in by_concept {
        let ref_images = refs.get(concept_id).ok_or_else(|| {
            Error::validation(format!("no reference images for concept {concept_id:?}"))
        })?;
        if ref_images.is_empty() {
            return Err(Error::validation(format!(
                "empty reference set for concept {concept_id:?}"
            )));
        }
        let ref_embeds: Vec<Array1<f64>> =
            ref_images.iter().map(|i| embedder.embed_image(i)).collect::<Result<_>>()?;

        let mut prompts = Vec::new();
        let mut all_gen_embeds = Vec::new();
        for (prompt_idx, group) in by_prompt {
            let images: Vec<RgbImage> = group.iter().map(|s| s.image.clone()).collect();
            let embeds: Vec<Array1<f64>> =
                images.iter().map(|i| embedder.embed_image(i)).collect::<Result<_>>()?;
            let scored_text = strip_identifier_text(&group[0].prompt_text, &surfaces);
            let text_embed = embedder.embed_text(&scored_text)?;
            let image_similarity = image_set_similarity(&embeds, &ref_embeds)?;
            let text_similarity = {
                let mut acc = 0.0;
                for e in &embeds {
                    acc += cosine(e, &text_embed)?;
                }
                acc / embeds.len() as f64
            };
            let diversity = if images.len() >= 2 {
                sample_diversity(&images, perceptual)?
            } else {
                0.0
            };
            prompts.push(PromptEval {
                prompt_idx,
                prompt: group[0].prompt_text.clone(),
                scored_text,
                samples: group.len(),
                image_similarity,
                text_similarity,
                diversity,
            });
            all_gen_embeds.extend(embeds);
        }

        let mean = |f: fn(&PromptEval) -> f64| {
            prompts.iter().map(f).sum::<f64>() / prompts.len() as f64
        };
        let kernel = if all_gen_embeds.len() >= 2 && ref_embeds.len() >= 2 {
            Some(kernel_distance(&all_gen_embeds, &ref_embeds)?)
        } else {
            None
        };
        concepts.push(ConceptEval {
            concept_id: concept_id.to_string(),
            mean_image_similarity: mean(|p| p.image_similarity),
            mean_text_similarity: mean(|p| p.text_similarity),
            mean_diversity: mean(|p| p.diversity),
            kernel_distance: kernel,
            prompts,
        });
    }

    Ok(EvalReport {
        run: run.to_string(),
        embedder: embedder.name().to_string(),
        perceptual: perceptual.name().to_string(),
        concepts,
    })
}

pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "concept,prompt_idx,prompt,samples,image_similarity,text_similarity,diversity,kernel_distance"
    )?;
    for c in &report.concepts {
        for p in &c.prompts {
            writeln!(
                out,
                "{},{},\"{}\",{},{:.6},{:.6},{:.6},",
                c.concept_id, p.prompt_idx, p.prompt, p.samples, p.image_similarity,
                p.text_similarity, p.diversity
            )?;
        }
        writeln!(
            out,
            "{},summary,,,{:.6},{:.6},{:.6},{}",
            c.concept_id,
            c.mean_image_similarity,
            c.mean_text_similarity,
            c.mean_diversity,
            c.kernel_distance.map(|k| format!("{k:.6}")).unwrap_or_default()
        )?;
    }
    Ok(())
}

pub fn write_report_markdown(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# Evaluation: {}\n", report.run)?;
    writeln!(out, "Embedder: {}, perceptual distance: {}\n", report.embedder, report.perceptual)?;
    for c in &report.concepts {
        writeln!(out, "## {}\n", c.concept_id)?;
        writeln!(out, "| prompt | samples | image sim | text sim | diversity |")?;
        writeln!(out, "|---|---|---|---|---|")?;
        for p in &c.prompts {
            writeln!(
                out,
                "| {} | {} | {:.4} | {:.4} | {:.4} |",
                p.prompt, p.samples, p.image_similarity, p.text_similarity, p.diversity
            )?;
        }
        let kid = c
            .kernel_distance
            .map(|k| format!("{k:.6}"))
            .unwrap_or_else(|| "n/a (needs two images per side)".to_string());
        writeln!(
            out,
            "\nMeans: image {:.4}, text {:.4}, diversity {:.4}. Kernel distance: {kid}\n",
            c.mean_image_similarity, c.mean_text_similarity, c.mean_diversity
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn flat_image(w: u32, h: u32, rgb: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb(rgb))
    }

    #[test]
    fn cosine_basics() {
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[0.0, 1.0]);
        assert_eq!(cosine(&a, &a.clone()).unwrap(), 1.0);
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
        assert!(cosine(&a, &arr1(&[0.0, 0.0])).is_err());
        assert!(cosine(&a, &arr1(&[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn set_similarity_hand_value() {
        // gen {[1,0]} vs refs {[1,0],[0,1]}: (1 + 0) / 2
        let gen = vec![arr1(&[1.0, 0.0])];
        let refs = vec![arr1(&[1.0, 0.0]), arr1(&[0.0, 1.0])];
        assert!((image_set_similarity(&gen, &refs).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kernel_distance_hand_values() {
        // X = {[1],[1]}, Y = {[0],[0]}: kxx = 8, kyy = 1, kxy = 1 -> 7
        let x = vec![arr1(&[1.0]), arr1(&[1.0])];
        let y = vec![arr1(&[0.0]), arr1(&[0.0])];
        assert!((kernel_distance(&x, &y).unwrap() - 7.0).abs() < 1e-12);
        assert!(kernel_distance(&y, &y).unwrap().abs() < 1e-12);
        assert!(kernel_distance(&x, &[arr1(&[0.0])]).is_err());
    }

    #[test]
    fn builtin_embedder_aligns_colors_across_modalities() {
        let e = BuiltinEmbedder;
        let red = e.embed_image(&flat_image(8, 8, [220, 10, 10])).unwrap();
        let blue = e.embed_image(&flat_image(8, 8, [10, 10, 220])).unwrap();
        let red_text = e.embed_text("a photo of a red square").unwrap();
        let blue_text = e.embed_text("a photo of a blue square").unwrap();
        assert!(cosine(&red, &red_text).unwrap() > cosine(&red, &blue_text).unwrap());
        assert!(cosine(&blue, &blue_text).unwrap() > cosine(&blue, &red_text).unwrap());
        assert!((red.dot(&red) - 1.0).abs() < 1e-12, "embeddings are normalized");
    }

    #[test]
    fn identical_images_have_unit_similarity_and_zero_diversity() {
        let e = BuiltinEmbedder;
        let imgs = vec![flat_image(8, 8, [50, 100, 150]), flat_image(8, 8, [50, 100, 150])];
        let embeds: Vec<_> = imgs.iter().map(|i| e.embed_image(i).unwrap()).collect();
        assert!((image_set_similarity(&embeds[..1], &embeds[1..]).unwrap() - 1.0).abs() < 1e-12);
        let d = sample_diversity(&imgs, &BlockPerceptual).unwrap();
        assert_eq!(d, 0.0);
        let different = vec![flat_image(8, 8, [0, 0, 0]), flat_image(8, 8, [255, 255, 255])];
        assert!(sample_diversity(&different, &BlockPerceptual).unwrap() > 0.5);
    }

    #[test]
    fn precomputed_embedder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = flat_image(4, 4, [1, 2, 3]);
        let key = image_key(&img);
        let json = serde_json::json!({
            "dim": 2,
            "images": { key: [0.6, 0.8] },
            "texts": { "a photo": [1.0, 0.0] },
        });
        let path = dir.path().join("embeds.json");
        std::fs::write(&path, serde_json::to_string(&json).unwrap()).unwrap();
        let p = PrecomputedEmbedder::load_json(&path).unwrap();
        assert_eq!(p.dim(), 2);
        assert_eq!(p.embed_image(&img).unwrap(), arr1(&[0.6, 0.8]));
        assert_eq!(p.embed_text("a photo").unwrap(), arr1(&[1.0, 0.0]));
        assert!(p.embed_image(&flat_image(4, 4, [9, 9, 9])).is_err());
        assert!(p.embed_text("unknown").is_err());

        let bad = serde_json::json!({"dim": 3, "images": { "k": [1.0] }});
        std::fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(PrecomputedEmbedder::load_json(&path).is_err());
    }

    #[test]
    fn image_key_depends_on_content_and_size() {
        let a = flat_image(4, 4, [1, 2, 3]);
        let b = flat_image(4, 4, [1, 2, 4]);
        let c = flat_image(2, 8, [1, 2, 3]);
        assert_eq!(image_key(&a), image_key(&a.clone()));
        assert_ne!(image_key(&a), image_key(&b));
        assert_ne!(image_key(&a), image_key(&c));
    }

    #[test]
    fn run_layout_paths() {
        let p = sample_path(Path::new("/out"), "r1", "sq", 3, 7);
        assert_eq!(p, Path::new("/out/runs/r1/sq/3/7.png"));
    }

    #[test]
    fn evaluate_groups_and_reports() {
        let mk = |rgb| flat_image(8, 8, rgb);
        let samples = vec![
            GeneratedSample {
                concept_id: "sq".into(),
                prompt_idx: 0,
                sample_idx: 0,
                prompt_text: "a photo of a <v1> square".into(),
                path: PathBuf::from("0.png"),
                image: mk([200, 10, 10]),
            },
            GeneratedSample {
                concept_id: "sq".into(),
                prompt_idx: 0,
                sample_idx: 1,
                prompt_text: "a photo of a <v1> square".into(),
                path: PathBuf::from("1.png"),
                image: mk([180, 30, 10]),
            },
        ];
        let mut refs = BTreeMap::new();
        refs.insert("sq".to_string(), vec![mk([210, 15, 5]), mk([190, 20, 20])]);
        let report = evaluate(
            "test",
            &samples,
            &refs,
            &["<v1>".to_string()],
            &BuiltinEmbedder,
            &BlockPerceptual,
        )
        .unwrap();
        assert_eq!(report.concepts.len(), 1);
        let c = &report.concepts[0];
        assert_eq!(c.prompts.len(), 1);
        assert_eq!(c.prompts[0].scored_text, "a photo of a square");
        assert!(c.prompts[0].image_similarity > 0.9, "same-color sets align");
        assert!(c.kernel_distance.is_some());

        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("report.csv");
        let md_path = dir.path().join("report.md");
        write_report_csv(&report, &csv_path).unwrap();
        write_report_markdown(&report, &md_path).unwrap();
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert!(csv.lines().count() >= 3);
        assert!(csv.contains("sq,0,"));
        let md = std::fs::read_to_string(&md_path).unwrap();
        assert!(md.contains("## sq"));

        let missing = evaluate(
            "test",
            &samples,
            &BTreeMap::new(),
            &[],
            &BuiltinEmbedder,
            &BlockPerceptual,
        );
        assert!(missing.is_err());
    }
}
