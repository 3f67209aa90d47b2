//! Pre-image to labeled synthetic post-image: mask, tokenize, regenerate the
//! masked tokens under a prompt, decode N candidates and keep the one the
//! scorer ranks highest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use aftermath_nn::Scalar;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::maskgen::{DecodeJob, DecodeSchedule, GeneratorModel};
use crate::masking::{apply_mask, downsample_mask, sample_mask, EditMask, TokenMask};
use crate::prompts::{build_pool_named, sample_prompt, tokenize_prompt, Prompt, PromptPool};
use crate::raster::Image;
use crate::scorer::{argmax_lowest, ScorerModel};
use crate::seed::{derive_seed, rng, sha256_hex};
use crate::tokens::TokenGrid;
use crate::toyworld::{layout_path, DatasetManifest, LabeledPair, ManifestEntry, Provenance, Split, TargetExample};
use crate::vqcodec::{quantize, CodecModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub num_candidates: usize,
    pub schedule: DecodeSchedule,
    /// Edit patch side as a fraction of the image side.
    pub patch_fraction: f64,
    /// Built-in pool name or path to a pool JSON file.
    pub damaged_pool: String,
    pub undamaged_pool: String,
    pub damaged_fraction: f64,
    pub volume_fraction: f64,
    pub compose: Compose,
    pub seed: u64,
}

/// How a decoded candidate becomes the output image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compose {
    /// The decoded image as is.
    Decoded,
    /// Inside masked token cells, the pre-image plus the change the edit made
    /// to the decoded reconstruction; elsewhere the pre-image.
    #[default]
    Residual,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            num_candidates: 4,
            schedule: DecodeSchedule::default(),
            patch_fraction: 0.5,
            damaged_pool: "toy_hurricane_damaged".into(),
            undamaged_pool: "toy_undamaged".into(),
            damaged_fraction: 0.5,
            volume_fraction: 1.0,
            compose: Compose::Residual,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates == 0 {
            return Err(config("num_candidates must be at least 1"));
        }
        for (name, v) in [("patch_fraction", self.patch_fraction), ("volume_fraction", self.volume_fraction)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(config(format!("{name} {v} outside (0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.damaged_fraction) {
            return Err(config(format!("damaged_fraction {} outside [0, 1]", self.damaged_fraction)));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn pools(&self) -> Result<(PromptPool, PromptPool)> {
        let d = resolve_pool(&self.damaged_pool)?;
        let u = resolve_pool(&self.undamaged_pool)?;
        if d.label() != 1 || u.label() != 0 {
            return Err(config(format!("pool {} must be damaged and {} undamaged", d.name, u.name)));
        }
        Ok((d, u))
    }
}

/// A built-in pool kind name, or else a pool JSON file.
pub fn resolve_pool(spec: &str) -> Result<PromptPool> {
    match build_pool_named(spec) {
        Ok(p) => Ok(p),
        Err(_) if Path::new(spec).exists() => PromptPool::load(Path::new(spec)),
        Err(e) => Err(e),
    }
}

/// The three trained models, checked to share one codec.
pub struct Models<'a, T: Scalar> {
    pub codec: &'a CodecModel<T>,
    pub generator: &'a GeneratorModel<T>,
    pub scorer: &'a ScorerModel<T>,
}

impl<'a, T: Scalar> Models<'a, T> {
    pub fn new(codec: &'a CodecModel<T>, generator: &'a GeneratorModel<T>, scorer: &'a ScorerModel<T>) -> Result<Self> {
        let (have, want) = (codec.hash(), &generator.metadata.codec_hash);
        if &have != want {
            return Err(config(format!("generator was trained on codec {want}, but codec {have} was supplied")));
        }
        let gc = generator.config();
        if gc.codebook_size != codec.config().codebook_size || gc.grid != codec.config().grid() {
            return Err(config("generator and codec disagree on token grid shape"));
        }
        Ok(Self { codec, generator, scorer })
    }

    pub fn hashes(&self) -> ModelHashes {
        ModelHashes { codec: self.codec.hash(), generator: self.generator.hash(), scorer: self.scorer.hash() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHashes {
    pub codec: String,
    pub generator: String,
    pub scorer: String,
}

/// What was done to one pre-image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub mask: EditMask,
    pub prompt: String,
    pub label: u8,
    pub scores: Vec<f64>,
    pub candidate_index: usize,
    pub seed: u64,
    /// Tokens of the pre-image and of the selected candidate.
    pub source_tokens: TokenGrid,
    pub tokens: TokenGrid,
}

/// One pre-image to edit under one prompt.
pub struct GenerationJob<'a> {
    pub pre: &'a Image,
    pub prompt: &'a Prompt,
    pub seed: u64,
}

fn patch_side(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).max(1)
}

/// Runs the pipeline for one pre-image.
pub fn generate_post_image<T: Scalar>(
    pre: &Image,
    prompt: &Prompt,
    cfg: &SynthesisConfig,
    models: &Models<'_, T>,
    seed: u64,
) -> Result<(Image, f64, GenerationRecord)> {
    let job = GenerationJob { pre, prompt, seed };
    Ok(generate_batch(&[job], cfg, models)?.remove(0))
}

/// The pipeline for several pre-images at once. Every job draws only from
/// its own seed, so results do not depend on how jobs are grouped.
pub fn generate_batch<T: Scalar>(
    jobs: &[GenerationJob<'_>],
    cfg: &SynthesisConfig,
    models: &Models<'_, T>,
) -> Result<Vec<(Image, f64, GenerationRecord)>> {
    cfg.validate()?;
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let codec = models.codec;
    let factor = codec.config().factor;
    let n = cfg.num_candidates;
    let mut masks = Vec::with_capacity(jobs.len());
    for j in jobs {
        let (h, w) = (j.pre.height(), j.pre.width());
        let mut r = rng(derive_seed(j.seed, "mask"));
        masks.push(sample_mask(h, w, patch_side(h, cfg.patch_fraction), patch_side(w, cfg.patch_fraction), &mut r)?);
    }
    let pres: Vec<&Image> = jobs.iter().map(|j| j.pre).collect();
    let book = codec.codebook();
    let features = codec.encode_batch(&pres)?;
    let mut originals = Vec::with_capacity(jobs.len());
    let mut token_masks = Vec::with_capacity(jobs.len());
    let mut masked = Vec::with_capacity(jobs.len());
    for (f, m) in features.iter().zip(&masks) {
        let tokens = quantize(f, &book)?;
        let tm = downsample_mask(m, factor)?;
        masked.push(apply_mask(&tokens, &tm)?);
        originals.push(tokens);
        token_masks.push(tm);
    }
    let gen_prompts: Vec<Vec<u32>> =
        jobs.iter().map(|j| tokenize_prompt(&j.prompt.text, models.generator.vocabulary())).collect();
    let mut decode = Vec::with_capacity(jobs.len() * n);
    for (i, j) in jobs.iter().enumerate() {
        for c in 0..n {
            decode.push(DecodeJob {
                grid: &masked[i],
                prompt: &gen_prompts[i],
                seed: derive_seed(j.seed, &format!("candidate/{c}")),
            });
        }
    }
    let grids = models.generator.decode_jobs(&decode, &cfg.schedule)?;
    let mut grid_refs: Vec<&TokenGrid> = grids.iter().collect();
    if cfg.compose == Compose::Residual {
        grid_refs.extend(originals.iter());
    }
    let mut images = codec.decode_batch(&grid_refs)?.into_iter();
    let decoded: Vec<Vec<Image>> = (0..jobs.len()).map(|_| images.by_ref().take(n).collect()).collect();
    let recons: Vec<Image> = images.collect();

    let mut out = Vec::with_capacity(jobs.len());
    for (i, (j, mask)) in jobs.iter().zip(masks).enumerate() {
        let candidates: Vec<Image> = match cfg.compose {
            Compose::Decoded => decoded[i].clone(),
            Compose::Residual => {
                decoded[i].iter().map(|c| residual(j.pre, c, &recons[i], &token_masks[i])).collect()
            }
        };
        let score_prompt = tokenize_prompt(&j.prompt.text, models.scorer.vocabulary());
        let (index, scores) = if n == 1 {
            (0, vec![models.scorer.similarity(&candidates[0], &score_prompt)?])
        } else {
            let refs: Vec<&Image> = candidates.iter().collect();
            let scores = models.scorer.scores(&refs, &score_prompt)?;
            (argmax_lowest(&scores).expect("nonempty"), scores)
        };
        let score = scores[index];
        let image = candidates.into_iter().nth(index).expect("index in range");
        let record = GenerationRecord {
            mask,
            prompt: j.prompt.text.clone(),
            label: j.prompt.label,
            scores,
            candidate_index: index,
            seed: j.seed,
            source_tokens: originals[i].clone(),
            tokens: grids[i * n + index].clone(),
        };
        out.push((image, score, record));
    }
    Ok(out)
}

/// `pre + candidate - recon` inside masked token cells, `pre` elsewhere.
fn residual(pre: &Image, candidate: &Image, recon: &Image, mask: &TokenMask) -> Image {
    let mut out = pre.clone();
    for cell in mask.ones() {
        let (r0, c0) = ((cell / mask.cols) * mask.factor, (cell % mask.cols) * mask.factor);
        for y in r0..r0 + mask.factor {
            for x in c0..c0 + mask.factor {
                let (p, c, r) = (pre.get(y, x), candidate.get(y, x), recon.get(y, x));
                let v = std::array::from_fn(|k| (p[k] as i32 + c[k] as i32 - r[k] as i32).clamp(0, 255) as u8);
                out.set(y, x, v);
            }
        }
    }
    out
}

/// A target pre-image with the identity used in manifests.
#[derive(Clone, Debug)]
pub struct SynthesisTarget {
    pub id: String,
    pub pre_path: String,
    pub example: TargetExample,
}

#[derive(Clone, Debug)]
pub struct SyntheticEntry {
    /// Position of the source image in the target list.
    pub target_index: usize,
    pub id: String,
    pub pre_path: String,
    pub pre: Image,
    pub post: Image,
    pub label: u8,
    pub score: f64,
    pub record: GenerationRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisProvenance {
    pub models: ModelHashes,
    pub config: SynthesisConfig,
    pub config_hash: String,
    pub domain: String,
    /// Number of target images offered, before volume selection.
    pub pool_size: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub entries: Vec<SyntheticEntry>,
    pub provenance: SynthesisProvenance,
}

/// Target positions in selection order. Any volume fraction takes a prefix,
/// so smaller volumes are subsets of larger ones.
pub fn selection_order(count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng(derive_seed(seed, "volume")));
    order
}

/// Whether the `k`-th selected target gets a damaged prompt. Every prefix of
/// length `m` holds `floor(m * fraction)` damaged assignments.
pub fn assign_damaged(k: usize, fraction: f64) -> bool {
    let at = |m: usize| (m as f64 * fraction + 1e-9).floor() as usize;
    at(k + 1) > at(k)
}

pub fn selected_count(total: usize, volume_fraction: f64) -> usize {
    ((total as f64 * volume_fraction).round() as usize).min(total)
}

const CHUNK: usize = 8;

pub fn synthesize_dataset<T: Scalar>(
    targets: &[SynthesisTarget],
    cfg: &SynthesisConfig,
    models: &Models<'_, T>,
) -> Result<SyntheticDataset> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(config("no target images to synthesize from"));
    }
    let (damaged, undamaged) = cfg.pools()?;
    let order = selection_order(targets.len(), cfg.seed);
    let count = selected_count(targets.len(), cfg.volume_fraction);
    let mut chosen: Vec<(usize, bool)> =
        order[..count].iter().enumerate().map(|(k, &i)| (i, assign_damaged(k, cfg.damaged_fraction))).collect();
    chosen.sort_unstable();

    let mut plans = Vec::with_capacity(chosen.len());
    for &(i, dmg) in &chosen {
        let t = &targets[i];
        let pool = if dmg { &damaged } else { &undamaged };
        let prompt = sample_prompt(pool, &mut rng(derive_seed(cfg.seed, &format!("prompt/{}", t.id)))).clone();
        plans.push((i, prompt, derive_seed(cfg.seed, &format!("target/{}", t.id))));
    }
    let mut entries = Vec::with_capacity(plans.len());
    for chunk in plans.chunks(CHUNK) {
        let jobs: Vec<GenerationJob<'_>> = chunk
            .iter()
            .map(|(i, prompt, seed)| GenerationJob { pre: &targets[*i].example.pre, prompt, seed: *seed })
            .collect();
        for ((i, _, _), (post, score, record)) in chunk.iter().zip(generate_batch(&jobs, cfg, models)?) {
            let t = &targets[*i];
            entries.push(SyntheticEntry {
                target_index: *i,
                id: t.id.clone(),
                pre_path: t.pre_path.clone(),
                pre: t.example.pre.clone(),
                post,
                label: record.label,
                score,
                record,
            });
        }
    }
    let domain = targets[0].example.domain.clone();
    Ok(SyntheticDataset {
        entries,
        provenance: SynthesisProvenance {
            models: models.hashes(),
            config: cfg.clone(),
            config_hash: cfg.hash(),
            domain,
            pool_size: targets.len(),
        },
    })
}

impl SyntheticDataset {
    /// The entries a smaller volume fraction would have produced from the
    /// same targets and seed.
    pub fn subset(&self, volume_fraction: f64) -> Result<SyntheticDataset> {
        if !(volume_fraction > 0.0 && volume_fraction <= self.provenance.config.volume_fraction) {
            return Err(config(format!(
                "volume {volume_fraction} must lie in (0, {}]",
                self.provenance.config.volume_fraction
            )));
        }
        let order = selection_order(self.provenance.pool_size, self.provenance.config.seed);
        let keep: std::collections::BTreeSet<usize> =
            order[..selected_count(self.provenance.pool_size, volume_fraction)].iter().copied().collect();
        let mut provenance = self.provenance.clone();
        provenance.config.volume_fraction = volume_fraction;
        provenance.config_hash = provenance.config.hash();
        Ok(SyntheticDataset {
            entries: self.entries.iter().filter(|e| keep.contains(&e.target_index)).cloned().collect(),
            provenance,
        })
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn pairs(&self) -> Vec<LabeledPair> {
        self.entries
            .iter()
            .map(|e| LabeledPair {
                pre: e.pre.clone(),
                post: e.post.clone(),
                label: e.label,
                domain: self.provenance.domain.clone(),
                provenance: Provenance::Synthetic,
            })
            .collect()
    }

    /// Manifest in the dataset schema, with generation details as extra
    /// keys. Pre paths point at the original target images.
    pub fn manifest(&self, root: &Path) -> DatasetManifest {
        let domain = &self.provenance.domain;
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let mut extra = BTreeMap::new();
                extra.insert("prompt".into(), e.record.prompt.clone().into());
                extra.insert("score".into(), e.score.into());
                extra.insert("scores".into(), serde_json::json!(e.record.scores));
                extra.insert("candidate_index".into(), e.record.candidate_index.into());
                extra.insert("mask".into(), serde_json::to_value(&e.record.mask).expect("mask serializes"));
                extra.insert("generation_seed".into(), e.record.seed.into());
                extra.insert("models".into(), serde_json::to_value(&self.provenance.models).expect("hashes serialize"));
                extra.insert("synthesis_seed".into(), self.provenance.config.seed.into());
                ManifestEntry {
                    id: e.id.clone(),
                    pre_path: e.pre_path.clone(),
                    post_path: Some(layout_path(domain, Split::Train, &format!("{}-syn", e.id), "post")),
                    label: Some(e.label),
                    domain: domain.clone(),
                    split: Split::Train,
                    provenance: Some(Provenance::Synthetic),
                    scene_seed: None,
                    extra,
                }
            })
            .collect();
        DatasetManifest { root: root.to_path_buf(), entries }
    }

    /// Writes the generated posts under `root` and the manifest to
    /// `root/synthetic.jsonl`. Pre-images are referenced, not copied.
    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let manifest = self.manifest(root);
        for (e, m) in self.entries.iter().zip(&manifest.entries) {
            e.post.save_png(&root.join(m.post_path.as_deref().expect("synthetic entries have posts")))?;
        }
        let path = root.join("synthetic.jsonl");
        manifest.write_jsonl(&path)?;
        let prov = root.join("provenance.json");
        std::fs::write(&prov, serde_json::to_string_pretty(&self.provenance)?)
            .map_err(|e| crate::error::Error::io(&prov, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn damaged_assignment_is_stratified() {
        let labels: Vec<bool> = (0..100).map(|k| assign_damaged(k, 0.5)).collect();
        assert_eq!(labels.iter().filter(|&&d| d).count(), 50);
        for m in 1..100 {
            assert_eq!(labels[..m].iter().filter(|&&d| d).count(), m / 2);
        }
        assert!((0..10).all(|k| !assign_damaged(k, 0.0)));
        assert!((0..10).all(|k| assign_damaged(k, 1.0)));
    }

    #[test]
    fn volume_counts_and_nesting() {
        assert_eq!(selected_count(1000, 0.25), 250);
        let order = selection_order(1000, 7);
        let quarter: std::collections::BTreeSet<_> = order[..selected_count(1000, 0.25)].iter().collect();
        let half: std::collections::BTreeSet<_> = order[..selected_count(1000, 0.5)].iter().collect();
        assert!(quarter.is_subset(&half) && quarter.len() < half.len());
    }
}
