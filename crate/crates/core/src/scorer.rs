//! Image-text similarity used to rank generated candidates.
//!
//! A small convolutional image encoder and a bag-of-words text encoder map
//! into a shared unit sphere; the score is the cosine of the two embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use aftermath_nn::layers::{Conv2d, Linear};
use aftermath_nn::{Adam, AdamConfig, Graph, ParamId, ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{config, contract, Result};
use crate::prompts::{Vocabulary, PAD_ID, PROMPT_LEN};
use crate::raster::{batch_tensor, Image};
use crate::seed::{derive_seed, rng, sha256_hex};
use crate::train::{finite_loss, scheduled_lr};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub image_size: usize,
    /// Channels of the stride-2 convolutions.
    pub channels: Vec<usize>,
    pub word_dim: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: vec![16, 32, 32],
            word_dim: 64,
            embed_dim: 64,
            temperature: 0.1,
            learning_rate: 2e-3,
            batch_size: 16,
            iterations: 600,
            seed: 0,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        let down = 1usize << self.channels.len();
        if self.channels.is_empty() || self.image_size % down != 0 || self.channels.contains(&0) {
            return Err(config(format!(
                "scorer channels {:?} must halve image size {} evenly",
                self.channels, self.image_size
            )));
        }
        if self.embed_dim == 0 || self.word_dim == 0 || self.batch_size < 2 {
            return Err(config("scorer needs positive dimensions and a batch of at least two"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(config(format!("scorer temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerMetadata {
    pub config: ScorerConfig,
    pub config_hash: String,
    pub vocabulary: Vocabulary,
    pub vocab_hash: String,
    pub loss_curve: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Layers {
    convs: Vec<Conv2d>,
    image_proj: Linear,
    words: ParamId,
    text_proj: Linear,
}

impl Layers {
    fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, c: &ScorerConfig, vocab: usize, r: &mut R) -> Self {
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &ch) in c.channels.iter().enumerate() {
            convs.push(Conv2d::init(store, &format!("img.{i}"), cin, ch, 3, 2, 1, r));
            cin = ch;
        }
        let side = c.image_size >> c.channels.len();
        let flat = cin * side * side;
        Self {
            convs,
            image_proj: Linear::init(store, "img.proj", flat, c.embed_dim, (1.0 / flat as f64).sqrt(), r),
            words: store.normal("txt.embed", [vocab, c.word_dim], 1.0, r),
            text_proj: Linear::init(store, "txt.proj", c.word_dim, c.embed_dim, (1.0 / c.word_dim as f64).sqrt(), r),
        }
    }

    fn bind<T: Scalar>(store: &ParamStore<T>, c: &ScorerConfig) -> Result<Self> {
        Ok(Self {
            convs: (0..c.channels.len())
                .map(|i| Conv2d::bind(store, &format!("img.{i}"), 2, 1))
                .collect::<std::result::Result<_, _>>()?,
            image_proj: Linear::bind(store, "img.proj")?,
            words: store.id("txt.embed")?,
            text_proj: Linear::bind(store, "txt.proj")?,
        })
    }

    /// `[N,3,H,W]` to unit rows `[N, d]`.
    fn embed_images<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, h)?;
            h = g.relu(h);
        }
        let flat = g.shape(h)[1..].iter().product::<usize>();
        let h = g.reshape(h, [n, flat])?;
        let h = self.image_proj.forward(g, h)?;
        Ok(g.l2_normalize(h))
    }

    /// Mean of the non-padding word vectors, projected to unit rows.
    fn embed_prompts<T: Scalar>(&self, g: &mut Graph<'_, T>, prompts: &[&[u32]]) -> Result<Var> {
        let ids: Vec<usize> = prompts.iter().flat_map(|p| p.iter().map(|&i| i as usize)).collect();
        let mut weights = Vec::with_capacity(ids.len());
        for p in prompts {
            let words = p.iter().filter(|&&i| i != PAD_ID).count().max(1);
            let w = T::one() / T::from_usize(words).unwrap();
            weights.extend(p.iter().map(|&i| if i == PAD_ID { T::zero() } else { w }));
        }
        let table = g.param(self.words);
        let e = g.embedding(table, &ids)?;
        let e = g.reshape(e, [prompts.len(), PROMPT_LEN, g.shape(table)[1]])?;
        let h = g.weighted_pool(e, weights)?;
        let h = self.text_proj.forward(g, h)?;
        Ok(g.l2_normalize(h))
    }
}

#[derive(Clone, Debug)]
pub struct ScorerModel<T: Scalar> {
    params: ParamStore<T>,
    layers: Layers,
    pub metadata: ScorerMetadata,
}

/// Outcome of best-of-N selection.
#[derive(Clone, Debug)]
pub struct Selection {
    pub index: usize,
    pub image: Image,
    pub score: f64,
    pub scores: Vec<f64>,
}

/// Index of the largest score, lowest index on ties. `None` when empty.
pub fn argmax_lowest(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| x.to_f64().unwrap_or(0.0) * y.to_f64().unwrap_or(0.0)).sum();
    s.clamp(-1.0, 1.0)
}

impl<T: Scalar> ScorerModel<T> {
    pub fn config(&self) -> &ScorerConfig {
        &self.metadata.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.metadata.vocabulary
    }

    pub fn hash(&self) -> String {
        self.params.content_hash()
    }

    fn check(&self, images: &[&Image], prompt: &[u32]) -> Result<()> {
        let n = self.config().image_size;
        if let Some(img) = images.iter().find(|i| i.height() != n || i.width() != n) {
            return Err(contract(format!("scorer expects {n}x{n} images, got {}x{}", img.height(), img.width())));
        }
        let vocab = self.metadata.vocabulary.size() as u32;
        if prompt.len() != PROMPT_LEN || prompt.iter().any(|&i| i >= vocab) {
            return Err(contract(format!("prompt must be {PROMPT_LEN} ids below {vocab}")));
        }
        Ok(())
    }

    /// Unit image embeddings, one row of `embed_dim` values per image.
    pub fn image_embeddings(&self, images: &[&Image]) -> Result<Vec<Vec<T>>> {
        let d = self.config().embed_dim;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::inference(&self.params);
            let x = g.input(batch_tensor(chunk)?);
            let e = self.layers.embed_images(&mut g, x)?;
            out.extend(g.value(e).chunks_exact(d).map(<[T]>::to_vec));
        }
        Ok(out)
    }

    pub fn prompt_embeddings(&self, prompts: &[&[u32]]) -> Result<Vec<Vec<T>>> {
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.config().embed_dim;
        let mut g = Graph::inference(&self.params);
        let e = self.layers.embed_prompts(&mut g, prompts)?;
        Ok(g.value(e).chunks_exact(d).map(<[T]>::to_vec).collect())
    }

    /// Cosine similarity of each image with one prompt, in `[-1, 1]`.
    pub fn scores(&self, images: &[&Image], prompt: &[u32]) -> Result<Vec<f64>> {
        self.check(images, prompt)?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let text = self.prompt_embeddings(&[prompt])?.remove(0);
        Ok(self.image_embeddings(images)?.iter().map(|e| dot(e, &text)).collect())
    }

    pub fn similarity(&self, image: &Image, prompt: &[u32]) -> Result<f64> {
        Ok(self.scores(&[image], prompt)?[0])
    }

    pub fn select_best(&self, candidates: &[Image], prompt: &[u32]) -> Result<Selection> {
        if candidates.is_empty() {
            return Err(contract("select_best needs at least one candidate"));
        }
        let refs: Vec<&Image> = candidates.iter().collect();
        let scores = self.scores(&refs, prompt)?;
        let index = argmax_lowest(&scores).expect("nonempty");
        Ok(Selection { index, image: candidates[index].clone(), score: scores[index], scores })
    }

    /// Fraction of images whose own prompt scores highest among `prompts`
    /// (ties resolved to the lowest index).
    pub fn retrieval_accuracy(&self, images: &[&Image], truth: &[usize], prompts: &[&[u32]]) -> Result<f64> {
        if images.is_empty() || images.len() != truth.len() || prompts.is_empty() {
            return Err(contract("retrieval needs one prompt index per image"));
        }
        let texts = self.prompt_embeddings(prompts)?;
        let embeds = self.image_embeddings(images)?;
        let hits = embeds
            .iter()
            .zip(truth)
            .filter(|(e, &t)| {
                let s: Vec<f64> = texts.iter().map(|p| dot(e, p)).collect();
                argmax_lowest(&s) == Some(t)
            })
            .count();
        Ok(hits as f64 / images.len() as f64)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        checkpoint::save(stem, "scorer", &self.params, &self.metadata)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (params, metadata): (ParamStore<T>, ScorerMetadata) = checkpoint::load(stem, "scorer")?;
        metadata.config.validate()?;
        let layers = Layers::bind(&params, &metadata.config)?;
        Ok(Self { params, layers, metadata })
    }
}

/// An image paired with the ids of the prompt that describes it.
#[derive(Clone, Debug)]
pub struct MatchedPair {
    pub image: Image,
    pub prompt: Vec<u32>,
}

/// Symmetric InfoNCE over in-batch negatives. Each batch draws distinct
/// prompts, then one image for each, so no negative repeats its positive's
/// text.
pub fn train_scorer<T: Scalar>(pairs: &[MatchedPair], vocabulary: &Vocabulary, c: &ScorerConfig) -> Result<ScorerModel<T>> {
    c.validate()?;
    if pairs.is_empty() {
        return Err(config("scorer training set is empty"));
    }
    if pairs.iter().any(|p| p.prompt.len() != PROMPT_LEN) {
        return Err(contract(format!("prompts must have {PROMPT_LEN} ids")));
    }
    let mut by_prompt: BTreeMap<&[u32], Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        by_prompt.entry(&p.prompt).or_default().push(i);
    }
    let groups: Vec<&Vec<usize>> = by_prompt.values().collect();
    if groups.len() < 2 {
        return Err(config("scorer training needs at least two distinct prompts"));
    }
    let batch = c.batch_size.min(groups.len());

    let mut r = rng(derive_seed(c.seed, "scorer/init"));
    let mut params = ParamStore::new();
    let layers = Layers::init(&mut params, c, vocabulary.size(), &mut r);
    let mut r = rng(derive_seed(c.seed, "scorer/fit"));
    let mut adam = Adam::new(AdamConfig::default(), &params);
    let mut curve = Vec::with_capacity(c.iterations);
    let targets: Vec<usize> = (0..batch).collect();
    let weights = vec![T::one(); batch];
    let inv_t = T::lit(1.0 / c.temperature);
    for step in 0..c.iterations {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        for j in 0..batch {
            let k = r.random_range(j..order.len());
            order.swap(j, k);
        }
        let picks: Vec<usize> = order[..batch].iter().map(|&gi| groups[gi][r.random_range(0..groups[gi].len())]).collect();
        let images: Vec<&Image> = picks.iter().map(|&i| &pairs[i].image).collect();
        let prompts: Vec<&[u32]> = picks.iter().map(|&i| pairs[i].prompt.as_slice()).collect();
        let grads = {
            let mut g = Graph::new(&params);
            let x = g.input(batch_tensor(&images)?);
            let iv = layers.embed_images(&mut g, x)?;
            let tv = layers.embed_prompts(&mut g, &prompts)?;
            let tt = g.transpose(tv)?;
            let logits = g.matmul(iv, tt)?;
            let logits = g.scale(logits, inv_t);
            let back = g.transpose(logits)?;
            let a = g.cross_entropy(logits, &targets, &weights)?;
            let b = g.cross_entropy(back, &targets, &weights)?;
            let loss = g.add(a, b)?;
            let loss = g.scale(loss, T::lit(0.5));
            curve.push(finite_loss(g.scalar(loss), "scorer", step)?);
            g.backward(loss)?
        };
        let rate = scheduled_lr(c.learning_rate, step, c.iterations);
        adam.step(&mut params, &grads, |_, _| Some(rate));
    }
    Ok(ScorerModel {
        params,
        layers,
        metadata: ScorerMetadata {
            config: c.clone(),
            config_hash: c.hash(),
            vocab_hash: vocabulary.hash(),
            vocabulary: vocabulary.clone(),
            loss_curve: curve,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_rule() {
        assert_eq!(argmax_lowest(&[0.2, 0.7, 0.7, 0.1]), Some(1));
        assert_eq!(argmax_lowest(&[0.3]), Some(0));
        assert_eq!(argmax_lowest(&[]), None);
    }
}
