//! Text-conditioned masked-token transformer with iterative parallel
//! decoding and adapter fine-tuning.
//!
//! The prompt is embedded as a prefix of `PROMPT_LEN` positions in front of
//! the token grid, and all positions attend to each other.

use std::path::Path;

use aftermath_nn::layers::{Adapter, LayerNorm, Linear, TransformerBlock};
use aftermath_nn::{log_softmax_into, Adam, AdamConfig, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{config, contract, Result};
use crate::prompts::{Vocabulary, PROMPT_LEN};
use crate::seed::{derive_seed, rng, sha256_hex};
use crate::tokens::TokenGrid;
use crate::train::{finite_loss, sample_indices, scheduled_lr};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub codebook_size: usize,
    pub grid: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub adapter_rank: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub mask_min: f64,
    pub mask_max: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            codebook_size: 128,
            grid: 8,
            width: 64,
            blocks: 4,
            heads: 4,
            adapter_rank: 8,
            learning_rate: 1e-3,
            batch_size: 32,
            iterations: 2000,
            mask_min: 0.3,
            mask_max: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(config(format!("width {} must be a positive multiple of heads {}", self.width, self.heads)));
        }
        if self.codebook_size < 2 || self.grid == 0 || self.batch_size == 0 {
            return Err(config("generator sizes must be positive"));
        }
        if !(0.0 < self.mask_min && self.mask_min <= self.mask_max && self.mask_max <= 1.0) {
            return Err(config(format!("mask range [{}, {}] must lie in (0, 1]", self.mask_min, self.mask_max)));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMetadata {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub config_hash: String,
    pub vocabulary: Vocabulary,
    pub vocab_hash: String,
    pub codec_hash: String,
    pub adapter: bool,
    pub loss_curve: Vec<f64>,
    #[serde(default)]
    pub adapter_loss_curve: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Layers {
    tokens: ParamId,
    words: ParamId,
    pos_row: ParamId,
    pos_col: ParamId,
    pos_prompt: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_out: LayerNorm,
    head: Linear,
}

impl Layers {
    fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, c: &GeneratorConfig, vocab: usize, r: &mut R) -> Self {
        let w = c.width;
        Self {
            tokens: store.normal("tok.embed", [c.codebook_size + 1, w], 0.02, r),
            words: store.normal("word.embed", [vocab, w], 0.02, r),
            pos_row: store.normal("pos.row", [c.grid, w], 0.02, r),
            pos_col: store.normal("pos.col", [c.grid, w], 0.02, r),
            pos_prompt: store.normal("pos.prompt", [PROMPT_LEN, w], 0.02, r),
            blocks: (0..c.blocks).map(|i| TransformerBlock::init(store, &format!("block.{i}"), w, c.heads, r)).collect(),
            ln_out: LayerNorm::init(store, "ln.out", w),
            head: Linear::init(store, "head", w, c.codebook_size, 0.02, r),
        }
    }

    fn bind<T: Scalar>(store: &ParamStore<T>, c: &GeneratorConfig) -> Result<Self> {
        Ok(Self {
            tokens: store.id("tok.embed")?,
            words: store.id("word.embed")?,
            pos_row: store.id("pos.row")?,
            pos_col: store.id("pos.col")?,
            pos_prompt: store.id("pos.prompt")?,
            blocks: (0..c.blocks)
                .map(|i| TransformerBlock::bind(store, &format!("block.{i}"), c.heads))
                .collect::<std::result::Result<_, _>>()?,
            ln_out: LayerNorm::bind(store, "ln.out")?,
            head: Linear::bind(store, "head")?,
        })
    }

    /// Token ids `[B * cells]` and prompt ids `[B * PROMPT_LEN]` to logits
    /// `[B * cells, K]`.
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        c: &GeneratorConfig,
        ids: &[usize],
        prompt: &[usize],
    ) -> Result<Var> {
        let cells = c.grid * c.grid;
        let b = ids.len() / cells;
        let rows: Vec<usize> = (0..b * cells).map(|i| (i % cells) / c.grid).collect();
        let cols: Vec<usize> = (0..b * cells).map(|i| i % c.grid).collect();
        let slots: Vec<usize> = (0..b * PROMPT_LEN).map(|i| i % PROMPT_LEN).collect();
        let (tok, words) = (g.param(self.tokens), g.param(self.words));
        let (pr, pc, pp) = (g.param(self.pos_row), g.param(self.pos_col), g.param(self.pos_prompt));
        let t = g.embedding(tok, ids)?;
        let er = g.embedding(pr, &rows)?;
        let ec = g.embedding(pc, &cols)?;
        let t = g.add(t, er)?;
        let t = g.add(t, ec)?;
        let t = g.reshape(t, [b, cells, c.width])?;
        let p = g.embedding(words, prompt)?;
        let ep = g.embedding(pp, &slots)?;
        let p = g.add(p, ep)?;
        let p = g.reshape(p, [b, PROMPT_LEN, c.width])?;
        let mut h = g.concat(p, t, 1)?;
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        let h = self.ln_out.forward(g, h)?;
        let h = g.narrow(h, 1, PROMPT_LEN, cells)?;
        let h = g.reshape(h, [b * cells, c.width])?;
        Ok(self.head.forward(g, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorModel<T: Scalar> {
    params: ParamStore<T>,
    layers: Layers,
    pub metadata: GeneratorMetadata,
}

/// Cosine unmasking schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSchedule {
    pub total_steps: usize,
    /// Softmax temperature; 0 selects the argmax.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeSchedule {
    fn default() -> Self {
        Self { total_steps: 8, temperature: 1.0, seed: 0 }
    }
}

impl DecodeSchedule {
    /// `cos(pi t / 2T)`: 1 at t = 0 and 0 at t = T.
    pub fn mask_ratio(&self, t: usize) -> f64 {
        if t >= self.total_steps {
            return 0.0;
        }
        (std::f64::consts::PI * t as f64 / (2.0 * self.total_steps as f64)).cos()
    }

    /// Positions still masked after step `t` given `m0` initially masked and
    /// `current` masked before the step. At least one position is unmasked
    /// per step so decoding always terminates.
    pub fn remaining_after(&self, t: usize, m0: usize, current: usize) -> usize {
        if t >= self.total_steps || current == 0 {
            return 0;
        }
        let target = (self.mask_ratio(t) * m0 as f64 - 1e-9).ceil().max(0.0) as usize;
        target.min(current - 1)
    }
}

/// One decoding job: a masked grid, its prompt and its sampling stream.
#[derive(Clone, Debug)]
pub struct DecodeJob<'a> {
    pub grid: &'a TokenGrid,
    pub prompt: &'a [u32],
    pub seed: u64,
}

impl<T: Scalar> GeneratorModel<T> {
    pub fn config(&self) -> &GeneratorConfig {
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

    fn check(&self, grid: &TokenGrid, prompt: &[u32]) -> Result<()> {
        let c = self.config();
        if grid.rows != c.grid || grid.cols != c.grid || grid.codebook_size as usize != c.codebook_size {
            return Err(contract(format!(
                "token grid {}x{} (K={}) does not match generator {}x{} (K={})",
                grid.rows, grid.cols, grid.codebook_size, c.grid, c.grid, c.codebook_size
            )));
        }
        if prompt.len() != PROMPT_LEN {
            return Err(contract(format!("prompt has {} ids, expected {PROMPT_LEN}", prompt.len())));
        }
        let vocab = self.metadata.vocabulary.size() as u32;
        if let Some(bad) = prompt.iter().find(|&&p| p >= vocab) {
            return Err(contract(format!("prompt id {bad} outside vocabulary of {vocab}")));
        }
        Ok(())
    }

    /// Logits `[B * cells, K]` for a batch of grids and prompts.
    pub fn predict_batch(&self, grids: &[&TokenGrid], prompts: &[&[u32]]) -> Result<Tensor<T>> {
        if grids.len() != prompts.len() || grids.is_empty() {
            return Err(contract("predict_batch needs one prompt per grid"));
        }
        for (g, p) in grids.iter().zip(prompts) {
            self.check(g, p)?;
        }
        let ids: Vec<usize> = grids.iter().flat_map(|g| g.ids.iter().map(|&i| i as usize)).collect();
        let pr: Vec<usize> = prompts.iter().flat_map(|p| p.iter().map(|&i| i as usize)).collect();
        let mut g = Graph::inference(&self.params);
        let logits = self.layers.forward(&mut g, self.config(), &ids, &pr)?;
        Ok(g.tensor(logits))
    }

    /// Logits of shape `[cells, K]`.
    pub fn predict_tokens(&self, masked: &TokenGrid, prompt: &[u32]) -> Result<Tensor<T>> {
        self.predict_batch(&[masked], &[prompt])
    }

    pub fn parallel_decode(&self, masked: &TokenGrid, prompt: &[u32], schedule: &DecodeSchedule) -> Result<TokenGrid> {
        let job = DecodeJob { grid: masked, prompt, seed: schedule.seed };
        Ok(self.decode_jobs(&[job], schedule)?.remove(0))
    }

    /// Decodes independent jobs together, each with its own random stream.
    /// `schedule.seed` is ignored in favour of the per-job seeds.
    pub fn decode_jobs(&self, jobs: &[DecodeJob<'_>], schedule: &DecodeSchedule) -> Result<Vec<TokenGrid>> {
        if schedule.total_steps == 0 || schedule.temperature < 0.0 || !schedule.temperature.is_finite() {
            return Err(config("decode schedule needs at least one step and a finite temperature >= 0"));
        }
        let mut grids: Vec<TokenGrid> = jobs.iter().map(|j| j.grid.clone()).collect();
        for (g, j) in grids.iter().zip(jobs) {
            self.check(g, j.prompt)?;
        }
        let m0: Vec<usize> = grids.iter().map(TokenGrid::masked_count).collect();
        let mut rngs: Vec<ChaCha8Rng> = jobs.iter().map(|j| rng(j.seed)).collect();
        let k = self.config().codebook_size;
        let cells = self.config().grid * self.config().grid;
        let mut probs = vec![T::zero(); k];
        for t in 1..=schedule.total_steps {
            let active: Vec<usize> = (0..grids.len()).filter(|&i| !grids[i].is_complete()).collect();
            if active.is_empty() {
                break;
            }
            let batch_grids: Vec<&TokenGrid> = active.iter().map(|&i| &grids[i]).collect();
            let batch_prompts: Vec<&[u32]> = active.iter().map(|&i| jobs[i].prompt).collect();
            let logits = self.predict_batch(&batch_grids, &batch_prompts)?;
            for (slot, &i) in active.iter().enumerate() {
                let grid = &mut grids[i];
                let masked: Vec<usize> = (0..cells).filter(|&p| grid.is_masked(p)).collect();
                let mut proposals = Vec::with_capacity(masked.len());
                for &p in &masked {
                    let row = &logits.data()[(slot * cells + p) * k..(slot * cells + p + 1) * k];
                    log_softmax_into(row, &mut probs);
                    let token = sample_token(row, schedule.temperature, &mut rngs[i]);
                    proposals.push((p, token, probs[token].to_f64().unwrap_or(0.0)));
                }
                let keep = schedule.remaining_after(t, m0[i], masked.len());
                let mut order: Vec<usize> = (0..proposals.len()).collect();
                order.sort_by(|&a, &b| proposals[b].2.total_cmp(&proposals[a].2).then(proposals[a].0.cmp(&proposals[b].0)));
                for &o in order.iter().take(masked.len() - keep) {
                    let (p, token, _) = proposals[o];
                    grid.ids[p] = token as u32;
                }
            }
        }
        Ok(grids)
    }

    /// Mean cross-entropy of the true tokens at masked positions, with masks
    /// drawn as in training from `seed`.
    pub fn masked_token_loss(&self, grids: &[TokenGrid], prompts: &[Vec<u32>], seed: u64) -> Result<f64> {
        if grids.is_empty() || grids.len() != prompts.len() {
            return Err(contract("masked_token_loss needs matching, nonempty grids and prompts"));
        }
        let mut r = rng(seed);
        let (mut total, mut count) = (0.0, 0.0);
        for chunk in (0..grids.len()).collect::<Vec<_>>().chunks(64) {
            let batch = masked_batch(self.config(), grids, prompts, chunk, &mut r);
            let mut g = Graph::inference(&self.params);
            let logits = self.layers.forward(&mut g, self.config(), &batch.inputs, &batch.prompts)?;
            let loss = g.cross_entropy(logits, &batch.targets, &batch.weights)?;
            let w: f64 = batch.weights.iter().map(|w| w.to_f64().unwrap_or(0.0)).sum();
            total += g.scalar(loss).to_f64().unwrap_or(f64::NAN) * w;
            count += w;
        }
        Ok(total / count)
    }

    /// True when every parameter outside the adapters equals `base`'s bytes.
    pub fn base_weights_equal(&self, base: &GeneratorModel<T>) -> bool {
        base.params.iter().all(|(_, name, t)| {
            !is_adapter(name) && self.params.id(name).map(|id| self.params.get(id) == t).unwrap_or(false)
        })
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        checkpoint::save(stem, "generator", &self.params, &self.metadata)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (params, metadata): (ParamStore<T>, GeneratorMetadata) = checkpoint::load(stem, "generator")?;
        metadata.config.validate()?;
        let layers = Layers::bind(&params, &metadata.config)?;
        if layers.blocks.iter().any(|b| b.adapter.is_some()) != metadata.adapter {
            return Err(contract("adapter flag disagrees with the stored parameters"));
        }
        Ok(Self { params, layers, metadata })
    }
}

fn sample_token<T: Scalar, R: Rng>(logits: &[T], temperature: f64, r: &mut R) -> usize {
    let argmax = || {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        best
    };
    if temperature == 0.0 {
        return argmax();
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap_or(f64::NEG_INFINITY) / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return argmax();
    }
    let mut u = r.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

pub fn is_adapter(name: &str) -> bool {
    name.contains(".adapter.")
}

struct MaskedBatch<T> {
    inputs: Vec<usize>,
    prompts: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<T>,
}

/// Masks a fraction `r ~ U[mask_min, mask_max]` of each grid's positions.
fn masked_batch<T: Scalar, R: Rng>(
    c: &GeneratorConfig,
    grids: &[TokenGrid],
    prompts: &[Vec<u32>],
    picks: &[usize],
    r: &mut R,
) -> MaskedBatch<T> {
    let cells = c.grid * c.grid;
    let mut b = MaskedBatch { inputs: Vec::new(), prompts: Vec::new(), targets: Vec::new(), weights: Vec::new() };
    for &i in picks {
        let ratio = r.random_range(c.mask_min..=c.mask_max);
        let count = ((ratio * cells as f64).round() as usize).clamp(1, cells);
        let mut positions: Vec<usize> = (0..cells).collect();
        for j in 0..count {
            let k = r.random_range(j..cells);
            positions.swap(j, k);
        }
        let mut masked = vec![false; cells];
        for &p in &positions[..count] {
            masked[p] = true;
        }
        for (p, &id) in grids[i].ids.iter().enumerate() {
            b.inputs.push(if masked[p] { c.codebook_size } else { id as usize });
            b.targets.push(id as usize);
            b.weights.push(if masked[p] { T::one() } else { T::zero() });
        }
        b.prompts.extend(prompts[i].iter().map(|&p| p as usize));
    }
    b
}

fn validate_pairs(grids: &[TokenGrid], prompts: &[Vec<u32>], c: &GeneratorConfig) -> Result<()> {
    if grids.is_empty() {
        return Err(config("generator training set is empty"));
    }
    if grids.len() != prompts.len() {
        return Err(contract("one prompt per token grid is required"));
    }
    for g in grids {
        if g.rows != c.grid || g.cols != c.grid || g.codebook_size as usize != c.codebook_size || !g.is_complete() {
            return Err(contract("training grids must be complete and match the generator configuration"));
        }
    }
    if prompts.iter().any(|p| p.len() != PROMPT_LEN) {
        return Err(contract(format!("prompts must have {PROMPT_LEN} ids")));
    }
    Ok(())
}

fn fit<T: Scalar>(
    params: &mut ParamStore<T>,
    layers: &Layers,
    c: &GeneratorConfig,
    grids: &[TokenGrid],
    prompts: &[Vec<u32>],
    iterations: usize,
    lr: f64,
    seed: u64,
    adapters_only: bool,
) -> Result<Vec<f64>> {
    let mut r = rng(seed);
    let mut adam = Adam::new(AdamConfig::default(), params);
    let mut curve = Vec::with_capacity(iterations);
    for step in 0..iterations {
        let picks = sample_indices(grids.len(), c.batch_size, &mut r);
        let batch = masked_batch::<T, _>(c, grids, prompts, &picks, &mut r);
        let grads = {
            let mut g = Graph::new(params);
            if adapters_only {
                g = g.freeze(|n| !is_adapter(n));
            }
            let logits = layers.forward(&mut g, c, &batch.inputs, &batch.prompts)?;
            let loss = g.cross_entropy(logits, &batch.targets, &batch.weights)?;
            curve.push(finite_loss(g.scalar(loss), "generator", step)?);
            g.backward(loss)?
        };
        let rate = scheduled_lr(lr, step, iterations);
        adam.step(params, &grads, |_, name| (!adapters_only || is_adapter(name)).then_some(rate));
    }
    Ok(curve)
}

/// Masked-token modeling on tokenized images paired with prompt ids.
pub fn train_generator<T: Scalar>(
    grids: &[TokenGrid],
    prompts: &[Vec<u32>],
    vocabulary: &Vocabulary,
    codec_hash: &str,
    c: &GeneratorConfig,
) -> Result<GeneratorModel<T>> {
    c.validate()?;
    validate_pairs(grids, prompts, c)?;
    let mut r = rng(derive_seed(c.seed, "generator/init"));
    let mut params = ParamStore::new();
    let layers = Layers::init(&mut params, c, vocabulary.size(), &mut r);
    let curve = fit(&mut params, &layers, c, grids, prompts, c.iterations, c.learning_rate, derive_seed(c.seed, "generator/fit"), false)?;
    Ok(GeneratorModel {
        params,
        layers,
        metadata: GeneratorMetadata {
            config: c.clone(),
            seed: c.seed,
            config_hash: c.hash(),
            vocab_hash: vocabulary.hash(),
            vocabulary: vocabulary.clone(),
            codec_hash: codec_hash.to_owned(),
            adapter: false,
            loss_curve: curve,
            adapter_loss_curve: Vec::new(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, iterations: 300, seed: 0 }
    }
}

/// Inserts a bottleneck adapter after every block and trains only those
/// weights, with the base objective, on target pre-images paired with
/// undamaged prompts.
pub fn finetune_adapters<T: Scalar>(
    base: &GeneratorModel<T>,
    grids: &[TokenGrid],
    prompts: &[Vec<u32>],
    ac: &AdapterConfig,
) -> Result<GeneratorModel<T>> {
    if base.metadata.adapter {
        return Err(contract("generator already carries adapters"));
    }
    let c = base.config().clone();
    validate_pairs(grids, prompts, &c)?;
    let mut params = base.params.clone();
    let mut r = rng(derive_seed(ac.seed, "adapter/init"));
    for i in 0..c.blocks {
        Adapter::init(&mut params, &format!("block.{i}.adapter"), c.width, c.adapter_rank, &mut r);
    }
    let layers = Layers::bind(&params, &c)?;
    let curve =
        fit(&mut params, &layers, &c, grids, prompts, ac.iterations, ac.learning_rate, derive_seed(ac.seed, "adapter/fit"), true)?;
    let mut metadata = base.metadata.clone();
    metadata.adapter = true;
    metadata.adapter_loss_curve = curve;
    Ok(GeneratorModel { params, layers, metadata })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_counts() {
        let s = DecodeSchedule { total_steps: 4, temperature: 0.0, seed: 0 };
        assert_eq!(s.mask_ratio(0), 1.0);
        assert_eq!(s.mask_ratio(4), 0.0);
        let mut current = 10;
        let mut counts = Vec::new();
        for t in 1..=4 {
            current = s.remaining_after(t, 10, current);
            counts.push(current);
        }
        // ceil(10 cos(pi/8)) = 10 would stall, so step one unmasks a single position.
        assert_eq!(counts, vec![9, 8, 4, 0]);
    }

    #[test]
    fn temperature_zero_is_argmax() {
        let mut r = rng(0);
        assert_eq!(sample_token(&[0.1f32, 2.0, 2.0, -1.0], 0.0, &mut r), 1);
    }
}
