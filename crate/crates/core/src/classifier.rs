//! Siamese patch-transformer damage classifier and its training variants.
//!
//! One encoder embeds both the pre- and the post-image; the two features are
//! concatenated and a two-layer head maps them to a damage logit.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use aftermath_nn::layers::{Conv2d, LayerNorm, Linear, TransformerBlock};
use aftermath_nn::{bce_term, sigmoid, Adam, AdamConfig, Gradients, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{config, contract, Result};
use crate::eval::auprc;
use crate::raster::{batch_tensor, Image};
use crate::seed::{derive_seed, rng, sha256_hex};
use crate::toyworld::LabeledPair;
use crate::train::{finite_loss, sample_indices};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { image_size: 64, patch: 16, width: 48, blocks: 2, heads: 4 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(config(format!("patch {} must divide image size {}", self.patch, self.image_size)));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(config(format!("width {} must be a positive multiple of heads {}", self.width, self.heads)));
        }
        Ok(())
    }

    fn tokens(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }
}

/// Which data validation AUPRC for early stopping comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validation {
    #[default]
    Target,
    Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub eval_every: usize,
    pub patience: usize,
    /// Iterations of the end-to-end synthetic fine-tune (R3) and of the
    /// head-only stage.
    pub finetune_iterations: usize,
    pub validation: Validation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_iterations: 2000, ..Self::reference() }
    }
}

impl TrainConfig {
    /// Learning rates, batch size and iteration budget of the original
    /// protocol, meant for a pretrained backbone.
    pub fn reference() -> Self {
        Self {
            lr_backbone: 2e-6,
            lr_head: 2e-5,
            batch_size: 64,
            max_iterations: 5000,
            eval_every: 100,
            patience: 10,
            finetune_iterations: 5000,
            validation: Validation::Target,
            seed: 0,
        }
    }

    /// Rates that train the small encoder from scratch in minutes.
    pub fn desk() -> Self {
        Self {
            lr_backbone: 5e-4,
            lr_head: 5e-3,
            batch_size: 32,
            max_iterations: 600,
            eval_every: 50,
            patience: 4,
            finetune_iterations: 300,
            validation: Validation::Target,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_backbone, self.lr_head].iter().all(|v| *v > 0.0 && v.is_finite());
        if !positive || self.batch_size == 0 || self.max_iterations == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(config("training rates, batch size, iterations, eval_every and patience must be positive"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    R0,
    R1,
    R2,
    R3,
    R4,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::R0, Variant::R1, Variant::R2, Variant::R3, Variant::R4];

    pub fn description(self) -> &'static str {
        match self {
            Variant::R0 => "Only Real Data (source)",
            Variant::R1 => "Only Synthetic Data",
            Variant::R2 => "Joint Training on Real + Synthetic",
            Variant::R3 => "End-to-end Finetuning",
            Variant::R4 => "Last-Layer Finetune on SynData",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| config(format!("unknown variant {s:?} (expected R0..R4)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub auprc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageHistory {
    pub stage: String,
    pub evals: Vec<EvalPoint>,
    pub best_iteration: usize,
    pub best_auprc: f64,
    pub loss_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetadata {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub variant: Variant,
    pub seed: u64,
    pub stages: Vec<StageHistory>,
    pub best_iteration: usize,
}

#[derive(Clone, Debug)]
struct Layers {
    patch: Conv2d,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

impl Layers {
    fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, c: &EncoderConfig, r: &mut R) -> Self {
        let w = c.width;
        Self {
            patch: Conv2d::init(store, "enc.patch", 3, w, c.patch, c.patch, 0, r),
            pos: store.normal("enc.pos", [c.tokens(), w], 0.02, r),
            blocks: (0..c.blocks).map(|i| TransformerBlock::init(store, &format!("enc.block.{i}"), w, c.heads, r)).collect(),
            ln: LayerNorm::init(store, "enc.ln", w),
            fc1: Linear::init(store, "head.fc1", 2 * w, w, (2.0 / (2 * w) as f64).sqrt(), r),
            fc2: Linear::init(store, "head.fc2", w, 1, (1.0 / w as f64).sqrt(), r),
        }
    }

    fn bind<T: Scalar>(store: &ParamStore<T>, c: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            patch: Conv2d::bind(store, "enc.patch", c.patch, 0)?,
            pos: store.id("enc.pos")?,
            blocks: (0..c.blocks)
                .map(|i| TransformerBlock::bind(store, &format!("enc.block.{i}"), c.heads))
                .collect::<std::result::Result<_, _>>()?,
            ln: LayerNorm::bind(store, "enc.ln")?,
            fc1: Linear::bind(store, "head.fc1")?,
            fc2: Linear::bind(store, "head.fc2")?,
        })
    }

    /// `[N,3,H,W]` to mean-pooled features `[N, width]`.
    fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.patch.forward(g, x)?;
        let s = g.shape(h).to_vec();
        let h = g.reshape(h, [s[0], s[1], s[2] * s[3]])?;
        let h = g.transpose(h)?;
        let pos = g.param(self.pos);
        let mut h = g.add_broadcast(h, pos)?;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        let h = self.ln.forward(g, h)?;
        Ok(g.mean_pool(h)?)
    }

    /// Concatenated features `[N, 2w]` to logits `[N, 1]`.
    fn head<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        let h = self.fc1.forward(g, f)?;
        let h = g.relu(h);
        Ok(self.fc2.forward(g, h)?)
    }

    /// Pre and post batches through the shared encoder, then the head.
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, pre: &[&Image], post: &[&Image]) -> Result<Var> {
        let n = pre.len();
        let both: Vec<&Image> = pre.iter().chain(post).copied().collect();
        let x = g.input(batch_tensor(&both)?);
        let f = self.encode(g, x)?;
        let fu = g.narrow(f, 0, 0, n)?;
        let fv = g.narrow(f, 0, n, n)?;
        let f = g.concat(fu, fv, 1)?;
        self.head(g, f)
    }
}

/// Numerically stable binary cross-entropy of one logit.
pub fn bce_loss(logit: f64, label: u8) -> f64 {
    bce_term(logit, label as f64)
}

/// Sigmoid probability and the strict `> 0.5` decision.
pub fn decide(logit: f64) -> (f64, u8) {
    let p = sigmoid(logit);
    (p, (p > 0.5) as u8)
}

#[derive(Clone, Debug)]
pub struct ClassifierModel<T: Scalar> {
    params: ParamStore<T>,
    layers: Layers,
    pub metadata: ClassifierMetadata,
}

const EVAL_CHUNK: usize = 64;

impl<T: Scalar> ClassifierModel<T> {
    pub fn new(encoder: &EncoderConfig, seed: u64) -> Result<Self> {
        encoder.validate()?;
        let mut params = ParamStore::new();
        let layers = Layers::init(&mut params, encoder, &mut rng(derive_seed(seed, "classifier/init")));
        Ok(Self {
            params,
            layers,
            metadata: ClassifierMetadata {
                encoder: encoder.clone(),
                train: TrainConfig::default(),
                variant: Variant::R0,
                seed,
                stages: Vec::new(),
                best_iteration: 0,
            },
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Mean BCE of a batch and its gradient with respect to every weight.
    pub fn batch_loss(&self, pre: &[&Image], post: &[&Image], targets: &[T]) -> Result<(T, Gradients<T>)> {
        let mut g = Graph::new(&self.params);
        let z = self.layers.forward(&mut g, pre, post)?;
        let loss = g.bce_with_logits(z, targets)?;
        let value = g.scalar(loss);
        Ok((value, g.backward(loss)?))
    }

    pub fn hash(&self) -> String {
        self.params.content_hash()
    }

    /// Hash of the encoder weights alone.
    pub fn encoder_hash(&self) -> String {
        self.params.subset_hash(|n| !is_head(n))
    }

    pub fn head_hash(&self) -> String {
        self.params.subset_hash(is_head)
    }

    fn check(&self, a: &Image, b: &Image) -> Result<()> {
        let n = self.metadata.encoder.image_size;
        for img in [a, b] {
            if img.height() != n || img.width() != n {
                return Err(contract(format!("classifier expects {n}x{n} images, got {}x{}", img.height(), img.width())));
            }
        }
        Ok(())
    }

    pub fn forward(&self, pre: &Image, post: &Image) -> Result<f64> {
        self.check(pre, post)?;
        let mut g = Graph::inference(&self.params);
        let z = self.layers.forward(&mut g, &[pre], &[post])?;
        Ok(g.value(z)[0].to_f64().unwrap_or(f64::NAN))
    }

    pub fn predict(&self, pre: &Image, post: &Image) -> Result<(f64, u8)> {
        Ok(decide(self.forward(pre, post)?))
    }

    /// Encoder features of each image.
    pub fn features(&self, images: &[&Image]) -> Result<Vec<Vec<T>>> {
        let w = self.metadata.encoder.width;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut g = Graph::inference(&self.params);
            let x = g.input(batch_tensor(chunk)?);
            let f = self.layers.encode(&mut g, x)?;
            out.extend(g.value(f).chunks_exact(w).map(<[T]>::to_vec));
        }
        Ok(out)
    }

    /// `concat(f(pre), f(post))` for each pair.
    pub fn pair_features(&self, pairs: &[&LabeledPair]) -> Result<Vec<Vec<T>>> {
        for p in pairs {
            self.check(&p.pre, &p.post)?;
        }
        let pre: Vec<&Image> = pairs.iter().map(|p| &p.pre).collect();
        let post: Vec<&Image> = pairs.iter().map(|p| &p.post).collect();
        let (fu, fv) = (self.features(&pre)?, self.features(&post)?);
        Ok(fu.into_iter().zip(fv).map(|(mut a, b)| {
            a.extend(b);
            a
        }).collect())
    }

    /// Head logits for precomputed pair features.
    pub fn head_logits(&self, features: &[Vec<T>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(features.len());
        let d = 2 * self.metadata.encoder.width;
        for chunk in features.chunks(256) {
            let data: Vec<T> = chunk.iter().flatten().copied().collect();
            let mut g = Graph::inference(&self.params);
            let f = g.input(Tensor::new([chunk.len(), d], data)?);
            let z = self.layers.head(&mut g, f)?;
            out.extend(g.value(z).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(out)
    }

    pub fn logits(&self, pairs: &[LabeledPair]) -> Result<Vec<f64>> {
        let refs: Vec<&LabeledPair> = pairs.iter().collect();
        self.logits_of(&refs)
    }

    fn logits_of(&self, pairs: &[&LabeledPair]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(EVAL_CHUNK) {
            for p in chunk {
                self.check(&p.pre, &p.post)?;
            }
            let pre: Vec<&Image> = chunk.iter().map(|p| &p.pre).collect();
            let post: Vec<&Image> = chunk.iter().map(|p| &p.post).collect();
            let mut g = Graph::inference(&self.params);
            let z = self.layers.forward(&mut g, &pre, &post)?;
            out.extend(g.value(z).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(out)
    }

    pub fn probabilities(&self, pairs: &[LabeledPair]) -> Result<Vec<f64>> {
        Ok(self.logits(pairs)?.into_iter().map(sigmoid).collect())
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        checkpoint::save(stem, "classifier", &self.params, &self.metadata)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (params, metadata): (ParamStore<T>, ClassifierMetadata) = checkpoint::load(stem, "classifier")?;
        metadata.encoder.validate()?;
        let layers = Layers::bind(&params, &metadata.encoder)?;
        Ok(Self { params, layers, metadata })
    }
}

/// A named validation set used for early stopping.
#[derive(Clone, Debug)]
pub struct ValSet<'a> {
    pub name: String,
    pub pairs: Vec<&'a LabeledPair>,
}

impl<'a> ValSet<'a> {
    pub fn new(name: impl Into<String>, pairs: &'a [LabeledPair]) -> Self {
        Self { name: name.into(), pairs: pairs.iter().collect() }
    }

    fn labels(&self) -> Vec<u8> {
        self.pairs.iter().map(|p| p.label).collect()
    }
}

struct Tracker<T: Scalar> {
    best: Option<(ParamStore<T>, EvalPoint)>,
    evals: Vec<EvalPoint>,
    stale: usize,
}

impl<T: Scalar> Tracker<T> {
    fn new() -> Self {
        Self { best: None, evals: Vec::new(), stale: 0 }
    }

    fn record(&mut self, iteration: usize, score: f64, params: &ParamStore<T>) {
        let point = EvalPoint { iteration, auprc: score };
        self.evals.push(point);
        if self.best.as_ref().is_none_or(|(_, b)| score > b.auprc) {
            self.best = Some((params.clone(), point));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
    }

    fn finish(self, stage: &str, curve: &[f64]) -> (ParamStore<T>, StageHistory) {
        let (params, best) = self.best.expect("at least one evaluation");
        let history = StageHistory {
            stage: stage.into(),
            evals: self.evals,
            best_iteration: best.iteration,
            best_auprc: best.auprc,
            loss_curve: curve.to_vec(),
        };
        (params, history)
    }
}

fn validation_auprc<T: Scalar>(model: &ClassifierModel<T>, val: &ValSet<'_>) -> Result<f64> {
    let scores = model.logits_of(&val.pairs)?;
    auprc(&scores, &val.labels())
}

/// End-to-end training from `start`, evaluated on every validation set and
/// returning the best checkpoint for each. Stops once every set has gone
/// `patience` evaluations without improving.
fn fit_end_to_end<T: Scalar>(
    start: &ClassifierModel<T>,
    train: &[&LabeledPair],
    vals: &[ValSet<'_>],
    tc: &TrainConfig,
    iterations: usize,
    stage: &str,
    seed: u64,
) -> Result<Vec<(ClassifierModel<T>, StageHistory)>> {
    tc.validate()?;
    if train.is_empty() {
        return Err(config(format!("{stage}: training data is empty")));
    }
    if vals.is_empty() || vals.iter().any(|v| v.pairs.is_empty()) {
        return Err(config(format!("{stage}: validation data is empty")));
    }
    let mut model = start.clone();
    let mut trackers: Vec<Tracker<T>> = vals.iter().map(|_| Tracker::new()).collect();
    let mut adam = Adam::new(AdamConfig::default(), &model.params);
    let mut r = rng(seed);
    let mut curve = Vec::new();
    let (lb, lh) = (tc.lr_backbone, tc.lr_head);
    for step in 0..iterations {
        let picks = sample_indices(train.len(), tc.batch_size, &mut r);
        let pre: Vec<&Image> = picks.iter().map(|&i| &train[i].pre).collect();
        let post: Vec<&Image> = picks.iter().map(|&i| &train[i].post).collect();
        let targets: Vec<T> = picks.iter().map(|&i| T::lit(train[i].label as f64)).collect();
        let (loss, grads) = model.batch_loss(&pre, &post, &targets)?;
        curve.push(finite_loss(loss, stage, step)?);
        adam.step(&mut model.params, &grads, |_, name| Some(if is_head(name) { lh } else { lb }));
        let done = step + 1;
        if done % tc.eval_every == 0 || done == iterations {
            for (t, v) in trackers.iter_mut().zip(vals) {
                let score = validation_auprc(&model, v)?;
                t.record(done, score, &model.params);
            }
            if trackers.iter().all(|t| t.stale >= tc.patience) {
                break;
            }
        }
    }
    Ok(trackers
        .into_iter()
        .map(|t| {
            let (params, history) = t.finish(stage, &curve);
            let mut m = model.clone();
            m.params = params;
            m.metadata.best_iteration = history.best_iteration;
            m.metadata.stages.push(history.clone());
            m.metadata.train = tc.clone();
            (m, history)
        })
        .collect())
}

fn refs(pairs: &[LabeledPair]) -> Vec<&LabeledPair> {
    pairs.iter().collect()
}

/// End-to-end training on labeled data, with one early-stopped checkpoint
/// per validation set.
pub fn train_stage1_multi<T: Scalar>(
    train: &[&LabeledPair],
    vals: &[ValSet<'_>],
    encoder: &EncoderConfig,
    tc: &TrainConfig,
) -> Result<Vec<ClassifierModel<T>>> {
    let start = ClassifierModel::new(encoder, tc.seed)?;
    let out = fit_end_to_end(&start, train, vals, tc, tc.max_iterations, "stage1", derive_seed(tc.seed, "stage1"))?;
    Ok(out.into_iter().map(|(m, _)| m).collect())
}

pub fn train_stage1<T: Scalar>(
    source: &[LabeledPair],
    val: &[LabeledPair],
    encoder: &EncoderConfig,
    tc: &TrainConfig,
) -> Result<ClassifierModel<T>> {
    let vals = [ValSet::new("val", val)];
    Ok(train_stage1_multi(&refs(source), &vals, encoder, tc)?.remove(0))
}

/// Fine-tunes the whole network on `train`, starting from `base`.
pub fn finetune_end_to_end<T: Scalar>(
    base: &ClassifierModel<T>,
    train: &[LabeledPair],
    val: &[LabeledPair],
    tc: &TrainConfig,
) -> Result<ClassifierModel<T>> {
    let vals = [ValSet::new("val", val)];
    let iters = tc.finetune_iterations;
    let (m, _) = fit_end_to_end(base, &refs(train), &vals, tc, iters, "finetune", derive_seed(tc.seed, "finetune"))?.remove(0);
    Ok(m)
}

/// Trains only the head on encoder features that stay fixed. The encoder
/// bytes of the result equal those of `base`.
pub fn train_stage2_lastlayer<T: Scalar>(
    base: &ClassifierModel<T>,
    train: &[LabeledPair],
    val: &[LabeledPair],
    tc: &TrainConfig,
) -> Result<ClassifierModel<T>> {
    let train_features = base.pair_features(&refs(train))?;
    let val_features = base.pair_features(&refs(val))?;
    let train_labels: Vec<u8> = train.iter().map(|p| p.label).collect();
    let val_labels: Vec<u8> = val.iter().map(|p| p.label).collect();
    train_head(base, &train_features, &train_labels, &val_features, &val_labels, tc)
}

/// Head-only training on precomputed pair features.
pub fn train_head<T: Scalar>(
    base: &ClassifierModel<T>,
    train_features: &[Vec<T>],
    train_labels: &[u8],
    val_features: &[Vec<T>],
    val_labels: &[u8],
    tc: &TrainConfig,
) -> Result<ClassifierModel<T>> {
    tc.validate()?;
    if train_features.is_empty() || train_features.len() != train_labels.len() {
        return Err(config("stage 2: synthetic training data is empty"));
    }
    if val_features.is_empty() || val_features.len() != val_labels.len() {
        return Err(config("stage 2: validation data is empty"));
    }
    let d = 2 * base.metadata.encoder.width;
    let mut model = base.clone();
    let mut tracker = Tracker::new();
    let mut adam = Adam::new(AdamConfig::default(), &model.params);
    let mut r = rng(derive_seed(tc.seed, "stage2"));
    let mut curve = Vec::new();
    let iterations = tc.finetune_iterations.max(1);
    for step in 0..iterations {
        let picks = sample_indices(train_features.len(), tc.batch_size, &mut r);
        let data: Vec<T> = picks.iter().flat_map(|&i| train_features[i].iter().copied()).collect();
        let targets: Vec<T> = picks.iter().map(|&i| T::lit(train_labels[i] as f64)).collect();
        let grads = {
            let mut g = Graph::new(&model.params).freeze(|n| !is_head(n));
            let f = g.input(Tensor::new([picks.len(), d], data)?);
            let z = model.layers.head(&mut g, f)?;
            let loss = g.bce_with_logits(z, &targets)?;
            curve.push(finite_loss(g.scalar(loss), "stage2", step)?);
            g.backward(loss)?
        };
        adam.step(&mut model.params, &grads, |_, name| is_head(name).then_some(tc.lr_head));
        let done = step + 1;
        if done % tc.eval_every == 0 || done == iterations {
            let score = auprc(&model.head_logits(val_features)?, val_labels)?;
            tracker.record(done, score, &model.params);
            if tracker.stale >= tc.patience {
                break;
            }
        }
    }
    let (params, history) = tracker.finish("stage2", &curve);
    model.params = params;
    model.metadata.best_iteration = history.best_iteration;
    model.metadata.stages.push(history);
    model.metadata.variant = Variant::R4;
    model.metadata.train = tc.clone();
    Ok(model)
}

/// Uniform sampling over the concatenation of real and synthetic pairs.
pub fn joint_pool<'a>(real: &'a [LabeledPair], synthetic: &'a [LabeledPair]) -> Vec<&'a LabeledPair> {
    real.iter().chain(synthetic).collect()
}

/// Trains one variant:
/// R0 real source only; R1 synthetic only; R2 both, sampled uniformly;
/// R3 R0 then end-to-end on synthetic; R4 R0 then head-only on synthetic.
pub fn train_variant<T: Scalar>(
    variant: Variant,
    real_source: Option<&[LabeledPair]>,
    synthetic: Option<&[LabeledPair]>,
    target_val: &[LabeledPair],
    encoder: &EncoderConfig,
    tc: &TrainConfig,
) -> Result<ClassifierModel<T>> {
    fn need<'a>(d: Option<&'a [LabeledPair]>, variant: Variant, what: &str) -> Result<&'a [LabeledPair]> {
        d.filter(|d| !d.is_empty()).ok_or_else(|| config(format!("variant {variant} needs {what} data")))
    }
    let mut model = match variant {
        Variant::R0 => train_stage1(need(real_source, variant, "real source")?, target_val, encoder, tc)?,
        Variant::R1 => train_stage1(need(synthetic, variant, "synthetic")?, target_val, encoder, tc)?,
        Variant::R2 => {
            let pool = joint_pool(need(real_source, variant, "real source")?, need(synthetic, variant, "synthetic")?);
            let vals = [ValSet::new("val", target_val)];
            train_stage1_multi(&pool, &vals, encoder, tc)?.remove(0)
        }
        Variant::R3 => {
            let syn = need(synthetic, variant, "synthetic")?;
            let base = train_stage1(need(real_source, variant, "real source")?, target_val, encoder, tc)?;
            finetune_end_to_end(&base, syn, target_val, tc)?
        }
        Variant::R4 => {
            let syn = need(synthetic, variant, "synthetic")?;
            let base = train_stage1(need(real_source, variant, "real source")?, target_val, encoder, tc)?;
            train_stage2_lastlayer(&base, syn, target_val, tc)?
        }
    };
    model.metadata.variant = variant;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_rule() {
        assert_eq!(decide(0.0), (0.5, 0));
        let (p, d) = decide(3.0);
        assert!((p - 0.952574).abs() < 1e-6 && d == 1);
        assert_eq!(decide(-3.0).1, 0);
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.0, 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(50.0, 1) < 1e-20);
        assert!(bce_loss(-800.0, 1).is_finite());
    }

    #[test]
    fn variant_names() {
        assert_eq!("r3".parse::<Variant>().unwrap(), Variant::R3);
        assert!("R9".parse::<Variant>().is_err());
    }
}
