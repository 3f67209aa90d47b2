//! The desk-scale benchmark: foundation models, per-target synthesis,
//! transfer matrices over classifier variants, and the volume sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    finetune_end_to_end, joint_pool, train_head, train_stage1_multi, ClassifierModel, EncoderConfig, TrainConfig,
    ValSet, Validation, Variant,
};
use crate::error::{config, contract, Result};
use crate::eval::auprc;
use crate::maskgen::{finetune_adapters, train_generator, AdapterConfig, GeneratorConfig, GeneratorModel};
use crate::prompts::{build_pool, sample_prompt, tokenize_prompt, PoolKind, Vocabulary};
use crate::raster::Image;
use crate::scorer::{train_scorer, MatchedPair, ScorerConfig, ScorerModel};
use crate::seed::{derive_seed, rng, sha256_hex};
use crate::synthesis::{synthesize_dataset, Models, SynthesisConfig, SynthesisTarget, SyntheticDataset};
use crate::tokens::TokenGrid;
use crate::toyworld::{
    benchmark_domains, build_dataset, random_domain, render_entry, render_pair, split_dataset, validate_domains,
    DatasetManifest, DomainSpec, LabeledPair, Record, Split, SplitFractions, TargetExample,
};
use crate::vqcodec::{train_codec, CodecConfig, CodecModel};

/// The broad procedural corpus the generative models are trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub domains: usize,
    pub pairs: usize,
    pub damage_rate: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { domains: 200, pairs: 3000, damage_rate: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub domains: Vec<DomainSpec>,
    pub pairs_per_domain: usize,
    pub damage_rate: f64,
    pub split: SplitFractions,
    pub corpus: CorpusConfig,
    pub codec: CodecConfig,
    pub generator: GeneratorConfig,
    pub scorer: ScorerConfig,
    pub adapter: AdapterConfig,
    pub synthesis: SynthesisConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            domains: benchmark_domains(),
            pairs_per_domain: 2000,
            damage_rate: 0.2,
            split: SplitFractions::default(),
            corpus: CorpusConfig::default(),
            codec: CodecConfig::default(),
            generator: GeneratorConfig::default(),
            scorer: ScorerConfig::default(),
            adapter: AdapterConfig::default(),
            synthesis: SynthesisConfig { damaged_pool: AUTO_POOL.into(), ..SynthesisConfig::default() },
            encoder: EncoderConfig::default(),
            train: TrainConfig::desk(),
            replicates: 3,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    /// A miniature configuration that runs end to end in seconds.
    pub fn smoke() -> Self {
        Self {
            pairs_per_domain: 60,
            corpus: CorpusConfig { domains: 10, pairs: 80, damage_rate: 0.5 },
            codec: CodecConfig { iterations: 20, batch_size: 8, ..CodecConfig::default() },
            generator: GeneratorConfig { iterations: 10, batch_size: 8, width: 32, blocks: 1, ..GeneratorConfig::default() },
            scorer: ScorerConfig { iterations: 10, batch_size: 4, ..ScorerConfig::default() },
            adapter: AdapterConfig { iterations: 5, ..AdapterConfig::default() },
            synthesis: SynthesisConfig { num_candidates: 2, damaged_pool: AUTO_POOL.into(), ..SynthesisConfig::default() },
            train: TrainConfig { max_iterations: 10, eval_every: 5, finetune_iterations: 10, batch_size: 8, ..TrainConfig::desk() },
            replicates: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_domains(&self.domains)?;
        if self.domains.len() < 2 {
            return Err(config("a transfer experiment needs at least two domains"));
        }
        if self.pairs_per_domain < 10 || self.replicates == 0 {
            return Err(config("need at least 10 pairs per domain and one replicate"));
        }
        self.split.validate()?;
        self.codec.validate()?;
        self.generator.validate()?;
        self.scorer.validate()?;
        for d in &self.domains {
            synthesis_config(self, d).validate()?;
        }
        self.encoder.validate()?;
        self.train.validate()
    }

    /// Copies the global seed down the hash chain into every stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.codec.seed = derive_seed(self.seed, "codec");
        c.generator.seed = derive_seed(self.seed, "generator");
        c.scorer.seed = derive_seed(self.seed, "scorer");
        c.adapter.seed = derive_seed(self.seed, "adapter");
        c.synthesis.seed = derive_seed(self.seed, "synthesis");
        c.train.seed = derive_seed(self.seed, "classifier");
        c
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn foundation_hash(&self) -> String {
        let key = ("corpus-v2", &self.corpus, &self.codec, &self.generator, &self.scorer, self.seed);
        sha256_hex(serde_json::to_string(&key).expect("config serializes").as_bytes())
    }
}

/// Rendered splits of one benchmark domain.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub train: Vec<LabeledPair>,
    pub val: Vec<LabeledPair>,
    pub test: Vec<LabeledPair>,
    pub train_ids: Vec<String>,
    pub train_paths: Vec<String>,
}

impl DomainData {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    /// The target side seen by synthesis: train pre-images only.
    pub fn targets(&self) -> Vec<SynthesisTarget> {
        self.train
            .iter()
            .zip(self.train_ids.iter().zip(&self.train_paths))
            .map(|(p, (id, path))| SynthesisTarget {
                id: id.clone(),
                pre_path: path.clone(),
                example: TargetExample { pre: p.pre.clone(), domain: p.domain.clone() },
            })
            .collect()
    }
}

/// The domain's procedural manifest with its train, val and test entries.
pub fn domain_manifest(spec: &DomainSpec, cfg: &BenchmarkConfig) -> Result<DatasetManifest> {
    let seed = derive_seed(cfg.seed, &format!("data/{}", spec.name));
    let manifest = build_dataset(spec, cfg.pairs_per_domain, cfg.damage_rate, seed)?;
    let [train, val, test] = split_dataset(&manifest, cfg.split, derive_seed(seed, "split"))?;
    Ok(DatasetManifest { root: PathBuf::new(), entries: [train, val, test].into_iter().flat_map(|m| m.entries).collect() })
}

impl DomainData {
    /// `pairs` holds the rendered or loaded images of `manifest.entries`, in order.
    pub fn from_pairs(spec: &DomainSpec, manifest: &DatasetManifest, pairs: Vec<LabeledPair>) -> Result<Self> {
        if pairs.len() != manifest.entries.len() {
            return Err(contract(format!("{} pairs for {} manifest entries", pairs.len(), manifest.entries.len())));
        }
        let mut d = DomainData {
            spec: spec.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            train_ids: Vec::new(),
            train_paths: Vec::new(),
        };
        for (e, p) in manifest.entries.iter().zip(pairs) {
            match e.split {
                Split::Train => {
                    d.train_ids.push(e.id.clone());
                    d.train_paths.push(e.pre_path.clone());
                    d.train.push(p);
                }
                Split::Val => d.val.push(p),
                Split::Test => d.test.push(p),
            }
        }
        if d.train.is_empty() || d.val.is_empty() || d.test.is_empty() {
            return Err(config(format!("domain {} needs nonempty train, val and test splits", spec.name)));
        }
        Ok(d)
    }

    /// Reads a manifest written by `materialize` together with its images.
    pub fn load(spec: &DomainSpec, manifest_path: &Path) -> Result<Self> {
        let m = DatasetManifest::read_jsonl(manifest_path)?;
        let pairs = m
            .load_records()?
            .into_iter()
            .map(|r| match r {
                Record::Pair(p) => Ok(p),
                Record::Target(_) => Err(contract(format!("{} has unlabeled entries", manifest_path.display()))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_pairs(spec, &m, pairs)
    }
}

pub fn prepare_domain(spec: &DomainSpec, cfg: &BenchmarkConfig) -> Result<DomainData> {
    let m = domain_manifest(spec, cfg)?;
    let pairs = m.entries.iter().map(|e| render_entry(spec, e)).collect::<Result<Vec<_>>>()?;
    DomainData::from_pairs(spec, &m, pairs)
}

/// Codec, generator and scorer trained once on the broad corpus.
pub struct Foundation {
    pub codec: CodecModel<f32>,
    pub generator: GeneratorModel<f32>,
    pub scorer: ScorerModel<f32>,
}

/// One corpus scene: the rendered pair plus one prompt describing each image.
pub struct CorpusItem {
    pub pair: LabeledPair,
    pub pre_prompt: String,
    pub post_prompt: String,
}

/// The broad corpus the generative models learn from.
pub fn corpus(cfg: &BenchmarkConfig) -> Vec<CorpusItem> {
    let undamaged = build_pool(PoolKind::ToyUndamaged);
    let mut r = rng(derive_seed(cfg.seed, "corpus/prompts"));
    let threshold = (cfg.corpus.damage_rate * 1000.0).round() as u64;
    (0..cfg.corpus.pairs)
        .map(|i| {
            let d = random_domain(i % cfg.corpus.domains.max(1), derive_seed(cfg.seed, "corpus/domains"));
            let damaged = derive_seed(cfg.seed, &format!("corpus/label/{i}")) % 1000 < threshold;
            let pair = render_pair(&d, derive_seed(cfg.seed, &format!("corpus/scene/{i}")), damaged);
            let pool = if damaged { build_pool(PoolKind::ToyDamaged(d.disaster_kind)) } else { undamaged.clone() };
            let post_prompt = sample_prompt(&pool, &mut r).text.clone();
            let pre_prompt = sample_prompt(&undamaged, &mut r).text.clone();
            CorpusItem { pair, pre_prompt, post_prompt }
        })
        .collect()
}

fn corpus_images(items: &[CorpusItem]) -> Vec<Image> {
    items.iter().flat_map(|c| [c.pair.pre.clone(), c.pair.post.clone()]).collect()
}

fn corpus_prompts(items: &[CorpusItem], vocab: &Vocabulary) -> Vec<Vec<u32>> {
    items
        .iter()
        .flat_map(|c| [tokenize_prompt(&c.pre_prompt, vocab), tokenize_prompt(&c.post_prompt, vocab)])
        .collect()
}

pub fn train_foundation_codec(cfg: &BenchmarkConfig, items: &[CorpusItem]) -> Result<CodecModel<f32>> {
    let t = Instant::now();
    let codec = train_codec::<f32>(&corpus_images(items), &cfg.codec)?;
    info!("codec trained in {:.0?}, held-out mse {:.5}", t.elapsed(), codec.metadata.heldout_mse);
    Ok(codec)
}

pub fn train_foundation_generator(
    cfg: &BenchmarkConfig,
    items: &[CorpusItem],
    codec: &CodecModel<f32>,
) -> Result<GeneratorModel<f32>> {
    let t = Instant::now();
    let vocab = Vocabulary::builtin();
    let images = corpus_images(items);
    let refs: Vec<&Image> = images.iter().collect();
    let grids = codec.tokenize_batch(&refs)?;
    let generator = train_generator::<f32>(&grids, &corpus_prompts(items, &vocab), &vocab, &codec.hash(), &cfg.generator)?;
    info!("generator trained in {:.0?}", t.elapsed());
    Ok(generator)
}

pub fn train_foundation_scorer(cfg: &BenchmarkConfig, items: &[CorpusItem]) -> Result<ScorerModel<f32>> {
    let t = Instant::now();
    let vocab = Vocabulary::builtin();
    let pairs: Vec<MatchedPair> = corpus_images(items)
        .into_iter()
        .zip(corpus_prompts(items, &vocab))
        .map(|(image, prompt)| MatchedPair { image, prompt })
        .collect();
    let scorer = train_scorer::<f32>(&pairs, &vocab, &cfg.scorer)?;
    info!("scorer trained in {:.0?}", t.elapsed());
    Ok(scorer)
}

impl Foundation {
    pub fn train(cfg: &BenchmarkConfig) -> Result<Self> {
        let items = corpus(cfg);
        let codec = train_foundation_codec(cfg, &items)?;
        let generator = train_foundation_generator(cfg, &items, &codec)?;
        let scorer = train_foundation_scorer(cfg, &items)?;
        Ok(Self { codec, generator, scorer })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.codec.save(&dir.join("codec"))?;
        self.generator.save(&dir.join("generator"))?;
        self.scorer.save(&dir.join("scorer"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            codec: CodecModel::load(&dir.join("codec"))?,
            generator: GeneratorModel::load(&dir.join("generator"))?,
            scorer: ScorerModel::load(&dir.join("scorer"))?,
        })
    }

    /// Loads from `cache/<hash>` when present, otherwise trains and saves.
    pub fn cached(cfg: &BenchmarkConfig, cache: Option<&Path>) -> Result<Self> {
        let Some(root) = cache else { return Self::train(cfg) };
        let dir = root.join(format!("foundation-{}", &cfg.foundation_hash()[..16]));
        if dir.join("scorer.json").exists() {
            info!("loading foundation models from {}", dir.display());
            return Self::load(&dir);
        }
        let f = Self::train(cfg)?;
        f.save(&dir)?;
        Ok(f)
    }
}

fn adapter_prompts(cfg: &BenchmarkConfig, vocab: &Vocabulary, n: usize, tag: &str) -> Vec<Vec<u32>> {
    let pool = build_pool(PoolKind::ToyUndamaged);
    let mut r = rng(derive_seed(cfg.adapter.seed, &format!("prompts/{tag}")));
    (0..n).map(|_| tokenize_prompt(&sample_prompt(&pool, &mut r).text, vocab)).collect()
}

fn pre_tokens(codec: &CodecModel<f32>, pairs: &[LabeledPair]) -> Result<Vec<TokenGrid>> {
    let refs: Vec<&Image> = pairs.iter().map(|p| &p.pre).collect();
    codec.tokenize_batch(&refs)
}

/// Tunes adapters of `base` on the target's train pre-images, each paired
/// with an undamaged prompt. `cfg` must be resolved.
pub fn adapt_generator(
    cfg: &BenchmarkConfig,
    codec: &CodecModel<f32>,
    base: &GeneratorModel<f32>,
    target: &DomainData,
) -> Result<GeneratorModel<f32>> {
    let t = Instant::now();
    let grids = pre_tokens(codec, &target.train)?;
    let prompts = adapter_prompts(cfg, base.vocabulary(), grids.len(), target.name());
    let ac = AdapterConfig { seed: derive_seed(cfg.adapter.seed, target.name()), ..cfg.adapter.clone() };
    let g = finetune_adapters(base, &grids, &prompts, &ac)?;
    info!("adapters for {} tuned in {:.0?}", target.name(), t.elapsed());
    Ok(g)
}

/// Masked-token CE of the base and adapted generators on the target's
/// held-out (val and test) pre-images, with identical masks.
pub fn generator_check(
    cfg: &BenchmarkConfig,
    codec: &CodecModel<f32>,
    base: &GeneratorModel<f32>,
    adapted: &GeneratorModel<f32>,
    target: &DomainData,
) -> Result<GeneratorCheck> {
    let held: Vec<LabeledPair> = target.val.iter().chain(&target.test).cloned().collect();
    let grids = pre_tokens(codec, &held)?;
    let prompts = adapter_prompts(cfg, base.vocabulary(), grids.len(), &format!("{}/held-out", target.name()));
    let seed = derive_seed(cfg.seed, &format!("ce/{}", target.name()));
    Ok(GeneratorCheck {
        target: target.name().to_owned(),
        base_ce: base.masked_token_loss(&grids, &prompts, seed)?,
        finetuned_ce: adapted.masked_token_loss(&grids, &prompts, seed)?,
    })
}

/// Damaged-pool setting meaning "the target's own disaster kind".
pub const AUTO_POOL: &str = "auto";

/// Synthesis settings for one target: its own damaged pool and seed.
pub fn synthesis_config(cfg: &BenchmarkConfig, target: &DomainSpec) -> SynthesisConfig {
    SynthesisConfig {
        damaged_pool: if cfg.synthesis.damaged_pool == AUTO_POOL {
            PoolKind::ToyDamaged(target.disaster_kind).to_string()
        } else {
            cfg.synthesis.damaged_pool.clone()
        },
        seed: derive_seed(cfg.synthesis.seed, &target.name),
        ..cfg.synthesis.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    SingleSource,
    MultiSource,
}

impl FromStr for Protocol {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_source" => Ok(Protocol::SingleSource),
            "multi_source" => Ok(Protocol::MultiSource),
            _ => Err(config(format!("unknown protocol {s:?} (single_source or multi_source)"))),
        }
    }
}

/// A report column: a training variant, or R4 on data from the
/// adapter-tuned generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Column {
    Variant(Variant),
    R4Finetuned,
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Column::Variant(v) => write!(f, "{v}"),
            Column::R4Finetuned => write!(f, "R4-ft"),
        }
    }
}

impl FromStr for Column {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("r4-ft") {
            Ok(Column::R4Finetuned)
        } else {
            Ok(Column::Variant(s.parse()?))
        }
    }
}

pub fn parse_columns(list: &str) -> Result<Vec<Column>> {
    list.split(',').map(|s| s.trim().parse()).collect()
}

/// One transfer setting: sources to target.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Setting {
    pub sources: Vec<String>,
    pub target: String,
}

impl Setting {
    pub fn label(&self) -> String {
        format!("{} -> {}", self.sources.join("+"), self.target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub setting: Setting,
    pub column: Column,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheck {
    pub target: String,
    pub base_ce: f64,
    pub finetuned_ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub protocol: Protocol,
    pub columns: Vec<Column>,
    pub seeds: Vec<u64>,
    pub settings: Vec<Setting>,
    pub cells: Vec<CellResult>,
    pub generator_checks: Vec<GeneratorCheck>,
    pub config_hash: String,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl TransferReport {
    pub fn cell(&self, setting: &Setting, column: Column) -> Option<&CellResult> {
        self.cells.iter().find(|c| &c.setting == setting && c.column == column)
    }

    /// Unweighted mean over settings of the per-setting means.
    pub fn average(&self, column: Column) -> f64 {
        mean(&self.cells.iter().filter(|c| c.column == column).map(|c| c.mean).collect::<Vec<_>>())
    }

    /// Column average minus the R0 average.
    pub fn delta(&self, column: Column) -> f64 {
        self.average(column) - self.average(Column::Variant(Variant::R0))
    }

    /// One row per transfer setting, one column per variant, AUPRC in
    /// points, then the average and the gain over R0.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let title = match self.protocol {
            Protocol::SingleSource => "Single-source transfer",
            Protocol::MultiSource => "Multi-source transfer",
        };
        let _ = writeln!(s, "{title} (AUPRC x100, mean over {} seeds)", self.seeds.len());
        let width = self.settings.iter().map(|x| x.label().len()).max().unwrap_or(10).max(12);
        let _ = write!(s, "{:<width$}", "Setting");
        for c in &self.columns {
            let _ = write!(s, " {:>8}", c.to_string());
        }
        s.push('\n');
        for st in &self.settings {
            let _ = write!(s, "{:<width$}", st.label());
            for c in &self.columns {
                let v = self.cell(st, *c).map_or(f64::NAN, |x| x.mean);
                let _ = write!(s, " {:>8.2}", 100.0 * v);
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<width$}", "Avg.");
        for c in &self.columns {
            let _ = write!(s, " {:>8.2}", 100.0 * self.average(*c));
        }
        s.push('\n');
        if self.columns.contains(&Column::Variant(Variant::R0)) {
            let _ = write!(s, "{:<width$}", "Delta vs R0");
            for c in &self.columns {
                let _ = write!(s, " {:>+8.2}", 100.0 * self.delta(*c));
            }
            s.push('\n');
        }
        for g in &self.generator_checks {
            let _ = writeln!(s, "masked-token CE on {}: base {:.4}, adapted {:.4}", g.target, g.base_ce, g.finetuned_ce);
        }
        s
    }

    /// Variants as rows with their descriptions, one column per target.
    pub fn ablation_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Effect of training choices (AUPRC x100, mean over {} seeds)", self.seeds.len());
        let _ = write!(s, "{:<4} {:<36}", "", "Training");
        for st in &self.settings {
            let _ = write!(s, " {:>16}", st.target);
        }
        let _ = writeln!(s, " {:>8}", "Avg.");
        for c in &self.columns {
            let desc = match c {
                Column::Variant(v) => v.description(),
                Column::R4Finetuned => "Last-Layer Finetune, adapted generator",
            };
            let _ = write!(s, "{:<4} {:<36}", c.to_string(), desc);
            for st in &self.settings {
                let _ = write!(s, " {:>16.2}", 100.0 * self.cell(st, *c).map_or(f64::NAN, |x| x.mean));
            }
            let _ = writeln!(s, " {:>8.2}", 100.0 * self.average(*c));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumePoint {
    pub fraction: f64,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeSeries {
    pub target: String,
    pub points: Vec<VolumePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub series: Vec<VolumeSeries>,
    /// Every smaller-volume subset was contained in each larger one.
    pub nested: bool,
    pub config_hash: String,
}

impl VolumeReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "R4 AUPRC x100 by synthetic volume (fraction of target pre-images)");
        let _ = write!(s, "{:<18}", "Target");
        for f in &self.fractions {
            let _ = write!(s, " {:>8}", format!("{:.0}%", 100.0 * f));
        }
        s.push('\n');
        for ser in &self.series {
            let _ = write!(s, "{:<18}", ser.target);
            for p in &ser.points {
                let _ = write!(s, " {:>8.2}", 100.0 * p.mean);
            }
            s.push('\n');
        }
        let _ = writeln!(s, "nested subsets: {}", self.nested);
        s
    }
}

type StageKey = (Vec<String>, u64);

/// Lazily computed, cached pieces of the benchmark.
pub struct Benchmark {
    pub cfg: BenchmarkConfig,
    pub data: Vec<DomainData>,
    pub foundation: Foundation,
    adapted: BTreeMap<String, GeneratorModel<f32>>,
    synthetic: BTreeMap<(String, bool), SyntheticDataset>,
    stage1: BTreeMap<StageKey, BTreeMap<String, ClassifierModel<f32>>>,
    r1: BTreeMap<(String, u64), ClassifierModel<f32>>,
}

impl Benchmark {
    pub fn new(cfg: &BenchmarkConfig, cache: Option<&Path>) -> Result<Self> {
        let cfg = cfg.resolved();
        cfg.validate()?;
        let t = Instant::now();
        let data = cfg.domains.iter().map(|d| prepare_domain(d, &cfg)).collect::<Result<Vec<_>>>()?;
        info!("rendered {} domains in {:.0?}", data.len(), t.elapsed());
        let foundation = Foundation::cached(&cfg, cache)?;
        Ok(Self::with_parts(cfg, data, foundation))
    }

    pub fn with_parts(cfg: BenchmarkConfig, data: Vec<DomainData>, foundation: Foundation) -> Self {
        Self {
            cfg,
            data,
            foundation,
            adapted: BTreeMap::new(),
            synthetic: BTreeMap::new(),
            stage1: BTreeMap::new(),
            r1: BTreeMap::new(),
        }
    }

    pub fn domain(&self, name: &str) -> Result<&DomainData> {
        self.data.iter().find(|d| d.name() == name).ok_or_else(|| config(format!("unknown domain {name:?}")))
    }

    pub fn replicate_seed(&self, r: usize) -> u64 {
        derive_seed(self.cfg.seed, &format!("replicate/{r}"))
    }

    /// The generator with adapters tuned on the target's train pre-images.
    pub fn adapted_generator(&mut self, target: &str) -> Result<&GeneratorModel<f32>> {
        if !self.adapted.contains_key(target) {
            let g = adapt_generator(&self.cfg, &self.foundation.codec, &self.foundation.generator, self.domain(target)?)?;
            self.adapted.insert(target.to_owned(), g);
        }
        Ok(&self.adapted[target])
    }

    pub fn generator_check(&mut self, target: &str) -> Result<GeneratorCheck> {
        self.adapted_generator(target)?;
        generator_check(&self.cfg, &self.foundation.codec, &self.foundation.generator, &self.adapted[target], self.domain(target)?)
    }

    pub fn synthesis_config(&self, target: &str) -> Result<SynthesisConfig> {
        Ok(synthesis_config(&self.cfg, &self.domain(target)?.spec))
    }

    /// Synthetic pairs for `target` from the base or the adapted generator.
    pub fn synthetic(&mut self, target: &str, adapted: bool) -> Result<&SyntheticDataset> {
        let key = (target.to_owned(), adapted);
        if !self.synthetic.contains_key(&key) {
            if adapted {
                self.adapted_generator(target)?;
            }
            let t = Instant::now();
            let scfg = self.synthesis_config(target)?;
            let generator = if adapted { &self.adapted[target] } else { &self.foundation.generator };
            let models = Models::new(&self.foundation.codec, generator, &self.foundation.scorer)?;
            let ds = synthesize_dataset(&self.domain(target)?.targets(), &scfg, &models)?;
            info!("synthesized {} pairs for {target} (adapted: {adapted}) in {:.0?}", ds.entries.len(), t.elapsed());
            self.synthetic.insert(key.clone(), ds);
        }
        Ok(&self.synthetic[&key])
    }

    fn val_sets<'a>(&'a self, sources: &[String], targets: &[String]) -> Result<Vec<ValSet<'a>>> {
        match self.cfg.train.validation {
            Validation::Target => {
                targets.iter().map(|t| Ok(ValSet::new(t.clone(), &self.domain(t)?.val))).collect()
            }
            Validation::Source => {
                let mut pairs = Vec::new();
                for s in sources {
                    pairs.extend(self.domain(s)?.val.iter());
                }
                Ok(vec![ValSet { name: "source".into(), pairs }])
            }
        }
    }

    fn val_name(&self, target: &str) -> String {
        match self.cfg.train.validation {
            Validation::Target => target.to_owned(),
            Validation::Source => "source".into(),
        }
    }

    fn train_config(&self, seed: u64, tag: &str) -> TrainConfig {
        TrainConfig { seed: derive_seed(seed, tag), ..self.cfg.train.clone() }
    }

    /// Stage-1 models on `sources`, one early-stopped checkpoint per target
    /// validation set.
    fn ensure_stage1(&mut self, sources: &[String], targets: &[String], replicate: u64) -> Result<()> {
        let key = (sources.to_vec(), replicate);
        if self.stage1.contains_key(&key) {
            return Ok(());
        }
        let t = Instant::now();
        let mut train = Vec::new();
        for s in sources {
            train.extend(self.domain(s)?.train.iter());
        }
        let vals = self.val_sets(sources, targets)?;
        let names: Vec<String> = vals.iter().map(|v| v.name.clone()).collect();
        let tc = self.train_config(replicate, &format!("stage1/{}", sources.join("+")));
        let models = train_stage1_multi::<f32>(&train, &vals, &self.cfg.encoder, &tc)?;
        info!("stage 1 on {} trained in {:.0?}", sources.join("+"), t.elapsed());
        self.stage1.insert(key, names.into_iter().zip(models).collect());
        Ok(())
    }

    fn stage1_model(&self, sources: &[String], target: &str, replicate: u64) -> &ClassifierModel<f32> {
        &self.stage1[&(sources.to_vec(), replicate)][&self.val_name(target)]
    }

    fn score(model: &ClassifierModel<f32>, test: &[LabeledPair]) -> Result<f64> {
        let labels: Vec<u8> = test.iter().map(|p| p.label).collect();
        auprc(&model.logits(test)?, &labels)
    }

    fn r4_score(&mut self, setting: &Setting, replicate: u64, adapted: bool, fraction: f64) -> Result<(f64, usize)> {
        let syn = self.synthetic(&setting.target, adapted)?;
        let syn = if fraction < syn.provenance.config.volume_fraction { syn.subset(fraction)? } else { syn.clone() };
        let base = self.stage1_model(&setting.sources, &setting.target, replicate);
        let pairs = syn.pairs();
        let refs: Vec<&LabeledPair> = pairs.iter().collect();
        let target = self.domain(&setting.target)?;
        let val_refs: Vec<&LabeledPair> = target.val.iter().collect();
        let train_f = base.pair_features(&refs)?;
        let val_f = base.pair_features(&val_refs)?;
        let labels = syn.labels();
        let val_labels: Vec<u8> = target.val.iter().map(|p| p.label).collect();
        let tc = self.train_config(replicate, &format!("stage2/{}", setting.label()));
        let model = train_head(base, &train_f, &labels, &val_f, &val_labels, &tc)?;
        Ok((Self::score(&model, &target.test)?, syn.entries.len()))
    }

    fn column_score(&mut self, setting: &Setting, column: Column, replicate: u64) -> Result<f64> {
        let target = setting.target.clone();
        match column {
            Column::Variant(Variant::R0) => {
                Self::score(self.stage1_model(&setting.sources, &target, replicate), &self.domain(&target)?.test)
            }
            Column::Variant(Variant::R4) => Ok(self.r4_score(setting, replicate, false, 1.0)?.0),
            Column::R4Finetuned => Ok(self.r4_score(setting, replicate, true, 1.0)?.0),
            Column::Variant(Variant::R3) => {
                let syn = self.synthetic(&target, false)?.pairs();
                let base = self.stage1_model(&setting.sources, &target, replicate);
                let tc = self.train_config(replicate, &format!("r3/{}", setting.label()));
                let m = finetune_end_to_end(base, &syn, &self.domain(&target)?.val, &tc)?;
                Self::score(&m, &self.domain(&target)?.test)
            }
            Column::Variant(Variant::R1) => {
                let key = (target.clone(), replicate);
                if !self.r1.contains_key(&key) {
                    let syn = self.synthetic(&target, false)?.pairs();
                    let refs: Vec<&LabeledPair> = syn.iter().collect();
                    let vals = self.val_sets(&[], std::slice::from_ref(&target))?;
                    let vals = if vals.is_empty() || vals[0].pairs.is_empty() {
                        vec![ValSet::new(target.clone(), &self.domain(&target)?.val)]
                    } else {
                        vals
                    };
                    let tc = self.train_config(replicate, &format!("r1/{target}"));
                    let m = train_stage1_multi::<f32>(&refs, &vals, &self.cfg.encoder, &tc)?.remove(0);
                    self.r1.insert(key.clone(), m);
                }
                Self::score(&self.r1[&key], &self.domain(&target)?.test)
            }
            Column::Variant(Variant::R2) => {
                let syn = self.synthetic(&target, false)?.pairs();
                let mut real = Vec::new();
                for s in &setting.sources {
                    real.extend(self.domain(s)?.train.iter().cloned());
                }
                let pool = joint_pool(&real, &syn);
                let vals = self.val_sets(&setting.sources, std::slice::from_ref(&target))?;
                let tc = self.train_config(replicate, &format!("r2/{}", setting.label()));
                let m = train_stage1_multi::<f32>(&pool, &vals, &self.cfg.encoder, &tc)?.remove(0);
                Self::score(&m, &self.domain(&target)?.test)
            }
        }
    }

    /// Transfer settings over `domains` (all benchmark domains when empty).
    pub fn settings(&self, protocol: Protocol, domains: &[String]) -> Result<Vec<Setting>> {
        let names: Vec<String> =
            if domains.is_empty() { self.data.iter().map(|d| d.name().to_owned()).collect() } else { domains.to_vec() };
        if names.len() < 2 {
            return Err(config("a transfer matrix needs at least two domains"));
        }
        for n in &names {
            self.domain(n)?;
        }
        Ok(match protocol {
            Protocol::SingleSource => names
                .iter()
                .flat_map(|s| {
                    names.iter().filter(move |t| *t != s).map(move |t| Setting { sources: vec![s.clone()], target: t.clone() })
                })
                .collect(),
            Protocol::MultiSource => names
                .iter()
                .map(|t| Setting { sources: names.iter().filter(|s| *s != t).cloned().collect(), target: t.clone() })
                .collect(),
        })
    }

    pub fn run_transfer_matrix(
        &mut self,
        protocol: Protocol,
        domains: &[String],
        columns: &[Column],
    ) -> Result<TransferReport> {
        let settings = self.settings(protocol, domains)?;
        let seeds: Vec<u64> = (0..self.cfg.replicates).map(|r| self.replicate_seed(r)).collect();
        let mut per_cell: BTreeMap<(usize, Column), Vec<f64>> = BTreeMap::new();
        for &seed in &seeds {
            let mut groups: BTreeMap<Vec<String>, Vec<String>> = BTreeMap::new();
            for s in &settings {
                groups.entry(s.sources.clone()).or_default().push(s.target.clone());
            }
            for (sources, targets) in &groups {
                self.ensure_stage1(sources, targets, seed)?;
            }
            for (i, s) in settings.iter().enumerate() {
                for &c in columns {
                    let t = Instant::now();
                    let v = self.column_score(s, c, seed)?;
                    info!("{} {c} seed {seed:x}: {:.4} ({:.0?})", s.label(), v, t.elapsed());
                    per_cell.entry((i, c)).or_default().push(v);
                }
            }
        }
        let mut cells = Vec::new();
        for (i, s) in settings.iter().enumerate() {
            for &c in columns {
                let v = per_cell.remove(&(i, c)).unwrap_or_default();
                cells.push(CellResult { setting: s.clone(), column: c, mean: mean(&v), per_seed: v });
            }
        }
        let mut generator_checks = Vec::new();
        if columns.contains(&Column::R4Finetuned) {
            let targets: BTreeSet<&String> = settings.iter().map(|s| &s.target).collect();
            for t in targets {
                generator_checks.push(self.generator_check(t)?);
            }
        }
        Ok(TransferReport {
            protocol,
            columns: columns.to_vec(),
            seeds,
            settings,
            cells,
            generator_checks,
            config_hash: self.cfg.hash(),
        })
    }

    /// R4 under the multi-source protocol at each synthetic volume.
    pub fn volume_sweep(&mut self, fractions: &[f64], domains: &[String]) -> Result<VolumeReport> {
        if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(config("volume fractions must lie in (0, 1]"));
        }
        if fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config("volume fractions must be strictly increasing"));
        }
        let settings = self.settings(Protocol::MultiSource, domains)?;
        let seeds: Vec<u64> = (0..self.cfg.replicates).map(|r| self.replicate_seed(r)).collect();
        let mut nested = true;
        let mut series = Vec::new();
        for s in &settings {
            let full = self.synthetic(&s.target, false)?.clone();
            let mut previous: Option<BTreeSet<usize>> = None;
            for &f in fractions {
                let ids: BTreeSet<usize> = full.subset(f)?.entries.iter().map(|e| e.target_index).collect();
                if let Some(p) = &previous {
                    nested &= p.is_subset(&ids) && p.len() < ids.len();
                }
                previous = Some(ids);
            }
            let mut points: Vec<VolumePoint> = fractions
                .iter()
                .map(|&f| VolumePoint { fraction: f, per_seed: Vec::new(), mean: f64::NAN, entries: 0 })
                .collect();
            for &seed in &seeds {
                self.ensure_stage1(&s.sources, std::slice::from_ref(&s.target), seed)?;
                for p in points.iter_mut() {
                    let (v, n) = self.r4_score(s, seed, false, p.fraction)?;
                    info!("volume {:.2} {} seed {seed:x}: {v:.4}", p.fraction, s.target);
                    p.per_seed.push(v);
                    p.entries = n;
                }
            }
            for p in points.iter_mut() {
                p.mean = mean(&p.per_seed);
            }
            series.push(VolumeSeries { target: s.target.clone(), points });
        }
        Ok(VolumeReport { fractions: fractions.to_vec(), seeds, series, nested, config_hash: self.cfg.hash() })
    }
}

/// Writes `value` as pretty JSON, creating parent directories.
pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| crate::Error::io(path, e))?;
    Ok(path.to_path_buf())
}
