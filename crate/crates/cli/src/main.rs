//! `aftermath`: reproducible commands for the synthetic-supervision pipeline.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aftermath::classifier::{train_variant, Validation, Variant};
use aftermath::eval::{evaluate, EvalReport};
use aftermath::experiment::{
    adapt_generator, corpus, domain_manifest, generator_check, parse_columns, synthesis_config, train_foundation_codec,
    train_foundation_generator, train_foundation_scorer, write_json, Benchmark, BenchmarkConfig, DomainData, Protocol,
    VolumeReport,
};
use aftermath::plot::{pr_plot, volume_plot};
use aftermath::seed::derive_seed;
use aftermath::synthesis::{synthesize_dataset, Models};
use aftermath::toyworld::{load_manifest, materialize, DomainSpec, LabeledPair, Record, Split};
use aftermath::{Classifier, Codec, Error, Generator, Result, Scorer};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use crate::config::{plan, resolve, sha256_file, Override, Plan, Preset, Resolved, Snapshot};

#[derive(Parser, Debug)]
#[command(name = "aftermath", version, about = "Synthetic post-disaster supervision for damage classifiers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Output root; every command writes below it.
    #[arg(long, env = "AFTERMATH_OUT", default_value = "aftermath-out", global = true)]
    out: PathBuf,
    /// JSON file with configuration keys (same layout as resolved_config.json's "config").
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting point for all settings.
    #[arg(long, value_enum, default_value = "desk", global = true)]
    preset: Preset,
    /// Global seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one configuration key, e.g. `--set codec.iterations=800`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Overwrite outputs produced with a different configuration.
    #[arg(long, global = true)]
    force: bool,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the benchmark domains to PNGs and JSONL manifests.
    GenData {
        /// Domains to write (default: all configured domains).
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
    },
    /// Train the vector-quantized codec on the procedural corpus.
    TrainCodec,
    /// Train the masked-token generator on corpus token grids.
    TrainGenerator {
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Tune generator adapters on a target domain's train pre-images.
    FinetuneGenerator {
        #[arg(long)]
        target: String,
        #[command(flatten)]
        models: ModelPaths,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the image-text scorer on the procedural corpus.
    TrainScorer,
    /// Generate labeled synthetic post-images for a target domain.
    Synthesize {
        #[arg(long)]
        target: String,
        /// Use the adapter-tuned generator of the target.
        #[arg(long)]
        adapted: bool,
        /// Fraction of target pre-images to edit (synthesis.volume_fraction).
        #[arg(long)]
        volume: Option<f64>,
        #[command(flatten)]
        models: ModelPaths,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one classifier variant (R0..R4) for a target domain.
    Train {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        target: String,
        /// Labeled source domains (default: every other configured domain).
        #[arg(long, value_delimiter = ',')]
        sources: Vec<String>,
        /// Directory with synthetic.jsonl (default: <out>/synthetic/<target>).
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a classifier checkpoint on one split of a domain.
    Evaluate {
        /// Checkpoint stem or the directory holding `classifier.json`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Target AUPRC for every transfer setting and variant.
    TransferMatrix {
        /// single_source or multi_source.
        #[arg(long, default_value = "multi_source")]
        protocol: Protocol,
        /// Report columns: R0..R4 and R4-ft (R4 with the adapter-tuned generator).
        #[arg(long, default_value = "R0,R1,R2,R3,R4,R4-ft")]
        variants: String,
        /// Number of replicate seeds (the `replicates` config key).
        #[arg(long)]
        seeds: Option<usize>,
        /// Domains taking part (default: all configured domains).
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
    },
    /// R4 target AUPRC as a function of synthetic volume.
    VolumeSweep {
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1")]
        fractions: Vec<f64>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
    },
    /// Draw SVG figures from saved reports.
    Plot {
        /// Volume-sweep report (report.json of volume-sweep).
        #[arg(long)]
        volume: Option<PathBuf>,
        /// Evaluation reports to overlay as precision-recall curves.
        #[arg(long = "eval")]
        evals: Vec<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct ModelPaths {
    #[arg(long)]
    codec: Option<PathBuf>,
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    scorer: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainCodec => "train-codec",
            Command::TrainGenerator { .. } => "train-generator",
            Command::FinetuneGenerator { .. } => "finetune-generator",
            Command::TrainScorer => "train-scorer",
            Command::Synthesize { .. } => "synthesize",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::TransferMatrix { .. } => "transfer-matrix",
            Command::VolumeSweep { .. } => "volume-sweep",
            Command::Plot { .. } => "plot",
        }
    }

    /// Named flags that stand for configuration keys.
    fn overrides(&self) -> Vec<Override> {
        let mut out = Vec::new();
        match self {
            Command::TransferMatrix { seeds: Some(n), .. } | Command::VolumeSweep { seeds: Some(n), .. } => {
                out.push(Override { key: "replicates".into(), value: json!(n), flag: "--seeds".into() })
            }
            Command::Synthesize { volume: Some(v), .. } => {
                out.push(Override { key: "synthesis.volume_fraction".into(), value: json!(v), flag: "--volume".into() })
            }
            _ => {}
        }
        out
    }
}

struct Ctx {
    out: PathBuf,
    resolved: Resolved,
    force: bool,
}

impl Ctx {
    /// The configuration with every stage seed derived from the global one.
    fn cfg(&self) -> BenchmarkConfig {
        self.resolved.config.resolved()
    }

    fn spec(&self, name: &str) -> Result<DomainSpec> {
        self.resolved
            .config
            .domains
            .iter()
            .find(|d| d.name == name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("domain {name:?} is not configured")))
    }

    fn model_dir(&self, name: &str) -> PathBuf {
        self.out.join("models").join(name)
    }

    fn data_dir(&self, data: &Option<PathBuf>) -> PathBuf {
        data.clone().unwrap_or_else(|| self.out.join("data"))
    }

    /// Runs `body` unless the same command already completed in `dir`.
    fn step(
        &self,
        command: &str,
        dir: &Path,
        args: Value,
        inputs: BTreeMap<String, String>,
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<()> {
        let mut snap = Snapshot::new(command, args, inputs, &self.resolved)?;
        if plan(dir, &snap, self.force)? == Plan::Skip {
            println!("{command}: outputs in {} are up to date; nothing to do", dir.display());
            return Ok(());
        }
        let stale = dir.join(config::SNAPSHOT);
        if stale.exists() {
            std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        body(dir)?;
        snap.outputs = config::hash_outputs(dir)?;
        snap.write(dir)?;
        println!("{command}: wrote {}", dir.display());
        Ok(())
    }
}

/// Accepts a checkpoint stem or a directory containing `<kind>.json`.
fn stem(path: &Path, kind: &str) -> PathBuf {
    if path.is_dir() {
        path.join(kind)
    } else {
        path.to_path_buf()
    }
}

fn load_domain(ctx: &Ctx, data: &Option<PathBuf>, name: &str) -> Result<(DomainData, String)> {
    let spec = ctx.spec(name)?;
    let path = ctx.data_dir(data).join(format!("{name}.jsonl"));
    if !path.exists() {
        return Err(Error::load(&path, "manifest not found; run `aftermath gen-data` first"));
    }
    let hash = sha256_file(&path)?;
    Ok((DomainData::load(&spec, &path)?, hash))
}

fn load_synthetic(dir: &Path) -> Result<(Vec<LabeledPair>, String)> {
    let path = dir.join("synthetic.jsonl");
    if !path.exists() {
        return Err(Error::load(&path, "synthetic manifest not found; run `aftermath synthesize` first"));
    }
    let pairs = load_manifest(&path)?
        .into_iter()
        .filter_map(|r| match r {
            Record::Pair(p) => Some(p),
            Record::Target(_) => None,
        })
        .collect();
    Ok((pairs, sha256_file(&path)?))
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut overrides = c.set.iter().map(|s| Override::parse_set(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = c.seed {
        overrides.push(Override { key: "seed".into(), value: json!(seed), flag: "--seed".into() });
    }
    overrides.extend(cli.command.overrides());
    let resolved = resolve(c.preset, c.config.as_deref(), &overrides)?;
    let ctx = Ctx { out: c.out.clone(), resolved, force: c.force };
    let name = cli.command.name();
    match &cli.command {
        Command::GenData { domains } => {
            let specs: Vec<DomainSpec> = if domains.is_empty() {
                ctx.resolved.config.domains.clone()
            } else {
                domains.iter().map(|d| ctx.spec(d)).collect::<Result<_>>()?
            };
            let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            ctx.step(name, &ctx.out.join("data"), json!({ "domains": names }), BTreeMap::new(), |dir| {
                for spec in &specs {
                    let m = domain_manifest(spec, &ctx.resolved.config)?;
                    let path = materialize(&m, spec, dir)?;
                    info!("{}: {} pairs -> {}", spec.name, m.entries.len(), path.display());
                }
                Ok(())
            })
        }
        Command::TrainCodec => ctx.step(name, &ctx.model_dir("codec"), json!({}), BTreeMap::new(), |dir| {
            let cfg = ctx.cfg();
            let codec = train_foundation_codec(&cfg, &corpus(&cfg))?;
            codec.save(&dir.join("codec"))
        }),
        Command::TrainGenerator { codec } => {
            let codec_stem = stem(codec.as_deref().unwrap_or(&ctx.model_dir("codec")), "codec");
            let codec = Codec::load(&codec_stem)?;
            let inputs = BTreeMap::from([("codec".to_owned(), codec.hash())]);
            ctx.step(name, &ctx.model_dir("generator"), json!({}), inputs, |dir| {
                let cfg = ctx.cfg();
                train_foundation_generator(&cfg, &corpus(&cfg), &codec)?.save(&dir.join("generator"))
            })
        }
        Command::TrainScorer => ctx.step(name, &ctx.model_dir("scorer"), json!({}), BTreeMap::new(), |dir| {
            let cfg = ctx.cfg();
            train_foundation_scorer(&cfg, &corpus(&cfg))?.save(&dir.join("scorer"))
        }),
        Command::FinetuneGenerator { target, models, data } => {
            let codec = Codec::load(&stem(models.codec.as_deref().unwrap_or(&ctx.model_dir("codec")), "codec"))?;
            let base =
                Generator::load(&stem(models.generator.as_deref().unwrap_or(&ctx.model_dir("generator")), "generator"))?;
            let (domain, data_hash) = load_domain(&ctx, data, target)?;
            let inputs = BTreeMap::from([
                ("codec".to_owned(), codec.hash()),
                ("generator".to_owned(), base.hash()),
                (format!("data/{target}"), data_hash),
            ]);
            ctx.step(name, &ctx.model_dir(&format!("generator-{target}")), json!({ "target": target }), inputs, |dir| {
                let cfg = ctx.cfg();
                let adapted = adapt_generator(&cfg, &codec, &base, &domain)?;
                let check = generator_check(&cfg, &codec, &base, &adapted, &domain)?;
                println!("masked-token CE on held-out {target}: base {:.4}, adapted {:.4}", check.base_ce, check.finetuned_ce);
                write_json(&dir.join("heldout_ce.json"), &check)?;
                adapted.save(&dir.join("generator"))
            })
        }
        Command::Synthesize { target, adapted, models, data, .. } => {
            let default_gen = ctx.model_dir(if *adapted { format!("generator-{target}") } else { "generator".into() }.as_str());
            let codec = Codec::load(&stem(models.codec.as_deref().unwrap_or(&ctx.model_dir("codec")), "codec"))?;
            let generator = Generator::load(&stem(models.generator.as_deref().unwrap_or(&default_gen), "generator"))?;
            let scorer = Scorer::load(&stem(models.scorer.as_deref().unwrap_or(&ctx.model_dir("scorer")), "scorer"))?;
            let (domain, data_hash) = load_domain(&ctx, data, target)?;
            let data_root = std::fs::canonicalize(ctx.data_dir(data)).map_err(|e| Error::io(ctx.data_dir(data), e))?;
            let inputs = BTreeMap::from([
                ("codec".to_owned(), codec.hash()),
                ("generator".to_owned(), generator.hash()),
                ("scorer".to_owned(), scorer.hash()),
                (format!("data/{target}"), data_hash),
            ]);
            let dir = ctx.out.join("synthetic").join(if *adapted { format!("{target}-ft") } else { target.clone() });
            ctx.step(name, &dir, json!({ "target": target, "adapted": adapted }), inputs, |dir| {
                let scfg = synthesis_config(&ctx.cfg(), &domain.spec);
                let models = Models::new(&codec, &generator, &scorer)?;
                let mut targets = domain.targets();
                for t in &mut targets {
                    t.pre_path = data_root.join(&t.pre_path).to_string_lossy().into_owned();
                }
                let ds = synthesize_dataset(&targets, &scfg, &models)?;
                let damaged = ds.entries.iter().filter(|e| e.label == 1).count();
                println!("{} synthetic pairs for {target} ({damaged} damaged)", ds.entries.len());
                ds.write(dir).map(|_| ())
            })
        }
        Command::Train { variant, target, sources, synthetic, replicate, data } => {
            let cfg = ctx.cfg();
            let sources: Vec<String> = if sources.is_empty() {
                cfg.domains.iter().map(|d| d.name.clone()).filter(|n| n != target).collect()
            } else {
                sources.clone()
            };
            if sources.contains(target) {
                return Err(Error::Config(format!("target {target} is also listed as a source")));
            }
            let (tgt, tgt_hash) = load_domain(&ctx, data, target)?;
            let mut inputs = BTreeMap::from([(format!("data/{target}"), tgt_hash)]);
            let needs_real = *variant != Variant::R1;
            let needs_syn = *variant != Variant::R0;
            let mut real = Vec::new();
            let mut source_val = Vec::new();
            if needs_real || cfg.train.validation == Validation::Source {
                for s in &sources {
                    let (d, h) = load_domain(&ctx, data, s)?;
                    inputs.insert(format!("data/{s}"), h);
                    real.extend(d.train);
                    source_val.extend(d.val);
                }
            }
            let syn = if needs_syn {
                let dir = synthetic.clone().unwrap_or_else(|| ctx.out.join("synthetic").join(target));
                let (p, h) = load_synthetic(&dir)?;
                inputs.insert("synthetic".into(), h);
                p
            } else {
                Vec::new()
            };
            let args = json!({ "variant": variant.to_string(), "target": target, "sources": sources, "replicate": replicate });
            let dir = ctx.out.join("classifiers").join(format!("{variant}-{target}-r{replicate}"));
            ctx.step(name, &dir, args, inputs, |dir| {
                let mut tc = cfg.train.clone();
                let rep = derive_seed(cfg.seed, &format!("replicate/{replicate}"));
                tc.seed = derive_seed(rep, &format!("train/{variant}/{target}"));
                let val = if cfg.train.validation == Validation::Source { &source_val } else { &tgt.val };
                let model = train_variant::<f32>(
                    *variant,
                    needs_real.then_some(real.as_slice()),
                    needs_syn.then_some(syn.as_slice()),
                    val,
                    &cfg.encoder,
                    &tc,
                )?;
                model.save(&dir.join("classifier"))?;
                let report = evaluate(&model, &tgt.test, target)?;
                println!("{variant} on {target} test: AUPRC {:.4}", report.auprc);
                report.write(&dir.join("eval_test.json"))
            })
        }
        Command::Evaluate { checkpoint, domain, split, data } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                s => return Err(Error::Config(format!("unknown split {s:?} (train, val or test)"))),
            };
            let model = Classifier::load(&stem(checkpoint, "classifier"))?;
            let (d, h) = load_domain(&ctx, data, domain)?;
            let pairs = match split {
                Split::Train => &d.train,
                Split::Val => &d.val,
                Split::Test => &d.test,
            };
            let tag = checkpoint.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let dir = ctx.out.join("eval").join(format!("{tag}-{domain}-{}", split.name()));
            let inputs = BTreeMap::from([("classifier".to_owned(), model.hash()), (format!("data/{domain}"), h)]);
            ctx.step(name, &dir, json!({ "domain": domain, "split": split.name() }), inputs, |dir| {
                let report = evaluate(&model, pairs, domain)?;
                println!("AUPRC {:.4} ({} positives, {} negatives)", report.auprc, report.n_pos, report.n_neg);
                report.write(&dir.join("report.json"))
            })
        }
        Command::TransferMatrix { protocol, variants, domains, .. } => {
            let columns = parse_columns(variants)?;
            let tag = match protocol {
                Protocol::SingleSource => "single_source",
                Protocol::MultiSource => "multi_source",
            };
            let args = json!({ "protocol": tag, "variants": variants, "domains": domains });
            ctx.step(name, &ctx.out.join("transfer").join(tag), args, BTreeMap::new(), |dir| {
                let mut bench = Benchmark::new(&ctx.resolved.config, Some(&ctx.out.join("cache")))?;
                let report = bench.run_transfer_matrix(*protocol, domains, &columns)?;
                let table = report.table();
                println!("{table}");
                write_json(&dir.join("report.json"), &report)?;
                std::fs::write(dir.join("table.txt"), &table).map_err(|e| Error::io(dir, e))?;
                std::fs::write(dir.join("ablation.txt"), report.ablation_table()).map_err(|e| Error::io(dir, e))
            })
        }
        Command::VolumeSweep { fractions, domains, .. } => {
            let args = json!({ "fractions": fractions, "domains": domains });
            ctx.step(name, &ctx.out.join("volume-sweep"), args, BTreeMap::new(), |dir| {
                let mut bench = Benchmark::new(&ctx.resolved.config, Some(&ctx.out.join("cache")))?;
                let report = bench.volume_sweep(fractions, domains)?;
                let table = report.table();
                println!("{table}");
                write_json(&dir.join("report.json"), &report)?;
                std::fs::write(dir.join("table.txt"), &table).map_err(|e| Error::io(dir, e))?;
                volume_plot(&report, &dir.join("volume.svg"))
            })
        }
        Command::Plot { volume, evals } => {
            if volume.is_none() && evals.is_empty() {
                return Err(Error::Config("plot needs --volume and/or --eval".into()));
            }
            let mut inputs = BTreeMap::new();
            for p in volume.iter().chain(evals) {
                inputs.insert(p.display().to_string(), sha256_file(p)?);
            }
            ctx.step(name, &ctx.out.join("plots"), json!({}), inputs, |dir| {
                if let Some(v) = volume {
                    let report: VolumeReport = read_json(v)?;
                    volume_plot(&report, &dir.join("volume.svg"))?;
                }
                if !evals.is_empty() {
                    let mut reports = Vec::new();
                    for p in evals {
                        let r: EvalReport = read_json(p)?;
                        let label = p.parent().and_then(|d| d.file_name()).map_or_else(
                            || p.display().to_string(),
                            |s| s.to_string_lossy().into_owned(),
                        );
                        reports.push((label, r));
                    }
                    pr_plot(&reports, &dir.join("pr.svg"))?;
                }
                Ok(())
            })
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.common.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
