//! Fixtures and exact property checks shared by the integration tests and
//! the acceptance suite. Each check returns `Ok(summary)` or `Err(reason)`.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::OnceLock;

use aftermath::classifier::{train_head, train_stage1, ClassifierModel, EncoderConfig, TrainConfig};
use aftermath::eval::auprc;
use aftermath::experiment::{prepare_domain, BenchmarkConfig, DomainData, Foundation};
use aftermath::maskgen::{finetune_adapters, AdapterConfig, DecodeJob, DecodeSchedule, GeneratorModel};
use aftermath::masking::{apply_mask, downsample_mask, sample_mask};
use aftermath::prompts::{build_pool, tokenize_prompt, PoolKind};
use aftermath::synthesis::{synthesize_dataset, Models, SynthesisConfig, SyntheticDataset};
use aftermath::toyworld::{benchmark_domains, render_pair, LabeledPair};
use aftermath::vqcodec::{quantize, Codebook, FeatureGrid};
use aftermath::{Image, TokenGrid};
use aftermath_nn::ParamStore;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn smoke_config() -> BenchmarkConfig {
    BenchmarkConfig::smoke().resolved()
}

/// Tiny trained codec, generator and scorer, built once per test binary.
pub fn foundation() -> &'static Foundation {
    static F: OnceLock<Foundation> = OnceLock::new();
    F.get_or_init(|| Foundation::train(&smoke_config()).expect("smoke foundation trains"))
}

pub fn smoke_domain() -> &'static DomainData {
    static D: OnceLock<DomainData> = OnceLock::new();
    D.get_or_init(|| prepare_domain(&benchmark_domains()[1], &smoke_config()).expect("domain renders"))
}

pub fn random_image(n: usize, r: &mut ChaCha8Rng) -> Image {
    Image::new(n, n, (0..n * n * 3).map(|_| r.random()).collect()).unwrap()
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig { image_size: 16, patch: 8, width: 8, blocks: 1, heads: 2 }
}

pub fn random_pairs(n: usize, size: usize, seed: u64) -> Vec<LabeledPair> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| LabeledPair {
            pre: random_image(size, &mut r),
            post: random_image(size, &mut r),
            label: (i % 2) as u8,
            domain: "random".into(),
            provenance: aftermath::toyworld::Provenance::Procedural,
        })
        .collect()
}

fn prompt_ids(generator: &GeneratorModel<f32>, r: &mut ChaCha8Rng) -> Vec<u32> {
    let pools = PoolKind::all();
    let pool = build_pool(pools[r.random_range(0..pools.len())]);
    let p = &pool.prompts[r.random_range(0..pool.prompts.len())];
    tokenize_prompt(&p.text, generator.vocabulary())
}

/// Unmasked token ids survive parallel decoding exactly; masked ones are
/// all filled. Masks are center patches on half the cases and arbitrary
/// random subsets on the other half.
pub fn check_locality(cases: usize) -> Check {
    let generator = &foundation().generator;
    let c = generator.config().clone();
    let k = c.codebook_size as u32;
    let mut r = rng(11);
    let mut failures = 0;
    let mut done = 0;
    while done < cases {
        let batch = (cases - done).min(100);
        let mut grids = Vec::with_capacity(batch);
        let mut prompts = Vec::with_capacity(batch);
        let mut seeds = Vec::with_capacity(batch);
        for i in 0..batch {
            let ids: Vec<u32> = (0..c.grid * c.grid).map(|_| r.random_range(0..k)).collect();
            let tokens = TokenGrid::new(c.grid, c.grid, k, ids).unwrap();
            let masked = if (done + i) % 2 == 0 {
                let side = c.grid * 8;
                let m = sample_mask(side, side, side / 2, side / 2, &mut r).unwrap();
                apply_mask(&tokens, &downsample_mask(&m, 8).unwrap()).unwrap()
            } else {
                let mut t = tokens.clone();
                let mask_id = t.mask_id();
                let p = r.random_range(0.05..0.95);
                for id in t.ids.iter_mut() {
                    if r.random_bool(p) {
                        *id = mask_id;
                    }
                }
                t
            };
            grids.push((tokens, masked));
            prompts.push(prompt_ids(generator, &mut r));
            seeds.push(r.random::<u64>());
        }
        let jobs: Vec<DecodeJob<'_>> = grids
            .iter()
            .zip(&prompts)
            .zip(&seeds)
            .map(|(((_, m), p), s)| DecodeJob { grid: m, prompt: p, seed: *s })
            .collect();
        let schedule = DecodeSchedule { total_steps: 8, temperature: 1.0, seed: 0 };
        let out = generator.decode_jobs(&jobs, &schedule).map_err(|e| e.to_string())?;
        for ((orig, masked), o) in grids.iter().zip(&out) {
            let kept = (0..orig.len()).filter(|&i| !masked.is_masked(i)).all(|i| o.ids[i] == orig.ids[i]);
            if !kept || !o.is_complete() {
                failures += 1;
            }
        }
        done += batch;
    }
    if failures == 0 {
        Ok(format!("{cases} cases, 0 failures"))
    } else {
        Err(format!("{failures} of {cases} cases changed unmasked tokens or left masks"))
    }
}

/// In-bounds, cardinality and offset uniformity of sampled masks.
pub fn check_masks(samples: usize) -> Check {
    let (h, w) = (64, 64);
    let mut r = rng(12);
    let mut counts_x = [0usize; 9];
    let mut counts_y = [0usize; 9];
    for i in 0..samples {
        let (ph, pw) = if i % 2 == 0 { (32, 32) } else { (r.random_range(1..=32), r.random_range(1..=32)) };
        let m = sample_mask(h, w, ph, pw, &mut r).map_err(|e| e.to_string())?;
        if m.rows().end > h || m.cols().end > w || m.popcount() != ph * pw {
            return Err(format!("sample {i}: patch {:?}x{:?} out of bounds or wrong size", m.rows(), m.cols()));
        }
        counts_x[(m.perturbation.delta_x + 4) as usize] += 1;
        counts_y[(m.perturbation.delta_y + 4) as usize] += 1;
    }
    let worst = counts_x
        .iter()
        .chain(&counts_y)
        .map(|&c| (c as f64 / samples as f64 - 1.0 / 9.0).abs())
        .fold(0.0, f64::max);
    if worst <= 0.02 {
        Ok(format!("{samples} samples, max offset-frequency deviation {worst:.4}"))
    } else {
        Err(format!("offset frequency deviates from 1/9 by {worst:.4}"))
    }
}

/// Exhaustive nearest neighbour: full squared distance, lowest index on ties.
pub fn brute_nearest(table: &[f32], dim: usize, v: &[f32]) -> u32 {
    let mut best = (0u32, f32::INFINITY);
    for (k, row) in table.chunks(dim).enumerate() {
        let d: f32 = v.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k as u32, d);
        }
    }
    best.0
}

pub fn check_quantize(vectors: usize) -> Check {
    let (k, dim) = (128, 16);
    let mut r = rng(13);
    let table: Vec<f32> = (0..k * dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let book = Codebook::new(k, dim, table.clone()).unwrap();
    let data: Vec<f32> = (0..vectors * dim).map(|_| r.random_range(-1.2..1.2)).collect();
    let features = FeatureGrid { rows: vectors, cols: 1, dim, data: data.clone() };
    let ids = quantize(&features, &book).map_err(|e| e.to_string())?;
    let mismatches = data.chunks(dim).zip(&ids.ids).filter(|(v, id)| brute_nearest(&table, dim, v) != **id).count();
    if mismatches == 0 {
        Ok(format!("{vectors} vectors, 0 mismatches"))
    } else {
        Err(format!("{mismatches} of {vectors} vectors differ from brute force"))
    }
}

/// Average precision by enumerating every threshold: an example counts as
/// predicted positive when its score is at least the threshold.
pub fn brute_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 1).count() as f64;
        let predicted = scores.iter().filter(|s| **s >= t).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * (tp / predicted);
        prev_recall = recall;
    }
    ap
}

pub fn random_instance(r: &mut ChaCha8Rng, max_len: usize) -> (Vec<f64>, Vec<u8>) {
    let n = r.random_range(1..=max_len);
    let levels = r.random_range(2..=20);
    let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| r.random_bool(0.4) as u8).collect();
    if !labels.contains(&1) {
        let i = r.random_range(0..n);
        labels[i] = 1;
    }
    (scores, labels)
}

pub fn check_auprc(instances: usize) -> Check {
    let mut r = rng(14);
    let transforms: [fn(f64) -> f64; 3] = [|x| x * x * x + x, |x| (2.0 * x).exp(), |x| 1.0 / (1.0 + (-3.0 * x).exp())];
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let (scores, labels) = random_instance(&mut r, 12);
        let ap = auprc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((ap - brute_ap(&scores, &labels)).abs());
        for (j, f) in transforms.iter().enumerate() {
            let t: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            let at = auprc(&t, &labels).map_err(|e| e.to_string())?;
            if (at - ap).abs() > 1e-12 {
                return Err(format!("instance {i}: transform {j} changed AP from {ap} to {at}"));
            }
        }
    }
    if worst <= 1e-9 {
        Ok(format!("{instances} instances, max |AP - oracle| {worst:.1e}, 3 monotone transforms invariant"))
    } else {
        Err(format!("max |AP - oracle| {worst:.3e} exceeds 1e-9"))
    }
}

/// Classifier BCE gradient against central differences, in f64, over
/// every weight of a small siamese model.
pub fn check_bce_gradient() -> Check {
    let pairs = random_pairs(3, 16, 15);
    let mut model = ClassifierModel::<f64>::new(&tiny_encoder(), 3).map_err(|e| e.to_string())?;
    let pre: Vec<&Image> = pairs.iter().map(|p| &p.pre).collect();
    let post: Vec<&Image> = pairs.iter().map(|p| &p.post).collect();
    let targets: Vec<f64> = pairs.iter().map(|p| p.label as f64).collect();
    let (_, grads) = model.batch_loss(&pre, &post, &targets).map_err(|e| e.to_string())?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut small = 0;
    let mut checked = 0;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let analytic = grads.get(id).map(|t| t.data().to_vec());
        for j in 0..model.params().get(id).len() {
            let mut eval = |delta: f64| {
                model.params_mut().get_mut(id).data_mut()[j] += delta;
                let (l, _) = model.batch_loss(&pre, &post, &targets).unwrap();
                model.params_mut().get_mut(id).data_mut()[j] -= delta;
                l
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |v| v[j]);
            // Central differences carry about 1e-10 of round-off, so tiny
            // gradients are compared absolutely.
            if a.abs().max(numeric.abs()) >= 1e-6 {
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
            } else {
                worst_abs = worst_abs.max((a - numeric).abs());
                small += 1;
            }
            checked += 1;
        }
    }
    let summary = format!("{checked} weights, max relative error {worst:.2e}, {small} below 1e-6 within {worst_abs:.1e}");
    if worst < 1e-4 && worst_abs < 1e-9 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn le_bytes<T: aftermath_nn::Scalar>(v: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 8);
    for x in v {
        x.write_le(&mut out);
    }
    out
}

pub fn same_bytes<T: aftermath_nn::Scalar>(a: &ParamStore<T>, b: &ParamStore<T>, keep: impl Fn(&str) -> bool) -> bool {
    a.iter().filter(|(_, n, _)| keep(n)).all(|(_, name, t)| {
        b.id(name).is_ok_and(|id| {
            let u = b.get(id);
            u.shape() == t.shape() && le_bytes(u.data()) == le_bytes(t.data())
        })
    })
}

/// Last-layer training leaves every encoder byte unchanged, and adapter
/// tuning leaves every base generator byte unchanged.
pub fn check_freeze() -> Check {
    let pairs = random_pairs(12, 16, 16);
    let refs: Vec<&LabeledPair> = pairs.iter().collect();
    let base = ClassifierModel::<f32>::new(&tiny_encoder(), 4).map_err(|e| e.to_string())?;
    let feats = base.pair_features(&refs).map_err(|e| e.to_string())?;
    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    let tc = TrainConfig { finetune_iterations: 20, eval_every: 5, batch_size: 4, ..TrainConfig::desk() };
    let tuned = train_head(&base, &feats, &labels, &feats, &labels, &tc).map_err(|e| e.to_string())?;
    let is_head = aftermath::classifier::is_head;
    if !same_bytes(base.params(), tuned.params(), |n| !is_head(n)) {
        return Err("stage 2 changed encoder weights".into());
    }
    if same_bytes(base.params(), tuned.params(), is_head) {
        return Err("stage 2 did not change the head".into());
    }
    let f = foundation();
    let grids: Vec<TokenGrid> = smoke_domain()
        .train
        .iter()
        .take(8)
        .map(|p| f.codec.tokenize(&p.pre))
        .collect::<aftermath::Result<_>>()
        .map_err(|e| e.to_string())?;
    let undamaged = build_pool(PoolKind::ToyUndamaged);
    let prompts = vec![tokenize_prompt(&undamaged.prompts[0].text, f.generator.vocabulary()); grids.len()];
    let adapted = finetune_adapters(&f.generator, &grids, &prompts, &AdapterConfig { iterations: 5, ..AdapterConfig::default() })
        .map_err(|e| e.to_string())?;
    if !same_bytes(f.generator.params(), adapted.params(), |_| true) {
        return Err("adapter tuning changed base generator weights".into());
    }
    Ok("encoder bytes identical after stage 2; base generator bytes identical after adapter tuning".into())
}

pub fn synthesize_small(count: usize, volume: f64) -> SyntheticDataset {
    let f = foundation();
    let models = Models::new(&f.codec, &f.generator, &f.scorer).unwrap();
    let mut targets = smoke_domain().targets();
    targets.truncate(count);
    let cfg = SynthesisConfig {
        num_candidates: 2,
        damaged_pool: "toy_flood_damaged".into(),
        volume_fraction: volume,
        seed: 21,
        ..SynthesisConfig::default()
    };
    synthesize_dataset(&targets, &cfg, &models).unwrap()
}

fn dataset_bytes(d: &SyntheticDataset) -> Vec<u8> {
    let mut out = d.manifest(std::path::Path::new("")).to_jsonl().into_bytes();
    for e in &d.entries {
        out.extend_from_slice(e.post.data());
    }
    out
}

/// Repeated seeded runs give byte-identical renders, synthetic datasets and
/// trained weights.
pub fn check_determinism() -> Check {
    let spec = &benchmark_domains()[0];
    for seed in [1u64, 2, 3] {
        for damaged in [false, true] {
            let a = render_pair(spec, seed, damaged);
            let b = render_pair(spec, seed, damaged);
            if a.pre.data() != b.pre.data() || a.post.data() != b.post.data() {
                return Err(format!("render_pair differs for seed {seed}"));
            }
        }
    }
    if dataset_bytes(&synthesize_small(10, 1.0)) != dataset_bytes(&synthesize_small(10, 1.0)) {
        return Err("synthesize_dataset differs between runs".into());
    }
    let pairs = random_pairs(24, 16, 17);
    let tc = TrainConfig { max_iterations: 50, eval_every: 25, patience: 100, batch_size: 4, ..TrainConfig::desk() };
    let train = || train_stage1::<f32>(&pairs[..16], &pairs[16..], &tiny_encoder(), &tc).map(|m| m.params().to_bytes());
    if train().map_err(|e| e.to_string())? != train().map_err(|e| e.to_string())? {
        return Err("50-iteration training differs between runs".into());
    }
    Ok("render_pair, synthesize_dataset (10 images) and 50-iteration training are byte-identical".into())
}

pub fn ids(d: &SyntheticDataset) -> BTreeSet<usize> {
    d.entries.iter().map(|e| e.target_index).collect()
}

pub fn shuffled<T: Clone>(v: &[T], seed: u64) -> Vec<T> {
    let mut out = v.to_vec();
    out.shuffle(&mut rng(seed));
    out
}
