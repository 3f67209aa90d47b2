//! Vector-quantized convolutional image codec.

use std::path::Path;

use aftermath_nn::layers::Conv2d;
use aftermath_nn::{Adam, AdamConfig, Graph, ParamId, ParamStore, Scalar, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{config, contract, Result};
use crate::raster::{batch_tensor, Image};
use crate::seed::{derive_seed, rng, sha256_hex};
use crate::tokens::TokenGrid;
use crate::train::{finite_loss, sample_indices, scheduled_lr};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub image_size: usize,
    /// Spatial downsampling factor; a power of two.
    pub factor: usize,
    pub codebook_size: usize,
    pub embed_dim: usize,
    /// Channels after each stride-2 stage of the encoder.
    pub channels: Vec<usize>,
    pub commitment: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Unused codes are re-seeded from encoder outputs at this interval.
    pub restart_every: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            factor: 8,
            codebook_size: 128,
            embed_dim: 16,
            channels: vec![16, 32, 32],
            commitment: 0.25,
            learning_rate: 2e-3,
            batch_size: 16,
            iterations: 1500,
            restart_every: 100,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.factor;
        if !f.is_power_of_two() || f < 2 || self.image_size % f != 0 {
            return Err(config(format!("codec factor {f} must be a power of two dividing {}", self.image_size)));
        }
        if self.channels.len() != f.trailing_zeros() as usize {
            return Err(config(format!("factor {f} needs {} channel stages", f.trailing_zeros())));
        }
        if self.codebook_size < 2 || self.embed_dim == 0 || self.batch_size == 0 {
            return Err(config("codec sizes must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.factor
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Codebook rows; the MASK id equals `size`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub size: usize,
    pub dim: usize,
    pub table: Vec<T>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(size: usize, dim: usize, table: Vec<T>) -> Result<Self> {
        if table.len() != size * dim || size == 0 {
            return Err(contract(format!("codebook table has {} values for {size}x{dim}", table.len())));
        }
        Ok(Self { size, dim, table })
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.table[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the nearest row by squared distance, lowest index on ties.
    /// Rows are scanned with early exit once a partial sum exceeds the best.
    pub fn nearest(&self, v: &[T]) -> u32 {
        let mut best = (0u32, T::infinity());
        for k in 0..self.size {
            let row = self.row(k);
            let mut d = T::zero();
            for (a, b) in v.iter().zip(row) {
                let t = *a - *b;
                d += t * t;
                if d > best.1 {
                    break;
                }
            }
            if d < best.1 {
                best = (k as u32, d);
            }
        }
        best.0
    }
}

/// Encoder output in channels-last layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn cell(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn quantize<T: Scalar>(features: &FeatureGrid<T>, codebook: &Codebook<T>) -> Result<TokenGrid> {
    if features.dim != codebook.dim {
        return Err(contract(format!("feature dim {} vs codebook dim {}", features.dim, codebook.dim)));
    }
    let ids = (0..features.rows * features.cols).map(|i| codebook.nearest(features.cell(i))).collect();
    TokenGrid::new(features.rows, features.cols, codebook.size as u32, ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecMetadata {
    pub config: CodecConfig,
    pub seed: u64,
    pub config_hash: String,
    pub loss_curve: Vec<f64>,
    pub final_losses: FinalLosses,
    pub heldout_mse: f64,
    pub recon_mse_threshold: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalLosses {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

#[derive(Clone, Debug)]
struct Layers {
    encoder: Vec<Conv2d>,
    to_embed: Conv2d,
    from_embed: Conv2d,
    /// The last stage emits 12 channels at half resolution that a pixel
    /// shuffle turns into RGB.
    decoder: Vec<Conv2d>,
    codebook: ParamId,
}

impl Layers {
    fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, c: &CodecConfig, r: &mut R) -> Self {
        let mut encoder = Vec::new();
        let mut cin = 3;
        for (i, &ch) in c.channels.iter().enumerate() {
            encoder.push(Conv2d::init(store, &format!("enc.{i}.down"), cin, ch, 3, 2, 1, r));
            encoder.push(Conv2d::init(store, &format!("enc.{i}.conv"), ch, ch, 3, 1, 1, r));
            cin = ch;
        }
        let to_embed = Conv2d::init(store, "enc.embed", cin, c.embed_dim, 1, 1, 0, r);
        let from_embed = Conv2d::init(store, "dec.embed", c.embed_dim, cin, 1, 1, 0, r);
        let mut decoder = Vec::new();
        for i in (0..c.channels.len()).rev() {
            let cout = if i == 0 { 12 } else { c.channels[i - 1] };
            decoder.push(Conv2d::init(store, &format!("dec.{i}.conv"), cin, cout, 3, 1, 1, r));
            cin = cout;
        }
        let codebook = store.normal("codebook", [c.codebook_size, c.embed_dim], 1.0, r);
        Self { encoder, to_embed, from_embed, decoder, codebook }
    }

    fn bind<T: Scalar>(store: &ParamStore<T>, c: &CodecConfig) -> Result<Self> {
        let mut encoder = Vec::new();
        for i in 0..c.channels.len() {
            encoder.push(Conv2d::bind(store, &format!("enc.{i}.down"), 2, 1)?);
            encoder.push(Conv2d::bind(store, &format!("enc.{i}.conv"), 1, 1)?);
        }
        let decoder = (0..c.channels.len())
            .rev()
            .map(|i| Conv2d::bind(store, &format!("dec.{i}.conv"), 1, 1))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            encoder,
            to_embed: Conv2d::bind(store, "enc.embed", 1, 0)?,
            from_embed: Conv2d::bind(store, "dec.embed", 1, 0)?,
            decoder,
            codebook: store.id("codebook")?,
        })
    }

    /// Images `[N,3,H,W]` to channels-last features `[N, g*g, e]`.
    fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.encoder {
            h = conv.forward(g, h)?;
            h = g.relu(h);
        }
        let h = self.to_embed.forward(g, h)?;
        let s = g.shape(h).to_vec();
        let h = g.reshape(h, [s[0], s[1], s[2] * s[3]])?;
        Ok(g.transpose(h)?)
    }

    /// Channels-last embeddings `[N, g*g, e]` to images `[N,3,H,W]`.
    fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, z: Var, grid: usize) -> Result<Var> {
        let s = g.shape(z).to_vec();
        let h = g.transpose(z)?;
        let mut h = g.reshape(h, [s[0], s[2], grid, grid])?;
        h = self.from_embed.forward(g, h)?;
        h = g.relu(h);
        let last = self.decoder.len() - 1;
        for (i, conv) in self.decoder.iter().enumerate() {
            if i < last {
                h = g.upsample2x(h)?;
            }
            h = conv.forward(g, h)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(g.pixel_shuffle(h)?)
    }
}

#[derive(Clone, Debug)]
pub struct CodecModel<T: Scalar> {
    params: ParamStore<T>,
    layers: Layers,
    pub metadata: CodecMetadata,
}

impl<T: Scalar> CodecModel<T> {
    pub fn config(&self) -> &CodecConfig {
        &self.metadata.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Identity of the trained weights, used to check model consistency.
    pub fn hash(&self) -> String {
        self.params.content_hash()
    }

    pub fn codebook(&self) -> Codebook<T> {
        let t = self.params.get(self.layers.codebook);
        Codebook { size: self.config().codebook_size, dim: self.config().embed_dim, table: t.data().to_vec() }
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let n = self.config().image_size;
        if img.height() != n || img.width() != n {
            return Err(contract(format!("codec expects {n}x{n} images, got {}x{}", img.height(), img.width())));
        }
        Ok(())
    }

    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<FeatureGrid<T>>> {
        images.iter().try_for_each(|i| self.check_image(i))?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference(&self.params);
        let x = g.input(batch_tensor(images)?);
        let z = self.layers.encode(&mut g, x)?;
        let (cells, dim) = (g.shape(z)[1], g.shape(z)[2]);
        let grid = self.config().grid();
        Ok(g.value(z)
            .chunks_exact(cells * dim)
            .map(|c| FeatureGrid { rows: grid, cols: grid, dim, data: c.to_vec() })
            .collect())
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureGrid<T>> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    pub fn tokenize_batch(&self, images: &[&Image]) -> Result<Vec<TokenGrid>> {
        let book = self.codebook();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            for f in self.encode_batch(chunk)? {
                out.push(quantize(&f, &book)?);
            }
        }
        Ok(out)
    }

    pub fn tokenize(&self, image: &Image) -> Result<TokenGrid> {
        quantize(&self.encode(image)?, &self.codebook())
    }

    pub fn decode_batch(&self, grids: &[&TokenGrid]) -> Result<Vec<Image>> {
        let c = self.config();
        let (k, n, grid) = (c.codebook_size as u32, c.image_size, c.grid());
        let mut ids = Vec::new();
        for t in grids {
            if t.rows != grid || t.cols != grid || t.codebook_size != k {
                return Err(contract(format!("token grid {}x{} does not fit this codec", t.rows, t.cols)));
            }
            if !t.is_complete() {
                return Err(contract(format!("cannot decode a grid with {} MASK tokens", t.masked_count())));
            }
            ids.extend(t.ids.iter().map(|&i| i as usize));
        }
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference(&self.params);
        let book = g.param(self.layers.codebook);
        let z = g.embedding(book, &ids)?;
        let z = g.reshape(z, [grids.len(), grid * grid, c.embed_dim])?;
        let x = self.layers.decode(&mut g, z, grid)?;
        g.value(x).chunks_exact(3 * n * n).map(|v| Image::from_chw(n, n, v)).collect()
    }

    pub fn decode(&self, tokens: &TokenGrid) -> Result<Image> {
        Ok(self.decode_batch(&[tokens])?.remove(0))
    }

    /// Mean per-pixel squared error of `decode(quantize(encode(x)))`, on the
    /// [0, 1] intensity scale.
    pub fn reconstruction_mse(&self, images: &[&Image]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in images.chunks(64) {
            let grids = self.tokenize_batch(chunk)?;
            let recon = self.decode_batch(&grids.iter().collect::<Vec<_>>())?;
            total += chunk.iter().zip(&recon).map(|(a, b)| a.mse(b)).sum::<f64>();
        }
        Ok(total / images.len().max(1) as f64)
    }

    /// Fraction of codebook entries used at least once on `images`.
    pub fn codebook_usage(&self, images: &[&Image]) -> Result<f64> {
        let mut used = vec![false; self.config().codebook_size];
        for t in self.tokenize_batch(images)? {
            for id in t.ids {
                used[id as usize] = true;
            }
        }
        Ok(used.iter().filter(|u| **u).count() as f64 / used.len() as f64)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        checkpoint::save(stem, "codec", &self.params, &self.metadata)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (params, metadata): (ParamStore<T>, CodecMetadata) = checkpoint::load(stem, "codec")?;
        metadata.config.validate()?;
        let layers = Layers::bind(&params, &metadata.config)?;
        Ok(Self { params, layers, metadata })
    }
}

/// Trains the codec with reconstruction, codebook and commitment losses and
/// a straight-through quantizer. A tenth of the images is held out to fix
/// the reconstruction threshold recorded in the metadata.
pub fn train_codec<T: Scalar>(images: &[Image], cfg: &CodecConfig) -> Result<CodecModel<T>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(config("codec training set is empty"));
    }
    let mut r = rng(derive_seed(cfg.seed, "codec"));
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut r);
    let held = if images.len() >= 10 { images.len() / 10 } else { 0 };
    let (held_idx, train_idx) = order.split_at(held);
    let train: Vec<&Image> = train_idx.iter().map(|&i| &images[i]).collect();
    let heldout: Vec<&Image> = if held == 0 { train.clone() } else { held_idx.iter().map(|&i| &images[i]).collect() };
    let n = cfg.image_size;
    if let Some(bad) = train.iter().find(|i| i.height() != n || i.width() != n) {
        return Err(contract(format!("codec expects {n}x{n} images, got {}x{}", bad.height(), bad.width())));
    }

    let mut params = ParamStore::new();
    let layers = Layers::init(&mut params, cfg, &mut r);
    let mut adam = Adam::new(AdamConfig::default(), &params);
    let (grid, e, k) = (cfg.grid(), cfg.embed_dim, cfg.codebook_size);
    let mut usage = vec![0usize; k];
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut last = FinalLosses::default();

    for step in 0..cfg.iterations.max(1) {
        let batch: Vec<&Image> = sample_indices(train.len(), cfg.batch_size, &mut r).into_iter().map(|i| train[i]).collect();
        let x_t = batch_tensor::<T>(&batch)?;

        if step == 0 || (cfg.restart_every > 0 && step % cfg.restart_every == 0) {
            let mut g = Graph::inference(&params);
            let x = g.input(x_t.clone());
            let z = layers.encode(&mut g, x)?;
            let vectors: Vec<Vec<T>> = g.value(z).chunks_exact(e).map(<[T]>::to_vec).collect();
            let table = params.get_mut(layers.codebook).data_mut();
            for code in 0..k {
                if step == 0 || usage[code] == 0 {
                    let v = &vectors[r.random_range(0..vectors.len())];
                    for (j, val) in v.iter().enumerate() {
                        table[code * e + j] = *val + T::lit(r.random_range(-0.01..0.01));
                    }
                }
            }
            usage.fill(0);
        }

        let mut g = Graph::new(&params);
        let x = g.input(x_t);
        let z = layers.encode(&mut g, x)?;
        let book = Codebook { size: k, dim: e, table: params.get(layers.codebook).data().to_vec() };
        let ids: Vec<usize> = g.value(z).chunks_exact(e).map(|v| book.nearest(v) as usize).collect();
        for &i in &ids {
            usage[i] += 1;
        }
        let cb = g.param(layers.codebook);
        let q = g.embedding(cb, &ids)?;
        let q = g.reshape(q, [batch.len(), grid * grid, e])?;
        let z_stop = g.detach(z);
        let q_stop = g.detach(q);
        let codebook_loss = g.mse(q, z_stop)?;
        let commit_loss = g.mse(z, q_stop)?;
        let st = g.straight_through(z, g.value(q).to_vec())?;
        let recon = layers.decode(&mut g, st, grid)?;
        let target = g.detach(x);
        let recon_loss = g.mse(recon, target)?;
        let commit = g.scale(commit_loss, T::lit(cfg.commitment));
        let loss = g.add(recon_loss, codebook_loss)?;
        let loss = g.add(loss, commit)?;
        let value = finite_loss(g.scalar(loss), "codec", step)?;
        curve.push(value);
        last = FinalLosses {
            reconstruction: g.scalar(recon_loss).to_f64().unwrap_or(f64::NAN),
            codebook: g.scalar(codebook_loss).to_f64().unwrap_or(f64::NAN),
            commitment: g.scalar(commit_loss).to_f64().unwrap_or(f64::NAN),
        };
        let grads = g.backward(loss)?;
        let lr = scheduled_lr(cfg.learning_rate, step, cfg.iterations);
        adam.step(&mut params, &grads, |_, _| Some(lr));
    }

    let mut model = CodecModel {
        params,
        layers,
        metadata: CodecMetadata {
            config: cfg.clone(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            loss_curve: curve,
            final_losses: last,
            heldout_mse: 0.0,
            recon_mse_threshold: 0.0,
        },
    };
    let mse = model.reconstruction_mse(&heldout)?;
    model.metadata.heldout_mse = mse;
    model.metadata.recon_mse_threshold = 1.5 * mse;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_examples() {
        let book = Codebook::new(2, 2, vec![0.0f64, 0.0, 1.0, 1.0]).unwrap();
        let grid = |v: Vec<f64>| FeatureGrid { rows: 1, cols: 1, dim: 2, data: v };
        assert_eq!(quantize(&grid(vec![0.9, 0.8]), &book).unwrap().ids, vec![1]);
        assert_eq!(quantize(&grid(vec![0.5, 0.5]), &book).unwrap().ids, vec![0]);
        let wide = FeatureGrid { rows: 1, cols: 1, dim: 3, data: vec![0.0; 3] };
        assert!(quantize(&wide, &book).is_err());
    }
}
