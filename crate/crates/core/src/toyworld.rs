//! Procedural pre/post disaster scenes, dataset manifests and splits.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::raster::Image;
use crate::seed::{derive_seed, rng};

pub const IMAGE_SIZE: usize = 64;
/// Largest per-channel global offset added to every post image.
pub const JITTER_GLOBAL: i32 = 3;
/// Largest per-pixel offset added on top of the global one.
pub const JITTER_PIXEL: i32 = 2;
/// Upper bound on the mean absolute pixel difference of an undamaged pair.
pub const JITTER_BOUND: f64 = (JITTER_GLOBAL + JITTER_PIXEL) as f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisasterKind {
    Hurricane,
    Tornado,
    Flood,
    Wildfire,
}

impl DisasterKind {
    pub const ALL: [DisasterKind; 4] =
        [DisasterKind::Hurricane, DisasterKind::Tornado, DisasterKind::Flood, DisasterKind::Wildfire];

    pub fn name(self) -> &'static str {
        match self {
            DisasterKind::Hurricane => "hurricane",
            DisasterKind::Tornado => "tornado",
            DisasterKind::Flood => "flood",
            DisasterKind::Wildfire => "wildfire",
        }
    }
}

impl fmt::Display for DisasterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DisasterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DisasterKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config(format!("unknown disaster kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub disaster_kind: DisasterKind,
    /// Degrees in [0, 360).
    pub background_hue: f64,
    pub texture_noise: f64,
    pub clutter_density: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(config(format!("invalid domain name {:?}", self.name)));
        }
        if !(0.0..360.0).contains(&self.background_hue) {
            return Err(config(format!("{}: background_hue {} outside [0, 360)", self.name, self.background_hue)));
        }
        for (field, v) in [("texture_noise", self.texture_noise), ("clutter_density", self.clutter_density)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config(format!("{}: {field} {v} outside [0, 1]", self.name)));
            }
        }
        Ok(())
    }
}

/// Checks that domain names are unique within one experiment.
pub fn validate_domains(domains: &[DomainSpec]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for d in domains {
        d.validate()?;
        if !seen.insert(d.name.as_str()) {
            return Err(config(format!("duplicate domain name {:?}", d.name)));
        }
    }
    Ok(())
}

/// The four benchmark domains: each pairs a disaster kind with its own
/// landscape style.
pub fn benchmark_domains() -> Vec<DomainSpec> {
    let spec = |name: &str, kind, hue, noise, clutter, seed| DomainSpec {
        name: name.into(),
        disaster_kind: kind,
        background_hue: hue,
        texture_noise: noise,
        clutter_density: clutter,
        seed,
    };
    vec![
        spec("plains-tornado", DisasterKind::Tornado, 45.0, 0.35, 0.2, 101),
        spec("delta-flood", DisasterKind::Flood, 85.0, 0.5, 0.5, 202),
        spec("ridge-wildfire", DisasterKind::Wildfire, 70.0, 0.6, 0.8, 303),
        spec("coast-hurricane", DisasterKind::Hurricane, 110.0, 0.25, 0.4, 404),
    ]
}

/// A random landscape style with a random disaster, used for the broad
/// corpus the generative models are pretrained on.
pub fn random_domain(index: usize, seed: u64) -> DomainSpec {
    let mut r = rng(derive_seed(seed, &format!("domain/{index}")));
    DomainSpec {
        name: format!("corpus-{index:04}"),
        disaster_kind: DisasterKind::ALL[r.random_range(0..4)],
        background_hue: r.random_range(30.0..130.0),
        texture_noise: r.random_range(0.1..0.7),
        clutter_density: r.random_range(0.0..0.9),
        seed: r.random(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Procedural,
    Ingested,
    Synthetic,
    SyntheticPending,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPair {
    pub pre: Image,
    pub post: Image,
    pub label: u8,
    pub domain: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetExample {
    pub pre: Image,
    pub domain: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Pair(LabeledPair),
    Target(TargetExample),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One JSONL manifest line. Unknown keys are kept in `extra` so that
/// extension fields survive a read/write cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub pre_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub domain: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_seed: Option<u64>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ManifestEntry {
    fn set_split(&mut self, split: Split) {
        self.split = split;
        self.pre_path = layout_path(&self.domain, split, &self.id, "pre");
        if self.post_path.is_some() {
            self.post_path = Some(layout_path(&self.domain, split, &self.id, "post"));
        }
    }
}

/// `<domain>/<split>/<id>_<kind>.png`, relative to a dataset root.
pub fn layout_path(domain: &str, split: Split, id: &str, kind: &str) -> String {
    format!("{domain}/{}/{id}_{kind}.png", split.name())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn labels(&self) -> Vec<Option<u8>> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn split(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Parses a JSONL manifest and checks that every referenced file exists.
    /// Entry paths are resolved against the manifest's directory.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::load(path, e.to_string()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: line_no, msg };
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            if let Some(l) = entry.label {
                if l > 1 {
                    return Err(parse_err(format!("label {l} is not 0 or 1")));
                }
                if entry.post_path.is_none() && entry.provenance != Some(Provenance::SyntheticPending) {
                    return Err(parse_err("labeled entry has no post_path".into()));
                }
            }
            for p in std::iter::once(&entry.pre_path).chain(entry.post_path.as_ref()) {
                let full = root.join(p);
                if !full.exists() {
                    return Err(Error::load(full, format!("referenced from line {line_no} does not exist")));
                }
            }
            entries.push(entry);
        }
        Ok(Self { root, entries })
    }

    /// Loads the images of every entry. Entries without label and post image
    /// become [`TargetExample`]s.
    pub fn load_records(&self) -> Result<Vec<Record>> {
        self.entries
            .iter()
            .map(|e| {
                let pre = Image::load_png(&self.root.join(&e.pre_path))?;
                match (e.label, &e.post_path) {
                    (Some(label), Some(post)) => Ok(Record::Pair(LabeledPair {
                        post: Image::load_png(&self.root.join(post))?,
                        pre,
                        label,
                        domain: e.domain.clone(),
                        provenance: e.provenance.unwrap_or(Provenance::Ingested),
                    })),
                    _ => Ok(Record::Target(TargetExample { pre, domain: e.domain.clone() })),
                }
            })
            .collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<Record>> {
    DatasetManifest::read_jsonl(path)?.load_records()
}

/// Building footprint of a rendered scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub center_row: usize,
    pub center_col: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Footprint {
    fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    /// Distance from a pixel to the footprint rectangle (0 inside).
    fn distance(&self, y: usize, x: usize) -> f64 {
        let gap = |v: usize, lo: usize, len: usize| {
            if v < lo {
                (lo - v) as f64
            } else if v >= lo + len {
                (v + 1 - lo - len) as f64
            } else {
                0.0
            }
        };
        gap(y, self.top, self.height).hypot(gap(x, self.left, self.width))
    }
}

/// A rendered pre-disaster scene plus the masks the disaster transforms need.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Image,
    pub footprint: Footprint,
    tree: Vec<bool>,
    roof_color: [f64; 3],
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn to_u8(c: [f64; 3]) -> [u8; 3] {
    c.map(|v| v.round().clamp(0.0, 255.0) as u8)
}

fn scaled(c: [u8; 3], f: f64) -> [f64; 3] {
    c.map(|v| v as f64 * f)
}

fn jitter_color<R: Rng>(c: [f64; 3], amp: f64, r: &mut R) -> [u8; 3] {
    to_u8(c.map(|v| v + r.random_range(-amp..=amp)))
}

/// Smooth random field on the image via bilinear interpolation of a coarse
/// grid of uniform values in [-1, 1].
fn smooth_field<R: Rng>(n: usize, cells: usize, r: &mut R) -> Vec<f64> {
    let g: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; n * n];
    let step = n as f64 / cells as f64;
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 / step, x as f64 / step);
            let (iy, ix) = ((fy as usize).min(cells - 1), (fx as usize).min(cells - 1));
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |a: usize, b: usize| g[a * (cells + 1) + b];
            out[y * n + x] = (1.0 - ty) * ((1.0 - tx) * at(iy, ix) + tx * at(iy, ix + 1))
                + ty * ((1.0 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
        }
    }
    out
}

const ROOF_PALETTE: [[f64; 3]; 5] =
    [[150.0, 150.0, 150.0], [170.0, 80.0, 60.0], [120.0, 90.0, 70.0], [90.0, 100.0, 125.0], [205.0, 195.0, 175.0]];

pub fn render_scene(domain: &DomainSpec, scene_seed: u64) -> Scene {
    let n = IMAGE_SIZE;
    let mut r = rng(derive_seed(domain.seed, &format!("scene/{scene_seed}")));

    let quarter = n / 8;
    let center_row = r.random_range(n / 2 - quarter..n / 2 + quarter);
    let center_col = r.random_range(n / 2 - quarter..n / 2 + quarter);
    let (bh, bw) = (r.random_range(12..=20usize), r.random_range(12..=20usize));
    let footprint =
        Footprint { center_row, center_col, top: center_row - bh / 2, left: center_col - bw / 2, height: bh, width: bw };

    let hue = domain.background_hue + r.random_range(-6.0..6.0);
    let sat = r.random_range(0.35..0.5);
    let val = r.random_range(0.5..0.6);
    let blotch = smooth_field(n, 4, &mut r);
    let noise_amp = domain.texture_noise * 0.12;
    let mut img = Image::filled(n, n, [0, 0, 0]);
    for y in 0..n {
        for x in 0..n {
            let b = blotch[y * n + x];
            let v = val * (1.0 + 0.15 * b) + r.random_range(-1.0..=1.0) * noise_amp;
            img.set(y, x, to_u8(hsv(hue + 8.0 * b, sat, v.clamp(0.0, 1.0))));
        }
    }

    if r.random_bool(domain.clutter_density) {
        let width = r.random_range(3..=4usize);
        let horizontal = r.random_bool(0.5);
        let (lo, len) = if horizontal { (footprint.top, bh) } else { (footprint.left, bw) };
        let free: Vec<usize> = (0..n - width).filter(|&o| o + width + 2 <= lo || o >= lo + len + 4).collect();
        if let Some(&offset) = free.get(r.random_range(0..free.len().max(1))) {
            let gray = r.random_range(105.0..135.0);
            for a in 0..n {
                for b in offset..offset + width {
                    let (y, x) = if horizontal { (b, a) } else { (a, b) };
                    let c = jitter_color([gray, gray, gray * 0.97], 4.0, &mut r);
                    img.set(y, x, c);
                }
            }
        }
    }

    let mut tree = vec![false; n * n];
    let trees = (domain.clutter_density * 12.0).round() as usize + r.random_range(0..=2usize);
    let tree_hue = r.random_range(95.0..125.0);
    for _ in 0..trees {
        for _attempt in 0..20 {
            let radius = r.random_range(2..=4usize) as f64;
            let (cy, cx) = (r.random_range(0..n) as f64, r.random_range(0..n) as f64);
            let clear = footprint.distance(cy as usize, cx as usize) > radius + 3.0;
            if !clear {
                continue;
            }
            for y in 0..n {
                for x in 0..n {
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    if d <= radius {
                        let shade = 0.22 + 0.12 * (1.0 - d / radius);
                        img.set(y, x, jitter_color(hsv(tree_hue, 0.6, shade), 5.0, &mut r));
                        tree[y * n + x] = true;
                    }
                }
            }
            break;
        }
    }

    for y in footprint.top + 2..(footprint.top + bh + 2).min(n) {
        for x in footprint.left + 2..(footprint.left + bw + 2).min(n) {
            if !footprint.contains(y, x) {
                img.set(y, x, to_u8(scaled(img.get(y, x), 0.6)));
                tree[y * n + x] = false;
            }
        }
    }

    let base = ROOF_PALETTE[r.random_range(0..ROOF_PALETTE.len())];
    let roof_color = base.map(|v| v + r.random_range(-12.0..12.0));
    let ridge_vertical = bh > bw;
    for y in footprint.top..footprint.top + bh {
        for x in footprint.left..footprint.left + bw {
            let (along, mid) = if ridge_vertical { (x, center_col) } else { (y, center_row) };
            let f = if along == mid {
                0.75
            } else if along < mid {
                1.08
            } else {
                0.94
            };
            img.set(y, x, jitter_color(roof_color.map(|v| v * f), 4.0, &mut r));
            tree[y * n + x] = false;
        }
    }

    Scene { image: img, footprint, tree, roof_color }
}

fn apply_disaster<R: Rng>(scene: &Scene, kind: DisasterKind, r: &mut R) -> Image {
    let n = IMAGE_SIZE;
    let fp = scene.footprint;
    let mut img = scene.image.clone();
    let roof = |y: usize, x: usize| fp.contains(y, x);
    let random_roof_color = |r: &mut R, img: &Image| {
        let y = r.random_range(fp.top..fp.top + fp.height);
        let x = r.random_range(fp.left..fp.left + fp.width);
        img.get(y, x)
    };
    match kind {
        DisasterKind::Tornado => {
            let pre = scene.image.clone();
            let debris = [[105.0, 80.0, 55.0], [140.0, 135.0, 125.0], [70.0, 62.0, 55.0]];
            for y in fp.top..fp.top + fp.height {
                for x in fp.left..fp.left + fp.width {
                    if r.random_bool(0.6) {
                        let c = if r.random_bool(0.4) {
                            scaled(random_roof_color(r, &pre), 1.0)
                        } else {
                            debris[r.random_range(0..debris.len())]
                        };
                        img.set(y, x, jitter_color(c, 15.0, r));
                    }
                }
            }
            let (y0, y1) = (fp.top.saturating_sub(4), (fp.top + fp.height + 4).min(n));
            let (x0, x1) = (fp.left.saturating_sub(4), (fp.left + fp.width + 4).min(n));
            for _ in 0..fp.height * fp.width / 2 {
                let (y, x) = (r.random_range(y0..y1), r.random_range(x0..x1));
                let c = scaled(random_roof_color(r, &pre), 1.0);
                img.set(y, x, jitter_color(c, 12.0, r));
            }
        }
        DisasterKind::Hurricane => {
            for y in fp.top..fp.top + fp.height {
                for x in fp.left..fp.left + fp.width {
                    if r.random_bool(0.35) {
                        let c = if r.random_bool(0.6) { [175.0, 145.0, 105.0] } else { [70.0, 60.0, 50.0] };
                        img.set(y, x, jitter_color(c, 12.0, r));
                    }
                }
            }
            let (th, tw) = (r.random_range(4..=8usize).min(fp.height), r.random_range(4..=8usize).min(fp.width));
            let ty = r.random_range(fp.top..=fp.top + fp.height - th);
            let tx = r.random_range(fp.left..=fp.left + fp.width - tw);
            for y in ty..ty + th {
                for x in tx..tx + tw {
                    img.set(y, x, jitter_color([50.0, 90.0, 175.0], 8.0, r));
                }
            }
            let debris = [[225.0, 225.0, 220.0], [150.0, 150.0, 150.0], [120.0, 95.0, 70.0]];
            for y in 0..n {
                for x in 0..n {
                    if !roof(y, x) && fp.distance(y, x) <= 8.0 && r.random_bool(0.12) {
                        img.set(y, x, jitter_color(debris[r.random_range(0..debris.len())], 12.0, r));
                    }
                }
            }
        }
        DisasterKind::Flood => {
            let reach = r.random_range(8.0..16.0);
            let edge = smooth_field(n, 4, r);
            let water = [100.0, 95.0, 72.0];
            for y in 0..n {
                for x in 0..n {
                    if roof(y, x) || fp.distance(y, x) > reach + 4.0 * edge[y * n + x] {
                        continue;
                    }
                    let c = if scene.tree[y * n + x] {
                        let t = scaled(img.get(y, x), 0.5);
                        [0, 1, 2].map(|i| t[i] + 0.5 * water[i])
                    } else {
                        water
                    };
                    img.set(y, x, jitter_color(c, 6.0, r));
                }
            }
            let depth = (fp.height as f64 * r.random_range(0.3..0.6)).round() as usize;
            for y in fp.top + fp.height - depth..fp.top + fp.height {
                for x in fp.left..fp.left + fp.width {
                    let c = scaled(img.get(y, x), 0.35);
                    img.set(y, x, jitter_color([0, 1, 2].map(|i| c[i] + 0.65 * water[i]), 5.0, r));
                }
            }
        }
        DisasterKind::Wildfire => {
            let reach = r.random_range(14.0..22.0);
            let edge = smooth_field(n, 4, r);
            let (cy, cx) = (fp.center_row as f64, fp.center_col as f64);
            for y in 0..n {
                for x in 0..n {
                    if roof(y, x) {
                        continue;
                    }
                    let d = (y as f64 - cy).hypot(x as f64 - cx);
                    if d > reach + 4.0 * edge[y * n + x] {
                        continue;
                    }
                    let c = if scene.tree[y * n + x] || r.random_bool(0.2) {
                        [30.0, 25.0, 20.0]
                    } else if r.random_bool(0.03) {
                        [150.0, 60.0, 20.0]
                    } else {
                        scaled(img.get(y, x), 0.45)
                    };
                    img.set(y, x, jitter_color(c, 6.0, r));
                }
            }
            let (hh, hw) = (
                (fp.height as f64 * r.random_range(0.3..0.6)) as usize,
                (fp.width as f64 * r.random_range(0.3..0.6)) as usize,
            );
            let hy = r.random_range(fp.top..=fp.top + fp.height - hh);
            let hx = r.random_range(fp.left..=fp.left + fp.width - hw);
            for y in fp.top..fp.top + fp.height {
                for x in fp.left..fp.left + fp.width {
                    let c = if (hy..hy + hh).contains(&y) && (hx..hx + hw).contains(&x) {
                        [35.0, 30.0, 28.0]
                    } else if r.random_bool(0.3) {
                        [80.0, 75.0, 70.0]
                    } else {
                        scene.roof_color.map(|v| v * 0.5)
                    };
                    img.set(y, x, jitter_color(c, 6.0, r));
                }
            }
        }
    }
    img
}

fn photometric_jitter<R: Rng>(img: &mut Image, r: &mut R) {
    let offsets: [i32; 3] = std::array::from_fn(|_| r.random_range(-JITTER_GLOBAL..=JITTER_GLOBAL));
    let before = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let c = img.get(y, x);
            let out = std::array::from_fn(|i| {
                (c[i] as i32 + offsets[i] + r.random_range(-JITTER_PIXEL..=JITTER_PIXEL)).clamp(0, 255) as u8
            });
            img.set(y, x, out);
        }
    }
    if *img == before {
        let c = img.get(0, 0);
        img.set(0, 0, [if c[0] == 255 { 254 } else { c[0] + 1 }, c[1], c[2]]);
    }
}

pub fn render_pair(domain: &DomainSpec, scene_seed: u64, damaged: bool) -> LabeledPair {
    let scene = render_scene(domain, scene_seed);
    let mut r = rng(derive_seed(domain.seed, &format!("post/{scene_seed}/{damaged}")));
    let mut post =
        if damaged { apply_disaster(&scene, domain.disaster_kind, &mut r) } else { scene.image.clone() };
    photometric_jitter(&mut post, &mut r);
    LabeledPair {
        pre: scene.image,
        post,
        label: damaged as u8,
        domain: domain.name.clone(),
        provenance: Provenance::Procedural,
    }
}

/// Plans a procedural dataset of `n` scenes, exactly `round(n * damage_rate)`
/// of them damaged. Images are rendered on demand from `scene_seed`.
pub fn build_dataset(domain: &DomainSpec, n: usize, damage_rate: f64, seed: u64) -> Result<DatasetManifest> {
    domain.validate()?;
    if n == 0 {
        return Err(config("dataset size must be at least 1"));
    }
    if !(0.0..=1.0).contains(&damage_rate) {
        return Err(config(format!("damage_rate {damage_rate} outside [0, 1]")));
    }
    let damaged_count = (n as f64 * damage_rate).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(derive_seed(seed, "damage-assignment")));
    let mut damaged = vec![false; n];
    for &i in &order[..damaged_count] {
        damaged[i] = true;
    }
    let entries = (0..n)
        .map(|i| {
            let id = format!("{}-{i:05}", domain.name);
            ManifestEntry {
                pre_path: layout_path(&domain.name, Split::Train, &id, "pre"),
                post_path: Some(layout_path(&domain.name, Split::Train, &id, "post")),
                label: Some(damaged[i] as u8),
                domain: domain.name.clone(),
                split: Split::Train,
                provenance: Some(Provenance::Procedural),
                scene_seed: Some(derive_seed(seed, &format!("scene/{i}"))),
                extra: BTreeMap::new(),
                id,
            }
        })
        .collect();
    Ok(DatasetManifest { root: PathBuf::new(), entries })
}

/// Renders a procedural entry without touching the disk.
pub fn render_entry(domain: &DomainSpec, entry: &ManifestEntry) -> Result<LabeledPair> {
    match (entry.scene_seed, entry.label) {
        (Some(s), Some(l)) => Ok(render_pair(domain, s, l == 1)),
        _ => Err(Error::Contract(format!("entry {} is not procedural", entry.id))),
    }
}

/// Renders every entry to `root` and writes `root/<domain>.jsonl`.
pub fn materialize(manifest: &DatasetManifest, domain: &DomainSpec, root: &Path) -> Result<PathBuf> {
    for e in &manifest.entries {
        let pair = render_entry(domain, e)?;
        pair.pre.save_png(&root.join(&e.pre_path))?;
        if let Some(p) = &e.post_path {
            pair.post.save_png(&root.join(p))?;
        }
    }
    let path = root.join(format!("{}.jsonl", domain.name));
    manifest.write_jsonl(&path)?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !f.is_finite() || *f < 0.0) || ((all.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(config(format!("split fractions {all:?} must be nonnegative and sum to 1")));
        }
        Ok(())
    }
}

/// Stratified split: every label group is shuffled and cut by the fractions
/// separately. Returns the manifests for train, val and test.
pub fn split_dataset(
    manifest: &DatasetManifest,
    fractions: SplitFractions,
    seed: u64,
) -> Result<[DatasetManifest; 3]> {
    fractions.validate()?;
    let mut strata: BTreeMap<Option<u8>, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        strata.entry(e.label).or_default().push(i);
    }
    let mut assigned = vec![Split::Train; manifest.entries.len()];
    for (label, mut members) in strata {
        let tag = format!("split/{label:?}");
        members.shuffle(&mut rng(derive_seed(seed, &tag)));
        let n = members.len() as f64;
        let n_train = (n * fractions.train).round() as usize;
        let n_val = ((n * fractions.val).round() as usize).min(members.len() - n_train);
        for (k, &i) in members.iter().enumerate() {
            assigned[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    let mut out: [DatasetManifest; 3] = Default::default();
    for (m, split) in out.iter_mut().zip(Split::ALL) {
        m.root = manifest.root.clone();
        for (e, s) in manifest.entries.iter().zip(&assigned) {
            if *s == split {
                let mut e = e.clone();
                e.set_split(split);
                m.entries.push(e);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain() -> DomainSpec {
        benchmark_domains().remove(0)
    }

    #[test]
    fn rendering_is_deterministic() {
        for d in benchmark_domains() {
            assert_eq!(render_pair(&d, 7, true), render_pair(&d, 7, true));
        }
    }

    #[test]
    fn undamaged_post_differs_by_jitter_only() {
        let p = render_pair(&domain(), 7, false);
        assert_eq!(p.label, 0);
        assert_ne!(p.pre, p.post);
        assert!(p.pre.mean_abs_diff(&p.post) < JITTER_BOUND);
    }

    #[test]
    fn damage_changes_the_building_region() {
        for d in benchmark_domains() {
            for s in 0..5 {
                let p = render_pair(&d, s, true);
                let fp = render_scene(&d, s).footprint;
                let (mut diff, mut count) = (0.0, 0);
                for y in 0..IMAGE_SIZE {
                    for x in 0..IMAGE_SIZE {
                        if fp.distance(y, x) <= 4.0 {
                            let (a, b) = (p.pre.get(y, x), p.post.get(y, x));
                            diff += (0..3).map(|i| a[i].abs_diff(b[i]) as f64).sum::<f64>();
                            count += 3;
                        }
                    }
                }
                let per = diff / count as f64;
                assert!(per > 2.0 * JITTER_BOUND, "{} seed {s}: {per}", d.name);
            }
        }
    }

    #[test]
    fn building_centers_in_central_window() {
        let d = domain();
        let (lo, hi) = (IMAGE_SIZE / 2 - IMAGE_SIZE / 8, IMAGE_SIZE / 2 + IMAGE_SIZE / 8);
        for s in 0..1000 {
            let fp = render_scene(&d, s).footprint;
            assert!((lo..hi).contains(&fp.center_row) && (lo..hi).contains(&fp.center_col), "seed {s}");
            assert_eq!(fp.top + fp.height / 2, fp.center_row);
            assert_eq!(fp.left + fp.width / 2, fp.center_col);
        }
    }

    #[test]
    fn damage_counts_follow_rate() {
        let d = domain();
        let count = |m: &DatasetManifest| m.entries.iter().filter(|e| e.label == Some(1)).count();
        assert_eq!(count(&build_dataset(&d, 100, 0.2, 1).unwrap()), 20);
        assert_eq!(count(&build_dataset(&d, 5, 0.0, 1).unwrap()), 0);
        assert_eq!(count(&build_dataset(&d, 50, 1.0, 1).unwrap()), 50);
        assert!(build_dataset(&d, 0, 0.2, 1).is_err());
        assert!(build_dataset(&d, 3, 1.5, 1).is_err());
    }

    #[test]
    fn stratified_split_sizes() {
        let m = build_dataset(&domain(), 100, 0.2, 3).unwrap();
        let [tr, va, te] = split_dataset(&m, SplitFractions::default(), 9).unwrap();
        assert_eq!((tr.entries.len(), va.entries.len(), te.entries.len()), (80, 10, 10));
        for (part, size) in [(&tr, 80.0), (&va, 10.0), (&te, 10.0)] {
            let pos = part.entries.iter().filter(|e| e.label == Some(1)).count() as f64;
            assert!((pos - 0.2 * size).abs() <= 1.0);
            assert!(part.entries.iter().all(|e| e.pre_path.contains(&format!("/{}/", e.split.name()))));
        }
        let again = split_dataset(&m, SplitFractions::default(), 9).unwrap();
        assert_eq!(again[1], va);
        let bad = SplitFractions { train: 0.8, val: 0.1, test: 0.2 };
        assert!(matches!(split_dataset(&m, bad, 9), Err(Error::Config(_))));
    }

    #[test]
    fn domain_validation() {
        let mut d = domain();
        d.background_hue = 360.0;
        assert!(d.validate().is_err());
        let mut d = domain();
        d.clutter_density = -0.1;
        assert!(d.validate().is_err());
        let twice = vec![domain(), domain()];
        assert!(validate_domains(&twice).is_err());
    }
}
