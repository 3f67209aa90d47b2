//! Prompt pools, prompt labels and prompt tokenization.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::seed::sha256_hex;
use crate::toyworld::DisasterKind;

pub const PROMPT_LEN: usize = 16;
pub const UNK_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
const FIRST_WORD_ID: u32 = 2;

const SKAI_DAMAGED: [&str; 5] = [
    "An aerial view of a house damaged due to a hurricane.",
    "A bird's-eye view of a building destroyed by a hurricane.",
    "A top-down view of a house damaged by a hurricane.",
    "A satellite image of a building destroyed by a hurricane.",
    "A bird's-eye view of a building damaged by a hurricane.",
];
const SKAI_UNDAMAGED: [&str; 4] = [
    "A satellite image of a house covered by trees.",
    "A bird's-eye view of a house surrounded by trees.",
    "A top-down view of a house under tree shade.",
    "An aerial view of an intact house under tree shade.",
];
const MOORE_TORNADO: [&str; 5] = [
    "An aerial view of a house damaged due to a tornado.",
    "A bird's-eye view of a building destroyed by a tornado.",
    "A top-down view of a house damaged by a tornado.",
    "A satellite image of a building destroyed by a tornado.",
    "A bird's-eye view of a building damaged by a tornado.",
];
const NEPAL_FLOODS: [&str; 5] = [
    "An aerial view of houses surrounded by a flood.",
    "A top-down view of houses damaged by floods.",
    "A top-down view of a house damaged by floods inundated in water.",
    "A satellite image of a building destroyed by a flood surrounded by water.",
    "A satellite image of houses that was destroyed by a flood surrounded by water and trees.",
];
const PORTUGAL_WILDFIRE: [&str; 4] = [
    "An aerial view of forest land after it is torched by a wildfire.",
    "An aerial view of buildings after a wildfire.",
    "An aerial image of forest land scorched by a wildfire.",
    "A bird's-eye view of a forest region with completely scorched trees.",
];
const TOY_DAMAGED_TEMPLATES: [&str; 5] = [
    "An aerial view of a house damaged due to a {}.",
    "A bird's-eye view of a building destroyed by a {}.",
    "A top-down view of a house damaged by a {}.",
    "A satellite image of a building destroyed by a {}.",
    "A bird's-eye view of a building damaged by a {}.",
];
const TOY_UNDAMAGED: [&str; 4] = [
    "A satellite image of a building.",
    "An aerial view of an intact house.",
    "A top-down view of an undamaged building.",
    "A bird's-eye view of a house surrounded by trees.",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PoolKind {
    SkaiDamaged,
    SkaiUndamaged,
    MooreTornado,
    NepalFloods,
    PortugalWildfire,
    ToyDamaged(DisasterKind),
    ToyUndamaged,
}

impl PoolKind {
    pub fn all() -> Vec<PoolKind> {
        let mut v = vec![
            PoolKind::SkaiDamaged,
            PoolKind::SkaiUndamaged,
            PoolKind::MooreTornado,
            PoolKind::NepalFloods,
            PoolKind::PortugalWildfire,
        ];
        v.extend(DisasterKind::ALL.map(PoolKind::ToyDamaged));
        v.push(PoolKind::ToyUndamaged);
        v
    }

    pub fn label(self) -> u8 {
        match self {
            PoolKind::SkaiUndamaged | PoolKind::ToyUndamaged => 0,
            _ => 1,
        }
    }

    pub fn disaster_kind(self) -> Option<DisasterKind> {
        match self {
            PoolKind::SkaiDamaged | PoolKind::SkaiUndamaged => Some(DisasterKind::Hurricane),
            PoolKind::MooreTornado => Some(DisasterKind::Tornado),
            PoolKind::NepalFloods => Some(DisasterKind::Flood),
            PoolKind::PortugalWildfire => Some(DisasterKind::Wildfire),
            PoolKind::ToyDamaged(k) => Some(k),
            PoolKind::ToyUndamaged => None,
        }
    }

    fn texts(self) -> Vec<String> {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        match self {
            PoolKind::SkaiDamaged => own(&SKAI_DAMAGED),
            PoolKind::SkaiUndamaged => own(&SKAI_UNDAMAGED),
            PoolKind::MooreTornado => own(&MOORE_TORNADO),
            PoolKind::NepalFloods => own(&NEPAL_FLOODS),
            PoolKind::PortugalWildfire => own(&PORTUGAL_WILDFIRE),
            PoolKind::ToyDamaged(k) => TOY_DAMAGED_TEMPLATES.iter().map(|t| t.replace("{}", k.name())).collect(),
            PoolKind::ToyUndamaged => own(&TOY_UNDAMAGED),
        }
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolKind::SkaiDamaged => f.write_str("skai_damaged"),
            PoolKind::SkaiUndamaged => f.write_str("skai_undamaged"),
            PoolKind::MooreTornado => f.write_str("moore_tornado"),
            PoolKind::NepalFloods => f.write_str("nepal_floods"),
            PoolKind::PortugalWildfire => f.write_str("portugal_wildfire"),
            PoolKind::ToyDamaged(k) => write!(f, "toy_{k}_damaged"),
            PoolKind::ToyUndamaged => f.write_str("toy_undamaged"),
        }
    }
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolKind::all()
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| config(format!("unknown prompt pool kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub label: u8,
    pub disaster_kind: Option<DisasterKind>,
    pub pool_name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    pub name: String,
    pub prompts: Vec<Prompt>,
    /// Sorted word types of the pool's prompts.
    pub vocabulary: Vec<String>,
}

impl PromptPool {
    /// Shared label of the pool's prompts.
    pub fn label(&self) -> u8 {
        self.prompts[0].label
    }

    pub fn to_json(&self) -> String {
        let file = PoolFile {
            name: self.name.clone(),
            prompts: self.prompts.iter().map(|p| PoolEntry { text: p.text.clone(), label: p.label }).collect(),
            vocabulary: self.vocabulary.clone(),
        };
        serde_json::to_string_pretty(&file).expect("pool serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PoolFile = serde_json::from_str(text)?;
        if file.prompts.is_empty() {
            return Err(config(format!("prompt pool {:?} is empty", file.name)));
        }
        let label = file.prompts[0].label;
        if label > 1 || file.prompts.iter().any(|p| p.label != label) {
            return Err(config(format!("prompt pool {:?} must carry a single 0/1 label", file.name)));
        }
        let words = word_types(file.prompts.iter().map(|p| p.text.as_str()));
        if let Some(missing) = words.iter().find(|w| !file.vocabulary.contains(w)) {
            return Err(config(format!("pool {:?}: word {missing:?} missing from its vocabulary", file.name)));
        }
        let kind = DisasterKind::ALL.into_iter().find(|k| file.name.contains(k.name()));
        Ok(Self {
            prompts: file
                .prompts
                .iter()
                .map(|p| Prompt { text: p.text.clone(), label, disaster_kind: kind, pool_name: file.name.clone() })
                .collect(),
            name: file.name,
            vocabulary: file.vocabulary,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::from_json(&text).map_err(|e| Error::load(path, e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct PoolFile {
    name: String,
    prompts: Vec<PoolEntry>,
    #[serde(default)]
    vocabulary: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PoolEntry {
    text: String,
    label: u8,
}

pub fn build_pool(kind: PoolKind) -> PromptPool {
    let name = kind.to_string();
    let texts = kind.texts();
    PromptPool {
        vocabulary: word_types(texts.iter().map(String::as_str)),
        prompts: texts
            .into_iter()
            .map(|text| Prompt { text, label: kind.label(), disaster_kind: kind.disaster_kind(), pool_name: name.clone() })
            .collect(),
        name,
    }
}

/// Parses a pool kind name and builds the pool.
pub fn build_pool_named(kind: &str) -> Result<PromptPool> {
    Ok(build_pool(kind.parse()?))
}

pub fn sample_prompt<'a, R: Rng + ?Sized>(pool: &'a PromptPool, rng: &mut R) -> &'a Prompt {
    &pool.prompts[rng.random_range(0..pool.prompts.len())]
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

fn word_types<'a>(texts: impl Iterator<Item = &'a str>) -> Vec<String> {
    texts.flat_map(normalize).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Word-to-id table used by the generator and the scorer. Word `i` of the
/// sorted list has id `i + 2`; ids 0 and 1 are UNK and PAD.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
}

impl Vocabulary {
    pub fn from_pools<'a>(pools: impl IntoIterator<Item = &'a PromptPool>) -> Self {
        let words: BTreeSet<String> = pools.into_iter().flat_map(|p| p.vocabulary.iter().cloned()).collect();
        Self { words: words.into_iter().collect() }
    }

    /// Union of every built-in pool.
    pub fn builtin() -> Self {
        let pools: Vec<PromptPool> = PoolKind::all().into_iter().map(build_pool).collect();
        Self::from_pools(&pools)
    }

    /// Number of ids including UNK and PAD.
    pub fn size(&self) -> usize {
        self.words.len() + FIRST_WORD_ID as usize
    }

    pub fn id(&self, word: &str) -> u32 {
        match self.words.binary_search_by(|w| w.as_str().cmp(word)) {
            Ok(i) => i as u32 + FIRST_WORD_ID,
            Err(_) => UNK_ID,
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.words.join("\n").as_bytes())
    }
}

pub fn tokenize_prompt(text: &str, vocabulary: &Vocabulary) -> Vec<u32> {
    let mut ids: Vec<u32> = normalize(text).iter().take(PROMPT_LEN).map(|w| vocabulary.id(w)).collect();
    ids.resize(PROMPT_LEN, PAD_ID);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;

    #[test]
    fn builtin_pools() {
        let p = build_pool(PoolKind::SkaiDamaged);
        assert_eq!(p.prompts.len(), 5);
        assert_eq!(p.prompts[0].text, "An aerial view of a house damaged due to a hurricane.");
        assert!(p.prompts.iter().all(|q| q.label == 1));
        let u = build_pool_named("skai_undamaged").unwrap();
        assert_eq!(u.prompts.len(), 4);
        assert!(u.prompts.iter().all(|q| q.label == 0));
        assert_eq!(build_pool(PoolKind::PortugalWildfire).prompts.len(), 4);
        assert!(matches!(build_pool_named("mars_dust"), Err(Error::Config(_))));
    }

    #[test]
    fn toy_pools_name_their_disaster() {
        for k in DisasterKind::ALL {
            let p = build_pool_named(&format!("toy_{k}_damaged")).unwrap();
            assert_eq!(p.prompts.len(), 5);
            assert!(p.prompts.iter().all(|q| q.text.contains(k.name()) && q.label == 1));
        }
        assert_eq!(build_pool(PoolKind::ToyUndamaged).label(), 0);
    }

    #[test]
    fn every_builtin_prompt_fits() {
        let v = Vocabulary::builtin();
        for kind in PoolKind::all() {
            for p in build_pool(kind).prompts {
                let words = normalize(&p.text);
                assert!(words.len() <= PROMPT_LEN, "{}", p.text);
                assert!(tokenize_prompt(&p.text, &v).iter().all(|&id| id != UNK_ID));
            }
        }
    }

    #[test]
    fn tokenization_contract() {
        let v = Vocabulary::builtin();
        let ids = tokenize_prompt("A satellite image of a building", &v);
        assert_eq!(ids.len(), PROMPT_LEN);
        assert!(ids[..6].iter().all(|&i| i >= 2));
        assert!(ids[6..].iter().all(|&i| i == PAD_ID));
        assert_eq!(tokenize_prompt("", &v), vec![PAD_ID; PROMPT_LEN]);
        assert_eq!(tokenize_prompt("a zeppelin", &v)[1], UNK_ID);
        let once = normalize("A Bird's-eye view.").join(" ");
        assert_eq!(normalize(&once).join(" "), once);
    }

    #[test]
    fn sampling_is_uniform_and_seeded() {
        let pool = build_pool(PoolKind::SkaiDamaged);
        let mut r = rng(3);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let p = sample_prompt(&pool, &mut r);
            counts[pool.prompts.iter().position(|q| q == p).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.2).abs() < 0.02, "{counts:?}");
        }
        assert_eq!(sample_prompt(&pool, &mut rng(4)), sample_prompt(&pool, &mut rng(4)));
    }

    #[test]
    fn json_round_trip() {
        let pool = build_pool(PoolKind::NepalFloods);
        let back = PromptPool::from_json(&pool.to_json()).unwrap();
        assert_eq!(back.prompts.iter().map(|p| &p.text).collect::<Vec<_>>(), pool.prompts.iter().map(|p| &p.text).collect::<Vec<_>>());
        assert!(PromptPool::from_json(r#"{"name":"x","prompts":[],"vocabulary":[]}"#).is_err());
        assert!(PromptPool::from_json(r#"{"name":"x","prompts":[{"text":"a b","label":1}],"vocabulary":["a"]}"#).is_err());
    }
}
