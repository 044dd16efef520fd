use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

const CATEGORIES: &[(&str, &[&str])] = &[
    ("apparel", &["dress", "shirt", "jeans", "jacket", "skirt", "hoodie", "coat", "socks"]),
    ("electronics", &["phone", "laptop", "charger", "speaker", "camera", "tablet", "headset", "cable"]),
    ("home", &["sofa", "lamp", "pillow", "curtain", "blanket", "kettle", "mug", "rug"]),
    ("beauty", &["lipstick", "serum", "shampoo", "perfume", "lotion", "mascara", "soap", "cream"]),
    ("sports", &["racket", "helmet", "sneakers", "tent", "bike", "ball", "gloves", "mat"]),
    ("toys", &["doll", "puzzle", "robot", "kite", "blocks", "drone", "train", "yoyo"]),
    ("food", &["coffee", "tea", "snacks", "cookies", "rice", "noodles", "honey", "juice"]),
    ("books", &["novel", "comic", "atlas", "diary", "notebook", "poster", "planner", "pens"]),
    ("pets", &["leash", "collar", "kibble", "litter", "aquarium", "catnip", "harness", "bowl"]),
    ("garden", &["shovel", "hose", "seeds", "planter", "fertilizer", "gnome", "rake", "trellis"]),
    ("auto", &["tire", "wiper", "dashcam", "jumper", "wax", "mirror", "fuses", "seatcover"]),
    ("jewelry", &["ring", "necklace", "earrings", "bracelet", "watch", "pendant", "anklet", "brooch"]),
];

const MODIFIERS: &[&str] = &[
    "red", "blue", "black", "white", "pink", "green", "cheap", "large", "small", "kids",
    "women", "men", "wireless", "cotton", "leather", "mini", "pro", "organic", "vintage",
    "summer", "winter", "sale", "new", "premium", "set", "pack", "gift", "travel", "classic",
    "soft", "gold", "silver", "waterproof", "portable", "luxury", "bulk", "retro", "slim",
    "smart", "floral",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub query: String,
    pub category: String,
    pub weight: f64,
}

/// Query universe with per-category popularity weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    entries: Vec<CatalogEntry>,
    by_query: HashMap<String, usize>,
    categories: Vec<String>,
}

impl Catalog {
    pub fn from_entries(entries: Vec<CatalogEntry>) -> Result<Self> {
        let mut by_query = HashMap::with_capacity(entries.len());
        let mut categories: Vec<String> = Vec::new();
        for (i, e) in entries.iter().enumerate() {
            if e.query.is_empty() || !(e.weight > 0.0) {
                return Err(invalid("catalog", format!("bad entry {:?}", e.query)));
            }
            if by_query.insert(e.query.clone(), i).is_some() {
                return Err(invalid("catalog", format!("duplicate query {:?}", e.query)));
            }
            if !categories.contains(&e.category) {
                categories.push(e.category.clone());
            }
        }
        Ok(Self {
            entries,
            by_query,
            categories,
        })
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Category names in first-appearance order.
    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn get(&self, query: &str) -> Option<&CatalogEntry> {
        self.by_query.get(query).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, query: &str) -> bool {
        self.by_query.contains_key(query)
    }

    pub fn in_category<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a CatalogEntry> + 'a {
        self.entries.iter().filter(move |e| e.category == category)
    }
}

/// Modifier taste group (0 or 1) of a modifier word.
pub fn modifier_group(modifier: &str) -> usize {
    // FNV-1a: stable across platforms and releases.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in modifier.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    (h >> 7) as usize % 2
}

/// Deterministic pronounceable filler word for index `i`.
fn pseudo_word(i: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut n = i;
    let mut w = String::new();
    for _ in 0..3 {
        w.push(C[n % C.len()] as char);
        n /= C.len();
        w.push(V[n % V.len()] as char);
        n /= V.len();
    }
    if n > 0 {
        w.push_str(&n.to_string());
    }
    w
}

/// Builds `n_queries` templated `"<category-word> <modifier>"` queries spread
/// evenly over `n_categories`, with `words_per_category` head words each and
/// power-law popularity within a category.
pub fn generate_catalog(
    seed: u64,
    n_categories: usize,
    n_queries: usize,
    words_per_category: usize,
    exponent: f64,
) -> Result<Catalog> {
    if n_categories == 0 || n_queries < n_categories {
        return Err(invalid(
            "generate_catalog",
            format!("need n_queries ({n_queries}) >= n_categories ({n_categories}) >= 1"),
        ));
    }
    if words_per_category == 0 || !(exponent >= 0.0) {
        return Err(invalid("generate_catalog", "words_per_category must be >= 1 and exponent >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pseudo = 0usize;
    let mut next_pseudo = || {
        pseudo += 1;
        pseudo_word(pseudo * 7919)
    };

    let mut entries = Vec::with_capacity(n_queries);
    for c in 0..n_categories {
        let quota = n_queries / n_categories + usize::from(c < n_queries % n_categories);
        let (name, words): (String, Vec<String>) = match CATEGORIES.get(c) {
            Some((name, ws)) => (name.to_string(), ws.iter().map(|w| w.to_string()).collect()),
            None => (format!("misc{c}"), Vec::new()),
        };
        let n_words = words_per_category.min(quota);
        let mut words: Vec<String> = words.into_iter().take(n_words).collect();
        while words.len() < n_words {
            words.push(next_pseudo());
        }
        let per_word = quota.div_ceil(n_words);
        let mut modifiers: Vec<String> = MODIFIERS.iter().map(|m| m.to_string()).collect();
        let mut k = 0;
        while modifiers.len() < per_word {
            k += 1;
            modifiers.push(pseudo_word(k * 104729 + 13));
        }
        let perms: Vec<Vec<usize>> = (0..n_words)
            .map(|_| {
                let mut p: Vec<usize> = (0..modifiers.len()).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        let mut queries: Vec<String> = (0..quota)
            .map(|k| format!("{} {}", words[k % n_words], modifiers[perms[k % n_words][k / n_words]]))
            .collect();
        queries.shuffle(&mut rng);
        let raw: Vec<f64> = (0..quota).map(|r| ((r + 1) as f64).powf(-exponent)).collect();
        let total: f64 = raw.iter().sum();
        entries.extend(queries.into_iter().zip(raw).map(|(query, w)| CatalogEntry {
            query,
            category: name.clone(),
            weight: w / total,
        }));
    }
    Catalog::from_entries(entries)
}
