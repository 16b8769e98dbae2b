//! Synthetic restaurant benchmark with a tunable cuisine/price correlation.
//!
//! Each cuisine has a partner price range. With correlation `rho > 0`,
//! `round(rho · n)` of the `n` rows of every cuisine carry the partner price
//! and the rest carry one of the other prices, so dropping the price clause
//! from a query barely widens its result set. `rho = 0` draws prices
//! independently of cuisine.
//!
//! Dialogs are scripted: the user states one intent attribute per turn, the
//! query turn follows the last attribute, the system then names a restaurant
//! and answers one follow-up request. A fixed share of dialogs is scripted so
//! that the first-new-entity heuristic misses the query turn, either because
//! the system names the restaurant one turn late or because it offers two
//! alternative values before the user has finished.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialog::{heuristic_position, subsequent_entities, Dialog, Turn};
use crate::kb::{Clause, KnowledgeBase, Query};
use crate::reward::reward;

pub const CUISINES: [&str; 20] = [
    "chinese",
    "italian",
    "indian",
    "french",
    "spanish",
    "thai",
    "japanese",
    "korean",
    "turkish",
    "greek",
    "mexican",
    "british",
    "vietnamese",
    "lebanese",
    "portuguese",
    "african",
    "european",
    "seafood",
    "moroccan",
    "persian",
];
pub const PRICES: [&str; 5] = ["cheap", "moderate", "expensive", "budget", "luxury"];
pub const AREAS: [&str; 7] = ["north", "south", "east", "west", "centre", "riverside", "airport"];
const RATINGS: [&str; 5] = ["one star", "two stars", "three stars", "four stars", "five stars"];
const NAME_HEADS: [&str; 16] = [
    "golden", "royal", "little", "blue", "silver", "happy", "old", "grand", "lucky", "red", "green", "jade", "copper",
    "hidden", "sunny", "twin",
];
const NAME_TAILS: [&str; 12] = [
    "wok", "garden", "kitchen", "table", "lantern", "house", "bistro", "grill", "palace", "corner", "oven", "spoon",
];
const STREETS: [&str; 10] = [
    "mill", "regent", "castle", "bridge", "market", "station", "king", "hills", "church", "park",
];
const STREET_KINDS: [&str; 3] = ["road", "street", "lane"];
const FILLERS: [&str; 12] = [
    "please", "um", "okay", "well", "actually", "so", "yes", "right", "maybe", "thanks", "hmm", "really",
];

pub const FIELDS: [&str; 8] = [
    "name",
    "cuisine",
    "pricerange",
    "area",
    "phone",
    "address",
    "postcode",
    "rating",
];
const NAME: usize = 0;
const CUISINE: usize = 1;
const PRICE: usize = 2;
const AREA: usize = 3;
const PHONE: usize = 4;
const ADDRESS: usize = 5;
const POSTCODE: usize = 6;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error("dialog {split}/{index}: {message}")]
    Gold {
        split: String,
        index: usize,
        message: String,
    },
}

/// A weighted intent shape: the informable fields a user constrains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentShape {
    pub fields: Vec<String>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub rows: usize,
    pub cuisines: usize,
    pub prices: usize,
    pub areas: usize,
    /// Share of each cuisine's rows carrying its partner price.
    pub rho: f64,
    pub train_dialogs: usize,
    pub val_dialogs: usize,
    pub test_dialogs: usize,
    pub intents: Vec<IntentShape>,
    /// Share of dialogs whose heuristic position equals the gold position.
    pub heuristic_match: f64,
    /// Probability that a user utterance gets a filler word.
    pub filler_rate: f64,
    /// Share of dialogs where the user also mentions the target row's area
    /// without asking for it, so an over-constrained query beats the gold.
    pub overconstrained: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            rows: 110,
            cuisines: 14,
            prices: 3,
            areas: 5,
            rho: 0.875,
            train_dialogs: 406,
            val_dialogs: 135,
            test_dialogs: 135,
            intents: vec![
                shape(&["cuisine", "pricerange"], 0.6),
                shape(&["cuisine", "pricerange", "area"], 0.2),
                shape(&["cuisine"], 0.1),
                shape(&["pricerange", "area"], 0.1),
            ],
            heuristic_match: 0.8,
            filler_rate: 0.3,
            overconstrained: 0.0,
            seed: 0,
        }
    }
}

fn shape(fields: &[&str], weight: f64) -> IntentShape {
    IntentShape {
        fields: fields.iter().map(|s| s.to_string()).collect(),
        weight,
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho = {} outside [0, 1]", self.rho));
        }
        if !(0.0..=1.0).contains(&self.heuristic_match) {
            return bad(format!("heuristic_match = {} outside [0, 1]", self.heuristic_match));
        }
        for (name, p) in [
            ("filler_rate", self.filler_rate),
            ("overconstrained", self.overconstrained),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.rows < 4 || self.rows > NAME_HEADS.len() * NAME_TAILS.len() {
            return bad(format!(
                "rows = {} outside 4..={}",
                self.rows,
                NAME_HEADS.len() * NAME_TAILS.len()
            ));
        }
        for (name, n, max) in [
            ("cuisines", self.cuisines, CUISINES.len()),
            ("prices", self.prices, PRICES.len()),
            ("areas", self.areas, AREAS.len()),
        ] {
            if n < 2 || n > max {
                return bad(format!("{name} = {n} outside 2..={max}"));
            }
        }
        if self.cuisines > self.rows {
            return bad("more cuisines than rows".into());
        }
        if self.intents.is_empty() || self.intents.iter().any(|s| s.weight.is_nan() || s.weight < 0.0) {
            return bad("intent shapes need non-negative weights".into());
        }
        if self.intents.iter().map(|s| s.weight).sum::<f64>() <= 0.0 {
            return bad("intent weights sum to zero".into());
        }
        for s in &self.intents {
            let set: BTreeSet<&str> = s.fields.iter().map(String::as_str).collect();
            if set.is_empty() || set.len() != s.fields.len() {
                return bad(format!("intent shape {:?} must list distinct fields", s.fields));
            }
            if let Some(f) = set.iter().find(|f| !["cuisine", "pricerange", "area"].contains(f)) {
                return bad(format!("{f} is not an informable field"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitStats {
    pub dialogs: usize,
    pub heuristic_match_rate: f64,
    pub mean_turns: f64,
    pub mean_gold_clauses: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchManifest {
    pub config: BenchConfig,
    /// Share of rows whose price is their cuisine's partner price.
    pub achieved_rho: f64,
    /// Rows per cuisine, largest count.
    pub max_cuisine_rows: usize,
    pub splits: BTreeMap<String, SplitStats>,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub kb: KnowledgeBase,
    pub train: Vec<Dialog>,
    pub val: Vec<Dialog>,
    pub test: Vec<Dialog>,
    pub manifest: BenchManifest,
}

impl Benchmark {
    pub fn splits(&self) -> [(&'static str, &[Dialog]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn partner_price(cuisine: usize, prices: usize) -> usize {
    cuisine % prices
}

fn generate_kb(cfg: &BenchConfig) -> KnowledgeBase {
    let mut rng = substream(cfg.seed, 0);
    let mut names: Vec<String> = NAME_HEADS
        .iter()
        .flat_map(|h| NAME_TAILS.iter().map(move |t| format!("{h}_{t}")))
        .collect();
    names.shuffle(&mut rng);
    let mut phones = BTreeSet::new();
    let mut addresses = BTreeSet::new();

    // cuisines round-robin, then each cuisine's rows split between partner
    // and other prices
    let cuisine_of: Vec<usize> = (0..cfg.rows).map(|i| i % cfg.cuisines).collect();
    let mut price_of = vec![0; cfg.rows];
    for c in 0..cfg.cuisines {
        let mut rows: Vec<usize> = (0..cfg.rows).filter(|&r| cuisine_of[r] == c).collect();
        rows.shuffle(&mut rng);
        let partner = partner_price(c, cfg.prices);
        let n_partner = if cfg.rho == 0.0 {
            0
        } else {
            (cfg.rho * rows.len() as f64).round() as usize
        };
        for (k, &r) in rows.iter().enumerate() {
            price_of[r] = if cfg.rho == 0.0 {
                rng.random_range(0..cfg.prices)
            } else if k < n_partner {
                partner
            } else {
                let other = rng.random_range(0..cfg.prices - 1);
                if other >= partner {
                    other + 1
                } else {
                    other
                }
            };
        }
    }

    let mut rows = Vec::with_capacity(cfg.rows);
    for r in 0..cfg.rows {
        let phone = loop {
            let p = format!("01223-{:06}", rng.random_range(0..1_000_000));
            if phones.insert(p.clone()) {
                break p;
            }
        };
        let address = loop {
            let a = format!(
                "{}_{}_{}",
                rng.random_range(10..100),
                STREETS.choose(&mut rng).unwrap(),
                STREET_KINDS.choose(&mut rng).unwrap()
            );
            if addresses.insert(a.clone()) {
                break a;
            }
        };
        let postcode = format!(
            "cb{}_{}{}{}",
            rng.random_range(1..6),
            rng.random_range(1..10),
            rng.random_range(b'a'..=b'z') as char,
            rng.random_range(b'a'..=b'z') as char
        );
        rows.push(vec![
            names[r].clone(),
            CUISINES[cuisine_of[r]].to_string(),
            PRICES[price_of[r]].to_string(),
            AREAS[rng.random_range(0..cfg.areas)].to_string(),
            phone,
            address,
            postcode,
            RATINGS.choose(&mut rng).unwrap().replace(' ', "_"),
        ]);
    }
    KnowledgeBase::new(FIELDS.iter().map(|s| s.to_string()).collect(), rows).expect("generated KB is well formed")
}

fn spoken(value: &str) -> String {
    value.replace('_', " ")
}

fn with_filler(rng: &mut ChaCha8Rng, cfg: &BenchConfig, text: String) -> String {
    if rng.random_bool(cfg.filler_rate) {
        let f = FILLERS.choose(rng).unwrap();
        if rng.random_bool(0.5) {
            format!("{f} {text}")
        } else {
            format!("{text} {f}")
        }
    } else {
        text
    }
}

fn state_attribute(rng: &mut ChaCha8Rng, field: usize, value: &str) -> String {
    let v = spoken(value);
    let options: Vec<String> = match field {
        CUISINE => vec![
            format!("i want {v} food"),
            format!("something that serves {v} food"),
            format!("{v} food please"),
            format!("i would like {v} cuisine"),
        ],
        PRICE => vec![
            format!("in the {v} price range"),
            format!("it should be {v}"),
            format!("i am looking for something {v}"),
            format!("{v} price range please"),
        ],
        _ => vec![
            format!("in the {v} part of town"),
            format!("somewhere in the {v}"),
            format!("the {v} area please"),
            format!("it should be in the {v}"),
        ],
    };
    options.choose(rng).unwrap().clone()
}

fn ask_about(rng: &mut ChaCha8Rng, field: usize) -> String {
    let options: &[&str] = match field {
        CUISINE => &["what type of food would you like ?", "which cuisine do you prefer ?"],
        PRICE => &[
            "what price range are you looking for ?",
            "do you have a budget in mind ?",
        ],
        AREA => &["which part of town ?", "do you have an area in mind ?"],
        _ => &["anything else ?", "can i help with anything else ?"],
    };
    options.choose(rng).unwrap().to_string()
}

fn field_words(field: usize) -> &'static str {
    match field {
        CUISINE => "food",
        PRICE => "options",
        AREA => "areas",
        PHONE => "phone number",
        ADDRESS => "address",
        POSTCODE => "post code",
        _ => "details",
    }
}

enum Mismatch {
    None,
    /// The system names the restaurant one turn after the query.
    Delayed,
    /// The system offers two non-intent values of an intent field early on.
    EarlyOffer,
}

struct Scripted {
    dialog: Dialog,
}

fn script_dialog(kb: &KnowledgeBase, cfg: &BenchConfig, rng: &mut ChaCha8Rng, mismatch: Mismatch) -> Scripted {
    let weights: Vec<f64> = cfg.intents.iter().map(|s| s.weight).collect();
    let dist = rand::distr::weighted::WeightedIndex::new(&weights).expect("validated weights");
    let shape = &cfg.intents[rng.sample(&dist)];
    let target = rng.random_range(0..kb.rows().len());
    let row = &kb.rows()[target];

    let mut intent: Vec<usize> = shape
        .fields
        .iter()
        .map(|f| kb.field_id(f).expect("informable field exists"))
        .collect();
    intent.shuffle(rng);
    let gold = Query::new(intent.iter().map(|&f| Clause::new(FIELDS[f], row[f].clone())).collect())
        .expect("distinct intent fields")
        .canonicalize();

    let mut turns = Vec::new();
    let k = intent.len();
    let offer_turn = rng.random_range(0..k);
    // two values of the field stated last, neither the intended one
    let alternatives = {
        let field = intent[k - 1];
        let mut others: Vec<&String> = kb
            .rows()
            .iter()
            .map(|r| &r[field])
            .filter(|v| **v != row[field])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        others.shuffle(rng);
        (others.len() >= 2).then(|| (field, others[0].clone(), others[1].clone()))
    };
    let mismatch = match (mismatch, &alternatives) {
        (Mismatch::EarlyOffer, None) => Mismatch::Delayed,
        (m, _) => m,
    };
    for (t, &f) in intent.iter().enumerate() {
        let mut user = state_attribute(rng, f, &row[f]);
        if t == 0 {
            user = format!("{} {user}", ["hello", "hi", "good evening"].choose(rng).unwrap());
            if rng.random_bool(cfg.overconstrained) && !intent.contains(&AREA) {
                user = format!("{user} , i was in the {} earlier today", spoken(&row[AREA]));
            }
        }
        let user = with_filler(rng, cfg, user);
        let system = if let (Mismatch::EarlyOffer, Some((field, a, b))) = (&mismatch, &alternatives) {
            if t == offer_turn {
                format!(
                    "we have {} and {} {} , which would you prefer ?",
                    spoken(a),
                    spoken(b),
                    field_words(*field)
                )
            } else if t + 1 < k {
                ask_about(rng, intent[t + 1])
            } else {
                ask_about(rng, usize::MAX)
            }
        } else if t + 1 < k {
            ask_about(rng, intent[t + 1])
        } else {
            ask_about(rng, usize::MAX)
        };
        turns.push(Turn::new(&user, &system));
    }

    let requested = *[PHONE, ADDRESS, POSTCODE].choose(rng).unwrap();
    let done = [
        "no that is all",
        "that is all i need",
        "nothing else , just find me a place",
        "any is fine",
    ]
    .choose(rng)
    .unwrap()
    .to_string();
    let name = spoken(&row[NAME]);
    let offer = format!("{name} is a nice place");
    match mismatch {
        Mismatch::Delayed => {
            turns.push(Turn::new(&with_filler(rng, cfg, done), "let me check that for you"));
            turns.push(Turn::new("okay", &offer));
        }
        _ => turns.push(Turn::new(&with_filler(rng, cfg, done), &offer)),
    }
    turns.push(Turn::new(
        &format!("what is the {} ?", field_words(requested)),
        &format!("the {} is {}", field_words(requested), spoken(&row[requested])),
    ));
    turns.push(Turn::new("thank you goodbye", "you are welcome , goodbye"));

    let mut dialog = Dialog::new(turns);
    dialog.gold_query = Some(gold);
    dialog.gold_position = Some(k + 1);
    dialog.heuristic_position = heuristic_position(&dialog, kb);
    Scripted { dialog }
}

fn generate_split(kb: &KnowledgeBase, cfg: &BenchConfig, split: u64, n: usize) -> Vec<Dialog> {
    let base = (split + 1) << 32;
    let mut rng = substream(cfg.seed, base | 0xffff_ffff);
    let n_mismatch = n - (cfg.heuristic_match * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mismatched: BTreeSet<usize> = order[..n_mismatch].iter().copied().collect();
    (0..n)
        .map(|i| {
            let mut d = substream(cfg.seed, base | i as u64);
            let mismatch = if !mismatched.contains(&i) {
                Mismatch::None
            } else if d.random_bool(0.5) {
                Mismatch::Delayed
            } else {
                Mismatch::EarlyOffer
            };
            script_dialog(kb, cfg, &mut d, mismatch).dialog
        })
        .collect()
}

fn split_stats(dialogs: &[Dialog]) -> SplitStats {
    let n = dialogs.len().max(1) as f64;
    SplitStats {
        dialogs: dialogs.len(),
        heuristic_match_rate: dialogs
            .iter()
            .filter(|d| d.heuristic_position.is_some() && d.heuristic_position == d.gold_position)
            .count() as f64
            / n,
        mean_turns: dialogs.iter().map(|d| d.num_turns()).sum::<usize>() as f64 / n,
        mean_gold_clauses: dialogs
            .iter()
            .map(|d| d.gold_query.as_ref().map_or(0, Query::len))
            .sum::<usize>() as f64
            / n,
    }
}

/// Share of rows whose price is their cuisine's partner price.
pub fn partner_share(kb: &KnowledgeBase, prices: usize) -> f64 {
    let hits = kb
        .rows()
        .iter()
        .filter(|r| {
            let c = CUISINES.iter().position(|x| *x == r[CUISINE]).expect("bench cuisine");
            r[PRICE] == PRICES[partner_price(c, prices)]
        })
        .count();
    hits as f64 / kb.rows().len() as f64
}

pub fn generate(cfg: &BenchConfig) -> Result<Benchmark, SynthError> {
    cfg.validate()?;
    let kb = generate_kb(cfg);
    let train = generate_split(&kb, cfg, 0, cfg.train_dialogs);
    let val = generate_split(&kb, cfg, 1, cfg.val_dialogs);
    let test = generate_split(&kb, cfg, 2, cfg.test_dialogs);
    let mut per_cuisine = BTreeMap::new();
    for r in kb.rows() {
        *per_cuisine.entry(&r[CUISINE]).or_insert(0usize) += 1;
    }
    let manifest = BenchManifest {
        config: cfg.clone(),
        achieved_rho: partner_share(&kb, cfg.prices),
        max_cuisine_rows: per_cuisine.values().copied().max().unwrap_or(0),
        splits: [("train", &train), ("val", &val), ("test", &test)]
            .into_iter()
            .map(|(s, d)| (s.to_string(), split_stats(d)))
            .collect(),
    };
    let bench = Benchmark {
        kb,
        train,
        val,
        test,
        manifest,
    };
    verify_gold(&bench)?;
    Ok(bench)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoldReport {
    pub dialogs: usize,
    pub mean_gold_reward: f64,
    pub max_gold_reward: f64,
    /// Dialogs with at least two gold clauses.
    pub multi_clause: usize,
    /// Mean of `(gold − best partial) / gold` over multi-clause dialogs.
    pub mean_relative_gap: f64,
    /// Share of multi-clause dialogs whose best partial query is within
    /// `delta` (relative) of the gold reward.
    pub confusable_share: f64,
    pub delta: f64,
}

/// Relative closeness under which a partial query counts as confusable.
pub const CONFUSION_DELTA: f64 = 0.2;

/// Checks that every gold query earns positive reward at its gold position
/// and measures how close the best partial query comes to it.
pub fn verify_gold(bench: &Benchmark) -> Result<GoldReport, SynthError> {
    let kb = &bench.kb;
    let mut rewards = Vec::new();
    let mut gaps = Vec::new();
    for (split, dialogs) in bench.splits() {
        for (index, d) in dialogs.iter().enumerate() {
            let fail = |message: String| SynthError::Gold {
                split: split.to_string(),
                index,
                message,
            };
            let (Some(gold), Some(q)) = (&d.gold_query, d.gold_position) else {
                return Err(fail("missing gold query or position".into()));
            };
            let es = subsequent_entities(d, q, kb).map_err(|e| fail(e.to_string()))?;
            let r = reward(gold, &es, kb).map_err(|e| fail(e.to_string()))?.get();
            if r <= 0.0 {
                return Err(fail(format!("gold query {gold} earns no reward")));
            }
            rewards.push(r);
            if gold.len() >= 2 {
                let best_partial = proper_subsets(gold)
                    .into_iter()
                    .filter(|p| !p.is_empty())
                    .map(|p| reward(&p, &es, kb).map_or(0.0, |x| x.get()))
                    .fold(0.0, f64::max);
                gaps.push((r - best_partial) / r);
            }
        }
    }
    let n = rewards.len().max(1) as f64;
    let m = gaps.len().max(1) as f64;
    Ok(GoldReport {
        dialogs: rewards.len(),
        mean_gold_reward: rewards.iter().sum::<f64>() / n,
        max_gold_reward: rewards.iter().copied().fold(0.0, f64::max),
        multi_clause: gaps.len(),
        mean_relative_gap: gaps.iter().sum::<f64>() / m,
        confusable_share: gaps.iter().filter(|&&g| g <= CONFUSION_DELTA).count() as f64 / m,
        delta: CONFUSION_DELTA,
    })
}

fn proper_subsets(q: &Query) -> Vec<Query> {
    let c = q.clauses();
    (0..(1u32 << c.len()) - 1)
        .map(|mask| {
            Query::new(
                (0..c.len())
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| c[i].clone())
                    .collect(),
            )
            .expect("subset of a valid query")
        })
        .collect()
}
