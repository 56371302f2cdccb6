//! Synthetic corpora with planted matches, and a hashing text encoder that
//! stands in for a pretrained bi-encoder.
//!
//! `R` holds clean base records from product and person templates. `S`
//! holds one perturbed copy of each base record plus distractors, which are
//! perturbed copies of *new* entities that share brand/type or
//! surname/city with an existing one.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbeddingMatrix;
use crate::record::{CandidatePair, MatchSet, Record, RecordCollection};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    /// Per-letter probability of a substitution, deletion or swap.
    pub typo_rate: f64,
    /// Per-token drop probability. Tokens with digits are never dropped.
    pub token_drop: f64,
    /// Per-token probability of shortening to a prefix.
    pub abbreviation: f64,
    /// Distractors added to `S`, as a fraction of the base record count.
    pub distractor_fraction: f64,
    /// Unmatched records added to `R`, as a fraction of the base record
    /// count. Each is a sibling of a matched entity, so its nearest
    /// neighbors in `S` look like matches but are not.
    pub unmatched_fraction: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self { typo_rate: 0.02, token_drop: 0.05, abbreviation: 0.1, distractor_fraction: 0.5, unmatched_fraction: 0.75, seed: 0 }
    }
}

impl PerturbationSpec {
    pub fn none(seed: u64) -> Self {
        Self { typo_rate: 0.0, token_drop: 0.0, abbreviation: 0.0, distractor_fraction: 0.0, unmatched_fraction: 0.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("typo_rate", self.typo_rate),
            ("token_drop", self.token_drop),
            ("abbreviation", self.abbreviation),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, f) in [("distractor_fraction", self.distractor_fraction), ("unmatched_fraction", self.unmatched_fraction)] {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Signed feature hashing of character trigrams and word tokens into
/// `dim` buckets, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurrogateEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for SurrogateEncoder {
    fn default() -> Self {
        Self { dim: 128, seed: 0 }
    }
}

fn fnv1a(seed: u64, kind: u8, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x0000_0100_0000_01b3);
    for b in core::iter::once(&kind).chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // final avalanche so low bits depend on every byte
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^ (h >> 33)
}

impl SurrogateEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dim must be positive".into()));
        }
        Ok(Self { dim, seed })
    }

    fn add(&self, acc: &mut [f64], kind: u8, feature: &str, weight: f64) {
        let h = fnv1a(self.seed, kind, feature.as_bytes());
        let bucket = (h % self.dim as u64) as usize;
        acc[bucket] += if h >> 63 == 1 { -weight } else { weight };
    }

    /// Encodes attribute values; names are not included.
    pub fn encode(&self, values: &[String]) -> Vec<f32> {
        let mut acc = alloc::vec![0.0f64; self.dim];
        for value in values {
            let text = value.trim().to_lowercase();
            for token in text.split_whitespace() {
                let weight = if token.chars().any(|c| c.is_ascii_digit()) { IDENT_WEIGHT } else { 1.0 };
                self.add(&mut acc, b'w', token, weight);
                let padded: Vec<char> = core::iter::once(' ').chain(token.chars()).chain([' ']).collect();
                for w in padded.windows(3) {
                    let gram: String = w.iter().collect();
                    self.add(&mut acc, b'c', &gram, 1.0);
                }
            }
        }
        let norm = libm::sqrt(acc.iter().map(|x| x * x).sum::<f64>());
        if norm == 0.0 {
            acc[0] = 1.0;
            return acc.iter().map(|&x| x as f32).collect();
        }
        acc.iter().map(|&x| (x / norm) as f32).collect()
    }

    pub fn encode_collection(&self, records: &RecordCollection) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::from_rows(
            self.dim,
            records.records().iter().map(|r| (r.id.clone(), self.encode(&r.values))),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub records_r: RecordCollection,
    pub records_s: RecordCollection,
    pub truth: MatchSet,
    pub emb_r: EmbeddingMatrix,
    pub emb_s: EmbeddingMatrix,
    pub key_attrs: Vec<String>,
    pub encoder: SurrogateEncoder,
}

const IDENT_WEIGHT: f64 = 10.0;

pub const SCHEMA: [&str; 3] = ["name", "group", "detail"];

const BRANDS: &[&str] = &[
    "sony", "samsung", "panasonic", "philips", "logitech", "canon", "nikon", "toshiba", "lenovo",
    "asus", "acer", "garmin", "bose", "sennheiser", "jabra", "netgear", "linksys", "belkin",
    "kingston", "sandisk", "seagate", "epson", "brother", "olympus", "pioneer", "yamaha", "denon",
    "kenwood", "sharp", "hitachi",
];
const PRODUCTS: &[(&str, &str)] = &[
    ("wireless mouse", "computing"),
    ("mechanical keyboard", "computing"),
    ("lcd monitor", "displays"),
    ("portable speaker", "audio"),
    ("noise cancelling headphones", "audio"),
    ("digital camera", "imaging"),
    ("camera lens", "imaging"),
    ("laser printer", "office"),
    ("inkjet printer", "office"),
    ("external hard drive", "storage"),
    ("usb flash drive", "storage"),
    ("wifi router", "networking"),
    ("network switch", "networking"),
    ("gps navigator", "automotive"),
    ("car stereo receiver", "automotive"),
    ("home theater receiver", "audio"),
    ("blu-ray player", "video"),
    ("led television", "video"),
    ("tablet case", "accessories"),
    ("laptop charger", "accessories"),
];
const COLORS: &[&str] = &["black", "white", "silver", "blue", "red", "graphite", "titanium", "green"];
const SIZES: &[&str] = &["16gb", "32gb", "64gb", "128gb", "1tb", "2tb", "24 inch", "27 inch", "500w", "1200dpi"];
const FIRST: &[&str] = &[
    "james", "mary", "robert", "patricia", "john", "jennifer", "michael", "linda", "william",
    "elizabeth", "david", "barbara", "richard", "susan", "joseph", "jessica", "thomas", "sarah",
    "charles", "karen", "christopher", "nancy", "daniel", "lisa", "matthew", "margaret", "anthony",
    "sandra", "donald", "ashley", "mark", "kimberly", "paul", "emily", "steven", "donna", "andrew",
    "michelle", "joshua", "carol",
];
const LAST: &[&str] = &[
    "smith", "johnson", "williams", "brown", "jones", "garcia", "miller", "davis", "rodriguez",
    "martinez", "hernandez", "lopez", "gonzalez", "wilson", "anderson", "thomas", "taylor", "moore",
    "jackson", "martin", "lee", "perez", "thompson", "white", "harris", "sanchez", "clark",
    "ramirez", "lewis", "robinson", "walker", "young", "allen", "king", "wright", "scott", "torres",
    "nguyen", "hill", "flores",
];
const CITIES: &[&str] = &[
    "springfield", "riverside", "franklin", "greenville", "bristol", "clinton", "fairview",
    "salem", "madison", "georgetown", "arlington", "ashland", "burlington", "manchester",
    "oxford", "clayton", "dover", "hudson", "kingston", "milton",
];
const STREETS: &[&str] = &[
    "main street", "oak avenue", "pine road", "maple drive", "cedar lane", "elm street",
    "washington avenue", "lake road", "hill street", "park boulevard",
];

#[derive(Debug, Clone)]
enum Entity {
    Product { brand: usize, kind: usize, series: String, number: u32, color: usize, size: usize },
    Person { first: usize, last: usize, city: usize, house: u32, street: usize, year: u32 },
}

impl Entity {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        if rng.random_bool(0.5) {
            let series: String = (0..2).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect();
            Entity::Product {
                brand: rng.random_range(0..BRANDS.len()),
                kind: rng.random_range(0..PRODUCTS.len()),
                series,
                number: rng.random_range(100..10_000),
                color: rng.random_range(0..COLORS.len()),
                size: rng.random_range(0..SIZES.len()),
            }
        } else {
            Entity::Person {
                first: rng.random_range(0..FIRST.len()),
                last: rng.random_range(0..LAST.len()),
                city: rng.random_range(0..CITIES.len()),
                house: rng.random_range(1..2000),
                street: rng.random_range(0..STREETS.len()),
                year: rng.random_range(1940..2005),
            }
        }
    }

    /// A different entity that differs from `self` in one identifying
    /// field only.
    fn sibling(&self, rng: &mut ChaCha8Rng) -> Self {
        let mut e = self.clone();
        match &mut e {
            Entity::Product { number, .. } => *number = (*number + rng.random_range(1..20)) % 10_000,
            Entity::Person { first, year, .. } => {
                *first = (*first + rng.random_range(1..FIRST.len())) % FIRST.len();
                *year = rng.random_range(1940..2005);
            }
        }
        e
    }

    fn key(&self) -> String {
        self.values().join("|")
    }

    fn values(&self) -> Vec<String> {
        match self {
            Entity::Product { brand, kind, series, number, color, size } => {
                let (kind, group) = PRODUCTS[*kind];
                alloc::vec![
                    format!("{} {} {}-{}", BRANDS[*brand], kind, series, number),
                    format!("{} {}", BRANDS[*brand], group),
                    format!("{} {}", COLORS[*color], SIZES[*size]),
                ]
            }
            Entity::Person { first, last, city, house, street, year } => alloc::vec![
                format!("{} {}", FIRST[*first], LAST[*last]),
                CITIES[*city].to_string(),
                format!("{} {} born {}", house, STREETS[*street], year),
            ],
        }
    }
}

fn typo(word: &str, rate: f64, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_ascii_alphabetic() && rng.random_bool(rate) {
            match rng.random_range(0..3) {
                0 => chars[i] = (b'a' + rng.random_range(0..26u8)) as char,
                1 if chars.len() > 1 => {
                    chars.remove(i);
                    continue;
                }
                _ if i + 1 < chars.len() && chars[i + 1].is_ascii_alphabetic() => {
                    chars.swap(i, i + 1);
                    i += 1;
                }
                _ => {}
            }
        }
        i += 1;
    }
    chars.into_iter().collect()
}

fn perturb_value(value: &str, spec: &PerturbationSpec, rng: &mut ChaCha8Rng) -> String {
    let tokens: Vec<&str> = value.split_whitespace().collect();
    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        let has_digit = tok.chars().any(|c| c.is_ascii_digit());
        let last_chance = out.is_empty() && i + 1 == tokens.len();
        if !has_digit && !last_chance && rng.random_bool(spec.token_drop) {
            continue;
        }
        let mut t = typo(tok, spec.typo_rate, rng);
        if !has_digit && t.chars().count() >= 5 && rng.random_bool(spec.abbreviation) {
            t = t.chars().take(3).chain(['.']).collect();
        }
        out.push(t);
    }
    out.join(" ")
}

fn perturb(values: &[String], spec: &PerturbationSpec, rng: &mut ChaCha8Rng) -> Vec<String> {
    values.iter().map(|v| perturb_value(v, spec, rng)).collect()
}

/// Builds `n_records` base records, their perturbed copies and
/// distractors, and encodes both sides with the default encoder.
pub fn generate(n_records: usize, spec: &PerturbationSpec) -> Result<SyntheticCorpus> {
    generate_with_encoder(n_records, spec, SurrogateEncoder { dim: 128, seed: spec.seed })
}

pub fn generate_with_encoder(
    n_records: usize,
    spec: &PerturbationSpec,
    encoder: SurrogateEncoder,
) -> Result<SyntheticCorpus> {
    if n_records < 10 {
        return Err(Error::InvalidParameter("n_records must be at least 10".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = BTreeSet::new();
    let mut entities = Vec::with_capacity(n_records);
    while entities.len() < n_records {
        let e = Entity::random(&mut rng);
        if seen.insert(e.key()) {
            entities.push(e);
        }
    }
    let mut siblings = |fraction: f64, rng: &mut ChaCha8Rng| {
        let n = libm::round(fraction * n_records as f64) as usize;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let e = entities.choose(rng).expect("non-empty").sibling(rng);
            if seen.insert(e.key()) {
                out.push(e);
            }
        }
        out
    };
    let distractors = siblings(spec.distractor_fraction, &mut rng);
    let unmatched = siblings(spec.unmatched_fraction, &mut rng);
    let n_distractors = distractors.len();

    let schema: Vec<String> = SCHEMA.iter().map(|s| s.to_string()).collect();
    let width = format!("{}", n_records + n_distractors.max(unmatched.len())).len();
    let mut r_rows: Vec<(bool, &Entity)> =
        entities.iter().map(|e| (true, e)).chain(unmatched.iter().map(|e| (false, e))).collect();
    r_rows.shuffle(&mut rng);
    let mut records_r = RecordCollection::new(schema.clone());
    let mut r_id = alloc::vec![String::new(); n_records];
    let entity_index: alloc::collections::BTreeMap<String, usize> =
        entities.iter().enumerate().map(|(i, e)| (e.key(), i)).collect();
    for (i, (matched, e)) in r_rows.iter().enumerate() {
        let id = format!("r{i:0width$}");
        if *matched {
            r_id[entity_index[&e.key()]] = id.clone();
        }
        records_r.push(Record { id, values: e.values() })?;
    }

    // S rows: (source entity index or None for a distractor, values)
    let mut rows: Vec<(Option<usize>, Vec<String>)> = entities
        .iter()
        .enumerate()
        .map(|(i, e)| (Some(i), perturb(&e.values(), spec, &mut rng)))
        .collect();
    rows.extend(distractors.iter().map(|e| (None, perturb(&e.values(), spec, &mut rng))));
    rows.shuffle(&mut rng);

    let mut records_s = RecordCollection::new(schema);
    let mut truth = MatchSet::new();
    for (j, (source, values)) in rows.into_iter().enumerate() {
        let id = format!("s{j:0width$}");
        if let Some(i) = source {
            truth.insert(CandidatePair::new(r_id[i].clone(), id.clone()))?;
        }
        records_s.push(Record { id, values })?;
    }

    let emb_r = encoder.encode_collection(&records_r)?;
    let emb_s = encoder.encode_collection(&records_s)?;
    Ok(SyntheticCorpus {
        records_r,
        records_s,
        truth,
        emb_r,
        emb_s,
        key_attrs: alloc::vec!["name".to_string(), "group".to_string()],
        encoder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::dot;

    #[test]
    fn no_perturbation_gives_identical_pairs() {
        let c = generate(50, &PerturbationSpec::none(3)).unwrap();
        assert_eq!(c.records_s.len(), 50);
        for p in c.truth.iter() {
            assert_eq!(c.records_r.get(&p.r).unwrap().values, c.records_s.get(&p.s).unwrap().values);
            let sim = dot(c.emb_r.get(&p.r).unwrap(), c.emb_s.get(&p.s).unwrap());
            assert!((sim - 1.0).abs() < 1e-6, "{sim}");
        }
    }

    #[test]
    fn one_planted_match_per_record() {
        let c = generate(100, &PerturbationSpec::default()).unwrap();
        assert_eq!(c.truth.len(), 100);
        assert_eq!(c.records_s.len(), 150);
        assert_eq!(c.records_r.len(), 175);
        let rs: BTreeSet<_> = c.truth.iter().map(|p| p.r.clone()).collect();
        let ss: BTreeSet<_> = c.truth.iter().map(|p| p.s.clone()).collect();
        assert_eq!((rs.len(), ss.len()), (100, 100));
        c.truth.validate(&c.records_r, &c.records_s).unwrap();
    }

    #[test]
    fn deterministic() {
        let a = generate(60, &PerturbationSpec { seed: 9, ..Default::default() }).unwrap();
        let b = generate(60, &PerturbationSpec { seed: 9, ..Default::default() }).unwrap();
        assert_eq!(a.records_s, b.records_s);
        assert_eq!(a.emb_s, b.emb_s);
        let c = generate(60, &PerturbationSpec { seed: 10, ..Default::default() }).unwrap();
        assert_ne!(a.records_s, c.records_s);
    }

    #[test]
    fn rejects_small_or_bad_specs() {
        assert!(generate(9, &PerturbationSpec::default()).is_err());
        assert!(generate(10, &PerturbationSpec { typo_rate: 1.5, ..Default::default() }).is_err());
    }

    #[test]
    fn perturbation_keeps_identifiers_and_a_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = PerturbationSpec { token_drop: 1.0, typo_rate: 0.0, abbreviation: 0.0, ..Default::default() };
        assert_eq!(perturb_value("sony speaker ab-123", &spec, &mut rng), "ab-123");
        assert_eq!(perturb_value("alpha beta", &spec, &mut rng), "beta");
    }

    #[test]
    fn encoder_is_unit_norm_and_handles_empty() {
        let enc = SurrogateEncoder::default();
        let v = enc.encode(&["hello world".into()]);
        let n: f32 = v.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
        let e = enc.encode(&[String::new()]);
        assert_eq!(e[0], 1.0);
    }
}
