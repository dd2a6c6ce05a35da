//! Generated disambiguation corpora with controlled ambiguity.
//!
//! Several entities share each surface form; only the context words around
//! a mention reveal which one is meant. Every entity owns a disjoint set of
//! keywords that appear both near its mentions and in its description.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, EntityRecord, LabelSet, Mention, Relation};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub surfaces: usize,
    pub entities_per_surface: usize,
    pub keywords_per_entity: usize,
    pub noise_words: usize,
    pub train_mentions: usize,
    pub dev_mentions: usize,
    pub max_mentions_per_doc: usize,
    /// Gold keywords placed within two tokens of each mention (at most 4).
    pub context_keywords: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            surfaces: 8,
            entities_per_surface: 5,
            keywords_per_entity: 6,
            noise_words: 60,
            train_mentions: 2_000,
            dev_mentions: 400,
            max_mentions_per_doc: 3,
            context_keywords: 4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub labels: LabelSet,
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    /// Entity ids grouped by shared surface form.
    pub surface_groups: Vec<Vec<String>>,
}

struct Entity {
    id: String,
    surface: String,
    keywords: Vec<String>,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| {
            format!(
                "{}{}",
                ONSETS[rng.gen_range(0..ONSETS.len())],
                VOWELS[rng.gen_range(0..VOWELS.len())]
            )
        })
        .collect()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn unique_words(rng: &mut ChaCha8Rng, n: usize, syllables: usize, used: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng, syllables);
        if used.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut used = BTreeSet::new();
    let surfaces = unique_words(&mut rng, spec.surfaces, 2, &mut used);
    let noise = unique_words(&mut rng, spec.noise_words, 2, &mut used);

    let mut entities = Vec::new();
    let mut records = Vec::new();
    let mut groups = Vec::new();
    for surface in &surfaces {
        let mut group = Vec::new();
        for _ in 0..spec.entities_per_surface {
            let keywords = unique_words(&mut rng, spec.keywords_per_entity, 3, &mut used);
            let surface_cap = capitalize(surface);
            let id = format!("{}_{}", surface_cap, capitalize(&keywords[0]));
            let title = format!("{surface_cap} ({})", keywords[0]);
            let description = format!(
                "{} {} of the {}",
                keywords[1],
                keywords[2 % keywords.len()],
                keywords[3 % keywords.len()]
            );
            let record = EntityRecord::new(id.clone(), title)
                .with_description(description)
                .with_category(Relation::InstanceOf, [keywords[4 % keywords.len()].clone()])
                .with_paragraph(format!(
                    "{surface_cap} is a {} known for {} and {}.",
                    keywords[1],
                    keywords[4 % keywords.len()],
                    keywords[5 % keywords.len()]
                ));
            records.push(record);
            group.push(id.clone());
            entities.push(Entity {
                id,
                surface: surface_cap,
                keywords,
            });
        }
        groups.push(group);
    }
    let labels = LabelSet::from_records(records).expect("generated ids are unique");

    let train = documents(&mut rng, spec, &entities, &noise, spec.train_mentions, "train");
    let dev = documents(&mut rng, spec, &entities, &noise, spec.dev_mentions, "dev");
    SyntheticData {
        labels,
        train,
        dev,
        surface_groups: groups,
    }
}

/// One sentence around a mention of `e`: noise, keywords within two tokens
/// on either side, more noise, and a full stop.
fn sentence(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, e: &Entity, noise: &[String]) -> (Vec<String>, usize) {
    let mut slots: Vec<Option<String>> = vec![None; 4];
    let k = spec.context_keywords.min(4);
    let mut positions: Vec<usize> = (0..4).collect();
    positions.shuffle(rng);
    for &p in positions.iter().take(k) {
        slots[p] = Some(e.keywords.choose(rng).expect("keywords").clone());
    }
    let mut fill = |s: Option<String>| s.unwrap_or_else(|| noise.choose(rng).expect("noise").clone());
    let mut words = Vec::with_capacity(9);
    words.push(fill(None));
    words.push(fill(slots[0].take()));
    words.push(fill(slots[1].take()));
    let mention_at = words.len();
    words.push(e.surface.clone());
    words.push(fill(slots[2].take()));
    words.push(fill(slots[3].take()));
    words.push(fill(None));
    (words, mention_at)
}

fn documents(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    entities: &[Entity],
    noise: &[String],
    total_mentions: usize,
    prefix: &str,
) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut produced = 0;
    while produced < total_mentions {
        let n = rng
            .gen_range(1..=spec.max_mentions_per_doc.max(1))
            .min(total_mentions - produced);
        let mut text = String::new();
        let mut mentions = Vec::with_capacity(n);
        let mut offset = 0usize;
        for s in 0..n {
            let e = &entities[rng.gen_range(0..entities.len())];
            let (words, at) = sentence(rng, spec, e, noise);
            if s > 0 {
                text.push(' ');
                offset += 1;
            }
            for (i, w) in words.iter().enumerate() {
                if i > 0 {
                    text.push(' ');
                    offset += 1;
                }
                if i == at {
                    mentions.push(Mention {
                        start: offset,
                        end: offset + w.chars().count(),
                        gold: e.id.clone(),
                        surface: w.clone(),
                        unlinkable: false,
                    });
                }
                text.push_str(w);
                offset += w.chars().count();
            }
            text.push('.');
            offset += 1;
        }
        produced += n;
        docs.push(Document {
            id: format!("{prefix}-{:05}", docs.len()),
            text,
            mentions,
        });
    }
    docs
}
