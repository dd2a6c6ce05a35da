use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use verbalized::corpus::{char_slice, chunk_document, read_corpus, write_corpus, Relation};
use verbalized::encoder::{encode, pool_span, tokenize, EncoderParams, Model};
use verbalized::evaluator::{change_analysis, score};
use verbalized::label_index::LabelCache;
use verbalized::metric::{
    cross_entropy_loss, similarity, triplet_loss, SimilarityKind, SimilaritySpec,
};
use verbalized::predictor::PredictionRecord;
use verbalized::verbalizer::{truncate_soft, verbalize, Component, FormatSpec};
use verbalized::{Document, EntityRecord, Mention, Pooling};

const WORDS: [&str; 10] = [
    "river", "bank", "Paris", "stone", "a", "Ünïcode", "北京", "runs", "x", "Mad",
];

/// A document of random words and separators with mentions over some words.
fn arb_document() -> impl Strategy<Value = Document> {
    prop::collection::vec((0..WORDS.len(), 0..4usize, any::<bool>()), 0..60).prop_map(|parts| {
        let seps = [" ", "  ", "\n", ", "];
        let mut text = String::new();
        let mut mentions = Vec::new();
        let mut len = 0usize;
        for (i, (w, sep, is_mention)) in parts.into_iter().enumerate() {
            if i > 0 {
                text.push_str(seps[sep]);
                len += seps[sep].chars().count();
            }
            let word = WORDS[w];
            let n = word.chars().count();
            if is_mention {
                mentions.push(Mention {
                    start: len,
                    end: len + n,
                    gold: format!("L{w}"),
                    surface: word.to_string(),
                    unlinkable: false,
                });
            }
            text.push_str(word);
            len += n;
        }
        Document {
            id: "doc".into(),
            text,
            mentions,
        }
    })
}

/// Independent reading of the truncation rule over a char vector.
fn truncate_oracle(text: &str, limit: usize) -> String {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() <= limit {
        return text.to_string();
    }
    for i in limit..chars.len() {
        if ",;.:!?".contains(chars[i]) {
            let kept: String = chars[..i].iter().collect();
            return kept.trim_end().to_string();
        }
    }
    text.to_string()
}

fn arb_text() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            Just(' '),
            Just(','),
            Just('.'),
            Just(';'),
            Just('!'),
            Just('?'),
            Just(':'),
            Just('é'),
            Just('\t'),
            prop::char::range('a', 'z'),
        ],
        0..120,
    )
    .prop_map(|v| v.into_iter().collect())
}

fn arb_record() -> impl Strategy<Value = EntityRecord> {
    (
        "[A-Z][a-z]{1,12}( [A-Z][a-z]{1,8})?",
        prop::option::of(arb_text()),
        prop::collection::vec("[a-z ]{1,20}", 0..3),
        prop::collection::vec("[a-z]{1,10}", 0..2),
        prop::option::of(arb_text()),
    )
        .prop_map(|(title, desc, inst, country, para)| {
            let mut r = EntityRecord::new("id", title);
            if let Some(d) = desc.filter(|d| !d.trim().is_empty()) {
                r = r.with_description(d);
            }
            if !inst.is_empty() {
                r = r.with_category(Relation::InstanceOf, inst);
            }
            if !country.is_empty() {
                r = r.with_category(Relation::Country, country);
            }
            if let Some(p) = para.filter(|p| !p.trim().is_empty()) {
                r = r.with_paragraph(p);
            }
            r
        })
}

fn arb_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

fn kind_strategy() -> impl Strategy<Value = SimilarityKind> {
    prop_oneof![
        Just(SimilarityKind::Cosine),
        Just(SimilarityKind::Dot),
        Just(SimilarityKind::Euclidean),
    ]
}

/// Exhaustive ranking: similarity descending, ties to the lower row.
fn oracle_ranking(rows: &[Vec<f64>], anchor: &[f64], kind: SimilarityKind) -> Vec<usize> {
    let spec = SimilaritySpec::new(kind);
    let mut scored: Vec<(f64, usize)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (similarity(anchor, r, &spec).unwrap(), i))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn chunking_round_trips(doc in arb_document(), max_m in 1usize..6, max_c in 10usize..80) {
        let chunks = chunk_document(&doc, max_m, max_c).unwrap();
        let mut restored = Vec::new();
        for c in &chunks {
            prop_assert!(c.mentions.len() <= max_m);
            prop_assert!(c.text.chars().count() <= max_c);
            prop_assert_eq!(c.text.as_str(), char_slice(&doc.text, c.offset, c.offset + c.text.chars().count()));
            for m in &c.mentions {
                prop_assert_eq!(char_slice(&c.text, m.start, m.end), m.surface.as_str());
                restored.push((m.start + c.offset, m.end + c.offset, m.gold.clone()));
            }
        }
        let original: Vec<_> = doc.mentions.iter().map(|m| (m.start, m.end, m.gold.clone())).collect();
        prop_assert_eq!(restored, original);
        prop_assert_eq!(chunk_document(&doc, max_m, max_c).unwrap(), chunks);
    }

    #[test]
    fn corpus_files_round_trip(doc in arb_document()) {
        let mut buf = Vec::new();
        write_corpus(std::slice::from_ref(&doc), &mut buf).unwrap();
        let back = read_corpus(buf.as_slice()).unwrap();
        prop_assert_eq!(back, vec![doc]);
    }

    #[test]
    fn truncation_matches_rule_and_is_idempotent(text in arb_text(), limit in 1usize..60) {
        let once = truncate_soft(&text, limit);
        prop_assert_eq!(&once, &truncate_oracle(&text, limit));
        prop_assert_eq!(truncate_soft(&once, limit), once.clone());
        prop_assert!(text.starts_with(&once));
    }

    #[test]
    fn shorter_spec_is_prefix(record in arb_record(), soft in 5usize..60) {
        use Component::*;
        let chains = [
            vec![Title, Description, Categories],
            vec![Title, Categories, Description],
            vec![Title, Paragraph, Categories],
        ];
        for chain in chains {
            let mut prev: Option<String> = None;
            for n in 1..=chain.len() {
                let spec = FormatSpec { components: chain[..n].to_vec(), paragraph_limit: 100, soft_limit: soft };
                let v = verbalize(&record, &spec).unwrap();
                let title: String = v.text.chars().skip(v.title_char_span.0).take(v.title_char_span.1 - v.title_char_span.0).collect();
                prop_assert_eq!(&title, &record.title);
                prop_assert_eq!(&verbalize(&record, &spec).unwrap(), &v);
                if let Some(p) = &prev {
                    prop_assert!(v.text.starts_with(p.as_str()), "{:?} is not a prefix of {:?}", p, v.text);
                }
                prev = Some(v.text);
            }
        }
    }

    #[test]
    fn similarity_is_symmetric(a in arb_vec(6), b in arb_vec(6), kind in kind_strategy()) {
        let spec = SimilaritySpec::new(kind);
        let ab = similarity(&a, &b, &spec).unwrap();
        let ba = similarity(&b, &a, &spec).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab.abs()));
    }

    #[test]
    fn similarity_scaling(a in arb_vec(5), b in arb_vec(5), alpha in 0.01f64..50.0) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let scaled: Vec<f64> = a.iter().map(|x| alpha * x).collect();
        let cos = SimilaritySpec::new(SimilarityKind::Cosine);
        let dot = SimilaritySpec::new(SimilarityKind::Dot);
        let c1 = similarity(&a, &b, &cos).unwrap();
        let c2 = similarity(&scaled, &b, &cos).unwrap();
        prop_assert!((c1 - c2).abs() < 1e-9);
        let d1 = similarity(&a, &b, &dot).unwrap();
        let d2 = similarity(&scaled, &b, &dot).unwrap();
        prop_assert!((alpha * d1 - d2).abs() < 1e-9 * (1.0 + d2.abs()));
    }

    #[test]
    fn euclidean_argmax_is_distance_argmin(anchor in arb_vec(4), rows in prop::collection::vec(arb_vec(4), 1..30)) {
        let spec = SimilaritySpec::new(SimilarityKind::Euclidean);
        let by_sim = rows.iter().enumerate()
            .map(|(i, r)| (similarity(&anchor, r, &spec).unwrap(), i))
            .fold((f64::NEG_INFINITY, usize::MAX), |best, x| if x.0 > best.0 { x } else { best }).1;
        let dist = |r: &Vec<f64>| r.iter().zip(&anchor).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let by_dist = rows.iter().enumerate()
            .fold((f64::INFINITY, usize::MAX), |best, (i, r)| if dist(r) < best.0 { (dist(r), i) } else { best }).1;
        prop_assert_eq!(by_sim, by_dist);
    }

    #[test]
    fn losses_are_non_negative(a in arb_vec(4), p in arb_vec(4), negs in prop::collection::vec(arb_vec(4), 1..6), kind in kind_strategy(), margin in 0.0f64..5.0) {
        let spec = SimilaritySpec::new(kind);
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        prop_assert!(triplet_loss(&a, &p, &refs, &spec, margin).unwrap() >= 0.0);
        prop_assert!(cross_entropy_loss(&a, &p, &refs, &spec).unwrap() >= 0.0);
    }

    #[test]
    fn mining_matches_exhaustive_scan(
        rows in prop::collection::vec(prop::collection::vec(-3i32..3, 3), 2..60),
        anchor in prop::collection::vec(-3i32..3, 3),
        gold in any::<prop::sample::Index>(),
        k in 0usize..70,
        kind in kind_strategy(),
    ) {
        // small integers force exact ties
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
        let anchor: Vec<f64> = anchor.into_iter().map(f64::from).collect();
        let ids: Vec<String> = (0..rows.len()).map(|i| format!("e{i}")).collect();
        let cache = LabelCache::from_rows(ids.clone(), rows.clone(), Pooling::Mean, SimilaritySpec::new(kind)).unwrap();
        let gold = gold.index(rows.len());
        let ranking = oracle_ranking(&rows, &anchor, kind);
        let expected: Vec<&str> = ranking.iter().filter(|&&i| i != gold).take(k).map(|&i| ids[i].as_str()).collect();
        let mined = cache.mine_hard_negatives(&anchor, &ids[gold], k).unwrap();
        let got: Vec<&str> = mined.iter().map(|(id, _)| id.as_str()).collect();
        prop_assert_eq!(&got, &expected);
        prop_assert!(!got.contains(&ids[gold].as_str()));
        let (best, _) = cache.nearest_label(&anchor, None).unwrap();
        prop_assert_eq!(best.as_str(), ids[ranking[0]].as_str());
    }

    #[test]
    fn pooling_widths(seed in any::<u64>(), dim in 1usize..9, words in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::init(64, dim, 2, &mut rng);
        let text = vec!["tok"; words].join(" ");
        let enc = encode(&tokenize(&text, 64), &params).unwrap();
        let end = rng.gen_range(1..=words);
        let start = rng.gen_range(0..end);
        prop_assert_eq!(pool_span(&enc, start..end, Pooling::Mean).unwrap().vector.len(), dim);
        prop_assert_eq!(pool_span(&enc, start..end, Pooling::FirstLast).unwrap().vector.len(), 2 * dim);
    }

    #[test]
    fn change_counts_partition(first in prop::collection::vec(any::<bool>(), 1..40), last_flip in prop::collection::vec(any::<bool>(), 40)) {
        let n = first.len();
        let doc = Document {
            id: "d".into(),
            text: "w ".repeat(n),
            mentions: (0..n).map(|i| Mention { start: 2 * i, end: 2 * i + 1, gold: "g".into(), surface: "w".into(), unlinkable: false }).collect(),
        };
        let recs = |correct: &dyn Fn(usize) -> bool| -> Vec<PredictionRecord> {
            (0..n).map(|i| PredictionRecord {
                doc: "d".into(), start: 2 * i, end: 2 * i + 1,
                pred: if correct(i) { "g".into() } else { "x".into() },
                score: 0.0, gold: "g".into(), iterations: 1,
            }).collect()
        };
        let f = recs(&|i| first[i]);
        let l = recs(&|i| first[i] ^ last_flip[i]);
        let t = change_analysis(&f, &l, std::slice::from_ref(&doc)).unwrap();
        prop_assert_eq!(t.total(), n);
        let first_acc = first.iter().filter(|&&b| b).count() as f64 / n as f64;
        prop_assert!((t.first_pass_accuracy() - first_acc).abs() < 1e-12);
        prop_assert!((t.first_pass_accuracy() - (t.correct + t.correct_to_incorrect) as f64 / n as f64).abs() < 1e-12);
        prop_assert!((t.last_pass_accuracy() - (t.correct + t.incorrect_to_correct) as f64 / n as f64).abs() < 1e-12);

        let mut shuffled = l.clone();
        shuffled.reverse();
        prop_assert_eq!(score(&shuffled, std::slice::from_ref(&doc)).unwrap(), score(&l, std::slice::from_ref(&doc)).unwrap());
    }
}

#[test]
fn truncation_on_a_thousand_strings() {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(1000));
    runner
        .run(&(arb_text(), 1usize..60), |(text, limit)| {
            let once = truncate_soft(&text, limit);
            prop_assert_eq!(truncate_soft(&once, limit), once.clone());
            prop_assert!(text.starts_with(&once));
            Ok(())
        })
        .unwrap();
}

#[test]
fn refreshed_cache_agrees_with_fresh_encoding() {
    use verbalized::encoder::LabelInput;
    let model = Model::init(256, 6, 2, 5);
    let records: Vec<EntityRecord> = (0..12)
        .map(|i| EntityRecord::new(format!("e{i}"), format!("Label {i}")).with_description(format!("thing number {i}")))
        .collect();
    let spec = verbalized::Format::TitleDesc.spec();
    let inputs: Vec<LabelInput> = records
        .iter()
        .map(|r| LabelInput::new(&verbalize(r, &spec).unwrap(), 256).unwrap())
        .collect();
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    for pooling in [Pooling::Mean, Pooling::FirstLast] {
        for kind in SimilarityKind::ALL {
            let mut cache = LabelCache::new(ids.clone(), 6, pooling, SimilaritySpec::new(kind));
            cache.full_refresh(&model.label, &inputs, 5, 0).unwrap();
            assert_eq!(cache.dirty_writes, 0);
            let fresh: Vec<Vec<f64>> = inputs.iter().map(|x| x.embed(&model.label, pooling).unwrap().vector).collect();
            let oracle = LabelCache::from_rows(ids.clone(), fresh.clone(), pooling, SimilaritySpec::new(kind)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for _ in 0..20 {
                let anchor: Vec<f64> = (0..pooling.width(6)).map(|_| rng.gen_range(-1.0..1.0)).collect();
                assert_eq!(cache.nearest_label(&anchor, None).unwrap(), oracle.nearest_label(&anchor, None).unwrap());
            }
            let mut last = 0;
            for (i, row) in fresh.iter().enumerate().take(4) {
                cache.write_back(&ids[i], row).unwrap();
                assert!(cache.dirty_writes > last);
                last = cache.dirty_writes;
            }
            cache.full_refresh(&model.label, &inputs, 5, 10).unwrap();
            assert_eq!(cache.dirty_writes, 0);
        }
    }
}

#[test]
fn restricted_search_only_returns_allowed_ids() {
    let rows = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]];
    let ids: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let cache = LabelCache::from_rows(ids, rows, Pooling::Mean, SimilaritySpec::new(SimilarityKind::Euclidean)).unwrap();
    let allowed: BTreeSet<String> = ["c".to_string()].into();
    assert_eq!(cache.nearest_label(&[1.0, 0.0], Some(&allowed)).unwrap().0, "c");
}
