//! Central finite-difference checks shared by the gradient tests and the
//! acceptance suite.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use verbalized::config::{NegativeCount, NegativeMode, RefreshPolicy};
use verbalized::encoder::{encode, encoder_backward, pool_backward, pool_span, tokenize, EncoderParams, Model};
use verbalized::metric::{
    cross_entropy_loss, loss_gradients, triplet_loss, LossKind, LossSpec, SimilarityKind, SimilaritySpec,
};
use verbalized::predictor::EncodedMentions;
use verbalized::trainer::{Trainer, CLIP_NORM};
use verbalized::{Chunk, EntityRecord, LabelSet, Mention, Pooling, TrainConfig};

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn central(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn loss_value(
    kind: LossKind,
    sim: &SimilaritySpec,
    margin: f64,
    a: &[f64],
    p: &[f64],
    negs: &[Vec<f64>],
) -> f64 {
    let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
    match kind {
        LossKind::Triplet => triplet_loss(a, p, &refs, sim, margin).unwrap(),
        LossKind::CrossEntropy => cross_entropy_loss(a, p, &refs, sim).unwrap(),
    }
}

fn loss_spec(kind: LossKind, sim: SimilarityKind) -> LossSpec {
    match kind {
        LossKind::Triplet => LossSpec::triplet_for(sim),
        LossKind::CrossEntropy => LossSpec::cross_entropy(),
    }
}

/// Largest relative error over anchor, positive and negative gradients of
/// one random instance. Instances sitting within `1e-3` of a hinge kink are
/// redrawn.
pub fn loss_instance(kind: LossKind, sim_kind: SimilarityKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sim = SimilaritySpec::new(sim_kind);
    let spec = loss_spec(kind, sim_kind);
    let (a, p, negs) = loop {
        let d = rng.gen_range(1..=8);
        let a = random_vec(&mut rng, d);
        let p = random_vec(&mut rng, d);
        let negs: Vec<Vec<f64>> = (0..rng.gen_range(1..=4)).map(|_| random_vec(&mut rng, d)).collect();
        if kind == LossKind::Triplet {
            let sp = verbalized::metric::similarity(&a, &p, &sim).unwrap();
            let near_kink = negs.iter().any(|n| {
                let sn = verbalized::metric::similarity(&a, n, &sim).unwrap();
                (spec.margin - sp + sn).abs() < 1e-3
            });
            if near_kink {
                continue;
            }
        }
        break (a, p, negs);
    };
    let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
    let g = loss_gradients(&a, &p, &refs, &spec, &sim).unwrap();
    let reference = loss_value(kind, &sim, spec.margin, &a, &p, &negs);
    assert!((g.loss - reference).abs() <= 1e-12 * (1.0 + reference.abs()));

    // 0 = anchor, 1 = positive, 2.. = negatives
    let mut worst: f64 = 0.0;
    for which in 0..2 + negs.len() {
        let base = match which {
            0 => a.clone(),
            1 => p.clone(),
            n => negs[n - 2].clone(),
        };
        let numeric: Vec<f64> = (0..base.len())
            .map(|i| {
                let mut f = |x: f64| {
                    let (mut a2, mut p2, mut n2) = (a.clone(), p.clone(), negs.clone());
                    match which {
                        0 => a2[i] = x,
                        1 => p2[i] = x,
                        n => n2[n - 2][i] = x,
                    }
                    loss_value(kind, &sim, spec.margin, &a2, &p2, &n2)
                };
                central(&mut f, base[i])
            })
            .collect();
        let analytic = match which {
            0 => &g.anchor,
            1 => &g.positive,
            n => &g.negatives[n - 2],
        };
        worst = worst.max(rel_err(analytic, &numeric));
    }
    worst
}

fn random_params(rng: &mut ChaCha8Rng, vocab: usize, dim: usize, window: usize) -> EncoderParams {
    let mut p = EncoderParams::zeros(vocab, dim, window);
    for x in p.table.iter_mut().chain(&mut p.w_self).chain(&mut p.w_ctx).chain(&mut p.bias) {
        *x = rng.gen_range(-1.0..1.0);
    }
    p
}

const WORDS: [&str; 12] = [
    "river", "bank", "money", "stone", "city", "old", "north", "game", "club", "red", "play", "town",
];

fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Coordinates of every tensor an encoder forward pass depends on for the
/// given token ids: all of W_self, W_ctx and bias, plus the touched table
/// rows.
fn coordinates(params: &EncoderParams, ids: &[usize]) -> Vec<(u8, usize)> {
    let d = params.dim;
    let mut rows: Vec<usize> = ids.to_vec();
    rows.sort_unstable();
    rows.dedup();
    let mut out: Vec<(u8, usize)> = rows.iter().flat_map(|&r| (r * d..(r + 1) * d).map(|i| (0u8, i))).collect();
    out.extend((0..d * d).map(|i| (1, i)));
    out.extend((0..d * d).map(|i| (2, i)));
    out.extend((0..d).map(|i| (3, i)));
    out
}

fn slot(params: &mut EncoderParams, (t, i): (u8, usize)) -> &mut f64 {
    match t {
        0 => &mut params.table[i],
        1 => &mut params.w_self[i],
        2 => &mut params.w_ctx[i],
        _ => &mut params.bias[i],
    }
}

/// Encoder-only check: `f = ⟨u, pool(encode(tokens))⟩` for a random
/// upstream `u`, differentiated through pooling and the window mixer.
pub fn encoder_instance(pooling: Pooling, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vocab, dim, window) = (16, rng.gen_range(1..=8), rng.gen_range(0..=3));
    let mut params = random_params(&mut rng, vocab, dim, window);
    let len = rng.gen_range(1..=16);
    let seq = tokenize(&random_text(&mut rng, len), vocab);
    let end = rng.gen_range(1..=seq.len());
    let start = rng.gen_range(0..end);
    let u = random_vec(&mut rng, pooling.width(dim));

    let f = |p: &EncoderParams| -> f64 {
        let pooled = pool_span(&encode(&seq, p).unwrap(), start..end, pooling).unwrap();
        pooled.vector.iter().zip(&u).map(|(a, b)| a * b).sum()
    };
    let mut token_grads = vec![0.0; seq.len() * dim];
    pool_backward(&u, start..end, pooling, &mut token_grads, dim).unwrap();
    let grads = encoder_backward(&seq, &params, &token_grads).unwrap();
    let dense_table = grads.dense_table(vocab);

    let ids: Vec<usize> = seq.ids().collect();
    let coords = coordinates(&params, &ids);
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for c in coords {
        analytic.push(match c.0 {
            0 => dense_table[c.1],
            1 => grads.w_self[c.1],
            2 => grads.w_ctx[c.1],
            _ => grads.bias[c.1],
        });
        let x0 = *slot(&mut params, c);
        *slot(&mut params, c) = x0 + H;
        let up = f(&params);
        *slot(&mut params, c) = x0 - H;
        let down = f(&params);
        *slot(&mut params, c) = x0;
        numeric.push((up - down) / (2.0 * H));
    }
    rel_err(&analytic, &numeric)
}

fn coordinate(m: &mut Model, side: usize, c: (u8, usize)) -> &mut f64 {
    slot(if side == 0 { &mut m.mention } else { &mut m.label }, c)
}

fn value(m: &Model, side: usize, c: (u8, usize)) -> f64 {
    let p = if side == 0 { &m.mention } else { &m.label };
    match c.0 {
        0 => p.table[c.1],
        1 => p.w_self[c.1],
        2 => p.w_ctx[c.1],
        _ => p.bias[c.1],
    }
}

fn toy_labels(rng: &mut ChaCha8Rng) -> LabelSet {
    let records = (0..6)
        .map(|i| {
            let title = format!("{} {}", WORDS.choose(rng).unwrap(), ["alpha", "beta", "gamma", "delta", "omega", "sigma"][i]);
            let desc_len = rng.gen_range(1..=5);
            EntityRecord::new(format!("E{i}"), title).with_description(random_text(rng, desc_len))
        })
        .collect();
    LabelSet::from_records(records).unwrap()
}

/// End-to-end check of one real training step: the gradient applied by
/// `train_step` (recovered from the parameter change, undoing clipping)
/// against finite differences of the loss recomputed from the public forward
/// pieces with the step's negatives held fixed.
pub fn end_to_end_instance(loss: LossKind, sim: SimilarityKind, pooling: Pooling, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vocab, dim, window) = (64, rng.gen_range(2..=8), rng.gen_range(0..=3));
    let labels = toy_labels(&mut rng);
    let cfg = TrainConfig {
        vocab,
        dim,
        window,
        pooling,
        similarity: sim,
        loss,
        negatives: NegativeMode::Hard,
        neg_count: NegativeCount::Fixed(rng.gen_range(1..=3)),
        refresh_policy: RefreshPolicy::Frequent,
        refresh_interval_spans: 1_000_000,
        lr: 1.0,
        format: verbalized::Format::TitleDesc,
        ..Default::default()
    };
    let model = Model {
        mention: random_params(&mut rng, vocab, dim, window),
        label: random_params(&mut rng, vocab, dim, window),
    };

    let len = rng.gen_range(2..=12);
    let words: Vec<&str> = (0..len).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
    let text = words.join(" ");
    let at = rng.gen_range(0..len);
    let start: usize = words[..at].iter().map(|w| w.len() + 1).sum();
    let end = start + words[at].len();
    let gold = format!("E{}", rng.gen_range(0..6));
    let chunk = Chunk {
        parent_doc: "d".into(),
        offset: 0,
        text: text.clone(),
        mentions: vec![Mention {
            start,
            end,
            gold: gold.clone(),
            surface: words[at].to_string(),
            unlinkable: false,
        }],
    };

    let mut trainer = Trainer::with_model(&labels, cfg.clone(), model.clone()).unwrap();
    trainer.full_refresh().unwrap();
    let inputs = trainer.label_inputs().to_vec();
    let report = trainer.train_step(std::slice::from_ref(&chunk), &[]).unwrap();
    assert_eq!(report.used_mentions, 1);
    let after = trainer.model.clone();
    let negatives: Vec<usize> = report.negatives_used.iter().map(|id| labels.position(id).unwrap()).collect();
    let gold_row = labels.position(&gold).unwrap();
    let margin = loss_spec(loss, sim).margin;
    let sim_spec = SimilaritySpec::new(sim);

    let forward = |m: &Model| -> f64 {
        let enc = EncodedMentions::new(&text, [(start, end)], &m.mention).unwrap();
        let a = enc.embedding(0, pooling).unwrap();
        let p = inputs[gold_row].embed(&m.label, pooling).unwrap().vector;
        let negs: Vec<Vec<f64>> = negatives.iter().map(|&r| inputs[r].embed(&m.label, pooling).unwrap().vector).collect();
        loss_value(loss, &sim_spec, margin, &a, &p, &negs)
    };
    let base = forward(&model);
    assert!((report.loss - base).abs() <= 1e-9 * (1.0 + base.abs()), "{} vs {}", report.loss, base);
    if loss == LossKind::Triplet && base == 0.0 {
        return 0.0;
    }

    let step = cfg.lr * (CLIP_NORM / report.grad_norm).min(1.0);
    let mention_ids: Vec<usize> = tokenize(&text, vocab).ids().collect();
    let label_ids: Vec<usize> = std::iter::once(gold_row)
        .chain(negatives.iter().copied())
        .flat_map(|r| inputs[r].tokens.ids().collect::<Vec<_>>())
        .collect();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = model.clone();
    for side in 0..2 {
        let ids = if side == 0 { &mention_ids } else { &label_ids };
        let coords = coordinates(if side == 0 { &model.mention } else { &model.label }, ids);
        for c in coords {
            let x0 = value(&model, side, c);
            analytic.push((x0 - value(&after, side, c)) / step);
            *coordinate(&mut probe, side, c) = x0 + H;
            let up = forward(&probe);
            *coordinate(&mut probe, side, c) = x0 - H;
            let down = forward(&probe);
            *coordinate(&mut probe, side, c) = x0;
            numeric.push((up - down) / (2.0 * H));
        }
    }
    // forward depends on nothing else, so every other coordinate must be still
    let untouched = |p0: &EncoderParams, p1: &EncoderParams, ids: &[usize]| {
        let d = p0.dim;
        (0..p0.vocab)
            .filter(|r| !ids.contains(r))
            .all(|r| p0.table[r * d..(r + 1) * d] == p1.table[r * d..(r + 1) * d])
    };
    assert!(untouched(&model.mention, &after.mention, &mention_ids));
    assert!(untouched(&model.label, &after.label, &label_ids));
    rel_err(&analytic, &numeric)
}
