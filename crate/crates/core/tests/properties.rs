//! Property tests for the documented invariants of each module.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xlent::align::{self, KnnGraph};
use xlent::checkpoint::{ModelCheckpoint, StorageDtype};
use xlent::cloze::{self, Candidate, ClozeMode, TypedQuery};
use xlent::corpus::{self, AnnotatedDocument, Annotation, LanguageSampler, LanguageSamplingSpec, MaskingConfig};
use xlent::encoder::{EncodedSequence, EncoderConfig, Model};
use xlent::entity_vocab::{self, EntityVocab, InterLanguageLinks, MentionStats};
use xlent::linker::{self, EntityMention, MentionMap};
use xlent::optim::{self, AdamConfig, AdamState};
use xlent::tasks::qa::{QaInstance, QaTask};
use xlent::tasks::re::{ReInstance, ReTask, ReVariant};
use xlent::tasks::ner;
use xlent::tensor::{softmax_rows, Gradients, Graph, Tensor};
use xlent::vocab::{self, WordVocab};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn tiny_model(words: usize, entities: usize, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::init(EncoderConfig::tiny(words, entities), 0.1, &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, data in prop::collection::vec(-300.0f64..300.0, 1..60)) {
        let cols = data.len().div_ceil(rows);
        let mut d = data.clone();
        d.resize(rows * cols, 0.0);
        let s = softmax_rows(&Tensor::new(vec![rows, cols], d).unwrap());
        for r in 0..rows {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row {} sums to {}", r, sum);
            prop_assert!(s.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn language_distribution_properties(
        counts in prop::collection::vec(1.0f64..1e7, 1..8),
        alpha in 0.01f64..=1.0,
        scale in 1e-3f64..1e3,
    ) {
        let p = corpus::language_distribution(&LanguageSamplingSpec { counts: counts.clone(), alpha }).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for i in 0..counts.len() {
            for j in 0..counts.len() {
                if counts[i] > counts[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
        let scaled: Vec<f64> = counts.iter().map(|n| n * scale).collect();
        let q = corpus::language_distribution(&LanguageSamplingSpec { counts: scaled, alpha }).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn masking_respects_padding_and_entity_mask(
        seed in any::<u64>(),
        len in 1usize..40,
        pad in 0usize..10,
        ents in 0usize..10,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = 60;
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..v)).collect();
        let mut seq = EncodedSequence::words(ids.clone());
        for a in seq.word_attention.iter_mut().rev().take(pad.min(len)) {
            *a = false;
        }
        for _ in 0..ents {
            seq.push_entity(rng.random_range(0..20), vec![rng.random_range(0..len)]);
        }
        for k in 0..ents {
            if rng.random_bool(0.3) {
                seq.entity_attention[k] = false;
            }
        }
        let cfg = MaskingConfig { word_p: 0.5, entity_p: 0.5, ..MaskingConfig::default() };
        let b = corpus::mask_sequence(&seq, v, &cfg, &mut rng);
        for i in 0..len {
            if !seq.word_attention[i] || ids[i] < vocab::NUM_SPECIAL {
                prop_assert_eq!(b.word_labels[i], None);
                prop_assert_eq!(b.input.word_ids[i], ids[i]);
            }
            if let Some(l) = b.word_labels[i] {
                prop_assert_eq!(l, ids[i]);
            }
        }
        for k in 0..ents {
            if !seq.entity_attention[k] {
                prop_assert_eq!(b.entity_labels[k], None);
            }
            if b.entity_labels[k].is_some() {
                prop_assert_eq!(b.input.entity_ids[k], entity_vocab::MASK);
            }
        }
    }

    #[test]
    fn adamw_zero_gradient_shrinks_by_decay(
        values in prop::collection::vec(-5.0f64..5.0, 1..10),
        lr in 1e-6f64..1e-1,
        wd in 0.0f64..0.5,
        steps in 1usize..4,
    ) {
        let mut params = xlent::tensor::ParamStore::new();
        params.insert("w.weight", Tensor::row_vector(&values));
        params.insert("w.bias", Tensor::row_vector(&values));
        let mut state = AdamState::new(&params);
        let grads = Gradients::zeros_like(&params);
        let cfg = AdamConfig { weight_decay: wd, ..AdamConfig::default() };
        let mut expected = values.clone();
        for _ in 0..steps {
            optim::adamw_step(&mut params, &mut state, &grads, lr, &[true, true], &cfg).unwrap();
            expected.iter_mut().for_each(|x| *x *= 1.0 - lr * wd);
        }
        prop_assert_eq!(params.by_name("w.weight").unwrap().data(), &expected[..]);
        prop_assert_eq!(params.by_name("w.bias").unwrap().data(), &values[..]);
    }

    #[test]
    fn language_order_does_not_change_vocab(seed in any::<u64>(), min_languages in 1usize..4, top_k in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let langs = ["en", "fr", "de"];
        let mut links = InterLanguageLinks::new();
        for i in 0..12 {
            for l in langs {
                if rng.random_bool(0.8) {
                    links.insert(l, &format!("{l}_{i}"), &format!("Q{i}")).unwrap();
                }
            }
        }
        let mut docs = Vec::new();
        for d in 0..15 {
            let lang = langs[rng.random_range(0..3)];
            let n = rng.random_range(1..6);
            docs.push(AnnotatedDocument {
                lang: lang.into(),
                title: format!("doc{d}"),
                tokens: (0..n).map(|i| format!("t{i}")).collect(),
                sentence_breaks: Vec::new(),
                annotations: (0..n)
                    .map(|i| Annotation { start: i, end: i + 1, title: format!("{lang}_{}", rng.random_range(0..14)) })
                    .collect(),
            });
        }
        let a = EntityVocab::build(&docs, &links, min_languages, top_k).unwrap();
        // regroup the corpus language by language in a shuffled order
        let mut order = langs.to_vec();
        order.shuffle(&mut rng);
        let mut regrouped: Vec<AnnotatedDocument> = Vec::new();
        for l in order {
            let mut part: Vec<_> = docs.iter().filter(|d| d.lang == l).cloned().collect();
            part.shuffle(&mut rng);
            regrouped.extend(part);
        }
        let b = EntityVocab::build(&regrouped, &links, min_languages, top_k).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.len() <= top_k + entity_vocab::NUM_SPECIAL);
        for e in &a.entries()[entity_vocab::NUM_SPECIAL..] {
            prop_assert!(e.languages.len() >= min_languages);
        }
    }

    #[test]
    fn detected_mentions_are_disjoint_and_monotone(
        seed in any::<u64>(),
        len in 0usize..40,
        lo in 0.0f64..0.6,
        delta in 0.0f64..0.6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alphabet = ["a", "b", "c", "d"];
        let tokens: Vec<String> = (0..len).map(|_| alphabet[rng.random_range(0..4)].to_string()).collect();
        let mut map = MentionMap::new();
        let mut stats = MentionStats::new();
        for e in 0..8 {
            let n = rng.random_range(1..4);
            let surface: Vec<String> = (0..n).map(|_| alphabet[rng.random_range(0..4)].to_string()).collect();
            map.add(&surface, e);
            let total = rng.random_range(1..100u64);
            stats.set("en", &surface.join(" "), rng.random_range(0..=total), total).unwrap();
        }
        let low = linker::detect_entities(&tokens, &map, &stats, "en", lo);
        let high = linker::detect_entities(&tokens, &map, &stats, "en", lo + delta);
        for found in [&low, &high] {
            for (i, m) in found.iter().enumerate() {
                prop_assert!(m.start < m.end && m.end <= tokens.len());
                if let Some(next) = found.get(i + 1) {
                    prop_assert!(m.end <= next.start);
                }
            }
        }
        for m in &high {
            prop_assert!(low.contains(m), "{:?} appears only at the higher threshold", m);
        }
    }

    #[test]
    fn ner_candidate_count_formula(n in 0usize..200, max_len in 1usize..40) {
        let formula: usize = (1..=max_len.min(n)).map(|l| n - l + 1).sum();
        prop_assert_eq!(ner::candidate_count(n, max_len), formula);
        prop_assert_eq!(ner::enumerate_spans(n, max_len).len(), formula);
    }

    #[test]
    fn modularity_in_range_and_knn_monotone(seed in any::<u64>(), n in 3usize..40, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<String> = (0..n).map(|_| ["en", "fr", "de"][rng.random_range(0..3)].to_string()).collect();
        let small = KnnGraph::build(&vectors, labels.clone(), k).unwrap();
        let large = KnnGraph::build(&vectors, labels, k + 1).unwrap();
        prop_assert!(small.edges.is_subset(&large.edges));
        prop_assert!(small.edges.iter().all(|&(u, v)| u < v));
        if let Some(q) = align::graph_modularity(&small) {
            prop_assert!((-1.0..1.0).contains(&q), "Q = {}", q);
        }
    }

    #[test]
    fn mrr_invariant_under_rotation(seed in any::<u64>(), n in 2usize..20, dim in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = |rng: &mut ChaCha8Rng| -> f64 {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
        };
        let queries: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| gauss(&mut rng)).collect()).collect();
        let pool: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| gauss(&mut rng)).collect()).collect();
        let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        // orthonormal basis by Gram-Schmidt
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| gauss(&mut rng)).collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let rotate = |x: &Vec<f64>| -> Vec<f64> {
            basis.iter().map(|b| b.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
        };
        let before = align::cwr_mrr(&queries, &pool, &gold).unwrap();
        let after = align::cwr_mrr(
            &queries.iter().map(rotate).collect::<Vec<_>>(),
            &pool.iter().map(rotate).collect::<Vec<_>>(),
            &gold,
        )
        .unwrap();
        prop_assert!((before - after).abs() <= 1e-12);
    }

    #[test]
    fn cloze_constant_shift_keeps_prediction(scores in prop::collection::vec(-10.0f64..10.0, 1..8), shift in -100.0f64..100.0) {
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let a = cloze::argmax_first(&scores);
        let b = cloze::argmax_first(&shifted);
        // the shift can only collapse near-ties, never reorder distinct scores
        prop_assert!(a == b || (scores[a] - scores[b]).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), step in any::<u32>()) {
        let mut ck = ModelCheckpoint::new(tiny_model(12, 6, seed), seed);
        ck.step = step as u64;
        ck.optimizer = Some(AdamState::new(&ck.model.params));
        let back = ModelCheckpoint::from_bytes(&ck.to_bytes(StorageDtype::F64).unwrap()).unwrap();
        prop_assert_eq!(&back, &ck);
        let bytes = ck.to_bytes(StorageDtype::F64).unwrap();
        prop_assert_eq!(back.to_bytes(StorageDtype::F64).unwrap(), bytes);
        let half = ModelCheckpoint::from_bytes(&ck.to_bytes(StorageDtype::F32).unwrap()).unwrap();
        for (id, _, t) in ck.model.params.iter() {
            let want: Vec<f64> = t.data().iter().map(|&x| x as f32 as f64).collect();
            prop_assert_eq!(half.model.params.get(id).data(), &want[..]);
        }
    }

    #[test]
    fn qa_entities_do_not_change_answer_windows(seed in any::<u64>(), ctx_len in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = WordVocab::from_tokens((0..10).map(|i| format!("w{i}")));
        let context: Vec<String> = (0..ctx_len).map(|_| format!("w{}", rng.random_range(0..10))).collect();
        let mentions: Vec<EntityMention> = (0..rng.random_range(0..5))
            .map(|_| {
                let s = rng.random_range(0..ctx_len);
                EntityMention { start: s, end: s + 1, entity: rng.random_range(4..8) }
            })
            .collect();
        let inst = QaInstance {
            id: "q".into(),
            question: toks("w1 w2"),
            context,
            answers: vec![(0, 1)],
            answer_texts: Vec::new(),
            question_lang: "en".into(),
            context_lang: "en".into(),
            question_entities: vec![EntityMention { start: 0, end: 1, entity: 5 }],
            context_entities: mentions,
        };
        let mut cfg = EncoderConfig::tiny(words.len(), 8);
        cfg.max_positions = 24;
        let with = QaTask::new(words.clone(), true).windows(&cfg, &inst).unwrap();
        let without = QaTask::new(words, false).windows(&cfg, &inst).unwrap();
        prop_assert_eq!(with.len(), without.len());
        for (a, b) in with.iter().zip(&without) {
            prop_assert_eq!(&a.sequence.word_ids, &b.sequence.word_ids);
            prop_assert_eq!((a.context_start, a.context_len, a.offset), (b.context_start, b.context_len, b.offset));
        }
    }

    #[test]
    fn re_swap_permutes_feature_halves(seed in any::<u64>(), len in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = WordVocab::from_tokens((0..6).map(|i| format!("w{i}")));
        let mut model = tiny_model(words.len(), 8, seed);
        let task = ReTask::attach(&mut model, words, ReVariant::EntityMask, vec!["r".into()], 0.02, &mut rng).unwrap();
        let tokens: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..6))).collect();
        let cut = rng.random_range(1..len);
        let inst = ReInstance { label: "r".into(), tokens, head: (0, cut), tail: (cut, len), lang: "en".into() };
        let swapped = ReInstance { head: inst.tail, tail: inst.head, ..inst.clone() };
        let feature = |i: &ReInstance| {
            let mut g = Graph::new(&model.params);
            let f = task.features(&mut g, &model, i).unwrap();
            g.value(f).data().to_vec()
        };
        let (a, b) = (feature(&inst), feature(&swapped));
        let h = model.config.hidden_size;
        let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a[..h]), bits(&b[h..]));
        prop_assert_eq!(bits(&a[h..]), bits(&b[..h]));
    }

    #[test]
    fn cloze_candidate_order_and_empty_entity_vocab(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = WordVocab::from_tokens(toks("a b c d e is in ."));
        let model = tiny_model(words.len(), 8, seed);
        let surfaces = ["a", "b c", "d", "e a", "c"];
        let mut candidates: Vec<Candidate> = surfaces
            .iter()
            .map(|s| Candidate { surface: s.to_string(), entity: None })
            .collect();
        let query = TypedQuery {
            lang: "en".into(),
            template: "[X] is in [Y] .".into(),
            sub_surface: "a".into(),
            sub_entity: None,
            candidates: candidates.clone(),
            gold_index: 0,
        };
        let word = cloze::evaluate(&model, &words, std::slice::from_ref(&query), ClozeMode::Word).unwrap();
        let ent = cloze::evaluate(&model, &words, std::slice::from_ref(&query), ClozeMode::EntityY).unwrap();
        prop_assert_eq!(&word.results[0].scores, &ent.results[0].scores);
        prop_assert_eq!(word.results[0].predicted, ent.results[0].predicted);

        let predicted = &surfaces[word.results[0].predicted];
        candidates.shuffle(&mut rng);
        let shuffled = TypedQuery { candidates: candidates.clone(), ..query };
        let r = cloze::evaluate(&model, &words, &[shuffled], ClozeMode::Word).unwrap();
        prop_assert_eq!(&candidates[r.results[0].predicted].surface, predicted);
    }
}

/// 10^5 draws per configuration stay within 3 sigma of `p_i`.
#[test]
fn sampler_matches_distribution() {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let langs = rng.random_range(2..5);
        let items: Vec<usize> = (0..500).map(|_| rng.random_range(0..langs)).collect();
        let sampler = LanguageSampler::new(&items, langs, 0.7).unwrap();
        let p = sampler.probabilities();
        let draws = 100_000;
        let mut counts = vec![0usize; langs];
        for _ in 0..draws {
            counts[items[sampler.sample(&mut rng)]] += 1;
        }
        for l in 0..langs {
            let f = counts[l] as f64 / draws as f64;
            let sigma = (p[l] * (1.0 - p[l]) / draws as f64).sqrt();
            assert!((f - p[l]).abs() <= 3.0 * sigma, "seed {seed} lang {l}: {f} vs {}", p[l]);
        }
    }
}
