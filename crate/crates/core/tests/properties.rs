mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use common::World;
use drp_core::dataio::{split, RecistRecord, DEFAULT_RATIOS};
use drp_core::heads::{focal_loss, FocalParams};
use drp_core::metrics::{auprc, auroc, concordance_index};
use drp_core::model::Model;
use drp_core::recommender::{rank_top_k, robust_z, score_catalog, RobustZ, ScoreMap};
use drp_core::survival::{event_distribution, mtlr_loss, survival_curve, SurvivalTarget};
use drp_core::synth::panel_genes;
use drp_core::tokenizer::{
    build_vocabularies, collate, tokenize, GeneVocab, KnownPair, MutationEntry, MutationProfile, MutationVocab,
    TokenizerOptions, ANNOTATION_DIM, NULL_MUTATION,
};
use drp_core::{Graph, Mode, Tensor};

fn vocab(n_genes: usize, pairs_per_gene: usize) -> (Vec<String>, GeneVocab, MutationVocab) {
    let panel = panel_genes(n_genes);
    let pairs: Vec<KnownPair> = panel
        .iter()
        .flat_map(|g| {
            (0..pairs_per_gene).map(move |i| KnownPair {
                gene: g.clone(),
                mutation: format!("M{i}"),
                annotation: [0.0; ANNOTATION_DIM],
            })
        })
        .collect();
    let (gv, mv) = build_vocabularies(&panel, &pairs).unwrap();
    (panel, gv, mv)
}

/// Profiles as `(gene index, mutation index)` lists; index `pairs` means a
/// mutation outside the vocabulary, gene index `genes` an off-panel gene.
fn profile_strategy(genes: usize, pairs: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..=genes, 0..=pairs), 0..10)
}

fn build_profile(panel: &[String], raw: &[(usize, usize)]) -> MutationProfile {
    MutationProfile::new(
        raw.iter()
            .map(|&(g, m)| {
                let gene = panel.get(g).cloned().unwrap_or_else(|| "OFFPANEL".into());
                MutationEntry::new(gene, format!("M{m}"))
            })
            .collect(),
    )
}

fn finite_vec(len: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, data in finite_vec(1..40)) {
        let cols = data.len().div_ceil(rows);
        let mut v = data.clone();
        v.resize(rows * cols, 0.5);
        let mut g = Graph::<f64>::new(Mode::Eval, 0);
        let x = g.input(Tensor::new(vec![rows, cols], v).unwrap());
        let s = g.softmax(x);
        for row in g.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn dropout_identity_and_determinism(data in finite_vec(1..50), rate in 0.0f64..0.9, seed in any::<u64>()) {
        let n = data.len();
        let t = Tensor::new(vec![n], data.clone()).unwrap();
        let run = |mode: Mode, rate: f64| {
            let mut g = Graph::<f64>::new(mode, seed);
            let x = g.input(t.clone());
            let y = g.dropout(x, rate);
            g.value(y).data().to_vec()
        };
        prop_assert_eq!(run(Mode::Eval, rate), data.clone());
        prop_assert_eq!(run(Mode::Train, 0.0), data);
        prop_assert_eq!(run(Mode::Train, rate), run(Mode::Train, rate));
    }

    #[test]
    fn token_layout(raw in profile_strategy(6, 3)) {
        let (panel, gv, mv) = vocab(6, 3);
        let profile = build_profile(&panel, &raw);
        let s = tokenize(&profile, &gv, &mv, TokenizerOptions::default()).unwrap();
        prop_assert_eq!(s.gene_ids.len(), s.mutation_ids.len());
        prop_assert_eq!(s.annotations.len(), ANNOTATION_DIM * s.gene_ids.len());
        let groups = profile.grouped();
        if !groups.is_empty() {
            let expected = 2 + groups.iter().map(|(_, m)| 2 + m.len()).sum::<usize>() + groups.len() - 1;
            prop_assert_eq!(s.len(), expected);
        }
        for (&gid, &mid) in s.gene_ids.iter().zip(&s.mutation_ids) {
            if gid == gv.mut_token() {
                prop_assert_ne!(mid, NULL_MUTATION);
            } else {
                prop_assert_eq!(mid, NULL_MUTATION);
            }
        }
    }

    #[test]
    fn tokenization_is_injective_on_known_vocabulary(
        a in prop::collection::btree_set((0usize..6, 0usize..3), 1..8),
        b in prop::collection::btree_set((0usize..6, 0usize..3), 1..8),
    ) {
        let (panel, gv, mv) = vocab(6, 3);
        let pa = build_profile(&panel, &a.iter().copied().collect::<Vec<_>>());
        let pb = build_profile(&panel, &b.iter().copied().collect::<Vec<_>>());
        let ta = tokenize(&pa, &gv, &mv, TokenizerOptions::default()).unwrap();
        let tb = tokenize(&pb, &gv, &mv, TokenizerOptions::default()).unwrap();
        prop_assert_eq!(a == b, ta == tb);
    }

    #[test]
    fn collate_round_trips(raws in prop::collection::vec(profile_strategy(5, 2), 1..6)) {
        let (panel, gv, mv) = vocab(5, 2);
        let samples: Vec<_> = raws
            .iter()
            .map(|r| tokenize(&build_profile(&panel, r), &gv, &mv, TokenizerOptions::default()).unwrap())
            .collect();
        let refs: Vec<_> = samples.iter().collect();
        let batch = collate(&refs, gv.pad()).unwrap();
        for (i, s) in samples.iter().enumerate() {
            prop_assert_eq!(&batch.sample(i), s);
            let l = batch.seq_len;
            let pads = batch.pad_mask[i * l..(i + 1) * l].iter().filter(|&&p| p).count();
            prop_assert_eq!(pads, l - s.len());
        }
    }

    #[test]
    fn split_partitions_by_patient(n in 1usize..120, seed in any::<u64>()) {
        let records: Vec<RecistRecord> = (0..n)
            .map(|i| RecistRecord {
                patient_id: format!("P{}", i / 3),
                profile: MutationProfile::default(),
                drug_id: "D".into(),
                label: i % 2 == 0,
            })
            .collect();
        let s = split(&records, DEFAULT_RATIOS, seed).unwrap();
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
        let ids = |v: &[RecistRecord]| v.iter().map(|r| r.patient_id.clone()).collect::<BTreeSet<_>>();
        let (a, b, c) = (ids(&s.train), ids(&s.val), ids(&s.test));
        prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    }

    #[test]
    fn event_distribution_and_survival_curve(phi in finite_vec(1..12)) {
        let p = event_distribution(&phi);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
        let f = survival_curve(&phi);
        prop_assert_eq!(f[0], 1.0);
        prop_assert!(f.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        prop_assert!((f[phi.len()] - p[phi.len()]).abs() < 1e-12);
    }

    #[test]
    fn mtlr_loss_finite_for_huge_logits(
        phi in prop::collection::vec(-1e3f64..1e3, 1..10),
        interval_frac in 0.0f64..1.0,
        observed in any::<bool>(),
    ) {
        let k = phi.len();
        let interval = 1 + ((k + 1) as f64 * interval_frac) as usize;
        let interval = interval.min(k + 1);
        let t = SurvivalTarget {
            interval,
            event_observed: observed && interval <= k,
            response: (1..=k).map(|j| u8::from(j >= interval)).collect(),
        };
        let l = mtlr_loss(&[phi], &[t]).unwrap();
        prop_assert!(l.is_finite() && l >= -1e-9);
    }

    #[test]
    fn focal_loss_non_negative(
        ps in prop::collection::vec(0.0f64..=1.0, 1..30),
        seed in any::<u64>(),
        alpha in 0.0f64..=1.0,
        gamma in 0.0f64..5.0,
    ) {
        let labels: Vec<bool> = (0..ps.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        let fp = FocalParams { alpha, gamma };
        prop_assert!(focal_loss(&ps, &labels, fp).unwrap() >= 0.0);
        let at_labels: Vec<f64> = labels.iter().map(|&y| if y { 1.0 - 1e-12 } else { 1e-12 }).collect();
        prop_assert!(focal_loss(&at_labels, &labels, fp).unwrap() < 1e-6);
    }

    #[test]
    fn metrics_invariant_under_monotone_maps(
        data in prop::collection::vec((0u8..10, any::<bool>(), -3.0f64..3.0), 2..40),
    ) {
        let t: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
        let e: Vec<bool> = data.iter().map(|d| d.1).collect();
        let r: Vec<f64> = data.iter().map(|d| d.2).collect();
        let mapped: Vec<f64> = r.iter().map(|x| 3.0 * x.exp() + 1.0).collect();
        prop_assert_eq!(concordance_index(&t, &e, &r).ok(), concordance_index(&t, &e, &mapped).ok());
        prop_assert_eq!(auroc(&e, &r).ok(), auroc(&e, &mapped).ok());
        prop_assert_eq!(auprc(&e, &r).ok(), auprc(&e, &mapped).ok());
    }

    #[test]
    fn concordance_of_negated_risks_complements(
        data in prop::collection::vec((0u8..10, any::<bool>()), 2..40),
        seed in any::<u64>(),
    ) {
        let t: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
        let e: Vec<bool> = data.iter().map(|d| d.1).collect();
        // Distinct risks: a seeded permutation of 0..n.
        let mut r: Vec<f64> = (0..data.len()).map(|i| i as f64).collect();
        let mut x = seed | 1;
        for i in (1..r.len()).rev() {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            r.swap(i, (x % (i as u64 + 1)) as usize);
        }
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        if let (Ok(a), Ok(b)) = (concordance_index(&t, &e, &r), concordance_index(&t, &e, &neg)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn robust_z_is_affine_equivariant(
        cohort in prop::collection::vec(-5.0f64..5.0, 2..30),
        patient in -5.0f64..5.0,
        shift in -10.0f64..10.0,
        scale in 0.1f64..10.0,
    ) {
        let z = robust_z(patient, &cohort).unwrap();
        let moved: Vec<f64> = cohort.iter().map(|c| (c - shift) / scale).collect();
        let z2 = robust_z((patient - shift) / scale, &moved).unwrap();
        match (z, z2) {
            (RobustZ::Z(a), RobustZ::Z(b)) => prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs())),
            (RobustZ::Degenerate, RobustZ::Degenerate) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn ranking_ignores_insertion_order(
        scores in prop::collection::vec(0.01f64..0.99, 1..40),
        k in 1usize..=10,
        seed in any::<u64>(),
    ) {
        let entries: Vec<(String, f64)> = scores.iter().enumerate().map(|(i, &s)| (format!("D{i:02}"), s)).collect();
        let mut shuffled = entries.clone();
        let mut x = seed | 1;
        for i in (1..shuffled.len()).rev() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (x >> 33) as usize % (i + 1));
        }
        let a: ScoreMap = entries.into_iter().collect();
        let b: ScoreMap = shuffled.into_iter().collect();
        let ra = rank_top_k(&a, k);
        prop_assert_eq!(&ra, &rank_top_k(&b, k));
        prop_assert_eq!(ra.len(), k.min(scores.len()));
        prop_assert!(ra.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert!(ra.iter().enumerate().all(|(i, r)| r.rank == i + 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scores_are_probabilities_and_padding_is_inert(row in 0usize..40, seed in 0u64..1000) {
        let w = World::catalog70();
        let model: Model<f64> = w.checkpoint(seed).model.cast();
        let profile = &w.data.recist[row].profile;
        let scores = score_catalog(&model, profile, &w.data.catalog).unwrap();
        prop_assert!(scores.values().all(|&s| s > 0.0 && s < 1.0));

        let short = model.tokenize(profile).unwrap();
        let longer = model.tokenize(&MutationProfile::new(
            profile.entries.iter().cloned().chain([MutationEntry::new("TP53", "PADDING-PARTNER")]).collect(),
        )).unwrap();
        prop_assert!(longer.len() > short.len());
        let batch = collate(&[&short, &longer], 0).unwrap();
        let alone = collate(&[&short], 0).unwrap();
        let embed = |b: &drp_core::tokenizer::Batch, row: usize| {
            let mut g = Graph::<f64>::new(Mode::Eval, 0);
            let e = model.encoder.encode(&mut g, &model.store, b).unwrap();
            let d = model.config.encoder.d;
            g.value(e).data()[row * d..(row + 1) * d].to_vec()
        };
        let padded = embed(&batch, 0);
        let plain = embed(&alone, 0);
        let worst = padded.iter().zip(&plain).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst < 1e-10, "padding moved the embedding by {}", worst);
    }
}

#[test]
fn attention_rows_sum_to_one_and_ignore_padding() {
    let w = World::catalog70();
    let model: Model<f64> = w.checkpoint(1).model.cast();
    let samples: Vec<_> = w.data.recist[..6]
        .iter()
        .map(|r| model.tokenize(&r.profile).unwrap())
        .collect();
    let refs: Vec<_> = samples.iter().collect();
    let batch = collate(&refs, 0).unwrap();
    let mut g = Graph::<f64>::new(Mode::Eval, 0);
    let (x, valid) = model.encoder.embed_tokens(&mut g, &model.store, &batch).unwrap();
    let out = model.encoder.layers[0]
        .attention
        .forward(&mut g, &model.store, x, &valid)
        .unwrap();
    let l = batch.seq_len;
    for a in out.weights {
        for (row_idx, row) in g.value(a).data().chunks(l).enumerate() {
            let b = row_idx / l;
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (j, &p) in row.iter().enumerate() {
                if !valid[b * l + j] {
                    assert_eq!(p, 0.0);
                }
            }
        }
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let w = World::catalog70();
    let a = w.checkpoint(4);
    let b = w.checkpoint(4);
    let c = w.checkpoint(5);
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    let by_name: BTreeMap<_, _> = a
        .model
        .store
        .iter()
        .map(|(_, n, t)| (n.to_string(), t.clone()))
        .collect();
    for (_, n, t) in b.model.store.iter() {
        assert_eq!(&by_name[n], t);
    }
}
