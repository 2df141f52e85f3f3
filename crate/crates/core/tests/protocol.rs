use cma_core::datastore::{overlapping_ids, sample_episode};
use cma_core::harness::{
    run_ablation, run_domain_shift, run_protocol, std_dev, trimmed_mean, ProtocolConfig,
};
use cma_core::optim::InitScheme;
use cma_core::synth::{generate, SynthSpec};
use cma_core::{Error, TrainConfig, Variant};
use proptest::prelude::*;

fn quick() -> ProtocolConfig {
    ProtocolConfig {
        shots: vec![2, 8],
        num_seeds: 3,
        train: TrainConfig {
            max_epochs: 4,
            patience: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn constant_predictor_scores_the_base_rate() {
    let store = generate(&SynthSpec::blobs("bal", 8, 40)).unwrap();
    let cfg = ProtocolConfig {
        train: TrainConfig {
            learning_rate: 0.0,
            init: InitScheme::Zero,
            ..Default::default()
        },
        ..quick()
    };
    let report = run_protocol(&store, &cfg).unwrap();
    for s in &report.summaries {
        assert_eq!(s.trimmed_mean, 0.5);
        // S = 3 identical scores.
        assert_eq!(s.std_dev, 0.0);
    }
    assert!(report.cells.iter().all(|c| c.accuracy == 0.5));
}

#[test]
fn repeated_runs_are_identical() {
    let store = generate(&SynthSpec::blobs("rep", 8, 30)).unwrap();
    let a = run_protocol(&store, &quick()).unwrap();
    let b = run_protocol(&store, &ProtocolConfig { jobs: 3, ..quick() }).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.config.seeds, vec![0, 1, 2]);
}

#[test]
fn report_invariants() {
    let store = generate(&SynthSpec::blobs("inv", 8, 30)).unwrap();
    let cfg = ProtocolConfig {
        num_seeds: 5,
        base_seed: 40,
        ..quick()
    };
    let report = run_protocol(&store, &cfg).unwrap();
    assert_eq!(report.cells.len(), 2 * 5);
    assert_eq!(report.config.seeds, vec![40, 41, 42, 43, 44]);
    for s in &report.summaries {
        let scores = report.scores(s.shot);
        assert_eq!(scores.len(), 5);
        assert!(scores.iter().all(|a| (0.0..=1.0).contains(a)));
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let kept = &sorted[1..4];
        assert!((s.trimmed_mean - kept.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }
    for c in &report.cells {
        assert!(c.best_epoch >= 1 && c.best_epoch <= c.epochs_ran);
    }
}

#[test]
fn ablation_pairs_seeds_across_variants() {
    let store = generate(&SynthSpec::complementary("pair", 6, 30)).unwrap();
    let variants = [Variant::Full, Variant::NoCross, Variant::NoMeta, Variant::NoImage, Variant::NoText];
    let ablation = run_ablation(&store, &variants, &quick()).unwrap();
    let keys = |v: Variant| -> Vec<(usize, u64)> {
        ablation.get(v).unwrap().cells.iter().map(|c| (c.shot, c.seed)).collect()
    };
    for v in variants {
        assert_eq!(keys(v), keys(Variant::Full));
        let alone = run_protocol(&store, &ProtocolConfig { variant: v, ..quick() }).unwrap();
        assert_eq!(alone.to_json().unwrap(), ablation.get(v).unwrap().to_json().unwrap());
    }
    let cross = ablation.get(Variant::NoCross).unwrap();
    assert_eq!(cross.config.z, 3);
    assert_eq!(cross.config.branches, ["t", "m", "c"]);
    // Episodes depend on (store, shot, seed) only, which is what pairing relies on.
    for (shot, seed) in keys(Variant::Full) {
        assert_eq!(
            sample_episode(&store, shot, seed, true).unwrap(),
            sample_episode(&store, shot, seed, true).unwrap()
        );
    }
}

#[test]
fn image_only_changes_do_not_move_text_only_scores() {
    let spec = SynthSpec::blobs("img", 6, 30);
    let a = generate(&spec).unwrap();
    let mut noisier = spec.clone();
    noisier.noise *= 3.0;
    // Only the image tokens of the second draw are used.
    let b = generate(&noisier).unwrap();
    let records: Vec<_> = a
        .records()
        .iter()
        .zip(b.records())
        .map(|(ra, rb)| {
            let mut r = ra.clone();
            r.image_tokens = rb.image_tokens.clone();
            r
        })
        .collect();
    let b = cma_core::FeatureStore::new(6, "img", records).unwrap();
    assert_ne!(a, b);
    let cfg = ProtocolConfig { variant: Variant::NoImage, ..quick() };
    let (ra, rb) = (run_protocol(&a, &cfg).unwrap(), run_protocol(&b, &cfg).unwrap());
    assert_eq!(ra.cells, rb.cells);
}

#[test]
fn domain_shift_with_the_same_store_twice() {
    let store = generate(&SynthSpec::blobs("same", 6, 20)).unwrap();
    let report = run_domain_shift(&store, &store, &quick()).unwrap();
    assert_eq!(report.config.mode, "domain_shift");
    assert_eq!(report.config.test_store.as_deref(), Some("same"));
    assert!(report.cells.iter().all(|c| (0.0..=1.0).contains(&c.accuracy)));
    // Train ids are part of the scored test store in this configuration.
    let episode = sample_episode(&store, 2, 0, true).unwrap();
    let all: Vec<String> = store.records().iter().map(|r| r.id.clone()).collect();
    assert_eq!(overlapping_ids(&[&episode.train_ids, &all]).len(), 4);
}

#[test]
fn domain_shift_needs_matching_dimensions() {
    let a = generate(&SynthSpec::blobs("a", 6, 20)).unwrap();
    let b = generate(&SynthSpec::blobs("b", 7, 20)).unwrap();
    assert!(matches!(run_domain_shift(&a, &b, &quick()), Err(Error::Dimension(_))));
}

fn shift_cfg() -> ProtocolConfig {
    ProtocolConfig {
        shots: vec![16],
        num_seeds: 5,
        jobs: 4,
        ..Default::default()
    }
}

#[test]
fn matched_distributions_score_like_in_domain() {
    let source = SynthSpec::blobs("source", 16, 60);
    let target = SynthSpec {
        source_name: "target".into(),
        sample_seed: 99,
        ..source.clone()
    };
    let (src, tgt) = (generate(&source).unwrap(), generate(&target).unwrap());
    let in_domain = run_protocol(&src, &shift_cfg()).unwrap().summaries[0].trimmed_mean;
    let shifted = run_domain_shift(&src, &tgt, &shift_cfg()).unwrap().summaries[0].trimmed_mean;
    assert!(in_domain > 0.8, "{in_domain}");
    assert!((in_domain - shifted).abs() <= 0.05, "in-domain {in_domain}, shifted {shifted}");
}

#[test]
fn flipped_label_correspondence_falls_below_chance() {
    let source = SynthSpec::blobs("source", 16, 60);
    let target = SynthSpec {
        source_name: "flipped".into(),
        sample_seed: 7,
        flip_labels: true,
        ..source.clone()
    };
    let (src, tgt) = (generate(&source).unwrap(), generate(&target).unwrap());
    let shifted = run_domain_shift(&src, &tgt, &shift_cfg()).unwrap().summaries[0].trimmed_mean;
    assert!(shifted < 0.5, "{shifted}");
}

#[test]
fn errors_carry_the_cell() {
    let store = generate(&SynthSpec::blobs("small", 4, 5)).unwrap();
    let cfg = ProtocolConfig { shots: vec![2, 3], ..quick() };
    match run_protocol(&store, &cfg) {
        Err(Error::Cell { shot: 3, seed: 0, source }) => {
            assert!(matches!(*source, Error::InsufficientPopulation { have: 5, need: 6, .. }))
        }
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn trimmed_mean_is_bounded(xs in prop::collection::vec(-1e3f64..1e3, 3..40)) {
        let t = trimmed_mean(&xs).unwrap();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(t >= lo - 1e-9 && t <= hi + 1e-9);
    }

    #[test]
    fn constant_lists(x in -1e3f64..1e3, n in 3usize..40) {
        let xs = vec![x; n];
        prop_assert!((trimmed_mean(&xs).unwrap() - x).abs() <= 1e-12 * x.abs().max(1.0));
        prop_assert_eq!(std_dev(&xs).unwrap(), 0.0);
    }

    #[test]
    fn std_is_zero_only_for_constant_lists(xs in prop::collection::vec(0.0f64..1.0, 2..20)) {
        let all_equal = xs.iter().all(|&v| v == xs[0]);
        prop_assert_eq!(std_dev(&xs).unwrap() == 0.0, all_equal);
    }
}
