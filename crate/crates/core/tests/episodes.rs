use dipa_core::backbone::{init_random_weights, BackboneConfig, BackboneWeights, InitScheme};
use dipa_core::episodes::{
    aggregate, evaluate_episode, make_synthetic_task, run_parallel, sample_episode, DomainShift, EpisodeResult,
    Evaluation, GaussianTaskSpec, Pool, SamplerConfig,
};
use dipa_core::tensor::{DType, Rng, Tensor};
use dipa_core::trainer::{FinetuneConfig, LossKind};

fn desk_weights() -> BackboneWeights<f64> {
    let cfg: BackboneConfig =
        serde_json::from_str(r#"{"image_size":8,"patch_size":4,"embed_dim":16,"depth":4,"heads":2,"mlp_ratio":4.0}"#)
            .unwrap();
    let c = init_random_weights(&cfg, &mut Rng::new(21), InitScheme::TruncNormal { std: 0.2 }, DType::F64).unwrap();
    BackboneWeights::from_container(&cfg, &c, false).unwrap()
}

fn eval(d_t: usize, iterations: usize) -> Evaluation {
    Evaluation {
        finetune: FinetuneConfig { d_t, d_f: 4, iterations, ..FinetuneConfig::default() },
        record_timing: false,
    }
}

#[test]
fn zero_noise_pipeline_is_exact() {
    let w = desk_weights();
    let spec = GaussianTaskSpec { image_size: 8, noise_std: 0.0, ..GaussianTaskSpec::default() };
    for seed in 0..3 {
        let t = make_synthetic_task::<f64>(&spec, seed).unwrap();
        let r = evaluate_episode(&w, &eval(3, 10), &t.episode, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }
}

#[test]
fn well_separated_classes_need_no_adaptation() {
    let w = desk_weights();
    let spec =
        GaussianTaskSpec { image_size: 8, n_way: 2, class_sep: 1.0, noise_std: 0.05, ..GaussianTaskSpec::default() };
    let results: Vec<EpisodeResult> = (0..10)
        .map(|seed| {
            let t = make_synthetic_task::<f64>(&spec, seed).unwrap();
            assert_eq!(t.bayes_accuracy(), 1.0);
            evaluate_episode(&w, &eval(0, 1), &t.episode, seed as usize).unwrap()
        })
        .collect();
    let s = aggregate(&results).unwrap();
    assert!(s.mean >= 0.99, "{}", s.mean);
}

#[test]
fn adaptation_tightens_clusters() {
    let w = desk_weights();
    let spec = GaussianTaskSpec {
        image_size: 8,
        noise_std: 0.7,
        shift: DomainShift::RandomLinear { strength: 1.0, seed: 5 },
        ..GaussianTaskSpec::default()
    };
    let (mut frozen, mut tuned) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let t = make_synthetic_task::<f64>(&spec, 500 + seed).unwrap();
        frozen.push(evaluate_episode(&w, &eval(0, 80), &t.episode, 0).unwrap());
        tuned.push(evaluate_episode(&w, &eval(3, 80), &t.episode, 0).unwrap());
    }
    let mean = |r: &[EpisodeResult], f: fn(&EpisodeResult) -> f64| r.iter().map(f).sum::<f64>() / r.len() as f64;
    let (sf, st) = (mean(&frozen, |r| r.silhouette), mean(&tuned, |r| r.silhouette));
    assert!(st > sf, "silhouette {st} vs frozen {sf}");
    assert!(aggregate(&tuned).unwrap().mean >= aggregate(&frozen).unwrap().mean);
}

#[test]
fn parallel_results_follow_episode_order() {
    let w = desk_weights();
    let spec = GaussianTaskSpec { image_size: 8, ..GaussianTaskSpec::default() };
    let e = eval(2, 4);
    let job = |i: usize| {
        let t = make_synthetic_task::<f64>(&spec, i as u64).unwrap();
        evaluate_episode(&w, &e, &t.episode, i).unwrap()
    };
    let serial = run_parallel(6, 1, job).unwrap();
    let parallel = run_parallel(6, 3, job).unwrap();
    assert_eq!(serial, parallel);
    assert!(serial.iter().enumerate().all(|(i, r)| r.episode_id == i));
}

#[test]
fn timing_is_opt_in() {
    let w = desk_weights();
    let t = make_synthetic_task::<f64>(&GaussianTaskSpec { image_size: 8, ..GaussianTaskSpec::default() }, 1).unwrap();
    let mut e = eval(1, 2);
    let r = evaluate_episode(&w, &e, &t.episode, 0).unwrap();
    assert!(r.wall_ms.is_none());
    assert!(!serde_json::to_string(&r).unwrap().contains("wall_ms"));
    e.record_timing = true;
    assert!(evaluate_episode(&w, &e, &t.episode, 0).unwrap().wall_ms.is_some());
}

#[test]
fn pool_episodes_run_end_to_end() {
    let w = desk_weights();
    let spec = GaussianTaskSpec {
        image_size: 8,
        n_way: 7,
        shots: 6,
        queries_per_class: 14,
        noise_std: 0.5,
        ..GaussianTaskSpec::default()
    };
    let t = make_synthetic_task::<f64>(&spec, 3).unwrap();
    let mut samples: Vec<Tensor<f64>> = Vec::new();
    let mut labels = Vec::new();
    let ep = &t.episode;
    for (x, l) in [(&ep.support, &ep.support_labels), (&ep.query, &ep.query_labels)] {
        let d = x.numel() / l.len();
        for (i, &y) in l.iter().enumerate() {
            samples.push(Tensor::new(vec![3, 8, 8], x.data()[i * d..(i + 1) * d].to_vec()).unwrap());
            labels.push(y);
        }
    }
    let pool = Pool::new(samples, labels).unwrap();
    let cfg = SamplerConfig { way_max: 50, queries_per_class: 5, ..SamplerConfig::default() };
    for seed in 0..3 {
        let ep = sample_episode(&pool, &cfg, seed).unwrap();
        assert!((5..=7).contains(&ep.n_way));
        let mut e = eval(2, 5);
        e.finetune.loss = LossKind::NccMean;
        let r = evaluate_episode(&w, &e, &ep, seed as usize).unwrap();
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert_eq!(r.shots, ep.shots);
    }
}
