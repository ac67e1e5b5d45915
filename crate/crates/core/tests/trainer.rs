use dipa_core::adapter::{AdapterSet, Hooks};
use dipa_core::backbone::{
    embed, init_random_weights, write_container, BackboneConfig, BackboneWeights, InitScheme, WeightContainer,
};
use dipa_core::episodes::{make_synthetic_task, DomainShift, GaussianTaskSpec, SyntheticTask};
use dipa_core::grad::Eager;
use dipa_core::objective::{proxy_anchor_loss, AnchorInit, AnchorSet, LossParams};
use dipa_core::tensor::{DType, Rng, Tensor};
use dipa_core::trainer::{
    build_prefix_cache, cached_features, embed_images, finetune, uncached_features, FinetuneConfig, LossKind,
};
use dipa_core::Error;

fn desk_config() -> BackboneConfig {
    serde_json::from_str(r#"{"image_size":8,"patch_size":4,"embed_dim":16,"depth":4,"heads":2,"mlp_ratio":4.0}"#)
        .unwrap()
}

fn container(cfg: &BackboneConfig, seed: u64) -> WeightContainer {
    init_random_weights(cfg, &mut Rng::new(seed), InitScheme::TruncNormal { std: 0.2 }, DType::F64).unwrap()
}

fn weights(cfg: &BackboneConfig, seed: u64) -> BackboneWeights<f64> {
    BackboneWeights::from_container(cfg, &container(cfg, seed), false).unwrap()
}

fn task(cfg: &BackboneConfig, seed: u64) -> SyntheticTask<f64> {
    let spec = GaussianTaskSpec {
        image_size: cfg.image_size,
        noise_std: 0.7,
        shift: DomainShift::RandomLinear { strength: 1.0, seed: 5 },
        ..GaussianTaskSpec::default()
    };
    make_synthetic_task(&spec, seed).unwrap()
}

fn ft(d_t: usize, d_f: usize) -> FinetuneConfig {
    FinetuneConfig { d_t, d_f, iterations: 6, ..FinetuneConfig::default() }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = desk_config();
    let w = weights(&cfg, 1);
    let t = task(&cfg, 2);
    let e = &t.episode;
    let config = FinetuneConfig {
        iterations: 1,
        lr_adapters: 0.0,
        lr_anchors: 0.0,
        d_t: 3,
        d_f: 2,
        ..FinetuneConfig::default()
    };
    let out = finetune(&w, &config, &e.support, &e.support_labels, e.n_way).unwrap();
    for (_, p) in out.adapters.named_tensors() {
        assert!(p.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
    let anchors0 = AnchorSet::<f64>::random(e.n_way, 32, &mut Rng::new(Rng::derive_seed(config.seed, 2))).unwrap();
    assert_eq!(out.anchors, anchors0);

    let z = embed_images(&w, None, &e.support, 2).unwrap();
    let mut g = Eager;
    let zv = dipa_core::grad::Graph::<f64>::constant(&mut g, z);
    let av = dipa_core::grad::Graph::<f64>::constant(&mut g, anchors0.anchors.clone());
    let l0 = proxy_anchor_loss(&mut g, &zv, &e.support_labels, &av, &LossParams::default()).unwrap();
    assert_eq!(out.trace.values.len(), 1);
    assert!((out.trace.values[0] - l0.item()).abs() < 1e-12);
}

#[test]
fn iterations_must_be_positive() {
    let cfg = desk_config();
    let w = weights(&cfg, 1);
    let t = task(&cfg, 2);
    let e = &t.episode;
    let config = FinetuneConfig { iterations: 0, ..ft(2, 2) };
    let err = finetune(&w, &config, &e.support, &e.support_labels, e.n_way).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn suffix_replay_is_bit_exact() {
    let cfg = desk_config();
    let w = weights(&cfg, 3);
    let t = task(&cfg, 4);
    let images = &t.episode.support;
    let mut g = Eager;
    for d_f in 1..=cfg.depth {
        let full = uncached_features(&mut g, &w, images, &Hooks::none(cfg.depth), d_f).unwrap();
        for d_t in 0..=cfg.depth {
            let cache = build_prefix_cache(&w, images, d_t, d_f).unwrap();
            let adapters = dipa_core::adapter::attach::<f64>(
                &cfg,
                d_t,
                dipa_core::adapter::AdapterInit::Constant,
                &mut Rng::new(0),
            )
            .unwrap();
            let hooks = adapters.bind(&mut g);
            let replay = cached_features(&mut g, &w, &cache, &hooks, d_f).unwrap();
            assert_eq!(replay.data(), full.data(), "d_t {d_t} d_f {d_f}");
        }
    }
}

#[test]
fn cache_boundaries() {
    let cfg = desk_config();
    let w = weights(&cfg, 3);
    let images = &task(&cfg, 4).episode.support;
    let top = build_prefix_cache(&w, images, cfg.depth, 2).unwrap();
    assert_eq!(top.start_block, 0);
    assert!(top.frozen_cls.is_empty());
    let tokens = embed(&mut Eager, &w, images).unwrap();
    assert_eq!(top.tokens.data(), tokens.data());
    assert_eq!(top.memory_bytes(), 25 * cfg.tokens() * cfg.embed_dim * 8);

    let bottom = build_prefix_cache(&w, images, 0, 3).unwrap();
    assert_eq!(bottom.start_block, cfg.depth);
    assert_eq!(bottom.frozen_cls.len(), 3);
    assert!(build_prefix_cache(&w, images, cfg.depth + 1, 2).is_err());
    assert!(build_prefix_cache(&w, images, 1, 0).is_err());
}

#[test]
fn frozen_depth_trains_anchors_only() {
    let cfg = desk_config();
    let w = weights(&cfg, 5);
    let t = task(&cfg, 6);
    let e = &t.episode;
    let out = finetune(&w, &ft(0, 2), &e.support, &e.support_labels, e.n_way).unwrap();
    assert!(out.adapters.is_empty());
    assert!(out.trace.last().unwrap() < out.trace.first().unwrap());
}

#[test]
fn cached_and_uncached_traces_agree() {
    let cfg = BackboneConfig::tiny();
    let w = weights(&cfg, 7);
    let t = task(&cfg, 8);
    let e = &t.episode;
    for loss in [LossKind::ProxyAnchor, LossKind::NccMean] {
        for d_t in 0..=cfg.depth {
            let mut c = FinetuneConfig { loss, ..ft(d_t, 2) };
            let cached = finetune(&w, &c, &e.support, &e.support_labels, e.n_way).unwrap();
            c.use_cache = false;
            let uncached = finetune(&w, &c, &e.support, &e.support_labels, e.n_way).unwrap();
            let diff = cached.trace.max_abs_diff(&uncached.trace);
            assert!(diff <= 1e-9, "{loss:?} d_t {d_t}: {diff}");
            assert_eq!(cached.trace.values.len(), 6);
        }
    }
}

#[test]
fn training_is_deterministic_and_leaves_weights_alone() {
    let cfg = desk_config();
    let c = container(&cfg, 9);
    let before = write_container(&c);
    let w = BackboneWeights::<f64>::from_container(&cfg, &c, false).unwrap();
    let t = task(&cfg, 10);
    let e = &t.episode;
    let config = FinetuneConfig { anchor_init: AnchorInit::Custom, ..ft(3, 4) };
    let a = finetune(&w, &config, &e.support, &e.support_labels, e.n_way).unwrap();
    let b = finetune(&w, &config, &e.support, &e.support_labels, e.n_way).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.adapters, b.adapters);
    assert_eq!(a.anchors, b.anchors);
    assert_eq!(write_container(&c), before);
}

#[test]
fn snapshot_round_trip() {
    let cfg = desk_config();
    let w = weights(&cfg, 11);
    let t = task(&cfg, 12);
    let e = &t.episode;
    let out = finetune(&w, &ft(2, 2), &e.support, &e.support_labels, e.n_way).unwrap();
    let mut c = WeightContainer::new();
    out.write_into(&mut c).unwrap();
    let back = AdapterSet::<f64>::read_from(&cfg, 2, &c).unwrap();
    assert_eq!(back, out.adapters);
    assert_eq!(c.typed::<f64>("anchors").unwrap(), out.anchors.anchors);
    assert_eq!(c.typed::<f64>("loss_trace").unwrap().data(), &out.trace.values[..]);
}

#[test]
fn divergence_reports_the_iteration() {
    let cfg = desk_config();
    let w = weights(&cfg, 13);
    let t = task(&cfg, 14);
    let e = &t.episode;
    let config = FinetuneConfig { lr_adapters: 1e300, ..ft(2, 2) };
    let err = finetune(&w, &config, &e.support, &e.support_labels, e.n_way).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert!(err.to_string().contains("iteration"), "{err}");
}

#[test]
fn default_training_lowers_the_loss() {
    let cfg = desk_config();
    let w = weights(&cfg, 15);
    let config = FinetuneConfig { d_t: 3, d_f: 4, ..FinetuneConfig::default() };
    let mut improved = 0;
    for seed in 0..100 {
        let t = task(&cfg, 100 + seed);
        let e = &t.episode;
        let c = FinetuneConfig { seed, ..config.clone() };
        let out = finetune(&w, &c, &e.support, &e.support_labels, e.n_way).unwrap();
        assert_eq!(out.trace.values.len(), 80);
        assert!(out.anchors.anchors.data().iter().all(|v| v.is_finite()));
        if out.trace.last().unwrap() < out.trace.first().unwrap() {
            improved += 1;
        }
    }
    assert!(improved >= 95, "{improved}/100");
}

#[test]
fn f32_training_runs() {
    let cfg = desk_config();
    let c = container(&cfg, 16);
    let w = BackboneWeights::<f32>::from_container(&cfg, &c, false).unwrap();
    let t: SyntheticTask<f32> =
        make_synthetic_task(&GaussianTaskSpec { image_size: 8, ..GaussianTaskSpec::default() }, 3).unwrap();
    let e = &t.episode;
    let out = finetune(&w, &ft(2, 2), &e.support, &e.support_labels, e.n_way).unwrap();
    assert!(out.trace.values.iter().all(|v| v.is_finite()));
    let z: Tensor<f32> = embed_images(&w, Some(&out.adapters), &e.query, 2).unwrap();
    assert_eq!(z.shape(), &[50, 32]);
}
