use volumix::blocks::BlockKind;
use volumix::segnet::{build_model, SegConfig};
use volumix::synthdata::{generate_dataset, load_split, Manifest, PhantomSpec, Split};
use volumix::tensor::{read_checkpoint, Conv3dSpec, Graph, Tensor};
use volumix::trainer::{load_model, mean_dsc, save_model, train, TrainConfig, TrainPaths};

#[test]
fn stem_produces_48_channels_at_half_resolution() {
    let model = build_model::<f32>(&SegConfig::default(), 0).unwrap();
    let g = Graph::new();
    let ctx = model.params.bind(&g, false);
    let skips = model.net.encode(&ctx, g.constant(Tensor::full(&[1, 32, 32, 32], 0.1f32))).unwrap();
    assert_eq!(skips[0].shape(), vec![48, 16, 16, 16]);

    let x = g.constant(Tensor::zeros(&[1, 32, 32, 32]));
    let w = g.constant(Tensor::full(&[48, 1, 7, 7, 7], 0.01f32));
    assert_eq!(x.conv3d(w, None, Conv3dSpec::new(2, 3)).unwrap().shape(), vec![48, 16, 16, 16]);
}

#[test]
fn mambaout_is_smaller_than_the_mamba_variants() {
    let count = |k| build_model::<f32>(&SegConfig::new(k), 0).unwrap().param_count();
    let (out, mamba, hydra) = (count(BlockKind::MambaOut), count(BlockKind::TsMamba), count(BlockKind::TsHydra));
    assert!(out < mamba, "{out} vs {mamba}");
    assert!((hydra as f64 - mamba as f64).abs() / mamba as f64 <= 0.10, "{hydra} vs {mamba}");
}

#[test]
fn manifests_round_trip_and_checkpoints_reload() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec {
        size: [16; 3],
        ..PhantomSpec::small_roi(3)
    };
    let manifest = generate_dataset(&spec, 2, 1, 1, dir.path()).unwrap();
    assert_eq!(Manifest::load(&dir.path().join("manifest.tsv")).unwrap(), manifest);

    let seg = SegConfig::new(BlockKind::TsMamba).with_width(4);
    let cfg = TrainConfig {
        epochs: 2,
        val_interval: 1,
        ..TrainConfig::default()
    };
    let paths = TrainPaths {
        checkpoint: Some(dir.path().join("best.ckpt")),
        log: None,
    };
    let out = train::<f32>(&cfg, &seg, &manifest, &paths, |_| {}).unwrap();
    let val = load_split(&manifest, Split::Val).unwrap();
    let reloaded = load_model::<f32>(&seg, &dir.path().join("best.ckpt")).unwrap();
    assert_eq!(mean_dsc(&reloaded, &val).unwrap(), out.best_val_dsc);
    let logged = out.log.iter().filter_map(|e| e.val_dsc).fold(f64::MIN, f64::max);
    assert!(out.best_val_dsc >= logged);

    // The file layout: magic, version, one entry per parameter.
    let entries = read_checkpoint(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(entries.len(), reloaded.params.len());
    let bytes = std::fs::read(dir.path().join("best.ckpt")).unwrap();
    assert_eq!(&bytes[..4], b"CKPT");

    // A truncated checkpoint is rejected.
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_model::<f32>(&seg, &cut).is_err());
    save_model(&reloaded, &dir.path().join("again.ckpt")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("again.ckpt")).unwrap(), bytes);
}

#[test]
fn loss_is_finite_on_default_datasets_across_seeds() {
    for seed in 0..3 {
        for spec in [PhantomSpec::small_roi(seed), PhantomSpec::multi_organ(seed)] {
            let (image, labels) = volumix::synthdata::gen_phantom(&spec).unwrap();
            let seg = SegConfig {
                num_classes: spec.num_classes,
                ..SegConfig::default().with_width(4)
            };
            let model = build_model::<f32>(&seg, seed).unwrap();
            let g = Graph::new();
            let logits = model.net.forward(&model.params.bind(&g, true), g.constant(image.to_tensor().unwrap())).unwrap();
            let l = volumix::trainer::loss(logits, &labels.to_labels().unwrap().labels, 1.0, 1.0).unwrap();
            assert!(l.item().is_finite());
        }
    }
}
