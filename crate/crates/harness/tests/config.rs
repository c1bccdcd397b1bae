use m3fuse_harness::config::KITTI_TOML;
use m3fuse_harness::PipelineConfig;

#[test]
fn desk_config_round_trips() {
    let cfg = PipelineConfig::desk();
    cfg.validate().unwrap();
    let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn full_scale_config_parses_and_round_trips() {
    let cfg = PipelineConfig::from_toml(KITTI_TOML).unwrap();
    cfg.validate().unwrap();
    assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(cfg.transformer.d_model, 256);
    assert_eq!(cfg.backbone.num_keypoints, 2048);
}

#[test]
fn heads_must_divide_model_width() {
    let mut cfg = PipelineConfig::desk();
    cfg.transformer.heads = 5;
    assert!(cfg.validate().is_err());
}

#[test]
fn rejects_nonpositive_voxels_and_bad_ranges() {
    let mut cfg = PipelineConfig::desk();
    cfg.backbone.voxel_size[2] = 0.0;
    assert!(cfg.validate().is_err());

    let mut cfg = PipelineConfig::desk();
    cfg.range.max[0] = cfg.range.min[0];
    assert!(cfg.validate().is_err());

    let mut cfg = PipelineConfig::desk();
    cfg.optim.beta2 = 1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn unknown_keys_are_rejected() {
    let text = format!("{}\nmystery = 1\n", PipelineConfig::desk().to_toml());
    assert!(PipelineConfig::from_toml(&text).is_err());
}
