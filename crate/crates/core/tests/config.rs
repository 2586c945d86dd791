use faewnet::config::KvConfig;
use faewnet::data::GenSpec;
use faewnet::ops::SpectralMode;
use faewnet::train::TrainRunConfig;
use faewnet::Error;

#[test]
fn gen_spec_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spec.cfg");
    std::fs::write(
        &path,
        "size = 32\nbuilding_size_min = 4\nbuilding_size_max = 10\np_add = 0.5\np_remove = 0.5\np_none = 0\n",
    )
    .unwrap();
    let kv = KvConfig::load(&path).unwrap();
    kv.check_known(GenSpec::KEYS).unwrap();
    let s = GenSpec::from_kv(&kv).unwrap();
    assert_eq!((s.size, s.building_size, s.change_probs), (32, (4, 10), (0.5, 0.5, 0.0)));
    assert_eq!(s.buildings, GenSpec::default().buildings);
    assert!(matches!(KvConfig::load(dir.path().join("nope.cfg")), Err(Error::Config(_))));
}

#[test]
fn gen_spec_rejects_bad_values() {
    let kv = KvConfig::parse("p_add = 0.9").unwrap();
    assert!(matches!(GenSpec::from_kv(&kv), Err(Error::Config(_))));
    let kv = KvConfig::parse("size = big").unwrap();
    assert!(matches!(GenSpec::from_kv(&kv), Err(Error::Config(_))));
    let kv = KvConfig::parse("colour = red").unwrap();
    assert!(matches!(kv.check_known(GenSpec::KEYS), Err(Error::Config(_))));
}

#[test]
fn train_config_overrides() {
    let kv = KvConfig::parse(
        "steps = 10\nlr = 0.001\ndafa = false\ndft_mode = amplitude\ntemporal_shuffle = false\nimage_size = 32\ndim = 16\n",
    )
    .unwrap();
    kv.check_known(TrainRunConfig::KEYS).unwrap();
    let c = TrainRunConfig::from_kv(&kv).unwrap();
    assert_eq!((c.steps, c.lr), (10, 0.001));
    assert!(!c.model.use_dafa && c.model.use_msafa);
    assert_eq!(c.dft_mode(), SpectralMode::Amplitude);
    assert!(!c.augment.temporal_swap && c.augment.flip);
    assert_eq!((c.model.encoder.image_size, c.model.encoder.dim, c.model.msafa.channels), ((32, 32), 16, 16));
}

#[test]
fn train_config_defaults_and_errors() {
    let c = TrainRunConfig::from_kv(&KvConfig::default()).unwrap();
    assert_eq!(c, TrainRunConfig::default());
    assert_eq!(c.lr, 2e-4);
    for bad in ["batch = 0", "lr = -1", "dim = 30", "dafa_position = 0", "dft_mode = phase"] {
        assert!(matches!(TrainRunConfig::from_kv(&KvConfig::parse(bad).unwrap()), Err(Error::Config(_))), "{bad}");
    }
}
