use super::*;

#[test]
fn test_empty_text_is_the_default_config() {
    let cfg = RunConfig::parse("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.train.learning_rate, 1e-4);
    assert_eq!(cfg.train.momentum, 0.9);
    assert_eq!(cfg.train.clip_norm, 10.0);
    assert_eq!(cfg.encoder.levels, 5);
    assert_eq!(cfg.transition.window, 7);
}

#[test]
fn test_keys_comments_and_whitespace() {
    let text = "
# a full-line comment
encoder.levels = 3   # trailing comment
transition.window=5
  train.curriculum = 2, 3 ,4

train.model = regressor
data.scene = occlusion
cycle.level_weights = 1,0.5,0.25
propagation.query_level = 2
";
    let cfg = RunConfig::parse(text).unwrap();
    assert_eq!(cfg.encoder.levels, 3);
    assert_eq!(cfg.transition.window, 5);
    assert_eq!(cfg.train.curriculum, vec![2, 3, 4]);
    assert_eq!(cfg.train.model, ModelKind::Regressor);
    assert_eq!(cfg.data.scene, SceneKind::Occlusion);
    assert_eq!(cfg.cycle.level_weights, vec![1.0, 0.5, 0.25]);
    assert_eq!(cfg.propagation.query_level, Some(2));
}

#[test]
fn test_unknown_key_is_named_in_the_error() {
    let err = RunConfig::parse("encoder.levels = 3\nencoder.depht = 2\n").unwrap_err();
    match &err {
        ConfigError::UnknownKey { line, key } => {
            assert_eq!(*line, 2);
            assert_eq!(key, "encoder.depht");
        }
        other => panic!("wrong error: {other}"),
    }
    assert!(err.to_string().contains("encoder.depht"));
}

#[test]
fn test_bad_value_names_the_key() {
    let err = RunConfig::parse("train.batch_size = many").unwrap_err();
    assert!(err.to_string().contains("train.batch_size"), "{err}");
    let err = RunConfig::parse("train.model = parametric").unwrap_err();
    assert!(err.to_string().contains("train.model"), "{err}");
    let err = RunConfig::parse("just some words").unwrap_err();
    assert!(matches!(err, ConfigError::MissingSeparator { line: 1, .. }), "{err}");
}

#[test]
fn test_curriculum_invariants() {
    assert!(RunConfig::parse("train.curriculum = 2,3,4").is_ok());
    let err = RunConfig::parse("train.curriculum = 1,2").unwrap_err();
    assert!(err.to_string().contains("at least 2"), "{err}");
    let err = RunConfig::parse("train.curriculum = 2,2").unwrap_err();
    assert!(err.to_string().contains("strictly increase"), "{err}");
    let err = RunConfig::parse("train.curriculum = 3,2").unwrap_err();
    assert!(err.to_string().contains("strictly increase"), "{err}");
    let err = RunConfig::parse("train.curriculum = auto").unwrap_err();
    assert!(err.to_string().contains("at least one stage"), "{err}");
}

#[test]
fn test_round_trip_is_identity() {
    let texts = [
        String::new(),
        "encoder.levels = 3\ntransition.temperature = 0.07\ntrain.curriculum = 2,3\n".to_string(),
        "regressor.charbonnier = true\nregressor.charbonnier_eps = 0.001\n\
         propagation.query_level = auto\npropagation.hypercolumn_levels = 1,2\n\
         train.learning_rate = 0.00025\ndata.jitter_brightness = 0.4\n\
         train.out_dir = runs/exp7\ncycle.pixel_sum = true\n"
            .to_string(),
    ];
    for text in texts {
        let once = RunConfig::parse(&text).unwrap();
        let twice = RunConfig::parse(&once.serialize()).unwrap();
        assert_eq!(once, twice, "round trip changed the config for {text:?}");
        // A second lap reproduces the exact text as well.
        assert_eq!(once.serialize(), twice.serialize());
    }
}

#[test]
fn test_extreme_values_survive_the_round_trip() {
    let mut cfg = RunConfig::default();
    cfg.transition.prune_threshold = 1e-300;
    cfg.smoothness.lambda_c = 12345.6789012345;
    cfg.train.seed = u64::MAX;
    cfg.train.learning_rate = f64::MIN_POSITIVE;
    let back = RunConfig::parse(&cfg.serialize()).unwrap();
    assert_eq!(cfg, back);
}

#[test]
fn test_every_serialized_key_parses_alone() {
    let cfg = RunConfig::default();
    for line in cfg.serialize().lines() {
        RunConfig::parse(line).unwrap_or_else(|e| panic!("line `{line}` failed: {e}"));
    }
}
