use super::*;

#[test]
fn config_round_trips_through_toml() {
    let cfg = RoundConfig::default();
    let back = RoundConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(cfg, back);
    assert_eq!(RoundConfig::from_toml("").unwrap(), cfg);
}
