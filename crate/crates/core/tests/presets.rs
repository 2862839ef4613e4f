use std::path::PathBuf;

use leo_ta::harness::config::{emit_config, load_config, parse_config};
use leo_ta::harness::{Design, ScenarioConfig};

fn preset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(name)
}

#[test]
fn shipped_preset_is_the_default_scenario() {
    let cfg = load_config(&preset("default.conf")).unwrap();
    assert_eq!(cfg, ScenarioConfig::default());
    assert_eq!(cfg, Design::H.apply(&ScenarioConfig::baseline()));
    assert_eq!(cfg.constellation.orbit_count, 20);
    assert_eq!(cfg.constellation.satellites_per_orbit, 15);
    assert!((cfg.constellation.altitude - 1.0e6).abs() < 1e-6);
    assert!((cfg.constellation.inclination.to_degrees() - 53.0).abs() < 1e-9);
    assert_eq!(cfg.g_l(), 6);
}

#[test]
fn emitted_default_parses_back() {
    let cfg = ScenarioConfig::default();
    assert_eq!(parse_config(&emit_config(&cfg)).unwrap(), cfg);
}
