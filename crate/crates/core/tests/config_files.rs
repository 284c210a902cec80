use std::path::{Path, PathBuf};

use timechange_bsde::{load_config, parse_config, parse_config_for, Error, ExperimentKind};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn issues(text: &str) -> Vec<(Option<usize>, String)> {
    match parse_config(text) {
        Err(Error::Config(v)) => v.into_iter().map(|i| (i.line, i.message)).collect(),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn shipped_configs_parse() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            load_config(&path, None, None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= ExperimentKind::ALL.len());
}

#[test]
fn seed_is_required_and_overridable() {
    let e = parse_config("kind = \"isometry\"\n").unwrap_err();
    assert!(e.to_string().contains("seed"));
    let cfg = parse_config_for("", Some(ExperimentKind::Isometry), Some(5)).unwrap();
    assert_eq!(cfg.seed, 5);
    let cfg = parse_config_for("seed = 1\n", Some(ExperimentKind::Isometry), Some(8)).unwrap();
    assert_eq!(cfg.seed, 8);
}

#[test]
fn every_issue_is_reported_with_its_line() {
    let text = "kind = \"isometry\"\nseed = 1\n[grid]\nsteps = -3\nbogus = 1\n[batch]\nscenarios = \"x\"\n";
    let v = issues(text);
    let lines: Vec<_> = v.iter().map(|(l, _)| *l).collect();
    assert_eq!(lines, vec![Some(4), Some(5), Some(7)]);
    assert!(v[1].1.contains("bogus"));
}

#[test]
fn unknown_names_are_rejected() {
    let v = issues("kind = \"solve-bsde\"\nseed = 1\n[driver]\nname = \"quartic\"\n");
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].0, Some(4));
    let v = issues("kind = \"teleport\"\nseed = 1\n");
    assert_eq!(v[0].0, Some(1));
}

#[test]
fn syntax_errors_carry_a_line() {
    let v = issues("seed = 1\nkind = \"isometry\"\n[grid\n");
    assert!(v.iter().any(|(l, _)| *l == Some(3)), "{v:?}");
}

#[test]
fn defaults_fill_missing_sections() {
    let cfg = parse_config_for("", Some(ExperimentKind::SolveBsde), Some(0)).unwrap();
    assert_eq!((cfg.horizon, cfg.steps, cfg.scenarios), (1.0, 50, 10_000));
    assert_eq!(cfg.kind, ExperimentKind::SolveBsde);
}
