use timechange_bsde::{parse_config_for, run_experiment, ExperimentKind};

fn artifacts(kind: ExperimentKind, extra: &str, threads: usize) -> (Vec<u8>, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("seed = 77\nthreads = {threads}\n[grid]\nsteps = 10\n[batch]\nscenarios = 800\n{extra}");
    let mut cfg = parse_config_for(&text, Some(kind), None).unwrap();
    cfg.out = dir.path().to_path_buf();
    let o = run_experiment(&cfg).unwrap();
    (std::fs::read(o.csv).unwrap(), std::fs::read(o.jsonl).unwrap())
}

#[test]
fn artifacts_do_not_depend_on_thread_count() {
    let two_state = "[intensity.jump]\nkind = \"two-state\"\nlevels = [0.5, 2.0]\nswitch_rates = [1.0, 1.0]\n";
    for (kind, extra) in [
        (ExperimentKind::SimulateNoise, two_state),
        (ExperimentKind::SolveBsde, ""),
        (ExperimentKind::LinearOracle, "[regression]\ndegree = 1\n"),
    ] {
        let a = artifacts(kind, extra, 1);
        let b = artifacts(kind, extra, 3);
        assert!(!a.0.is_empty());
        assert_eq!(a, b, "{kind}");
    }
}
