use std::path::Path;
use std::process::{Command, Output};

fn panelbot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panelbot")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, seed: &str) -> String {
    let out = dir.join(format!("scenario-{seed}"));
    let o = panelbot(&["gen-scenario", "--seed", seed, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("scenario.toml").to_str().unwrap().to_string()
}

#[test]
fn generated_scenario_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "1");
    let b = gen(dir.path(), "2");
    let sa = panelbot_core::scene::Scenario::load(Path::new(&a)).unwrap();
    let sb = panelbot_core::scene::Scenario::load(Path::new(&b)).unwrap();
    assert_eq!(sa.scene.wrenches.len(), 6);
    assert_ne!(sa, sb);
    let again = gen(&dir.path().join("again"), "1");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(again).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let sc = gen(dir.path(), "3");
    let missing = dir.path().join("nope.toml");
    let cases: Vec<Vec<&str>> = vec![
        vec!["find-panel", "--scenario", &sc],
        vec!["find-panel", "--seed", "1"],
        vec!["dock", "--scenario", &sc, "--seed", "1", "--set", "mission.nope=1"],
        vec!["dock", "--scenario", &sc, "--seed", "1", "--set", "bogus"],
        vec!["dock", "--scenario", missing.to_str().unwrap(), "--seed", "1"],
        vec!["no-such-command"],
    ];
    for args in cases {
        let o = panelbot(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn pipeline_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let sc = gen(dir.path(), "4");
    let o = panelbot(&["dock", "--scenario", &sc, "--seed", "1", "--set", "mission.finder.min_similarity=1.1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
}

#[test]
fn valve_table_layout() {
    let dir = tempfile::tempdir().unwrap();
    let sc = gen(dir.path(), "5");
    let o = panelbot(&["valve-pose", "--scenario", &sc, "--seed", "2", "--reps", "2", "--angles", "0,15"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("alpha (deg)"), "{text}");
    assert!(text.contains("Std. deviation"), "{text}");
}

#[test]
fn replay_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let sc = gen(dir.path(), "6");
    let run = dir.path().join("run");
    let o = panelbot(&["find-panel", "--scenario", &sc, "--seed", "7", "--out", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let manifest = run.join("manifest.json");
    let replay = |to: &str| panelbot(&["replay", "--manifest", manifest.to_str().unwrap(), "--out", dir.path().join(to).to_str().unwrap()]);

    let o = replay("r1");
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("identical"));

    // changed artifact hash
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    m["artifacts"][0]["sha256"] = serde_json::Value::from("0".repeat(64));
    std::fs::write(&manifest, serde_json::to_string_pretty(&m).unwrap()).unwrap();
    assert_eq!(replay("r2").status.code(), Some(1));
    std::fs::write(&manifest, text).unwrap();

    // changed input file
    std::fs::write(&sc, std::fs::read_to_string(&sc).unwrap() + "\n# edited\n").unwrap();
    assert_eq!(replay("r3").status.code(), Some(1));
}
