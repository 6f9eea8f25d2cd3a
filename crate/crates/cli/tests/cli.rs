use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"
n_per_side = 8
s_test = 40
workers = 2

[weights]
source = "fixed"

[dls]
m_sweep = [3, 8]

[rb]
s_train = 60
k_max = 8
"#;

fn rbdls(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_rbdls")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "rbdls {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn without_timing(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "online_sec").unwrap();
    text.lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(col);
            f.join(",")
        })
        .collect()
}

#[test]
fn example1_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        rbdls(&["example1", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }
    let first = without_timing(&a.join("results.csv"));
    assert_eq!(first.len(), 1 + 2 * 3);
    assert_eq!(first, without_timing(&b.join("results.csv")));
    assert!(a.join("results.json").exists());
}

#[test]
fn print_config_round_trips_and_applies_flags() {
    let text = rbdls(&["print-config", "--seed", "10", "--mesh", "16", "--rule", "M2"]);
    assert!(text.contains("n_per_side = 16"));
    assert!(text.contains("train = 10"));
    assert!(text.contains("test = 12"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("printed.toml");
    std::fs::write(&cfg, &text).unwrap();
    assert_eq!(rbdls(&["print-config", "--config", cfg.to_str().unwrap()]), text);
}

#[test]
fn fitted_surrogates_evaluate_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().to_str().unwrap();
    rbdls(&["fit-dls", "--m", "8", "--config", cfg, "--out", out]);
    rbdls(&["build-rb", "--config", cfg, "--out", out]);
    let rb = dir.path().join("reduced_basis.rbdl");
    rbdls(&["fit-rbdls", "--m", "8", "--rb", rb.to_str().unwrap(), "--config", cfg, "--out", out]);

    let mut values = Vec::new();
    for name in ["dls_M8.rbdl", "rbdls_M8.rbdl", "reduced_basis.rbdl"] {
        let path = dir.path().join(name);
        let json = rbdls(&["eval", "--surrogate", path.to_str().unwrap(), "--y", "0.1,-0.2,0.3,0,-0.5"]);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["n_dofs"], 49);
        values.push(v["qoi"].as_f64().unwrap());
    }
    assert!((values[0] - values[1]).abs() <= 1e-4 * values[0].abs(), "{values:?}");
    assert!((values[1] - values[2]).abs() <= 5e-2 * values[2].abs(), "{values:?}");

    let bad = Command::new(env!("CARGO_BIN_EXE_rbdls"))
        .args(["eval", "--surrogate", cfg, "--y", "0,0,0,0,0"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
