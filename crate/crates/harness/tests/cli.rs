//! The `deconf` binary: subcommands, outputs and exit codes.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::tiny_plan;

fn deconf(plan: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deconf")).arg("--plan").arg(plan).args(args).output().unwrap()
}

fn write_plan(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("plan.json");
    std::fs::write(&path, serde_json::to_string(&tiny_plan(&dir.join("out"))).unwrap()).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn pipeline_writes_pool_manifests_checkpoint_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path());
    let out = dir.path().join("out");

    let o = deconf(&plan, &["corpus", "generate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["pool.jsonl", "vocab.tsv", "corpus_spec.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let pool = out.join("pool.jsonl");
    let pool_arg = pool.to_str().unwrap();

    let o = deconf(&plan, &["--pool", pool_arg, "bench", "make", "--alpha", "3", "--seed", "1"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("manifest_hash"));
    for split in ["train", "valid", "test", "balanced"] {
        assert!(out.join("alpha3_seed1").join(format!("{split}_manifest.jsonl")).exists(), "{split}");
    }

    let o = deconf(&plan, &["--pool", pool_arg, "train", "--alpha", "3", "--seed", "1"]);
    assert!(o.status.success());
    for f in ["primary.ckpt.json", "delta_p.json", "history.csv", "metrics.json"] {
        assert!(out.join("alpha3_seed1").join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(out.join("alpha3_seed1/history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,valid_auprc,lr,wall_ms"));

    let o = deconf(&plan, &["--pool", pool_arg, "--seeds", "1", "--k-grid", "0,20", "df", "sweep"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("df_sweep.csv")).unwrap();
    // header + 2 α × 1 seed × 2 k × 3 mask types
    assert_eq!(table.lines().count(), 1 + 2 * 2 * 3);
    assert!(out.join("df_sweep.provenance.json").exists());

    let row = table.lines().nth(5).unwrap();
    let o = deconf(&out.join("df_sweep.provenance.json"), &["regenerate", "df_sweep", row]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains(row));

    // Without the sweep's overrides the row lies outside the plan's grid.
    let o = deconf(&plan, &["--pool", pool_arg, "regenerate", "df_sweep", row]);
    assert_eq!(o.status.code(), Some(2));

    let o = deconf(&plan, &["--pool", pool_arg, "report", "--alpha", "3", "--seed", "1", "--json"]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["auprc"].as_f64().is_some());
}

#[test]
fn every_family_subcommand_writes_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path());
    for (args, name) in [
        (&["ecf", "probe"][..], "ecf_probe"),
        (&["tradeoff"][..], "tradeoff"),
        (&["entangle"][..], "entanglement"),
    ] {
        let mut full = vec!["--seeds", "2", "--alphas", "3"];
        full.extend_from_slice(args);
        let o = deconf(&plan, &full);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(dir.path().join("out").join(format!("{name}.csv")).exists());
    }
}

#[test]
fn exit_codes_distinguish_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path());

    // infeasible α for the marginals
    let o = deconf(&plan, &["--alphas=-1", "df", "sweep"]);
    assert_eq!(o.status.code(), Some(2));
    let o = deconf(&plan, &["--mask-pcts", "120", "ecf", "probe"]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("plan.yaml");
    std::fs::write(&bad, "alphas: [1]").unwrap();
    assert_eq!(deconf(&bad, &["tradeoff"]).status.code(), Some(2));

    let missing = dir.path().join("nope.jsonl");
    let o = deconf(&plan, &["--pool", missing.to_str().unwrap(), "train", "--alpha", "1", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.jsonl"));

    let garbage = dir.path().join("garbage.jsonl");
    std::fs::write(&garbage, "{not json\n").unwrap();
    let o = deconf(&plan, &["--pool", garbage.to_str().unwrap(), "report", "--alpha", "1", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(3));

    let o = deconf(&plan, &["regenerate", "df_sweep", "1,1,1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = deconf(&plan, &["regenerate", "no_such_family", "x"]);
    assert_eq!(o.status.code(), Some(2));
}
