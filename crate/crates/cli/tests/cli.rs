//! End-to-end tests driving the compiled `dbm` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dbm_core::analysis::AnalysisReport;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dbm"))
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dbm-cli-{}-{}", name, std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// A deliberately tiny experiment: 75 training points, 5 epochs.
fn config_text(label: &str, head: &str, intra_std: f64, loss: &str) -> String {
    format!(
        r#"
label = "{label}"

[data]
classes = 4
dim = 6
imbalance = 8.0
max_count = 40
test_per_class = 5
intra_std = {intra_std}
center_norm = 1.0
seed = 11

[model]
hidden = [12]
feature = 6
head = "{head}"

[train]
epochs = 5
batch_size = 16
warmup_epochs = 2

[loss]
{loss}
"#
    )
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process terminated by signal")
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// The `mean_loss` column of an epochs.csv, as written.
fn loss_column(csv: &str) -> Vec<String> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().to_string())
        .collect()
}

#[test]
fn gen_data_reruns_are_byte_identical() {
    let dir = fresh_dir("gen");
    let cfg = write_config(&dir, "exp.toml", &config_text("g", "cosine", 0.3, "base = \"ce\""));
    for out_name in ["a", "b"] {
        let out = bin()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.join(out_name))
            .output()
            .unwrap();
        ok(&out);
    }
    for file in ["train.dbm", "test.dbm", "gen.json"] {
        assert_eq!(
            read(&dir.join("a/g/data").join(file)),
            read(&dir.join("b/g/data").join(file)),
            "{file} differs between identical invocations"
        );
    }
    // Geometric profile 40 * 8^(-c/3) rounds to exact halvings here.
    let sidecar: serde_json::Value =
        serde_json::from_slice(&read(&dir.join("a/g/data/gen.json"))).unwrap();
    assert_eq!(sidecar["train_counts"], serde_json::json!([40, 20, 10, 5]));
    assert_eq!(sidecar["test_counts"], serde_json::json!([5, 5, 5, 5]));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn rejects_fractional_imbalance() {
    let dir = fresh_dir("badcfg");
    let text = config_text("bad", "cosine", 0.3, "base = \"ce\"").replace(
        "imbalance = 8.0",
        "imbalance = 0.5",
    );
    let cfg = write_config(&dir, "bad.toml", &text);
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_reruns_write_identical_artifacts() {
    let dir = fresh_dir("train");
    let cfg = write_config(&dir, "exp.toml", &config_text("t", "cosine", 0.3, "base = \"bs\""));
    for out_name in ["a", "b"] {
        let out = bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.join(out_name))
            .output()
            .unwrap();
        ok(&out);
    }
    for file in ["checkpoint.json", "epochs.csv", "final_metrics.json"] {
        assert_eq!(
            read(&dir.join("a/t/seed0").join(file)),
            read(&dir.join("b/t/seed0").join(file)),
            "{file} differs between identical invocations"
        );
    }
    // Manifests embed their own absolute paths; everything else matches.
    let mut manifests = ["a", "b"].map(|o| {
        serde_json::from_slice::<serde_json::Value>(&read(&dir.join(o).join("t/seed0/manifest.json")))
            .unwrap()
    });
    for m in &mut manifests {
        for key in ["checkpoint", "epochs_csv", "final_metrics"] {
            assert!(m[key].is_string());
            m.as_object_mut().unwrap().remove(key);
        }
    }
    assert_eq!(manifests[0], manifests[1]);

    // Pointing --data at a directory with no dataset is an I/O failure.
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("c"))
        .arg("--data")
        .arg(dir.join("no-such-data"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 3);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn zero_strength_margin_reduces_to_base() {
    let dir = fresh_dir("reduce");
    let plain = write_config(&dir, "plain.toml", &config_text("p", "cosine", 0.3, "base = \"bs\""));
    let margined = write_config(
        &dir,
        "margin.toml",
        &config_text(
            "m",
            "cosine",
            0.3,
            "base = \"bs\"\n\n[loss.margin]\nk = 0.0\nmode = \"hard-positives\"",
        ),
    );
    for cfg in [&plain, &margined] {
        let out = bin()
            .args(["train", "--config"])
            .arg(cfg)
            .arg("--out")
            .arg(dir.join("out"))
            .output()
            .unwrap();
        ok(&out);
    }
    // Same data seed, same train seed: a zero-total margin must leave the
    // entire optimization trajectory untouched, digit for digit.
    let p_csv = String::from_utf8(read(&dir.join("out/p/seed0/epochs.csv"))).unwrap();
    let m_csv = String::from_utf8(read(&dir.join("out/m/seed0/epochs.csv"))).unwrap();
    assert_eq!(loss_column(&p_csv), loss_column(&m_csv));
    assert_eq!(
        read(&dir.join("out/p/seed0/final_metrics.json")),
        read(&dir.join("out/m/seed0/final_metrics.json"))
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = fresh_dir("missing");
    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(dir.join("nope.json"))
        .arg("--dataset")
        .arg(dir.join("nope.dbm"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 3);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn eval_contract_on_a_noiseless_run() {
    let dir = fresh_dir("eval");
    // Zero intra-class noise: every sample sits on its class center, so a
    // converged model must score 1.0 on the training split.
    let cfg = write_config(
        &dir,
        "exp.toml",
        &config_text("clean", "cosine", 0.0, "base = \"ce\"")
            .replace("epochs = 5", "epochs = 12"),
    );
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    ok(&out);
    let data = dir.join("clean/data");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&dir)
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    ok(&out);
    let ckpt = dir.join("clean/seed0/checkpoint.json");

    for report_name in ["r1.json", "r2.json"] {
        let out = bin()
            .args(["eval", "--checkpoint"])
            .arg(&ckpt)
            .arg("--dataset")
            .arg(data.join("train.dbm"))
            .arg("--out")
            .arg(dir.join(report_name))
            .output()
            .unwrap();
        ok(&out);
    }
    assert_eq!(read(&dir.join("r1.json")), read(&dir.join("r2.json")));
    let report: serde_json::Value = serde_json::from_slice(&read(&dir.join("r1.json"))).unwrap();
    assert_eq!(report["overall"], serde_json::json!(1.0));

    // A dataset that is not there is an I/O failure, not a usage error.
    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .arg("--dataset")
        .arg(data.join("absent.dbm"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 3);

    // Inverted frequency thresholds are rejected before any file is read.
    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(dir.join("does-not-exist.json"))
        .arg("--dataset")
        .arg(data.join("train.dbm"))
        .args(["--many-min", "10", "--few-max", "50"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn analyze_reports_follow_the_head_kind() {
    let dir = fresh_dir("analyze");
    for (label, head) in [("lin", "linear"), ("cos", "cosine")] {
        let cfg = write_config(
            &dir,
            &format!("{label}.toml"),
            &config_text(label, head, 0.3, "base = \"ce\""),
        );
        let out = bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&dir)
            .output()
            .unwrap();
        ok(&out);
        // Analysis runs against the generated test split of the same data
        // recipe; regenerate it once per label.
        let out = bin()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&dir)
            .output()
            .unwrap();
        ok(&out);
        let out = bin()
            .args(["analyze", "--checkpoint"])
            .arg(dir.join(label).join("seed0/checkpoint.json"))
            .arg("--dataset")
            .arg(dir.join(label).join("data/test.dbm"))
            .arg("--counts-from")
            .arg(dir.join(label).join("data/train.dbm"))
            .arg("--out")
            .arg(dir.join(label).join("analysis"))
            .output()
            .unwrap();
        ok(&out);

        let report: AnalysisReport = serde_json::from_slice(&read(
            &dir.join(label).join("analysis/report.json"),
        ))
        .unwrap();
        assert_eq!(report.angular.is_some(), head == "cosine");
        assert!(report.separability.is_some());
        assert_eq!(report.per_class.len(), 4);
        let stdout = String::from_utf8_lossy(&out.stdout);
        if head == "linear" {
            assert!(stdout.contains("absent (linear head)"), "stdout: {stdout}");
        } else {
            assert!(stdout.contains("angular present"), "stdout: {stdout}");
        }
        // Header plus one row per class.
        let csv = String::from_utf8(read(&dir.join(label).join("analysis/report.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 5);

        if head != "cosine" {
            continue;
        }
        // Writing every sample twice must not move any per-class statistic.
        let test_split = dbm_core::data::load_dataset(&dir.join(label).join("data/test.dbm")).unwrap();
        let doubled = dbm_core::data::LabeledDataset::new(
            ndarray::concatenate(
                ndarray::Axis(0),
                &[test_split.features(), test_split.features()],
            )
            .unwrap(),
            [test_split.labels(), test_split.labels()].concat(),
            test_split.classes(),
            dbm_core::data::Provenance::InMemory,
        )
        .unwrap();
        let dup_path = dir.join(label).join("data/dup.dbm");
        dbm_core::data::save_dataset_binary(&doubled, &dup_path).unwrap();
        let out = bin()
            .args(["analyze", "--checkpoint"])
            .arg(dir.join(label).join("seed0/checkpoint.json"))
            .arg("--dataset")
            .arg(&dup_path)
            .arg("--counts-from")
            .arg(dir.join(label).join("data/train.dbm"))
            .arg("--out")
            .arg(dir.join(label).join("analysis-dup"))
            .output()
            .unwrap();
        ok(&out);
        let dup: AnalysisReport = serde_json::from_slice(&read(
            &dir.join(label).join("analysis-dup/report.json"),
        ))
        .unwrap();
        for (a, b) in report.per_class.iter().zip(&dup.per_class) {
            assert_eq!(a.accuracy, b.accuracy, "class {}", a.class);
            let angles = (a.mean_angle_deg.unwrap(), b.mean_angle_deg.unwrap());
            assert!((angles.0 - angles.1).abs() < 1e-9 * angles.0.abs().max(1.0));
            let seps = (a.separability.unwrap(), b.separability.unwrap());
            assert!((seps.0 - seps.1).abs() < 1e-9 * seps.0.abs().max(1.0));
        }
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gradcheck_cli_contract() {
    let args = ["gradcheck", "--cases", "25", "--model-cases", "8", "--seed", "7"];
    let first = bin().args(args).output().unwrap();
    ok(&first);
    let second = bin().args(args).output().unwrap();
    ok(&second);
    assert_eq!(first.stdout, second.stdout, "gradcheck output is seed-pinned");
    assert!(String::from_utf8_lossy(&first.stdout).contains("gradient check passed"));

    let bad = bin()
        .args(args)
        .args(["--perturb", "1e-3"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&bad), 4);
}

#[test]
fn sweep_writes_grid_and_aggregates() {
    let dir = fresh_dir("sweep");
    let text = format!(
        "{}\n[sweep]\nseeds = [0, 1]\n\n[[sweep.arm]]\nname = \"bs\"\n\n\
         [[sweep.arm]]\nname = \"dbm\"\nmargin_mode = \"hard-positives\"\nk = [0.0, 0.1]\n",
        config_text("grid", "cosine", 0.3, "base = \"bs\"")
    );
    let cfg = write_config(&dir, "sweep.toml", &text);
    let out = bin()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&dir)
        .args(["--threads", "2"])
        .output()
        .unwrap();
    ok(&out);

    let runs = String::from_utf8(read(&dir.join("grid/runs.csv"))).unwrap();
    let rows: Vec<Vec<&str>> = runs.lines().skip(1).map(|l| l.split(',').collect()).collect();
    // bs over 2 seeds plus dbm over 2 k-values and 2 seeds.
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[6] == "ok"));

    // The k = 0 arm must reproduce the plain runs exactly, seed by seed.
    for seed in ["0", "1"] {
        let plain = rows
            .iter()
            .find(|r| r[0] == "bs" && r[5] == seed)
            .unwrap();
        let zero = rows
            .iter()
            .find(|r| r[0] == "dbm" && r[3] == "0" && r[5] == seed)
            .unwrap();
        assert_eq!(plain[7], zero[7], "overall accuracy, seed {seed}");
        assert_eq!(plain[11], zero[11], "final loss, seed {seed}");
    }

    let aggregates = String::from_utf8(read(&dir.join("grid/aggregates.csv"))).unwrap();
    let agg_rows: Vec<Vec<&str>> = aggregates.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(agg_rows.len(), 3);
    assert!(agg_rows.iter().all(|r| r[4] == "2"), "each cell aggregates both seeds");
    std::fs::remove_dir_all(&dir).ok();
}
