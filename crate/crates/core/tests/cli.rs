use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stzero::data::{Checkpoint, Dataset};
use stzero::train::{build_graphs, predict_columns, SplitSelection};

const SMALL: [&str; 16] = [
    "--n-slides",
    "2",
    "--windows-per-slide",
    "30",
    "--n-genes",
    "6",
    "--n-seen",
    "4",
    "--d-e",
    "5",
    "--d-t",
    "3",
    "--l",
    "4",
    "--d-latent",
    "2",
];
const TINY: [&str; 14] = [
    "--hidden",
    "8",
    "--proj-dim",
    "4",
    "--emb-dim",
    "8",
    "--emb-blocks",
    "1",
    "--sage-layers",
    "2",
    "--epochs",
    "2",
    "--quiet",
    "--genes-per-step=3",
];

fn stzero(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stzero"));
    cmd.args(args).env_remove("STZERO_SEED");
    if let Some(s) = seed_env {
        cmd.env("STZERO_SEED", s);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = stzero(args, None);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup(dir: &Path) -> (String, String) {
    let data = dir.join("ds").display().to_string();
    let ckpt = dir.join("m.ckpt").display().to_string();
    let mut args = vec!["synth", "--out", &data];
    args.extend(SMALL);
    ok(&args);
    let mut args = vec!["train", "--data", &data, "--out", &ckpt];
    args.extend(TINY);
    ok(&args);
    (data, ckpt)
}

#[test]
fn grad_check_default_passes() {
    let out = ok(&["grad-check"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["micro"]["n_windows"], 6);
}

#[test]
fn synth_twice_gives_identical_directories_and_env_seed_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n).display().to_string();
    for name in ["a", "b"] {
        let mut args = vec!["synth", "--out"];
        let path = p(name);
        args.push(&path);
        args.extend(SMALL);
        ok(&args);
    }
    let a = Dataset::load(Path::new(&p("a"))).unwrap();
    assert_eq!(a, Dataset::load(Path::new(&p("b"))).unwrap());

    let path = p("c");
    let mut args = vec!["synth", "--out", &path, "--seed", "7"];
    args.extend(SMALL);
    assert!(stzero(&args, Some("99")).status.success());
    let path_d = p("d");
    let mut args = vec!["synth", "--out", &path_d, "--seed", "99"];
    args.extend(SMALL);
    ok(&args);
    assert_eq!(
        Dataset::load(Path::new(&path)).unwrap(),
        Dataset::load(Path::new(&path_d)).unwrap()
    );
    assert_ne!(a, Dataset::load(Path::new(&path)).unwrap());

    assert!(
        !stzero(&["synth", "--out", &p("e"), "--n-seen", "50"], None)
            .status
            .success()
    );
    assert!(!stzero(&["grad-check"], Some("abc")).status.success());
}

#[test]
fn graph_stats_degree_sums() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, _) = setup(tmp.path());
    let out = ok(&[
        "graph-stats",
        "--data",
        &data,
        "--k-pos",
        "3",
        "--k-fea",
        "4",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for slide in ["slide00", "slide01"] {
        let s = v[slide].as_object().unwrap();
        let degree_sum = |prefix: &str| -> u64 {
            s.iter()
                .filter_map(|(k, c)| {
                    k.strip_prefix(prefix)
                        .map(|d| d.parse::<u64>().unwrap() * c.as_u64().unwrap())
                })
                .sum()
        };
        assert_eq!(degree_sum("pos_in_degree."), 30 * 3);
        assert_eq!(degree_sum("fea_in_degree."), 30 * 4);
        assert_eq!(s["pos_edges"], 90);
    }
}

#[test]
fn eval_predict_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = setup(tmp.path());
    let report = tmp.path().join("r.json").display().to_string();
    let out = ok(&[
        "eval", "--data", &data, "--ckpt", &ckpt, "--split", "unseen", "--report", &report,
    ]);
    assert!(out.stdout.is_empty());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    for key in ["mse", "mae", "pcc_f", "pcc_s", "pcc_m", "degenerate_genes"] {
        assert!(keys.contains(&key));
    }

    // Unseen gene, compared with the evaluation path's batched predictions.
    let csv = ok(&[
        "predict", "--data", &data, "--ckpt", &ckpt, "--slide", "slide01", "--gene", "gene005",
    ])
    .stdout;
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("window_index,x,y,predicted"));
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect();
    assert_eq!(rows.len(), 30);

    let ds = Dataset::load(Path::new(&data)).unwrap();
    let c = Checkpoint::load(Path::new(&ckpt)).unwrap();
    let model = c.model().unwrap();
    let graphs = build_graphs(&ds, c.config.graph()).unwrap();
    let cols = SplitSelection::All.columns(&ds);
    let preds = predict_columns(&model, &ds, &graphs, &cols).unwrap();
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], i.to_string());
        let v: f64 = row[3].parse().unwrap();
        assert_eq!(v.to_bits(), preds[1].get(i, 5).to_bits());
    }

    let bad = stzero(
        &[
            "predict", "--data", &data, "--ckpt", &ckpt, "--slide", "slide01", "--gene", "nope",
        ],
        None,
    );
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("nope"));

    let out = ok(&[
        "eval",
        "--data",
        &data,
        "--ckpt",
        &ckpt,
        "--k-fea-sweep",
        "1,3,5",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let ks: Vec<u64> = v["series"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["k_fea"].as_u64().unwrap())
        .collect();
    assert_eq!(ks, vec![1, 3, 5]);
}

#[test]
fn train_is_deterministic_and_eval_has_no_side_effects() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = setup(tmp.path());
    let again = tmp.path().join("again.ckpt").display().to_string();
    let log = tmp.path().join("log.jsonl").display().to_string();
    let mut args = vec!["train", "--data", &data, "--out", &again, "--log", &log];
    args.extend(TINY);
    ok(&args);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 2);

    let before = fs::read(&ckpt).unwrap();
    let meta_before = fs::read(Path::new(&data).join("meta.json")).unwrap();
    let r1 = ok(&["eval", "--data", &data, "--ckpt", &ckpt, "--split", "all"]).stdout;
    let r2 = ok(&["eval", "--data", &data, "--ckpt", &ckpt, "--split", "all"]).stdout;
    assert_eq!(r1, r2);
    assert_eq!(before, fs::read(&ckpt).unwrap());
    assert_eq!(
        meta_before,
        fs::read(Path::new(&data).join("meta.json")).unwrap()
    );

    // Resume to 4 epochs from the 2-epoch checkpoint.
    let resumed = tmp.path().join("r.ckpt").display().to_string();
    ok(&[
        "train", "--data", &data, "--out", &resumed, "--resume", &ckpt, "--epochs", "4", "--quiet",
    ]);
    assert_eq!(
        Checkpoint::load(Path::new(&resumed)).unwrap().epochs_done,
        4
    );
}

#[test]
fn env_seed_overrides_train_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, _) = setup(tmp.path());
    let a = tmp.path().join("a.ckpt").display().to_string();
    let b = tmp.path().join("b.ckpt").display().to_string();
    let mut args = vec!["train", "--data", &data, "--out", &a, "--seed", "1"];
    args.extend(TINY);
    assert!(stzero(&args, Some("42")).status.success());
    let mut args = vec!["train", "--data", &data, "--out", &b, "--seed", "42"];
    args.extend(TINY);
    ok(&args);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(Checkpoint::load(Path::new(&a)).unwrap().seed, 42);
}

#[test]
fn failures_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none").display().to_string();
    assert!(
        !stzero(&["eval", "--data", &missing, "--ckpt", &missing], None)
            .status
            .success()
    );
    let (data, ckpt) = setup(tmp.path());
    assert!(!stzero(
        &["eval", "--data", &data, "--ckpt", &ckpt, "--split", "both"],
        None
    )
    .status
    .success());
    let mut args = vec!["train", "--data", &data, "--out", &ckpt, "--heads", "3"];
    args.extend(TINY);
    assert!(!stzero(&args, None).status.success());
}
