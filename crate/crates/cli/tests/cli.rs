use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use vfedmh::data::{load_csv, synth_blobs_with, BlobConfig};
use vfedmh::metrics::{read_records_csv, Summary};

fn vfedmh(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vfedmh"))
        .args(args)
        .env("VFEDMH_OUTPUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const PARTIES: &str = r#"
[[party]]
architecture = "mlp3"
optimizer = "sgd"
learning_rate = 0.1

[[party]]
architecture = "cnn2"
optimizer = "momentum"
learning_rate = 0.02

[[party]]
architecture = "custom"
layers = ["dense:16", "relu", "dense:8", "dense:3"]
split = 3
optimizer = "adagrad"

[[party]]
optimizer = "adam"
learning_rate = 0.005
"#;

fn write_config(dir: &Path, name: &str, head: &str) -> String {
    let text = format!(
        "{head}\n[dataset]\nkind = \"synthetic\"\nsamples = 300\nclasses = 3\ndims = 16\nseed = 4\n\n\
         [training]\nepochs = 2\nbatch_size = 64\nembedding_dim = 8\nseed = 7\n\n\
         [secure]\ngroup = {{ test = {{ p = 23, g = 5 }} }}\ntest_mode = true\n{PARTIES}"
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_one_row_per_party_and_epoch() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    let out = dir.path().join("out");
    let o = vfedmh(&["run", "-c", &cfg], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read_records_csv(fs::File::open(out.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(records.len(), 4 * 2);
    let summary: Summary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.parties, 4);
    assert!(summary.ledger_report.consistent());
    // 240 training rows in batches of 64: 4 batches, 4 messages each.
    assert_eq!(summary.ledger_report.observed_per_passive, vec![32; 3]);
    assert!(stdout(&o).contains("ledger consistent"));
}

#[test]
fn rerun_gives_identical_summary() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(vfedmh(&["run", "-c", &cfg], &a).status.success());
    assert!(vfedmh(&["run", "-c", &cfg], &b).status.success());
    assert_eq!(fs::read(a.join("summary.json")).unwrap(), fs::read(b.join("summary.json")).unwrap());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn tcp_processes_match_in_memory_run() {
    let dir = TempDir::new().unwrap();
    let mem = write_config(dir.path(), "mem.toml", "");
    let tcp = write_config(dir.path(), "tcp.toml", "[transport]\nmode = \"tcp\"\naddress = \"127.0.0.1:0\"\ntimeout_secs = 60\n");
    let (a, b) = (dir.path().join("mem"), dir.path().join("tcp"));
    let o = vfedmh(&["run", "-c", &mem], &a);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = vfedmh(&["run", "-c", &tcp], &b);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(a.join("summary.json")).unwrap(), fs::read(b.join("summary.json")).unwrap());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert!(!b.join("party-1.json").exists());
}

#[test]
fn baselines_run_from_config() {
    let dir = TempDir::new().unwrap();
    for method in ["local", "aggvfl"] {
        let cfg = write_config(dir.path(), &format!("{method}.toml"), &format!("method = \"{method}\""));
        let out = dir.path().join(method);
        let o = vfedmh(&["run", "-c", &cfg], &out);
        assert!(o.status.success(), "{method}: {}", stderr(&o));
        let summary: Summary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary.method, method);
        assert_eq!(summary.final_test_acc.len(), 4);
        assert!(summary.ledger_report.consistent());
    }
}

#[test]
fn unknown_key_is_a_config_error_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "epocks = 3");
    let o = vfedmh(&["run", "-c", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epocks"), "{}", stderr(&o));

    let path = dir.path().join("bad_party.toml");
    let text = fs::read_to_string(dir.path().join("bad.toml")).unwrap().replace("epocks = 3", "").replacen(
        "optimizer = \"sgd\"",
        "optimiser = \"sgd\"",
        1,
    );
    fs::write(&path, text).unwrap();
    let o = vfedmh(&["run", "-c", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("optimiser"), "{}", stderr(&o));
}

#[test]
fn bad_values_and_missing_data_have_distinct_codes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "m.toml", "method = \"pyvertical\"");
    assert_eq!(vfedmh(&["run", "-c", &cfg], dir.path()).status.code(), Some(2));

    // Small groups need the test flag.
    let text = fs::read_to_string(&cfg).unwrap().replace("method = \"pyvertical\"", "").replace("test_mode = true", "");
    fs::write(&cfg, text).unwrap();
    let o = vfedmh(&["run", "-c", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let path = dir.path().join("csv.toml");
    fs::write(&path, format!("[dataset]\nkind = \"csv\"\npath = \"missing.csv\"\n{PARTIES}")).unwrap();
    let o = vfedmh(&["run", "-c", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn ledger_echoes_round_units() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    let out = dir.path().join("out");
    assert!(vfedmh(&["run", "-c", &cfg], &out).status.success());
    let summary = out.join("summary.json");
    let o = vfedmh(&["ledger", summary.to_str().unwrap()], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("1 x 4 x 2 = 8"), "{text}");
    assert!(text.contains("3 x 2 x 2 = 12"), "{text}");
    assert!(text.contains("observed 32"), "{text}");
}

#[test]
fn synth_is_seeded_and_reloads() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["--samples", "50", "--classes", "3", "--dims", "4", "--seed", "9"];
    for d in [&a, &b] {
        let mut all = vec!["synth", "-o", d.to_str().unwrap()];
        all.extend(args);
        assert!(vfedmh(&all, dir.path()).status.success());
    }
    assert_eq!(fs::read(a.join("train.csv")).unwrap(), fs::read(b.join("train.csv")).unwrap());
    let original = synth_blobs_with(&BlobConfig {
        samples: 50,
        classes: 3,
        dims: 4,
        spread: 0.5,
        separation: vfedmh::data::DEFAULT_SEPARATION,
        seed: 9,
    })
    .unwrap();
    let train = load_csv(&a.join("train.csv"), Some(3)).unwrap();
    let test = load_csv(&a.join("test.csv"), Some(3)).unwrap();
    assert_eq!(train, original.take(40));
    assert_eq!(test.labels, original.labels[40..]);
}

fn bound(dir: &Path, body: &str) -> Output {
    let path = dir.join("bound.toml");
    fs::write(&path, body).unwrap();
    vfedmh(&["bound-check", "-c", path.to_str().unwrap()], dir)
}

#[test]
fn bound_check_outcomes() {
    let dir = TempDir::new().unwrap();
    let quad = "epochs = 30\n[problem]\nkind = \"quadratic\"\ncurvature = [1.0, 4.0]\nstart = [3.0, -2.0]\n";
    let o = bound(dir.path(), quad);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("violations 0 of 31"), "{}", stdout(&o));

    // mu * eta = 1.5: the factor leaves (0, 1).
    let o = bound(dir.path(), &format!("eta = 1.5\n{quad}"));
    assert!(o.status.success());
    assert!(stdout(&o).contains("non-informative"));

    let softmax = "seeds = 3\nepochs = 10\n[problem]\nkind = \"softmax\"\nsamples = 120\nclasses = 3\ndims = 8\n\
                   spread = 0.5\nparties = 3\nembedding_dim = 6\n";
    let o = bound(dir.path(), softmax);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = bound(dir.path(), &format!("{softmax}decision_hidden = [4]\n"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("convex"), "{}", stderr(&o));
}
