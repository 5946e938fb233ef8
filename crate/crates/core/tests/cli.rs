use std::fs;
use std::path::{Path, PathBuf};

use dualdiff::cli::{run, RUN_MANIFEST};

const TINY: &str = "seed = 1
[data]
episodes = 6
[perception]
lr_side = 8
patch = 2
d = 8
heads = 2
conv_widths = [4, 4, 4]
inject_blocks = 1
[head]
horizon = 4
blocks = 1
d = 8
heads = 2
[teacher]
steps = 6
batch = 4
[student]
steps = 4
batch = 4
grid_steps = 6
[eval]
rollouts = 2
seeds = 1
steps = 2
replan = 2
latency_calls = 3
warmup = 1
";

fn dd(args: &[&str]) -> i32 {
    let mut v = vec!["dualdiff"];
    v.extend_from_slice(args);
    run(v)
}

fn manifest(dir: &Path) -> toml::Table {
    fs::read_to_string(dir.join(RUN_MANIFEST)).unwrap().parse().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (root, cfg)
}

#[test]
fn gen_data_writes_a_reproducible_dataset() {
    let (root, cfg) = setup();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(dd(&["gen-data", "-c", s(&cfg), "-o", s(out)]), 0);
    }
    let m = manifest(&a);
    assert_eq!(m["command"].as_str(), Some("gen-data"));
    let arts = m["artifacts"].as_array().unwrap();
    assert_eq!(arts.len(), 7);
    for art in arts {
        let rel = art["path"].as_str().unwrap();
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
    assert_eq!(fs::read(a.join(RUN_MANIFEST)).unwrap(), fs::read(b.join(RUN_MANIFEST)).unwrap());
    let data: toml::Table = fs::read_to_string(a.join("data/manifest.toml")).unwrap().parse().unwrap();
    assert_eq!(data["episode_count"].as_integer(), Some(6));
}

#[test]
fn default_dataset_has_one_hundred_demonstrations() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("d");
    assert_eq!(dd(&["gen-data", "--preset", "compact", "-o", s(&out)]), 0);
    let data: toml::Table = fs::read_to_string(out.join("data/manifest.toml")).unwrap().parse().unwrap();
    assert_eq!(data["episode_count"].as_integer(), Some(100));
}

#[test]
fn overrides_are_echoed_in_the_manifest() {
    let (root, cfg) = setup();
    let out = root.path().join("o");
    assert_eq!(dd(&["gen-data", "-c", s(&cfg), "--seed", "9", "--set", "data.episodes=3", "-o", s(&out)]), 0);
    let m = manifest(&out);
    let resolved: toml::Table = m["config"].as_str().unwrap().parse().unwrap();
    assert_eq!(resolved["seed"].as_integer(), Some(9));
    assert_eq!(resolved["data"]["episodes"].as_integer(), Some(3));
    // Values the file sets and nothing overrides survive.
    assert_eq!(resolved["perception"]["lr_side"].as_integer(), Some(8));
}

#[test]
fn config_errors_exit_two_and_runtime_errors_exit_one() {
    let (root, cfg) = setup();
    let out = root.path().join("x");
    assert_eq!(dd(&["gen-data", "-c", s(&cfg), "--set", "teacher.stepz=1", "-o", s(&out)]), 2);
    assert_eq!(dd(&["gen-data", "-c", s(&root.path().join("missing.toml"))]), 2);
    assert_eq!(dd(&["gen-data", "--set", "head.d=12"]), 2);
    assert_eq!(dd(&["eval", "--checkpoint", s(&root.path().join("none.ckpt")), "-o", s(&out)]), 1);
    assert_eq!(dd(&["train-teacher", "--preset", "huge"]), 2);
    assert_eq!(dd(&["gen-data", "-c", s(&cfg), "--preset", "compact"]), 2);
}

#[test]
fn full_workflow_through_the_cli() {
    let (root, cfg) = setup();
    let p = |n: &str| root.path().join(n);
    assert_eq!(dd(&["train-teacher", "-c", s(&cfg), "-o", s(&p("t"))]), 0);
    let teacher = p("t/teacher.ckpt");
    let log = fs::read_to_string(p("t/teacher_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 6);
    assert!(log.starts_with("step,dsm,ctm,total,lr,grad_norm,wall_ms"));

    assert_eq!(dd(&["distill", "--teacher", s(&teacher), "--data", s(&p("t/data")), "-o", s(&p("s"))]), 0);
    let student = p("s/student.ckpt");
    assert!(student.exists());

    // The checkpoint's configuration is the base; architecture overrides are refused.
    assert_eq!(dd(&["eval", "--checkpoint", s(&teacher), "--set", "head.blocks=2", "-o", s(&p("e0"))]), 2);
    assert_eq!(dd(&["eval", "--checkpoint", s(&teacher), "--baselines", "-o", s(&p("e1"))]), 0);
    let m = manifest(&p("e1"));
    let hash = m["config_hash"].as_str().unwrap();
    assert!(p(&format!("e1/eval-{hash}.csv")).exists());
    assert!(p(&format!("e1/eval-{hash}.md")).exists());
    // One-step sampling needs the student.
    assert_eq!(dd(&["eval", "--checkpoint", s(&teacher), "--set", "eval.sampler=ctm", "-o", s(&p("e2"))]), 1);
    assert_eq!(dd(&["eval", "--checkpoint", s(&student), "--set", "eval.sampler=ctm", "-o", s(&p("e3"))]), 0);
    // Zero-shot evaluation checks the training manifest.
    assert_eq!(dd(&["eval", "--checkpoint", s(&teacher), "--shift", "color", "-o", s(&p("e4"))]), 2);
    assert_eq!(
        dd(&["eval", "--checkpoint", s(&teacher), "--clean-only", "--data", s(&p("t/data")), "-o", s(&p("e5"))]),
        1,
        "the tiny dataset mixes distraction levels"
    );

    assert_eq!(dd(&["bench", "--teacher", s(&teacher), "--student", s(&student), "-o", s(&p("b"))]), 0);
    let m = manifest(&p("b"));
    let csv = m["artifacts"][0]["path"].as_str().unwrap().to_string();
    let rows = csv::Reader::from_path(p("b").join(csv)).unwrap().records().count();
    assert_eq!(rows, 6);

    assert_eq!(dd(&["ablate", "-c", s(&cfg), "--row", "mask", "--data", s(&p("t/data")), "-o", s(&p("a"))]), 0);
    assert!(p("a/ablation-0.ckpt").exists());
    assert_eq!(dd(&["ablate", "-c", s(&cfg), "--row", "nothing", "-o", s(&p("a2"))]), 2);
}

#[test]
fn output_root_comes_from_the_environment() {
    let (root, cfg) = setup();
    std::env::set_var(dualdiff::cli::OUT_ENV, root.path().join("runs"));
    assert_eq!(dd(&["gen-data", "-c", s(&cfg), "--set", "data.episodes=2"]), 0);
    let dirs: Vec<_> = fs::read_dir(root.path().join("runs")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].to_str().unwrap().starts_with("gen-data-"));
}

#[test]
fn grad_check_passes() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("g");
    assert_eq!(dd(&["grad-check", "-o", s(&out)]), 0);
    let csv = fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 18);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")));
}
