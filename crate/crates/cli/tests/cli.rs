use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gradmine::eval::{evaluate_checkpoint, prepare_scenes, read_dataset, EvalConfig, SceneConfig};
use gradmine::net::{load_checkpoint, save_checkpoint, Network, NetworkSpec, ParamStore};
use gradmine::pipeline::PreprocConfig;
use gradmine::{Dims, Rng, Tensor4};

fn gradmine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradmine")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gradmine(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    gradmine(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Sorted `(relative name, bytes)` of every file below `dir`.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn read_gmt(path: &Path) -> (Vec<usize>, Vec<f64>) {
    let b = std::fs::read(path).unwrap();
    assert_eq!(&b[..4], b"GMTN");
    let dims = (0..4).map(|k| u32::from_le_bytes(b[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize).collect();
    let vals = b[20..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    (dims, vals)
}

fn write_gmt(path: &Path, t: &Tensor4<f64>) {
    let d = t.dims();
    let mut b = b"GMTN".to_vec();
    for v in [d.n, d.w, d.h, d.c] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in t.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, b).unwrap();
}

#[test]
fn gen_toy_is_deterministic_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["gen-toy", "--seed", "7", "--count", "12", "--out", s(&a)]);
    ok(&["gen-toy", "--seed", "7", "--count", "12", "--out", s(&b)]);
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(code(&["gen-toy", "--seed", "7", "--count", "3", "--out", s(&a)]), 1);
    assert_eq!(tree(&a), tree(&b));
    ok(&["gen-toy", "--seed", "7", "--count", "3", "--out", s(&a), "--force"]);
    assert_eq!(tree(&a).len(), 3 * 2 + 1);

    let empty = dir.path().join("empty");
    ok(&["gen-toy", "--count", "0", "--out", s(&empty)]);
    assert_eq!(std::fs::read_to_string(empty.join("manifest.csv")).unwrap(), "index,file,label,bright,dark,vessels\n");
}

#[test]
fn manifest_labels_match_region_lists() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-toy", "--seed", "11", "--count", "40", "--out", s(dir.path())]);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    let mut positives = 0;
    for row in manifest.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        let sidecar = std::fs::read_to_string(dir.path().join(f[1].replace(".ppm", ".regions.txt"))).unwrap();
        let count = |tag: &str| sidecar.lines().filter(|l| l.split_whitespace().next() == Some(tag)).count();
        let (bright, dark) = (count("bright"), count("dark"));
        let label = u8::from(dark >= 1 || bright >= 2);
        assert_eq!(f[2], label.to_string(), "{row}");
        assert_eq!((f[3], f[4]), (bright.to_string().as_str(), dark.to_string().as_str()));
        positives += label as usize;
    }
    assert!(positives > 0 && positives < 40);
}

#[test]
fn unknown_keys_and_bad_env_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 3\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(code(&["--config", s(&cfg), "gen-toy", "--out", s(&dir.path().join("x"))]), 1);
    assert_eq!(code(&["--set", "nu", "gradcheck"]), 1);
    let out = Command::new(env!("CARGO_BIN_EXE_gradmine"))
        .args(["gradcheck", "--ops", "meanpool"])
        .env("GRADMINE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(code(&["train", "--data", s(&dir.path().join("missing")), "--out", s(&dir.path().join("r"))]), 3);
}

#[test]
fn flags_override_config_file_and_config_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 3\nscene.count = 5\n").unwrap();
    let a = dir.path().join("a");
    let out = gradmine(&["--config", s(&cfg), "gen-toy", "--seed", "4", "--out", s(&a)]);
    assert!(out.status.success());
    let log = String::from_utf8(out.stderr).unwrap();
    assert!(log.contains("seed = 4\n") && log.contains("scene.count = 5\n"), "{log}");
    let b = dir.path().join("b");
    ok(&["gen-toy", "--seed", "4", "--count", "5", "--out", s(&b)]);
    assert_eq!(tree(&a), tree(&b));
}

fn small_dataset(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let val = dir.join("val");
    ok(&["gen-toy", "--seed", "21", "--count", "48", "--out", s(&data)]);
    ok(&["gen-toy", "--seed", "22", "--count", "24", "--out", s(&val)]);
    (data, val)
}

const SHORT: [&str; 6] = ["--set", "eval_every=10", "--set", "checkpoint_every=20", "--set", "batch=8"];

fn train(data: &Path, val: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--val", s(val), "--out", s(out)];
    args.extend(SHORT);
    args.extend(extra);
    ok(&args);
}

#[test]
fn two_pass_control_matches_nu_zero_and_resume_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (data, val) = small_dataset(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    train(&data, &val, &a, &["--nu", "0", "--iterations", "40"]);
    train(&data, &val, &b, &["--nu", "0", "--iterations", "40", "--two-pass"]);
    assert_eq!(tree(&a), tree(&b));
    let log = std::fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    let full = dir.path().join("full");
    let part = dir.path().join("part");
    train(&data, &val, &full, &["--nu", "1e-3", "--iterations", "60"]);
    train(&data, &val, &part, &["--nu", "1e-3", "--iterations", "40"]);
    // without --resume an existing run is refused
    let mut args = vec!["train", "--data", s(&data), "--out", s(&part)];
    args.extend(SHORT);
    assert_eq!(code(&args), 1);
    train(&data, &val, &part, &["--nu", "1e-3", "--iterations", "60", "--resume"]);
    let strip_config = |t: Vec<(String, Vec<u8>)>| t.into_iter().filter(|(n, _)| n != "config.txt").collect::<Vec<_>>();
    assert_eq!(strip_config(tree(&full)), strip_config(tree(&part)));
}

#[test]
fn mismatched_network_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let (data, val) = small_dataset(dir.path());
    let out = dir.path().join("r");
    let r = gradmine(&["train", "--data", s(&data), "--val", s(&val), "--out", s(&out), "--set", "preproc.crop=48"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("does not match"));
    assert!(!out.exists());
}

#[test]
fn heatmaps_blend_and_linear_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (data, val) = small_dataset(dir.path());
    let run = dir.path().join("run");
    train(&data, &val, &run, &["--nu", "1e-3", "--iterations", "40"]);
    let c1 = run.join("ckpt_0000020.gmck");
    let c2 = run.join("ckpt_0000040.gmck");
    let img = data.join("scene_00003.ppm");
    let m1 = dir.path().join("m1");
    let m2 = dir.path().join("m2");
    let single = dir.path().join("single");
    let blended = dir.path().join("blended");
    ok(&["heatmap", "--checkpoint", s(&c1), "--out", s(&m1), s(&img)]);
    ok(&["heatmap", "--checkpoint", s(&c2), "--out", s(&m2), s(&img)]);
    ok(&["heatmap", "--checkpoint", s(&c1), "--blend", "1.0", "--out", s(&single), s(&img)]);
    assert_eq!(tree(&m1), tree(&single));
    ok(&["heatmap", "--checkpoint", s(&c1), "--checkpoint", s(&c2), "--blend", "0.3,0.7", "--out", s(&blended), s(&img)]);
    let (_, v1) = read_gmt(&m1.join("scene_00003.gmt"));
    let (_, v2) = read_gmt(&m2.join("scene_00003.gmt"));
    let (dims, vb) = read_gmt(&blended.join("scene_00003.gmt"));
    assert_eq!(dims, vec![1, 64, 64, 1]);
    for ((a, b), c) in v1.iter().zip(&v2).zip(&vb) {
        assert!((0.3 * a + 0.7 * b - c).abs() <= 1e-12 * c.abs().max(1.0));
    }
    assert_eq!(code(&["heatmap", "--checkpoint", s(&c1), "--blend", "0.5,0.5", "--out", s(&blended), s(&img)]), 1);

    // linear model: π = |Σ_c w_c X_c|
    let spec_path = dir.path().join("linear.net");
    let spec_text = "input = 64x64x3\nprecision = f64\nheatmap = hue\ndense units=1\n";
    std::fs::write(&spec_path, spec_text).unwrap();
    let net = Network::build(&spec_text.parse::<NetworkSpec>().unwrap()).unwrap();
    let w = [0.6, -1.3, 0.2];
    let mut store = ParamStore::<f64>::zeros(&net);
    let p = store.layer_mut(0).unwrap();
    for x in 0..64 {
        for y in 0..64 {
            for (c, &wc) in w.iter().enumerate() {
                p.weights.set(x, y, c, 0, wc);
            }
        }
    }
    let ckpt = dir.path().join("linear.gmck");
    save_checkpoint(&store, &ckpt).unwrap();
    let mut rng = Rng::new(5);
    let input = Tensor4::from_fn(Dims::new(1, 64, 64, 3), |_, _, _, _| rng.uniform(-1.0, 1.0));
    let input_path = dir.path().join("probe.gmt");
    write_gmt(&input_path, &input);
    let lin = dir.path().join("lin");
    ok(&["--set", &format!("net={}", s(&spec_path)), "heatmap", "--criterion", "hue", "--checkpoint", s(&ckpt), "--out", s(&lin), s(&input_path)]);
    let (_, pi) = read_gmt(&lin.join("probe.gmt"));
    for x in 0..64 {
        for y in 0..64 {
            let want = (0..3).map(|c| w[c] * input.at(0, x, y, c)).sum::<f64>().abs();
            assert!((pi[x * 64 + y] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn eval_csv_is_sorted_and_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (data, val) = small_dataset(dir.path());
    let run = dir.path().join("run");
    train(&data, &val, &run, &["--nu", "1e-4", "--iterations", "40"]);
    let c1 = run.join("ckpt_0000020.gmck");
    let c2 = run.join("ckpt_0000040.gmck");
    let a = ok(&["eval", "--data", s(&val), s(&c1), s(&c2)]);
    let b = ok(&["eval", "--data", s(&val), s(&c2), s(&c1)]);
    assert_eq!(a, b);
    assert_eq!(code(&["eval", "--data", s(&val)]), 1);

    let rows: Vec<Vec<&str>> = a.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    let scenes = read_dataset(&val, &SceneConfig::default()).unwrap();
    let inputs = prepare_scenes(&scenes, &PreprocConfig::toy()).unwrap().inputs;
    let mut spec = gradmine::net::presets::toy(0.33);
    spec.precision = gradmine::net::Precision::F64;
    let net = Network::build(&spec).unwrap();
    for (row, c) in rows.iter().zip([&c1, &c2]) {
        let store: ParamStore<f64> = load_checkpoint(c).unwrap();
        let e = evaluate_checkpoint(&net, &store, &inputs, &scenes, &EvalConfig::default()).unwrap();
        assert_eq!(row[0], store.step().to_string());
        assert_eq!(row[1], "0.0001");
        let want = [e.az_image, e.froc_bright, e.froc_dark, e.l1_heatmap];
        for (got, want) in row[2..6].iter().zip(want) {
            assert_eq!(got.parse::<f64>().unwrap().to_bits(), want.to_bits(), "{row:?}");
        }
    }
}

#[test]
fn gradcheck_filters_and_catches_mutant() {
    let out = ok(&["gradcheck", "--ops", "meanpool"]);
    let ops: Vec<&str> = out.lines().filter(|l| (l.starts_with("PASS") || l.starts_with("FAIL")) && l.contains("worst")).collect();
    assert!(!ops.is_empty() && ops.iter().all(|l| l.split_whitespace().nth(1) == Some("meanpool")), "{out}");
    assert!(out.lines().any(|l| l.trim_start().starts_with("PASS  meanpool")));

    let r = gradmine(&["gradcheck", "--mutant", "inverted-slope"]);
    assert_eq!(r.status.code(), Some(2));
    let text = String::from_utf8(r.stdout).unwrap();
    assert!(text.lines().any(|l| l.trim_start().starts_with("FAIL  leaky")), "{text}");
    assert_eq!(code(&["gradcheck", "--ops", "softmax"]), 1);
}
