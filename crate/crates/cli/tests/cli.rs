// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevpretrain"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, n: usize) -> Output {
    bin(&["gen-data", "--out", p(dir), "--seed", "3", "--set", &format!("n_scenes={n}")])
}

#[test]
fn gen_data_writes_pairs_and_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gen(tmp.path(), 3);
    assert!(out.status.success(), "{}", stderr(&out));
    let names: BTreeSet<String> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".csv")).count(), 3);
    assert_eq!(names.iter().filter(|n| n.ends_with(".labels")).count(), 3);
    assert!(names.contains("manifest.json"));
    assert!(names.contains("config.resolved"));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["master_seed"], 3);
    let seeds: Vec<u64> = manifest["scene_seeds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(seeds.len(), 3);
    assert_eq!(seeds.iter().collect::<BTreeSet<_>>().len(), 3);
    assert_eq!(seeds, bevpretrain::scenegen::scene_seeds(3, 3));
}

#[test]
fn gen_data_reruns_are_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(gen(a.path(), 2).status.success());
    assert!(gen(b.path(), 2).status.success());
    for entry in fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let (x, y) = (fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
        assert!(x == y, "{name:?} differs");
    }
}

#[test]
fn gen_data_into_unwritable_place_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain");
    fs::write(&file, "x").unwrap();
    let out = bin(&["gen-data", "--out", p(&file.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
}

fn region_count(text: &str) -> usize {
    text.lines()
        .find_map(|l| l.strip_prefix("regions: "))
        .expect("regions line")
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn pool_reports_regions_and_tags() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(gen(tmp.path(), 1).status.success());
    let run = tmp.path().join("run");
    let out = bin(&["pool", "--input", p(&tmp.path().join("scene_000.csv")), "--out", p(&run)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let n = region_count(&text);
    assert_eq!(n, 5, "{text}");
    assert!(text.contains("ground_fraction: "));

    let tagged = fs::read_to_string(run.join("scene_000.tagged.csv")).unwrap();
    let mut lines = tagged.lines();
    assert!(lines.next().unwrap().contains("tag"));
    let tags: Vec<i64> = lines
        .map(|l| l.rsplit(',').next().unwrap().trim().parse().unwrap())
        .collect();
    assert!(tags.iter().all(|&t| t == -1 || (0..n as i64).contains(&t)));
    assert_eq!(tags.iter().filter(|&&t| t >= 0).collect::<BTreeSet<_>>().len(), n);
}

#[test]
fn pool_on_flat_ground_finds_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("flat.csv");
    let mut text = String::new();
    for i in 0..30 {
        for j in 0..30 {
            text.push_str(&format!("{},{},0\n", i as f64 * 0.5 - 7.5, j as f64 * 0.5 - 7.5));
        }
    }
    fs::write(&path, text).unwrap();
    let out = bin(&["pool", "--input", p(&path)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(region_count(&stdout(&out)), 0);
}

#[test]
fn pool_rejects_malformed_input() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.csv");
    fs::write(&path, "1,2,3\n4,five,6\n").unwrap();
    let out = bin(&["pool", "--input", p(&path)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn distill_without_checkpoint_names_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["distill", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--lidar-checkpoint"), "{}", stderr(&out));
}

#[test]
fn every_bad_key_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.conf");
    fs::write(&cfg, "# run\nscene.n_objectz = 4\ntrain.lr = fast\n").unwrap();
    let out = bin(&["probe", "--config", p(&cfg), "--set", "rad.tau=-1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for key in ["scene.n_objectz", "train.lr", "rad.tau"] {
        assert!(err.contains(key), "{key} missing from:\n{err}");
    }
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let s1 = tmp.path().join("s1");
    let s2 = tmp.path().join("s2");
    assert!(gen(&data, 4).status.success());
    let short = ["--set", "train.steps=3", "--set", "train.batch_scenes=2"];

    let mut args = vec!["pretrain", "--data", p(&data), "--out", p(&s1)];
    args.extend(short);
    let out = bin(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt = s1.join("lidar.ckpt.json");
    assert_eq!(fs::read_to_string(s1.join("metrics_prc.jsonl")).unwrap().lines().count(), 3);

    let mut args = vec!["distill", "--data", p(&data), "--lidar-checkpoint", p(&ckpt), "--out", p(&s2)];
    args.extend(short);
    let before = fs::read(&ckpt).unwrap();
    let out = bin(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("(unchanged)"));
    assert_eq!(fs::read(&ckpt).unwrap(), before);

    for ck in [Some(ckpt.clone()), Some(s2.join("camera.ckpt.json")), None] {
        let mut args = vec!["probe", "--data", p(&data)];
        if let Some(c) = &ck {
            args.extend(["--checkpoint", p(c)]);
        }
        let out = bin(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        let text = stdout(&out);
        let last = text.lines().last().unwrap();
        let acc: f64 = last.strip_prefix("accuracy=").expect("final accuracy line").parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn corrupt_checkpoint_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("bad.json");
    fs::write(&ck, "{ not json").unwrap();
    let out = bin(&["probe", "--checkpoint", p(&ck), "--set", "probe_scenes=4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_default_graphs() {
    let out = bin(&["gradcheck"]);
    assert!(out.status.success(), "{}\n{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("graphs=7"));
    assert!(text.lines().last().unwrap() == "gradcheck passed");
}
