//! End-to-end pipeline runs against the compiled binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gridplace")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn temp_root(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gridplace-cli-{name}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Minimal XML well-formedness check: every open tag closes in order.
fn assert_well_formed_xml(text: &str) {
    let mut stack: Vec<String> = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('<') {
        rest = &rest[start + 1..];
        let end = rest.find('>').expect("unclosed angle bracket");
        let tag = &rest[..end];
        rest = &rest[end + 1..];
        if tag.starts_with('?') || tag.starts_with('!') {
            continue;
        }
        if let Some(name) = tag.strip_prefix('/') {
            let open = stack.pop().unwrap_or_else(|| panic!("unmatched </{name}>"));
            assert_eq!(open, name, "mismatched close tag");
            continue;
        }
        if tag.ends_with('/') {
            continue;
        }
        let name: String = tag
            .split_whitespace()
            .next()
            .expect("tag name")
            .to_string();
        stack.push(name);
    }
    assert!(stack.is_empty(), "unclosed tags: {stack:?}");
}

fn svg_rects(text: &str) -> Vec<BTreeMap<String, f64>> {
    let mut rects = Vec::new();
    for chunk in text.split("<rect ").skip(1) {
        let tag = &chunk[..chunk.find("/>").unwrap_or(chunk.len())];
        let mut attrs = BTreeMap::new();
        for piece in tag.split_whitespace() {
            if let Some((key, value)) = piece.split_once('=') {
                let trimmed = value.trim_matches(|c| c == '"' || c == '/');
                if let Ok(v) = trimmed.parse::<f64>() {
                    attrs.insert(key.to_string(), v);
                }
            }
        }
        rects.push(attrs);
    }
    rects
}

#[test]
fn gen_then_parse_round_trips() {
    let dir = temp_root("roundtrip");
    let circ = dir.join("c.circ");
    run_ok(&[
        "gen",
        "--seed",
        "7",
        "--macros",
        "8",
        "--nets",
        "12",
        "--canvas",
        "64",
        "--util",
        "0.3",
        "--out",
        circ.to_str().unwrap(),
    ]);
    let reparsed = dir.join("c2.circ");
    run_ok(&[
        "parse",
        "--input",
        circ.to_str().unwrap(),
        "--out",
        reparsed.to_str().unwrap(),
    ]);
    assert_eq!(fs::read(&circ).unwrap(), fs::read(&reparsed).unwrap());
}

#[test]
fn gen_is_idempotent_given_seed() {
    let dir = temp_root("idempotent");
    let a = dir.join("a.circ");
    let b = dir.join("b.circ");
    for out in [&a, &b] {
        run_ok(&["gen", "--seed", "11", "--out", out.to_str().unwrap()]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn missing_artifact_exit_code() {
    let out = run(&["parse", "--input", "/nonexistent/file.circ"]);
    assert_eq!(out.status.code(), Some(3));
    let out = run(&[
        "place",
        "--checkpoint",
        "/nonexistent/ckpt",
        "--circuit",
        "/nonexistent/c.circ",
        "--vgae",
        "/nonexistent/v.ckpt",
        "--out",
        "/tmp/gridplace-nope",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn usage_error_exit_code() {
    let dir = temp_root("usage");
    let circ = dir.join("c.circ");
    run_ok(&["gen", "--seed", "1", "--out", circ.to_str().unwrap()]);
    // Utilization above the generator's limit is a usage error.
    let out = run(&["gen", "--util", "0.95", "--out", dir.join("x.circ").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    // Token source missing entirely.
    let out = run(&[
        "eval",
        "--checkpoint",
        circ.to_str().unwrap(),
        "--circuit",
        circ.to_str().unwrap(),
        "--out",
        dir.join("eval").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_collect_pretrain_place_render() {
    let dir = temp_root("pipeline");
    // Three tiny circuits.
    let mut circuit_args: Vec<String> = Vec::new();
    for seed in [1u64, 2, 3] {
        let path = dir.join(format!("c{seed}.circ"));
        run_ok(&[
            "gen",
            "--seed",
            &seed.to_string(),
            "--macros",
            "5",
            "--nets",
            "7",
            "--canvas",
            "32",
            "--util",
            "0.3",
            "--out",
            path.to_str().unwrap(),
        ]);
        circuit_args.push(path.to_str().unwrap().to_string());
    }

    // Collect a small dataset on a 16-cell grid.
    let dataset = dir.join("dataset");
    let mut args = vec![
        "collect",
        "--grid",
        "16",
        "--per-circuit",
        "6",
        "--seed",
        "5",
        "--vgae-epochs",
        "40",
        "--workers",
        "2",
        "--out",
        dataset.to_str().unwrap(),
        "--circuits",
    ];
    for c in &circuit_args {
        args.push(c);
    }
    run_ok(&args);
    assert!(dataset.join("manifest.json").exists());

    // Collect again into a second directory: byte-identical manifest.
    let dataset2 = dir.join("dataset2");
    let mut args2 = vec![
        "collect",
        "--grid",
        "16",
        "--per-circuit",
        "6",
        "--seed",
        "5",
        "--vgae-epochs",
        "40",
        "--workers",
        "1",
        "--out",
        dataset2.to_str().unwrap(),
        "--circuits",
    ];
    for c in &circuit_args {
        args2.push(c);
    }
    run_ok(&args2);
    assert_eq!(
        fs::read(dataset.join("manifest.json")).unwrap(),
        fs::read(dataset2.join("manifest.json")).unwrap()
    );

    // Pretrain a small policy briefly.
    let run_dir = dir.join("pretrain");
    run_ok(&[
        "pretrain",
        "--dataset",
        dataset.to_str().unwrap(),
        "--epochs",
        "2",
        "--batch-size",
        "6",
        "--seed",
        "0",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    let ckpt = run_dir.join("policy.ckpt");
    assert!(ckpt.exists());
    assert!(run_dir.join("config.json").exists());

    // Zero-shot place on a held-out circuit.
    let unseen = dir.join("unseen.circ");
    run_ok(&[
        "gen",
        "--seed",
        "9",
        "--macros",
        "5",
        "--nets",
        "7",
        "--canvas",
        "32",
        "--util",
        "0.3",
        "--out",
        unseen.to_str().unwrap(),
    ]);
    let place_dir = dir.join("place");
    run_ok(&[
        "place",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--circuit",
        unseen.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--budget",
        "1",
        "--seed",
        "0",
        "--out",
        place_dir.to_str().unwrap(),
    ]);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(place_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["overlap_ratio"].as_f64().unwrap(), 0.0);
    assert!(metrics["hpwl"].as_f64().unwrap() > 0.0);

    // The SVG is well-formed and every rect stays inside the canvas rect.
    let svg = fs::read_to_string(place_dir.join("layout.svg")).unwrap();
    assert_well_formed_xml(&svg);
    let rects = svg_rects(&svg);
    assert!(rects.len() >= 2, "canvas plus at least one macro");
    let canvas = &rects[0];
    let (cx0, cy0) = (canvas["x"], canvas["y"]);
    let (cx1, cy1) = (cx0 + canvas["width"], cy0 + canvas["height"]);
    for rect in &rects[1..] {
        if !rect.contains_key("x") {
            continue;
        }
        let eps = 1e-6;
        assert!(rect["x"] >= cx0 - eps && rect["x"] + rect["width"] <= cx1 + eps);
        assert!(rect["y"] >= cy0 - eps && rect["y"] + rect["height"] <= cy1 + eps);
    }

    // Render standalone from the placement artifact.
    let svg_path = dir.join("render.svg");
    run_ok(&[
        "render",
        "--circuit",
        unseen.to_str().unwrap(),
        "--placement",
        place_dir.join("placement.json").to_str().unwrap(),
        "--net-boxes",
        "--out",
        svg_path.to_str().unwrap(),
    ]);
    assert_well_formed_xml(&fs::read_to_string(&svg_path).unwrap());

    // Eval with a couple of seeds and parallel workers; deterministic
    // summary modulo the wall-time file.
    let eval_dir = dir.join("eval");
    run_ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--circuit",
        unseen.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--budget",
        "3",
        "--seeds",
        "2",
        "--workers",
        "2",
        "--temperature",
        "0.5",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    let eval_dir2 = dir.join("eval2");
    run_ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--circuit",
        unseen.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--budget",
        "3",
        "--seeds",
        "2",
        "--workers",
        "1",
        "--temperature",
        "0.5",
        "--out",
        eval_dir2.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(eval_dir.join("summary.json")).unwrap(),
        fs::read(eval_dir2.join("summary.json")).unwrap()
    );
}

#[test]
fn bookshelf_parse_and_out_root_env() {
    let dir = temp_root("bookshelf");
    fs::write(dir.join("x.nodes"), "m0 4 4\nm1 2 2\np0 0 0 terminal\n").unwrap();
    fs::write(
        dir.join("x.nets"),
        "NetDegree : 2\nm0 I : 0 0\nm1 O : 1 1\nNetDegree : 2\nm1 I : 0 0\np0 O : 0 0\n",
    )
    .unwrap();
    fs::write(dir.join("x.pl"), "p0 1.0 1.0 : N /FIXED\n").unwrap();

    let out = Command::new(bin())
        .env("GRIDPLACE_OUT", dir.to_str().unwrap())
        .args([
            "parse",
            "--nodes",
            dir.join("x.nodes").to_str().unwrap(),
            "--nets",
            dir.join("x.nets").to_str().unwrap(),
            "--pl",
            dir.join("x.pl").to_str().unwrap(),
            "--out",
            "sub/canonical.circ",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    // The relative --out landed under GRIDPLACE_OUT.
    assert!(dir.join("sub/canonical.circ").exists());
}

#[test]
fn config_file_supplies_defaults() {
    let dir = temp_root("config");
    fs::write(dir.join("run.json"), "{\"seed\": 21}").unwrap();
    let a = dir.join("a.circ");
    run_ok(&[
        "--config",
        dir.join("run.json").to_str().unwrap(),
        "gen",
        "--out",
        a.to_str().unwrap(),
    ]);
    let b = dir.join("b.circ");
    run_ok(&["gen", "--seed", "21", "--out", b.to_str().unwrap()]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    // Bad config file is a usage error.
    fs::write(dir.join("bad.json"), "{nope").unwrap();
    let out = run(&[
        "--config",
        dir.join("bad.json").to_str().unwrap(),
        "gen",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
