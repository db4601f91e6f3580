#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn polypgen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polypgen"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("polypgen runs")
}

/// Runs `args` and returns its exit code, echoing stderr on failure.
pub fn code(dir: &Path, args: &[&str]) -> i32 {
    let out = polypgen(dir, args);
    if !out.status.success() {
        eprintln!("polypgen {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap_or(-1)
}

/// First image labelled normal in the manifest, relative to `dir`.
pub fn first_normal_image(dir: &Path) -> String {
    let text = fs::read_to_string(dir.join("data/manifest.jsonl")).unwrap();
    let line = text
        .lines()
        .find(|l| l.contains("\"normal\""))
        .expect("a normal sample");
    let start = line.find("\"image\":\"").unwrap() + 9;
    let rest = &line[start..];
    format!("data/{}", &rest[..rest.find('"').unwrap()])
}

/// synth-data, train, build-db, propose and generate --auto-mask on a
/// normal image. Returns the generated image path.
pub fn run_pipeline(dir: &Path, seed: u64, train_steps: usize) -> Result<PathBuf, String> {
    let seed = seed.to_string();
    let steps = train_steps.to_string();
    let stages: [Vec<&str>; 3] = [
        vec!["synth-data", "--seed", &seed, "--count", "64"],
        vec!["train", "--seed", &seed, "--steps", &steps],
        vec!["build-db", "--seed", &seed],
    ];
    for args in &stages {
        let c = code(dir, args);
        if c != 0 {
            return Err(format!("{} exited {c}", args[0]));
        }
    }
    let image = first_normal_image(dir);
    let c = code(dir, &["propose", "--seed", &seed, "--image", &image]);
    if c != 0 {
        return Err(format!("propose exited {c}"));
    }
    let out = dir.join("run/out/generated.pgm");
    let c = code(
        dir,
        &[
            "generate",
            "--seed",
            &seed,
            "--image",
            &image,
            "--auto-mask",
            "--out",
            "run/out/generated.pgm",
        ],
    );
    if c != 0 {
        return Err(format!("generate --auto-mask exited {c}"));
    }
    Ok(out)
}

/// Every file under `dir` by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
