//! Runs every subcommand twice in separate directories and compares the output trees.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const CONFIG: &str = r#"
[data]
root = "data"
scenes = 3
templates = "templates"

[data.synthetic]
objects = [2, 3]
ground_points = 60

[model]
grid_size = 2
transformer_layers = 1

[train]
iterations = 3
rois = 4

[train.augment]
enabled = true
"#;

const COMMANDS: [(&str, &str); 6] = [
    ("gen-synthetic", "data"),
    ("densify", "templates"),
    ("train", "run"),
    ("infer", "run"),
    ("eval", "run"),
    ("plot-pr", "run"),
];

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Runs the whole command sequence in `dir`; returns each command's stdout.
fn pipeline(dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let mut stdouts = Vec::new();
    for (cmd, out) in COMMANDS {
        let o = Command::new(env!("CARGO_BIN_EXE_pointforge"))
            .arg(cmd)
            .arg("--config")
            .arg(&cfg)
            .args(["--seed", "11", "--out"])
            .arg(dir.join(out))
            .env("POINTFORGE_THREADS", "2")
            .output()
            .unwrap();
        if !o.status.success() {
            return Err(format!("{cmd} failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        stdouts.push(o.stdout);
    }
    Ok(stdouts)
}

pub fn run() -> Vec<(String, bool)> {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ra, rb) = match (pipeline(a.path()), pipeline(b.path())) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return vec![(e, false)],
    };
    let (fa, fb) = (files(a.path()), files(b.path()));
    let mut checks = Vec::new();
    for (cmd, out) in COMMANDS {
        let prefix = Path::new(out);
        let produced = fa.keys().filter(|k| k.starts_with(prefix)).count();
        checks.push((format!("{cmd} wrote files under {out}/ ({produced})"), produced > 0));
    }
    checks.push((
        format!("same file set ({} files)", fa.len()),
        fa.keys().eq(fb.keys()),
    ));
    let differing: Vec<String> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    checks.push((
        format!("byte-identical outputs, differing: [{}]", differing.join(", ")),
        differing.is_empty(),
    ));
    for ((cmd, _), (x, y)) in COMMANDS.iter().zip(ra.iter().zip(&rb)) {
        checks.push((format!("{cmd} stdout identical"), x == y));
    }
    let ran_train = fa.contains_key(Path::new("run/model.ckpt")) && fa.contains_key(Path::new("run/losses.csv"));
    checks.push(("train wrote checkpoint and loss log".into(), ran_train));
    checks
}
