use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tssl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tssl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const CONFIG: &str = r#"
name = "smoke"
output_dir = "runs"

[data]
cifar_dir = "corpus"
pretext_sources = 40
holdout_sources = 20

[pretext]
model = "vgg16-1/w16"
transform_set = "rot2"
batch_size = 16
epochs = 2
lr_drop_epochs = [1]
checkpoint_every = 1

[downstream]
epochs = 2
batch_size = 16
lr_drop_epochs = [1]
train_limit = 60
random_init_baseline = true
"#;

#[test]
fn sweep_is_idempotent_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let o = tssl(&["synth", "--out", "corpus", "--train-per-class", "8", "--test-per-class", "3"], dir);
    assert!(o.status.success(), "{o:?}");
    assert!(dir.join("corpus/data_batch_1.bin").exists());
    fs::write(dir.join("exp.toml"), CONFIG).unwrap();

    let o = tssl(&["--config", "exp.toml", "-q", "sweep"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("5 trained, 0 resumed, 0 already complete"), "{}", stdout(&o));
    let summaries: Vec<_> = walk(&dir.join("runs/downstream"), "summary.json");
    assert_eq!(summaries.len(), 4);

    let o = tssl(&["--config", "exp.toml", "-q", "sweep"], dir);
    assert!(o.status.success());
    assert!(stdout(&o).contains("0 trained, 0 resumed, 5 already complete"), "{}", stdout(&o));

    let o = tssl(&["--config", "exp.toml", "report"], dir);
    assert!(o.status.success());
    let md = stdout(&o);
    assert!(md.contains("| VGG16 - 1 (1/16) |"), "{md}");
    assert!(md.contains("Random-init backbone control"), "{md}");
    assert!(dir.join("runs/report/tables.md").exists());
    assert_eq!(walk(&dir.join("runs/report"), ".svg").len(), 2);

    let o = tssl(&["--config", "exp.toml", "generate", "--limit", "5"], dir);
    assert!(o.status.success());
    assert_eq!(walk(&dir.join("runs/datasets"), ".png").len(), 5);

    // Same output directory, different configuration.
    fs::write(dir.join("exp.toml"), CONFIG.replace("pretext_sources = 40", "pretext_sources = 30")).unwrap();
    let o = tssl(&["--config", "exp.toml", "-q", "sweep"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("configuration hash"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(tssl(&["sweep"], dir).status.code(), Some(2));
    fs::write(dir.join("bad.toml"), "workers = 0\n[data]\ncifar_dir = \"x\"\n").unwrap();
    assert_eq!(tssl(&["--config", "bad.toml", "sweep"], dir).status.code(), Some(2));
    fs::write(dir.join("missing.toml"), "[data]\ncifar_dir = \"nowhere\"\n").unwrap();
    assert_eq!(tssl(&["--config", "missing.toml", "-q", "sweep"], dir).status.code(), Some(3));
    fs::write(
        dir.join("diverge.toml"),
        "[data]\nsynthetic = { train_per_class = 4, test_per_class = 1 }\n\
         [pretext]\nmodel = \"vgg16-1/w16\"\ntransform_set = \"rot2\"\nbatch_size = 8\nepochs = 1\n\
         lr_drop_epochs = []\noptimizer = \"sgd\"\nbase_lr = 1e30\n",
    )
    .unwrap();
    let o = tssl(&["--config", "diverge.toml", "-q", "train-pretext"], dir);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let o = tssl(&["verify"], dir);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 7);
}

fn walk(dir: &Path, suffix: &str) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let Ok(entries) = fs::read_dir(dir) else { return out };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk(&p, suffix));
        } else if p.to_string_lossy().ends_with(suffix) {
            out.push(p);
        }
    }
    out
}
