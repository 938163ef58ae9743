use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use andnet_core::dataset::{write_idx_images, write_idx_labels};
use andnet_core::{Checkpoint, InputFilter, Matrix, NetworkParams, RngStream};

const SMALL_NET: &str = "[train]\nlayer_sizes = 784,16,12,10\nepochs = 2\nbatch_size = 20\nlr = 0.5\nseed = 5\n";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Synthetic MNIST-format data: every class lights its own block of pixels.
    fn new(n_train: usize, n_test: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        fs::create_dir(&data).unwrap();
        let mut rng = RngStream::new(77);
        for (prefix, n) in [("train", n_train), ("t10k", n_test)] {
            let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
            let mut px = vec![0.0; n * 784];
            for (i, &l) in labels.iter().enumerate() {
                for j in 0..784 {
                    let on = j / 78 == l && rng.uniform(0.0, 1.0) < 0.7;
                    px[i * 784 + j] = if on { rng.uniform(0.5, 1.0) } else { rng.uniform(0.0, 0.1) };
                }
            }
            let images = Matrix::from_vec(n, 784, px).unwrap();
            write_idx_images(data.join(format!("{prefix}-images-idx3-ubyte")), &images, 28, 28).unwrap();
            write_idx_labels(data.join(format!("{prefix}-labels-idx1-ubyte")), &labels).unwrap();
        }
        fs::write(dir.path().join("small.cfg"), SMALL_NET).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Runs `andnet` with the small config, the synthetic data and `out`.
    fn run(&self, out: &str, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_andnet"));
        cmd.arg("--config")
            .arg(self.path("small.cfg"))
            .arg("--data-dir")
            .arg(self.path("data"))
            .arg("--out")
            .arg(self.path(out))
            .args(args);
        cmd.output().unwrap()
    }
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Data rows of a CSV file, checking the schema and header lines.
fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# schema: "), "{}", path.display());
    assert!(lines.next().is_some());
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn train_writes_metrics_checkpoint_and_echo() {
    let ws = Workspace::new(100, 50);
    let o = ws.run("a", &["train"]);
    ok(&o);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("layer_sizes = 784,16,12,10"));
    assert!(stdout.contains("seed = 5"));
    assert_eq!(csv_rows(&ws.path("a/metrics.csv")).len(), 2);
    assert!(ws.path("a/model.ckpt").is_file());
    assert!(ws.path("a/config.cfg").is_file());
}

#[test]
fn training_is_reproducible_from_the_echo() {
    let ws = Workspace::new(100, 50);
    ok(&ws.run("a", &["train", "--checkpoint-every", "1"]));
    ok(&ws.run("b", &["train"]));
    let a = fs::read(ws.path("a/model.ckpt")).unwrap();
    assert_eq!(a, fs::read(ws.path("b/model.ckpt")).unwrap());
    assert!(ws.path("a/epoch_0001.ckpt").is_file());
    assert_eq!(fs::read(ws.path("a/epoch_0002.ckpt")).unwrap(), a);

    // Rerun from the echoed configuration alone.
    let echo = fs::read_to_string(ws.path("a/config.cfg")).unwrap();
    let echo = echo.replace(&ws.path("a").display().to_string(), &ws.path("c").display().to_string());
    fs::write(ws.path("echo.cfg"), echo).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_andnet"))
        .arg("train")
        .arg("--config")
        .arg(ws.path("echo.cfg"))
        .output()
        .unwrap();
    ok(&o);
    assert_eq!(fs::read(ws.path("c/model.ckpt")).unwrap(), a);
}

#[test]
fn attack_zero_epsilon_matches_eval() {
    let ws = Workspace::new(100, 60);
    ok(&ws.run("a", &["train"]));
    let o = ws.run("a", &["eval"]);
    ok(&o);
    let eval = csv_rows(&ws.path("a/eval.csv"));
    let o = ws.run("a", &["attack", "--epsilons", "0.1,0.3", "--max-flips", "3"]);
    ok(&o);
    let rows = csv_rows(&ws.path("a/attack_fgsm.csv"));
    let eps: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(eps, ["0", "0.1", "0.3"]);
    assert_eq!(rows[0][4], eval[0][2]);
    for f in fs::read_dir(ws.path("a/flips")).unwrap() {
        let bytes = fs::read(f.unwrap().path()).unwrap();
        assert!(bytes.starts_with(b"P5\n28 28\n255\n"));
        assert_eq!(bytes.len(), 13 + 784);
    }
    let o = ws.run("a", &["attack", "--attack", "pgd", "--epsilons", "0.1"]);
    ok(&o);
    assert_eq!(csv_rows(&ws.path("a/attack_pgd.csv")).len(), 2);
}

#[test]
fn default_epsilons_start_at_zero() {
    let ws = Workspace::new(40, 20);
    ok(&ws.run("a", &["train", "--epochs", "1"]));
    ok(&ws.run("a", &["attack"]));
    let eps: Vec<String> = csv_rows(&ws.path("a/attack_fgsm.csv")).into_iter().map(|r| r[1].clone()).collect();
    assert_eq!(eps, ["0", "0.05", "0.1", "0.15", "0.2", "0.25", "0.3"]);
}

#[test]
fn random_network_is_at_chance() {
    let ws = Workspace::new(10, 1000);
    fs::create_dir(ws.path("r")).unwrap();
    let params = NetworkParams::init(&[784, 16, 12, 10], InputFilter::default(), &mut RngStream::new(3)).unwrap();
    Checkpoint::new(params, [0; 32]).save(ws.path("r/model.ckpt")).unwrap();
    ok(&ws.run("r", &["attack", "--epsilons", "0.1"]));
    for row in csv_rows(&ws.path("r/attack_fgsm.csv")) {
        let acc: f64 = row[4].parse().unwrap();
        assert!((acc - 0.1).abs() <= 0.05, "{acc}");
    }
}

fn pgm_pixels(path: &Path) -> (String, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(2)
        .unwrap()
        .0;
    (
        String::from_utf8_lossy(&bytes[..header_end]).into_owned(),
        bytes[header_end + 1..].to_vec(),
    )
}

#[test]
fn export_features_images_and_scores() {
    let ws = Workspace::new(10, 200);
    fs::create_dir(ws.path("e")).unwrap();
    let mut params =
        NetworkParams::init(&[784, 16, 12, 10], InputFilter::default(), &mut RngStream::new(4)).unwrap();
    for j in 0..784 {
        params.layers[0].weights.set(j, 0, 1.0 / 784.0);
    }
    Checkpoint::new(params, [0; 32]).save(ws.path("e/model.ckpt")).unwrap();
    ok(&ws.run("e", &["export-features"]));

    let measures = csv_rows(&ws.path("e/features/measures.csv"));
    assert_eq!(measures.len(), 16 + 12);
    let mut names: Vec<String> = fs::read_dir(ws.path("e/features/layer1"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 16);
    for (i, name) in names.iter().enumerate() {
        let row = &measures[i];
        let (h, s): (f64, f64) = (row[2].parse().unwrap(), row[3].parse().unwrap());
        assert_eq!(name, &format!("neuron{i:03}_score{:.4}.pgm", (h + s) / 2.0));
        let (header, px) = pgm_pixels(&ws.path("e/features/layer1").join(name));
        assert_eq!(header, "P5\n28 28\n255");
        assert_eq!(px.len(), 784);
        if i == 0 {
            assert!(px.iter().all(|&p| p == 128), "constant weights render mid-gray");
        } else {
            assert_eq!(px.iter().min(), Some(&0));
            assert_eq!(px.iter().max(), Some(&255));
        }
    }
}

#[test]
fn export_of_deeper_layers_needs_the_flag() {
    let ws = Workspace::new(40, 50);
    ok(&ws.run("a", &["train", "--epochs", "1"]));
    let o = ws.run("a", &["export-features", "--layer", "2"]);
    assert_eq!(o.status.code(), Some(1));
    ok(&ws.run("a", &["export-features", "--layer", "2", "--allow-strips"]));
    let dir = ws.path("a/features/layer2");
    let files: Vec<PathBuf> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 12);
    assert_eq!(pgm_pixels(&files[0]).0, "P5\n16 1\n255");
    assert_eq!(ws.run("a", &["export-features", "--layer", "3", "--allow-strips"]).status.code(), Some(1));
}

#[test]
fn diagnose_histograms_conserve_counts() {
    let ws = Workspace::new(40, 70);
    ok(&ws.run("a", &["train", "--epochs", "1"]));
    ok(&ws.run("a", &["diagnose"]));
    let rows = csv_rows(&ws.path("a/ncf_histograms.csv"));
    assert_eq!(rows.len(), (16 + 12) * 2 * 40);
    let mut sums = std::collections::HashMap::<(String, String, String), u64>::new();
    for r in &rows {
        *sums.entry((r[0].clone(), r[1].clone(), r[2].clone())).or_default() += r[6].parse::<u64>().unwrap();
    }
    assert_eq!(sums.len(), (16 + 12) * 2);
    assert!(sums.values().all(|&s| s == 70));
    ok(&ws.run("a", &["diagnose", "--bins", "7"]));
    assert_eq!(csv_rows(&ws.path("a/ncf_histograms.csv")).len(), (16 + 12) * 2 * 7);
}

#[test]
fn exit_codes() {
    let ws = Workspace::new(40, 20);
    let bin = env!("CARGO_BIN_EXE_andnet");
    let code = |o: Output| o.status.code();

    assert_eq!(code(Command::new(bin).arg("--help").output().unwrap()), Some(0));
    assert_eq!(code(Command::new(bin).arg("frobnicate").output().unwrap()), Some(1));
    assert_eq!(code(ws.run("a", &["train", "--defense", "maybe"])), Some(1));
    assert_eq!(code(ws.run("a", &["train", "--lambda-mix", "2"])), Some(1));

    fs::write(ws.path("bad.cfg"), "[train]\nepochz = 3\n").unwrap();
    let o = Command::new(bin)
        .args(["train", "--config"])
        .arg(ws.path("bad.cfg"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));

    assert_eq!(code(ws.run("a", &["train", "--data-dir", "/nonexistent"])), Some(2));
    assert_eq!(code(ws.run("none", &["eval"])), Some(2));
    fs::create_dir_all(ws.path("junk")).unwrap();
    fs::write(ws.path("junk/model.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(ws.run("junk", &["eval"])), Some(2));

    let o = ws.run("d", &["train", "--defense", "off", "--lr", "1.7e308", "--epochs", "3"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn incompatible_checkpoint_is_a_data_error() {
    let ws = Workspace::new(10, 20);
    fs::create_dir(ws.path("x")).unwrap();
    let params = NetworkParams::init(&[100, 8, 10], InputFilter::default(), &mut RngStream::new(1)).unwrap();
    Checkpoint::new(params, [0; 32]).save(ws.path("x/model.ckpt")).unwrap();
    assert_eq!(ws.run("x", &["eval"]).status.code(), Some(2));
}
