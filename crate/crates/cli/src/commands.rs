use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use andnet_core::attacks::{attack_sweep_with, SweepOptions};
use andnet_core::dataset::NUM_CLASSES;
use andnet_core::image::GrayImage;
use andnet_core::measures::{ncf_histograms, write_histograms_csv, NcfHistogram};
use andnet_core::network::{accuracy, forward, predict};
use andnet_core::scramble::sds_type_b;
use andnet_core::training::{train_with, TrainObserver};
use andnet_core::{
    Checkpoint, EpochMetrics, LabeledSet, NetworkParams, NeuronMeasures, Result as CoreResult,
    RngStream, Split,
};

use crate::config::RunConfig;
use crate::error::{io_error, CliError};

/// RNG streams of the inspection commands, forked from the run seed.
const EXPORT_STREAM: u64 = 11;
const DIAGNOSE_STREAM: u64 = 12;

type Result<T> = std::result::Result<T, CliError>;

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn make_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

/// Prints the resolved configuration and stores it as `<out>/config.cfg`.
pub fn echo_config(cfg: &RunConfig) -> Result<()> {
    let text = cfg.to_text();
    print!("{text}");
    println!();
    make_dir(&cfg.output.dir)?;
    let path = cfg.output.dir.join("config.cfg");
    std::fs::write(&path, text).map_err(|e| io_error(&path, e))
}

fn load_split(cfg: &RunConfig, split: Split, limit: Option<usize>) -> Result<LabeledSet> {
    if !cfg.data.dir.is_dir() {
        return Err(CliError::Data(format!(
            "data directory {} does not exist",
            cfg.data.dir.display()
        )));
    }
    let set = LabeledSet::load_mnist(&cfg.data.dir, split)?;
    Ok(match limit {
        Some(n) if n < set.len() => set.take(n),
        _ => set,
    })
}

fn load_checkpoint(cfg: &RunConfig) -> Result<NetworkParams> {
    let path = cfg.checkpoint_path();
    if !path.is_file() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    if ck.config_hash != cfg.train.fingerprint() {
        eprintln!("note: {} was trained with a different [train] configuration", path.display());
    }
    Ok(ck.params)
}

fn check_compatible(params: &NetworkParams, set: &LabeledSet) -> Result<()> {
    if params.input_size() != set.features() || params.num_classes() != NUM_CLASSES {
        return Err(CliError::Data(format!(
            "incompatible checkpoint architecture {:?} for {}-feature data with {} classes",
            params.layer_sizes(),
            set.features(),
            NUM_CLASSES
        )));
    }
    Ok(())
}

struct Recorder {
    metrics: BufWriter<File>,
    metrics_path: PathBuf,
    out_dir: PathBuf,
    every: usize,
    hash: [u8; 32],
}

impl TrainObserver for Recorder {
    fn on_epoch(&mut self, m: &EpochMetrics, params: &NetworkParams) -> CoreResult<()> {
        let io = |e| andnet_core::Error::Io {
            path: self.metrics_path.clone(),
            source: e,
        };
        writeln!(self.metrics, "{}", m.csv_row()).map_err(io)?;
        self.metrics.flush().map_err(io)?;
        println!(
            "epoch {:>4}  ce {:.5}  loss2 {:.5}  hysp {:.4}  sat {:.4}  train_acc {:.4}",
            m.epoch, m.ce_loss, m.loss2, m.mean_hysp, m.mean_sat, m.train_acc
        );
        if self.every > 0 && m.epoch.is_multiple_of(self.every) {
            let mut snapshot = params.clone();
            if params.filter.enabled {
                snapshot.normalize();
            }
            Checkpoint::new(snapshot, self.hash)
                .save(self.out_dir.join(format!("epoch_{:04}.ckpt", m.epoch)))?;
        }
        Ok(())
    }
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let set = load_split(cfg, Split::Train, cfg.data.train_examples)?;
    if set.features() != cfg.train.layer_sizes[0] {
        return Err(CliError::Data(format!(
            "data has {} features but the network expects {}",
            set.features(),
            cfg.train.layer_sizes[0]
        )));
    }
    let ckpt_path = cfg.checkpoint_path();
    if let Some(parent) = ckpt_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(parent)?;
    }
    let metrics_path = cfg.output.dir.join("metrics.csv");
    let mut metrics = create(&metrics_path)?;
    writeln!(metrics, "# schema: andnet-metrics v1")
        .and_then(|_| writeln!(metrics, "{}", EpochMetrics::CSV_HEADER))
        .map_err(|e| io_error(&metrics_path, e))?;
    let hash = cfg.train.fingerprint();
    let mut recorder = Recorder {
        metrics,
        metrics_path,
        out_dir: cfg.output.dir.clone(),
        every: cfg.output.checkpoint_every,
        hash,
    };
    println!("training on {} examples", set.len());
    let outcome = train_with(&cfg.train, &set, &mut recorder)?;
    Checkpoint::new(outcome.params, hash).save(&ckpt_path)?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let params = load_checkpoint(cfg)?;
    let set = load_split(cfg, Split::Test, cfg.data.test_examples)?;
    check_compatible(&params, &set)?;
    let preds = predict(&params, set.images())?;
    let acc = accuracy(&preds, set.labels());
    let correct = preds.iter().zip(set.labels()).filter(|(p, l)| p == l).count();
    let path = cfg.output.dir.join("eval.csv");
    let mut w = create(&path)?;
    writeln!(w, "# schema: andnet-eval v1")
        .and_then(|_| writeln!(w, "n_examples,n_correct,accuracy"))
        .and_then(|_| writeln!(w, "{},{},{}", set.len(), correct, acc))
        .and_then(|_| w.flush())
        .map_err(|e| io_error(&path, e))?;
    println!("clean accuracy {acc:.4} ({correct}/{})", set.len());
    Ok(())
}

/// The sweep's epsilons with 0 in front as the clean reference.
pub fn sweep_epsilons(epsilons: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0];
    out.extend(epsilons.iter().copied().filter(|&e| e != 0.0));
    out
}

pub fn attack(cfg: &RunConfig) -> Result<()> {
    let params = load_checkpoint(cfg)?;
    let set = load_split(cfg, Split::Test, cfg.data.test_examples)?;
    check_compatible(&params, &set)?;
    let kind = cfg.attack.kind;
    let epsilons = sweep_epsilons(&cfg.attack.epsilons);
    let options = SweepOptions {
        pgd_steps: cfg.attack.pgd_steps,
        max_flips: cfg.attack.max_flips,
        ..SweepOptions::default()
    };
    let report = attack_sweep_with(&params, &set, kind, &epsilons, &options)?;
    let path = cfg.output.dir.join(format!("attack_{kind}.csv"));
    let mut w = create(&path)?;
    report
        .write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_error(&path, e))?;
    for r in &report.rows {
        println!("{kind} eps {:.3}  accuracy {:.4}", r.epsilon, r.accuracy());
    }
    if !report.flips.is_empty() {
        let dir = cfg.output.dir.join("flips");
        make_dir(&dir)?;
        let side = square_side(set.features());
        for f in &report.flips {
            let name = format!(
                "{kind}_eps{:.3}_idx{:05}_label{}_pred{}.pgm",
                f.epsilon, f.index, f.label, f.prediction
            );
            let (w, h) = side.map_or((f.image.len(), 1), |s| (s, s));
            GrayImage::from_unit(&f.image, w, h)?.save(dir.join(name))?;
        }
        println!("dumped {} flipped examples to {}", report.flips.len(), dir.display());
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

pub fn export_features(cfg: &RunConfig) -> Result<()> {
    let params = load_checkpoint(cfg)?;
    let k = cfg.export.layer;
    if k > params.hidden_layers() {
        return Err(CliError::Usage(format!(
            "layer {k} is not a hidden layer (the network has {})",
            params.hidden_layers()
        )));
    }
    if k != 1 && !cfg.export.allow_strips {
        return Err(CliError::Usage(format!(
            "layer {k} inputs are not an image; pass --allow-strips to export them as strips"
        )));
    }
    let limit = cfg.data.test_examples.map_or(cfg.export.measure_examples, |n| n.min(cfg.export.measure_examples));
    let set = load_split(cfg, Split::Test, Some(limit))?;
    check_compatible(&params, &set)?;
    let mut rng = RngStream::new(cfg.train.seed).fork(EXPORT_STREAM);
    let measures = NeuronMeasures::evaluate(&params, &set, &mut rng)?;

    let dir = cfg.output.dir.join("features");
    let layer_dir = dir.join(format!("layer{k}"));
    make_dir(&layer_dir)?;
    let csv_path = dir.join("measures.csv");
    let mut w = create(&csv_path)?;
    measures
        .write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_error(&csv_path, e))?;

    let layer = &params.layers[k - 1];
    let scores = measures.layers[k - 1].scores();
    let geometry = match square_side(layer.fan_in()) {
        Some(s) if k == 1 => (s, s),
        _ => (layer.fan_in(), 1),
    };
    for (i, score) in scores.iter().enumerate() {
        let img = GrayImage::min_max(&layer.neuron_weights(i), geometry.0, geometry.1)?;
        img.save(layer_dir.join(format!("neuron{i:03}_score{score:.4}.pgm")))?;
    }
    println!(
        "layer {k}: {} images ({}x{}), weighted (hysp+sat)/2 = {:.4}",
        scores.len(),
        geometry.0,
        geometry.1,
        measures.layers[k - 1].weighted_score()
    );
    println!("wrote {} and {}", layer_dir.display(), csv_path.display());
    Ok(())
}

pub fn diagnose(cfg: &RunConfig) -> Result<()> {
    let params = load_checkpoint(cfg)?;
    let limit = match (cfg.diagnose.examples, cfg.data.test_examples) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let set = load_split(cfg, Split::Test, limit)?;
    check_compatible(&params, &set)?;
    let mut rng = RngStream::new(cfg.train.seed).fork(DIAGNOSE_STREAM);
    let trace = forward(&params, set.images())?;
    let sds = sds_type_b(&params, &trace, set.len(), &mut rng)?;
    let hists = ncf_histograms(&params, &trace, &sds, cfg.diagnose.bins)?;
    let path = cfg.output.dir.join("ncf_histograms.csv");
    let mut w = create(&path)?;
    write_histograms_csv(&hists, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_error(&path, e))?;
    let mean_var = |f: fn(&NcfHistogram) -> &Vec<u64>| {
        hists.iter().map(|h| NcfHistogram::binned_variance(f(h))).sum::<f64>() / hists.len() as f64
    };
    println!(
        "{} neurons, {} examples: mean binned NCF variance eds {:.6}, sds {:.6}",
        hists.len(),
        set.len(),
        mean_var(|h| &h.eds),
        mean_var(|h| &h.sds)
    );
    println!("wrote {}", path.display());
    Ok(())
}
