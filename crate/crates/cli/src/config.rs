//! Run configuration: sectioned `key = value` files plus command-line
//! overrides, resolved into one [`RunConfig`] that can be echoed and re-read.
//!
//! ```text
//! # comment
//! [train]
//! epochs = 10
//! lr = 0.5
//! ```
//!
//! Unknown sections and keys are errors, as are repeated keys within one file.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use andnet_core::attacks::{AttackKind, DEFAULT_EPSILONS, DEFAULT_PGD_STEPS};
use andnet_core::{InitScheme, TrainConfig};

use crate::error::CliError;

pub const SECTIONS: [&str; 6] = ["data", "train", "attack", "export", "diagnose", "output"];

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub dir: PathBuf,
    /// `None` uses the whole split.
    pub train_examples: Option<usize>,
    pub test_examples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub epsilons: Vec<f64>,
    pub pgd_steps: usize,
    /// Flipped examples dumped as PGM per epsilon.
    pub max_flips: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportSection {
    /// Hidden layer, numbered from 1.
    pub layer: usize,
    pub allow_strips: bool,
    /// Held-out test examples used for the measures.
    pub measure_examples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnoseSection {
    pub bins: usize,
    pub examples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// `None` means `<dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Save `<dir>/epoch_NNNN.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub export: ExportSection,
    pub diagnose: DiagnoseSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection {
                dir: PathBuf::from("data/mnist"),
                train_examples: None,
                test_examples: None,
            },
            train: TrainConfig::default(),
            attack: AttackSection {
                kind: AttackKind::Fgsm,
                epsilons: DEFAULT_EPSILONS.to_vec(),
                pgd_steps: DEFAULT_PGD_STEPS,
                max_flips: 0,
            },
            export: ExportSection {
                layer: 1,
                allow_strips: false,
                measure_examples: 1000,
            },
            diagnose: DiagnoseSection {
                bins: 40,
                examples: None,
            },
            output: OutputSection {
                dir: PathBuf::from("out"),
                checkpoint: None,
                checkpoint_every: 0,
            },
        }
    }
}

fn usage(msg: String) -> CliError {
    CliError::Usage(msg)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| usage(format!("{key}: cannot parse '{value}'")))
}

fn parse_switch(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(usage(format!("{key}: expected on/off, got '{value}'"))),
    }
}

fn parse_count(key: &str, value: &str) -> Result<Option<usize>, CliError> {
    if value == "all" {
        Ok(None)
    } else {
        match parse_num::<usize>(key, value)? {
            0 => Err(usage(format!("{key}: must be positive or 'all'"))),
            n => Ok(Some(n)),
        }
    }
}

fn show_count(n: Option<usize>) -> String {
    n.map_or("all".into(), |n| n.to_string())
}

pub fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    let items = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect::<Result<Vec<T>, _>>()?;
    if items.is_empty() {
        return Err(usage(format!("{key}: empty list")));
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one `section.key`; every value from files and flags goes through
    /// here.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), CliError> {
        let name = format!("{section}.{key}");
        let k = name.as_str();
        let t = &mut self.train;
        match (section, key) {
            ("data", "dir") => self.data.dir = PathBuf::from(value),
            ("data", "train_examples") => self.data.train_examples = parse_count(k, value)?,
            ("data", "test_examples") => self.data.test_examples = parse_count(k, value)?,

            ("train", "epochs") => t.epochs = parse_num(k, value)?,
            ("train", "batch_size") => t.batch_size = parse_num(k, value)?,
            ("train", "lr") => t.learning_rate = parse_num(k, value)?,
            ("train", "lambda_mix") => t.lambda_mix = parse_num(k, value)?,
            ("train", "concentration") => t.concentration = parse_switch(k, value)?,
            ("train", "seed") => t.seed = parse_num(k, value)?,
            ("train", "layer_sizes") => t.layer_sizes = parse_list(k, value)?,
            ("train", "defense") => t.defense = parse_switch(k, value)?,
            ("train", "filter_center") => t.filter_center = parse_num(k, value)?,
            ("train", "sds_examples") => {
                t.sds_examples = if value == "batch" {
                    None
                } else {
                    Some(parse_num(k, value)?)
                }
            }
            ("train", "init") => {
                t.init = if value == "auto" {
                    None
                } else {
                    Some(value.parse::<InitScheme>().map_err(|e| usage(format!("{k}: {e}")))?)
                }
            }

            ("attack", "kind") => {
                self.attack.kind = value.parse().map_err(|e| usage(format!("{k}: {e}")))?
            }
            ("attack", "epsilons") => self.attack.epsilons = parse_list(k, value)?,
            ("attack", "pgd_steps") => self.attack.pgd_steps = parse_num(k, value)?,
            ("attack", "max_flips") => self.attack.max_flips = parse_num(k, value)?,

            ("export", "layer") => self.export.layer = parse_num(k, value)?,
            ("export", "allow_strips") => self.export.allow_strips = parse_switch(k, value)?,
            ("export", "measure_examples") => self.export.measure_examples = parse_num(k, value)?,

            ("diagnose", "bins") => self.diagnose.bins = parse_num(k, value)?,
            ("diagnose", "examples") => self.diagnose.examples = parse_count(k, value)?,

            ("output", "dir") => self.output.dir = PathBuf::from(value),
            ("output", "checkpoint") => {
                self.output.checkpoint = if value == "auto" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            ("output", "checkpoint_every") => self.output.checkpoint_every = parse_num(k, value)?,

            _ if !SECTIONS.contains(&section) => {
                return Err(usage(format!("unknown section [{section}]")))
            }
            _ => return Err(usage(format!("unknown key '{key}' in [{section}]"))),
        }
        Ok(())
    }

    /// Applies a config file's text on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        let mut section: Option<String> = None;
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let at = |m: String| usage(format!("{origin}:{}: {m}", n + 1));
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("malformed section header '{line}'")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section
                .as_deref()
                .ok_or_else(|| at(format!("'{key}' appears before any [section]")))?;
            if !seen.insert(format!("{sec}.{key}")) {
                return Err(at(format!("duplicate key '{key}' in [{sec}]")));
            }
            self.set(sec, key, value).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Checks cross-field constraints once all values are in.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        if self.train.layer_sizes.len() < 3 {
            return Err(usage("train.layer_sizes needs at least one hidden layer".into()));
        }
        if let Some(&e) = self.attack.epsilons.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
            return Err(usage(format!("attack.epsilons: invalid epsilon {e}")));
        }
        if self.attack.pgd_steps == 0 {
            return Err(usage("attack.pgd_steps must be positive".into()));
        }
        if self.export.layer == 0 {
            return Err(usage("export.layer is numbered from 1".into()));
        }
        if self.export.measure_examples == 0 {
            return Err(usage("export.measure_examples must be positive".into()));
        }
        if self.diagnose.bins == 0 {
            return Err(usage("diagnose.bins must be positive".into()));
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.output.dir.join("model.ckpt"))
    }

    /// Complete text form; reading it back yields an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "dir = {}", self.data.dir.display());
        let _ = writeln!(s, "train_examples = {}", show_count(self.data.train_examples));
        let _ = writeln!(s, "test_examples = {}", show_count(self.data.test_examples));
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "lr = {}", t.learning_rate);
        let _ = writeln!(s, "lambda_mix = {}", t.lambda_mix);
        let _ = writeln!(s, "concentration = {}", if t.concentration { "on" } else { "off" });
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "layer_sizes = {}", join(&t.layer_sizes));
        let _ = writeln!(s, "defense = {}", if t.defense { "on" } else { "off" });
        let _ = writeln!(s, "filter_center = {}", t.filter_center);
        let _ = writeln!(s, "sds_examples = {}", t.sds_examples.map_or("batch".into(), |n| n.to_string()));
        let _ = writeln!(s, "init = {}", t.init.map_or("auto".into(), |i| i.to_string()));
        let _ = writeln!(s, "\n[attack]");
        let _ = writeln!(s, "kind = {}", self.attack.kind);
        let _ = writeln!(s, "epsilons = {}", join(&self.attack.epsilons));
        let _ = writeln!(s, "pgd_steps = {}", self.attack.pgd_steps);
        let _ = writeln!(s, "max_flips = {}", self.attack.max_flips);
        let _ = writeln!(s, "\n[export]");
        let _ = writeln!(s, "layer = {}", self.export.layer);
        let _ = writeln!(s, "allow_strips = {}", if self.export.allow_strips { "on" } else { "off" });
        let _ = writeln!(s, "measure_examples = {}", self.export.measure_examples);
        let _ = writeln!(s, "\n[diagnose]");
        let _ = writeln!(s, "bins = {}", self.diagnose.bins);
        let _ = writeln!(s, "examples = {}", show_count(self.diagnose.examples));
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "dir = {}", self.output.dir.display());
        let _ = writeln!(
            s,
            "checkpoint = {}",
            self.output.checkpoint.as_ref().map_or("auto".into(), |p| p.display().to_string())
        );
        let _ = writeln!(s, "checkpoint_every = {}", self.output.checkpoint_every);
        s
    }
}
