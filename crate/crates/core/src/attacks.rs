//! Untargeted L∞ sign-gradient attacks (FGSM and PGD) and epsilon sweeps.
//!
//! Gradients are exact: they flow through softmax cross-entropy, every
//! sigmoid and the input filter.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::network::{input_gradient, predict, NetworkParams};
use crate::numerics::Matrix;

pub const DEFAULT_EPSILONS: [f64; 6] = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30];
pub const DEFAULT_PGD_STEPS: usize = 40;
/// PGD step size as a multiple of `epsilon / steps`.
pub const PGD_STEP_FACTOR: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        })
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(Error::InvalidArgument(format!("unknown attack '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L∞ budget in pixel units.
    pub epsilon: f64,
    /// PGD iterations.
    pub steps: usize,
    /// PGD step size.
    pub step_size: f64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
        }
    }

    /// PGD with `steps` iterations of size `2.5·ε/steps`.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon,
            steps,
            step_size: PGD_STEP_FACTOR * epsilon / steps.max(1) as f64,
        }
    }

    pub fn for_kind(kind: AttackKind, epsilon: f64, pgd_steps: usize) -> Self {
        match kind {
            AttackKind::Fgsm => AttackConfig::fgsm(epsilon),
            AttackKind::Pgd => AttackConfig::pgd(epsilon, pgd_steps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if self.kind == AttackKind::Pgd {
            if self.steps == 0 {
                return Err(Error::InvalidArgument("PGD needs at least one step".into()));
            }
            if !(self.step_size > 0.0) && self.epsilon > 0.0 {
                return Err(Error::InvalidArgument("PGD step size must be positive".into()));
            }
        }
        Ok(())
    }
}

#[inline]
fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_batch(params: &NetworkParams, images: &Matrix, labels: &[usize]) -> Result<()> {
    if images.cols() != params.input_size() {
        return Err(Error::shape("attack", images.shape(), (params.input_size(), 1)));
    }
    if images.rows() != labels.len() {
        return Err(Error::shape("attack", images.shape(), (labels.len(), 1)));
    }
    Ok(())
}

/// `clip_[0,1](x + ε·sign(∇x CE))` for every row.
pub fn fgsm_batch(
    params: &NetworkParams,
    images: &Matrix,
    labels: &[usize],
    epsilon: f64,
) -> Result<Matrix> {
    check_batch(params, images, labels)?;
    let grad = input_gradient(params, images, labels)?;
    let mut out = images.clone();
    for (x, g) in out.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *x = (*x + epsilon * sign(*g)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Iterated sign steps, each followed by projection onto
/// `[x₀ − ε, x₀ + ε] ∩ [0, 1]`. Starts at `x₀` (no random start).
pub fn pgd_batch(
    params: &NetworkParams,
    images: &Matrix,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<Matrix> {
    config.validate()?;
    check_batch(params, images, labels)?;
    let eps = config.epsilon;
    let mut x = images.clone();
    for _ in 0..config.steps {
        let grad = input_gradient(params, &x, labels)?;
        for ((xi, g), &x0) in x
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(images.as_slice())
        {
            *xi = (*xi + config.step_size * sign(*g))
                .clamp(x0 - eps, x0 + eps)
                .clamp(0.0, 1.0);
        }
    }
    Ok(x)
}

/// FGSM on a single image.
pub fn fgsm(params: &NetworkParams, x: &[f64], label: usize, epsilon: f64) -> Result<Vec<f64>> {
    let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(fgsm_batch(params, &m, &[label], epsilon)?.into_vec())
}

/// PGD on a single image.
pub fn pgd(params: &NetworkParams, x: &[f64], label: usize, config: &AttackConfig) -> Result<Vec<f64>> {
    if config.kind != AttackKind::Pgd {
        return Err(Error::InvalidArgument("pgd called with a non-PGD config".into()));
    }
    let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(pgd_batch(params, &m, &[label], config)?.into_vec())
}

/// Adversarial examples for a whole batch under `config`.
pub fn attack_batch(
    params: &NetworkParams,
    images: &Matrix,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<Matrix> {
    config.validate()?;
    if config.epsilon == 0.0 {
        return Ok(images.clone());
    }
    match config.kind {
        AttackKind::Fgsm => fgsm_batch(params, images, labels, config.epsilon),
        AttackKind::Pgd => pgd_batch(params, images, labels, config),
    }
}

/// One example whose prediction the attack flipped from correct to wrong.
#[derive(Clone, Debug, PartialEq)]
pub struct FlipRecord {
    pub epsilon: f64,
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub image: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub attack: AttackKind,
    pub epsilon: f64,
    pub n_examples: usize,
    pub n_correct: usize,
}

impl RobustnessRow {
    pub fn accuracy(&self) -> f64 {
        if self.n_examples == 0 {
            0.0
        } else {
            self.n_correct as f64 / self.n_examples as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
    pub flips: Vec<FlipRecord>,
}

impl RobustnessReport {
    pub fn accuracy_at(&self, attack: AttackKind, epsilon: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.attack == attack && (r.epsilon - epsilon).abs() < 1e-12)
            .map(RobustnessRow::accuracy)
    }

    /// CSV: schema comment, then `attack,epsilon,n_examples,n_correct,accuracy`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# schema: andnet-robustness v1")?;
        writeln!(w, "attack,epsilon,n_examples,n_correct,accuracy")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.attack,
                r.epsilon,
                r.n_examples,
                r.n_correct,
                r.accuracy()
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SweepOptions {
    pub pgd_steps: usize,
    /// Keep at most this many flipped examples per epsilon.
    pub max_flips: usize,
    /// Examples attacked together.
    pub chunk: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            pgd_steps: DEFAULT_PGD_STEPS,
            max_flips: 0,
            chunk: 500,
        }
    }
}

/// Accuracy on adversarial versions of the whole test set, per epsilon.
/// Each example is attacked against its true label.
pub fn attack_sweep(
    params: &NetworkParams,
    testset: &LabeledSet,
    kind: AttackKind,
    epsilons: &[f64],
) -> Result<RobustnessReport> {
    attack_sweep_with(params, testset, kind, epsilons, &SweepOptions::default())
}

pub fn attack_sweep_with(
    params: &NetworkParams,
    testset: &LabeledSet,
    kind: AttackKind,
    epsilons: &[f64],
    options: &SweepOptions,
) -> Result<RobustnessReport> {
    if epsilons.is_empty() {
        return Err(Error::Empty("attack_sweep epsilons"));
    }
    let configs: Vec<AttackConfig> = epsilons
        .iter()
        .map(|&e| AttackConfig::for_kind(kind, e, options.pgd_steps))
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let clean = predict(params, testset.images())?;
    let labels = testset.labels();
    let mut report = RobustnessReport::default();
    let chunk = options.chunk.max(1);
    for config in &configs {
        let mut n_correct = 0;
        let mut flips = 0;
        let mut start = 0;
        while start < testset.len() {
            let end = (start + chunk).min(testset.len());
            let idx: Vec<usize> = (start..end).collect();
            let images = testset.images().select_rows(&idx);
            let adv = attack_batch(params, &images, &labels[start..end], config)?;
            let preds = predict(params, &adv)?;
            for (j, &p) in preds.iter().enumerate() {
                let i = start + j;
                if p == labels[i] {
                    n_correct += 1;
                } else if clean[i] == labels[i] && flips < options.max_flips {
                    flips += 1;
                    report.flips.push(FlipRecord {
                        epsilon: config.epsilon,
                        index: i,
                        label: labels[i],
                        prediction: p,
                        image: adv.row(j).to_vec(),
                    });
                }
            }
            start = end;
        }
        report.rows.push(RobustnessRow {
            attack: kind,
            epsilon: config.epsilon,
            n_examples: testset.len(),
            n_correct,
        });
    }
    Ok(report)
}
