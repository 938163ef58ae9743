//! Mini-batch training with the dual-loss AND-ness defense.
//!
//! Each batch runs, in order: weight normalization, type B scramble,
//! classification loss and its gradient, dynamic-measure loss and its
//! gradient, gradient mixing, gradient concentration, SGD update.

use sha2::{Digest, Sha256};

use crate::dataset::{epoch_batches, LabeledSet};
use crate::error::{Error, Result};
use crate::measures::{loss2, loss2_backward, NeuronMeasures};
use crate::network::{
    backward, classification_loss, forward, InitScheme, InputFilter, NetworkParams, ParamGrads,
    DEFAULT_LAYER_SIZES,
};
use crate::numerics::RngStream;
use crate::scramble::sds_type_b;

/// Input filter center used for training; zero pixels map to `sigmoid(-2)`.
pub const DEFAULT_FILTER_CENTER: f64 = 0.5;

/// Strong connections per neuron under the default sparse init.
pub const DEFAULT_SPARSE_INPUTS: usize = 8;

const INIT_STREAM: u64 = 1;
const SCRAMBLE_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the classification gradient in the mix.
    pub lambda_mix: f64,
    pub concentration: bool,
    pub seed: u64,
    pub layer_sizes: Vec<usize>,
    /// Master switch: off disables normalization, the input filter, the
    /// dynamic-measure loss and concentration.
    pub defense: bool,
    pub filter_center: f64,
    /// Scrambled examples per batch; `None` uses the batch size.
    pub sds_examples: Option<usize>,
    /// `None` picks [`TrainConfig::default_init`].
    pub init: Option<InitScheme>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 100,
            learning_rate: 0.05,
            lambda_mix: 0.5,
            concentration: true,
            seed: 0,
            layer_sizes: DEFAULT_LAYER_SIZES.to_vec(),
            defense: true,
            filter_center: DEFAULT_FILTER_CENTER,
            sds_examples: None,
            init: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return bad(format!("lambda_mix must be in [0, 1], got {}", self.lambda_mix));
        }
        if self.sds_examples == Some(0) {
            return bad("sds_examples must be positive".into());
        }
        if !self.filter_center.is_finite() {
            return bad("filter_center must be finite".into());
        }
        if self.init == Some(InitScheme::Sparse { inputs: 0 }) {
            return bad("sparse init needs at least one input".into());
        }
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return bad(format!("invalid layer sizes {:?}", self.layer_sizes));
        }
        Ok(())
    }

    /// Sparse connections when the defense is on, gain-scaled Glorot otherwise.
    pub fn default_init(&self) -> InitScheme {
        if self.defense {
            InitScheme::Sparse { inputs: DEFAULT_SPARSE_INPUTS }
        } else {
            InitScheme::Glorot
        }
    }

    pub fn init_scheme(&self) -> InitScheme {
        self.init.unwrap_or_else(|| self.default_init())
    }

    pub fn filter(&self) -> InputFilter {
        InputFilter {
            enabled: self.defense,
            center: self.filter_center,
        }
    }

    fn uses_measure_loss(&self) -> bool {
        self.defense && self.lambda_mix < 1.0
    }

    fn concentrates(&self) -> bool {
        self.defense && self.concentration
    }

    /// Canonical `key=value` lines describing every setting.
    pub fn canonical(&self) -> String {
        let sizes: Vec<String> = self.layer_sizes.iter().map(|s| s.to_string()).collect();
        format!(
            "epochs={}\nbatch_size={}\nlearning_rate={}\nlambda_mix={}\nconcentration={}\nseed={}\nlayer_sizes={}\ndefense={}\nfilter_center={}\nsds_examples={}\ninit={}\n",
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.lambda_mix,
            if self.concentration { "on" } else { "off" },
            self.seed,
            sizes.join(","),
            if self.defense { "on" } else { "off" },
            self.filter_center,
            self.sds_examples.map_or("batch".to_string(), |n| n.to_string()),
            self.init.map_or("auto".to_string(), |s| s.to_string()),
        )
    }

    /// SHA-256 of [`canonical`](Self::canonical).
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    /// Parameters the training run starts from.
    pub fn initial_params(&self) -> Result<NetworkParams> {
        let mut rng = RngStream::new(self.seed).fork(INIT_STREAM);
        NetworkParams::init_with(&self.layer_sizes, self.filter(), self.init_scheme(), &mut rng)
    }
}

/// `λ·g1 + (1 − λ)·g2`.
pub fn mix_gradients(g1: &ParamGrads, g2: &ParamGrads, lambda_mix: f64) -> Result<ParamGrads> {
    g1.check_congruent(g2)?;
    let mut out = g1.clone();
    out.scale(lambda_mix);
    out.add_scaled(g2, 1.0 - lambda_mix)?;
    Ok(out)
}

/// Multiplies every weight gradient by `|w|`; bias gradients are untouched.
pub fn concentrate_gradient(grads: &ParamGrads, params: &NetworkParams) -> Result<ParamGrads> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::InvalidArgument("gradient and parameter layer counts differ".into()));
    }
    let mut out = grads.clone();
    for (g, p) in out.layers.iter_mut().zip(&params.layers) {
        if g.weights.shape() != p.weights.shape() {
            return Err(Error::shape("concentrate_gradient", g.weights.shape(), p.weights.shape()));
        }
        for (gi, wi) in g.weights.as_mut_slice().iter_mut().zip(p.weights.as_slice()) {
            *gi *= wi.abs();
        }
    }
    Ok(out)
}

/// [`concentrate_gradient`] on the hidden layers; the readout gradient passes
/// through unchanged.
pub fn concentrate_hidden(grads: &ParamGrads, params: &NetworkParams) -> Result<ParamGrads> {
    let mut out = concentrate_gradient(grads, params)?;
    let last = out.layers.len() - 1;
    out.layers[last] = grads.layers[last].clone();
    Ok(out)
}

/// In-place SGD step `w ← w − lr·g`. Leaves `params` untouched and fails if
/// the step would produce non-finite values.
pub fn apply_update(params: &mut NetworkParams, grads: &ParamGrads, learning_rate: f64) -> Result<()> {
    let updated = update_weights(params, grads, learning_rate)?;
    *params = updated;
    Ok(())
}

/// Plain gradient-descent step.
pub fn update_weights(params: &NetworkParams, grads: &ParamGrads, learning_rate: f64) -> Result<NetworkParams> {
    let mut out = params.clone();
    if grads.layers.len() != out.layers.len() {
        return Err(Error::InvalidArgument("gradient and parameter layer counts differ".into()));
    }
    for (p, g) in out.layers.iter_mut().zip(&grads.layers) {
        p.weights.add_scaled(&g.weights, -learning_rate)?;
        if p.bias.len() != g.bias.len() {
            return Err(Error::shape("update_weights", (p.bias.len(), 1), (g.bias.len(), 1)));
        }
        for (b, gb) in p.bias.iter_mut().zip(&g.bias) {
            *b -= learning_rate * gb;
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("update_weights"));
    }
    Ok(out)
}

/// Averages over the batches of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce_loss: f64,
    pub loss2: f64,
    pub mean_hysp: f64,
    pub mean_sat: f64,
    pub train_acc: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,ce_loss,loss2,mean_hysp,mean_sat,train_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.ce_loss, self.loss2, self.mean_hysp, self.mean_sat, self.train_acc
        )
    }
}

/// Steps of one batch, reported to [`TrainObserver::on_stage`] in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Normalized,
    Scrambled,
    ClassificationGradient,
    MeasureGradient,
    Mixed,
    Concentrated,
    Updated,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_stage(&mut self, _epoch: usize, _batch: usize, _stage: Stage) {}

    /// Called after every epoch; an error aborts training.
    fn on_epoch(&mut self, _metrics: &EpochMetrics, _params: &NetworkParams) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<EpochMetrics>,
}

pub fn train(config: &TrainConfig, train_set: &LabeledSet) -> Result<TrainOutcome> {
    train_with(config, train_set, &mut ())
}

pub fn train_with(
    config: &TrainConfig,
    train_set: &LabeledSet,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let params = config.initial_params()?;
    train_from(config, params, train_set, observer)
}

/// Trains starting from `params` (epochs are numbered from 1).
pub fn train_from(
    config: &TrainConfig,
    params: NetworkParams,
    train_set: &LabeledSet,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    resume(config, params, train_set, 0, observer)
}

/// Runs epochs `completed + 1 ..= config.epochs` from `params`. Every epoch
/// draws from its own streams, so resuming the result of a `k`-epoch run
/// reproduces the longer run exactly.
pub fn resume(
    config: &TrainConfig,
    mut params: NetworkParams,
    train_set: &LabeledSet,
    completed: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if completed >= config.epochs {
        return Err(Error::InvalidArgument(format!(
            "nothing to resume: {completed} of {} epochs done",
            config.epochs
        )));
    }
    if train_set.features() != params.input_size() {
        return Err(Error::shape(
            "train",
            train_set.images().shape(),
            (train_set.len(), params.input_size()),
        ));
    }
    let scramble_root = RngStream::new(config.seed).fork(SCRAMBLE_STREAM);
    let shuffle_seed = RngStream::new(config.seed).fork(SHUFFLE_STREAM).next_u64();
    let mut history = Vec::with_capacity(config.epochs - completed);

    for epoch in completed + 1..=config.epochs {
        let mut scramble_rng = scramble_root.fork(epoch as u64);
        let batches = epoch_batches(train_set, config.batch_size, shuffle_seed, epoch)?;
        let mut sums = [0.0f64; 4];
        let mut correct = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let diverged = |what| Error::Diverged {
                epoch,
                batch: bi + 1,
                what,
            };

            if config.defense {
                params.normalize();
                observer.on_stage(epoch, bi + 1, Stage::Normalized);
            }

            let eds = forward(&params, &batch.images)?;
            let n_out = config.sds_examples.unwrap_or(batch.labels.len());
            let sds = sds_type_b(&params, &eds, n_out, &mut scramble_rng)?;
            observer.on_stage(epoch, bi + 1, Stage::Scrambled);

            let (ce, output_grad) = classification_loss(&eds, &batch.labels)?;
            if !ce.is_finite() {
                return Err(diverged("classification loss"));
            }
            let ce_back = backward(&params, &eds, &output_grad)?;
            observer.on_stage(epoch, bi + 1, Stage::ClassificationGradient);

            let measures = NeuronMeasures::compute(&eds, &sds, &ce_back.activation_grads)?;
            let l2 = loss2(&measures);
            if !l2.is_finite() {
                return Err(diverged("dynamic-measure loss"));
            }
            let mut grads = if config.uses_measure_loss() {
                let g2 = loss2_backward(&params, &eds, &sds, &measures)?;
                observer.on_stage(epoch, bi + 1, Stage::MeasureGradient);
                let mixed = mix_gradients(&ce_back.grads, &g2, config.lambda_mix)?;
                observer.on_stage(epoch, bi + 1, Stage::Mixed);
                mixed
            } else {
                ce_back.grads
            };

            if config.concentrates() {
                grads = concentrate_hidden(&grads, &params)?;
                observer.on_stage(epoch, bi + 1, Stage::Concentrated);
            }
            if !grads.is_finite() {
                return Err(diverged("gradient"));
            }
            apply_update(&mut params, &grads, config.learning_rate).map_err(|_| diverged("weights"))?;
            observer.on_stage(epoch, bi + 1, Stage::Updated);

            sums[0] += ce;
            sums[1] += l2;
            sums[2] += measures.mean_hysp();
            sums[3] += measures.mean_sat();
            correct += eds
                .predictions()
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
        }
        let nb = batches.len() as f64;
        let metrics = EpochMetrics {
            epoch,
            ce_loss: sums[0] / nb,
            loss2: sums[1] / nb,
            mean_hysp: sums[2] / nb,
            mean_sat: sums[3] / nb,
            train_acc: correct as f64 / train_set.len() as f64,
        };
        observer.on_epoch(&metrics, &params)?;
        history.push(metrics);
    }
    if config.defense {
        params.normalize();
    }
    Ok(TrainOutcome { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerParams;
    use crate::numerics::Matrix;

    fn grads_of(values: &[f64]) -> ParamGrads {
        ParamGrads {
            layers: vec![LayerParams::new(Matrix::from_vec(values.len(), 1, values.to_vec()).unwrap(), vec![0.5]).unwrap()],
        }
    }

    #[test]
    fn mixing_endpoints_and_fixed_point() {
        let g1 = grads_of(&[1.0, -2.0]);
        let g2 = grads_of(&[3.0, 5.0]);
        assert_eq!(mix_gradients(&g1, &g2, 1.0).unwrap(), g1);
        assert_eq!(mix_gradients(&g1, &g2, 0.0).unwrap(), g2);
        assert_eq!(mix_gradients(&g1, &g1, 0.5).unwrap(), g1);
        assert!(mix_gradients(&g1, &grads_of(&[1.0]), 0.5).is_err());
    }

    fn params_of(w: &[f64]) -> NetworkParams {
        let layer = LayerParams::new(Matrix::from_vec(w.len(), 1, w.to_vec()).unwrap(), vec![0.0]).unwrap();
        NetworkParams::from_layers(vec![layer], InputFilter::default()).unwrap()
    }

    #[test]
    fn concentration_examples() {
        let g = grads_of(&[1.0, 1.0]);
        let c = concentrate_gradient(&g, &params_of(&[2.0, 0.5])).unwrap();
        assert_eq!(c.layers[0].weights.as_slice(), &[2.0, 0.5]);
        assert_eq!(c.layers[0].bias, vec![0.5]);
        let c = concentrate_gradient(&g, &params_of(&[0.0, 0.0])).unwrap();
        assert_eq!(c.layers[0].weights.as_slice(), &[0.0, 0.0]);
        let g = grads_of(&[0.3, -0.7]);
        let c = concentrate_gradient(&g, &params_of(&[1.0, -1.0])).unwrap();
        assert_eq!(c, g);
    }

    #[test]
    fn update_examples() {
        let p = params_of(&[0.4, -0.2]);
        assert_eq!(update_weights(&p, &ParamGrads::zeros_like(&p), 0.1).unwrap(), p);
        assert_eq!(update_weights(&p, &grads_of(&[1.0, 2.0]), 0.0).unwrap(), p);
        let q = update_weights(&p, &grads_of(&[1.0, 2.0]), 0.1).unwrap();
        assert!((q.layers[0].weights.get(0, 0) - 0.3).abs() < 1e-15);
        let mut inf = grads_of(&[f64::MAX, 0.0]);
        inf.layers[0].weights.set(0, 0, f64::MAX);
        assert!(update_weights(&p, &inf, -10.0).is_err());
    }

    #[test]
    fn config_validation_and_fingerprint() {
        let c = TrainConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.layer_sizes, vec![784, 512, 384, 256, 10]);
        assert!(TrainConfig { lambda_mix: 1.5, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert_ne!(c.fingerprint(), TrainConfig { seed: 1, ..c.clone() }.fingerprint());
        assert_eq!(c.fingerprint(), c.clone().fingerprint());
    }
}
