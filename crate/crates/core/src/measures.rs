//! Per-neuron AND-ness measures and the scrambled-data correlation family.
//!
//! * NCF: dot product of a normalized weight vector with the filtered input.
//! * hysp: `tanh(2·var(y|EDS)/var(y|SDS))`, co-occurrence beyond chance.
//! * sat: `E[tanh(2·|y − 0.5|)]`, distance from the steep part of the sigmoid.
//! * loss2: `1 − Σ_i (hysp_i + sat_i)/2 · |grad_i| / N` over hidden neurons.

use std::io::Write;

use crate::error::{Error, Result};
use crate::network::{
    activation_slope, backward, backward_with, classification_loss, column_sums, forward,
    ActivationTrace, LayerParams, NetworkParams,
    ParamGrads,
};
use crate::numerics::{dot, matmul_nt, matmul_tn, mean, variance, Matrix, RngStream};
use crate::dataset::LabeledSet;
use crate::scramble::{scramble_columns, sds_type_b, ScrambleType, ScrambledTrace};

/// Floor on `var(y|SDS)` in the hysp ratio.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const NORMALIZED_TOL: f64 = 1e-9;

/// Neuron coactivation factors `Σ_j w_ji·x_j` for every neuron of `layer`.
///
/// The layer must satisfy the L1 projection (within 1e-9).
pub fn ncf(layer: &LayerParams, filtered_input: &[f64]) -> Result<Vec<f64>> {
    if filtered_input.len() != layer.fan_in() {
        return Err(Error::shape("ncf", (1, filtered_input.len()), layer.weights.shape()));
    }
    if let Err(neuron) = layer.check_normalized(NORMALIZED_TOL) {
        return Err(Error::NotNormalized { layer: 0, neuron });
    }
    let mut out = vec![0.0; layer.fan_out()];
    for (j, &x) in filtered_input.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(layer.weights.row(j)) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Hyper-spread of one neuron; population variances.
pub fn hysp(y_eds: &[f64], y_sds: &[f64]) -> Result<f64> {
    if y_eds.is_empty() || y_sds.is_empty() {
        return Err(Error::Empty("hysp"));
    }
    Ok(hysp_from_variances(variance(y_eds), variance(y_sds)))
}

/// Largest `f64` below one; `tanh` of a large ratio rounds up to 1.0.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

fn hysp_from_variances(v_eds: f64, v_sds: f64) -> f64 {
    (2.0 * v_eds / v_sds.max(VARIANCE_FLOOR)).tanh().min(BELOW_ONE)
}

/// Saturation of one neuron's outputs, at most `tanh(1)` (outputs lie in
/// `[0, 1]`; the clamp absorbs summation rounding).
pub fn sat(y_eds: &[f64]) -> f64 {
    if y_eds.is_empty() {
        return 0.0;
    }
    let s = y_eds.iter().map(|y| (2.0 * (y - 0.5).abs()).tanh()).sum::<f64>() / y_eds.len() as f64;
    s.min(1.0f64.tanh())
}

/// Measures of one hidden layer, indexed by neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMeasures {
    pub hysp: Vec<f64>,
    pub sat: Vec<f64>,
    pub grad_abs: Vec<f64>,
}

impl LayerMeasures {
    pub fn len(&self) -> usize {
        self.hysp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hysp.is_empty()
    }

    /// `(hysp + sat)/2` per neuron.
    pub fn scores(&self) -> Vec<f64> {
        self.hysp.iter().zip(&self.sat).map(|(h, s)| 0.5 * (h + s)).collect()
    }

    /// Mean `(hysp + sat)/2` weighted by `grad_abs`.
    pub fn weighted_score(&self) -> f64 {
        let total: f64 = self.grad_abs.iter().sum();
        if total == 0.0 {
            return mean(&self.scores());
        }
        self.scores().iter().zip(&self.grad_abs).map(|(s, g)| s * g).sum::<f64>() / total
    }
}

/// hysp, sat and classification-gradient magnitude for every hidden neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronMeasures {
    pub layers: Vec<LayerMeasures>,
}

impl NeuronMeasures {
    /// Computes the measures of every hidden layer from a batch's normal
    /// trace, its type B scramble, and `∂CE/∂a` of the hidden layers (as
    /// returned by [`crate::network::backward`] on the batch-mean loss).
    ///
    /// `grad_abs_i` is the batch mean of the per-example `|∂CE/∂a_i|`.
    pub fn compute(
        eds: &ActivationTrace,
        sds: &ScrambledTrace,
        activation_grads: &[Matrix],
    ) -> Result<Self> {
        let hidden = eds.layers.len() - 1;
        check_sds(eds, sds)?;
        if activation_grads.len() != hidden {
            return Err(Error::InvalidArgument(format!(
                "expected {hidden} activation gradients, got {}",
                activation_grads.len()
            )));
        }
        let mut layers = Vec::with_capacity(hidden);
        for k in 0..hidden {
            let y = &eds.layers[k].out;
            let ys = &sds.layers[k].out;
            if activation_grads[k].shape() != y.shape() {
                return Err(Error::shape("NeuronMeasures::compute", activation_grads[k].shape(), y.shape()));
            }
            let mut grad_abs = vec![0.0; y.cols()];
            for r in 0..y.rows() {
                for (g, d) in grad_abs.iter_mut().zip(activation_grads[k].row(r)) {
                    *g += d.abs();
                }
            }
            let mut lm = LayerMeasures {
                hysp: Vec::with_capacity(y.cols()),
                sat: Vec::with_capacity(y.cols()),
                grad_abs,
            };
            for i in 0..y.cols() {
                let col = y.column(i);
                lm.hysp.push(hysp(&col, &ys.column(i))?);
                lm.sat.push(sat(&col));
            }
            layers.push(lm);
        }
        Ok(NeuronMeasures { layers })
    }

    /// Measures on a held-out set: one forward pass, a type B scramble of
    /// the same size, and the gradient of the mean classification loss.
    pub fn evaluate(params: &NetworkParams, set: &LabeledSet, rng: &mut RngStream) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::Empty("NeuronMeasures::evaluate"));
        }
        let eds = forward(params, set.images())?;
        let sds = sds_type_b(params, &eds, set.len(), rng)?;
        let (_, output_grad) = classification_loss(&eds, set.labels())?;
        let back = backward(params, &eds, &output_grad)?;
        NeuronMeasures::compute(&eds, &sds, &back.activation_grads)
    }

    pub fn neuron_count(&self) -> usize {
        self.layers.iter().map(LayerMeasures::len).sum()
    }

    pub fn mean_hysp(&self) -> f64 {
        self.mean_of(|l| &l.hysp)
    }

    pub fn mean_sat(&self) -> f64 {
        self.mean_of(|l| &l.sat)
    }

    fn mean_of(&self, f: impl Fn(&LayerMeasures) -> &Vec<f64>) -> f64 {
        let n = self.neuron_count();
        if n == 0 {
            return 0.0;
        }
        self.layers.iter().flat_map(|l| f(l).iter()).sum::<f64>() / n as f64
    }

    /// CSV with a schema comment line and columns
    /// `neuron,layer,hysp,sat,grad_abs`. Layers are numbered from 1.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# schema: andnet-measures v1")?;
        writeln!(w, "neuron,layer,hysp,sat,grad_abs")?;
        for (k, l) in self.layers.iter().enumerate() {
            for i in 0..l.len() {
                writeln!(w, "{},{},{},{},{}", i, k + 1, l.hysp[i], l.sat[i], l.grad_abs[i])?;
            }
        }
        Ok(())
    }
}

fn check_sds(eds: &ActivationTrace, sds: &ScrambledTrace) -> Result<()> {
    if sds.kind != ScrambleType::B {
        return Err(Error::StaleTrace("dynamic measures need a type B scramble".into()));
    }
    if sds.layers.len() != eds.layers.len() {
        return Err(Error::StaleTrace(format!(
            "{} scrambled layers vs {} traced layers",
            sds.layers.len(),
            eds.layers.len()
        )));
    }
    for (k, (s, e)) in sds.layers.iter().zip(&eds.layers).enumerate() {
        if s.out.cols() != e.out.cols() || s.out.rows() == 0 {
            return Err(Error::StaleTrace(format!("layer {k} width mismatch")));
        }
    }
    Ok(())
}

/// Dynamic-measure loss.
pub fn loss2(measures: &NeuronMeasures) -> f64 {
    let n = measures.neuron_count();
    if n == 0 {
        return 1.0;
    }
    let mut acc = 0.0;
    for l in &measures.layers {
        for i in 0..l.len() {
            acc += (0.5 * l.hysp[i] + 0.5 * l.sat[i]) * l.grad_abs[i];
        }
    }
    1.0 - acc / n as f64
}

/// Exact gradient of [`loss2`] with respect to all weights and biases.
///
/// `grad_abs` is held constant. hysp is differentiated through both
/// variances: `var(y|EDS)` via normal propagation (reaching every upstream
/// layer) and `var(y|SDS)` via the type B one-layer propagation, whose
/// scrambled inputs flow back to the EDS values they were drawn from. sat
/// uses subgradient 0 at `y = 0.5`.
pub fn loss2_backward(
    params: &NetworkParams,
    eds: &ActivationTrace,
    sds: &ScrambledTrace,
    measures: &NeuronMeasures,
) -> Result<ParamGrads> {
    eds.check_against(params)?;
    check_sds(eds, sds)?;
    let hidden = params.hidden_layers();
    if measures.layers.len() != hidden {
        return Err(Error::StaleTrace(format!(
            "measures for {} layers, network has {hidden} hidden layers",
            measures.layers.len()
        )));
    }
    let n_total = measures.neuron_count().max(1) as f64;

    let mut injected: Vec<Matrix> = Vec::with_capacity(hidden);
    let mut sds_out_grads: Vec<Matrix> = Vec::with_capacity(hidden);
    for k in 0..hidden {
        let y = &eds.layers[k].out;
        let ys = &sds.layers[k].out;
        let lm = &measures.layers[k];
        if lm.len() != y.cols() {
            return Err(Error::StaleTrace(format!("layer {k} measure count mismatch")));
        }
        let (b, width) = y.shape();
        let n_out = ys.rows();
        let mut dy = Matrix::zeros(b, width);
        let mut dys = Matrix::zeros(n_out, width);
        for i in 0..width {
            let coef = -0.5 * lm.grad_abs[i] / n_total;
            if coef == 0.0 {
                continue;
            }
            let col = y.column(i);
            let col_s = ys.column(i);
            let (m_e, v_e) = (mean(&col), variance(&col));
            let (m_s, v_s) = (mean(&col_s), variance(&col_s));
            let denom = v_s.max(VARIANCE_FLOOR);
            let h = hysp_from_variances(v_e, v_s);
            let dh_dratio = 2.0 * (1.0 - h * h);

            let d_ve = coef * dh_dratio / denom;
            for (ex, &v) in col.iter().enumerate() {
                let t = (2.0 * (v - 0.5).abs()).tanh();
                let sign = if v > 0.5 {
                    1.0
                } else if v < 0.5 {
                    -1.0
                } else {
                    0.0
                };
                let d_sat = coef * 2.0 * (1.0 - t * t) * sign / b as f64;
                let d_var = d_ve * 2.0 * (v - m_e) / b as f64;
                dy.set(ex, i, d_sat + d_var);
            }
            if v_s > VARIANCE_FLOOR {
                let d_vs = -coef * dh_dratio * v_e / (denom * denom);
                for (ex, &v) in col_s.iter().enumerate() {
                    dys.set(ex, i, d_vs * 2.0 * (v - m_s) / n_out as f64);
                }
            }
        }
        injected.push(dy);
        sds_out_grads.push(dys);
    }

    // Scrambled one-layer paths: parameter gradients of layer k plus the
    // gradient reaching the EDS values of layer k-1 through the scramble.
    let mut sds_grads = ParamGrads::zeros_like(params);
    for k in 0..hidden {
        let sl = &sds.layers[k];
        let layer = &params.layers[k];
        let mut dz = sds_out_grads[k].clone();
        for (d, &a) in dz.as_mut_slice().iter_mut().zip(sl.out.as_slice()) {
            *d *= activation_slope(a);
        }
        sds_grads.layers[k].weights = matmul_tn(&sl.filtered, &dz)?;
        sds_grads.layers[k].bias = column_sums(&dz);
        if k == 0 {
            continue;
        }
        let mut d_in = matmul_nt(&dz, &layer.weights)?;
        for (d, &f) in d_in.as_mut_slice().iter_mut().zip(sl.filtered.as_slice()) {
            *d *= params.filter.slope(f);
        }
        sds.indices[k].scatter_add(&d_in, &mut injected[k - 1])?;
    }

    let zero_out = Matrix::zeros(eds.batch_size(), params.num_classes());
    let mut grads = backward_with(params, eds, &zero_out, Some(&injected))?.grads;
    grads.add_scaled(&sds_grads, 1.0)?;
    Ok(grads)
}

/// Pearson correlation with population moments.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let (ma, mb) = (mean(a), mean(b));
    let (sa, sb) = (variance(a).sqrt(), variance(b).sqrt());
    let e_ab = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64;
    Ok(((e_ab - ma * mb) / (sa * sb)).clamp(-1.0, 1.0))
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("correlation", (a.len(), 1), (b.len(), 1)));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two samples".into()));
    }
    if variance(a) == 0.0 || variance(b) == 0.0 {
        return Err(Error::InvalidArgument("correlation of a zero-variance variable".into()));
    }
    Ok(())
}

/// Correlation with the product-of-means term replaced by the mean product
/// over a scrambled sample of `n_samples` rows.
pub fn sds_correlation(a: &[f64], b: &[f64], n_samples: usize, rng: &mut RngStream) -> Result<f64> {
    check_pair(a, b)?;
    let data = Matrix::from_vec(a.len(), 2, a.iter().zip(b).flat_map(|(&x, &y)| [x, y]).collect())?;
    let spec = CorrelationSpec::new(|x: &[f64]| x[0] * x[1], Comparison::MeanDifference, vec![0, 1]);
    let num = generalized_correlation(&spec, &data, n_samples, rng)?;
    Ok(num / (variance(a).sqrt() * variance(b).sqrt()))
}

/// Comparison of two empirical distributions (EDS first, SDS second).
pub enum Comparison {
    /// `mean(eds) − mean(sds)`; antisymmetric.
    MeanDifference,
    /// `var(eds) / max(var(sds), VARIANCE_FLOOR)`.
    VarianceRatio,
    /// `tanh(2 · VarianceRatio)`, the hysp form.
    HyperSpread,
    /// Two-sample Kolmogorov–Smirnov statistic; symmetric.
    Ks,
    Custom(Box<dyn Fn(&[f64], &[f64]) -> f64>),
}

impl Comparison {
    pub fn compare(&self, eds: &[f64], sds: &[f64]) -> f64 {
        match self {
            Comparison::MeanDifference => mean(eds) - mean(sds),
            Comparison::VarianceRatio => variance(eds) / variance(sds).max(VARIANCE_FLOOR),
            Comparison::HyperSpread => hysp_from_variances(variance(eds), variance(sds)),
            Comparison::Ks => ks_statistic(eds, sds),
            Comparison::Custom(g) => g(eds, sds),
        }
    }
}

/// A statistic `F` over selected variables and a comparison `G` of its
/// distribution under the data and under a scramble of the data.
pub struct CorrelationSpec {
    pub statistic: Box<dyn Fn(&[f64]) -> f64>,
    pub comparison: Comparison,
    pub variables: Vec<usize>,
}

impl CorrelationSpec {
    pub fn new(
        statistic: impl Fn(&[f64]) -> f64 + 'static,
        comparison: Comparison,
        variables: Vec<usize>,
    ) -> Self {
        CorrelationSpec {
            statistic: Box::new(statistic),
            comparison,
            variables,
        }
    }
}

/// `G(dist(F | data), dist(F | scrambled data))`, scrambling only the
/// selected variables with `n_samples` rows.
pub fn generalized_correlation(
    spec: &CorrelationSpec,
    data: &Matrix,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("generalized_correlation"));
    }
    if spec.variables.is_empty() {
        return Err(Error::InvalidArgument("no variables selected".into()));
    }
    if let Some(&bad) = spec.variables.iter().find(|&&v| v >= data.cols()) {
        return Err(Error::InvalidArgument(format!(
            "variable index {bad} out of range for {} columns",
            data.cols()
        )));
    }
    let selected = Matrix::from_raw(
        data.rows(),
        spec.variables.len(),
        (0..data.rows())
            .flat_map(|r| spec.variables.iter().map(move |&c| data.get(r, c)))
            .collect(),
    );
    let scrambled = scramble_columns(&selected, n_samples, rng)?;
    let f_eds: Vec<f64> = (0..selected.rows()).map(|r| (spec.statistic)(selected.row(r))).collect();
    let f_sds: Vec<f64> = (0..scrambled.rows()).map(|r| (spec.statistic)(scrambled.row(r))).collect();
    Ok(spec.comparison.compare(&f_eds, &f_sds))
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.is_empty() && b.is_empty() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// EDS and SDS histograms of one neuron's NCF over `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NcfHistogram {
    /// Hidden layer index (0-based).
    pub layer: usize,
    pub neuron: usize,
    pub eds: Vec<u64>,
    pub sds: Vec<u64>,
}

impl NcfHistogram {
    pub fn bins(&self) -> usize {
        self.eds.len()
    }

    /// `[lo, hi)` of bin `b`.
    pub fn bin_edges(bins: usize, b: usize) -> (f64, f64) {
        let w = 2.0 / bins as f64;
        (-1.0 + w * b as f64, -1.0 + w * (b + 1) as f64)
    }

    /// Variance of the binned distribution, using bin centers.
    pub fn binned_variance(counts: &[u64]) -> f64 {
        let bins = counts.len();
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let centers: Vec<f64> = (0..bins)
            .map(|b| {
                let (lo, hi) = NcfHistogram::bin_edges(bins, b);
                0.5 * (lo + hi)
            })
            .collect();
        let m = centers.iter().zip(counts).map(|(c, &n)| c * n as f64).sum::<f64>() / total as f64;
        centers
            .iter()
            .zip(counts)
            .map(|(c, &n)| (c - m) * (c - m) * n as f64)
            .sum::<f64>()
            / total as f64
    }
}

fn bin_of(value: f64, bins: usize) -> usize {
    let pos = ((value + 1.0) / 2.0 * bins as f64).floor();
    if pos.is_nan() || pos < 0.0 {
        0
    } else {
        (pos as usize).min(bins - 1)
    }
}

/// Per hidden neuron, histograms of `NCF = Σ_j w_ji·IF(x_j)` under the normal
/// trace and under the type B scramble. Values outside `[-1, 1]` (possible
/// only for unnormalized layers) land in the edge bins.
pub fn ncf_histograms(
    params: &NetworkParams,
    trace: &ActivationTrace,
    sds: &ScrambledTrace,
    bins: usize,
) -> Result<Vec<NcfHistogram>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be at least 1".into()));
    }
    trace.check_against(params)?;
    check_sds(trace, sds)?;
    let mut out = Vec::with_capacity(params.hidden_neurons());
    for k in 0..params.hidden_layers() {
        let layer = &params.layers[k];
        for i in 0..layer.fan_out() {
            let w = layer.neuron_weights(i);
            let mut h = NcfHistogram {
                layer: k,
                neuron: i,
                eds: vec![0; bins],
                sds: vec![0; bins],
            };
            let filtered = &trace.layers[k].filtered;
            for r in 0..filtered.rows() {
                h.eds[bin_of(dot(filtered.row(r), &w), bins)] += 1;
            }
            let filtered = &sds.layers[k].filtered;
            for r in 0..filtered.rows() {
                h.sds[bin_of(dot(filtered.row(r), &w), bins)] += 1;
            }
            out.push(h);
        }
    }
    Ok(out)
}

/// CSV rows `layer,neuron,condition,bin,lo,hi,count` (layers numbered from 1).
pub fn write_histograms_csv<W: Write>(hists: &[NcfHistogram], mut w: W) -> std::io::Result<()> {
    writeln!(w, "# schema: andnet-ncf-histogram v1")?;
    writeln!(w, "layer,neuron,condition,bin,lo,hi,count")?;
    for h in hists {
        for (cond, counts) in [("eds", &h.eds), ("sds", &h.sds)] {
            for (b, c) in counts.iter().enumerate() {
                let (lo, hi) = NcfHistogram::bin_edges(counts.len(), b);
                writeln!(w, "{},{},{},{},{},{},{}", h.layer + 1, h.neuron, cond, b, lo, hi, c)?;
            }
        }
    }
    Ok(())
}
