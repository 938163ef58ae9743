//! Scrambled data sets: per-variable resampling with replacement, which keeps
//! every column's marginal distribution but breaks the dependence between
//! columns.
//!
//! Type A scrambles only the raw input and propagates it through the whole
//! network. Type B scrambles the normal-propagation input of each layer
//! independently and pushes it through that one layer only.
//!
//! Random draws are consumed layer-major, then example, then variable. The
//! drawn row indices are kept in the trace so a scramble can be replayed
//! exactly on perturbed parameters.

use crate::error::{Error, Result};
use crate::network::{layer_forward, ActivationTrace, LayerTrace, NetworkParams};
use crate::numerics::{Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScrambleType {
    A,
    B,
}

/// Source-row index for every output cell of a scramble (`n_out × cols`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScrambleIndices {
    n_out: usize,
    cols: usize,
    source_rows: usize,
    rows: Vec<u32>,
}

impl ScrambleIndices {
    /// Draws `n_out × cols` row indices uniformly from `0..source_rows`,
    /// example-major.
    pub fn draw(source_rows: usize, n_out: usize, cols: usize, rng: &mut RngStream) -> Result<Self> {
        if source_rows == 0 || cols == 0 {
            return Err(Error::Empty("scramble"));
        }
        let mut rows = Vec::with_capacity(n_out * cols);
        for _ in 0..n_out * cols {
            rows.push(rng.rand_index(source_rows)? as u32);
        }
        Ok(ScrambleIndices {
            n_out,
            cols,
            source_rows,
            rows,
        })
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn source(&self, ex: usize, col: usize) -> usize {
        self.rows[ex * self.cols + col] as usize
    }

    /// Builds the scrambled matrix: `out(ex, c) = values(source(ex, c), c)`.
    pub fn apply(&self, values: &Matrix) -> Result<Matrix> {
        if values.rows() != self.source_rows || values.cols() != self.cols {
            return Err(Error::shape(
                "ScrambleIndices::apply",
                values.shape(),
                (self.source_rows, self.cols),
            ));
        }
        let data = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, &r)| values.get(r as usize, i % self.cols))
            .collect();
        Ok(Matrix::from_raw(self.n_out, self.cols, data))
    }

    /// Adjoint of [`apply`](Self::apply): accumulates `grad(ex, c)` into
    /// `target(source(ex, c), c)`.
    pub fn scatter_add(&self, grad: &Matrix, target: &mut Matrix) -> Result<()> {
        if grad.shape() != (self.n_out, self.cols) {
            return Err(Error::shape("ScrambleIndices::scatter_add", grad.shape(), (self.n_out, self.cols)));
        }
        if target.shape() != (self.source_rows, self.cols) {
            return Err(Error::shape(
                "ScrambleIndices::scatter_add",
                target.shape(),
                (self.source_rows, self.cols),
            ));
        }
        for (i, &g) in grad.as_slice().iter().enumerate() {
            let r = self.rows[i] as usize;
            let c = i % self.cols;
            let cur = target.get(r, c);
            target.set(r, c, cur + g);
        }
        Ok(())
    }
}

/// Resamples each column of `values` independently with replacement.
pub fn scramble_columns(values: &Matrix, n_out: usize, rng: &mut RngStream) -> Result<Matrix> {
    if values.is_empty() {
        return Err(Error::Empty("scramble_columns"));
    }
    ScrambleIndices::draw(values.rows(), n_out, values.cols(), rng)?.apply(values)
}

/// One layer of scrambled propagation.
#[derive(Clone, Debug, PartialEq)]
pub struct ScrambledLayer {
    /// The layer's (unfiltered) input as fed during scrambled propagation.
    pub input: Matrix,
    pub filtered: Matrix,
    pub pre: Matrix,
    pub out: Matrix,
}

impl ScrambledLayer {
    fn new(input: Matrix, lt: LayerTrace) -> Self {
        ScrambledLayer {
            input,
            filtered: lt.filtered,
            pre: lt.pre,
            out: lt.out,
        }
    }
}

/// Scrambled counterpart of an [`ActivationTrace`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScrambledTrace {
    pub kind: ScrambleType,
    pub layers: Vec<ScrambledLayer>,
    /// Type A: one entry (the raw input). Type B: one entry per layer.
    pub indices: Vec<ScrambleIndices>,
}

impl ScrambledTrace {
    pub fn sds_examples(&self) -> usize {
        self.layers.first().map_or(0, |l| l.out.rows())
    }

    /// SDS outputs of layer `k`.
    pub fn outputs(&self, k: usize) -> &Matrix {
        &self.layers[k].out
    }
}

/// Scrambles the raw input once and propagates it normally.
pub fn sds_type_a(
    params: &NetworkParams,
    batch: &Matrix,
    n_out: usize,
    rng: &mut RngStream,
) -> Result<ScrambledTrace> {
    if batch.is_empty() {
        return Err(Error::Empty("sds_type_a"));
    }
    if batch.cols() != params.input_size() {
        return Err(Error::shape("sds_type_a", batch.shape(), (params.input_size(), 1)));
    }
    let indices = ScrambleIndices::draw(batch.rows(), n_out, batch.cols(), rng)?;
    let mut input = indices.apply(batch)?;
    let mut layers = Vec::with_capacity(params.layers.len());
    for k in 0..params.layers.len() {
        let lt = layer_forward(params, k, &input)?;
        let next = lt.out.clone();
        layers.push(ScrambledLayer::new(input, lt));
        input = next;
    }
    Ok(ScrambledTrace {
        kind: ScrambleType::A,
        layers,
        indices: vec![indices],
    })
}

/// Scrambles each layer's normal-propagation input and propagates it through
/// that layer only.
pub fn sds_type_b(
    params: &NetworkParams,
    trace: &ActivationTrace,
    n_out: usize,
    rng: &mut RngStream,
) -> Result<ScrambledTrace> {
    trace.check_against(params)?;
    if trace.batch_size() == 0 {
        return Err(Error::Empty("sds_type_b"));
    }
    let indices = (0..params.layers.len())
        .map(|k| ScrambleIndices::draw(trace.batch_size(), n_out, params.layers[k].fan_in(), rng))
        .collect::<Result<Vec<_>>>()?;
    sds_type_b_with(params, trace, indices)
}

/// Type B propagation with pre-drawn indices (one per layer).
pub fn sds_type_b_with(
    params: &NetworkParams,
    trace: &ActivationTrace,
    indices: Vec<ScrambleIndices>,
) -> Result<ScrambledTrace> {
    trace.check_against(params)?;
    if indices.len() != params.layers.len() {
        return Err(Error::StaleTrace(format!(
            "{} scramble index sets for {} layers",
            indices.len(),
            params.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for (k, idx) in indices.iter().enumerate() {
        let input = idx.apply(trace.layer_input(k))?;
        let lt = layer_forward(params, k, &input)?;
        layers.push(ScrambledLayer::new(input, lt));
    }
    Ok(ScrambledTrace {
        kind: ScrambleType::B,
        layers,
        indices,
    })
}
