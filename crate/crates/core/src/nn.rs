//! Feed-forward network substrate: exact reverse-mode gradients and Adam.
//!
//! Everything upstream (the SAC agent, the dynamics ensemble) is written
//! against this module. Two API levels:
//!
//! - [`forward`] / [`backward`] — shape-checked single-sample contract,
//!   returns `Result`.
//! - [`forward_batch`] / [`backward_batch`] — allocation-free batched hot
//!   path over a reusable [`Workspace`]; shape misuse panics via `assert!`.
//!
//! All math is f64. Weights initialize uniform in ±1/√fan_in, biases at
//! zero, layer-norm gain/shift at 1/0.

use rand::Rng;

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Architecture of a dense multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub output_activation: OutputActivation,
    /// When set, each hidden layer's post-activation is standardized across
    /// features and rescaled by a learned gain/shift pair.
    pub layer_norm: bool,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Invalid("all MLP dims must be >= 1".into()));
        }
        if hidden_dims.is_empty() {
            return Err(Error::Invalid("hidden_dims must be nonempty".into()));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
            output_activation,
            layer_norm: false,
        })
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    /// Layer widths including input and output: `[in, h1, .., hk, out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_dims.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden_dims);
        d.push(self.output_dim);
        d
    }

    pub fn n_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    pub fn param_count(&self) -> usize {
        let dims = self.dims();
        let mut n = 0;
        for l in 0..self.n_layers() {
            n += dims[l] * dims[l + 1] + dims[l + 1];
            if self.layer_norm && l + 1 < self.n_layers() {
                n += 2 * dims[l + 1];
            }
        }
        n
    }

    /// Per-layer parameter offsets into the flat vector:
    /// `(w_start, b_start, ln_start, end)`; `ln_start == end` when the layer
    /// carries no norm parameters.
    pub(crate) fn layer_offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let dims = self.dims();
        let mut out = Vec::with_capacity(self.n_layers());
        let mut pos = 0;
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let w = pos;
            let b = w + fan_in * fan_out;
            let mut end = b + fan_out;
            let ln = end;
            if self.layer_norm && l + 1 < self.n_layers() {
                end += 2 * fan_out;
            }
            out.push((w, b, ln, end));
            pos = end;
        }
        out
    }
}

/// Flat parameter storage for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub values: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
        }
    }

    pub fn total_count(&self) -> usize {
        self.values.len()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Weights uniform in ±1/√fan_in, biases zero, layer-norm gain 1 / shift 0.
pub fn init_params<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> ParamSet {
    let dims = spec.dims();
    let mut values = vec![0.0; spec.param_count()];
    for (l, (w, b, ln, end)) in spec.layer_offsets().into_iter().enumerate() {
        let bound = 1.0 / (dims[l] as f64).sqrt();
        for v in &mut values[w..b] {
            *v = rng.random_range(-bound..bound);
        }
        // biases (at b..) stay zero
        let _ = b;
        if ln != end {
            let fan_out = dims[l + 1];
            for v in &mut values[ln..ln + fan_out] {
                *v = 1.0;
            }
        }
    }
    ParamSet { values }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn activation_apply(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Swish => x * sigmoid(x),
        Activation::Tanh => x.tanh(),
    }
}

fn activation_grad(kind: Activation, z: f64) -> f64 {
    match kind {
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Swish => {
            let s = sigmoid(z);
            s + z * s * (1.0 - s)
        }
        Activation::Tanh => {
            let t = z.tanh();
            1.0 - t * t
        }
    }
}

pub fn output_activation_apply(kind: OutputActivation, x: f64) -> f64 {
    match kind {
        OutputActivation::Identity => x,
        OutputActivation::Tanh => x.tanh(),
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = xi.mul_add(a, *yi);
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    debug_assert!(src.len() >= rows * cols && dst.len() >= rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// `z[r,:] += x[r,:] · W` row by row, all inner loops contiguous.
#[inline]
fn gemm_rows_axpy(x: &[f64], rows: usize, in_dim: usize, w: &[f64], out_dim: usize, z: &mut [f64]) {
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let zr = &mut z[r * out_dim..(r + 1) * out_dim];
        for (i, &xi) in xr.iter().enumerate() {
            axpy(zr, xi, &w[i * out_dim..(i + 1) * out_dim]);
        }
    }
}

/// `z += x · W` for row-major `x (rows × in)` and `W (in × out)`.
///
/// Batched forward/backward spend nearly all their time here; a 4-row ×
/// 8-column register-blocked microkernel amortizes the weight loads, with an
/// axpy fallback for narrow shapes and remainders.
fn gemm_accum(x: &[f64], rows: usize, in_dim: usize, w: &[f64], out_dim: usize, z: &mut [f64]) {
    debug_assert_eq!(x.len(), rows * in_dim);
    debug_assert_eq!(w.len(), in_dim * out_dim);
    debug_assert!(z.len() >= rows * out_dim);
    if out_dim < 8 || rows < 4 {
        gemm_rows_axpy(x, rows, in_dim, w, out_dim, z);
        return;
    }
    let rblocks = rows / 4;
    let jblocks = out_dim / 8;
    for rb in 0..rblocks {
        let r0 = rb * 4;
        for jb in 0..jblocks {
            let j0 = jb * 8;
            let mut acc = [[0.0f64; 8]; 4];
            for i in 0..in_dim {
                let wv = &w[i * out_dim + j0..i * out_dim + j0 + 8];
                for (rr, accr) in acc.iter_mut().enumerate() {
                    let a = x[(r0 + rr) * in_dim + i];
                    for k in 0..8 {
                        accr[k] = wv[k].mul_add(a, accr[k]);
                    }
                }
            }
            for (rr, accr) in acc.iter().enumerate() {
                let zr = &mut z[(r0 + rr) * out_dim + j0..(r0 + rr) * out_dim + j0 + 8];
                for k in 0..8 {
                    zr[k] += accr[k];
                }
            }
        }
        let jrem = jblocks * 8;
        if jrem < out_dim {
            for r in r0..r0 + 4 {
                let xr = &x[r * in_dim..(r + 1) * in_dim];
                let zr = &mut z[r * out_dim + jrem..(r + 1) * out_dim];
                for (i, &xi) in xr.iter().enumerate() {
                    axpy(zr, xi, &w[i * out_dim + jrem..(i + 1) * out_dim]);
                }
            }
        }
    }
    let rrem = rblocks * 4;
    if rrem < rows {
        gemm_rows_axpy(
            &x[rrem * in_dim..rows * in_dim],
            rows - rrem,
            in_dim,
            w,
            out_dim,
            &mut z[rrem * out_dim..rows * out_dim],
        );
    }
}

/// Reusable forward/backward buffers for one network at a bounded batch size.
#[derive(Debug, Clone)]
pub struct Workspace {
    max_batch: usize,
    rows: usize,
    x0: Vec<f64>,
    /// Pre-activations per layer.
    z: Vec<Vec<f64>>,
    /// Layer outputs (after activation and layer norm) per layer.
    y: Vec<Vec<f64>>,
    ln_xhat: Vec<Vec<f64>>,
    ln_inv_std: Vec<Vec<f64>>,
    gbuf_a: Vec<f64>,
    gbuf_b: Vec<f64>,
    xt: Vec<f64>,
    wt: Vec<f64>,
}

impl Workspace {
    pub fn new(spec: &MlpSpec, max_batch: usize) -> Self {
        let dims = spec.dims();
        let widest = *dims.iter().max().unwrap();
        Self {
            max_batch,
            rows: 0,
            x0: vec![0.0; max_batch * spec.input_dim],
            z: dims[1..].iter().map(|d| vec![0.0; max_batch * d]).collect(),
            y: dims[1..].iter().map(|d| vec![0.0; max_batch * d]).collect(),
            ln_xhat: dims[1..dims.len() - 1]
                .iter()
                .map(|d| vec![0.0; max_batch * d])
                .collect(),
            ln_inv_std: dims[1..dims.len() - 1]
                .iter()
                .map(|_| vec![0.0; max_batch])
                .collect(),
            gbuf_a: vec![0.0; max_batch * widest],
            gbuf_b: vec![0.0; max_batch * widest],
            xt: vec![0.0; max_batch * widest],
            wt: vec![0.0; widest * widest],
        }
    }

    pub fn max_batch(&self) -> usize {
        self.max_batch
    }

    /// Final network outputs from the most recent forward pass.
    pub fn output(&self) -> &[f64] {
        let last = self.y.last().unwrap();
        &last[..self.rows * (last.len() / self.max_batch)]
    }
}

/// Batched forward pass; caches everything [`backward_batch`] needs.
/// Input is row-major `rows × input_dim`. Panics on shape misuse.
pub fn forward_batch<'w>(
    spec: &MlpSpec,
    params: &ParamSet,
    input: &[f64],
    rows: usize,
    ws: &'w mut Workspace,
) -> &'w [f64] {
    assert!(rows >= 1 && rows <= ws.max_batch, "batch rows out of range");
    assert_eq!(input.len(), rows * spec.input_dim, "input shape mismatch");
    assert_eq!(params.values.len(), spec.param_count(), "param count");
    ws.rows = rows;
    ws.x0[..input.len()].copy_from_slice(input);

    let dims = spec.dims();
    let offsets = spec.layer_offsets();
    let n_layers = spec.n_layers();

    for l in 0..n_layers {
        let (in_dim, out_dim) = (dims[l], dims[l + 1]);
        let (wo, bo, ln, _) = offsets[l];
        let w = &params.values[wo..wo + in_dim * out_dim];
        let b = &params.values[bo..bo + out_dim];

        // z = x·W + b with W stored (in × out)
        for r in 0..rows {
            ws.z[l][r * out_dim..(r + 1) * out_dim].copy_from_slice(b);
        }
        let x: &[f64] = if l == 0 {
            &ws.x0[..rows * in_dim]
        } else {
            &ws.y[l - 1][..rows * in_dim]
        };
        gemm_accum(x, rows, in_dim, w, out_dim, &mut ws.z[l]);

        if l + 1 < n_layers {
            // hidden: activation, then optional layer norm
            for i in 0..rows * out_dim {
                ws.y[l][i] = activation_apply(spec.activation, ws.z[l][i]);
            }
            if spec.layer_norm {
                let gamma = &params.values[ln..ln + out_dim];
                let beta = &params.values[ln + out_dim..ln + 2 * out_dim];
                for r in 0..rows {
                    let h = &mut ws.y[l][r * out_dim..(r + 1) * out_dim];
                    let mean = h.iter().sum::<f64>() / out_dim as f64;
                    let var =
                        h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / out_dim as f64;
                    let inv_std = 1.0 / (var + LN_EPS).sqrt();
                    ws.ln_inv_std[l][r] = inv_std;
                    let xhat = &mut ws.ln_xhat[l][r * out_dim..(r + 1) * out_dim];
                    for j in 0..out_dim {
                        xhat[j] = (h[j] - mean) * inv_std;
                        h[j] = gamma[j] * xhat[j] + beta[j];
                    }
                }
            }
        } else {
            for i in 0..rows * out_dim {
                ws.y[l][i] = output_activation_apply(spec.output_activation, ws.z[l][i]);
            }
        }
    }
    ws.output()
}

/// Batched reverse pass over the state cached by [`forward_batch`].
///
/// `upstream` is dL/d(output), row-major `rows × output_dim`. Parameter
/// gradients are *accumulated* into `grads` when provided; `d_input`, when
/// provided, is overwritten with dL/d(input).
pub fn backward_batch(
    spec: &MlpSpec,
    params: &ParamSet,
    ws: &mut Workspace,
    upstream: &[f64],
    mut grads: Option<&mut ParamSet>,
    mut d_input: Option<&mut [f64]>,
) {
    let rows = ws.rows;
    assert_eq!(upstream.len(), rows * spec.output_dim, "upstream shape");
    if let Some(g) = grads.as_ref() {
        assert_eq!(g.values.len(), spec.param_count(), "grad shape");
    }
    if let Some(dx) = d_input.as_ref() {
        assert_eq!(dx.len(), rows * spec.input_dim, "d_input shape");
    }

    let dims = spec.dims();
    let offsets = spec.layer_offsets();
    let n_layers = spec.n_layers();

    // dz for the output layer
    {
        let out_dim = spec.output_dim;
        let gb = &mut ws.gbuf_a[..rows * out_dim];
        match spec.output_activation {
            OutputActivation::Identity => gb.copy_from_slice(upstream),
            OutputActivation::Tanh => {
                let yout = &ws.y[n_layers - 1];
                for i in 0..rows * out_dim {
                    gb[i] = upstream[i] * (1.0 - yout[i] * yout[i]);
                }
            }
        }
    }

    for l in (0..n_layers).rev() {
        let (in_dim, out_dim) = (dims[l], dims[l + 1]);
        let (wo, bo, _, _) = offsets[l];
        let w = &params.values[wo..wo + in_dim * out_dim];

        let need_dx = l > 0 || d_input.is_some();
        // dz currently lives in gbuf_a; build d(prev output) into gbuf_b
        if need_dx {
            ws.gbuf_b[..rows * in_dim].fill(0.0);
        }
        let x: &[f64] = if l == 0 {
            &ws.x0[..rows * in_dim]
        } else {
            &ws.y[l - 1][..rows * in_dim]
        };
        if let Some(g) = grads.as_mut() {
            // dW += xᵀ · dz, via the same blocked kernel on transposed x
            transpose(x, rows, in_dim, &mut ws.xt);
            gemm_accum(
                &ws.xt[..in_dim * rows],
                in_dim,
                rows,
                &ws.gbuf_a[..rows * out_dim],
                out_dim,
                &mut g.values[wo..wo + in_dim * out_dim],
            );
            for r in 0..rows {
                axpy(
                    &mut g.values[bo..bo + out_dim],
                    1.0,
                    &ws.gbuf_a[r * out_dim..(r + 1) * out_dim],
                );
            }
        }
        if need_dx {
            // dx += dz · Wᵀ
            transpose(w, in_dim, out_dim, &mut ws.wt);
            gemm_accum(
                &ws.gbuf_a[..rows * out_dim],
                rows,
                out_dim,
                &ws.wt[..out_dim * in_dim],
                in_dim,
                &mut ws.gbuf_b,
            );
        }

        if l == 0 {
            if let Some(dx) = d_input.as_mut() {
                dx.copy_from_slice(&ws.gbuf_b[..rows * in_dim]);
            }
            break;
        }

        // gbuf_b holds dL/d(y_{l-1}); push through layer norm and activation
        // to produce dz_{l-1} in gbuf_a.
        let prev = l - 1;
        let pdim = in_dim;
        if spec.layer_norm {
            let (_, _, pln, _) = offsets[prev];
            let gamma = &params.values[pln..pln + pdim];
            for r in 0..rows {
                let dy = &mut ws.gbuf_b[r * pdim..(r + 1) * pdim];
                let xhat = &ws.ln_xhat[prev][r * pdim..(r + 1) * pdim];
                let inv_std = ws.ln_inv_std[prev][r];
                if let Some(g) = grads.as_mut() {
                    for j in 0..pdim {
                        g.values[pln + j] += dy[j] * xhat[j];
                        g.values[pln + pdim + j] += dy[j];
                    }
                }
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..pdim {
                    let hg = gamma[j] * dy[j];
                    dy[j] = hg;
                    m1 += hg;
                    m2 += hg * xhat[j];
                }
                m1 /= pdim as f64;
                m2 /= pdim as f64;
                for j in 0..pdim {
                    dy[j] = (dy[j] - m1 - xhat[j] * m2) * inv_std;
                }
            }
        }
        let zprev = &ws.z[prev];
        for i in 0..rows * pdim {
            ws.gbuf_a[i] = ws.gbuf_b[i] * activation_grad(spec.activation, zprev[i]);
        }
    }
}

/// Single-sample forward pass (shape-checked contract).
pub fn forward(spec: &MlpSpec, params: &ParamSet, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != spec.input_dim {
        return Err(Error::DimMismatch {
            what: "forward input",
            expected: spec.input_dim,
            got: input.len(),
        });
    }
    let mut ws = Workspace::new(spec, 1);
    Ok(forward_batch(spec, params, input, 1, &mut ws).to_vec())
}

/// Single-sample reverse pass: exact gradients of `output · upstream` with
/// respect to parameters and input.
pub fn backward(
    spec: &MlpSpec,
    params: &ParamSet,
    input: &[f64],
    upstream: &[f64],
) -> Result<(ParamSet, Vec<f64>)> {
    if input.len() != spec.input_dim {
        return Err(Error::DimMismatch {
            what: "backward input",
            expected: spec.input_dim,
            got: input.len(),
        });
    }
    if upstream.len() != spec.output_dim {
        return Err(Error::DimMismatch {
            what: "backward upstream",
            expected: spec.output_dim,
            got: upstream.len(),
        });
    }
    let mut ws = Workspace::new(spec, 1);
    forward_batch(spec, params, input, 1, &mut ws);
    let mut grads = ParamSet::zeros(spec.param_count());
    let mut d_input = vec![0.0; spec.input_dim];
    backward_batch(
        spec,
        params,
        &mut ws,
        upstream,
        Some(&mut grads),
        Some(&mut d_input),
    );
    Ok((grads, d_input))
}

/// Adam optimizer state with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// One Adam update: `p -= lr · m̂ / (√v̂ + eps)`.
    pub fn adam_step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        if params.values.len() != self.first_moment.len()
            || grads.values.len() != self.first_moment.len()
        {
            return Err(Error::DimMismatch {
                what: "adam_step",
                expected: self.first_moment.len(),
                got: grads.values.len(),
            });
        }
        if !grads.values.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("adam_step gradients".into()));
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for i in 0..params.values.len() {
            let g = grads.values[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            self.second_moment[i] =
                self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / bc1;
            let v_hat = self.second_moment[i] / bc2;
            params.values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn activation_values() {
        assert_eq!(activation_apply(Activation::Swish, 0.0), 0.0);
        assert_eq!(activation_apply(Activation::Relu, -2.0), 0.0);
        // closed-form sigmoid evaluation: 1/(1+e^{-1})
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((activation_apply(Activation::Swish, 1.0) - expect).abs() < 1e-15);
        assert!((expect - 0.731058578).abs() < 1e-8);
    }

    #[test]
    fn forward_zero_weights_gives_output_activation_of_bias() {
        let spec = MlpSpec::new(
            2,
            vec![3],
            2,
            Activation::Relu,
            OutputActivation::Tanh,
        )
        .unwrap();
        let mut params = ParamSet::zeros(spec.param_count());
        // set output biases to (0.5, -0.25)
        let offsets = spec.layer_offsets();
        let (_, bo, _, _) = offsets[1];
        params.values[bo] = 0.5;
        params.values[bo + 1] = -0.25;
        let out = forward(&spec, &params, &[1.0, -1.0]).unwrap();
        assert!((out[0] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((out[1] - (-0.25f64).tanh()).abs() < 1e-15);
    }

    #[test]
    fn forward_identity_single_layer_relu() {
        // one hidden layer acting as identity, output layer identity weights
        let spec = MlpSpec::new(
            2,
            vec![2],
            2,
            Activation::Relu,
            OutputActivation::Identity,
        )
        .unwrap();
        let mut params = ParamSet::zeros(spec.param_count());
        let offsets = spec.layer_offsets();
        // hidden W = I
        let (w0, _, _, _) = offsets[0];
        params.values[w0] = 1.0;
        params.values[w0 + 3] = 1.0;
        // output W = I
        let (w1, _, _, _) = offsets[1];
        params.values[w1] = 1.0;
        params.values[w1 + 3] = 1.0;
        let out = forward(&spec, &params, &[1.0, -1.0]).unwrap();
        assert_eq!(out, vec![1.0, 0.0]);
    }

    /// Independent naive forward pass used as an oracle.
    fn naive_forward(spec: &MlpSpec, params: &ParamSet, input: &[f64]) -> Vec<f64> {
        let dims = spec.dims();
        let mut x = input.to_vec();
        let mut pos = 0;
        for l in 0..spec.n_layers() {
            let (fi, fo) = (dims[l], dims[l + 1]);
            let mut z = vec![0.0; fo];
            for j in 0..fo {
                let mut s = 0.0;
                for i in 0..fi {
                    s += params.values[pos + i * fo + j] * x[i];
                }
                z[j] = s;
            }
            pos += fi * fo;
            for (j, zj) in z.iter_mut().enumerate() {
                *zj += params.values[pos + j];
            }
            pos += fo;
            if l + 1 < spec.n_layers() {
                for zj in z.iter_mut() {
                    *zj = activation_apply(spec.activation, *zj);
                }
                if spec.layer_norm {
                    let mean = z.iter().sum::<f64>() / fo as f64;
                    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / fo as f64;
                    let s = (var + LN_EPS).sqrt();
                    for (j, zj) in z.iter_mut().enumerate() {
                        *zj = params.values[pos + j] * ((*zj - mean) / s)
                            + params.values[pos + fo + j];
                    }
                    pos += 2 * fo;
                }
            } else {
                for zj in z.iter_mut() {
                    *zj = output_activation_apply(spec.output_activation, *zj);
                }
            }
            x = z;
        }
        x
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut r = rng(7);
        for act in [Activation::Relu, Activation::Swish, Activation::Tanh] {
            let spec =
                MlpSpec::new(3, vec![16], 2, act, OutputActivation::Identity).unwrap();
            let params = init_params(&spec, &mut r);
            for _ in 0..20 {
                let input: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
                let got = forward(&spec, &params, &input).unwrap();
                let want = naive_forward(&spec, &params, &input);
                for (g, w) in got.iter().zip(&want) {
                    let rel = (g - w).abs() / w.abs().max(1e-9);
                    assert!(rel < 1e-6, "got {g}, want {w}");
                }
            }
        }
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let mut r = rng(3);
        let spec =
            MlpSpec::new(3, vec![8], 2, Activation::Swish, OutputActivation::Identity).unwrap();
        let params = init_params(&spec, &mut r);
        let (g, dx) = backward(&spec, &params, &[0.3, -0.2, 0.9], &[0.0, 0.0]).unwrap();
        assert!(g.values.iter().all(|v| *v == 0.0));
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_linear_layer_weight_grad_is_input() {
        // hidden layer wired as identity (relu, positive input), loss = output_0
        let spec = MlpSpec::new(
            2,
            vec![2],
            1,
            Activation::Relu,
            OutputActivation::Identity,
        )
        .unwrap();
        let mut params = ParamSet::zeros(spec.param_count());
        let offsets = spec.layer_offsets();
        let (w0, _, _, _) = offsets[0];
        params.values[w0] = 1.0;
        params.values[w0 + 3] = 1.0;
        let input = [0.7, 0.3];
        let (g, _) = backward(&spec, &params, &input, &[1.0]).unwrap();
        let (w1, _, _, _) = offsets[1];
        // output weight row gradient = hidden activations = input
        assert!((g.values[w1] - 0.7).abs() < 1e-15);
        assert!((g.values[w1 + 1] - 0.3).abs() < 1e-15);
    }

    /// Central finite differences of `f` at `params[i]`.
    fn fd_grad(
        params: &mut ParamSet,
        i: usize,
        h: f64,
        f: &mut dyn FnMut(&ParamSet) -> f64,
    ) -> f64 {
        let orig = params.values[i];
        params.values[i] = orig + h;
        let plus = f(params);
        params.values[i] = orig - h;
        let minus = f(params);
        params.values[i] = orig;
        (plus - minus) / (2.0 * h)
    }

    fn gradcheck(spec: &MlpSpec, seed: u64, probes: usize) {
        let mut r = rng(seed);
        let mut params = init_params(spec, &mut r);
        let input: Vec<f64> = (0..spec.input_dim)
            .map(|_| r.random_range(-1.5..1.5))
            .collect();
        let upstream: Vec<f64> = (0..spec.output_dim)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        let (g, dx) = backward(spec, &params, &input, &upstream).unwrap();
        let mut f = |p: &ParamSet| {
            let out = forward(spec, p, &input).unwrap();
            out.iter().zip(&upstream).map(|(o, u)| o * u).sum::<f64>()
        };
        for _ in 0..probes {
            let i = r.random_range(0..params.values.len());
            let numeric = fd_grad(&mut params, i, 1e-4, &mut f);
            let analytic = g.values[i];
            let rel = (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                rel <= 1e-4,
                "param {i}: analytic {analytic} vs numeric {numeric}"
            );
        }
        // input gradients
        for i in 0..input.len() {
            let mut inp = input.clone();
            let h = 1e-4;
            inp[i] += h;
            let plus: f64 = forward(spec, &params, &inp)
                .unwrap()
                .iter()
                .zip(&upstream)
                .map(|(o, u)| o * u)
                .sum();
            inp[i] -= 2.0 * h;
            let minus: f64 = forward(spec, &params, &inp)
                .unwrap()
                .iter()
                .zip(&upstream)
                .map(|(o, u)| o * u)
                .sum();
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (dx[i] - numeric).abs() / numeric.abs().max(dx[i].abs()).max(1e-6);
            assert!(rel <= 1e-4, "input {i}: {} vs {numeric}", dx[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // smooth activations check cleanly; relu probes avoid the kink with
        // overwhelming probability at random inputs
        let swish = MlpSpec::new(4, vec![9, 7], 3, Activation::Swish, OutputActivation::Tanh)
            .unwrap();
        gradcheck(&swish, 11, 100);
        let tanh = MlpSpec::new(3, vec![8], 2, Activation::Tanh, OutputActivation::Identity)
            .unwrap();
        gradcheck(&tanh, 12, 100);
        let ln = MlpSpec::new(4, vec![8, 6], 2, Activation::Swish, OutputActivation::Identity)
            .unwrap()
            .with_layer_norm(true);
        gradcheck(&ln, 13, 100);
    }

    #[test]
    fn batch_forward_agrees_with_single() {
        let mut r = rng(21);
        let spec = MlpSpec::new(3, vec![10, 10], 4, Activation::Swish, OutputActivation::Identity)
            .unwrap()
            .with_layer_norm(true);
        let params = init_params(&spec, &mut r);
        let rows = 5;
        let x: Vec<f64> = (0..rows * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut ws = Workspace::new(&spec, rows);
        let out = forward_batch(&spec, &params, &x, rows, &mut ws).to_vec();
        for b in 0..rows {
            let single = forward(&spec, &params, &x[b * 3..(b + 1) * 3]).unwrap();
            for j in 0..4 {
                assert!((out[b * 4 + j] - single[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_hidden_features() {
        // gain 1, shift 0: post-norm features have zero mean, unit variance
        let mut r = rng(5);
        let spec = MlpSpec::new(3, vec![16], 2, Activation::Relu, OutputActivation::Identity)
            .unwrap()
            .with_layer_norm(true);
        let params = init_params(&spec, &mut r);
        let x = [0.4, -1.2, 0.8];
        let mut ws = Workspace::new(&spec, 1);
        forward_batch(&spec, &params, &x, 1, &mut ws);
        let h = &ws.y[0][..16];
        let mean = h.iter().sum::<f64>() / 16.0;
        let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut params = ParamSet {
            values: vec![1.0, -2.0, 0.5],
        };
        let grads = ParamSet::zeros(3);
        let mut adam = AdamState::new(3, 3e-4, 0.9, 0.999, 1.5e-4);
        adam.adam_step(&mut params, &grads).unwrap();
        assert_eq!(params.values, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn adam_first_step_approximates_signed_lr() {
        // with eps much smaller than |g|, the bias-corrected first step is
        // -lr * g/|g|
        let mut params = ParamSet { values: vec![0.0] };
        let grads = ParamSet { values: vec![0.37] };
        let lr = 1e-3;
        let mut adam = AdamState::new(1, lr, 0.9, 0.999, 1e-12);
        adam.adam_step(&mut params, &grads).unwrap();
        assert!((params.values[0] + lr).abs() < 1e-9);
    }

    #[test]
    fn adam_two_steps_match_hand_recurrence() {
        let g = 0.25;
        let (lr, b1, b2, eps) = (3e-4, 0.9, 0.999, 1.5e-4);
        let mut params = ParamSet { values: vec![1.0] };
        let grads = ParamSet { values: vec![g] };
        let mut adam = AdamState::new(1, lr, b1, b2, eps);
        adam.adam_step(&mut params, &grads).unwrap();
        adam.adam_step(&mut params, &grads).unwrap();

        // hand recurrence
        let mut p = 1.0f64;
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((params.values[0] - p).abs() < 1e-10);
    }

    #[test]
    fn adam_rejects_non_finite_grads() {
        let mut params = ParamSet { values: vec![0.0] };
        let grads = ParamSet {
            values: vec![f64::NAN],
        };
        let mut adam = AdamState::new(1, 1e-3, 0.9, 0.999, 1e-8);
        assert!(adam.adam_step(&mut params, &grads).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = MlpSpec::new(3, vec![8], 2, Activation::Swish, OutputActivation::Identity)
            .unwrap();
        let run = |seed: u64| {
            let mut r = rng(seed);
            let mut params = init_params(&spec, &mut r);
            let mut adam = AdamState::new(spec.param_count(), 1e-3, 0.9, 0.999, 1e-8);
            let input = [0.1, 0.2, 0.3];
            for _ in 0..5 {
                let (g, _) = backward(&spec, &params, &input, &[1.0, -1.0]).unwrap();
                adam.adam_step(&mut params, &g).unwrap();
            }
            params.values
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn finite_outputs_for_finite_inputs() {
        let mut r = rng(99);
        let spec = MlpSpec::new(5, vec![12, 12], 3, Activation::Swish, OutputActivation::Tanh)
            .unwrap();
        let params = init_params(&spec, &mut r);
        for _ in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| r.random_range(-100.0..100.0)).collect();
            let out = forward(&spec, &params, &x).unwrap();
            assert!(out.iter().all(|v| v.is_finite()));
            let up: Vec<f64> = (0..3).map(|_| r.random_range(-10.0..10.0)).collect();
            let (g, dx) = backward(&spec, &params, &x, &up).unwrap();
            assert!(g.all_finite());
            assert!(dx.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn dimension_mismatch_errors() {
        let spec = MlpSpec::new(3, vec![4], 2, Activation::Relu, OutputActivation::Identity)
            .unwrap();
        let params = ParamSet::zeros(spec.param_count());
        assert!(forward(&spec, &params, &[1.0]).is_err());
        assert!(backward(&spec, &params, &[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(0, vec![4], 2, Activation::Relu, OutputActivation::Identity).is_err());
        assert!(MlpSpec::new(3, vec![], 2, Activation::Relu, OutputActivation::Identity).is_err());
        assert!(MlpSpec::new(3, vec![4, 0], 2, Activation::Relu, OutputActivation::Identity)
            .is_err());
    }
}
