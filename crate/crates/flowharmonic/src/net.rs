//! The velocity-field network: a plain MLP with Swish hidden activations that
//! maps `(theta, t)` to a velocity in parameter space.
//!
//! Everything the training loop and the ODE integrator need is implemented
//! directly on the parameter arrays: batched forward evaluation, reverse-mode
//! gradients of the flow-matching loss, and forward-mode tangent propagation
//! for Jacobian-vector products and the exact Jacobian trace. Tangents are
//! propagated alongside the primal activations in one row-blocked matrix per
//! layer, so each layer costs a single GEMM.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use ndarray::linalg::general_mat_mul;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, swish_and_prime};

/// Feed-forward velocity network. The input layer takes `dim + 1` values
/// (position concatenated with the scalar time), hidden layers have `width`
/// units with Swish activations, and the affine output layer produces `dim`
/// values. `depth` counts hidden layers, so there are `depth + 1` weight
/// matrices, stored in `(input, output)` orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    dim: usize,
    depth: usize,
    width: usize,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Parameter-shaped buffer used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(net: &VelocityNet) -> Self {
        GradBuffer {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn first_non_finite_layer(&self) -> Option<usize> {
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
                return Some(l);
            }
        }
        None
    }
}

/// How to seed the tangent rows entering the first layer.
pub(crate) enum TangentInit<'a> {
    /// The `dim` canonical basis directions per sample (exact Jacobian trace).
    Basis,
    /// Arbitrary directions, shape `(n_samples * k, dim)`, sample-major.
    Rows(&'a Array2<f64>),
}

impl VelocityNet {
    /// Build a network with weights drawn uniformly from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` and zero biases. Deterministic for
    /// a given seed.
    pub fn init(dim: usize, depth: usize, width: usize, seed: u64) -> Result<Self> {
        if dim == 0 || depth == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "network sizes must be positive (dim={dim}, depth={depth}, width={width})"
            )));
        }
        let mut net = Self::zeroed(dim, depth, width)?;
        let mut rng = math::stream_rng(seed, &[math::STREAM_NET_INIT]);
        for w in &mut net.weights {
            let bound = 1.0 / (w.nrows() as f64).sqrt();
            for v in w.iter_mut() {
                *v = (2.0 * rng.random::<f64>() - 1.0) * bound;
            }
        }
        Ok(net)
    }

    /// All-zero network of the given shape (the identity flow).
    pub fn zeroed(dim: usize, depth: usize, width: usize) -> Result<Self> {
        if dim == 0 || depth == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "network sizes must be positive (dim={dim}, depth={depth}, width={width})"
            )));
        }
        let mut weights = Vec::with_capacity(depth + 1);
        let mut biases = Vec::with_capacity(depth + 1);
        weights.push(Array2::zeros((dim + 1, width)));
        biases.push(Array1::zeros(width));
        for _ in 1..depth {
            weights.push(Array2::zeros((width, width)));
            biases.push(Array1::zeros(width));
        }
        weights.push(Array2::zeros((width, dim)));
        biases.push(Array1::zeros(dim));
        Ok(VelocityNet { dim, depth, width, weights, biases })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Replace one weight matrix (for hand-built fields in tests and tools).
    pub fn set_weight(&mut self, layer: usize, w: Array2<f64>) -> Result<()> {
        if w.raw_dim() != self.weights[layer].raw_dim() {
            return Err(Error::InvalidArgument(format!(
                "weight shape {:?} does not match layer {layer} shape {:?}",
                w.raw_dim(),
                self.weights[layer].raw_dim()
            )));
        }
        self.weights[layer] = w;
        Ok(())
    }

    pub fn set_bias(&mut self, layer: usize, b: Array1<f64>) -> Result<()> {
        if b.raw_dim() != self.biases[layer].raw_dim() {
            return Err(Error::InvalidArgument(format!(
                "bias shape {:?} does not match layer {layer} shape {:?}",
                b.raw_dim(),
                self.biases[layer].raw_dim()
            )));
        }
        self.biases[layer] = b;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Evaluate `v_t(theta)` for a single point.
    pub fn forward(&self, theta: &[f64], t: f64) -> Result<Vec<f64>> {
        if theta.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: theta.len() });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        let pos = Array2::from_shape_vec((1, self.dim), theta.to_vec()).unwrap();
        let mut vel = Array2::zeros((1, self.dim));
        self.velocity_batch(&pos.view(), t, &mut vel);
        Ok(vel.row(0).to_vec())
    }

    /// Batched velocity at a shared time (no tangents, no caches).
    pub fn velocity_batch(&self, pos: &ArrayView2<f64>, t: f64, vel: &mut Array2<f64>) {
        let n = pos.nrows();
        debug_assert_eq!(pos.ncols(), self.dim);
        debug_assert_eq!(vel.raw_dim(), ndarray::Dim([n, self.dim]));
        let x = self.augment_time(pos, t);
        let mut act = Array2::zeros((n, self.width));
        general_mat_mul(1.0, &x.view(), &self.weights[0].view(), 0.0, &mut act);
        self.apply_bias_swish(&mut act, 0);
        let mut next = Array2::zeros((n, self.width));
        for l in 1..self.depth {
            general_mat_mul(1.0, &act.view(), &self.weights[l].view(), 0.0, &mut next);
            std::mem::swap(&mut act, &mut next);
            self.apply_bias_swish(&mut act, l);
        }
        general_mat_mul(1.0, &act.view(), &self.weights[self.depth].view(), 0.0, vel);
        let out_bias = &self.biases[self.depth];
        for mut row in vel.rows_mut() {
            row += out_bias;
        }
    }

    /// Jacobian-vector product `(dv/dtheta) . direction` at one point, with
    /// `t` held fixed, by forward-mode tangent propagation.
    pub fn input_jvp(&self, theta: &[f64], t: f64, direction: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: theta.len() });
        }
        if direction.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: direction.len() });
        }
        let pos = Array2::from_shape_vec((1, self.dim), theta.to_vec()).unwrap();
        let dirs = Array2::from_shape_vec((1, self.dim), direction.to_vec()).unwrap();
        let mut vel = Array2::zeros((1, self.dim));
        let mut out = Array2::zeros((1, self.dim));
        self.propagate_tangents(&pos.view(), t, TangentInit::Rows(&dirs), 1, &mut vel, &mut out);
        Ok(out.row(0).to_vec())
    }

    /// Batched velocity and exact divergence (Jacobian trace) at a shared
    /// time. The trace is the sum over basis directions of the matching JVP
    /// component, computed by propagating all `dim` tangents together.
    pub fn velocity_and_divergence(
        &self,
        pos: &ArrayView2<f64>,
        t: f64,
        vel: &mut Array2<f64>,
        div: &mut Array1<f64>,
    ) {
        let n = pos.nrows();
        let d = self.dim;
        let mut out_tangents = Array2::zeros((n * d, d));
        self.propagate_tangents(pos, t, TangentInit::Basis, d, vel, &mut out_tangents);
        for s in 0..n {
            let mut trace = 0.0;
            for i in 0..d {
                trace += out_tangents[[s * d + i, i]];
            }
            div[s] = trace;
        }
    }

    /// Batched velocity plus the Hutchinson quadratic form
    /// `mean_p z_p^T (dv/dtheta) z_p` for per-sample probe rows
    /// (`probes` rows per sample, sample-major).
    pub fn velocity_and_probe_quadratic(
        &self,
        pos: &ArrayView2<f64>,
        t: f64,
        probe_rows: &Array2<f64>,
        probes: usize,
        vel: &mut Array2<f64>,
        quad: &mut Array1<f64>,
    ) {
        let n = pos.nrows();
        let d = self.dim;
        debug_assert_eq!(probe_rows.nrows(), n * probes);
        let mut out_tangents = Array2::zeros((n * probes, d));
        self.propagate_tangents(pos, t, TangentInit::Rows(probe_rows), probes, vel, &mut out_tangents);
        for s in 0..n {
            let mut acc = 0.0;
            for p in 0..probes {
                let row = s * probes + p;
                let mut dot = 0.0;
                for i in 0..d {
                    dot += probe_rows[[row, i]] * out_tangents[[row, i]];
                }
                acc += dot;
            }
            quad[s] = acc / probes as f64;
        }
    }

    /// Flow-matching loss and its exact parameter gradient for a batch of
    /// `(theta0, theta1, t)` triples. The loss is the batch mean of
    /// `|| v_t(theta_t) - (theta1 - theta0) ||^2` along the straight-line
    /// interpolant `theta_t = (1 - t) theta0 + t theta1`.
    pub fn loss_and_gradient(
        &self,
        theta0: &ArrayView2<f64>,
        theta1: &ArrayView2<f64>,
        ts: &ArrayView1<f64>,
    ) -> Result<(f64, GradBuffer)> {
        let b = theta0.nrows();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if theta1.nrows() != b || ts.len() != b {
            return Err(Error::InvalidArgument(format!(
                "batch sizes disagree: {} theta0, {} theta1, {} t",
                b,
                theta1.nrows(),
                ts.len()
            )));
        }
        if theta0.ncols() != self.dim || theta1.ncols() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: theta0.ncols() });
        }

        // Interpolated inputs and regression targets.
        let mut x = Array2::<f64>::zeros((b, self.dim + 1));
        let mut target = Array2::<f64>::zeros((b, self.dim));
        for s in 0..b {
            let t = ts[s];
            for j in 0..self.dim {
                let t0 = theta0[[s, j]];
                let t1 = theta1[[s, j]];
                x[[s, j]] = (1.0 - t) * t0 + t * t1;
                target[[s, j]] = t1 - t0;
            }
            x[[s, self.dim]] = t;
        }

        // Forward pass, caching post-activations and swish derivatives.
        let mut activations: Vec<Array2<f64>> = Vec::with_capacity(self.depth);
        let mut sprimes: Vec<Array2<f64>> = Vec::with_capacity(self.depth);
        let mut act = Array2::<f64>::zeros((b, self.width));
        general_mat_mul(1.0, &x.view(), &self.weights[0].view(), 0.0, &mut act);
        let sp = self.bias_swish_with_prime(&mut act, 0);
        activations.push(act.clone());
        sprimes.push(sp);
        for l in 1..self.depth {
            let mut next = Array2::<f64>::zeros((b, self.width));
            general_mat_mul(1.0, &act.view(), &self.weights[l].view(), 0.0, &mut next);
            act = next;
            let sp = self.bias_swish_with_prime(&mut act, l);
            activations.push(act.clone());
            sprimes.push(sp);
        }
        let mut v = Array2::<f64>::zeros((b, self.dim));
        general_mat_mul(1.0, &act.view(), &self.weights[self.depth].view(), 0.0, &mut v);
        let out_bias = &self.biases[self.depth];
        for mut row in v.rows_mut() {
            row += out_bias;
        }

        // Residuals and loss.
        let mut residual = v;
        residual -= &target;
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / b as f64;

        // Backward pass.
        let mut grad = GradBuffer::zeros_like(self);
        let mut delta = residual;
        delta.mapv_inplace(|r| 2.0 * r / b as f64);

        // Output layer.
        general_mat_mul(
            1.0,
            &activations[self.depth - 1].t(),
            &delta.view(),
            0.0,
            &mut grad.weights[self.depth],
        );
        grad.biases[self.depth] = delta.sum_axis(Axis(0));

        // Hidden layers, walking backwards.
        let mut delta_hidden = Array2::<f64>::zeros((b, self.width));
        general_mat_mul(1.0, &delta.view(), &self.weights[self.depth].t(), 0.0, &mut delta_hidden);
        delta_hidden *= &sprimes[self.depth - 1];
        for l in (0..self.depth).rev() {
            if l == 0 {
                general_mat_mul(1.0, &x.t(), &delta_hidden.view(), 0.0, &mut grad.weights[0]);
                grad.biases[0] = delta_hidden.sum_axis(Axis(0));
            } else {
                general_mat_mul(
                    1.0,
                    &activations[l - 1].t(),
                    &delta_hidden.view(),
                    0.0,
                    &mut grad.weights[l],
                );
                grad.biases[l] = delta_hidden.sum_axis(Axis(0));
                let mut prev = Array2::<f64>::zeros((b, self.width));
                general_mat_mul(1.0, &delta_hidden.view(), &self.weights[l].t(), 0.0, &mut prev);
                prev *= &sprimes[l - 1];
                delta_hidden = prev;
            }
        }

        Ok((loss, grad))
    }

    /// Core forward-mode pass: propagate the primal row and `k` tangent rows
    /// per sample through the network in one row-blocked matrix, one GEMM per
    /// layer. Writes the velocity and the output-layer tangents.
    pub(crate) fn propagate_tangents(
        &self,
        pos: &ArrayView2<f64>,
        t: f64,
        init: TangentInit,
        k: usize,
        vel: &mut Array2<f64>,
        out_tangents: &mut Array2<f64>,
    ) {
        let n = pos.nrows();
        let d = self.dim;
        let w = self.width;
        let block = 1 + k;
        debug_assert_eq!(pos.ncols(), d);
        debug_assert_eq!(vel.raw_dim(), ndarray::Dim([n, d]));
        debug_assert_eq!(out_tangents.raw_dim(), ndarray::Dim([n * k, d]));

        // Layer 0 primal: z0 = [pos | t] @ W0 + b0.
        let x = self.augment_time(pos, t);
        let mut z0 = Array2::<f64>::zeros((n, w));
        general_mat_mul(1.0, &x.view(), &self.weights[0].view(), 0.0, &mut z0);

        // Layer 0 tangents before activation scaling: T @ W0[0..d, :].
        let w0_theta = self.weights[0].slice(ndarray::s![0..d, ..]);
        let mut p = Array2::<f64>::zeros((n * block, w));
        match init {
            TangentInit::Basis => {
                debug_assert_eq!(k, d);
                for s in 0..n {
                    p.slice_mut(ndarray::s![s * block + 1..(s + 1) * block, ..])
                        .assign(&w0_theta);
                }
            }
            TangentInit::Rows(rows) => {
                debug_assert_eq!(rows.ncols(), d);
                for s in 0..n {
                    let mut dst = p.slice_mut(ndarray::s![s * block + 1..(s + 1) * block, ..]);
                    general_mat_mul(
                        1.0,
                        &rows.slice(ndarray::s![s * k..(s + 1) * k, ..]),
                        &w0_theta,
                        0.0,
                        &mut dst,
                    );
                }
            }
        }

        // Activate layer 0: primal row becomes swish(z0 + b0); tangent rows
        // are scaled by swish'(z0 + b0).
        let b0 = &self.biases[0];
        for s in 0..n {
            let mut blk = p.slice_mut(ndarray::s![s * block..(s + 1) * block, ..]);
            for j in 0..w {
                let (a, sp) = swish_and_prime(z0[[s, j]] + b0[j]);
                blk[[0, j]] = a;
                for r in 1..block {
                    blk[[r, j]] *= sp;
                }
            }
        }

        // Hidden layers 1..depth: one GEMM for primal + tangents, then the
        // same bias/activation/scale pass per sample block.
        let mut p_next = Array2::<f64>::zeros((n * block, w));
        for l in 1..self.depth {
            general_mat_mul(1.0, &p.view(), &self.weights[l].view(), 0.0, &mut p_next);
            std::mem::swap(&mut p, &mut p_next);
            let bl = &self.biases[l];
            for s in 0..n {
                let mut blk = p.slice_mut(ndarray::s![s * block..(s + 1) * block, ..]);
                for j in 0..w {
                    let (a, sp) = swish_and_prime(blk[[0, j]] + bl[j]);
                    blk[[0, j]] = a;
                    for r in 1..block {
                        blk[[r, j]] *= sp;
                    }
                }
            }
        }

        // Output layer.
        let mut out = Array2::<f64>::zeros((n * block, d));
        general_mat_mul(1.0, &p.view(), &self.weights[self.depth].view(), 0.0, &mut out);
        let out_bias = &self.biases[self.depth];
        for s in 0..n {
            for j in 0..d {
                vel[[s, j]] = out[[s * block, j]] + out_bias[j];
            }
            for r in 0..k {
                for j in 0..d {
                    out_tangents[[s * k + r, j]] = out[[s * block + 1 + r, j]];
                }
            }
        }
    }

    fn augment_time(&self, pos: &ArrayView2<f64>, t: f64) -> Array2<f64> {
        let n = pos.nrows();
        let mut x = Array2::<f64>::zeros((n, self.dim + 1));
        x.slice_mut(ndarray::s![.., 0..self.dim]).assign(pos);
        x.column_mut(self.dim).fill(t);
        x
    }

    fn apply_bias_swish(&self, act: &mut Array2<f64>, layer: usize) {
        let b = &self.biases[layer];
        for mut row in act.rows_mut() {
            for (v, bias) in row.iter_mut().zip(b.iter()) {
                *v = math::swish(*v + bias);
            }
        }
    }

    /// Add bias, apply swish in place, and return the matrix of swish
    /// derivatives at the pre-activations.
    fn bias_swish_with_prime(&self, act: &mut Array2<f64>, layer: usize) -> Array2<f64> {
        let b = &self.biases[layer];
        let mut sp = Array2::<f64>::zeros(act.raw_dim());
        for (mut row, mut sp_row) in act.rows_mut().into_iter().zip(sp.rows_mut()) {
            for ((v, bias), s) in row.iter_mut().zip(b.iter()).zip(sp_row.iter_mut()) {
                let (a, p) = swish_and_prime(*v + bias);
                *v = a;
                *s = p;
            }
        }
        sp
    }
}

/// Adam optimizer state with the canonical bias-corrected update.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    m: GradBuffer,
    v: GradBuffer,
}

impl AdamState {
    pub fn new(net: &VelocityNet, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m: GradBuffer::zeros_like(net),
            v: GradBuffer::zeros_like(net),
        }
    }

    /// One Adam update. Rejects non-finite gradients with the offending layer.
    pub fn step(&mut self, net: &mut VelocityNet, grad: &GradBuffer) -> Result<()> {
        if let Some(layer) = grad.first_non_finite_layer() {
            return Err(Error::NonFiniteGradient { layer });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);

        let update = |param: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *param -= lr * m_hat / (v_hat.sqrt() + eps);
        };

        for l in 0..net.weights.len() {
            for ((param, m), (v, g)) in net.weights[l]
                .iter_mut()
                .zip(self.m.weights[l].iter_mut())
                .zip(self.v.weights[l].iter_mut().zip(grad.weights[l].iter()))
            {
                update(param, m, v, *g);
            }
            for ((param, m), (v, g)) in net.biases[l]
                .iter_mut()
                .zip(self.m.biases[l].iter_mut())
                .zip(self.v.biases[l].iter_mut().zip(grad.biases[l].iter()))
            {
                update(param, m, v, *g);
            }
        }
        Ok(())
    }
}

// --- checkpoint format ------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub(crate) struct ArrayBlob {
    pub shape: Vec<usize>,
    /// Row-major IEEE-754 bit patterns, 16 hex digits per value.
    pub data_hex: String,
}

impl ArrayBlob {
    fn from_array2(a: &Array2<f64>) -> Self {
        let data: Vec<f64> = a.iter().copied().collect();
        ArrayBlob { shape: vec![a.nrows(), a.ncols()], data_hex: math::f64_to_hex(&data) }
    }

    pub(crate) fn from_vector(a: &Array1<f64>) -> Self {
        let data: Vec<f64> = a.iter().copied().collect();
        ArrayBlob { shape: vec![a.len()], data_hex: math::f64_to_hex(&data) }
    }

    pub(crate) fn to_vector(&self) -> Result<Array1<f64>> {
        self.to_array1()
    }

    fn to_array2(&self) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::Format(format!("expected rank-2 blob, got {:?}", self.shape)));
        }
        let data = math::hex_to_f64(&self.data_hex).map_err(Error::Format)?;
        Array2::from_shape_vec((self.shape[0], self.shape[1]), data)
            .map_err(|e| Error::Format(e.to_string()))
    }

    fn to_array1(&self) -> Result<Array1<f64>> {
        if self.shape.len() != 1 {
            return Err(Error::Format(format!("expected rank-1 blob, got {:?}", self.shape)));
        }
        let data = math::hex_to_f64(&self.data_hex).map_err(Error::Format)?;
        if data.len() != self.shape[0] {
            return Err(Error::Format("blob length mismatch".into()));
        }
        Ok(Array1::from_vec(data))
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct NetCheckpoint {
    pub format_version: u32,
    pub dim: usize,
    pub depth: usize,
    pub width: usize,
    pub activation: String,
    pub weights: Vec<ArrayBlob>,
    pub biases: Vec<ArrayBlob>,
}

pub(crate) const NET_FORMAT_VERSION: u32 = 1;

impl VelocityNet {
    pub(crate) fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            format_version: NET_FORMAT_VERSION,
            dim: self.dim,
            depth: self.depth,
            width: self.width,
            activation: "swish".to_string(),
            weights: self.weights.iter().map(ArrayBlob::from_array2).collect(),
            biases: self.biases.iter().map(ArrayBlob::from_vector).collect(),
        }
    }

    pub(crate) fn from_checkpoint(ckpt: &NetCheckpoint) -> Result<Self> {
        if ckpt.format_version != NET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported net checkpoint version {}",
                ckpt.format_version
            )));
        }
        if ckpt.activation != "swish" {
            return Err(Error::Format(format!("unsupported activation {:?}", ckpt.activation)));
        }
        let mut net = VelocityNet::zeroed(ckpt.dim, ckpt.depth, ckpt.width)?;
        if ckpt.weights.len() != net.weights.len() || ckpt.biases.len() != net.biases.len() {
            return Err(Error::Format("layer count mismatch".into()));
        }
        for (l, blob) in ckpt.weights.iter().enumerate() {
            let w = blob.to_array2()?;
            net.set_weight(l, w).map_err(|e| Error::Format(e.to_string()))?;
        }
        for (l, blob) in ckpt.biases.iter().enumerate() {
            let b = blob.to_array1()?;
            net.set_bias(l, b).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(net)
    }

    /// Save the network parameters as a self-describing JSON checkpoint.
    /// Values are hex-encoded bit patterns, so a load reproduces them exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: NetCheckpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ckpt)
    }
}

impl std::fmt::Display for VelocityNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VelocityNet({} -> {}x{} -> {})", self.dim + 1, self.depth, self.width, self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, Array1};
    use rand::Rng;

    fn random_net(dim: usize, depth: usize, width: usize, seed: u64) -> VelocityNet {
        VelocityNet::init(dim, depth, width, seed).unwrap()
    }

    /// Flatten all parameters for finite-difference sweeps.
    fn perturbed_loss(
        net: &VelocityNet,
        layer: usize,
        is_bias: bool,
        flat_index: usize,
        delta: f64,
        theta0: &Array2<f64>,
        theta1: &Array2<f64>,
        ts: &Array1<f64>,
    ) -> f64 {
        let mut n = net.clone();
        if is_bias {
            let mut b = n.biases()[layer].clone();
            b[flat_index] += delta;
            n.set_bias(layer, b).unwrap();
        } else {
            let mut w = n.weights()[layer].clone();
            let cols = w.ncols();
            w[[flat_index / cols, flat_index % cols]] += delta;
            n.set_weight(layer, w).unwrap();
        }
        let (loss, _) = n
            .loss_and_gradient(&theta0.view(), &theta1.view(), &ts.view())
            .unwrap();
        loss
    }

    #[test]
    fn init_shapes_match_spec_examples() {
        let net = random_net(2, 6, 256, 0);
        assert_eq!(net.weights()[0].nrows(), 3); // input width d + 1
        assert_eq!(net.weights()[6].ncols(), 2); // output width d
        assert_eq!(net.weights().len(), 7);

        let net = random_net(20, 10, 256, 1);
        assert_eq!(net.weights()[0].nrows(), 21);
        assert_eq!(net.weights()[10].ncols(), 20);

        let net = random_net(1, 1, 1, 0);
        assert_eq!(net.weights()[0].nrows(), 2);
        assert!(net.biases().iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_rejects_zero_sizes() {
        assert!(VelocityNet::init(0, 1, 1, 0).is_err());
        assert!(VelocityNet::init(1, 0, 1, 0).is_err());
        assert!(VelocityNet::init(1, 1, 0, 0).is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = random_net(3, 2, 8, 42);
        let b = random_net(3, 2, 8, 42);
        let c = random_net(3, 2, 8, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
    }

    #[test]
    fn zero_net_maps_everything_to_zero() {
        let net = VelocityNet::zeroed(3, 2, 5).unwrap();
        let v = net.forward(&[0.3, -1.2, 4.0], 0.7).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let net = random_net(4, 3, 16, 9);
        let theta = [0.25, -1.5, 0.75, 2.0];
        let a = net.forward(&theta, 0.3).unwrap();
        let b = net.forward(&theta, 0.3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let net = random_net(2, 1, 4, 0);
        assert!(net.forward(&[1.0], 0.5).is_err());
        assert!(net.input_jvp(&[1.0, 2.0], 0.5, &[1.0]).is_err());
    }

    #[test]
    fn forward_matches_hand_computed_swish_chain() {
        // 1-D input, one hidden layer of two units, all parameters set by
        // hand; the expected value is the explicit swish chain.
        let mut net = VelocityNet::zeroed(1, 1, 2).unwrap();
        net.set_weight(0, arr2(&[[0.5, -1.0], [0.25, 0.75]])).unwrap();
        net.set_bias(0, arr1(&[0.1, -0.2])).unwrap();
        net.set_weight(1, arr2(&[[2.0], [-0.5]])).unwrap();
        net.set_bias(1, arr1(&[0.3])).unwrap();

        let theta = 0.8;
        let t = 0.4;
        let z1 = 0.5 * theta + 0.25 * t + 0.1;
        let z2 = -1.0 * theta + 0.75 * t - 0.2;
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let a1 = z1 * sigmoid(z1);
        let a2 = z2 * sigmoid(z2);
        let expected = 2.0 * a1 - 0.5 * a2 + 0.3;

        let got = net.forward(&[theta], t).unwrap();
        assert_abs_diff_eq!(got[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn loss_zero_for_zero_residual() {
        // Zero network and theta0 == theta1: target field and prediction are
        // both identically zero.
        let net = VelocityNet::zeroed(2, 1, 4).unwrap();
        let theta = arr2(&[[0.5, -0.25], [1.5, 2.0], [0.0, 0.0]]);
        let ts = arr1(&[0.1, 0.5, 0.9]);
        let (loss, grad) = net
            .loss_and_gradient(&theta.view(), &theta.view(), &ts.view())
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.weights.iter().all(|w| w.iter().all(|&g| g == 0.0)));
        assert!(grad.biases.iter().all(|b| b.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn loss_unit_target_on_zero_net() {
        let net = VelocityNet::zeroed(2, 1, 4).unwrap();
        let theta0 = arr2(&[[0.0, 0.0]]);
        let theta1 = arr2(&[[1.0, 0.0]]);
        let ts = arr1(&[0.37]);
        let (loss, _) = net
            .loss_and_gradient(&theta0.view(), &theta1.view(), &ts.view())
            .unwrap();
        assert_abs_diff_eq!(loss, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        // Exactly the oracle from the module contract: d=2, width=4, depth=1,
        // batch of 3, step 1e-6, componentwise relative error < 1e-5.
        let net = random_net(2, 1, 4, 7);
        let mut rng = crate::math::stream_rng(77, &[1]);
        let theta0 = Array2::from_shape_fn((3, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
        let theta1 = Array2::from_shape_fn((3, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
        let ts = Array1::from_shape_fn(3, |_| rng.random::<f64>());

        let (_, grad) = net
            .loss_and_gradient(&theta0.view(), &theta1.view(), &ts.view())
            .unwrap();

        let h = 1e-6;
        let mut checked = 0;
        for layer in 0..net.weights().len() {
            for (is_bias, len) in [
                (false, net.weights()[layer].len()),
                (true, net.biases()[layer].len()),
            ] {
                for idx in 0..len {
                    let up = perturbed_loss(&net, layer, is_bias, idx, h, &theta0, &theta1, &ts);
                    let down = perturbed_loss(&net, layer, is_bias, idx, -h, &theta0, &theta1, &ts);
                    let fd = (up - down) / (2.0 * h);
                    let g = if is_bias {
                        grad.biases[layer][idx]
                    } else {
                        let cols = grad.weights[layer].ncols();
                        grad.weights[layer][[idx / cols, idx % cols]]
                    };
                    let denom = g.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (g - fd).abs() / denom < 1e-5,
                        "layer {layer} bias={is_bias} idx={idx}: grad {g} vs fd {fd}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn jvp_zero_net_and_linearity() {
        let zero = VelocityNet::zeroed(3, 2, 6).unwrap();
        let jvp = zero.input_jvp(&[1.0, 2.0, 3.0], 0.5, &[1.0, -1.0, 0.5]).unwrap();
        assert_eq!(jvp, vec![0.0, 0.0, 0.0]);

        let net = random_net(3, 2, 6, 11);
        let theta = [0.4, -0.7, 1.1];
        let u = [0.3, 0.9, -0.2];
        let w = [-1.0, 0.5, 0.25];
        let (a, b) = (1.7, -0.6);
        let combined: Vec<f64> = u.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
        let lhs = net.input_jvp(&theta, 0.25, &combined).unwrap();
        let ju = net.input_jvp(&theta, 0.25, &u).unwrap();
        let jw = net.input_jvp(&theta, 0.25, &w).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(lhs[i], a * ju[i] + b * jw[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn jvp_matches_finite_differences_of_forward() {
        let net = random_net(3, 2, 8, 5);
        let theta = [0.3, -0.9, 0.5];
        let t = 0.6;
        let h = 1e-6;
        for dir_idx in 0..3 {
            let mut dir = [0.0; 3];
            dir[dir_idx] = 1.0;
            let jvp = net.input_jvp(&theta, t, &dir).unwrap();
            let mut up = theta;
            up[dir_idx] += h;
            let mut down = theta;
            down[dir_idx] -= h;
            let fu = net.forward(&up, t).unwrap();
            let fd = net.forward(&down, t).unwrap();
            for i in 0..3 {
                let fdiff = (fu[i] - fd[i]) / (2.0 * h);
                let denom = jvp[i].abs().max(fdiff.abs()).max(1e-6);
                assert!(
                    (jvp[i] - fdiff).abs() / denom < 1e-5,
                    "component {i} of direction {dir_idx}: {} vs {}",
                    jvp[i],
                    fdiff
                );
            }
        }
    }

    #[test]
    fn divergence_equals_sum_of_basis_jvp_components() {
        let net = random_net(4, 2, 8, 23);
        let theta = [0.2, -0.4, 0.8, 1.4];
        let t = 0.35;
        let mut expected = 0.0;
        for i in 0..4 {
            let mut dir = [0.0; 4];
            dir[i] = 1.0;
            expected += net.input_jvp(&theta, t, &dir).unwrap()[i];
        }
        let pos = arr2(&[[0.2, -0.4, 0.8, 1.4]]);
        let mut vel = Array2::zeros((1, 4));
        let mut div = Array1::zeros(1);
        net.velocity_and_divergence(&pos.view(), t, &mut vel, &mut div);
        assert_abs_diff_eq!(div[0], expected, epsilon = 1e-12);

        let direct = net.forward(&theta, t).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(vel[[0, i]], direct[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op_on_parameters() {
        let mut net = random_net(2, 1, 4, 3);
        let before = net.clone();
        let mut state = AdamState::new(&net, 0.1);
        let grad = GradBuffer::zeros_like(&net);
        state.step(&mut net, &grad).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // Single effective parameter: with g = 1, the bias-corrected first
        // step is -lr * g / (|g| + eps) ~ -lr.
        let mut net = VelocityNet::zeroed(1, 1, 1).unwrap();
        let mut state = AdamState::new(&net, 0.1);
        let mut grad = GradBuffer::zeros_like(&net);
        grad.biases[1][0] = 1.0;
        state.step(&mut net, &grad).unwrap();
        assert_abs_diff_eq!(net.biases()[1][0], -0.1, epsilon = 1e-8);
    }

    #[test]
    fn adam_two_steps_match_hand_recursion() {
        let mut net = VelocityNet::zeroed(1, 1, 1).unwrap();
        let lr = 0.05;
        let mut state = AdamState::new(&net, lr);
        let g = 0.7;
        let mut grad = GradBuffer::zeros_like(&net);
        grad.biases[1][0] = g;
        state.step(&mut net, &grad).unwrap();
        state.step(&mut net, &grad).unwrap();

        // Hand recursion for two identical gradients.
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut w = 0.0;
        for t in 1..=2_i32 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert_abs_diff_eq!(net.biases()[1][0], w, epsilon = 1e-14);
        assert_eq!(state.step_count, 2);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut net = random_net(1, 1, 2, 0);
        let mut state = AdamState::new(&net, 0.1);
        let mut grad = GradBuffer::zeros_like(&net);
        grad.weights[0][[0, 0]] = f64::NAN;
        let err = state.step(&mut net, &grad).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { layer: 0 }));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let net = random_net(3, 2, 8, 19);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save_checkpoint(&path).unwrap();
        let back = VelocityNet::load_checkpoint(&path).unwrap();
        assert_eq!(net, back);
        for (a, b) in net.weights().iter().zip(back.weights()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn gradient_oracle_on_larger_random_nets() {
        // The module invariant: random nets with d <= 4, width <= 8,
        // depth <= 2 all pass the finite-difference check.
        for (seed, dim, depth, width) in [(1u64, 3usize, 2usize, 8usize), (2, 4, 2, 6), (3, 1, 2, 8)] {
            let net = random_net(dim, depth, width, seed);
            let mut rng = crate::math::stream_rng(seed, &[99]);
            let b = 2;
            let theta0 = Array2::from_shape_fn((b, dim), |_| rng.random::<f64>() * 2.0 - 1.0);
            let theta1 = Array2::from_shape_fn((b, dim), |_| rng.random::<f64>() * 2.0 - 1.0);
            let ts = Array1::from_shape_fn(b, |_| rng.random::<f64>());
            let (_, grad) = net
                .loss_and_gradient(&theta0.view(), &theta1.view(), &ts.view())
                .unwrap();
            let h = 1e-6;
            // Spot-check a spread of parameters in every layer.
            for layer in 0..net.weights().len() {
                let len = net.weights()[layer].len();
                for idx in [0, len / 2, len - 1] {
                    let up = perturbed_loss(&net, layer, false, idx, h, &theta0, &theta1, &ts);
                    let down = perturbed_loss(&net, layer, false, idx, -h, &theta0, &theta1, &ts);
                    let fd = (up - down) / (2.0 * h);
                    let cols = grad.weights[layer].ncols();
                    let g = grad.weights[layer][[idx / cols, idx % cols]];
                    let denom = g.abs().max(fd.abs()).max(1e-6);
                    assert!((g - fd).abs() / denom < 1e-5);
                }
            }
        }
    }
}
