//! The trained velocity field as a normalized density.
//!
//! Sampling integrates the flow ODE forward from a Gaussian base draw;
//! log-density evaluation integrates backward from the query point while
//! accumulating the divergence of the velocity field as an extra state
//! variable of the same solver, so the path and the change-of-variables
//! integral stay consistent. The base distribution is `N(0, T I)` in
//! standardized coordinates; the temperature `T <= 1` concentrates the flow
//! without touching the velocity field.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::{self, Standardization, TrainConfig, TrainReport};
use crate::math::{self, isotropic_gaussian_log_density, stream_rng};
use crate::net::{ArrayBlob, NetCheckpoint, VelocityNet};
use crate::samples::SampleSet;

/// ODE solver selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    Rk4Fixed,
    DopriAdaptive,
}

/// Solver settings: fixed-step count for RK4, tolerances for the adaptive
/// Dormand-Prince verifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeConfig {
    pub method: OdeMethod,
    pub steps: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig { method: OdeMethod::Rk4Fixed, steps: 100, rel_tol: 1e-6, abs_tol: 1e-8 }
    }
}

impl OdeConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("ode steps must be positive".into()));
        }
        if self.rel_tol <= 0.0 || self.abs_tol <= 0.0 {
            return Err(Error::InvalidArgument("ode tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// A time-dependent velocity field with a divergence oracle. Implemented by
/// the trained network (exact trace and Hutchinson variants) and by
/// hand-built fields in tests.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn velocity(&mut self, pos: &ArrayView2<f64>, t: f64, vel: &mut Array2<f64>);
    fn velocity_and_divergence(
        &mut self,
        pos: &ArrayView2<f64>,
        t: f64,
        vel: &mut Array2<f64>,
        div: &mut Array1<f64>,
    );
}

/// Network field with the exact Jacobian trace (one JVP per basis direction,
/// batched).
#[derive(Clone)]
pub struct ExactField<'a> {
    net: &'a VelocityNet,
}

impl<'a> ExactField<'a> {
    pub fn new(net: &'a VelocityNet) -> Self {
        ExactField { net }
    }
}

impl VelocityField for ExactField<'_> {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn velocity(&mut self, pos: &ArrayView2<f64>, t: f64, vel: &mut Array2<f64>) {
        self.net.velocity_batch(pos, t, vel);
    }

    fn velocity_and_divergence(
        &mut self,
        pos: &ArrayView2<f64>,
        t: f64,
        vel: &mut Array2<f64>,
        div: &mut Array1<f64>,
    ) {
        self.net.velocity_and_divergence(pos, t, vel, div);
    }
}

/// Network field whose divergence is the Hutchinson estimate
/// `mean_p z^T (dv/dtheta) z` with Rademacher probes, drawn freshly from the
/// field's own stream at every evaluation. Deterministic for a fixed seed.
pub struct HutchinsonField<'a> {
    net: &'a VelocityNet,
    probes: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl<'a> HutchinsonField<'a> {
    pub fn new(net: &'a VelocityNet, probes: usize, seed: u64) -> Result<Self> {
        if probes == 0 {
            return Err(Error::InvalidArgument("need at least one probe".into()));
        }
        Ok(HutchinsonField {
            net,
            probes,
            rng: stream_rng(seed, &[math::STREAM_HUTCHINSON]),
        })
    }
}

impl VelocityField for HutchinsonField<'_> {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn velocity(&mut self, pos: &ArrayView2<f64>, t: f64, vel: &mut Array2<f64>) {
        self.net.velocity_batch(pos, t, vel);
    }

    fn velocity_and_divergence(
        &mut self,
        pos: &ArrayView2<f64>,
        t: f64,
        vel: &mut Array2<f64>,
        div: &mut Array1<f64>,
    ) {
        let n = pos.nrows();
        let d = self.net.dim();
        let mut probes = Array2::<f64>::zeros((n * self.probes, d));
        for v in probes.iter_mut() {
            *v = if self.rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        self.net
            .velocity_and_probe_quadratic(pos, t, &probes, self.probes, vel, div);
    }
}

// --- integrators -------------------------------------------------------------

/// Fixed-step RK4 over `[t0, t1]` (either direction). When `acc` is given the
/// divergence is integrated alongside the positions as an augmented state.
/// Node times are computed from the step index, so the final time is hit
/// exactly.
fn rk4_integrate<F: VelocityField>(
    field: &mut F,
    pos: &mut Array2<f64>,
    mut acc: Option<&mut Array1<f64>>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<()> {
    let n = pos.nrows();
    let d = pos.ncols();
    let h = (t1 - t0) / steps as f64;
    let with_div = acc.is_some();

    let mut stage_pos = Array2::<f64>::zeros((n, d));
    let mut k = vec![Array2::<f64>::zeros((n, d)); 4];
    let mut kd = vec![Array1::<f64>::zeros(n); 4];

    for step in 0..steps {
        let t = t0 + (t1 - t0) * step as f64 / steps as f64;
        for stage in 0..4 {
            let (t_stage, scale) = match stage {
                0 => (t, 0.0),
                1 => (t + 0.5 * h, 0.5 * h),
                2 => (t + 0.5 * h, 0.5 * h),
                _ => (t + h, h),
            };
            if stage == 0 {
                stage_pos.assign(pos);
            } else {
                stage_pos.assign(pos);
                // stage_pos += scale * k[stage - 1]
                ndarray::Zip::from(&mut stage_pos)
                    .and(&k[stage - 1])
                    .for_each(|s, &kv| *s += scale * kv);
            }
            if with_div {
                let (kv, kdv) = split_stage(&mut k, &mut kd, stage);
                field.velocity_and_divergence(&stage_pos.view(), t_stage, kv, kdv);
            } else {
                field.velocity(&stage_pos.view(), t_stage, &mut k[stage]);
            }
        }
        let w = h / 6.0;
        for s in 0..n {
            for j in 0..d {
                pos[[s, j]] +=
                    w * (k[0][[s, j]] + 2.0 * k[1][[s, j]] + 2.0 * k[2][[s, j]] + k[3][[s, j]]);
            }
        }
        if let Some(acc) = acc.as_deref_mut() {
            for s in 0..n {
                acc[s] += w * (kd[0][s] + 2.0 * kd[1][s] + 2.0 * kd[2][s] + kd[3][s]);
            }
        }
        let t_next = t0 + (t1 - t0) * (step + 1) as f64 / steps as f64;
        if pos.iter().any(|v| !v.is_finite()) {
            return Err(Error::OdeDiverged { t: t_next });
        }
    }
    Ok(())
}

fn split_stage<'a>(
    k: &'a mut [Array2<f64>],
    kd: &'a mut [Array1<f64>],
    stage: usize,
) -> (&'a mut Array2<f64>, &'a mut Array1<f64>) {
    (&mut k[stage], &mut kd[stage])
}

// Dormand-Prince 5(4) coefficients.
const DOPRI_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DOPRI_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DOPRI_B5: [f64; 7] =
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DOPRI_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const DOPRI_MAX_STEPS: usize = 1_000_000;

/// Adaptive Dormand-Prince 5(4) with a standard proportional step controller,
/// over `[t0, t1]` in either direction, with optional divergence
/// accumulation. Used to verify the fixed-step results.
fn dopri_integrate<F: VelocityField>(
    field: &mut F,
    pos: &mut Array2<f64>,
    mut acc: Option<&mut Array1<f64>>,
    t0: f64,
    t1: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<()> {
    let n = pos.nrows();
    let d = pos.ncols();
    let with_div = acc.is_some();
    let span = t1 - t0;
    let direction = span.signum();
    let mut h = span / 100.0;
    let mut t = t0;

    let mut k = vec![Array2::<f64>::zeros((n, d)); 7];
    let mut kd = vec![Array1::<f64>::zeros(n); 7];
    let mut stage_pos = Array2::<f64>::zeros((n, d));
    let mut new_pos = Array2::<f64>::zeros((n, d));
    let mut err_pos = Array2::<f64>::zeros((n, d));

    for _ in 0..DOPRI_MAX_STEPS {
        if (t - t1).abs() < 1e-14 {
            return Ok(());
        }
        if (h.abs() > (t1 - t).abs()) || ((t + h - t1) * direction > 0.0) {
            h = t1 - t;
        }

        for stage in 0..7 {
            stage_pos.assign(pos);
            for prev in 0..stage {
                // The seventh stage reuses the fifth-order weights (FSAL).
                let a = if stage == 6 { DOPRI_B5[prev] } else { DOPRI_A[stage - 1][prev] };
                if a != 0.0 {
                    let scale = a * h;
                    ndarray::Zip::from(&mut stage_pos)
                        .and(&k[prev])
                        .for_each(|s, &kv| *s += scale * kv);
                }
            }
            let t_stage = t + DOPRI_C[stage] * h;
            if with_div {
                let (kv, kdv) = split_stage(&mut k, &mut kd, stage);
                field.velocity_and_divergence(&stage_pos.view(), t_stage, kv, kdv);
            } else {
                field.velocity(&stage_pos.view(), t_stage, &mut k[stage]);
            }
        }

        new_pos.assign(pos);
        err_pos.fill(0.0);
        let mut new_acc_delta = vec![0.0; if with_div { n } else { 0 }];
        let mut err_acc = vec![0.0; if with_div { n } else { 0 }];
        for stage in 0..7 {
            let wb = DOPRI_B5[stage] * h;
            let we = (DOPRI_B5[stage] - DOPRI_B4[stage]) * h;
            if wb != 0.0 || we != 0.0 {
                ndarray::Zip::from(&mut new_pos)
                    .and(&k[stage])
                    .for_each(|s, &kv| *s += wb * kv);
                ndarray::Zip::from(&mut err_pos)
                    .and(&k[stage])
                    .for_each(|s, &kv| *s += we * kv);
                if with_div {
                    for s in 0..n {
                        new_acc_delta[s] += wb * kd[stage][s];
                        err_acc[s] += we * kd[stage][s];
                    }
                }
            }
        }

        // Weighted RMS error over the full augmented state.
        let mut err_sq = 0.0;
        let mut count = 0usize;
        for s in 0..n {
            for j in 0..d {
                let tol = abs_tol + rel_tol * pos[[s, j]].abs().max(new_pos[[s, j]].abs());
                err_sq += (err_pos[[s, j]] / tol).powi(2);
                count += 1;
            }
        }
        if let Some(acc) = acc.as_deref_mut() {
            for s in 0..n {
                let tol = abs_tol + rel_tol * acc[s].abs();
                err_sq += (err_acc[s] / tol).powi(2);
                count += 1;
            }
        }
        let err = (err_sq / count as f64).sqrt();

        if err <= 1.0 {
            t += h;
            pos.assign(&new_pos);
            if let Some(acc) = acc.as_deref_mut() {
                for s in 0..n {
                    acc[s] += new_acc_delta[s];
                }
            }
            if pos.iter().any(|v| !v.is_finite()) {
                return Err(Error::OdeDiverged { t });
            }
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
        if h.abs() < 1e-14 {
            return Err(Error::OdeDiverged { t });
        }
    }
    Err(Error::InvalidArgument(
        "adaptive integrator exceeded its step budget".into(),
    ))
}

/// Transport a batch of standardized states across the full time interval
/// with the configured solver. `forward` runs base-to-target (t 0 to 1);
/// otherwise target-to-base.
pub fn transport<F: VelocityField>(
    field: &mut F,
    ode: &OdeConfig,
    pos: &mut Array2<f64>,
    forward: bool,
) -> Result<()> {
    ode.validate()?;
    let (t0, t1) = if forward { (0.0, 1.0) } else { (1.0, 0.0) };
    match ode.method {
        OdeMethod::Rk4Fixed => rk4_integrate(field, pos, None, t0, t1, ode.steps),
        OdeMethod::DopriAdaptive => {
            dopri_integrate(field, pos, None, t0, t1, ode.rel_tol, ode.abs_tol)
        }
    }
}

/// Backward transport with the divergence integral accumulated as augmented
/// state. On return `pos` holds the base-space points and `acc` holds
/// `-integral_0^1 div(v) dt` along each trajectory.
pub fn transport_backward_with_divergence<F: VelocityField>(
    field: &mut F,
    ode: &OdeConfig,
    pos: &mut Array2<f64>,
    acc: &mut Array1<f64>,
) -> Result<()> {
    ode.validate()?;
    match ode.method {
        OdeMethod::Rk4Fixed => rk4_integrate(field, pos, Some(acc), 1.0, 0.0, ode.steps),
        OdeMethod::DopriAdaptive => {
            dopri_integrate(field, pos, Some(acc), 1.0, 0.0, ode.rel_tol, ode.abs_tol)
        }
    }
}

/// Log-density of the flow defined by `field` over the given base settings,
/// evaluated at original-coordinate points. The workhorse behind
/// [`FlowModel::log_density`], public so hand-built fields can be checked
/// against closed forms.
pub fn log_density_with_field<F: VelocityField>(
    field: &mut F,
    standardization: &Standardization,
    temperature: f64,
    ode: &OdeConfig,
    thetas: &ArrayView2<f64>,
) -> Result<Vec<f64>> {
    let d = field.dim();
    if thetas.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: thetas.ncols() });
    }
    let n = thetas.nrows();
    let mut pos = standardization.apply_matrix(&thetas.to_owned());
    let mut acc = Array1::<f64>::zeros(n);
    transport_backward_with_divergence(field, ode, &mut pos, &mut acc)?;
    let ln_jac = standardization.ln_jacobian();
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let base = isotropic_gaussian_log_density(pos.row(s).as_slice().unwrap(), temperature);
        out.push(base + acc[s] + ln_jac);
    }
    Ok(out)
}

// --- the flow model -----------------------------------------------------------

/// A trained velocity network plus everything needed to use it as a
/// normalized density: the standardization of the training data, the base
/// temperature, and the ODE solver settings.
#[derive(Debug, Clone)]
pub struct FlowModel {
    net: VelocityNet,
    standardization: Standardization,
    temperature: f64,
    ode: OdeConfig,
}

impl FlowModel {
    pub fn new(
        net: VelocityNet,
        standardization: Standardization,
        temperature: f64,
        ode: OdeConfig,
    ) -> Result<Self> {
        if standardization.dim() != net.dim() {
            return Err(Error::DimensionMismatch {
                expected: net.dim(),
                got: standardization.dim(),
            });
        }
        check_temperature(temperature)?;
        ode.validate()?;
        Ok(FlowModel { net, standardization, temperature, ode })
    }

    /// Split, standardize, train, and package the result: returns the flow,
    /// the untouched inference partition, and the training report.
    pub fn fit(
        samples: &SampleSet,
        net: VelocityNet,
        train_config: &TrainConfig,
        ode: OdeConfig,
        temperature: f64,
    ) -> Result<(FlowModel, SampleSet, TrainReport)> {
        check_temperature(temperature)?;
        let (train_set, inference) = flowmatch::split_samples(samples, train_config)?;
        let (net, standardization, mut report) =
            flowmatch::train(net, &train_set, train_config)?;
        report.n_inference = inference.n_samples();
        let flow = FlowModel::new(net, standardization, temperature, ode)?;
        Ok((flow, inference, report))
    }

    pub fn dim(&self) -> usize {
        self.net.dim()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn ode(&self) -> &OdeConfig {
        &self.ode
    }

    pub fn net(&self) -> &VelocityNet {
        &self.net
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    /// Same flow with a different base temperature. The velocity field is
    /// untouched; only the base distribution (and therefore sampling and the
    /// base term of the density) changes.
    pub fn with_temperature(&self, temperature: f64) -> Result<FlowModel> {
        check_temperature(temperature)?;
        let mut flow = self.clone();
        flow.temperature = temperature;
        Ok(flow)
    }

    /// Same flow with different solver settings.
    pub fn with_ode(&self, ode: OdeConfig) -> Result<FlowModel> {
        ode.validate()?;
        let mut flow = self.clone();
        flow.ode = ode;
        Ok(flow)
    }

    /// Log-density at one point in original coordinates, with the exact
    /// divergence.
    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: theta.len() });
        }
        let pos = Array2::from_shape_vec((1, self.dim()), theta.to_vec()).unwrap();
        let mut field = ExactField::new(&self.net);
        let values = log_density_with_field(
            &mut field,
            &self.standardization,
            self.temperature,
            &self.ode,
            &pos.view(),
        )?;
        Ok(values[0])
    }

    /// Log-density for many points, evaluated in blocks that integrate all
    /// their trajectories in lockstep; blocks run in parallel with the output
    /// order fixed by position.
    pub fn log_density_batch(&self, thetas: &ArrayView2<f64>) -> Result<Vec<f64>> {
        if thetas.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: thetas.ncols() });
        }
        let n = thetas.nrows();
        if n == 0 {
            return Ok(Vec::new());
        }
        let block = density_block_rows(self.dim());
        let blocks: Vec<(usize, Array2<f64>)> = (0..n)
            .step_by(block)
            .map(|start| {
                let end = (start + block).min(n);
                (start, thetas.slice(ndarray::s![start..end, ..]).to_owned())
            })
            .collect();
        let results: Result<Vec<(usize, Vec<f64>)>> = blocks
            .into_par_iter()
            .map(|(start, chunk)| {
                let mut field = ExactField::new(&self.net);
                let values = log_density_with_field(
                    &mut field,
                    &self.standardization,
                    self.temperature,
                    &self.ode,
                    &chunk.view(),
                )?;
                Ok((start, values))
            })
            .collect();
        let mut out = vec![0.0; n];
        for (start, values) in results? {
            out[start..start + values.len()].copy_from_slice(&values);
        }
        Ok(out)
    }

    /// Log-density with the divergence replaced by the Hutchinson estimator
    /// with the given probe count, deterministic per seed.
    pub fn log_density_hutchinson(&self, theta: &[f64], probes: usize, seed: u64) -> Result<f64> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: theta.len() });
        }
        let pos = Array2::from_shape_vec((1, self.dim()), theta.to_vec()).unwrap();
        let mut field = HutchinsonField::new(&self.net, probes, seed)?;
        let values = log_density_with_field(
            &mut field,
            &self.standardization,
            self.temperature,
            &self.ode,
            &pos.view(),
        )?;
        Ok(values[0])
    }

    /// Draw `n` points from the flow: base draws from `N(0, T I)` in
    /// standardized coordinates, transported forward and de-standardized.
    /// Deterministic per seed.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        let d = self.dim();
        let mut rng = stream_rng(seed, &[math::STREAM_FLOW_SAMPLE]);
        let scale = self.temperature.sqrt();
        let mut pos = Array2::<f64>::zeros((n, d));
        for v in pos.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z * scale;
        }

        let block = sample_block_rows();
        let blocks: Vec<(usize, Array2<f64>)> = (0..n)
            .step_by(block)
            .map(|start| {
                let end = (start + block).min(n);
                (start, pos.slice(ndarray::s![start..end, ..]).to_owned())
            })
            .collect();
        let results: Result<Vec<(usize, Array2<f64>)>> = blocks
            .into_par_iter()
            .map(|(start, mut chunk)| {
                let mut field = ExactField::new(&self.net);
                transport(&mut field, &self.ode, &mut chunk, true)?;
                Ok((start, chunk))
            })
            .collect();
        let mut out = Array2::<f64>::zeros((n, d));
        for (start, chunk) in results? {
            for (row, chunk_row) in chunk.rows().into_iter().enumerate() {
                for j in 0..d {
                    out[[start + row, j]] =
                        chunk_row[j] * self.standardization.scale[j] + self.standardization.shift[j];
                }
            }
        }
        Ok(out)
    }

    /// Save the flow (network, temperature, standardization, solver settings)
    /// as a bit-exact JSON checkpoint.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ckpt = FlowCheckpoint {
            format_version: FLOW_FORMAT_VERSION,
            net: self.net.to_checkpoint(),
            temperature: self.temperature,
            temperature_bits: self.temperature.to_bits(),
            shift: ArrayBlob::from_vector(&self.standardization.shift),
            scale: ArrayBlob::from_vector(&self.standardization.scale),
            ode: self.ode,
        };
        std::fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<FlowModel> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: FlowCheckpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != FLOW_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported flow checkpoint version {}",
                ckpt.format_version
            )));
        }
        let net = VelocityNet::from_checkpoint(&ckpt.net)?;
        let standardization = Standardization {
            shift: ckpt.shift.to_vector()?,
            scale: ckpt.scale.to_vector()?,
        };
        FlowModel::new(net, standardization, f64::from_bits(ckpt.temperature_bits), ckpt.ode)
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must lie in (0, 1], got {temperature}"
        )));
    }
    Ok(())
}

/// Rows per density block: keeps the fused primal-plus-tangents buffer near
/// 4096 rows regardless of dimension.
fn density_block_rows(dim: usize) -> usize {
    (4096 / (dim + 1)).max(16)
}

fn sample_block_rows() -> usize {
    4096
}

const FLOW_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FlowCheckpoint {
    format_version: u32,
    net: NetCheckpoint,
    /// Readable value; the bit pattern is authoritative.
    temperature: f64,
    temperature_bits: u64,
    shift: ArrayBlob,
    scale: ArrayBlob,
    ode: OdeConfig,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    /// v_t(theta) = a .* theta with constant diagonal `a`: the flow solves to
    /// theta(t) = theta(1) e^{a (t - 1)} and has constant divergence sum(a).
    struct LinearField {
        a: Vec<f64>,
    }

    impl VelocityField for LinearField {
        fn dim(&self) -> usize {
            self.a.len()
        }

        fn velocity(&mut self, pos: &ArrayView2<f64>, _t: f64, vel: &mut Array2<f64>) {
            for (mut v_row, p_row) in vel.rows_mut().into_iter().zip(pos.rows()) {
                for j in 0..self.a.len() {
                    v_row[j] = self.a[j] * p_row[j];
                }
            }
        }

        fn velocity_and_divergence(
            &mut self,
            pos: &ArrayView2<f64>,
            t: f64,
            vel: &mut Array2<f64>,
            div: &mut Array1<f64>,
        ) {
            self.velocity(pos, t, vel);
            let total: f64 = self.a.iter().sum();
            div.fill(total);
        }
    }

    fn linear_field_log_density(a: &[f64], temperature: f64, theta: &[f64]) -> f64 {
        // Pushforward of N(0, T I) under theta0 -> theta0 * e^a.
        let pulled: Vec<f64> = theta
            .iter()
            .zip(a)
            .map(|(x, ai)| x * (-ai).exp())
            .collect();
        isotropic_gaussian_log_density(&pulled, temperature) - a.iter().sum::<f64>()
    }

    fn identity_flow(dim: usize, temperature: f64) -> FlowModel {
        FlowModel::new(
            VelocityNet::zeroed(dim, 1, 4).unwrap(),
            Standardization::identity(dim),
            temperature,
            OdeConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn zero_network_gives_the_base_density_exactly() {
        let flow = identity_flow(2, 0.8);
        let theta = [0.3, -1.1];
        let expected = isotropic_gaussian_log_density(&theta, 0.8);
        let got = flow.log_density(&theta).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-13);
    }

    #[test]
    fn zero_network_with_standardization_adds_the_jacobian() {
        let std = Standardization {
            shift: ndarray::arr1(&[1.0, -2.0]),
            scale: ndarray::arr1(&[2.0, 0.5]),
        };
        let flow = FlowModel::new(
            VelocityNet::zeroed(2, 1, 4).unwrap(),
            std.clone(),
            0.9,
            OdeConfig::default(),
        )
        .unwrap();
        let theta = [1.7, -2.4];
        let std_theta = std.apply(&theta);
        let expected = isotropic_gaussian_log_density(&std_theta, 0.9) + std.ln_jacobian();
        assert_abs_diff_eq!(flow.log_density(&theta).unwrap(), expected, epsilon = 1e-13);
    }

    #[test]
    fn linear_field_matches_closed_form() {
        let a = vec![0.4, -0.3];
        let mut field = LinearField { a: a.clone() };
        let std = Standardization::identity(2);
        let ode = OdeConfig::default();
        let thetas = arr2(&[[0.5, 0.25], [-1.0, 2.0], [0.0, 0.0]]);
        let got = log_density_with_field(&mut field, &std, 1.0, &ode, &thetas.view()).unwrap();
        for (row, value) in thetas.rows().into_iter().zip(&got) {
            let expected = linear_field_log_density(&a, 1.0, row.as_slice().unwrap());
            assert_abs_diff_eq!(*value, expected, epsilon = 1e-6);
        }
    }

    #[test]
    fn linear_field_matches_closed_form_under_dopri() {
        let a = vec![0.4, -0.3];
        let mut field = LinearField { a: a.clone() };
        let std = Standardization::identity(2);
        let ode = OdeConfig { method: OdeMethod::DopriAdaptive, ..OdeConfig::default() };
        let thetas = arr2(&[[0.5, 0.25], [-1.0, 2.0]]);
        let got = log_density_with_field(&mut field, &std, 1.0, &ode, &thetas.view()).unwrap();
        for (row, value) in thetas.rows().into_iter().zip(&got) {
            let expected = linear_field_log_density(&a, 1.0, row.as_slice().unwrap());
            assert_abs_diff_eq!(*value, expected, epsilon = 1e-5);
        }
    }

    #[test]
    fn hutchinson_is_exact_for_zero_and_linear_fields() {
        // Zero network: every probe sees a zero Jacobian, so the estimate
        // equals the exact density for any probe count.
        let flow = identity_flow(3, 1.0);
        let theta = [0.4, -0.2, 1.5];
        let exact = flow.log_density(&theta).unwrap();
        for probes in [1, 4, 16] {
            let est = flow.log_density_hutchinson(&theta, probes, 7).unwrap();
            assert_eq!(est.to_bits(), exact.to_bits());
        }

        // Diagonal linear field: z^T diag(a) z = sum(a) exactly for
        // Rademacher probes, so even few probes are exact.
        let a = vec![0.25, -0.15];
        let mut exact_field = LinearField { a: a.clone() };
        let std = Standardization::identity(2);
        let ode = OdeConfig::default();
        let theta = arr2(&[[0.7, -0.4]]);
        let exact =
            log_density_with_field(&mut exact_field, &std, 1.0, &ode, &theta.view()).unwrap()[0];
        let analytic = linear_field_log_density(&a, 1.0, &[0.7, -0.4]);
        assert_abs_diff_eq!(exact, analytic, epsilon = 1e-6);
    }

    #[test]
    fn hutchinson_converges_to_exact_on_a_random_net() {
        let net = VelocityNet::init(2, 2, 16, 31).unwrap();
        let std = Standardization::identity(2);
        let flow =
            FlowModel::new(net, std, 1.0, OdeConfig::default()).unwrap();
        let theta = [0.6, -0.9];
        let exact = flow.log_density(&theta).unwrap();
        let few = flow.log_density_hutchinson(&theta, 64, 3).unwrap();
        let many = flow.log_density_hutchinson(&theta, 1024, 3).unwrap();
        assert!((many - exact).abs() <= (few - exact).abs() + 1e-3);
        assert!((many - exact).abs() < 0.02, "1024-probe error {}", (many - exact).abs());
    }

    #[test]
    fn sampling_statistics_of_the_identity_flow() {
        let flow = identity_flow(2, 1.0);
        let n = 40_000;
        let draws = flow.sample(n, 5).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = draws.column(j).to_vec();
            let mean = crate::math::mean(&col);
            assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean[{j}] = {mean}");
        }

        // Variance scaling: T = 0.25 versus T = 1 halves the spread.
        let cold = flow.with_temperature(0.25).unwrap();
        let cold_draws = cold.sample(n, 5).unwrap();
        for j in 0..2 {
            let warm: Vec<f64> = draws.column(j).to_vec();
            let chill: Vec<f64> = cold_draws.column(j).to_vec();
            let ratio = (crate::math::sample_variance(&chill)
                / crate::math::sample_variance(&warm))
            .sqrt();
            assert!((ratio - 0.5).abs() < 0.02, "std ratio = {ratio}");
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let net = VelocityNet::init(2, 1, 8, 3).unwrap();
        let flow = FlowModel::new(
            net,
            Standardization::identity(2),
            0.9,
            OdeConfig::default(),
        )
        .unwrap();
        let a = flow.sample(64, 11).unwrap();
        let b = flow.sample(64, 11).unwrap();
        assert_eq!(a, b);
        let c = flow.sample(64, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn forward_backward_round_trip() {
        let net = VelocityNet::init(3, 2, 16, 17).unwrap();
        let mut field = ExactField::new(&net);
        let ode = OdeConfig::default();
        let start = arr2(&[[0.3, -0.5, 0.8], [1.2, 0.1, -0.7]]);
        let mut pos = start.clone();
        transport(&mut field, &ode, &mut pos, true).unwrap();
        transport(&mut field, &ode, &mut pos, false).unwrap();
        let mut worst = 0.0_f64;
        for (a, b) in pos.iter().zip(start.iter()) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst < 1e-5, "round-trip error {worst}");
    }

    #[test]
    fn temperature_shift_matches_base_ratio() {
        let flow = identity_flow(2, 1.0);
        let cold = flow.with_temperature(0.5).unwrap();
        let theta = [0.8, -0.3];
        let delta = cold.log_density(&theta).unwrap() - flow.log_density(&theta).unwrap();
        let expected = isotropic_gaussian_log_density(&theta, 0.5)
            - isotropic_gaussian_log_density(&theta, 1.0);
        assert_abs_diff_eq!(delta, expected, epsilon = 1e-12);

        // T = 1 is a no-op.
        let same = flow.with_temperature(1.0).unwrap();
        assert_eq!(
            same.log_density(&theta).unwrap().to_bits(),
            flow.log_density(&theta).unwrap().to_bits()
        );

        // Out-of-range temperatures are rejected.
        assert!(flow.with_temperature(0.0).is_err());
        assert!(flow.with_temperature(1.5).is_err());
    }

    #[test]
    fn density_at_the_mode_grows_as_temperature_drops() {
        let flow = identity_flow(3, 1.0);
        let origin = [0.0, 0.0, 0.0];
        let mut last = f64::NEG_INFINITY;
        for temperature in [1.0, 0.8, 0.5, 0.25] {
            let value = flow
                .with_temperature(temperature)
                .unwrap()
                .log_density(&origin)
                .unwrap();
            assert!(value > last);
            last = value;
        }
    }

    #[test]
    fn batch_and_single_density_agree() {
        let net = VelocityNet::init(2, 2, 8, 13).unwrap();
        let flow = FlowModel::new(
            net,
            Standardization::identity(2),
            0.95,
            OdeConfig::default(),
        )
        .unwrap();
        let thetas = arr2(&[[0.1, 0.4], [-0.8, 0.9], [1.5, -1.5], [0.0, 0.0], [2.0, 1.0]]);
        let batch = flow.log_density_batch(&thetas.view()).unwrap();
        for (row, batch_value) in thetas.rows().into_iter().zip(&batch) {
            let single = flow.log_density(row.as_slice().unwrap()).unwrap();
            assert_abs_diff_eq!(single, *batch_value, epsilon = 1e-12);
        }
    }

    #[test]
    fn rk4_step_doubling_is_stable() {
        let net = VelocityNet::init(2, 2, 16, 19).unwrap();
        let flow = FlowModel::new(
            net,
            Standardization::identity(2),
            0.9,
            OdeConfig { steps: 100, ..OdeConfig::default() },
        )
        .unwrap();
        let fine = flow
            .with_ode(OdeConfig { steps: 200, ..OdeConfig::default() })
            .unwrap();
        for theta in [[0.4, -0.2], [1.1, 0.8], [-0.9, -1.3]] {
            let a = flow.log_density(&theta).unwrap();
            let b = fine.log_density(&theta).unwrap();
            assert!((a - b).abs() < 1e-4, "100 vs 200 steps: {}", (a - b).abs());
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let net = VelocityNet::init(2, 2, 8, 29).unwrap();
        let std = Standardization {
            shift: ndarray::arr1(&[0.25, -1.5]),
            scale: ndarray::arr1(&[1.5, 0.4]),
        };
        let flow = FlowModel::new(net, std, 0.98, OdeConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.json");
        flow.save_checkpoint(&path).unwrap();
        let back = FlowModel::load_checkpoint(&path).unwrap();
        assert_eq!(back.temperature().to_bits(), flow.temperature().to_bits());
        assert_eq!(back.net(), flow.net());
        assert_eq!(back.standardization(), flow.standardization());
        let theta = [0.3, 0.3];
        assert_eq!(
            back.log_density(&theta).unwrap().to_bits(),
            flow.log_density(&theta).unwrap().to_bits()
        );
    }

    #[test]
    fn divergence_failure_reports_time() {
        // An explosive field overflows the state mid-integration.
        struct Explosive;
        impl VelocityField for Explosive {
            fn dim(&self) -> usize {
                1
            }
            fn velocity(&mut self, pos: &ArrayView2<f64>, _t: f64, vel: &mut Array2<f64>) {
                for (mut v, p) in vel.rows_mut().into_iter().zip(pos.rows()) {
                    v[0] = (p[0] * 1e3).exp();
                }
            }
            fn velocity_and_divergence(
                &mut self,
                pos: &ArrayView2<f64>,
                t: f64,
                vel: &mut Array2<f64>,
                div: &mut Array1<f64>,
            ) {
                self.velocity(pos, t, vel);
                div.fill(0.0);
            }
        }
        let mut field = Explosive;
        let mut pos = arr2(&[[5.0]]);
        let mut acc = ndarray::arr1(&[0.0]);
        let err = transport_backward_with_divergence(
            &mut field,
            &OdeConfig::default(),
            &mut pos,
            &mut acc,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OdeDiverged { .. }));
    }
}
