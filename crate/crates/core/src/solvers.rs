//! Iterative reconstruction baselines (Adam, stochastic L-BFGS) and the
//! fixed-probe calibration protocol.

use std::collections::VecDeque;
use std::time::Instant;

use num_complex::Complex;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adjoint::{grad_probe, grad_volume, l1_prox, LossDomain, Storage};
use crate::error::{CoreError, Result};
use crate::multislice::ForwardConfig;
use crate::optics::{ProbeField, ScanGrid};
use crate::seed::stream_rng;
use crate::tensor::{DiffractionStack, Pitch, PotentialVolume, Real};

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// Textbook Adam update with bias correction.
pub fn adam_step(state: &mut AdamState, param: &mut [f64], grad: &[f64]) -> Result<()> {
    if param.len() != state.m.len() || grad.len() != state.m.len() {
        return Err(CoreError::ShapeMismatch("adam state/param/grad sizes".into()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(CoreError::NonFinite("adam gradient".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..param.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        param[i] -= state.lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

/// Limited-memory BFGS state: recent (s, y) pairs with curvature guards.
#[derive(Debug, Clone)]
pub struct LbfgsState {
    history: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    pub memory: usize,
    pub lr: f64,
}

impl LbfgsState {
    pub fn new(memory: usize, lr: f64) -> Self {
        LbfgsState { history: VecDeque::new(), memory, lr }
    }

    /// Store a correction pair; pairs violating s'y > 0 are skipped.
    pub fn push_pair(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy <= 1e-12 || !sy.is_finite() {
            return;
        }
        if self.history.len() == self.memory {
            self.history.pop_front();
        }
        self.history.push_back((s, y, 1.0 / sy));
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }
}

/// Two-loop recursion; empty history falls back to steepest descent.
pub fn lbfgs_direction(state: &LbfgsState, grad: &[f64]) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    if state.history.is_empty() {
        for v in &mut q {
            *v = -*v;
        }
        return q;
    }
    let m = state.history.len();
    let mut alpha = vec![0.0; m];
    for (i, (s, y, rho)) in state.history.iter().enumerate().rev() {
        let a = rho * s.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        alpha[i] = a;
        for (qv, yv) in q.iter_mut().zip(y) {
            *qv -= a * yv;
        }
    }
    // gamma-scaled initial Hessian from the newest pair
    let (s_new, y_new, _) = state.history.back().unwrap();
    let sy: f64 = s_new.iter().zip(y_new).map(|(a, b)| a * b).sum();
    let yy: f64 = y_new.iter().map(|v| v * v).sum();
    let gamma = if yy > 1e-300 { sy / yy } else { 1.0 };
    for v in &mut q {
        *v *= gamma;
    }
    for (i, (s, y, rho)) in state.history.iter().enumerate() {
        let beta = rho * y.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        let coeff = alpha[i] - beta;
        for (qv, sv) in q.iter_mut().zip(s) {
            *qv += coeff * sv;
        }
    }
    for v in &mut q {
        *v = -*v;
    }
    q
}

/// Baseline reconstruction method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Adam,
    Lbfgs,
}

/// Reconstruction protocol configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructConfig {
    pub method: Method,
    /// Adam: full passes over all patterns.
    pub epochs: usize,
    pub adam_lr: f64,
    /// L-BFGS: outer iterations, each evaluating `minibatches_per_iter`
    /// randomly chosen mini-batches.
    pub lbfgs_iterations: usize,
    pub lbfgs_minibatches_per_iter: usize,
    /// Restart learning rates; the best-loss run wins.
    pub lbfgs_lrs: Vec<f64>,
    pub lbfgs_memory: usize,
    pub batch_size: usize,
    /// Sparsity weight; soft threshold gamma*lr after each step.
    pub gamma: f64,
    pub seed: u64,
    pub loss_domain: LossDomain,
    pub storage: Storage,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig {
            method: Method::Adam,
            epochs: 200,
            adam_lr: 5e-4,
            lbfgs_iterations: 5,
            lbfgs_minibatches_per_iter: 20,
            lbfgs_lrs: vec![1.0, 1e-1, 1e-2],
            lbfgs_memory: 10,
            batch_size: 32,
            gamma: 0.0,
            seed: 0,
            loss_domain: LossDomain::Intensity,
            storage: Storage::Full,
        }
    }
}

/// Per-run diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverRun {
    pub method: String,
    pub iterations: usize,
    pub batch_size: usize,
    /// Full-data loss once per iteration (Adam epoch / L-BFGS iteration).
    pub loss_trace: Vec<f64>,
    /// Elapsed seconds at each trace point.
    pub wall_clock: Vec<f64>,
}

struct Problem<'a, T: Real> {
    probe: &'a ProbeField<T>,
    scan: &'a ScanGrid,
    meas: &'a DiffractionStack<T>,
    wavelength: f64,
    fwd: &'a ForwardConfig,
    cfg: &'a ReconstructConfig,
}

impl<'a, T: Real> Problem<'a, T> {
    fn loss_grad(&self, x: &PotentialVolume<T>, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        let rep = grad_volume(
            x,
            self.probe,
            self.scan,
            self.meas,
            self.wavelength,
            self.fwd,
            self.cfg.loss_domain,
            self.cfg.storage,
            batch,
        )?;
        Ok((rep.value, rep.grad_volume.data.iter().map(|g| g.f64()).collect()))
    }

    fn full_loss(&self, x: &PotentialVolume<T>) -> Result<f64> {
        let all: Vec<usize> = (0..self.scan.len()).collect();
        Ok(self.loss_grad(x, &all)?.0)
    }
}

fn write_param<T: Real>(x: &mut PotentialVolume<T>, flat: &[f64]) {
    for (v, &f) in x.vol.data.iter_mut().zip(flat) {
        *v = T::of(f);
    }
}

/// Reconstruct a volume from measurements with a fixed probe, following the
/// mini-batch protocol; returns the best-loss iterate and the run trace.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_iterative<T: Real>(
    meas: &DiffractionStack<T>,
    probe: &ProbeField<T>,
    scan: &ScanGrid,
    depth: usize,
    pitch: Pitch,
    wavelength: f64,
    fwd: &ForwardConfig,
    cfg: &ReconstructConfig,
) -> Result<(PotentialVolume<T>, SolverRun)> {
    let h = meas.stack.ky;
    let w = meas.stack.kx;
    let problem = Problem { probe, scan, meas, wavelength, fwd, cfg };
    let n_positions = scan.len();
    let mut order: Vec<usize> = (0..n_positions).collect();
    let mut rng = stream_rng(cfg.seed, "reconstruct", 0);
    let started = Instant::now();

    let mut best_loss = f64::INFINITY;
    let mut best: Option<PotentialVolume<T>> = None;
    let mut loss_trace = Vec::new();
    let mut wall_clock = Vec::new();

    match cfg.method {
        Method::Adam => {
            let mut x = PotentialVolume::<T>::zeros(depth, h, w, pitch);
            let mut flat = vec![0.0f64; depth * h * w];
            let mut state = AdamState::new(flat.len(), cfg.adam_lr);
            for _epoch in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for batch in order.chunks(cfg.batch_size.max(1)) {
                    let (loss, grad) = problem.loss_grad(&x, batch)?;
                    if !loss.is_finite() {
                        return Err(CoreError::Diverged(format!(
                            "adam loss became non-finite; trace so far {loss_trace:?}"
                        )));
                    }
                    adam_step(&mut state, &mut flat, &grad)?;
                    write_param(&mut x, &flat);
                    if cfg.gamma > 0.0 {
                        l1_prox(&mut x.vol, cfg.gamma * cfg.adam_lr);
                        for (f, v) in flat.iter_mut().zip(&x.vol.data) {
                            *f = v.f64();
                        }
                    }
                }
                let full = problem.full_loss(&x)?;
                loss_trace.push(full);
                wall_clock.push(started.elapsed().as_secs_f64());
                if full < best_loss {
                    best_loss = full;
                    best = Some(x.clone());
                }
            }
        }
        Method::Lbfgs => {
            for (run_idx, &lr) in cfg.lbfgs_lrs.iter().enumerate() {
                let mut x = PotentialVolume::<T>::zeros(depth, h, w, pitch);
                let mut flat = vec![0.0f64; depth * h * w];
                let mut state = LbfgsState::new(cfg.lbfgs_memory, lr);
                let mut rng_run = stream_rng(cfg.seed, "lbfgs", run_idx as u64);
                for _it in 0..cfg.lbfgs_iterations {
                    for _mb in 0..cfg.lbfgs_minibatches_per_iter {
                        order.shuffle(&mut rng_run);
                        let batch = &order[..cfg.batch_size.min(n_positions)];
                        let (loss, grad) = problem.loss_grad(&x, batch)?;
                        if !loss.is_finite() {
                            return Err(CoreError::Diverged(format!(
                                "lbfgs loss became non-finite; trace {loss_trace:?}"
                            )));
                        }
                        let dir = lbfgs_direction(&state, &grad);
                        let mut flat_new: Vec<f64> =
                            flat.iter().zip(&dir).map(|(x, d)| x + lr * d).collect();
                        let mut x_new = x.clone();
                        write_param(&mut x_new, &flat_new);
                        if cfg.gamma > 0.0 {
                            l1_prox(&mut x_new.vol, cfg.gamma * lr);
                            for (f, v) in flat_new.iter_mut().zip(&x_new.vol.data) {
                                *f = v.f64();
                            }
                        }
                        // curvature pair from the same mini-batch at both points
                        let (_, grad_new) = problem.loss_grad(&x_new, batch)?;
                        let s: Vec<f64> =
                            flat_new.iter().zip(&flat).map(|(a, b)| a - b).collect();
                        let y: Vec<f64> =
                            grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
                        state.push_pair(s, y);
                        flat = flat_new;
                        x = x_new;
                    }
                    let full = problem.full_loss(&x)?;
                    loss_trace.push(full);
                    wall_clock.push(started.elapsed().as_secs_f64());
                    if full < best_loss {
                        best_loss = full;
                        best = Some(x.clone());
                    }
                }
            }
        }
    }

    let volume = best.ok_or_else(|| CoreError::Diverged("no iterate recorded".into()))?;
    let iterations = match cfg.method {
        Method::Adam => cfg.epochs,
        Method::Lbfgs => cfg.lbfgs_iterations * cfg.lbfgs_lrs.len(),
    };
    Ok((
        volume,
        SolverRun {
            method: match cfg.method {
                Method::Adam => "adam".into(),
                Method::Lbfgs => "lbfgs".into(),
            },
            iterations,
            batch_size: cfg.batch_size,
            loss_trace,
            wall_clock,
        },
    ))
}

/// Probe calibration configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeFitConfig {
    pub epochs: usize,
    pub probe_lr: f64,
    pub volume_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_domain: LossDomain,
}

impl Default for ProbeFitConfig {
    fn default() -> Self {
        ProbeFitConfig {
            epochs: 50,
            probe_lr: 5e-4,
            volume_lr: 5e-4,
            batch_size: 32,
            seed: 0,
            loss_domain: LossDomain::Intensity,
        }
    }
}

/// Jointly optimize per-example volumes and one shared probe, then discard
/// the volumes. The probe norm is re-projected to its dose-derived value
/// after every update.
#[allow(clippy::too_many_arguments)]
pub fn fit_probe<T: Real>(
    examples: &[DiffractionStack<T>],
    init_probe: &ProbeField<T>,
    scan: &ScanGrid,
    depth: usize,
    pitch: Pitch,
    wavelength: f64,
    fwd: &ForwardConfig,
    cfg: &ProbeFitConfig,
) -> Result<ProbeField<T>> {
    if examples.is_empty() {
        return Err(CoreError::InvalidArgument("need at least one example".into()));
    }
    let h = init_probe.field.h;
    let w = init_probe.field.w;
    let target_norm = init_probe.norm;

    let mut probe = init_probe.clone();
    let mut probe_flat: Vec<f64> = Vec::with_capacity(2 * h * w);
    for c in &probe.field.data {
        probe_flat.push(c.re.f64());
        probe_flat.push(c.im.f64());
    }
    let mut probe_state = AdamState::new(probe_flat.len(), cfg.probe_lr);

    let mut volumes: Vec<PotentialVolume<T>> =
        (0..examples.len()).map(|_| PotentialVolume::zeros(depth, h, w, pitch)).collect();
    let mut vol_flats: Vec<Vec<f64>> = vec![vec![0.0; depth * h * w]; examples.len()];
    let mut vol_states: Vec<AdamState> =
        (0..examples.len()).map(|_| AdamState::new(depth * h * w, cfg.volume_lr)).collect();

    let mut rng = stream_rng(cfg.seed, "probe-fit", 0);
    let mut order: Vec<usize> = (0..scan.len()).collect();

    for _epoch in 0..cfg.epochs {
        for (ei, meas) in examples.iter().enumerate() {
            order.shuffle(&mut rng);
            let batch = &order[..cfg.batch_size.min(order.len())];
            let rep = grad_probe(
                &volumes[ei],
                &probe,
                scan,
                meas,
                wavelength,
                fwd,
                cfg.loss_domain,
                batch,
            )?;
            if !rep.value.is_finite() {
                return Err(CoreError::Diverged("probe fit loss non-finite".into()));
            }
            // volume update
            let gvol: Vec<f64> = rep.grad_volume.data.iter().map(|g| g.f64()).collect();
            adam_step(&mut vol_states[ei], &mut vol_flats[ei], &gvol)?;
            write_param(&mut volumes[ei], &vol_flats[ei]);
            // probe update on interleaved re/im
            let gp = rep.grad_probe.as_ref().expect("probe grad requested");
            let mut gflat = Vec::with_capacity(2 * h * w);
            for c in &gp.data {
                gflat.push(c.re.f64());
                gflat.push(c.im.f64());
            }
            adam_step(&mut probe_state, &mut probe_flat, &gflat)?;
            // re-project the norm
            let total: f64 = probe_flat.iter().map(|v| v * v).sum();
            let scale = (target_norm / total).sqrt();
            for v in &mut probe_flat {
                *v *= scale;
            }
            for (c, pair) in probe.field.data.iter_mut().zip(probe_flat.chunks_exact(2)) {
                *c = Complex::new(T::of(pair[0]), T::of(pair[1]));
            }
        }
    }
    Ok(probe)
}
