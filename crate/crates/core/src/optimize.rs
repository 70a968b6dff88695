//! Adam denoising on the penalized loss `W(P) + lambda/N |P - P0|^2`, and the
//! batched variant for clouds too large for one dense system.

use std::io::Write;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::cloud::{BoxSamples, PointCloud};
use crate::config::WindingConfig;
use crate::error::{Error, Result};
use crate::grad::grad_loss;
use crate::rng::RngStream;
use crate::system::{sample_box_for, Surfels, WceReport};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, len: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One bias-corrected update. Entries with `mask[i] == false` are left
    /// untouched, moments included.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], mask: Option<&[bool]>) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub enabled: bool,
    pub batch_size: usize,
    pub mix_size: usize,
    pub seed: u64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            batch_size: 5000,
            mix_size: 2500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub lambda: f64,
    pub iters: usize,
    pub adam: AdamConfig,
    pub winding: WindingConfig,
    pub batch: BatchConfig,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            lambda: 20.0,
            iters: 100,
            adam: AdamConfig::default(),
            winding: WindingConfig {
                eta: 10.0,
                box_half_extent: 0.6,
                ..WindingConfig::default()
            },
            batch: BatchConfig::default(),
        }
    }
}

impl DenoiseConfig {
    /// `iters = 0` is accepted and returns the input unchanged.
    pub fn validate(&self) -> Result<()> {
        self.winding.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate must be > 0, got {}", a.lr)));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::InvalidParameter("Adam betas must lie in [0, 1)".into()));
        }
        if !(a.eps > 0.0) {
            return Err(Error::InvalidParameter("Adam eps must be > 0".into()));
        }
        let b = &self.batch;
        if b.mix_size == 0 || b.batch_size < 2 * b.mix_size {
            return Err(Error::InvalidParameter(format!(
                "need batch_size >= 2 * mix_size > 0, got {} and {}",
                b.batch_size, b.mix_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub wce: WceReport,
    /// Wall-clock seconds spent on this row's evaluation and step.
    pub seconds: f64,
}

/// One batch of a batched run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    /// Points receiving updates in this batch.
    pub free: usize,
    /// Already-denoised points included as frozen anchors.
    pub anchors: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DenoiseTrace {
    /// Row 0 evaluates the input, row `k` the cloud after `k` steps. Batched
    /// runs concatenate the rows of all batches.
    pub rows: Vec<TraceRow>,
    /// Empty for unbatched runs.
    pub batches: Vec<BatchRecord>,
    /// Number of batches that moved each point.
    pub updates: Vec<u32>,
}

impl DenoiseTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn wce(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.wce.total).collect()
    }

    /// Running minimum of the loss.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.rows
            .iter()
            .scan(f64::INFINITY, |best, r| {
                *best = best.min(r.loss);
                Some(*best)
            })
            .collect()
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "iter,loss,wce,data_term,box_term,reg_term,seconds")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.6}",
                r.iter, r.loss, r.wce.total, r.wce.data_term, r.wce.box_term, r.wce.reg_term, r.seconds
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DenoiseOutput {
    pub cloud: PointCloud,
    pub trace: DenoiseTrace,
    /// Surfels solved at the final cloud; `None` for batched runs.
    pub surfels: Option<Surfels>,
}

/// A run that stopped early. `cloud` is the last cloud whose loss was
/// evaluated successfully and `trace` covers it.
#[derive(Debug, thiserror::Error)]
#[error("denoising stopped at iteration {iteration}: {source}")]
pub struct DenoiseAbort {
    pub iteration: usize,
    #[source]
    pub source: Error,
    pub cloud: PointCloud,
    pub trace: DenoiseTrace,
}

pub type DenoiseResult = std::result::Result<DenoiseOutput, Box<DenoiseAbort>>;

fn abort(iteration: usize, source: Error, cloud: PointCloud, trace: DenoiseTrace) -> Box<DenoiseAbort> {
    Box::new(DenoiseAbort {
        iteration,
        source,
        cloud,
        trace,
    })
}

struct Steps {
    cloud: PointCloud,
    surfels: Option<Surfels>,
    rows: Vec<TraceRow>,
}

/// Runs `iters` Adam steps from `start`, penalizing distance to `reference`.
/// Coordinates with `mask == false` never move.
fn adam_loop(
    start: &PointCloud,
    reference: &PointCloud,
    boxq: &BoxSamples,
    cfg: &DenoiseConfig,
    mask: Option<&[bool]>,
) -> std::result::Result<Steps, (usize, Error, Steps)> {
    let mut adam = Adam::new(cfg.adam, start.coords().len());
    let mut current = start.clone();
    // Last cloud whose loss was evaluated.
    let mut evaluated = start.clone();
    let mut rows = Vec::with_capacity(cfg.iters + 1);
    let mut surfels = None;
    for iter in 0..=cfg.iters {
        let t0 = Instant::now();
        let lg = match grad_loss(&current, reference, boxq, &cfg.winding, cfg.lambda) {
            Ok(lg) => lg,
            Err(e) => {
                let steps = Steps {
                    cloud: evaluated,
                    surfels,
                    rows,
                };
                return Err((iter, e, steps));
            }
        };
        surfels = Some(lg.wce.surfels);
        if iter < cfg.iters {
            let mut coords = current.coords().to_vec();
            adam.step(&mut coords, lg.gradient.as_slice(), mask);
            match current.with_coords(coords) {
                Ok(next) => evaluated = std::mem::replace(&mut current, next),
                Err(e) => {
                    rows.push(TraceRow {
                        iter,
                        loss: lg.loss,
                        wce: lg.wce.report,
                        seconds: t0.elapsed().as_secs_f64(),
                    });
                    let steps = Steps {
                        cloud: current,
                        surfels,
                        rows,
                    };
                    return Err((iter + 1, e, steps));
                }
            }
        }
        log::debug!("iter {iter}: loss {:.6e}", lg.loss);
        rows.push(TraceRow {
            iter,
            loss: lg.loss,
            wce: lg.wce.report,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(Steps {
        cloud: current,
        surfels,
        rows,
    })
}

/// Denoises `p0` with `cfg.iters` Adam steps on the penalized loss. The box
/// samples are drawn once from `cfg.winding` and kept fixed.
pub fn denoise(p0: &PointCloud, cfg: &DenoiseConfig) -> DenoiseResult {
    let fail = |e| abort(0, e, p0.clone(), DenoiseTrace::default());
    cfg.validate().map_err(fail)?;
    let boxq = sample_box_for(p0, &cfg.winding).map_err(fail)?;
    boxq.check_encloses(p0).map_err(fail)?;
    let updates = vec![u32::from(cfg.iters > 0); p0.len()];
    match adam_loop(p0, p0, &boxq, cfg, None) {
        Ok(s) => Ok(DenoiseOutput {
            cloud: s.cloud,
            trace: DenoiseTrace {
                rows: s.rows,
                batches: Vec::new(),
                updates,
            },
            surfels: s.surfels,
        }),
        Err((iter, e, s)) => Err(abort(
            iter,
            e,
            s.cloud,
            DenoiseTrace {
                rows: s.rows,
                batches: Vec::new(),
                updates,
            },
        )),
    }
}

/// Denoises a large cloud in batches.
///
/// A random subset of `batch_size` points is denoised first. Each later batch
/// takes the next `mix_size` undenoised points (in a fixed random order) plus
/// `mix_size` already-denoised anchors drawn uniformly without replacement;
/// only the undenoised points move. The box samples are drawn once for the
/// full cloud's extent with `box_count(batch_size)` samples, so every batch
/// system sees the same constraints. Output order matches input order.
///
/// Clouds with at most `batch_size` points are passed to [`denoise`].
pub fn denoise_batched(p0: &PointCloud, cfg: &DenoiseConfig) -> DenoiseResult {
    let fail = |e| abort(0, e, p0.clone(), DenoiseTrace::default());
    cfg.validate().map_err(fail)?;
    let n = p0.len();
    let bcfg = cfg.batch;
    if n <= bcfg.batch_size {
        return denoise(p0, cfg);
    }
    let d = p0.dim();
    let box_cfg = WindingConfig {
        box_sample_count: Some(cfg.winding.box_count(bcfg.batch_size)),
        ..cfg.winding.clone()
    };
    let boxq = sample_box_for(p0, &box_cfg).map_err(fail)?;
    boxq.check_encloses(p0).map_err(fail)?;

    let mut rng = RngStream::with_stream(bcfg.seed, 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut coords = p0.coords().to_vec();
    let mut denoised: Vec<usize> = Vec::with_capacity(n);
    let mut trace = DenoiseTrace {
        updates: vec![0; n],
        ..DenoiseTrace::default()
    };
    let mut next = 0;
    while next < n {
        let t0 = Instant::now();
        let take = if denoised.is_empty() { bcfg.batch_size } else { bcfg.mix_size };
        let free: Vec<usize> = order[next..(next + take).min(n)].to_vec();
        let anchors: Vec<usize> = if denoised.is_empty() {
            Vec::new()
        } else {
            let k = bcfg.mix_size.min(denoised.len());
            index::sample(&mut rng, denoised.len(), k)
                .into_iter()
                .map(|i| denoised[i])
                .collect()
        };
        let members: Vec<usize> = free.iter().chain(&anchors).copied().collect();
        let gather = |src: &[f64]| -> Vec<f64> {
            members.iter().flat_map(|&i| src[i * d..(i + 1) * d].iter().copied()).collect()
        };
        let start = PointCloud::new(d, gather(&coords)).map_err(fail)?;
        // Anchors are penalized against their current positions, which is
        // where they stay.
        let mut reference = gather(p0.coords());
        let nf = free.len() * d;
        reference[nf..].copy_from_slice(&start.coords()[nf..]);
        let reference = PointCloud::new(d, reference).map_err(fail)?;
        let mask: Vec<bool> = (0..members.len() * d).map(|c| c < nf).collect();

        let batch_index = trace.batches.len();
        let steps = match adam_loop(&start, &reference, &boxq, cfg, Some(&mask)) {
            Ok(s) => s,
            Err((iter, e, s)) => {
                scatter(&mut coords, &members[..free.len()], &s.cloud, d);
                trace.rows.extend(s.rows);
                let cloud = PointCloud::new(d, coords).expect("finite coordinates");
                log::error!("batch {batch_index} failed at iteration {iter}");
                return Err(abort(iter, e, cloud, trace));
            }
        };
        scatter(&mut coords, &members[..free.len()], &steps.cloud, d);
        if cfg.iters > 0 {
            for &i in &free {
                trace.updates[i] += 1;
            }
        }
        let record = BatchRecord {
            free: free.len(),
            anchors: anchors.len(),
            initial_loss: steps.rows.first().map_or(f64::NAN, |r| r.loss),
            final_loss: steps.rows.last().map_or(f64::NAN, |r| r.loss),
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "batch {batch_index}: {} free + {} anchors, loss {:.6e} -> {:.6e} ({:.1} s)",
            record.free,
            record.anchors,
            record.initial_loss,
            record.final_loss,
            record.seconds
        );
        trace.batches.push(record);
        trace.rows.extend(steps.rows);
        denoised.extend_from_slice(&free);
        next += free.len();
    }
    Ok(DenoiseOutput {
        cloud: PointCloud::new(d, coords).map_err(fail)?,
        trace,
        surfels: None,
    })
}

/// Writes the first `targets.len()` points of `batch` back to their slots.
fn scatter(coords: &mut [f64], targets: &[usize], batch: &PointCloud, d: usize) {
    for (k, &i) in targets.iter().enumerate() {
        coords[i * d..(i + 1) * d].copy_from_slice(batch.point(k));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{add_gaussian_noise, sample_circle, sample_sphere};

    fn small_cfg(iters: usize) -> DenoiseConfig {
        DenoiseConfig {
            iters,
            ..DenoiseConfig::default()
        }
    }

    fn noisy_circle(n: usize, sigma: f64, seed: u64) -> PointCloud {
        let c = sample_circle(n, 0.4).unwrap().without_normals();
        add_gaussian_noise(&c, sigma, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(AdamConfig::default(), 3);
        let mut p = [0.0, 1.0, 2.0];
        adam.step(&mut p, &[5.0, -0.01, 0.0], None);
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - (1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p[2], 2.0);
    }

    #[test]
    fn adam_matches_hand_recursion() {
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, 1);
        let mut p = [0.3];
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.3f64);
        for t in 1..=5 {
            let g = 2.0 * x;
            adam.step(&mut p, &[g], None);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - x).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_mask_freezes_entries() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut p = [1.0, 1.0];
        for _ in 0..3 {
            adam.step(&mut p, &[1.0, 1.0], Some(&[true, false]));
        }
        assert!(p[0] < 1.0);
        assert_eq!(p[1], 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(DenoiseConfig::default().validate().is_ok());
        let mut c = DenoiseConfig::default();
        c.adam.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = DenoiseConfig::default();
        c.batch.mix_size = 3000;
        assert!(c.validate().is_err());
    }

    #[test]
    fn trace_has_one_row_per_iteration_plus_initial() {
        let p0 = noisy_circle(60, 0.004, 1);
        let out = denoise(&p0, &small_cfg(5)).unwrap();
        assert_eq!(out.trace.rows.len(), 6);
        assert_eq!(out.trace.rows[0].iter, 0);
        assert_eq!(out.cloud.len(), p0.len());
        let best = out.trace.best_so_far();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_iterations_is_identity() {
        let p0 = noisy_circle(40, 0.004, 2);
        let out = denoise(&p0, &small_cfg(0)).unwrap();
        assert_eq!(out.cloud.coords(), p0.coords());
        assert_eq!(out.trace.rows.len(), 1);
    }

    #[test]
    fn loss_decreases_and_points_stay_pinned() {
        let p0 = noisy_circle(120, 0.005, 3);
        let cfg = small_cfg(30);
        let out = denoise(&p0, &cfg).unwrap();
        let l0 = out.trace.initial_loss().unwrap();
        assert!(out.trace.final_loss().unwrap() < l0);
        let bound = (p0.len() as f64 * l0 / cfg.lambda).sqrt();
        for i in 0..p0.len() {
            let d: f64 = out
                .cloud
                .point(i)
                .iter()
                .zip(p0.point(i))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(d <= bound);
        }
    }

    #[test]
    fn large_lambda_pins_points() {
        let p0 = noisy_circle(80, 0.004, 4);
        let cfg = DenoiseConfig {
            lambda: 1e6,
            ..small_cfg(100)
        };
        let out = denoise(&p0, &cfg).unwrap();
        let disp: f64 = out
            .cloud
            .coords()
            .iter()
            .zip(p0.coords())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
            / (p0.len() as f64).sqrt();
        assert!(disp < 1e-4, "{disp}");
    }

    #[test]
    fn denoise_is_deterministic() {
        let p0 = noisy_circle(50, 0.004, 5);
        let a = denoise(&p0, &small_cfg(4)).unwrap();
        let b = denoise(&p0, &small_cfg(4)).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.trace.losses(), b.trace.losses());
    }

    #[test]
    fn box_inside_cloud_is_rejected() {
        let p0 = sample_circle(30, 0.65).unwrap();
        let err = denoise(&p0, &small_cfg(3)).unwrap_err();
        assert!(matches!(err.source, Error::BoxTooSmall { .. }));
        assert_eq!(err.cloud, p0);
    }

    #[test]
    fn small_batched_equals_plain() {
        let p0 = noisy_circle(70, 0.004, 6);
        let mut cfg = small_cfg(5);
        cfg.batch = BatchConfig {
            enabled: true,
            batch_size: 100,
            mix_size: 50,
            seed: 9,
        };
        let a = denoise(&p0, &cfg).unwrap();
        let b = denoise_batched(&p0, &cfg).unwrap();
        assert_eq!(a.cloud, b.cloud);
    }

    #[test]
    fn batched_updates_every_point_once_and_freezes_anchors() {
        let clean = sample_sphere(230, 0.4).unwrap().without_normals();
        let p0 = add_gaussian_noise(&clean, 0.004, &mut RngStream::new(7)).unwrap();
        let mut cfg = small_cfg(3);
        cfg.batch = BatchConfig {
            enabled: true,
            batch_size: 80,
            mix_size: 40,
            seed: 1,
        };
        let out = denoise_batched(&p0, &cfg).unwrap();
        assert!(out.trace.updates.iter().all(|&u| u == 1));
        // 80 + 40 * 4 = 240 >= 230, so five batches.
        assert_eq!(out.trace.batches.len(), 5);
        assert_eq!(out.trace.batches[0].anchors, 0);
        assert!(out.trace.batches[1..].iter().all(|b| b.anchors == 40));
        assert_eq!(out.trace.rows.len(), 5 * 4);
        assert!(out.cloud.coords().iter().zip(p0.coords()).any(|(a, b)| a != b));
    }
}
