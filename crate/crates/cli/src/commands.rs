use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use winding_clearness::io::{read_cloud, write_cloud};
use winding_clearness::metrics::{self, MetricsReport};
use winding_clearness::optimize::{AdamConfig, BatchConfig, DenoiseAbort, DenoiseConfig};
use winding_clearness::{
    add_gaussian_noise, denoise, denoise_batched, field_grid, sample_box_for, sample_circle,
    sample_rectangle, sample_sphere, winding_clearness, PointCloud, RngStream, Surfels, WceReport,
    WindingConfig,
};

use crate::args::*;
use crate::CliError;

type CmdResult = Result<(), CliError>;

const NC_SURFEL_LABEL: &str = "solved surfels (point-level adaptation)";

pub fn run(cmd: Command, threads: Option<usize>) -> CmdResult {
    match cmd {
        Command::Wce(a) => wce(a),
        Command::Denoise(a) => denoise_cmd(a),
        Command::Field(a) => field(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Noise(a) => noise(a),
        Command::Make(a) => make(a),
        Command::Bench(a) => bench(a, threads),
    }
}

#[derive(Clone, Copy)]
enum Task {
    Evaluate,
    Denoise,
}

fn winding_config(a: &WindingArgs, dim: usize, task: Task) -> WindingConfig {
    let (eta, h) = match task {
        // 50 for the 2D circle study, 200 for the 3D shape study; h = 0.7.
        Task::Evaluate => (if dim == 2 { 50.0 } else { 200.0 }, 0.7),
        // Denoising: eta = 10, h = 0.6.
        Task::Denoise => (10.0, 0.6),
    };
    WindingConfig {
        width: a.width,
        alpha: a.alpha,
        eta: a.eta.unwrap_or(eta),
        box_half_extent: a.box_half_extent.unwrap_or(h),
        box_sample_count: a.box_samples,
        seed: a.seed,
    }
}

fn evaluate(cloud: &PointCloud, cfg: &WindingConfig) -> Result<(WceReport, Surfels), CliError> {
    cfg.validate()?;
    let boxq = sample_box_for(cloud, cfg)?;
    boxq.check_encloses(cloud)?;
    Ok(winding_clearness(cloud, &boxq, cfg)?)
}

fn report_json(r: &WceReport) -> Value {
    json!({
        "total": r.total,
        "data_term": r.data_term,
        "box_term": r.box_term,
        "reg_term": r.reg_term,
        "closed_form": r.closed_form,
    })
}

fn config_json(cfg: &WindingConfig, cloud: &PointCloud) -> Value {
    json!({
        "width": cfg.width,
        "alpha": cfg.alpha,
        "eta": cfg.eta,
        "box_half_extent": cfg.box_half_extent,
        "box_samples": cfg.box_count(cloud.len()).max(2 * cloud.dim()),
        "seed": cfg.seed,
    })
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string(v).expect("serializable"));
}

fn wce(a: WceArgs) -> CmdResult {
    let cloud = read_cloud(&a.input)?;
    let cfg = winding_config(&a.winding, cloud.dim(), Task::Evaluate);
    let (report, mu) = evaluate(&cloud, &cfg)?;
    if let Some(path) = &a.surfels {
        let with_mu = cloud.clone().with_normals(mu.as_slice().to_vec())?;
        write_cloud(&with_mu, path)?;
    }
    let mut out = report_json(&report);
    out["n"] = json!(cloud.len());
    out["dim"] = json!(cloud.dim());
    out["config"] = config_json(&cfg, &cloud);
    out["solve"] = json!({
        "method": format!("{:?}", mu.method),
        "relative_residual": mu.relative_residual,
        "condition_estimate": mu.condition_estimate,
    });
    print_json(&out);
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_trace(trace: &winding_clearness::DenoiseTrace, path: &Path) -> CmdResult {
    let mut w = BufWriter::new(fs::File::create(path)?);
    trace.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn denoise_cmd(a: DenoiseArgs) -> CmdResult {
    let cloud = read_cloud(&a.input)?;
    let cfg = DenoiseConfig {
        lambda: a.lambda,
        iters: a.iters,
        adam: AdamConfig {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        },
        winding: winding_config(&a.winding, cloud.dim(), Task::Denoise),
        batch: BatchConfig {
            enabled: a.batch,
            batch_size: a.batch_size,
            mix_size: a.mix_size,
            seed: a.batch_seed,
        },
    };
    let trace_path = a.trace.clone().unwrap_or_else(|| with_suffix(&a.output, ".trace.csv"));
    let t0 = Instant::now();
    let result = if a.batch && cloud.len() > a.batch_size {
        log::info!(
            "batched mode: {} points, first batch {}, then {} new + {} anchors per batch",
            cloud.len(),
            a.batch_size,
            a.mix_size,
            a.mix_size
        );
        denoise_batched(&cloud, &cfg)
    } else {
        denoise(&cloud, &cfg)
    };
    let out = match result {
        Ok(out) => out,
        Err(abort) => {
            let DenoiseAbort {
                iteration,
                source,
                cloud,
                trace,
            } = *abort;
            if !trace.rows.is_empty() {
                write_cloud(&cloud, &a.output)?;
                write_trace(&trace, &trace_path)?;
                log::warn!("wrote the last valid cloud (iteration {iteration}) before failing");
            }
            return Err(source.into());
        }
    };
    let mut result_cloud = out.cloud;
    if a.normals {
        match &out.surfels {
            Some(mu) => {
                let unit: Option<Vec<Vec<f64>>> = mu.unit_normals().into_iter().collect();
                match unit {
                    Some(n) => result_cloud = result_cloud.with_normals(n.concat())?,
                    None => log::warn!("some solved surfels vanish; writing the cloud without normals"),
                }
            }
            None => log::warn!("no final surfels for a batched run; writing the cloud without normals"),
        }
    }
    write_cloud(&result_cloud, &a.output)?;
    write_trace(&out.trace, &trace_path)?;
    let tr = &out.trace;
    print_json(&json!({
        "n": result_cloud.len(),
        "iters": cfg.iters,
        "batches": tr.batches.len().max(1),
        "initial_loss": tr.initial_loss(),
        "final_loss": tr.final_loss(),
        "initial_wce": tr.rows.first().map(|r| r.wce.total),
        "final_wce": tr.rows.last().map(|r| r.wce.total),
        "seconds": t0.elapsed().as_secs_f64(),
        "output": a.output,
        "trace": trace_path,
    }));
    Ok(())
}

fn field(a: FieldArgs) -> CmdResult {
    let cloud = read_cloud(&a.input)?;
    let cfg = winding_config(&a.winding, cloud.dim(), Task::Evaluate);
    let (report, mu) = evaluate(&cloud, &cfg)?;
    let extent = a.extent.unwrap_or(cfg.box_half_extent);
    let grid = field_grid(&cloud, &mu, a.resolution, extent, &cfg)?;

    let mut w = BufWriter::new(fs::File::create(&a.output)?);
    let axes = ["x", "y", "z"];
    writeln!(w, "{},chi", axes[..grid.dim].join(","))?;
    let res = grid.resolution;
    for (idx, v) in grid.values.iter().enumerate() {
        let mut rem = idx;
        let mut fields = Vec::with_capacity(grid.dim + 1);
        for _ in 0..grid.dim {
            fields.push(format!("{:.16e}", grid.axis_coord(rem % res)));
            rem /= res;
        }
        fields.push(format!("{v:.16e}"));
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;

    let sidecar = json!({
        "dim": grid.dim,
        "resolution": grid.resolution,
        "extent": grid.extent,
        "count": grid.values.len(),
        "layout": "x varies fastest",
        "config": config_json(&cfg, &cloud),
        "wce": report_json(&report),
        "grid": a.output,
    });
    fs::write(with_suffix(&a.output, ".json"), serde_json::to_string_pretty(&sidecar).expect("json"))?;
    print_json(&sidecar);
    Ok(())
}

fn metrics_cmd(a: MetricsArgs) -> CmdResult {
    let cloud = read_cloud(&a.input)?;
    let reference = read_cloud(&a.reference)?;
    let cfg = winding_config(&a.winding, cloud.dim(), Task::Evaluate);
    let mut wce = None;
    let (evaluated, label) = match a.normals {
        NormalSource::None => (cloud.clone().without_normals(), None),
        NormalSource::File => {
            if cloud.normals().is_none() {
                return Err(CliError::Input("input file has no normals".into()));
            }
            (cloud.clone(), Some("file"))
        }
        NormalSource::Surfels => {
            if reference.normals().is_none() {
                log::warn!("reference has no normals; skipping normal consistency");
                (cloud.clone().without_normals(), None)
            } else {
                let (report, mu) = evaluate(&cloud, &cfg)?;
                wce = Some(report.total);
                let unit: Vec<f64> = mu
                    .unit_normals()
                    .into_iter()
                    .map(|n| n.unwrap_or_else(|| vec![0.0; cloud.dim()]))
                    .collect::<Vec<_>>()
                    .concat();
                (cloud.clone().with_normals(unit)?, Some(NC_SURFEL_LABEL))
            }
        }
    };
    let reference = if label.is_some() { reference } else { reference.without_normals() };
    let mut report: MetricsReport = metrics::evaluate(&evaluated, &reference, a.tau)?;
    if a.wce {
        report.wce = match wce {
            Some(w) => Some(w),
            None => Some(evaluate(&cloud, &cfg)?.0.total),
        };
    }
    print_json(&json!({
        "cd": report.cd,
        "nc": report.nc,
        "nc_normals": label,
        "fscore": report.fscore,
        "precision": report.precision,
        "recall": report.recall,
        "tau": a.tau,
        "mads": report.mads,
        "wce": report.wce,
    }));
    Ok(())
}

fn noise(a: NoiseArgs) -> CmdResult {
    let cloud = read_cloud(&a.input)?;
    let noisy = add_gaussian_noise(&cloud, a.sigma, &mut RngStream::new(a.seed))?;
    write_cloud(&noisy, &a.output)?;
    Ok(())
}

fn make(a: MakeArgs) -> CmdResult {
    let cloud = match a.shape {
        Shape::Circle => sample_circle(a.n, a.radius)?,
        Shape::Rectangle => sample_rectangle(a.n, a.major, a.minor)?,
        Shape::Sphere => sample_sphere(a.n, a.radius)?,
    };
    let cloud = if a.no_normals { cloud.without_normals() } else { cloud };
    write_cloud(&cloud, &a.output)?;
    Ok(())
}

/// Least-squares slope of `ln t` against `ln n`.
fn fit_exponent(points: &[(usize, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn bench(a: BenchArgs, threads: Option<usize>) -> CmdResult {
    if a.iters == 0 {
        return Err(CliError::Input("bench needs --iters >= 1".into()));
    }
    let mut results = Vec::new();
    let mut timings = Vec::new();
    for &n in &a.sizes {
        let clean = match a.dim {
            2 => sample_circle(n, 0.5)?,
            3 => sample_sphere(n, 0.5)?,
            d => return Err(winding_clearness::Error::UnsupportedDim(d).into()),
        }
        .without_normals();
        let noisy = add_gaussian_noise(&clean, a.sigma, &mut RngStream::new(a.seed))?;
        let cfg = DenoiseConfig {
            iters: a.iters,
            ..DenoiseConfig::default()
        };
        let t0 = Instant::now();
        let out = denoise(&noisy, &cfg).map_err(|e| CliError::from(e.source))?;
        let total = t0.elapsed().as_secs_f64();
        // The final row only evaluates; average over the rows that also step.
        let stepping = &out.trace.rows[..a.iters];
        let per_iter = stepping.iter().map(|r| r.seconds).sum::<f64>() / a.iters as f64;
        log::info!("n = {n}: {per_iter:.3} s per iteration");
        timings.push((n, per_iter));
        results.push(json!({ "n": n, "seconds_per_iter": per_iter, "total_seconds": total }));
    }
    print_json(&json!({
        "dim": a.dim,
        "iters": a.iters,
        "threads": threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
        "results": results,
        "fit_exponent": fit_exponent(&timings),
    }));
    Ok(())
}
