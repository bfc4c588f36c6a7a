//! Subcommand bodies. Each writes its artifacts under the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use massact::disrupt::{sweep_disruption, DisruptionReport, DisruptionRow, DisruptionSpec};
use massact::engine::{planted_sample, CaptureSpec, Engine, Stream, Trajectory};
use massact::io::{
    heatmap_graymap, mask_graymap, read_dump, read_graymap, to_json, trajectory_from_records, trajectory_records,
    write_csv, write_graymap, write_json, write_trajectory, DumpRecord, Graymap, RecordKind,
};
use massact::spatial::{extract_mask_detailed, seg_metrics, MaskSpec, SegMetrics};
use massact::transport::{run_transport, sweep_transport, TransportPlan, TransportRow};
use massact::Matrix;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, RunArgs};

/// A loaded config with command-line overrides applied.
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn load(args: RunArgs) -> Result<Self, CliError> {
        let mut cfg = RunConfig::load(&args.config, args.preset.as_deref())?;
        if let Some(seed) = args.seed {
            cfg.engine.seed = seed;
        }
        let out = args.out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&out).map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn engine(&self) -> Result<Engine, CliError> {
        Ok(Engine::new(self.cfg.engine.clone())?)
    }

    fn grid(&self) -> (usize, usize) {
        (self.cfg.engine.latent_h, self.cfg.engine.latent_w)
    }
}

#[derive(Serialize)]
struct RecordSummary {
    kind: &'static str,
    layer: Option<u16>,
    timestep: u16,
    rows: usize,
    cols: usize,
}

#[derive(Serialize)]
struct TrajectorySummary<'a> {
    config: &'a massact::engine::EngineConfig,
    prompt: &'a [u32],
    planted: bool,
    records: Vec<RecordSummary>,
    final_latent_rms: f64,
}

fn summarize<'a>(traj: &'a Trajectory, records: &[DumpRecord], planted: bool) -> TrajectorySummary<'a> {
    let n = traj.final_latent.as_slice().len().max(1) as f64;
    TrajectorySummary {
        config: &traj.config,
        prompt: &traj.prompt,
        planted,
        records: records
            .iter()
            .map(|r| RecordSummary {
                kind: match r.kind {
                    RecordKind::Latent => "latent",
                    RecordKind::Activation(Stream::Image) => "image",
                    RecordKind::Activation(Stream::Encoder) => "encoder",
                },
                layer: (r.kind != RecordKind::Latent).then_some(r.layer),
                timestep: r.timestep,
                rows: r.data.rows(),
                cols: r.data.cols(),
            })
            .collect(),
        final_latent_rms: (traj.final_latent.energy() / n).sqrt(),
    }
}

/// Per-token mean over latent channels.
fn token_means(m: &Matrix) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&v| f64::from(v)).sum::<f64>() / m.cols().max(1) as f64)
        .collect()
}

pub fn generate(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let (traj, planted) = if cfg.plant.is_some() {
        let spec = cfg.plant_spec()?;
        let traj = planted_sample(&spec)?;
        write_graymap(ctx.path("ground_truth.pgm"), &mask_graymap(&spec.foreground_mask(), ctx.grid()))?;
        (traj, true)
    } else {
        let engine = ctx.engine()?;
        let layers = cfg.generate.capture.resolve(cfg.engine.depth)?;
        let traj = engine.sample(&cfg.prompt(), &CaptureSpec::layers(&layers, cfg.engine.steps), &[])?;
        (traj, false)
    };
    let records = trajectory_records(&traj)?;
    write_trajectory(ctx.path("trajectory.madf"), &traj)?;
    write_json(ctx.path("trajectory.json"), &summarize(&traj, &records, planted))?;
    write_graymap(ctx.path("final_latent.pgm"), &heatmap_graymap(&token_means(&traj.final_latent), ctx.grid()))?;
    Ok(())
}

pub fn disrupt(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let d = cfg
        .disrupt
        .as_ref()
        .ok_or_else(|| CliError::config("disrupt: section missing".into()))?;
    let engine = ctx.engine()?;
    let spec = DisruptionSpec {
        stream: d.stream,
        criterion: d.criterion,
        k: d.k.first().copied().unwrap_or(0),
        layers: d.layers.clone(),
        timesteps: d.timesteps.clone(),
        seed: d.seed,
    };
    let reports: Vec<DisruptionReport> = sweep_disruption(&engine, &cfg.prompt(), &spec, &d.k)?;
    let rows: Vec<DisruptionRow> = reports.iter().map(DisruptionReport::row).collect();
    write_json(ctx.path("disruption.json"), &reports)?;
    write_csv(ctx.path("disruption.csv"), &rows)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SegmentRow {
    layer: usize,
    timestep: usize,
    k: usize,
    channel_criterion: String,
    mask_criterion: String,
    foreground_tokens: usize,
    #[serde(flatten)]
    metrics: Option<SegMetrics>,
}

fn to_mask(g: &Graymap, grid: (usize, usize), what: &Path) -> Result<Vec<bool>, CliError> {
    if (g.height, g.width) != grid {
        return Err(CliError::config(format!(
            "{}: graymap is {}x{} but the token grid is {}x{}",
            what.display(),
            g.height,
            g.width,
            grid.0,
            grid.1
        )));
    }
    Ok(g.to_mask())
}

pub fn segment(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let seg = cfg.segment.clone().unwrap_or_default();
    let e = &cfg.engine;
    if seg.k == 0 || seg.k > e.width {
        return Err(CliError::config(format!("segment.k: must be in 1..={}, got {}", e.width, seg.k)));
    }
    let grid = ctx.grid();
    let layers = seg.layers.resolve(e.depth)?;
    let timestep = seg.timestep.unwrap_or(e.steps - 1);

    let traj = if let Some(dump) = &seg.dump {
        trajectory_from_records(e.clone(), cfg.prompt(), read_dump(dump)?)?
    } else if cfg.plant.is_some() {
        planted_sample(&cfg.plant_spec()?)?
    } else {
        let capture = CaptureSpec::Points(
            layers
                .iter()
                .map(|&l| massact::engine::CapturePoint::new(l, timestep, Stream::Image))
                .collect(),
        );
        ctx.engine()?.sample(&cfg.prompt(), &capture, &[])?
    };

    let gt = match (&seg.ground_truth, &cfg.plant) {
        (Some(path), _) => Some(to_mask(&read_graymap(path)?, grid, path)?),
        (None, Some(_)) => Some(cfg.plant_spec()?.foreground_mask()),
        (None, None) => None,
    };

    let masks = ctx.path("masks");
    let heatmaps = ctx.path("heatmaps");
    for dir in [&masks, &heatmaps] {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    }

    let mut rows = Vec::new();
    for &layer in &layers {
        let act = traj.activation(layer, timestep, Stream::Image).ok_or_else(|| {
            CliError::config(format!("segment: no image activation at layer {layer}, timestep {timestep}"))
        })?;
        for &cc in &seg.channel_criteria {
            for &mc in &seg.mask_criteria {
                let spec = MaskSpec {
                    k: seg.k,
                    channel_criterion: cc,
                    mask_criterion: mc,
                    channel_seed: seg.seed,
                    mask_seed: seg.seed,
                    cluster_on_normalized: seg.cluster_on_normalized,
                    max_iters: seg.max_iters,
                };
                let ex = extract_mask_detailed(act, grid, &spec)?;
                let stem = format!("layer{layer:02}_t{timestep:02}_{cc}_{mc}");
                write_graymap(masks.join(format!("{stem}.pgm")), &mask_graymap(&ex.mask.p, grid))?;
                if mc == seg.mask_criteria[0] {
                    let name = format!("layer{layer:02}_t{timestep:02}_{cc}.pgm");
                    write_graymap(heatmaps.join(name), &heatmap_graymap(&ex.scores.s, grid))?;
                }
                let metrics = gt
                    .as_ref()
                    .map(|gt| seg_metrics(&ex.mask.p, gt, grid, seg.band))
                    .transpose()?;
                rows.push(SegmentRow {
                    layer,
                    timestep,
                    k: seg.k,
                    channel_criterion: cc.to_string(),
                    mask_criterion: mc.to_string(),
                    foreground_tokens: ex.mask.foreground_count(),
                    metrics,
                });
            }
        }
    }
    write_json(ctx.path("segment_metrics.json"), &rows)?;
    Ok(())
}

#[derive(Serialize)]
struct TransportSummary<'a> {
    plan: &'a TransportPlan,
    source_prompt: &'a [u32],
    target_prompt: &'a [u32],
    result: &'a TransportRow,
    sweep: &'a [TransportRow],
}

pub fn transport(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let t = cfg
        .transport
        .as_ref()
        .ok_or_else(|| CliError::config("transport: section missing".into()))?;
    let engine = ctx.engine()?;
    let result = run_transport(&engine, &t.source_prompt, &t.target_prompt, &t.plan)?;
    write_trajectory(ctx.path("merged.madf"), &result.merged)?;
    write_trajectory(ctx.path("source.madf"), &result.source)?;
    write_trajectory(ctx.path("target.madf"), &result.target)?;

    let resolved = t.plan.resolve(cfg.engine.depth, cfg.engine.width)?;
    let delta_s = result.merged.final_latent.rmse(&result.source.final_latent)?;
    let delta_t = result.merged.final_latent.rmse(&result.target.final_latent)?;
    let single = TransportRow {
        regime: t.plan.layers.to_string(),
        image_k: resolved.image_k,
        encoder_k: resolved.encoder_k,
        mask_criterion: t.plan.mask_criterion.to_string(),
        delta_s,
        delta_t,
        delta_diff: delta_t - delta_s,
    };
    let sweep = match &t.sweep {
        Some(grid) => {
            let pairs = [(t.source_prompt.clone(), t.target_prompt.clone())];
            sweep_transport(&engine, &pairs, grid, &t.plan)?
        }
        None => vec![single.clone()],
    };
    write_csv(ctx.path("transport_sweep.csv"), &sweep)?;
    write_json(
        ctx.path("transport.json"),
        &TransportSummary {
            plan: &t.plan,
            source_prompt: &t.source_prompt,
            target_prompt: &t.target_prompt,
            result: &single,
            sweep: &sweep,
        },
    )?;
    Ok(())
}

pub fn eval_mask(mask: &Path, gt: &Path, band: usize, out: Option<&Path>) -> Result<(), CliError> {
    let pred = read_graymap(mask)?;
    let truth = read_graymap(gt)?;
    let grid = (truth.height, truth.width);
    let pred = to_mask(&pred, grid, mask)?;
    let metrics = seg_metrics(&pred, &truth.to_mask(), grid, band)?;
    let text = to_json(&metrics)?;
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
        write_json(dir.join("eval_mask.json"), &metrics)?;
    }
    Ok(())
}
