use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use motron_core::evaluation::{
    ade_fde_best_of_n, apd, kde_nll, mae_l2, mm_group, mmade_mmfde, motion_track, mpjpe, svg_line_chart,
    zero_velocity_baseline, Bandwidth, MetricReport, Series, Track, KDE_CLIP,
};
use motron_core::kindata::{states_from_frames, MotionSequence, Skeleton};
use motron_core::model::{Motion, Motron};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{create_dir, load_dataset};
use crate::manifest::{self, sha256_file, RunManifest};

pub const METRICS: [&str; 8] = ["kde-nll", "ade", "fde", "apd", "mae", "mpjpe", "mmade", "mmfde"];

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated subset of kde-nll, ade, fde, apd, mae, mpjpe, mmade, mmfde.
    #[arg(long, value_delimiter = ',', default_value = "kde-nll,ade,fde,apd,mae,mpjpe")]
    pub metrics: Vec<String>,
    #[arg(long, default_value_t = 50)]
    pub num_samples: usize,
    /// Reported horizons in milliseconds; every step when omitted.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Vec<f64>,
    /// First-pose distance thresholds for the multimodal metrics.
    #[arg(long, value_delimiter = ',')]
    pub mm_thresholds: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also score the zero-velocity predictor.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Observed frames before the present that the encoder sees.
    #[arg(long, default_value_t = 9)]
    pub history: usize,
}

struct Query {
    states: motron_core::diffcore::Tensor,
    future: Motion,
    /// FK positions of the present frame.
    present: Vec<nalgebra::Vector3<f64>>,
}

#[derive(Default)]
struct QueryScores {
    /// Per metric name, one value per step.
    curves: Vec<(String, Vec<f64>)>,
    tracks: Vec<Track>,
}

fn wants(metrics: &[String], name: &str) -> bool {
    metrics.iter().any(|m| m == name)
}

pub fn run(args: &EvalArgs) -> Result<()> {
    for m in &args.metrics {
        ensure!(METRICS.contains(&m.as_str()), "unknown metric `{m}`; expected one of {}", METRICS.join(", "));
    }
    let sampled = ["kde-nll", "ade", "fde", "apd", "mmade", "mmfde"].iter().any(|m| wants(&args.metrics, m));
    let multimodal = wants(&args.metrics, "mmade") || wants(&args.metrics, "mmfde");
    ensure!(!sampled || args.num_samples > 0, "--num-samples must be at least 1");
    ensure!(
        !(wants(&args.metrics, "kde-nll") || wants(&args.metrics, "apd")) || args.num_samples >= 2,
        "kde-nll and apd need --num-samples of at least 2"
    );
    ensure!(!multimodal || !args.mm_thresholds.is_empty(), "mmade/mmfde need --mm-thresholds");
    ensure!(args.mm_thresholds.iter().all(|t| *t > 0.0), "mm thresholds must be positive");
    ensure!(args.workers > 0, "--workers must be at least 1");

    let (skeleton, seqs, _) = load_dataset(&args.data)?;
    let model = Motron::load(&args.model, Some(&skeleton.class_map()?))?;
    let fps = seqs[0].fps;
    let steps = report_steps(&args.horizons, fps, model.config().max_horizon)?;
    let horizon = *steps.last().expect("nonempty");
    let queries = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| make_query(s, &skeleton, args.history, horizon).with_context(|| format!("sequence {i}")))
        .collect::<Result<Vec<_>>>()?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.workers).build()?;
    let scores: Vec<QueryScores> = pool.install(|| {
        queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| score_query(&model, &skeleton, q, i, args, horizon, multimodal))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut reports = Vec::new();
    for name in METRICS.iter().filter(|m| wants(&args.metrics, m) && !m.starts_with("mm")) {
        let curve = mean_curve(&scores, name);
        let mut r = MetricReport::new(*name, horizons_ms(&steps, fps), pick(&curve, &steps), queries.len())?;
        if *name == "kde-nll" {
            r.clip = Some(KDE_CLIP);
        }
        reports.push(r);
    }
    if multimodal {
        let futures: Vec<Track> = queries.iter().map(|q| joint_track(&q.future, &skeleton)).collect::<Result<_>>()?;
        let present: Vec<_> = queries.iter().map(|q| q.present.clone()).collect();
        let samples: Vec<Vec<Track>> = scores.iter().map(|s| s.tracks.clone()).collect();
        for &thr in &args.mm_thresholds {
            let groups = (0..queries.len()).map(|i| mm_group(&present, i, thr)).collect::<Result<Vec<_>, _>>()?;
            let mut ade = Vec::new();
            let mut fde = Vec::new();
            for &t in &steps {
                let cut = |tr: &Track| tr[..t].to_vec();
                let s: Vec<Vec<Track>> = samples.iter().map(|v| v.iter().map(cut).collect()).collect();
                let f: Vec<Track> = futures.iter().map(cut).collect();
                let (a, b) = mmade_mmfde(&s, &f, &groups)?;
                ade.push(a);
                fde.push(b);
            }
            for (name, values) in [("mmade", ade), ("mmfde", fde)] {
                if wants(&args.metrics, name) {
                    let mut r = MetricReport::new(format!("{name}@{thr}"), horizons_ms(&steps, fps), values, queries.len())?;
                    r.threshold = Some(thr);
                    reports.push(r);
                }
            }
        }
    }
    if args.baseline {
        reports.extend(baseline_reports(&queries, &skeleton, &args.metrics, &steps, fps)?);
    }

    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("eval");
    manifest.seed = Some(args.seed);
    manifest.inputs = vec![args.model.clone(), args.data.clone()];
    manifest.checkpoint_sha256 = Some(sha256_file(&args.model)?);
    for r in &reports {
        let path = args.out.join(format!("{}.csv", r.name));
        std::fs::write(&path, r.to_csv())?;
        let back = MetricReport::from_csv(r.name.clone(), &std::fs::read_to_string(&path)?, r.sample_count)?;
        ensure!(back.values() == r.values() && back.horizons_ms() == r.horizons_ms(), "{} did not round-trip", path.display());
        manifest.outputs.push(path);
    }
    let json_path = args.out.join("metrics.json");
    std::fs::write(&json_path, MetricReport::summary_json(&reports))?;
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json_path)?)?;
    ensure!(parsed["metrics"].as_array().map(|a| a.len()) == Some(reports.len()), "metrics.json is incomplete");
    manifest.outputs.push(json_path);

    for name in METRICS.iter().filter(|m| wants(&args.metrics, m) && !m.starts_with("mm")) {
        let series: Vec<Series> = reports
            .iter()
            .filter(|r| r.name == *name || r.name == format!("zero-velocity-{name}"))
            .map(|r| r.series())
            .collect();
        manifest.outputs.push(write_svg(args, &format!("{name}.svg"), name, "horizon (ms)", &series)?);
    }
    if multimodal {
        let series: Vec<Series> = ["mmade", "mmfde"]
            .iter()
            .filter(|m| wants(&args.metrics, m))
            .map(|m| Series {
                label: m.to_string(),
                points: reports
                    .iter()
                    .filter(|r| r.name.starts_with(&format!("{m}@")))
                    .map(|r| (r.threshold.expect("set above"), *r.values().last().expect("nonempty")))
                    .collect(),
            })
            .collect();
        manifest.outputs.push(write_svg(args, "mm_sweep.svg", "multimodal error", "threshold", &series)?);
    }
    manifest.write(&args.out.join(manifest::FILE_NAME))?;
    log::info!("wrote {} reports to {}", reports.len(), args.out.display());
    Ok(())
}

fn write_svg(args: &EvalArgs, file: &str, title: &str, x_label: &str, series: &[Series]) -> Result<PathBuf> {
    let path = args.out.join(file);
    std::fs::write(&path, svg_line_chart(title, x_label, "value", series))?;
    let text = std::fs::read_to_string(&path)?;
    ensure!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"), "{} is not an SVG document", path.display());
    Ok(path)
}

/// Steps (1-based) at which reports are taken.
fn report_steps(horizons: &[f64], fps: f64, max_horizon: usize) -> Result<Vec<usize>> {
    if horizons.is_empty() {
        return Ok((1..=max_horizon).collect());
    }
    let mut steps = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let t = h * fps / 1000.0;
        if !(t >= 0.5) || (t - t.round()).abs() > 1e-6 {
            bail!("horizon {h} ms is not a whole number of frames at {fps} fps");
        }
        let t = t.round() as usize;
        if t > max_horizon {
            bail!("horizon {h} ms is {t} steps, beyond the checkpoint's {max_horizon}");
        }
        if steps.last().is_some_and(|&p| p >= t) {
            bail!("horizons must be strictly increasing");
        }
        steps.push(t);
    }
    Ok(steps)
}

fn horizons_ms(steps: &[usize], fps: f64) -> Vec<f64> {
    steps.iter().map(|&t| 1000.0 * t as f64 / fps).collect()
}

fn pick(curve: &[f64], steps: &[usize]) -> Vec<f64> {
    steps.iter().map(|&t| curve[t - 1]).collect()
}

fn make_query(seq: &MotionSequence, skeleton: &Skeleton, history: usize, horizon: usize) -> Result<Query> {
    ensure!(seq.num_frames() > horizon, "needs more than {horizon} frames, has {}", seq.num_frames());
    let end = seq.num_frames() - horizon - 1;
    let start = end.saturating_sub(history);
    let states = states_from_frames(&seq.frames[start..=end])?;
    let present = joint_track(&seq.frames[end..=end].to_vec(), skeleton)?.remove(0);
    Ok(Query { states, future: seq.frames[end + 1..].to_vec(), present })
}

/// FK positions without root joints, which sit at the origin.
fn joint_track(motion: &Motion, skeleton: &Skeleton) -> Result<Track> {
    let keep: Vec<usize> = (0..skeleton.num_joints()).filter(|&j| skeleton.joints()[j].parent.is_some()).collect();
    Ok(motion_track(motion, skeleton)?.into_iter().map(|f| keep.iter().map(|&j| f[j]).collect()).collect())
}

/// Value of a prefix metric at every step `1..=T`.
fn prefix_curve(horizon: usize, f: impl Fn(usize) -> Result<f64>) -> Result<Vec<f64>> {
    (1..=horizon).map(f).collect()
}

fn score_query(
    model: &Motron,
    skeleton: &Skeleton,
    q: &Query,
    index: usize,
    args: &EvalArgs,
    horizon: usize,
    keep_tracks: bool,
) -> Result<QueryScores> {
    let mut out = QueryScores::default();
    let forecast = model.predict_distribution(&q.states, horizon)?;
    let truth = joint_track(&q.future, skeleton)?;
    let m = &args.metrics;
    let needs_samples = ["kde-nll", "ade", "fde", "apd"].iter().any(|n| wants(m, n)) || keep_tracks;
    if needs_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        rng.set_stream(index as u64);
        let tracks = forecast
            .sample_motions(args.num_samples, &mut rng)?
            .iter()
            .map(|s| joint_track(s, skeleton))
            .collect::<Result<Vec<_>>>()?;
        let cut = |t: usize| -> Vec<Track> { tracks.iter().map(|s| s[..t].to_vec()).collect() };
        if wants(m, "kde-nll") {
            out.curves.push(("kde-nll".into(), kde_nll(&tracks, &truth, KDE_CLIP, Bandwidth::Scott)?.per_step));
        }
        if wants(m, "ade") || wants(m, "fde") {
            let both = prefix_curve(horizon, |t| Ok(ade_fde_best_of_n(&cut(t), &truth[..t].to_vec())?.0))?;
            out.curves.push(("ade".into(), both));
            let fde = prefix_curve(horizon, |t| Ok(ade_fde_best_of_n(&cut(t), &truth[..t].to_vec())?.1))?;
            out.curves.push(("fde".into(), fde));
        }
        if wants(m, "apd") {
            out.curves.push(("apd".into(), prefix_curve(horizon, |t| Ok(apd(&cut(t))?))?));
        }
        if keep_tracks {
            out.tracks = tracks;
        }
    }
    if wants(m, "mae") || wants(m, "mpjpe") {
        let pred = forecast.ml_mode_motion();
        out.curves.push(("mae".into(), mae_l2(&pred, &q.future)?));
        out.curves.push(("mpjpe".into(), mpjpe(&pred, &q.future, skeleton)?));
    }
    Ok(out)
}

fn mean_curve(scores: &[QueryScores], name: &str) -> Vec<f64> {
    let curves: Vec<&Vec<f64>> =
        scores.iter().filter_map(|s| s.curves.iter().find(|(n, _)| n == name).map(|(_, c)| c)).collect();
    let len = curves[0].len();
    (0..len).map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / curves.len() as f64).collect()
}

fn baseline_reports(
    queries: &[Query],
    skeleton: &Skeleton,
    metrics: &[String],
    steps: &[usize],
    fps: f64,
) -> Result<Vec<MetricReport>> {
    let horizon = *steps.last().expect("nonempty");
    let mut scores = Vec::with_capacity(queries.len());
    for q in queries {
        let pred = zero_velocity_baseline(&q.states, horizon)?;
        let (track, truth) = (joint_track(&pred, skeleton)?, joint_track(&q.future, skeleton)?);
        let single = |t: usize| ade_fde_best_of_n(&[track[..t].to_vec()], &truth[..t].to_vec());
        let mut s = QueryScores::default();
        s.curves.push(("mae".into(), mae_l2(&pred, &q.future)?));
        s.curves.push(("mpjpe".into(), mpjpe(&pred, &q.future, skeleton)?));
        s.curves.push(("ade".into(), prefix_curve(horizon, |t| Ok(single(t)?.0))?));
        s.curves.push(("fde".into(), prefix_curve(horizon, |t| Ok(single(t)?.1))?));
        scores.push(s);
    }
    let mut out = Vec::new();
    for name in ["ade", "fde", "mae", "mpjpe"] {
        if wants(metrics, name) {
            let curve = mean_curve(&scores, name);
            out.push(MetricReport::new(
                format!("zero-velocity-{name}"),
                horizons_ms(steps, fps),
                pick(&curve, steps),
                queries.len(),
            )?);
        }
    }
    Ok(out)
}
