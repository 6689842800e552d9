//! Acceptance run: the eight project criteria at their stated tolerances,
//! one PASS/FAIL line each. Runs the full default pipeline twice.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use morphlab::commands::{
    cmd_evaluate_detectability, cmd_evaluate_vulnerability, cmd_morph, cmd_synth_data, cmd_train, DetectionRow,
    Models, RunLayout, TrainTarget,
};
use morphlab::conditioning::{
    cross_attention_traced, interpolate_attention, Conditioning, CrossAttentionWeights,
    IdentityEmbedding, IdentityModel,
};
use morphlab::diffusion::{
    build_schedule, cfg_combine, ddim_invert_step, ddim_step, invert_batch, sample, timestep_grid, GuidanceConfig, LatentState,
    NoisePredictor, ScheduleKind, ZeroPredictor,
};
use morphlab::eval::{
    calibrate_threshold, compute_detection_metrics, compute_mmpmr, select_pairs, LabeledEmbedding,
    MorphComparisonRecord, VulnerabilityReport, DEFAULT_BPCER_POINTS,
};
use morphlab::experiment::{auto_pairs, plan_pairs, ExperimentConfig};
use morphlab::latent::slerp;
use morphlab::morph::{run_ablation, AblationPair, AblationResult, MorphConfig, MorphSource, MorphVariant};
use morphlab::tensor::{dot, gaussian, mse, norm, relative_error, Shape3};
use morphlab::toy::{DenoiserConfig, DenoiserModel, Split};

/// Twice the 95th percentile of per-image invert-then-sample MSE (default
/// morph settings, 32 eval images) measured on the default trained model.
const ROUND_TRIP_MSE_TOLERANCE: f64 = 0.032;

const INSTANCES: usize = 1000;
const SEEDS: u64 = 5;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn run(id: usize, name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> Check) -> Line {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let (mut passed, mut detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    if let Some(limit) = limit {
        if elapsed > limit {
            passed = false;
            detail = format!("{detail}; exceeded the {}s limit", limit.as_secs());
        }
    }
    let line = Line {
        id,
        name,
        passed,
        detail,
        elapsed,
    };
    print_line(&line);
    line
}

fn print_line(l: &Line) {
    println!(
        "criterion {} [{}] {}: {} ({:.1}s)",
        l.id,
        if l.passed { "PASS" } else { "FAIL" },
        l.name,
        l.detail,
        l.elapsed.as_secs_f64()
    );
}

// Equation suite.

fn rand_array(rng: &mut ChaCha8Rng, shape: Shape3) -> Array3<f32> {
    gaussian(shape, rng)
}

fn rand_shape(rng: &mut ChaCha8Rng) -> Shape3 {
    Shape3::new(rng.random_range(1..3), rng.random_range(1..6), rng.random_range(1..6))
}

/// Angle between two vectors as `2·atan2(|u−v|, |u+v|)` on the normalised
/// inputs, in f64. Unlike `acos` of the dot product it stays accurate near 0.
fn angle(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    let (mut diff, mut sum) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64 / na, y as f64 / nb);
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

fn equation_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let schedule = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).map_err(e2s)?;

    for _ in 0..INSTANCES {
        let shape = rand_shape(&mut rng);
        let (c, u) = (rand_array(&mut rng, shape), rand_array(&mut rng, shape));
        ensure(cfg_combine(&c, &u, GuidanceConfig::new(0.0).map_err(e2s)?).map_err(e2s)? == c, || {
            "CFG with ω=0 is not the conditional branch".into()
        })?;
        ensure(cfg_combine(&c, &u, GuidanceConfig::disabled()).map_err(e2s)? == c, || {
            "disabled CFG is not the conditional branch".into()
        })?;
    }

    let mut worst_pair = 0.0f64;
    for _ in 0..INSTANCES {
        let shape = rand_shape(&mut rng);
        // neighbours on a sampling grid of 20 or more steps
        let grid = timestep_grid(1000, rng.random_range(20..=1000)).map_err(e2s)?;
        let k = rng.random_range(1..grid.len());
        let (t, t_prev) = (grid[k], grid[k - 1]);
        let z = LatentState::new(t, rand_array(&mut rng, shape)).map_err(e2s)?;
        let eps = rand_array(&mut rng, shape);
        let down = ddim_step(&z, &eps, t, t_prev, &schedule).map_err(e2s)?;
        let back = ddim_invert_step(&down, &eps, t_prev, t, &schedule).map_err(e2s)?;
        worst_pair = worst_pair.max(relative_error(&back.values, &z.values));
    }
    ensure(worst_pair < 1e-6, || format!("DDIM inverse pair relative error {worst_pair:e}"))?;

    let mut worst_linear = 0.0f64;
    for _ in 0..INSTANCES {
        let shape = rand_shape(&mut rng);
        let steps_total = rng.random_range(10..=1000);
        let b0 = rng.random_range(1e-5..1e-3);
        let b1 = rng.random_range(5e-3..0.05);
        let kind = if rng.random_bool(0.5) { ScheduleKind::Linear } else { ScheduleKind::Cosine };
        let s = if kind == ScheduleKind::Cosine {
            build_schedule(steps_total, 1e-4, 0.999, kind)
        } else {
            build_schedule(steps_total, b0, b1, kind)
        }
        .map_err(e2s)?;
        let n = rng.random_range(1..=steps_total.min(60));
        let model = ZeroPredictor { shape };
        let z0 = LatentState::new(0, rand_array(&mut rng, shape)).map_err(e2s)?;
        let zt = invert_batch(std::slice::from_ref(&z0), &model, &[Conditioning::Null], &s, n).map_err(e2s)?;
        let back = sample(&zt[0], &model, &Conditioning::Null, GuidanceConfig::disabled(), &s, n).map_err(e2s)?;
        worst_linear = worst_linear.max(relative_error(&back.values, &z0.values));
    }
    ensure(worst_linear < 1e-6, || format!("zero-predictor round trip relative error {worst_linear:e}"))?;

    let (mut worst_end, mut worst_norm, mut worst_arc) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..INSTANCES {
        let shape = Shape3::new(1, rng.random_range(2..6), rng.random_range(2..6));
        let a = rand_array(&mut rng, shape) * rng.random_range(0.2f32..5.0);
        let mut b = rand_array(&mut rng, shape) * rng.random_range(0.2f32..5.0);
        let za = LatentState::clean(a.clone()).map_err(e2s)?;
        let lambda: f32 = rng.random_range(0.0..=1.0);

        let zb = LatentState::clean(b.clone()).map_err(e2s)?;
        let e1 = relative_error(&slerp(&za, &zb, 1.0).map_err(e2s)?.values, &a);
        let e0 = relative_error(&slerp(&za, &zb, 0.0).map_err(e2s)?.values, &b);
        worst_end = worst_end.max(e1).max(e0);

        // The norm bound holds when the inputs are at most orthogonal; reflect
        // b into a's half-space (norm unchanged).
        let d = dot(&a, &b);
        if d < 0.0 {
            let na2 = dot(&a, &a);
            b = &b - &(a.mapv(|v| (2.0 * d / na2) as f32 * v));
        }
        let zb = LatentState::clean(b.clone()).map_err(e2s)?;
        let out = slerp(&za, &zb, lambda).map_err(e2s)?;
        let (na, nb, no) = (norm(&a), norm(&b), norm(&out.values));
        let (lo, hi) = (na.min(nb), na.max(nb));
        let excess = ((lo - no).max(no - hi).max(0.0)) / lo;
        worst_norm = worst_norm.max(excess);

        let b_eq = b.mapv(|v| v * (na / nb) as f32);
        let out = slerp(&za, &LatentState::clean(b_eq).map_err(e2s)?, lambda).map_err(e2s)?;
        worst_norm = worst_norm.max((norm(&out.values) - na).abs() / na);

        let ua = a.mapv(|v| v / na as f32);
        let ub = b.mapv(|v| v / nb as f32);
        let theta = angle(&ua, &ub);
        let out = slerp(
            &LatentState::clean(ua.clone()).map_err(e2s)?,
            &LatentState::clean(ub.clone()).map_err(e2s)?,
            lambda,
        )
        .map_err(e2s)?;
        let arc = angle(&out.values, &ua) + angle(&out.values, &ub);
        worst_arc = worst_arc.max((arc - theta).abs());
    }
    ensure(worst_end < 1e-6, || format!("slerp endpoint error {worst_end:e}"))?;
    ensure(worst_norm < 1e-5, || format!("slerp norm excess {worst_norm:e}"))?;
    ensure(worst_arc < 1e-4, || format!("great-circle error {worst_arc:e}"))?;

    let mut worst_row = 0.0f64;
    for _ in 0..INSTANCES {
        let heads = rng.random_range(1..4);
        let key_dim = rng.random_range(1..5);
        let (c_feat, c_ctx, c_out) = (rng.random_range(1..6), rng.random_range(1..6), heads * rng.random_range(1..4));
        let w = CrossAttentionWeights {
            w_q: Array2::from_shape_fn((c_feat, heads * key_dim), |_| rng.random_range(-2.0..2.0)),
            w_k: Array2::from_shape_fn((c_ctx, heads * key_dim), |_| rng.random_range(-2.0..2.0)),
            w_v: Array2::from_shape_fn((c_ctx, c_out), |_| rng.random_range(-2.0..2.0)),
            heads,
            key_dim,
        };
        let feats = Array2::from_shape_fn((rng.random_range(1..8), c_feat), |_| rng.random_range(-3.0..3.0));
        let ctx = Array2::from_shape_fn((rng.random_range(1..6), c_ctx), |_| rng.random_range(-3.0..3.0));
        let trace = cross_attention_traced(feats.view(), ctx.view(), &w.params().map_err(e2s)?).map_err(e2s)?;
        for p in &trace.weights {
            for row in p.rows() {
                worst_row = worst_row.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            }
        }
        let other = cross_attention_traced(feats.view(), (&ctx * 0.5).view(), &w.params().map_err(e2s)?)
            .map_err(e2s)?
            .output;
        ensure(
            interpolate_attention(&trace.output, &other, 1.0).map_err(e2s)? == trace.output
                && interpolate_attention(&trace.output, &other, 0.0).map_err(e2s)? == other,
            || "attention interpolation endpoints".into(),
        )?;
    }
    ensure(worst_row < 1e-6, || format!("attention row sum error {worst_row:e}"))?;

    // Endpoint reductions of the dual-conditioned denoiser, layer mixing included.
    let mut model_checks = 0;
    for m in 0..10u64 {
        let cfg = DenoiserConfig {
            latent: Shape3::new(1, 8, 8),
            width: 16,
            depth: 2,
            heads: 2,
            key_dim: 4,
            id_dim: 8,
            seed: m,
            ..DenoiserConfig::default()
        };
        let model = DenoiserModel::new(cfg).map_err(e2s)?;
        for _ in 0..INSTANCES / 10 {
            let emb = |rng: &mut ChaCha8Rng| {
                IdentityEmbedding::new(Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0))).unwrap()
            };
            let (a, b) = (emb(&mut rng), emb(&mut rng));
            let z = rand_array(&mut rng, cfg.latent);
            let t = rng.random_range(1..=1000);
            let out = model
                .predict(
                    &[&z, &z, &z, &z],
                    t,
                    &[
                        Conditioning::Dual { a: a.clone(), b: b.clone(), lambda: 1.0 },
                        Conditioning::Identity(a.clone()),
                        Conditioning::Dual { a: a.clone(), b: b.clone(), lambda: 0.0 },
                        Conditioning::Identity(b.clone()),
                    ],
                )
                .map_err(e2s)?;
            ensure(out[0] == out[1] && out[2] == out[3], || "dual conditioning endpoint reduction".into())?;
            model_checks += 1;
        }
    }

    Ok(format!(
        "{INSTANCES} instances per invariant; inverse pair {worst_pair:.1e}, zero-model round trip {worst_linear:.1e}, \
         slerp endpoints {worst_end:.1e} / norm {worst_norm:.1e} (angles up to 90°, any angle at equal norms) / arc \
         {worst_arc:.1e}, attention rows {worst_row:.1e}, {model_checks} denoiser endpoint reductions exact"
    ))
}

// Metric oracles.

fn oracle_threshold(imp: &[f64], fmr: f64) -> f64 {
    let n = imp.len() as f64;
    imp.iter()
        .copied()
        .chain([f64::INFINITY])
        .filter(|&t| imp.iter().filter(|&&s| s >= t).count() as f64 <= fmr * n + 1e-9)
        .fold(f64::INFINITY, f64::min)
}

fn oracle_rates(bona: &[f64], attack: &[f64], t: f64) -> (f64, f64) {
    let apcer = 100.0 * attack.iter().filter(|&&s| s < t).count() as f64 / attack.len() as f64;
    let bpcer = 100.0 * bona.iter().filter(|&&s| s >= t).count() as f64 / bona.len() as f64;
    (apcer, bpcer)
}

fn oracle_detection(bona: &[f64], attack: &[f64]) -> (f64, Vec<f64>) {
    let mut cands: Vec<f64> = bona.iter().chain(attack).copied().chain([f64::INFINITY]).collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best = (f64::INFINITY, 0.0);
    for &t in &cands {
        let (a, b) = oracle_rates(bona, attack, t);
        if (a - b).abs() < best.0 {
            best = ((a - b).abs(), (a + b) / 2.0);
        }
    }
    let apcers = DEFAULT_BPCER_POINTS
        .iter()
        .map(|&x| {
            let t = cands
                .iter()
                .copied()
                .find(|&t| oracle_rates(bona, attack, t).1 <= x + 1e-9)
                .unwrap();
            oracle_rates(bona, attack, t).0
        })
        .collect();
    (best.1, apcers)
}

fn grid_scores(rng: &mut ChaCha8Rng, max: usize) -> Vec<f64> {
    (0..rng.random_range(1..max)).map(|_| rng.random_range(-20..=20) as f64 / 20.0).collect()
}

fn metric_oracles() -> Check {
    let imp: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    ensure(calibrate_threshold(&imp, 0.10).map_err(e2s)? == 1.0, || "τ calibration example".into())?;
    let rec = |a, b| MorphComparisonRecord::new("m", "e", a, b).unwrap();
    let recs = [rec(0.7, 0.6), rec(0.8, 0.4), rec(0.3, 0.9)];
    ensure(compute_mmpmr(&recs, 0.5).map_err(e2s)? == 1.0 / 3.0, || "MMPMR hand case".into())?;
    let eer = compute_detection_metrics(&[0.1, 0.2, 0.8], &[0.3, 0.7, 0.9]).map_err(e2s)?.eer;
    ensure((eer - 100.0 / 3.0).abs() < 1e-9, || format!("EER hand case gave {eer}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..INSTANCES {
        let imp = grid_scores(&mut rng, 30);
        let fmr = rng.random_range(0.001..0.999);
        let got = calibrate_threshold(&imp, fmr).map_err(e2s)?;
        ensure(got == oracle_threshold(&imp, fmr), || format!("threshold instance {i}: {imp:?} @ {fmr}"))?;

        let pairs: Vec<MorphComparisonRecord> = (0..rng.random_range(1..30))
            .map(|_| rec(rng.random_range(-20..=20) as f64 / 20.0, rng.random_range(-20..=20) as f64 / 20.0))
            .collect();
        let tau = rng.random_range(-1.0..1.0);
        let oracle = pairs.iter().filter(|r| r.score_vs_a >= tau && r.score_vs_b >= tau).count() as f64
            / pairs.len() as f64;
        ensure(compute_mmpmr(&pairs, tau).map_err(e2s)? == oracle, || format!("MMPMR instance {i}"))?;

        let (bona, attack) = (grid_scores(&mut rng, 30), grid_scores(&mut rng, 30));
        let r = compute_detection_metrics(&bona, &attack).map_err(e2s)?;
        let (eer, apcers) = oracle_detection(&bona, &attack);
        let got: Vec<f64> = r.apcer_at_bpcer.iter().map(|p| p.point.apcer).collect();
        ensure(r.eer == eer && got == apcers, || format!("detection instance {i}"))?;

        let n = rng.random_range(4..=20);
        let items: Vec<LabeledEmbedding> = (0..n)
            .map(|j| LabeledEmbedding {
                id: format!("id{j:02}"),
                group: if j % 2 == 0 { "0".into() } else { "1".into() },
                embedding: IdentityEmbedding::new(Array1::from_shape_fn(3, |d| {
                    rng.random_range(-4..=4) as f32 + if d == 0 { 0.5 } else { 0.0 }
                }))
                .unwrap()
                .normalized(),
            })
            .collect();
        let k = rng.random_range(1..8);
        let sel = select_pairs(&items, k).map_err(e2s)?;
        let mut expect = Vec::new();
        for g in ["0", "1"] {
            let mut c: Vec<(f64, String, String)> = Vec::new();
            for x in items.iter().filter(|x| x.group == g) {
                for y in items.iter().filter(|y| y.group == g && x.id < y.id) {
                    c.push((x.embedding.cosine(&y.embedding), x.id.clone(), y.id.clone()));
                }
            }
            c.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
            expect.extend(c.into_iter().take(k));
        }
        expect.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
        let got: Vec<(&str, &str)> = sel.pairs.iter().map(|p| (p.id_a.as_str(), p.id_b.as_str())).collect();
        let want: Vec<(&str, &str)> = expect.iter().map(|(_, a, b)| (a.as_str(), b.as_str())).collect();
        ensure(got == want, || format!("pair selection instance {i}"))?;
    }
    Ok(format!(
        "hand cases (MMPMR 1/3, EER 33.3%, τ=1.0) and {INSTANCES} random instances each for threshold, MMPMR, \
         detection and pair selection match brute force exactly"
    ))
}

// Pipeline runs.

struct PipelineRun {
    config: ExperimentConfig,
    train_seconds: f64,
    total_seconds: f64,
}

fn run_pipeline(dir: PathBuf) -> Result<PipelineRun, String> {
    let _ = std::fs::remove_dir_all(&dir);
    let config = ExperimentConfig {
        out_dir: dir,
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    cmd_synth_data(&config).map_err(e2s)?;
    let t = Instant::now();
    cmd_train(&config, TrainTarget::Embedder).map_err(e2s)?;
    cmd_train(&config, TrainTarget::Denoiser).map_err(e2s)?;
    let train_seconds = t.elapsed().as_secs_f64();
    cmd_train(&config, TrainTarget::Mad).map_err(e2s)?;
    cmd_morph(&config, None).map_err(e2s)?;
    cmd_evaluate_vulnerability(&config).map_err(e2s)?;
    cmd_evaluate_detectability(&config).map_err(e2s)?;
    Ok(PipelineRun {
        config,
        train_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
    })
}

fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = (p * (s.len() - 1) as f64).round() as usize;
    s[rank]
}

fn eval_sources(models: &Models, n: usize) -> Vec<(String, &Array3<f32>)> {
    models
        .dataset
        .labels(Split::Eval)
        .into_iter()
        .take(n)
        .map(|l| {
            let s = models.dataset.image(l, 0).unwrap();
            (s.id(), &s.image)
        })
        .collect()
}

fn round_trip(models: &Models, run: &PipelineRun) -> Check {
    let engine = models.engine();
    let cfg = run.config.morph.defaults;
    let sources = eval_sources(models, 32);
    ensure(sources.len() == 32, || "fewer than 32 eval identities".into())?;
    let images: Vec<&Array3<f32>> = sources.iter().map(|(_, x)| *x).collect();
    let embs = models.conditioning.embed_batch(&images).map_err(e2s)?;
    let mut errs = Vec::new();
    for ((id, x), e) in sources.iter().zip(&embs) {
        let rec = engine.reconstruct(&MorphSource::new(id, x, e), &cfg).map_err(e2s)?;
        errs.push(mse(&rec, *x));
    }
    let p95 = percentile(&errs, 0.95);
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let max = errs.iter().copied().fold(0.0, f64::max);
    ensure(run.train_seconds <= 15.0 * 60.0, || format!("training took {:.0}s", run.train_seconds))?;
    ensure(p95 < ROUND_TRIP_MSE_TOLERANCE, || format!("p95 MSE {p95:.5} >= {ROUND_TRIP_MSE_TOLERANCE}"))?;
    Ok(format!(
        "32 eval images, ω={} {} steps: MSE p95 {p95:.5} (mean {mean:.5}, max {max:.5}) < {ROUND_TRIP_MSE_TOLERANCE}; \
         embedder+denoiser training {:.0}s",
        cfg.omega, cfg.num_inference_steps, run.train_seconds
    ))
}

fn degenerate_pairs(models: &Models, run: &PipelineRun) -> Check {
    let engine = models.engine();
    let cfg = run.config.morph.defaults.with_variant(MorphVariant::Dcmorph);
    let sources = eval_sources(models, 16);
    let images: Vec<&Array3<f32>> = sources.iter().map(|(_, x)| *x).collect();
    let embs = models.conditioning.embed_batch(&images).map_err(e2s)?;
    let mut errs = Vec::new();
    let mut identical = 0;
    for ((id, x), e) in sources.iter().zip(&embs) {
        let src = MorphSource::new(id, x, e);
        let m = engine.morph(&src, &src, &cfg).map_err(e2s)?;
        let rec = engine.reconstruct(&src, &cfg).map_err(e2s)?;
        identical += usize::from(m.image == rec);
        errs.push(mse(&m.image, *x));
    }
    let p95 = percentile(&errs, 0.95);
    ensure(p95 < ROUND_TRIP_MSE_TOLERANCE, || format!("p95 MSE {p95:.5} >= {ROUND_TRIP_MSE_TOLERANCE}"))?;
    Ok(format!(
        "16 eval images: dcmorph(x, x) MSE p95 {p95:.5} < {ROUND_TRIP_MSE_TOLERANCE}; {identical}/16 bit-identical to \
         the plain reconstruction"
    ))
}

fn ablations(models: &Models, run: &PipelineRun) -> Result<Vec<AblationResult>, String> {
    let c = &run.config;
    let (pairs, _) = auto_pairs(&models.dataset, &models.conditioning, Split::Eval, c.morph.pairs_per_group)
        .map_err(e2s)?;
    let eval: Vec<(u32, &Array3<f32>)> =
        models.dataset.images_in(Split::Eval).map(|s| (s.label, &s.image)).collect();
    let embedders: Vec<&dyn IdentityModel> = models.evaluators.iter().map(|e| e as &dyn IdentityModel).collect();
    (0..SEEDS)
        .map(|seed| {
            let planned = plan_pairs(&models.dataset, &models.conditioning, &pairs, seed, c.morph.probes_per_subject)
                .map_err(e2s)?;
            let ab: Vec<AblationPair<'_>> = planned
                .iter()
                .map(|p| {
                    let (a, b) = p.sources();
                    AblationPair {
                        a,
                        b,
                        refs_a: p.a.probe_images(),
                        refs_b: p.b.probe_images(),
                    }
                })
                .collect();
            let base = MorphConfig { seed, ..c.morph.defaults };
            run_ablation(
                &ab,
                &models.engine(),
                &base,
                &embedders,
                &c.embedders.conditioning.id,
                &eval,
                c.evaluation.fmr,
            )
            .map_err(e2s)
        })
        .collect()
}

fn mean_mmpmr(report: &VulnerabilityReport, variant: MorphVariant) -> f64 {
    let rows: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.variant == variant.as_str())
        .map(|r| r.mmpmr_at_fmr100)
        .collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

fn directional(results: &[AblationResult], seconds: f64) -> Check {
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for r in results {
        let n_pairs = r.morphs.len() / 4;
        ensure(n_pairs == 50, || format!("{n_pairs} pairs instead of 50"))?;
        let dc = mean_mmpmr(&r.report, MorphVariant::Dcmorph);
        let xa = mean_mmpmr(&r.report, MorphVariant::CrossAttentionInterp);
        let ei = mean_mmpmr(&r.report, MorphVariant::EmbeddingInterp);
        let ed = mean_mmpmr(&r.report, MorphVariant::EmbeddingPlusDdim);
        if dc >= xa && dc >= ei {
            wins += 1;
        }
        per_seed.push(format!("{dc:.2}/{xa:.2}/{ei:.2}/{ed:.2}"));
    }
    ensure(wins >= 4, || format!("DCMorph ahead in only {wins}/{SEEDS} seeds: {}", per_seed.join(" ")))?;
    ensure(seconds < 3600.0, || format!("{seconds:.0}s end to end"))?;
    Ok(format!(
        "DCMorph ≥ both single-stream variants in {wins}/{SEEDS} seeds; mean MMPMR100 over fr-b/fr-c \
         (dcmorph/xattn/emb/emb+ddim) per seed: {}; {seconds:.0}s end to end",
        per_seed.join(" ")
    ))
}

fn liveness(models: &Models, results: &[AblationResult]) -> Check {
    let samples: Vec<_> = models.dataset.images_in(Split::Eval).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let trials = 200;
    let mut changed = 0;
    for _ in 0..trials {
        let a = samples.choose(&mut rng).unwrap();
        let b = loop {
            let b = samples.choose(&mut rng).unwrap();
            if b.label != a.label {
                break b;
            }
        };
        let e = models.conditioning.embed_batch(&[&a.image, &b.image]).map_err(e2s)?;
        let z = gaussian(models.denoiser.latent_shape(), &mut rng);
        let t = rng.random_range(1..=models.schedule.num_steps());
        let out = models
            .denoiser
            .predict(
                &[&z, &z],
                t,
                &[Conditioning::Identity(e[0].clone()), Conditioning::Identity(e[1].clone())],
            )
            .map_err(e2s)?;
        changed += usize::from(out[0] != out[1]);
    }
    ensure(changed * 100 >= 95 * trials, || format!("condition swap changed {changed}/{trials}"))?;

    let r = &results[0];
    let mut parts = Vec::new();
    for es in &r.scores {
        let impostor = es.scores.impostor.iter().sum::<f64>() / es.scores.impostor.len() as f64;
        let mins: Vec<f64> = es
            .records
            .iter()
            .filter(|(v, _)| v == MorphVariant::Dcmorph.as_str())
            .map(|(_, rec)| rec.score_vs_a.min(rec.score_vs_b))
            .collect();
        let mean_min = mins.iter().sum::<f64>() / mins.len() as f64;
        let above = mins.iter().filter(|&&m| m > impostor).count();
        ensure(mean_min > impostor, || {
            format!("{}: mean min similarity {mean_min:.3} <= impostor mean {impostor:.3}", es.embedder_id)
        })?;
        parts.push(format!(
            "{} morph min-similarity mean {mean_min:.3} vs impostor mean {impostor:.4} ({above}/{} morphs above)",
            es.embedder_id,
            mins.len()
        ));
    }
    Ok(format!("condition swap changed {changed}/{trials} predictions; {}", parts.join("; ")))
}

fn monotone_reports(reports: &[VulnerabilityReport], detections: &[Vec<DetectionRow>]) -> Check {
    let mut rows = 0;
    for r in reports {
        for row in &r.rows {
            ensure(row.mmpmr_at_fmr100 >= row.mmpmr_at_fmr1000, || {
                format!("{} {}: MMPMR100 < MMPMR1000", row.embedder_id, row.variant)
            })?;
            rows += 1;
        }
    }
    let mut det_rows = 0;
    for d in detections {
        for row in d {
            let apcer: Vec<f64> = row.report.apcer_at_bpcer.iter().map(|p| p.point.apcer).collect();
            let targets: Vec<f64> = row.report.apcer_at_bpcer.iter().map(|p| p.bpcer_target).collect();
            ensure(targets == [1.0, 10.0, 20.0], || format!("BPCER points {targets:?}"))?;
            ensure(apcer.windows(2).all(|w| w[1] <= w[0]), || format!("{}: APCER {apcer:?}", row.attack))?;
            det_rows += 1;
        }
    }
    ensure(rows > 0 && det_rows > 0, || "no reports".into())?;
    Ok(format!(
        "{} vulnerability reports ({rows} rows) with MMPMR100 ≥ MMPMR1000; {} detection reports ({det_rows} rows) \
         with APCER non-increasing over BPCER 1/10/20%",
        reports.len(),
        detections.len()
    ))
}

fn tree_digest(root: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, morphlab::io::file_sha256(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn reproducible(a: &PipelineRun, b: &PipelineRun) -> Check {
    ensure(a.config.hash() == b.config.hash(), || "config hashes differ".into())?;
    let mut files = 0;
    for sub in ["dataset", "checkpoints", "morphs", "reports"] {
        let (da, db) = (tree_digest(&a.config.out_dir.join(sub)), tree_digest(&b.config.out_dir.join(sub)));
        ensure(!da.is_empty(), || format!("{sub}/ is empty"))?;
        if da != db {
            let diff: Vec<_> = da.iter().filter(|x| !db.contains(x)).map(|(p, _)| p.clone()).take(5).collect();
            return Err(format!("{sub}/ differs: {diff:?}"));
        }
        files += da.len();
    }
    Ok(format!(
        "two runs of config {} ({:.0}s and {:.0}s): {files} files under dataset/, checkpoints/, morphs/ and reports/ \
         byte-identical",
        &a.config.hash()[..12],
        a.total_seconds,
        b.total_seconds
    ))
}

fn main() {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut lines = vec![
        run(1, "equation suite", Some(Duration::from_secs(120)), equation_suite),
        run(2, "metric oracle equivalence", Some(Duration::from_secs(60)), metric_oracles),
    ];

    let start = Instant::now();
    let first = run_pipeline(root.join("run-a"));
    let models = first.as_ref().map_err(Clone::clone).and_then(|r| Models::load(&r.config).map_err(e2s));
    let pipeline_err = |e: &String| -> Check { Err(format!("pipeline failed: {e}")) };

    let mut ablation: Result<Vec<AblationResult>, String> = Err("not run".into());
    match (&first, &models) {
        (Ok(run_a), Ok(m)) => {
            lines.push(run(4, "round-trip inversion", None, || round_trip(m, run_a)));
            lines.push(run(5, "degenerate-pair reconstruction", None, || degenerate_pairs(m, run_a)));
            let t = Instant::now();
            ablation = catch_unwind(AssertUnwindSafe(|| ablations(m, run_a)))
                .unwrap_or_else(|_| Err("ablation panicked".into()));
            let ablation_seconds = t.elapsed().as_secs_f64();
            let end_to_end = run_a.total_seconds + ablation_seconds;
            lines.push(run(6, "directional ablation", None, || match &ablation {
                Ok(r) => directional(r, end_to_end),
                Err(e) => Err(e.clone()),
            }));
            lines.push(run(7, "conditioning liveness", None, || match &ablation {
                Ok(r) => liveness(m, r),
                Err(e) => Err(e.clone()),
            }));
        }
        (Err(e), _) | (_, Err(e)) => {
            for (id, name) in [
                (4, "round-trip inversion"),
                (5, "degenerate-pair reconstruction"),
                (6, "directional ablation"),
                (7, "conditioning liveness"),
            ] {
                lines.push(run(id, name, None, || pipeline_err(e)));
            }
        }
    }
    drop(models);

    let second = run_pipeline(root.join("run-b"));
    lines.push(run(8, "reproducibility", None, || match (&first, &second) {
        (Ok(a), Ok(b)) => reproducible(a, b),
        (Err(e), _) | (_, Err(e)) => pipeline_err(e),
    }));

    lines.push(run(3, "report monotonicity", None, || {
        let mut vuln = Vec::new();
        let mut det = Vec::new();
        for r in [&first, &second].into_iter().flatten() {
            let layout = RunLayout::new(&r.config.out_dir);
            vuln.push(morphlab::io::read_json(&layout.reports().join("vulnerability.json")).map_err(e2s)?);
            det.push(morphlab::io::read_json(&layout.reports().join("detection.json")).map_err(e2s)?);
        }
        if let Ok(a) = &ablation {
            vuln.extend(a.iter().map(|r| r.report.clone()));
        }
        monotone_reports(&vuln, &det)
    }));

    lines.sort_by_key(|l| l.id);
    println!("\nacceptance summary ({:.0}s for the pipeline criteria)", start.elapsed().as_secs_f64());
    for l in &lines {
        print_line(l);
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all {} criteria passed", lines.len());
}
