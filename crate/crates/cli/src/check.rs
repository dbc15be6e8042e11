//! Self-check suites. Each check yields one named pass/fail line.

use std::fmt;

use gentron::guidance::{cfg_epsilon, mfg_epsilon, sample_batch, GuidanceConfig};
use gentron::model::{Frames, GenTron, GenTronConfig, Variant};
use gentron::numerics::gradcheck::{check_inputs, check_params, GradCheckReport, DEFAULT_STEP};
use gentron::numerics::{AttnDims, AttnMask, Graph, Rng, Scalar, Tensor, Var};
use gentron::schedule::{q_sample_batch, ScheduleState, DESK_STEPS};
use gentron::video::pseudo_video;

use crate::data::{nearest_centroid, Dataset};
use crate::oracle::{optimal_epsilon, quadrature_epsilon, sample_gaussian};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Schedule,
    Guidance,
    GaussianOracle,
    VideoIdentity,
    All,
}

#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

fn line(name: &str, passed: bool, detail: String) -> CheckLine {
    CheckLine { name: name.into(), passed, detail }
}

fn failed(name: &str, e: impl fmt::Display) -> CheckLine {
    line(name, false, format!("error: {e}"))
}

pub fn run(suite: Suite) -> Vec<CheckLine> {
    match suite {
        Suite::Gradients => gradients(),
        Suite::Schedule => schedule(),
        Suite::Guidance => guidance(),
        Suite::GaussianOracle => gaussian_oracle(2000, 0),
        Suite::VideoIdentity => video_identity(),
        Suite::All => [gradients(), schedule(), guidance(), gaussian_oracle(2000, 0), video_identity()].concat(),
    }
}

const OP_TOL: f64 = 1e-4;

fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> gentron::Result<Var> {
    let w = g.constant(Rng::new(seed).randn(g.shape(y)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn report_line(name: &str, r: gentron::Result<GradCheckReport>, tol: f64) -> CheckLine {
    match r {
        Ok(r) => line(
            name,
            r.passes(tol),
            format!("max rel error {:.2e} over {} entries (tol {tol:.0e})", r.max_rel_error(), r.entries.len()),
        ),
        Err(e) => failed(name, e),
    }
}

/// Adds `N(0, std²)` to every parameter.
pub fn perturb<F: Scalar>(model: &mut GenTron<F>, seed: u64, std: f64) {
    let mut rng = Rng::new(seed);
    for p in model.store_mut().iter_mut() {
        for x in p.tensor.data_mut() {
            *x += F::of(std * rng.normal());
        }
    }
}

/// Finite-difference check of the diffusion loss against `picks` random
/// parameters of `model`, in `f64`.
pub fn model_gradcheck(model: &GenTron, frames: &Frames, clips: usize, picks: usize, seed: u64) -> gentron::Result<GradCheckReport> {
    let mut m64 = model.cast::<f64>();
    let sched = ScheduleState::scaled_linear(DESK_STEPS)?;
    let mut rng = Rng::new(seed);
    let per = match frames {
        Frames::Image => 1,
        Frames::Video { frames, .. } => *frames,
    };
    let mut shape = vec![clips * per];
    shape.extend_from_slice(&m64.config().latent_shape);
    let x0: Tensor<f64> = rng.randn(&shape);
    let eps: Tensor<f64> = rng.randn(&shape);
    let ts: Vec<usize> = (0..clips).map(|_| rng.below(sched.len())).collect();
    let x_t = q_sample_batch(&x0, &ts, &eps, &sched)?;
    let conds: Vec<_> = (0..clips).map(|i| m64.encode(["square top left", "cross moving up"][i % 2])).collect();
    let n = m64.store().len();
    let chosen: Vec<_> = (0..picks)
        .map(|_| {
            let id = m64.store().ids().nth(rng.below(n)).unwrap();
            (id, rng.below(m64.store().get(id).numel()))
        })
        .collect();
    let frozen = m64.clone();
    check_params(m64.store_mut(), &chosen, DEFAULT_STEP, |g, store| {
        let mut probe_model = frozen.clone();
        *probe_model.store_mut() = store.clone();
        let x = g.constant(x_t.clone());
        let target = g.constant(eps.clone());
        let out = probe_model.forward_on(g, x, &ts, &conds, frames)?;
        g.mse(out, target)
    })
}

/// Desk model with every parameter perturbed off its initialization.
pub fn desk_model(variant: Variant, inflated: bool, seed: u64) -> gentron::Result<GenTron> {
    let mut m = GenTron::new(GenTronConfig::desk(2, 32, variant), &mut Rng::new(seed))?;
    if inflated {
        m = m.inflate(&mut Rng::new(seed + 1))?;
    }
    perturb(&mut m, seed + 2, 0.05);
    Ok(m)
}

fn gradients() -> Vec<CheckLine> {
    let mut rng = Rng::new(1);
    let mut r = |s: &[usize]| -> Tensor<f64> { rng.randn(s) };
    let mut out = Vec::new();
    let ins = [r(&[2, 3, 4]), r(&[4, 5])];
    out.push(report_line("grad matmul", check_inputs(&ins, DEFAULT_STEP, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, 2)
    }), OP_TOL));
    let ins = [r(&[4, 6]), r(&[6]), r(&[6])];
    out.push(report_line("grad layer_norm", check_inputs(&ins, DEFAULT_STEP, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
        probe(g, y, 3)
    }), OP_TOL));
    let ins = [r(&[3, 5])];
    out.push(report_line("grad softmax", check_inputs(&ins, DEFAULT_STEP, |g, v| {
        let y = g.softmax(v[0], 1)?;
        probe(g, y, 4)
    }), OP_TOL));
    let ins = [r(&[5, 3])];
    out.push(report_line("grad gelu/silu", check_inputs(&ins, DEFAULT_STEP, |g, v| {
        let a = g.gelu(v[0]);
        let b = g.silu(v[0]);
        let y = g.mul(a, b)?;
        probe(g, y, 5)
    }), OP_TOL));
    let ins = [r(&[6, 4]), r(&[2, 4]), r(&[1, 4])];
    out.push(report_line("grad broadcast", check_inputs(&ins, DEFAULT_STEP, |g, v| {
        let y = g.mul_bcast(v[0], v[1])?;
        let y = g.add_bcast(y, v[2])?;
        probe(g, y, 6)
    }), OP_TOL));
    let dims = AttnDims { batch: 2, lq: 3, lk: 4, heads: 2, head_dim: 2 };
    let ins = [r(&[6, 4]), r(&[8, 4]), r(&[8, 4])];
    let mask = AttnMask::KeyLengths(vec![2, 4]);
    out.push(report_line("grad attention", check_inputs(&ins, DEFAULT_STEP, |g, v| {
        let y = g.attention(v[0], v[1], v[2], dims, &mask)?;
        probe(g, y, 7)
    }), OP_TOL));
    for (name, variant, inflated) in [
        ("grad model adaLN-Zero", Variant::AdalnZero, false),
        ("grad model cross-attention", Variant::CrossAttention, false),
        ("grad model inflated", Variant::CrossAttention, true),
    ] {
        let frames = if inflated { Frames::full_motion(4) } else { Frames::Image };
        let clips = if inflated { 1 } else { 2 };
        let r = desk_model(variant, inflated, 10).and_then(|m| model_gradcheck(&m, &frames, clips, 64, 11));
        out.push(report_line(name, r, OP_TOL));
    }
    out
}

fn schedule() -> Vec<CheckLine> {
    let mut out = Vec::new();
    for steps in [DESK_STEPS, 1000] {
        let s = match ScheduleState::scaled_linear(steps) {
            Ok(s) => s,
            Err(e) => return vec![failed("schedule", e)],
        };
        let monotone = s.alpha_bar.windows(2).all(|w| w[1] < w[0]);
        let bounded = s.alpha_bar.iter().all(|&a| a > 0.0 && a < 1.0);
        out.push(line(
            &format!("alpha_bar monotone, T={steps}"),
            monotone && bounded,
            format!("alpha_bar[0]={:.5}, alpha_bar[T-1]={:.3e}", s.alpha_bar[0], s.alpha_bar[steps - 1]),
        ));
        // Unit-variance data keeps unit variance under q_sample.
        let n = 20_000;
        let mut rng = Rng::new(steps as u64);
        let x0: Tensor<f64> = rng.randn(&[n]);
        let eps: Tensor<f64> = rng.randn(&[n]);
        let mut worst: f64 = 0.0;
        for t in [0, steps / 2, steps - 1] {
            let xt = q_sample_batch(&x0, &[t], &eps, &s).unwrap();
            let var = xt.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
            worst = worst.max((var - 1.0).abs());
        }
        let bound = 5.0 * (2.0 / n as f64).sqrt();
        out.push(line(
            &format!("variance preservation, T={steps}"),
            worst < bound,
            format!("max |Var[x_t] − 1| = {worst:.4} (bound {bound:.4})"),
        ));
    }
    out
}

fn guidance() -> Vec<CheckLine> {
    let mut rng = Rng::new(3);
    let a: Tensor<f64> = rng.randn(&[64]);
    let b: Tensor<f64> = rng.randn(&[64]);
    let c: Tensor<f64> = rng.randn(&[64]);
    let eq = |x: gentron::Result<Tensor<f64>>, y: &Tensor<f64>| x.map(|x| x == *y).unwrap_or(false);
    let scalar = mfg_epsilon(&Tensor::scalar(1.0), &Tensor::scalar(5.0), &Tensor::scalar(3.0), 7.5, 1.2)
        .map(|t| t.item())
        .unwrap_or(f64::NAN);
    let cfg85 = cfg_epsilon(&Tensor::scalar(2.0), &Tensor::scalar(1.0), 7.5).map(|t| t.item()).unwrap_or(f64::NAN);
    let h = 1e-3;
    let slope = mfg_epsilon(&a, &b, &c, 3.0 + h, 1.2)
        .and_then(|p| p.zip_with(&mfg_epsilon(&a, &b, &c, 3.0 - h, 1.2)?, |p, m| (p - m) / (2.0 * h)))
        .and_then(|d| d.zip_with(&b.zip_with(&c, |x, y| x - y)?, |d, e| d - e))
        .map(|d| d.data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .unwrap_or(f64::NAN);
    vec![
        line("cfg λ=1 returns conditional", eq(cfg_epsilon(&a, &b, 1.0), &a), "exact".into()),
        line("cfg λ=0 returns unconditional", eq(cfg_epsilon(&a, &b, 0.0), &b), "exact".into()),
        line("cfg scalar example", (cfg85 - 8.5).abs() < 1e-12, format!("{cfg85} (want 8.5)")),
        line("mfg λ=1 returns ε(c_T,c_M)", eq(mfg_epsilon(&a, &b, &c, 1.0, 1.0), &b), "exact".into()),
        line("mfg λ=0 returns ε(∅,∅)", eq(mfg_epsilon(&a, &b, &c, 0.0, 0.0), &a), "exact".into()),
        line("mfg scalar example", (scalar - 18.4).abs() < 1e-12, format!("{scalar} (want 18.4)")),
        line("mfg linear in λ_T", slope < 1e-6, format!("max slope error {slope:.2e}")),
    ]
}

/// Target of the oracle check: four coordinates with distinct means.
pub const ORACLE_MU: [f64; 4] = [1.0, -0.5, 2.0, 0.25];
pub const ORACLE_STD: f64 = 0.5;

pub fn gaussian_oracle(samples: usize, seed: u64) -> Vec<CheckLine> {
    let cases = [(0.3, 0.5, 1.0, 0.5), (-1.2, 0.9, -0.4, 1.3), (2.0, 0.05, 0.7, 0.2)];
    let quad = cases
        .iter()
        .map(|&(x, ab, mu, s)| (optimal_epsilon(x, ab, mu, s) - quadrature_epsilon(x, ab, mu, s)).abs())
        .fold(0.0, f64::max);
    let mut out = vec![line(
        "optimal ε vs quadrature",
        quad < 1e-6,
        format!("max abs diff {quad:.2e} on {} scalar cases", cases.len()),
    )];
    let sched = match ScheduleState::scaled_linear(DESK_STEPS) {
        Ok(s) => s,
        Err(e) => return vec![failed("gaussian oracle", e)],
    };
    let r = sample_gaussian(&sched, &ORACLE_MU, ORACLE_STD, samples, seed);
    let z = r.max_z();
    out.push(line(
        "oracle sample mean within 3 SE",
        z < 3.0,
        format!("{samples} samples, T={DESK_STEPS}, means {:.4?}, max |z| {z:.2}", r.mean),
    ));
    out
}

/// Largest per-frame deviation between an inflated model on a pseudo-video
/// and the image model on the image.
pub fn inflation_gap(t2i: &GenTron, t2v: &GenTron, seed: u64, frames: usize) -> gentron::Result<f64> {
    let cfg = t2i.config();
    let mut rng = Rng::new(seed);
    let img: Tensor = rng.randn(&cfg.latent_shape);
    let cond = t2i.encode("square top left");
    let t = rng.below(DESK_STEPS);
    let want = t2i.predict(&img, &[t], std::slice::from_ref(&cond), &Frames::Image)?;
    let clip = pseudo_video(&img, frames)?;
    let got = t2v.predict(&clip.frames, &[t], &[cond], &Frames::full_motion(frames))?;
    let mut gap: f64 = 0.0;
    for f in 0..frames {
        let frame = got.slice_leading(f, 1)?.reshape(&cfg.latent_shape)?;
        gap = gap.max(frame.max_abs_diff(&want));
    }
    Ok(gap)
}

/// Largest deviation between a motion-free clip forward and independent
/// per-frame forwards.
pub fn motion_free_gap(t2v: &GenTron, seed: u64, frames: usize) -> gentron::Result<f64> {
    let mut rng = Rng::new(seed);
    let mut shape = vec![frames];
    shape.extend_from_slice(&t2v.config().latent_shape);
    let clip: Tensor = rng.randn(&shape);
    let cond = t2v.encode("cross moving left");
    let t = rng.below(DESK_STEPS);
    let joint = t2v.predict(&clip, &[t], std::slice::from_ref(&cond), &Frames::motion_free(frames))?;
    let mut gap: f64 = 0.0;
    for f in 0..frames {
        let frame = clip.slice_leading(f, 1)?;
        let alone = t2v.predict(&frame, &[t], std::slice::from_ref(&cond), &Frames::Image)?;
        gap = gap.max(joint.slice_leading(f, 1)?.max_abs_diff(&alone));
    }
    Ok(gap)
}

fn video_identity() -> Vec<CheckLine> {
    let mut out = Vec::new();
    for (name, variant) in [("adaLN-Zero", Variant::AdalnZero), ("cross-attention", Variant::CrossAttention)] {
        let r = desk_model(variant, false, 20).and_then(|t2i| {
            let t2v = t2i.clone().inflate(&mut Rng::new(21))?;
            inflation_gap(&t2i, &t2v, 22, 8)
        });
        out.push(match r {
            Ok(gap) => line(&format!("inflation identity, {name}"), gap < 1e-6, format!("max abs diff {gap:.2e} over 8 frames")),
            Err(e) => failed("inflation identity", e),
        });
        let r = desk_model(variant, true, 23).and_then(|t2v| motion_free_gap(&t2v, 24, 8));
        out.push(match r {
            Ok(gap) => line(&format!("motion-free mask, {name}"), gap < 1e-5, format!("max abs diff {gap:.2e}")),
            Err(e) => failed("motion-free mask", e),
        });
    }
    out
}

/// Samples `n` images with prompts cycling through the dataset's classes
/// and counts how many land nearest their own class centroid.
pub fn prompt_accuracy(
    model: &GenTron,
    schedule: &ScheduleState,
    ds: &Dataset,
    n: usize,
    lambda_t: f64,
    seed: u64,
) -> gentron::Result<usize> {
    let classes = &ds.manifest.classes;
    let labels: Vec<usize> = (0..n).map(|i| i % classes.len()).collect();
    let conds: Vec<_> = labels.iter().map(|&l| model.encode(&classes[l])).collect();
    let g = GuidanceConfig { lambda_t, steps: schedule.len(), ..GuidanceConfig::default() };
    let x = sample_batch(model, schedule, &conds, &g, &mut Rng::new(seed))?;
    let centroids = ds.centroids();
    let d = model.config().latent_numel();
    Ok(labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| nearest_centroid(&x.data()[i * d..(i + 1) * d], &centroids) == l)
        .count())
}
