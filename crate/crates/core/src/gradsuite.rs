//! The finite-difference suite: every hand-derived gradient checked against central
//! differences at small dimensions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    anchor_targets, distillation_loss, focal_loss, regression_loss, step_loss, LossConfig,
    TeacherOutputs,
};
use crate::model::{
    assemble_query, forward_step, model_backward, AnchorConfig, MixerKind, Modality, ModelConfig,
    ModelSession, ModelWeights, OutputGrads, QueryBundle, StepMemory, WindowFeatures,
};
use crate::numerics::{
    check_gradient, dot, finite_diff_grad, GradCheckReport, Matrix, GRAD_CHECK_STEP, GRAD_CHECK_TOL,
};
use crate::params::{self, ParamVisit};
use crate::pml::{PmlLayer, PmlState};

/// Tolerance of the inner (memory-write) gradient check.
pub const INNER_GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_pml(d_in: usize, d_h: usize, d_out: usize, rng: &mut ChaCha8Rng) -> PmlLayer {
    let mut layer = PmlLayer::new(d_in, d_h, d_out, rng);
    layer.w_lr = Matrix::xavier(1, d_in, rng);
    layer.ln_gamma = layer.ln_gamma.map(|g| g + 0.3);
    layer.ln_beta = Matrix::xavier(1, d_h, rng);
    layer
}

/// Inner reconstruction gradient `2 (W^m k - v) k^T` against differences in `W^m`.
pub fn pml_inner(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = random_pml(6, 5, 4, &mut rng);
    let state = PmlState { w_m: random_matrix(5, 5, &mut rng), step_count: 0 };
    let r = random_vec(6, &mut rng);
    let analytic = layer.inner_gradient(&state, &r)?;
    let numeric = finite_diff_grad(
        |p| {
            let s = PmlState { w_m: Matrix::from_vec(5, 5, p.to_vec())?, step_count: 0 };
            layer.reconstruction_loss(&s, &r)
        },
        state.w_m.as_slice(),
        GRAD_CHECK_STEP,
    )?;
    Ok(check_gradient(analytic.as_slice(), &numeric, INNER_GRAD_TOL))
}

/// Read path of the memory layer after a few writes: `W_Q`, `W_O`, layer norm, input.
pub fn pml_read(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = random_pml(6, 5, 4, &mut rng);
    let mut state = layer.new_state();
    for _ in 0..3 {
        layer.memorize(&mut state, &random_vec(6, &mut rng))?;
    }
    let r = random_vec(6, &mut rng);
    let up = random_vec(4, &mut rng);
    let g = layer.read_path_gradient(&state, &r, &up)?;
    let objective = |l: &PmlLayer, x: &[f64]| -> Result<f64> { Ok(dot(&l.read(&state, x)?, &up)) };
    let mut report = check_gradient(
        &g.input,
        &finite_diff_grad(|p| objective(&layer, p), &r, GRAD_CHECK_STEP)?,
        GRAD_CHECK_TOL,
    );
    type Field = fn(&mut PmlLayer) -> &mut Matrix;
    let fields: [(Field, &Matrix); 4] = [
        (|l| &mut l.w_q, &g.w_q),
        (|l| &mut l.w_o, &g.w_o),
        (|l| &mut l.ln_gamma, &g.ln_gamma),
        (|l| &mut l.ln_beta, &g.ln_beta),
    ];
    for (field, analytic) in fields {
        let mut base = layer.clone();
        let start = field(&mut base).as_slice().to_vec();
        let numeric = finite_diff_grad(
            |p| {
                let mut l = layer.clone();
                field(&mut l).as_mut_slice().copy_from_slice(p);
                objective(&l, &r)
            },
            &start,
            GRAD_CHECK_STEP,
        )?;
        report = report.merge(check_gradient(analytic.as_slice(), &numeric, GRAD_CHECK_TOL), GRAD_CHECK_TOL);
    }
    Ok(report)
}

pub fn focal(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::empty();
    for gamma in [0.0, 1.0, 2.0] {
        let c = LossConfig { gamma, ..LossConfig::default() };
        let p: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..0.95)).collect();
        let pos = [true, false, true, false];
        let (_, g) = focal_loss(&p, &pos, &c)?;
        let numeric = finite_diff_grad(|x| Ok(focal_loss(x, &pos, &c)?.0), &p, 1e-6)?;
        report = report.merge(check_gradient(&g, &numeric, GRAD_CHECK_TOL), GRAD_CHECK_TOL);
    }
    Ok(report)
}

pub fn regression(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = anchor_targets(8.0, &[8.0, 4.0, 2.0], &[(1.0, 7.0), (6.0, 8.5)], 0.5)?;
    let pred = random_matrix(3, 2, &mut rng);
    let (_, g) = regression_loss(&pred, &targets)?;
    let numeric = finite_diff_grad(
        |x| Ok(regression_loss(&Matrix::from_vec(3, 2, x.to_vec())?, &targets)?.0),
        pred.as_slice(),
        GRAD_CHECK_STEP,
    )?;
    Ok(check_gradient(g.as_slice(), &numeric, GRAD_CHECK_TOL))
}

pub fn distillation(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (4, 8);
    let s = [random_matrix(n, d, &mut rng), random_matrix(n, 2, &mut rng), random_matrix(n, 2, &mut rng)];
    let t = [random_matrix(n, d, &mut rng), random_matrix(n, 2, &mut rng), random_matrix(n, 2, &mut rng)];
    let (_, g) = distillation_loss((&s[0], &s[1], &s[2]), (&t[0], &t[1], &t[2]), 2.0)?;
    let flat: Vec<f64> = s.iter().flat_map(|m| m.as_slice().to_vec()).collect();
    let numeric = finite_diff_grad(
        |x| {
            let a = Matrix::from_vec(n, d, x[..n * d].to_vec())?;
            let b = Matrix::from_vec(n, 2, x[n * d..n * d + 2 * n].to_vec())?;
            let c = Matrix::from_vec(n, 2, x[n * d + 2 * n..].to_vec())?;
            Ok(distillation_loss((&a, &b, &c), (&t[0], &t[1], &t[2]), 2.0)?.0)
        },
        &flat,
        GRAD_CHECK_STEP,
    )?;
    let analytic: Vec<f64> =
        [&g.anchor_features, &g.offsets, &g.probs].iter().flat_map(|m| m.as_slice().to_vec()).collect();
    Ok(check_gradient(&analytic, &numeric, GRAD_CHECK_TOL))
}

/// Small model used by the whole-model checks.
pub fn small_model(mixer: MixerKind) -> ModelConfig {
    ModelConfig {
        video_dim: 3,
        query_dims: [3, 2, 3],
        model_dim: 4,
        ffn_dim: 4,
        window: 4,
        anchors: AnchorConfig { count: 2, longest: 2 },
        fusion_layers: 1,
        memory_blocks: 1,
        decoder_layers: 2,
        mixer,
        ..ModelConfig::default()
    }
}

struct ModelFixture {
    weights: ModelWeights,
    query: QueryBundle,
    raw: Matrix,
    mask: Vec<bool>,
    session: ModelSession,
}

fn model_fixture(mixer: MixerKind, seed: u64) -> Result<ModelFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = small_model(mixer);
    let mut weights = ModelWeights::init(&config, seed)?;
    weights.visit_mut("", &mut |_, m| {
        for x in m.as_mut_slice() {
            *x += rng.random_range(-0.1..0.1);
        }
    });
    let query = QueryBundle::new(vec![
        (Modality::Text, random_matrix(1, 3, &mut rng)),
        (Modality::Segment, random_matrix(2, 3, &mut rng)),
    ])?;
    let mask = vec![false, true, true, true];
    let mut session = ModelSession::new(&weights, 1);
    let q = assemble_query(&weights, &query)?;
    // warm-up steps so that every memory holds something
    for t in [2.0, 4.0] {
        let mut raw = random_matrix(4, 3, &mut rng);
        raw.row_mut(0).fill(0.0);
        let w = WindowFeatures::project(&weights, raw, mask.clone(), t)?;
        forward_step(&weights, &q, &w, StepMemory::Live(&mut session), false)?;
    }
    let mut raw = random_matrix(4, 3, &mut rng);
    raw.row_mut(0).fill(0.0);
    Ok(ModelFixture { weights, query, raw, mask, session })
}

fn with_flat(weights: &ModelWeights, p: &[f64]) -> ModelWeights {
    let mut w = weights.clone();
    let mut i = 0;
    w.visit_mut("", &mut |_, m| {
        let len = m.len();
        m.as_mut_slice().copy_from_slice(&p[i..i + len]);
        i += len;
    });
    w
}

/// Every parameter of the model (fusion, memory blocks, decoder, heads, refinement)
/// under the full training loss with a distillation target. Memory contents are
/// replayed from the step so that they stay constant under perturbation.
pub fn model(mixer: MixerKind, seed: u64) -> Result<GradCheckReport> {
    let mut f = model_fixture(mixer, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let t = 6.0;
    let cfg = LossConfig::default();
    let config = f.weights.config.clone();
    let targets = anchor_targets(t, &config.anchor_seconds(), &[(1.0, 5.0)], cfg.pos_iou_threshold)?;
    let n = config.anchors.count;
    let teacher_features = random_matrix(n, config.model_dim, &mut rng);
    let mut teacher_refined = {
        let q = assemble_query(&f.weights, &f.query)?;
        let w = WindowFeatures::project(&f.weights, f.raw.clone(), f.mask.clone(), t)?;
        let mut scratch = f.session.clone();
        forward_step(&f.weights, &q, &w, StepMemory::Live(&mut scratch), false)?.refined
    };
    teacher_refined.offsets = random_matrix(n, 2, &mut rng);
    let teacher = || TeacherOutputs { anchor_features: &teacher_features, refined: &teacher_refined };

    let q = assemble_query(&f.weights, &f.query)?;
    let w = WindowFeatures::project(&f.weights, f.raw.clone(), f.mask.clone(), t)?;
    let step = forward_step(&f.weights, &q, &w, StepMemory::Live(&mut f.session), true)?;
    let (_, dout) = step_loss(&cfg, &step.anchor_features, &step.refined, &targets, Some(teacher()))?;
    let mut grads = f.weights.zeros_like();
    model_backward(&f.weights, &q, &step, &dout, &mut grads)?;
    let snapshots = step.snapshots.clone();
    let numeric = finite_diff_grad(
        |p| {
            let w2 = with_flat(&f.weights, p);
            let q2 = assemble_query(&w2, &f.query)?;
            let win = WindowFeatures::project(&w2, f.raw.clone(), f.mask.clone(), t)?;
            let s = forward_step(&w2, &q2, &win, StepMemory::Replay(&snapshots), false)?;
            Ok(step_loss(&cfg, &s.anchor_features, &s.refined, &targets, Some(teacher()))?.0.total)
        },
        &params::flatten(&f.weights),
        GRAD_CHECK_STEP,
    )?;
    Ok(check_gradient(&params::flatten(&grads), &numeric, GRAD_CHECK_TOL))
}

/// Backward is linear in the upstream gradient, so batch averaging of per-step
/// gradients is exact: `g(a d1 + b d2) = a g(d1) + b g(d2)`.
pub fn backward_linearity(seed: u64) -> Result<GradCheckReport> {
    let mut f = model_fixture(MixerKind::Pml, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
    let q = assemble_query(&f.weights, &f.query)?;
    let w = WindowFeatures::project(&f.weights, f.raw.clone(), f.mask.clone(), 6.0)?;
    let step = forward_step(&f.weights, &q, &w, StepMemory::Live(&mut f.session), true)?;
    let (n, d) = (step.refined.len(), f.weights.config.model_dim);
    let random_grads = |rng: &mut ChaCha8Rng| OutputGrads {
        refined_probs: random_matrix(n, 2, rng),
        refined_offsets: random_matrix(n, 2, rng),
        anchor_features: random_matrix(n, d, rng),
    };
    let (d1, d2) = (random_grads(&mut rng), random_grads(&mut rng));
    let (a, b) = (0.7, -1.3);
    let combine = |x: &Matrix, y: &Matrix| -> Result<Matrix> {
        let mut m = x.scaled(a);
        m.axpy(b, y)?;
        Ok(m)
    };
    let d12 = OutputGrads {
        refined_probs: combine(&d1.refined_probs, &d2.refined_probs)?,
        refined_offsets: combine(&d1.refined_offsets, &d2.refined_offsets)?,
        anchor_features: combine(&d1.anchor_features, &d2.anchor_features)?,
    };
    let backward = |d: &OutputGrads| -> Result<ModelWeights> {
        let mut g = f.weights.zeros_like();
        model_backward(&f.weights, &q, &step, d, &mut g)?;
        Ok(g)
    };
    let (g1, g2, g12) = (backward(&d1)?, backward(&d2)?, backward(&d12)?);
    let mut expected = f.weights.zeros_like();
    params::axpy(&mut expected, a, &g1);
    params::axpy(&mut expected, b, &g2);
    Ok(check_gradient(&params::flatten(&g12), &params::flatten(&expected), GRAD_CHECK_TOL))
}

/// Runs every check.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let entry = |name: &str, tolerance: f64, report: GradCheckReport| SuiteEntry {
        name: name.to_owned(),
        tolerance,
        report,
    };
    Ok(vec![
        entry("pml.inner", INNER_GRAD_TOL, pml_inner(seed)?),
        entry("pml.read", GRAD_CHECK_TOL, pml_read(seed)?),
        entry("loss.focal", GRAD_CHECK_TOL, focal(seed)?),
        entry("loss.regression", GRAD_CHECK_TOL, regression(seed)?),
        entry("loss.distillation", GRAD_CHECK_TOL, distillation(seed)?),
        entry("model.pml", GRAD_CHECK_TOL, model(MixerKind::Pml, seed)?),
        entry("model.recurrent", GRAD_CHECK_TOL, model(MixerKind::Recurrent, seed)?),
        entry("model.window_attention", GRAD_CHECK_TOL, model(MixerKind::WindowAttention, seed)?),
        entry("backward.linearity", GRAD_CHECK_TOL, backward_linearity(seed)?),
    ])
}
