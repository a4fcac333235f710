//! Finite-difference verification of every differentiable piece.
//!
//! Each subject builds a scalar objective on a fresh tape, takes analytic
//! gradients in one backward pass, and compares them element by element
//! against central differences of the same objective. Non-scalar outputs
//! are reduced through `sigmoid` + binary cross-entropy against a frozen
//! random target, so every output element carries a distinct weight.
//!
//! Everything runs in `f64` with step 1e-4. Individual ops, blocks, and
//! losses must agree to 1e-4 relative error; the end-to-end model (with
//! its longer chains of rounding) to 1e-3.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    BatchNorm2dLayer, Conv2dLayer, FusionBlock, FusionVariant, MsConvBlock, PlainConvBlock,
    SENetBlock, BN_EPS,
};
use crate::loss::combined_loss;
use crate::model::{CdseUnet, ModelConfig};
use crate::tensor::{Dims, Graph, Lease, Mode, ParamId, Params, Tensor, Var};
use crate::{Error, Result};

/// Central-difference step.
pub const STEP: f64 = 1e-4;
/// Relative-error bound for single ops, blocks, and losses.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for the end-to-end model check.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Denominator floor so near-zero gradient pairs compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of gradient elements compared.
    pub compared: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.compared > 0 && self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} over {} elements (tolerance {:.0e}) {}",
            self.name,
            self.max_rel_err,
            self.compared,
            self.tolerance,
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &mut Params<f64>, &[Var]) -> Result<(Var, Lease)>>;

/// One objective to differentiate: leaf inputs, a parameter table, and a
/// closure that wires both into a scalar loss node.
struct Subject {
    name: &'static str,
    tolerance: f64,
    inputs: Vec<Tensor<f64>>,
    params: Params<f64>,
    build: Build,
}

fn objective(subject: &Subject, inputs: &[Tensor<f64>], params: &Params<f64>) -> Result<f64> {
    let mut params = params.clone();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let (loss, _) = (subject.build)(&mut g, &mut params, &vars)?;
    Ok(g.scalar_value(loss))
}

fn sample_indices(rng: &mut ChaCha8Rng, numel: usize, want: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..numel).collect();
    if numel > want {
        indices.shuffle(rng);
        indices.truncate(want);
    }
    indices
}

const INPUT_SAMPLES: usize = 10;
const PARAM_SAMPLES: usize = 4;

fn run_subject(subject: &Subject, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut params = subject.params.clone();
    params.zero_grads();
    let mut g = Graph::new();
    let vars: Vec<Var> = subject.inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let (loss, lease) = (subject.build)(&mut g, &mut params, &vars)?;
    g.backward(loss)?;
    lease.accumulate(&g, &mut params);
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(&subject.inputs)
        .map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.data.len()]))
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut compared = 0;
    let mut diff = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * STEP);
        max_rel_err = max_rel_err.max(rel_err(analytic, numeric));
        compared += 1;
    };

    let mut work = subject.inputs.clone();
    for (k, grads) in input_grads.iter().enumerate() {
        for i in sample_indices(rng, work[k].data.len(), INPUT_SAMPLES) {
            let old = work[k].data[i];
            work[k].data[i] = old + STEP;
            let plus = objective(subject, &work, &subject.params)?;
            work[k].data[i] = old - STEP;
            let minus = objective(subject, &work, &subject.params)?;
            work[k].data[i] = old;
            diff(grads[i], plus, minus);
        }
    }

    for idx in 0..params.len() {
        let id = ParamId(idx);
        if !params.get(id).trainable {
            continue;
        }
        for i in sample_indices(rng, params.value(id).data.len(), PARAM_SAMPLES) {
            let mut tweaked = subject.params.clone();
            tweaked.value_mut(id).data[i] += STEP;
            let plus = objective(subject, &subject.inputs, &tweaked)?;
            tweaked.value_mut(id).data[i] -= 2.0 * STEP;
            let minus = objective(subject, &subject.inputs, &tweaked)?;
            diff(params.get(id).grad[i], plus, minus);
        }
    }

    Ok(CheckReport {
        name: subject.name.to_string(),
        max_rel_err,
        tolerance: subject.tolerance,
        compared,
    })
}

fn uniform(rng: &mut ChaCha8Rng, dims: Dims, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..dims.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(dims, data).expect("sized data")
}

fn binary(rng: &mut ChaCha8Rng, dims: Dims) -> Tensor<f64> {
    let data = (0..dims.numel()).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(dims, data).expect("sized data")
}

/// Values with `|v| >= margin`, so a step of 1e-4 never crosses a relu kink.
fn kink_free(rng: &mut ChaCha8Rng, dims: Dims, margin: f64) -> Tensor<f64> {
    let data = (0..dims.numel())
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(margin..1.0)
        })
        .collect();
    Tensor::from_vec(dims, data).expect("sized data")
}

/// A shuffled grid with spacing far above the step, so maxpool windows
/// never tie and perturbations never change an argmax.
fn spaced(rng: &mut ChaCha8Rng, dims: Dims) -> Tensor<f64> {
    let mut data: Vec<f64> = (0..dims.numel()).map(|i| i as f64 * 0.01).collect();
    data.shuffle(rng);
    Tensor::from_vec(dims, data).expect("sized data")
}

/// Reduce `z` to a scalar: `bce(sigmoid(z), target)`.
fn scalarize(g: &mut Graph<f64>, z: Var, target: &Tensor<f64>) -> Result<Var> {
    let p = g.sigmoid(z);
    let y = g.leaf(target.clone(), false);
    g.bce_loss(p, y)
}

fn op_subjects(rng: &mut ChaCha8Rng) -> Vec<Subject> {
    let mut subjects = Vec::new();
    let mut push = |name: &'static str,
                    inputs: Vec<Tensor<f64>>,
                    build: Build| {
        subjects.push(Subject { name, tolerance: OP_TOLERANCE, inputs, params: Params::new(), build });
    };

    {
        let y = binary(rng, Dims::new(2, 4, 6, 5));
        push(
            "conv2d stride 1",
            vec![
                uniform(rng, Dims::new(2, 3, 6, 5), -1.0, 1.0),
                uniform(rng, Dims::new(4, 3, 3, 3), -0.5, 0.5),
                uniform(rng, Dims::new(1, 4, 1, 1), -0.5, 0.5),
            ],
            Box::new(move |g, _, v| {
                let z = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                Ok((scalarize(g, z, &y)?, Lease::new()))
            }),
        );
    }
    {
        let y = binary(rng, Dims::new(1, 3, 3, 3));
        push(
            "conv2d stride 2",
            vec![
                uniform(rng, Dims::new(1, 2, 6, 6), -1.0, 1.0),
                uniform(rng, Dims::new(3, 2, 3, 3), -0.5, 0.5),
                uniform(rng, Dims::new(1, 3, 1, 1), -0.5, 0.5),
            ],
            Box::new(move |g, _, v| {
                let z = g.conv2d(v[0], v[1], v[2], 2, 1)?;
                Ok((scalarize(g, z, &y)?, Lease::new()))
            }),
        );
    }
    {
        let y = binary(rng, Dims::new(1, 2, 5, 5));
        push(
            "conv2d 5x5",
            vec![
                uniform(rng, Dims::new(1, 2, 5, 5), -1.0, 1.0),
                uniform(rng, Dims::new(2, 2, 5, 5), -0.3, 0.3),
                uniform(rng, Dims::new(1, 2, 1, 1), -0.3, 0.3),
            ],
            Box::new(move |g, _, v| {
                let z = g.conv2d(v[0], v[1], v[2], 1, 2)?;
                Ok((scalarize(g, z, &y)?, Lease::new()))
            }),
        );
    }
    for (name, mode) in [("batchnorm train", Mode::Train), ("batchnorm eval", Mode::Eval)] {
        let y = binary(rng, Dims::new(2, 3, 4, 4));
        let running_mean: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let running_var: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
        push(
            name,
            vec![
                uniform(rng, Dims::new(2, 3, 4, 4), -1.0, 1.0),
                uniform(rng, Dims::new(1, 3, 1, 1), 0.5, 1.5),
                uniform(rng, Dims::new(1, 3, 1, 1), -0.5, 0.5),
            ],
            Box::new(move |g, _, v| {
                let (z, _, _) =
                    g.batchnorm(v[0], v[1], v[2], &running_mean, &running_var, BN_EPS, mode)?;
                Ok((scalarize(g, z, &y)?, Lease::new()))
            }),
        );
    }
    {
        let y = binary(rng, Dims::new(2, 3, 4, 4));
        push(
            "relu",
            vec![kink_free(rng, Dims::new(2, 3, 4, 4), 0.05)],
            Box::new(move |g, _, v| {
                let z = g.relu(v[0]);
                Ok((scalarize(g, z, &y)?, Lease::new()))
            }),
        );
    }
    {
        let y = binary(rng, Dims::new(2, 3, 4, 4));
        push(
            "sigmoid",
            vec![uniform(rng, Dims::new(2, 3, 4, 4), -2.0, 2.0)],
            Box::new(move |g, _, v| {
                let z = g.sigmoid(v[0]);
                Ok((scalarize(g, z, &y)?, Lease::new()))
            }),
        );
    }
    {
        let y = binary(rng, Dims::new(1, 2, 3, 3));
        push(
            "maxpool2",
            vec![spaced(rng, Dims::new(1, 2, 6, 6))],
            Box::new(move |g, _, v| {
                let z = g.maxpool2(v[0])?;
                Ok((scalarize(g, z, &y)?, Lease::new()))
            }),
        );
    }
    {
        let y = binary(rng, Dims::new(1, 3, 6, 8));
        push(
            "upsample2",
            vec![uniform(rng, Dims::new(1, 3, 3, 4), -1.0, 1.0)],
            Box::new(move |g, _, v| {
                let z = g.upsample2(v[0]);
                Ok((scalarize(g, z, &y)?, Lease::new()))
            }),
        );
    }
    {
        let y = binary(rng, Dims::new(2, 4, 1, 1));
        push(
            "global_avg_pool",
            vec![uniform(rng, Dims::new(2, 4, 3, 3), -1.0, 1.0)],
            Box::new(move |g, _, v| {
                let z = g.global_avg_pool(v[0]);
                Ok((scalarize(g, z, &y)?, Lease::new()))
            }),
        );
    }
    {
        let y = binary(rng, Dims::new(2, 3, 1, 1));
        push(
            "linear",
            vec![
                uniform(rng, Dims::new(2, 5, 1, 1), -1.0, 1.0),
                uniform(rng, Dims::new(3, 5, 1, 1), -0.5, 0.5),
                uniform(rng, Dims::new(1, 3, 1, 1), -0.5, 0.5),
            ],
            Box::new(move |g, _, v| {
                let z = g.linear(v[0], v[1], v[2])?;
                Ok((scalarize(g, z, &y)?, Lease::new()))
            }),
        );
    }
    {
        let y = binary(rng, Dims::new(2, 5, 3, 3));
        push(
            "concat_channels",
            vec![
                uniform(rng, Dims::new(2, 2, 3, 3), -1.0, 1.0),
                uniform(rng, Dims::new(2, 3, 3, 3), -1.0, 1.0),
            ],
            Box::new(move |g, _, v| {
                let z = g.concat_channels(v[0], v[1])?;
                Ok((scalarize(g, z, &y)?, Lease::new()))
            }),
        );
    }
    {
        let y = binary(rng, Dims::new(2, 3, 4, 4));
        push(
            "scale_channels",
            vec![
                uniform(rng, Dims::new(2, 3, 4, 4), -1.0, 1.0),
                uniform(rng, Dims::new(2, 3, 1, 1), 0.1, 0.9),
            ],
            Box::new(move |g, _, v| {
                let z = g.scale_channels(v[0], v[1])?;
                Ok((scalarize(g, z, &y)?, Lease::new()))
            }),
        );
    }
    {
        let y = binary(rng, Dims::new(2, 2, 3, 3));
        push(
            "add and mul_const",
            vec![
                uniform(rng, Dims::new(2, 2, 3, 3), -1.0, 1.0),
                uniform(rng, Dims::new(2, 2, 3, 3), -1.0, 1.0),
            ],
            Box::new(move |g, _, v| {
                let a = g.mul_const(v[0], 0.3);
                let b = g.mul_const(v[1], 0.7);
                let z = g.add(a, b)?;
                Ok((scalarize(g, z, &y)?, Lease::new()))
            }),
        );
    }
    {
        let y = binary(rng, Dims::new(1, 1, 4, 4));
        push(
            "bce loss",
            vec![uniform(rng, Dims::new(1, 1, 4, 4), 0.05, 0.95)],
            Box::new(move |g, _, v| {
                let t = g.leaf(y.clone(), false);
                Ok((g.bce_loss(v[0], t)?, Lease::new()))
            }),
        );
    }
    {
        let y = binary(rng, Dims::new(1, 1, 4, 4));
        push(
            "dice loss",
            vec![uniform(rng, Dims::new(1, 1, 4, 4), 0.05, 0.95)],
            Box::new(move |g, _, v| {
                let t = g.leaf(y.clone(), false);
                Ok((g.dice_loss(v[0], t)?, Lease::new()))
            }),
        );
    }
    {
        let y = binary(rng, Dims::new(1, 1, 4, 4));
        push(
            "combined loss",
            vec![uniform(rng, Dims::new(1, 1, 4, 4), 0.05, 0.95)],
            Box::new(move |g, _, v| {
                let t = g.leaf(y.clone(), false);
                Ok((combined_loss(g, v[0], t)?.total, Lease::new()))
            }),
        );
    }
    subjects
}

fn block_subjects(rng: &mut ChaCha8Rng) -> Vec<Subject> {
    let mut subjects = Vec::new();

    {
        let mut params = Params::new();
        let block = PlainConvBlock::new(&mut params, rng, "blk", 2, 4);
        let y = binary(rng, Dims::new(2, 4, 5, 5));
        subjects.push(Subject {
            name: "plain conv block",
            tolerance: OP_TOLERANCE,
            inputs: vec![uniform(rng, Dims::new(2, 2, 5, 5), -1.0, 1.0)],
            params,
            build: Box::new(move |g, ps, v| {
                let mut lease = Lease::new();
                let z = block.forward(g, ps, &mut lease, v[0], Mode::Train)?;
                Ok((scalarize(g, z, &y)?, lease))
            }),
        });
    }
    {
        let mut params = Params::new();
        let block = MsConvBlock::new(&mut params, rng, "ms", 2, 4).expect("width divides");
        let y = binary(rng, Dims::new(1, 4, 4, 4));
        subjects.push(Subject {
            name: "multi-scale conv block",
            tolerance: OP_TOLERANCE,
            inputs: vec![uniform(rng, Dims::new(1, 2, 4, 4), -1.0, 1.0)],
            params,
            build: Box::new(move |g, ps, v| {
                let mut lease = Lease::new();
                let z = block.forward(g, ps, &mut lease, v[0], Mode::Train)?;
                Ok((scalarize(g, z, &y)?, lease))
            }),
        });
    }
    {
        let mut params = Params::new();
        let block = SENetBlock::new(&mut params, rng, "se", 4, 2);
        let y = binary(rng, Dims::new(2, 4, 3, 3));
        subjects.push(Subject {
            name: "senet block",
            tolerance: OP_TOLERANCE,
            inputs: vec![uniform(rng, Dims::new(2, 4, 3, 3), -1.0, 1.0)],
            params,
            build: Box::new(move |g, ps, v| {
                let mut lease = Lease::new();
                let z = block.forward(g, ps, &mut lease, v[0])?;
                Ok((scalarize(g, z, &y)?, lease))
            }),
        });
    }
    for (name, kind) in [
        ("fusion simple concat", FusionVariant::SimpleConcat),
        ("fusion single senet", FusionVariant::SingleSenet),
        ("fusion double senet", FusionVariant::DoubleSenet),
    ] {
        let mut params = Params::new();
        let block = FusionBlock::new(&mut params, rng, "fuse", 4, 2, kind);
        let y = binary(rng, Dims::new(2, 4, 3, 3));
        subjects.push(Subject {
            name,
            tolerance: OP_TOLERANCE,
            inputs: vec![
                uniform(rng, Dims::new(2, 4, 3, 3), -1.0, 1.0),
                uniform(rng, Dims::new(2, 4, 3, 3), -1.0, 1.0),
            ],
            params,
            build: Box::new(move |g, ps, v| {
                let mut lease = Lease::new();
                let z = block.forward(g, ps, &mut lease, v[0], v[1])?;
                Ok((scalarize(g, z, &y)?, lease))
            }),
        });
    }
    {
        let mut params = Params::new();
        let conv = Conv2dLayer::new(&mut params, rng, "up", 4, 2, 3, 1, 1);
        let bn = BatchNorm2dLayer::new(&mut params, "bn", 2);
        let y = binary(rng, Dims::new(1, 2, 4, 4));
        subjects.push(Subject {
            name: "conv layer + batchnorm layer",
            tolerance: OP_TOLERANCE,
            inputs: vec![uniform(rng, Dims::new(1, 4, 4, 4), -1.0, 1.0)],
            params,
            build: Box::new(move |g, ps, v| {
                let mut lease = Lease::new();
                let z = conv.forward(g, ps, &mut lease, v[0])?;
                let z = bn.forward(g, ps, &mut lease, z, Mode::Train)?;
                Ok((scalarize(g, z, &y)?, lease))
            }),
        });
    }
    subjects
}

/// How many parameters the end-to-end check perturbs.
pub const MODEL_SAMPLES: usize = 10;

/// Differentiate the full training objective of a small model through
/// `MODEL_SAMPLES` randomly chosen trainable parameters.
pub fn check_model(seed: u64) -> Result<CheckReport> {
    let config = ModelConfig { base_width: 4, input_size: 16, bottleneck_layers: 1, ..ModelConfig::default() };
    let mut model: CdseUnet<f64> = CdseUnet::build(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00C0_FFEE);
    let dims = Dims::new(2, 1, 16, 16);
    let image = uniform(&mut rng, dims, 0.0, 1.0);
    let edge = binary(&mut rng, dims);
    let mask = binary(&mut rng, dims);

    let run = |model: &mut CdseUnet<f64>| -> Result<(f64, Lease, Graph<f64>)> {
        let mut g = Graph::new();
        let (probs, lease, _) = model.forward(&mut g, &image, Some(&edge), Mode::Train)?;
        let target = g.leaf(mask.clone(), false);
        let loss = combined_loss(&mut g, probs, target)?;
        let total = g.scalar_value(loss.total);
        g.backward(loss.total)?;
        Ok((total, lease, g))
    };

    model.params.zero_grads();
    let (_, lease, g) = run(&mut model)?;
    lease.accumulate(&g, &mut model.params);

    let mut pairs = Vec::new();
    for idx in 0..model.params.len() {
        let id = ParamId(idx);
        if model.params.get(id).trainable {
            pairs.extend((0..model.params.value(id).data.len()).map(|i| (idx, i)));
        }
    }
    pairs.shuffle(&mut rng);
    pairs.truncate(MODEL_SAMPLES);
    if pairs.is_empty() {
        return Err(Error::Verification("model has no trainable parameters".into()));
    }

    let mut max_rel_err = 0.0f64;
    for &(idx, i) in &pairs {
        let id = ParamId(idx);
        let analytic = model.params.get(id).grad[i];
        let old = model.params.value(id).data[i];
        model.params.value_mut(id).data[i] = old + STEP;
        let (plus, _, _) = run(&mut model)?;
        model.params.value_mut(id).data[i] = old - STEP;
        let (minus, _, _) = run(&mut model)?;
        model.params.value_mut(id).data[i] = old;
        let numeric = (plus - minus) / (2.0 * STEP);
        max_rel_err = max_rel_err.max(rel_err(analytic, numeric));
    }

    Ok(CheckReport {
        name: "end-to-end model".to_string(),
        max_rel_err,
        tolerance: MODEL_TOLERANCE,
        compared: pairs.len(),
    })
}

/// Run every subject — ops, blocks, losses, then the end-to-end model —
/// and return their reports. Failures are reported, not raised; errors
/// mean a subject could not even be evaluated.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for subject in op_subjects(&mut rng).iter().chain(block_subjects(&mut rng).iter()) {
        reports.push(run_subject(subject, &mut rng)?);
    }
    reports.push(check_model(seed)?);
    Ok(reports)
}
