//! Finite-difference checks of every differentiable operator and of the full
//! two-view loss on a tiny model.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::Box;
use crate::model::{EncoderSpec, HeadSpec, SiamesePair};
use crate::rng::{child_rng, Rng as ChaRng};
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::{Graph, RoiSpec, Tensor, Var};
use crate::trainer::{loss_and_grads, Mode, PreparedBatch};

pub const THRESHOLD: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < THRESHOLD
    }
}

fn rand_tensor(rng: &mut ChaRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn off_zero(rng: &mut ChaRng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.gen::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Checks `op` on leaf inputs through `½‖op(x) − r‖²` with a fixed random `r`.
fn check_op<F>(name: &str, inputs: Vec<Tensor>, seed: u64, op: F) -> Result<GradCase>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = child_rng(seed, &[0x5eed]);
    let mut probe = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = op(&mut probe, &vars)?;
    let shape = probe.value(out).shape().to_vec();
    let target = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    let mut params = inputs;
    let report: GradCheckReport = grad_check(
        &mut params,
        |p| {
            let mut g = Graph::new();
            let vars: Vec<Var> = p.iter().map(|t| g.param(t.clone())).collect();
            let y = op(&mut g, &vars)?;
            let r = g.constant(target.clone());
            let d = g.sub(y, r)?;
            let s = g.sum_squares(d);
            let half = g.scale(s, 0.5);
            g.backward(half)?;
            Ok((g.value(half).item(), vars.iter().map(|v| g.grad_tensor(*v)).collect()))
        },
        STEP,
        None,
        seed,
    )?;
    Ok(GradCase {
        name: name.to_string(),
        max_rel_error: report.max_rel_error,
        checked: report.checked,
    })
}

/// Tiny two-view batch: `batch` images of `size`×`size`, `k` random region
/// pairs per image on a `grid`×`grid` feature map.
pub fn tiny_batch(seed: u64, batch: usize, size: usize, grid: usize, k: usize) -> PreparedBatch {
    let mut rng = child_rng(seed, &[0xba7c]);
    let v1 = rand_tensor(&mut rng, &[batch, 3, size, size], 0.0, 1.0);
    let v2 = rand_tensor(&mut rng, &[batch, 3, size, size], 0.0, 1.0);
    let g = grid as f64;
    let rand_box = |rng: &mut ChaRng| {
        let w = rng.gen_range(0.3..g);
        let h = rng.gen_range(0.3..g);
        Box {
            x: rng.gen_range(0.0..g - w),
            y: rng.gen_range(0.0..g - h),
            w,
            h,
        }
    };
    let mut rois1 = Vec::new();
    let mut rois2 = Vec::new();
    for i in 0..batch {
        for _ in 0..k {
            rois1.push(RoiSpec {
                batch_index: i,
                rect: rand_box(&mut rng),
            });
            rois2.push(RoiSpec {
                batch_index: i,
                rect: rand_box(&mut rng),
            });
        }
    }
    PreparedBatch {
        v1,
        v2,
        rois1,
        rois2,
        images: batch,
        skipped: 0,
        truncated: 0,
    }
}

/// Full symmetric loss of a tiny model (8×8 input, 2×2 feature grid) against
/// every online parameter. Region mode uses 2 images with 2 regions each;
/// global mode pools one row per image and uses 4 images so the head batch
/// norms see as many rows.
pub fn check_full_loss(seed: u64, mode: Mode) -> Result<GradCase> {
    let mut pair = SiamesePair::new(
        EncoderSpec::with_widths(8, &[3, 4]),
        HeadSpec::new(5, 3),
        HeadSpec::new(5, 3),
        seed,
    )?;
    // Zero-initialized biases put the predictor output exactly at the origin
    // whenever a row's hidden units are all inactive; move to a generic point.
    let mut rng = child_rng(seed, &[0xb1a5]);
    for p in pair.online.params.iter_mut() {
        if p.trainable && !p.name.ends_with(".weight") {
            for v in p.tensor.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    pair.target = pair.online.clone();
    let images = match mode {
        Mode::Scrl => 2,
        Mode::GlobalByol => 4,
    };
    let batch = tiny_batch(seed, images, 8, 2, 2);
    let trainable: Vec<usize> = pair
        .online
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, _)| i)
        .collect();
    let mut params: Vec<Tensor> = trainable
        .iter()
        .map(|&i| pair.online.params.iter().nth(i).expect("index").tensor.clone())
        .collect();
    let mut work = pair.clone();
    let report = grad_check(
        &mut params,
        |p| {
            for (t, &i) in p.iter().zip(&trainable) {
                work.online.params.iter_mut().nth(i).expect("index").tensor = t.clone();
            }
            let out = loss_and_grads(&work, &batch, mode)?;
            let grads = trainable
                .iter()
                .map(|&i| out.grads[i].clone().expect("trainable gradient"))
                .collect();
            Ok((out.loss, grads))
        },
        STEP,
        None,
        seed,
    )?;
    log::debug!("{mode:?} worst coordinate {:?}", report.worst);
    let name = match mode {
        Mode::Scrl => "full region loss (tiny model, batch 2, k 2)",
        Mode::GlobalByol => "full global loss (tiny model, batch 4)",
    };
    Ok(GradCase {
        name: name.into(),
        max_rel_error: report.max_rel_error,
        checked: report.checked,
    })
}

/// Every case of the suite.
pub fn run_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = child_rng(seed, &[0x0b5]);
    let r = &mut rng;
    let mut cases = Vec::new();
    cases.push(check_op(
        "conv2d stride 2 pad 1",
        vec![rand_tensor(r, &[2, 3, 6, 6], -1.0, 1.0), rand_tensor(r, &[4, 3, 3, 3], -0.5, 0.5)],
        seed,
        |g, v| g.conv2d(v[0], v[1], 2, 1),
    )?);
    cases.push(check_op(
        "conv2d stride 1 pad 0",
        vec![rand_tensor(r, &[1, 2, 5, 4], -1.0, 1.0), rand_tensor(r, &[3, 2, 2, 3], -0.5, 0.5)],
        seed,
        |g, v| g.conv2d(v[0], v[1], 1, 0),
    )?);
    cases.push(check_op(
        "linear",
        vec![
            rand_tensor(r, &[4, 5], -1.0, 1.0),
            rand_tensor(r, &[3, 5], -1.0, 1.0),
            rand_tensor(r, &[3], -1.0, 1.0),
        ],
        seed,
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    )?);
    cases.push(check_op("relu", vec![off_zero(r, &[3, 7])], seed, |g, v| Ok(g.relu(v[0])))?);
    cases.push(check_op(
        "batch norm (batch statistics, 4-d)",
        vec![
            rand_tensor(r, &[3, 2, 2, 2], -1.0, 1.0),
            rand_tensor(r, &[2], 0.5, 1.5),
            rand_tensor(r, &[2], -0.5, 0.5),
        ],
        seed,
        |g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
    )?);
    cases.push(check_op(
        "batch norm (batch statistics, 2-d)",
        vec![
            rand_tensor(r, &[5, 3], -1.0, 1.0),
            rand_tensor(r, &[3], 0.5, 1.5),
            rand_tensor(r, &[3], -0.5, 0.5),
        ],
        seed,
        |g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
    )?);
    let mean = rand_tensor(r, &[2], -0.2, 0.2);
    let var = rand_tensor(r, &[2], 0.5, 2.0);
    cases.push(check_op(
        "batch norm (running statistics)",
        vec![
            rand_tensor(r, &[2, 2, 3, 1], -1.0, 1.0),
            rand_tensor(r, &[2], 0.5, 1.5),
            rand_tensor(r, &[2], -0.5, 0.5),
        ],
        seed,
        move |g, v| g.batch_norm_eval(v[0], v[1], v[2], mean.data(), var.data(), 1e-5),
    )?);
    let rois = vec![
        RoiSpec {
            batch_index: 0,
            rect: Box { x: 0.3, y: 0.7, w: 2.1, h: 1.6 },
        },
        RoiSpec {
            batch_index: 1,
            rect: Box { x: 0.0, y: 0.0, w: 0.4, h: 0.3 },
        },
        RoiSpec {
            batch_index: 1,
            rect: Box { x: 2.5, y: 1.9, w: 1.5, h: 2.1 },
        },
    ];
    cases.push(check_op(
        "roi align 1x1",
        vec![rand_tensor(r, &[2, 3, 4, 4], -1.0, 1.0)],
        seed,
        move |g, v| g.roi_align_1x1(v[0], &rois, 2),
    )?);
    cases.push(check_op(
        "global average pool",
        vec![rand_tensor(r, &[2, 3, 2, 3], -1.0, 1.0)],
        seed,
        |g, v| g.global_avg_pool(v[0]),
    )?);
    cases.push(check_op(
        "l2 normalize",
        vec![off_zero(r, &[4, 5])],
        seed,
        |g, v| Ok(g.l2_normalize(v[0])),
    )?);
    cases.push(check_op(
        "add",
        vec![rand_tensor(r, &[3, 2], -1.0, 1.0), rand_tensor(r, &[3, 2], -1.0, 1.0)],
        seed,
        |g, v| g.add(v[0], v[1]),
    )?);
    cases.push(check_op(
        "sub",
        vec![rand_tensor(r, &[3, 2], -1.0, 1.0), rand_tensor(r, &[3, 2], -1.0, 1.0)],
        seed,
        |g, v| g.sub(v[0], v[1]),
    )?);
    cases.push(check_op("scale", vec![rand_tensor(r, &[4], -1.0, 1.0)], seed, |g, v| {
        Ok(g.scale(v[0], -1.7))
    })?);
    cases.push(check_op(
        "sum of squares",
        vec![rand_tensor(r, &[2, 3], -1.0, 1.0)],
        seed,
        |g, v| Ok(g.sum_squares(v[0])),
    )?);
    cases.push(check_op(
        "softmax cross-entropy",
        vec![rand_tensor(r, &[4, 3], -2.0, 2.0)],
        seed,
        |g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 2]),
    )?);
    cases.push(check_full_loss(seed, Mode::Scrl)?);
    cases.push(check_full_loss(seed, Mode::GlobalByol)?);
    Ok(cases)
}
