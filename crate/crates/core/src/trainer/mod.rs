//! The training loop: paired views, matched RoIs, the symmetric regression
//! loss, optimizer and target-network updates.

pub mod config;
pub mod optim;

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Mode, OptimizerKind, TrainConfig};
pub use optim::Optimizer;

use crate::augment::{generate_dataset, sample_view, AugmentParams, SyntheticImage};
use crate::error::{Error, Result};
use crate::geometry::{
    intersect_views, jitter_box, map_box_to_grid, map_box_to_view, map_pair, sample_rois, Box, FeatureGridSpec,
    ViewGeometry,
};
use crate::model::{BnMode, BnUpdate, EncoderSpec, HeadSpec, SiamesePair};
use crate::rng::{child_rng, STREAM_AUGMENT, STREAM_SHUFFLE};
use crate::tensor::serialize::{write_atomic, Checkpoint};
use crate::tensor::{Graph, ParamId, RoiSpec, Tensor, Var};

pub const MAX_VIEW_RESAMPLES: usize = 10;
pub const SAMPLING_RATIO: usize = 2;

pub const METRICS_HEADER: &str =
    "step,epoch,loss,loss_12,loss_21,lr,tau,boxes_per_image,truncated,skipped,grad_norm,embedding_std";

/// Linear warmup from 0 to `lr0` over `warmup` steps, then cosine decay to 0
/// at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, lr0: f64) -> f64 {
    if step < warmup {
        return lr0 * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr0;
    }
    let t = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Cosine ramp of the EMA decay from `tau0` at step 0 to 1 at `total`.
pub fn tau_schedule(step: usize, total: usize, tau0: f64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let t = (step as f64 / total as f64).min(1.0);
    1.0 - (1.0 - tau0) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

/// Mean over rows of `‖q̄ − z̄‖²` with both sides L2-normalized.
pub fn scrl_loss(g: &mut Graph, q: Var, z: Var) -> Result<Var> {
    let (qs, zs) = (g.value(q).shape().to_vec(), g.value(z).shape().to_vec());
    if qs != zs || qs.len() != 2 || qs[0] == 0 {
        return Err(Error::Shape(format!("loss rows: q {qs:?} vs z {zs:?}")));
    }
    let qn = g.l2_normalize(q);
    let zn = g.l2_normalize(z);
    let d = g.sub(qn, zn)?;
    let s = g.sum_squares(d);
    Ok(g.scale(s, 1.0 / qs[0] as f64))
}

/// Value-only form of [`scrl_loss`].
pub fn scrl_loss_value(q: &Tensor, z: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (qv, zv) = (g.constant(q.clone()), g.constant(z.clone()));
    let l = scrl_loss(&mut g, qv, zv)?;
    Ok(g.value(l).item())
}

/// Sum of both directions: online view-1 predictions against target view-2
/// projections, and the reverse.
pub fn symmetrized_loss(g: &mut Graph, q1: Var, z2: Var, q2: Var, z1: Var) -> Result<Var> {
    let a = scrl_loss(g, q1, z2)?;
    let b = scrl_loss(g, q2, z1)?;
    g.add(a, b)
}

/// Mean over dimensions of the per-dimension standard deviation of the
/// L2-normalized rows.
pub fn normalized_std(rows: &Tensor) -> f64 {
    let (n, d) = (rows.shape()[0], rows.shape()[1]);
    if n == 0 || d == 0 {
        return 0.0;
    }
    let normed: Vec<f64> = rows
        .data()
        .chunks(d)
        .flat_map(|r| {
            let nrm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::tensor::L2_EPS);
            r.iter().map(move |v| v / nrm)
        })
        .collect();
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| normed[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (normed[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / d as f64
}

/// Two views of one image and the matched boxes in each view's pixel
/// coordinates.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub v1: Tensor,
    pub v2: Tensor,
    pub geom1: ViewGeometry,
    pub geom2: ViewGeometry,
    /// Source-space boxes before mapping.
    pub source_boxes: Vec<Box>,
    pub pairs: Vec<(Box, Box)>,
    pub truncated: bool,
    pub resamples: usize,
}

/// Draws a view pair and its matched RoIs. View pairs whose overlap cannot
/// hold a minimum-size box are redrawn up to [`MAX_VIEW_RESAMPLES`] times;
/// `None` means the image is skipped.
pub fn prepare_image<R: RngCore + ?Sized>(
    img: &SyntheticImage,
    cfg: &TrainConfig,
    aug: &AugmentParams,
    rng: &mut R,
) -> Option<PreparedImage> {
    let min = cfg.min_box_side();
    for attempt in 0..MAX_VIEW_RESAMPLES {
        let (v1, geom1) = sample_view(&img.pixels, aug, 0, rng);
        let (v2, geom2) = sample_view(&img.pixels, aug, 1, rng);
        let mut out = PreparedImage {
            v1,
            v2,
            geom1,
            geom2,
            source_boxes: Vec::new(),
            pairs: Vec::new(),
            truncated: false,
            resamples: attempt,
        };
        if cfg.mode == Mode::GlobalByol {
            return Some(out);
        }
        let Some(is) = intersect_views(&geom1, &geom2) else {
            continue;
        };
        let Ok(sample) = sample_rois(&is, cfg.k, cfg.iou_thr, min, min, 100 * cfg.k, rng) else {
            continue;
        };
        let (Ok(bounds1), Ok(bounds2)) = (map_box_to_view(&is.rect, &geom1), map_box_to_view(&is.rect, &geom2)) else {
            continue;
        };
        for b in &sample.boxes {
            let Ok(p) = map_pair(b, &geom1, &geom2) else { continue };
            let b1 = jitter_box(&p.box_v1, cfg.jitter, &bounds1, rng);
            let b2 = jitter_box(&p.box_v2, cfg.jitter, &bounds2, rng);
            out.pairs.push((b1, b2));
            out.source_boxes.push(*b);
        }
        if out.pairs.is_empty() {
            continue;
        }
        out.truncated = sample.truncated;
        return Some(out);
    }
    None
}

/// A batch ready for the forward pass.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub v1: Tensor,
    pub v2: Tensor,
    /// Row `r` of `rois1` and `rois2` is one matched pair.
    pub rois1: Vec<RoiSpec>,
    pub rois2: Vec<RoiSpec>,
    pub images: usize,
    pub skipped: usize,
    pub truncated: usize,
}

pub fn assemble_batch(prepared: Vec<Option<PreparedImage>>, grid: &FeatureGridSpec) -> Result<PreparedBatch> {
    let skipped = prepared.iter().filter(|p| p.is_none()).count();
    let kept: Vec<PreparedImage> = prepared.into_iter().flatten().collect();
    if kept.len() < 2 {
        return Err(Error::BatchTooSmall(kept.len()));
    }
    let stack = |f: &dyn Fn(&PreparedImage) -> &Tensor| -> Result<Tensor> {
        let s = f(&kept[0]).shape().to_vec();
        let mut data = Vec::with_capacity(kept.len() * f(&kept[0]).len());
        for p in &kept {
            data.extend_from_slice(f(p).data());
        }
        Tensor::new(&[kept.len(), s[0], s[1], s[2]], data)
    };
    let mut rois1 = Vec::new();
    let mut rois2 = Vec::new();
    for (i, p) in kept.iter().enumerate() {
        for (b1, b2) in &p.pairs {
            rois1.push(RoiSpec {
                batch_index: i,
                rect: map_box_to_grid(b1, grid),
            });
            rois2.push(RoiSpec {
                batch_index: i,
                rect: map_box_to_grid(b2, grid),
            });
        }
    }
    Ok(PreparedBatch {
        v1: stack(&|p| &p.v1)?,
        v2: stack(&|p| &p.v2)?,
        rois1,
        rois2,
        images: kept.len(),
        skipped,
        truncated: kept.iter().filter(|p| p.truncated).count(),
    })
}

/// Loss, gradients and side products of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub loss_12: f64,
    pub loss_21: f64,
    /// One entry per online parameter; `None` for buffers.
    pub grads: Vec<Option<Tensor>>,
    pub online_bn: Vec<BnUpdate>,
    pub target_bn: Vec<BnUpdate>,
    /// Target projections of both views, stacked.
    pub target_z: Tensor,
    /// Target parameters that received a gradient buffer (always 0).
    pub target_grad_buffers: usize,
}

/// Forward both networks on both views and backpropagate the symmetric loss
/// into the online network. Scrl mode pools the matched RoIs; global mode
/// average-pools the whole map.
pub fn loss_and_grads(pair: &SiamesePair, batch: &PreparedBatch, mode: Mode) -> Result<StepOutput> {
    let mut g = Graph::new();
    let ob = pair.online.bind(&mut g, true);
    let tb = pair.target.bind(&mut g, false);
    let x1 = g.constant(batch.v1.clone());
    let x2 = g.constant(batch.v2.clone());
    let mut online_bn = Vec::new();
    let mut target_bn = Vec::new();
    let f1 = pair.online.forward_spatial(&mut g, &ob, x1, BnMode::Batch, &mut online_bn)?;
    let f2 = pair.online.forward_spatial(&mut g, &ob, x2, BnMode::Batch, &mut online_bn)?;
    let h1 = pair.target.forward_spatial(&mut g, &tb, x1, BnMode::Batch, &mut target_bn)?;
    let h2 = pair.target.forward_spatial(&mut g, &tb, x2, BnMode::Batch, &mut target_bn)?;
    let pool = |g: &mut Graph, f: Var, rois: &[RoiSpec]| match mode {
        Mode::Scrl => g.roi_align_1x1(f, rois, SAMPLING_RATIO),
        Mode::GlobalByol => g.global_avg_pool(f),
    };
    let p1 = pool(&mut g, f1, &batch.rois1)?;
    let p2 = pool(&mut g, f2, &batch.rois2)?;
    let r1 = pool(&mut g, h1, &batch.rois1)?;
    let r2 = pool(&mut g, h2, &batch.rois2)?;
    let (_, q1) = pair.online.project_predict(&mut g, &ob, p1, BnMode::Batch, &mut online_bn)?;
    let (_, q2) = pair.online.project_predict(&mut g, &ob, p2, BnMode::Batch, &mut online_bn)?;
    let (z1, _) = pair.target.project_predict(&mut g, &tb, r1, BnMode::Batch, &mut target_bn)?;
    let (z2, _) = pair.target.project_predict(&mut g, &tb, r2, BnMode::Batch, &mut target_bn)?;
    let (q1, q2) = (
        q1.ok_or_else(|| Error::Shape("online network has no predictor".into()))?,
        q2.ok_or_else(|| Error::Shape("online network has no predictor".into()))?,
    );
    let l12 = scrl_loss(&mut g, q1, z2)?;
    let l21 = scrl_loss(&mut g, q2, z1)?;
    let total = g.add(l12, l21)?;
    let loss = g.value(total).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss} (directions {} / {}), {} rois over {} images",
            g.value(l12).item(),
            g.value(l21).item(),
            batch.rois1.len(),
            batch.images
        )));
    }
    g.backward(total)?;
    let grads = pair
        .online
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| p.trainable.then(|| g.grad_tensor(ob.var(ParamId(i)))))
        .collect();
    let target_grad_buffers = (0..pair.target.params.len())
        .filter(|&i| g.grad(tb.var(ParamId(i))).is_some())
        .count();
    let target_z = Tensor::stack_rows(&[g.value(z1).clone(), g.value(z2).clone()])?;
    Ok(StepOutput {
        loss,
        loss_12: g.value(l12).item(),
        loss_21: g.value(l21).item(),
        grads,
        online_bn,
        target_bn,
        target_z,
        target_grad_buffers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub loss_12: f64,
    pub loss_21: f64,
    pub lr: f64,
    pub tau: f64,
    pub boxes_per_image: f64,
    pub truncated: usize,
    pub skipped: usize,
    pub grad_norm: f64,
    pub embedding_std: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.loss,
            self.loss_12,
            self.loss_21,
            self.lr,
            self.tau,
            self.boxes_per_image,
            self.truncated,
            self.skipped,
            self.grad_norm,
            self.embedding_std
        )
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.trim().split(',').collect();
        if f.len() != 12 {
            return Err(Error::Dataset(format!("metrics row has {} fields: {row:?}", f.len())));
        }
        let p = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Dataset(format!("bad metrics field {:?}", f[i])))
        };
        Ok(StepMetrics {
            step: p(0)? as usize,
            epoch: p(1)? as usize,
            loss: p(2)?,
            loss_12: p(3)?,
            loss_21: p(4)?,
            lr: p(5)?,
            tau: p(6)?,
            boxes_per_image: p(7)?,
            truncated: p(8)? as usize,
            skipped: p(9)? as usize,
            grad_norm: p(10)?,
            embedding_std: p(11)?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(StepMetrics::from_csv_row)
        .collect()
}

/// Augmentation used for pretraining at the configured view size.
pub fn train_augment(cfg: &TrainConfig) -> AugmentParams {
    AugmentParams {
        out_size: cfg.image_size,
        blur_sigma: (config::BLUR_SIGMA_MIN, cfg.blur_sigma_max),
        ..AugmentParams::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub config: String,
    pub encoder: EncoderSpec,
    pub projector: HeadSpec,
    pub predictor: HeadSpec,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub aug: AugmentParams,
    pub pair: SiamesePair,
    pub opt: Optimizer,
    /// Index of the next step to run.
    pub step: usize,
    pub data: Vec<SyntheticImage>,
    grid: FeatureGridSpec,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data = generate_dataset(cfg.dataset_size, &cfg.scene(), cfg.data_seed);
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: TrainConfig, data: Vec<SyntheticImage>) -> Result<Self> {
        cfg.validate()?;
        if data.len() < cfg.batch {
            return Err(Error::Dataset(format!("{} images for batch {}", data.len(), cfg.batch)));
        }
        let pair = SiamesePair::new(cfg.encoder(), cfg.projector(), cfg.predictor(), cfg.seed)?;
        let opt = Optimizer::new(cfg.optimizer, cfg.momentum, cfg.weight_decay, cfg.trust_coeff, &pair.online.params);
        let grid = cfg.encoder().feature_grid()?;
        Ok(Trainer {
            aug: train_augment(&cfg),
            cfg,
            pair,
            opt,
            step: 0,
            data,
            grid,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.steps_per_epoch() * self.cfg.epochs
    }

    /// Dataset indices for `step`: a fresh seeded permutation per epoch, last
    /// partial batch dropped.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let spe = (self.data.len() / self.cfg.batch).max(1);
        let epoch = step / spe;
        let within = step % spe;
        let mut perm: Vec<usize> = (0..self.data.len()).collect();
        perm.shuffle(&mut child_rng(self.cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        perm[within * self.cfg.batch..(within + 1) * self.cfg.batch].to_vec()
    }

    pub fn prepare_batch(&self, step: usize) -> Result<PreparedBatch> {
        let idx = self.batch_indices(step);
        let prepared: Vec<Option<PreparedImage>> = idx
            .par_iter()
            .map(|&i| {
                let mut rng = child_rng(self.cfg.seed, &[STREAM_AUGMENT, step as u64, i as u64]);
                let p = prepare_image(&self.data[i], &self.cfg, &self.aug, &mut rng);
                if p.is_none() {
                    log::warn!("step {step}: image {i} skipped after {MAX_VIEW_RESAMPLES} view resamples");
                }
                p
            })
            .collect();
        assemble_batch(prepared, &self.grid)
    }

    /// One optimization step on the next batch.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let total = self.total_steps();
        let batch = self.prepare_batch(step)?;
        let out = loss_and_grads(&self.pair, &batch, self.cfg.mode)?;
        let lr = lr_schedule(step, total, self.cfg.warmup_steps(), self.cfg.lr0);
        let tau = tau_schedule(step, total, self.cfg.tau0);
        let grad_norm = out
            .grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        self.opt.step(&mut self.pair.online.params, &out.grads, lr)?;
        self.pair.online.apply_bn_updates(&out.online_bn);
        self.pair.target.apply_bn_updates(&out.target_bn);
        self.pair.ema_update(tau)?;
        self.step += 1;
        let rows = batch.rois1.len();
        Ok(StepMetrics {
            step,
            epoch: step / self.cfg.steps_per_epoch().max(1),
            loss: out.loss,
            loss_12: out.loss_12,
            loss_21: out.loss_21,
            lr,
            tau,
            boxes_per_image: rows as f64 / batch.images as f64,
            truncated: batch.truncated,
            skipped: batch.skipped,
            grad_norm,
            embedding_std: normalized_std(&out.target_z),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            step: self.step,
            config: self.cfg.to_text(),
            encoder: self.cfg.encoder(),
            projector: self.cfg.projector(),
            predictor: self.cfg.predictor(),
        };
        let mut records = self.pair.online.records("online.");
        records.extend(self.pair.target.records("target."));
        for (p, v) in self.pair.online.params.iter().zip(&self.opt.velocity) {
            records.push((format!("velocity.{}", p.name), v.clone()));
        }
        Checkpoint {
            meta: serde_json::to_string(&meta).expect("serializable meta"),
            records,
        }
    }

    /// Rebuilds a trainer from a checkpoint, regenerating the dataset from the
    /// stored config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&ck.meta)?;
        let cfg = TrainConfig::parse(&meta.config)?;
        let mut t = Trainer::new(cfg)?;
        t.pair.online.load_records(&ck.records, "online.")?;
        t.pair.target.load_records(&ck.records, "target.")?;
        for (p, v) in t.pair.online.params.iter().zip(t.opt.velocity.iter_mut()) {
            let key = format!("velocity.{}", p.name);
            *v = ck
                .get(&key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing record {key}")))?;
        }
        t.step = meta.step;
        Ok(t)
    }

    /// Runs until the schedule ends, `stop` is raised, or `limit` steps have
    /// been taken in this call. Writes `metrics.csv`, `run.json` and
    /// checkpoints into `out`.
    pub fn run(&mut self, out: &Path, stop: &AtomicBool, limit: Option<usize>) -> Result<RunSummary> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let started = unix_now();
        let metrics_path = out.join("metrics.csv");
        let mut text = format!("{METRICS_HEADER}\n");
        if self.step > 0 && metrics_path.exists() {
            for m in read_metrics(&metrics_path)? {
                if m.step < self.step {
                    text.push_str(&m.csv_row());
                    text.push('\n');
                }
            }
        }
        write_atomic(&metrics_path, text.as_bytes())?;
        let mut manifest = RunManifest {
            config: self.cfg.to_text(),
            seed: self.cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: started,
            finished_unix: None,
            status: "running".into(),
            steps_completed: self.step,
            total_steps: self.total_steps(),
            final_loss: None,
            checkpoint: None,
            checkpoint_hash: None,
        };
        manifest.write(out)?;
        let mut csv = fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        let total = self.total_steps();
        let mut taken = 0;
        let mut last_loss = None;
        let mut interrupted = false;
        while self.step < total {
            if stop.load(Ordering::SeqCst) || limit.is_some_and(|l| taken >= l) {
                interrupted = true;
                break;
            }
            let m = self.train_step()?;
            writeln!(csv, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
            taken += 1;
            last_loss = Some(m.loss);
            if self.cfg.log_every > 0 && (m.step % self.cfg.log_every == 0 || self.step == total) {
                log::info!(
                    "step {}/{} loss {:.4} lr {:.4} tau {:.4} boxes {:.2} std {:.4}",
                    m.step + 1,
                    total,
                    m.loss,
                    m.lr,
                    m.tau,
                    m.boxes_per_image,
                    m.embedding_std
                );
            }
            if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 && self.step < total {
                self.checkpoint()
                    .save(&out.join(format!("checkpoint_{:06}.bin", self.step)))?;
            }
        }
        csv.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let ck = self.checkpoint();
        let bytes = ck.to_bytes();
        let ck_path = out.join("checkpoint.bin");
        write_atomic(&ck_path, &bytes)?;
        manifest.finished_unix = Some(unix_now());
        manifest.status = if interrupted { "interrupted" } else { "complete" }.into();
        manifest.steps_completed = self.step;
        manifest.final_loss = last_loss;
        manifest.checkpoint = Some("checkpoint.bin".into());
        manifest.checkpoint_hash = Some(format!("{:016x}", fnv1a(&bytes)));
        manifest.write(out)?;
        Ok(RunSummary {
            steps: self.step,
            final_loss: last_loss,
            interrupted,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub interrupted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: String,
    pub seed: u64,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub steps_completed: usize,
    pub total_steps: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: Option<String>,
    pub checkpoint_hash: Option<String>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&dir.join("run.json"), text.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join("run.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x100000001b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn rows(v: &[[f64; 3]]) -> Tensor {
        Tensor::new(&[v.len(), 3], v.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn loss_identities() {
        let a = rows(&[[1.0, 2.0, 3.0], [-0.5, 0.1, 4.0]]);
        assert!(scrl_loss_value(&a, &a).unwrap().abs() < 1e-15);
        let neg = rows(&[[-1.0, -2.0, -3.0], [0.5, -0.1, -4.0]]);
        assert!((scrl_loss_value(&a, &neg).unwrap() - 4.0).abs() < 1e-12);
        let x = rows(&[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0]]);
        let y = rows(&[[0.0, 2.0, 0.0], [0.0, 0.0, 0.5]]);
        assert!((scrl_loss_value(&x, &y).unwrap() - 2.0).abs() < 1e-12);
        // Scale invariance of each side.
        let a2 = rows(&[[2.0, 4.0, 6.0], [-5.0, 1.0, 40.0]]);
        assert!(scrl_loss_value(&a, &a2).unwrap().abs() < 1e-12);
        assert!(scrl_loss_value(&a, &rows(&[[1.0, 2.0, 3.0]])).is_err());
    }

    #[test]
    fn symmetrized_swaps_cleanly() {
        let mut r = seeded(3);
        let t = |r: &mut crate::rng::Rng| {
            use rand::Rng;
            Tensor::new(&[4, 5], (0..20).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let (q1, z2, q2, z1) = (t(&mut r), t(&mut r), t(&mut r), t(&mut r));
        let value = |a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor| {
            let mut g = Graph::new();
            let vs: Vec<Var> = [a, b, c, d].iter().map(|x| g.constant((*x).clone())).collect();
            let l = symmetrized_loss(&mut g, vs[0], vs[1], vs[2], vs[3]).unwrap();
            g.value(l).item()
        };
        let fwd = value(&q1, &z2, &q2, &z1);
        let swapped = value(&q2, &z1, &q1, &z2);
        assert!((fwd - swapped).abs() <= 1e-12);
        assert!((0.0..=8.0).contains(&fwd));
    }

    #[test]
    fn schedule_boundaries() {
        assert_eq!(lr_schedule(0, 100, 10, 0.3), 0.0);
        assert!((lr_schedule(10, 100, 10, 0.3) - 0.3).abs() < 1e-15);
        assert!(lr_schedule(100, 100, 10, 0.3).abs() < 1e-15);
        assert!((lr_schedule(5, 100, 10, 0.3) - 0.15).abs() < 1e-15);
        assert!((tau_schedule(0, 100, 0.97) - 0.97).abs() < 1e-15);
        assert!((tau_schedule(100, 100, 0.97) - 1.0).abs() < 1e-15);
        assert!((tau_schedule(50, 100, 0.97) - 0.985).abs() < 1e-12);
        let mut prev = 0.0;
        for s in 0..=100 {
            let t = tau_schedule(s, 100, 0.97);
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn normalized_std_extremes() {
        let same = rows(&[[1.0, 2.0, 2.0], [1.0, 2.0, 2.0], [2.0, 4.0, 4.0]]);
        assert!(normalized_std(&same) < 1e-15);
        let spread = rows(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        assert!((normalized_std(&spread) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_row_round_trip() {
        let m = StepMetrics {
            step: 3,
            epoch: 0,
            loss: 1.25,
            loss_12: 0.5,
            loss_21: 0.75,
            lr: 0.01,
            tau: 0.99,
            boxes_per_image: 9.5,
            truncated: 1,
            skipped: 0,
            grad_norm: 0.3,
            embedding_std: 0.1,
        };
        assert_eq!(METRICS_HEADER.split(',').count(), 12);
        assert_eq!(StepMetrics::from_csv_row(&m.csv_row()).unwrap(), m);
    }
}
