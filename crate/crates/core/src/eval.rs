//! Linear probes on frozen backbones, collapse diagnostics and ablation
//! tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{generate_dataset, SceneConfig, SyntheticImage, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::{map_box_to_grid, FeatureGridSpec};
use crate::model::{BnMode, Head, Network};
use crate::rng::{child_rng, STREAM_EVAL};
use crate::tensor::serialize::Checkpoint;
use crate::tensor::{Graph, RoiSpec, Tensor};
use crate::trainer::{lr_schedule, read_metrics, CheckpointMeta, RunManifest, TrainConfig, SAMPLING_RATIO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Roi,
    Global,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "roi" => Ok(Protocol::Roi),
            "global" => Ok(Protocol::Global),
            _ => Err(Error::Config(format!("protocol must be roi or global, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub train_images: usize,
    pub test_images: usize,
    pub data_seed: u64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            train_images: 1000,
            test_images: 500,
            data_seed: 1_000_003,
            epochs: 20,
            warmup_epochs: 1,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch: 128,
            seed: 0,
        }
    }
}

impl EvalConfig {
    /// Disjoint train and test scenes, distinct from any pretraining data
    /// that uses a different data seed.
    pub fn datasets(&self, scene: &SceneConfig) -> (Vec<SyntheticImage>, Vec<SyntheticImage>) {
        let all = generate_dataset(self.train_images + self.test_images, scene, self.data_seed);
        let test = all[self.train_images..].to_vec();
        let mut train = all;
        train.truncate(self.train_images);
        (train, test)
    }
}

/// A frozen feature extractor producing `[N, C, fh, fw]` maps.
pub trait Backbone {
    fn grid(&self) -> FeatureGridSpec;
    /// Called once with the probe's training images before features are
    /// extracted (batch-norm re-tracking for real networks).
    fn prepare(&mut self, _train: &[SyntheticImage]) -> Result<()> {
        Ok(())
    }
    fn feature_maps(&self, pixels: &Tensor) -> Result<Tensor>;
    fn param_hash(&self) -> u64;
}

/// The encoder of a network, evaluated with running batch-norm statistics.
pub struct NetworkBackbone {
    pub net: Network,
    pub retrack_batch: usize,
}

impl NetworkBackbone {
    pub fn new(net: Network) -> Self {
        NetworkBackbone { net, retrack_batch: 64 }
    }
}

fn stack_pixels(images: &[SyntheticImage]) -> Result<Tensor> {
    let s = images[0].pixels.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].pixels.len());
    for im in images {
        if im.pixels.shape() != s.as_slice() {
            return Err(Error::Shape("images in a batch must share a size".into()));
        }
        data.extend_from_slice(im.pixels.data());
    }
    Tensor::new(&[images.len(), s[0], s[1], s[2]], data)
}

impl Backbone for NetworkBackbone {
    fn grid(&self) -> FeatureGridSpec {
        self.net.feature_grid()
    }

    /// Resets running statistics and re-estimates them as the plain average
    /// of per-batch statistics over the training images.
    fn prepare(&mut self, train: &[SyntheticImage]) -> Result<()> {
        self.net.reset_running_stats();
        for (k, chunk) in train.chunks(self.retrack_batch).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (_, updates) = self.net.features(stack_pixels(chunk)?, BnMode::Batch)?;
            self.net.apply_bn_updates_with(&updates, 1.0 / (k + 1) as f64);
        }
        Ok(())
    }

    fn feature_maps(&self, pixels: &Tensor) -> Result<Tensor> {
        Ok(self.net.features(pixels.clone(), BnMode::Running)?.0)
    }

    fn param_hash(&self) -> u64 {
        self.net.params.content_hash()
    }
}

/// Pooled features and labels: one row per GT box (roi) or per image (global).
pub fn extract_features(
    backbone: &dyn Backbone,
    images: &[SyntheticImage],
    protocol: Protocol,
    chunk: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let grid = backbone.grid();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for part in images.chunks(chunk.max(1)) {
        let maps = backbone.feature_maps(&stack_pixels(part)?)?;
        let mut g = Graph::new();
        let f = g.constant(maps);
        let pooled = match protocol {
            Protocol::Roi => {
                let mut rois = Vec::new();
                for (i, im) in part.iter().enumerate() {
                    if im.gt.is_empty() {
                        return Err(Error::Dataset("image without ground-truth boxes".into()));
                    }
                    for o in &im.gt {
                        rois.push(RoiSpec {
                            batch_index: i,
                            rect: map_box_to_grid(&o.rect, &grid),
                        });
                        labels.push(o.class_id);
                    }
                }
                g.roi_align_1x1(f, &rois, SAMPLING_RATIO)?
            }
            Protocol::Global => {
                for im in part {
                    labels.push(global_label(im)?);
                }
                g.global_avg_pool(f)?
            }
        };
        rows.push(g.value(pooled).clone());
    }
    if rows.is_empty() {
        return Err(Error::Dataset("no images to evaluate".into()));
    }
    Ok((Tensor::stack_rows(&rows)?, labels))
}

/// Image-level label: class of the largest object.
pub fn global_label(img: &SyntheticImage) -> Result<usize> {
    img.gt
        .iter()
        .max_by(|a, b| a.rect.area().total_cmp(&b.rect.area()))
        .map(|o| o.class_id)
        .ok_or_else(|| Error::Dataset("image without ground-truth boxes".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub checkpoint: String,
    pub frozen: bool,
    pub train_rows: usize,
    pub test_rows: usize,
    pub backbone_hash: String,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let per: Vec<String> = self
            .per_class_accuracy
            .iter()
            .enumerate()
            .map(|(c, a)| match a {
                Some(a) => format!("class {c}: {:.1}%", 100.0 * a),
                None => format!("class {c}: n/a"),
            })
            .collect();
        format!(
            "{:?} linear eval on {}: top-1 {:.2}% ({} test rows; train {:.2}%)\n  {}",
            self.protocol,
            self.checkpoint,
            100.0 * self.accuracy,
            self.test_rows,
            100.0 * self.train_accuracy,
            per.join(", ")
        )
    }
}

/// Multinomial logistic regression trained with SGD-momentum and a cosine
/// schedule. Features are standardized with training-set statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weight: Tensor,
    pub bias: Tensor,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(x: &Tensor, y: &[usize], classes: usize, cfg: &EvalConfig) -> Result<Self> {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        if n == 0 || y.len() != n {
            return Err(Error::Dataset(format!("{n} feature rows for {} labels", y.len())));
        }
        let mut mean = vec![0.0; d];
        for r in x.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for r in x.data().chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + 1e-8).sqrt()).collect();
        let mut probe = LinearProbe {
            weight: Tensor::zeros(&[classes, d]),
            bias: Tensor::zeros(&[classes]),
            mean,
            inv_std,
        };
        let xs = probe.standardize(x);
        let mut vw = Tensor::zeros(&[classes, d]);
        let mut vb = Tensor::zeros(&[classes]);
        let steps_per_epoch = n.div_ceil(cfg.batch);
        let total = steps_per_epoch * cfg.epochs;
        let warmup = steps_per_epoch * cfg.warmup_epochs;
        let mut order: Vec<usize> = (0..n).collect();
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut child_rng(cfg.seed, &[STREAM_EVAL, epoch as u64]));
            for idx in order.chunks(cfg.batch) {
                let lr = lr_schedule(step, total, warmup, cfg.lr);
                step += 1;
                let xb = Tensor::new(
                    &[idx.len(), d],
                    idx.iter().flat_map(|&i| xs.data()[i * d..(i + 1) * d].iter().copied()).collect(),
                )?;
                let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
                let mut g = Graph::new();
                let xv = g.constant(xb);
                let wv = g.param(probe.weight.clone());
                let bv = g.param(probe.bias.clone());
                let logits = g.linear(xv, wv, Some(bv))?;
                let loss = g.softmax_cross_entropy(logits, &yb)?;
                if !g.value(loss).item().is_finite() {
                    return Err(Error::NonFinite("linear probe loss".into()));
                }
                g.backward(loss)?;
                let gw = g.grad_tensor(wv);
                let gb = g.grad_tensor(bv);
                for ((w, gi), v) in probe.weight.data_mut().iter_mut().zip(gw.data()).zip(vw.data_mut()) {
                    *v = cfg.momentum * *v + lr * (gi + cfg.weight_decay * *w);
                    *w -= *v;
                }
                for ((b, gi), v) in probe.bias.data_mut().iter_mut().zip(gb.data()).zip(vb.data_mut()) {
                    *v = cfg.momentum * *v + lr * gi;
                    *b -= *v;
                }
            }
        }
        Ok(probe)
    }

    fn standardize(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let data = x
            .data()
            .chunks(d)
            .flat_map(|r| {
                r.iter()
                    .zip(&self.mean)
                    .zip(&self.inv_std)
                    .map(|((v, m), s)| (v - m) * s)
            })
            .collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let xs = self.standardize(x);
        let d = self.mean.len();
        let classes = self.bias.len();
        xs.data()
            .chunks(d)
            .map(|r| {
                (0..classes)
                    .map(|c| {
                        let w = &self.weight.data()[c * d..(c + 1) * d];
                        self.bias.data()[c] + w.iter().zip(r).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map_or(0, |(c, _)| c)
            })
            .collect()
    }
}

fn accuracy(pred: &[usize], y: &[usize], classes: usize) -> (f64, Vec<Option<f64>>) {
    let mut hit = vec![0usize; classes];
    let mut cnt = vec![0usize; classes];
    for (p, t) in pred.iter().zip(y) {
        cnt[*t] += 1;
        if p == t {
            hit[*t] += 1;
        }
    }
    let total: usize = hit.iter().sum();
    let per = hit
        .iter()
        .zip(&cnt)
        .map(|(h, c)| (*c > 0).then(|| *h as f64 / *c as f64))
        .collect();
    (total as f64 / pred.len().max(1) as f64, per)
}

/// Frozen-backbone linear probe. The backbone is prepared on the training
/// images, features are pooled once, and a single linear layer is trained on
/// them with cross-entropy.
pub fn linear_eval(
    backbone: &mut dyn Backbone,
    train: &[SyntheticImage],
    test: &[SyntheticImage],
    protocol: Protocol,
    cfg: &EvalConfig,
    checkpoint: &str,
) -> Result<EvalReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Dataset("linear eval needs training and test images".into()));
    }
    backbone.prepare(train)?;
    let hash_before = backbone.param_hash();
    let (xtr, ytr) = extract_features(backbone, train, protocol, 64)?;
    let (xte, yte) = extract_features(backbone, test, protocol, 64)?;
    let probe = LinearProbe::fit(&xtr, &ytr, NUM_CLASSES, cfg)?;
    if backbone.param_hash() != hash_before {
        return Err(Error::Checkpoint("backbone changed during linear eval".into()));
    }
    let (train_accuracy, _) = accuracy(&probe.predict(&xtr), &ytr, NUM_CLASSES);
    let (acc, per) = accuracy(&probe.predict(&xte), &yte, NUM_CLASSES);
    Ok(EvalReport {
        protocol,
        accuracy: acc,
        train_accuracy,
        per_class_accuracy: per,
        checkpoint: checkpoint.to_string(),
        frozen: true,
        train_rows: ytr.len(),
        test_rows: yte.len(),
        backbone_hash: format!("{hash_before:016x}"),
    })
}

pub fn roi_linear_eval(
    backbone: &mut dyn Backbone,
    train: &[SyntheticImage],
    test: &[SyntheticImage],
    cfg: &EvalConfig,
    checkpoint: &str,
) -> Result<EvalReport> {
    linear_eval(backbone, train, test, Protocol::Roi, cfg, checkpoint)
}

pub fn global_linear_eval(
    backbone: &mut dyn Backbone,
    train: &[SyntheticImage],
    test: &[SyntheticImage],
    cfg: &EvalConfig,
    checkpoint: &str,
) -> Result<EvalReport> {
    linear_eval(backbone, train, test, Protocol::Global, cfg, checkpoint)
}

/// Online network stored in a training checkpoint.
pub fn load_online(ck: &Checkpoint) -> Result<(Network, TrainConfig)> {
    let meta: CheckpointMeta = serde_json::from_str(&ck.meta)?;
    let cfg = TrainConfig::parse(&meta.config)?;
    let mut net = Network::zeroed(meta.encoder, meta.projector, Some(meta.predictor))?;
    net.load_records(&ck.records, "online.")?;
    Ok((net, cfg))
}

/// Loads a checkpoint and runs the probe on freshly generated scenes of the
/// same size as the pretraining data.
pub fn eval_checkpoint(path: &Path, protocol: Protocol, cfg: &EvalConfig) -> Result<EvalReport> {
    let ck = Checkpoint::load(path)?;
    let (net, tcfg) = load_online(&ck)?;
    let (train, test) = cfg.datasets(&tcfg.scene());
    let id = format!("{}#{:016x}", path.display(), crate::trainer::fnv1a(&ck.to_bytes()));
    linear_eval(&mut NetworkBackbone::new(net), &train, &test, protocol, cfg, &id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    /// Mean over dimensions of the per-dimension std of normalized projections.
    pub std: f64,
    pub mean_cosine: f64,
    /// Pairwise cosine counts over `[-1, 1]` in equal bins.
    pub histogram: Vec<usize>,
    pub rows: usize,
}

/// Statistics of a set of embedding rows.
pub fn embedding_stats(rows: &Tensor, bins: usize) -> CollapseReport {
    let (n, d) = (rows.shape()[0], rows.shape()[1]);
    let normed: Vec<Vec<f64>> = rows
        .data()
        .chunks(d)
        .map(|r| {
            let nrm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::tensor::L2_EPS);
            r.iter().map(|v| v / nrm).collect()
        })
        .collect();
    let nb = bins.max(1);
    let mut hist = vec![0usize; nb];
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let c: f64 = normed[i].iter().zip(&normed[j]).map(|(a, b)| a * b).sum();
            sum += c;
            pairs += 1;
            let b = (((c.clamp(-1.0, 1.0) + 1.0) / 2.0) * nb as f64) as usize;
            hist[b.min(nb - 1)] += 1;
        }
    }
    CollapseReport {
        std: crate::trainer::normalized_std(rows),
        mean_cosine: if pairs > 0 { sum / pairs as f64 } else { 1.0 },
        histogram: hist,
        rows: n,
    }
}

/// Projections of GT-box features through `net`'s projector, with batch
/// statistics as in pretraining.
pub fn collapse_probe(net: &Network, images: &[SyntheticImage], chunk: usize) -> Result<CollapseReport> {
    let grid = net.feature_grid();
    let mut out = Vec::new();
    for part in images.chunks(chunk.max(2)) {
        if part.len() < 2 {
            continue;
        }
        let mut g = Graph::new();
        let b = net.bind(&mut g, false);
        let x = g.constant(stack_pixels(part)?);
        let mut ups = Vec::new();
        let f = net.forward_spatial(&mut g, &b, x, BnMode::Batch, &mut ups)?;
        let rois: Vec<RoiSpec> = part
            .iter()
            .enumerate()
            .flat_map(|(i, im)| {
                im.gt.iter().map(move |o| RoiSpec {
                    batch_index: i,
                    rect: map_box_to_grid(&o.rect, &grid),
                })
            })
            .collect();
        let p = g.roi_align_1x1(f, &rois, SAMPLING_RATIO)?;
        let z = net.head(Head::Projector, &mut g, &b, p, BnMode::Batch, &mut ups)?;
        out.push(g.value(z).clone());
    }
    if out.is_empty() {
        return Err(Error::Dataset("collapse probe needs at least two images".into()));
    }
    Ok(embedding_stats(&Tensor::stack_rows(&out)?, 20))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub run: String,
    /// Config keys whose values differ from the defaults.
    pub deltas: BTreeMap<String, String>,
    pub roi_accuracy: Option<f64>,
    pub global_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub downstream: Option<f64>,
}

impl AblationRow {
    pub fn key(&self) -> String {
        if self.deltas.is_empty() {
            return "(defaults)".into();
        }
        self.deltas
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn config_deltas(cfg: &TrainConfig) -> BTreeMap<String, String> {
    let base = TrainConfig::default().to_text();
    let base: BTreeMap<&str, &str> = base.lines().filter_map(|l| l.split_once(" = ")).collect();
    cfg.to_text()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .filter(|(k, v)| base.get(k) != Some(v))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Reads a run directory. Accuracies come from `eval_roi.json` /
/// `eval_global.json` when present, otherwise they are computed with `eval`
/// (when given).
pub fn collect_row(dir: &Path, eval: Option<&EvalConfig>) -> Result<AblationRow> {
    let manifest = RunManifest::read(dir)?;
    let cfg = TrainConfig::parse(&manifest.config)?;
    let ck_path = dir.join(manifest.checkpoint.as_deref().unwrap_or("checkpoint.bin"));
    let acc = |p: Protocol, file: &str| -> Result<Option<f64>> {
        let cached = dir.join(file);
        if cached.exists() {
            let text = std::fs::read_to_string(&cached).map_err(|e| Error::io(&cached, e))?;
            let r: EvalReport = serde_json::from_str(&text)?;
            return Ok(Some(r.accuracy));
        }
        match eval {
            Some(e) => Ok(Some(eval_checkpoint(&ck_path, p, e)?.accuracy)),
            None => Ok(None),
        }
    };
    let roi = acc(Protocol::Roi, "eval_roi.json")?;
    let global = acc(Protocol::Global, "eval_global.json")?;
    Ok(AblationRow {
        run: dir.display().to_string(),
        deltas: config_deltas(&cfg),
        roi_accuracy: roi,
        global_accuracy: global,
        final_loss: manifest.final_loss,
        downstream: None,
    })
}

/// Spearman rank correlation with average ranks for ties; `None` when fewer
/// than two pairs or a constant column.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub markdown: String,
    pub csv: String,
    pub rank_correlation: Option<f64>,
}

fn cell(v: Option<f64>, pct: bool) -> String {
    match v {
        Some(x) if pct => format!("{:.2}", 100.0 * x),
        Some(x) => format!("{x:.4}"),
        None => "-".into(),
    }
}

/// Table sorted by config key (then run path). The rank correlation is taken
/// between RoI accuracy and the downstream column over rows that have both.
pub fn ablation_report(mut rows: Vec<AblationRow>) -> AblationReport {
    rows.sort_by(|a, b| a.key().cmp(&b.key()).then_with(|| a.run.cmp(&b.run)));
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| Some((r.roi_accuracy?, r.downstream?)))
        .unzip();
    let rank_correlation = spearman(&xs, &ys);
    let mut md = String::from("| run | config | roi acc (%) | global acc (%) | final loss | downstream |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    let mut csv = String::from("run,config,roi_accuracy,global_accuracy,final_loss,downstream\n");
    for r in &rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.run,
            r.key(),
            cell(r.roi_accuracy, true),
            cell(r.global_accuracy, true),
            cell(r.final_loss, false),
            cell(r.downstream, false)
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let _ = writeln!(
            csv,
            "{},\"{}\",{},{},{},{}",
            r.run,
            r.key(),
            opt(r.roi_accuracy),
            opt(r.global_accuracy),
            opt(r.final_loss),
            opt(r.downstream)
        );
    }
    if let Some(rho) = rank_correlation {
        let _ = writeln!(md, "\nSpearman rank correlation (roi acc vs downstream): {rho:.4}");
    }
    AblationReport {
        rows,
        markdown: md,
        csv,
        rank_correlation,
    }
}

/// Reads `run,value` lines (header optional) into a map keyed by run path.
pub fn read_downstream(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let Some((run, v)) = line.rsplit_once(',') else { continue };
        if let Ok(x) = v.trim().parse::<f64>() {
            out.insert(run.trim().to_string(), x);
        }
    }
    Ok(out)
}

/// Loss curves of the runs, for plotting.
pub fn loss_curves(dirs: &[PathBuf]) -> Vec<(String, Vec<f64>)> {
    dirs.iter()
        .filter_map(|d| {
            let m = read_metrics(&d.join("metrics.csv")).ok()?;
            Some((d.display().to_string(), m.iter().map(|s| s.loss).collect()))
        })
        .collect()
}
