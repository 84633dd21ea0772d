//! Optimization at desk scale: SGD with Nesterov momentum, weight decay,
//! warmup + cosine schedule, smoothed cross entropy, and evaluation.
//!
//! The training loop is single-threaded and bit-reproducible: shuffles and
//! augmentations come from one named stream advanced in a fixed order, and
//! gradient accumulation order is fixed by the tape.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::arch::{build_network, ForwardOpts, Network, NetworkSpec, ParamEntry};
use crate::checkpoint::{Checkpoint, CheckpointMeta, Normalization};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::rng::Rng;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Training hyperparameters (desk-scale defaults; paper-scale values are a
/// config edit away: 200 epochs, batch 64, 10 warmup epochs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub label_smoothing: f64,
    /// Random crop after 4-pixel zero padding.
    pub pad_crop: bool,
    /// Horizontal flip. Off by default: flipping maps 45-degree gratings
    /// onto 135-degree ones, which collapses oriented classes.
    pub hflip: bool,
    /// Evaluation batch size.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 3,
            label_smoothing: 0.1,
            pad_crop: true,
            hflip: false,
            eval_batch: 64,
        }
    }
}

/// Warmup + cosine learning rate for a normalized time `t` in `[0, 1]`:
/// linear ramp `0 -> lr0` on `[0, w)`, then
/// `lr0 * 0.5 (1 + cos(pi (t - w) / (1 - w)))` down to zero.
pub fn lr_schedule(t: f64, warmup_frac: f64, lr0: f64) -> f64 {
    debug_assert!((0.0..1.0).contains(&warmup_frac));
    let t = t.clamp(0.0, 1.0);
    if t < warmup_frac {
        lr0 * t / warmup_frac
    } else {
        let progress = (t - warmup_frac) / (1.0 - warmup_frac);
        lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// SGD with Nesterov momentum and selective weight decay.
pub struct SgdNesterov {
    momentum: f64,
    weight_decay: f64,
    velocities: Vec<Vec<f32>>,
}

impl SgdNesterov {
    pub fn new(params: &[ParamEntry<f32>], momentum: f64, weight_decay: f64) -> Self {
        SgdNesterov {
            momentum,
            weight_decay,
            velocities: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    /// One update: `g' = grad + wd * p` (decayed kinds only),
    /// `v <- mu v + g'`, `p <- p - lr (g' + mu v)`. Gradients are consumed.
    pub fn step(&mut self, params: &[ParamEntry<f32>], lr: f64) -> Result<()> {
        let mu = self.momentum as f32;
        let lr = lr as f32;
        for (entry, velocity) in params.iter().zip(&mut self.velocities) {
            let grad = entry
                .tensor
                .grad()
                .ok_or_else(|| Error::NoGrad(entry.name.clone()))?;
            let wd = if entry.kind.decays() {
                self.weight_decay as f32
            } else {
                0.0
            };
            let mut values = entry.tensor.data_mut();
            for ((p, v), g) in values.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                let g_eff = g + wd * *p;
                *v = mu * *v + g_eff;
                *p -= lr * (g_eff + mu * *v);
            }
            drop(values);
            entry.tensor.zero_grad();
        }
        Ok(())
    }

    /// Velocity buffers as named tensors for checkpointing.
    pub fn state_tensors(&self, params: &[ParamEntry<f32>]) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        params
            .iter()
            .zip(&self.velocities)
            .map(|(p, v)| {
                (
                    format!("optim.velocity.{}", p.name),
                    p.tensor.shape().to_vec(),
                    v.clone(),
                )
            })
            .collect()
    }
}

// ── dataset plumbing ─────────────────────────────────────────────────

/// Per-channel mean/std over the training split.
pub fn compute_normalization(dataset: &Dataset) -> Normalization {
    // Grayscale replicated to RGB: all three channels share the statistics.
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut count = 0usize;
    for sample in &dataset.train {
        for &v in &sample.pixels {
            sum += v as f64;
            sum_sq += (v as f64) * (v as f64);
            count += 1;
        }
    }
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    let var = if count > 0 { (sum_sq / count as f64 - mean * mean).max(0.0) } else { 1.0 };
    let std = var.sqrt().max(1e-8);
    Normalization {
        mean: [mean as f32; 3],
        std: [std as f32; 3],
    }
}

fn normalize_into(rgb: &[f32], norm: &Normalization, out: &mut Vec<f32>) {
    let hw = rgb.len() / 3;
    for ch in 0..3 {
        let (m, s) = (norm.mean[ch], norm.std[ch]);
        out.extend(rgb[ch * hw..(ch + 1) * hw].iter().map(|&v| (v - m) / s));
    }
}

/// Zero-pads by 4 pixels and crops at `(dy, dx)`; `flip` mirrors columns.
fn pad_crop_flip(gray: &[f32], size: usize, dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    const PAD: usize = 4;
    let padded = size + 2 * PAD;
    let mut out = vec![0.0f32; size * size];
    for y in 0..size {
        let src_y = y + dy;
        for x in 0..size {
            let src_x = if flip { size - 1 - x } else { x } + dx;
            let (py, px) = (src_y, src_x);
            // Source coordinates in the padded frame; outside the original
            // image they read zero.
            let iy = py as isize - PAD as isize;
            let ix = px as isize - PAD as isize;
            out[y * size + x] = if iy >= 0 && iy < size as isize && ix >= 0 && ix < size as isize {
                gray[iy as usize * size + ix as usize]
            } else {
                0.0
            };
        }
    }
    debug_assert!(dy <= padded - size && dx <= padded - size);
    out
}

// ── train loop ───────────────────────────────────────────────────────

/// One epoch of the report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub lr: f64,
    pub gates: Vec<f64>,
    pub wall_secs: f64,
}

/// Per-epoch training metrics plus the best-epoch summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
}

impl TrainReport {
    /// CSV with one row per epoch; gates are semicolon-joined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_accuracy,test_accuracy,lr,gates,wall_secs\n");
        for r in &self.rows {
            let gates = r
                .gates
                .iter()
                .map(|g| format!("{g:.6}"))
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{},{:.3}\n",
                r.epoch, r.train_loss, r.train_accuracy, r.test_accuracy, r.lr, gates, r.wall_secs
            ));
        }
        out
    }
}

/// Everything `train` produces: the report plus best/final checkpoints.
pub struct TrainResult {
    pub report: TrainReport,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

fn batch_tensor(
    samples: &[(&Vec<f32>, usize)],
    image_size: usize,
) -> (Tensor<f32>, Vec<usize>) {
    let n = samples.len();
    let hw = image_size * image_size;
    let mut data = Vec::with_capacity(n * 3 * hw);
    let mut labels = Vec::with_capacity(n);
    for (rgb, label) in samples {
        data.extend_from_slice(rgb);
        labels.push(*label);
    }
    (
        Tensor::from_vec(&[n, 3, image_size, image_size], data).expect("batch shape"),
        labels,
    )
}

fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains a network built from `spec` on `dataset`. Deterministic for a
/// fixed seed; aborts with a divergence error when the loss goes non-finite.
pub fn train(
    spec: &NetworkSpec,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainResult> {
    if spec.num_classes != dataset.num_classes() {
        return Err(Error::Classes(format!(
            "network has {} classes, dataset {}",
            spec.num_classes,
            dataset.num_classes()
        )));
    }
    let image_size = dataset.spec.image_size;
    let net = build_network::<f32>(spec, seed)?;
    let params = net.parameters();
    let mut optim = SgdNesterov::new(&params, cfg.momentum, cfg.weight_decay);
    let norm = compute_normalization(dataset);
    let mut train_rng = Rng::stream(seed, "train");

    // Pre-normalized test tensors are reused every epoch.
    let test_set: Vec<(Vec<f32>, usize)> = dataset
        .test
        .iter()
        .map(|s| {
            let mut rgb = Vec::with_capacity(3 * s.pixels.len());
            normalize_into(&s.to_rgb(), &norm, &mut rgb);
            (rgb, s.label)
        })
        .collect();

    let steps_per_epoch = dataset.train.len().div_ceil(cfg.batch_size).max(1);
    let warmup_frac = if cfg.epochs > 0 {
        (cfg.warmup_epochs as f64 / cfg.epochs as f64).min(0.999)
    } else {
        0.0
    };

    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        train_rng.shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut lr_now = 0.0f64;

        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Augment + normalize the batch.
            let mut batch_data: Vec<Vec<f32>> = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let sample = &dataset.train[idx];
                let gray = if cfg.pad_crop || cfg.hflip {
                    let (dy, dx) = if cfg.pad_crop {
                        (train_rng.below(9), train_rng.below(9))
                    } else {
                        (4, 4)
                    };
                    let flip = cfg.hflip && train_rng.uniform() < 0.5;
                    pad_crop_flip(&sample.pixels, image_size, dy, dx, flip)
                } else {
                    sample.pixels.clone()
                };
                let mut rgb = Vec::with_capacity(3 * gray.len());
                for _ in 0..3 {
                    rgb.extend_from_slice(&gray);
                }
                let mut normalized = Vec::with_capacity(rgb.len());
                normalize_into(&rgb, &norm, &mut normalized);
                batch_data.push(normalized);
                labels.push(sample.label);
            }
            let refs: Vec<(&Vec<f32>, usize)> =
                batch_data.iter().zip(labels.iter().copied()).collect();
            let (x, labels) = batch_tensor(&refs, image_size);

            let tape = Tape::new();
            let logits = net.forward(
                &tape,
                &x,
                ForwardOpts {
                    training: true,
                    zero_interactions: false,
                },
            )?;
            let loss = ops::cross_entropy_smoothed(&tape, &logits, &labels, cfg.label_smoothing)?;
            let loss_value = loss.data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Divergence { step: global_step });
            }
            {
                let ld = logits.data();
                let k = spec.num_classes;
                for (row, &label) in labels.iter().enumerate() {
                    if argmax_row(&ld[row * k..(row + 1) * k]) == label {
                        correct += 1;
                    }
                }
            }
            loss_sum += loss_value * labels.len() as f64;
            seen += labels.len();

            tape.backward(&loss)?;
            let t = (epoch as f64 + step as f64 / steps_per_epoch as f64) / cfg.epochs as f64;
            lr_now = lr_schedule(t, warmup_frac, cfg.lr);
            optim.step(&params, lr_now)?;
            global_step += 1;
        }

        let eval = evaluate_normalized(&net, &test_set, image_size, cfg.eval_batch)?;
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            test_accuracy: eval.accuracy,
            lr: lr_now,
            gates: net.gates(),
            wall_secs: started.elapsed().as_secs_f64(),
        };

        let improved = best
            .as_ref()
            .map(|(_, acc, _)| eval.accuracy > *acc)
            .unwrap_or(true);
        if improved {
            let meta = CheckpointMeta {
                network: spec.clone(),
                data: Some(dataset.spec.clone()),
                normalization: norm.clone(),
                rng_state: CheckpointMeta::encode_rng(&train_rng),
                seed,
                epoch,
                test_accuracy: eval.accuracy,
            };
            let ckpt = Checkpoint::from_network(&net, optim.state_tensors(&params), meta);
            best = Some((epoch, eval.accuracy, ckpt));
        }
        rows.push(row);
    }

    let (best_epoch, best_acc, best_ckpt) = best.ok_or_else(|| {
        Error::Spec("training ran zero epochs; nothing to checkpoint".into())
    })?;
    let last_meta = CheckpointMeta {
        network: spec.clone(),
        data: Some(dataset.spec.clone()),
        normalization: norm,
        rng_state: CheckpointMeta::encode_rng(&train_rng),
        seed,
        epoch: cfg.epochs.saturating_sub(1),
        test_accuracy: rows.last().map(|r| r.test_accuracy).unwrap_or(0.0),
    };
    let last = Checkpoint::from_network(&net, optim.state_tensors(&params), last_meta);

    Ok(TrainResult {
        report: TrainReport {
            rows,
            best_epoch,
            best_test_accuracy: best_acc,
        },
        best: best_ckpt,
        last,
    })
}

// ── evaluation ───────────────────────────────────────────────────────

/// Top-1 evaluation results.
#[derive(Clone, Debug, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// Evaluates on already-normalized planar RGB images.
pub fn evaluate_normalized(
    net: &Network<f32>,
    samples: &[(Vec<f32>, usize)],
    image_size: usize,
    batch: usize,
) -> Result<EvalResult> {
    let k = net.spec.num_classes;
    if let Some(&(_, label)) = samples.iter().find(|(_, label)| *label >= k) {
        return Err(Error::Classes(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<(&Vec<f32>, usize)> = chunk.iter().map(|(v, l)| (v, *l)).collect();
        let (x, labels) = batch_tensor(&refs, image_size);
        let tape = Tape::new();
        let logits = net.forward(
            &tape,
            &x,
            ForwardOpts {
                training: false,
                zero_interactions: false,
            },
        )?;
        let ld = logits.data();
        for (row, &label) in labels.iter().enumerate() {
            let pred = argmax_row(&ld[row * k..(row + 1) * k]);
            confusion[label][pred] += 1;
        }
    }
    let mut correct = 0usize;
    let mut per_class = Vec::with_capacity(k);
    for (label, row) in confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        correct += row[label];
        per_class.push(if total > 0 {
            row[label] as f64 / total as f64
        } else {
            0.0
        });
    }
    Ok(EvalResult {
        accuracy: correct as f64 / samples.len().max(1) as f64,
        per_class_accuracy: per_class,
        confusion,
    })
}

/// Evaluates a checkpoint on a dataset's test split using the stored
/// normalization.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, dataset: &Dataset, batch: usize) -> Result<EvalResult> {
    if ckpt.meta.network.num_classes != dataset.num_classes() {
        return Err(Error::Classes(format!(
            "checkpoint has {} classes, dataset {}",
            ckpt.meta.network.num_classes,
            dataset.num_classes()
        )));
    }
    let net = ckpt.build_network()?;
    let norm = &ckpt.meta.normalization;
    let test: Vec<(Vec<f32>, usize)> = dataset
        .test
        .iter()
        .map(|s| {
            let mut rgb = Vec::new();
            normalize_into(&s.to_rgb(), norm, &mut rgb);
            (rgb, s.label)
        })
        .collect();
    evaluate_normalized(&net, &test, dataset.spec.image_size, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ParamKind;

    #[test]
    fn schedule_hits_reference_points() {
        let (w, lr0) = (0.2, 0.05);
        assert!((lr_schedule(w, w, lr0) - lr0).abs() < 1e-12, "ramp peak");
        assert!(lr_schedule(1.0, w, lr0).abs() < 1e-12, "cosine end");
        let mid = (w + 1.0) / 2.0;
        assert!((lr_schedule(mid, w, lr0) - lr0 / 2.0).abs() < 1e-12, "midpoint");
    }

    fn scalar_param(value: f32) -> ParamEntry<f32> {
        ParamEntry {
            name: "p".into(),
            tensor: Tensor::from_vec(&[1], vec![value]).unwrap().requires_grad(),
            kind: ParamKind::ConvWeight,
        }
    }

    #[test]
    fn plain_sgd_when_momentum_and_decay_are_zero() {
        let params = vec![scalar_param(1.0)];
        let mut optim = SgdNesterov::new(&params, 0.0, 0.0);
        params[0].tensor.accumulate_grad(&[0.5]);
        optim.step(&params, 0.1).unwrap();
        assert!((params[0].tensor.data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn nesterov_two_steps_match_hand_unrolled_recurrence() {
        // f(p) = p^2 / 2, grad = p, lr 0.1, mu 0.9:
        // step 1: v = 1, p = 1 - 0.1 (1 + 0.9) = 0.81
        // step 2: g = 0.81, v = 1.71, p = 0.81 - 0.1 (0.81 + 1.539) = 0.5751
        let params = vec![scalar_param(1.0)];
        let mut optim = SgdNesterov::new(&params, 0.9, 0.0);
        let p = &params[0].tensor;
        p.accumulate_grad(&p.data().clone());
        optim.step(&params, 0.1).unwrap();
        assert!((p.data()[0] - 0.81).abs() < 1e-6, "{}", p.data()[0]);
        p.accumulate_grad(&p.data().clone());
        optim.step(&params, 0.1).unwrap();
        assert!((p.data()[0] - 0.5751).abs() < 1e-6, "{}", p.data()[0]);
    }

    #[test]
    fn decay_shrinks_weights_even_with_zero_grad() {
        let params = vec![scalar_param(2.0)];
        let mut optim = SgdNesterov::new(&params, 0.9, 0.01);
        params[0].tensor.accumulate_grad(&[0.0]);
        optim.step(&params, 0.1).unwrap();
        assert!(params[0].tensor.data()[0] < 2.0);
    }

    #[test]
    fn excluded_kinds_see_pure_momentum_updates() {
        // A gate parameter with decay toggled must update identically,
        // because gates are excluded from decay.
        for wd in [0.0, 0.5] {
            let params = vec![ParamEntry {
                name: "gate".into(),
                tensor: Tensor::from_vec(&[1], vec![-2.0f32]).unwrap().requires_grad(),
                kind: ParamKind::Gate,
            }];
            let mut optim = SgdNesterov::new(&params, 0.9, wd);
            params[0].tensor.accumulate_grad(&[0.3]);
            optim.step(&params, 0.1).unwrap();
            let expect = -2.0 - 0.1 * (0.3 + 0.9 * 0.3);
            assert!((params[0].tensor.data()[0] - expect).abs() < 1e-7, "wd {wd}");
        }
    }

    #[test]
    fn missing_grad_is_reported() {
        let params = vec![scalar_param(1.0)];
        let mut optim = SgdNesterov::new(&params, 0.9, 0.0);
        assert!(matches!(
            optim.step(&params, 0.1),
            Err(Error::NoGrad(name)) if name == "p"
        ));
    }

    #[test]
    fn pad_crop_center_is_identity() {
        let img: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let out = pad_crop_flip(&img, 4, 4, 4, false);
        assert_eq!(out, img);
    }

    #[test]
    fn flip_mirrors_columns() {
        let img: Vec<f32> = vec![1.0, 2.0, 3.0, 4.0];
        let out = pad_crop_flip(&img, 2, 4, 4, true);
        assert_eq!(out, vec![2.0, 1.0, 4.0, 3.0]);
    }
}
