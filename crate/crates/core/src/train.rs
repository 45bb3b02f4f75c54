//! Pre-training loop, AdamW, linear probing, and the ablation suite.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::Config;
use crate::data::{CheckpointState, Dataset, NamedTensor};
use crate::error::{CoreError, Result};
use crate::geometry::{make_patches, PointCloud};
use crate::model::{forward_cloud, loss_for_cloud, BoundParams, ModelState};
use crate::objective::{collapse_stats, CollapseStats};
use crate::rng::{derive_seed, rng_from};
use crate::serial::{sample_order, serialize};
use crate::{augment, backbone};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// cosine schedule floor as a fraction of the peak learning rate
pub const LR_FINAL_FRAC: f64 = 0.1;

/// Linear warmup to the peak, then cosine decay to `LR_FINAL_FRAC` of
/// the peak. `step` is zero-based.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_frac: f64) -> f64 {
    let warmup = ((total_steps as f64) * warmup_frac).round() as usize;
    if warmup > 0 && step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let denom = total_steps.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / denom).min(1.0);
    let floor = peak * LR_FINAL_FRAC;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decoupled weight decay Adam. Moments are stored per parameter
/// tensor in registration order and travel with checkpoints.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub total_steps: usize,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: &Config, state: &ModelState<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = state.params.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            peak_lr: cfg.train_lr,
            weight_decay: cfg.train_weight_decay,
            warmup_frac: cfg.train_warmup_frac,
            total_steps: cfg.train_steps,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `step` is the zero-based index of this update; bias
    /// correction uses `step + 1`.
    pub fn update(
        &mut self,
        step: usize,
        state: &mut ModelState<f32>,
        grads: &[Vec<f32>],
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        let lr = lr_at(step, self.total_steps, self.peak_lr, self.warmup_frac);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (pi, tensor) in state.params.iter_mut().enumerate() {
            let g = &grads[pi];
            if g.len() != tensor.data.len() {
                return Err(CoreError::ShapeMismatch(format!(
                    "gradient for '{}' has {} values, parameter has {}",
                    tensor.name,
                    g.len(),
                    tensor.data.len()
                )));
            }
            // names ending in .bias, .g, .b, .gamma, .beta are 1-D
            // gains/offsets; decay only the weight matrices
            let decay = if tensor.rows > 1 { self.weight_decay } else { 0.0 };
            for (i, p) in tensor.data.iter_mut().enumerate() {
                let gi = f64::from(g[i]);
                let m = ADAM_BETA1 * f64::from(self.m[pi][i]) + (1.0 - ADAM_BETA1) * gi;
                let v = ADAM_BETA2 * f64::from(self.v[pi][i]) + (1.0 - ADAM_BETA2) * gi * gi;
                self.m[pi][i] = m as f32;
                self.v[pi][i] = v as f32;
                let update = (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                *p = (f64::from(*p) - lr * (update + decay * f64::from(*p))) as f32;
            }
        }
        Ok(())
    }
}

/// Per-logged-step record, one JSON object per line in run logs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub mean_pairwise_cosine: f64,
    pub per_dim_std_mean: f64,
    pub collapsed: bool,
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub collapse: CollapseStats,
}

/// Pre-training state: model, optimizer, the single RNG stream that
/// drives batch sampling, augmentation, patching, and order choice.
pub struct Trainer {
    pub cfg: Config,
    pub state: ModelState<f32>,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Self> {
        let dims = cfg.dims();
        let state = ModelState::init(dims, cfg.train_seed)?;
        let opt = AdamW::new(&cfg, &state);
        let rng = rng_from(cfg.train_seed, "train-loop");
        Ok(Self {
            cfg,
            state,
            opt,
            rng,
            step: 0,
        })
    }

    /// One optimization step over a sampled batch. Returns the batch
    /// loss and collapse stats over all latent tokens in the batch.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepStats> {
        if data.train.is_empty() {
            return Err(CoreError::EmptyInput("training split is empty".into()));
        }
        let fwd = self.cfg.forward();
        let loss_cfg = self.cfg.loss();
        let aug_cfg = self.cfg.augment();
        let batch = self.cfg.train_batch.max(1);

        let mut tape: Tape<f32> = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.state)?;
        let mut losses = Vec::with_capacity(batch);
        let mut token_rows: Vec<Vec<f64>> = Vec::new();
        for _ in 0..batch {
            let idx = self.rng.gen_range(0..data.train.len());
            let cloud = augment::apply_augment(&data.train[idx], &aug_cfg, &mut self.rng)?;
            let patches = make_patches(
                &cloud,
                self.cfg.model_patches,
                self.cfg.model_patch_size,
                self.rng.gen(),
            )?;
            let kind = sample_order(&self.cfg.serial_bank, self.rng.gen())?;
            let order = serialize(&patches.centers, kind, self.cfg.serial_bits, self.rng.gen())?;
            let (loss, out) =
                loss_for_cloud(&mut tape, &bound, &self.state, &patches, &order, &fwd, &loss_cfg)?;
            losses.push(loss);
            let c = self.state.dims.dim;
            let vals = tape.values(out.tokens);
            for row in vals.chunks_exact(c) {
                token_rows.push(row.iter().map(|&v| f64::from(v)).collect());
            }
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let mean_loss = tape.scale(total, 1.0 / batch as f32);
        let loss_value = f64::from(tape.scalar(mean_loss));
        if !loss_value.is_finite() {
            return Err(CoreError::NumericFailure(format!(
                "non-finite loss at step {}",
                self.step
            )));
        }
        let grads = tape.backward(mean_loss)?;
        let grad_vecs = bound.collect_grads(&tape, &grads, &self.state)?;
        self.opt.update(self.step as usize, &mut self.state, &grad_vecs)?;
        self.step += 1;
        Ok(StepStats {
            loss: loss_value,
            collapse: collapse_stats(&token_rows)?,
        })
    }

    /// Run until `train.steps`, logging every `train.log_every` steps
    /// and always at the final step.
    pub fn run(&mut self, data: &Dataset, mut on_record: impl FnMut(&RunRecord)) -> Result<Vec<RunRecord>> {
        let mut records = Vec::new();
        let total = self.cfg.train_steps;
        let every = self.cfg.train_log_every.max(1);
        while (self.step as usize) < total {
            let lr = lr_at(
                self.step as usize,
                total,
                self.cfg.train_lr,
                self.cfg.train_warmup_frac,
            );
            let stats = self.train_step(data)?;
            let done = self.step as usize;
            if done.is_multiple_of(every) || done == total {
                let rec = RunRecord {
                    step: self.step,
                    loss: stats.loss,
                    lr,
                    mean_pairwise_cosine: stats.collapse.mean_pairwise_cosine,
                    per_dim_std_mean: stats.collapse.per_dim_std_mean,
                    collapsed: stats.collapse.is_collapsed(),
                };
                on_record(&rec);
                records.push(rec);
            }
        }
        Ok(records)
    }

    /// Everything needed to resume bit-identically: parameters, Adam
    /// moments, the loop RNG position, the step counter, the config.
    pub fn to_checkpoint(&self) -> CheckpointState {
        let mut tensors: Vec<NamedTensor> = Vec::new();
        for t in self.state.params.iter() {
            tensors.push(NamedTensor {
                name: t.name.clone(),
                rows: t.rows,
                cols: t.cols,
                data: t.data.clone(),
            });
        }
        for (pi, t) in self.state.params.iter().enumerate() {
            tensors.push(NamedTensor {
                name: format!("adam.m.{}", t.name),
                rows: t.rows,
                cols: t.cols,
                data: self.opt.m[pi].clone(),
            });
            tensors.push(NamedTensor {
                name: format!("adam.v.{}", t.name),
                rows: t.rows,
                cols: t.cols,
                data: self.opt.v[pi].clone(),
            });
        }
        CheckpointState {
            config_text: self.cfg.to_text(),
            step: self.step,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &CheckpointState) -> Result<Self> {
        let cfg = Config::from_text(&ckpt.config_text)?;
        let mut trainer = Trainer::new(cfg)?;
        let by_name: std::collections::HashMap<&str, &NamedTensor> =
            ckpt.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let names: Vec<String> = trainer.state.params.iter().map(|t| t.name.clone()).collect();
        for (pi, name) in names.iter().enumerate() {
            let copy_into = |dst: &mut Vec<f32>, key: &str| -> Result<()> {
                let src = by_name.get(key).ok_or_else(|| {
                    CoreError::Checkpoint(format!("checkpoint is missing tensor '{key}'"))
                })?;
                if src.data.len() != dst.len() {
                    return Err(CoreError::Checkpoint(format!(
                        "tensor '{key}' has {} values, model expects {}",
                        src.data.len(),
                        dst.len()
                    )));
                }
                dst.copy_from_slice(&src.data);
                Ok(())
            };
            copy_into(&mut trainer.state.params.get_mut(name)?.data, name)?;
            copy_into(&mut trainer.opt.m[pi], &format!("adam.m.{name}"))?;
            copy_into(&mut trainer.opt.v[pi], &format!("adam.v.{name}"))?;
        }
        trainer.rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        trainer.rng.set_word_pos(ckpt.rng_word_pos);
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::save_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&crate::data::load_checkpoint(path)?)
    }
}

/// Frozen-backbone feature of one cloud: mean and max pooling of the
/// hidden states over the sequence, concatenated.
pub fn extract_features(
    cfg: &Config,
    state: &ModelState<f32>,
    cloud: &PointCloud,
    mode: backbone::AttentionMode,
    patch_seed: u64,
) -> Result<Vec<f64>> {
    let patches = make_patches(cloud, cfg.model_patches, cfg.model_patch_size, patch_seed)?;
    let kind = cfg.serial_bank[0];
    let order = serialize(&patches.centers, kind, cfg.serial_bits, patch_seed)?;
    let mut fwd = cfg.forward();
    fwd.mode = mode;
    let mut tape: Tape<f32> = Tape::new();
    let bound = BoundParams::bind(&mut tape, state)?;
    let out = forward_cloud(&mut tape, &bound, state, &patches, &order, &fwd)?;
    let c = state.dims.dim;
    let hidden = tape.values(out.hidden);
    let t_len = hidden.len() / c;
    let mut mean = vec![0.0f64; c];
    let mut max = vec![f64::NEG_INFINITY; c];
    for row in hidden.chunks_exact(c) {
        for (d, &v) in row.iter().enumerate() {
            let v = f64::from(v);
            mean[d] += v / t_len as f64;
            if v > max[d] {
                max[d] = v;
            }
        }
    }
    mean.extend(max);
    Ok(mean)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Multinomial logistic regression on frozen features: standardized
/// inputs, full-batch gradient descent.
pub fn linear_probe(
    cfg: &Config,
    state: &ModelState<f32>,
    data: &Dataset,
    mode: backbone::AttentionMode,
) -> Result<ProbeResult> {
    let featurize = |split: &[PointCloud], name: &str| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut xs = Vec::with_capacity(split.len());
        let mut ys = Vec::with_capacity(split.len());
        for (i, cloud) in split.iter().enumerate() {
            let seed = derive_seed(cfg.train_seed, &format!("probe-{name}-{i}"));
            xs.push(extract_features(cfg, state, cloud, mode, seed)?);
            ys.push(cloud.label.ok_or_else(|| {
                CoreError::InvalidInput(format!("{name} cloud {i} has no label"))
            })?);
        }
        Ok((xs, ys))
    };
    let (mut train_x, train_y) = featurize(&data.train, "train")?;
    let (mut test_x, test_y) = featurize(&data.test, "test")?;
    if train_x.is_empty() || test_x.is_empty() {
        return Err(CoreError::EmptyInput("probe needs both splits populated".into()));
    }

    // standardize with train-split statistics
    let d = train_x[0].len();
    let n = train_x.len() as f64;
    let mut mean = vec![0.0f64; d];
    for x in &train_x {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0f64; d];
    for x in &train_x {
        for (s, (v, m)) in std.iter_mut().zip(x.iter().zip(&mean)) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in std.iter_mut() {
        *s = s.sqrt().max(1e-8);
    }
    for x in train_x.iter_mut().chain(test_x.iter_mut()) {
        for ((v, m), s) in x.iter_mut().zip(&mean).zip(&std) {
            *v = (*v - m) / s;
        }
    }

    let k = data.num_classes;
    // weights (d+1, k), last row is the bias
    let mut w = vec![0.0f64; (d + 1) * k];
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|j| {
                x.iter()
                    .enumerate()
                    .map(|(i, v)| v * w[i * k + j])
                    .sum::<f64>()
                    + w[d * k + j]
            })
            .collect()
    };
    let softmax = |z: &[f64]| -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    for _ in 0..cfg.probe_epochs {
        let mut grad = vec![0.0f64; (d + 1) * k];
        for (x, &y) in train_x.iter().zip(&train_y) {
            let p = softmax(&logits(&w, x));
            for j in 0..k {
                let err = p[j] - if j == y { 1.0 } else { 0.0 };
                for (i, v) in x.iter().enumerate() {
                    grad[i * k + j] += err * v;
                }
                grad[d * k + j] += err;
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= cfg.probe_lr * g / n;
        }
    }

    let accuracy = |xs: &[Vec<f64>], ys: &[usize]| -> f64 {
        let correct = xs
            .iter()
            .zip(ys)
            .filter(|(x, &y)| {
                let z = logits(&w, x);
                let pred = z
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap();
                pred == y
            })
            .count();
        correct as f64 / xs.len() as f64
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(&train_x, &train_y),
        test_accuracy: accuracy(&test_x, &test_y),
    })
}

/// Outcome of one ablation variant. Failures are recorded, not fatal,
/// so one broken variant cannot sink the rest of the grid.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationOutcome {
    pub name: String,
    pub final_loss: f64,
    pub collapsed: bool,
    pub probe_test_accuracy: f64,
    pub error: Option<String>,
}

/// The standard grid: one toggle flipped per variant, same seed and
/// budget everywhere.
pub fn standard_variants(base: &Config) -> Vec<(String, Config)> {
    let mut out = vec![("baseline".to_string(), base.clone())];
    let mut add = |name: &str, key: &str, value: &str| {
        let mut cfg = base.clone();
        cfg.set(key, value).expect("variant key");
        out.push((name.to_string(), cfg));
    };
    add("no_shift", "loss.shift", "false");
    add("no_stopgrad", "loss.stopgrad", "false");
    add("bidirectional", "model.attn_mode", "bidirect");
    add("random_order", "serial.bank", "random");
    add("no_center_pe", "pe.center_additive", "false");
    add("no_rope", "pe.rope3d", "false");
    add("zorder_bank", "serial.bank", "zorder,zorder_trans");
    out
}

fn run_variant(cfg: &Config, data: &Dataset) -> Result<(f64, bool, f64)> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let records = trainer.run(data, |_| {})?;
    let last = records
        .last()
        .ok_or_else(|| CoreError::InvalidArgument("variant trained for zero steps".into()))?;
    let collapsed = records.iter().any(|r| r.collapsed);
    let probe = linear_probe(cfg, &trainer.state, data, cfg.model_attn_mode)?;
    Ok((last.loss, collapsed, probe.test_accuracy))
}

pub fn run_ablation_suite(
    variants: &[(String, Config)],
    data: &Dataset,
    mut on_done: impl FnMut(&AblationOutcome),
) -> Vec<AblationOutcome> {
    let mut out = Vec::with_capacity(variants.len());
    for (name, cfg) in variants {
        let outcome = match run_variant(cfg, data) {
            Ok((final_loss, collapsed, acc)) => AblationOutcome {
                name: name.clone(),
                final_loss,
                collapsed,
                probe_test_accuracy: acc,
                error: None,
            },
            Err(e) => AblationOutcome {
                name: name.clone(),
                final_loss: f64::NAN,
                collapsed: false,
                probe_test_accuracy: f64::NAN,
                error: Some(e.to_string()),
            },
        };
        on_done(&outcome);
        out.push(outcome);
    }
    out
}

/// Tab-separated summary table, one variant per row.
pub fn format_ablation_table(outcomes: &[AblationOutcome]) -> String {
    let mut s = String::from("variant\tfinal_loss\tcollapsed\tprobe_test_acc\terror\n");
    for o in outcomes {
        s.push_str(&format!(
            "{}\t{:.4}\t{}\t{:.4}\t{}\n",
            o.name,
            o.final_loss,
            o.collapsed,
            o.probe_test_accuracy,
            o.error.as_deref().unwrap_or("-")
        ));
    }
    s
}
