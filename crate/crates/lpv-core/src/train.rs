//! Training loop, Adam optimizer, batched gradients and evaluation.
//!
//! Each sample's forward and backward pass builds an independent graph, so
//! batches shard cleanly across threads. All reductions run in sample
//! order after collection, which makes results bit-identical whether the
//! `parallel` feature is on or off, and for any thread count.

use crate::model::{argmax_ids, decode_prediction, LpvModel, MaskMode};
use crate::nn::Params;
use crate::rng::Rng;
use crate::synthdata::Sample;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};
use std::path::Path;

/// Bias-corrected Adam update for one parameter buffer at step `t` (≥ 1).
pub fn adam_update<S: Scalar>(
    param: &mut [S],
    grad: &[S],
    m: &mut [S],
    v: &mut [S],
    t: u64,
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
) {
    let one = S::one();
    let bc1 = one - beta1.powi(t as i32);
    let bc2 = one - beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (one - beta1) * g;
        v[i] = beta2 * v[i] + (one - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam state aligned with the model's parameter visitation order.
pub struct Adam<S: Scalar> {
    step: u64,
    beta1: S,
    beta2: S,
    eps: S,
    moments: Vec<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(model: &LpvModel<S>) -> Self {
        let o = &model.cfg.optimizer;
        Adam {
            step: 0,
            beta1: S::from_f64(o.beta1),
            beta2: S::from_f64(o.beta2),
            eps: S::from_f64(o.eps),
            moments: model
                .parameters()
                .iter()
                .map(|(_, t)| (vec![S::zero(); t.len()], vec![S::zero(); t.len()]))
                .collect(),
        }
    }

    /// Apply one step. `grads` must align with the parameter order.
    pub fn step(&mut self, model: &mut LpvModel<S>, grads: &[Vec<S>], lr: S) {
        self.step += 1;
        let t = self.step;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut idx = 0;
        model.visit_mut("", &mut |_, param| {
            let (m, v) = &mut self.moments[idx];
            let mut data = param.data().to_vec();
            adam_update(&mut data, &grads[idx], m, v, t, lr, b1, b2, eps);
            *param = Tensor::param(param.shape(), data).expect("shape unchanged");
            idx += 1;
        });
    }
}

/// Per-sample result of a forward/backward pass.
struct SamplePass<S: Scalar> {
    loss: f64,
    stage_losses: Vec<f64>,
    stage_seq_hits: Vec<bool>,
    stage_char_hits: Vec<usize>,
    char_total: usize,
    grads: Vec<Vec<S>>,
}

fn run_sample<S: Scalar>(
    model: &LpvModel<S>,
    params: &[&Tensor<S>],
    sample: &Sample,
    mask_enabled: bool,
    want_grads: bool,
) -> Result<SamplePass<S>> {
    let img = sample.image_tensor::<S>();
    let trace = model.forward(&img, mask_enabled)?;
    let loss_t = model.compute_loss(&trace, &sample.label)?;
    let loss = loss_t.value()?.to_f64();

    let text_len = sample.text.chars().count();
    let mut stage_losses = Vec::with_capacity(trace.stages.len());
    let mut stage_seq_hits = Vec::with_capacity(trace.stages.len());
    let mut stage_char_hits = Vec::with_capacity(trace.stages.len());
    for stage in &trace.stages {
        stage_losses.push(stage.logits.ce_mean(&sample.label)?.value()?.to_f64());
        let decoded = decode_prediction(&stage.logits, &model.cfg.charset);
        stage_seq_hits.push(decoded == sample.text);
        let ids = argmax_ids(&stage.logits);
        let hits = ids
            .iter()
            .zip(&sample.label)
            .take(text_len)
            .filter(|(a, b)| a == b)
            .count();
        stage_char_hits.push(hits);
    }

    let grads = if want_grads {
        let store = loss_t.backward_grads()?;
        params
            .iter()
            .map(|p| {
                store
                    .get(p)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![S::zero(); p.len()])
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(SamplePass {
        loss,
        stage_losses,
        stage_seq_hits,
        stage_char_hits,
        char_total: text_len,
        grads,
    })
}

fn collect_passes<S: Scalar>(
    model: &LpvModel<S>,
    params: &[&Tensor<S>],
    batch: &[Sample],
    mask_enabled: bool,
    want_grads: bool,
    parallel: bool,
) -> Result<Vec<SamplePass<S>>> {
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return batch
            .par_iter()
            .map(|s| run_sample(model, params, s, mask_enabled, want_grads))
            .collect();
    }
    let _ = parallel;
    batch
        .iter()
        .map(|s| run_sample(model, params, s, mask_enabled, want_grads))
        .collect()
}

/// Mean gradient over a batch plus the mean loss, reduced in sample order.
/// Dispatches to rayon when the `parallel` feature is enabled.
pub fn batch_gradients<S: Scalar>(
    model: &LpvModel<S>,
    batch: &[Sample],
    mask_enabled: bool,
) -> Result<(f64, Vec<Vec<S>>)> {
    batch_gradients_inner(model, batch, mask_enabled, cfg!(feature = "parallel"))
}

/// Sequential twin of [`batch_gradients`], always available so benches and
/// determinism tests can compare the two paths.
pub fn batch_gradients_serial<S: Scalar>(
    model: &LpvModel<S>,
    batch: &[Sample],
    mask_enabled: bool,
) -> Result<(f64, Vec<Vec<S>>)> {
    batch_gradients_inner(model, batch, mask_enabled, false)
}

fn batch_gradients_inner<S: Scalar>(
    model: &LpvModel<S>,
    batch: &[Sample],
    mask_enabled: bool,
    parallel: bool,
) -> Result<(f64, Vec<Vec<S>>)> {
    let (loss, grads, _) = batch_pass(model, batch, mask_enabled, parallel)?;
    Ok((loss, grads))
}

/// Forward+backward over a batch: mean loss, mean gradients in parameter
/// order, and the per-sample stats. The reduction folds in sample order.
fn batch_pass<S: Scalar>(
    model: &LpvModel<S>,
    batch: &[Sample],
    mask_enabled: bool,
    parallel: bool,
) -> Result<(f64, Vec<Vec<S>>, Vec<SamplePass<S>>)> {
    assert!(!batch.is_empty());
    let named = model.parameters();
    let params: Vec<&Tensor<S>> = named.iter().map(|(_, t)| *t).collect();
    let passes = collect_passes(model, &params, batch, mask_enabled, true, parallel)?;
    let inv = S::from_f64(1.0 / batch.len() as f64);
    let mut grads: Vec<Vec<S>> = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
    let mut loss = 0.0;
    for pass in &passes {
        loss += pass.loss;
        for (acc, g) in grads.iter_mut().zip(&pass.grads) {
            for (a, &b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    for buf in grads.iter_mut() {
        for v in buf.iter_mut() {
            *v *= inv;
        }
    }
    Ok((loss / batch.len() as f64, grads, passes))
}

/// One row of the per-epoch, per-stage metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// 1-based stage index.
    pub stage: usize,
    pub loss: f64,
    pub seq_acc: f64,
    pub char_acc: f64,
}

/// Write metrics as CSV with the header `epoch,stage,loss,seq_acc,char_acc`.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from("epoch,stage,loss,seq_acc,char_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.epoch, r.stage, r.loss, r.seq_acc, r.char_acc
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
}

impl TrainReport {
    /// Rows of the last epoch, one per stage.
    pub fn final_rows(&self) -> &[MetricsRow] {
        let last = self.rows.last().map(|r| r.epoch).unwrap_or(0);
        let start = self.rows.partition_point(|r| r.epoch < last);
        &self.rows[start..]
    }
}

const SHUFFLE_SALT: u64 = 0x7368_7566;

/// Train in place for the configured schedule. Deterministic given the
/// model seed and dataset: one data order per (seed, epoch), ordered
/// gradient reductions, no other entropy sources.
pub fn train<S: Scalar>(
    model: &mut LpvModel<S>,
    samples: &[Sample],
    mask_mode: MaskMode,
) -> Result<TrainReport> {
    train_with_progress(model, samples, mask_mode, |_, _| {})
}

pub fn train_with_progress<S: Scalar>(
    model: &mut LpvModel<S>,
    samples: &[Sample],
    mask_mode: MaskMode,
    mut on_epoch: impl FnMut(usize, &[MetricsRow]),
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let schedule = model.cfg.schedule.clone();
    let n_stages = model.cfg.n_stages;
    let batch_size = model.cfg.batch_size;
    let seed = model.cfg.seed;
    let mut adam = Adam::new(model);
    let mut rows = Vec::new();
    for epoch in 0..schedule.total_epochs {
        let mask_enabled = mask_mode.enabled_at(epoch, &schedule);
        let lr = if epoch >= schedule.lr_decay_epoch {
            schedule.decayed_lr
        } else {
            model.cfg.optimizer.lr
        };
        let lr = S::from_f64(lr);

        let mut order: Vec<usize> = (0..samples.len()).collect();
        Rng::derive(seed, SHUFFLE_SALT, epoch as u64).shuffle(&mut order);

        let mut stage_loss = vec![0.0; n_stages];
        let mut stage_seq = vec![0usize; n_stages];
        let mut stage_chars = vec![0usize; n_stages];
        let mut char_total = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let (batch_loss, grads) = {
                let (loss, grads, passes) =
                    batch_pass(model, &batch, mask_enabled, cfg!(feature = "parallel"))?;
                for pass in &passes {
                    for s in 0..n_stages {
                        stage_loss[s] += pass.stage_losses[s];
                        stage_seq[s] += pass.stage_seq_hits[s] as usize;
                        stage_chars[s] += pass.stage_char_hits[s];
                    }
                    char_total += pass.char_total;
                }
                (loss, grads)
            };
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            adam.step(model, &grads, lr);
        }

        let n = samples.len() as f64;
        let epoch_rows: Vec<MetricsRow> = (0..n_stages)
            .map(|s| MetricsRow {
                epoch,
                stage: s + 1,
                loss: stage_loss[s] / n,
                seq_acc: stage_seq[s] as f64 / n,
                char_acc: stage_chars[s] as f64 / char_total as f64,
            })
            .collect();
        on_epoch(epoch, &epoch_rows);
        rows.extend(epoch_rows);
    }
    Ok(TrainReport { rows })
}

/// Per-stage metrics of a dataset under a fixed mask state.
#[derive(Debug, Clone, PartialEq)]
pub struct StageEval {
    pub loss: f64,
    pub seq_acc: f64,
    pub char_acc: f64,
}

pub struct EvalReport {
    pub per_stage: Vec<StageEval>,
}

pub fn evaluate<S: Scalar>(
    model: &LpvModel<S>,
    samples: &[Sample],
    mask_enabled: bool,
) -> Result<EvalReport> {
    evaluate_inner(model, samples, mask_enabled, cfg!(feature = "parallel"))
}

/// Sequential twin of [`evaluate`].
pub fn evaluate_serial<S: Scalar>(
    model: &LpvModel<S>,
    samples: &[Sample],
    mask_enabled: bool,
) -> Result<EvalReport> {
    evaluate_inner(model, samples, mask_enabled, false)
}

fn evaluate_inner<S: Scalar>(
    model: &LpvModel<S>,
    samples: &[Sample],
    mask_enabled: bool,
    parallel: bool,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let passes = collect_passes(model, &[], samples, mask_enabled, false, parallel)?;
    let n_stages = model.cfg.n_stages;
    let mut per_stage = Vec::with_capacity(n_stages);
    let n = samples.len() as f64;
    let char_total: usize = passes.iter().map(|p| p.char_total).sum();
    for s in 0..n_stages {
        let loss: f64 = passes.iter().map(|p| p.stage_losses[s]).sum::<f64>() / n;
        let seq: usize = passes.iter().map(|p| p.stage_seq_hits[s] as usize).sum();
        let chars: usize = passes.iter().map(|p| p.stage_char_hits[s]).sum();
        per_stage.push(StageEval {
            loss,
            seq_acc: seq as f64 / n,
            char_acc: chars as f64 / char_total as f64,
        });
    }
    Ok(EvalReport { per_stage })
}

/// Per-stage query Gram matrices (T×T dot products), grouped by ground
/// truth length and averaged. The drift diagnostic: image-independent
/// queries give identical Gram matrices for every image.
pub struct SimilarityReport {
    /// `by_length[len]` → per-stage averaged Gram matrix (row-major T×T),
    /// plus the number of images of that length.
    pub by_length: Vec<(usize, Vec<Vec<f64>>, usize)>,
    pub t_slots: usize,
}

pub fn query_similarity<S: Scalar>(
    model: &LpvModel<S>,
    samples: &[Sample],
    mask_enabled: bool,
) -> Result<SimilarityReport> {
    let t = model.cfg.t_max;
    let n_stages = model.cfg.n_stages;
    let mut acc: std::collections::BTreeMap<usize, (Vec<Vec<f64>>, usize)> =
        std::collections::BTreeMap::new();
    for sample in samples {
        let trace = model.forward(&sample.image_tensor::<S>(), mask_enabled)?;
        let len = sample.text.chars().count();
        let entry = acc
            .entry(len)
            .or_insert_with(|| (vec![vec![0.0; t * t]; n_stages], 0));
        entry.1 += 1;
        for (s, stage) in trace.stages.iter().enumerate() {
            let gram = stage.query.matmul(&stage.query.t()?)?;
            for (a, &g) in entry.0[s].iter_mut().zip(gram.data()) {
                *a += g.to_f64();
            }
        }
    }
    let by_length = acc
        .into_iter()
        .map(|(len, (mut mats, count))| {
            for m in mats.iter_mut() {
                for v in m.iter_mut() {
                    *v /= count as f64;
                }
            }
            (len, mats, count)
        })
        .collect();
    Ok(SimilarityReport {
        by_length,
        t_slots: t,
    })
}

/// Fraction of Gram rows whose diagonal entry is the row maximum, per
/// stage, averaged over samples. Rises as queries become position-locked.
pub fn diagonal_dominance<S: Scalar>(
    model: &LpvModel<S>,
    samples: &[Sample],
    mask_enabled: bool,
) -> Result<Vec<f64>> {
    let t = model.cfg.t_max;
    let mut fractions = vec![0.0; model.cfg.n_stages];
    for sample in samples {
        let trace = model.forward(&sample.image_tensor::<S>(), mask_enabled)?;
        for (s, stage) in trace.stages.iter().enumerate() {
            let gram = stage.query.matmul(&stage.query.t()?)?;
            let mut dominant = 0;
            for r in 0..t {
                let row = &gram.data()[r * t..(r + 1) * t];
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                if row[r] == max {
                    dominant += 1;
                }
            }
            fractions[s] += dominant as f64 / t as f64;
        }
    }
    for f in fractions.iter_mut() {
        *f /= samples.len() as f64;
    }
    Ok(fractions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charset::Charset;
    use crate::model::LpvConfig;
    use crate::synthdata::{make_dataset, RenderConfig, Split};

    #[test]
    fn adam_first_step_matches_hand_formula() {
        let mut p = vec![0.0f64];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8);
        // m̂ = 1, v̂ = 1 ⇒ w ← −0.1/(1+1e-8)
        let want = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - want).abs() < 1e-12, "{}", p[0]);
        assert!((p[0] + 0.09999999).abs() < 1e-7);
    }

    #[test]
    fn adam_zero_grad_leaves_parameter_unchanged() {
        let mut p = vec![0.7f64];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8);
        assert_eq!(p[0], 0.7);
    }

    fn tiny_dataset(n: usize, seed: u64) -> Vec<Sample> {
        let cfg = RenderConfig {
            img_h: 16,
            img_w: 16,
            t_slots: 3,
            min_scale: 1.0,
            max_scale: 1.0,
            jitter: 0,
            noise: 0.05,
        };
        make_dataset(&["at", "to", "it", "an"], n, Split::Train, seed, &cfg, &Charset::desk())
            .unwrap()
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let data = tiny_dataset(12, 1);
        let mut cfg = LpvConfig::tiny(5);
        cfg.schedule.total_epochs = 2;
        cfg.batch_size = 4;
        let mut a = LpvModel::<f32>::new(cfg.clone()).unwrap();
        let mut b = LpvModel::<f32>::new(cfg).unwrap();
        let ra = train(&mut a, &data, MaskMode::Schedule).unwrap();
        let rb = train(&mut b, &data, MaskMode::Schedule).unwrap();
        assert_eq!(ra.rows, rb.rows);
        for ((na, ta), (nb, tb)) in a.parameters().iter().zip(b.parameters().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na} diverged");
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_serial_gradients_bit_identical() {
        let data = tiny_dataset(8, 2);
        let model = LpvModel::<f32>::new(LpvConfig::tiny(3)).unwrap();
        let (loss_p, grads_p) = batch_gradients(&model, &data, true).unwrap();
        let (loss_s, grads_s) = batch_gradients_serial(&model, &data, true).unwrap();
        assert_eq!(loss_p, loss_s);
        assert_eq!(grads_p, grads_s);
        let ep = evaluate(&model, &data, true).unwrap();
        let es = evaluate_serial(&model, &data, true).unwrap();
        for (a, b) in ep.per_stage.iter().zip(&es.per_stage) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn short_training_reduces_loss() {
        let data = tiny_dataset(32, 3);
        let mut cfg = LpvConfig::tiny(7);
        cfg.schedule.total_epochs = 6;
        cfg.schedule.mask_on_epoch = 6;
        cfg.schedule.lr_decay_epoch = 6;
        cfg.batch_size = 8;
        let mut model = LpvModel::<f32>::new(cfg).unwrap();
        let report = train(&mut model, &data, MaskMode::Schedule).unwrap();
        let first: f64 = report.rows.iter().filter(|r| r.epoch == 0).map(|r| r.loss).sum();
        let last: f64 = report
            .rows
            .iter()
            .filter(|r| r.epoch == 5)
            .map(|r| r.loss)
            .sum();
        assert!(
            last < first * 0.8,
            "loss did not drop: first {first}, last {last}"
        );
    }

    #[test]
    fn metrics_csv_format() {
        let rows = vec![
            MetricsRow {
                epoch: 0,
                stage: 1,
                loss: 1.5,
                seq_acc: 0.25,
                char_acc: 0.5,
            },
            MetricsRow {
                epoch: 0,
                stage: 2,
                loss: 1.25,
                seq_acc: 0.375,
                char_acc: 0.625,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,stage,loss,seq_acc,char_acc");
        assert_eq!(lines.next().unwrap(), "0,1,1.500000,0.250000,0.500000");
        assert_eq!(lines.next().unwrap(), "0,2,1.250000,0.375000,0.625000");
    }

    #[test]
    fn mask_off_schedule_equals_mask_mode_off() {
        // mask_on_epoch = total_epochs degenerates the schedule to off.
        let data = tiny_dataset(8, 4);
        let mut cfg = LpvConfig::tiny(11);
        cfg.schedule.total_epochs = 2;
        cfg.schedule.mask_on_epoch = 2;
        cfg.batch_size = 4;
        let mut a = LpvModel::<f32>::new(cfg.clone()).unwrap();
        let mut b = LpvModel::<f32>::new(cfg).unwrap();
        let ra = train(&mut a, &data, MaskMode::Schedule).unwrap();
        let rb = train(&mut b, &data, MaskMode::Off).unwrap();
        assert_eq!(ra.rows, rb.rows);
    }

    #[test]
    fn stage0_gram_has_zero_variance_across_images() {
        let data = tiny_dataset(6, 5);
        let model = LpvModel::<f64>::new(LpvConfig::tiny(13)).unwrap();
        let report = query_similarity(&model, &data, false).unwrap();
        // Recompute per-image stage-0 Grams and check they are identical.
        let mut grams: Vec<Vec<f64>> = Vec::new();
        for s in &data {
            let trace = model.forward(&s.image_tensor::<f64>(), false).unwrap();
            let q = &trace.stages[0].query;
            let gram = q.matmul(&q.t().unwrap()).unwrap();
            grams.push(gram.data().to_vec());
        }
        for g in &grams[1..] {
            assert_eq!(g, &grams[0]);
        }
        assert_eq!(report.t_slots, 3);
    }
}
