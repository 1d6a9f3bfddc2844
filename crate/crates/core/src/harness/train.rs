use serde::{Deserialize, Serialize};

use super::dataset::{angular_error_deg, Dataset, Samples};
use super::metric::stagewise_error;
use crate::autodiff::optim::{adamw_step, learning_rate, AdamWConfig, OptimState};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::layers::{Ctx, ParamKind};
use crate::model::{Checkpoint, Model};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Seeds batch order.
    pub seed: u64,
    /// Weight of the angular loss relative to cross-entropy.
    pub angle_loss_weight: f64,
    /// Test images used for the per-epoch equivariance error.
    pub eps_samples: usize,
    pub eps_angles: Vec<f64>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            seed: 0,
            angle_loss_weight: 1.0,
            eps_samples: 8,
            eps_angles: vec![90.0, 180.0, 270.0],
            eval_batch_size: 50,
        }
    }
}

/// Test-set metrics plus stagewise error after `epoch` epochs (0 = initial).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub angular_error_deg: f64,
    /// Normalized error per backbone tap `S0..`, averaged over angles.
    pub eps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn eps_column(&self, stage: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.eps[stage]).collect()
    }

    /// `epoch,loss,accuracy,angular_error_deg,eps_S0,...`.
    pub fn to_csv(&self) -> Result<String> {
        let taps = self.records.first().map_or(0, |r| r.eps.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["epoch", "loss", "accuracy", "angular_error_deg"].map(String::from).to_vec();
        header.extend((0..taps).map(|i| format!("eps_S{i}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                r.loss.to_string(),
                r.accuracy.to_string(),
                r.angular_error_deg.to_string(),
            ];
            row.extend(r.eps.iter().map(|e| e.to_string()));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut records = Vec::new();
        for row in r.records() {
            let row = row?;
            let num = |i: usize| -> Result<f64> {
                row.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::invalid(format!("bad training csv field {i}")))
            };
            records.push(EpochRecord {
                epoch: num(0)? as usize,
                loss: num(1)?,
                accuracy: num(2)?,
                angular_error_deg: num(3)?,
                eps: (4..row.len()).map(num).collect::<Result<_>>()?,
            });
        }
        Ok(TrainingHistory { records })
    }
}

/// Optimizer state and progress, enough to continue training bitwise.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub optim: OptimState<f32>,
    pub history: TrainingHistory,
}

impl TrainState {
    pub fn new(model: &Model, config: AdamWConfig) -> Self {
        let shapes: Vec<Vec<usize>> = model
            .params()
            .trainable_ids()
            .into_iter()
            .map(|id| model.params().get(id).shape().to_vec())
            .collect();
        TrainState {
            epoch: 0,
            optim: OptimState::new(config, &shapes),
            history: TrainingHistory { records: Vec::new() },
        }
    }

    /// Model, moments and history in one checkpoint.
    pub fn to_checkpoint(&self, model: &Model, seed: u64) -> Checkpoint {
        let mut tensors = model.named_tensors();
        let names: Vec<String> = model
            .params()
            .trainable_ids()
            .into_iter()
            .map(|id| model.params().param(id).name.clone())
            .collect();
        for (i, name) in names.iter().enumerate() {
            tensors.push((format!("adam_m/{name}"), self.optim.m[i].clone()));
            tensors.push((format!("adam_v/{name}"), self.optim.v[i].clone()));
        }
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("step".into(), self.optim.step.to_string());
        meta.insert("seed".into(), seed.to_string());
        meta.insert("fingerprint".into(), model.fingerprint());
        let o = self.optim.config;
        meta.insert(
            "optimizer".into(),
            format!("{},{},{},{},{}", o.lr, o.weight_decay, o.beta1, o.beta2, o.eps),
        );
        for r in &self.history.records {
            let mut fields = vec![r.loss.to_string(), r.accuracy.to_string(), r.angular_error_deg.to_string()];
            fields.extend(r.eps.iter().map(|e| e.to_string()));
            meta.insert(format!("history.{:06}", r.epoch), fields.join(","));
        }
        Checkpoint {
            meta,
            config: model.config().clone(),
            tensors,
        }
    }

    /// Rebuild model and training state from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Model, TrainState)> {
        let mut model = Model::build(&ck.config, &mut Rng::new(0))?;
        model.load_tensors(&ck.tensors)?;
        let opt: Vec<f64> = ck
            .meta
            .get("optimizer")
            .map(|s| s.split(',').filter_map(|v| v.parse().ok()).collect())
            .unwrap_or_default();
        let config = match opt[..] {
            [lr, weight_decay, beta1, beta2, eps] => AdamWConfig {
                lr,
                weight_decay,
                beta1,
                beta2,
                eps,
            },
            _ => return Err(Error::Checkpoint("missing optimizer settings".into())),
        };
        let mut state = TrainState::new(&model, config);
        state.epoch = ck.meta_parse("epoch")?;
        state.optim.step = ck.meta_parse("step")?;
        let names: Vec<String> = model
            .params()
            .trainable_ids()
            .into_iter()
            .map(|id| model.params().param(id).name.clone())
            .collect();
        for (i, name) in names.iter().enumerate() {
            for (prefix, slot) in [("adam_m", &mut state.optim.m[i]), ("adam_v", &mut state.optim.v[i])] {
                let t = ck
                    .tensor(&format!("{prefix}/{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}/{name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!("{prefix}/{name}: shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        for (key, value) in ck.meta.range("history.".to_string()..) {
            let Some(epoch) = key.strip_prefix("history.") else { break };
            let v: Vec<f64> = value
                .split(',')
                .map(|x| x.parse().map_err(|_| Error::Checkpoint(format!("bad {key}"))))
                .collect::<Result<_>>()?;
            if v.len() < 3 {
                return Err(Error::Checkpoint(format!("bad {key}")));
            }
            state.history.records.push(EpochRecord {
                epoch: epoch.parse().map_err(|_| Error::Checkpoint(format!("bad {key}")))?,
                loss: v[0],
                accuracy: v[1],
                angular_error_deg: v[2],
                eps: v[3..].to_vec(),
            });
        }
        Ok((model, state))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub angular_error_deg: f64,
    pub classes: Vec<usize>,
    pub angles: Vec<f64>,
}

/// Evaluation-mode loss and metrics over `samples`.
pub fn evaluate(model: &Model, samples: &Samples, batch_size: usize, angle_weight: f64) -> Result<Evaluation> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::invalid("evaluation on an empty split"));
    }
    let (mut loss, mut correct, mut ang) = (0.0, 0usize, 0.0);
    let mut classes = Vec::with_capacity(n);
    let mut angles = Vec::with_capacity(n);
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size.max(1)).min(n)).collect();
        let b = samples.select(&idx)?;
        let graph = Graph::inference();
        let ctx = Ctx::new(&graph, model.params(), false);
        let out = model.forward(&ctx, graph.constant(b.images.clone()))?;
        let ce = out.logits.cross_entropy(&b.labels)?.value().item()? as f64;
        let al = out.angle.angular_loss(&b.thetas, &b.orders)?.value().item()? as f64;
        loss += (ce + angle_weight * al) * idx.len() as f64;
        let logits = out.logits.value();
        let k = logits.shape()[1];
        for (i, row) in logits.data().chunks_exact(k).enumerate() {
            let pred = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            correct += (pred == b.labels[i]) as usize;
            classes.push(pred);
        }
        // read the readout in f64 from the f32 graph value
        for (i, &a) in out.angle.value().data().iter().enumerate() {
            let a = a as f64;
            ang += angular_error_deg(a, b.thetas[i], b.orders[i]);
            angles.push(a);
        }
    }
    Ok(Evaluation {
        loss: loss / n as f64,
        accuracy: correct as f64 / n as f64,
        angular_error_deg: ang / n as f64,
        classes,
        angles,
    })
}

fn record(model: &Model, data: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<EpochRecord> {
    let ev = evaluate(model, &data.test, cfg.eval_batch_size, cfg.angle_loss_weight)?;
    let m = cfg.eps_samples.min(data.test.len());
    let taps = model.config().stages.len() + 1;
    let mut eps = vec![0.0; taps];
    if m > 0 && !cfg.eps_angles.is_empty() {
        let inputs = data.test.images.narrow0(0, m)?;
        let report = stagewise_error(model, &inputs, &cfg.eps_angles)?;
        for (i, slot) in eps.iter_mut().enumerate() {
            let name = format!("S{i}");
            let vals: Vec<f64> = report
                .entries
                .iter()
                .filter(|e| e.stage == name)
                .map(|e| e.epsilon_normalized)
                .collect();
            *slot = vals.iter().sum::<f64>() / vals.len() as f64;
        }
    }
    Ok(EpochRecord {
        epoch,
        loss: ev.loss,
        accuracy: ev.accuracy,
        angular_error_deg: ev.angular_error_deg,
        eps,
    })
}

/// Run one optimisation step on `batch`; returns the training loss.
pub fn train_step(model: &mut Model, batch: &Samples, state: &mut OptimState<f32>, lr: f64, angle_weight: f64) -> Result<f64> {
    let (grads, updates, loss) = {
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, model.params(), true);
        let out = model.forward(&ctx, graph.constant(batch.images.clone()))?;
        let ce = out.logits.cross_entropy(&batch.labels)?;
        let al = out.angle.angular_loss(&batch.thetas, &batch.orders)?;
        let loss = ce.add(al.scale(angle_weight)?)?;
        let value = loss.value().item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {value}")));
        }
        let mut g = graph.backward(loss)?;
        (ctx.param_grads(&mut g), ctx.take_updates(), value)
    };
    let store = model.params_mut();
    let decay: Vec<bool> = grads.iter().map(|(id, _)| store.param(*id).kind == ParamKind::Weight).collect();
    let mut values: Vec<Tensor<f32>> = grads.iter().map(|(id, _)| store.get(*id).clone()).collect();
    let g: Vec<Tensor<f32>> = grads.iter().map(|(_, t)| t.clone()).collect();
    adamw_step(&mut values, &g, &decay, state, lr)?;
    for ((id, _), v) in grads.iter().zip(values) {
        store.set(*id, v)?;
    }
    store.apply_updates(updates)?;
    Ok(loss)
}

/// Train `model` on `data.train`, recording test metrics and stagewise error
/// after every epoch (and for the initial state). `resume` continues a run
/// exactly where its checkpoint left off. `on_epoch` runs after each record.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    on_epoch: &mut dyn FnMut(&Model, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let mut state = match resume {
        Some(s) => s,
        None => {
            let mut s = TrainState::new(model, cfg.optimizer);
            s.history.records.push(record(model, data, cfg, 0)?);
            on_epoch(model, &s)?;
            s
        }
    };
    let root = Rng::new(cfg.seed);
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..n).collect();
        root.fork(epoch as u64).shuffle(&mut order);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.train.select(chunk)?;
            let lr = learning_rate(cfg.optimizer.lr, state.optim.step, total);
            match train_step(model, &batch, &mut state.optim, lr, cfg.angle_loss_weight) {
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        step: b,
                        loss: f64::NAN,
                    })
                }
                other => other?,
            };
        }
        state.epoch = epoch;
        state.history.records.push(record(model, data, cfg, epoch)?);
        on_epoch(model, &state)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{gen_dataset, DatasetSpec};
    use crate::layers::DownsampleMode;
    use crate::model::NetworkConfig;

    fn tiny() -> (NetworkConfig, Dataset, TrainConfig) {
        let mut cfg = NetworkConfig::default().with_orientations(4).with_mode(DownsampleMode::Approx);
        cfg.input_size = 16;
        cfg.stem.channels = 4;
        cfg.stages.truncate(2);
        cfg.stages[0].channels = 8;
        cfg.stages[1].channels = 8;
        cfg.head.hidden_channels = 8;
        let data = gen_dataset(&DatasetSpec {
            n_train: 16,
            n_test: 8,
            image_size: 16,
            ..DatasetSpec::default()
        })
        .unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 8,
            eps_samples: 2,
            optimizer: AdamWConfig {
                lr: 1e-2,
                ..AdamWConfig::default()
            },
            ..TrainConfig::default()
        };
        (cfg, data, tc)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (cfg, data, mut tc) = tiny();
        tc.optimizer.lr = 0.0;
        let mut model = Model::build(&cfg, &mut Rng::new(0)).unwrap();
        let before = model.params().clone();
        train(&mut model, &data, &tc, None, &mut |_, _| Ok(())).unwrap();
        for id in before.trainable_ids() {
            assert_eq!(before.get(id), model.params().get(id));
        }
    }

    #[test]
    fn history_and_determinism() {
        let (cfg, data, tc) = tiny();
        let run = || {
            let mut model = Model::build(&cfg, &mut Rng::new(1)).unwrap();
            let s = train(&mut model, &data, &tc, None, &mut |_, _| Ok(())).unwrap();
            (model.fingerprint(), s.history)
        };
        let (fa, ha) = run();
        let (fb, hb) = run();
        assert_eq!(fa, fb);
        assert_eq!(ha, hb);
        assert_eq!(ha.records.len(), 3);
        assert_eq!(ha.records[0].eps.len(), 3);
        let text = ha.to_csv().unwrap();
        assert!(text.starts_with("epoch,loss,accuracy,angular_error_deg,eps_S0,eps_S1,eps_S2\n"));
        assert_eq!(TrainingHistory::from_csv(&text).unwrap(), ha);
    }

    #[test]
    fn resume_is_bitwise() {
        let (cfg, data, tc) = tiny();
        let mut full = Model::build(&cfg, &mut Rng::new(2)).unwrap();
        let mut saved = None;
        let end = train(&mut full, &data, &tc, None, &mut |m, s| {
            if s.epoch == 1 {
                saved = Some(s.to_checkpoint(m, tc.seed).to_bytes().unwrap());
            }
            Ok(())
        })
        .unwrap();
        let ck = Checkpoint::from_bytes(&saved.unwrap()).unwrap();
        let (mut model, state) = TrainState::from_checkpoint(&ck).unwrap();
        assert_eq!(state.epoch, 1);
        let resumed = train(&mut model, &data, &tc, Some(state), &mut |_, _| Ok(())).unwrap();
        assert_eq!(model.fingerprint(), full.fingerprint());
        assert_eq!(resumed, end);
    }

    #[test]
    fn divergence_is_reported() {
        let (cfg, mut data, tc) = tiny();
        data.train.images.data_mut()[0] = f32::NAN;
        let mut model = Model::build(&cfg, &mut Rng::new(3)).unwrap();
        let err = train(&mut model, &data, &tc, None, &mut |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }) || matches!(err, Error::NonFinite(_)), "{err}");
    }
}
