//! Training loops for the fine-grained, semantic and joint models.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{Batch, BatchIterator, FrameSet};
use crate::encoder::{
    ema_schedule, project_and_predict, target_backbone, target_projection, update_running_stats, Bound,
    EncoderPair, ModelKind, NetParams, NormMode, GLOBAL_PRED, GLOBAL_PROJ,
};
use crate::engine::{AdamState, GradCheck, GradReport, Graph, Scalar, Tensor, Var};
use crate::error::{Result, SfcError};
use crate::geometry::PositiveMask;
use crate::objectives::{dense_local_loss, global_byol_loss, info_nce, joint_loss, NegativeQueue};

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub local: Option<f64>,
    pub global: Option<f64>,
    pub info_nce: Option<f64>,
    pub positives: usize,
}

/// One CSV row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: StepLoss,
    pub momentum: f64,
    pub skipped: usize,
}

pub const LOG_HEADER: &str = "step,total,local,global,info_nce,positives,momentum,skipped";

impl LogRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.loss.total,
            opt(self.loss.local),
            opt(self.loss.global),
            opt(self.loss.info_nce),
            self.loss.positives,
            self.momentum,
            self.skipped
        )
    }
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| SfcError::io(path, e))?;
    let mut text = format!("{LOG_HEADER}\n");
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| SfcError::io(path, e))
}

/// Global average pool of an `[N,C,H,W]` constant.
fn pool<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let inv = T::c(1.0 / hw as f64);
    let data = t
        .data()
        .chunks(hw)
        .map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::new(vec![n, c], data)
}

/// Dense local loss averaged over the batch. `f_online` is `[N,C,G,G]`.
fn dense_term<T: Scalar>(
    g: &mut Graph<T>,
    online: &mut Bound<'_, T>,
    target: &NetParams<T>,
    f_online: Var,
    f_target: &Tensor<T>,
    masks: &[PositiveMask],
) -> Result<(Var, usize)> {
    let (p1, z2) = project_and_predict(g, online, target, f_online, f_target, NormMode::Train)?;
    let s = g.value(p1).shape().to_vec();
    let (n, d, cells) = (s[0], s[1], s[2] * s[3]);
    if masks.len() != n {
        return Err(SfcError::shape("dense_local_loss", format!("{} masks for batch {n}", masks.len())));
    }
    let p = g.channels_last(p1)?;
    let p = g.reshape(p, &[n * cells, d])?;
    let z = g.channels_last(z2)?;
    let z = g.reshape(z, &[n * cells, d])?;
    let mut sum: Option<Var> = None;
    for (i, mask) in masks.iter().enumerate() {
        let pi = g.slice_rows(p, i * cells, (i + 1) * cells)?;
        let zi = g.slice_rows(z, i * cells, (i + 1) * cells)?;
        let l = dense_local_loss(g, pi, zi, mask)?;
        sum = Some(match sum {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    let total = sum.ok_or(SfcError::DegenerateBatch(0))?;
    let positives = masks.iter().map(PositiveMask::count).sum();
    Ok((g.scale(total, T::c(1.0 / n as f64))?, positives))
}

/// Image-level BYOL term on pooled backbone features.
fn global_term<T: Scalar>(
    g: &mut Graph<T>,
    online: &mut Bound<'_, T>,
    target: &NetParams<T>,
    f_online: Var,
    f_target: &Tensor<T>,
) -> Result<Var> {
    let z1 = online.pooled_head(g, GLOBAL_PROJ, f_online)?;
    let p1 = online.vector_head(g, GLOBAL_PRED, z1)?;
    let z2 = target_projection(target, GLOBAL_PROJ, &pool(f_target)?, NormMode::Train)?;
    let z2 = g.leaf(z2, false);
    global_byol_loss(g, p1, z2)
}

/// Loss graph nodes of one step.
pub struct LossGraph {
    pub total: Var,
    pub local: Option<Var>,
    pub global: Option<Var>,
    pub info_nce: Option<Var>,
    pub positives: usize,
    /// Normalized target embeddings, to be enqueued after the step.
    pub keys: Option<Tensor<f64>>,
}

/// Everything a loss graph needs besides the online weights.
pub struct StepContext<'a, T> {
    pub config: &'a Config,
    pub kind: ModelKind,
    pub target: &'a NetParams<T>,
    pub view1: &'a Tensor<T>,
    pub view2: &'a Tensor<T>,
    pub masks: &'a [PositiveMask],
    pub queue: Option<&'a NegativeQueue>,
}

/// Build the loss of one step on top of a bound online network.
pub fn build_loss<T: Scalar>(g: &mut Graph<T>, online: &mut Bound<'_, T>, ctx: &StepContext<'_, T>) -> Result<LossGraph> {
    let cfg = &ctx.config.backbone;
    let x1 = g.leaf(ctx.view1.clone(), false);
    let f1 = online.backbone(g, cfg, x1)?;
    let f2 = target_backbone(ctx.target, cfg, ctx.view2, NormMode::Train)?;
    match ctx.kind {
        ModelKind::Semantic => {
            let queue = ctx
                .queue
                .ok_or_else(|| SfcError::Config("semantic training needs a negative queue".into()))?;
            let z1 = online.pooled_head(g, GLOBAL_PROJ, f1)?;
            let z1 = g.l2_normalize(z1)?;
            let z2 = target_projection(ctx.target, GLOBAL_PROJ, &pool(&f2)?, NormMode::Train)?;
            let z2 = g.leaf(z2, false);
            let z2 = g.l2_normalize(z2)?;
            let keys = g.value(z2).cast::<f64>();
            let l = info_nce(g, z1, z2, queue, ctx.config.loss.tau)?;
            Ok(LossGraph {
                total: l,
                local: None,
                global: None,
                info_nce: Some(l),
                positives: 0,
                keys: Some(keys),
            })
        }
        ModelKind::Fine | ModelKind::Joint => {
            let (mut local, mut positives) = dense_term(g, online, ctx.target, f1, &f2, ctx.masks)?;
            if ctx.config.loss.symmetrize {
                let x2 = g.leaf(ctx.view2.clone(), false);
                let f1b = online.backbone(g, cfg, x2)?;
                let f2b = target_backbone(ctx.target, cfg, ctx.view1, NormMode::Train)?;
                let back: Vec<PositiveMask> = ctx.masks.iter().map(PositiveMask::transposed).collect();
                let (other, pos) = dense_term(g, online, ctx.target, f1b, &f2b, &back)?;
                let both = g.add(local, other)?;
                local = g.scale(both, T::c(0.5))?;
                positives += pos;
            }
            if ctx.kind == ModelKind::Fine {
                return Ok(LossGraph {
                    total: local,
                    local: Some(local),
                    global: None,
                    info_nce: None,
                    positives,
                    keys: None,
                });
            }
            let global = global_term(g, online, ctx.target, f1, &f2)?;
            let total = joint_loss(g, local, global, ctx.config.loss.alpha)?;
            Ok(LossGraph {
                total,
                local: Some(local),
                global: Some(global),
                info_nce: None,
                positives,
                keys: None,
            })
        }
    }
}

/// Online/target networks with optimizer state.
pub struct Trainer<T> {
    pub config: Config,
    pub pair: EncoderPair<T>,
    pub adam: AdamState<T>,
    pub queue: Option<NegativeQueue>,
    pub step: usize,
    pub skipped: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &Config, kind: ModelKind) -> Result<Self> {
        config.validate()?;
        let pair = EncoderPair::<T>::init(&config.encoder(kind), config.seed)?;
        let adam = AdamState::new(config.adam(), pair.online.weights.tensors());
        let queue = if kind == ModelKind::Semantic {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(7);
            Some(NegativeQueue::seeded(config.loss.queue, config.heads.out, &mut rng)?)
        } else {
            None
        };
        Ok(Trainer {
            config: config.clone(),
            pair,
            adam,
            queue,
            step: 0,
            skipped: 0,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.pair.config.kind
    }

    /// One optimization step. Returns `None` when the batch was skipped
    /// because a positive mask came out empty.
    pub fn step(&mut self, view1: &Tensor<T>, view2: &Tensor<T>, masks: &[PositiveMask]) -> Result<Option<StepLoss>> {
        let mut g = Graph::new();
        let mut online = Bound::new(&mut g, &self.pair.online, true, NormMode::Train);
        let ctx = StepContext {
            config: &self.config,
            kind: self.kind(),
            target: &self.pair.target,
            view1,
            view2,
            masks,
            queue: self.queue.as_ref(),
        };
        let lg = match build_loss(&mut g, &mut online, &ctx) {
            Err(SfcError::EmptyMask) => {
                self.skipped += 1;
                warn!("step {}: empty positive mask, batch skipped", self.step);
                return Ok(None);
            }
            other => other?,
        };
        g.backward(lg.total)?;
        let vars = online.vars().to_vec();
        let stats = online.take_stats();
        let value = |v: Option<Var>| v.map(|v| g.value(v).item().f64());
        let loss = StepLoss {
            total: g.value(lg.total).item().f64(),
            local: value(lg.local),
            global: value(lg.global),
            info_nce: value(lg.info_nce),
            positives: lg.positives,
        };
        let zeros: Vec<Tensor<T>> = self.pair.online.weights.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let grads: Vec<&Tensor<T>> = vars
            .iter()
            .zip(&zeros)
            .map(|(&v, z)| g.grad(v).unwrap_or(z))
            .collect();
        let names: Vec<String> = self.pair.online.weights.names().to_vec();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        {
            let mut params: Vec<&mut Tensor<T>> = self.pair.online.weights.tensors_mut().iter_mut().collect();
            self.adam.update(&names, &mut params, &grads)?;
        }
        update_running_stats(&mut self.pair.online, &stats)?;
        let m = ema_schedule(self.step, self.config.optim.steps, self.config.optim.ema_m0);
        self.pair.ema_update(m)?;
        if let (Some(q), Some(keys)) = (self.queue.as_mut(), lg.keys) {
            q.enqueue(&keys)?;
        }
        self.step += 1;
        Ok(Some(loss))
    }

    pub fn step_batch(&mut self, batch: &Batch) -> Result<Option<StepLoss>> {
        let masks: Vec<PositiveMask> = batch.geometry.iter().map(|g| g.mask.clone()).collect();
        self.step(&batch.view1.cast(), &batch.view2.cast(), &masks)
    }
}

/// Finite-difference check of the full loss of one step, at 64-bit, with
/// respect to the online weights.
pub fn gradcheck_step(
    config: &Config,
    pair: &EncoderPair<f64>,
    queue: Option<&NegativeQueue>,
    batch: &Batch,
    probes: Option<usize>,
) -> Result<GradReport> {
    let view1 = batch.view1.cast::<f64>();
    let view2 = batch.view2.cast::<f64>();
    let masks: Vec<PositiveMask> = batch.geometry.iter().map(|g| g.mask.clone()).collect();
    let ctx = StepContext {
        config,
        kind: pair.config.kind,
        target: &pair.target,
        view1: &view1,
        view2: &view2,
        masks: &masks,
        queue,
    };
    let check = GradCheck {
        probes,
        ..GradCheck::default()
    };
    check.run(
        &format!("{}_loss", pair.config.kind.name()),
        pair.online.weights.tensors(),
        |g, vars| {
            let mut online = Bound::from_vars(&pair.online, vars.to_vec(), NormMode::Train)?;
            Ok(build_loss(g, &mut online, &ctx)?.total)
        },
    )
}

/// Result of a full training run.
pub struct TrainOutcome {
    pub trainer: Trainer<f32>,
    pub log: Vec<LogRow>,
}

/// Frames for training: the dataset directory if configured, otherwise
/// `data.videos` synthetic scenes.
pub fn training_frames(config: &Config) -> Result<FrameSet> {
    if config.data.dir.is_empty() {
        FrameSet::synthetic(&config.scene_spec(), config.data.videos, config.data.seed)
    } else {
        FrameSet::load_dir(&config.data.dir)
    }
}

/// Run `config.optim.steps` steps. `on_row` sees every logged row.
pub fn train(config: &Config, kind: ModelKind, frames: FrameSet, mut on_row: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::<f32>::new(config, kind)?;
    let mut batches = BatchIterator::new(
        frames,
        config.optim.batch,
        config.sampler()?,
        config.loss.radius,
        config.augmentation(),
        config.seed,
    )?;
    let mut log = Vec::new();
    let every = config.optim.log_every.max(1);
    for step in 0..config.optim.steps {
        let batch = batches.next_batch()?;
        let momentum = ema_schedule(step, config.optim.steps, config.optim.ema_m0);
        if let Some(loss) = trainer.step_batch(&batch)? {
            if step % every == 0 || step + 1 == config.optim.steps {
                let row = LogRow {
                    step,
                    loss,
                    momentum,
                    skipped: trainer.skipped,
                };
                on_row(&row);
                log.push(row);
            }
        }
    }
    info!(
        "{} training done: {} steps, {} skipped",
        kind.name(),
        config.optim.steps,
        trainer.skipped
    );
    Ok(TrainOutcome { trainer, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Config {
        let mut c = Config::default();
        c.backbone.widths = vec![4, 6];
        c.backbone.strides = vec![2, 2];
        c.backbone.kernels = vec![3, 3];
        c.backbone.input_size = 16;
        c.heads.hidden = 8;
        c.heads.out = 4;
        c.optim.batch = 2;
        c.optim.steps = 3;
        c.optim.log_every = 1;
        c.loss.queue = 8;
        c.data.frame_size = 32;
        c.data.frames = 2;
        c.data.videos = 2;
        c.data.sprite_min = 8.0;
        c.data.sprite_max = 12.0;
        c
    }

    fn frames(c: &Config) -> FrameSet {
        FrameSet::synthetic(&c.scene_spec(), c.data.videos, c.data.seed).unwrap()
    }

    #[test]
    fn every_kind_trains_and_logs() {
        let c = tiny();
        for kind in [ModelKind::Fine, ModelKind::Semantic, ModelKind::Joint] {
            let out = train(&c, kind, frames(&c), |_| {}).unwrap();
            assert_eq!(out.log.len(), 3);
            assert_eq!(out.trainer.step, 3);
            let r = out.log[0].loss;
            match kind {
                ModelKind::Fine => assert!(r.local.is_some() && r.global.is_none()),
                ModelKind::Semantic => assert!(r.info_nce.is_some()),
                ModelKind::Joint => assert!(r.local.is_some() && r.global.is_some()),
            }
            assert!(r.total.is_finite());
        }
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let mut c = tiny();
        c.optim.steps = 0;
        let out = train(&c, ModelKind::Fine, frames(&c), |_| {}).unwrap();
        assert_eq!(out.trainer.pair, EncoderPair::init(&c.encoder(ModelKind::Fine), c.seed).unwrap());
    }

    #[test]
    fn joint_and_symmetric_losses_pass_gradcheck() {
        let mut c = tiny();
        c.loss.symmetrize = true;
        let mut it = BatchIterator::new(frames(&c), 2, c.sampler().unwrap(), 0.5, c.augmentation(), 1).unwrap();
        let batch = it.next_batch().unwrap();
        let pair = EncoderPair::<f64>::init(&c.encoder(ModelKind::Joint), 4).unwrap();
        let rep = gradcheck_step(&c, &pair, None, &batch, Some(200)).unwrap();
        assert!(rep.elements >= 150, "{rep:?}");
    }
}
