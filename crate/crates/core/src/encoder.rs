//! Convolutional backbone, 1×1-conv heads and the online/target pair.
//!
//! Parameters live in flat, name-ordered stores (`backbone.0.conv.weight`,
//! `dense_proj.fc1.weight`, ...). The target store holds the same names as
//! the online store minus every prediction head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{BatchStats, BnMode, Graph, Scalar, Tensor, Var};
use crate::error::{Result, SfcError};

/// Momentum applied to running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Plain conv-BN-ReLU stack.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernels: Vec<usize>,
    pub input_size: usize,
    /// Add identity skips around blocks whose shape is preserved.
    pub residual: bool,
}

impl BackboneConfig {
    /// Desk-scale fine-grained backbone: 64 px in, 16×16 grid out.
    pub fn fc_small() -> Self {
        BackboneConfig {
            widths: vec![24, 32, 48, 64],
            strides: vec![2, 1, 2, 1],
            kernels: vec![3, 3, 3, 3],
            input_size: 64,
            residual: false,
        }
    }

    /// Same widths with an extra stride-2 stage: 8×8 grid at 64 px.
    pub fn fc_small_coarse() -> Self {
        BackboneConfig {
            strides: vec![2, 2, 2, 1],
            ..Self::fc_small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 || self.strides.len() != n || self.kernels.len() != n {
            return Err(SfcError::Config(format!(
                "backbone needs equal-length widths/strides/kernels, got {}/{}/{}",
                n,
                self.strides.len(),
                self.kernels.len()
            )));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(SfcError::Config(format!(
                "backbone strides must be 1 or 2, got {:?}",
                self.strides
            )));
        }
        if self.kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(SfcError::Config(format!(
                "backbone kernels must be odd, got {:?}",
                self.kernels
            )));
        }
        if self.widths.contains(&0) {
            return Err(SfcError::Config("backbone widths must be positive".into()));
        }
        let total: usize = self.strides.iter().product();
        if self.input_size == 0 || !self.input_size.is_multiple_of(total) {
            return Err(SfcError::Config(format!(
                "input size {} is not divisible by the stride product {total}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<usize> {
        self.validate()?;
        Ok(self.input_size / self.strides.iter().product::<usize>())
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }
}

/// Layout: 1×1 conv → BN → ReLU → 1×1 conv.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub hidden: usize,
    pub out: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { hidden: 256, out: 64 }
    }
}

/// Which heads a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Dense projection + prediction heads.
    Fine,
    /// Image-level projection head on pooled features, no predictor.
    Semantic,
    /// Dense heads plus separate image-level projection + prediction heads.
    Joint,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fine => "fine",
            ModelKind::Semantic => "semantic",
            ModelKind::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fine" => Some(ModelKind::Fine),
            "semantic" => Some(ModelKind::Semantic),
            "joint" => Some(ModelKind::Joint),
            _ => None,
        }
    }

    fn heads(self) -> &'static [(&'static str, bool)] {
        // (name, online only)
        match self {
            ModelKind::Fine => &[(DENSE_PROJ, false), (DENSE_PRED, true)],
            ModelKind::Semantic => &[(GLOBAL_PROJ, false)],
            ModelKind::Joint => &[
                (DENSE_PROJ, false),
                (DENSE_PRED, true),
                (GLOBAL_PROJ, false),
                (GLOBAL_PRED, true),
            ],
        }
    }
}

pub const DENSE_PROJ: &str = "dense_proj";
pub const DENSE_PRED: &str = "dense_pred";
pub const GLOBAL_PROJ: &str = "global_proj";
pub const GLOBAL_PRED: &str = "global_pred";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub kind: ModelKind,
}

impl EncoderConfig {
    pub fn fc_small() -> Self {
        EncoderConfig {
            backbone: BackboneConfig::fc_small(),
            head: HeadConfig::default(),
            kind: ModelKind::Fine,
        }
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        match self.index_of(&name) {
            Some(i) => self.tensors[i] = t,
            None => {
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| SfcError::Config(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Trainable weights plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NetParams<T> {
    pub weights: ParamStore<T>,
    pub buffers: ParamStore<T>,
}

impl<T: Scalar> NetParams<T> {
    pub fn cast<U: Scalar>(&self) -> NetParams<U> {
        NetParams {
            weights: self.weights.cast(),
            buffers: self.buffers.cast(),
        }
    }

    pub fn has_head(&self, head: &str) -> bool {
        self.weights.get(&format!("{head}.fc1.weight")).is_some()
    }
}

/// Online parameters and their slowly-moving target copy.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair<T> {
    pub config: EncoderConfig,
    pub online: NetParams<T>,
    pub target: NetParams<T>,
}

fn kaiming_uniform<R: Rng>(rng: &mut R, shape: &[usize]) -> Vec<f64> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn tensor<T: Scalar>(shape: &[usize], data: Vec<f64>) -> Tensor<T> {
    Tensor::new(shape.to_vec(), data.into_iter().map(T::c).collect()).expect("init shape")
}

fn add_bn<T: Scalar>(p: &mut NetParams<T>, prefix: &str, c: usize) {
    p.weights.insert(format!("{prefix}.gamma"), Tensor::full(&[c], T::one()));
    p.weights.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
    p.buffers.insert(format!("{prefix}.mean"), Tensor::zeros(&[c]));
    p.buffers.insert(format!("{prefix}.var"), Tensor::full(&[c], T::one()));
}

fn add_head<T: Scalar, R: Rng>(p: &mut NetParams<T>, rng: &mut R, name: &str, input: usize, cfg: HeadConfig) {
    let s1 = [cfg.hidden, input, 1, 1];
    p.weights.insert(format!("{name}.fc1.weight"), tensor(&s1, kaiming_uniform(rng, &s1)));
    add_bn(p, &format!("{name}.bn"), cfg.hidden);
    let s2 = [cfg.out, cfg.hidden, 1, 1];
    p.weights.insert(format!("{name}.fc2.weight"), tensor(&s2, kaiming_uniform(rng, &s2)));
    p.weights.insert(format!("{name}.fc2.bias"), Tensor::zeros(&[cfg.out]));
}

impl<T: Scalar> EncoderPair<T> {
    /// Kaiming-uniform convolutions, zero biases, identity batch norms; the
    /// target starts as an exact copy of the online network.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.backbone.validate()?;
        if config.head.hidden == 0 || config.head.out == 0 {
            return Err(SfcError::Config("head widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut online = NetParams::default();
        let bb = &config.backbone;
        let mut cin = 3;
        for (i, (&w, &k)) in bb.widths.iter().zip(&bb.kernels).enumerate() {
            let shape = [w, cin, k, k];
            online
                .weights
                .insert(format!("backbone.{i}.conv.weight"), tensor(&shape, kaiming_uniform(&mut rng, &shape)));
            add_bn(&mut online, &format!("backbone.{i}.bn"), w);
            cin = w;
        }
        let feat = bb.out_channels();
        for &(head, _) in config.kind.heads() {
            let input = if head == DENSE_PRED || head == GLOBAL_PRED {
                config.head.out
            } else {
                feat
            };
            add_head(&mut online, &mut rng, head, input, config.head);
        }
        let target = Self::target_view(config, &online);
        Ok(EncoderPair {
            config: config.clone(),
            online,
            target,
        })
    }

    fn target_view(config: &EncoderConfig, online: &NetParams<T>) -> NetParams<T> {
        let online_only: Vec<&str> = config
            .kind
            .heads()
            .iter()
            .filter(|(_, only)| *only)
            .map(|(n, _)| *n)
            .collect();
        let keep = |name: &str| !online_only.iter().any(|h| name.starts_with(&format!("{h}.")));
        let mut target = NetParams::default();
        for (n, t) in online.weights.iter().filter(|(n, _)| keep(n)) {
            target.weights.insert(n, t.clone());
        }
        for (n, t) in online.buffers.iter().filter(|(n, _)| keep(n)) {
            target.buffers.insert(n, t.clone());
        }
        target
    }

    /// Number of online trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.online.weights.numel()
    }

    pub fn grid(&self) -> usize {
        self.config.backbone.input_size / self.config.backbone.strides.iter().product::<usize>()
    }

    /// `ξ ← m·ξ + (1−m)·θ` for every target weight and buffer.
    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(SfcError::Config(format!("EMA momentum must lie in [0,1], got {m}")));
        }
        let mt = T::c(m);
        let one_m = T::c(1.0 - m);
        for (store_t, store_o) in [
            (&mut self.target.weights, &self.online.weights),
            (&mut self.target.buffers, &self.online.buffers),
        ] {
            for i in 0..store_t.len() {
                let name = store_t.names[i].clone();
                let src = store_o
                    .get(&name)
                    .ok_or_else(|| SfcError::Config(format!("online network lacks `{name}`")))?;
                let dst = &mut store_t.tensors[i];
                if dst.shape() != src.shape() {
                    return Err(SfcError::shape(
                        "ema_update",
                        format!("`{name}`: target {:?} vs online {:?}", dst.shape(), src.shape()),
                    ));
                }
                if m == 1.0 {
                    continue;
                }
                if m == 0.0 {
                    dst.data_mut().copy_from_slice(src.data());
                    continue;
                }
                for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                    *d = mt * *d + one_m * s;
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> EncoderPair<U> {
        EncoderPair {
            config: self.config.clone(),
            online: self.online.cast(),
            target: self.target.cast(),
        }
    }
}

/// Cosine-increasing EMA momentum: `1 − (1−m0)(cos(π·step/total)+1)/2`.
pub fn ema_schedule(step: usize, total_steps: usize, m0: f64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    1.0 - (1.0 - m0) * ((std::f64::consts::PI * s).cos() + 1.0) / 2.0
}

/// Batch-norm behavior for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; collected so the caller can fold them into the
    /// running buffers.
    Train,
    /// Running statistics.
    Eval,
}

/// A parameter set placed into one graph.
pub struct Bound<'p, T> {
    params: &'p NetParams<T>,
    vars: Vec<Var>,
    mode: NormMode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<'p, T: Scalar> Bound<'p, T> {
    /// Add every weight of `params` to `g` as a leaf.
    pub fn new(g: &mut Graph<T>, params: &'p NetParams<T>, trainable: bool, mode: NormMode) -> Self {
        let vars = params
            .weights
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        Bound {
            params,
            vars,
            mode,
            stats: Vec::new(),
        }
    }

    /// Use existing leaves, one per weight in store order.
    pub fn from_vars(params: &'p NetParams<T>, vars: Vec<Var>, mode: NormMode) -> Result<Self> {
        if vars.len() != params.weights.len() {
            return Err(SfcError::shape(
                "bind",
                format!("{} vars for {} weights", vars.len(), params.weights.len()),
            ));
        }
        Ok(Bound {
            params,
            vars,
            mode,
            stats: Vec::new(),
        })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.params
            .weights
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| SfcError::Config(format!("missing parameter `{name}`")))
    }

    /// Batch statistics gathered by train-mode passes, keyed by BN prefix.
    pub fn take_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.stats)
    }

    fn bn(&mut self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        match self.mode {
            NormMode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, BnMode::Train)?;
                if let Some(s) = stats {
                    self.stats.push((prefix.to_string(), s));
                }
                Ok(y)
            }
            NormMode::Eval => {
                let mean = self.params.buffers.require(&format!("{prefix}.mean"))?;
                let var = self.params.buffers.require(&format!("{prefix}.var"))?;
                let (y, _) = g.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnMode::Eval {
                        mean: mean.data(),
                        var: var.data(),
                    },
                )?;
                Ok(y)
            }
        }
    }

    /// Backbone without global pooling: `[N,3,S,S] -> [N,C,G,G]`.
    pub fn backbone(&mut self, g: &mut Graph<T>, cfg: &BackboneConfig, x: Var) -> Result<Var> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != 3 || xs[2] != cfg.input_size || xs[3] != cfg.input_size {
            return Err(SfcError::shape(
                "encode_dense",
                format!(
                    "expected [N,3,{s},{s}] input, got {xs:?}",
                    s = cfg.input_size
                ),
            ));
        }
        let mut h = x;
        for (i, (&stride, &k)) in cfg.strides.iter().zip(&cfg.kernels).enumerate() {
            let w = self.var(&format!("backbone.{i}.conv.weight"))?;
            let y = g.conv2d(h, w, None, stride, k / 2)?;
            let y = self.bn(g, y, &format!("backbone.{i}.bn"))?;
            let y = if cfg.residual && g.value(y).shape() == g.value(h).shape() {
                g.add(y, h)?
            } else {
                y
            };
            h = g.relu(y)?;
        }
        Ok(h)
    }

    /// Dense 1×1-conv head on `[N,C,H,W]`.
    pub fn head(&mut self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let w1 = self.var(&format!("{name}.fc1.weight"))?;
        let y = g.conv2d(x, w1, None, 1, 0)?;
        let y = self.bn(g, y, &format!("{name}.bn"))?;
        let y = g.relu(y)?;
        let w2 = self.var(&format!("{name}.fc2.weight"))?;
        let b2 = self.var(&format!("{name}.fc2.bias"))?;
        g.conv2d(y, w2, Some(b2), 1, 0)
    }

    /// Image-level head: average-pool `[N,C,H,W]` then apply `name` → `[N,D]`.
    pub fn pooled_head(&mut self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        self.vector_head(g, name, pooled)
    }

    /// Head applied to `[N,C]` vectors → `[N,D]`.
    pub fn vector_head(&mut self, g: &mut Graph<T>, name: &str, v: Var) -> Result<Var> {
        let s = g.value(v).shape().to_vec();
        let v4 = g.reshape(v, &[s[0], s[1], 1, 1])?;
        let y = self.head(g, name, v4)?;
        let d = g.value(y).shape()[1];
        g.reshape(y, &[s[0], d])
    }
}

/// Fold train-mode batch statistics into running buffers:
/// `running ← 0.9·running + 0.1·batch`.
pub fn update_running_stats<T: Scalar>(params: &mut NetParams<T>, stats: &[(String, BatchStats<T>)]) -> Result<()> {
    let m = T::c(BN_MOMENTUM);
    let one_m = T::c(1.0 - BN_MOMENTUM);
    for (prefix, s) in stats {
        for (suffix, batch) in [("mean", &s.mean), ("var", &s.var)] {
            let name = format!("{prefix}.{suffix}");
            let buf = params
                .buffers
                .get_mut(&name)
                .ok_or_else(|| SfcError::Config(format!("missing buffer `{name}`")))?;
            for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                *r = m * *r + one_m * b;
            }
        }
    }
    Ok(())
}

/// Channels-last feature grid for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl DenseFeatureMap {
    pub fn new(rows: usize, cols: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols * channels {
            return Err(SfcError::shape(
                "feature_map",
                format!("{} values for {rows}x{cols}x{channels}", data.len()),
            ));
        }
        Ok(DenseFeatureMap {
            rows,
            cols,
            channels,
            data,
        })
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f32] {
        let off = (i * self.cols + j) * self.channels;
        &self.data[off..off + self.channels]
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Split an `[N,C,H,W]` tensor into per-image channels-last maps.
    pub fn from_nchw<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Self>> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(SfcError::shape("feature_map", format!("{s:?} is not NCHW")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let d = t.data();
        Ok((0..n)
            .map(|b| {
                let mut out = vec![0f32; h * w * c];
                for ch in 0..c {
                    for p in 0..h * w {
                        out[p * c + ch] = d[(b * c + ch) * h * w + p].f64() as f32;
                    }
                }
                DenseFeatureMap {
                    rows: h,
                    cols: w,
                    channels: c,
                    data: out,
                }
            })
            .collect())
    }
}

/// Backbone features of `images: [N,3,S,S]` in eval mode.
pub fn encode_dense<T: Scalar>(
    params: &NetParams<T>,
    cfg: &BackboneConfig,
    images: &Tensor<T>,
) -> Result<Vec<DenseFeatureMap>> {
    let mut g = Graph::new();
    let x = g.leaf(images.clone(), false);
    let mut b = Bound::new(&mut g, params, false, NormMode::Eval);
    let f = b.backbone(&mut g, cfg, x)?;
    DenseFeatureMap::from_nchw(g.value(f))
}

/// Dense prediction of the online branch and dense projection of the target
/// branch.
///
/// `p1 = pred(proj(f_online))` is built in `g`. The target projection runs
/// in a private graph and enters `g` as a constant leaf, so no gradient can
/// reach target parameters.
pub fn project_and_predict<T: Scalar>(
    g: &mut Graph<T>,
    online: &mut Bound<'_, T>,
    target: &NetParams<T>,
    f_online: Var,
    f_target: &Tensor<T>,
    target_mode: NormMode,
) -> Result<(Var, Var)> {
    if g.value(f_online).shape() != f_target.shape() {
        return Err(SfcError::shape(
            "project_and_predict",
            format!(
                "online grid {:?} vs target grid {:?}",
                g.value(f_online).shape(),
                f_target.shape()
            ),
        ));
    }
    let z1 = online.head(g, DENSE_PROJ, f_online)?;
    let p1 = online.head(g, DENSE_PRED, z1)?;
    let z2 = target_projection(target, DENSE_PROJ, f_target, target_mode)?;
    let z2 = g.leaf(z2, false);
    Ok((p1, z2))
}

/// Run one target head outside any trainable graph.
pub fn target_projection<T: Scalar>(
    target: &NetParams<T>,
    head: &str,
    features: &Tensor<T>,
    mode: NormMode,
) -> Result<Tensor<T>> {
    let mut tg = Graph::new();
    let f = tg.leaf(features.clone(), false);
    let mut tb = Bound::new(&mut tg, target, false, mode);
    let z = if features.rank() == 2 {
        tb.vector_head(&mut tg, head, f)?
    } else {
        tb.head(&mut tg, head, f)?
    };
    Ok(tg.value(z).clone())
}

/// Target backbone output for `images` without recording gradients.
pub fn target_backbone<T: Scalar>(
    target: &NetParams<T>,
    cfg: &BackboneConfig,
    images: &Tensor<T>,
    mode: NormMode,
) -> Result<Tensor<T>> {
    let mut tg = Graph::new();
    let x = tg.leaf(images.clone(), false);
    let mut tb = Bound::new(&mut tg, target, false, mode);
    let f = tb.backbone(&mut tg, cfg, x)?;
    Ok(tg.value(f).clone())
}
