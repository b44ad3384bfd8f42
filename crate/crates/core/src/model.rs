//! WR-Net: a non-local multi-temporal fusion layer feeding an encoder-decoder
//! refinement network, trained with an L1 loss against the held-out frame.
//!
//! Fusion embeds `I_t` (query), `I_{t+1}` (key) and the warped frame (value)
//! with 1x1 convolutions on a block-averaged grid, attends over all spatial
//! positions, upsamples the result, projects it and adds the full-resolution
//! value embedding. Refinement is a U-Net whose 1-channel head is added to the
//! warped frame.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{apply_augment, draw_augment, Triplet, TripletMode};
use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::nn::{
    kaiming_uniform, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Elem, Graph, Padding,
    ParamSet, Tensor, Var,
};
use crate::par;
use crate::tvl1::Tvl1Params;
use crate::warp::{self, ExtrapolationSign, Refiner};

/// Which input plays which role in the fusion attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionRoles {
    /// Query `I_t`, key `I_{t+1}`, value the warped frame.
    #[default]
    Standard,
    /// Query the warped frame, key `I_t`, value `I_{t+1}`.
    WarpedQuery,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WrNetConfig {
    /// Channels of the query, key and value embeddings.
    pub embed_channels: usize,
    /// Encoder blocks, each followed by 2x2 max pooling.
    pub enc_levels: usize,
    /// Channels of the first encoder block; doubled at each level.
    pub base_channels: usize,
    /// Block-averaging factor applied before the attention affinity.
    pub attention_downsample: usize,
    /// Add the head output to the warped frame instead of predicting it directly.
    pub residual_output: bool,
    pub attention_roles: AttentionRoles,
}

impl Default for WrNetConfig {
    fn default() -> Self {
        Self {
            embed_channels: 32,
            enc_levels: 3,
            base_channels: 16,
            attention_downsample: 4,
            residual_output: true,
            attention_roles: AttentionRoles::Standard,
        }
    }
}

impl WrNetConfig {
    /// A few thousand parameters; trains in seconds on one core.
    pub fn small() -> Self {
        Self {
            embed_channels: 8,
            enc_levels: 2,
            base_channels: 8,
            attention_downsample: 4,
            residual_output: true,
            attention_roles: AttentionRoles::Standard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_channels == 0 || self.enc_levels == 0 || self.base_channels == 0 {
            return Err(Error::InvalidParams(
                "embed_channels, enc_levels and base_channels must be >= 1".into(),
            ));
        }
        if !self.attention_downsample.is_power_of_two() {
            return Err(Error::InvalidParams(format!(
                "attention_downsample must be a power of two, got {}",
                self.attention_downsample
            )));
        }
        if self.enc_levels > 16 {
            return Err(Error::InvalidParams("enc_levels must be <= 16".into()));
        }
        Ok(())
    }

    /// Side lengths accepted by [`WrNetModel::fuse`] and [`WrNetModel::refine`]
    /// must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.attention_downsample.max(1 << self.enc_levels)
    }

    fn check_dims(&self, w: usize, h: usize) -> Result<()> {
        let m = self.size_multiple();
        if !w.is_multiple_of(m) || !h.is_multiple_of(m) {
            return Err(Error::InvalidDimensions {
                width: w,
                height: h,
                reason: "dimensions must be multiples of max(attention_downsample, 2^enc_levels)",
            });
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Parameter indices of a conv block: two 3x3 convolutions with ReLU.
#[derive(Debug, Clone, Copy)]
struct Block {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    query: Conv,
    key: Conv,
    value: Conv,
    proj: Conv,
    enc: Vec<Block>,
    mid: Block,
    dec: Vec<Block>,
    head: Conv,
}

fn add_conv<R: Rng>(
    p: &mut ParamSet<f32>,
    name: &str,
    k: usize,
    c: usize,
    ks: usize,
    zero: bool,
    rng: &mut R,
) -> Conv {
    let shape = vec![k, c, ks, ks];
    let w = if zero {
        Tensor::zeros(shape)
    } else {
        kaiming_uniform(shape, c * ks * ks, rng)
    };
    Conv {
        w: p.push(format!("{name}.weight"), w),
        b: p.push(format!("{name}.bias"), Tensor::zeros(vec![k])),
    }
}

fn add_block<R: Rng>(
    p: &mut ParamSet<f32>,
    name: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) -> Block {
    let a = add_conv(p, &format!("{name}.conv1"), c_out, c_in, 3, false, rng);
    let b = add_conv(p, &format!("{name}.conv2"), c_out, c_out, 3, false, rng);
    Block {
        w1: a.w,
        b1: a.b,
        w2: b.w,
        b2: b.b,
    }
}

fn build_layout<R: Rng>(cfg: &WrNetConfig, rng: &mut R) -> (ParamSet<f32>, Layout) {
    let e = cfg.embed_channels;
    let mut p = ParamSet::new();
    let query = add_conv(&mut p, "fuse.query", e, 1, 1, false, rng);
    let key = add_conv(&mut p, "fuse.key", e, 1, 1, false, rng);
    let value = add_conv(&mut p, "fuse.value", e, 1, 1, false, rng);
    let proj = add_conv(&mut p, "fuse.proj", e, e, 1, false, rng);
    let mut enc = Vec::with_capacity(cfg.enc_levels);
    let mut c_in = e;
    for l in 0..cfg.enc_levels {
        enc.push(add_block(
            &mut p,
            &format!("refine.enc{l}"),
            c_in,
            cfg.channels(l),
            rng,
        ));
        c_in = cfg.channels(l);
    }
    let mid = add_block(
        &mut p,
        "refine.mid",
        c_in,
        cfg.channels(cfg.enc_levels),
        rng,
    );
    let mut dec = vec![None; cfg.enc_levels];
    for l in (0..cfg.enc_levels).rev() {
        let c_cat = cfg.channels(l + 1) + cfg.channels(l);
        dec[l] = Some(add_block(
            &mut p,
            &format!("refine.dec{l}"),
            c_cat,
            cfg.channels(l),
            rng,
        ));
    }
    let head = add_conv(&mut p, "refine.head", 1, cfg.channels(0), 1, true, rng);
    let layout = Layout {
        query,
        key,
        value,
        proj,
        enc,
        mid,
        dec: dec
            .into_iter()
            .map(|b| b.expect("every level built"))
            .collect(),
        head,
    };
    (p, layout)
}

/// A batch of `[N, 1, H, W]` network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInputs<T: Elem = f32> {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub frame_t: Vec<T>,
    pub frame_t1: Vec<T>,
    pub warped: Vec<T>,
}

impl<T: Elem> BatchInputs<T> {
    /// Stacks `(frame_t, frame_t1, warped)` triples of equal size.
    pub fn from_fields(samples: &[(&ScalarField, &ScalarField, &ScalarField)]) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let (w, h) = first.0.dims();
        let mut out = Self {
            n: samples.len(),
            height: h,
            width: w,
            frame_t: Vec::with_capacity(samples.len() * w * h),
            frame_t1: Vec::with_capacity(samples.len() * w * h),
            warped: Vec::with_capacity(samples.len() * w * h),
        };
        let cast = |f: &ScalarField| {
            f.data()
                .iter()
                .map(|&v| T::from_f64(v as f64))
                .collect::<Vec<_>>()
        };
        for (a, b, c) in samples {
            first.0.ensure_same_dims(a)?;
            a.ensure_same_dims(b)?;
            a.ensure_same_dims(c)?;
            out.frame_t.extend(cast(a));
            out.frame_t1.extend(cast(b));
            out.warped.extend(cast(c));
        }
        Ok(out)
    }

    fn shape(&self) -> Vec<usize> {
        vec![self.n, 1, self.height, self.width]
    }
}

/// Block average of each `[H, W]` plane by `factor`.
fn box_average<T: Elem>(x: &[T], planes: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let (oh, ow) = (h / factor, w / factor);
    let norm = T::from_f64(1.0 / (factor * factor) as f64);
    let mut out = vec![T::ZERO; planes * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, |p, o| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let mut s = T::ZERO;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += src[(y * factor + dy) * w + xo * factor + dx];
                    }
                }
                o[y * ow + xo] = s * norm;
            }
        }
    });
    out
}

/// One preprocessed training example; `warped` comes from the warp module.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub frame_t: ScalarField,
    pub frame_t1: ScalarField,
    pub warped: ScalarField,
    pub target: ScalarField,
}

/// Estimates flow and warps each triplet: `alpha = 0.5` interpolation for
/// [`TripletMode::Interpolation`], one step of extrapolation for
/// [`TripletMode::Future`].
pub fn prepare_samples(
    triplets: &[Triplet],
    mode: TripletMode,
    params: &Tvl1Params,
) -> Result<Vec<TrainSample>> {
    if triplets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    par::map_indexed(triplets.len(), |i| {
        let t = &triplets[i];
        let flow = warp::interpolation_flow(&t.frame_t, &t.frame_t1, params)?;
        let warped = match mode {
            TripletMode::Interpolation => warp::interpolate_with_flow(&t.frame_t, &flow, 0.5)?,
            TripletMode::Future => {
                warp::extrapolate_with_flow(&t.frame_t1, &flow, 1.0, ExtrapolationSign::Continue)?
            }
        };
        Ok(TrainSample {
            frame_t: t.frame_t.clone(),
            frame_t1: t.frame_t1.clone(),
            warped,
            target: t.target.clone(),
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Crop `(width, height)`.
    pub crop: (usize, usize),
    pub seed: u64,
    pub mode: TripletMode,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            steps: 1000,
            batch_size: 8,
            crop: (64, 64),
            seed: 0,
            mode: TripletMode::Interpolation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WrNetModel {
    config: WrNetConfig,
    params: ParamSet<f32>,
    layout: Layout,
}

impl PartialEq for WrNetModel {
    /// The layout is a function of the config, so it is not compared.
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl WrNetModel {
    /// Kaiming-uniform conv weights, zero biases and a zero head.
    pub fn new(config: WrNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build_layout(&config, &mut rng);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &WrNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    /// Records the fusion layer. Inputs are `[N, 1, H, W]` constants.
    fn fuse_graph<T: Elem>(
        &self,
        g: &Graph<T>,
        p: &[Var],
        x: &BatchInputs<T>,
        warped: Var,
    ) -> Result<Var> {
        let (n, h, w) = (x.n, x.height, x.width);
        let d = self.config.attention_downsample;
        let e = self.config.embed_channels;
        let (hl, wl) = (h / d, w / d);
        let s = hl * wl;
        let low = |v: &[T]| g.constant(vec![n, 1, hl, wl], box_average(v, n, h, w, d));
        let conv1 =
            |input: Var, c: Conv| g.conv2d(input, p[c.w], Some(p[c.b]), 1, 0, Padding::Zero);
        let lay = &self.layout;

        let (qs, ks, vs, value_full) = match self.config.attention_roles {
            AttentionRoles::Standard => (&x.frame_t, &x.frame_t1, &x.warped, warped),
            AttentionRoles::WarpedQuery => (
                &x.warped,
                &x.frame_t,
                &x.frame_t1,
                g.constant(x.shape(), x.frame_t1.clone())?,
            ),
        };

        let q = conv1(low(qs)?, lay.query)?;
        let q = g.transpose(g.reshape(q, vec![n, e, s])?)?;
        let k = conv1(low(ks)?, lay.key)?;
        let k = g.reshape(k, vec![n, e, s])?;
        let logits = g.scale(g.matmul(q, k)?, T::from_f64(1.0 / (e as f64).sqrt()));
        let attn = g.softmax(logits, 2)?;
        let v = conv1(low(vs)?, lay.value)?;
        let v = g.transpose(g.reshape(v, vec![n, e, s])?)?;
        let attended = g.transpose(g.matmul(attn, v)?)?;
        let mut up = g.reshape(attended, vec![n, e, hl, wl])?;
        if d > 1 {
            up = g.upsample_bilinear(up, d)?;
        }
        let projected = conv1(up, lay.proj)?;
        let residual = conv1(value_full, lay.value)?;
        g.add(projected, residual)
    }

    fn block_graph<T: Elem>(&self, g: &Graph<T>, p: &[Var], x: Var, b: Block) -> Result<Var> {
        let y = g.relu(g.conv2d(x, p[b.w1], Some(p[b.b1]), 1, 1, Padding::Zero)?);
        Ok(g.relu(g.conv2d(y, p[b.w2], Some(p[b.b2]), 1, 1, Padding::Zero)?))
    }

    fn refine_graph<T: Elem>(
        &self,
        g: &Graph<T>,
        p: &[Var],
        fused: Var,
        warped: Var,
    ) -> Result<Var> {
        let lay = &self.layout;
        let mut x = fused;
        let mut skips = Vec::with_capacity(lay.enc.len());
        for &b in &lay.enc {
            let y = self.block_graph(g, p, x, b)?;
            skips.push(y);
            x = g.maxpool2(y)?;
        }
        x = self.block_graph(g, p, x, lay.mid)?;
        for (&b, &skip) in lay.dec.iter().zip(&skips).rev() {
            let up = g.upsample_bilinear(x, 2)?;
            x = self.block_graph(g, p, g.concat_channels(up, skip)?, b)?;
        }
        let head = g.conv2d(x, p[lay.head.w], Some(p[lay.head.b]), 1, 0, Padding::Zero)?;
        let out = if self.config.residual_output {
            g.add(head, warped)?
        } else {
            head
        };
        Ok(g.clamp01(out))
    }

    /// Records fuse followed by refine; returns the `[N, 1, H, W]` prediction.
    /// `p` holds one leaf per parameter, in [`ParamSet`] order.
    pub fn forward_graph<T: Elem>(
        &self,
        g: &Graph<T>,
        p: &[Var],
        x: &BatchInputs<T>,
    ) -> Result<Var> {
        self.check_params(p.len())?;
        self.config.check_dims(x.width, x.height)?;
        let warped = g.constant(x.shape(), x.warped.clone())?;
        let fused = self.fuse_graph(g, p, x, warped)?;
        self.refine_graph(g, p, fused, warped)
    }

    fn check_params(&self, n: usize) -> Result<()> {
        if n != self.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter tensors, got {n}",
                self.params.len()
            )));
        }
        Ok(())
    }

    /// Fused features `[1, embed_channels, H, W]` for one sample.
    pub fn fuse(
        &self,
        frame_t: &ScalarField,
        frame_t1: &ScalarField,
        warped: &ScalarField,
    ) -> Result<Tensor<f32>> {
        let x = BatchInputs::<f32>::from_fields(&[(frame_t, frame_t1, warped)])?;
        let d = self.config.attention_downsample;
        if x.width % d != 0 || x.height % d != 0 {
            return Err(Error::InvalidDimensions {
                width: x.width,
                height: x.height,
                reason: "dimensions must be multiples of attention_downsample",
            });
        }
        let g = Graph::new();
        let p = g.params(&self.params);
        let wv = g.constant(x.shape(), x.warped.clone())?;
        let fused = self.fuse_graph(&g, &p, &x, wv)?;
        Ok(g.value(fused))
    }

    /// Runs the refinement network on fused features; `warped` feeds the
    /// residual connection.
    pub fn refine(&self, fused: &Tensor<f32>, warped: &ScalarField) -> Result<ScalarField> {
        let (w, h) = warped.dims();
        let expected = [1, self.config.embed_channels, h, w];
        if fused.shape() != expected {
            return Err(Error::ConfigMismatch(format!(
                "fused features {:?}, expected {expected:?}",
                fused.shape()
            )));
        }
        let m = 1 << self.config.enc_levels;
        if w % m != 0 || h % m != 0 {
            return Err(Error::InvalidDimensions {
                width: w,
                height: h,
                reason: "dimensions must be multiples of 2^enc_levels",
            });
        }
        let g = Graph::new();
        let p = g.params(&self.params);
        let fv = g.constant(fused.shape().to_vec(), fused.data().to_vec())?;
        let wv = g.constant(vec![1, 1, h, w], warped.data().to_vec())?;
        let out = self.refine_graph(&g, &p, fv, wv)?;
        ScalarField::new(w, h, g.value(out).into_data())
    }

    /// Full prediction for frames of any size: inputs are edge-padded up to
    /// [`WrNetConfig::size_multiple`] and the result is cropped back.
    pub fn predict(
        &self,
        frame_t: &ScalarField,
        frame_t1: &ScalarField,
        warped: &ScalarField,
    ) -> Result<ScalarField> {
        frame_t.ensure_same_dims(frame_t1)?;
        frame_t.ensure_same_dims(warped)?;
        let (w, h) = frame_t.dims();
        let m = self.config.size_multiple();
        let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
        let pad = |f: &ScalarField| {
            if (pw, ph) == (w, h) {
                Ok(f.clone())
            } else {
                ScalarField::from_fn(pw, ph, |x, y| f.get(x.min(w - 1), y.min(h - 1)))
            }
        };
        let (a, b, c) = (pad(frame_t)?, pad(frame_t1)?, pad(warped)?);
        let x = BatchInputs::<f32>::from_fields(&[(&a, &b, &c)])?;
        let g = Graph::new();
        let p = g.params(&self.params);
        let out = self.forward_graph(&g, &p, &x)?;
        let full = ScalarField::new(pw, ph, g.value(out).into_data())?;
        if (pw, ph) == (w, h) {
            Ok(full)
        } else {
            full.crop(0, 0, w, h)
        }
    }

    /// Writes `path` (JSON manifest) and its sibling `.bin` blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params, serde_json::to_value(&self.config)?)
    }

    /// Loads a checkpoint; parameter names and shapes must match its config.
    pub fn load(path: &Path) -> Result<Self> {
        let (params, cfg) = load_checkpoint(path)?;
        let config: WrNetConfig = serde_json::from_value(cfg)
            .map_err(|e| Error::ConfigMismatch(format!("unreadable model config: {e}")))?;
        Self::from_params(config, params)
    }

    /// Like [`WrNetModel::load`], but also requires the stored config to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &WrNetConfig) -> Result<Self> {
        let m = Self::load(path)?;
        if m.config != *expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {:?}, expected {expected:?}",
                m.config
            )));
        }
        Ok(m)
    }

    pub fn from_params(config: WrNetConfig, params: ParamSet<f32>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if params.len() != m.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} tensors, found {}",
                m.params.len(),
                params.len()
            )));
        }
        for ((name, t), (want, tw)) in params.iter().zip(m.params.iter()) {
            if name != want || t.shape() != tw.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor {name} {:?} does not match {want} {:?}",
                    t.shape(),
                    tw.shape()
                )));
            }
        }
        let mut params = params;
        params
            .tensors_mut()
            .iter_mut()
            .for_each(|t| t.requires_grad = true);
        m.params = params;
        Ok(m)
    }

    /// One optimisation step on a batch; returns the loss before the update.
    pub fn train_step(
        &mut self,
        x: &BatchInputs<f32>,
        target: &[f32],
        opt: &mut AdamState<f32>,
        step: usize,
    ) -> Result<f64> {
        let g = Graph::new();
        let p = g.params(&self.params);
        let out = self.forward_graph(&g, &p, x)?;
        let t = g.constant(x.shape(), target.to_vec())?;
        let loss = g.l1_loss(out, t)?;
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: value });
        }
        let grads = g.backward(loss)?;
        grads.accumulate_into(&p, &mut self.params)?;
        opt.step(&mut self.params)?;
        Ok(value)
    }

    /// Warps every triplet, then trains; see [`WrNetModel::train_samples`].
    pub fn train(
        &mut self,
        triplets: &[Triplet],
        params: &Tvl1Params,
        opts: &TrainOptions,
    ) -> Result<Vec<f64>> {
        let samples = prepare_samples(triplets, opts.mode, params)?;
        self.train_samples(&samples, opts, |_, _| {})
    }

    /// Minimises the L1 loss between the network output and the target with
    /// Adam. Each step draws `batch_size` samples, crops and rotates all four
    /// fields of a sample identically, and reports `(step, loss)` to
    /// `on_step`. Returns the per-step loss history.
    pub fn train_samples<F>(
        &mut self,
        samples: &[TrainSample],
        opts: &TrainOptions,
        mut on_step: F,
    ) -> Result<Vec<f64>>
    where
        F: FnMut(usize, f64),
    {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if opts.batch_size == 0 {
            return Err(Error::InvalidParams("batch_size must be >= 1".into()));
        }
        let (cw, ch) = opts.crop;
        self.config.check_dims(cw, ch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut opt = AdamState::new(opts.adam);
        let mut history = Vec::with_capacity(opts.steps);
        for step in 0..opts.steps {
            let mut fields = Vec::with_capacity(opts.batch_size);
            for _ in 0..opts.batch_size {
                let s = &samples[rng.gen_range(0..samples.len())];
                let draw = draw_augment(s.frame_t.dims(), opts.crop, &mut rng)?;
                let quad = [
                    s.frame_t.clone(),
                    s.frame_t1.clone(),
                    s.warped.clone(),
                    s.target.clone(),
                ];
                fields.push(apply_augment(&quad, opts.crop, draw)?);
            }
            let refs: Vec<_> = fields.iter().map(|f| (&f[0], &f[1], &f[2])).collect();
            let x = BatchInputs::from_fields(&refs)?;
            let target: Vec<f32> = fields
                .iter()
                .flat_map(|f| f[3].data().iter().copied())
                .collect();
            let loss = self.train_step(&x, &target, &mut opt, step)?;
            on_step(step, loss);
            history.push(loss);
        }
        Ok(history)
    }

    /// Stable identifier: config plus an FNV-1a hash of every parameter bit.
    pub fn fingerprint_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.params.iter() {
            for b in name
                .bytes()
                .chain(t.data().iter().flat_map(|v| v.to_le_bytes()))
            {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

impl Refiner for WrNetModel {
    fn refine_frame(
        &self,
        frame_t: &ScalarField,
        frame_t1: &ScalarField,
        warped: &ScalarField,
    ) -> Result<ScalarField> {
        self.predict(frame_t, frame_t1, warped)
    }

    fn fingerprint(&self) -> String {
        let c = &self.config;
        format!(
            "wrnet:e{}-l{}-b{}-d{}-r{}-{}:{:016x}",
            c.embed_channels,
            c.enc_levels,
            c.base_channels,
            c.attention_downsample,
            u8::from(c.residual_output),
            match c.attention_roles {
                AttentionRoles::Standard => "std",
                AttentionRoles::WarpedQuery => "wq",
            },
            self.fingerprint_hash()
        )
    }
}
