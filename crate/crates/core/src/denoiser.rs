//! Local-global diffusion transformer.
//!
//! Blocks alternate between attention restricted to each part's `K` tokens
//! (local) and attention over all `N·K` tokens of the asset (global). Every
//! block also cross-attends to the condition tokens and is modulated by the
//! timestep embedding through adaptive layer norm. The first half of the
//! stack feeds the mirrored second half through long skip connections.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::latent::{add_part_ids_on_graph, IdInjection, NoiseLevel};
use crate::nn::{normal, prefixed, Bound, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Attention span of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// Within each part's token block.
    Local,
    /// Across all tokens of the asset.
    Global,
}

/// Placement of global blocks along the stack.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Global at even indices, local at odd ones.
    #[default]
    Alternating,
    /// The global blocks form one contiguous run in the middle.
    Middle,
    /// Global blocks at the beginning and the end.
    Sides,
    LocalOnly,
    GlobalOnly,
    Custom(Vec<Level>),
}

impl Schedule {
    pub fn levels(&self, depth: usize) -> Result<Vec<Level>> {
        // Middle and sides use as many global blocks as the alternating layout.
        let globals = depth.div_ceil(2);
        let levels = match self {
            Schedule::Alternating => (0..depth).map(|i| if i % 2 == 0 { Level::Global } else { Level::Local }).collect(),
            Schedule::Middle => {
                let start = (depth - globals) / 2;
                (0..depth).map(|i| if (start..start + globals).contains(&i) { Level::Global } else { Level::Local }).collect()
            }
            Schedule::Sides => {
                let head = globals.div_ceil(2);
                let tail = globals / 2;
                (0..depth)
                    .map(|i| if i < head || i >= depth - tail { Level::Global } else { Level::Local })
                    .collect()
            }
            Schedule::LocalOnly => alloc::vec![Level::Local; depth],
            Schedule::GlobalOnly => alloc::vec![Level::Global; depth],
            Schedule::Custom(levels) => {
                if levels.len() != depth {
                    return Err(Error::Config(format!("custom schedule has {} levels for depth {depth}", levels.len())));
                }
                levels.clone()
            }
        };
        Ok(levels)
    }
}

/// Which blocks carry condition cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossAttentionPlacement {
    #[default]
    EveryBlock,
    Disabled,
}

fn default_time_features() -> usize {
    128
}

fn default_mlp_ratio() -> usize {
    4
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub depth: usize,
    /// Token width `C`, used both for latents and hidden states.
    pub width: usize,
    pub heads: usize,
    pub tokens_per_part: usize,
    pub max_parts: usize,
    pub cond_width: usize,
    #[serde(default)]
    pub schedule: Schedule,
    /// Size of the sinusoidal timestep features.
    #[serde(default = "default_time_features")]
    pub time_features: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub id_injection: IdInjection,
    #[serde(default)]
    pub cross_attention: CrossAttentionPlacement,
}

impl DenoiserConfig {
    /// Defaults used for the CPU-sized experiments.
    pub fn desk_scale() -> Self {
        Self {
            depth: 6,
            width: 16,
            heads: 2,
            tokens_per_part: 16,
            max_parts: 8,
            cond_width: 16,
            schedule: Schedule::Alternating,
            time_features: default_time_features(),
            mlp_ratio: default_mlp_ratio(),
            id_injection: IdInjection::InputOnly,
            cross_attention: CrossAttentionPlacement::EveryBlock,
        }
    }

    pub fn validate(&self) -> Result<Vec<Level>> {
        let positive = [
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("tokens_per_part", self.tokens_per_part),
            ("max_parts", self.max_parts),
            ("cond_width", self.cond_width),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.time_features < 2 || self.time_features % 2 != 0 {
            return Err(Error::Config("time_features must be even and at least 2".into()));
        }
        self.schedule.levels(self.depth)
    }
}

/// Condition tokens (`M×cond_width`, `M ≥ 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens {
    tokens: Tensor,
}

impl ConditionTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(shape_err("ConditionTokens", format!("expected M×D, got {:?}", tokens.shape())));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// Multi-head scaled dot-product attention of `q` against `k`/`v`, heads
/// concatenated along columns.
fn attend(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let width = g.value(q).cols();
    let d = width / heads;
    let scale = 1.0 / libm::sqrt(d as f64);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(v, h * d, d)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores);
        outs.push(g.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Multi-head self-attention with a fused, bias-free QKV projection.
///
/// A key bias only shifts each query's scores by a constant, which softmax
/// discards, so the input projections carry no bias.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            qkv: Linear::without_bias(store, &prefixed(prefix, "qkv"), width, 3 * width, rng),
            out: Linear::new(store, &prefixed(prefix, "out"), width, width, rng),
            heads,
            width,
        }
    }

    fn split_qkv(&self, g: &mut Graph, qkv: Var) -> Result<(Var, Var, Var)> {
        let c = self.width;
        Ok((g.slice_cols(qkv, 0, c)?, g.slice_cols(qkv, c, c)?, g.slice_cols(qkv, 2 * c, c)?))
    }

    /// Attention over every row of `z` jointly.
    pub fn global(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let qkv = self.qkv.forward(g, p, z)?;
        let (q, k, v) = self.split_qkv(g, qkv)?;
        let mixed = attend(g, q, k, v, self.heads)?;
        self.out.forward(g, p, mixed)
    }

    /// Attention computed independently inside each contiguous block of
    /// `k` rows; no row attends outside its block.
    pub fn local(&self, g: &mut Graph, p: &Bound, z: Var, k: usize) -> Result<Var> {
        let rows = g.value(z).rows();
        if k == 0 || rows % k != 0 {
            return Err(shape_err("local_attention", format!("{rows} rows do not split into blocks of {k}")));
        }
        let qkv = self.qkv.forward(g, p, z)?;
        let mut blocks = Vec::with_capacity(rows / k);
        for b in 0..rows / k {
            let part = g.slice_rows(qkv, b * k, k)?;
            let (q, kk, v) = self.split_qkv(g, part)?;
            blocks.push(attend(g, q, kk, v, self.heads)?);
        }
        let mixed = if blocks.len() == 1 { blocks[0] } else { g.concat_rows(&blocks)? };
        self.out.forward(g, p, mixed)
    }

    pub fn at_level(&self, g: &mut Graph, p: &Bound, z: Var, level: Level, k: usize) -> Result<Var> {
        match level {
            Level::Local => self.local(g, p, z, k),
            Level::Global => self.global(g, p, z),
        }
    }
}

/// Queries from the tokens, keys and values from the condition.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub kv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        cond_width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            q: Linear::without_bias(store, &prefixed(prefix, "q"), width, width, rng),
            kv: Linear::without_bias(store, &prefixed(prefix, "kv"), cond_width, 2 * width, rng),
            out: Linear::new(store, &prefixed(prefix, "out"), width, width, rng),
            heads,
            width,
        }
    }

    /// Each query row is attended independently, so running all `N·K` rows
    /// at once equals running every part block against the shared keys and
    /// values; the same call serves local and global blocks.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, cond: Var) -> Result<Var> {
        let q = self.q.forward(g, p, z)?;
        let kv = self.kv.forward(g, p, cond)?;
        let k = g.slice_cols(kv, 0, self.width)?;
        let v = g.slice_cols(kv, self.width, self.width)?;
        let mixed = attend(g, q, k, v, self.heads)?;
        self.out.forward(g, p, mixed)
    }

    /// Per-head `rows×M` attention weights, evaluated without gradients.
    pub fn attention_maps(&self, store: &ParamStore, z: &Tensor, cond: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let (zv, cv) = (g.constant(z.clone()), g.constant(cond.clone()));
        let q = self.q.forward(&mut g, &p, zv)?;
        let kv = self.kv.forward(&mut g, &p, cv)?;
        let d = self.width / self.heads;
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * d, d)?;
            let kh = g.slice_cols(kv, h * d, d)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, 1.0 / libm::sqrt(d as f64));
            let w = g.softmax_rows(scores);
            maps.push(g.value(w).clone());
        }
        Ok(maps)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Sinusoidal features of `t` (scaled to `[0, 1000]`), cosines then sines.
pub fn timestep_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = alloc::vec![0.0; dim];
    for j in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * j as f64 / half as f64);
        let arg = 1000.0 * t * freq;
        data[j] = libm::cos(arg);
        data[half + j] = libm::sin(arg);
    }
    Tensor::new(alloc::vec![1, dim], data).expect("dim > 0")
}

#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
    pub features: usize,
}

impl TimeEmbedding {
    pub fn forward(&self, g: &mut Graph, p: &Bound, t: NoiseLevel) -> Result<Var> {
        let f = g.constant(timestep_features(t.get(), self.features));
        let h = self.fc1.forward(g, p, f)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// `norm(x) · (1 + scale) + shift`
fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.normalize_rows(x);
    let s = g.add_scalar(scale, 1.0);
    let h = g.mul_row(n, s)?;
    g.add_row(h, shift)
}

/// Pre-norm residual block: self-attention at its level, cross-attention,
/// MLP, each modulated and gated by the timestep embedding.
#[derive(Debug, Clone)]
pub struct DitBlock {
    pub level: Level,
    pub modulation: Linear,
    pub attn: SelfAttention,
    pub cross: Option<CrossAttention>,
    pub mlp: Mlp,
    /// Present on blocks that receive a long skip connection.
    pub skip: Option<Linear>,
    pub width: usize,
}

impl DitBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &DenoiserConfig,
        level: Level,
        with_skip: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c = config.width;
        let has_cross = config.cross_attention == CrossAttentionPlacement::EveryBlock;
        let sublayers = if has_cross { 3 } else { 2 };
        let skip = with_skip.then(|| Linear::new(store, &prefixed(prefix, "skip"), 2 * c, c, rng));
        let modulation = Linear::new(store, &prefixed(prefix, "mod"), c, 3 * sublayers * c, rng);
        let attn = SelfAttention::new(store, &prefixed(prefix, "attn"), c, config.heads, rng);
        let cross = has_cross
            .then(|| CrossAttention::new(store, &prefixed(prefix, "cross"), c, config.cond_width, config.heads, rng));
        let mlp = Mlp {
            fc1: Linear::new(store, &prefixed(prefix, "mlp.fc1"), c, config.mlp_ratio * c, rng),
            fc2: Linear::new(store, &prefixed(prefix, "mlp.fc2"), config.mlp_ratio * c, c, rng),
        };
        Self { level, modulation, attn, cross, mlp, skip, width: c }
    }

    /// Zeroes the three output projections, turning the block into the identity.
    pub fn zero_outputs(&self, store: &mut ParamStore) {
        self.attn.out.zero(store);
        if let Some(cross) = &self.cross {
            cross.out.zero(store);
        }
        self.mlp.fc2.zero(store);
    }

    /// `temb` is the activated timestep embedding (`1×C`).
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, temb: Var, cond: Var, k: usize) -> Result<Var> {
        let c = self.width;
        let mods = self.modulation.forward(g, p, temb)?;
        let mut chunk = 0;
        let mut next = |g: &mut Graph| -> Result<Var> {
            let v = g.slice_cols(mods, chunk * c, c)?;
            chunk += 1;
            Ok(v)
        };

        let (shift, scale, gate) = (next(g)?, next(g)?, next(g)?);
        let h = modulate(g, z, shift, scale)?;
        let a = self.attn.at_level(g, p, h, self.level, k)?;
        let a = g.mul_row(a, gate)?;
        let mut z = g.add(z, a)?;

        if let Some(cross) = &self.cross {
            let (shift, scale, gate) = (next(g)?, next(g)?, next(g)?);
            let h = modulate(g, z, shift, scale)?;
            let x = cross.forward(g, p, h, cond)?;
            let x = g.mul_row(x, gate)?;
            z = g.add(z, x)?;
        }

        let (shift, scale, gate) = (next(g)?, next(g)?, next(g)?);
        let h = modulate(g, z, shift, scale)?;
        let m = self.mlp.forward(g, p, h)?;
        let m = g.mul_row(m, gate)?;
        g.add(z, m)
    }
}

#[derive(Debug, Clone)]
struct FinalLayer {
    modulation: Linear,
    out: Linear,
}

/// The full velocity network with its parameters.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    store: ParamStore,
    time: TimeEmbedding,
    input: Linear,
    part_ids: ParamId,
    blocks: Vec<DitBlock>,
    final_layer: FinalLayer,
}

impl Denoiser {
    /// Builds the network with parameters initialized from `seed`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let levels = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.width;
        let time = TimeEmbedding {
            fc1: Linear::new(&mut store, "time.fc1", config.time_features, c, &mut rng),
            fc2: Linear::new(&mut store, "time.fc2", c, c, &mut rng),
            features: config.time_features,
        };
        let input = Linear::new(&mut store, "input", c, c, &mut rng);
        let part_ids = store.register("part_ids", normal(&mut rng, &[config.max_parts, c], 0.1));
        let depth = config.depth;
        let receivers = depth / 2;
        let blocks = levels
            .iter()
            .enumerate()
            .map(|(i, &level)| {
                let with_skip = i >= depth - receivers;
                DitBlock::new(&mut store, &format!("blocks.{i}"), &config, level, with_skip, &mut rng)
            })
            .collect();
        let final_layer = FinalLayer {
            modulation: Linear::new(&mut store, "final.mod", c, 2 * c, &mut rng),
            out: Linear::new(&mut store, "final.out", c, c, &mut rng),
        };
        Ok(Self { config, store, time, input, part_ids, blocks, final_layer })
    }

    /// Builds the network around existing parameters. Names and shapes must
    /// match the layout implied by `config` exactly.
    pub fn with_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.store.check_layout(&params)?;
        model.store = params;
        Ok(model)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[DitBlock] {
        &self.blocks
    }

    pub fn levels(&self) -> Vec<Level> {
        self.blocks.iter().map(|b| b.level).collect()
    }

    pub fn part_ids(&self) -> ParamId {
        self.part_ids
    }

    /// Zeroes the final output projection; the network then predicts zero.
    pub fn zero_output(&mut self) {
        self.final_layer.out.zero(&mut self.store);
    }

    fn check_inputs(&self, rows: usize, cols: usize, cond_cols: usize, slots: &[usize]) -> Result<()> {
        let k = self.config.tokens_per_part;
        if slots.is_empty() || slots.len() > self.config.max_parts {
            return Err(Error::Capacity { slot: slots.len(), capacity: self.config.max_parts });
        }
        if rows != slots.len() * k || cols != self.config.width {
            return Err(shape_err(
                "forward",
                format!("tokens {rows}x{cols} for {} parts of {k}x{}", slots.len(), self.config.width),
            ));
        }
        if cond_cols != self.config.cond_width {
            return Err(shape_err("forward", format!("condition width {cond_cols} != {}", self.config.cond_width)));
        }
        crate::latent::check_permutation_of_slots(slots, self.config.max_parts)
    }

    /// Velocity prediction on an existing graph. `slots[b]` is the part
    /// identity of token block `b`.
    pub fn forward_on_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        zt: Var,
        t: NoiseLevel,
        cond: Var,
        slots: &[usize],
    ) -> Result<Var> {
        let (rows, cols) = (g.value(zt).rows(), g.value(zt).cols());
        self.check_inputs(rows, cols, g.value(cond).cols(), slots)?;
        let k = self.config.tokens_per_part;

        let temb = self.time.forward(g, p, t)?;
        let temb = g.gelu(temb);

        let x = self.input.forward(g, p, zt)?;
        let mut x = add_part_ids_on_graph(g, x, p.var(self.part_ids), slots, k)?;

        let mut skips = Vec::new();
        let senders = self.config.depth / 2;
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(skip) = &block.skip {
                let s = skips.pop().expect("every receiver has a sender");
                let joined = g.concat_cols(&[x, s])?;
                x = skip.forward(g, p, joined)?;
            }
            x = block.forward(g, p, x, temb, cond, k)?;
            if i < senders {
                skips.push(x);
            }
        }

        let mods = self.final_layer.modulation.forward(g, p, temb)?;
        let c = self.config.width;
        let shift = g.slice_cols(mods, 0, c)?;
        let scale = g.slice_cols(mods, c, c)?;
        let h = modulate(g, x, shift, scale)?;
        self.final_layer.out.forward(g, p, h)
    }

    /// Velocity prediction without recording gradients.
    pub fn forward(&self, zt: &Tensor, t: NoiseLevel, cond: &ConditionTokens, slots: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let z = g.constant(zt.clone());
        let c = g.constant(cond.tokens().clone());
        let v = self.forward_on_graph(&mut g, &p, z, t, c, slots)?;
        Ok(g.value(v).clone())
    }

    /// Parameter names in store order.
    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.store.names().iter()
    }
}

/// Central finite-difference check of the gradient of
/// `mean((forward(zt) − target)²)` w.r.t. every parameter of `model`.
pub fn check_model_gradients(
    model: &Denoiser,
    zt: &Tensor,
    target: &Tensor,
    t: NoiseLevel,
    cond: &ConditionTokens,
    slots: &[usize],
    step: f64,
) -> Result<crate::autograd::GradCheck> {
    let loss_graph = |m: &Denoiser, trainable: bool| -> Result<(Graph, Bound, Var)> {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, trainable);
        let z = g.constant(zt.clone());
        let c = g.constant(cond.tokens().clone());
        let tgt = g.constant(target.clone());
        let v = m.forward_on_graph(&mut g, &p, z, t, c, slots)?;
        let diff = g.sub(v, tgt)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean(sq);
        Ok((g, p, loss))
    };

    let (g, p, loss) = loss_graph(model, true)?;
    let grads = g.backward(loss)?;
    let mut analytic = Vec::with_capacity(model.params().num_scalars());
    for (&var, (_, tensor)) in p.vars().iter().zip(model.params().iter()) {
        match grads.get(var) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(core::iter::repeat_n(0.0, tensor.len())),
        }
    }

    let mut probe = model.clone();
    let theta = model.params().flatten();
    let report = crate::autograd::finite_diff_check(
        |th| {
            probe.params_mut().assign_flat(th).expect("same layout");
            let (g, _, loss) = loss_graph(&probe, false).expect("validated inputs");
            g.value(loss).data()[0]
        },
        &theta,
        &analytic,
        step,
    );
    Ok(report)
}
