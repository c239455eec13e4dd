//! Noise-prediction transformers.
//!
//! Points are embedded by a shared per-point projection (a 1x1 convolution)
//! plus a learned slot embedding, pass through `depth` transformer blocks, and
//! leave through a modulated layer norm and a linear head. Three block
//! variants differ in how the condition reaches the network:
//!
//! * [`Variant::Dit3dAdalnZero`]: condition fused with the time embedding
//!   drives per-block adaptive layer-norm shift, scale and gate.
//! * [`Variant::PixartAdalnSingle`]: one shared modulation MLP on the time
//!   embedding plus per-block tables; the condition enters through a
//!   cross-attention sub-layer placed after the gated self-attention.
//! * [`Variant::Logen`]: cross-attention directly follows self-attention
//!   inside the same residual branch, and the gate scales their sum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encodings::{condition_tokens, fourier_encode, EncoderConfig, CONDITION_SCALARS};
use crate::error::{Error, Result};
use crate::objects::Condition;
use crate::tensor::{Binding, Checkpoint, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dit3dAdalnZero,
    PixartAdalnSingle,
    Logen,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Dit3dAdalnZero, Variant::PixartAdalnSingle, Variant::Logen];

    pub fn uses_cross_attention(self) -> bool {
        !matches!(self, Variant::Dit3dAdalnZero)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dit3d_adaln_zero" => Ok(Variant::Dit3dAdalnZero),
            "pixart_adaln_single" => Ok(Variant::PixartAdalnSingle),
            "logen" => Ok(Variant::Logen),
            other => Err(Error::Config(format!("unknown denoiser variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub variant: Variant,
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub max_points: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

fn default_mlp_ratio() -> usize {
    4
}

impl DenoiserConfig {
    /// Desk-scale default: trains in minutes on one CPU core.
    pub fn xs_tiny(variant: Variant) -> Self {
        Self { variant, depth: 2, heads: 2, width: 32, max_points: 128, mlp_ratio: 4, encoder: EncoderConfig::default() }
    }

    /// The published extra-small transformer: 12 blocks, 3 heads, width 192.
    pub fn xs(variant: Variant) -> Self {
        Self { variant, depth: 12, heads: 3, width: 192, max_points: 512, mlp_ratio: 4, encoder: EncoderConfig::default() }
    }

    pub fn cond_dim(&self) -> usize {
        self.encoder.cond_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.max_points == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("max_points and mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var> {
        tape.conv1x1(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
struct CrossAttn {
    q: Linear,
    kv: Linear,
    out: Linear,
}

#[derive(Debug, Clone, Copy)]
enum Modulation {
    /// Per-block linear layer on the fused condition vector.
    AdaLn(Linear),
    /// Per-block additive table on the shared modulation.
    Table(ParamId),
}

#[derive(Debug, Clone, Copy)]
struct Block {
    qkv: Linear,
    attn_out: Linear,
    cross: Option<CrossAttn>,
    fc1: Linear,
    fc2: Linear,
    modulation: Modulation,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Linear,
    pos: ParamId,
    null_cond: ParamId,
    time1: Linear,
    time2: Linear,
    cond_fuse: Option<Linear>,
    tokens: Option<(Linear, ParamId)>,
    shared_mod: Option<Linear>,
    blocks: Vec<Block>,
    final_mod: Modulation,
    head: Linear,
}

enum Init {
    Zeros,
    Xavier,
    Normal(f64),
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, init: Init) -> Result<ParamId> {
        let n = rows * cols;
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-a..a) as f32).collect()
            }
            Init::Normal(std) => (0..n).map(|_| (self.rng.sample::<f64, _>(StandardNormal) * std) as f32).collect(),
        };
        self.store.add(name, Tensor::from_rows(rows, cols, data)?)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, init: Init) -> Result<Linear> {
        let w = self.tensor(format!("{name}.w"), din, dout, init)?;
        let b = self.tensor(format!("{name}.b"), 1, dout, Init::Zeros)?;
        Ok(Linear { w, b })
    }
}

/// A noise predictor: configuration, parameters, and the parameter layout.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    layout: Layout,
}

/// Conditioning values shared by all blocks of one forward pass.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// Time embedding `[1 x width]`.
    pub time: Var,
    /// Condition encoding `[1 x cond_dim]` (the null parameter when dropped).
    pub cond: Var,
    /// SiLU of the modulation input, `[1 x width]`.
    modulation_input: Var,
    /// Shared `[1 x 6 width]` modulation for table-driven variants.
    shared: Option<Var>,
    /// Condition tokens `[6 x width]` for cross-attention variants.
    pub tokens: Option<Var>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: ParamStore::new(), rng: &mut rng };
        let d = config.width;
        let cd = config.cond_dim();
        let ed = config.encoder.embed_dim();
        let hidden = config.mlp_ratio * d;
        let embed = b.linear("embed", 4, d, Init::Xavier)?;
        let pos = b.tensor("pos".into(), config.max_points, d, Init::Zeros)?;
        let null_cond = b.tensor("null_cond".into(), 1, cd, Init::Zeros)?;
        let time1 = b.linear("time.fc1", ed, d, Init::Normal(0.02))?;
        let time2 = b.linear("time.fc2", d, d, Init::Normal(0.02))?;
        let cross = config.variant.uses_cross_attention();
        let cond_fuse = if cross { None } else { Some(b.linear("cond_fuse", d + cd, d, Init::Xavier)?) };
        let tokens = if cross {
            let proj = b.linear("tokens.proj", ed, d, Init::Xavier)?;
            let slot = b.tensor("tokens.slot".into(), CONDITION_SCALARS, d, Init::Normal(0.02))?;
            Some((proj, slot))
        } else {
            None
        };
        let shared_mod = if cross { Some(b.linear("shared_mod", d, 6 * d, Init::Zeros)?) } else { None };
        let table_std = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            let qkv = b.linear(&format!("{p}.attn.qkv"), d, 3 * d, Init::Xavier)?;
            let attn_out = b.linear(&format!("{p}.attn.out"), d, d, Init::Xavier)?;
            let cross_attn = if cross {
                Some(CrossAttn {
                    q: b.linear(&format!("{p}.xattn.q"), d, d, Init::Xavier)?,
                    kv: b.linear(&format!("{p}.xattn.kv"), d, 2 * d, Init::Xavier)?,
                    out: b.linear(&format!("{p}.xattn.out"), d, d, Init::Xavier)?,
                })
            } else {
                None
            };
            let fc1 = b.linear(&format!("{p}.mlp.fc1"), d, hidden, Init::Xavier)?;
            let fc2 = b.linear(&format!("{p}.mlp.fc2"), hidden, d, Init::Xavier)?;
            let modulation = if cross {
                Modulation::Table(b.tensor(format!("{p}.mod_table"), 1, 6 * d, Init::Normal(table_std))?)
            } else {
                Modulation::AdaLn(b.linear(&format!("{p}.adaln"), d, 6 * d, Init::Zeros)?)
            };
            blocks.push(Block { qkv, attn_out, cross: cross_attn, fc1, fc2, modulation });
        }
        let final_mod = if cross {
            Modulation::Table(b.tensor("final.mod_table".into(), 1, 2 * d, Init::Normal(table_std))?)
        } else {
            Modulation::AdaLn(b.linear("final.adaln", d, 2 * d, Init::Zeros)?)
        };
        let head = b.linear("head", d, 4, Init::Xavier)?;
        let layout = Layout { embed, pos, null_cond, time1, time2, cond_fuse, tokens, shared_mod, blocks, final_mod, head };
        Ok(Self { config, params: b.store, layout })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn null_embedding(&self) -> Vec<f64> {
        self.params.get(self.layout.null_cond).to_f64_vec()
    }

    /// Adds `N(0, std^2)` noise to every parameter, zero-initialized ones included.
    ///
    /// Used by tests that need a generic (non-identity) network.
    pub fn perturb_all(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in self.params.iter_mut() {
            for v in t.data_mut() {
                *v += (rng.sample::<f64, _>(StandardNormal) * std) as f32;
            }
        }
    }

    /// Per-point projection plus slot embedding: `[N x 4] -> [N x width]`.
    pub fn embed_points<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        if n > self.config.max_points {
            return Err(Error::Capacity(format!("{n} points exceed max_points {}", self.config.max_points)));
        }
        if tape.value(x).cols() != 4 {
            return Err(Error::Dimension(format!("points must have 4 channels, got {}", tape.value(x).cols())));
        }
        let proj = self.layout.embed.forward(tape, p, x)?;
        let pos = tape.slice_rows(p.var(self.layout.pos), 0, n)?;
        tape.add(proj, pos)
    }

    /// Time and condition embeddings, shared by every block.
    pub fn conditioning<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, t: usize, kappa: &Condition) -> Result<Conditioning> {
        let l = &self.layout;
        let enc = &self.config.encoder;
        let tf = tape.constant(Tensor::from_f64(vec![1, enc.embed_dim()], &fourier_encode(t as f64, enc))?);
        let h = l.time1.forward(tape, p, tf)?;
        let h = tape.silu(h);
        let time = l.time2.forward(tape, p, h)?;
        let cond = if kappa.is_null {
            p.var(l.null_cond)
        } else {
            tape.constant(Tensor::from_f64(vec![1, self.config.cond_dim()], &condition_tokens(kappa, enc))?)
        };
        match (l.cond_fuse, l.tokens, l.shared_mod) {
            (Some(fuse), _, _) => {
                let joint = tape.concat_cols(&[time, cond])?;
                let c = fuse.forward(tape, p, joint)?;
                let modulation_input = tape.silu(c);
                Ok(Conditioning { time, cond, modulation_input, shared: None, tokens: None })
            }
            (None, Some((proj, slot)), Some(shared)) => {
                let per_scalar = tape.reshape(cond, vec![CONDITION_SCALARS, enc.embed_dim()])?;
                let tok = proj.forward(tape, p, per_scalar)?;
                let tokens = tape.add(tok, p.var(slot))?;
                let modulation_input = tape.silu(time);
                let shared = shared.forward(tape, p, modulation_input)?;
                Ok(Conditioning { time, cond, modulation_input, shared: Some(shared), tokens: Some(tokens) })
            }
            _ => Err(Error::Config("inconsistent parameter layout".into())),
        }
    }

    fn modulation<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, m: Modulation, ctx: &Conditioning, chunks: usize) -> Result<Vec<Var>> {
        let d = self.config.width;
        let all = match m {
            Modulation::AdaLn(lin) => lin.forward(tape, p, ctx.modulation_input)?,
            Modulation::Table(table) => {
                let base = if chunks == 6 {
                    ctx.shared.ok_or_else(|| Error::Config("missing shared modulation".into()))?
                } else {
                    tape.concat_cols(&[ctx.time, ctx.time])?
                };
                tape.add(p.var(table), base)?
            }
        };
        (0..chunks).map(|k| tape.slice_cols(all, k * d, d)).collect()
    }

    fn modulate<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let s1 = tape.add_scalar(scale, 1.0);
        let y = tape.mul_row(x, s1)?;
        tape.add_row(y, shift)
    }

    fn self_attention<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, blk: &Block, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let d = self.config.width;
        let qkv = blk.qkv.forward(tape, p, x)?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, d)?;
        let v = tape.slice_cols(qkv, 2 * d, d)?;
        let a = tape.attention(q, k, v, self.config.heads, mask)?;
        blk.attn_out.forward(tape, p, a)
    }

    fn cross_attention<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, ca: &CrossAttn, x: Var, tokens: Var) -> Result<Var> {
        let d = self.config.width;
        let q = ca.q.forward(tape, p, x)?;
        let kv = ca.kv.forward(tape, p, tokens)?;
        let k = tape.slice_cols(kv, 0, d)?;
        let v = tape.slice_cols(kv, d, d)?;
        let a = tape.attention(q, k, v, self.config.heads, None)?;
        ca.out.forward(tape, p, a)
    }

    fn mlp<T: Scalar>(tape: &mut Tape<T>, p: &Binding, blk: &Block, x: Var) -> Result<Var> {
        let h = blk.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        blk.fc2.forward(tape, p, h)
    }

    /// One transformer block `[N x width] -> [N x width]`. `mask` marks real points.
    pub fn block_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Binding,
        index: usize,
        h: Var,
        ctx: &Conditioning,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let blk = self
            .layout
            .blocks
            .get(index)
            .ok_or_else(|| Error::Config(format!("block {index} out of range")))?;
        let m = self.modulation(tape, p, blk.modulation, ctx, 6)?;
        let (shift1, scale1, gate1, shift2, scale2, gate2) = (m[0], m[1], m[2], m[3], m[4], m[5]);

        let n1 = tape.layer_norm(h, None, None, LN_EPS)?;
        let a_in = Self::modulate(tape, n1, shift1, scale1)?;
        let sa = self.self_attention(tape, p, blk, a_in, mask)?;
        let h = match self.config.variant {
            Variant::Dit3dAdalnZero => {
                let g = tape.mul_row(sa, gate1)?;
                tape.add(h, g)?
            }
            Variant::PixartAdalnSingle => {
                let (ca, tokens) = self.cross_parts(blk, ctx)?;
                let g = tape.mul_row(sa, gate1)?;
                let h = tape.add(h, g)?;
                let c = self.cross_attention(tape, p, ca, h, tokens)?;
                tape.add(h, c)?
            }
            Variant::Logen => {
                let (ca, tokens) = self.cross_parts(blk, ctx)?;
                let c = self.cross_attention(tape, p, ca, sa, tokens)?;
                let branch = tape.add(sa, c)?;
                let g = tape.mul_row(branch, gate1)?;
                tape.add(h, g)?
            }
        };
        let n2 = tape.layer_norm(h, None, None, LN_EPS)?;
        let m_in = Self::modulate(tape, n2, shift2, scale2)?;
        let mlp = Self::mlp(tape, p, blk, m_in)?;
        let g = tape.mul_row(mlp, gate2)?;
        tape.add(h, g)
    }

    fn cross_parts<'a>(&self, blk: &'a Block, ctx: &Conditioning) -> Result<(&'a CrossAttn, Var)> {
        match (&blk.cross, ctx.tokens) {
            (Some(ca), Some(t)) => Ok((ca, t)),
            _ => Err(Error::Config("cross-attention variant without condition tokens".into())),
        }
    }

    /// Full forward pass: `x_t [N x 4] -> eps_hat [N x 4]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Binding,
        x: Var,
        t: usize,
        kappa: &Condition,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        if let Some(mk) = mask {
            if mk.len() != tape.value(x).rows() {
                return Err(Error::Dimension(format!("mask of {} for {} points", mk.len(), tape.value(x).rows())));
            }
        }
        let ctx = self.conditioning(tape, p, t, kappa)?;
        let mut h = self.embed_points(tape, p, x)?;
        for i in 0..self.config.depth {
            h = self.block_forward(tape, p, i, h, &ctx, mask)?;
        }
        let m = self.modulation(tape, p, self.layout.final_mod, &ctx, 2)?;
        let n = tape.layer_norm(h, None, None, LN_EPS)?;
        let y = Self::modulate(tape, n, m[0], m[1])?;
        self.layout.head.forward(tape, p, y)
    }

    /// Inference-only prediction on a row-major `[N x 4]` buffer.
    pub fn predict_noise(&self, x_t: &[f32], t: usize, kappa: &Condition, mask: Option<&[bool]>) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![x_t.len() / 4, 4], x_t.to_vec())?);
        if x_t.len() % 4 != 0 {
            return Err(Error::Dimension("point buffer length not a multiple of 4".into()));
        }
        let y = self.forward(&mut tape, &p, x, t, kappa, mask)?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: serde_json::to_value(self.config)?,
            meta,
            tensors: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: DenoiserConfig = serde_json::from_value(ck.config.clone())?;
        let mut model = Self::new(config, 0)?;
        model.params.load(ck.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(model)
    }
}
