//! The 3D masked autoencoder.
//!
//! Encoder: linear token embedding of the visible tokens plus fixed sin-cos
//! positions, pre-norm transformer blocks, final layer norm. Decoder: linear
//! projection to the decoder width, a learnable mask token at every hidden
//! slot, tokens restored to raster order, decoder positions added,
//! transformer blocks, layer norm and a linear head back to voxel values.
//! There is no class token.
//!
//! Canonical parameter order (also the checkpoint order), per sub-network:
//! `patch_embed.{weight,bias}`, then for each encoder block
//! `norm1.{weight,bias}`, `attn.{q,k,v,proj}.{weight,bias}`,
//! `norm2.{weight,bias}`, `mlp.{fc1,fc2}.{weight,bias}`, then
//! `norm.{weight,bias}`, `decoder_embed.{weight,bias}`, `mask_token`, the
//! decoder blocks in the same layout, `decoder_norm.{weight,bias}`,
//! `decoder_pred.{weight,bias}`. Linear weights are stored `[in × out]`.

use rand_distr::{Distribution, Normal};

use super::config::{ChannelMode, LossScope, MaeConfig};
use crate::error::{bail, Result};
use crate::ndnum::{Tape, Tensor, Var};
use crate::patchgrid::{sincos_pos_embed_3d, MaskPlan, PatchSpec, TokenGrid};
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug)]
struct LinearIx {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIx {
    g: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct BlockIx {
    norm1: NormIx,
    q: LinearIx,
    k: LinearIx,
    v: LinearIx,
    proj: LinearIx,
    norm2: NormIx,
    fc1: LinearIx,
    fc2: LinearIx,
    heads: usize,
}

#[derive(Clone, Debug)]
struct NetIx {
    embed: LinearIx,
    encoder: Vec<BlockIx>,
    norm: NormIx,
    decoder_embed: LinearIx,
    mask_token: usize,
    decoder: Vec<BlockIx>,
    decoder_norm: NormIx,
    pred: LinearIx,
}

/// Learnable parameters plus fixed positional tables.
#[derive(Clone, Debug)]
pub struct MaeModel {
    config: MaeConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    nets: Vec<NetIx>,
    enc_pos: Vec<f64>,
    dec_pos: Vec<f64>,
}

struct Builder<'a> {
    params: Vec<Tensor>,
    names: Vec<String>,
    rng: &'a mut rng::Rng,
    std: f64,
}

impl Builder<'_> {
    fn trunc_normal(&mut self, n: usize) -> Vec<f64> {
        let dist = Normal::new(0.0, self.std).expect("positive std");
        (0..n)
            .map(|_| loop {
                let v: f64 = dist.sample(self.rng);
                if v.abs() <= 2.0 * self.std {
                    break v;
                }
            })
            .collect()
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) -> usize {
        self.params
            .push(Tensor::new(shape, data).expect("builder shapes").with_grad());
        self.names.push(name);
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearIx {
        let w = self.trunc_normal(din * dout);
        let w = self.push(format!("{name}.weight"), vec![din, dout], w);
        let b = self.push(format!("{name}.bias"), vec![dout], vec![0.0; dout]);
        LinearIx { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIx {
        let g = self.push(format!("{name}.weight"), vec![d], vec![1.0; d]);
        let b = self.push(format!("{name}.bias"), vec![d], vec![0.0; d]);
        NormIx { g, b }
    }

    fn block(&mut self, name: &str, d: usize, heads: usize, mlp: usize) -> BlockIx {
        BlockIx {
            norm1: self.norm(&format!("{name}.norm1"), d),
            q: self.linear(&format!("{name}.attn.q"), d, d),
            k: self.linear(&format!("{name}.attn.k"), d, d),
            v: self.linear(&format!("{name}.attn.v"), d, d),
            proj: self.linear(&format!("{name}.attn.proj"), d, d),
            norm2: self.norm(&format!("{name}.norm2"), d),
            fc1: self.linear(&format!("{name}.mlp.fc1"), d, d * mlp),
            fc2: self.linear(&format!("{name}.mlp.fc2"), d * mlp, d),
            heads,
        }
    }
}

/// Build-time view of where each sub-network's leaves live on a tape.
struct Bound<'a> {
    vars: &'a [Var],
}

impl Bound<'_> {
    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }
}

fn linear(tape: &mut Tape, p: &Bound, l: LinearIx, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.v(l.w))?;
    tape.add_bias(y, p.v(l.b))
}

fn norm(tape: &mut Tape, p: &Bound, n: NormIx, x: Var, eps: f64) -> Result<Var> {
    tape.layer_norm(x, p.v(n.g), p.v(n.b), eps)
}

fn block(tape: &mut Tape, p: &Bound, b: &BlockIx, x: Var, eps: f64) -> Result<Var> {
    let h = norm(tape, p, b.norm1, x, eps)?;
    let q = linear(tape, p, b.q, h)?;
    let k = linear(tape, p, b.k, h)?;
    let v = linear(tape, p, b.v, h)?;
    let (qh, kh, vh) = (
        tape.split_heads(q, b.heads)?,
        tape.split_heads(k, b.heads)?,
        tape.split_heads(v, b.heads)?,
    );
    let dh = tape.shape(qh)[2];
    let a = tape.softmax_attention(qh, kh, vh, 1.0 / (dh as f64).sqrt())?;
    let a = tape.merge_heads(a)?;
    let a = linear(tape, p, b.proj, a)?;
    let x = tape.add(x, a)?;
    let h = norm(tape, p, b.norm2, x, eps)?;
    let h = linear(tape, p, b.fc1, h)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, p, b.fc2, h)?;
    tape.add(x, h)
}

fn gather_table(table: &[f64], width: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&table[r * width..(r + 1) * width]);
    }
    out
}

/// Outputs recorded for one forward pass.
pub(crate) struct Recorded {
    pub latent: Vec<Var>,
    pub recon: Vec<Var>,
}

impl MaeModel {
    /// Randomly initialised model (truncated normal, std `config.init_std`).
    pub fn new(config: MaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let net_spec = config.net_spec();
        let td = net_spec.token_dim();
        let mut r = rng::stream(seed, &[tag::INIT]);
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            rng: &mut r,
            std: config.init_std,
        };
        let mut nets = Vec::new();
        for n in 0..config.net_count() {
            let pre = if config.net_count() == 1 {
                String::new()
            } else {
                format!("net{n}.")
            };
            let (e, d) = (config.encoder_dim, config.decoder_dim);
            let embed = b.linear(&format!("{pre}patch_embed"), td, e);
            let encoder = (0..config.encoder_depth)
                .map(|i| b.block(&format!("{pre}blocks.{i}"), e, config.encoder_heads, config.mlp_ratio))
                .collect();
            let norm = b.norm(&format!("{pre}norm"), e);
            let decoder_embed = b.linear(&format!("{pre}decoder_embed"), e, d);
            let mt = b.trunc_normal(d);
            let mask_token = b.push(format!("{pre}mask_token"), vec![d], mt);
            let decoder = (0..config.decoder_depth)
                .map(|i| {
                    b.block(
                        &format!("{pre}decoder_blocks.{i}"),
                        d,
                        config.decoder_heads,
                        config.mlp_ratio,
                    )
                })
                .collect();
            let decoder_norm = b.norm(&format!("{pre}decoder_norm"), d);
            let pred = b.linear(&format!("{pre}decoder_pred"), d, td);
            nets.push(NetIx {
                embed,
                encoder,
                norm,
                decoder_embed,
                mask_token,
                decoder,
                decoder_norm,
                pred,
            });
        }
        let (params, names) = (b.params, b.names);
        let g = config.spec.grid_shape();
        let enc_pos = sincos_pos_embed_3d(g, config.encoder_dim)?;
        let dec_pos = sincos_pos_embed_3d(g, config.decoder_dim)?;
        Ok(Self {
            config,
            params,
            names,
            nets,
            enc_pos,
            dec_pos,
        })
    }

    pub fn config(&self) -> &MaeConfig {
        &self.config
    }

    pub fn spec(&self) -> &PatchSpec {
        &self.config.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Flat copy of every parameter in canonical order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// Overwrite all parameters from a flat canonical-order buffer.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            bail!(
                Checkpoint,
                "{} values for a model of {} parameters",
                flat.len(),
                self.parameter_count()
            );
        }
        let mut o = 0;
        for p in &mut self.params {
            let n = p.numel();
            p.data_mut().copy_from_slice(&flat[o..o + n]);
            o += n;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Index of the mask-token parameter of sub-network `net`.
    pub fn mask_token_index(&self, net: usize) -> usize {
        self.nets[net].mask_token
    }

    fn check_grid(&self, grid: &TokenGrid, plan: &MaskPlan) -> Result<()> {
        let spec = &self.config.spec;
        if grid.grid_shape != spec.grid_shape() || grid.token_dim != spec.token_dim() {
            bail!(
                Dimension,
                "token grid {:?}×{} does not match model {:?}×{}",
                grid.grid_shape,
                grid.token_dim,
                spec.grid_shape(),
                spec.token_dim()
            );
        }
        if plan.token_count() != spec.token_count() {
            bail!(
                Dimension,
                "mask plan over {} tokens for a model of {}",
                plan.token_count(),
                spec.token_count()
            );
        }
        Ok(())
    }

    /// Token values seen by sub-network `net` (the whole token in joint
    /// mode, that sequence's slice in separate mode).
    fn net_tokens(&self, grid: &TokenGrid, net: usize) -> Vec<f64> {
        if self.nets.len() == 1 {
            return grid.tokens.clone();
        }
        let per = self.config.net_spec().token_dim();
        let mut out = Vec::with_capacity(grid.token_count() * per);
        for t in 0..grid.token_count() {
            out.extend_from_slice(&grid.token(t)[net * per..(net + 1) * per]);
        }
        out
    }

    /// Record the forward pass on `tape` with parameter leaves `vars`.
    /// `visible` lists the kept tokens in the order they enter the encoder.
    pub(crate) fn record(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        grid: &TokenGrid,
        plan: &MaskPlan,
        visible: &[usize],
    ) -> Result<Recorded> {
        self.check_grid(grid, plan)?;
        let n = grid.token_count();
        let (e, d) = (self.config.encoder_dim, self.config.decoder_dim);
        let eps = self.config.norm_eps;
        let td = self.config.net_spec().token_dim();
        let p = Bound { vars };
        // Row of each token in [visible ; mask tokens].
        let mut restore = vec![0usize; n];
        for (r, &t) in visible.iter().enumerate() {
            restore[t] = r;
        }
        for (r, &t) in plan.masked.iter().enumerate() {
            restore[t] = visible.len() + r;
        }
        let mut latent = Vec::new();
        let mut recon = Vec::new();
        for (ni, net) in self.nets.iter().enumerate() {
            let tokens = tape.constant([n, td], self.net_tokens(grid, ni))?;
            let x = tape.gather_rows(tokens, visible)?;
            let x = linear(tape, &p, net.embed, x)?;
            let pos = tape.constant([visible.len(), e], gather_table(&self.enc_pos, e, visible))?;
            let mut x = tape.add(x, pos)?;
            for b in &net.encoder {
                x = block(tape, &p, b, x, eps)?;
            }
            let x = norm(tape, &p, net.norm, x, eps)?;
            latent.push(x);
            let y = linear(tape, &p, net.decoder_embed, x)?;
            let fill = tape.broadcast_rows(p.v(net.mask_token), plan.masked.len())?;
            let y = tape.concat_rows(y, fill)?;
            let y = tape.gather_rows(y, &restore)?;
            let pos = tape.constant([n, d], self.dec_pos.clone())?;
            let mut y = tape.add(y, pos)?;
            for b in &net.decoder {
                y = block(tape, &p, b, y, eps)?;
            }
            let y = norm(tape, &p, net.decoder_norm, y, eps)?;
            recon.push(linear(tape, &p, net.pred, y)?);
        }
        Ok(Recorded { latent, recon })
    }

    fn bind(&self, tape: &mut Tape, with_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| {
                if with_grad {
                    tape.leaf(t)
                } else {
                    let v = tape.constant(t.shape().to_vec(), t.data().to_vec());
                    v.expect("parameter shapes are consistent")
                }
            })
            .collect()
    }

    /// Merge per-network reconstructions into full tokens.
    fn merge_recon(&self, parts: Vec<Vec<f64>>, n: usize) -> Vec<f64> {
        if parts.len() == 1 {
            return parts.into_iter().next().expect("one part");
        }
        let per = self.config.net_spec().token_dim();
        let mut out = Vec::with_capacity(n * per * parts.len());
        for t in 0..n {
            for p in &parts {
                out.extend_from_slice(&p[t * per..(t + 1) * per]);
            }
        }
        out
    }

    /// Reconstruct every token (`token_count × token_dim`) from the visible
    /// subset named by `plan`.
    pub fn forward(&self, grid: &TokenGrid, plan: &MaskPlan) -> Result<Vec<f64>> {
        self.forward_ordered(grid, plan, &plan.kept)
    }

    /// As [`forward`](Self::forward) but feeding visible tokens to the
    /// encoder in the given order.
    pub fn forward_ordered(&self, grid: &TokenGrid, plan: &MaskPlan, visible: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let rec = self.record(&mut tape, &vars, grid, plan, visible)?;
        let parts = rec.recon.iter().map(|&v| tape.value(v).to_vec()).collect();
        Ok(self.merge_recon(parts, grid.token_count()))
    }

    /// Encoder output for the visible tokens, one `kept × encoder_dim`
    /// block per sub-network.
    pub fn encode(&self, grid: &TokenGrid, plan: &MaskPlan) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let rec = self.record(&mut tape, &vars, grid, plan, &plan.kept)?;
        Ok(rec.latent.iter().map(|&v| tape.value(v).to_vec()).collect())
    }

    /// Training loss for one sample and its gradient per parameter tensor.
    pub fn loss_and_grad(&self, grid: &TokenGrid, plan: &MaskPlan) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true);
        let loss = self.record_loss(&mut tape, &vars, grid, plan)?;
        let value = tape.item(loss);
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], |g| g.to_vec()))
            .collect();
        Ok((value, grads))
    }

    /// Loss only (no gradient), as used by finite-difference checks.
    pub fn loss(&self, grid: &TokenGrid, plan: &MaskPlan) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let loss = self.record_loss(&mut tape, &vars, grid, plan)?;
        Ok(tape.item(loss))
    }

    fn record_loss(&self, tape: &mut Tape, vars: &[Var], grid: &TokenGrid, plan: &MaskPlan) -> Result<Var> {
        let rec = self.record(tape, vars, grid, plan, &plan.kept)?;
        let n = grid.token_count();
        let td = self.config.net_spec().token_dim();
        let mut total = None;
        for (ni, &r) in rec.recon.iter().enumerate() {
            let target = tape.constant([n, td], self.net_tokens(grid, ni))?;
            let l = masked_mse(tape, r, target, plan, self.config.loss_scope)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let total = total.expect("at least one network");
        // Equal-sized channel groups: the mean of per-network losses is the
        // loss over full tokens.
        if rec.recon.len() > 1 {
            tape.scale(total, 1.0 / rec.recon.len() as f64)
        } else {
            Ok(total)
        }
    }
}

/// Mean squared error between `recon` and `target` (`[n × token_dim]`) over
/// the tokens selected by `scope`. Differentiable through `recon`.
pub fn masked_mse(tape: &mut Tape, recon: Var, target: Var, plan: &MaskPlan, scope: LossScope) -> Result<Var> {
    if tape.shape(recon) != tape.shape(target) {
        bail!(
            Dimension,
            "reconstruction {:?} and target {:?} differ",
            tape.shape(recon),
            tape.shape(target)
        );
    }
    let (r, t) = match scope {
        LossScope::All => (recon, target),
        LossScope::Masked => {
            if plan.masked.is_empty() {
                bail!(Contract, "masked loss with no masked tokens");
            }
            (
                tape.gather_rows(recon, &plan.masked)?,
                tape.gather_rows(target, &plan.masked)?,
            )
        }
    };
    let diff = tape.sub(r, t)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Plain-value masked MSE over `token_dim`-wide rows.
pub fn masked_mse_loss(recon: &[f64], target: &[f64], token_dim: usize, plan: &MaskPlan) -> Result<f64> {
    if recon.len() != target.len() || recon.len() != plan.token_count() * token_dim {
        bail!(
            Dimension,
            "reconstruction of {} values, target of {}, plan over {} tokens of {}",
            recon.len(),
            target.len(),
            plan.token_count(),
            token_dim
        );
    }
    let mut tape = Tape::new();
    let shape = [plan.token_count(), token_dim];
    let r = tape.constant(shape, recon.to_vec())?;
    let t = tape.constant(shape, target.to_vec())?;
    let l = masked_mse(&mut tape, r, t, plan, LossScope::Masked)?;
    Ok(tape.item(l))
}

/// Anything that can fill in masked tokens: the trained model, or a stub.
pub trait Reconstructor: Sync {
    fn spec(&self) -> &PatchSpec;
    fn reconstruct(&self, grid: &TokenGrid, plan: &MaskPlan) -> Result<Vec<f64>>;
}

impl Reconstructor for MaeModel {
    fn spec(&self) -> &PatchSpec {
        &self.config.spec
    }

    fn reconstruct(&self, grid: &TokenGrid, plan: &MaskPlan) -> Result<Vec<f64>> {
        self.forward(grid, plan)
    }
}

impl ChannelMode {
    pub fn label(self) -> &'static str {
        match self {
            ChannelMode::Joint => "joint",
            ChannelMode::Separate => "separate",
        }
    }
}
