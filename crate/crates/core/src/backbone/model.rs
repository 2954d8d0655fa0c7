//! Forward and reverse passes of the backbone, generic over the scalar type.
//!
//! Weights are applied as `y = x·Wᵀ` with activations stored one token per
//! row. Every forward records a tape; the reverse pass consumes it and
//! accumulates weight gradients only for layers the [`BackwardSink`] asks for.

use super::BackboneConfig;
use crate::error::{CoreError, Result};
use crate::tensor::{Matrix, Real};

const LN_EPS: f64 = 1e-5;

/// Borrowed view of a weight table in [`super::layer_specs`] order.
pub struct Model<'a, T: Real> {
    cfg: &'a BackboneConfig,
    mats: Vec<&'a Matrix<T>>,
    layout: Layout,
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    up: usize,
    down: usize,
}

impl BlockIdx {
    fn at(start: usize) -> Self {
        Self {
            q: start,
            k: start + 1,
            v: start + 2,
            o: start + 3,
            up: start + 4,
            down: start + 5,
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    tok_embed: usize,
    pos_embed: usize,
    obs_proj: usize,
    enc: Vec<BlockIdx>,
    query: usize,
    proprio_proj: usize,
    act: Vec<BlockIdx>,
    out_proj: usize,
}

impl Layout {
    fn new(cfg: &BackboneConfig) -> Self {
        let enc: Vec<_> = (0..cfg.enc_layers).map(|i| BlockIdx::at(3 + 6 * i)).collect();
        let after_enc = 3 + 6 * cfg.enc_layers;
        let act: Vec<_> = (0..cfg.act_layers)
            .map(|i| BlockIdx::at(after_enc + 2 + 6 * i))
            .collect();
        Self {
            tok_embed: 0,
            pos_embed: 1,
            obs_proj: 2,
            enc,
            query: after_enc,
            proprio_proj: after_enc + 1,
            act,
            out_proj: after_enc + 2 + 6 * cfg.act_layers,
        }
    }
}

/// Closed-form multiply-accumulate count of one forward pass.
pub fn mac_count(cfg: &BackboneConfig) -> u64 {
    let d = cfg.model_dim as u64;
    let l = cfg.seq_len() as u64;
    let h = cfg.chunk_horizon as u64;
    let mem = l + 1;
    let hidden = cfg.mlp_dim() as u64;
    let enc_block = 4 * l * d * d + 2 * l * l * d + 2 * l * d * hidden;
    let act_block = 2 * h * d * d + 2 * mem * d * d + 2 * h * mem * d + 2 * h * d * hidden;
    d * cfg.obs_dim as u64
        + cfg.enc_layers as u64 * enc_block
        + d * cfg.proprio_dim as u64
        + cfg.act_layers as u64 * act_block
        + h * d * cfg.action_dim as u64
}

/// Receives weight gradients during the reverse pass.
pub struct BackwardSink<T: Real> {
    wants: Vec<bool>,
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> BackwardSink<T> {
    pub fn new(wants: Vec<bool>) -> Self {
        let grads = vec![None; wants.len()];
        Self { wants, grads }
    }

    pub fn all(n: usize) -> Self {
        Self::new(vec![true; n])
    }

    #[inline]
    pub fn wants(&self, idx: usize) -> bool {
        self.wants.get(idx).copied().unwrap_or(false)
    }

    fn add(&mut self, idx: usize, g: Matrix<T>) {
        match &mut self.grads[idx] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn slot(&mut self, idx: usize, rows: usize, cols: usize) -> &mut Matrix<T> {
        self.grads[idx].get_or_insert_with(|| Matrix::zeros(rows, cols))
    }

    /// Gradient for layer `idx`, if requested and reached.
    pub fn grad(&self, idx: usize) -> Option<&Matrix<T>> {
        self.grads[idx].as_ref()
    }

    pub fn into_grads(self) -> Vec<Option<Matrix<T>>> {
        self.grads
    }
}

struct LnCache<T> {
    y: Matrix<T>,
    inv_std: Vec<T>,
}

struct AttnCache<T> {
    q_in: Matrix<T>,
    kv_in: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// One `nq × nk` matrix per (example, head), example-major.
    probs: Vec<Matrix<T>>,
    ctx: Matrix<T>,
}

struct MlpCache<T> {
    input: Matrix<T>,
    pre: Matrix<T>,
    /// GELU inner tanh term per entry of `pre`.
    inner: Vec<T>,
    act: Matrix<T>,
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    mlp: MlpCache<T>,
}

/// Activations are stacked example-major: example `b` owns rows
/// `b·L .. (b+1)·L` of every encoder matrix.
pub struct EncoderTape<T> {
    batch: usize,
    tokens: Vec<u32>,
    obs: Matrix<T>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
}

pub struct ActionTape<T> {
    batch: usize,
    proprio: Matrix<T>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
}

/// Everything the reverse pass needs from one forward pass.
pub struct ForwardTape<T> {
    enc: EncoderTape<T>,
    act: ActionTape<T>,
}

impl<T> ForwardTape<T> {
    pub fn batch(&self) -> usize {
        self.enc.batch
    }
}

fn layer_norm<T: Real>(x: &Matrix<T>) -> LnCache<T> {
    let cols = x.cols();
    let n = T::from_f64(cols as f64);
    let eps = T::from_f64(LN_EPS);
    let mut y = Matrix::zeros(x.rows(), cols);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var / n;
        let inv = T::ONE / (var + eps).sqrt();
        for (o, &v) in y.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    LnCache { y, inv_std }
}

fn layer_norm_backward<T: Real>(cache: &LnCache<T>, dy: &Matrix<T>) -> Matrix<T> {
    let cols = dy.cols();
    let n = T::from_f64(cols as f64);
    let mut dx = Matrix::zeros(dy.rows(), cols);
    for r in 0..dy.rows() {
        let g = dy.row(r);
        let y = cache.y.row(r);
        let mut mean_g = T::ZERO;
        let mut mean_gy = T::ZERO;
        for (&gi, &yi) in g.iter().zip(y) {
            mean_g += gi;
            mean_gy += gi * yi;
        }
        mean_g = mean_g / n;
        mean_gy = mean_gy / n;
        let inv = cache.inv_std[r];
        for ((o, &gi), &yi) in dx.row_mut(r).iter_mut().zip(g).zip(y) {
            *o = inv * (gi - mean_g - yi * mean_gy);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

/// `tanh(c·(u + k·u³))`, the inner term of the tanh-form GELU, computed
/// through `exp` (cheaper than a library `tanh` and smooth everywhere).
#[inline]
fn gelu_inner<T: Real>(u: T) -> T {
    let y = T::from_f64(GELU_C) * (u + T::from_f64(GELU_K) * u * u * u);
    let two = T::from_f64(2.0);
    T::ONE - two / ((two * y).exp() + T::ONE)
}

#[inline]
fn gelu_from_inner<T: Real>(u: T, t: T) -> T {
    T::from_f64(0.5) * u * (T::ONE + t)
}

#[inline]
fn gelu_grad_from_inner<T: Real>(u: T, t: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(GELU_C);
    let k3 = T::from_f64(3.0 * GELU_K);
    half * (T::ONE + t) + half * u * (T::ONE - t * t) * c * (T::ONE + k3 * u * u)
}

fn add_in_place<T: Real>(acc: &mut Matrix<T>, other: &Matrix<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

impl<'a, T: Real> Model<'a, T> {
    pub fn new(cfg: &'a BackboneConfig, mats: Vec<&'a Matrix<T>>) -> Self {
        Self {
            layout: Layout::new(cfg),
            cfg,
            mats,
        }
    }

    pub fn from_params(cfg: &'a BackboneConfig, params: &'a [Matrix<T>]) -> Self {
        Self::new(cfg, params.iter().collect())
    }

    pub fn layer_count(&self) -> usize {
        self.mats.len()
    }

    fn linear(&self, x: &Matrix<T>, idx: usize, macs: &mut u64) -> Result<Matrix<T>> {
        let w = self.mats[idx];
        *macs += (x.rows() * w.rows() * w.cols()) as u64;
        x.matmul_nt(w)
    }

    /// Accumulates `dW += dyᵀ·x` if wanted and returns `dx = dy·W`.
    fn linear_backward(
        &self,
        x: &Matrix<T>,
        dy: &Matrix<T>,
        idx: usize,
        sink: &mut BackwardSink<T>,
    ) -> Result<Matrix<T>> {
        if sink.wants(idx) {
            sink.add(idx, dy.matmul_tn(x)?);
        }
        dy.matmul(self.mats[idx])
    }

    /// Multi-head attention applied independently to each of `batch`
    /// groups of rows.
    fn attention(
        &self,
        blk: BlockIdx,
        q_in: &Matrix<T>,
        kv_in: &Matrix<T>,
        batch: usize,
        macs: &mut u64,
    ) -> Result<(Matrix<T>, AttnCache<T>)> {
        let q = self.linear(q_in, blk.q, macs)?;
        let k = self.linear(kv_in, blk.k, macs)?;
        let v = self.linear(kv_in, blk.v, macs)?;
        let (nq, nk) = (q.rows() / batch, k.rows() / batch);
        let d = self.cfg.model_dim;
        let hd = self.cfg.head_dim();
        let scale = T::ONE / T::from_f64(hd as f64).sqrt();
        let mut ctx = Matrix::zeros(q.rows(), d);
        let mut probs = Vec::with_capacity(batch * self.cfg.heads);
        for b in 0..batch {
            let (q0, k0) = (b * nq, b * nk);
            for h in 0..self.cfg.heads {
                let off = h * hd;
                let mut p = Matrix::zeros(nq, nk);
                for i in 0..nq {
                    let qi = &q.row(q0 + i)[off..off + hd];
                    let prow = p.row_mut(i);
                    let mut max = T::ZERO;
                    for (j, s) in prow.iter_mut().enumerate() {
                        let kj = &k.row(k0 + j)[off..off + hd];
                        let mut acc = T::ZERO;
                        for (&a, &c) in qi.iter().zip(kj) {
                            acc += a * c;
                        }
                        *s = acc * scale;
                        if j == 0 || *s > max {
                            max = *s;
                        }
                    }
                    let mut total = T::ZERO;
                    for s in prow.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let inv = T::ONE / total;
                    for s in prow.iter_mut() {
                        *s *= inv;
                    }
                    let ci = &mut ctx.row_mut(q0 + i)[off..off + hd];
                    for (j, &pij) in p.row(i).iter().enumerate() {
                        let vj = &v.row(k0 + j)[off..off + hd];
                        for (c, &vv) in ci.iter_mut().zip(vj) {
                            *c += pij * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        *macs += (2 * batch * nq * nk * d) as u64;
        let out = self.linear(&ctx, blk.o, macs)?;
        Ok((
            out,
            AttnCache {
                q_in: q_in.clone(),
                kv_in: kv_in.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        ))
    }

    /// Returns `(d q_in, d kv_in)`.
    fn attention_backward(
        &self,
        blk: BlockIdx,
        c: &AttnCache<T>,
        d_out: &Matrix<T>,
        sink: &mut BackwardSink<T>,
    ) -> Result<(Matrix<T>, Matrix<T>)> {
        let d_ctx = self.linear_backward(&c.ctx, d_out, blk.o, sink)?;
        let heads = self.cfg.heads;
        let batch = c.probs.len() / heads;
        let (nq, nk) = (c.q.rows() / batch, c.k.rows() / batch);
        let d = self.cfg.model_dim;
        let hd = self.cfg.head_dim();
        let scale = T::ONE / T::from_f64(hd as f64).sqrt();
        let mut dq = Matrix::zeros(c.q.rows(), d);
        let mut dk = Matrix::zeros(c.k.rows(), d);
        let mut dv = Matrix::zeros(c.k.rows(), d);
        let mut ds = vec![T::ZERO; nk];
        for (gi, p) in c.probs.iter().enumerate() {
            let (b, h) = (gi / heads, gi % heads);
            let (q0, k0) = (b * nq, b * nk);
            let off = h * hd;
            for i in 0..nq {
                let dci = &d_ctx.row(q0 + i)[off..off + hd];
                let prow = p.row(i);
                let mut dot = T::ZERO;
                for j in 0..nk {
                    let vj = &c.v.row(k0 + j)[off..off + hd];
                    let mut dp = T::ZERO;
                    for (&a, &bb) in dci.iter().zip(vj) {
                        dp += a * bb;
                    }
                    ds[j] = dp;
                    dot += dp * prow[j];
                    let dvj = &mut dv.row_mut(k0 + j)[off..off + hd];
                    for (o, &g) in dvj.iter_mut().zip(dci) {
                        *o += prow[j] * g;
                    }
                }
                for j in 0..nk {
                    let s = prow[j] * (ds[j] - dot) * scale;
                    let kj = &c.k.row(k0 + j)[off..off + hd];
                    let dqi = &mut dq.row_mut(q0 + i)[off..off + hd];
                    for (o, &kk) in dqi.iter_mut().zip(kj) {
                        *o += s * kk;
                    }
                    let qi = &c.q.row(q0 + i)[off..off + hd];
                    let dkj = &mut dk.row_mut(k0 + j)[off..off + hd];
                    for (o, &qq) in dkj.iter_mut().zip(qi) {
                        *o += s * qq;
                    }
                }
            }
        }
        let d_q_in = self.linear_backward(&c.q_in, &dq, blk.q, sink)?;
        let mut d_kv_in = self.linear_backward(&c.kv_in, &dk, blk.k, sink)?;
        add_in_place(&mut d_kv_in, &self.linear_backward(&c.kv_in, &dv, blk.v, sink)?);
        Ok((d_q_in, d_kv_in))
    }

    fn mlp(&self, blk: BlockIdx, x: &Matrix<T>, macs: &mut u64) -> Result<(Matrix<T>, MlpCache<T>)> {
        let pre = self.linear(x, blk.up, macs)?;
        let inner: Vec<T> = pre.data().iter().map(|&u| gelu_inner(u)).collect();
        let mut act = pre.clone();
        for (v, &t) in act.data_mut().iter_mut().zip(&inner) {
            *v = gelu_from_inner(*v, t);
        }
        let out = self.linear(&act, blk.down, macs)?;
        Ok((
            out,
            MlpCache {
                input: x.clone(),
                pre,
                inner,
                act,
            },
        ))
    }

    fn mlp_backward(
        &self,
        blk: BlockIdx,
        c: &MlpCache<T>,
        d_out: &Matrix<T>,
        sink: &mut BackwardSink<T>,
    ) -> Result<Matrix<T>> {
        let mut d_pre = self.linear_backward(&c.act, d_out, blk.down, sink)?;
        for ((g, &u), &t) in d_pre.data_mut().iter_mut().zip(c.pre.data()).zip(&c.inner) {
            *g *= gelu_grad_from_inner(u, t);
        }
        self.linear_backward(&c.input, &d_pre, blk.up, sink)
    }

    /// Pre-norm residual block; `memory = None` means self-attention.
    fn block(
        &self,
        blk: BlockIdx,
        x: &mut Matrix<T>,
        memory: Option<&Matrix<T>>,
        batch: usize,
        macs: &mut u64,
    ) -> Result<BlockCache<T>> {
        let ln1 = layer_norm(x);
        let kv = memory.unwrap_or(&ln1.y);
        let (att, attn) = self.attention(blk, &ln1.y, kv, batch, macs)?;
        add_in_place(x, &att);
        let ln2 = layer_norm(x);
        let (m, mlp) = self.mlp(blk, &ln2.y, macs)?;
        add_in_place(x, &m);
        Ok(BlockCache { ln1, attn, ln2, mlp })
    }

    /// Propagates `dx` (gradient w.r.t. block output) back to the block
    /// input in place; returns the memory gradient for cross-attention blocks.
    fn block_backward(
        &self,
        blk: BlockIdx,
        c: &BlockCache<T>,
        dx: &mut Matrix<T>,
        cross: bool,
        sink: &mut BackwardSink<T>,
    ) -> Result<Option<Matrix<T>>> {
        let d_ln2 = self.mlp_backward(blk, &c.mlp, dx, sink)?;
        add_in_place(dx, &layer_norm_backward(&c.ln2, &d_ln2));
        let (mut d_ln1, d_kv) = self.attention_backward(blk, &c.attn, dx, sink)?;
        let d_mem = if cross {
            Some(d_kv)
        } else {
            add_in_place(&mut d_ln1, &d_kv);
            None
        };
        add_in_place(dx, &layer_norm_backward(&c.ln1, &d_ln1));
        Ok(d_mem)
    }

    fn check_inputs(&self, tokens: &[u32], obs: &[T]) -> Result<()> {
        if tokens.len() != self.cfg.max_instr_len {
            return Err(CoreError::Dimension {
                what: "instruction tokens".into(),
                expected: self.cfg.max_instr_len,
                got: tokens.len(),
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(CoreError::Dimension {
                what: "token id".into(),
                expected: self.cfg.vocab_size,
                got: t as usize,
            });
        }
        if obs.len() != self.cfg.obs_dim {
            return Err(CoreError::Dimension {
                what: "observation".into(),
                expected: self.cfg.obs_dim,
                got: obs.len(),
            });
        }
        Ok(())
    }

    /// `z = f_enc(obs, tokens)` for one example, `L × d`.
    pub fn encode(&self, tokens: &[u32], obs: &[T], macs: &mut u64) -> Result<(Matrix<T>, EncoderTape<T>)> {
        self.encode_batch(&[tokens], &[obs], macs)
    }

    /// Batched encoder; returns `z` stacked as `(B·L) × d`.
    pub fn encode_batch(&self, tokens: &[&[u32]], obs: &[&[T]], macs: &mut u64) -> Result<(Matrix<T>, EncoderTape<T>)> {
        let batch = tokens.len();
        if batch == 0 || obs.len() != batch {
            return Err(CoreError::Dimension {
                what: "encoder batch (tokens vs observations)".into(),
                expected: batch.max(1),
                got: obs.len(),
            });
        }
        for (t, o) in tokens.iter().zip(obs) {
            self.check_inputs(t, o)?;
        }
        let lay = &self.layout;
        let d = self.cfg.model_dim;
        let li = self.cfg.max_instr_len;
        let l = li + 1;
        let tok = self.mats[lay.tok_embed];
        let pos = self.mats[lay.pos_embed];

        let obs_m = Matrix::from_vec(batch, self.cfg.obs_dim, obs.concat())?;
        let obs_tok = self.linear(&obs_m, lay.obs_proj, macs)?;
        let mut x = Matrix::zeros(batch * l, d);
        for b in 0..batch {
            for (i, &t) in tokens[b].iter().enumerate() {
                let te = tok.row(t as usize);
                let pe = pos.row(i);
                for ((o, &a), &c) in x.row_mut(b * l + i).iter_mut().zip(te).zip(pe) {
                    *o = a + c;
                }
            }
            let pe = pos.row(li);
            for ((o, &a), &c) in x.row_mut(b * l + li).iter_mut().zip(obs_tok.row(b)).zip(pe) {
                *o = a + c;
            }
        }

        let mut blocks = Vec::with_capacity(lay.enc.len());
        for &blk in &lay.enc {
            blocks.push(self.block(blk, &mut x, None, batch, macs)?);
        }
        let final_ln = layer_norm(&x);
        Ok((
            final_ln.y.clone(),
            EncoderTape {
                batch,
                tokens: tokens.concat(),
                obs: obs_m,
                blocks,
                final_ln,
            },
        ))
    }

    /// `â = f_act(z, proprio)` for one example, `H × d_a`.
    pub fn act(&self, z: &Matrix<T>, proprio: &[T], macs: &mut u64) -> Result<(Matrix<T>, ActionTape<T>)> {
        self.act_batch(z, &[proprio], macs)
    }

    /// Batched action head over stacked `z`; returns `(B·H) × d_a`.
    pub fn act_batch(&self, z: &Matrix<T>, proprio: &[&[T]], macs: &mut u64) -> Result<(Matrix<T>, ActionTape<T>)> {
        let lay = &self.layout;
        let d = self.cfg.model_dim;
        let l = self.cfg.seq_len();
        let batch = proprio.len();
        if batch == 0 || z.shape() != (batch * l, d) {
            return Err(CoreError::Shape {
                op: "act input z",
                left: (batch * l, d),
                right: z.shape(),
            });
        }
        if let Some(p) = proprio.iter().find(|p| p.len() != self.cfg.proprio_dim) {
            return Err(CoreError::Dimension {
                what: "proprio".into(),
                expected: self.cfg.proprio_dim,
                got: p.len(),
            });
        }
        let m = l + 1;
        let pro_m = Matrix::from_vec(batch, self.cfg.proprio_dim, proprio.concat())?;
        let pro_tok = self.linear(&pro_m, lay.proprio_proj, macs)?;
        let mut mem = Matrix::zeros(batch * m, d);
        for b in 0..batch {
            mem.data_mut()[b * m * d..(b * m + l) * d].copy_from_slice(&z.data()[b * l * d..(b + 1) * l * d]);
            mem.row_mut(b * m + l).copy_from_slice(pro_tok.row(b));
        }

        let query = self.mats[lay.query];
        let hq = query.rows();
        let mut h = Matrix::zeros(batch * hq, d);
        for b in 0..batch {
            h.data_mut()[b * hq * d..(b + 1) * hq * d].copy_from_slice(query.data());
        }
        let mut blocks = Vec::with_capacity(lay.act.len());
        for &blk in &lay.act {
            blocks.push(self.block(blk, &mut h, Some(&mem), batch, macs)?);
        }
        let final_ln = layer_norm(&h);
        let out = self.linear(&final_ln.y, lay.out_proj, macs)?;
        Ok((
            out,
            ActionTape {
                batch,
                proprio: pro_m,
                blocks,
                final_ln,
            },
        ))
    }

    pub fn forward(&self, tokens: &[u32], obs: &[T], proprio: &[T], macs: &mut u64) -> Result<(Matrix<T>, ForwardTape<T>)> {
        self.forward_batch(&[tokens], &[obs], &[proprio], macs)
    }

    pub fn forward_batch(
        &self,
        tokens: &[&[u32]],
        obs: &[&[T]],
        proprio: &[&[T]],
        macs: &mut u64,
    ) -> Result<(Matrix<T>, ForwardTape<T>)> {
        let (z, enc) = self.encode_batch(tokens, obs, macs)?;
        let (out, act) = self.act_batch(&z, proprio, macs)?;
        Ok((out, ForwardTape { enc, act }))
    }

    /// Reverse pass of the action head; returns `dL/dz` stacked like `z`.
    pub fn act_backward(&self, tape: &ActionTape<T>, d_out: &Matrix<T>, sink: &mut BackwardSink<T>) -> Result<Matrix<T>> {
        let lay = &self.layout;
        let d = self.cfg.model_dim;
        let l = self.cfg.seq_len();
        let m = l + 1;
        let batch = tape.batch;
        let d_y = self.linear_backward(&tape.final_ln.y, d_out, lay.out_proj, sink)?;
        let mut dh = layer_norm_backward(&tape.final_ln, &d_y);
        let mut d_mem = Matrix::zeros(batch * m, d);
        for (&blk, cache) in lay.act.iter().zip(&tape.blocks).rev() {
            if let Some(dm) = self.block_backward(blk, cache, &mut dh, true, sink)? {
                add_in_place(&mut d_mem, &dm);
            }
        }
        if sink.wants(lay.query) {
            let hq = self.mats[lay.query].rows();
            let g = sink.slot(lay.query, hq, d);
            for b in 0..batch {
                for (o, &v) in g.data_mut().iter_mut().zip(&dh.data()[b * hq * d..(b + 1) * hq * d]) {
                    *o += v;
                }
            }
        }
        let mut dz = Matrix::zeros(batch * l, d);
        let mut d_pro = Matrix::zeros(batch, d);
        for b in 0..batch {
            dz.data_mut()[b * l * d..(b + 1) * l * d].copy_from_slice(&d_mem.data()[b * m * d..(b * m + l) * d]);
            d_pro.row_mut(b).copy_from_slice(d_mem.row(b * m + l));
        }
        if sink.wants(lay.proprio_proj) {
            sink.add(lay.proprio_proj, d_pro.matmul_tn(&tape.proprio)?);
        }
        Ok(dz)
    }

    /// Reverse pass of the encoder given `dL/dz`.
    pub fn encode_backward(&self, tape: &EncoderTape<T>, dz: &Matrix<T>, sink: &mut BackwardSink<T>) -> Result<()> {
        let lay = &self.layout;
        let d = self.cfg.model_dim;
        let li = self.cfg.max_instr_len;
        let l = li + 1;
        let batch = tape.batch;
        let mut dx = layer_norm_backward(&tape.final_ln, dz);
        for (&blk, cache) in lay.enc.iter().zip(&tape.blocks).rev() {
            self.block_backward(blk, cache, &mut dx, false, sink)?;
        }
        if sink.wants(lay.tok_embed) {
            let g = sink.slot(lay.tok_embed, self.cfg.vocab_size, d);
            for b in 0..batch {
                for (i, &t) in tape.tokens[b * li..(b + 1) * li].iter().enumerate() {
                    for (o, &v) in g.row_mut(t as usize).iter_mut().zip(dx.row(b * l + i)) {
                        *o += v;
                    }
                }
            }
        }
        if sink.wants(lay.pos_embed) {
            let g = sink.slot(lay.pos_embed, l, d);
            for b in 0..batch {
                for (o, &v) in g.data_mut().iter_mut().zip(&dx.data()[b * l * d..(b + 1) * l * d]) {
                    *o += v;
                }
            }
        }
        if sink.wants(lay.obs_proj) {
            let mut d_obs = Matrix::zeros(batch, d);
            for b in 0..batch {
                d_obs.row_mut(b).copy_from_slice(dx.row(b * l + li));
            }
            sink.add(lay.obs_proj, d_obs.matmul_tn(&tape.obs)?);
        }
        Ok(())
    }

    pub fn backward(&self, tape: &ForwardTape<T>, d_out: &Matrix<T>, sink: &mut BackwardSink<T>) -> Result<()> {
        let dz = self.act_backward(&tape.act, d_out, sink)?;
        self.encode_backward(&tape.enc, &dz, sink)
    }
}
