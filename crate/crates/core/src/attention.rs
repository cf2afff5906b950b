//! The four attention families used as expert bodies.
//!
//! Every mechanism maps a `[L, D]` token sequence to a `[L, D]` sequence and
//! leaves residual connections to the caller.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{MiMConfig, Mechanism};
use crate::error::{MimError, Result};
use crate::params::{Linear, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Tokens laid out on a `height x width` grid in row-major order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

impl TokenSequence {
    pub fn new(g: &Graph, tokens: Var, height: usize, width: usize) -> Result<Self> {
        let shape = g.shape(tokens);
        if shape.len() != 2 || shape[0] != height * width {
            return Err(MimError::dim(
                "token_sequence",
                format!("{shape:?} does not hold a {height}x{width} grid"),
            ));
        }
        Ok(TokenSequence {
            tokens,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_tokens(&self, tokens: Var) -> Self {
        TokenSequence { tokens, ..*self }
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.shape(self.tokens)[1]
    }
}

/// Query, key, value and output projections, all `D x D`.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Projections {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Projections {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
        }
    }

    fn check(&self, s: &Session, x: Var) -> Result<()> {
        let d = s.store().get(self.query.weight).shape()[0];
        let xs = s.graph.shape(x);
        if xs.len() != 2 || xs[1] != d {
            return Err(MimError::dim("attention", format!("input {xs:?} for width {d}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelParams {
    pub proj: Projections,
    /// Learned multiplier on the cosine affinities.
    pub temperature: ParamId,
}

/// Squeeze-excitation bottleneck `D -> D/r -> D`.
#[derive(Clone, Copy, Debug)]
pub struct ExcitationParams {
    pub squeeze: Linear,
    pub expand: Linear,
}

#[derive(Clone, Copy, Debug)]
pub enum ExpertParams {
    Spatial(Projections),
    Channel(ChannelParams),
    Swin(Projections),
    Se(ExcitationParams),
}

impl ExpertParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        mechanism: Mechanism,
        cfg: &MiMConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.model_dim;
        match mechanism {
            Mechanism::Spatial => ExpertParams::Spatial(Projections::new(store, name, d, rng)),
            Mechanism::Swin => ExpertParams::Swin(Projections::new(store, name, d, rng)),
            Mechanism::Channel => ExpertParams::Channel(ChannelParams {
                proj: Projections::new(store, name, d, rng),
                temperature: store.add(format!("{name}.temperature"), Tensor::scalar(1.0)),
            }),
            Mechanism::Se => {
                let h = cfg.se_hidden();
                ExpertParams::Se(ExcitationParams {
                    squeeze: Linear::new(store, &format!("{name}.squeeze"), d, h, rng),
                    expand: Linear::new(store, &format!("{name}.expand"), h, d, rng),
                })
            }
        }
    }

    pub fn mechanism(&self) -> Mechanism {
        match self {
            ExpertParams::Spatial(_) => Mechanism::Spatial,
            ExpertParams::Channel(_) => Mechanism::Channel,
            ExpertParams::Swin(_) => Mechanism::Swin,
            ExpertParams::Se(_) => Mechanism::Se,
        }
    }
}

/// Per-call settings that are not parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSettings {
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

impl AttentionSettings {
    /// Settings for the `block`-th use: odd uses shift by half a window.
    pub fn for_block(cfg: &MiMConfig, block: usize) -> Self {
        AttentionSettings {
            heads: cfg.heads,
            window: cfg.window,
            shift: if block % 2 == 1 { cfg.window / 2 } else { 0 },
        }
    }
}

/// Anything that maps a token sequence to a same-shaped sequence.
pub trait Expert {
    fn forward(&self, s: &mut Session, x: &TokenSequence) -> Result<TokenSequence>;
}

/// An expert body paired with its call settings.
#[derive(Clone, Copy, Debug)]
pub struct BoundExpert<'p> {
    pub params: &'p ExpertParams,
    pub settings: AttentionSettings,
}

impl Expert for BoundExpert<'_> {
    fn forward(&self, s: &mut Session, x: &TokenSequence) -> Result<TokenSequence> {
        let st = self.settings;
        match self.params {
            ExpertParams::Spatial(p) => spatial_self_attention(s, x, p, st.heads),
            ExpertParams::Channel(p) => channel_self_attention(s, x, p, st.heads),
            ExpertParams::Swin(p) => swin_attention(s, x, p, st.heads, st.window, st.shift),
            ExpertParams::Se(p) => se_attention(s, x, p),
        }
    }
}

fn head_slices(s: &mut Session, x: Var, heads: usize, axis: usize) -> Result<Vec<Var>> {
    if heads == 1 {
        return Ok(vec![x]);
    }
    let d = s.graph.shape(x)[axis];
    if d % heads != 0 {
        return Err(MimError::Config(format!("width {d} not divisible by {heads} heads")));
    }
    s.graph.split(x, axis, &vec![d / heads; heads])
}

/// Softmax(q k^T / sqrt(d_head)) v over rows of `x`, then the output projection.
fn token_attention(s: &mut Session, x: Var, p: &Projections, heads: usize) -> Result<Var> {
    p.check(s, x)?;
    let q = p.query.forward(s, x)?;
    let k = p.key.forward(s, x)?;
    let v = p.value.forward(s, x)?;
    let (qs, ks, vs) = (
        head_slices(s, q, heads, 1)?,
        head_slices(s, k, heads, 1)?,
        head_slices(s, v, heads, 1)?,
    );
    let mut outs = Vec::with_capacity(heads);
    for ((qh, kh), vh) in qs.into_iter().zip(ks).zip(vs) {
        let hd = s.graph.shape(qh)[1];
        let kt = s.graph.transpose(kh)?;
        let scores = s.graph.matmul(qh, kt)?;
        let scores = s.graph.scale(scores, 1.0 / (hd as f64).sqrt());
        let weights = s.graph.softmax(scores, 1)?;
        outs.push(s.graph.matmul(weights, vh)?);
    }
    let merged = if outs.len() == 1 { outs[0] } else { s.graph.concat(&outs, 1)? };
    p.output.forward(s, merged)
}

pub fn spatial_self_attention(
    s: &mut Session,
    x: &TokenSequence,
    p: &Projections,
    heads: usize,
) -> Result<TokenSequence> {
    let y = token_attention(s, x.tokens, p, heads)?;
    Ok(x.with_tokens(y))
}

/// Transposed attention: channels attend to channels through a `D x D`
/// affinity of L2-normalized channel descriptors scaled by a learned temperature.
pub fn channel_self_attention(
    s: &mut Session,
    x: &TokenSequence,
    p: &ChannelParams,
    heads: usize,
) -> Result<TokenSequence> {
    p.proj.check(s, x.tokens)?;
    let q = p.proj.query.forward(s, x.tokens)?;
    let k = p.proj.key.forward(s, x.tokens)?;
    let v = p.proj.value.forward(s, x.tokens)?;
    let qt = s.graph.transpose(q)?;
    let kt = s.graph.transpose(k)?;
    let vt = s.graph.transpose(v)?;
    let temperature = s.p(p.temperature);
    let (qs, ks, vs) = (
        head_slices(s, qt, heads, 0)?,
        head_slices(s, kt, heads, 0)?,
        head_slices(s, vt, heads, 0)?,
    );
    let mut outs = Vec::with_capacity(heads);
    for ((qh, kh), vh) in qs.into_iter().zip(ks).zip(vs) {
        let qn = s.graph.l2_normalize(qh);
        let kn = s.graph.l2_normalize(kh);
        let knt = s.graph.transpose(kn)?;
        let affinity = s.graph.matmul(qn, knt)?;
        let affinity = s.graph.scale_by(affinity, temperature)?;
        let weights = s.graph.softmax(affinity, 1)?;
        outs.push(s.graph.matmul(weights, vh)?);
    }
    let merged = if outs.len() == 1 { outs[0] } else { s.graph.concat(&outs, 0)? };
    let merged = s.graph.transpose(merged)?;
    let y = p.proj.output.forward(s, merged)?;
    Ok(x.with_tokens(y))
}

fn check_window(height: usize, width: usize, window: usize, shift: usize) -> Result<()> {
    if window == 0 || height % window != 0 || width % window != 0 {
        return Err(MimError::Config(format!(
            "{height}x{width} grid is not divisible into {window}x{window} windows"
        )));
    }
    if shift >= window {
        return Err(MimError::Config(format!(
            "shift {shift} must be smaller than window {window}"
        )));
    }
    Ok(())
}

/// Source token index for each slot of the windowed layout.
///
/// The grid is cyclically shifted by `shift` toward the origin along both
/// axes, then read out window by window, each window in row-major order.
pub fn window_order(height: usize, width: usize, window: usize, shift: usize) -> Result<Vec<usize>> {
    check_window(height, width, window, shift)?;
    let mut order = Vec::with_capacity(height * width);
    for wy in 0..height / window {
        for wx in 0..width / window {
            for iy in 0..window {
                for ix in 0..window {
                    let y = (wy * window + iy + shift) % height;
                    let x = (wx * window + ix + shift) % width;
                    order.push(y * width + x);
                }
            }
        }
    }
    Ok(order)
}

fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (slot, &src) in order.iter().enumerate() {
        inv[src] = slot;
    }
    inv
}

fn permute_rows(t: &Tensor, order: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let y = g.gather_rows(x, order)?;
    Ok(g.value(y).clone())
}

/// Rearranges `[L, D]` tokens into consecutive shifted windows.
pub fn window_partition(t: &Tensor, height: usize, width: usize, window: usize, shift: usize) -> Result<Tensor> {
    permute_rows(t, &window_order(height, width, window, shift)?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(t: &Tensor, height: usize, width: usize, window: usize, shift: usize) -> Result<Tensor> {
    let order = window_order(height, width, window, shift)?;
    permute_rows(t, &inverse_permutation(&order))
}

pub fn swin_attention(
    s: &mut Session,
    x: &TokenSequence,
    p: &Projections,
    heads: usize,
    window: usize,
    shift: usize,
) -> Result<TokenSequence> {
    let order = window_order(x.height, x.width, window, shift)?;
    p.check(s, x.tokens)?;
    let windowed = s.graph.gather_rows(x.tokens, &order)?;
    let area = window * window;
    let count = x.len() / area;
    let pieces = if count == 1 {
        vec![windowed]
    } else {
        s.graph.split(windowed, 0, &vec![area; count])?
    };
    let mut outs = Vec::with_capacity(count);
    for piece in pieces {
        outs.push(token_attention(s, piece, p, heads)?);
    }
    let merged = if outs.len() == 1 { outs[0] } else { s.graph.concat(&outs, 0)? };
    let y = s.graph.gather_rows(merged, &inverse_permutation(&order))?;
    Ok(x.with_tokens(y))
}

/// `x * sigmoid(W2 gelu(W1 mean_L(x)))`, one scale per channel.
pub fn se_attention(s: &mut Session, x: &TokenSequence, p: &ExcitationParams) -> Result<TokenSequence> {
    let d = s.store().get(p.squeeze.weight).shape()[0];
    if x.dim(&s.graph) != d {
        return Err(MimError::dim(
            "se_attention",
            format!("input {:?} for width {d}", s.graph.shape(x.tokens)),
        ));
    }
    let squeezed = s.graph.mean_axis(x.tokens, 0)?;
    let hidden = p.squeeze.forward(s, squeezed)?;
    let hidden = s.graph.gelu(hidden);
    let logits = p.expand.forward(s, hidden)?;
    let scales = s.graph.sigmoid(logits);
    let y = s.graph.mul_row(x.tokens, scales)?;
    Ok(x.with_tokens(y))
}
