//! Toy diffusion-transformer backbone with MiM conditioning.
//!
//! Each block concatenates `[text | dit | zero_linear(MiM(cond))]` along the
//! token axis, runs one joint attention and MLP over the whole sequence, then
//! splits the result back into the three segments. The MiM segment of one
//! block's output is the MiM input of the next.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Projections, TokenSequence};
use crate::autodiff::Var;
use crate::config::MiMConfig;
use crate::error::{MimError, Result};
use crate::params::{LayerNorm, Linear, ParamId, ParamStore, Session};
use crate::routing::{mim_forward, MimModule, RoutingSink};
use crate::tensor::Tensor;

/// Whether blocks receive the MiM conditioning segment or a zero segment in its place.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    Enabled,
    Disabled,
}

/// Sinusoidal features of `t`, shape `[1, dim]`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::new(vec![1, dim], out).expect("dim >= 1")
}

#[derive(Clone, Copy, Debug)]
pub struct TimeEmbedder {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TimeEmbedder {
    pub fn forward(&self, s: &mut Session, t: f64) -> Result<Var> {
        let d = s.store().get(self.fc1.weight).shape()[0];
        let feats = s.constant(sinusoidal_embedding(t, d));
        let h = self.fc1.forward(s, feats)?;
        let h = s.graph.gelu(h);
        self.fc2.forward(s, h)
    }
}

#[derive(Clone, Debug)]
pub struct DitBlock {
    pub norm1: LayerNorm,
    pub attention: Projections,
    pub norm2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    /// Time embedding to `[shift1, scale1, shift2, scale2]`, zero at init.
    pub modulation: Linear,
    /// Zero at init, so the conditioning segment starts as exact zeros.
    pub zero_linear: Linear,
    pub mim: MimModule,
}

/// The three token segments threaded between blocks.
#[derive(Clone, Copy, Debug)]
pub struct LatentState {
    pub text: Var,
    pub dit: Var,
    pub mim: Var,
}

pub fn zero_linear(s: &mut Session, x: Var, p: &Linear) -> Result<Var> {
    p.forward(s, x)
}

/// `h * (1 + scale) + shift` with row-broadcast `[1, D]` modulation.
fn modulate(s: &mut Session, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let d = s.graph.shape(scale)[1];
    let ones = s.constant(Tensor::full(&[1, d], 1.0));
    let gain = s.graph.add(scale, ones)?;
    let h = s.graph.mul_row(h, gain)?;
    s.graph.add_row(h, shift)
}

/// Full velocity network.
#[derive(Clone, Debug)]
pub struct MimDit {
    pub cfg: MiMConfig,
    pub latent_embed: Linear,
    pub lq_embed: Linear,
    pub position: ParamId,
    pub text: ParamId,
    pub time: TimeEmbedder,
    pub blocks: Vec<DitBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl MimDit {
    /// Builds the model and a freshly initialized parameter store.
    pub fn new(cfg: &MiMConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, p, l) = (cfg.model_dim, cfg.patch_dim(), cfg.tokens());
        let rng = &mut rng;
        let latent_embed = Linear::new(&mut store, "latent_embed", p, d, rng);
        let lq_embed = Linear::new(&mut store, "lq_embed", p, d, rng);
        let position = store.normal("position", &[l, d], 0.1, rng);
        let text = store.normal("text", &[cfg.text_tokens, d], 0.1, rng);
        let time = TimeEmbedder {
            fc1: Linear::new(&mut store, "time.fc1", d, d, rng),
            fc2: Linear::new(&mut store, "time.fc2", d, d, rng),
        };
        let blocks = (0..cfg.block_count)
            .map(|n| {
                let name = format!("block{n}");
                DitBlock {
                    norm1: LayerNorm::new(&mut store, &format!("{name}.norm1"), d),
                    attention: Projections::new(&mut store, &format!("{name}.attention"), d, rng),
                    norm2: LayerNorm::new(&mut store, &format!("{name}.norm2"), d),
                    mlp_in: Linear::new(&mut store, &format!("{name}.mlp_in"), d, 4 * d, rng),
                    mlp_out: Linear::new(&mut store, &format!("{name}.mlp_out"), 4 * d, d, rng),
                    modulation: Linear::zeroed(&mut store, &format!("{name}.modulation"), d, 4 * d),
                    zero_linear: Linear::zeroed(&mut store, &format!("{name}.zero_linear"), d, d),
                    mim: MimModule::new(&mut store, &format!("{name}.mim"), cfg, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut store, "final_norm", d);
        let head = Linear::new(&mut store, "head", d, p, rng);
        let model = MimDit {
            cfg: cfg.clone(),
            latent_embed,
            lq_embed,
            position,
            text,
            time,
            blocks,
            final_norm,
            head,
        };
        Ok((model, store))
    }

    fn embed(&self, s: &mut Session, lin: &Linear, latent: Var) -> Result<Var> {
        let (l, p) = (self.cfg.tokens(), self.cfg.patch_dim());
        if s.graph.shape(latent) != [l, p] {
            return Err(MimError::dim(
                "backbone",
                format!("latent {:?}, expected [{l}, {p}]", s.graph.shape(latent)),
            ));
        }
        let h = lin.forward(s, latent)?;
        let pos = s.p(self.position);
        s.graph.add(h, pos)
    }

    /// One block of the conditioned recurrence.
    pub fn block_forward(
        &self,
        s: &mut Session,
        n: usize,
        state: LatentState,
        time: Var,
        cond: Conditioning,
        sink: Option<&mut RoutingSink>,
    ) -> Result<LatentState> {
        let block = &self.blocks[n];
        let (lt, l, d) = (self.cfg.text_tokens, self.cfg.tokens(), self.cfg.model_dim);
        for (seg, want) in [(state.text, lt), (state.dit, l), (state.mim, l)] {
            if s.graph.shape(seg) != [want, d] {
                return Err(MimError::Contract(format!(
                    "block {n}: segment {:?} drifted from [{want}, {d}]",
                    s.graph.shape(seg)
                )));
            }
        }
        let projected = match cond {
            Conditioning::Enabled => {
                let grid = self.cfg.grid();
                let input = TokenSequence::new(&s.graph, state.mim, grid, grid)?;
                let features = mim_forward(s, &input, &block.mim, &self.cfg, n, sink)?;
                zero_linear(s, features.tokens, &block.zero_linear)?
            }
            Conditioning::Disabled => s.constant(Tensor::zeros(&[l, d])),
        };
        let joined = s.graph.concat(&[state.text, state.dit, projected], 0)?;

        let act = s.graph.gelu(time);
        let mods = block.modulation.forward(s, act)?;
        let mods = s.graph.split(mods, 1, &[d; 4])?;
        let (shift1, scale1, shift2, scale2) = (mods[0], mods[1], mods[2], mods[3]);

        let h = block.norm1.forward(s, joined)?;
        let h = self.modulate_dit(s, h, shift1, scale1)?;
        let attended = self.joint_attention(s, h, &block.attention)?;
        let joined = s.graph.add(joined, attended)?;

        let h = block.norm2.forward(s, joined)?;
        let h = self.modulate_dit(s, h, shift2, scale2)?;
        let h = block.mlp_in.forward(s, h)?;
        let h = s.graph.gelu(h);
        let h = block.mlp_out.forward(s, h)?;
        let out = s.graph.add(joined, h)?;

        let parts = s.graph.split(out, 0, &[lt, l, l])?;
        Ok(LatentState {
            text: parts[0],
            dit: parts[1],
            mim: parts[2],
        })
    }

    fn modulate_dit(&self, s: &mut Session, h: Var, shift: Var, scale: Var) -> Result<Var> {
        let (lt, l) = (self.cfg.text_tokens, self.cfg.tokens());
        let parts = s.graph.split(h, 0, &[lt, l, l])?;
        let dit = modulate(s, parts[1], shift, scale)?;
        s.graph.concat(&[parts[0], dit, parts[2]], 0)
    }

    fn joint_attention(&self, s: &mut Session, h: Var, p: &Projections) -> Result<Var> {
        let rows = s.graph.shape(h)[0];
        let seq = TokenSequence::new(&s.graph, h, 1, rows)?;
        Ok(crate::attention::spatial_self_attention(s, &seq, p, self.cfg.heads)?.tokens)
    }

    /// Predicted velocity `[L, P]` for noisy latent `x_t` at time `t`,
    /// conditioned on the degraded latent `z_lq`.
    pub fn forward(
        &self,
        s: &mut Session,
        z_lq: Var,
        x_t: Var,
        t: f64,
        cond: Conditioning,
        mut sink: Option<&mut RoutingSink>,
    ) -> Result<Var> {
        if s.graph.shape(z_lq) != s.graph.shape(x_t) {
            return Err(MimError::dim(
                "backbone",
                format!("z_lq {:?} vs x_t {:?}", s.graph.shape(z_lq), s.graph.shape(x_t)),
            ));
        }
        let dit = self.embed(s, &self.latent_embed, x_t)?;
        let lq = self.embed(s, &self.lq_embed, z_lq)?;
        let time = self.time.forward(s, t)?;
        let mut state = LatentState {
            text: s.p(self.text),
            dit,
            mim: lq,
        };
        for n in 0..self.blocks.len() {
            state = self.block_forward(s, n, state, time, cond, sink.as_deref_mut())?;
        }
        let h = self.final_norm.forward(s, state.dit)?;
        self.head.forward(s, h)
    }

    /// Names of every parameter belonging to a MiM module or zero-linear.
    pub fn is_conditioning_param(name: &str) -> bool {
        name.contains(".mim.") || name.contains(".zero_linear.")
    }
}

/// `[C, H, W]` image to `[(H/p)(W/p), C p p]` patch tokens, row-major over patches.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(MimError::dim("patchify", format!("{s:?} with patch {patch}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(image.numel());
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for iy in 0..patch {
                    for ix in 0..patch {
                        out.push(image.get(&[ch, py * patch + iy, px * patch + ix]));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, c * patch * patch], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, channels: usize, height: usize, width: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(MimError::dim("unpatchify", format!("{height}x{width} with patch {patch}")));
    }
    let (gh, gw) = (height / patch, width / patch);
    if tokens.shape() != [gh * gw, channels * patch * patch] {
        return Err(MimError::dim(
            "unpatchify",
            format!("tokens {:?} for a {channels}x{height}x{width} image", tokens.shape()),
        ));
    }
    let mut out = vec![0.0; channels * height * width];
    let mut it = tokens.data().iter();
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..channels {
                for iy in 0..patch {
                    for ix in 0..patch {
                        out[(ch * height + py * patch + iy) * width + px * patch + ix] = *it.next().expect("sized");
                    }
                }
            }
        }
    }
    Tensor::new(vec![channels, height, width], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MiMConfig {
        MiMConfig {
            model_dim: 8,
            sub_experts: 3,
            top_k: 2,
            block_count: 2,
            image_size: 8,
            patch: 4,
            se_reduction: 4,
            window: 2,
            ..MiMConfig::default()
        }
    }

    #[test]
    fn zero_linear_starts_at_zero() {
        let (model, store) = MimDit::new(&tiny(), 1).unwrap();
        let zl = model.blocks[0].zero_linear;
        let mut s = Session::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = s.constant(Tensor::randn(&[3, 8], 5.0, &mut rng));
        let y = zero_linear(&mut s, x, &zl).unwrap();
        assert!(s.graph.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_linear_identity_and_oracle() {
        let mut store = ParamStore::new();
        let zl = Linear::zeroed(&mut store, "zl", 4, 4);
        store.assign("zl.weight", Tensor::eye(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut s = Session::new(&store);
        let x = s.constant(xt.clone());
        let y = zero_linear(&mut s, x, &zl).unwrap();
        assert_eq!(s.graph.value(y), &xt);
        drop(s);

        let w = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4], 1.0, &mut rng);
        store.assign("zl.weight", w.clone()).unwrap();
        store.assign("zl.bias", b.clone()).unwrap();
        let mut s = Session::new(&store);
        let x = s.constant(xt.clone());
        let y = zero_linear(&mut s, x, &zl).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let want = b.data()[c] + (0..4).map(|i| xt.get(&[r, i]) * w.get(&[i, c])).sum::<f64>();
                assert!((s.graph.value(y).get(&[r, c]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patchify_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::uniform(&[3, 8, 4], 0.0, 1.0, &mut rng);
        let tokens = patchify(&img, 2).unwrap();
        assert_eq!(tokens.shape(), &[8, 12]);
        assert_eq!(unpatchify(&tokens, 3, 8, 4, 2).unwrap(), img);
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn patch_token_layout() {
        let img = Tensor::new(vec![1, 2, 4], (0..8).map(f64::from).collect()).unwrap();
        let tokens = patchify(&img, 2).unwrap();
        assert_eq!(tokens.data(), &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn sinusoidal_is_deterministic() {
        assert_eq!(sinusoidal_embedding(0.3, 8), sinusoidal_embedding(0.3, 8));
        assert_ne!(sinusoidal_embedding(0.3, 8), sinusoidal_embedding(0.4, 8));
        assert_eq!(sinusoidal_embedding(0.0, 4).data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn segment_drift_is_a_contract_error() {
        let (model, store) = MimDit::new(&tiny(), 5).unwrap();
        let mut s = Session::new(&store);
        let time = model.time.forward(&mut s, 0.5).unwrap();
        let bad = LatentState {
            text: s.constant(Tensor::zeros(&[2, 8])),
            dit: s.constant(Tensor::zeros(&[3, 8])),
            mim: s.constant(Tensor::zeros(&[4, 8])),
        };
        let err = model
            .block_forward(&mut s, 0, bad, time, Conditioning::Enabled, None)
            .unwrap_err();
        assert!(matches!(err, MimError::Contract(_)));
    }
}
