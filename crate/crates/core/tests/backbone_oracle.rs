//! The backbone against a hand-unrolled row-major implementation.
//! MiM features come from the library (checked separately against its own
//! oracle); everything around them is recomputed here with plain loops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mim_core::attention::TokenSequence;
use mim_core::backbone::{Conditioning, MimDit};
use mim_core::config::{IntraRouting, MiMConfig};
use mim_core::gradcheck::randomize_params;
use mim_core::params::{ParamStore, Session};
use mim_core::routing::{mim_forward, MimModule};
use mim_core::Tensor;

#[derive(Clone, Debug)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn from_tensor(t: &Tensor) -> Mat {
        let cols = *t.shape().last().unwrap();
        Mat {
            rows: t.numel() / cols,
            cols,
            data: t.data().to_vec(),
        }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn rows(&self, start: usize, len: usize) -> Mat {
        Mat {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    fn map(&self, f: impl Fn(usize, usize, f64) -> f64) -> Mat {
        let data = (0..self.rows * self.cols)
            .map(|i| f(i / self.cols, i % self.cols, self.data[i]))
            .collect();
        Mat { data, ..*self }
    }

    fn add(&self, other: &Mat) -> Mat {
        self.map(|r, c, v| v + other.at(r, c))
    }

    fn stack(parts: &[&Mat]) -> Mat {
        Mat {
            rows: parts.iter().map(|p| p.rows).sum(),
            cols: parts[0].cols,
            data: parts.iter().flat_map(|p| p.data.iter().copied()).collect(),
        }
    }
}

fn param(store: &ParamStore, name: &str) -> Mat {
    let t = store.get(store.find(name).unwrap_or_else(|| panic!("no parameter {name}")));
    Mat::from_tensor(t)
}

fn linear(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    assert_eq!(w.rows, x.cols);
    let mut data = vec![0.0; x.rows * w.cols];
    for r in 0..x.rows {
        for o in 0..w.cols {
            let mut acc = b.data[o];
            for i in 0..x.cols {
                acc += x.at(r, i) * w.at(i, o);
            }
            data[r * w.cols + o] = acc;
        }
    }
    Mat {
        rows: x.rows,
        cols: w.cols,
        data,
    }
}

fn layernorm(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let g = param(store, &format!("{name}.gain"));
    let b = param(store, &format!("{name}.bias"));
    let n = x.cols as f64;
    let stats: Vec<(f64, f64)> = (0..x.rows)
        .map(|r| {
            let row = &x.data[r * x.cols..(r + 1) * x.cols];
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, (var + 1e-5).sqrt())
        })
        .collect();
    x.map(|r, c, v| (v - stats[r].0) / stats[r].1 * g.data[c] + b.data[c])
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

fn attention(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let q = linear(store, &format!("{name}.query"), x);
    let k = linear(store, &format!("{name}.key"), x);
    let v = linear(store, &format!("{name}.value"), x);
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut mixed = Mat {
        rows: x.rows,
        cols: v.cols,
        data: vec![0.0; x.rows * v.cols],
    };
    for i in 0..x.rows {
        let scores: Vec<f64> = (0..x.rows)
            .map(|j| (0..q.cols).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() * scale)
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..v.cols {
            mixed.data[i * v.cols + c] = (0..x.rows).map(|j| e[j] / z * v.at(j, c)).sum();
        }
    }
    linear(store, &format!("{name}.output"), &mixed)
}

fn time_embedding(store: &ParamStore, t: f64, d: usize) -> Mat {
    let half = d / 2;
    let mut feats = vec![0.0; d];
    for i in 0..half {
        let arg = 1000.0 * t / 10_000f64.powf(i as f64 / half as f64);
        feats[i] = arg.sin();
        feats[half + i] = arg.cos();
    }
    let x = Mat {
        rows: 1,
        cols: d,
        data: feats,
    };
    let h = linear(store, "time.fc1", &x).map(|_, _, v| gelu(v));
    linear(store, "time.fc2", &h)
}

struct State {
    text: Mat,
    dit: Mat,
    mim: Mat,
}

fn mim_features(store: &ParamStore, model: &MimDit, n: usize, x: &Mat) -> Mat {
    let mut s = Session::inference(store);
    let v = s.constant(Tensor::new(vec![x.rows, x.cols], x.data.clone()).unwrap());
    let grid = model.cfg.grid();
    let seq = TokenSequence::new(&s.graph, v, grid, grid).unwrap();
    let out = mim_forward(&mut s, &seq, &model.blocks[n].mim, &model.cfg, n, None).unwrap();
    Mat::from_tensor(s.graph.value(out.tokens))
}

fn block_oracle(store: &ParamStore, model: &MimDit, n: usize, st: &State, temb: &Mat) -> State {
    let name = format!("block{n}");
    let (lt, l, d) = (st.text.rows, st.dit.rows, st.dit.cols);
    let features = mim_features(store, model, n, &st.mim);
    let projected = linear(store, &format!("{name}.zero_linear"), &features);
    let joined = Mat::stack(&[&st.text, &st.dit, &projected]);

    let mods = linear(store, &format!("{name}.modulation"), &temb.map(|_, _, v| gelu(v)));
    let chunk = |i: usize, c: usize| mods.data[i * d + c];
    let modulate = |h: Mat, shift: usize, scale: usize| {
        h.map(|r, c, v| {
            if (lt..lt + l).contains(&r) {
                v * (1.0 + chunk(scale, c)) + chunk(shift, c)
            } else {
                v
            }
        })
    };

    let h = modulate(layernorm(store, &format!("{name}.norm1"), &joined), 0, 1);
    let joined = joined.add(&attention(store, &format!("{name}.attention"), &h));
    let h = modulate(layernorm(store, &format!("{name}.norm2"), &joined), 2, 3);
    let h = linear(store, &format!("{name}.mlp_in"), &h).map(|_, _, v| gelu(v));
    let out = joined.add(&linear(store, &format!("{name}.mlp_out"), &h));
    State {
        text: out.rows(0, lt),
        dit: out.rows(lt, l),
        mim: out.rows(lt + l, l),
    }
}

fn model_oracle(store: &ParamStore, model: &MimDit, z_lq: &Tensor, x_t: &Tensor, t: f64) -> Mat {
    let pos = param(store, "position");
    let mut st = State {
        text: param(store, "text"),
        dit: linear(store, "latent_embed", &Mat::from_tensor(x_t)).add(&pos),
        mim: linear(store, "lq_embed", &Mat::from_tensor(z_lq)).add(&pos),
    };
    let temb = time_embedding(store, t, model.cfg.model_dim);
    for n in 0..model.cfg.block_count {
        st = block_oracle(store, model, n, &st, &temb);
    }
    linear(store, "head", &layernorm(store, "final_norm", &st.dit))
}

fn width8(blocks: usize) -> MiMConfig {
    MiMConfig {
        model_dim: 8,
        block_count: blocks,
        image_size: 8,
        patch: 4,
        window: 2,
        ..MiMConfig::default()
    }
}

fn library_forward(model: &MimDit, store: &ParamStore, z_lq: &Tensor, x_t: &Tensor, t: f64) -> Tensor {
    let mut s = Session::inference(store);
    let (a, b) = (s.constant(z_lq.clone()), s.constant(x_t.clone()));
    let v = model.forward(&mut s, a, b, t, Conditioning::Enabled, None).unwrap();
    s.graph.value(v).clone()
}

fn max_diff(a: &Tensor, b: &Mat) -> f64 {
    a.data().iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn one_and_two_block_models_match_unrolled_oracle() {
    for (blocks, tol) in [(1, 1e-10), (2, 1e-9)] {
        for seed in 0..5 {
            let cfg = width8(blocks);
            let (model, mut store) = MimDit::new(&cfg, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            randomize_params(&mut store, 0.3, &mut rng);
            let shape = [cfg.tokens(), cfg.patch_dim()];
            let z_lq = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
            let x_t = Tensor::randn(&shape, 1.0, &mut rng);
            let t = 0.37 + 0.1 * seed as f64;
            let got = library_forward(&model, &store, &z_lq, &x_t, t);
            let want = model_oracle(&store, &model, &z_lq, &x_t, t);
            let diff = max_diff(&got, &want);
            assert!(diff <= tol, "{blocks} blocks, seed {seed}: diff {diff:e}");
        }
    }
}

#[test]
fn empty_stack_applies_the_head_to_the_embedded_latent() {
    let cfg = width8(0);
    let (model, mut store) = MimDit::new(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    randomize_params(&mut store, 0.3, &mut rng);
    let shape = [cfg.tokens(), cfg.patch_dim()];
    let x_t = Tensor::randn(&shape, 1.0, &mut rng);
    let lq_a = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
    let lq_b = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
    let a = library_forward(&model, &store, &lq_a, &x_t, 0.2);
    let b = library_forward(&model, &store, &lq_b, &x_t, 0.9);
    assert_eq!(a, b, "without blocks neither the condition nor t can matter");
    let pos = param(&store, "position");
    let want = linear(&store, "head", &layernorm(&store, "final_norm", &linear(&store, "latent_embed", &Mat::from_tensor(&x_t)).add(&pos)));
    assert!(max_diff(&a, &want) <= 1e-12);
}

#[test]
fn single_sub_expert_full_path_equals_no_intra_path() {
    let full = MiMConfig {
        sub_experts: 1,
        top_k: 1,
        ..width8(1)
    };
    let fixed = MiMConfig {
        intra_routing: IntraRouting::Single,
        ..full.clone()
    };
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = ParamStore::new();
        let ma = MimModule::new(&mut a, "mim", &full, &mut rng);
        randomize_params(&mut a, 0.5, &mut rng);
        let mut b = ParamStore::new();
        let mb = MimModule::new(&mut b, "mim", &fixed, &mut rng);
        let shared: Vec<(String, Tensor)> = a.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let mut copied = 0;
        for (name, t) in shared {
            if b.find(&name).is_some() {
                b.assign(&name, t).unwrap();
                copied += 1;
            }
        }
        assert_eq!(copied, b.len(), "every fixed-expert parameter has a full-path twin");
        assert!(a.len() > b.len(), "the full path adds sub-expert routers");

        let x = Tensor::randn(&[full.tokens(), 8], 1.0, &mut rng);
        let run = |store: &ParamStore, module: &MimModule, cfg: &MiMConfig| {
            let mut s = Session::inference(store);
            let v = s.constant(x.clone());
            let seq = TokenSequence::new(&s.graph, v, 2, 2).unwrap();
            let y = mim_forward(&mut s, &seq, module, cfg, seed as usize, None).unwrap();
            s.graph.value(y.tokens).clone()
        };
        assert_eq!(run(&a, &ma, &full), run(&b, &mb, &fixed), "seed {seed}");
    }
}
