#![allow(dead_code)]

use edgellm::model::{Model, ModelConfig, ModelWeights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_model(cfg: ModelConfig, seed: u64, init: f32) -> Model {
    let w = ModelWeights::random(&cfg, init, &mut rng(seed)).unwrap();
    Model::new(cfg, w).unwrap()
}

pub fn cfg(e: usize, h: usize, d: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: e,
        num_heads: h,
        latent_dim: e,
        num_layers: d,
        mlp_hidden: 2 * e,
        vocab_size: vocab,
        max_seq_len: 128,
        ..ModelConfig::toy_default()
    }
}

pub fn random_tokens(seed: u64, n: usize, vocab: usize) -> Vec<u32> {
    use rand::Rng;
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(0..vocab as u32)).collect()
}

/// Straight-line reference decoder over plain vectors: recomputes the whole
/// sequence with causal attention, no cache, no shared kernels.
pub fn reference_logits(model: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = model.config();
    let w = model.weights();
    let (e, l, nh) = (cfg.embed_dim, cfg.latent_dim, cfg.num_heads);
    let hd = l / nh;
    let n = tokens.len();
    let mat = |t: &edgellm::Tensor| -> Vec<f64> { t.data().iter().map(|&v| v as f64).collect() };
    let mm = |x: &[Vec<f64>], wt: &[f64], cols: usize| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..cols)
                    .map(|j| row.iter().enumerate().map(|(k, v)| v * wt[k * cols + j]).sum())
                    .collect()
            })
            .collect()
    };
    let norm = |x: &[Vec<f64>], g: &[f64]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
                let inv = 1.0 / (ms + cfg.rms_eps as f64).sqrt();
                row.iter().zip(g).map(|(v, g)| v * inv * g).collect()
            })
            .collect()
    };
    let rope = |x: &mut [Vec<f64>]| {
        for (p, row) in x.iter_mut().enumerate() {
            for h in 0..nh {
                for j in 0..hd / 2 {
                    let ang = p as f64 * (cfg.rope_theta as f64).powf(-2.0 * j as f64 / hd as f64);
                    let (a, b) = (row[h * hd + 2 * j], row[h * hd + 2 * j + 1]);
                    row[h * hd + 2 * j] = a * ang.cos() - b * ang.sin();
                    row[h * hd + 2 * j + 1] = a * ang.sin() + b * ang.cos();
                }
            }
        }
    };
    let emb = mat(w.token_embedding());
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| emb[t as usize * e..(t as usize + 1) * e].to_vec())
        .collect();
    for lw in w.layers() {
        let h = norm(&x, &mat(&lw.attn_norm));
        let mut q = mm(&h, &mat(&lw.wq), l);
        let mut k = mm(&h, &mat(&lw.wk), l);
        let v = mm(&h, &mat(&lw.wv), l);
        rope(&mut q);
        rope(&mut k);
        let mut att = vec![vec![0.0; l]; n];
        for i in 0..n {
            for hh in 0..nh {
                let r = hh * hd..(hh + 1) * hd;
                let s: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                for j in 0..=i {
                    for t in r.clone() {
                        att[i][t] += ex[j] / z * v[j][t];
                    }
                }
            }
        }
        let o = mm(&att, &mat(&lw.wo), e);
        for i in 0..n {
            for t in 0..e {
                x[i][t] += o[i][t];
            }
        }
        let h = norm(&x, &mat(&lw.mlp_norm));
        let g = mm(&h, &mat(&lw.w_gate), cfg.mlp_hidden);
        let u = mm(&h, &mat(&lw.w_up), cfg.mlp_hidden);
        let act: Vec<Vec<f64>> = g
            .iter()
            .zip(&u)
            .map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect())
            .collect();
        let d = mm(&act, &mat(&lw.w_down), e);
        for i in 0..n {
            for t in 0..e {
                x[i][t] += d[i][t];
            }
        }
    }
    let h = norm(&x, &mat(w.final_norm()));
    h.iter()
        .map(|row| {
            (0..cfg.vocab_size)
                .map(|t| row.iter().zip(&emb[t * e..(t + 1) * e]).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}
