#![allow(dead_code)]

use partforge_core::nn::{Linear, ParamStore};
use partforge_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Fills every parameter with uniform values in `[-scale, scale]`.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn affine(x: &[f64], rows: usize, din: usize, w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let dout = w.cols();
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..din {
                acc += x[r * din + i] * w.get(i, o);
            }
            out[r * dout + o] = acc;
        }
    }
    out
}

/// Naive multi-head attention with explicit loops. `allowed(i, j)` masks
/// which key rows query row `i` may see.
#[allow(clippy::too_many_arguments)]
pub fn naive_attention(
    queries: &Tensor,
    keys_src: &Tensor,
    store: &ParamStore,
    q_proj: Linear,
    kv: Option<Linear>,
    qkv_fused: bool,
    out: Linear,
    heads: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> Tensor {
    let c = store.get(out.weight).rows();
    let d = c / heads;
    let rq = queries.rows();
    let rk = keys_src.rows();
    let (q, k, v) = if qkv_fused {
        let all = affine(queries.data(), rq, queries.cols(), store.get(q_proj.weight), q_proj.bias.map(|b| store.get(b)));
        let pick = |off: usize| -> Vec<f64> {
            (0..rq).flat_map(|r| all[r * 3 * c + off..r * 3 * c + off + c].to_vec()).collect()
        };
        (pick(0), pick(c), pick(2 * c))
    } else {
        let kv = kv.unwrap();
        let q = affine(queries.data(), rq, queries.cols(), store.get(q_proj.weight), q_proj.bias.map(|b| store.get(b)));
        let all = affine(keys_src.data(), rk, keys_src.cols(), store.get(kv.weight), kv.bias.map(|b| store.get(b)));
        let k = (0..rk).flat_map(|r| all[r * 2 * c..r * 2 * c + c].to_vec()).collect();
        let v = (0..rk).flat_map(|r| all[r * 2 * c + c..r * 2 * c + 2 * c].to_vec()).collect();
        (q, k, v)
    };
    let mut mixed = vec![0.0; rq * c];
    for h in 0..heads {
        for i in 0..rq {
            let mut scores = vec![f64::NEG_INFINITY; rk];
            for (j, s) in scores.iter_mut().enumerate() {
                if allowed(i, j) {
                    let mut dot = 0.0;
                    for e in 0..d {
                        dot += q[i * c + h * d + e] * k[j * c + h * d + e];
                    }
                    *s = dot / (d as f64).sqrt();
                }
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            for (j, w) in weights.iter().enumerate() {
                for e in 0..d {
                    mixed[i * c + h * d + e] += w / total * v[j * c + h * d + e];
                }
            }
        }
    }
    let data = affine(&mixed, rq, c, store.get(out.weight), out.bias.map(|b| store.get(b)));
    Tensor::new(vec![rq, c], data).unwrap()
}

/// Rows of `z` with part blocks reordered: output block `i` is input block `perm[i]`.
pub fn permute_blocks(z: &Tensor, perm: &[usize], k: usize) -> Tensor {
    let blocks: Vec<Tensor> = perm.iter().map(|&p| z.slice_rows(p * k, k).unwrap()).collect();
    let refs: Vec<&Tensor> = blocks.iter().collect();
    Tensor::concat_rows(&refs).unwrap()
}

pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
