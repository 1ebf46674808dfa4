//! Kernel generation timing: direct grid indexing against a small per-pixel
//! generator network.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::{normalize, BlurKernelGrid, KernelStack};

pub const MLP_WIDTH: usize = 64;
pub const EMBED_DIM: usize = 32;

/// Two dense layers, embedding -> 64 (ReLU) -> K^2 logits, per-pixel softmax.
pub struct KernelMlp {
    pub k: usize,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
}

impl KernelMlp {
    pub fn random(k: usize, rng: &mut ChaCha8Rng) -> Self {
        let kk = k * k;
        let s1 = (6.0 / (EMBED_DIM + MLP_WIDTH) as f32).sqrt();
        let s2 = (6.0 / (MLP_WIDTH + kk) as f32).sqrt();
        Self {
            k,
            w1: (0..MLP_WIDTH * EMBED_DIM).map(|_| rng.gen_range(-s1..s1)).collect(),
            b1: vec![0.0; MLP_WIDTH],
            w2: (0..kk * MLP_WIDTH).map(|_| rng.gen_range(-s2..s2)).collect(),
            b2: vec![0.0; kk],
        }
    }

    /// Normalized `K x K` kernels, one per embedding row.
    pub fn generate(&self, embeddings: &[f32], out: &mut Vec<f32>) {
        let kk = self.k * self.k;
        let n = embeddings.len() / EMBED_DIM;
        out.clear();
        out.resize(n * kk, 0.0);
        let mut hidden = [0f32; MLP_WIDTH];
        for (p, e) in embeddings.chunks_exact(EMBED_DIM).enumerate() {
            for (j, h) in hidden.iter_mut().enumerate() {
                let row = &self.w1[j * EMBED_DIM..(j + 1) * EMBED_DIM];
                let s: f32 = row.iter().zip(e).map(|(w, x)| w * x).sum::<f32>() + self.b1[j];
                *h = s.max(0.0);
            }
            let logits = &mut out[p * kk..(p + 1) * kk];
            for (o, l) in logits.iter_mut().enumerate() {
                let row = &self.w2[o * MLP_WIDTH..(o + 1) * MLP_WIDTH];
                *l = row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f32>() + self.b2[o];
            }
            let mx = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - mx).exp();
                s += *l;
            }
            logits.iter_mut().for_each(|l| *l /= s);
        }
    }
}

/// Per-pixel kernels gathered from a table of already normalized rows.
pub fn gather_kernels(table: &KernelStack<f32>, levels: &[u32], out: &mut Vec<f32>) {
    let row = table.k * table.k * table.channels;
    out.clear();
    out.reserve(levels.len() * row);
    for &l in levels {
        let start = l as usize * row;
        out.extend_from_slice(&table.data[start..start + row]);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub n_pixels: usize,
    pub n_k: usize,
    pub k: usize,
    /// Median milliseconds: normalize the grid rows, then gather per pixel.
    pub grid_ms: f64,
    /// Median milliseconds of the gather alone.
    pub lookup_ms: f64,
    pub mlp_ms: f64,
}

impl BenchResult {
    pub fn speedup(&self) -> f64 {
        self.mlp_ms / self.grid_ms
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_ms(mut f: impl FnMut()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e3
}

/// Both paths produce `n_pixels` single-channel `K x K` kernels for the same
/// random pixel-to-level assignment. Runs on the calling thread only.
pub fn bench_kernel_generation(n_pixels: usize, n_k: usize, k: usize, reps: usize, seed: u64) -> BenchResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = BlurKernelGrid::<f32>::zeros(1, n_k.max(1), k, 1).expect("odd kernel size");
    grid.values.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    let levels: Vec<u32> = (0..n_pixels).map(|_| rng.gen_range(0..n_k.max(1) as u32)).collect();
    let raw = KernelStack {
        n: grid.n_levels,
        k,
        channels: 1,
        data: grid.values.clone(),
    };
    let mlp = KernelMlp::random(k, &mut rng);
    let embeddings: Vec<f32> = (0..n_pixels * EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut out = Vec::new();
    let (mut grid_t, mut lookup_t, mut mlp_t) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..reps.max(1) {
        grid_t.push(time_ms(|| {
            let table = normalize(&raw);
            gather_kernels(&table.0, &levels, &mut out);
        }));
        std::hint::black_box(&out);
        let table = normalize(&raw);
        lookup_t.push(time_ms(|| gather_kernels(&table.0, &levels, &mut out)));
        std::hint::black_box(&out);
        mlp_t.push(time_ms(|| mlp.generate(&embeddings, &mut out)));
        std::hint::black_box(&out);
    }
    BenchResult {
        n_pixels,
        n_k,
        k,
        grid_ms: median(grid_t),
        lookup_ms: median(lookup_t),
        mlp_ms: median(mlp_t),
    }
}

/// Fastest gather time in milliseconds for each table size. The sizes are
/// timed round-robin so slow drift in machine load hits all of them alike.
pub fn lookup_ms_by_table_size(n_pixels: usize, n_ks: &[usize], k: usize, reps: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let setups: Vec<(KernelStack<f32>, Vec<u32>)> = n_ks
        .iter()
        .map(|&n_k| {
            let n_k = n_k.max(1);
            let raw = KernelStack {
                n: n_k,
                k,
                channels: 1,
                data: (0..n_k * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            let levels = (0..n_pixels).map(|_| rng.gen_range(0..n_k as u32)).collect();
            (normalize(&raw).0, levels)
        })
        .collect();
    let mut out = Vec::new();
    let mut best = vec![f64::INFINITY; n_ks.len()];
    for _ in 0..reps.max(1) {
        for (b, (table, levels)) in best.iter_mut().zip(&setups) {
            *b = b.min(time_ms(|| gather_kernels(table, levels, &mut out)));
            std::hint::black_box(&out);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_group_gives_one_kernel_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let raw = KernelStack {
            n: 1,
            k: 3,
            channels: 1,
            data: (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let table = normalize(&raw);
        let mut out = Vec::new();
        gather_kernels(&table.0, &[0; 50], &mut out);
        assert_eq!(out.len(), 450);
        for kern in out.chunks(9) {
            assert_eq!(kern, &table.0.data[..]);
        }
    }

    #[test]
    fn generator_kernels_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = KernelMlp::random(5, &mut rng);
        let emb: Vec<f32> = (0..4 * EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out = Vec::new();
        mlp.generate(&emb, &mut out);
        assert_eq!(out.len(), 4 * 25);
        for kern in out.chunks(25) {
            assert!((kern.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}
