//! Acceptance criteria 1-9. Runs without the libtest harness so the criteria
//! execute one after another (the timing checks need a quiet machine) and
//! every PASS/FAIL line reaches the terminal.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use blurfield::bench::{bench_kernel_generation, lookup_ms_by_table_size};
use blurfield::checkpoint::{decode_checkpoint, encode_checkpoint};
use blurfield::experiment::{synthetic_config, Experiment, LevelSource, RunResult};
use blurfield::kernels::{convolve, crop, lookup, normalize, target_block, BlurKernelGrid};
use blurfield::metrics::{gaussian_taps, psnr, psnr_from_mse, ssim, SSIM_K1, SSIM_K2, SSIM_WINDOW};
use blurfield::raster::Raster;
use blurfield::render::{composite, RayMeter};
use blurfield::sampler::rays_per_pixel;
use blurfield::sharpness::{LevelMap, PriorSource};
use blurfield::synthetic::SyntheticSceneSpec;
use blurfield::training::{forward_batch, train, KernelMode, TrainConfig, TrainState};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ray_budget() -> Outcome {
    let table = [((16, 11), 2.64), ((12, 11), 3.36), ((8, 11), 5.06)];
    let mut detail = Vec::new();
    let mut ok = true;
    for ((pp, k), want) in table {
        let got = rays_per_pixel(pp, k);
        ok &= (got - want).abs() <= 0.005;
        detail.push(format!("({pp},{k}) {got:.4}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = small_config(11);
    let views = random_views::<f32>(&mut rng, 2, 12, cfg.n_k);
    let mut state = TrainState::new(cfg.clone(), views.len()).unwrap();
    let meter = RayMeter::default();
    let steps = 6;
    train(&mut state, &views, steps, None, Some(&meter)).unwrap();
    let expected = (steps * cfg.n_patches * cfg.p * cfg.p) as u64;
    let targets = (steps * cfg.n_patches * cfg.p_prime() * cfg.p_prime()) as f64;
    ok &= meter.get() == expected;
    ok &= meter.get() as f64 / targets == rays_per_pixel(cfg.p_prime(), cfg.k);
    detail.push(format!("meter {} of {expected}", meter.get()));
    check(ok, detail.join(", "))
}

fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut total = 0;
    for seed in 0..10 {
        let checks = gradient_check(seed, 12, 8);
        if checks.len() < 20 {
            return Err(format!("seed {seed}: only {} gradients above the floor", checks.len()));
        }
        total += checks.len();
        worst = checks.iter().map(GradCheck::rel_error).fold(worst, f64::max);
    }
    check(worst < 1e-3, format!("10 configs, {total} entries, worst rel. error {worst:.2e}"))
}

fn compositing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..64);
        let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..50.0)).collect();
        let delta: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.2)).collect();
        let c = composite(&sigma, &vec![[0.5; 3]; n], &delta).unwrap();
        let total: f64 = c.weights.iter().sum::<f64>() + c.t_final;
        worst = worst.max((total - 1.0).abs());
    }
    let ln2 = std::f64::consts::LN_2;
    let c = composite(&[ln2, ln2], &[[1.0; 3]; 2], &[1.0, 1.0]).unwrap();
    let pair_ok = (c.weights[0] - 0.5).abs() < 1e-9 && (c.weights[1] - 0.25).abs() < 1e-9;
    check(
        worst <= 1e-6 && pair_ok,
        format!("worst |sum - 1| {worst:.1e}, ln2 weights ({:.12}, {:.12})", c.weights[0], c.weights[1]),
    )
}

fn convolution() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (pp, k, ch) = (4, 3, 3);
    let p = pp + k - 1;
    let mut worst: f64 = 0.0;
    let mut bounds_ok = true;
    for _ in 0..100 {
        let n_levels = 5;
        let mut grid = BlurKernelGrid::<f64>::zeros(1, n_levels, k, ch).unwrap();
        grid.values.iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
        let levels = LevelMap {
            height: pp,
            width: pp,
            n_levels,
            levels: (0..pp * pp).map(|_| rng.gen_range(0..n_levels as u32)).collect(),
        };
        let clean = Raster::from_vec(p, p, ch, (0..p * p * ch).map(|_| rng.gen()).collect()).unwrap();

        let raw = lookup(&grid, &levels, 0, &target_block(0, 0, pp, pp)).unwrap();
        let out = convolve(&crop(&clean, k).unwrap(), &normalize(&raw)).unwrap();

        for h in 0..pp {
            for w in 0..pp {
                let row = grid.row(0, levels.at(h, w) as usize);
                for c in 0..ch {
                    let z: f64 = (0..k * k).map(|t| row[t * ch + c].exp()).sum();
                    let (mut s, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
                    for i in 0..k {
                        for j in 0..k {
                            let x = clean.get(h + i, w + j, c);
                            s += x * row[(i * k + j) * ch + c].exp() / z;
                            lo = lo.min(x);
                            hi = hi.max(x);
                        }
                    }
                    let got = out.get(h, w, c);
                    worst = worst.max((got - s).abs());
                    bounds_ok &= lo - 1e-12 <= got && got <= hi + 1e-12;
                }
            }
        }
    }
    check(
        worst <= 1e-6 && bounds_ok,
        format!("100 instances, worst |diff| {worst:.1e}, convex bounds {}", if bounds_ok { "held" } else { "violated" }),
    )
}

struct SynthRuns {
    sml: RunResult,
    baseline: RunResult,
    oracle: RunResult,
    random: RunResult,
    /// Held-out PSNR of the untrained model.
    untrained: f64,
    seconds: [f64; 4],
}

fn synthetic_runs() -> SynthRuns {
    let ex = Experiment::new(&SyntheticSceneSpec::default()).unwrap();
    let cfg = synthetic_config(0);
    let untrained = ex.evaluate(&TrainState::new(cfg.clone(), ex.n_train()).unwrap()).unwrap().0;
    let mut off = cfg.clone();
    off.kernel_mode = KernelMode::None;
    let mut seconds = [0.0; 4];
    let mut timed = |i: usize, cfg: &TrainConfig, src| {
        let t = Instant::now();
        let r = ex.run(cfg, src, cfg.iters).unwrap();
        seconds[i] = t.elapsed().as_secs_f64();
        r
    };
    let sml = timed(0, &cfg, LevelSource::Prior(PriorSource::Sml));
    let baseline = timed(1, &off, LevelSource::Prior(PriorSource::Sml));
    let oracle = timed(2, &cfg, LevelSource::Oracle);
    let random = timed(3, &cfg, LevelSource::Random(7));
    SynthRuns {
        sml,
        baseline,
        oracle,
        random,
        untrained,
        seconds,
    }
}

fn deblur_recovery(runs: &SynthRuns) -> Outcome {
    let (full, base) = (runs.sml.test_psnr, runs.baseline.test_psnr);
    let s = &runs.sml.stratum_spread;
    let monotone = s.windows(2).all(|w| w[0] < w[1]);
    let minutes = (runs.seconds[0] + runs.seconds[1]) / 60.0;
    check(
        full >= base + 3.0 && monotone && minutes <= 15.0 && full > runs.untrained,
        format!(
            "full {full:.2} dB vs baseline {base:.2} dB ({:+.2}, untrained {:.2}), spread {:?}, {minutes:.1} min",
            full - base,
            runs.untrained,
            s.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    )
}

fn prior_ablation(runs: &SynthRuns) -> Outcome {
    let (o, s, r) = (runs.oracle.test_psnr, runs.sml.test_psnr, runs.random.test_psnr);
    check(
        o >= s && r <= s - 0.5 && r < o,
        format!("oracle {o:.2} dB, SML {s:.2} dB, random {r:.2} dB"),
    )
}

fn kernel_benchmark() -> Outcome {
    let reps = 30;
    let main = bench_kernel_generation(100_000, 400, 11, reps, 0);
    let lookups = lookup_ms_by_table_size(100_000, &[10, 400, 4000], 11, reps, 1);
    let lo = lookups.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = lookups.iter().copied().fold(0.0, f64::max);
    let flat = hi <= 1.2 * lo;
    check(
        main.speedup() >= 5.0 && flat,
        format!(
            "grid {:.3} ms vs generator {:.3} ms ({:.1}x), lookup across N_k {:.3?} ms",
            main.grid_ms,
            main.mlp_ms,
            main.speedup(),
            lookups
        ),
    )
}

fn determinism() -> Outcome {
    let setup = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = small_config(8);
        let views = random_views::<f32>(&mut rng, 3, 12, cfg.n_k);
        (TrainState::new(cfg, views.len()).unwrap(), views)
    };
    let (mut a, views) = setup();
    let (mut b, _) = setup();
    let la = train(&mut a, &views, 12, None, None).unwrap();
    let lb = train(&mut b, &views, 12, None, None).unwrap();
    let same_stream = la == lb;

    let bytes = encode_checkpoint(&a, None);
    let (loaded, _) = decode_checkpoint::<f32>(&bytes).unwrap();
    let batch = a.next_batch(&views).unwrap();
    let fa = forward_batch(&a.params, &a.config, &views, &batch).unwrap();
    let fb = forward_batch(&loaded.params, &loaded.config, &views, &batch).unwrap();
    let bits_equal = fa.iter().zip(&fb).all(|(x, y)| {
        x.output.data.iter().zip(&y.output.data).all(|(p, q)| p.to_bits() == q.to_bits())
    });

    let mut resumed = loaded;
    let tail_a = train(&mut a, &views, 8, None, None).unwrap();
    let tail_b = train(&mut resumed, &views, 8, None, None).unwrap();
    let resume_ok = tail_a == tail_b && a == resumed;
    check(
        same_stream && bits_equal && resume_ok,
        format!("loss streams {same_stream}, round-trip bits {bits_equal}, resume {resume_ok}"),
    )
}

fn literal_psnr(a: &Raster<f64>, b: &Raster<f64>) -> f64 {
    let mut s = 0.0;
    for h in 0..a.height {
        for w in 0..a.width {
            for c in 0..a.channels {
                s += (a.get(h, w, c) - b.get(h, w, c)).powi(2);
            }
        }
    }
    10.0 * (1.0 / (s / a.data.len() as f64)).log10()
}

/// Direct per-window SSIM with the 2D Gaussian weights written out.
fn literal_ssim(a: &Raster<f64>, b: &Raster<f64>) -> f64 {
    let g = gaussian_taps();
    let n = SSIM_WINDOW;
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut per_channel = 0.0;
    for c in 0..a.channels {
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=a.height - n {
            for x in 0..=a.width - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        ma += g[i] * g[j] * a.get(y + i, x + j, c);
                        mb += g[i] * g[j] * b.get(y + i, x + j, c);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let da = a.get(y + i, x + j, c) - ma;
                        let db = b.get(y + i, x + j, c) - mb;
                        va += g[i] * g[j] * da * da;
                        vb += g[i] * g[j] * db * db;
                        cov += g[i] * g[j] * da * db;
                    }
                }
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        per_channel += total / count as f64;
    }
    per_channel / a.channels as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut dp, mut ds): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let a: Raster<f64> = Raster::from_vec(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.gen()).collect()).unwrap();
        let mut b = a.clone();
        let amp = rng.gen_range(0.02..0.5);
        b.data.iter_mut().for_each(|v| *v = (*v + rng.gen_range::<f64, _>(-amp..amp)).clamp(0.0, 1.0));
        dp = dp.max((psnr(&a, &b).unwrap() - literal_psnr(&a, &b)).abs());
        ds = ds.max((ssim(&a, &b).unwrap() - literal_ssim(&a, &b)).abs());
    }
    let exact = psnr_from_mse(0.01);
    check(
        dp <= 1e-6 && ds <= 1e-6 && exact == 20.0,
        format!("50 pairs, psnr |diff| {dp:.1e}, ssim |diff| {ds:.1e}, psnr(MSE 0.01) = {exact}"),
    )
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n} {tag}: {name}: {detail} [{secs:.1}s]");
    outcome.is_ok()
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    // a name filter meant for other targets
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    let mut ok = true;
    ok &= run(1, "ray budget", ray_budget);
    ok &= run(2, "gradient check", gradients);
    ok &= run(3, "compositing conservation", compositing);
    ok &= run(4, "convolution oracle", convolution);
    let t = Instant::now();
    let runs = catch_unwind(synthetic_runs);
    match &runs {
        Ok(r) => {
            println!(
                "synthetic runs: {:.0}s (SML {:.0}s, baseline {:.0}s, oracle {:.0}s, random {:.0}s)",
                t.elapsed().as_secs_f64(),
                r.seconds[0],
                r.seconds[1],
                r.seconds[2],
                r.seconds[3]
            );
            ok &= run(5, "synthetic deblur recovery", || deblur_recovery(r));
            ok &= run(6, "sharpness prior ablation", || prior_ablation(r));
        }
        Err(_) => {
            println!("criterion 5 FAIL: synthetic deblur recovery: training failed");
            println!("criterion 6 FAIL: sharpness prior ablation: training failed");
            ok = false;
        }
    }
    ok &= run(7, "kernel generation benchmark", kernel_benchmark);
    ok &= run(8, "determinism and persistence", determinism);
    ok &= run(9, "metric oracles", metric_oracles);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
