use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use blurfield::bench::bench_kernel_generation;
use blurfield::checkpoint::{load_checkpoint, read_header, save_checkpoint};
use blurfield::dataset::{preprocess, read_rgb, train_views, write_rgb, Dataset, PriorOptions, Split};
use blurfield::kernels::{kernel_spread, normalize, KernelStack};
use blurfield::metrics::{psnr, ssim};
use blurfield::raster::Raster;
use blurfield::render::{render_image, RayMeter, RenderOptions};
use blurfield::sharpness::PriorSource;
use blurfield::synthetic::{make_synthetic_scene, synthetic_dataset, SyntheticSceneSpec};
use blurfield::training::{train, Precision, TrainConfig, TrainLog, TrainState};
use blurfield::{Error, Real};

#[derive(Parser)]
#[command(name = "blurfield", version, about = "Defocus-deblurring radiance fields on voxel grids")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compute per-pixel sharpness levels for every training view.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "sml")]
        prior: PriorSource,
        #[arg(long, default_value_t = 1)]
        depth_segments: usize,
        #[arg(long)]
        nk: usize,
        #[arg(long, default_value_t = 5)]
        window: usize,
    },
    /// Train (or resume) a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Key-value config file; desk defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint at `--out` if it exists.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        precision: Option<Precision>,
        /// Any config key, as KEY=VALUE; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Checkpoint every this many steps (0: only at the end).
        #[arg(long, default_value_t = 0)]
        save_every: u64,
    },
    /// Render clean views of one split from a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// PSNR/SSIM of every render against the reference with the same name.
    Eval {
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        refs: PathBuf,
    },
    /// Time grid lookup against a small kernel generator network.
    BenchKernels {
        #[arg(long, default_value_t = 100_000)]
        pixels: usize,
        #[arg(long, default_value_t = 400)]
        nk: usize,
        #[arg(long, default_value_t = 11)]
        k: usize,
        #[arg(long, default_value_t = 30)]
        reps: usize,
    },
    /// Write a synthetic dataset with known depth-dependent blur.
    Synth {
        /// JSON scene spec; defaults when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write each view's normalized kernels as an image grid.
    ExportKernels {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            let code = e.downcast_ref::<Error>().map_or(2, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

/// The error chain joined with ": ", skipping causes the previous message
/// already ends with.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Preprocess {
            data,
            prior,
            depth_segments,
            nk,
            window,
        } => {
            let ds = Dataset::<f32>::load(&data)?;
            let mut opts = PriorOptions::new(prior, nk);
            opts.depth_segments = depth_segments;
            opts.window = window;
            let maps = preprocess(&data, &ds, &opts)?;
            println!("wrote {} level maps ({prior}, N_k = {nk})", maps.len());
        }
        Cmd::Train {
            data,
            config,
            out,
            resume,
            iters,
            seed,
            precision,
            overrides,
            save_every,
        } => {
            let resuming = resume && out.exists();
            if resuming && (config.is_some() || !overrides.is_empty() || seed.is_some() || precision.is_some()) {
                return Err(Error::InvalidArgument("a resumed run keeps its checkpoint config; only --iters may change".into()).into());
            }
            let mut cfg = match &config {
                _ if resuming => read_header(&out)?.config,
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {kv:?}")))?;
                cfg.set(k, v)?;
            }
            if let Some(i) = iters {
                cfg.iters = i;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = precision {
                cfg.precision = p;
            }
            cfg.validate()?;
            match cfg.precision {
                Precision::F32 => train_cmd::<f32>(cfg, &data, &out, resuming, save_every)?,
                Precision::F64 => train_cmd::<f64>(cfg, &data, &out, resuming, save_every)?,
            }
        }
        Cmd::Render { ckpt, split, out, data } => {
            let split: Split = serde_json::from_value(serde_json::Value::String(split.clone()))
                .map_err(|_| Error::InvalidArgument(format!("unknown split {split:?}")))?;
            match read_header(&ckpt)?.precision()? {
                Precision::F32 => render_cmd::<f32>(&ckpt, split, &out, data)?,
                Precision::F64 => render_cmd::<f64>(&ckpt, split, &out, data)?,
            }
        }
        Cmd::Eval { renders, refs } => eval_cmd(&renders, &refs)?,
        Cmd::BenchKernels { pixels, nk, k, reps } => {
            if k % 2 == 0 || nk == 0 {
                return Err(Error::InvalidArgument("K must be odd and N_k positive".into()).into());
            }
            let r = bench_kernel_generation(pixels, nk, k, reps, 0);
            println!("pixels {pixels}  N_k {nk}  K {k}  reps {reps}");
            println!("grid lookup+normalize  {:>9.3} ms", r.grid_ms);
            println!("  lookup only          {:>9.3} ms", r.lookup_ms);
            println!("generator network      {:>9.3} ms", r.mlp_ms);
            println!("speedup                {:>9.2}x", r.speedup());
        }
        Cmd::Synth { spec, out } => {
            let spec: SyntheticSceneSpec = match &spec {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSceneSpec::default(),
            };
            let t = Instant::now();
            let scene = make_synthetic_scene(&spec)?;
            let (ds, blur) = synthetic_dataset(&scene)?;
            ds.save(&out, spec.far_depth())?;
            fs::write(out.join("psf_bank.json"), serde_json::to_string_pretty(&blur.view_banks)?)?;
            fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
            println!(
                "wrote {} train and {} test views to {} in {:.1}s",
                spec.n_views,
                spec.n_test_views,
                out.display(),
                t.elapsed().as_secs_f64()
            );
        }
        Cmd::ExportKernels { ckpt, out } => match read_header(&ckpt)?.precision()? {
            Precision::F32 => export_cmd::<f32>(&ckpt, &out)?,
            Precision::F64 => export_cmd::<f64>(&ckpt, &out)?,
        },
    }
    Ok(())
}

fn train_cmd<T: Real>(cfg: TrainConfig, data: &Path, out: &Path, resume: bool, save_every: u64) -> anyhow::Result<()> {
    let ds = Dataset::<T>::load(data)?;
    let views = train_views(data, &ds, cfg.n_k)?;
    if views.is_empty() {
        bail!(Error::Data("dataset has no training views".into()));
    }
    let mut state: TrainState<T> = if resume {
        let (mut s, _) = load_checkpoint::<T>(out)?;
        s.config.iters = cfg.iters;
        s
    } else {
        TrainState::<T>::new(cfg, views.len())?
    };
    let mut log = TrainLog::open(&out.with_extension("log.csv"))?;
    let meter = RayMeter::default();
    let data_dir = fs::canonicalize(data).unwrap_or_else(|_| data.to_path_buf());
    let chunk = if save_every == 0 { u64::MAX } else { save_every };
    let target = state.config.iters as u64;
    while state.iter < target {
        let n = (target - state.iter).min(chunk) as usize;
        let losses = train(&mut state, &views, n, Some(&mut log), Some(&meter))?;
        save_checkpoint(&state, Some(&data_dir), out)?;
        if let Some(l) = losses.last() {
            println!("iter {:>6}  loss {l:.6}  rays {}", state.iter, meter.get());
        }
    }
    save_checkpoint(&state, Some(&data_dir), out)?;
    Ok(())
}

fn render_cmd<T: Real>(ckpt: &Path, split: Split, out: &Path, data: Option<PathBuf>) -> anyhow::Result<()> {
    let (state, header) = load_checkpoint::<T>(ckpt)?;
    let dir = data
        .or(header.data_dir)
        .ok_or_else(|| Error::Data("checkpoint records no dataset; pass --data".into()))?;
    let ds = Dataset::<T>::load(&dir)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let opts = RenderOptions::new(state.config.samples_per_ray);
    let mut n = 0;
    for v in ds.split(split) {
        let (img, _) = render_image(&state.params.field, &v.camera, &opts, T::zero())?;
        let name = Path::new(&v.file).with_extension("png");
        write_rgb(&out.join(name.file_name().unwrap_or(name.as_os_str())), &img)?;
        n += 1;
    }
    println!("rendered {n} views to {}", out.display());
    Ok(())
}

fn eval_cmd(renders: &Path, refs: &Path) -> anyhow::Result<()> {
    let mut names: Vec<String> = fs::read_dir(renders)
        .with_context(|| format!("reading {}", renders.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!(Error::Data(format!("no PNG renders in {}", renders.display())));
    }
    println!("{:<24} {:>9} {:>7}", "view", "PSNR", "SSIM");
    let (mut sp, mut ss) = (0.0, 0.0);
    for name in &names {
        let a: Raster<f64> = read_rgb(&renders.join(name))?;
        let b: Raster<f64> = read_rgb(&refs.join(name))?;
        let (p, s) = (psnr(&a, &b)?, ssim(&a, &b)?);
        println!("{name:<24} {p:>9.3} {s:>7.4}");
        sp += p;
        ss += s;
    }
    let n = names.len() as f64;
    println!("{:<24} {:>9.3} {:>7.4}", "mean", sp / n, ss / n);
    Ok(())
}

fn export_cmd<T: Real>(ckpt: &Path, out: &Path) -> anyhow::Result<()> {
    let (state, _) = load_checkpoint::<T>(ckpt)?;
    let grid = &state.params.kernels;
    let (k, c) = (grid.k, grid.channels);
    let cols = (grid.n_levels as f64).sqrt().ceil() as usize;
    let rows = grid.n_levels.div_ceil(cols);
    let cell = k + 1;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut csv = String::from("view,level,spread\n");
    for v in 0..grid.n_img {
        let mut sheet = Raster::<f64>::new(rows * cell + 1, cols * cell + 1, 3);
        for l in 0..grid.n_levels {
            let raw = KernelStack {
                n: 1,
                k,
                channels: c,
                data: grid.row(v, l).to_vec(),
            };
            let w = normalize(&raw).0;
            csv.push_str(&format!("{v},{l},{:.6}\n", kernel_spread(&w.data, k, c)));
            let peak = w.data.iter().fold(0.0f64, |m, x| m.max(x.f64()));
            let (r0, c0) = ((l / cols) * cell + 1, (l % cols) * cell + 1);
            for i in 0..k {
                for j in 0..k {
                    for ch in 0..3 {
                        let val = w.at(0, i, j, ch.min(c - 1)).f64();
                        sheet.set(r0 + i, c0 + j, ch, if peak > 0.0 { val / peak } else { 0.0 });
                    }
                }
            }
        }
        write_rgb(&out.join(format!("kernels_{v:03}.png")), &sheet)?;
    }
    fs::write(out.join("spread.csv"), csv)?;
    println!("wrote kernels of {} views to {}", grid.n_img, out.display());
    Ok(())
}
