use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use vstain_core::imgproc::Plane;
use vstain_core::phantom::{load_dataset, synthesize_dataset, write_dataset, FovRecord, Split};
use vstain_core::pipeline::{
    evaluate_color_vs_defocus, save_rgb_png, train_refocuser, train_virtual_stainer, Checkpoint, Config, Framework,
    Models, Stage, Tiling,
};
use vstain_core::registration::{register_pipeline, AffineConfig, CoarseConfig, ElasticConfig};
use vstain_core::scan::{compare_plans, csv_row, plan_scan, FocusMode, ScanPlan, CSV_HEADER};
use vstain_core::tensor::Tensor;

#[derive(Parser)]
#[command(name = "vstain", version, about = "Synthetic virtual staining with a refocusing front end")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset into `data_dir`.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the virtual stainer.
    TrainVs {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the refocuser against a frozen stainer.
    TrainDr {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        vs_ckpt: Option<PathBuf>,
    },
    /// Stain every `*_dapi.png` / `*_txred.png` pair in a directory.
    Infer {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        framework: u8,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vs_ckpt: PathBuf,
        #[arg(long)]
        dr_ckpt: Option<PathBuf>,
        /// Tile edge for tiled inference; whole images when absent.
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long, default_value_t = 16)]
        overlap: usize,
    },
    /// Color difference versus defocus on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Scan-time model for one focus mode, compared against fine focusing.
    Scanplan {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = vstain_core::scan::DEFAULT_FOVS_PER_SLIDE)]
        fovs: usize,
    },
    /// Coarse, affine and elastic registration of two grayscale images.
    Register {
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        /// Displacement field output.
        #[arg(long, default_value = "field.dfld")]
        out: PathBuf,
        /// Optional resampled moving image.
        #[arg(long)]
        warped: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fine,
    Coarse,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth { config } => synth(&Config::load(&config)?),
        Command::TrainVs { config } => train_vs(&Config::load(&config)?),
        Command::TrainDr { config, vs_ckpt } => train_dr(&Config::load(&config)?, vs_ckpt),
        Command::Infer {
            framework,
            input,
            out,
            vs_ckpt,
            dr_ckpt,
            tile,
            overlap,
        } => infer(framework, &input, &out, &vs_ckpt, dr_ckpt.as_deref(), tile, overlap),
        Command::Eval { config } => eval(&Config::load(&config)?),
        Command::Scanplan { mode, fovs } => scanplan(mode, fovs),
        Command::Register {
            moving,
            fixed,
            out,
            warped,
        } => register(&moving, &fixed, &out, warped.as_deref()),
    }
}

fn synth(cfg: &Config) -> Result<()> {
    let (manifest, records) = synthesize_dataset(&cfg.dataset)?;
    write_dataset(&cfg.data_dir, &manifest, &records)?;
    info!("wrote {} records to {}", records.len(), cfg.data_dir.display());
    Ok(())
}

fn split(cfg: &Config) -> Result<(Vec<FovRecord>, Vec<FovRecord>, Vec<FovRecord>)> {
    let (manifest, records) =
        load_dataset(&cfg.data_dir).with_context(|| format!("loading dataset from {}", cfg.data_dir.display()))?;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (entry, rec) in manifest.entries.iter().zip(records) {
        match entry.split {
            Split::Train => train.push(rec),
            Split::Validation => val.push(rec),
            Split::Test => test.push(rec),
        }
    }
    Ok((train, val, test))
}

fn write_history(path: &Path, csv: String) -> Result<()> {
    let p = path.with_extension("loss.csv");
    fs::write(&p, csv)?;
    info!("loss history in {}", p.display());
    Ok(())
}

fn train_vs(cfg: &Config) -> Result<()> {
    if cfg.train.stage != Stage::VirtualStainer {
        bail!("train-vs needs `stage = virtual_stainer`");
    }
    let (train, val, _) = split(cfg)?;
    let out = train_virtual_stainer(&train, &val, &cfg.train)?;
    out.checkpoint.save(&cfg.checkpoint)?;
    write_history(&cfg.checkpoint, out.history.to_csv())?;
    info!("stainer checkpoint in {}", cfg.checkpoint.display());
    Ok(())
}

fn train_dr(cfg: &Config, vs_ckpt: Option<PathBuf>) -> Result<()> {
    if cfg.train.stage != Stage::Refocuser {
        bail!("train-dr needs `stage = refocuser`");
    }
    let Some(vs_path) = vs_ckpt.or_else(|| cfg.vs_checkpoint.clone()) else {
        bail!("train-dr needs a stainer checkpoint (--vs-ckpt or `vs_checkpoint`)");
    };
    let vs = Checkpoint::load(&vs_path).with_context(|| format!("loading {}", vs_path.display()))?;
    let (train, val, _) = split(cfg)?;
    let out = train_refocuser(&train, &val, &vs, &cfg.train)?;
    out.checkpoint.save(&cfg.checkpoint)?;
    write_history(&cfg.checkpoint, out.history.to_csv())?;
    info!("refocuser checkpoint in {}", cfg.checkpoint.display());
    Ok(())
}

fn load_models(vs: &Path, dr: Option<&Path>) -> Result<Models> {
    let stainer = Checkpoint::load(vs)
        .with_context(|| format!("loading {}", vs.display()))?
        .generator_network()?;
    let refocuser = match dr {
        Some(p) => Some(
            Checkpoint::load(p)
                .with_context(|| format!("loading {}", p.display()))?
                .generator_network()?,
        ),
        None => None,
    };
    Ok(Models::new(stainer, refocuser)?)
}

fn read_gray(path: &Path) -> Result<Plane> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Plane::new(h, w, img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()))
}

fn infer(
    framework: u8,
    input: &Path,
    out: &Path,
    vs: &Path,
    dr: Option<&Path>,
    tile: Option<usize>,
    overlap: usize,
) -> Result<()> {
    let framework = Framework::from_index(framework).expect("range checked by clap");
    if framework == Framework::Refocused && dr.is_none() {
        bail!("framework 2 needs --dr-ckpt");
    }
    let mut models = load_models(vs, dr)?;
    models.tile = tile.map(|size| Tiling { size, overlap });
    fs::create_dir_all(out)?;
    let mut pairs: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with("_dapi.png"))
        .collect();
    pairs.sort();
    if pairs.is_empty() {
        bail!("no *_dapi.png images in {}", input.display());
    }
    for dapi in pairs {
        let name = dapi.file_name().unwrap().to_string_lossy().into_owned();
        let stem = name.trim_end_matches("_dapi.png");
        let txred = dapi.with_file_name(format!("{stem}_txred.png"));
        let af: Tensor<f32> = Plane::stack(&[read_gray(&dapi)?, read_gray(&txred)?]);
        let ycc = models.stain(&af, framework)?;
        let dst = out.join(format!("{stem}_fw{}.png", framework.index()));
        save_rgb_png(&dst, &ycc)?;
        info!("{}", dst.display());
    }
    Ok(())
}

fn eval(cfg: &Config) -> Result<()> {
    let Some(vs) = &cfg.vs_checkpoint else {
        bail!("eval needs `vs_checkpoint`");
    };
    let models = load_models(vs, cfg.dr_checkpoint.as_deref())?;
    let (_, _, test) = split(cfg)?;
    let report = evaluate_color_vs_defocus(&test, &models)?;
    report.write(&cfg.out_dir)?;
    for t in &report.ttests {
        println!(
            "z={:+.1} {:>2}: t={:8.3} p={:.3e}{}",
            t.z_axial_um,
            t.channel,
            t.result.t_statistic,
            t.result.p_value,
            if t.result.significant() { " *" } else { "" }
        );
    }
    info!("reports in {}", cfg.out_dir.display());
    Ok(())
}

fn scanplan(mode: Mode, fovs: usize) -> Result<()> {
    let mode = match mode {
        Mode::Fine => FocusMode::Fine,
        Mode::Coarse => FocusMode::Coarse,
    };
    let fine = plan_scan(&ScanPlan::for_mode(FocusMode::Fine, fovs))?;
    let report = plan_scan(&ScanPlan::for_mode(mode, fovs))?;
    println!("{CSV_HEADER}");
    println!("{}", csv_row(mode, &report));
    let s = compare_plans(&fine, &report)?;
    println!(
        "savings vs fine: autofocus {:.2}%, total {:.2}% ({:.1} min vs {:.1} min)",
        s.autofocus_pct,
        s.total_pct,
        fine.total_s / 60.0,
        report.total_s / 60.0
    );
    Ok(())
}

fn register(moving: &Path, fixed: &Path, out: &Path, warped: Option<&Path>) -> Result<()> {
    let m = read_gray(moving)?;
    let f = read_gray(fixed)?;
    let r = register_pipeline(
        &m,
        &f,
        &CoarseConfig::default(),
        &AffineConfig::default(),
        &ElasticConfig::default(),
        &|p: &Plane| p.clone(),
    )?;
    println!("coarse offset (dy, dx) = {:?}", r.coarse_offset);
    println!("affine = {:?}", r.affine.m);
    println!("textureless blocks = {}", r.textureless_blocks);
    let total = r.total_displacement();
    total.write_to(std::io::BufWriter::new(fs::File::create(out)?))?;
    info!("displacement field in {}", out.display());
    if let Some(path) = warped {
        let w = r.apply(&m)?;
        let px: Vec<u16> = w.data.iter().map(|v| (v * 65535.0).round().clamp(0.0, 65535.0) as u16).collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w.w as u32, w.h as u32, px)
            .expect("buffer matches dims");
        img.save(path)?;
    }
    Ok(())
}
