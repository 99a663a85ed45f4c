//! `aplsam`: generate data, train, evaluate, segment, and inspect prompts.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aplsam_core::episodes::{io, load_dataset, synth, Episode, SplitSpec};
use aplsam_core::graph::Graph;
use aplsam_core::params::Binder;
use aplsam_core::prompt;
use aplsam_core::training::{self, evaluate, ModelPredictor, OraclePredictor, Predictor, RunConfig};
use aplsam_core::{Error, Model, Tensor};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "aplsam", version, about = "Few-shot segmentation with adaptive prompt learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and a default split file.
    GenData {
        /// Dataset root to create.
        #[arg(long)]
        out: PathBuf,
        /// Number of synthetic materials (the last one is held out).
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..=5))]
        classes: u64,
        #[arg(long, default_value_t = 39, value_parser = clap::value_parser!(u64).range(2..))]
        per_class: u64,
        /// Image side length (power of two).
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, env = "APL_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint, its metadata, and a CSV log.
    Train {
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Split file of `train:<class>` and `test:<class>` lines.
        #[arg(long)]
        split: PathBuf,
        /// `key = value` run configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path; metadata goes to `<out>.meta`.
        #[arg(long)]
        out: PathBuf,
        /// Log path [default: <out>.log.csv]
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long, env = "APL_SEED")]
        seed: Option<u64>,
    },
    /// Score a checkpoint on the split's test classes.
    Eval {
        /// Checkpoint path, or `oracle` to echo the ground truth.
        #[arg(long)]
        ckpt: String,
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Split file; its test classes are scored.
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
        episodes: u64,
        #[arg(long, env = "APL_SEED", default_value_t = 0)]
        seed: u64,
        /// CSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one query image guided by one support pair.
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        support_image: PathBuf,
        #[arg(long)]
        support_mask: PathBuf,
        #[arg(long)]
        query: PathBuf,
        /// Directory receiving mask.png and overlay.png.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the adaptive clustering trace for one support pair.
    InspectPrompts {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        support_image: PathBuf,
        #[arg(long)]
        support_mask: PathBuf,
    },
}

fn code(e: &Error) -> (&'static str, u8) {
    match e {
        Error::SplitViolation(_) => ("split-violation", 3),
        Error::EmptySupportMask => ("empty-mask", 4),
        Error::Config { .. } => ("config", 1),
        Error::Checkpoint(_) => ("checkpoint", 1),
        Error::Io(_) | Error::Unreadable { .. } => ("io", 1),
        Error::EmptyDataset(_)
        | Error::MissingMask(_)
        | Error::DimensionMismatch { .. }
        | Error::InvalidMaskValue { .. }
        | Error::TooFewSamples { .. }
        | Error::GenerationFailed(_) => ("data", 1),
        Error::Diverged { .. } | Error::NumericFault { .. } => ("numeric", 1),
        _ => ("invalid", 1),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.to_string();
            let text: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("error:usage: {}", text.join(" ").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (name, status) = code(&e);
            eprintln!("error:{name}: {}", e.to_string().replace('\n', " "));
            ExitCode::from(status)
        }
    }
}

fn run(cmd: Command) -> aplsam_core::Result<()> {
    match cmd {
        Command::GenData {
            out,
            classes,
            per_class,
            size,
            seed,
        } => gen_data(&out, classes as usize, per_class as usize, size, seed),
        Command::Train {
            data,
            split,
            config,
            out,
            log,
            seed,
        } => train(&data, &split, config.as_deref(), &out, log, seed),
        Command::Eval {
            ckpt,
            data,
            split,
            episodes,
            seed,
            out,
        } => eval(&ckpt, &data, &split, episodes as usize, seed, out.as_deref()),
        Command::Segment {
            ckpt,
            support_image,
            support_mask,
            query,
            out,
        } => segment(&ckpt, &support_image, &support_mask, &query, &out),
        Command::InspectPrompts {
            ckpt,
            support_image,
            support_mask,
        } => inspect(&ckpt, &support_image, &support_mask),
    }
}

fn gen_data(out: &Path, classes: usize, per_class: usize, size: usize, seed: u64) -> aplsam_core::Result<()> {
    let cfg = synth::SyntheticConfig {
        image_size: size,
        ..Default::default()
    };
    let all = synth::default_classes();
    let chosen = &all[all.len() - classes..];
    let counts = synth::write_dataset(out, &cfg, chosen, per_class, seed)?;
    let names: Vec<String> = chosen.iter().map(|c| c.name.clone()).collect();
    let (train, test) = names.split_at(names.len() - 1);
    let split = SplitSpec::new(train.to_vec(), test.to_vec())?;
    fs::write(out.join("split.txt"), split.to_text())?;
    for (class, n) in &counts {
        println!("{class}: {n}");
    }
    println!("total: {}", counts.values().sum::<usize>());
    Ok(())
}

fn train(
    data: &Path,
    split: &Path,
    config: Option<&Path>,
    out: &Path,
    log: Option<PathBuf>,
    seed: Option<u64>,
) -> aplsam_core::Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = load_dataset(data)?;
    let split = SplitSpec::from_file(split)?;
    let per_epoch = cfg.episodes_per_epoch;
    let mut epoch_loss = 0.0;
    let outcome = training::train(&cfg, &ds, &split, |r| {
        epoch_loss += r.total();
        if (r.step + 1) % per_epoch == 0 {
            eprintln!(
                "epoch {:>3}  loss {:.4}  lr {:.3e}",
                r.epoch + 1,
                epoch_loss / per_epoch as f64,
                r.lr
            );
            epoch_loss = 0.0;
        }
    })?;
    let log = log.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.csv");
        PathBuf::from(s)
    });
    training::save_run(out, &outcome, Some(&log))?;
    println!("checkpoint: {}", out.display());
    println!("log: {}", log.display());
    Ok(())
}

fn eval(
    ckpt: &str,
    data: &Path,
    split: &Path,
    episodes: usize,
    seed: u64,
    out: Option<&Path>,
) -> aplsam_core::Result<()> {
    let ds = load_dataset(data)?;
    let split = SplitSpec::from_file(split)?;
    split.check(&ds)?;
    let report = if ckpt == "oracle" {
        evaluate(&OraclePredictor, &ds, &split.test, episodes, seed)?
    } else {
        let (model, meta) = training::load_run(Path::new(ckpt))?;
        let p = ModelPredictor {
            model: &model,
            train_classes: meta.train_classes,
        };
        evaluate(&p, &ds, &split.test, episodes, seed)?
    };
    print!("{}", report.to_table());
    if let Some(p) = out {
        fs::write(p, report.to_csv())?;
    }
    Ok(())
}

fn read_pair(model: &Model, image: &Path, mask: Option<&Path>) -> aplsam_core::Result<(Tensor, Option<Tensor>)> {
    let n = model.cfg.encoder.image_size;
    let img = io::read_image(image)?;
    if img.shape() != [n, n] {
        return Err(Error::InvalidArgument(format!(
            "{} is {}x{} but the model expects {n}x{n}",
            image.display(),
            img.cols(),
            img.rows()
        )));
    }
    let mask = match mask {
        Some(p) => {
            let m = io::read_mask(p)?;
            if m.shape() != [n, n] {
                return Err(Error::InvalidArgument(format!(
                    "{} is {}x{} but the model expects {n}x{n}",
                    p.display(),
                    m.cols(),
                    m.rows()
                )));
            }
            Some(m)
        }
        None => None,
    };
    Ok((img.reshape(&[1, n, n])?, mask))
}

fn segment(ckpt: &Path, support_image: &Path, support_mask: &Path, query: &Path, out: &Path) -> aplsam_core::Result<()> {
    let (model, _) = training::load_run(ckpt)?;
    let (s_img, s_mask) = read_pair(&model, support_image, Some(support_mask))?;
    let (q_img, _) = read_pair(&model, query, None)?;
    let s_mask = s_mask.expect("mask requested");
    let ep = Episode {
        class: String::new(),
        support_image: s_img,
        support_mask: s_mask,
        query_image: q_img,
        query_gt: Tensor::zeros(&[1]),
        support_index: 0,
        query_index: 0,
    };
    let pred = ModelPredictor {
        model: &model,
        train_classes: BTreeSet::new(),
    };
    let mask = pred.predict(&ep)?;
    fs::create_dir_all(out)?;
    io::write_mask(&out.join("mask.png"), &mask)?;
    io::write_overlay(&out.join("overlay.png"), &ep.query_image, &mask)?;
    let n = model.cfg.encoder.image_size;
    println!(
        "foreground: {} of {} pixels",
        mask.sum() as usize,
        n * n
    );
    println!("mask: {}", out.join("mask.png").display());
    println!("overlay: {}", out.join("overlay.png").display());
    Ok(())
}

fn inspect(ckpt: &Path, support_image: &Path, support_mask: &Path) -> aplsam_core::Result<()> {
    let (model, _) = training::load_run(ckpt)?;
    let (img, mask) = read_pair(&model, support_image, Some(support_mask))?;
    let mask = mask.expect("mask requested");
    let g = Graph::new();
    let b = Binder::new(&g, &model.params);
    let grid_mask = model.grid_mask(&mask)?;
    let feats = model.encoder().encode(&b, &img)?;
    let f_s = g.transpose(feats.levels[3])?;
    let msf = prompt::mask_support_features(&b, f_s, &grid_mask)?;
    let apl = &model.cfg.apl;
    let vp = prompt::cluster(&b, &msf, apl)?;
    let mut s = String::new();
    let _ = writeln!(s, "N_m = {}", msf.n_m);
    let _ = writeln!(s, "A_sp = {}", apl.a_sp);
    let _ = writeln!(s, "N_max = {}", apl.n_max);
    let _ = writeln!(s, "N_c = {}", vp.n_c);
    let _ = writeln!(s, "path = {}", if vp.pooled { "pooling" } else { "clustering" });
    let _ = writeln!(s, "seed,i,row,col");
    for (i, (r, c)) in vp.seeds.iter().enumerate() {
        let _ = writeln!(s, "seed,{i},{r},{c}");
    }
    let _ = writeln!(s, "iter,i,dim,value");
    for (it, cents) in vp.trace.iter().enumerate() {
        for i in 0..cents.cols() {
            for d in 0..cents.rows() {
                let _ = writeln!(s, "{},{i},{d},{:.17e}", it + 1, cents.at2(d, i));
            }
        }
    }
    if vp.pooled {
        let pooled = g.value(vp.centroids);
        for d in 0..pooled.rows() {
            let _ = writeln!(s, "0,0,{d},{:.17e}", pooled.at2(d, 0));
        }
    }
    print!("{s}");
    Ok(())
}
