mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use oceanfm::error::{Error, Result};
use oceanfm::eval::{
    format_report, fraction_ablation, histogram_csv, kfold_split, run_cv, tiled_inference,
    FittedModel, FRACTION_GRID,
};
use oceanfm::finetune::{self, FinetuneConfig, FinetuneSample, PixelModel};
use oceanfm::gradcheck::finite_diff_check;
use oceanfm::io::{
    read_checkpoint, read_tile, write_atomic, write_checkpoint, write_tile, ModelCheckpoint,
};
use oceanfm::mae::{
    self, band_stats, loss_log_csv, random_mask, ModelProfile, PretrainConfig,
    DEFAULT_MASK_RATIO,
};
use oceanfm::nn::seeded_rng;
use oceanfm::sampling::{
    balanced_sample, median_composite, passes_pretrain_filter, SampleBudget, SampleMeta,
    SceneStack, VALID_FRACTION_THRESHOLD,
};
use oceanfm::seeds::{sub_seed, SALT_FRACTION, SALT_TREES};
use oceanfm::synth::{gen_labeled_dataset, gen_tile, SynthConfig};
use oceanfm::tile::{BandSet, LabeledPatch, TargetKind, Tile};
use oceanfm::trees::{
    band_means, extract_dataset, fit_trees, predict_at_labels as trees_predict_at_labels,
    write_ensemble, DEFAULT_NUM_TREES,
};

const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "oceanfm", about = "Ocean-colour foundation model pipeline", version)]
struct Cli {
    /// cap the worker thread count (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic tiles or labeled patches
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 2)]
        bands: usize,
        /// append a synthetic SST band
        #[arg(long)]
        sst: bool,
        #[arg(long, default_value_t = 45)]
        size: usize,
        #[arg(long, default_value_t = 0.0)]
        cloud_fraction: f64,
        #[arg(long, default_value_t = 8.0)]
        correlation_len: f64,
        /// emit labeled 80x80 patches instead of plain tiles
        #[arg(long)]
        labeled: bool,
        #[arg(long, default_value = "chl")]
        task: String,
        /// comma-separated band weights of the label mapping
        #[arg(long)]
        mapping: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        mapping_b: f64,
    },
    /// Balanced region/month sampling from a tile manifest
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        /// per-region tile budget
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Median composite of co-registered tiles inside a day window
    Composite {
        /// TSV of tile path and acquisition day, one pair per line
        #[arg(long)]
        list: PathBuf,
        #[arg(long)]
        center_day: f64,
        #[arg(long, default_value_t = 6.0)]
        window_days: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// MAE pre-training on a directory of tiles
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 2.4e-3)]
        lr: f64,
        #[arg(long, default_value_t = DEFAULT_MASK_RATIO)]
        mask_ratio: f64,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        /// stop once the epoch training loss falls below this value
        #[arg(long)]
        stop_at_loss: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// CSV loss log path
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sparse-label fine-tuning on a labeled patch directory
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// "scratch" or a path to a pre-trained CKP1 checkpoint
        #[arg(long, default_value = "scratch")]
        init: String,
        #[arg(long, default_value = "chl")]
        task: String,
        #[arg(long, default_value = "small")]
        profile: String,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// training-set fraction in the ablation grid
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long)]
        stop_at_loss: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Extremely randomized trees baseline
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "chl")]
        task: String,
        #[arg(long, default_value_t = DEFAULT_NUM_TREES)]
        trees: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validation evaluation and the data-fraction ablation
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "chl")]
        task: String,
        /// "finetune" or "trees"
        #[arg(long, default_value = "finetune")]
        model_kind: String,
        #[arg(long, default_value = "scratch")]
        init: String,
        #[arg(long, default_value = "small")]
        profile: String,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_NUM_TREES)]
        trees: usize,
        /// comma-separated fractions for the ablation (grid values only)
        #[arg(long)]
        fractions: Option<String>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Large-area tiled inference with a fine-tuned checkpoint
    Infer {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// also emit a 64-bin histogram of the prediction
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// Finite-difference check of the MAE and fine-tune losses
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        profile: String,
        #[arg(long)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("oceanfm: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("oceanfm: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            seed,
            count,
            bands,
            sst,
            size,
            cloud_fraction,
            correlation_len,
            labeled,
            task,
            mapping,
            mapping_b,
        } => {
            let mut cfg = SynthConfig::new(seed, bands, size);
            cfg.sst = sst;
            cfg.cloud_fraction = cloud_fraction;
            cfg.correlation_len = correlation_len;
            cfg.mapping_b = mapping_b;
            if let Some(m) = mapping {
                cfg.mapping_w = parse_f64_list(&m)?;
                if cfg.mapping_w.len() != cfg.total_bands() {
                    return Err(Error::Config(format!(
                        "mapping has {} weights for {} bands",
                        cfg.mapping_w.len(),
                        cfg.total_bands()
                    )));
                }
            }
            if labeled {
                let kind = TargetKind::parse(&task)?;
                let ds = gen_labeled_dataset(&cfg, count, kind)?;
                data::write_labeled_dir(&out, &ds)?;
                println!("wrote {} labeled patches to {}", ds.len(), out.display());
            } else {
                let tiles: Vec<Tile> = (0..count as u64).map(|i| gen_tile(&cfg, i)).collect();
                data::write_tile_dir(&out, &tiles)?;
                println!("wrote {} tiles to {}", tiles.len(), out.display());
            }
            Ok(())
        }
        Command::Sample { manifest, budget, seed, out } => {
            let text = std::fs::read_to_string(&manifest)
                .map_err(|e| Error::io(manifest.display().to_string(), e))?;
            let mut lines = Vec::new();
            let mut metas = Vec::new();
            for (ln, line) in text.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 4 {
                    return Err(Error::Validation(format!(
                        "{}:{}: expected 4 tab-separated fields",
                        manifest.display(),
                        ln + 1
                    )));
                }
                let month: u8 = f[2]
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad month {:?}", f[2])))?;
                let vf: f64 = f[3]
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad valid fraction {:?}", f[3])))?;
                if vf >= VALID_FRACTION_THRESHOLD {
                    lines.push(line.to_string());
                    metas.push(SampleMeta { region: f[1].to_string(), month });
                }
            }
            let (selected, shortfalls) = balanced_sample(&metas, &SampleBudget::new(budget), seed);
            let mut body = String::new();
            for &i in &selected {
                body.push_str(&lines[i]);
                body.push('\n');
            }
            write_atomic(&out, body.as_bytes())?;
            for s in &shortfalls {
                eprintln!(
                    "shortfall: region {} month {}: wanted {}, got {}",
                    s.region, s.month, s.wanted, s.got
                );
            }
            println!("selected {} of {} candidate tiles", selected.len(), metas.len());
            Ok(())
        }
        Command::Composite { list, center_day, window_days, out } => {
            let text = std::fs::read_to_string(&list)
                .map_err(|e| Error::io(list.display().to_string(), e))?;
            let base = list.parent().unwrap_or(std::path::Path::new("."));
            let mut tiles = Vec::new();
            let mut days = Vec::new();
            for (ln, line) in text.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 2 {
                    return Err(Error::Validation(format!(
                        "{}:{}: expected path and day",
                        list.display(),
                        ln + 1
                    )));
                }
                tiles.push(read_tile(&base.join(f[0]))?);
                days.push(
                    f[1].parse()
                        .map_err(|_| Error::Validation(format!("bad day {:?}", f[1])))?,
                );
            }
            let stack = SceneStack::new(tiles, days)?;
            let composite = median_composite(&stack, center_day, window_days)?;
            write_tile(&composite, &out)?;
            println!("wrote composite to {}", out.display());
            Ok(())
        }
        Command::Pretrain {
            data,
            profile,
            epochs,
            seed,
            lr,
            mask_ratio,
            val_fraction,
            stop_at_loss,
            out,
            log,
        } => {
            let profile = ModelProfile::by_name(&profile)?;
            let tiles: Vec<Tile> = data::read_tile_dir(&data)?
                .into_iter()
                .filter(passes_pretrain_filter_ref)
                .collect();
            let mut cfg = PretrainConfig::new(epochs, seed);
            cfg.lr_peak = lr;
            cfg.mask_ratio = mask_ratio;
            cfg.val_fraction = val_fraction;
            cfg.stop_at_loss = stop_at_loss;
            let (ckpt, rows) = mae::pretrain(&tiles, &profile, &cfg)?;
            write_checkpoint(&ckpt, &out)?;
            if let Some(log) = log {
                write_atomic(&log, loss_log_csv(&rows).as_bytes())?;
            }
            if let Some(last) = rows.iter().rev().find(|r| r.split == "train") {
                println!("final training loss {:.6} after epoch {}", last.loss, last.epoch);
            }
            println!("wrote checkpoint to {}", out.display());
            Ok(())
        }
        Command::Finetune {
            data,
            init,
            task,
            profile,
            epochs,
            seed,
            lr,
            fraction,
            stop_at_loss,
            out,
            log,
        } => {
            let profile = ModelProfile::by_name(&profile)?;
            let kind = TargetKind::parse(&task)?;
            let ds = load_task_patches(&data, kind)?;
            let ds = fraction_subset(ds, fraction, seed)?;
            let pretrained = load_init(&init)?;
            let mut cfg = FinetuneConfig::new(epochs, seed);
            cfg.lr_peak = lr;
            cfg.stop_at_loss = stop_at_loss;
            let (model, rows) = finetune::finetune(&ds, &profile, pretrained.as_ref(), &cfg)?;
            write_checkpoint(&model.to_checkpoint(), &out)?;
            if let Some(log) = log {
                write_atomic(&log, loss_log_csv(&rows).as_bytes())?;
            }
            if let Some(last) = rows.iter().rev().find(|r| r.split == "train") {
                println!("final training loss {:.6} after epoch {}", last.loss, last.epoch);
            }
            println!("wrote checkpoint to {}", out.display());
            Ok(())
        }
        Command::Baseline { data, task, trees, seed, out } => {
            let kind = TargetKind::parse(&task)?;
            let ds = load_task_patches(&data, kind)?;
            let (rows, skipped) = extract_dataset(&ds)?;
            for i in &skipped {
                eprintln!("skipped patch {i}: all labeled pixels invalid");
            }
            let ens = fit_trees(&rows, trees, seed)?;
            write_ensemble(&ens, &out)?;
            println!("fit {} trees on {} rows, wrote {}", trees, rows.len(), out.display());
            Ok(())
        }
        Command::Eval {
            data,
            task,
            model_kind,
            init,
            profile,
            epochs,
            lr,
            folds,
            seed,
            trees,
            fractions,
            report,
        } => {
            let kind = TargetKind::parse(&task)?;
            let ds = load_task_patches(&data, kind)?;
            let plan = kfold_split(ds.len(), folds, seed)?;
            let profile = ModelProfile::by_name(&profile)?;
            let pretrained = load_init(&init)?;
            let mut fit: Box<dyn FnMut(&[LabeledPatch], usize) -> Result<FittedModel>> =
                match model_kind.as_str() {
                    "finetune" => {
                        let profile = profile.clone();
                        Box::new(move |train: &[LabeledPatch], fold: usize| {
                            let mut cfg =
                                FinetuneConfig::new(epochs, seed.wrapping_add(fold as u64));
                            cfg.lr_peak = lr;
                            let (model, _) =
                                finetune::finetune(train, &profile, pretrained.as_ref(), &cfg)?;
                            Ok(Box::new(move |p: &LabeledPatch| {
                                finetune::predict_at_labels(&model, p)
                            }) as FittedModel)
                        })
                    }
                    "trees" => Box::new(move |train: &[LabeledPatch], fold: usize| {
                        let (rows, _) = extract_dataset(train)?;
                        let means = band_means(train)?;
                        let ens = fit_trees(&rows, trees, sub_seed(seed, SALT_TREES, fold as u64))?;
                        Ok(Box::new(move |p: &LabeledPatch| {
                            trees_predict_at_labels(&ens, &means, p)
                        }) as FittedModel)
                    }),
                    other => {
                        return Err(Error::Config(format!("unknown model kind {other}")))
                    }
                };
            let mut text = String::new();
            if let Some(fractions) = fractions {
                let grid = parse_f64_list(&fractions)?;
                let curve = fraction_ablation(&ds, &plan, &grid, seed, &mut fit)?;
                text.push_str("fraction,mean_rmse,skipped\n");
                for p in &curve {
                    text.push_str(&format!("{},{:.6},{}\n", p.fraction, p.mean_rmse, p.skipped));
                }
            } else {
                let cv = run_cv(&ds, &plan, &mut fit)?;
                text.push_str(&format_report(&[(model_kind.clone(), task.clone(), cv.clone())]));
                for (f, why) in &cv.failures {
                    text.push_str(&format!("fold {f} failed: {why}\n"));
                }
            }
            write_atomic(&report, text.as_bytes())?;
            print!("{text}");
            println!("wrote report to {}", report.display());
            Ok(())
        }
        Command::Infer { scene, model, out, histogram } => {
            let scene_tile = read_tile(&scene)?;
            let ckpt = read_checkpoint(&model)?;
            let model = PixelModel::from_checkpoint(&ckpt)?;
            let plane = tiled_inference(&model, &scene_tile)?;
            let validity: Vec<bool> = plane.iter().map(|v| v.is_finite()).collect();
            let pred = Tile::new(
                BandSet::new(vec!["PRED".to_string()])?,
                scene_tile.height,
                scene_tile.width,
                plane.clone(),
                validity,
                scene_tile.meta.clone(),
            )?;
            write_tile(&pred, &out)?;
            if let Some(h) = histogram {
                write_atomic(&h, histogram_csv(&plane, 64)?.as_bytes())?;
            }
            println!("wrote inference map to {}", out.display());
            Ok(())
        }
        Command::Gradcheck { profile, seed } => {
            let profile = ModelProfile::by_name(&profile)?;
            let (mae_err, ft_err) = gradcheck_both(&profile, seed)?;
            println!("mae loss max relative error: {mae_err:.3e}");
            println!("finetune loss max relative error: {ft_err:.3e}");
            if mae_err < GRADCHECK_TOLERANCE && ft_err < GRADCHECK_TOLERANCE {
                println!("gradcheck passed (tolerance {GRADCHECK_TOLERANCE:.0e})");
                Ok(())
            } else {
                Err(Error::Validation(format!(
                    "gradient error exceeds {GRADCHECK_TOLERANCE:.0e}"
                )))
            }
        }
    }
}

// filter adapter: passes_pretrain_filter takes &Tile
fn passes_pretrain_filter_ref(t: &Tile) -> bool {
    passes_pretrain_filter(t)
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad numeric value {p:?}")))
        })
        .collect()
}

fn load_task_patches(dir: &PathBuf, kind: TargetKind) -> Result<Vec<LabeledPatch>> {
    let ds: Vec<LabeledPatch> =
        data::read_labeled_dir(dir)?.into_iter().filter(|p| p.kind == kind).collect();
    if ds.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no {} patches in {}",
            kind.as_str(),
            dir.display()
        )));
    }
    Ok(ds)
}

fn load_init(init: &str) -> Result<Option<ModelCheckpoint>> {
    if init == "scratch" {
        Ok(None)
    } else {
        Ok(Some(read_checkpoint(std::path::Path::new(init))?))
    }
}

/// Deterministic training subset: seeded shuffle, keep the first floor(f*n).
fn fraction_subset(ds: Vec<LabeledPatch>, fraction: f64, seed: u64) -> Result<Vec<LabeledPatch>> {
    if (fraction - 1.0).abs() < 1e-12 {
        return Ok(ds);
    }
    if !FRACTION_GRID.iter().any(|&g| (g - fraction).abs() < 1e-9) {
        return Err(Error::Config(format!("fraction {fraction} outside the ablation grid")));
    }
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = seeded_rng(sub_seed(seed, SALT_FRACTION, u64::MAX));
    order.shuffle(&mut rng);
    let n = (fraction * ds.len() as f64).floor() as usize;
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "fraction {fraction} leaves {n} training samples"
        )));
    }
    let mut keep: Vec<usize> = order[..n].to_vec();
    keep.sort_unstable();
    let mut ds = ds;
    let mut picked = Vec::with_capacity(n);
    for i in keep.into_iter().rev() {
        picked.push(ds.swap_remove(i));
    }
    picked.reverse();
    Ok(picked)
}

/// Finite-difference checks of both training losses on synthetic inputs.
fn gradcheck_both(profile: &ModelProfile, seed: u64) -> Result<(f64, f64)> {
    let bands = 2;
    let cfg = SynthConfig::new(seed, bands, profile.input_size);
    let tile = gen_tile(&cfg, 0);
    let refs = [&tile];
    let (mean, std) = band_stats(&refs)?;

    // MAE loss
    let mut params = mae::init_mae_params(profile, bands, seed);
    let plan = random_mask(profile.tokens(), 0.5, seed)?;
    params.zero_grads();
    mae::mae_loss_grad(&mut params, profile, &tile, &mean, &std, &plan)?;
    let mae_err = finite_diff_check(
        |ps| mae::mae_loss(ps, profile, &tile, &mean, &std, &plan),
        &mut params,
        1e-4,
        30,
        seed,
    )?;

    // fine-tune sparse loss on the same tile with a 3x3 label block
    let mut label_plane = vec![f32::NAN; profile.input_size * profile.input_size];
    let b = (profile.input_size / 2).saturating_sub(1).min(profile.input_size - 3);
    for r in b..b + 3 {
        for c in b..b + 3 {
            label_plane[r * profile.input_size + c] = 0.3;
        }
    }
    let sample = FinetuneSample { tile: tile.clone(), label_plane };
    let mut params = finetune::build_model(profile, bands, seed, None)?;
    params.zero_grads();
    finetune::finetune_loss_grad(&mut params, profile, &sample, &mean, &std)?;
    let ft_err = finite_diff_check(
        |ps| finetune::finetune_loss(ps, profile, &sample, &mean, &std),
        &mut params,
        1e-4,
        30,
        seed,
    )?;
    Ok((mae_err, ft_err))
}
