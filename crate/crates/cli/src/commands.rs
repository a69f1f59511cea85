use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dualscan::config::RunConfig;
use dualscan::data::{self, HsiCube};
use dualscan::detection::{self, ScoreMap};
use dualscan::eval::{self, EvalReport};
use dualscan::model::{Checkpoint, DualBranchModel};
use dualscan::training;
use serde::Serialize;

use crate::{BenchArgs, ConfigArgs, DetectArgs, EvalArgs, InfoArgs, SynthArgs, TrainArgs};

/// Loads the config file (or defaults), applies flag overrides and
/// validates the result before anything else runs.
fn resolve(args: &ConfigArgs, edit: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(f) = args.fusion {
        cfg.model.fusion = f;
    }
    if let Some(s) = args.seed {
        cfg.scene.seed = s;
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    edit(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `bytes` and reads them back.
fn write_checked(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    let back = fs::read(path).with_context(|| format!("re-reading {}", path.display()))?;
    if back != bytes {
        bail!("{} did not read back intact", path.display());
    }
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_cube(path: &Path) -> Result<HsiCube> {
    let cube = data::load_cube(path).with_context(|| format!("cube {}", path.display()))?;
    Ok(data::normalize(&cube)?)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let cfg = resolve(&args.config, |_| {})?;
    let cube = data::synth_scene(&cfg.scene)?;
    let mask = cube.mask.clone().expect("synthetic scenes carry a mask");
    let mask_out = data::mask_path(&args.out);
    write_checked(&args.out, &data::hsic::cube_to_bytes(&cube)?)?;
    write_checked(&mask_out, &data::hsic::mask_to_bytes(&mask)?)?;
    let back = data::load_cube(&args.out)?;
    if back.values != cube.values || data::load_mask(&mask_out)? != mask {
        bail!("synthetic scene did not round-trip");
    }
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve(&args.config, |c| {
        if let Some(e) = args.epochs {
            c.train.epochs = e;
        }
        if let Some(lr) = args.lr {
            c.train.lr = lr;
        }
        if let Some(b) = args.batch_size {
            c.train.batch_size = b;
        }
    })?;
    let cube = load_cube(&args.cube)?;
    let (ck, history) = training::fit(&cube, &cfg.model, &cfg.train_config())?;
    let bytes = ck.to_bytes()?;
    write_checked(&args.out, &bytes)?;
    if Checkpoint::load(&args.out)?.to_bytes()? != bytes {
        bail!("checkpoint did not round-trip");
    }
    let history_out = args.history.unwrap_or_else(|| sibling(&args.out, ".history.csv"));
    write_checked(&history_out, history.to_csv().as_bytes())?;
    log::info!(
        "kept epoch {} (val loss {})",
        ck.epoch,
        ck.val_loss.map_or("-".into(), |v| format!("{v:.6}"))
    );
    Ok(())
}

pub fn detect(args: DetectArgs) -> Result<()> {
    let cube = load_cube(&args.cube)?;
    let map = match &args.model {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("checkpoint {}", p.display()))?;
            detection::detect(&cube, &ck, args.stride)?
        }
        None => detection::rx_score(&cube)?,
    };
    let csv = map.to_csv();
    write_checked(&args.out, csv.as_bytes())?;
    if ScoreMap::from_csv(&fs::read_to_string(&args.out)?, map.detector.clone())?.scores != map.scores {
        bail!("score map did not round-trip");
    }
    let pgm = args.pgm.unwrap_or_else(|| args.out.with_extension("pgm"));
    write_checked(&pgm, &map.to_pgm())?;
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&args.scores).with_context(|| format!("scores {}", args.scores.display()))?;
    let map = ScoreMap::from_csv(&text, "file")?;
    let mask = data::load_mask(&args.mask).with_context(|| format!("mask {}", args.mask.display()))?;
    let report = eval::evaluate(&map, &mask)?;
    let json = serde_json::to_string_pretty(&report)?;
    write_checked(&args.out, json.as_bytes())?;
    let back: EvalReport = serde_json::from_str(&fs::read_to_string(&args.out)?)?;
    if back.auc != report.auc {
        bail!("report did not round-trip");
    }
    let roc = args.roc.unwrap_or_else(|| args.out.with_extension("roc.csv"));
    write_checked(&roc, report.roc.to_csv().as_bytes())?;
    println!("auc {:.6}", report.auc);
    Ok(())
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let result = eval::bench_scan(&args.lengths, args.reps)?;
    write_checked(&args.out, result.to_csv().as_bytes())?;
    for r in &result.ratios {
        println!("L {} -> {}: scan x{:.2}, attention x{:.2}", r.from, r.to, r.scan, r.attn);
    }
    Ok(())
}

#[derive(Serialize)]
struct Info {
    params_total: usize,
    params_active: usize,
    macs_per_patch: u64,
    flops_per_patch: u64,
    layers: Vec<dualscan::model::LayerAudit>,
    config: RunConfig,
}

pub fn info(args: InfoArgs) -> Result<()> {
    let mut cfg = resolve(&args.config, |_| {})?;
    let bands = args.bands.unwrap_or(if cfg.model.bands == 0 { 32 } else { cfg.model.bands });
    if bands == 0 {
        bail!("--bands must be positive");
    }
    cfg.model = cfg.model.resolve_bands(bands)?;
    let (model, store) = DualBranchModel::init::<f32>(cfg.model.clone())?;
    let audit = model.audit(&store);
    let info = Info {
        params_total: audit.params_total,
        params_active: audit.params_active,
        macs_per_patch: audit.macs_per_patch,
        flops_per_patch: audit.flops_per_patch,
        layers: audit.layers,
        config: cfg,
    };
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(&info)?)?;
    Ok(())
}
