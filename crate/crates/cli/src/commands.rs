use std::fs;
use std::path::Path;

use rayon::prelude::*;

use ftlab_core::strategies::LlrdSetup;
use ftlab_core::trainer::{
    finetune as run_finetune, history_rows, load_checkpoint, pretrain_toy, save_checkpoint,
    variance_study, Checkpoint, Dataset, PretrainConfig, TrainConfig, HISTORY_HEADER,
};
use ftlab_core::{Error, Result};

use crate::args::{describe_config, train_config, StrategyArgs};
use crate::output::{read_results_csv, render_table, write_results_csv, Manifest, ResultRow};
use crate::{Common, FinetuneCmd, GridCmd, PretrainCmd, ReportCmd, VarianceCmd};

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out)?;
    Ok(&common.out)
}

fn sha_of(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(&Sha256::digest(fs::read(path)?)[..8]))
}

pub fn pretrain(common: &Common, cmd: &PretrainCmd) -> Result<()> {
    let corpus: Vec<String> = if cmd.data.data.is_some() {
        cmd.data.load(common.seed)?.examples.into_iter().map(|e| e.text).collect()
    } else if cmd.data.synth {
        let spec = cmd.data.synth_spec.spec_with_default(common.seed, 2000);
        ftlab_core::data::generate_synth(&spec)?.into_iter().map(|e| e.text).collect()
    } else {
        return Err(Error::Config("pretrain needs a corpus: pass --data <tsv> or --synth".into()));
    };
    let cfg = PretrainConfig {
        encoder: cmd.encoder.config(),
        steps: cmd.steps,
        batch_size: cmd.batch_size,
        lr: cmd.lr,
        warmup_frac: cmd.warmup,
        mask_frac: cmd.mask_frac,
        ..PretrainConfig::default()
    };
    let config_text = format!(
        "{}\nencoder={:?}\nsteps={}\nlr={}\nbatch_size={}\nwarmup={}\nmask_frac={}",
        cmd.data.describe(common.seed),
        cfg.encoder,
        cfg.steps,
        cfg.lr,
        cfg.batch_size,
        cfg.warmup_frac,
        cfg.mask_frac
    );
    let mut manifest = Manifest::new("pretrain", config_text, common.seed);
    let ckpt = pretrain_toy(&corpus, &cfg, common.seed)?;
    let dir = out_dir(common)?;
    let path = dir.join("pretrained.ftlb");
    save_checkpoint(&ckpt, &path)?;
    manifest.outputs.push(path.clone());
    manifest.notes.push(format!("vocab_size={}", ckpt.metadata.encoder.vocab_size));
    manifest.write(&dir.join("manifest.txt"))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_inputs(common: &Common, cmd: &FinetuneCmd) -> Result<(Checkpoint, Dataset)> {
    let ckpt = load_checkpoint(&cmd.pretrained)?;
    let data = cmd.data.load(common.seed)?;
    Ok((ckpt, data))
}

fn base_description(common: &Common, cmd: &FinetuneCmd) -> Result<String> {
    Ok(format!(
        "pretrained={}\npretrained.sha256={}\n{}",
        cmd.pretrained.display(),
        sha_of(&cmd.pretrained)?,
        cmd.data.describe(common.seed)
    ))
}

pub fn finetune(common: &Common, cmd: &FinetuneCmd) -> Result<()> {
    let (ckpt, data) = load_inputs(common, cmd)?;
    let cfg = train_config(&cmd.train, &cmd.strategy, &data, common.seed)?;
    let text = format!("{}\n{}", base_description(common, cmd)?, describe_config(&cfg));
    let mut manifest = Manifest::new("finetune", text, common.seed);
    let outcome = run_finetune(&ckpt, &data, &cfg)?;

    let dir = out_dir(common)?;
    for g in &outcome.groups {
        manifest.notes.push(format!("group.{}.lr={:.4e}", g.name, g.lr));
    }
    manifest.notes.push(format!("total_steps={}", outcome.total_steps));
    let ck_path = dir.join("finetuned.ftlb");
    save_checkpoint(&outcome.checkpoint, &ck_path)?;
    let hist_path = dir.join("history.csv");
    let mut hist = vec![HISTORY_HEADER.to_string()];
    hist.extend(history_rows(&manifest.run_id, cfg.seed, &outcome));
    fs::write(&hist_path, hist.join("\n") + "\n")?;
    let rows = vec![ResultRow::from_report(cfg.strategy.to_string(), &outcome.test)];
    let csv_path = dir.join("results.csv");
    write_results_csv(&csv_path, &rows)?;
    manifest.outputs.extend([ck_path, hist_path, csv_path]);
    manifest.write(&dir.join("manifest.txt"))?;
    print!("{}", render_table(&rows));
    Ok(())
}

/// Cross product of the selected grid axes, in axis order lr, mixout,
/// reinit.
pub fn grid_configs(cmd: &GridCmd, base: &TrainConfig) -> Result<Vec<TrainConfig>> {
    let mut axes: Vec<&str> = cmd.axes.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    axes.dedup();
    if axes.is_empty() {
        return Err(Error::Config("empty grid: select at least one of lr, mixout, reinit".into()));
    }
    if let Some(bad) = axes.iter().find(|a| !["lr", "mixout", "reinit"].contains(a)) {
        return Err(Error::Config(format!("unknown grid axis {bad:?}")));
    }
    let on = |a: &str| axes.contains(&a);
    let lrs: Vec<Option<f64>> = if on("lr") { cmd.lr_grid.iter().map(|v| Some(*v)).collect() } else { vec![None] };
    let mixes: Vec<Option<f64>> = if on("mixout") { cmd.mixout_grid.iter().map(|v| Some(*v)).collect() } else { vec![None] };
    let reinits: Vec<Option<usize>> = if on("reinit") { cmd.reinit_grid.iter().map(|v| Some(*v)).collect() } else { vec![None] };
    let mut out = Vec::new();
    for lr in &lrs {
        for mix in &mixes {
            for re in &reinits {
                let mut c = base.clone();
                if let Some(v) = lr {
                    c.base_lr = *v;
                }
                if let Some(v) = mix {
                    c.strategy.mixout_p = Some(*v);
                }
                if let Some(v) = re {
                    c.strategy.reinit_n = *v;
                }
                out.push(c);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty grid: a selected axis has no values".into()));
    }
    Ok(out)
}

fn grid_label(c: &TrainConfig) -> String {
    format!("{} lr={:e}", c.strategy, c.base_lr)
}

pub fn grid(common: &Common, cmd: &GridCmd) -> Result<()> {
    let (ckpt, data) = load_inputs(common, &cmd.base)?;
    let base = train_config(&cmd.base.train, &cmd.base.strategy, &data, common.seed)?;
    let configs = grid_configs(cmd, &base)?;
    for c in &configs {
        c.validate()?;
        c.strategy.validate(ckpt.metadata.encoder.num_layers)?;
    }
    let desc = base_description(common, &cmd.base)?;
    let outcomes = configs
        .par_iter()
        .map(|c| run_finetune(&ckpt, &data, c))
        .collect::<Result<Vec<_>>>()?;

    let dir = out_dir(common)?;
    let mut hist = vec![HISTORY_HEADER.to_string()];
    let mut rows = Vec::with_capacity(configs.len());
    let all_text: Vec<String> = configs.iter().map(describe_config).collect();
    let mut manifest = Manifest::new("grid", format!("{desc}\n{}", all_text.join("\n---\n")), common.seed);
    for ((c, o), text) in configs.iter().zip(&outcomes).zip(&all_text) {
        let id = crate::output::run_id(&format!("{desc}\n{text}"), c.seed);
        hist.extend(history_rows(&id, c.seed, o));
        rows.push(ResultRow::from_report(grid_label(c), &o.test));
        manifest.notes.push(format!("run={id} {}", grid_label(c)));
    }
    let hist_path = dir.join("history.csv");
    fs::write(&hist_path, hist.join("\n") + "\n")?;
    let csv_path = dir.join("results.csv");
    write_results_csv(&csv_path, &rows)?;
    let table = render_table(&rows);
    let txt_path = dir.join("results.txt");
    fs::write(&txt_path, &table)?;
    manifest.outputs.extend([hist_path, csv_path, txt_path]);
    manifest.write(&dir.join("manifest.txt"))?;
    print!("{table}");
    Ok(())
}

/// Applies `key=value,key=value` overrides to strategy flags.
pub fn apply_overrides(base: &StrategyArgs, spec: &str) -> Result<StrategyArgs> {
    let mut s = base.clone();
    let spec = spec.trim();
    if spec.is_empty() || spec == "baseline" {
        return Ok(s);
    }
    for part in spec.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("strategy override {part:?} is not key=value")))?;
        let v = v.trim();
        let bad = || Error::Config(format!("bad value {v:?} for {}", k.trim()));
        match k.trim() {
            "llrd" => s.llrd = v.parse::<LlrdSetup>()?,
            "mixout" => s.mixout = Some(v.parse().map_err(|_| bad())?),
            "reinit" => s.reinit = v.parse().map_err(|_| bad())?,
            "pool" => s.pool = v.parse()?,
            "weighted-loss" | "weighted_loss" => s.weighted_loss = v.parse().map_err(|_| bad())?,
            "reduction" => s.reduction = v.parse()?,
            "dropout" => s.dropout = Some(v.parse().map_err(|_| bad())?),
            other => return Err(Error::Config(format!("unknown strategy key {other:?}"))),
        }
    }
    Ok(s)
}

pub fn variance(common: &Common, cmd: &VarianceCmd) -> Result<()> {
    if cmd.seeds.len() < 2 {
        return Err(Error::Config(format!(
            "variance needs at least 2 seeds, got {}",
            cmd.seeds.len()
        )));
    }
    let (ckpt, data) = load_inputs(common, &cmd.base)?;
    let specs: Vec<String> = if cmd.strategies.is_empty() {
        vec!["baseline".into()]
    } else {
        cmd.strategies.clone()
    };
    let configs = specs
        .iter()
        .map(|s| train_config(&cmd.base.train, &apply_overrides(&cmd.base.strategy, s)?, &data, common.seed))
        .collect::<Result<Vec<_>>>()?;
    for c in &configs {
        c.validate()?;
        c.strategy.validate(ckpt.metadata.encoder.num_layers)?;
    }
    let reports = configs
        .iter()
        .map(|c| variance_study(&ckpt, &data, c, &cmd.seeds))
        .collect::<Result<Vec<_>>>()?;

    let dir = out_dir(common)?;
    let desc = base_description(common, &cmd.base)?;
    let text: Vec<String> = configs.iter().map(describe_config).collect();
    let mut manifest = Manifest::new(
        "variance",
        format!("{desc}\nseeds={:?}\n{}", cmd.seeds, text.join("\n---\n")),
        common.seed,
    );
    let rows: Vec<ResultRow> = configs
        .iter()
        .zip(&reports)
        .map(|(c, r)| {
            ResultRow::from_summaries(c.strategy.to_string(), [r.precision, r.recall, r.accuracy, r.f_score])
        })
        .collect();
    let csv_path = dir.join("variance.csv");
    write_results_csv(&csv_path, &rows)?;
    let table = render_table(&rows);
    let txt_path = dir.join("variance.txt");
    fs::write(&txt_path, &table)?;
    manifest.outputs.extend([csv_path, txt_path]);
    manifest.write(&dir.join("manifest.txt"))?;
    print!("{table}");
    Ok(())
}

pub fn report(cmd: &ReportCmd) -> Result<()> {
    let rows = read_results_csv(&cmd.input)?;
    print!("{}", render_table(&rows));
    Ok(())
}
