use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use av2vec::cluster::{self, ClusterModel};
use av2vec::config::{self, Mode, RunConfig};
use av2vec::synthdata::{self, build_eval_sets};
use av2vec::trainkit::{
    evaluate, finetune_probe, load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind, Condition, MetricsWriter,
    Pretrainer, ProbeModel, TrainState,
};
use av2vec::{model, rng};

use crate::{Cli, Command};

/// Config sections each subcommand reads, for `--help`.
pub const SECTIONS: &[(&str, &[&str])] = &[
    ("gen-data", &["synth", "data"]),
    ("pretrain", &["", "synth", "data", "features", "corruption", "encoder", "distill", "train", "cluster"]),
    ("cluster", &["", "synth", "data", "cluster"]),
    ("finetune", &["", "synth", "data", "features", "encoder", "corruption", "finetune"]),
    ("eval", &["", "synth", "data", "features", "encoder"]),
];

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.run_dir {
        cfg.run_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => gen_data(&cfg, cli.force),
        Command::Pretrain => pretrain(&cfg, cli.force, cli.resume.as_deref()),
        Command::Cluster => cluster_cmd(&cfg, cli.force),
        Command::Finetune { checkpoint, random_init } => finetune(&cfg, checkpoint.clone(), *random_init),
        Command::Eval { checkpoint } => eval(&cfg, checkpoint.clone()),
    }
}

fn non_empty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn prepare_run_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(cfg.checkpoint_dir())?;
    fs::create_dir_all(cfg.report_dir())?;
    fs::write(cfg.run_dir.join(config::SNAPSHOT_FILE), cfg.to_toml())?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = &cfg.data.dir;
    if non_empty(dir) {
        if !force {
            bail!("{} exists and is not empty; pass --force to regenerate", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    let (train, eval) = cfg.generate_corpora()?;
    synthdata::write_corpus(dir, &train)?;
    synthdata::write_corpus(&cfg.eval_dir(), &eval)?;
    let frames: usize = train.iter().map(|s| s.num_frames()).sum();
    println!(
        "wrote {} training utterances ({frames} frames) and {} evaluation utterances to {}",
        train.len(),
        eval.len(),
        dir.display()
    );
    Ok(())
}

fn read_train_corpus(cfg: &RunConfig) -> Result<Vec<synthdata::SyntheticSample>> {
    synthdata::read_corpus(&cfg.data.dir)
        .with_context(|| format!("reading corpus from {} (run `av2vec gen-data` first?)", cfg.data.dir.display()))
}

fn pretrain(cfg: &RunConfig, force: bool, resume: Option<&Path>) -> Result<()> {
    let corpus = read_train_corpus(cfg)?;
    let targets = if cfg.mode == Mode::Av2vecMlm {
        let dir = cfg.targets_dir();
        Some(cluster::read_targets(&dir, &corpus).with_context(|| {
            format!(
                "mode = \"av2vec-mlm\" needs discrete targets in {}; run `av2vec cluster` on a pretrained checkpoint first",
                dir.display()
            )
        })?)
    } else {
        None
    };
    let bank = cfg.noise_bank();
    let pc = cfg.pretrain_config();
    let trainer = Pretrainer::new(&pc, &corpus, targets.as_deref(), &bank)?;

    let metrics_path = cfg.run_dir.join(config::METRICS_FILE);
    let (mut state, mut writer) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let state = ckpt.into_state(&pc)?;
            log::info!("resuming from step {}", state.step);
            (state.clone(), MetricsWriter::resume(&metrics_path, state.step)?)
        }
        None => {
            if metrics_path.exists() && !force {
                bail!(
                    "{} already holds a run; pass --force to overwrite or --resume to continue",
                    cfg.run_dir.display()
                );
            }
            if force && cfg.checkpoint_dir().exists() {
                fs::remove_dir_all(cfg.checkpoint_dir())?;
            }
            prepare_run_dir(cfg)?;
            (TrainState::init(&pc), MetricsWriter::create(&metrics_path)?)
        }
    };
    prepare_run_dir(cfg)?;
    let ckpt_dir = cfg.checkpoint_dir();
    let every = cfg.train.checkpoint_every;
    let total = cfg.train.total_updates;
    let save = |s: &TrainState, name: &str| save_checkpoint(&Checkpoint::from_state(s, &pc), &ckpt_dir.join(name));
    trainer.run(&mut state, |s, m| {
        writer.write(m)?;
        if m.step % 100 == 0 || m.step == total {
            log::info!(
                "step {}/{total} loss_reg {:.4} loss_total {:.4} lr {:.2e}",
                m.step,
                m.loss_reg,
                m.loss_total,
                m.lr
            );
        }
        if every > 0 && m.step % every == 0 {
            save(s, &format!("step-{:06}.av2c", m.step))?;
        }
        Ok(())
    })?;
    save(&state, config::LAST_CHECKPOINT)?;
    println!(
        "pretraining finished at step {}; checkpoint {}",
        state.step,
        ckpt_dir.join(config::LAST_CHECKPOINT).display()
    );
    Ok(())
}

fn cluster_cmd(cfg: &RunConfig, force: bool) -> Result<()> {
    let path = cfg.cluster_checkpoint();
    let ckpt = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    let pc = ckpt.pretrain_config()?;
    pc.model.check_params(&ckpt.student)?;
    let layer = if cfg.cluster.layer == 0 { pc.model.encoder.num_layers.div_ceil(2) } else { cfg.cluster.layer };
    let targets_dir = cfg.targets_dir();
    if non_empty(&targets_dir) && !force {
        bail!("{} is not empty; pass --force to replace the targets", targets_dir.display());
    }
    let corpus = read_train_corpus(cfg)?;
    let feats = cluster::dump_features(&pc.model, &ckpt.student, &corpus, layer)?;
    let fit = cluster::kmeans_fit(&feats.features, cfg.cluster.k, cfg.cluster.max_iters, cfg.seed, layer)?;
    prepare_run_dir(cfg)?;
    let model_path = cfg.checkpoint_dir().join("cluster.av2k");
    cluster::save_cluster_model(&fit.model, &model_path)?;
    // Assign with the stored (f32) centroids so labels match the file on disk.
    let stored: ClusterModel = cluster::load_cluster_model(&model_path)?;
    let targets = cluster::assign_targets(&stored, &pc.model, &ckpt.student, &corpus)?;
    if targets_dir.exists() {
        fs::remove_dir_all(&targets_dir)?;
    }
    cluster::write_targets(&targets_dir, &targets)?;
    println!(
        "k-means: K = {}, layer {layer}, {} frames, {} iterations, final objective {:.6}",
        cfg.cluster.k,
        feats.features.rows(),
        fit.history.len() - 1,
        fit.objective()
    );
    println!("wrote {} target files to {}", targets.len(), targets_dir.display());
    Ok(())
}

fn finetune(cfg: &RunConfig, checkpoint: Option<PathBuf>, random_init: bool) -> Result<()> {
    let mcfg = cfg.model_config();
    let encoder = if random_init {
        let mut r = rng::derive(cfg.seed, rng::Stream::Init, &[]);
        model::init_student(&mcfg, &mut r)
    } else {
        let path = checkpoint.unwrap_or_else(|| cfg.checkpoint_dir().join(config::LAST_CHECKPOINT));
        let ckpt = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        if ckpt.kind != CheckpointKind::Pretrain {
            bail!("{} is not a pretraining checkpoint", path.display());
        }
        ckpt.student
    };
    let corpus = read_train_corpus(cfg)?;
    let bank = cfg.noise_bank();
    let mut probe = ProbeModel::new(mcfg.clone(), &encoder, cfg.synth.num_latent_states, cfg.seed)?;
    let report = finetune_probe(&mut probe, &corpus, &bank, &cfg.corruption, &cfg.finetune, cfg.seed)?;
    prepare_run_dir(cfg)?;
    let ckpt = probe.to_checkpoint(&report.adam, cfg.seed, cfg.finetune.total_updates);
    let out = cfg.checkpoint_dir().join(config::PROBE_CHECKPOINT);
    save_checkpoint(&ckpt, &out)?;
    println!(
        "finetuned for {} updates ({} frozen); final loss {:.4}; training frame accuracy {:.4}; probe {}",
        cfg.finetune.total_updates,
        cfg.finetune.freeze_steps,
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.train_accuracy,
        out.display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let path = checkpoint.unwrap_or_else(|| cfg.checkpoint_dir().join(config::PROBE_CHECKPOINT));
    let ckpt = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    let probe = ProbeModel::from_checkpoint(ckpt, &cfg.model_config())
        .with_context(|| format!("{} (run `av2vec finetune` to produce a probe)", path.display()))?;
    let corpus = synthdata::read_corpus(&cfg.eval_dir())
        .with_context(|| format!("reading evaluation corpus from {}", cfg.eval_dir().display()))?;
    let sets = build_eval_sets(&corpus, &cfg.noise_bank(), cfg.seed)?;
    let table = evaluate(&probe, &sets, &Condition::ALL)?;
    prepare_run_dir(cfg)?;
    let csv = cfg.report_dir().join("accuracy.csv");
    fs::write(&csv, table.to_csv())?;
    print!("{}", table.render());
    println!("wrote {}", csv.display());
    Ok(())
}
