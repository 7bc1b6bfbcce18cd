use crate::config::{check_thresholds, default_out_dir, RunConfig};
use crate::error::{CliError, Result};
use crate::{create_dir, to_json_pretty, write_file, EvalArgs, SynthArgs, TrainArgs};
use mtmm_core::checkpoint;
use mtmm_core::data::{load_dataset, save_dataset, synthesize_dataset, DataError, SynthSpec};
use mtmm_core::training::{check_dims, evaluate, train};

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_videos: a.videos as usize,
        u_min: a.u_min as usize,
        u_max: a.u_max as usize,
        dims: a.dims,
        sentiment_coupling: a.coupling,
        noise_scale: a.noise,
        split: a.split,
        ..SynthSpec::default()
    };
    let ds = synthesize_dataset(&spec, a.seed).map_err(|e| match e {
        DataError::Spec(m) => CliError::Usage(m),
        e => e.into(),
    })?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_dataset(&ds, &a.out)?;
    println!(
        "wrote {} videos, {} utterances to {}",
        ds.len(),
        ds.num_utterances(),
        a.out.display()
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::base(a.flags.config.as_deref())?;
    a.flags.apply(&mut cfg);
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(m) = a.modalities {
        cfg.modalities = m;
    }
    if a.train.is_some() {
        cfg.train = a.train.clone();
    }
    if a.dev.is_some() {
        cfg.dev = a.dev.clone();
    }
    let out = cfg.resolve_out_dir(a.out.clone());
    cfg.validate()?;
    let train_path = cfg.train.clone().ok_or_else(|| {
        CliError::Usage("no training data: pass --train or set \"train\" in the config".into())
    })?;

    // everything is loaded and checked before the output directory exists
    let train_set = load_dataset(&train_path)?;
    let dev_set = cfg.dev.as_deref().map(load_dataset).transpose()?;
    let model = cfg.model_config(train_set.dims)?;
    if let Some(dev) = &dev_set {
        check_dims(&model, dev)?;
    }
    let (params, history) = train(&model, &train_set, dev_set.as_ref(), &cfg.train_options())?;

    create_dir(&out)?;
    write_file(
        &out.join("checkpoint.txt"),
        checkpoint::to_string(&params, &model),
    )?;
    write_file(&out.join("history.json"), to_json_pretty(&history))?;
    write_file(&out.join("config.json"), cfg.to_json())?;

    let last = history.epochs.last();
    println!(
        "trained {} {} for {} epochs ({} steps); final train loss {}",
        model.mode,
        model.modalities.label(),
        history.epochs.len(),
        history.total_steps,
        last.map_or_else(|| "NA".into(), |e| format!("{:.6}", e.train_loss)),
    );
    if let Some(b) = history.best_epoch {
        println!("best dev epoch {b}");
    }
    println!("outputs in {}", out.display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    check_thresholds(a.thresholds)?;
    let (params, model) = checkpoint::load(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    check_dims(&model, &ds)?;
    let report = evaluate(&params, &model, &ds, a.thresholds)?;
    let text = report.to_text();
    if let Some(out) = a.out.clone().or_else(default_out_dir) {
        create_dir(&out)?;
        write_file(&out.join("report.json"), to_json_pretty(&report))?;
        write_file(&out.join("report.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}
