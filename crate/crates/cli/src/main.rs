//! `cludi`: generate mixtures, train, evaluate, classify and scan hyperparameters.
//!
//! Exit status is 0 on success, 1 when a command fails at run time and 2 for
//! usage errors. `CLUDI_THREADS` caps the worker pool.

mod args;

use std::error::Error;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use cludi_core::data::{self, generate_mixture, write_cldf};
use cludi_core::inference::{classify_batch, evaluate, export_embeddings, write_embeddings_csv};
use cludi_core::trainer::{train_with, EvalSchedule};
use cludi_core::{checkpoint, EvalReport, FeatureDataset, InferenceConfig, MixtureSpec, TrainConfig};

use args::{AblateArgs, Cli, Command, DataArgs, EvalArgs, GenerateArgs, PredictArgs, ScanParam, TrainArgs};

type AnyResult<T> = Result<T, Box<dyn Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> AnyResult<()> {
    if let Ok(raw) = std::env::var("CLUDI_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| format!("CLUDI_THREADS must be a positive integer, got {raw:?}"))?;
        if n == 0 {
            return Err("CLUDI_THREADS must be at least 1".into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(command: Command) -> AnyResult<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::ExportEmbeddings(a) => export_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn generate(a: GenerateArgs) -> AnyResult<()> {
    let spec = MixtureSpec {
        k: a.k,
        dim: a.dim,
        per_component: a.per,
        center_radius: a.radius,
        noise_std: a.noise,
        seed: a.seed,
    };
    let ds = generate_mixture(&spec)?;
    if a.out.extension().is_some_and(|e| e == "csv") {
        data::write_csv_features(&ds, BufWriter::new(File::create(&a.out)?))?;
    } else {
        write_cldf(&ds, &a.out)?;
    }
    eprintln!("wrote {} x {} dataset to {}", ds.len(), ds.dim(), a.out.display());
    Ok(())
}

fn load(d: &DataArgs) -> AnyResult<FeatureDataset> {
    let is_csv = d.data.extension().is_some_and(|e| e == "csv");
    let mut ds = if is_csv {
        data::read_csv_features(&d.data, d.labels)?
    } else {
        data::read_cldf(&d.data)?
    };
    if d.standardize {
        ds.standardize();
    }
    Ok(ds)
}

fn train_config(a: &TrainArgs) -> AnyResult<TrainConfig> {
    let base = match &a.config {
        Some(path) => serde_json::from_reader(File::open(path)?)?,
        None => TrainConfig::default(),
    };
    let config = a.overrides.apply(base)?;
    config.validate()?;
    Ok(config)
}

fn history_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".history.csv");
    out.with_file_name(name)
}

fn print_json(value: &impl serde::Serialize) -> AnyResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn train_cmd(a: TrainArgs) -> AnyResult<()> {
    let ds = load(&a.data)?;
    let config = train_config(&a)?;
    let inference = a.eval.config();
    let eval = (ds.labels.is_some() && a.eval_every > 0).then(|| EvalSchedule {
        data: &ds,
        inference,
        every: a.eval_every,
    });
    let quiet = a.quiet;
    let (model, history) = train_with(&ds, config, eval, |r| {
        if !quiet {
            match &r.metrics {
                Some(m) => eprintln!("epoch {} loss {:.4} acc {:.4} nmi {:.4} ari {:.4}", r.epoch, r.loss, m.acc, m.nmi, m.ari),
                None => eprintln!("epoch {} loss {:.4}", r.epoch, r.loss),
            }
        }
    })?;
    checkpoint::save(&model, &a.out)?;
    let hist = a.history.clone().unwrap_or_else(|| history_path(&a.out));
    history.save_csv(&hist)?;
    eprintln!("wrote checkpoint {} and history {}", a.out.display(), hist.display());
    if ds.labels.is_some() {
        print_json(&evaluate(&model, &ds, &inference)?)?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> AnyResult<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let ds = load(&a.data)?;
    let reports: Vec<EvalReport> = a
        .b
        .iter()
        .map(|&b| {
            let cfg = InferenceConfig { b, ..a.sampling.config() };
            evaluate(&model, &ds, &cfg)
        })
        .collect::<Result<_, _>>()?;
    let text = if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0])?
    } else {
        serde_json::to_string_pretty(&reports)?
    };
    match &a.out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn open_out(path: &Option<PathBuf>) -> AnyResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn infer_cmd(a: PredictArgs) -> AnyResult<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let ds = load(&a.data)?;
    let pred = classify_batch(&model, ds.x.view(), &a.inference())?;
    pred.write_csv(open_out(&a.out)?)?;
    Ok(())
}

fn export_cmd(a: PredictArgs) -> AnyResult<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let ds = load(&a.data)?;
    let emb = export_embeddings(&model, ds.x.view(), &a.inference())?;
    write_embeddings_csv(&emb, open_out(&a.out)?)?;
    Ok(())
}

/// Per-metric maxima over the evaluated epochs of one training run.
fn scan_cell(ds: &FeatureDataset, config: TrainConfig, inference: InferenceConfig, every: usize) -> AnyResult<(f64, f64, f64)> {
    let eval = EvalSchedule {
        data: ds,
        inference,
        every,
    };
    let (_, history) = train_with(ds, config, Some(eval), |_| {})?;
    history
        .best_metrics()
        .ok_or_else(|| "no evaluation was recorded".into())
}

fn ablate_cmd(a: AblateArgs) -> AnyResult<()> {
    let ds = load(&a.train.data)?;
    if ds.labels.is_none() {
        return Err("ablation needs a labelled dataset".into());
    }
    let base = train_config(&a.train)?;
    let inference = a.train.eval.config();
    let mut out = open_out(&a.out)?;
    writeln!(out, "param,value,nmi,acc,ari,status")?;
    let name = a.param.as_str();
    for &value in &a.grid {
        let mut config = base.clone();
        match a.param {
            ScanParam::Lambda => config.loss.lambda = value,
            ScanParam::F2 => config.f2 = value,
            ScanParam::D => config.d = value as usize,
        }
        let every = a.train.eval_every.max(1);
        let cell = config
            .validate()
            .map_err(Into::into)
            .and_then(|_| scan_cell(&ds, config, inference, every));
        match cell {
            Ok((nmi, acc, ari)) => writeln!(out, "{name},{value},{nmi:.16e},{acc:.16e},{ari:.16e},ok")?,
            Err(e) => {
                eprintln!("{name}={value}: {e}");
                let reason = e.to_string().replace([',', '\n'], ";");
                writeln!(out, "{name},{value},NaN,NaN,NaN,failed: {reason}")?
            }
        }
        out.flush()?;
    }
    Ok(())
}
