use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qrnn::config::{RunConfig, TaskData};
use qrnn::data::BatchSource;
use qrnn::diagnostics::{stability_sweep, write_traces_csv};
use qrnn::quantize::{Method, PackedTensor};
use qrnn::train::{evaluate, Checkpoint, EvalMode, Metric, MetricsLog, Trainer};

use crate::{Common, Mode, SplitArg};

const DEFAULT_OUT: &str = "run";

/// Loads the config file and applies flag overrides.
fn load_config(common: &Common) -> Result<RunConfig> {
    let path = common.config.as_ref().context("--config is required")?;
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    apply_overrides(&mut cfg, common);
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common) {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn default_checkpoint(common: &Common) -> Result<PathBuf> {
    let dir = match (&common.out, &common.config) {
        (Some(out), _) => out.clone(),
        (None, Some(_)) => load_config(common)?.out_dir.unwrap_or_else(|| DEFAULT_OUT.into()),
        (None, None) => bail!("give --checkpoint, --out or --config"),
    };
    Ok(dir.join("best.qrnn"))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn summary(metrics: &[Metric], split: &str) -> String {
    metrics
        .iter()
        .filter(|m| m.split == split)
        .map(|m| format!("{}={:.4}", m.kind.name(), m.value))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn train(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    let dir = out_dir(&cfg)?;
    cfg.out_dir = Some(dir.clone());
    let resolved = cfg.to_toml()?;
    fs::write(dir.join("config.toml"), &resolved)?;

    let data = cfg.load_data().context("loading data")?;
    let net = cfg.build_network(&data)?;
    let tcfg = cfg.train_config();
    let precision = tcfg.precision;
    let mut trainer = Trainer::new(net, tcfg, cfg.task)?;
    let mut log = MetricsLog::create(&dir.join("metrics.csv"), cfg.train.log_wallclock)?;
    eprintln!(
        "training {:?} cell ({} hidden) on {} sequences, {} validation",
        cfg.model.kind,
        cfg.model.hidden_size,
        data.train().len(),
        data.valid().len()
    );
    let report = trainer.fit_with(data.train(), data.valid(), &mut log, |epoch, metrics| {
        eprintln!(
            "epoch {epoch}: train {} | valid_full {} | valid_quant {}",
            summary(metrics, "train"),
            summary(metrics, "valid_full"),
            summary(metrics, "valid_quant")
        );
    })?;

    Checkpoint::new(trainer.net.clone(), precision, resolved.clone())
        .with_state(trainer.state.clone())
        .save(&dir.join("last.qrnn"))?;
    Checkpoint::new(report.best, precision, resolved).save(&dir.join("best.qrnn"))?;

    let monitored = cfg.task.monitored().name();
    println!("epochs={}", report.epochs);
    println!("stopped_early={}", report.stopped_early);
    println!("best_epoch={}", report.best_epoch);
    if let Some(v) = report.best_value {
        println!("best_{monitored}={v}");
    }
    eprintln!("wrote {}", dir.display());
    Ok(())
}

pub fn eval(common: &Common, checkpoint: Option<&Path>, mode: Mode, split: SplitArg) -> Result<()> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => default_checkpoint(common)?,
    };
    let ck = load_checkpoint(&path)?;
    let cfg = match &common.config {
        Some(_) => load_config(common)?,
        None => {
            let mut cfg = RunConfig::from_toml_str(&ck.config).context("config stored in checkpoint")?;
            apply_overrides(&mut cfg, common);
            cfg
        }
    };
    let data = cfg.load_data().context("loading data")?;
    if data.input_size() != ck.network.cell.input_size || data.output_size() != ck.network.output_size {
        bail!("checkpoint does not match the data (input or output size differs)");
    }
    let source: &dyn BatchSource = match (split, &data) {
        (SplitArg::Valid, _) => data.valid(),
        (SplitArg::Test, TaskData::CharLm { test, .. }) => test,
        (SplitArg::Test, TaskData::SeqClassify { .. }) => bail!("classification data has no test split"),
    };
    let modes: &[(EvalMode, &str)] = match mode {
        Mode::Full => &[(EvalMode::FullPrecision, "full")],
        Mode::Quantized => &[(EvalMode::DeterministicQuantized, "quantized")],
        Mode::Both => &[(EvalMode::FullPrecision, "full"), (EvalMode::DeterministicQuantized, "quantized")],
    };
    let mut lines = Vec::new();
    let mut results = Vec::new();
    for &(m, name) in modes {
        let stats = evaluate(&ck.network, source, m, cfg.train.batch_size)?;
        let metrics = Metric::from_stats(cfg.task, &stats, name, 0);
        for metric in &metrics {
            lines.push(format!("{name}_{}={}", metric.kind.name(), metric.value));
        }
        results.push(metrics);
    }
    if let [full, quant] = results.as_slice() {
        for (a, b) in full.iter().zip(quant) {
            lines.push(format!("gap_{}={}", a.kind.name(), b.value - a.value));
        }
    }
    for l in &lines {
        println!("{l}");
    }
    if let Some(out) = &common.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("eval.txt"), lines.join("\n") + "\n")?;
    }
    Ok(())
}

pub fn diagnose(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(&cfg)?;
    let mut sweep = cfg.diagnostics.sweep.clone();
    sweep.seed = cfg.seed;
    let mut cell = cfg.cell(cfg.diagnostics.input_size);
    cell.scope = Default::default();
    let traces = stability_sweep(&cell, &sweep)?;
    let path = dir.join("stability.csv");
    let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
    write_traces_csv(&traces, &mut f)?;
    f.flush()?;
    for t in &traces {
        println!(
            "{} mean_radius={:.4} steps_above_1={:.2} final_growth={:.4e} max_growth={:.4e}",
            t.label,
            t.mean_radius(),
            t.fraction_above(1.0),
            t.final_growth(),
            t.max_growth()
        );
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn pack(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => default_checkpoint(common)?,
    };
    let ck = load_checkpoint(&path)?;
    let dir = match &common.out {
        Some(out) => out.clone(),
        None => path.with_extension("packed"),
    };
    fs::create_dir_all(&dir)?;
    let (mut packed_bytes, mut f32_bytes) = (0usize, 0usize);
    for g in &ck.network.groups {
        let Some(q) = g.quantizer.filter(|q| q.method != Method::Identity) else {
            eprintln!("skipping `{}`: not quantized", g.name);
            continue;
        };
        let packed = PackedTensor::pack(&g.quantized, &q).with_context(|| format!("packing `{}`", g.name))?;
        if packed.unpack()?.data() != g.quantized.data() {
            bail!("`{}` does not round-trip", g.name);
        }
        let bytes = packed.to_bytes();
        fs::write(dir.join(format!("{}.qpkt", g.name)), &bytes)?;
        let raw = g.quantized.len() * 4;
        println!("{} {} bytes={} f32_bytes={}", g.name, q.label(), bytes.len(), raw);
        packed_bytes += bytes.len();
        f32_bytes += raw;
    }
    if packed_bytes == 0 {
        eprintln!("no quantized groups in {}", path.display());
        return Ok(());
    }
    println!("packed_bytes={packed_bytes}");
    println!("f32_bytes={f32_bytes}");
    println!("ratio={}", f32_bytes as f64 / packed_bytes as f64);
    Ok(())
}
