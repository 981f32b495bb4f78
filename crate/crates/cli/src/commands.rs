use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use owod::experiment::{
    eval_files, load_task_model, read_dataset, read_task_records, run_protocol, sweep as run_sweep,
    sweep_to_csv, synthesize, task_dir, trend, write_dataset, write_task, Manifest, RunConfig,
    SweepParam, MANIFEST_FILE, TRAIN_FILE,
};
use owod::inference::pipeline::evidence_batch;

use crate::plot::{self, Panel, Series};
use crate::table;

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.paths.data;
    let splits = synthesize(cfg)?;
    write_dataset(dir, cfg, &splits)?;
    println!(
        "wrote {} training and {} test scenes to {}",
        splits.train.len(),
        splits.test.len(),
        dir.display()
    );
    log::info!("annotations: {}", dir.join(TRAIN_FILE).display());
    Ok(())
}

/// Creates the run directory, refusing one that holds a different run.
/// Task outputs of an earlier run of the same command and configuration
/// are replaced.
fn prepare_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let run = cfg.paths.run.clone();
    let manifest_path = run.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)?;
        let existing: Manifest = serde_json::from_str(&text).context("reading run manifest")?;
        if existing.command != command || existing.config_hash != cfg.hash()? {
            bail!(
                "{} holds a `{}` run with a different configuration; choose another --out",
                run.display(),
                existing.command
            );
        }
        for t in 1.. {
            let dir = task_dir(&run, t);
            if !dir.exists() {
                break;
            }
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    } else if run.exists() && fs::read_dir(&run)?.next().is_some() {
        bail!("{} exists and is not a run directory", run.display());
    }
    fs::create_dir_all(&run).with_context(|| format!("creating {}", run.display()))?;
    Manifest::new(command, cfg, None)?.write(&manifest_path)?;
    fs::write(run.join("config.toml"), cfg.to_toml()?)?;
    Ok(run)
}

pub fn protocol(cfg: &RunConfig, last: Option<usize>, practical: bool) -> Result<()> {
    let command = if practical { "practical" } else { "protocol" };
    let splits = read_dataset(&cfg.paths.data, cfg)?;
    let run = prepare_run_dir(cfg, command)?;
    run_protocol(cfg, &splits, last, practical, |outcome| {
        write_task(&run, cfg, command, outcome)?;
        log::info!(
            "task {} written to {}",
            outcome.state.task,
            task_dir(&run, outcome.state.task).display()
        );
        Ok(())
    })?;
    report(cfg)
}

pub fn report(cfg: &RunConfig) -> Result<()> {
    let run = &cfg.paths.run;
    let records = read_task_records(run)?;
    if records.is_empty() {
        bail!("no task results under {}", run.display());
    }
    table::write_metrics(&run.join("metrics.csv"), &records)?;
    let points = trend(&records);
    let series = |name: &str, pick: fn(&(Option<f64>, Option<f64>)) -> Option<f64>| Series {
        name: name.into(),
        points: points
            .iter()
            .filter_map(|(&t, v)| pick(v).map(|y| (t as f64, 100.0 * y)))
            .collect(),
    };
    let map = series("known mAP", |v| v.0);
    let unknown = series("U-Recall", |v| v.1);
    let mut csv = String::from("task,map_both,u_recall\n");
    for (t, (m, u)) in &points {
        let f = |v: &Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        csv.push_str(&format!("{t},{},{}\n", f(m), f(u)));
    }
    fs::write(run.join("trend.csv"), csv)?;
    plot::panels(
        &run.join("trend.svg"),
        "task",
        &[
            Panel {
                title: "Known-class mAP@0.5".into(),
                y_label: "mAP (%)".into(),
                series: vec![map],
            },
            Panel {
                title: "Unknown recall@0.5".into(),
                y_label: "U-Recall (%)".into(),
                series: vec![unknown],
            },
        ],
        2,
    )?;
    table::print_metrics(&records);
    println!("metrics: {}", run.join("metrics.csv").display());
    Ok(())
}

pub fn sweep(
    cfg: &RunConfig,
    task: Option<usize>,
    param: SweepParam,
    grid: Option<&[f64]>,
) -> Result<()> {
    let run = &cfg.paths.run;
    let t = task.unwrap_or(cfg.sweep.task);
    let (checkpoint, gmms) = load_task_model(run, t)
        .with_context(|| format!("loading the task-{t} model from {}", run.display()))?;
    let registry = checkpoint
        .registry
        .context("checkpoint has no class registry")?;
    let grid = grid.unwrap_or(cfg.sweep.grid(param));
    owod::experiment::validate_grid(grid)?;
    let e = cfg.effective();
    let splits = read_dataset(&cfg.paths.data, cfg)?;
    let evidence = evidence_batch(
        &splits.test,
        &checkpoint.params,
        e.inference.proposals,
        e.train.exec,
    )?;
    let rows = run_sweep(
        &splits.test,
        &evidence,
        Some(&gmms),
        &registry,
        &e.inference,
        param,
        grid,
        cfg.eval.iou_threshold,
    )?;
    let name = param.name();
    fs::write(
        run.join(format!("sweep-{name}.csv")),
        sweep_to_csv(param, &rows),
    )?;
    Manifest::new(&format!("sweep {name}"), cfg, Some(t))?
        .write(&run.join(format!("sweep-{name}.manifest.json")))?;
    let line = |pick: fn(&owod::experiment::SweepRow) -> Option<f64>| Series {
        name: name.into(),
        points: rows
            .iter()
            .filter_map(|r| pick(r).map(|y| (r.value, y)))
            .collect(),
    };
    let panel = |title: &str, y: &str, s: Series| Panel {
        title: title.into(),
        y_label: y.into(),
        series: vec![s],
    };
    plot::panels(
        &run.join(format!("sweep-{name}.svg")),
        name,
        &[
            panel(
                "Unknown false positives",
                "count",
                line(|r| Some(r.unknown_fp as f64)),
            ),
            panel(
                "Unknown recall",
                "U-Recall (%)",
                line(|r| r.u_recall.map(|u| 100.0 * u)),
            ),
            panel(
                "Absolute open-set error",
                "A-OSE",
                line(|r| Some(r.a_ose as f64)),
            ),
            panel(
                "Delta-Error",
                "count",
                line(|r| r.delta_error.map(|d| d as f64)),
            ),
        ],
        2,
    )?;
    table::print_sweep(name, &rows);
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    task: Option<usize>,
    gt: &Path,
    dets: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let t = task.context("eval needs --task")?;
    let report = eval_files(gt, dets, &cfg.schedule()?, t, &cfg.eval)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.json"), json + "\n")?;
        Manifest::new("eval", cfg, Some(t))?.write(&dir.join("eval.manifest.json"))?;
    }
    Ok(())
}
