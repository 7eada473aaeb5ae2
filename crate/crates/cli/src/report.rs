//! Summary tables and plot-ready CSV files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use uasml_core::ensemble::{block_ranges, EnsembleDataset};
use uasml_core::io::{fmt_f64, read_rows, write_rows};
use uasml_core::mc_train::{summarize, EnsembleModel, Stat};
use uasml_core::uq::PredictionBand;
use uasml_core::{Channel, Trajectory};

use crate::config::PipelineConfig;
use crate::stages::{read_toml, write_csv, LagsFile, TuneRecord, ValidationFile};

fn copy(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to).with_context(|| format!("copying {}", from.display()))?;
    Ok(())
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Render every report file into `dir`; returns warnings.
pub fn write_report(cfg: &PipelineConfig, run: &Path, dir: &Path) -> Result<Vec<String>> {
    let mut warnings = Vec::new();
    let targets = cfg.target_channels()?;
    let mut md = String::new();
    writeln!(md, "# Run report: {}\n", cfg.name)?;

    // Calibration.
    let (header, rows) = read_rows(&run.join("mcmc/parameters.csv"))?;
    write_rows(&dir.join("parameter_summary.csv"), &header, &rows)?;
    writeln!(md, "## Normalized parameters\n")?;
    writeln!(md, "| parameter | mean | median | std | Geweke p |")?;
    writeln!(md, "|---|---|---|---|---|")?;
    for r in &rows {
        let num = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        writeln!(md, "| {} | {:.4} | {:.4} | {:.4} | {:.3} |", r[0], num(&r[1]), num(&r[2]), num(&r[3]), num(&r[5]))?;
    }
    copy(&run.join("mcmc/chain.csv"), &dir.join("parameter_walk.csv"))?;
    let regions = dir.join("regions");
    fs::create_dir_all(&regions)?;
    let mut names: Vec<_> = fs::read_dir(run.join("mcmc"))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.starts_with("region_"))
        .collect();
    names.sort();
    for n in &names {
        copy(&run.join("mcmc").join(n), &regions.join(n))?;
    }

    // Excitation.
    copy(&run.join("excite/schedule.csv"), &dir.join("lhs_inputs.csv"))?;
    copy(&run.join("excite/correlation.csv"), &dir.join("input_correlation.csv"))?;
    let clean = Trajectory::read_csv(&run.join("excite/experiment_clean.csv"))?;
    let noisy = Trajectory::read_csv(&run.join("excite/experiment.csv"))?;
    let mut cols = vec!["time".to_string()];
    let mut series = vec![clean.times.clone()];
    for t in &targets {
        cols.push(format!("{t}_clean"));
        series.push(clean.series(*t));
        cols.push(format!("{t}_measured"));
        series.push(noisy.series(*t));
    }
    let rows: Vec<Vec<f64>> = (0..clean.len()).map(|k| series.iter().map(|s| s[k]).collect()).collect();
    write_csv(&dir.join("synthetic_outputs.csv"), &cols.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;

    // Lags and architectures.
    let lags: LagsFile = read_toml(&run.join("lipschitz/lags.toml"))?;
    writeln!(md, "\n## Networks\n")?;
    writeln!(md, "| target | source | lags (u, y) | hidden | activation | learning rate | parameters |")?;
    writeln!(md, "|---|---|---|---|---|---|---|")?;
    let mut arch_rows = Vec::new();
    for t in &targets {
        copy(&run.join(format!("lipschitz/surface_{t}.csv")), &dir.join(format!("lipschitz_{t}.csv")))?;
        let rec: TuneRecord = read_toml(&run.join(format!("tune/best_{t}.toml")))?;
        let used = lags.targets.get(t.name()).map(|l| l.used).unwrap_or_default();
        let widths = rec.spec.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(";");
        let act = rec.spec.activations.first().map_or("linear", |a| a.name());
        arch_rows.push(vec![
            t.name().to_string(),
            rec.source.clone(),
            used.input_lags.to_string(),
            used.output_lags.to_string(),
            rec.spec.hidden.len().to_string(),
            widths.clone(),
            act.to_string(),
            fmt_f64(rec.spec.learning_rate),
            rec.parameters.to_string(),
        ]);
        writeln!(
            md,
            "| {t} | {} | ({}, {}) | [{}] | {act} | {} | {} |",
            rec.source, used.input_lags, used.output_lags, widths, rec.spec.learning_rate, rec.parameters
        )?;
        let trials = run.join(format!("tune/trials_{t}.csv"));
        if trials.exists() {
            copy(&trials, &dir.join(format!("tuner_trials_{t}.csv")))?;
        }
    }
    let arch_header = strings(&[
        "target",
        "source",
        "input_lags",
        "output_lags",
        "layers",
        "widths",
        "activation",
        "learning_rate",
        "parameters",
    ]);
    write_rows(&dir.join("network_architectures.csv"), &arch_header, &arch_rows)?;

    // Monte Carlo training.
    writeln!(md, "\n## Ensemble metrics (scaled targets)\n")?;
    writeln!(md, "| target | metric | min | max | median | std |")?;
    writeln!(md, "|---|---|---|---|---|---|")?;
    let ens = EnsembleDataset::read_dir(&run.join("propagate"))?;
    let mut metric_rows = Vec::new();
    for t in &targets {
        let model = EnsembleModel::read_dir(&run.join(format!("mctrain/{t}")))?;
        let s = summarize(&model)?;
        let entries: [(&str, Stat); 5] = [
            ("test_mae", s.test_mae),
            ("validation_mae", s.val_mae),
            ("test_mse", s.test_mse),
            ("validation_mse", s.val_mse),
            ("epochs", s.epochs),
        ];
        for (name, st) in entries {
            metric_rows.push(vec![
                t.name().to_string(),
                name.to_string(),
                fmt_f64(st.min),
                fmt_f64(st.max),
                fmt_f64(st.median),
                fmt_f64(st.std),
            ]);
            writeln!(md, "| {t} | {name} | {:.3e} | {:.3e} | {:.3e} | {:.3e} |", st.min, st.max, st.median, st.std)?;
        }
        for h in ["epochs", "test_mse", "test_mae"] {
            copy(&run.join(format!("mctrain/{t}/hist_{h}.csv")), &dir.join(format!("histogram_{h}_{t}.csv")))?;
        }
        if let Some(m) = model.members.first() {
            let h = &m.model.history;
            let rows: Vec<Vec<f64>> = (0..h.len())
                .map(|e| vec![e as f64, h.train_mse[e], h.val_mse[e], h.train_mae[e], h.val_mae[e]])
                .collect();
            write_csv(
                &dir.join(format!("training_history_{t}.csv")),
                &["epoch", "train_mse", "val_mse", "train_mae", "val_mae"],
                &rows,
            )?;
        }
        split_data(&ens, *t, &dir.join(format!("split_data_{t}.csv")))?;
        copy(&run.join(format!("datasize/{t}.csv")), &dir.join(format!("datasize_{t}.csv")))?;
    }
    write_rows(
        &dir.join("training_metrics.csv"),
        &strings(&["target", "metric", "min", "max", "median", "std"]),
        &metric_rows,
    )?;

    // Validation.
    let v: ValidationFile = read_toml(&run.join("validate/overlap.toml"))?;
    writeln!(md, "\n## Band overlap on the test split\n")?;
    writeln!(md, "| target | overlapping | samples | fraction | threshold | verdict |")?;
    writeln!(md, "|---|---|---|---|---|---|")?;
    for t in &targets {
        let ai = PredictionBand::read_csv(&run.join(format!("validate/band_ai_{t}.csv")), cfg.validation.level)?;
        let ph = PredictionBand::read_csv(&run.join(format!("validate/band_physical_{t}.csv")), cfg.validation.level)?;
        let rows: Vec<Vec<f64>> = (0..ai.len())
            .map(|j| vec![ai.times[j], ph.lower[j], ph.center[j], ph.upper[j], ai.lower[j], ai.center[j], ai.upper[j]])
            .collect();
        write_csv(
            &dir.join(format!("bands_{t}.csv")),
            &["time", "physical_lower", "physical_center", "physical_upper", "ai_lower", "ai_center", "ai_upper"],
            &rows,
        )?;
        if let Some(r) = v.targets.get(t.name()) {
            writeln!(
                md,
                "| {t} | {} | {} | {:.4} | {} | {} |",
                r.overlapping,
                r.samples,
                r.fraction,
                r.threshold,
                if r.pass { "pass" } else { "fail" }
            )?;
            if !r.pass {
                warnings.push(format!("{t}: band overlap {:.4} is below {}", r.fraction, r.threshold));
            }
        }
    }
    fs::write(dir.join("summary.md"), md)?;
    Ok(warnings)
}

/// Member 0 target series tagged by split.
fn split_data(ens: &EnsembleDataset, target: Channel, path: &Path) -> Result<()> {
    let Some(member) = ens.members.first() else { return Ok(()) };
    let Some(split) = &ens.split else { return Ok(()) };
    let blocks = block_ranges(&member.trajectory.times, &ens.schedule);
    let y = member.trajectory.series(target);
    let mut tag = vec![""; y.len()];
    for (name, list) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
        for &b in list.iter() {
            for k in blocks[b].clone() {
                tag[k] = name;
            }
        }
    }
    let rows: Vec<Vec<String>> = (0..y.len())
        .map(|k| vec![fmt_f64(member.trajectory.times[k]), fmt_f64(y[k]), tag[k].to_string()])
        .collect();
    write_rows(path, &strings(&["time", "value", "split"]), &rows)?;
    Ok(())
}
