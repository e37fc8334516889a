use std::path::{Path, PathBuf};

use serde::Serialize;

use pisa_core::crossfit::CrossfitConfig;
use pisa_core::inference::MPolicy;
use pisa_core::simbench::{run_study, Setting, StudyConfig, StudyMethod, StudyResult, StudyRow, SubgroupMode};
use pisa_core::Error;

use crate::args::{Cli, SimulateArgs};
use crate::output::{config_line, emit, opt_float};
use crate::{CliError, CliResult};

#[derive(Serialize)]
struct SimulateConfig<'a> {
    command: &'static str,
    threads: usize,
    #[serde(flatten)]
    study: &'a StudyConfig,
}

#[derive(Serialize)]
struct StudyReport<'a> {
    config: SimulateConfig<'a>,
    rows: &'a [StudyRow],
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty())
}

pub fn study_config(cli: &Cli, args: &SimulateArgs) -> CliResult<StudyConfig> {
    let settings = list(&args.setting)
        .map(|s| s.parse::<Setting>().map_err(usage))
        .collect::<CliResult<Vec<_>>>()?;
    let policies = list(&args.m)
        .map(|s| s.parse::<MPolicy>().map_err(|e: Error| usage(e)))
        .collect::<CliResult<Vec<_>>>()?;
    let mut methods = Vec::new();
    for name in list(&args.methods) {
        match name {
            "naive" => methods.push(StudyMethod::Naive),
            "sample-split" => methods.push(StudyMethod::SampleSplit),
            "oracle" => methods.push(StudyMethod::Oracle),
            "perturbation" => methods.extend(policies.iter().map(|&p| StudyMethod::Perturbation(p))),
            other => {
                return Err(usage(format!(
                    "unknown method `{other}` (expected naive, sample-split, oracle or perturbation)"
                )))
            }
        }
    }
    methods.dedup();
    let config = StudyConfig {
        settings,
        methods,
        reps: args.reps,
        n: args.n,
        c: args.c,
        draws: args.draws,
        alpha: args.alpha,
        n_mc: args.n_mc,
        crossfit: CrossfitConfig {
            folds: args.folds,
            clip_eps: args.clip_eps,
            ..CrossfitConfig::default()
        },
        subgroup: if args.predefined {
            SubgroupMode::Predefined
        } else {
            SubgroupMode::Estimated
        },
        seed: cli.seed,
        ..StudyConfig::default()
    };
    config.validate().map_err(usage)?;
    Ok(config)
}

fn records_csv(study: &StudyResult, header: &str) -> CliResult<Vec<u8>> {
    let mut buf = header.as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record([
            "setting",
            "rep",
            "method",
            "m_policy",
            "estimate",
            "lower",
            "upper",
            "m",
            "subgroup_size",
            "truth",
            "own_target",
            "covered",
            "selected_m",
            "error",
        ])?;
        for r in &study.records {
            let ci = r.interval.as_ref();
            w.write_record([
                r.setting.name().to_string(),
                r.rep.to_string(),
                r.method.method().name().to_string(),
                r.method.m_policy(),
                opt_float(ci.map(|c| c.estimate)),
                opt_float(ci.map(|c| c.lower)),
                opt_float(ci.map(|c| c.upper)),
                ci.and_then(|c| c.m).map(|m| m.to_string()).unwrap_or_default(),
                ci.map(|c| c.subgroup_size.to_string()).unwrap_or_default(),
                opt_float(r.truth),
                opt_float(r.own_target),
                r.covered.map(|b| b.to_string()).unwrap_or_default(),
                r.selected_m.map(|m| m.to_string()).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
    }
    Ok(buf)
}

pub fn run(cli: &Cli, args: &SimulateArgs) -> CliResult<()> {
    let config = study_config(cli, args)?;
    let study = run_study(&config)?;
    let echo = SimulateConfig {
        command: "simulate",
        threads: cli.threads,
        study: &config,
    };
    let header = config_line(&echo)?;
    let dir: PathBuf = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));

    let mut summary = header.as_bytes().to_vec();
    study.write_csv_to(&mut summary)?;
    emit(Some(&dir.join("study.csv")), &summary)?;

    let mut json = serde_json::to_string_pretty(&StudyReport {
        config: echo,
        rows: &study.rows,
    })?;
    json.push('\n');
    emit(Some(&dir.join("study.json")), json.as_bytes())?;

    emit(Some(&dir.join("replications.csv")), &records_csv(&study, &header)?)?;
    print_table(&study.rows, &dir);
    Ok(())
}

fn print_table(rows: &[StudyRow], dir: &Path) {
    eprintln!("setting method        m         ECP     CIL  failures");
    for r in rows {
        eprintln!(
            "{:<7} {:<13} {:<8} {:>5} {:>7} {:>9}",
            r.setting.name(),
            r.method.name(),
            r.m_policy,
            format!("{:.1}", r.ecp),
            format!("{:.3}", r.cil),
            r.failures
        );
    }
    eprintln!("wrote {}", dir.display());
}
