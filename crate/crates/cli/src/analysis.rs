//! The `analyze` and `curve` commands share one pipeline: nuisances and the
//! CATE model are fitted once, then every threshold is evaluated on them.

use serde::Serialize;

use pisa_core::crossfit::{estimate_nuisances, CrossfitConfig};
use pisa_core::data::{format_float, load_dataset_csv, Dataset, RngStream};
use pisa_core::inference::{
    default_m_grid, naive_ci, perturbation_ci, sample_split_ci, select_m_adaptive, select_subset, AdaptiveConfig,
    ConfidenceInterval, IdentificationConfig, MPolicy, MSelection, Method,
};
use pisa_core::learners::{Bandwidth, LearnerSpec};
use pisa_core::subgroup::{
    boundary_diagnostic, fit_cate_dr, fit_cate_tlearner, load_blackbox, CateModel, SubgroupSpec,
};
use pisa_core::Error;

use crate::args::{AnalyzeArgs, CateKind, Cli, CurveArgs, OutcomeKind, PipelineArgs};
use crate::output::{config_line, emit, opt_float};
use crate::{CliError, CliResult};

const NUISANCE_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;
const SUBSET_STREAM: u64 = 7;
const DRAWS_STREAM: u64 = 8;

/// Fully resolved pipeline settings, echoed into every artifact.
#[derive(Clone, Debug, Serialize)]
pub struct PipelineConfig {
    pub data: String,
    pub cate: String,
    pub cate_learner: Option<LearnerSpec>,
    pub predictions: Option<String>,
    pub m: String,
    #[serde(rename = "M")]
    pub draws: usize,
    pub alpha: f64,
    pub methods: Vec<Method>,
    pub crossfit: CrossfitConfig,
    pub adaptive: AdaptiveConfig,
    pub boundary_bandwidth: f64,
    pub seed: u64,
    pub threads: usize,
}

#[derive(Serialize)]
struct AnalyzeConfig<'a> {
    command: &'static str,
    c: f64,
    write_predictions: Option<String>,
    #[serde(flatten)]
    pipeline: &'a PipelineConfig,
}

#[derive(Serialize)]
struct CurveConfig<'a> {
    command: &'static str,
    c_grid: &'a str,
    c_values: &'a [f64],
    #[serde(flatten)]
    pipeline: &'a PipelineConfig,
}

fn parse_methods(list: &str) -> CliResult<Vec<Method>> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m = match item {
            "perturbation" => Method::Perturbation,
            "naive" => Method::Naive,
            "sample-split" => Method::SampleSplit,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown method `{other}` (expected perturbation, naive or sample-split)"
                )))
            }
        };
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("no method requested".into()));
    }
    Ok(out)
}

fn cate_learner(args: &PipelineArgs) -> Option<LearnerSpec> {
    match args.cate {
        CateKind::Linear => Some(LearnerSpec::Linear),
        CateKind::Spline => Some(LearnerSpec::Spline {
            degree: 3,
            n_knots: args.knots,
        }),
        CateKind::Tree => Some(LearnerSpec::Tree {
            min_leaf: args.min_leaf,
            max_depth: args.max_depth,
        }),
        CateKind::Localpoly => Some(LearnerSpec::LocalPoly {
            bandwidth: Bandwidth::Span(args.span),
            degree: 2,
        }),
        CateKind::TLearner | CateKind::External => None,
    }
}

fn cate_name(kind: CateKind) -> &'static str {
    match kind {
        CateKind::Linear => "linear",
        CateKind::Spline => "spline",
        CateKind::Tree => "tree",
        CateKind::Localpoly => "localpoly",
        CateKind::TLearner => "t-learner",
        CateKind::External => "external",
    }
}

pub fn resolve(cli: &Cli, args: &PipelineArgs) -> CliResult<(PipelineConfig, MPolicy)> {
    let policy: MPolicy = args.m.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let methods = parse_methods(&args.methods)?;
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Usage(format!("--alpha {} must lie in (0, 1)", args.alpha)));
    }
    if methods.contains(&Method::Perturbation) && args.draws < 100 {
        return Err(CliError::Usage(format!("--M {} below the minimum of 100", args.draws)));
    }
    if !(args.boundary_bandwidth > 0.0) {
        return Err(CliError::Usage("--boundary-bandwidth must be positive".into()));
    }
    match (args.cate, &args.predictions) {
        (CateKind::External, None) => return Err(CliError::Usage("--cate external requires --predictions".into())),
        (CateKind::External, Some(_)) => {}
        (_, Some(_)) => return Err(CliError::Usage("--predictions is only used with --cate external".into())),
        _ => {}
    }
    let learner = cate_learner(args);
    if learner.is_none() && methods.contains(&Method::SampleSplit) {
        return Err(CliError::Usage(format!(
            "sample-split refits the CATE model and is unavailable with --cate {}",
            cate_name(args.cate)
        )));
    }
    let outcome_learner = match args.outcome {
        OutcomeKind::Linear => LearnerSpec::Linear,
        OutcomeKind::Spline => LearnerSpec::Spline {
            degree: 3,
            n_knots: args.knots,
        },
    };
    let config = PipelineConfig {
        data: args.data.display().to_string(),
        cate: cate_name(args.cate).into(),
        cate_learner: learner,
        predictions: args.predictions.as_ref().map(|p| p.display().to_string()),
        m: policy.label(),
        draws: args.draws,
        alpha: args.alpha,
        methods,
        crossfit: CrossfitConfig {
            folds: args.folds,
            clip_eps: args.clip_eps,
            outcome_learner,
            propensity_learner: LearnerSpec::logistic(),
        },
        adaptive: AdaptiveConfig::default(),
        boundary_bandwidth: args.boundary_bandwidth,
        seed: cli.seed,
        threads: cli.threads,
    };
    Ok((config, policy))
}

/// Dataset, pseudo-outcomes and CATE model shared by every threshold.
pub struct Fitted {
    pub data: Dataset,
    pub psi: Vec<f64>,
    pub cate: CateModel,
    root: RngStream,
}

pub fn fit(config: &PipelineConfig, args: &PipelineArgs) -> CliResult<Fitted> {
    let data = load_dataset_csv(&args.data)?;
    let root = RngStream::new(config.seed);
    let nuis = estimate_nuisances(&data, &config.crossfit, &mut root.child(NUISANCE_STREAM))?;
    let cate = match (&config.cate_learner, &args.predictions) {
        (Some(learner), _) => fit_cate_dr(&data, &nuis, learner)?,
        (None, Some(path)) => load_blackbox(path, &data)?,
        (None, None) => fit_cate_tlearner(&data, &config.crossfit.outcome_learner)?,
    };
    Ok(Fitted {
        data,
        psi: nuis.psi,
        cate,
        root,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundaryReport {
    pub bandwidth: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodFailure {
    pub method: Method,
    pub error: String,
}

/// Everything computed at one threshold.
#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub c: f64,
    pub subgroup_size: usize,
    pub boundary_diagnostic: BoundaryReport,
    pub selected_m: Option<usize>,
    pub m_selection: Option<MSelection>,
    pub intervals: Vec<ConfidenceInterval>,
    pub failures: Vec<MethodFailure>,
}

fn perturbation(
    fitted: &Fitted,
    spec: &SubgroupSpec,
    c: f64,
    policy: MPolicy,
    config: &PipelineConfig,
) -> pisa_core::Result<(ConfidenceInterval, usize, Option<MSelection>)> {
    let n = fitted.data.n();
    let (m, selection) = match policy.resolve(n) {
        Some(m) => (m, None),
        None => {
            let sel = select_m_adaptive(
                fitted.cate.insample_values(),
                &fitted.psi,
                c,
                &default_m_grid(n),
                &config.adaptive,
            )?;
            (sel.m, Some(sel))
        }
    };
    let stream = fitted.root.child(1000 + m as u64);
    let subset = select_subset(n, m, &mut stream.child(SUBSET_STREAM))?;
    let ci = perturbation_ci(
        &fitted.psi,
        &spec.member,
        &subset,
        config.draws,
        config.alpha,
        &stream.child(DRAWS_STREAM),
    )?;
    Ok((ci, m, selection))
}

pub fn evaluate(fitted: &Fitted, c: f64, policy: MPolicy, config: &PipelineConfig) -> CliResult<Evaluation> {
    let values = fitted.cate.insample_values();
    let spec = SubgroupSpec::from_values(values, c);
    let mut eval = Evaluation {
        c,
        subgroup_size: spec.size,
        boundary_diagnostic: BoundaryReport {
            bandwidth: config.boundary_bandwidth,
            fraction: boundary_diagnostic(values, c, config.boundary_bandwidth)?,
        },
        selected_m: None,
        m_selection: None,
        intervals: Vec::new(),
        failures: Vec::new(),
    };
    if spec.size == 0 {
        return Ok(eval);
    }
    for &method in &config.methods {
        let result = match method {
            Method::Perturbation => perturbation(fitted, &spec, c, policy, config).map(|(ci, m, sel)| {
                eval.selected_m = Some(m);
                eval.m_selection = sel;
                ci
            }),
            Method::Naive => naive_ci(&fitted.psi, &spec.member, config.alpha),
            Method::SampleSplit => {
                let ident = IdentificationConfig {
                    crossfit: config.crossfit.clone(),
                    cate_learner: config.cate_learner.clone().expect("checked in resolve"),
                    c,
                    alpha: config.alpha,
                };
                sample_split_ci(&fitted.data, &ident, &mut fitted.root.child(SPLIT_STREAM)).map(|s| s.interval)
            }
            Method::Oracle => unreachable!("oracle needs a data generator"),
        };
        match result {
            Ok(ci) => eval.intervals.push(ci),
            Err(e) => eval.failures.push(MethodFailure {
                method,
                error: e.to_string(),
            }),
        }
    }
    Ok(eval)
}

#[derive(Serialize)]
struct AnalyzeReport<'a> {
    config: AnalyzeConfig<'a>,
    n: usize,
    p: usize,
    treated: usize,
    control: usize,
    cate_source: &'static str,
    #[serde(flatten)]
    evaluation: Evaluation,
}

pub fn run_analyze(cli: &Cli, args: &AnalyzeArgs) -> CliResult<()> {
    let (config, policy) = resolve(cli, &args.pipeline)?;
    let fitted = fit(&config, &args.pipeline)?;
    let evaluation = evaluate(&fitted, args.c, policy, &config)?;
    if evaluation.subgroup_size == 0 {
        let max = fitted.cate.insample_values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::EmptySubgroup(format!(
            "no row has estimated effect >= {} (largest estimated effect {max}); lower --c",
            args.c
        ))
        .into());
    }
    let (control, treated) = fitted.data.arm_counts();
    let report = AnalyzeReport {
        config: AnalyzeConfig {
            command: "analyze",
            c: args.c,
            write_predictions: args.write_predictions.as_ref().map(|p| p.display().to_string()),
            pipeline: &config,
        },
        n: fitted.data.n(),
        p: fitted.data.p(),
        treated,
        control,
        cate_source: fitted.cate.source().name(),
        evaluation,
    };
    if let Some(path) = &args.write_predictions {
        fitted.cate.write_predictions(path)?;
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    emit(cli.out.as_deref(), text.as_bytes())
}

/// Parses `start:stop:step` into `start + k * step` for every k reaching at most `stop`.
pub fn parse_grid(spec: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || CliError::Usage(format!("--c-grid `{spec}` must be start:stop:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<CliResult<_>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    if !(start.is_finite() && stop.is_finite() && step.is_finite()) || step <= 0.0 || stop < start {
        return Err(CliError::Usage(format!(
            "--c-grid `{spec}` needs finite values, step > 0 and stop >= start"
        )));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    if count > 100_000 {
        return Err(CliError::Usage(format!("--c-grid `{spec}` has more than 100000 points")));
    }
    Ok((0..count).map(|k| start + k as f64 * step).collect())
}

pub fn run_curve(cli: &Cli, args: &CurveArgs) -> CliResult<()> {
    let grid = parse_grid(&args.c_grid)?;
    let (config, policy) = resolve(cli, &args.pipeline)?;
    let fitted = fit(&config, &args.pipeline)?;
    let echo = CurveConfig {
        command: "curve",
        c_grid: &args.c_grid,
        c_values: &grid,
        pipeline: &config,
    };
    let mut buf = config_line(&echo)?.into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["c", "estimate", "lower", "upper", "method", "subgroup_size", "m", "status"])?;
        for &c in &grid {
            let eval = evaluate(&fitted, c, policy, &config)?;
            for &method in &config.methods {
                let ci = eval.intervals.iter().find(|ci| ci.method == method);
                let status = if eval.subgroup_size == 0 {
                    "empty-subgroup".to_string()
                } else if let Some(f) = eval.failures.iter().find(|f| f.method == method) {
                    format!("failed: {}", f.error)
                } else {
                    "ok".to_string()
                };
                w.write_record([
                    format_float(c),
                    opt_float(ci.map(|ci| ci.estimate)),
                    opt_float(ci.map(|ci| ci.lower)),
                    opt_float(ci.map(|ci| ci.upper)),
                    method.name().to_string(),
                    eval.subgroup_size.to_string(),
                    ci.and_then(|ci| ci.m).map(|m| m.to_string()).unwrap_or_default(),
                    status,
                ])?;
            }
        }
        w.flush()?;
    }
    emit(cli.out.as_deref(), &buf)
}
