use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use allocrisk::allocator::{optimize, GroupSizeConstraint};
use allocrisk::balance::{equal_split_condition, EqualSplitOptions, EqualSplitReport};
use allocrisk::model::{decompose_prior, Allocation, CovariateMatrix};
use allocrisk::oracle::risk_direct_scaled;
use allocrisk::risk::{risk_for_prior, risk_pseudo_sample, RiskBreakdown};
use allocrisk::sweep::{flat_sweep, mahalanobis_identity_sweep, oracle_sweep, pseudo_sample_sweep, SweepReport};
use allocrisk::{AllocError, PriorSpec};
use allocrisk_service::api::{BatchBody, CreateSessionRequest, OutcomesBody, Quota};
use allocrisk_service::{ServiceConfig, SessionStore};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cli::{
    AllocateArgs, CheckArgs, Command, OutputArgs, PriorArgs, RiskArgs, SearchArgs, SelftestArgs, ServeArgs,
    SessionArgs, SessionOp,
};
use crate::error::{CliError, EXIT_ERROR, EXIT_OK};
use crate::input::{base_config, load_covariates, read_json, OutputFormat, RunConfig};
use crate::report::{num, opt, write_report, Report, Summary};

/// Agreement required of the pseudo-sample path in `risk --verify`.
pub const PSEUDO_SAMPLE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputEcho {
    pub path: String,
    pub n: usize,
    pub p: usize,
}

impl InputEcho {
    fn new(path: &Path, x: &CovariateMatrix) -> Self {
        Self {
            path: path.display().to_string(),
            n: x.n(),
            p: x.p(),
        }
    }
}

/// 1-based row numbers in each arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRows {
    pub control: Vec<usize>,
    pub treatment: Vec<usize>,
}

impl ArmRows {
    pub fn of(w: &Allocation) -> Self {
        let rows = |arm: u8| {
            w.as_slice()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == arm)
                .map(|(i, _)| i + 1)
                .collect()
        };
        Self {
            control: rows(0),
            treatment: rows(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocateReport {
    pub input: InputEcho,
    pub config: RunConfig,
    pub e_sigma2: f64,
    pub allocation: Allocation,
    pub arms: ArmRows,
    pub risk: RiskBreakdown,
    pub ties: Vec<Allocation>,
    pub evaluated: u64,
    pub skipped: u64,
    pub label_swap_dedup: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equal_split: Option<EqualSplitReport>,
}

fn breakdown_fields(r: &RiskBreakdown) -> Vec<(&'static str, String)> {
    vec![
        ("risk", num(r.risk)),
        ("size_term", num(r.size_term)),
        ("imbalance_quad", num(r.imbalance_quad)),
        ("mahalanobis", opt(r.mahalanobis)),
        ("e_sigma2", num(r.e_sigma2)),
    ]
}

impl Summary for AllocateReport {
    fn summary(&self) -> Vec<(&'static str, String)> {
        let mut f = vec![
            ("n", self.input.n.to_string()),
            ("p", self.input.p.to_string()),
            ("allocation", self.allocation.to_string().replace(',', "")),
            ("n_c", self.allocation.n_c().to_string()),
            ("n_t", self.allocation.n_t().to_string()),
        ];
        f.extend(breakdown_fields(&self.risk));
        f.push(("ties", self.ties.len().to_string()));
        f.push(("evaluated", self.evaluated.to_string()));
        if let Some(e) = &self.equal_split {
            f.push(("min_qform", num(e.min_qform)));
            f.push(("min_qform_uncentered", opt(e.min_qform_uncentered)));
            f.push(("condition_met", e.condition_met.to_string()));
        }
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoSampleCheck {
    pub applicable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agrees: Option<bool>,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    /// Risk by direct inversion of the posterior precision.
    pub oracle_risk: f64,
    pub oracle_rel_delta: f64,
    pub pseudo_sample: PseudoSampleCheck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub input: InputEcho,
    pub config: RunConfig,
    pub e_sigma2: f64,
    pub allocation: Allocation,
    pub risk: RiskBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<Verification>,
}

impl Summary for RiskReport {
    fn summary(&self) -> Vec<(&'static str, String)> {
        let mut f = vec![
            ("n", self.input.n.to_string()),
            ("p", self.input.p.to_string()),
            ("allocation", self.allocation.to_string().replace(',', "")),
        ];
        f.extend(breakdown_fields(&self.risk));
        let v = self.verification.as_ref();
        f.push(("oracle_rel_delta", opt(v.map(|v| v.oracle_rel_delta))));
        f.push(("pseudo_sample_rel_delta", opt(v.and_then(|v| v.pseudo_sample.rel_delta))));
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub input: InputEcho,
    pub options: EqualSplitOptions,
    #[serde(flatten)]
    pub result: EqualSplitReport,
}

impl Summary for CheckReport {
    fn summary(&self) -> Vec<(&'static str, String)> {
        let r = &self.result;
        vec![
            ("n", self.input.n.to_string()),
            ("p", self.input.p.to_string()),
            ("threshold", num(r.threshold)),
            ("min_qform", num(r.min_qform)),
            ("witness", r.witness.to_string().replace(',', "")),
            ("condition_met", r.condition_met.to_string()),
            ("min_qform_uncentered", opt(r.min_qform_uncentered)),
            ("optimal_is_equal", r.optimal_is_equal.map(|b| b.to_string()).unwrap_or_default()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub sweeps: Vec<SweepReport>,
    pub passed: bool,
}

impl Summary for SelftestReport {
    fn summary(&self) -> Vec<(&'static str, String)> {
        let mut f = vec![("seed", self.seed.to_string()), ("passed", self.passed.to_string())];
        for s in &self.sweeps {
            let name: &'static str = match s.name.as_str() {
                "general_vs_direct" => "general_vs_direct_max_rel_dev",
                "pseudo_sample_vs_general" => "pseudo_sample_vs_general_max_rel_dev",
                "flat_vs_direct" => "flat_vs_direct_max_rel_dev",
                _ => "mahalanobis_identity_max_rel_dev",
            };
            f.push((name, num(s.max_rel_dev)));
        }
        f
    }
}

impl Summary for Value {
    fn summary(&self) -> Vec<(&'static str, String)> {
        Vec::new()
    }
}

/// Runs a parsed command, writing its report to `out` unless the command
/// names an output file. Returns the process exit code.
pub fn run(command: Command, out: &mut dyn Write) -> Result<i32, CliError> {
    match command {
        Command::Allocate(a) => {
            let (report, format) = allocate(&a)?;
            emit(out, &a.output, &Report::new("allocate", report), format)?;
            Ok(EXIT_OK)
        }
        Command::Risk(a) => {
            let (report, format) = risk(&a)?;
            emit(out, &a.output, &Report::new("risk", report), format)?;
            Ok(EXIT_OK)
        }
        Command::Check(a) => {
            let report = check(&a)?;
            let format = a.output.format.unwrap_or_default();
            emit(out, &a.output, &Report::new("check", report), format)?;
            Ok(EXIT_OK)
        }
        Command::Selftest(a) => {
            let report = selftest(&a)?;
            let passed = report.passed;
            let format = a.output.format.unwrap_or_default();
            emit(out, &a.output, &Report::new("selftest", report), format)?;
            Ok(if passed { EXIT_OK } else { EXIT_ERROR })
        }
        Command::Session(a) => {
            let value = session(&a)?;
            let target = OutputArgs {
                format: None,
                output: a.output.clone(),
            };
            emit(out, &target, &Report::new("session", value), OutputFormat::Json)?;
            Ok(EXIT_OK)
        }
        Command::Serve(a) => serve(&a).map(|_| EXIT_OK),
    }
}

fn emit<T: Serialize + Summary>(
    out: &mut dyn Write,
    target: &OutputArgs,
    report: &Report<T>,
    format: OutputFormat,
) -> Result<(), CliError> {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
    match &target.output {
        Some(path) => {
            let file = File::create(path).map_err(io(path))?;
            let mut w = BufWriter::new(file);
            write_report(&mut w, report, format).map_err(io(path))?;
            w.flush().map_err(io(path))
        }
        None => write_report(out, report, format).map_err(io(Path::new("<stdout>"))),
    }
}

fn run_config(prior: &PriorArgs, output: &OutputArgs) -> Result<RunConfig, CliError> {
    let mut cfg = base_config(prior.config.as_ref(), prior.prior.as_ref(), prior.flat)?;
    if prior.e_sigma2.is_some() {
        cfg.e_sigma2_override = prior.e_sigma2;
    }
    if let Some(f) = output.format {
        cfg.output_format = f;
    }
    Ok(cfg)
}

fn apply_search(cfg: &mut RunConfig, s: &SearchArgs) {
    let o = &mut cfg.optimizer;
    if let Some(m) = s.mode {
        o.mode = m.into();
    }
    if let Some(r) = s.restarts {
        o.restarts = r;
    }
    if let Some(k) = s.k {
        o.k = k;
    }
    if let Some(l) = s.exhaustive_limit {
        o.exhaustive_limit = l;
    }
    if let Some(seed) = s.seed {
        o.rng_seed = seed;
    }
}

fn pair(text: &str, what: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("{what} must look like `3,5`, got {text:?}"));
    let (a, b) = text.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

pub fn allocate(a: &AllocateArgs) -> Result<(AllocateReport, OutputFormat), CliError> {
    let x = load_covariates(&a.input.covariates, a.input.header)?;
    let mut cfg = run_config(&a.prior, &a.output)?;
    apply_search(&mut cfg, &a.search);
    if a.equal_split {
        cfg.optimizer.constraint = GroupSizeConstraint::Equal;
    }
    if let Some(text) = &a.arms {
        let (n_c, n_t) = pair(text, "--arms")?;
        cfg.optimizer.constraint = GroupSizeConstraint::Fixed { n_c, n_t };
    }
    let (prior, e) = cfg.resolve(x.p())?;
    let result = optimize(&prior, &x, &cfg.optimizer, e)?;
    // the condition is defined for even n only; odd equal splits still allocate
    let equal_split = if a.equal_split && x.n() % 2 == 0 {
        let opts = EqualSplitOptions {
            exhaustive_limit: cfg.optimizer.exhaustive_limit,
            restarts: cfg.optimizer.restarts,
            rng_seed: cfg.optimizer.rng_seed,
            ..EqualSplitOptions::default()
        };
        Some(equal_split_condition(&x, &opts)?)
    } else {
        None
    };
    let format = cfg.output_format;
    Ok((
        AllocateReport {
            input: InputEcho::new(&a.input.covariates, &x),
            config: cfg,
            e_sigma2: e,
            arms: ArmRows::of(&result.best_alloc),
            allocation: result.best_alloc,
            risk: result.best_risk,
            ties: result.ties,
            evaluated: result.evaluated,
            skipped: result.skipped,
            label_swap_dedup: result.label_swap_dedup,
            equal_split,
        },
        format,
    ))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

pub fn risk(a: &RiskArgs) -> Result<(RiskReport, OutputFormat), CliError> {
    let x = load_covariates(&a.input.covariates, a.input.header)?;
    let cfg = run_config(&a.prior, &a.output)?;
    let w = Allocation::parse(&a.w)?;
    if w.len() != x.n() {
        return Err(AllocError::LengthMismatch {
            expected: x.n(),
            actual: w.len(),
        }
        .into());
    }
    let (prior, e) = cfg.resolve(x.p())?;
    let breakdown = risk_for_prior(&prior, &x, &w, e)?;
    let verification = if a.verify {
        let oracle = risk_direct_scaled(&prior, &x, &w, e)?;
        Some(Verification {
            oracle_risk: oracle,
            oracle_rel_delta: rel(breakdown.risk, oracle),
            pseudo_sample: pseudo_sample_check(&cfg.prior, &prior, &x, &w, e, breakdown.risk)?,
        })
    } else {
        None
    };
    let format = cfg.output_format;
    Ok((
        RiskReport {
            input: InputEcho::new(&a.input.covariates, &x),
            config: cfg,
            e_sigma2: e,
            allocation: w,
            risk: breakdown,
            verification,
        },
        format,
    ))
}

fn pseudo_sample_check(
    spec: &PriorSpec,
    prior: &allocrisk::NigPrior,
    x: &CovariateMatrix,
    w: &Allocation,
    e: f64,
    risk: f64,
) -> Result<PseudoSampleCheck, CliError> {
    let not_applicable = |note: String| PseudoSampleCheck {
        applicable: false,
        risk: None,
        rel_delta: None,
        agrees: None,
        note,
    };
    if prior.is_flat() {
        return Ok(not_applicable("the flat prior has no pseudo-sample form".into()));
    }
    let decomp = match spec.decomposition(x.p())? {
        Some(d) => d,
        None => decompose_prior(prior)?,
    };
    match risk_pseudo_sample(&decomp, x, w, e) {
        Ok(b) => {
            let d = rel(b.risk, risk);
            Ok(PseudoSampleCheck {
                applicable: true,
                risk: Some(b.risk),
                rel_delta: Some(d),
                agrees: Some(d <= PSEUDO_SAMPLE_TOL),
                note: format!(
                    "pseudo-sample path with h1^2 = {}, h2^2 = {}",
                    decomp.h1 * decomp.h1,
                    decomp.h2 * decomp.h2
                ),
            })
        }
        Err(e @ AllocError::NonIntegerH2 { .. }) => Ok(not_applicable(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

pub fn check(a: &CheckArgs) -> Result<CheckReport, CliError> {
    let x = load_covariates(&a.input.covariates, a.input.header)?;
    let mut options = EqualSplitOptions::default();
    if let Some(l) = a.exhaustive_limit {
        options.exhaustive_limit = l;
    }
    if let Some(r) = a.restarts {
        options.restarts = r;
    }
    if let Some(s) = a.seed {
        options.rng_seed = s;
    }
    options.check_optimum = !a.no_optimum;
    let result = equal_split_condition(&x, &options)?;
    Ok(CheckReport {
        input: InputEcho::new(&a.input.covariates, &x),
        options,
        result,
    })
}

pub fn selftest(a: &SelftestArgs) -> Result<SelftestReport, CliError> {
    let n = |default: usize| a.instances.unwrap_or(default);
    let sweeps = vec![
        oracle_sweep(a.seed, n(100))?,
        pseudo_sample_sweep(a.seed, n(50))?,
        flat_sweep(a.seed, n(50))?,
        mahalanobis_identity_sweep(a.seed, n(50))?,
    ];
    let passed = sweeps.iter().all(SweepReport::passed);
    Ok(SelftestReport {
        seed: a.seed,
        sweeps,
        passed,
    })
}

pub fn session(a: &SessionArgs) -> Result<Value, CliError> {
    let store = SessionStore::open(&a.data_dir).map_err(|source| CliError::Io {
        path: a.data_dir.clone(),
        source,
    })?;
    let value = match &a.op {
        SessionOp::Create { p, prior, flat } => {
            let spec = match (prior, flat) {
                (Some(path), _) => read_json::<PriorSpec>(path)?,
                (None, true) => PriorSpec::flat(),
                (None, false) => return Err(CliError::Config("pass --flat or --prior".into())),
            };
            let req = CreateSessionRequest { prior: spec, p: *p };
            to_value(&allocrisk_service::create_session(&store, &req)?)
        }
        SessionOp::Batch {
            id,
            input,
            expected_revision,
            quota,
            mode,
            dry_run,
        } => {
            let x = load_covariates(&input.covariates, input.header)?;
            let quota = quota
                .as_deref()
                .map(|q| pair(q, "--quota").map(|(control, treatment)| Quota { control, treatment }))
                .transpose()?;
            let body = BatchBody {
                covariates: x.rows(),
                quota,
                expected_revision: *expected_revision,
                mode: mode.map(Into::into),
                optimizer: None,
                dry_run: *dry_run,
            };
            to_value(&allocrisk_service::submit_batch(&store, id, &body)?)
        }
        SessionOp::Outcomes {
            id,
            batch,
            y,
            expected_revision,
        } => {
            let y = y
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Config(format!("--y has a non-numeric entry {v:?}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let body = OutcomesBody {
                batch: *batch,
                y,
                expected_revision: *expected_revision,
            };
            to_value(&allocrisk_service::record_outcomes(&store, id, &body)?)
        }
        SessionOp::Show { id } => to_value(&allocrisk_service::view_session(&store, id)?),
    };
    Ok(value)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("service responses serialize")
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Config(format!("bad listen address: {e}")))?;
    let config = ServiceConfig {
        data_dir: a.data_dir.clone(),
        static_dir: a.static_dir.clone(),
    };
    let io = |source| CliError::Io {
        path: PathBuf::from(addr.to_string()),
        source,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(io)?;
    eprintln!("listening on http://{addr}");
    runtime.block_on(allocrisk_service::serve(addr, &config)).map_err(io)
}
