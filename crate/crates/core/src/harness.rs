//! Experiment files, Monte Carlo orchestration over sweeps and trials,
//! baseline wiring and result emission.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::channel::{
    all_reflect_mask, default_mode_mask, generate_channels, random_ris, trial_rng, ChannelSet,
    StarRisState,
};
use crate::config::{Geometry, ScenarioConfig};
use crate::error::{Error, Result};
use crate::solver::{
    initial_surface, optimize, Init, Problem, SolveResult, SolveStatus, SolverSettings, Start,
    Surface,
};

/// Salt separating the random-surface stream from the channel stream.
const SURFACE_SALT: u64 = 0x7375_7266_6163_6521;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Tin,
    Rsma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RisMode {
    None,
    Random,
    Reflect,
    Star,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepVar {
    #[serde(rename = "P_C")]
    StaticPower,
    #[serde(rename = "n")]
    Blocklength,
    #[serde(rename = "eps")]
    ErrorTarget,
    #[serde(rename = "P")]
    PowerBudget,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}'; expected one of: {}"),
                        s,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(Scheme { Tin => "tin", Rsma => "rsma" });
text_enum!(RisMode { None => "none", Random => "random", Reflect => "reflect", Star => "star" });
text_enum!(SweepVar { StaticPower => "P_C", Blocklength => "n", ErrorTarget => "eps", PowerBudget => "P" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub variable: SweepVar,
    pub values: Vec<f64>,
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub base: ScenarioConfig,
    pub schemes: Vec<Scheme>,
    pub modes: Vec<RisMode>,
    pub sweep: Option<Sweep>,
    pub trials: usize,
    /// Also runs RSMA from the TIN result and STAR from the reflect and
    /// random-surface results of the same trial, keeping the better outcome.
    pub warm_start: bool,
    /// Worker threads; `None` uses every available core.
    pub workers: Option<usize>,
    /// Records wall time per row. Off by default so output bytes depend only
    /// on the spec.
    pub timing: bool,
    pub settings: SolverSettings,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            base: ScenarioConfig::default(),
            schemes: vec![Scheme::Rsma],
            modes: vec![RisMode::Star],
            sweep: None,
            trials: 1,
            warm_start: false,
            workers: None,
            timing: false,
            settings: SolverSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

/// On-disk form of an experiment. Every key is optional and falls back to
/// the desk-scale defaults; unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    #[serde(rename = "K")]
    users: Option<usize>,
    #[serde(rename = "N_BS")]
    bs_antennas: Option<usize>,
    #[serde(rename = "N_u")]
    user_antennas: Option<usize>,
    #[serde(rename = "M")]
    ris_elements: Option<usize>,
    d_c: Option<usize>,
    d_p: Option<usize>,
    sigma2: Option<f64>,
    #[serde(rename = "P")]
    power_budget: Option<f64>,
    #[serde(rename = "P_C")]
    static_power: Option<f64>,
    beta: Option<f64>,
    r_th: Option<f64>,
    n_c: Option<f64>,
    n_p: Option<f64>,
    eps_total: Option<f64>,
    eps_c_share: Option<f64>,
    #[serde(rename = "rice_K")]
    rice_factor: Option<f64>,
    #[serde(rename = "pl0_dB")]
    pl0_db: Option<f64>,
    exponent_direct: Option<f64>,
    exponent_ris: Option<f64>,
    geometry: Option<Geometry>,
    seed: Option<u64>,
    scheme: Option<OneOrMany<Scheme>>,
    ris_mode: Option<OneOrMany<RisMode>>,
    sweep: Option<Sweep>,
    trials: Option<usize>,
    warm_start: Option<bool>,
    workers: Option<usize>,
    timing: Option<bool>,
    settings: Option<SolverSettings>,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ExperimentFile =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let users = file.users.unwrap_or(4);
        let seed = file.seed.unwrap_or(1);
        let mut base = ScenarioConfig::with_users(users, seed);
        macro_rules! set {
            ($($field:ident),+) => { $(if let Some(v) = file.$field { base.$field = v; })+ };
        }
        set!(
            bs_antennas,
            user_antennas,
            ris_elements,
            d_c,
            d_p,
            sigma2,
            power_budget,
            static_power,
            beta
        );
        set!(
            r_th,
            n_c,
            n_p,
            eps_total,
            eps_c_share,
            rice_factor,
            geometry
        );
        if let Some(v) = file.pl0_db {
            base.pathloss.pl0_db = v;
        }
        if let Some(v) = file.exponent_direct {
            base.pathloss.exponent_direct = v;
        }
        if let Some(v) = file.exponent_ris {
            base.pathloss.exponent_ris = v;
        }
        let defaults = ExperimentSpec::default();
        let spec = ExperimentSpec {
            base,
            schemes: file.scheme.map_or(defaults.schemes, OneOrMany::into_vec),
            modes: file.ris_mode.map_or(defaults.modes, OneOrMany::into_vec),
            sweep: file.sweep,
            trials: file.trials.unwrap_or(defaults.trials),
            warm_start: file.warm_start.unwrap_or(defaults.warm_start),
            workers: file.workers,
            timing: file.timing.unwrap_or(defaults.timing),
            settings: file.settings.unwrap_or_default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        ExperimentSpec::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        self.base.validate()?;
        self.settings.validate()?;
        if self.trials < 1 {
            return fail("trials must be at least 1");
        }
        if self.workers == Some(0) {
            return fail("workers must be at least 1");
        }
        if self.schemes.is_empty() || self.modes.is_empty() {
            return fail("at least one scheme and one ris_mode are required");
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return fail("sweep values must not be empty");
            }
            if sweep.values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return fail("sweep values must be positive");
            }
            if sweep.values.windows(2).any(|w| w[1] <= w[0]) {
                return fail("sweep values must be strictly increasing");
            }
            if sweep.variable == SweepVar::ErrorTarget && sweep.values.iter().any(|v| *v >= 1.0) {
                return fail("error targets must lie below 1");
            }
            if sweep.variable == SweepVar::Blocklength && sweep.values.iter().any(|v| *v < 1.0) {
                return fail("blocklengths must be at least 1");
            }
        }
        for (i, _) in self.points().iter().enumerate() {
            self.scenario_at(i).validate()?;
        }
        Ok(())
    }

    /// `(variable name, value)` of every sweep point; a single unnamed point
    /// without a sweep.
    pub fn points(&self) -> Vec<(String, f64)> {
        match &self.sweep {
            Some(s) => s
                .values
                .iter()
                .map(|v| (s.variable.to_string(), *v))
                .collect(),
            None => vec![("none".into(), 0.0)],
        }
    }

    /// The scenario at sweep point `index`.
    pub fn scenario_at(&self, index: usize) -> ScenarioConfig {
        match &self.sweep {
            Some(s) => apply_sweep(&self.base, s.variable, s.values[index]),
            None => self.base.clone(),
        }
    }

    /// Every (scheme, mode) pair that has to be solved, donors included, in
    /// an order where donors come first.
    fn solve_order(&self) -> Vec<(Scheme, RisMode)> {
        let mut needed: Vec<(Scheme, RisMode)> = Vec::new();
        let mut stack: Vec<(Scheme, RisMode)> = self
            .schemes
            .iter()
            .flat_map(|s| self.modes.iter().map(move |m| (*s, *m)))
            .collect();
        while let Some(c) = stack.pop() {
            if needed.contains(&c) {
                continue;
            }
            needed.push(c);
            if self.warm_start {
                stack.extend(donors(c.0, c.1));
            }
        }
        needed.sort();
        needed
    }
}

/// Results a run may be warm-started from.
fn donors(scheme: Scheme, mode: RisMode) -> Vec<(Scheme, RisMode)> {
    let mut out = Vec::new();
    if scheme == Scheme::Rsma {
        out.push((Scheme::Tin, mode));
    }
    if mode == RisMode::Star {
        out.extend([RisMode::Random, RisMode::Reflect].map(|m| (scheme, m)));
    }
    out
}

/// Applies one sweep value. `n` sets both blocklengths; `eps` sets the total
/// error budget, which is then split by `eps_c_share`.
pub fn apply_sweep(base: &ScenarioConfig, variable: SweepVar, value: f64) -> ScenarioConfig {
    let mut cfg = base.clone();
    match variable {
        SweepVar::StaticPower => cfg.static_power = value,
        SweepVar::Blocklength => {
            cfg.n_c = value;
            cfg.n_p = value;
        }
        SweepVar::ErrorTarget => cfg.eps_total = value,
        SweepVar::PowerBudget => cfg.power_budget = value,
    }
    cfg
}

/// Generator for the random-surface baseline, independent of the channel stream.
pub fn surface_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    trial_rng(seed ^ SURFACE_SALT, trial)
}

/// Maps a (scheme, surface mode) pair onto the optimizer's problem.
pub fn wire_baseline(
    scheme: Scheme,
    mode: RisMode,
    cfg: &ScenarioConfig,
    trial: u64,
) -> Result<Problem> {
    let m = cfg.ris_elements;
    let surface = match mode {
        RisMode::Star => Surface::Optimized(default_mode_mask(m)?),
        RisMode::Reflect => Surface::Optimized(all_reflect_mask(m)),
        RisMode::None => Surface::Fixed(StarRisState::zeros(default_mode_mask(m)?)),
        RisMode::Random => Surface::Fixed(random_ris(
            default_mode_mask(m)?,
            &mut surface_rng(cfg.seed, trial),
        )),
    };
    Ok(Problem {
        common_stream: scheme == Scheme::Rsma,
        surface,
    })
}

/// Starting points derived from an earlier result of the same trial.
fn transfer(donor: &SolveResult, problem: &Problem, cs: &ChannelSet) -> Result<Vec<Start>> {
    let mask = problem.mask();
    let fresh = match &problem.surface {
        Surface::Fixed(ris) => ris.clone(),
        Surface::Optimized(mask) => initial_surface(cs, mask)?,
    };
    let carried = if donor.ris.mask == mask {
        donor.ris.clone()
    } else {
        donor.ris.remapped(mask, &fresh.active_values())?
    };
    let mut starts = vec![Start {
        ws: donor.ws.clone(),
        ris: carried,
    }];
    if let Surface::Optimized(_) = problem.surface {
        starts.push(Start {
            ws: donor.ws.clone(),
            ris: fresh,
        });
    }
    Ok(starts)
}

/// Feasible results first, then higher min-EE.
fn preferred(a: &SolveResult, b: &SolveResult) -> bool {
    let feasible = |r: &SolveResult| r.status != SolveStatus::InfeasibleMinRate;
    match (feasible(a), feasible(b)) {
        (true, false) => true,
        (false, true) => false,
        _ => a.report.min_ee > b.report.min_ee,
    }
}

/// One output row per (sweep value, trial, scheme, surface mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRow {
    pub sweep_var: String,
    #[serde(serialize_with = "ser_num", deserialize_with = "de_num")]
    pub sweep_value: f64,
    pub trial: u64,
    pub scheme: Scheme,
    pub ris_mode: RisMode,
    #[serde(serialize_with = "ser_num", deserialize_with = "de_num")]
    pub min_ee_nats: f64,
    #[serde(serialize_with = "ser_num", deserialize_with = "de_num")]
    pub min_ee_bits: f64,
    pub iters: usize,
    pub status: String,
    #[serde(serialize_with = "ser_num", deserialize_with = "de_num")]
    pub wall_ms: f64,
    #[serde(serialize_with = "ser_nums", deserialize_with = "de_nums")]
    pub r: Vec<f64>,
    #[serde(serialize_with = "ser_nums", deserialize_with = "de_nums")]
    pub e: Vec<f64>,
}

/// A row together with the solution it summarizes.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub sweep_index: usize,
    pub row: ResultRow,
    pub result: Result<SolveResult, String>,
}

impl ResultRow {
    fn failed(
        point: &(String, f64),
        trial: u64,
        scheme: Scheme,
        mode: RisMode,
        users: usize,
    ) -> Self {
        ResultRow {
            sweep_var: point.0.clone(),
            sweep_value: point.1,
            trial,
            scheme,
            ris_mode: mode,
            min_ee_nats: f64::NAN,
            min_ee_bits: f64::NAN,
            iters: 0,
            status: "error".into(),
            wall_ms: 0.0,
            r: vec![f64::NAN; users],
            e: vec![f64::NAN; users],
        }
    }
}

/// Solves every requested (scheme, mode) of one trial, sharing one channel
/// realization and chaining warm starts.
fn run_trial(
    spec: &ExperimentSpec,
    sweep_index: usize,
    point: &(String, f64),
    trial: u64,
) -> Vec<TrialOutcome> {
    let cfg = spec.scenario_at(sweep_index);
    let requested =
        |c: &(Scheme, RisMode)| spec.schemes.contains(&c.0) && spec.modes.contains(&c.1);
    let cs = generate_channels(&cfg, &mut trial_rng(cfg.seed, trial));
    let mut solved: BTreeMap<(Scheme, RisMode), SolveResult> = BTreeMap::new();
    let mut out = Vec::new();
    for (scheme, mode) in spec.solve_order() {
        let started = Instant::now();
        let attempt = cs.as_ref().map_err(|e| e.to_string()).and_then(|cs| {
            let problem = wire_baseline(scheme, mode, &cfg, trial).map_err(|e| e.to_string())?;
            let mut best = optimize(cs, &cfg, &spec.settings, &problem, Init::Default)
                .map_err(|e| e.to_string())?;
            if spec.warm_start {
                // A donor start can sit in a poorer basin (TIN has no common
                // stream to grow from), so it is run alongside the default
                // start rather than replacing it.
                let mut starts = Vec::new();
                for d in donors(scheme, mode) {
                    if let Some(res) = solved.get(&d) {
                        starts.extend(transfer(res, &problem, cs).map_err(|e| e.to_string())?);
                    }
                }
                if !starts.is_empty() {
                    let warm = optimize(cs, &cfg, &spec.settings, &problem, Init::Given(starts))
                        .map_err(|e| e.to_string())?;
                    if preferred(&warm, &best) {
                        best = warm;
                    }
                }
            }
            Ok(best)
        });
        let wall_ms = if spec.timing {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        if let Ok(res) = &attempt {
            solved.insert((scheme, mode), res.clone());
        }
        if !requested(&(scheme, mode)) {
            continue;
        }
        let row = match &attempt {
            Ok(res) => ResultRow {
                sweep_var: point.0.clone(),
                sweep_value: point.1,
                trial,
                scheme,
                ris_mode: mode,
                min_ee_nats: res.report.min_ee,
                min_ee_bits: res.report.min_ee / std::f64::consts::LN_2,
                iters: res.iterations,
                status: res.status.as_str().into(),
                wall_ms,
                r: res.report.r_k.clone(),
                e: res.report.e_k.clone(),
            },
            Err(_) => {
                let mut row = ResultRow::failed(point, trial, scheme, mode, cfg.users);
                row.wall_ms = wall_ms;
                row
            }
        };
        out.push(TrialOutcome {
            sweep_index,
            row,
            result: attempt,
        });
    }
    out
}

/// Runs every sweep point and trial; rows come back in canonical order
/// (sweep value, trial, scheme, surface mode) whatever the worker count.
pub fn run_experiment_detailed(spec: &ExperimentSpec) -> Result<Vec<TrialOutcome>> {
    spec.validate()?;
    let points = spec.points();
    let tasks: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|i| (0..spec.trials as u64).map(move |t| (i, t)))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = spec.workers {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let mut outcomes: Vec<TrialOutcome> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(i, t)| run_trial(spec, i, &points[i], t))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    });
    outcomes.sort_by_key(|o| (o.sweep_index, o.row.trial, o.row.scheme, o.row.ris_mode));
    Ok(outcomes)
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    Ok(run_experiment_detailed(spec)?
        .into_iter()
        .map(|o| o.row)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

text_enum!(Format { Csv => "csv", Json => "json" });

pub const CSV_HEADER: [&str; 10] = [
    "sweep_var",
    "sweep_value",
    "trial",
    "scheme",
    "ris_mode",
    "min_ee_nats",
    "min_ee_bits",
    "iters",
    "status",
    "wall_ms",
];

/// Formats with 9 significant digits, shortest of fixed or exponent form.
pub fn format_sig9(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-5..9).contains(&exp) {
        format!("{}e{exp}", trim(mantissa))
    } else {
        trim(&format!("{x:.*}", (8 - exp) as usize))
    }
}

fn rounded(x: f64) -> f64 {
    format_sig9(x).parse().unwrap_or(x)
}

fn ser_num<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(rounded(*x))
    } else {
        s.serialize_none()
    }
}

fn ser_nums<S: Serializer>(xs: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(xs.len()))?;
    for x in xs {
        seq.serialize_element(&x.is_finite().then(|| rounded(*x)))?;
    }
    seq.end()
}

fn de_num<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn de_nums<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    Ok(Vec::<Option<f64>>::deserialize(d)?
        .into_iter()
        .map(|x| x.unwrap_or(f64::NAN))
        .collect())
}

/// Header for `users` per-user columns.
pub fn csv_header(users: usize) -> Vec<String> {
    let mut h: Vec<String> = CSV_HEADER.iter().map(|s| s.to_string()).collect();
    h.extend((1..=users).map(|k| format!("r_{k}")));
    h.extend((1..=users).map(|k| format!("e_{k}")));
    h
}

pub fn write_rows(rows: &[ResultRow], format: Format, out: &mut impl Write) -> Result<()> {
    match format {
        Format::Csv => {
            let users = rows.first().map_or(0, |r| r.r.len());
            if rows
                .iter()
                .any(|r| r.r.len() != users || r.e.len() != users)
            {
                return Err(Error::dims("rows disagree in user count"));
            }
            let mut w = csv::Writer::from_writer(out);
            let fail = |e: csv::Error| Error::Io(std::io::Error::other(e));
            w.write_record(csv_header(users)).map_err(fail)?;
            for row in rows {
                let mut rec = vec![
                    row.sweep_var.clone(),
                    format_sig9(row.sweep_value),
                    row.trial.to_string(),
                    row.scheme.to_string(),
                    row.ris_mode.to_string(),
                    format_sig9(row.min_ee_nats),
                    format_sig9(row.min_ee_bits),
                    row.iters.to_string(),
                    row.status.clone(),
                    format_sig9(row.wall_ms),
                ];
                rec.extend(row.r.iter().chain(&row.e).map(|v| format_sig9(*v)));
                w.write_record(&rec).map_err(fail)?;
            }
            w.flush()?;
        }
        Format::Json => {
            serde_json::to_writer_pretty(&mut *out, rows)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Writes rows to `path`.
pub fn emit(rows: &[ResultRow], path: &Path, format: Format) -> Result<()> {
    let mut buf = Vec::new();
    write_rows(rows, format, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn parse_field<T: FromStr>(value: &str, name: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("cannot parse {name} from '{value}'")))
}

/// Reads rows written by [`write_rows`].
pub fn read_rows(input: &mut impl Read, format: Format) -> Result<Vec<ResultRow>> {
    match format {
        Format::Json => Ok(serde_json::from_reader(input)?),
        Format::Csv => {
            let fail = |e: csv::Error| Error::invalid(e.to_string());
            let mut r = csv::Reader::from_reader(input);
            let header: Vec<String> = r
                .headers()
                .map_err(fail)?
                .iter()
                .map(String::from)
                .collect();
            let users = header.len().saturating_sub(CSV_HEADER.len()) / 2;
            if header != csv_header(users) {
                return Err(Error::invalid("unexpected CSV header"));
            }
            let mut rows = Vec::new();
            for rec in r.records() {
                let rec = rec.map_err(fail)?;
                let num = |i: usize| -> Result<f64> { parse_field(&rec[i], &header[i]) };
                rows.push(ResultRow {
                    sweep_var: rec[0].to_string(),
                    sweep_value: num(1)?,
                    trial: parse_field(&rec[2], "trial")?,
                    scheme: rec[3].parse()?,
                    ris_mode: rec[4].parse()?,
                    min_ee_nats: num(5)?,
                    min_ee_bits: num(6)?,
                    iters: parse_field(&rec[7], "iters")?,
                    status: rec[8].to_string(),
                    wall_ms: num(9)?,
                    r: (0..users).map(|k| num(10 + k)).collect::<Result<_>>()?,
                    e: (0..users)
                        .map(|k| num(10 + users + k))
                        .collect::<Result<_>>()?,
                });
            }
            Ok(rows)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(0.1), "0.1");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123456789.4), "123456789");
        assert_eq!(format_sig9(1234567891.0), "1.23456789e9");
        assert_eq!(format_sig9(9.9999999999), "10");
        assert_eq!(format_sig9(-2.5e-7), "-2.5e-7");
        assert_eq!(format_sig9(1e-5), "0.00001");
        assert_eq!(format_sig9(f64::NAN), "NaN");
        assert_eq!(format_sig9(0.0), "0");
    }

    #[test]
    fn parse_defaults_and_rejects_unknown_keys() {
        let spec = ExperimentSpec::from_json("{}").unwrap();
        assert_eq!(spec, ExperimentSpec::default());
        let err = ExperimentSpec::from_json(r#"{"P_c": 1.0}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let spec = ExperimentSpec::from_json(
            r#"{"K": 2, "M": 8, "P_C": 0.3, "pl0_dB": 35, "scheme": ["tin", "rsma"], "ris_mode": "reflect",
                "sweep": {"variable": "n", "values": [128, 256]}, "trials": 3, "settings": {"ao_max_iters": 5}}"#,
        )
        .unwrap();
        assert_eq!(spec.base.users, 2);
        assert_eq!(spec.base.geometry.users.len(), 2);
        assert_eq!(spec.base.pathloss.pl0_db, 35.0);
        assert_eq!(spec.schemes, vec![Scheme::Tin, Scheme::Rsma]);
        assert_eq!(spec.modes, vec![RisMode::Reflect]);
        assert_eq!(spec.settings.ao_max_iters, 5);
        assert_eq!(spec.scenario_at(1).n_c, 256.0);
        assert_eq!(spec.scenario_at(1).n_p, 256.0);
    }

    #[test]
    fn invalid_specs() {
        for text in [
            r#"{"trials": 0}"#,
            r#"{"sweep": {"variable": "P", "values": [2, 1]}}"#,
            r#"{"sweep": {"variable": "P", "values": [-1]}}"#,
            r#"{"sweep": {"variable": "eps", "values": [0.5, 2]}}"#,
            r#"{"sweep": {"variable": "Q", "values": [1]}}"#,
            r#"{"scheme": "noma"}"#,
            r#"{"M": 7}"#,
            r#"{"workers": 0}"#,
            r#"{"settings": {"rho": []}}"#,
        ] {
            assert!(
                matches!(ExperimentSpec::from_json(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn sweep_application() {
        let base = ScenarioConfig::default();
        assert_eq!(
            apply_sweep(&base, SweepVar::StaticPower, 0.7).static_power,
            0.7
        );
        assert_eq!(
            apply_sweep(&base, SweepVar::PowerBudget, 2.0).power_budget,
            2.0
        );
        let e = apply_sweep(&base, SweepVar::ErrorTarget, 1e-4);
        assert_eq!(e.eps_total, 1e-4);
        assert_eq!(e.eps_c_share, base.eps_c_share);
    }

    #[test]
    fn wiring() {
        let cfg = ScenarioConfig::default();
        let p = wire_baseline(Scheme::Rsma, RisMode::Star, &cfg, 0).unwrap();
        assert!(p.common_stream);
        assert_eq!(
            p.surface,
            Surface::Optimized(default_mode_mask(16).unwrap())
        );
        let p = wire_baseline(Scheme::Tin, RisMode::None, &cfg, 0).unwrap();
        assert!(!p.common_stream);
        match p.surface {
            Surface::Fixed(ris) => assert!(ris
                .theta_t
                .iter()
                .chain(&ris.theta_r)
                .all(|z| z.norm() == 0.0)),
            _ => panic!("surface should be fixed"),
        }
        let p = wire_baseline(Scheme::Tin, RisMode::Reflect, &cfg, 0).unwrap();
        assert_eq!(p.mask(), all_reflect_mask(16).as_slice());
        let a = wire_baseline(Scheme::Rsma, RisMode::Random, &cfg, 3).unwrap();
        let b = wire_baseline(Scheme::Tin, RisMode::Random, &cfg, 3).unwrap();
        let c = wire_baseline(Scheme::Tin, RisMode::Random, &cfg, 4).unwrap();
        assert_eq!(a.surface, b.surface);
        assert_ne!(b.surface, c.surface);
        match a.surface {
            Surface::Fixed(ris) => {
                assert!(ris
                    .active_values()
                    .iter()
                    .all(|z| (z.norm() - 1.0).abs() < 1e-12));
                ris.validate().unwrap();
            }
            _ => panic!("surface should be fixed"),
        }
    }

    #[test]
    fn donor_closure_is_ordered() {
        let spec = ExperimentSpec {
            warm_start: true,
            ..ExperimentSpec::default()
        };
        let order = spec.solve_order();
        assert_eq!(order.len(), 6);
        for (i, c) in order.iter().enumerate() {
            for d in donors(c.0, c.1) {
                assert!(order[..i].contains(&d), "{d:?} should precede {c:?}");
            }
        }
        assert_eq!(
            ExperimentSpec::default().solve_order(),
            vec![(Scheme::Rsma, RisMode::Star)]
        );
    }

    #[test]
    fn empty_csv_is_header_only() {
        let mut buf = Vec::new();
        write_rows(&[], Format::Csv, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "sweep_var,sweep_value,trial,scheme,ris_mode,min_ee_nats,min_ee_bits,iters,status,wall_ms\n"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sig9_round_trip_is_stable(mantissa in 1.0f64..10.0, exp in -12i32..12, neg in any::<bool>()) {
                let x = if neg { -mantissa } else { mantissa } * 10f64.powi(exp);
                let text = format_sig9(x);
                let back: f64 = text.parse().unwrap();
                let ulp9 = 10f64.powi(x.abs().log10().floor() as i32 - 8);
                prop_assert!((back - x).abs() <= 0.5 * ulp9 * (1.0 + 1e-9), "{} -> {}", x, text);
                prop_assert_eq!(format_sig9(back), text);
            }
        }
    }
}
