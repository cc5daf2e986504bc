//! Fault-injection campaigns, detection scoring and traffic overhead.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{traffic_overhead, HEADER_LEN};
use crate::detect::{flagged_requests, Detector, DetectorConfig};
use crate::event::TraceEvent;
use crate::fsa::{ComponentList, Fsa};
use crate::rep::{build_rep, count_fragments, default_data_extractor, LinkError};
use crate::sim::{run_workload, FaultSpec, SpecError, WorkloadSpec};
use crate::train::{train, TrainError, Variant};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("trace has no send events")]
    NoSends,
    #[error("bad fault category `{0}` (expected crash:<component> or resource_lock:<component>)")]
    BadCategory(String),
}

/// A class of injected fault, applied to one component.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FaultCategory {
    Crash(String),
    ResourceLock(String),
}

impl FaultCategory {
    pub fn component(&self) -> &str {
        match self {
            FaultCategory::Crash(c) | FaultCategory::ResourceLock(c) => c,
        }
    }
}

impl fmt::Display for FaultCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultCategory::Crash(c) => write!(f, "crash:{c}"),
            FaultCategory::ResourceLock(c) => write!(f, "resource_lock:{c}"),
        }
    }
}

impl FromStr for FaultCategory {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s.split_once(':') {
            Some(("crash", c)) if !c.is_empty() => Ok(FaultCategory::Crash(c.into())),
            Some(("resource_lock", c)) if !c.is_empty() => Ok(FaultCategory::ResourceLock(c.into())),
            _ => Err(EvalError::BadCategory(s.into())),
        }
    }
}

/// Confusion counts at request granularity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Scores {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Scores {
    pub fn record(&mut self, faulty: bool, flagged: bool) {
        match (faulty, flagged) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn add(&mut self, o: &Scores) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    /// `None` when nothing was flagged.
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `None` when there were no faulty requests.
    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Option<f64> {
        let (p, r) = (self.precision()?, self.recall()?);
        if p + r == 0.0 {
            Some(0.0)
        } else {
            Some(2.0 * p * r / (p + r))
        }
    }
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub train_runs: usize,
    pub clean_runs: usize,
    pub faulty_runs_per_category: usize,
    /// Fault categories to inject; derived from the workload when empty.
    pub categories: Vec<FaultCategory>,
    pub variants: Vec<Variant>,
    pub seed: u64,
    pub detector: DetectorConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            train_runs: 20,
            clean_runs: 28,
            faulty_runs_per_category: 8,
            categories: Vec::new(),
            variants: vec![Variant::Fsa, Variant::Efsa, Variant::Paths(10), Variant::Paths(20)],
            seed: 1,
            detector: DetectorConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantReport {
    pub variant: Variant,
    pub per_type: BTreeMap<String, Scores>,
    pub total: Scores,
}

#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub workload: String,
    /// Fault categories injected per request type.
    pub categories: BTreeMap<String, Vec<FaultCategory>>,
    /// (clean, faulty) test runs per request type.
    pub runs: BTreeMap<String, (usize, usize)>,
    /// Weakly connected fragments of one clean trace per type, without and
    /// with data-dependency linking.
    pub fragments: BTreeMap<String, (usize, usize)>,
    pub variants: Vec<VariantReport>,
}

impl EvaluationReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "workload {}", self.workload);
        for (ty, (clean, faulty)) in &self.runs {
            let cats: Vec<String> = self.categories[ty].iter().map(ToString::to_string).collect();
            let (a, b) = self.fragments[ty];
            let _ = writeln!(s, "type {ty} clean {clean} faulty {faulty} fragments {a}->{b} faults {}", cats.join(","));
        }
        let _ = writeln!(s, "{:<8} {:<12} {:>4} {:>4} {:>4} {:>4} {:>9} {:>9} {:>9}", "variant", "type", "tp", "fp", "fn", "tn", "precision", "recall", "f1");
        for v in &self.variants {
            let rows = v.per_type.iter().map(|(t, sc)| (t.as_str(), sc)).chain([("all", &v.total)]);
            for (ty, sc) in rows {
                let _ = writeln!(
                    s,
                    "{:<8} {:<12} {:>4} {:>4} {:>4} {:>4} {:>9} {:>9} {:>9}",
                    v.variant.to_string(),
                    ty,
                    sc.tp,
                    sc.fp,
                    sc.fn_,
                    sc.tn,
                    fmt_opt(sc.precision()),
                    fmt_opt(sc.recall()),
                    fmt_opt(sc.f1())
                );
            }
        }
        s
    }
}

/// A workload restricted to one request of one type.
pub fn single_request(spec: &WorkloadSpec, request_type: &str) -> WorkloadSpec {
    let mut s = spec.clone();
    s.run.requests = 1;
    s.run.only_types = vec![request_type.to_string()];
    s
}

fn seed_for(base: u64, type_idx: usize, role: u64, i: usize) -> u64 {
    base.wrapping_mul(1_000_003) ^ ((type_idx as u64) << 40) ^ (role << 32) ^ i as u64
}

/// Categories that change the behavior of a request of this type: crashes
/// of components it touches and resource locks that alter its trace.
pub fn applicable_categories(spec: &WorkloadSpec, seed: u64) -> Result<Vec<FaultCategory>, EvalError> {
    let clean = run_workload(spec, &[], seed)?;
    let mut out = Vec::new();
    for c in &spec.components {
        let name = c.name.clone();
        let lock = run_workload(spec, &[FaultSpec::ResourceLock { component: name.clone() }], seed)?;
        if lock.trace != clean.trace {
            out.push(FaultCategory::ResourceLock(name.clone()));
        }
        if clean.manifest.component_events.get(&name) > clean.manifest.boot_events.get(&name) {
            out.push(FaultCategory::Crash(name));
        }
    }
    out.sort_by_key(|c| (matches!(c, FaultCategory::Crash(_)), c.component().to_string()));
    Ok(out)
}

/// The fault to inject for one run. A crash strikes after a uniformly chosen
/// number of the component's request events: at least one, and early enough
/// that some event outside an optional step is lost.
pub fn fault_for(spec: &WorkloadSpec, cat: &FaultCategory, seed: u64) -> Result<Option<FaultSpec>, EvalError> {
    Ok(match cat {
        FaultCategory::ResourceLock(c) => Some(FaultSpec::ResourceLock { component: c.clone() }),
        FaultCategory::Crash(c) => {
            let clean = run_workload(spec, &[], seed)?;
            let boot = clean.manifest.boot_events.get(c).copied().unwrap_or(0);
            let total = clean.manifest.required_events.get(c).copied().unwrap_or(0);
            if total <= boot + 1 {
                None
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Some(FaultSpec::ComponentCrash { component: c.clone(), after_events: rng.gen_range(boot + 1..total) })
            }
        }
    })
}

/// Streams a trace through a fresh detector and returns it finished.
pub fn detect_trace(models: &BTreeMap<String, Fsa>, trace: &[TraceEvent], config: &DetectorConfig) -> Detector {
    let mut d = Detector::new(models.clone(), config.clone());
    for e in trace {
        d.ingest(e.clone());
    }
    d.finish();
    d
}

struct TestRun {
    request_type: String,
    faulty: bool,
    trace: Vec<TraceEvent>,
}

/// Trains every variant and scores functional detection on clean and
/// fault-injected runs of each request type.
pub fn run_campaign(spec: &WorkloadSpec, cfg: &CampaignConfig) -> Result<EvaluationReport, EvalError> {
    let mut training = Vec::new();
    let mut tests = Vec::new();
    let mut categories = BTreeMap::new();
    let mut runs = BTreeMap::new();
    let mut fragments = BTreeMap::new();
    for (ti, rt) in spec.request_types.iter().enumerate() {
        let one = single_request(spec, &rt.name);
        for i in 0..cfg.train_runs {
            training.push(run_workload(&one, &[], seed_for(cfg.seed, ti, 1, i))?.trace);
        }
        for i in 0..cfg.clean_runs {
            let trace = run_workload(&one, &[], seed_for(cfg.seed, ti, 2, i))?.trace;
            if i == 0 {
                let without = count_fragments(&build_rep(trace.iter().cloned(), None)?.0);
                let with = count_fragments(&build_rep(trace.iter().cloned(), Some(default_data_extractor))?.0);
                fragments.insert(rt.name.clone(), (without, with));
            }
            tests.push(TestRun { request_type: rt.name.clone(), faulty: false, trace });
        }
        let cats = if cfg.categories.is_empty() {
            applicable_categories(&one, seed_for(cfg.seed, ti, 3, 0))?
        } else {
            cfg.categories.clone()
        };
        let mut faulty = 0;
        for (ci, cat) in cats.iter().enumerate() {
            for i in 0..cfg.faulty_runs_per_category {
                let seed = seed_for(cfg.seed, ti, 4 + ci as u64, i);
                if let Some(f) = fault_for(&one, cat, seed)? {
                    let trace = run_workload(&one, &[f], seed)?.trace;
                    tests.push(TestRun { request_type: rt.name.clone(), faulty: true, trace });
                    faulty += 1;
                }
            }
        }
        runs.insert(rt.name.clone(), (cfg.clean_runs, faulty));
        categories.insert(rt.name.clone(), cats);
    }
    let mut variants = Vec::new();
    for v in &cfg.variants {
        let models = train(&training, *v, cfg.detector.extractor)?;
        let mut per_type: BTreeMap<String, Scores> = BTreeMap::new();
        for t in &tests {
            let d = detect_trace(&models, &t.trace, &cfg.detector);
            let (functional, _) = flagged_requests(d.anomalies());
            per_type.entry(t.request_type.clone()).or_default().record(t.faulty, !functional.is_empty());
        }
        let mut total = Scores::default();
        for s in per_type.values() {
            total.add(s);
        }
        variants.push(VariantReport { variant: *v, per_type, total });
    }
    Ok(EvaluationReport { workload: spec.name.clone(), categories, runs, fragments, variants })
}

#[derive(Debug, Clone)]
pub struct PerfConfig {
    pub train_runs: usize,
    pub clean_runs: usize,
    pub slow_runs_per_component: usize,
    pub factor: f64,
    /// Duration noise applied to training and test runs alike.
    pub noise: f64,
    pub seed: u64,
    pub detector: DetectorConfig,
}

impl Default for PerfConfig {
    fn default() -> Self {
        Self {
            train_runs: 20,
            clean_runs: 28,
            slow_runs_per_component: 3,
            factor: 3.0,
            noise: 0.0,
            seed: 1,
            detector: DetectorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerfReport {
    pub slowed_requests: usize,
    pub slowed_detected: usize,
    pub clean_requests: usize,
    pub clean_flagged: usize,
    pub clean_anomalies: usize,
}

impl PerfReport {
    pub fn detection_rate(&self) -> Option<f64> {
        ratio(self.slowed_detected, self.slowed_requests)
    }

    pub fn false_positive_rate(&self) -> Option<f64> {
        ratio(self.clean_flagged, self.clean_requests)
    }

    pub fn to_text(&self) -> String {
        format!(
            "slowed {} detected {} rate {}\nclean {} flagged {} fp_rate {} anomalies {}\n",
            self.slowed_requests,
            self.slowed_detected,
            fmt_opt(self.detection_rate()),
            self.clean_requests,
            self.clean_flagged,
            fmt_opt(self.false_positive_rate()),
            self.clean_anomalies
        )
    }
}

/// Trains pruned aggregate models and counts requests flagged with
/// performance anomalies, with and without injected CPU slowdowns.
pub fn run_perf_campaign(spec: &WorkloadSpec, cfg: &PerfConfig) -> Result<PerfReport, EvalError> {
    let mut noisy = spec.clone();
    noisy.noise = cfg.noise;
    let mut training = Vec::new();
    let mut report = PerfReport::default();
    let mut tests = Vec::new();
    for (ti, rt) in noisy.request_types.iter().enumerate() {
        let one = single_request(&noisy, &rt.name);
        for i in 0..cfg.train_runs {
            training.push(run_workload(&one, &[], seed_for(cfg.seed, ti, 1, i))?.trace);
        }
        for i in 0..cfg.clean_runs {
            tests.push((false, run_workload(&one, &[], seed_for(cfg.seed, ti, 2, i))?.trace));
        }
        let probe = run_workload(&one, &[], seed_for(cfg.seed, ti, 3, 0))?;
        for (ci, c) in noisy.components.iter().enumerate() {
            if probe.manifest.component_events.get(&c.name) <= probe.manifest.boot_events.get(&c.name) {
                continue;
            }
            for i in 0..cfg.slow_runs_per_component {
                let burn = FaultSpec::CpuBurn { component: c.name.clone(), factor: cfg.factor };
                tests.push((true, run_workload(&one, &[burn], seed_for(cfg.seed, ti, 8 + ci as u64, i))?.trace));
            }
        }
    }
    let models = train(&training, Variant::Paths(cfg.train_runs), cfg.detector.extractor)?;
    for (slowed, trace) in &tests {
        let d = detect_trace(&models, trace, &cfg.detector);
        let (_, perf) = flagged_requests(d.anomalies());
        if *slowed {
            report.slowed_requests += 1;
            report.slowed_detected += usize::from(!perf.is_empty());
        } else {
            report.clean_requests += 1;
            report.clean_flagged += usize::from(!perf.is_empty());
            report.clean_anomalies += d.anomalies().iter().filter(|a| !a.kind.is_functional()).count();
        }
    }
    Ok(report)
}

/// Mean payload size and header overhead of one group of sends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overhead {
    pub sends: usize,
    pub mean_payload: f64,
    pub overhead: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadReport {
    pub per_component: BTreeMap<String, Overhead>,
    pub total: Overhead,
}

impl OverheadReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("header_bytes {HEADER_LEN}\n");
        let rows = self.per_component.iter().map(|(c, o)| (c.as_str(), o)).chain([("all", &self.total)]);
        for (c, o) in rows {
            let _ = writeln!(s, "{c:<16} sends {:>6} mean_payload {:>10.1} overhead {:>7.3}%", o.sends, o.mean_payload, o.overhead * 100.0);
        }
        s.push_str("latency overhead needs real interposition and is not measured\n");
        s
    }
}

fn overhead_of(sizes: &[u64]) -> Overhead {
    let mean = sizes.iter().sum::<u64>() as f64 / sizes.len() as f64;
    Overhead { sends: sizes.len(), mean_payload: mean, overhead: traffic_overhead(mean) }
}

/// Traffic overhead of the message header, from the payload sizes of the
/// send events in `trace`.
pub fn traffic_overhead_report(trace: &[TraceEvent]) -> Result<OverheadReport, EvalError> {
    let comps = ComponentList::from_events(trace);
    let mut by: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let mut all = Vec::new();
    for e in trace.iter().filter(|e| e.is_send()) {
        let bytes = e.arg_u64("bytes").unwrap_or(e.return_value.max(0) as u64);
        by.entry(comps.component_of(e.process_key())).or_default().push(bytes);
        all.push(bytes);
    }
    if all.is_empty() {
        return Err(EvalError::NoSends);
    }
    Ok(OverheadReport { per_component: by.iter().map(|(c, v)| (c.clone(), overhead_of(v))).collect(), total: overhead_of(&all) })
}

/// Request types present in a trace's entries.
pub fn request_types(trace: &[TraceEvent]) -> BTreeSet<String> {
    trace.iter().filter_map(|e| e.request_type.clone()).collect()
}
