use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Declarative workload description, normally read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default)]
    pub name: String,
    pub nodes: Vec<NodeSpec>,
    pub components: Vec<ComponentSpec>,
    pub request_types: Vec<RequestTypeSpec>,
    pub scripts: BTreeMap<String, Vec<Step>>,
    #[serde(default)]
    pub run: RunSpec,
    /// Nominal call durations in microseconds; unlisted calls take `default_duration_us`.
    #[serde(default)]
    pub durations: BTreeMap<String, u64>,
    #[serde(default = "default_duration")]
    pub default_duration_us: u64,
    /// Relative duration noise; 0.2 draws each duration from ±20% of nominal.
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_latency")]
    pub link_latency_us: u64,
}

fn default_duration() -> u64 {
    20
}

fn default_latency() -> u64 {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default)]
    pub skew_us: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub name: String,
    /// Nodes hosting one daemon instance each. Empty for programs that only
    /// start through `fork` + `exec`.
    #[serde(default)]
    pub nodes: Vec<String>,
    /// Pool threads serving incoming messages.
    #[serde(default = "one")]
    pub workers: u32,
    /// Threads consuming queue and shared-buffer hand-offs.
    #[serde(default)]
    pub consumers: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestTypeSpec {
    pub name: String,
    pub entry: String,
    pub script: String,
    #[serde(default = "one")]
    pub weight: u32,
    #[serde(default = "default_bytes")]
    pub bytes: usize,
}

fn default_bytes() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default = "one_u64")]
    pub requests: u64,
    /// Gap between request arrivals; 0 submits all at once.
    #[serde(default)]
    pub gap_us: u64,
    /// Restricts generated requests to these types when non-empty.
    #[serde(default)]
    pub only_types: Vec<String>,
}

fn one_u64() -> u64 {
    1
}

impl Default for RunSpec {
    fn default() -> Self {
        Self { requests: 1, gap_us: 0, only_types: Vec::new() }
    }
}

/// One step of a thread script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    /// Plain calls; `"name:120"` overrides the nominal duration.
    Local { calls: Vec<String> },
    Repeat { min: u32, max: u32, body: Vec<Step> },
    Maybe { prob: f64, body: Vec<Step> },
    Spawn {
        script: String,
        #[serde(default = "one")]
        min: u32,
        #[serde(default = "one")]
        max: u32,
        #[serde(default)]
        join: bool,
    },
    Fork {
        script: String,
        #[serde(default)]
        exec: Option<String>,
        #[serde(default)]
        wait: bool,
        #[serde(default)]
        signal: bool,
    },
    Rpc {
        target: String,
        script: String,
        #[serde(default = "default_bytes")]
        bytes: usize,
        #[serde(default = "default_bytes")]
        reply_bytes: usize,
    },
    /// Reply consumed by a separate receiver thread while a sender thread sends.
    RpcAsync {
        target: String,
        script: String,
        #[serde(default = "default_bytes")]
        bytes: usize,
        #[serde(default = "default_bytes")]
        reply_bytes: usize,
    },
    Send {
        target: String,
        script: String,
        #[serde(default = "default_bytes")]
        bytes: usize,
        #[serde(default)]
        datagram: bool,
    },
    Enqueue { target: String, script: String },
    ShmHandoff { target: String, script: String },
    /// A call that fails under a resource-lock fault, running `fail` instead of succeeding.
    Guarded { call: String, #[serde(default)] fail: Vec<Step> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultSpec {
    /// Stops every process of the component right after its `after_events`-th event.
    ComponentCrash { component: String, after_events: u64 },
    ResourceLock { component: String },
    CpuBurn { component: String, factor: f64 },
    NetworkLatency { from: String, to: String, delay_us: u64 },
    DiskFull { component: String, factor: f64 },
}

impl FaultSpec {
    pub fn components(&self) -> Vec<&str> {
        match self {
            Self::ComponentCrash { component, .. }
            | Self::ResourceLock { component }
            | Self::CpuBurn { component, .. }
            | Self::DiskFull { component, .. } => vec![component],
            Self::NetworkLatency { from, to, .. } => vec![from, to],
        }
    }
}

/// Compact form used on the command line: `crash:<component>:<after_events>`,
/// `resource_lock:<component>`, `cpu_burn:<component>:<factor>`,
/// `disk_full:<component>:<factor>`, `network_latency:<from>:<to>:<delay_us>`.
impl std::str::FromStr for FaultSpec {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, SpecError> {
        let bad = || SpecError::Invalid(format!("cannot parse fault `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| parts.get(i).ok_or_else(bad).and_then(|v| v.parse::<f64>().map_err(|_| bad()));
        let name = |i: usize| parts.get(i).filter(|v| !v.is_empty()).map(|v| v.to_string()).ok_or_else(bad);
        let fault = match parts[0] {
            "crash" => Self::ComponentCrash {
                component: name(1)?,
                after_events: parts.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            },
            "resource_lock" => Self::ResourceLock { component: name(1)? },
            "cpu_burn" => Self::CpuBurn { component: name(1)?, factor: num(2)? },
            "disk_full" => Self::DiskFull { component: name(1)?, factor: num(2)? },
            "network_latency" => Self::NetworkLatency {
                from: name(1)?,
                to: name(2)?,
                delay_us: parts.get(3).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            },
            _ => return Err(bad()),
        };
        Ok(fault)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("fault names unknown component `{0}`")]
    UnknownTarget(String),
    #[error("cannot parse workload: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const DISK_CALLS: &[&str] = &["open", "pwrite", "write_file", "fsync", "close"];

impl WorkloadSpec {
    pub fn from_toml(text: &str) -> Result<Self, SpecError> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self, SpecError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn component(&self, name: &str) -> Option<&ComponentSpec> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn nominal(&self, call: &str) -> u64 {
        self.durations.get(call).copied().unwrap_or(self.default_duration_us)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: String| Err(SpecError::Invalid(m));
        let nodes: BTreeSet<&str> = self.nodes.iter().map(|n| n.name.as_str()).collect();
        if nodes.len() != self.nodes.len() || nodes.is_empty() {
            return bad("node names must be unique and non-empty".into());
        }
        let mut seen = BTreeSet::new();
        for c in &self.components {
            if !seen.insert(c.name.as_str()) {
                return bad(format!("duplicate component `{}`", c.name));
            }
            if c.name.is_empty() || c.name.contains(char::is_whitespace) || c.name.contains('@') {
                return bad(format!("component name `{}` must be a single word", c.name));
            }
            if let Some(n) = c.nodes.iter().find(|n| !nodes.contains(n.as_str())) {
                return bad(format!("component `{}` placed on unknown node `{n}`", c.name));
            }
            if !c.nodes.is_empty() && c.workers == 0 {
                return bad(format!("component `{}` needs at least one worker", c.name));
            }
        }
        if self.request_types.is_empty() {
            return bad("no request types".into());
        }
        for r in &self.request_types {
            match self.component(&r.entry) {
                Some(c) if !c.nodes.is_empty() => {}
                _ => return bad(format!("request type `{}` enters at unknown or unplaced component `{}`", r.name, r.entry)),
            }
            self.check_script_ref(&r.script, &format!("request type `{}`", r.name))?;
        }
        for t in &self.run.only_types {
            if !self.request_types.iter().any(|r| &r.name == t) {
                return bad(format!("run selects unknown request type `{t}`"));
            }
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad("noise must be in [0, 1)".into());
        }
        for (name, steps) in &self.scripts {
            if steps.is_empty() {
                return bad(format!("script `{name}` is empty"));
            }
            // an optional tail may be skipped, so the step before it must qualify too
            match steps.iter().rev().find(|s| !matches!(s, Step::Maybe { .. })) {
                Some(Step::Local { .. } | Step::Rpc { .. } | Step::Send { .. } | Step::Enqueue { .. } | Step::ShmHandoff { .. } | Step::Guarded { .. }) => {}
                _ => return bad(format!("script `{name}` must end with a plain call, message or hand-off step")),
            }
            self.check_steps(name, steps)?;
        }
        Ok(())
    }

    fn check_script_ref(&self, script: &str, ctx: &str) -> Result<(), SpecError> {
        if self.scripts.contains_key(script) {
            Ok(())
        } else {
            Err(SpecError::Invalid(format!("{ctx} names unknown script `{script}`")))
        }
    }

    fn check_target(&self, target: &str, ctx: &str, served_by: fn(&ComponentSpec) -> bool) -> Result<(), SpecError> {
        match self.component(target) {
            Some(c) if !c.nodes.is_empty() && served_by(c) => Ok(()),
            Some(_) => Err(SpecError::Invalid(format!("{ctx}: component `{target}` has no daemon threads to serve it"))),
            None => Err(SpecError::Invalid(format!("{ctx}: unknown target `{target}`"))),
        }
    }

    fn check_steps(&self, name: &str, steps: &[Step]) -> Result<(), SpecError> {
        let ctx = format!("script `{name}`");
        for s in steps {
            match s {
                Step::Local { calls } => {
                    if calls.is_empty() {
                        return Err(SpecError::Invalid(format!("{ctx}: empty local step")));
                    }
                    for c in calls {
                        parse_call(c).map_err(|m| SpecError::Invalid(format!("{ctx}: {m}")))?;
                    }
                }
                Step::Repeat { min, max, body } => {
                    if min > max || *max == 0 || body.is_empty() {
                        return Err(SpecError::Invalid(format!("{ctx}: repeat needs 1 <= max, min <= max and a body")));
                    }
                    self.check_steps(name, body)?;
                }
                Step::Maybe { prob, body } => {
                    if !(0.0..=1.0).contains(prob) || body.is_empty() {
                        return Err(SpecError::Invalid(format!("{ctx}: maybe needs prob in [0,1] and a body")));
                    }
                    if body.iter().any(|b| !matches!(b, Step::Local { .. })) {
                        return Err(SpecError::Invalid(format!("{ctx}: maybe bodies hold local calls only")));
                    }
                    self.check_steps(name, body)?;
                }
                Step::Spawn { script, min, max, .. } => {
                    if *min == 0 || min > max {
                        return Err(SpecError::Invalid(format!("{ctx}: spawn width must satisfy 1 <= min <= max")));
                    }
                    self.check_script_ref(script, &ctx)?;
                }
                Step::Fork { script, exec, .. } => {
                    self.check_script_ref(script, &ctx)?;
                    if let Some(p) = exec {
                        if self.component(p).is_none() {
                            return Err(SpecError::Invalid(format!("{ctx}: exec of undeclared program `{p}`")));
                        }
                    }
                }
                Step::Rpc { target, script, .. } | Step::RpcAsync { target, script, .. } | Step::Send { target, script, .. } => {
                    self.check_target(target, &ctx, |c| c.workers > 0)?;
                    self.check_script_ref(script, &ctx)?;
                }
                Step::Enqueue { target, script } | Step::ShmHandoff { target, script } => {
                    self.check_target(target, &ctx, |c| c.consumers > 0)?;
                    self.check_script_ref(script, &ctx)?;
                }
                Step::Guarded { call, fail } => {
                    parse_call(call).map_err(|m| SpecError::Invalid(format!("{ctx}: {m}")))?;
                    self.check_steps(name, fail)?;
                }
            }
        }
        Ok(())
    }

    pub fn check_faults(&self, faults: &[FaultSpec]) -> Result<(), SpecError> {
        for f in faults {
            for c in f.components() {
                if self.component(c).is_none() {
                    return Err(SpecError::UnknownTarget(c.to_string()));
                }
            }
        }
        Ok(())
    }
}

/// Splits `"name:dur"` into its parts.
pub(crate) fn parse_call(s: &str) -> Result<(&str, Option<u64>), String> {
    let (name, dur) = match s.split_once(':') {
        Some((n, d)) => (n, Some(d.parse::<u64>().map_err(|_| format!("bad duration in `{s}`"))?)),
        None => (s, None),
    };
    if name.is_empty() || name.contains(char::is_whitespace) || name.contains('@') {
        return Err(format!("bad call name `{s}`"));
    }
    Ok((name, dur))
}

/// Flattened, RNG-resolved instruction for one simulated thread.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Instr {
    Call { name: String, dur: u64, optional: bool },
    Guarded { name: String, dur: u64, fail: Vec<Step> },
    Spawn { script: String, slot: usize },
    /// Creates a thread running the given instructions.
    SpawnRaw { body: Vec<Instr>, slot: usize },
    Join { slot: usize },
    Fork { script: String, exec: Option<String>, signal: bool, slot: usize },
    Kill { slot: usize },
    WaitPid { slot: usize },
    Send { target: String, script: String, bytes: usize, mode: SendMode },
    RecvReply,
    Put { target: String, script: String, shm: bool },
    Sigwait,
    Exec { prog: String },
    Exit,
    Reply,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum SendMode {
    Rpc { reply_bytes: usize },
    /// Reply goes to the thread stored in this slot.
    RpcTo { reply_bytes: usize, slot: usize },
    OneWay { datagram: bool },
}

/// Expands steps into instructions, drawing counts and choices from `rng`
/// and allocating join slots from `next_slot`.
pub(crate) fn expand(spec: &WorkloadSpec, steps: &[Step], rng: &mut impl Rng, next_slot: &mut usize, out: &mut Vec<Instr>) {
    fn slot(next_slot: &mut usize) -> usize {
        *next_slot += 1;
        *next_slot
    }
    for s in steps {
        match s {
            Step::Local { calls } => {
                for c in calls {
                    let (name, dur) = parse_call(c).expect("validated");
                    out.push(Instr::Call { name: name.into(), dur: dur.unwrap_or_else(|| spec.nominal(name)), optional: false });
                }
            }
            Step::Repeat { min, max, body } => {
                for _ in 0..rng.gen_range(*min..=*max) {
                    expand(spec, body, rng, next_slot, out);
                }
            }
            Step::Maybe { prob, body } => {
                if rng.gen_bool(*prob) {
                    let start = out.len();
                    expand(spec, body, rng, next_slot, out);
                    for i in &mut out[start..] {
                        if let Instr::Call { optional, .. } = i {
                            *optional = true;
                        }
                    }
                }
            }
            Step::Spawn { script, min, max, join } => {
                let width = rng.gen_range(*min..=*max);
                let slots: Vec<usize> = (0..width).map(|_| slot(next_slot)).collect();
                out.extend(slots.iter().map(|s| Instr::Spawn { script: script.clone(), slot: *s }));
                if *join {
                    out.extend(slots.iter().map(|s| Instr::Join { slot: *s }));
                }
            }
            Step::Fork { script, exec, wait, signal } => {
                let s = slot(next_slot);
                out.push(Instr::Fork { script: script.clone(), exec: exec.clone(), signal: *signal, slot: s });
                if *signal {
                    out.push(Instr::Kill { slot: s });
                }
                if *wait {
                    out.push(Instr::WaitPid { slot: s });
                }
            }
            Step::Rpc { target, script, bytes, reply_bytes } => {
                out.push(Instr::Send { target: target.clone(), script: script.clone(), bytes: *bytes, mode: SendMode::Rpc { reply_bytes: *reply_bytes } });
                out.push(Instr::RecvReply);
            }
            Step::RpcAsync { target, script, bytes, reply_bytes } => {
                let (rs, ss) = (slot(next_slot), slot(next_slot));
                let receiver = vec![Instr::Call { name: "epoll_wait".into(), dur: spec.nominal("epoll_wait"), optional: false }, Instr::RecvReply];
                let sender = vec![Instr::Send {
                    target: target.clone(),
                    script: script.clone(),
                    bytes: *bytes,
                    mode: SendMode::RpcTo { reply_bytes: *reply_bytes, slot: rs },
                }];
                out.push(Instr::SpawnRaw { body: receiver, slot: rs });
                out.push(Instr::SpawnRaw { body: sender, slot: ss });
                out.push(Instr::Join { slot: ss });
                out.push(Instr::Join { slot: rs });
            }
            Step::Send { target, script, bytes, datagram } => {
                out.push(Instr::Send { target: target.clone(), script: script.clone(), bytes: *bytes, mode: SendMode::OneWay { datagram: *datagram } });
            }
            Step::Enqueue { target, script } => out.push(Instr::Put { target: target.clone(), script: script.clone(), shm: false }),
            Step::ShmHandoff { target, script } => out.push(Instr::Put { target: target.clone(), script: script.clone(), shm: true }),
            Step::Guarded { call, fail } => {
                let (name, dur) = parse_call(call).expect("validated");
                out.push(Instr::Guarded { name: name.into(), dur: dur.unwrap_or_else(|| spec.nominal(name)), fail: fail.clone() });
            }
        }
    }
}
