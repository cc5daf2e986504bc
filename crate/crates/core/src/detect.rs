//! Online anomaly detection against trained automata.
//!
//! Events stream in one at a time. Each is linked to a parent with the same
//! cascade the batch linker uses, routed to the request session that owns
//! the parent, and replayed through that request type's full automaton.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use crate::event::{EventId, RelationshipType, TraceEvent};
use crate::fsa::{ComponentList, Fsa};
use crate::rep::{arbitration_key, default_data_extractor, DataExtractor, Edge, LinkIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnomalyKind {
    FunctionalNoTransition,
    FunctionalCoreUncovered,
    PerformanceSlowTransition,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::FunctionalNoTransition => "functional_no_transition",
            AnomalyKind::FunctionalCoreUncovered => "functional_core_uncovered",
            AnomalyKind::PerformanceSlowTransition => "performance_slow_transition",
        }
    }

    pub fn is_functional(self) -> bool {
        self != AnomalyKind::PerformanceSlowTransition
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anomaly {
    pub kind: AnomalyKind,
    /// Entry event of the request.
    pub request: EventId,
    pub request_type: String,
    /// Offending event; `None` for coverage anomalies.
    pub event: Option<EventId>,
    /// Transition label, or the missing labels for coverage anomalies.
    pub transition: String,
    pub component: String,
    /// Events in the request's path when the anomaly was raised.
    pub rep_events: usize,
    pub measured_us: Option<f64>,
    pub annotated_us: Option<f64>,
}

impl fmt::Display for Anomaly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} request={} type={}", self.kind.as_str(), self.request, self.request_type)?;
        match self.event {
            Some(e) => write!(f, " event={e}")?,
            None => write!(f, " event=-")?,
        }
        write!(f, " transition={} component={} rep_events={}", self.transition, self.component, self.rep_events)?;
        if let (Some(m), Some(a)) = (self.measured_us, self.annotated_us) {
            write!(f, " measured_us={m:.1} annotated_us={a:.1}")?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DetectError {
    #[error("event {0} is not a request entry")]
    NotAnEntry(EventId),
    #[error("no trained automaton for request type `{0}`")]
    UnknownType(String),
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    /// A request with no new event for this long is finalized.
    pub idle_us: u64,
    /// Slowdown tolerated over the annotated mean, in percent.
    pub perf_threshold_pct: f64,
    /// Events that may wait for a cross-node dependency before the oldest is forced.
    pub pending_limit: usize,
    pub extractor: Option<DataExtractor>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            idle_us: 5_000_000,
            perf_threshold_pct: 100.0,
            pending_limit: 10_000,
            extractor: Some(default_data_extractor),
        }
    }
}

/// Detection state of one request.
#[derive(Debug, Clone)]
pub struct Session {
    pub root: EventId,
    pub request_type: String,
    pub events: Vec<EventId>,
    pub edges: Vec<Edge>,
    states: HashMap<EventId, BTreeSet<usize>>,
    consumed: HashMap<EventId, u8>,
    tokens: BTreeMap<usize, usize>,
    sticky: BTreeSet<usize>,
    traversed: BTreeSet<usize>,
    pub last_ts: u64,
    pub anomalies: usize,
}

impl Session {
    /// Active states, counted with multiplicity; activated concurrency
    /// points stay in the set.
    pub fn tokens(&self) -> &BTreeMap<usize, usize> {
        &self.tokens
    }

    pub fn token_count(&self) -> usize {
        self.tokens.values().sum()
    }

    pub fn traversed(&self) -> &BTreeSet<usize> {
        &self.traversed
    }

    pub fn states_of(&self, e: EventId) -> Option<&BTreeSet<usize>> {
        self.states.get(&e)
    }

    fn add_tokens(&mut self, states: &BTreeSet<usize>) {
        for s in states {
            *self.tokens.entry(*s).or_default() += 1;
        }
    }

    /// Moves the parent's tokens to the child. A creation event hands its
    /// tokens out twice, once for each side of the split.
    fn take_tokens(&mut self, parent: EventId, splits: bool, f: &Fsa) {
        let used = self.consumed.entry(parent).or_default();
        *used += 1;
        if *used > if splits { 2 } else { 1 } {
            return;
        }
        let mut keep_one = splits && *used == 1;
        for s in self.states.get(&parent).cloned().unwrap_or_default() {
            if f.states[s].concurrency {
                self.sticky.insert(s);
                continue;
            }
            if std::mem::take(&mut keep_one) {
                continue;
            }
            if let Some(n) = self.tokens.get_mut(&s) {
                *n -= 1;
                if *n == 0 {
                    self.tokens.remove(&s);
                }
            }
        }
    }
}

/// Streams events into per-request sessions and reports anomalies.
#[derive(Debug)]
pub struct Detector {
    models: BTreeMap<String, Fsa>,
    config: DetectorConfig,
    index: LinkIndex,
    comps: ComponentList,
    pending: BTreeMap<u32, VecDeque<TraceEvent>>,
    pending_len: usize,
    owner: HashMap<EventId, EventId>,
    sessions: BTreeMap<EventId, Session>,
    closed: BTreeSet<EventId>,
    log: Vec<Anomaly>,
    diagnostics: Vec<String>,
    clock: u64,
}

impl Detector {
    /// `models` maps each request type to its full automaton; core
    /// transitions are the ones flagged core in it.
    pub fn new(models: BTreeMap<String, Fsa>, config: DetectorConfig) -> Self {
        Self {
            index: LinkIndex::new(config.extractor),
            models,
            config,
            comps: ComponentList::default(),
            pending: BTreeMap::new(),
            pending_len: 0,
            owner: HashMap::new(),
            sessions: BTreeMap::new(),
            closed: BTreeSet::new(),
            log: Vec::new(),
            diagnostics: Vec::new(),
            clock: 0,
        }
    }

    pub fn classify_request(&self, entry: &TraceEvent) -> Result<&Fsa, DetectError> {
        let ty = entry.request_type.as_deref().ok_or(DetectError::NotAnEntry(entry.event_id))?;
        self.models.get(ty).ok_or_else(|| DetectError::UnknownType(ty.to_string()))
    }

    pub fn sessions(&self) -> &BTreeMap<EventId, Session> {
        &self.sessions
    }

    /// Every anomaly reported so far, in emission order.
    pub fn anomalies(&self) -> &[Anomaly] {
        &self.log
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    pub fn pending(&self) -> usize {
        self.pending_len
    }

    /// Feeds one event; returns the anomalies it caused, including requests
    /// finalized because the event's timestamp moved the clock past their
    /// idle deadline.
    pub fn ingest(&mut self, e: TraceEvent) -> Vec<Anomaly> {
        let start = self.log.len();
        if let Err(err) = e.validate() {
            self.diagnostics.push(format!("rejected {}: {err}", e.event_id));
            return Vec::new();
        }
        self.comps.observe(&e);
        let ts = e.timestamp;
        self.pending.entry(e.event_id.node).or_default().push_back(e);
        self.pending_len += 1;
        self.drain();
        while self.pending_len > self.config.pending_limit {
            self.force_oldest();
        }
        self.clock = self.clock.max(ts);
        self.expire();
        self.log[start..].to_vec()
    }

    /// Moves the clock to `now` and finalizes idle requests.
    pub fn advance(&mut self, now: u64) -> Vec<Anomaly> {
        let start = self.log.len();
        self.clock = self.clock.max(now);
        self.expire();
        self.log[start..].to_vec()
    }

    /// End of stream: processes whatever still waits and finalizes every
    /// open request.
    pub fn finish(&mut self) -> Vec<Anomaly> {
        let start = self.log.len();
        self.drain();
        while self.pending_len > 0 {
            self.force_oldest();
        }
        let open: Vec<EventId> = self.sessions.keys().copied().collect();
        for r in open {
            self.finalize(r);
        }
        self.log[start..].to_vec()
    }

    fn expire(&mut self) {
        let idle: Vec<EventId> = self
            .sessions
            .values()
            .filter(|s| self.clock.saturating_sub(s.last_ts) >= self.config.idle_us)
            .map(|s| s.root)
            .collect();
        for r in idle {
            self.finalize(r);
        }
    }

    fn drain(&mut self) {
        loop {
            let mut progressed = false;
            let nodes: Vec<u32> = self.pending.keys().copied().collect();
            for n in nodes {
                while let Some(e) = self.pending.get(&n).and_then(|q| q.front()) {
                    if !self.index.is_ready(e) {
                        break;
                    }
                    let e = self.pending.get_mut(&n).unwrap().pop_front().unwrap();
                    self.pending_len -= 1;
                    self.process(e);
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        self.pending.retain(|_, q| !q.is_empty());
    }

    /// Processes the earliest waiting event even though its dependency is missing.
    fn force_oldest(&mut self) {
        let Some(node) = self
            .pending
            .iter()
            .filter_map(|(n, q)| q.front().map(|e| (e.timestamp, *n)))
            .min()
            .map(|(_, n)| n)
        else {
            return;
        };
        let q = self.pending.get_mut(&node).unwrap();
        let e = q.pop_front().unwrap();
        self.pending_len -= 1;
        self.diagnostics.push(format!("{} processed without its cross-node dependency", e.event_id));
        self.process(e);
        self.drain();
    }

    fn process(&mut self, e: TraceEvent) {
        let parents = match self.index.parents(&e) {
            Ok(p) => p,
            Err(err) => {
                self.diagnostics.push(format!("{}: {err}", e.event_id));
                Vec::new()
            }
        };
        self.index.insert(e.clone());
        let id = e.event_id;
        if parents.is_empty() {
            if e.request_type.is_some() {
                self.open(&e);
            }
            return;
        }
        let tree = parents
            .iter()
            .map(|(p, rel)| Edge { parent: *p, child: id, rel: *rel })
            .min_by_key(|edge| arbitration_key(self.index.get(&edge.parent), edge))
            .unwrap();
        let Some(root) = self.owner.get(&tree.parent).copied() else {
            if e.request_type.is_some() {
                self.open(&e);
            }
            return;
        };
        if self.closed.contains(&root) {
            self.diagnostics.push(format!("{id} arrived after request {root} was finalized"));
            return;
        }
        self.owner.insert(id, root);
        self.step(root, &e, tree, &parents);
    }

    fn open(&mut self, e: &TraceEvent) {
        let ty = match self.classify_request(e) {
            Ok(f) => f.request_type.clone(),
            Err(err) => {
                self.diagnostics.push(format!("{}: {err}", e.event_id));
                return;
            }
        };
        let id = e.event_id;
        self.owner.insert(id, id);
        let session = Session {
            root: id,
            request_type: ty,
            events: Vec::new(),
            edges: Vec::new(),
            states: HashMap::new(),
            consumed: HashMap::new(),
            tokens: BTreeMap::new(),
            sticky: BTreeSet::new(),
            traversed: BTreeSet::new(),
            last_ts: e.timestamp,
            anomalies: 0,
        };
        self.sessions.insert(id, session);
        let st0 = Edge { parent: id, child: id, rel: RelationshipType::Tcr };
        self.step(id, e, st0, &[]);
    }

    /// Fires the transitions matching `e` from its tree parent's states.
    fn step(&mut self, root: EventId, e: &TraceEvent, tree: Edge, parents: &[(EventId, RelationshipType)]) {
        let label = self.comps.signature(e);
        let component = self.comps.component_of(e.process_key());
        let threshold = 1.0 + self.config.perf_threshold_pct / 100.0;
        let s = self.sessions.get_mut(&root).unwrap();
        let f = &self.models[&s.request_type];
        let id = e.event_id;
        let is_entry = tree.parent == id;
        let from = if is_entry { BTreeSet::from([0]) } else { s.states.get(&tree.parent).cloned().unwrap_or_default() };
        let (to, fired) = f.step(&from, &label);
        s.events.push(id);
        if !is_entry {
            s.edges.extend(parents.iter().map(|(p, rel)| Edge { parent: *p, child: id, rel: *rel }));
        }
        s.last_ts = s.last_ts.max(e.timestamp);
        let mut raised = Vec::new();
        if to.is_empty() && !from.is_empty() {
            raised.push((AnomalyKind::FunctionalNoTransition, None, None));
        }
        let annotated = fired.iter().filter_map(|t| f.transition(*t).mean_duration()).fold(None, |m: Option<f64>, d| {
            Some(m.map_or(d, |m| m.max(d)))
        });
        if let Some(a) = annotated {
            let measured = e.duration as f64;
            if measured > a * threshold {
                raised.push((AnomalyKind::PerformanceSlowTransition, Some(measured), Some(a)));
            }
        }
        s.traversed.extend(fired.iter().copied());
        if !to.is_empty() {
            if !is_entry {
                let splits = self.index.get(&tree.parent).is_some_and(TraceEvent::is_creation);
                s.take_tokens(tree.parent, splits, f);
            }
            s.add_tokens(&to);
        }
        s.states.insert(id, to);
        s.anomalies += raised.len();
        let (request_type, rep_events) = (s.request_type.clone(), s.events.len());
        for (kind, measured_us, annotated_us) in raised {
            self.log.push(Anomaly {
                kind,
                request: root,
                request_type: request_type.clone(),
                event: Some(id),
                transition: label.clone(),
                component: component.clone(),
                rep_events,
                measured_us,
                annotated_us,
            });
        }
    }

    fn finalize(&mut self, root: EventId) {
        let Some(s) = self.sessions.remove(&root) else { return };
        self.closed.insert(root);
        let f = &self.models[&s.request_type];
        let missing: Vec<_> = f
            .transitions()
            .filter(|t| t.core && t.kind == crate::fsa::TransitionKind::Tree && !s.traversed.contains(&t.index))
            .collect();
        if missing.is_empty() {
            return;
        }
        let labels: Vec<&str> = missing.iter().map(|t| t.label).collect();
        let component = labels[0].rsplit_once('@').map_or("", |(_, c)| c).to_string();
        self.log.push(Anomaly {
            kind: AnomalyKind::FunctionalCoreUncovered,
            request: root,
            request_type: s.request_type.clone(),
            event: None,
            transition: labels.join(","),
            component,
            rep_events: s.events.len(),
            measured_us: None,
            annotated_us: None,
        });
    }
}

/// Requests flagged by at least one anomaly, split by kind.
pub fn flagged_requests(anomalies: &[Anomaly]) -> (BTreeSet<EventId>, BTreeSet<EventId>) {
    let mut functional = BTreeSet::new();
    let mut performance = BTreeSet::new();
    for a in anomalies {
        if a.kind.is_functional() {
            functional.insert(a.request);
        } else {
            performance.insert(a.request);
        }
    }
    (functional, performance)
}
