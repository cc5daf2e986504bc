//! Event linking: turns a set of trace events into the per-request DAG of
//! causal edges, counts fragments and projects the DAG onto a tree.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use petgraph::graph::{DiGraph, NodeIndex};
use petgraph::unionfind::UnionFind;

use crate::event::{
    decode_event, encode_event, EventError, EventId, ProcessKey, RelationshipType, ThreadKey,
    TraceEvent, Uid, KILL, QUEUE_GET, QUEUE_PUT, SHM_READ, SHM_WRITE, SIGWAIT, THREAD_JOIN, WAIT,
    WAITPID,
};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LinkError {
    #[error("event {event}: ambiguous creation parent among {candidates:?}")]
    Ambiguous { event: EventId, candidates: Vec<EventId> },
    #[error("cycle detected through event {0}")]
    Cycle(EventId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub parent: EventId,
    pub child: EventId,
    pub rel: RelationshipType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataAccess {
    Write,
    Read,
}

/// Maps an event to the datum it writes or reads, if any.
pub type DataExtractor = fn(&TraceEvent) -> Option<(String, DataAccess)>;

/// Queue and shared-buffer calls tagged with a `data` argument.
pub fn default_data_extractor(e: &TraceEvent) -> Option<(String, DataAccess)> {
    let access = match e.call_name.as_str() {
        QUEUE_PUT | SHM_WRITE => DataAccess::Write,
        QUEUE_GET | SHM_READ => DataAccess::Read,
        _ => return None,
    };
    e.arg("data").map(|d| (d.to_string(), access))
}

/// Lookup structures shared by batch linking and the online detector.
///
/// Events must be inserted in per-node sequence order; events of different
/// nodes may interleave arbitrarily.
#[derive(Debug, Default, Clone)]
pub struct LinkIndex {
    events: HashMap<EventId, TraceEvent>,
    sends: HashMap<Uid, EventId>,
    threads: HashMap<ThreadKey, Vec<u64>>,
    processes: HashMap<ProcessKey, Vec<(u64, u64)>>,
    thread_creates: HashMap<ThreadKey, Vec<EventId>>,
    process_creates: HashMap<ProcessKey, Vec<EventId>>,
    kills: HashMap<ProcessKey, Vec<EventId>>,
    sigwaits: HashMap<ProcessKey, Vec<u64>>,
    writes: HashMap<String, Vec<EventId>>,
    reads: HashMap<String, Vec<EventId>>,
    extractor: Option<DataExtractor>,
}

impl LinkIndex {
    pub fn new(extractor: Option<DataExtractor>) -> Self {
        Self { extractor, ..Default::default() }
    }

    pub fn get(&self, id: &EventId) -> Option<&TraceEvent> {
        self.events.get(id)
    }

    pub fn contains(&self, id: &EventId) -> bool {
        self.events.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn insert(&mut self, e: TraceEvent) {
        let id = e.event_id;
        if e.is_send() {
            if let Some(m) = e.msg_id {
                self.sends.insert(m, id);
            }
        }
        insert_sorted(self.threads.entry(e.thread_key()).or_default(), id.seq);
        let pe = self.processes.entry(e.process_key()).or_default();
        let at = pe.partition_point(|(s, _)| *s < id.seq);
        pe.insert(at, (id.seq, e.thread_id));
        if e.is_thread_create() {
            let child = ThreadKey { node: e.node_id, pid: e.process_id, tid: e.return_value as u64 };
            self.thread_creates.entry(child).or_default().push(id);
        } else if e.is_process_create() {
            let child = ProcessKey { node: e.node_id, pid: e.return_value as u64 };
            self.process_creates.entry(child).or_default().push(id);
        }
        if e.call_name == KILL {
            if let Some(target) = e.arg_u64("pid") {
                let v = self.kills.entry(ProcessKey { node: e.node_id, pid: target }).or_default();
                let at = v.partition_point(|k| k.seq < id.seq);
                v.insert(at, id);
            }
        }
        if e.call_name == SIGWAIT {
            insert_sorted(self.sigwaits.entry(e.process_key()).or_default(), id.seq);
        }
        if let Some((data, access)) = self.extractor.and_then(|x| x(&e)) {
            let v = match access {
                DataAccess::Write => self.writes.entry(data).or_default(),
                DataAccess::Read => self.reads.entry(data).or_default(),
            };
            let at = v.partition_point(|k| *k < id);
            v.insert(at, id);
        }
        self.events.insert(id, e);
    }

    fn thread_prefix(&self, e: &TraceEvent) -> &[u64] {
        match self.threads.get(&e.thread_key()) {
            Some(v) => &v[..v.partition_point(|s| *s < e.event_id.seq)],
            None => &[],
        }
    }

    /// Single-parent cascade: message pairing, same-thread succession, then
    /// thread creation, then process creation.
    pub fn get_parent(&self, e: &TraceEvent) -> Result<Option<(EventId, RelationshipType)>, LinkError> {
        if e.is_recv() {
            if let Some(send) = e.msg_id.and_then(|m| self.sends.get(&m)) {
                return Ok(Some((*send, RelationshipType::Comr)));
            }
        }
        let node = e.node_id;
        for seq in self.thread_prefix(e).iter().rev() {
            let p = &self.events[&EventId::new(node, *seq)];
            // the event after a send runs under the send's message id
            if p.msg_ctx_id == e.msg_ctx_id || (p.is_send() && p.msg_id == Some(e.msg_ctx_id)) {
                return Ok(Some((p.event_id, RelationshipType::Tcr)));
            }
        }
        let pick = |cands: Option<&Vec<EventId>>| -> Result<Option<EventId>, LinkError> {
            let found: Vec<EventId> = cands
                .into_iter()
                .flatten()
                .filter(|c| c.seq < e.event_id.seq && self.events[c].msg_ctx_id == e.msg_ctx_id)
                .copied()
                .collect();
            match found.len() {
                0 => Ok(None),
                1 => Ok(Some(found[0])),
                _ => Err(LinkError::Ambiguous { event: e.event_id, candidates: found }),
            }
        };
        if let Some(p) = pick(self.thread_creates.get(&e.thread_key()))? {
            return Ok(Some((p, RelationshipType::Topcr)));
        }
        if let Some(p) = pick(self.process_creates.get(&e.process_key()))? {
            return Ok(Some((p, RelationshipType::Topcr)));
        }
        Ok(None)
    }

    /// Synchronization parents of `e`, derived from the call that precedes it
    /// in its thread (waitpid/wait, pthread_join, sigwait).
    pub fn sync_parents(&self, e: &TraceEvent, tree_parent: Option<EventId>) -> Vec<(EventId, RelationshipType)> {
        let Some(prev_seq) = self.thread_prefix(e).last() else { return Vec::new() };
        let prev = &self.events[&EventId::new(e.node_id, *prev_seq)];
        let node = e.node_id;
        let before = |seqs: Option<Vec<u64>>| seqs.and_then(|v| v.into_iter().filter(|s| *s < prev.event_id.seq).max());
        let target_last = match prev.call_name.as_str() {
            WAITPID | WAIT => {
                let pid = prev.arg_u64("pid").unwrap_or(prev.return_value.max(0) as u64);
                before(self.processes.get(&ProcessKey { node, pid }).map(|v| v.iter().map(|(s, _)| *s).collect()))
                    .map(|s| EventId::new(node, s))
            }
            THREAD_JOIN => prev.arg_u64("tid").and_then(|tid| {
                before(self.threads.get(&ThreadKey { node, pid: prev.process_id, tid }).cloned())
                    .map(|s| EventId::new(node, s))
            }),
            SIGWAIT => {
                let waits = self.sigwaits.get(&prev.process_key());
                let rank = waits.map(|w| w.partition_point(|s| *s < prev.event_id.seq));
                rank.and_then(|r| self.kills.get(&prev.process_key()).and_then(|k| k.get(r).copied()))
            }
            _ => return Vec::new(),
        };
        let mut out = Vec::new();
        if let Some(t) = target_last {
            out.push((t, RelationshipType::Synr));
        }
        if tree_parent != Some(prev.event_id) {
            out.push((prev.event_id, RelationshipType::Synr));
        }
        out
    }

    /// Data-dependency parent of a read: the write of the same datum with the same rank.
    pub fn data_parent(&self, e: &TraceEvent) -> Option<EventId> {
        let (data, access) = self.extractor.and_then(|x| x(e))?;
        if access != DataAccess::Read {
            return None;
        }
        let rank = self.reads.get(&data).map_or(0, |r| r.partition_point(|r| *r < e.event_id));
        self.writes.get(&data)?.get(rank).copied()
    }

    /// Whether the events `e` depends on across nodes have been indexed: the
    /// send of a received message and, for reads, the write of the same rank.
    /// Request entries never wait.
    pub fn is_ready(&self, e: &TraceEvent) -> bool {
        if e.is_recv() && e.request_type.is_none() {
            if let Some(m) = e.msg_id {
                if !self.sends.contains_key(&m) {
                    return false;
                }
            }
        }
        match self.extractor.and_then(|x| x(e)) {
            Some((data, DataAccess::Read)) => {
                let rank = self.reads.get(&data).map_or(0, Vec::len);
                self.writes.get(&data).map_or(0, Vec::len) > rank
            }
            _ => true,
        }
    }

    /// Every parent edge of `e` that the indexed events support.
    pub fn parents(&self, e: &TraceEvent) -> Result<Vec<(EventId, RelationshipType)>, LinkError> {
        let mut out = Vec::new();
        let gp = self.get_parent(e)?;
        out.extend(gp);
        out.extend(self.sync_parents(e, gp.map(|p| p.0)));
        out.extend(self.data_parent(e).map(|p| (p, RelationshipType::Ddr)));
        Ok(out)
    }
}

fn insert_sorted(v: &mut Vec<u64>, seq: u64) {
    match v.last() {
        Some(last) if *last > seq => {
            let at = v.partition_point(|s| *s < seq);
            v.insert(at, seq);
        }
        _ => v.push(seq),
    }
}

/// Events plus typed causal edges.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RepGraph {
    pub events: BTreeMap<EventId, TraceEvent>,
    pub edges: BTreeSet<Edge>,
}

/// Single-parent projection of a [`RepGraph`] with the dropped edges kept aside.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RepTree {
    pub graph: RepGraph,
    pub removed: Vec<Edge>,
    parent: BTreeMap<EventId, (EventId, RelationshipType)>,
    children: BTreeMap<EventId, Vec<(EventId, RelationshipType)>>,
}

fn sorted_events(events: impl IntoIterator<Item = TraceEvent>) -> Vec<TraceEvent> {
    let mut v: Vec<TraceEvent> = events.into_iter().collect();
    v.sort_by_key(|e| e.event_id);
    v
}

/// Links types 1–4 over a complete event set and checks acyclicity.
pub fn link_events(events: impl IntoIterator<Item = TraceEvent>) -> Result<RepGraph, LinkError> {
    let events = sorted_events(events);
    let mut index = LinkIndex::new(None);
    for e in &events {
        index.insert(e.clone());
    }
    let mut graph = RepGraph::default();
    for e in &events {
        for (parent, rel) in index.parents(e)? {
            graph.edges.insert(Edge { parent, child: e.event_id, rel });
        }
    }
    graph.events = events.into_iter().map(|e| (e.event_id, e)).collect();
    graph.check_acyclic()?;
    Ok(graph)
}

/// Data-dependency edges for `events`, plus the reads that found no write.
pub fn link_data_dependency(events: &[TraceEvent], extractor: DataExtractor) -> (Vec<Edge>, Vec<EventId>) {
    let mut writes: BTreeMap<String, Vec<EventId>> = BTreeMap::new();
    let mut reads: BTreeMap<String, Vec<EventId>> = BTreeMap::new();
    for e in events {
        match extractor(e) {
            Some((d, DataAccess::Write)) => writes.entry(d).or_default().push(e.event_id),
            Some((d, DataAccess::Read)) => reads.entry(d).or_default().push(e.event_id),
            None => {}
        }
    }
    let mut edges = Vec::new();
    let mut unmatched = Vec::new();
    for (data, mut rs) in reads {
        rs.sort();
        let mut ws = writes.remove(&data).unwrap_or_default();
        ws.sort();
        for (i, r) in rs.into_iter().enumerate() {
            match ws.get(i) {
                Some(w) => edges.push(Edge { parent: *w, child: r, rel: RelationshipType::Ddr }),
                None => unmatched.push(r),
            }
        }
    }
    (edges, unmatched)
}

/// Full linking: types 1–4, optionally data dependencies, then the cycle check.
pub fn build_rep(events: impl IntoIterator<Item = TraceEvent>, extractor: Option<DataExtractor>) -> Result<(RepGraph, Vec<EventId>), LinkError> {
    let mut graph = link_events(events)?;
    let mut unmatched = Vec::new();
    if let Some(x) = extractor {
        let all: Vec<TraceEvent> = graph.events.values().cloned().collect();
        let (edges, um) = link_data_dependency(&all, x);
        graph.edges.extend(edges);
        unmatched = um;
        graph.check_acyclic()?;
    }
    Ok((graph, unmatched))
}

impl RepGraph {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn petgraph(&self) -> (DiGraph<EventId, ()>, BTreeMap<EventId, NodeIndex>) {
        let mut g = DiGraph::with_capacity(self.events.len(), self.edges.len());
        let idx: BTreeMap<EventId, NodeIndex> = self.events.keys().map(|id| (*id, g.add_node(*id))).collect();
        for e in &self.edges {
            if let (Some(a), Some(b)) = (idx.get(&e.parent), idx.get(&e.child)) {
                g.add_edge(*a, *b, ());
            }
        }
        (g, idx)
    }

    pub fn check_acyclic(&self) -> Result<(), LinkError> {
        let (g, _) = self.petgraph();
        petgraph::algo::toposort(&g, None).map(|_| ()).map_err(|c| LinkError::Cycle(g[c.node_id()]))
    }

    /// Events without incoming edges.
    pub fn roots(&self) -> Vec<EventId> {
        let has_parent: BTreeSet<EventId> = self.edges.iter().map(|e| e.child).collect();
        self.events.keys().filter(|id| !has_parent.contains(id)).copied().collect()
    }

    pub fn parents_of(&self, id: EventId) -> Vec<Edge> {
        self.edges.iter().filter(|e| e.child == id).copied().collect()
    }

    /// Weakly connected components, each as a sorted id list; ordered by smallest id.
    pub fn fragments(&self) -> Vec<Vec<EventId>> {
        let ids: Vec<EventId> = self.events.keys().copied().collect();
        let pos: HashMap<EventId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut uf = UnionFind::new(ids.len());
        for e in &self.edges {
            if let (Some(a), Some(b)) = (pos.get(&e.parent), pos.get(&e.child)) {
                uf.union(*a, *b);
            }
        }
        let mut groups: BTreeMap<usize, Vec<EventId>> = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            groups.entry(uf.find(i)).or_default().push(*id);
        }
        let mut out: Vec<Vec<EventId>> = groups.into_values().collect();
        out.sort();
        out
    }

    /// Subgraph induced by `ids`.
    pub fn subgraph(&self, ids: &[EventId]) -> RepGraph {
        let keep: BTreeSet<EventId> = ids.iter().copied().collect();
        RepGraph {
            events: self.events.iter().filter(|(k, _)| keep.contains(k)).map(|(k, v)| (*k, v.clone())).collect(),
            edges: self.edges.iter().filter(|e| keep.contains(&e.parent) && keep.contains(&e.child)).copied().collect(),
        }
    }

    /// One REP per request entry event (a root carrying a request type).
    pub fn requests(&self) -> Vec<(EventId, String, RepGraph)> {
        let roots: BTreeSet<EventId> = self.roots().into_iter().collect();
        let mut out = Vec::new();
        for frag in self.fragments() {
            let entry = frag
                .iter()
                .find(|id| roots.contains(id) && self.events[id].request_type.is_some());
            if let Some(entry) = entry {
                let rtype = self.events[entry].request_type.clone().unwrap();
                out.push((*entry, rtype, self.subgraph(&frag)));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# reppath graph v1\n");
        for e in self.events.values() {
            let _ = writeln!(s, "event {}", encode_event(e));
        }
        for e in &self.edges {
            let _ = writeln!(s, "edge {} {} {}", e.parent, e.child, e.rel);
        }
        s
    }
}

/// Number of weakly connected components.
pub fn count_fragments(g: &RepGraph) -> usize {
    if g.events.is_empty() {
        return 0;
    }
    let (pg, _) = g.petgraph();
    petgraph::algo::connected_components(&pg)
}

/// Keeps one parent per node: COMR > DDR > SYNR > ToPCR > TCR, then the
/// earliest parent timestamp, then the smallest parent id.
pub fn dag_to_tree(g: &RepGraph) -> RepTree {
    let mut by_child: BTreeMap<EventId, Vec<Edge>> = BTreeMap::new();
    for e in &g.edges {
        by_child.entry(e.child).or_default().push(*e);
    }
    let mut kept = BTreeSet::new();
    let mut removed = Vec::new();
    for (_, mut edges) in by_child {
        edges.sort_by_key(|e| arbitration_key(g.events.get(&e.parent), e));
        kept.insert(edges[0]);
        removed.extend_from_slice(&edges[1..]);
    }
    RepTree::from_parts(RepGraph { events: g.events.clone(), edges: kept }, removed)
}

pub(crate) fn arbitration_key(parent: Option<&TraceEvent>, e: &Edge) -> (std::cmp::Reverse<u8>, u64, EventId) {
    (std::cmp::Reverse(e.rel.priority()), parent.map_or(u64::MAX, |p| p.timestamp), e.parent)
}

impl RepTree {
    pub fn from_parts(graph: RepGraph, removed: Vec<Edge>) -> Self {
        let mut parent = BTreeMap::new();
        let mut children: BTreeMap<EventId, Vec<(EventId, RelationshipType)>> = BTreeMap::new();
        for e in &graph.edges {
            parent.insert(e.child, (e.parent, e.rel));
            children.entry(e.parent).or_default().push((e.child, e.rel));
        }
        Self { graph, removed, parent, children }
    }

    pub fn parent(&self, id: EventId) -> Option<(EventId, RelationshipType)> {
        self.parent.get(&id).copied()
    }

    pub fn children(&self, id: EventId) -> &[(EventId, RelationshipType)] {
        self.children.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn event(&self, id: EventId) -> &TraceEvent {
        &self.graph.events[&id]
    }

    pub fn roots(&self) -> Vec<EventId> {
        self.graph.events.keys().filter(|id| !self.parent.contains_key(id)).copied().collect()
    }

    /// Fraction of DAG edges dropped by the projection.
    pub fn removed_fraction(&self) -> f64 {
        let total = self.graph.edges.len() + self.removed.len();
        if total == 0 {
            0.0
        } else {
            self.removed.len() as f64 / total as f64
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = self.graph.to_text();
        for e in &self.removed {
            let _ = writeln!(s, "removed {} {} {}", e.parent, e.child, e.rel);
        }
        s
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GraphParseError {
    #[error("line {0}: {1}")]
    Line(usize, String),
    #[error("line {0}: {1}")]
    Event(usize, EventError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parses the text produced by [`RepGraph::to_text`] or [`RepTree::to_text`].
pub fn parse_graph_text(reader: impl BufRead) -> Result<(RepGraph, Vec<Edge>), GraphParseError> {
    let mut g = RepGraph::default();
    let mut removed = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (tag, rest) = line.split_once(' ').ok_or_else(|| GraphParseError::Line(i + 1, "missing tag".into()))?;
        match tag {
            "event" => {
                let e = decode_event(rest).map_err(|err| GraphParseError::Event(i + 1, err))?;
                g.events.insert(e.event_id, e);
            }
            "edge" | "removed" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(GraphParseError::Line(i + 1, "expected `parent child TYPE`".into()));
                }
                let bad = |m: String| GraphParseError::Line(i + 1, m);
                let edge = Edge {
                    parent: parts[0].parse().map_err(bad)?,
                    child: parts[1].parse().map_err(bad)?,
                    rel: parts[2].parse().map_err(bad)?,
                };
                if tag == "edge" {
                    g.edges.insert(edge);
                } else {
                    removed.push(edge);
                }
            }
            other => return Err(GraphParseError::Line(i + 1, format!("unknown tag `{other}`"))),
        }
    }
    Ok((g, removed))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::event::{CallCategory, FORK, THREAD_CREATE};

    /// Hand-built event for linking fixtures.
    pub(crate) fn ev(node: u32, seq: u64, pid: u64, tid: u64, call: &str, ctx: u8) -> TraceEvent {
        let category = CallCategory::of(call);
        TraceEvent {
            event_id: EventId::new(node, seq),
            call_name: call.into(),
            category,
            args: BTreeMap::new(),
            return_value: 0,
            thread_id: tid,
            process_id: pid,
            node_id: node,
            timestamp: seq * 10,
            duration: 1,
            msg_id: (category == CallCategory::NetworkCommunication).then_some(Uid([0xEE; 16])),
            msg_ctx_id: Uid([ctx; 16]),
            request_type: None,
        }
    }

    fn with_msg(mut e: TraceEvent, m: u8) -> TraceEvent {
        e.msg_id = Some(Uid([m; 16]));
        e
    }

    fn with_ret(mut e: TraceEvent, r: i64) -> TraceEvent {
        e.return_value = r;
        e
    }

    fn with_arg(mut e: TraceEvent, k: &str, v: &str) -> TraceEvent {
        e.args.insert(k.into(), v.into());
        e
    }

    fn edge(p: (u32, u64), c: (u32, u64), rel: RelationshipType) -> Edge {
        Edge { parent: EventId::new(p.0, p.1), child: EventId::new(c.0, c.1), rel }
    }

    fn idx(events: &[TraceEvent]) -> LinkIndex {
        let mut i = LinkIndex::new(Some(default_data_extractor));
        for e in events {
            i.insert(e.clone());
        }
        i
    }

    #[test]
    fn recv_links_to_send_with_same_msg_id() {
        let s = with_msg(ev(0, 1, 10, 10, "send", 1), 9);
        let r = with_msg(ev(1, 1, 20, 20, "recv", 9), 9);
        let i = idx(&[s, r.clone()]);
        assert_eq!(i.get_parent(&r).unwrap(), Some((EventId::new(0, 1), RelationshipType::Comr)));
    }

    #[test]
    fn second_event_of_thread_links_to_first() {
        let a = ev(0, 1, 10, 10, "malloc", 1);
        let b = ev(0, 2, 10, 10, "open", 1);
        let i = idx(&[a, b.clone()]);
        assert_eq!(i.get_parent(&b).unwrap(), Some((EventId::new(0, 1), RelationshipType::Tcr)));
    }

    #[test]
    fn other_context_in_same_thread_is_skipped() {
        let a = ev(0, 1, 10, 10, "malloc", 1);
        let b = ev(0, 2, 10, 10, "malloc", 2);
        let c = ev(0, 3, 10, 10, "open", 1);
        let i = idx(&[a, b.clone(), c.clone()]);
        assert_eq!(i.get_parent(&b).unwrap(), None);
        assert_eq!(i.get_parent(&c).unwrap(), Some((EventId::new(0, 1), RelationshipType::Tcr)));
    }

    #[test]
    fn event_after_send_follows_the_send() {
        let s = with_msg(ev(0, 1, 10, 10, "send", 1), 5);
        let n = ev(0, 2, 10, 10, "malloc", 5);
        let i = idx(&[s, n.clone()]);
        assert_eq!(i.get_parent(&n).unwrap(), Some((EventId::new(0, 1), RelationshipType::Tcr)));
    }

    #[test]
    fn first_event_of_forked_child_links_to_fork() {
        let f = with_ret(ev(0, 1, 10, 10, FORK, 3), 77);
        let c = ev(0, 2, 77, 77, "exec", 3);
        let i = idx(&[f, c.clone()]);
        assert_eq!(i.get_parent(&c).unwrap(), Some((EventId::new(0, 1), RelationshipType::Topcr)));
    }

    #[test]
    fn first_event_of_thread_links_to_create() {
        let f = with_ret(ev(0, 1, 10, 10, THREAD_CREATE, 3), 11);
        let c = ev(0, 2, 10, 11, "malloc", 3);
        let i = idx(&[f, c.clone()]);
        assert_eq!(i.get_parent(&c).unwrap(), Some((EventId::new(0, 1), RelationshipType::Topcr)));
    }

    #[test]
    fn duplicate_creators_are_ambiguous() {
        let f1 = with_ret(ev(0, 1, 10, 10, THREAD_CREATE, 3), 11);
        let f2 = with_ret(ev(0, 2, 10, 12, THREAD_CREATE, 3), 11);
        let c = ev(0, 3, 10, 11, "malloc", 3);
        let i = idx(&[f1, f2, c.clone()]);
        assert!(matches!(i.get_parent(&c), Err(LinkError::Ambiguous { .. })));
    }

    #[test]
    fn unmatched_event_is_root() {
        let e = ev(0, 1, 10, 10, "malloc", 1);
        let i = idx(std::slice::from_ref(&e));
        assert_eq!(i.get_parent(&e).unwrap(), None);
        let g = link_events([e]).unwrap();
        assert_eq!(g.roots(), vec![EventId::new(0, 1)]);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn join_links_last_event_of_joined_thread() {
        // main thread 10 creates thread 11 (e13 -> e15), then joins it; e16 -> e17 via join
        let events = vec![
            ev(0, 1, 10, 10, "malloc", 1),
            with_ret(ev(0, 2, 10, 10, THREAD_CREATE, 1), 11),
            ev(0, 3, 10, 11, "malloc", 1),
            ev(0, 4, 10, 11, "open", 1),
            with_arg(ev(0, 5, 10, 10, THREAD_JOIN, 1), "tid", "11"),
            ev(0, 6, 10, 10, "close", 1),
        ];
        let g = link_events(events).unwrap();
        let want = [
            edge((0, 1), (0, 2), RelationshipType::Tcr),
            edge((0, 2), (0, 3), RelationshipType::Topcr),
            edge((0, 3), (0, 4), RelationshipType::Tcr),
            edge((0, 2), (0, 5), RelationshipType::Tcr),
            edge((0, 5), (0, 6), RelationshipType::Tcr),
            edge((0, 4), (0, 6), RelationshipType::Synr),
        ];
        assert_eq!(g.edges, want.into_iter().collect());
        let t = dag_to_tree(&g);
        assert_eq!(t.parent(EventId::new(0, 6)), Some((EventId::new(0, 4), RelationshipType::Synr)));
        assert_eq!(t.removed, vec![edge((0, 5), (0, 6), RelationshipType::Tcr)]);
    }

    #[test]
    fn waitpid_links_last_event_of_child_process() {
        let events = vec![
            with_ret(ev(0, 1, 10, 10, FORK, 1), 50),
            ev(0, 2, 50, 50, "malloc", 1),
            ev(0, 3, 50, 50, "exit", 1),
            with_ret(with_arg(ev(0, 4, 10, 10, WAITPID, 1), "pid", "50"), 50),
            ev(0, 5, 10, 10, "close", 1),
        ];
        let g = link_events(events).unwrap();
        assert!(g.edges.contains(&edge((0, 3), (0, 5), RelationshipType::Synr)));
        assert!(g.edges.contains(&edge((0, 4), (0, 5), RelationshipType::Tcr)));
    }

    #[test]
    fn kill_links_to_event_after_sigwait() {
        let events = vec![
            with_ret(ev(0, 1, 10, 10, FORK, 1), 50),
            ev(0, 2, 50, 50, SIGWAIT, 1),
            with_arg(ev(0, 3, 10, 10, KILL, 1), "pid", "50"),
            ev(0, 4, 50, 50, "malloc", 1),
        ];
        let g = link_events(events).unwrap();
        assert!(g.edges.contains(&edge((0, 3), (0, 4), RelationshipType::Synr)));
        assert!(g.edges.contains(&edge((0, 2), (0, 4), RelationshipType::Tcr)));
    }

    #[test]
    fn queue_put_get_links_data_dependency() {
        let put = with_arg(ev(0, 1, 10, 10, QUEUE_PUT, 1), "data", "job-7");
        let get = with_arg(ev(1, 1, 20, 20, QUEUE_GET, 9), "data", "job-7");
        let (g0, _) = build_rep([put.clone(), get.clone()], None).unwrap();
        assert_eq!(count_fragments(&g0), 2);
        let (g1, unmatched) = build_rep([put, get], Some(default_data_extractor)).unwrap();
        assert!(unmatched.is_empty());
        assert_eq!(count_fragments(&g1), 1);
        assert_eq!(g1.edges.iter().next().unwrap().rel, RelationshipType::Ddr);
    }

    #[test]
    fn extractor_without_matches_changes_nothing() {
        let events = vec![ev(0, 1, 10, 10, "malloc", 1), ev(1, 1, 10, 10, "malloc", 2)];
        let (edges, unmatched) = link_data_dependency(&events, default_data_extractor);
        assert!(edges.is_empty() && unmatched.is_empty());
        let (g, _) = build_rep(events, Some(default_data_extractor)).unwrap();
        assert_eq!(count_fragments(&g), 2);
    }

    #[test]
    fn unmatched_reads_are_reported() {
        let get = with_arg(ev(1, 1, 20, 20, QUEUE_GET, 9), "data", "nope");
        let (_, unmatched) = link_data_dependency(&[get], default_data_extractor);
        assert_eq!(unmatched, vec![EventId::new(1, 1)]);
    }

    #[test]
    fn fragment_counts() {
        assert_eq!(count_fragments(&RepGraph::default()), 0);
        let events = vec![
            ev(0, 1, 10, 10, "malloc", 1),
            ev(0, 2, 10, 10, "malloc", 1),
            ev(0, 3, 10, 11, "malloc", 2),
            ev(0, 4, 10, 11, "malloc", 2),
        ];
        let g = link_events(events).unwrap();
        assert_eq!(count_fragments(&g), 2);
        assert_eq!(g.fragments().len(), 2);
    }

    #[test]
    fn cycle_is_detected() {
        let mut g = RepGraph::default();
        for e in [ev(0, 1, 1, 1, "malloc", 1), ev(0, 2, 1, 1, "malloc", 1)] {
            g.events.insert(e.event_id, e);
        }
        g.edges.insert(edge((0, 1), (0, 2), RelationshipType::Tcr));
        g.edges.insert(edge((0, 2), (0, 1), RelationshipType::Ddr));
        assert!(matches!(g.check_acyclic(), Err(LinkError::Cycle(_))));
    }

    fn multi_parent_fixture(rels: &[RelationshipType]) -> RepGraph {
        let mut g = RepGraph::default();
        let child = ev(0, 100, 1, 1, "malloc", 1);
        g.events.insert(child.event_id, child);
        for (i, rel) in rels.iter().enumerate() {
            let p = ev(0, i as u64 + 1, 1, 1, "malloc", 1);
            g.events.insert(p.event_id, p);
            g.edges.insert(edge((0, i as u64 + 1), (0, 100), *rel));
        }
        g
    }

    #[test]
    fn arbitration_priority_order() {
        use RelationshipType::*;
        let order = [Comr, Ddr, Synr, Topcr, Tcr];
        for (i, winner) in order.iter().enumerate() {
            for loser in &order[i + 1..] {
                // put the loser first so ties on position cannot explain the result
                let g = multi_parent_fixture(&[*loser, *winner]);
                let t = dag_to_tree(&g);
                assert_eq!(t.parent(EventId::new(0, 100)).unwrap().1, *winner, "{winner} vs {loser}");
                assert_eq!(t.removed.len(), 1);
            }
        }
    }

    #[test]
    fn same_type_tie_breaks_on_timestamp_then_id() {
        let mut g = multi_parent_fixture(&[RelationshipType::Tcr, RelationshipType::Tcr]);
        g.events.get_mut(&EventId::new(0, 1)).unwrap().timestamp = 500;
        let t = dag_to_tree(&g);
        assert_eq!(t.parent(EventId::new(0, 100)).unwrap().0, EventId::new(0, 2));
        g.events.get_mut(&EventId::new(0, 1)).unwrap().timestamp = 20;
        let t = dag_to_tree(&g);
        assert_eq!(t.parent(EventId::new(0, 100)).unwrap().0, EventId::new(0, 1));
    }

    #[test]
    fn single_parent_unchanged() {
        let g = multi_parent_fixture(&[RelationshipType::Tcr]);
        let t = dag_to_tree(&g);
        assert!(t.removed.is_empty());
        assert_eq!(t.graph.edges, g.edges);
    }

    #[test]
    fn tree_text_round_trip() {
        let g = multi_parent_fixture(&[RelationshipType::Tcr, RelationshipType::Comr]);
        let t = dag_to_tree(&g);
        let (g2, removed) = parse_graph_text(t.to_text().as_bytes()).unwrap();
        assert_eq!(g2, t.graph);
        assert_eq!(removed, t.removed);
    }

    #[test]
    fn arrival_order_does_not_matter() {
        let events = vec![
            ev(0, 1, 10, 10, "malloc", 1),
            with_ret(ev(0, 2, 10, 10, THREAD_CREATE, 1), 11),
            ev(0, 3, 10, 11, "malloc", 1),
            with_msg(ev(0, 4, 10, 11, "send", 1), 4),
            with_msg(ev(1, 1, 20, 20, "recv", 4), 4),
        ];
        let a = link_events(events.clone()).unwrap();
        let mut rev = events;
        rev.reverse();
        assert_eq!(link_events(rev).unwrap(), a);
    }
}
