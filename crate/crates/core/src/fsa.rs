//! Training pipeline: component identification, loop and concurrency
//! pruning, per-path automata and their core/full aggregation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use crate::event::{EventId, ProcessKey, RelationshipType, TraceEvent, EXEC, FORK, VFORK};
use crate::rep::RepTree;

/// Process → component mapping, grown incrementally from observed events.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ComponentList {
    map: BTreeMap<ProcessKey, String>,
}

impl ComponentList {
    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a TraceEvent>) -> Self {
        let mut sorted: Vec<&TraceEvent> = events.into_iter().collect();
        sorted.sort_by_key(|e| e.event_id);
        let mut list = Self::default();
        for e in sorted {
            list.observe(e);
        }
        list
    }

    /// An `exec` names its process after the program; a fork child that has
    /// not exec'd yet belongs to its parent's component.
    pub fn observe(&mut self, e: &TraceEvent) {
        if e.call_name == EXEC {
            if let Some(prog) = e.arg("prog") {
                self.map.insert(e.process_key(), prog.to_string());
            }
        } else if (e.call_name == FORK || e.call_name == VFORK) && e.return_value > 0 {
            let child = ProcessKey { node: e.node_id, pid: e.return_value as u64 };
            let comp = self.component_of(e.process_key());
            self.map.entry(child).or_insert(comp);
        }
    }

    pub fn component_of(&self, p: ProcessKey) -> String {
        self.map.get(&p).cloned().unwrap_or_else(|| format!("n{}.p{}", p.node, p.pid))
    }

    /// Event signature: call name and component, independent of ids and time.
    pub fn signature(&self, e: &TraceEvent) -> String {
        format!("{}@{}", e.call_name, self.component_of(e.process_key()))
    }

    pub fn components(&self) -> BTreeSet<&str> {
        self.map.values().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Components of the processes that appear in `t`.
pub fn identify_components(t: &RepTree) -> ComponentList {
    ComponentList::from_events(t.graph.events.values())
}

/// A block of `len` consecutive chain nodes, starting here, repeated `count` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Loop {
    pub len: usize,
    pub count: u64,
}

/// A consolidated event of a pruned tree.
#[derive(Debug, Clone, PartialEq)]
pub struct PNode {
    pub sig: String,
    /// Original events folded into this node.
    pub events: u64,
    /// Number of sibling subtrees this node's chain stands for.
    pub width: u64,
    pub loops: Vec<Loop>,
    pub concurrent: bool,
    pub dur_sum: f64,
    pub dur_count: u64,
    /// Side chains hanging off this node, in canonical order.
    pub branches: Vec<Vec<PNode>>,
    key: u32,
}

impl PNode {
    pub fn mean_duration(&self) -> f64 {
        if self.dur_count == 0 {
            0.0
        } else {
            self.dur_sum / self.dur_count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedTree {
    pub request_type: String,
    pub chain: Vec<PNode>,
}

impl PrunedTree {
    pub fn node_count(&self) -> usize {
        fn count(chain: &[PNode]) -> usize {
            chain.iter().map(|n| 1 + n.branches.iter().map(|b| count(b)).sum::<usize>()).sum()
        }
        count(&self.chain)
    }

    /// Total original events represented; equals the source tree's size.
    pub fn event_count(&self) -> u64 {
        fn count(chain: &[PNode]) -> u64 {
            chain.iter().map(|n| n.events + n.branches.iter().map(|b| count(b)).sum::<u64>()).sum()
        }
        count(&self.chain)
    }
}

#[derive(Default)]
struct Interner(HashMap<String, u32>);

impl Interner {
    fn id(&mut self, s: String) -> u32 {
        let next = self.0.len() as u32;
        *self.0.entry(s).or_insert(next)
    }

    fn node_key(&mut self, n: &PNode) -> u32 {
        let mut s = n.sig.clone();
        for l in &n.loops {
            let _ = write!(s, "~{}", l.len);
        }
        s.push('{');
        for b in &n.branches {
            let _ = write!(s, "{},", self.chain_key(b));
        }
        self.id(s)
    }

    fn chain_key(&mut self, chain: &[PNode]) -> u32 {
        let mut s = String::from("(");
        for n in chain {
            let _ = write!(s, "{};", n.key);
        }
        self.id(s)
    }
}

/// Adds `src`'s statistics into `dst`; both must share one shape.
fn merge_node(dst: &mut PNode, src: &PNode) {
    dst.events += src.events;
    dst.dur_sum += src.dur_sum;
    dst.dur_count += src.dur_count;
    dst.concurrent |= src.concurrent;
    for (a, b) in dst.loops.iter_mut().zip(&src.loops) {
        a.count += b.count;
    }
    for (a, b) in dst.branches.iter_mut().zip(&src.branches) {
        merge_chain(a, b);
    }
}

fn merge_chain(dst: &mut [PNode], src: &[PNode]) {
    for (a, b) in dst.iter_mut().zip(src) {
        merge_node(a, b);
        a.width += b.width;
    }
}

struct Pruner<'a> {
    tree: &'a RepTree,
    comps: &'a ComponentList,
    sizes: HashMap<EventId, usize>,
    interner: Interner,
    collapse: bool,
}

impl<'a> Pruner<'a> {
    fn new(tree: &'a RepTree, comps: &'a ComponentList, root: EventId, collapse: bool) -> Self {
        // subtree sizes, children before parents
        let mut order = vec![root];
        let mut i = 0;
        while i < order.len() {
            order.extend(tree.children(order[i]).iter().map(|c| c.0));
            i += 1;
        }
        let mut sizes = HashMap::with_capacity(order.len());
        for id in order.iter().rev() {
            let s = 1 + tree.children(*id).iter().map(|c| sizes[&c.0]).sum::<usize>();
            sizes.insert(*id, s);
        }
        Self { tree, comps, sizes, interner: Interner::default(), collapse }
    }

    /// The child that carries the chain on: the largest subtree, then a
    /// same-thread successor, then the smallest id.
    fn continuation(&self, id: EventId) -> Option<EventId> {
        self.tree
            .children(id)
            .iter()
            .max_by_key(|(c, r)| (self.sizes[c], *r == RelationshipType::Tcr, std::cmp::Reverse(*c)))
            .map(|c| c.0)
    }

    fn chain(&mut self, start: EventId) -> Vec<PNode> {
        let mut chain = Vec::new();
        let mut cur = Some(start);
        while let Some(id) = cur {
            let next = self.continuation(id);
            let kids = self.tree.children(id);
            let e = self.tree.event(id);
            let mut branches: Vec<Vec<PNode>> = kids
                .iter()
                .filter(|(c, _)| Some(*c) != next)
                .map(|(c, _)| self.chain(*c))
                .collect();
            let mut width_marked = false;
            if self.collapse {
                let mut groups: Vec<(u32, Vec<PNode>)> = Vec::new();
                for b in branches {
                    let k = self.interner.chain_key(&b);
                    match groups.iter_mut().find(|(gk, _)| *gk == k) {
                        Some((_, g)) => {
                            merge_chain(g, &b);
                            width_marked = true;
                        }
                        None => groups.push((k, b)),
                    }
                }
                groups.sort_by_key(|(k, _)| *k);
                branches = groups.into_iter().map(|(_, b)| b).collect();
            }
            let mut node = PNode {
                sig: self.comps.signature(e),
                events: 1,
                width: 1,
                loops: Vec::new(),
                concurrent: kids.len() >= 2 || width_marked,
                dur_sum: e.duration as f64,
                dur_count: 1,
                branches,
                key: 0,
            };
            node.key = self.interner.node_key(&node);
            chain.push(node);
            cur = next;
        }
        if self.collapse {
            self.collapse_repeats(&mut chain);
        }
        chain
    }

    /// Repeatedly folds the leftmost tandem repeat of smallest period into a
    /// single looped copy until no adjacent blocks are identical.
    fn collapse_repeats(&mut self, chain: &mut Vec<PNode>) {
        'outer: loop {
            let n = chain.len();
            for p in 1..=n / 2 {
                for i in 0..=n - 2 * p {
                    let same = |a: usize, b: usize| (0..p).all(|k| chain[a + k].key == chain[b + k].key);
                    if !same(i, i + p) {
                        continue;
                    }
                    let mut reps = 2;
                    while i + (reps + 1) * p <= n && same(i, i + reps * p) {
                        reps += 1;
                    }
                    let tail: Vec<PNode> = chain.drain(i + p..i + reps * p).collect();
                    for block in tail.chunks(p) {
                        for (k, src) in block.iter().enumerate() {
                            merge_node(&mut chain[i + k], src);
                        }
                    }
                    chain[i].loops.push(Loop { len: p, count: reps as u64 });
                    chain[i].key = self.interner.node_key(&chain[i]);
                    continue 'outer;
                }
            }
            break;
        }
    }
}

fn request_type_of(t: &RepTree, root: EventId) -> String {
    t.event(root).request_type.clone().unwrap_or_default()
}

/// Loop and concurrency pruning of the subtree under `root`.
pub fn prune_loops_concurrency(t: &RepTree, root: EventId, comps: &ComponentList) -> PrunedTree {
    let chain = Pruner::new(t, comps, root, true).chain(root);
    PrunedTree { request_type: request_type_of(t, root), chain }
}

/// One node per event, no folding: the baseline model input.
pub fn unpruned_tree(t: &RepTree, root: EventId, comps: &ComponentList) -> PrunedTree {
    let chain = Pruner::new(t, comps, root, false).chain(root);
    PrunedTree { request_type: request_type_of(t, root), chain }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionKind {
    Tree,
    Back,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsaState {
    /// Spanning-tree parent; `None` only for St0.
    pub parent: Option<usize>,
    /// Label of the tree transition entering this state.
    pub label: String,
    pub core: bool,
    pub concurrency: bool,
    pub dur_sum: f64,
    pub dur_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackEdge {
    pub from: usize,
    pub to: usize,
    pub label: String,
    pub core: bool,
    pub dur_sum: f64,
    pub dur_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition<'a> {
    pub index: usize,
    pub from: usize,
    pub to: usize,
    pub label: &'a str,
    pub kind: TransitionKind,
    pub core: bool,
    pub dur_sum: f64,
    pub dur_count: u64,
}

impl Transition<'_> {
    pub fn mean_duration(&self) -> Option<f64> {
        (self.dur_count > 0).then(|| self.dur_sum / self.dur_count as f64)
    }
}

/// Automaton over event signatures. State 0 is St0. Tree transition `i`
/// enters state `i + 1`; back edges are numbered after the tree transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Fsa {
    pub request_type: String,
    pub training_paths: usize,
    pub states: Vec<FsaState>,
    pub back_edges: Vec<BackEdge>,
    out: Vec<BTreeMap<String, Vec<usize>>>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FsaError {
    #[error("no automata to combine")]
    Empty,
    #[error("automata of different request types: {0} and {1}")]
    MixedTypes(String, String),
    #[error("line {0}: {1}")]
    Parse(usize, String),
}

impl Fsa {
    fn start(request_type: &str, training_paths: usize) -> Self {
        let st0 = FsaState { parent: None, label: String::new(), core: true, concurrency: false, dur_sum: 0.0, dur_count: 0 };
        Self { request_type: request_type.to_string(), training_paths, states: vec![st0], back_edges: Vec::new(), out: Vec::new() }
    }

    fn finish(mut self) -> Self {
        let mut out = vec![BTreeMap::<String, Vec<usize>>::new(); self.states.len()];
        for (i, s) in self.states.iter().enumerate().skip(1) {
            out[s.parent.unwrap()].entry(s.label.clone()).or_default().push(i - 1);
        }
        let base = self.states.len() - 1;
        for (j, b) in self.back_edges.iter().enumerate() {
            out[b.from].entry(b.label.clone()).or_default().push(base + j);
        }
        self.out = out;
        self
    }

    pub fn tree_transition_count(&self) -> usize {
        self.states.len() - 1
    }

    pub fn transition_count(&self) -> usize {
        self.tree_transition_count() + self.back_edges.len()
    }

    pub fn transition(&self, index: usize) -> Transition<'_> {
        let base = self.tree_transition_count();
        if index < base {
            let s = &self.states[index + 1];
            Transition {
                index,
                from: s.parent.unwrap(),
                to: index + 1,
                label: &s.label,
                kind: TransitionKind::Tree,
                core: s.core,
                dur_sum: s.dur_sum,
                dur_count: s.dur_count,
            }
        } else {
            let b = &self.back_edges[index - base];
            Transition {
                index,
                from: b.from,
                to: b.to,
                label: &b.label,
                kind: TransitionKind::Back,
                core: b.core,
                dur_sum: b.dur_sum,
                dur_count: b.dur_count,
            }
        }
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition<'_>> {
        (0..self.transition_count()).map(|i| self.transition(i))
    }

    /// Transitions leaving `state` with `label`.
    pub fn outgoing(&self, state: usize, label: &str) -> &[usize] {
        self.out.get(state).and_then(|m| m.get(label)).map_or(&[], Vec::as_slice)
    }

    pub fn concurrency_points(&self) -> BTreeSet<usize> {
        self.states.iter().enumerate().filter(|(_, s)| s.concurrency).map(|(i, _)| i).collect()
    }

    /// Label sequence along the spanning tree from St0 to `state`.
    pub fn transition_path(&self, state: usize) -> Vec<&str> {
        let mut path = Vec::new();
        let mut cur = state;
        while let Some(p) = self.states[cur].parent {
            path.push(self.states[cur].label.as_str());
            cur = p;
        }
        path.reverse();
        path
    }

    /// Labeled transitions as comparable (source path, label, target path) triples.
    pub fn labeled_transitions(&self) -> BTreeSet<(Vec<String>, String, Vec<String>)> {
        let owned = |s: usize| self.transition_path(s).into_iter().map(String::from).collect::<Vec<_>>();
        self.transitions().map(|t| (owned(t.from), t.label.to_string(), owned(t.to))).collect()
    }

    /// Restriction to core states and core back edges.
    pub fn core(&self) -> Fsa {
        let mut f = Fsa::start(&self.request_type, self.training_paths);
        let mut remap = vec![None; self.states.len()];
        remap[0] = Some(0);
        for (i, s) in self.states.iter().enumerate().skip(1) {
            if let Some(p) = s.parent.and_then(|p| remap[p]).filter(|_| s.core) {
                remap[i] = Some(f.states.len());
                f.states.push(FsaState { parent: Some(p), ..s.clone() });
            }
        }
        for b in self.back_edges.iter().filter(|b| b.core) {
            if let (Some(from), Some(to)) = (remap[b.from], remap[b.to]) {
                f.back_edges.push(BackEdge { from, to, ..b.clone() });
            }
        }
        f.finish()
    }

    /// Set of states reachable from `from` by one transition labeled `label`,
    /// with the transitions used.
    pub fn step(&self, from: &BTreeSet<usize>, label: &str) -> (BTreeSet<usize>, Vec<usize>) {
        let mut to = BTreeSet::new();
        let mut fired = Vec::new();
        for s in from {
            for t in self.outgoing(*s, label) {
                to.insert(self.transition(*t).to);
                fired.push(*t);
            }
        }
        (to, fired)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fsa {} paths {}", self.request_type, self.training_paths);
        for (i, st) in self.states.iter().enumerate().skip(1) {
            let _ = writeln!(
                s,
                "state {i} {} {} {} {} {} {}",
                st.parent.unwrap(),
                st.label,
                u8::from(st.core),
                u8::from(st.concurrency),
                st.dur_sum,
                st.dur_count
            );
        }
        if self.states[0].concurrency {
            let _ = writeln!(s, "conc0");
        }
        for b in &self.back_edges {
            let _ = writeln!(s, "back {} {} {} {} {} {}", b.from, b.to, b.label, u8::from(b.core), b.dur_sum, b.dur_count);
        }
        s
    }

    pub fn from_text(reader: impl BufRead) -> Result<Fsa, FsaError> {
        let mut f: Option<Fsa> = None;
        for (i, line) in reader.lines().enumerate() {
            let ln = i + 1;
            let line = line.map_err(|e| FsaError::Parse(ln, e.to_string()))?;
            let w: Vec<&str> = line.split_whitespace().collect();
            if w.is_empty() || w[0].starts_with('#') {
                continue;
            }
            let bad = |m: &str| FsaError::Parse(ln, m.to_string());
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number `{s}`")));
            let flt = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number `{s}`")));
            let flag = |s: &str| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(bad(&format!("bad flag `{s}`"))),
            };
            match (w[0], f.as_mut()) {
                ("fsa", None) if w.len() == 4 && w[2] == "paths" => f = Some(Fsa::start(w[1], num(w[3])?)),
                ("state", Some(f)) if w.len() == 8 => {
                    if num(w[1])? != f.states.len() {
                        return Err(bad("states out of order"));
                    }
                    let parent = num(w[2])?;
                    if parent >= f.states.len() {
                        return Err(bad("parent after child"));
                    }
                    f.states.push(FsaState {
                        parent: Some(parent),
                        label: w[3].to_string(),
                        core: flag(w[4])?,
                        concurrency: flag(w[5])?,
                        dur_sum: flt(w[6])?,
                        dur_count: num(w[7])? as u64,
                    });
                }
                ("conc0", Some(f)) => f.states[0].concurrency = true,
                ("back", Some(f)) if w.len() == 7 => {
                    let (from, to) = (num(w[1])?, num(w[2])?);
                    if from >= f.states.len() || to >= f.states.len() {
                        return Err(bad("back edge to unknown state"));
                    }
                    f.back_edges.push(BackEdge {
                        from,
                        to,
                        label: w[3].to_string(),
                        core: flag(w[4])?,
                        dur_sum: flt(w[5])?,
                        dur_count: num(w[6])? as u64,
                    });
                }
                _ => return Err(bad("unexpected line")),
            }
        }
        f.map(Fsa::finish).ok_or(FsaError::Parse(0, "empty input".into()))
    }
}

/// St0, one state per consolidated node, tree transitions along the pruned
/// tree and one back edge per folded repeat.
pub fn build_per_path_fsa(p: &PrunedTree) -> Fsa {
    fn walk(f: &mut Fsa, chain: &[PNode], mut prev: usize) {
        let mut ids = Vec::with_capacity(chain.len());
        for n in chain {
            let id = f.states.len();
            f.states.push(FsaState {
                parent: Some(prev),
                label: n.sig.clone(),
                core: true,
                concurrency: n.concurrent,
                dur_sum: n.dur_sum,
                dur_count: n.dur_count,
            });
            ids.push(id);
            for b in &n.branches {
                walk(f, b, id);
            }
            prev = id;
        }
        for (k, n) in chain.iter().enumerate() {
            for l in &n.loops {
                f.back_edges.push(BackEdge {
                    from: ids[k + l.len - 1],
                    to: ids[k],
                    label: n.sig.clone(),
                    core: true,
                    dur_sum: n.dur_sum,
                    dur_count: n.dur_count,
                });
            }
        }
    }
    let mut f = Fsa::start(&p.request_type, 1);
    walk(&mut f, &p.chain, 0);
    f.finish()
}

/// Merges per-path automata by transition path: paths present in every
/// input are core, all paths are in full. Returns `(core, full)`.
pub fn combine_fsas(fs: &[Fsa]) -> Result<(Fsa, Fsa), FsaError> {
    let full = combine_full(fs)?;
    Ok((full.core(), full))
}

/// The full automaton with core membership flags on its states and edges.
pub fn combine_full(fs: &[Fsa]) -> Result<Fsa, FsaError> {
    let first = fs.first().ok_or(FsaError::Empty)?;
    if let Some(other) = fs.iter().find(|f| f.request_type != first.request_type) {
        return Err(FsaError::MixedTypes(first.request_type.clone(), other.request_type.clone()));
    }
    let mut out = Fsa::start(&first.request_type, fs.len());
    let mut trie: HashMap<(usize, String), usize> = HashMap::new();
    let mut seen_in: Vec<(usize, usize)> = vec![(usize::MAX, 0)];
    let mut backs: BTreeMap<(usize, String, usize), (usize, usize, BackEdge)> = BTreeMap::new();
    for (fi, f) in fs.iter().enumerate() {
        let mut map = vec![0usize; f.states.len()];
        for (i, s) in f.states.iter().enumerate() {
            if i == 0 {
                out.states[0].concurrency |= s.concurrency;
                continue;
            }
            let parent = map[s.parent.unwrap()];
            let id = *trie.entry((parent, s.label.clone())).or_insert_with(|| {
                out.states.push(FsaState {
                    parent: Some(parent),
                    label: s.label.clone(),
                    core: false,
                    concurrency: false,
                    dur_sum: 0.0,
                    dur_count: 0,
                });
                seen_in.push((usize::MAX, 0));
                out.states.len() - 1
            });
            map[i] = id;
            let st = &mut out.states[id];
            st.concurrency |= s.concurrency;
            st.dur_sum += s.dur_sum;
            st.dur_count += s.dur_count;
            if seen_in[id].0 != fi {
                seen_in[id] = (fi, seen_in[id].1 + 1);
            }
        }
        for b in &f.back_edges {
            let key = (map[b.from], b.label.clone(), map[b.to]);
            let entry = backs.entry(key).or_insert_with(|| {
                (usize::MAX, 0, BackEdge { from: map[b.from], to: map[b.to], label: b.label.clone(), core: false, dur_sum: 0.0, dur_count: 0 })
            });
            entry.2.dur_sum += b.dur_sum;
            entry.2.dur_count += b.dur_count;
            if entry.0 != fi {
                entry.0 = fi;
                entry.1 += 1;
            }
        }
    }
    for (id, st) in out.states.iter_mut().enumerate().skip(1) {
        st.core = seen_in[id].1 == fs.len();
    }
    out.back_edges = backs
        .into_values()
        .map(|(_, n, mut b)| {
            b.core = n == fs.len();
            b
        })
        .collect();
    Ok(out.finish())
}

/// Recomputes every annotation as the mean of the given duration samples,
/// keyed by transition index; transitions without samples keep theirs.
pub fn annotate_time(f: &Fsa, samples: &BTreeMap<usize, Vec<f64>>) -> Fsa {
    let mut g = f.clone();
    let base = g.tree_transition_count();
    for (t, v) in samples {
        if v.is_empty() {
            continue;
        }
        let (sum, n) = (v.iter().sum::<f64>(), v.len() as u64);
        if *t < base {
            g.states[t + 1].dur_sum = sum;
            g.states[t + 1].dur_count = n;
        } else if let Some(b) = g.back_edges.get_mut(t - base) {
            b.dur_sum = sum;
            b.dur_count = n;
        }
    }
    g
}

/// Replays the events of `t` under `root` through `f`, returning events
/// with no matching transition.
pub fn replay_tree(f: &Fsa, t: &RepTree, root: EventId, comps: &ComponentList) -> Vec<EventId> {
    let mut states: HashMap<EventId, BTreeSet<usize>> = HashMap::new();
    let mut failed = Vec::new();
    let mut stack = vec![(root, BTreeSet::from([0usize]))];
    while let Some((id, from)) = stack.pop() {
        let (to, _) = f.step(&from, &comps.signature(t.event(id)));
        if to.is_empty() && !from.is_empty() {
            failed.push(id);
        }
        for (c, _) in t.children(id) {
            stack.push((*c, to.clone()));
        }
        states.insert(id, to);
    }
    failed.sort();
    failed
}
