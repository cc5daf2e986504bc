use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{expand, FaultSpec, Instr, SendMode, SpecError, WorkloadSpec, DISK_CALLS};
use crate::agent::{frame_message, unframe_datagram, Agent, CallSite, ReassemblyBuffer, UidSource};
use crate::event::{
    EventId, RelationshipType as Rel, TraceEvent, Uid, EXEC, EXIT, FORK, KILL, QUEUE_GET, QUEUE_PUT, SHM_READ,
    SHM_WRITE, SIGWAIT, THREAD_CREATE, THREAD_JOIN, WAITPID,
};
use crate::rep::Edge;

/// Per-node clocks start here so negative skews stay positive.
const CLOCK_BASE: u64 = 1_000_000;
const FIRST_ARRIVAL: u64 = 1_000;
const MAX_EVENTS: usize = 20_000_000;
const SIGNAL: &str = "10";

/// True causal parents recorded while simulating, plus request membership.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub edges: BTreeSet<Edge>,
    pub requests: Vec<RequestTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestTruth {
    pub id: u64,
    pub request_type: String,
    pub root: EventId,
    pub members: BTreeSet<EventId>,
}

impl GroundTruth {
    /// Edges of the given relationship types only.
    pub fn edges_of(&self, types: &[Rel]) -> BTreeSet<Edge> {
        self.edges.iter().filter(|e| types.contains(&e.rel)).copied().collect()
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::from("# reppath truth v1\n");
        for r in &self.requests {
            let _ = writeln!(s, "request {} {} {}", r.id, r.request_type, r.root);
            for m in &r.members {
                let _ = writeln!(s, "member {} {}", r.id, m);
            }
        }
        for e in &self.edges {
            let _ = writeln!(s, "edge {} {} {}", e.parent, e.child, e.rel);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut t = GroundTruth::default();
        let mut by_id: BTreeMap<u64, usize> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let w: Vec<&str> = line.split_whitespace().collect();
            let err = |m: String| format!("line {}: {m}", i + 1);
            let num = |s: &str| s.parse::<u64>().map_err(|_| err(format!("bad number `{s}`")));
            match w.as_slice() {
                [] => {}
                [c, ..] if c.starts_with('#') => {}
                ["request", id, ty, root] => {
                    by_id.insert(num(id)?, t.requests.len());
                    t.requests.push(RequestTruth {
                        id: num(id)?,
                        request_type: ty.to_string(),
                        root: root.parse().map_err(err)?,
                        members: BTreeSet::new(),
                    });
                }
                ["member", id, ev] => {
                    let k = *by_id.get(&num(id)?).ok_or_else(|| err("member of unknown request".into()))?;
                    t.requests[k].members.insert(ev.parse().map_err(err)?);
                }
                ["edge", p, c, r] => {
                    t.edges.insert(Edge { parent: p.parse().map_err(err)?, child: c.parse().map_err(err)?, rel: r.parse().map_err(err)? });
                }
                _ => return Err(err("unrecognised line".into())),
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRequest {
    pub id: u64,
    pub request_type: String,
    /// Entry event id, absent when the entry component crashed first.
    pub entry: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub workload: String,
    pub seed: u64,
    pub events: usize,
    pub requests: Vec<ManifestRequest>,
    pub faults: Vec<FaultSpec>,
    /// Events emitted per component, boot events included.
    pub component_events: BTreeMap<String, u64>,
    pub boot_events: BTreeMap<String, u64>,
    /// Per component, its event count when it emitted its last event outside
    /// an optional step.
    pub required_events: BTreeMap<String, u64>,
    pub crashed: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub trace: Vec<TraceEvent>,
    pub truth: GroundTruth,
    pub manifest: Manifest,
}

/// Runs `spec` with `faults` injected. Deterministic in all three inputs.
pub fn run_workload(spec: &WorkloadSpec, faults: &[FaultSpec], seed: u64) -> Result<SimOutput, SpecError> {
    spec.validate()?;
    spec.check_faults(faults)?;
    let mut sim = Sim::new(spec, faults, seed);
    sim.boot();
    sim.schedule_requests();
    sim.run()?;
    Ok(sim.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Endpoint {
    Client(u64),
    Proc(usize),
}

#[derive(Debug)]
enum Action {
    Complete(usize),
    Chunk { conn: (Endpoint, Endpoint), bytes: Vec<u8> },
    Datagram { to: usize, bytes: Vec<u8> },
    Arrive(u64),
    Data { inst: usize, item: DataItem },
}

#[derive(Debug, Clone)]
struct DataItem {
    data: String,
    put: EventId,
    script: String,
    request: Option<u64>,
    shm: bool,
}

#[derive(Debug, Clone)]
enum ReplyTo {
    Thread { gid: usize, proc_: usize },
    Client,
}

#[derive(Debug, Clone)]
enum Meta {
    Request { inst: usize, script: String, request: Option<u64>, entry_type: Option<String>, reply: Option<(ReplyTo, usize)>, datagram: bool },
    Reply { gid: usize },
}

#[derive(Debug, Clone)]
struct Msg {
    meta: Meta,
    send: Option<EventId>,
    extra_delay: u64,
}

#[derive(Debug)]
struct Incoming {
    uid: Uid,
    payload: Vec<u8>,
    msg: Msg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Plain,
    Worker(usize),
    Consumer(usize),
    Boot,
}

#[derive(Debug)]
enum After {
    Nothing,
    Synced(Option<EventId>),
    Thread { slot: usize, body: Vec<Instr>, tid: u64 },
    Fork { slot: usize, script: String, exec: Option<String>, signal: bool, pid: u64 },
    Signal { proc_: usize },
    Deliver { to: Endpoint, datagram: bool, msg: Msg },
    Data { inst: usize, item: DataItem },
    Activity { script: String, reply: Option<(ReplyTo, usize)> },
    Fail(Vec<super::spec::Step>),
    Exit,
}

#[derive(Debug)]
enum Kind {
    Other,
    Send(Vec<u8>),
    Recv(Uid, Vec<u8>),
}

#[derive(Debug)]
struct Pending {
    call: String,
    args: BTreeMap<String, String>,
    ret: i64,
    kind: Kind,
    dur: u64,
    parents: Option<Vec<(EventId, Rel)>>,
    entry_type: Option<String>,
    after: After,
    /// Emitted by a call inside an optional step.
    optional: bool,
}

#[derive(Debug)]
struct Thread {
    proc_: usize,
    tid: u64,
    role: Role,
    instrs: Vec<Instr>,
    pc: usize,
    request: Option<u64>,
    next_parents: Vec<(EventId, Rel)>,
    last_event: Option<EventId>,
    done: bool,
    joiners: Vec<usize>,
    mailbox: VecDeque<Incoming>,
    waiting_reply: bool,
    pending: Option<Pending>,
    reply: Option<(ReplyTo, usize)>,
}

#[derive(Debug)]
struct Process {
    node: usize,
    pid: u64,
    component: String,
    alive: bool,
    live_threads: usize,
    exited: Option<EventId>,
    exit_waiter: Option<usize>,
    pid_waiters: Vec<usize>,
    kills: VecDeque<EventId>,
    sig_waiter: Option<usize>,
}

#[derive(Debug)]
struct Instance {
    component: String,
    proc_: usize,
    inbox: VecDeque<Incoming>,
    idle_workers: VecDeque<usize>,
    data: VecDeque<DataItem>,
    idle_consumers: VecDeque<usize>,
}

struct Conn {
    buf: ReassemblyBuffer,
    last_delivery: u64,
}

struct Sim<'a> {
    spec: &'a WorkloadSpec,
    faults: &'a [FaultSpec],
    seed: u64,
    now: u64,
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    actions: HashMap<u64, Action>,
    next_action: u64,
    in_flight: HashMap<Uid, Msg>,
    error: Option<String>,
    agents: Vec<Agent>,
    next_id: Vec<u64>,
    procs: Vec<Process>,
    threads: Vec<Thread>,
    instances: Vec<Instance>,
    conns: HashMap<(Endpoint, Endpoint), Conn>,
    slots: HashMap<usize, (u64, usize)>,
    next_slot: usize,
    next_data: u64,
    rng: ChaCha8Rng,
    chunk_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    client_uids: UidSource,
    trace: Vec<TraceEvent>,
    truth: GroundTruth,
    requests: Vec<(String, usize)>,
    entries: BTreeMap<u64, EventId>,
    members: BTreeMap<u64, BTreeSet<EventId>>,
    comp_events: BTreeMap<String, u64>,
    required_events: BTreeMap<String, u64>,
    boot_events: BTreeMap<String, u64>,
    crashed: BTreeSet<String>,
}

impl<'a> Sim<'a> {
    fn new(spec: &'a WorkloadSpec, faults: &'a [FaultSpec], seed: u64) -> Self {
        Self {
            spec,
            faults,
            seed,
            now: 0,
            heap: BinaryHeap::new(),
            actions: HashMap::new(),
            next_action: 0,
            in_flight: HashMap::new(),
            error: None,
            agents: (0..spec.nodes.len()).map(|n| Agent::new(n as u32, seed)).collect(),
            next_id: vec![100; spec.nodes.len()],
            procs: Vec::new(),
            threads: Vec::new(),
            instances: Vec::new(),
            conns: HashMap::new(),
            slots: HashMap::new(),
            next_slot: 0,
            next_data: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            chunk_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9)),
            noise_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x7F4A_7C15)),
            client_uids: UidSource::new(seed ^ 0xC1_1E47),
            trace: Vec::new(),
            truth: GroundTruth::default(),
            requests: Vec::new(),
            entries: BTreeMap::new(),
            members: BTreeMap::new(),
            comp_events: BTreeMap::new(),
            required_events: BTreeMap::new(),
            boot_events: BTreeMap::new(),
            crashed: BTreeSet::new(),
        }
    }

    fn schedule(&mut self, at: u64, action: Action) {
        let id = self.next_action;
        self.next_action += 1;
        self.actions.insert(id, action);
        self.heap.push(Reverse((at, id)));
    }

    fn alloc_id(&mut self, node: usize) -> u64 {
        self.next_id[node] += 1;
        self.next_id[node]
    }

    fn new_process(&mut self, node: usize, pid: u64, component: String) -> usize {
        let p = self.procs.len();
        self.procs.push(Process {
            node,
            pid,
            component,
            alive: true,
            live_threads: 0,
            exited: None,
            exit_waiter: None,
            pid_waiters: Vec::new(),
            kills: VecDeque::new(),
            sig_waiter: None,
        });
        p
    }

    fn new_thread(&mut self, proc_: usize, tid: u64, role: Role, instrs: Vec<Instr>, request: Option<u64>, parents: Vec<(EventId, Rel)>) -> usize {
        let gid = self.threads.len();
        self.threads.push(Thread {
            proc_,
            tid,
            role,
            instrs,
            pc: 0,
            request,
            next_parents: parents,
            last_event: None,
            done: false,
            joiners: Vec::new(),
            mailbox: VecDeque::new(),
            waiting_reply: false,
            pending: None,
            reply: None,
        });
        if role == Role::Plain {
            self.procs[proc_].live_threads += 1;
        }
        gid
    }

    fn node_of(&self, gid: usize) -> usize {
        self.procs[self.threads[gid].proc_].node
    }

    fn alive(&self, gid: usize) -> bool {
        self.procs[self.threads[gid].proc_].alive
    }

    fn component_of(&self, gid: usize) -> &str {
        &self.procs[self.threads[gid].proc_].component
    }

    fn boot(&mut self) {
        let node_ix: HashMap<&str, usize> = self.spec.nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect();
        for c in &self.spec.components {
            for n in &c.nodes {
                let node = node_ix[n.as_str()];
                let pid = self.alloc_id(node);
                let p = self.new_process(node, pid, c.name.clone());
                let main = self.new_thread(p, pid, Role::Boot, Vec::new(), None, Vec::new());
                let inst = self.instances.len();
                self.instances.push(Instance {
                    component: c.name.clone(),
                    proc_: p,
                    inbox: VecDeque::new(),
                    idle_workers: VecDeque::new(),
                    data: VecDeque::new(),
                    idle_consumers: VecDeque::new(),
                });
                let mut args = BTreeMap::new();
                args.insert("prog".to_string(), c.name.clone());
                self.emit_direct(main, EXEC, args, 0);
                for k in 0..(c.workers + c.consumers) {
                    let tid = self.alloc_id(node);
                    self.emit_direct(main, THREAD_CREATE, BTreeMap::new(), tid as i64);
                    let role = if k < c.workers { Role::Worker(inst) } else { Role::Consumer(inst) };
                    let t = self.new_thread(p, tid, role, Vec::new(), None, Vec::new());
                    match role {
                        Role::Worker(_) => self.instances[inst].idle_workers.push_back(t),
                        _ => self.instances[inst].idle_consumers.push_back(t),
                    }
                }
                self.threads[main].done = true;
            }
        }
        for (c, n) in &self.comp_events {
            self.boot_events.insert(c.clone(), *n);
        }
    }

    fn schedule_requests(&mut self) {
        let types: Vec<usize> = self
            .spec
            .request_types
            .iter()
            .enumerate()
            .filter(|(_, r)| self.spec.run.only_types.is_empty() || self.spec.run.only_types.contains(&r.name))
            .map(|(i, _)| i)
            .collect();
        let total: u32 = types.iter().map(|i| self.spec.request_types[*i].weight).sum();
        for k in 0..self.spec.run.requests {
            let mut pick = self.rng.gen_range(0..total.max(1));
            let mut chosen = types[0];
            for i in &types {
                let w = self.spec.request_types[*i].weight;
                if pick < w {
                    chosen = *i;
                    break;
                }
                pick -= w;
            }
            let rt = &self.spec.request_types[chosen];
            let inst = self.pick_instance(&rt.entry.clone(), None);
            self.requests.push((rt.name.clone(), inst));
            self.schedule(FIRST_ARRIVAL + k * self.spec.run.gap_us, Action::Arrive(k));
        }
    }

    fn pick_instance(&mut self, component: &str, node: Option<usize>) -> usize {
        let cands: Vec<usize> = self
            .instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.component == component && node.is_none_or(|n| self.procs[i.proc_].node == n))
            .map(|(k, _)| k)
            .collect();
        if cands.is_empty() {
            return usize::MAX;
        }
        cands[self.rng.gen_range(0..cands.len())]
    }

    fn run(&mut self) -> Result<(), SpecError> {
        while let Some(Reverse((t, id))) = self.heap.pop() {
            self.now = t;
            let action = self.actions.remove(&id).expect("scheduled action");
            match action {
                Action::Complete(gid) => self.complete(gid),
                Action::Chunk { conn, bytes } => self.on_chunk(conn, &bytes),
                Action::Datagram { to, bytes } => {
                    if self.procs[to].alive {
                        let (uid, payload) = unframe_datagram(&bytes).expect("simulator frames are well formed");
                        self.on_message(uid, payload);
                    }
                }
                Action::Arrive(k) => self.arrive(k),
                Action::Data { inst, item } => {
                    if self.procs[self.instances[inst].proc_].alive {
                        self.instances[inst].data.push_back(item);
                        self.dispatch_data(inst);
                    }
                }
            }
            if let Some(e) = self.error.take() {
                return Err(SpecError::Invalid(e));
            }
            if self.trace.len() > MAX_EVENTS {
                return Err(SpecError::Invalid(format!("workload exceeded {MAX_EVENTS} events")));
            }
        }
        Ok(())
    }

    fn arrive(&mut self, k: u64) {
        let (rtype, inst) = self.requests[k as usize].clone();
        let rt = self.spec.request_types.iter().find(|r| r.name == rtype).unwrap();
        let msg = Msg {
            meta: Meta::Request {
                inst,
                script: rt.script.clone(),
                request: Some(k),
                entry_type: Some(rtype.clone()),
                reply: Some((ReplyTo::Client, rt.bytes)),
                datagram: false,
            },
            send: None,
            extra_delay: 0,
        };
        let uid = self.client_uids.next_uid();
        let payload = payload_of(uid, rt.bytes);
        let framed = frame_message(&payload, uid);
        let to = Endpoint::Proc(self.instances[inst].proc_);
        self.transmit((Endpoint::Client(k), to), framed, 0, uid, msg);
    }

    fn effective_duration(&mut self, gid: usize, call: &str, nominal: u64, extra: u64) -> u64 {
        let comp = self.component_of(gid).to_string();
        let mut d = nominal as f64;
        for f in self.faults {
            match f {
                FaultSpec::CpuBurn { component, factor } if *component == comp => d *= factor,
                FaultSpec::DiskFull { component, factor } if *component == comp && DISK_CALLS.contains(&call) => d *= factor,
                _ => {}
            }
        }
        d += extra as f64;
        if self.spec.noise > 0.0 {
            d *= 1.0 + self.noise_rng.gen_range(-self.spec.noise..=self.spec.noise);
        }
        (d.round() as u64).max(1)
    }

    fn locked(&self, gid: usize) -> bool {
        let comp = self.component_of(gid);
        self.faults.iter().any(|f| matches!(f, FaultSpec::ResourceLock { component } if component == comp))
    }

    fn latency_extra(&self, from: &str, to: &str) -> u64 {
        self.faults
            .iter()
            .map(|f| match f {
                FaultSpec::NetworkLatency { from: a, to: b, delay_us } if a == from && b == to => *delay_us,
                _ => 0,
            })
            .sum()
    }

    fn begin(&mut self, gid: usize, mut p: Pending) {
        let (nominal, extra) = match &p.kind {
            Kind::Recv(..) => (self.spec.nominal(&p.call), p.dur),
            _ => (p.dur, 0),
        };
        p.dur = self.effective_duration(gid, &p.call, nominal, extra);
        let at = self.now + p.dur;
        self.threads[gid].pending = Some(p);
        self.schedule(at, Action::Complete(gid));
    }

    fn pending(call: &str, args: BTreeMap<String, String>, ret: i64, dur: u64, after: After) -> Pending {
        Pending { call: call.to_string(), args, ret, kind: Kind::Other, dur, parents: None, entry_type: None, after, optional: false }
    }

    fn step(&mut self, gid: usize) {
        if !self.alive(gid) || self.threads[gid].done {
            return;
        }
        let th = &self.threads[gid];
        if th.pc >= th.instrs.len() {
            self.finish_activity(gid);
            return;
        }
        let instr = th.instrs[th.pc].clone();
        let node = self.node_of(gid);
        let nominal = |s: &Self, c: &str| s.spec.nominal(c);
        match instr {
            Instr::Call { name, dur, optional } => {
                let p = Pending { optional, ..Self::pending(&name, BTreeMap::new(), 0, dur, After::Nothing) };
                self.begin(gid, p)
            }
            Instr::Guarded { name, dur, fail } => {
                let p = if self.locked(gid) {
                    Self::pending(&name, BTreeMap::new(), -1, dur, After::Fail(fail))
                } else {
                    Self::pending(&name, BTreeMap::new(), 0, dur, After::Nothing)
                };
                self.begin(gid, p);
            }
            Instr::Spawn { script, slot } => {
                let mut body = Vec::new();
                expand(self.spec, &self.spec.scripts[&script], &mut self.rng, &mut self.next_slot, &mut body);
                let tid = self.alloc_id(node);
                self.begin(gid, Self::pending(THREAD_CREATE, BTreeMap::new(), tid as i64, nominal(self, THREAD_CREATE), After::Thread { slot, body, tid }));
            }
            Instr::SpawnRaw { body, slot } => {
                let tid = self.alloc_id(node);
                self.begin(gid, Self::pending(THREAD_CREATE, BTreeMap::new(), tid as i64, nominal(self, THREAD_CREATE), After::Thread { slot, body, tid }));
            }
            Instr::Join { slot } => {
                let (tid, target) = self.slots[&slot];
                if self.threads[target].done {
                    let last = self.threads[target].last_event;
                    let args = BTreeMap::from([("tid".to_string(), tid.to_string())]);
                    self.begin(gid, Self::pending(THREAD_JOIN, args, 0, nominal(self, THREAD_JOIN), After::Synced(last)));
                } else {
                    self.threads[target].joiners.push(gid);
                }
            }
            Instr::Fork { script, exec, signal, slot } => {
                let pid = self.alloc_id(node);
                self.begin(gid, Self::pending(FORK, BTreeMap::new(), pid as i64, nominal(self, FORK), After::Fork { slot, script, exec, signal, pid }));
            }
            Instr::Kill { slot } => {
                let (pid, child) = self.slots[&slot];
                let args = BTreeMap::from([("pid".to_string(), pid.to_string()), ("sig".to_string(), SIGNAL.to_string())]);
                let proc_ = self.threads[child].proc_;
                self.begin(gid, Self::pending(KILL, args, 0, nominal(self, KILL), After::Signal { proc_ }));
            }
            Instr::WaitPid { slot } => {
                let (pid, child) = self.slots[&slot];
                let proc_ = self.threads[child].proc_;
                if let Some(exit) = self.procs[proc_].exited {
                    let args = BTreeMap::from([("pid".to_string(), pid.to_string())]);
                    self.begin(gid, Self::pending(WAITPID, args, pid as i64, nominal(self, WAITPID), After::Synced(Some(exit))));
                } else {
                    self.procs[proc_].pid_waiters.push(gid);
                }
            }
            Instr::Send { target, script, bytes, mode } => self.begin_send(gid, &target, script, bytes, mode),
            Instr::RecvReply => {
                if let Some(inc) = self.threads[gid].mailbox.pop_front() {
                    self.threads[gid].waiting_reply = false;
                    let parents = inc.msg.send.map(|s| vec![(s, Rel::Comr)]).unwrap_or_default();
                    let p = Pending {
                        call: "recv".into(),
                        args: BTreeMap::new(),
                        ret: 0,
                        kind: Kind::Recv(inc.uid, inc.payload),
                        dur: inc.msg.extra_delay,
                        parents: Some(parents),
                        entry_type: None,
                        after: After::Nothing,
                        optional: false,
                    };
                    self.begin(gid, p);
                } else {
                    self.threads[gid].waiting_reply = true;
                }
            }
            Instr::Put { target, script, shm } => {
                let inst = self.pick_instance(&target, shm.then_some(node));
                if inst == usize::MAX {
                    self.error = Some(format!("no `{target}` instance on the node of `{}` for a shared-memory hand-off", self.component_of(gid)));
                    return;
                }
                self.next_data += 1;
                let data = format!("d{}", self.next_data);
                let item = DataItem { data: data.clone(), put: EventId::new(0, 0), script, request: self.threads[gid].request, shm };
                let call = if shm { SHM_WRITE } else { QUEUE_PUT };
                let args = BTreeMap::from([("data".to_string(), data)]);
                self.begin(gid, Self::pending(call, args, 0, nominal(self, call), After::Data { inst, item }));
            }
            Instr::Sigwait => {
                let proc_ = self.threads[gid].proc_;
                if let Some(kill) = self.procs[proc_].kills.pop_front() {
                    let args = BTreeMap::from([("sig".to_string(), SIGNAL.to_string())]);
                    self.begin(gid, Self::pending(SIGWAIT, args, SIGNAL.parse().unwrap(), nominal(self, SIGWAIT), After::Synced(Some(kill))));
                } else {
                    self.procs[proc_].sig_waiter = Some(gid);
                }
            }
            Instr::Exec { prog } => {
                let args = BTreeMap::from([("prog".to_string(), prog)]);
                self.begin(gid, Self::pending(EXEC, args, 0, nominal(self, EXEC), After::Nothing));
            }
            Instr::Exit => {
                let proc_ = self.threads[gid].proc_;
                if self.procs[proc_].live_threads > 1 {
                    self.procs[proc_].exit_waiter = Some(gid);
                } else {
                    self.begin(gid, Self::pending(EXIT, BTreeMap::new(), 0, nominal(self, EXIT), After::Exit));
                }
            }
            Instr::Reply => {
                let (to, bytes) = self.threads[gid].reply.clone().expect("reply target");
                let payload = vec![0u8; bytes];
                let (dest, msg) = match to {
                    ReplyTo::Client => (None, None),
                    ReplyTo::Thread { gid: caller, proc_ } => {
                        let extra = self.latency_extra(self.component_of(gid), &self.procs[proc_].component);
                        (Some(Endpoint::Proc(proc_)), Some(Msg { meta: Meta::Reply { gid: caller }, send: None, extra_delay: extra }))
                    }
                };
                let after = match (dest, msg) {
                    (Some(to), Some(msg)) => After::Deliver { to, datagram: false, msg },
                    _ => After::Nothing,
                };
                let mut p = Self::pending("send", BTreeMap::new(), 0, nominal(self, "send"), after);
                p.kind = Kind::Send(payload);
                self.begin(gid, p);
            }
        }
    }

    fn begin_send(&mut self, gid: usize, target: &str, script: String, bytes: usize, mode: SendMode) {
        let inst = self.pick_instance(target, None);
        let to_proc = self.instances[inst].proc_;
        let from_comp = self.component_of(gid).to_string();
        let extra = self.latency_extra(&from_comp, target);
        let here = self.threads[gid].proc_;
        let (reply, datagram) = match mode {
            SendMode::Rpc { reply_bytes } => (Some((ReplyTo::Thread { gid, proc_: here }, reply_bytes)), false),
            SendMode::RpcTo { reply_bytes, slot } => {
                let receiver = self.slots[&slot].1;
                (Some((ReplyTo::Thread { gid: receiver, proc_: here }, reply_bytes)), false)
            }
            SendMode::OneWay { datagram } => (None, datagram),
        };
        let msg = Msg {
            meta: Meta::Request { inst, script, request: self.threads[gid].request, entry_type: None, reply, datagram },
            send: None,
            extra_delay: extra,
        };
        let call = if datagram { "sendto" } else { "send" };
        let mut p = Self::pending(call, BTreeMap::new(), 0, self.spec.nominal(call), After::Deliver { to: Endpoint::Proc(to_proc), datagram, msg });
        p.kind = Kind::Send(vec![0u8; bytes]);
        self.begin(gid, p);
    }

    fn complete(&mut self, gid: usize) {
        if !self.alive(gid) {
            return;
        }
        let p = self.threads[gid].pending.take().expect("pending call");
        let parents = p.parents.clone();
        let (event, framed) = self.emit(gid, &p, parents);
        let Some(event) = event else { return };
        let th = &mut self.threads[gid];
        th.next_parents = vec![(event, Rel::Tcr)];
        let mut advance = true;
        match p.after {
            After::Nothing => {}
            After::Synced(target) => {
                if let Some(t) = target {
                    self.threads[gid].next_parents.push((t, Rel::Synr));
                }
            }
            After::Thread { slot, body, tid } => {
                let proc_ = self.threads[gid].proc_;
                let request = self.threads[gid].request;
                let child = self.new_thread(proc_, tid, Role::Plain, body, request, vec![(event, Rel::Topcr)]);
                self.slots.insert(slot, (tid, child));
                self.step(child);
            }
            After::Fork { slot, script, exec, signal, pid } => {
                let parent = self.threads[gid].proc_;
                let node = self.procs[parent].node;
                let comp = self.procs[parent].component.clone();
                let child_proc = self.new_process(node, pid, comp);
                let mut body = Vec::new();
                if let Some(prog) = exec {
                    body.push(Instr::Exec { prog });
                }
                if signal {
                    body.push(Instr::Sigwait);
                }
                expand(self.spec, &self.spec.scripts[&script], &mut self.rng, &mut self.next_slot, &mut body);
                body.push(Instr::Exit);
                let request = self.threads[gid].request;
                let child = self.new_thread(child_proc, pid, Role::Plain, body, request, vec![(event, Rel::Topcr)]);
                self.slots.insert(slot, (pid, child));
                self.step(child);
            }
            After::Signal { proc_ } => {
                if self.procs[proc_].alive {
                    self.procs[proc_].kills.push_back(event);
                    if let Some(w) = self.procs[proc_].sig_waiter.take() {
                        self.step(w);
                    }
                }
            }
            After::Deliver { to, datagram, mut msg } => {
                msg.send = Some(event);
                let (uid, framed) = framed.expect("send frames");
                let from = Endpoint::Proc(self.threads[gid].proc_);
                if datagram {
                    let Endpoint::Proc(to_proc) = to else { unreachable!() };
                    let at = self.now + self.spec.link_latency_us + msg.extra_delay;
                    self.in_flight.insert(uid, msg);
                    self.schedule(at, Action::Datagram { to: to_proc, bytes: framed });
                } else {
                    let extra = msg.extra_delay;
                    self.transmit((from, to), framed, extra, uid, msg);
                }
            }
            After::Data { inst, mut item } => {
                item.put = event;
                let lat = if item.shm { 1 } else { self.spec.link_latency_us };
                self.schedule(self.now + lat, Action::Data { inst, item });
            }
            After::Activity { script, reply } => {
                let mut body = Vec::new();
                expand(self.spec, &self.spec.scripts[&script], &mut self.rng, &mut self.next_slot, &mut body);
                if reply.is_some() {
                    body.push(Instr::Reply);
                }
                let th = &mut self.threads[gid];
                th.instrs = body;
                th.pc = 0;
                th.reply = reply;
                advance = false;
            }
            After::Fail(steps) => {
                let mut body = Vec::new();
                expand(self.spec, &steps, &mut self.rng, &mut self.next_slot, &mut body);
                let th = &mut self.threads[gid];
                let at = th.pc + 1;
                th.instrs.splice(at..at, body);
            }
            After::Exit => {
                let proc_ = self.threads[gid].proc_;
                self.procs[proc_].exited = Some(event);
                for w in std::mem::take(&mut self.procs[proc_].pid_waiters) {
                    self.step(w);
                }
            }
        }
        if advance {
            self.threads[gid].pc += 1;
        }
        self.step(gid);
    }

    fn transmit(&mut self, conn: (Endpoint, Endpoint), framed: Vec<u8>, extra: u64, uid: Uid, msg: Msg) {
        self.in_flight.insert(uid, msg);
        let at = self.now + self.spec.link_latency_us + extra;
        let pieces = self.chunk_rng.gen_range(1..=3usize).min(framed.len());
        let mut cuts: Vec<usize> = (1..pieces).map(|_| self.chunk_rng.gen_range(1..framed.len())).collect();
        cuts.sort_unstable();
        cuts.dedup();
        let c = self.conns.entry(conn).or_insert_with(|| Conn { buf: ReassemblyBuffer::new(), last_delivery: 0 });
        let at = at.max(c.last_delivery);
        c.last_delivery = at;
        let mut start = 0;
        for cut in cuts.into_iter().chain(std::iter::once(framed.len())) {
            let bytes = framed[start..cut].to_vec();
            start = cut;
            self.schedule(at, Action::Chunk { conn, bytes });
        }
    }

    fn on_chunk(&mut self, conn: (Endpoint, Endpoint), bytes: &[u8]) {
        if let Endpoint::Proc(p) = conn.1 {
            if !self.procs[p].alive {
                return;
            }
        }
        let msgs = self.conns.get_mut(&conn).unwrap().buf.push(bytes).expect("simulator streams are well formed");
        for (uid, payload) in msgs {
            self.on_message(uid, payload);
        }
    }

    fn on_message(&mut self, uid: Uid, payload: Vec<u8>) {
        let Some(msg) = self.in_flight.remove(&uid) else { return };
        match msg.meta.clone() {
            Meta::Request { inst, .. } => {
                self.instances[inst].inbox.push_back(Incoming { uid, payload, msg });
                self.dispatch(inst);
            }
            Meta::Reply { gid } => {
                if !self.alive(gid) {
                    return;
                }
                self.threads[gid].mailbox.push_back(Incoming { uid, payload, msg });
                if self.threads[gid].waiting_reply {
                    self.step(gid);
                }
            }
        }
    }

    fn dispatch(&mut self, inst: usize) {
        while !self.instances[inst].inbox.is_empty() && !self.instances[inst].idle_workers.is_empty() {
            let inc = self.instances[inst].inbox.pop_front().unwrap();
            let w = self.instances[inst].idle_workers.pop_front().unwrap();
            let Meta::Request { script, request, entry_type, reply, datagram, .. } = inc.msg.meta.clone() else { unreachable!() };
            self.threads[w].request = request;
            let parents = inc.msg.send.map(|s| vec![(s, Rel::Comr)]).unwrap_or_default();
            let p = Pending {
                call: if datagram { "recvfrom".into() } else { "recv".into() },
                args: BTreeMap::new(),
                ret: 0,
                kind: Kind::Recv(inc.uid, inc.payload),
                dur: inc.msg.extra_delay,
                parents: Some(parents),
                entry_type,
                after: After::Activity { script, reply },
                optional: false,
            };
            self.begin(w, p);
        }
    }

    fn dispatch_data(&mut self, inst: usize) {
        while !self.instances[inst].data.is_empty() && !self.instances[inst].idle_consumers.is_empty() {
            let item = self.instances[inst].data.pop_front().unwrap();
            let c = self.instances[inst].idle_consumers.pop_front().unwrap();
            self.threads[c].request = item.request;
            let call = if item.shm { SHM_READ } else { QUEUE_GET };
            let args = BTreeMap::from([("data".to_string(), item.data.clone())]);
            let mut p = Self::pending(call, args, 0, self.spec.nominal(call), After::Activity { script: item.script.clone(), reply: None });
            p.parents = Some(vec![(item.put, Rel::Ddr)]);
            self.begin(c, p);
        }
    }

    fn finish_activity(&mut self, gid: usize) {
        match self.threads[gid].role {
            Role::Worker(inst) => {
                let th = &mut self.threads[gid];
                th.request = None;
                th.instrs.clear();
                th.pc = 0;
                th.reply = None;
                self.instances[inst].idle_workers.push_back(gid);
                self.dispatch(inst);
            }
            Role::Consumer(inst) => {
                let th = &mut self.threads[gid];
                th.request = None;
                th.instrs.clear();
                th.pc = 0;
                self.instances[inst].idle_consumers.push_back(gid);
                self.dispatch_data(inst);
            }
            Role::Plain => {
                self.threads[gid].done = true;
                let proc_ = self.threads[gid].proc_;
                self.procs[proc_].live_threads -= 1;
                for j in std::mem::take(&mut self.threads[gid].joiners) {
                    self.step(j);
                }
                if self.procs[proc_].live_threads == 1 {
                    if let Some(w) = self.procs[proc_].exit_waiter.take() {
                        self.step(w);
                    }
                }
            }
            Role::Boot => self.threads[gid].done = true,
        }
    }

    fn timestamp(&self, node: usize) -> u64 {
        (CLOCK_BASE as i64 + self.now as i64 + self.spec.nodes[node].skew_us).max(0) as u64
    }

    fn emit_direct(&mut self, gid: usize, call: &str, args: BTreeMap<String, String>, ret: i64) {
        let dur = self.spec.nominal(call);
        let p = Self::pending(call, args, ret, dur, After::Nothing);
        let parents = self.threads[gid].next_parents.clone();
        if let (Some(e), _) = self.emit(gid, &p, Some(parents)) {
            self.threads[gid].next_parents = vec![(e, Rel::Tcr)];
        }
    }

    /// Runs the call through the node's agent and records trace and truth.
    fn emit(&mut self, gid: usize, p: &Pending, parents: Option<Vec<(EventId, Rel)>>) -> (Option<EventId>, Option<(Uid, Vec<u8>)>) {
        let th = &self.threads[gid];
        let proc_ = &self.procs[th.proc_];
        let node = proc_.node;
        let site = CallSite { pid: proc_.pid, tid: th.tid, timestamp: self.timestamp(node), duration: p.dur };
        let agent = &mut self.agents[node];
        let (mut event, framed) = match &p.kind {
            Kind::Other => (agent.on_other_call(&site, &p.call, p.args.clone(), p.ret), None),
            Kind::Send(payload) => {
                let (framed, e) = agent.on_send(&site, &p.call, payload, p.args.clone());
                (e.clone(), Some((e.msg_id.unwrap(), framed)))
            }
            Kind::Recv(uid, payload) => (agent.on_recv(&site, &p.call, (*uid, payload), p.args.clone()), None),
        };
        if let Some(rt) = &p.entry_type {
            event.request_type = Some(rt.clone());
        }
        let id = event.event_id;
        let parents = parents.unwrap_or_else(|| th.next_parents.clone());
        for (parent, rel) in parents {
            self.truth.edges.insert(Edge { parent, child: id, rel });
        }
        if let Some(r) = th.request {
            self.members.entry(r).or_default().insert(id);
            if p.entry_type.is_some() {
                self.entries.insert(r, id);
            }
        }
        let comp = proc_.component.clone();
        if p.call == EXEC {
            if let Some(prog) = p.args.get("prog") {
                self.procs[self.threads[gid].proc_].component = prog.clone();
            }
        }
        let comp = if p.call == EXEC { self.component_of(gid).to_string() } else { comp };
        self.threads[gid].last_event = Some(id);
        self.trace.push(event);
        let n = self.comp_events.entry(comp.clone()).or_insert(0);
        *n += 1;
        let n = *n;
        if !p.optional {
            self.required_events.insert(comp.clone(), n);
        }
        for f in self.faults {
            if let FaultSpec::ComponentCrash { component, after_events } = f {
                if *component == comp && n == *after_events {
                    self.crash(&comp);
                }
            }
        }
        (Some(id), framed)
    }

    fn crash(&mut self, comp: &str) {
        self.crashed.insert(comp.to_string());
        for p in self.procs.iter_mut().filter(|p| p.component == comp) {
            p.alive = false;
        }
    }

    fn finish(self) -> SimOutput {
        let mut truth = self.truth;
        let mut reqs = Vec::new();
        for (k, (rtype, _)) in self.requests.iter().enumerate() {
            let k = k as u64;
            let entry = self.entries.get(&k).copied();
            if let Some(root) = entry {
                truth.requests.push(RequestTruth {
                    id: k,
                    request_type: rtype.clone(),
                    root,
                    members: self.members.get(&k).cloned().unwrap_or_default(),
                });
            }
            reqs.push(ManifestRequest { id: k, request_type: rtype.clone(), entry: entry.map(|e| e.to_string()) });
        }
        SimOutput {
            manifest: Manifest {
                workload: self.spec.name.clone(),
                seed: self.seed,
                events: self.trace.len(),
                requests: reqs,
                faults: self.faults.to_vec(),
                component_events: self.comp_events,
                required_events: self.required_events,
                boot_events: self.boot_events,
                crashed: self.crashed.into_iter().collect(),
            },
            trace: self.trace,
            truth,
        }
    }
}

/// Deterministic payload bytes for a message.
fn payload_of(uid: Uid, len: usize) -> Vec<u8> {
    (0..len).map(|i| uid.0[i % 16] ^ (i as u8)).collect()
}
