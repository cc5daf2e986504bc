//! One line per acceptance criterion; exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reppath::agent::{frame_message, traffic_overhead, ReassemblyBuffer, HEADER_LEN};
use reppath::detect::DetectorConfig;
use reppath::eval::{
    detect_trace, run_campaign, run_perf_campaign, single_request, traffic_overhead_report, CampaignConfig, PerfConfig, Scores,
};
use reppath::event::{EventId, RelationshipType as Rel, TraceEvent, Uid};
use reppath::fsa::{build_per_path_fsa, combine_fsas, prune_loops_concurrency, ComponentList, Fsa, PNode};
use reppath::rep::{build_rep, dag_to_tree, default_data_extractor, Edge, RepGraph};
use reppath::sim::{bundled, run_workload};
use reppath::train::{request_paths, train, Variant};

const WORKLOADS: [&str; 4] = ["mixed", "hadoop", "param_server", "bulk_copy"];
const LINK_BUDGET: Duration = Duration::from_secs(60);
const CAMPAIGN_WORKLOADS: [&str; 2] = ["hadoop", "mixed"];
const MIN_PRECISION: f64 = 0.9;
const MIN_RECALL: f64 = 0.9;
const OVERHEAD_AT_1000: f64 = 0.028;
const OVERHEAD_TOL: f64 = 1e-9;
const RANDOM_FRAMING_CASES: usize = 10_000;
const AGGREGATION_SETS: usize = 50;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn trace(workload: &str, seed: u64) -> Vec<TraceEvent> {
    run_workload(&bundled(workload).unwrap(), &[], seed).unwrap().trace
}

fn linking_matches_truth() -> Outcome {
    let start = Instant::now();
    let mut graphs = 0;
    for w in WORKLOADS {
        for seed in 1..=3 {
            let out = run_workload(&bundled(w).unwrap(), &[], seed).map_err(|e| e.to_string())?;
            let (g, unmatched) = build_rep(out.trace, Some(default_data_extractor)).map_err(|e| e.to_string())?;
            let truth: BTreeSet<Edge> = out.truth.edges_of(&[Rel::Tcr, Rel::Topcr, Rel::Comr, Rel::Synr, Rel::Ddr]).into_iter().collect();
            ensure(unmatched.is_empty(), || format!("{w} seed {seed}: {} unmatched reads", unmatched.len()))?;
            ensure(g.edges == truth, || {
                format!(
                    "{w} seed {seed}: {} missing, {} extra edges",
                    truth.difference(&g.edges).count(),
                    g.edges.difference(&truth).count()
                )
            })?;
            graphs += 1;
        }
    }
    let took = start.elapsed();
    ensure(took < LINK_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("{graphs} graphs identical to ground truth in {took:.2?}"))
}

fn data_links_merge_fragments() -> Outcome {
    let one = single_request(&bundled("mixed").unwrap(), "batch");
    let mut seen = Vec::new();
    for seed in 1..=5 {
        let out = run_workload(&one, &[], seed).unwrap();
        let members = &out.truth.requests[0].members;
        let without = fragments_holding(&build_rep(out.trace.iter().cloned(), None).unwrap().0, members);
        let with = fragments_holding(&build_rep(out.trace, Some(default_data_extractor)).unwrap().0, members);
        ensure(without > 1, || format!("seed {seed}: only {without} fragment without data links"))?;
        ensure(with == 1, || format!("seed {seed}: {with} fragments with data links"))?;
        seen.push(without);
    }
    Ok(format!("batch request fragments without data links {seen:?}, with data links 1"))
}

/// Weakly connected fragments that contain at least one request member.
fn fragments_holding(g: &RepGraph, members: &BTreeSet<EventId>) -> usize {
    g.fragments().iter().filter(|f| f.iter().any(|id| members.contains(id))).count()
}

fn framing_is_lossless() -> Outcome {
    let mut exhaustive = 0usize;
    for len in 0..=(64 - HEADER_LEN) {
        let payload: Vec<u8> = (0..len).map(|b| (b * 53 + 7) as u8).collect();
        let uid = Uid([0x5A ^ len as u8; 16]);
        let frame = frame_message(&payload, uid);
        for i in 0..=frame.len() {
            for j in i..=frame.len() {
                let got = push_all(&[&frame[..i], &frame[i..j], &frame[j..]])?;
                ensure(got == vec![(uid, payload.clone())], || format!("len {len} cuts {i},{j}"))?;
                exhaustive += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xF4A3);
    for case in 0..RANDOM_FRAMING_CASES {
        let mut stream = Vec::new();
        let mut expected = Vec::new();
        for _ in 0..rng.gen_range(1..5) {
            let n = rng.gen_range(0..2000);
            let payload: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
            let uid = Uid(rng.gen());
            stream.extend(frame_message(&payload, uid));
            expected.push((uid, payload));
        }
        let mut chunks = Vec::new();
        let mut at = 0;
        while at < stream.len() {
            let n = rng.gen_range(1..=(stream.len() - at).min(300));
            chunks.push(&stream[at..at + n]);
            at += n;
        }
        ensure(push_all(&chunks)? == expected, || format!("random case {case}"))?;
    }
    Ok(format!("{exhaustive} exhaustive chunkings, {RANDOM_FRAMING_CASES} random streams"))
}

fn push_all(chunks: &[&[u8]]) -> Result<Vec<(Uid, Vec<u8>)>, String> {
    let mut r = ReassemblyBuffer::new();
    let mut out = Vec::new();
    for c in chunks {
        out.extend(r.push(c).map_err(|e| e.to_string())?);
    }
    ensure(r.pending() == 0, || format!("{} bytes left over", r.pending()))?;
    Ok(out)
}

fn priority(rel: Rel) -> u8 {
    match rel {
        Rel::Comr => 4,
        Rel::Ddr => 3,
        Rel::Synr => 2,
        Rel::Topcr => 1,
        Rel::Tcr => 0,
    }
}

fn graphs_are_acyclic_trees() -> Outcome {
    let mut checked = 0;
    let mut arbitrated = 0;
    for w in WORKLOADS {
        for seed in 10..13 {
            let (g, _) = build_rep(trace(w, seed), Some(default_data_extractor)).unwrap();
            g.check_acyclic().map_err(|e| format!("{w}: {e}"))?;
            let t = dag_to_tree(&g);
            let mut parent_of: BTreeMap<_, Vec<&Edge>> = BTreeMap::new();
            for e in &t.graph.edges {
                parent_of.entry(e.child).or_default().push(e);
            }
            let roots: BTreeSet<_> = g.roots().into_iter().collect();
            for id in g.events.keys() {
                let n = parent_of.get(id).map_or(0, Vec::len);
                ensure(n == usize::from(!roots.contains(id)), || format!("{w}: {id} has {n} tree parents"))?;
            }
            for r in &t.removed {
                let kept = parent_of[&r.child][0];
                ensure(priority(kept.rel) >= priority(r.rel), || format!("{w}: kept {kept:?} over {r:?}"))?;
                arbitrated += 1;
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} graphs acyclic, one parent per non-root, {arbitrated} arbitrated edges respect priority"))
}

fn preorder<'a>(chain: &'a [PNode], out: &mut Vec<&'a PNode>) {
    for n in chain {
        out.push(n);
        for b in &n.branches {
            preorder(b, out);
        }
    }
}

fn fsa_mirrors_pruned_paths() -> Outcome {
    let mut paths = 0;
    for w in ["hadoop", "mixed"] {
        let spec = bundled(w).unwrap();
        for rt in &spec.request_types {
            for seed in 0..5 {
                let t = run_workload(&single_request(&spec, &rt.name), &[], 300 + seed).unwrap().trace;
                let comps = ComponentList::from_events(&t);
                let tree = dag_to_tree(&build_rep(t, Some(default_data_extractor)).unwrap().0);
                for root in tree.roots().into_iter().filter(|r| tree.event(*r).request_type.is_some()) {
                    let p = prune_loops_concurrency(&tree, root, &comps);
                    let f = build_per_path_fsa(&p);
                    let mut nodes = Vec::new();
                    preorder(&p.chain, &mut nodes);
                    ensure(f.tree_transition_count() == nodes.len(), || {
                        format!("{w}/{}: {} transitions for {} nodes", rt.name, f.tree_transition_count(), nodes.len())
                    })?;
                    ensure(f.states.len() == nodes.len() + 1, || format!("{w}/{}: state count", rt.name))?;
                    let marked: Vec<bool> = nodes.iter().map(|n| n.concurrent).collect();
                    let points: Vec<bool> = f.states[1..].iter().map(|s| s.concurrency).collect();
                    ensure(marked == points, || format!("{w}/{}: concurrency points differ", rt.name))?;
                    paths += 1;
                }
            }
        }
    }
    Ok(format!("{paths} paths: transitions = consolidated nodes, concurrency points match"))
}

fn aggregation_laws_hold() -> Outcome {
    let spec = bundled("hadoop").unwrap();
    let mut pool: Vec<Vec<Fsa>> = Vec::new();
    for rt in &spec.request_types {
        let one = single_request(&spec, &rt.name);
        let mut v = Vec::new();
        for seed in 0..25 {
            v.extend(request_paths(&run_workload(&one, &[], 500 + seed).unwrap().trace, true, Some(default_data_extractor)).unwrap());
        }
        pool.push(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xA66);
    for set_no in 0..AGGREGATION_SETS {
        let paths = &pool[set_no % pool.len()];
        let k = rng.gen_range(1..=12);
        let set: Vec<Fsa> = (0..k).map(|_| paths[rng.gen_range(0..paths.len())].clone()).collect();
        let (core, full) = combine_fsas(&set).map_err(|e| e.to_string())?;
        let (c, f) = (core.labeled_transitions(), full.labeled_transitions());
        ensure(c.is_subset(&f), || format!("set {set_no}: core not within full"))?;
        let (c1, f1) = combine_fsas(&set[..1]).unwrap();
        ensure(c1.labeled_transitions() == f1.labeled_transitions(), || format!("set {set_no}: singleton core != full"))?;
        let mut more = set.clone();
        more.push(paths[rng.gen_range(0..paths.len())].clone());
        let (c2, f2) = combine_fsas(&more).unwrap();
        ensure(f.is_subset(&f2.labeled_transitions()), || format!("set {set_no}: full shrank"))?;
        ensure(c2.labeled_transitions().is_subset(&c), || format!("set {set_no}: core grew"))?;
    }
    Ok(format!("{AGGREGATION_SETS} random training sets"))
}

fn fmt(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{v:.3}"))
}

fn campaign_scores() -> Outcome {
    let cfg = CampaignConfig::default();
    let mut totals: BTreeMap<Variant, Scores> = BTreeMap::new();
    for w in CAMPAIGN_WORKLOADS {
        let r = run_campaign(&bundled(w).unwrap(), &cfg).map_err(|e| e.to_string())?;
        for v in &r.variants {
            totals.entry(v.variant).or_default().add(&v.total);
        }
    }
    let p = |v| totals[&v].precision().unwrap_or(0.0);
    let r = |v| totals[&v].recall().unwrap_or(0.0);
    let summary = cfg
        .variants
        .iter()
        .map(|v| format!("{v} P={} R={}", fmt(totals[v].precision()), fmt(totals[v].recall())))
        .collect::<Vec<_>>()
        .join(", ");
    let (a, b, c, d) = (Variant::Fsa, Variant::Efsa, Variant::Paths(10), Variant::Paths(20));
    ensure(p(d) >= MIN_PRECISION && r(d) >= MIN_RECALL, || format!("FSA-20 below target: {summary}"))?;
    ensure(p(a) < p(b) && p(b) < p(c) && p(c) < p(d), || format!("precision not strictly ordered: {summary}"))?;
    ensure([a, b, c].iter().all(|v| r(*v) == 1.0), || format!("recall below 1: {summary}"))?;
    Ok(summary)
}

fn slowdowns_detected() -> Outcome {
    let mut parts = Vec::new();
    for w in CAMPAIGN_WORKLOADS {
        let spec = bundled(w).unwrap();
        let r = run_perf_campaign(&spec, &PerfConfig::default()).map_err(|e| e.to_string())?;
        ensure(r.slowed_requests > 0 && r.slowed_detected == r.slowed_requests, || {
            format!("{w}: {}/{} slowed requests detected", r.slowed_detected, r.slowed_requests)
        })?;
        ensure(r.clean_anomalies == 0, || format!("{w}: {} clean performance anomalies", r.clean_anomalies))?;
        let noisy = run_perf_campaign(&spec, &PerfConfig { noise: 0.2, ..PerfConfig::default() }).map_err(|e| e.to_string())?;
        parts.push(format!(
            "{w} {}/{} detected, clean FP 0, FP rate at 20% noise {}",
            r.slowed_detected,
            r.slowed_requests,
            fmt(noisy.false_positive_rate())
        ));
    }
    Ok(parts.join("; "))
}

fn training_replay_is_clean() -> Outcome {
    let mut replayed = 0;
    for w in CAMPAIGN_WORKLOADS {
        let spec = bundled(w).unwrap();
        let traces: Vec<_> = spec
            .request_types
            .iter()
            .flat_map(|rt| {
                let one = single_request(&spec, &rt.name);
                (0..20).map(move |s| run_workload(&one, &[], 700 + s).unwrap().trace)
            })
            .collect();
        let models = train(&traces, Variant::Paths(20), Some(default_data_extractor)).map_err(|e| e.to_string())?;
        for t in &traces {
            let d = detect_trace(&models, t, &DetectorConfig::default());
            let bad: Vec<_> = d.anomalies().iter().filter(|a| a.kind.is_functional()).collect();
            ensure(bad.is_empty(), || format!("{w}: {}", bad[0]))?;
            replayed += 1;
        }
    }
    Ok(format!("{replayed} training runs replayed, 0 functional anomalies"))
}

fn header_overhead() -> Outcome {
    let at_1000 = traffic_overhead(1000.0);
    ensure((at_1000 - OVERHEAD_AT_1000).abs() < OVERHEAD_TOL, || format!("{at_1000} at 1000 B"))?;
    let total = |w| traffic_overhead_report(&trace(w, 1)).map(|r| r.total.overhead).map_err(|e| e.to_string());
    let (ps, bc) = (total("param_server")?, total("bulk_copy")?);
    ensure(ps > bc, || format!("param_server {ps} <= bulk_copy {bc}"))?;
    Ok(format!("{:.1}% at 1000 B; param_server {:.2}% > bulk_copy {:.4}%", at_1000 * 100.0, ps * 100.0, bc * 100.0))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 10] = [
        ("linking matches ground truth", linking_matches_truth),
        ("data links merge fragments", data_links_merge_fragments),
        ("framing survives any chunking", framing_is_lossless),
        ("acyclic graphs, tree arbitration", graphs_are_acyclic_trees),
        ("automaton construction counts", fsa_mirrors_pruned_paths),
        ("core/full aggregation laws", aggregation_laws_hold),
        ("fault campaign precision/recall", campaign_scores),
        ("slowdown detection", slowdowns_detected),
        ("training replay soundness", training_replay_is_clean),
        ("header traffic overhead", header_overhead),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
