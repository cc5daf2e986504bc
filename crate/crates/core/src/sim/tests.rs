use std::collections::BTreeSet;

use super::*;
use crate::event::{EventId, RelationshipType as Rel};
use crate::rep::{build_rep, default_data_extractor, link_events};

const MINIMAL: &str = r#"
    nodes = [{ name = "n0" }]
    components = [{ name = "svc", nodes = ["n0"] }]
    request_types = [{ name = "ping", entry = "svc", script = "main" }]
    [scripts]
    main = [{ op = "local", calls = ["malloc", "open"] }]
"#;

fn request_events(out: &SimOutput, k: usize) -> Vec<crate::event::TraceEvent> {
    let members = &out.truth.requests[k].members;
    out.trace.iter().filter(|e| members.contains(&e.event_id)).cloned().collect()
}

#[test]
fn minimal_request_is_a_chain() {
    let spec = WorkloadSpec::from_toml(MINIMAL).unwrap();
    let out = run_workload(&spec, &[], 1).unwrap();
    // recv of the request, two local calls, the reply
    let evs = request_events(&out, 0);
    assert_eq!(evs.len(), 4);
    let tcr = out.truth.edges.iter().filter(|e| e.rel == Rel::Tcr && out.truth.requests[0].members.contains(&e.child)).count();
    assert_eq!(tcr, 3);
    assert_eq!(evs[0].request_type.as_deref(), Some("ping"));
    let g = link_events(evs).unwrap();
    assert_eq!(g.roots().len(), 1);
}

#[test]
fn three_step_local_script_gives_three_events_two_edges() {
    let spec = WorkloadSpec::from_toml(&MINIMAL.replace(r#"["malloc", "open"]"#, r#"["a", "b", "c"]"#)).unwrap();
    let out = run_workload(&spec, &[], 1).unwrap();
    let evs: Vec<_> = request_events(&out, 0).into_iter().filter(|e| ["a", "b", "c"].contains(&e.call_name.as_str())).collect();
    assert_eq!(evs.len(), 3);
    let ids: BTreeSet<EventId> = evs.iter().map(|e| e.event_id).collect();
    let inner = out.truth.edges.iter().filter(|e| ids.contains(&e.parent) && ids.contains(&e.child)).count();
    assert_eq!(inner, 2);
}

#[test]
fn same_seed_same_trace() {
    let spec = bundled("mixed").unwrap();
    let a = run_workload(&spec, &[], 42).unwrap();
    let b = run_workload(&spec, &[], 42).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.truth, b.truth);
    assert!(a.manifest.requests.len() >= 100);
    let c = run_workload(&spec, &[], 43).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn async_rpc_matches_receiver_thread_pattern() {
    let spec = WorkloadSpec::from_toml(
        r#"
        nodes = [{ name = "a" }, { name = "b" }]
        components = [{ name = "client", nodes = ["a"] }, { name = "server", nodes = ["b"] }]
        request_types = [{ name = "call", entry = "client", script = "main" }]
        [scripts]
        main = [{ op = "rpc_async", target = "server", script = "serve" }, { op = "local", calls = ["done"] }]
        serve = [{ op = "local", calls = ["work"] }]
        "#,
    )
    .unwrap();
    let out = run_workload(&spec, &[], 3).unwrap();
    let evs = request_events(&out, 0);
    let by = |call: &str| evs.iter().filter(|e| e.call_name == call).map(|e| e.event_id).collect::<Vec<_>>();
    let creates = by("pthread_create");
    assert_eq!(creates.len(), 2);
    let entry = out.truth.requests[0].root;
    let topcr: Vec<_> = out.truth.edges.iter().filter(|e| e.rel == Rel::Topcr && creates.contains(&e.parent)).collect();
    assert_eq!(topcr.len(), 2);
    // both creates sit on the connection thread, after its recv
    assert!(creates.iter().all(|c| evs.iter().find(|e| e.event_id == *c).unwrap().thread_id == evs[0].thread_id));
    assert_eq!(evs[0].event_id, entry);
    // the reply is received by the receiver thread, paired with the server's send
    let recv = evs.iter().find(|e| e.call_name == "recv" && e.node_id == 0 && e.event_id != entry).unwrap();
    let comr = out.truth.edges.iter().find(|e| e.child == recv.event_id).unwrap();
    assert_eq!(comr.rel, Rel::Comr);
    assert_eq!(evs.iter().find(|e| e.event_id == comr.parent).unwrap().node_id, 1);
    let g = link_events(evs).unwrap();
    let truth: BTreeSet<_> = out.truth.edges_of(&[Rel::Tcr, Rel::Topcr, Rel::Comr, Rel::Synr]).into_iter().filter(|e| g.events.contains_key(&e.child)).collect();
    assert_eq!(g.edges, truth);
}

#[test]
fn clean_run_every_member_but_root_has_a_parent() {
    let spec = bundled("mixed").unwrap();
    let out = run_workload(&spec, &[], 5).unwrap();
    let children: BTreeSet<EventId> = out.truth.edges.iter().map(|e| e.child).collect();
    for r in &out.truth.requests {
        for m in &r.members {
            assert!(*m == r.root || children.contains(m), "{m} has no parent");
        }
    }
}

#[test]
fn catalog_covers_every_relationship() {
    let out = run_workload(&bundled("mixed").unwrap(), &[], 9).unwrap();
    let kinds: BTreeSet<Rel> = out.truth.edges.iter().map(|e| e.rel).collect();
    assert_eq!(kinds.len(), 5);
}

#[test]
fn no_fault_is_identity_and_faults_need_known_targets() {
    let spec = bundled("hadoop").unwrap();
    let a = run_workload(&spec, &[], 11).unwrap();
    let b = run_workload(&spec, &[], 11).unwrap();
    assert_eq!(a.trace, b.trace);
    let err = run_workload(&spec, &[FaultSpec::CpuBurn { component: "gpu".into(), factor: 2.0 }], 11).unwrap_err();
    assert!(matches!(err, SpecError::UnknownTarget(_)));
}

#[test]
fn crash_truncates_the_request() {
    let spec = bundled("hadoop").unwrap();
    let clean = run_workload(&spec, &[], 21).unwrap();
    let boot = clean.manifest.boot_events["namenode"];
    let crash = FaultSpec::ComponentCrash { component: "namenode".into(), after_events: boot + 1 };
    let faulty = run_workload(&spec, &[crash], 21).unwrap();
    assert_eq!(faulty.manifest.crashed, vec!["namenode".to_string()]);
    let clean_n = clean.truth.requests[0].members.len();
    let faulty_n = faulty.truth.requests[0].members.len();
    assert!(faulty_n < clean_n, "{faulty_n} vs {clean_n}");
    // the prefix before the crash is unchanged
    assert_eq!(faulty.trace[..10], clean.trace[..10]);
}

#[test]
fn cpu_burn_triples_durations() {
    let spec = bundled("hadoop").unwrap();
    let clean = run_workload(&spec, &[], 4).unwrap();
    let burn = run_workload(&spec, &[FaultSpec::CpuBurn { component: "namenode".into(), factor: 3.0 }], 4).unwrap();
    let comps = crate::fsa::ComponentList::from_events(&clean.trace);
    let durations = |out: &SimOutput| -> Vec<u64> {
        out.trace.iter().filter(|e| comps.signature(e).ends_with("@namenode") && e.call_name == "lookup_path").map(|e| e.duration).collect()
    };
    let (a, b) = (durations(&clean), durations(&burn));
    assert!(!a.is_empty());
    assert_eq!(a.iter().map(|d| d * 3).collect::<Vec<_>>(), b);
}

#[test]
fn resource_lock_takes_the_failure_branch() {
    let spec = bundled("hadoop").unwrap();
    let out = run_workload(&spec, &[FaultSpec::ResourceLock { component: "resourcemanager".into() }], 2).unwrap();
    let calls: Vec<&str> = out.trace.iter().map(|e| e.call_name.as_str()).collect();
    assert!(calls.contains(&"log_error"));
    let failed = out.trace.iter().find(|e| e.call_name == "mkdir_output").unwrap();
    assert_eq!(failed.return_value, -1);
}

#[test]
fn queue_requests_fragment_without_data_ids() {
    let out = run_workload(&bundled("mixed").unwrap(), &[], 8).unwrap();
    let batch = out.truth.requests.iter().position(|r| r.request_type == "batch").unwrap();
    let evs = request_events(&out, batch);
    let (without, _) = build_rep(evs.clone(), None).unwrap();
    let (with, unmatched) = build_rep(evs, Some(default_data_extractor)).unwrap();
    assert!(crate::rep::count_fragments(&without) > 1);
    assert_eq!(crate::rep::count_fragments(&with), 1);
    assert!(unmatched.is_empty());
}

#[test]
fn truth_text_round_trip() {
    let out = run_workload(&WorkloadSpec::from_toml(MINIMAL).unwrap(), &[], 1).unwrap();
    assert_eq!(GroundTruth::from_text(&out.truth.to_text()).unwrap(), out.truth);
}

#[test]
fn invalid_spec_is_rejected() {
    let broken = MINIMAL.replace("entry = \"svc\"", "entry = \"nobody\"");
    assert!(WorkloadSpec::from_toml(&broken).is_err());
}
