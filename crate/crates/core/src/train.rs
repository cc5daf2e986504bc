//! Turning training traces into per-type automata.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::event::TraceEvent;
use crate::fsa::{build_per_path_fsa, combine_full, prune_loops_concurrency, unpruned_tree, ComponentList, Fsa, FsaError};
use crate::rep::{build_rep, dag_to_tree, DataExtractor, LinkError};

/// How a model is trained: the raw single-path automaton, the pruned
/// single-path one, or a pruned aggregate over `n` paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Fsa,
    Efsa,
    Paths(usize),
}

impl Variant {
    pub fn pruned(self) -> bool {
        self != Variant::Fsa
    }

    pub fn paths(self) -> usize {
        match self {
            Variant::Paths(n) => n,
            _ => 1,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Fsa => f.write_str("FSA"),
            Variant::Efsa => f.write_str("eFSA"),
            Variant::Paths(n) => write!(f, "FSA-{n}"),
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "FSA" => Ok(Variant::Fsa),
            "eFSA" => Ok(Variant::Efsa),
            _ => s
                .strip_prefix("FSA-")
                .and_then(|n| n.parse().ok())
                .filter(|n| *n > 0)
                .map(Variant::Paths)
                .ok_or_else(|| format!("unknown model variant `{s}` (expected FSA, eFSA or FSA-<n>)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Fsa(#[from] FsaError),
    #[error("request type `{request_type}` has {have} training paths, {need} needed")]
    Insufficient { request_type: String, have: usize, need: usize },
    #[error("training traces contain no typed requests")]
    NoRequests,
    #[error("model file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("model file {path}: {source}")]
    Parse { path: String, source: FsaError },
}

/// One per-path automaton for every typed request in `trace`, in entry order.
pub fn request_paths(trace: &[TraceEvent], pruned: bool, extractor: Option<DataExtractor>) -> Result<Vec<Fsa>, LinkError> {
    let comps = ComponentList::from_events(trace);
    let (graph, _) = build_rep(trace.iter().cloned(), extractor)?;
    graph.check_acyclic()?;
    let tree = dag_to_tree(&graph);
    let mut out = Vec::new();
    for root in tree.roots() {
        if tree.event(root).request_type.is_none() {
            continue;
        }
        let p = if pruned {
            prune_loops_concurrency(&tree, root, &comps)
        } else {
            unpruned_tree(&tree, root, &comps)
        };
        out.push(build_per_path_fsa(&p));
    }
    Ok(out)
}

/// Full automata per request type, from the first `variant.paths()` training
/// paths of each type.
pub fn train(traces: &[Vec<TraceEvent>], variant: Variant, extractor: Option<DataExtractor>) -> Result<BTreeMap<String, Fsa>, TrainError> {
    let mut by_type: BTreeMap<String, Vec<Fsa>> = BTreeMap::new();
    for t in traces {
        for f in request_paths(t, variant.pruned(), extractor)? {
            by_type.entry(f.request_type.clone()).or_default().push(f);
        }
    }
    if by_type.is_empty() {
        return Err(TrainError::NoRequests);
    }
    let need = variant.paths();
    let mut models = BTreeMap::new();
    for (ty, paths) in by_type {
        if paths.len() < need {
            return Err(TrainError::Insufficient { request_type: ty, have: paths.len(), need });
        }
        models.insert(ty, combine_full(&paths[..need])?);
    }
    Ok(models)
}

/// Writes `<type>.full.fsa` and `<type>.core.fsa` for every model.
pub fn write_models(dir: &Path, models: &BTreeMap<String, Fsa>) -> Result<(), TrainError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| TrainError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for (ty, f) in models {
        let full = dir.join(format!("{ty}.full.fsa"));
        fs::write(&full, f.to_text()).map_err(io(&full))?;
        let core = dir.join(format!("{ty}.core.fsa"));
        fs::write(&core, f.core().to_text()).map_err(io(&core))?;
    }
    Ok(())
}

/// Loads every `*.full.fsa` in `dir`, keyed by request type.
pub fn read_models(dir: &Path) -> Result<BTreeMap<String, Fsa>, TrainError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| TrainError::Io { path, source }
    };
    let mut models = BTreeMap::new();
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.to_string_lossy().ends_with(".full.fsa"))
        .collect();
    files.sort();
    for p in files {
        let text = fs::read_to_string(&p).map_err(io(&p))?;
        let f = Fsa::from_text(text.as_bytes()).map_err(|source| TrainError::Parse { path: p.display().to_string(), source })?;
        models.insert(f.request_type.clone(), f);
    }
    if models.is_empty() {
        return Err(TrainError::NoRequests);
    }
    Ok(models)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rep::default_data_extractor;
    use crate::sim::{bundled, run_workload};

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Fsa, Variant::Efsa, Variant::Paths(10), Variant::Paths(20)] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("FSA-0".parse::<Variant>().is_err());
        assert!("efsa".parse::<Variant>().is_err());
    }

    #[test]
    fn too_few_paths_is_an_error() {
        let t = run_workload(&bundled("param_server").unwrap(), &[], 1).unwrap().trace;
        let err = train(&[t], Variant::Paths(500), None).unwrap_err();
        assert!(matches!(err, TrainError::Insufficient { need: 500, .. }), "{err}");
        assert!(matches!(train(&[Vec::new()], Variant::Efsa, None), Err(TrainError::NoRequests)));
    }

    #[test]
    fn models_survive_a_directory_round_trip() {
        let t = run_workload(&bundled("mixed").unwrap(), &[], 2).unwrap().trace;
        let models = train(&[t], Variant::Paths(5), Some(default_data_extractor)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_models(dir.path(), &models).unwrap();
        assert!(dir.path().join("lookup.core.fsa").exists());
        let back = read_models(dir.path()).unwrap();
        assert_eq!(back.keys().collect::<Vec<_>>(), models.keys().collect::<Vec<_>>());
        for (ty, f) in &models {
            assert_eq!(back[ty].to_text(), f.to_text());
        }
    }

    #[test]
    fn pruning_shrinks_looping_paths() {
        let t = run_workload(&bundled("hadoop").unwrap(), &[], 3).unwrap().trace;
        let raw = request_paths(&t, false, Some(default_data_extractor)).unwrap();
        let pruned = request_paths(&t, true, Some(default_data_extractor)).unwrap();
        assert_eq!(raw.len(), pruned.len());
        for (r, p) in raw.iter().zip(&pruned) {
            assert!(p.tree_transition_count() < r.tree_transition_count());
        }
    }
}
