use std::path::Path;

use regat::commands::{extract_graph, BoxesFile};
use regat::data::read_json;
use regat_core::geometry::DEFAULT_FAR_THRESHOLD;
use regat_core::graph::RelationKind;

fn toy_scene() -> BoxesFile {
    read_json(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy_scene.json")).unwrap()
}

/// (kind, edges including self-loops, edges excluding them)
const EDGE_COUNTS: [(RelationKind, usize, usize); 3] = [
    (RelationKind::Implicit, 16, 12),
    (RelationKind::Spatial, 10, 6),
    (RelationKind::Semantic, 6, 2),
];

#[test]
fn toy_scene_edge_counts() {
    let scene = toy_scene();
    for (kind, all, non_self) in EDGE_COUNTS {
        let dump = extract_graph(&scene, kind, DEFAULT_FAR_THRESHOLD).unwrap();
        assert_eq!(dump.k, 4);
        assert_eq!(dump.edges.len(), all, "{kind}");
        assert_eq!(dump.edges.iter().filter(|e| e.0 != e.1).count(), non_self, "{kind}");
    }
}

#[test]
fn toy_scene_spatial_labels() {
    let dump = extract_graph(&toy_scene(), RelationKind::Spatial, DEFAULT_FAR_THRESHOLD).unwrap();
    let label = |s: usize, d: usize| dump.edges.iter().find(|e| e.0 == s && e.1 == d).map(|e| e.2);
    assert_eq!(label(0, 1), Some(2), "box 0 covers box 1");
    assert_eq!(label(1, 0), Some(1), "box 1 is inside box 0");
    assert_eq!(label(2, 0), Some(4), "box 2 is east of box 0");
    assert_eq!(label(0, 2), Some(8));
    assert_eq!(label(2, 1), Some(11), "box 2 is east and slightly below box 1");
    assert_eq!(label(1, 2), Some(7));
    assert_eq!(label(3, 0), None, "box 3 is beyond the distance threshold");
    assert_eq!(label(3, 3), Some(0));
}

#[test]
fn semantic_edges_follow_triples() {
    let dump = extract_graph(&toy_scene(), RelationKind::Semantic, DEFAULT_FAR_THRESHOLD).unwrap();
    let out: Vec<_> = dump.edges.iter().filter(|e| e.3 == "out").map(|e| (e.0, e.1, e.2)).collect();
    assert_eq!(out, [(1, 0, 3), (2, 1, 1)]);
}
