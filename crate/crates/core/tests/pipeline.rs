mod common;

use std::fs;

use te_core::fixture::{generate, FixtureSpec};
use te_core::ingest::parse_terminology;
use te_core::pipeline::{build_snapshot, ComputeParams};
use te_core::projection::TsneParams;
use te_core::snapshot::{read_snapshot, write_snapshot};
use te_core::ReplicateSet;

fn quick() -> ComputeParams {
    ComputeParams {
        tsne: TsneParams {
            iterations: 300,
            ..TsneParams::default()
        },
        ..ComputeParams::default()
    }
}

fn small() -> FixtureSpec {
    FixtureSpec {
        per_cluster: 20,
        ..FixtureSpec::default()
    }
}

#[test]
fn output_independent_of_thread_count() {
    let fx = generate(&small()).unwrap();
    let term = parse_terminology(fx.terminology_tsv.as_bytes()).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| build_snapshot(&fx.sets, &term, &quick()).unwrap().snapshot)
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn snapshot_round_trip_is_exact() {
    let snap = &common::default_build().snapshot;
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("snap");
    write_snapshot(&root, snap).unwrap();
    assert_eq!(&read_snapshot(&root).unwrap(), snap);
}

#[test]
fn same_inputs_give_identical_content_digest() {
    let fx = generate(&small()).unwrap();
    let term = parse_terminology(fx.terminology_tsv.as_bytes()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = build_snapshot(&fx.sets, &term, &quick()).unwrap().snapshot;
    let b = build_snapshot(&fx.sets, &term, &quick()).unwrap().snapshot;
    let da = write_snapshot(&dir.path().join("a"), &a).unwrap();
    let db = write_snapshot(&dir.path().join("b"), &b).unwrap();
    assert_eq!(da, db);
}

/// Appending a corpus whose high-confidence concepts are already selectable
/// leaves the earlier corpora's files untouched.
#[test]
fn appending_a_corpus_keeps_existing_files() {
    let fx = generate(&small()).unwrap();
    let term = parse_terminology(fx.terminology_tsv.as_bytes()).unwrap();
    let two = &fx.sets[..2];
    let copy = &fx.sets[1];
    let appended = ReplicateSet::new("c9", "Copy", 99, copy.replicates().to_vec()).unwrap();
    let mut three = two.to_vec();
    three.push(appended);

    let dir = tempfile::tempdir().unwrap();
    let (ra, rb) = (dir.path().join("a"), dir.path().join("b"));
    write_snapshot(&ra, &build_snapshot(two, &term, &quick()).unwrap().snapshot).unwrap();
    write_snapshot(&rb, &build_snapshot(&three, &term, &quick()).unwrap().snapshot).unwrap();
    for c in ["c1", "c2"] {
        for f in fs::read_dir(ra.join("corpora").join(c)).unwrap() {
            let f = f.unwrap();
            let other = rb.join("corpora").join(c).join(f.file_name());
            assert_eq!(fs::read(f.path()).unwrap(), fs::read(&other).unwrap(), "{}", other.display());
        }
    }
    assert!(rb.join("corpora/c9/vectors.f32").exists());
}

#[test]
fn rewrite_replaces_previous_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("snap");
    let fx = generate(&small()).unwrap();
    let term = parse_terminology(fx.terminology_tsv.as_bytes()).unwrap();
    let full = build_snapshot(&fx.sets, &term, &quick()).unwrap().snapshot;
    let one = build_snapshot(&fx.sets[..1], &term, &quick()).unwrap().snapshot;
    write_snapshot(&root, &full).unwrap();
    write_snapshot(&root, &one).unwrap();
    assert!(!root.join("corpora/c2").exists());
    assert_eq!(read_snapshot(&root).unwrap(), one);
    let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1, "temporary directories were left behind");
}
