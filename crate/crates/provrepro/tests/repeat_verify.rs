//! End-to-end repeat and verification tests: the counter law under every
//! tampering pattern, level isolation (structure, infrastructure, outputs),
//! repeat linkage, and report rendering checked against independently
//! computed hashes.

use proptest::prelude::*;

use provrepro::executor::{
    submit_workflow, ClusterSpec, ExecutionDb, StagedFile,
};
use provrepro::model::{FileRef, JobDefinition, JobKind, WorkflowDefinition};
use provrepro::provenance::{map_jobs_to_vms, ProvenanceStore};
use provrepro::reproduce::{compare_infrastructure, repeat_workflow};
use provrepro::simcloud::SimCloud;
use provrepro::verify::{
    assess, compare_workflow_outputs, compare_workflow_structure, render_csv, render_text,
    VERIFY_CSV_HEADER,
};
use provrepro_testkit::{md5_hex, reference_split, reference_token_count};

fn wordcount_pipeline() -> WorkflowDefinition {
    serde_json::from_str(include_str!("../../../sample/wordcount.wf")).unwrap()
}

fn staged_corpus(text: &str) -> Vec<StagedFile> {
    vec![StagedFile {
        target: FileRef::new("wfinput", "corpus.txt"),
        content: text.as_bytes().to_vec(),
    }]
}

struct World {
    cloud: SimCloud,
    db: ExecutionDb,
    prov: ProvenanceStore,
    _dir: tempfile::TempDir,
}

impl World {
    fn new() -> World {
        let dir = tempfile::tempdir().unwrap();
        World {
            cloud: SimCloud::open(dir.path().join("cloud")).unwrap(),
            db: ExecutionDb::open(dir.path().join("wms")).unwrap(),
            prov: ProvenanceStore::open(dir.path().join("prov")).unwrap(),
            _dir: dir,
        }
    }

    fn run_captured(
        &mut self,
        def: &WorkflowDefinition,
        cluster: &ClusterSpec,
        staged: &[StagedFile],
    ) -> u64 {
        let run = submit_workflow(&mut self.db, &mut self.cloud, def, cluster, staged).unwrap();
        let rows = map_jobs_to_vms(&self.db, &self.cloud, run.wf_id).unwrap();
        self.prov
            .store_mappings(run.wf_id, def, None, rows, false)
            .unwrap();
        run.wf_id
    }

    fn repeat(&mut self, src: u64) -> u64 {
        repeat_workflow(&mut self.db, &mut self.cloud, &mut self.prov, src)
            .unwrap()
            .wf_id
    }
}

const CORPUS: &str = "one good turn deserves another and then some more words arrive";

/// Tampering with any nonempty subset of the destination's five output
/// files is counted exactly: the file counter stays at five while the
/// comparison counter drops by the subset size.
#[test]
fn counter_law_under_every_tamper_pattern() {
    let mut world = World::new();
    let def = wordcount_pipeline();
    let src = world.run_captured(&def, &ClusterSpec::homogeneous(2, 2), &staged_corpus(CORPUS));
    let dest = world.repeat(src);

    let baseline = compare_workflow_outputs(&world.db, &world.cloud, src, dest).unwrap();
    assert!(baseline.equal);
    assert_eq!((baseline.file_counter, baseline.comparison_counter), (5, 5));
    assert!(baseline.warnings.is_empty());

    let dest_container = world.db.run(dest).unwrap().output_container.clone();
    let filenames = ["wordlist1", "wordlist2", "analysis1", "analysis2", "merge_output"];
    let originals: Vec<Vec<u8>> = filenames
        .iter()
        .map(|name| {
            world
                .cloud
                .get_file(&dest_container, name)
                .unwrap()
                .into_content()
        })
        .collect();

    for mask in 1u32..(1 << filenames.len()) {
        for (slot, name) in filenames.iter().enumerate() {
            if mask & (1 << slot) != 0 {
                let mut damaged = originals[slot].clone();
                damaged.push(b'x');
                world.cloud.put_file(&dest_container, name, &damaged).unwrap();
            }
        }

        let comparison = compare_workflow_outputs(&world.db, &world.cloud, src, dest).unwrap();
        let tampered = mask.count_ones();
        assert_eq!(comparison.file_counter, 5, "mask {mask:#b}");
        assert_eq!(comparison.comparison_counter, 5 - tampered, "mask {mask:#b}");
        assert!(!comparison.equal, "mask {mask:#b}");
        let mismatched = comparison.per_file.iter().filter(|f| !f.matched).count() as u32;
        assert_eq!(mismatched, tampered, "mask {mask:#b}");

        for (slot, name) in filenames.iter().enumerate() {
            if mask & (1 << slot) != 0 {
                world
                    .cloud
                    .put_file(&dest_container, name, &originals[slot])
                    .unwrap();
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Run, repeat, verify: for any corpus the repeat reproduces all five
    /// outputs and every level of the assessment agrees.
    #[test]
    fn repeats_always_reproduce(corpus in "[ a-z\n]{1,160}") {
        let mut world = World::new();
        let def = wordcount_pipeline();
        let src = world.run_captured(
            &def,
            &ClusterSpec::homogeneous(2, 2),
            &staged_corpus(&corpus),
        );
        let dest = world.repeat(src);

        let bundle = assess(&world.db, &world.cloud, &world.prov, src, dest).unwrap();
        prop_assert!(bundle.report.structure_equal);
        prop_assert!(bundle.report.infrastructure_equal);
        prop_assert!(bundle.report.outputs_equal);
        prop_assert!(bundle.report.verdict);
        prop_assert_eq!(bundle.outputs.file_counter, 5);
        prop_assert_eq!(bundle.outputs.comparison_counter, 5);
    }
}

/// Repeats chain: each repeat links to its immediate source, ids only grow,
/// and nodenames gain one `-rep` suffix per generation.
#[test]
fn repeat_chain_linkage() {
    let mut world = World::new();
    let def = wordcount_pipeline();
    let first = world.run_captured(&def, &ClusterSpec::homogeneous(2, 2), &staged_corpus(CORPUS));
    let second = world.repeat(first);
    let third = world.repeat(second);
    assert!(first < second && second < third);

    assert_eq!(world.prov.captured(first).unwrap().repeat_of, None);
    assert_eq!(world.prov.captured(second).unwrap().repeat_of, Some(first));
    assert_eq!(world.prov.captured(third).unwrap().repeat_of, Some(second));
    assert_eq!(world.db.run(third).unwrap().repeat_of, Some(second));

    let names: std::collections::BTreeSet<String> = world
        .prov
        .get_mappings(third)
        .unwrap()
        .iter()
        .map(|r| r.nodename.clone())
        .collect();
    let expected: std::collections::BTreeSet<String> =
        ["node1-rep-rep".to_string(), "node2-rep-rep".to_string()]
            .into_iter()
            .collect();
    assert_eq!(names, expected);

    let outputs = compare_workflow_outputs(&world.db, &world.cloud, first, third).unwrap();
    assert!(outputs.equal, "grand-repeat must still reproduce");
}

/// An extra job in the destination flips only the structure level, and the
/// levels report it from both directions.
#[test]
fn structure_level_isolates_extra_job() {
    let mut world = World::new();
    let plain = wordcount_pipeline();
    let mut extended = plain.clone();
    extended.jobs.push(JobDefinition {
        name: "zzz_extra".to_string(),
        kind: JobKind::Memhog,
        required_ram_mb: 64,
        inputs: vec![],
        outputs: vec![],
        depends_on: vec![],
    });

    let staged = staged_corpus(CORPUS);
    let src = world.run_captured(&plain, &ClusterSpec::homogeneous(2, 2), &staged);
    let dest = world.run_captured(&extended, &ClusterSpec::homogeneous(2, 2), &staged);

    let bundle = assess(&world.db, &world.cloud, &world.prov, src, dest).unwrap();
    assert!(!bundle.report.structure_equal);
    assert!(bundle.report.infrastructure_equal);
    assert!(bundle.report.outputs_equal);
    assert!(!bundle.report.verdict);
    assert_eq!(
        bundle.structure.extra_jobs,
        vec![("zzz_extra".to_string(), JobKind::Memhog)]
    );
    assert!(bundle.structure.missing_jobs.is_empty());

    let reversed = compare_workflow_structure(&world.db, dest, src).unwrap();
    assert_eq!(
        reversed.missing_jobs,
        vec![("zzz_extra".to_string(), JobKind::Memhog)]
    );
    assert!(reversed.extra_jobs.is_empty());
}

/// An extra dependency edge with identical jobs flips only the structure
/// level.
#[test]
fn structure_level_isolates_extra_edge() {
    let mut world = World::new();
    let plain = wordcount_pipeline();
    let mut reordered = plain.clone();
    reordered
        .jobs
        .iter_mut()
        .find(|j| j.name == "analysis2")
        .unwrap()
        .depends_on
        .push("analysis1".to_string());

    let staged = staged_corpus(CORPUS);
    let src = world.run_captured(&plain, &ClusterSpec::homogeneous(2, 2), &staged);
    let dest = world.run_captured(&reordered, &ClusterSpec::homogeneous(2, 2), &staged);

    let bundle = assess(&world.db, &world.cloud, &world.prov, src, dest).unwrap();
    assert!(!bundle.report.structure_equal);
    assert!(bundle.report.infrastructure_equal);
    assert!(bundle.report.outputs_equal);
    assert_eq!(
        bundle.structure.extra_edges,
        vec![("analysis1".to_string(), "analysis2".to_string())]
    );
    assert!(bundle.structure.missing_edges.is_empty());
    assert!(bundle.structure.missing_jobs.is_empty() && bundle.structure.extra_jobs.is_empty());
}

/// Running the same definition on bigger flavors flips only the
/// infrastructure level, itemizing which specs changed.
#[test]
fn infrastructure_level_isolates_flavor_change() {
    let mut world = World::new();
    let def = wordcount_pipeline();
    let staged = staged_corpus(CORPUS);
    let src = world.run_captured(&def, &ClusterSpec::homogeneous(2, 2), &staged);
    let dest = world.run_captured(&def, &ClusterSpec::homogeneous(2, 3), &staged);

    let bundle = assess(&world.db, &world.cloud, &world.prov, src, dest).unwrap();
    assert!(bundle.report.structure_equal);
    assert!(!bundle.report.infrastructure_equal);
    assert!(bundle.report.outputs_equal);
    assert!(!bundle.report.verdict);

    let infra = compare_infrastructure(&world.prov, src, dest).unwrap();
    assert_eq!(infra.missing_in_dest.len(), 2);
    assert_eq!(infra.extra_in_dest.len(), 2);
    assert!(infra.missing_in_dest.iter().all(|s| s.min_ram_mb == 2048));
    assert!(infra.extra_in_dest.iter().all(|s| s.min_ram_mb == 4096));
}

/// A destination that never ran the merge job: the missing job costs one
/// comparison, is warned about, and shows up as missing structure.
#[test]
fn missing_destination_job_counts_as_mismatch() {
    let mut world = World::new();
    let full = wordcount_pipeline();
    let mut trimmed = full.clone();
    trimmed.jobs.retain(|j| j.name != "merge");

    let staged = staged_corpus(CORPUS);
    let src = world.run_captured(&full, &ClusterSpec::homogeneous(2, 2), &staged);
    let dest = world.run_captured(&trimmed, &ClusterSpec::homogeneous(2, 2), &staged);

    let outputs = compare_workflow_outputs(&world.db, &world.cloud, src, dest).unwrap();
    assert_eq!(outputs.file_counter, 5);
    assert_eq!(outputs.comparison_counter, 4);
    assert!(!outputs.equal);
    assert!(outputs.warnings.iter().any(|w| w.contains("merge")));
    let absent = outputs
        .per_file
        .iter()
        .find(|f| f.filename == "merge_output")
        .unwrap();
    assert!(absent.dest_md5.is_none());
    assert!(!absent.matched);

    let structure = compare_workflow_structure(&world.db, src, dest).unwrap();
    assert_eq!(structure.missing_jobs.len(), 1);
    assert_eq!(structure.missing_edges.len(), 2);
}

/// Output comparison walks the source's outputs, so extra destination files
/// warn in one direction and count as missing in the other.
#[test]
fn output_comparison_is_source_directed() {
    let mut world = World::new();
    let plain = wordcount_pipeline();
    let mut extended = plain.clone();
    extended.jobs.push(JobDefinition {
        name: "zzz_extra".to_string(),
        kind: JobKind::Wordcount,
        required_ram_mb: 64,
        inputs: vec![FileRef::new("wfinput", "corpus.txt")],
        outputs: vec![FileRef::new("wfoutput", "extra_count")],
        depends_on: vec![],
    });

    let staged = staged_corpus(CORPUS);
    let plain_run = world.run_captured(&plain, &ClusterSpec::homogeneous(2, 2), &staged);
    let extended_run = world.run_captured(&extended, &ClusterSpec::homogeneous(2, 2), &staged);

    let forward =
        compare_workflow_outputs(&world.db, &world.cloud, plain_run, extended_run).unwrap();
    assert!(forward.equal);
    assert_eq!((forward.file_counter, forward.comparison_counter), (5, 5));
    assert!(!forward.warnings.is_empty());

    let backward =
        compare_workflow_outputs(&world.db, &world.cloud, extended_run, plain_run).unwrap();
    assert!(!backward.equal);
    assert_eq!((backward.file_counter, backward.comparison_counter), (6, 5));
}

/// The rendered report and CSV for a healthy repeat, with every hash
/// computed by the independent reference MD5 over independently derived
/// file contents.
#[test]
fn report_rendering_against_reference_hashes() {
    let mut world = World::new();
    let def = wordcount_pipeline();
    let src = world.run_captured(&def, &ClusterSpec::homogeneous(2, 2), &staged_corpus(CORPUS));
    let dest = world.repeat(src);
    let bundle = assess(&world.db, &world.cloud, &world.prov, src, dest).unwrap();

    let (left, right) = reference_split(CORPUS);
    let count1 = reference_token_count(&left);
    let count2 = reference_token_count(&right);
    let h = |bytes: &[u8]| md5_hex(bytes);
    let expected = [
        ("split", "wordlist1", h(left.as_bytes())),
        ("split", "wordlist2", h(right.as_bytes())),
        ("analysis1", "analysis1", h(format!("{count1}\n").as_bytes())),
        ("analysis2", "analysis2", h(format!("{count2}\n").as_bytes())),
        (
            "merge",
            "merge_output",
            h(format!("{}\n", count1 + count2).as_bytes()),
        ),
    ];

    let csv = render_csv(&bundle);
    let mut expected_csv = format!("{VERIFY_CSV_HEADER}\n");
    for (job, filename, hash) in &expected {
        expected_csv.push_str(&format!("{job},{src},wfoutput{src},{filename},{hash}\n"));
        expected_csv.push_str(&format!("{job},{dest},wfoutput{dest},{filename},{hash}\n"));
    }
    assert_eq!(csv, expected_csv);

    let text = render_text(&bundle);
    assert!(text.contains("verdict: REPRODUCIBLE"));
    assert!(text.contains("outputs:        match"));
    for (_, _, hash) in &expected {
        assert!(text.contains(hash.as_str()), "missing {hash} in report");
    }
}

/// Comparing runs with no produced files at all: zero of zero matches.
#[test]
fn empty_outputs_compare_equal() {
    let mut world = World::new();
    let def = WorkflowDefinition {
        name: "silent".to_string(),
        jobs: vec![JobDefinition {
            name: "quiet".to_string(),
            kind: JobKind::Memhog,
            required_ram_mb: 64,
            inputs: vec![],
            outputs: vec![],
            depends_on: vec![],
        }],
    };
    let src = world.run_captured(&def, &ClusterSpec::homogeneous(1, 1), &[]);
    let dest = world.repeat(src);
    let outputs = compare_workflow_outputs(&world.db, &world.cloud, src, dest).unwrap();
    assert!(outputs.equal);
    assert_eq!((outputs.file_counter, outputs.comparison_counter), (0, 0));
}
