//! Binding acceptance checks for the toolkit. Each check prints exactly one
//! `acceptance <name>: PASS` or `acceptance <name>: FAIL` line (visible with
//! `cargo test --test acceptance -- --nocapture`) and enforces its own
//! runtime budget.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use provrepro::executor::{
    schedule_order, submit_on_vms, submit_workflow, ClusterSpec, ExecutionDb, StagedFile,
};
use provrepro::model::{FileRef, JobDefinition, JobKind, WorkflowDefinition};
use provrepro::provenance::{map_jobs_to_vms, ProvenanceStore};
use provrepro::reproduce::{compare_infrastructure, repeat_workflow};
use provrepro::simcloud::{SimCloud, DEFAULT_IMAGE_ID};
use provrepro::verify::compare_workflow_outputs;
use provrepro_testkit::{
    md5_hex, nested_loop_join, smallest_topo_order, OracleFlavor, OracleImage, OracleJob,
    OracleRow, OracleVm,
};

fn criterion(name: &str, budget: Duration, body: impl FnOnce()) {
    let started = Instant::now();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(()) => {
            let elapsed = started.elapsed();
            if elapsed > budget {
                println!(
                    "acceptance {name}: FAIL (took {elapsed:.2?}, budget {budget:.2?})"
                );
                panic!("{name} exceeded its runtime budget");
            }
            println!("acceptance {name}: PASS ({elapsed:.2?})");
        }
        Err(err) => {
            println!("acceptance {name}: FAIL");
            resume_unwind(err);
        }
    }
}

fn wordcount() -> WorkflowDefinition {
    let job = |name: &str, kind, inputs: Vec<FileRef>, outputs: Vec<FileRef>, deps: &[&str]| {
        JobDefinition {
            name: name.to_string(),
            kind,
            required_ram_mb: 256,
            inputs,
            outputs,
            depends_on: deps.iter().map(|d| d.to_string()).collect(),
        }
    };
    let out = |name: &str| FileRef::new("wfoutput", name);
    WorkflowDefinition {
        name: "wordcount".to_string(),
        jobs: vec![
            job(
                "split",
                JobKind::Split,
                vec![FileRef::new("wfinput", "corpus.txt")],
                vec![out("wordlist1"), out("wordlist2")],
                &[],
            ),
            job(
                "analysis1",
                JobKind::Wordcount,
                vec![out("wordlist1")],
                vec![out("analysis1")],
                &["split"],
            ),
            job(
                "analysis2",
                JobKind::Wordcount,
                vec![out("wordlist2")],
                vec![out("analysis2")],
                &["split"],
            ),
            job(
                "merge",
                JobKind::Merge,
                vec![out("analysis1"), out("analysis2")],
                vec![out("merge_output")],
                &["analysis1", "analysis2"],
            ),
        ],
    }
}

const CORPUS: &str =
    "a steady stream of plain words keeps every counting stage honest and busy";

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

    fn run_captured(&mut self, def: &WorkflowDefinition, staged: &[StagedFile]) -> u64 {
        let run = submit_workflow(
            &mut self.db,
            &mut self.cloud,
            def,
            &ClusterSpec::homogeneous(2, 2),
            staged,
        )
        .unwrap();
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

const EXPECTED_FILES: [&str; 5] = [
    "analysis1",
    "analysis2",
    "merge_output",
    "wordlist1",
    "wordlist2",
];

/// Infrastructure and output clauses shared by the first two checks.
fn assert_faithful_pair(world: &World, src: u64, dest: u64) {
    let infra = compare_infrastructure(&world.prov, src, dest).unwrap();
    assert!(infra.equal, "infrastructure must match for {src} vs {dest}");
    assert_eq!(infra.src_specs.len(), 2);
    assert_eq!(infra.dest_specs.len(), 2);
    for spec in infra.src_specs.iter().chain(infra.dest_specs.iter()) {
        assert_eq!(spec.min_ram_mb, 2048);
        assert_eq!(spec.min_hd_gb, 20);
        assert_eq!(spec.vcpus, 1);
        assert_eq!(spec.image_id, "f102960c-557c-4253-8277-2df5ffe3c169");
    }

    let outputs = compare_workflow_outputs(&world.db, &world.cloud, src, dest).unwrap();
    assert!(outputs.equal, "outputs must match for {src} vs {dest}");
    assert_eq!(outputs.file_counter, 5);
    assert_eq!(outputs.comparison_counter, 5);
    let files: BTreeSet<&str> = outputs
        .per_file
        .iter()
        .map(|f| f.filename.as_str())
        .collect();
    assert_eq!(files, EXPECTED_FILES.iter().copied().collect());
}

#[test]
fn a1_wordcount_repeat_roundtrip() {
    criterion("wordcount-repeat-roundtrip", Duration::from_secs(5), || {
        let mut world = World::new();
        let def = wordcount();
        let src = world.run_captured(&def, &staged_corpus(CORPUS));
        let dest = world.repeat(src);

        assert_faithful_pair(&world, src, dest);

        let rows = world.prov.get_mappings(dest).unwrap();
        assert!(!rows.is_empty());
        for row in rows {
            assert!(
                row.nodename.ends_with("-rep"),
                "repeat host `{}` must carry the suffix",
                row.nodename
            );
        }
    });
}

#[test]
fn a2_double_repeat() {
    criterion("double-repeat", Duration::from_secs(10), || {
        let mut world = World::new();
        let def = wordcount();
        let src = world.run_captured(&def, &staged_corpus(CORPUS));
        let first = world.repeat(src);
        let second = world.repeat(src);
        assert_ne!(first, second);

        assert_faithful_pair(&world, src, first);
        assert_faithful_pair(&world, src, second);
        assert_faithful_pair(&world, first, second);
    });
}

#[test]
fn a3_memory_sweep_onset() {
    criterion("memory-sweep-onset", Duration::from_secs(10), || {
        let output = Command::new(env!("CARGO_BIN_EXE_provrepro"))
            .args([
                "memsweep", "--from", "100", "--to", "4096", "--step", "100",
                "--repeats", "5",
            ])
            .output()
            .unwrap();
        assert_eq!(output.status.code(), Some(0));
        let text = String::from_utf8(output.stdout).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("flavor,required_mb,trials,success_rate"));

        let ram_of = |flavor: &str| match flavor {
            "m1.tiny" => 512u64,
            "m1.small" => 2048,
            "m1.medium" => 4096,
            other => panic!("unexpected flavor {other}"),
        };
        let mut expected_cells: Vec<(String, u64)> = Vec::new();
        for flavor in ["m1.tiny", "m1.small", "m1.medium"] {
            for required in (100..=4000).step_by(100).chain([4096]) {
                expected_cells.push((flavor.to_string(), required));
            }
        }

        let mut rates = std::collections::BTreeMap::new();
        let mut seen = Vec::new();
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 4, "bad row: {line}");
            let flavor = fields[0].to_string();
            let required: u64 = fields[1].parse().unwrap();
            assert_eq!(fields[2], "5", "five trials per cell: {line}");
            let rate: f64 = fields[3].parse().unwrap();
            let fits = required + 32 <= ram_of(&flavor);
            assert_eq!(
                rate,
                if fits { 1.0 } else { 0.0 },
                "admission law violated at {line}"
            );
            rates.insert((flavor.clone(), required), rate);
            seen.push((flavor, required));
        }
        assert_eq!(seen, expected_cells, "sampled grid must cover both endpoints");

        let rate = |flavor: &str, mb: u64| rates[&(flavor.to_string(), mb)];
        assert_eq!(rate("m1.tiny", 400), 1.0);
        assert_eq!(rate("m1.tiny", 500), 0.0);
        assert_eq!(rate("m1.small", 2000), 1.0);
        assert_eq!(rate("m1.small", 2100), 0.0);
        assert_eq!(rate("m1.medium", 4000), 1.0);
        assert_eq!(rate("m1.medium", 4096), 0.0);
    });
}

#[test]
fn a4_tamper_detection() {
    criterion("tamper-detection", Duration::from_secs(30), || {
        let mut world = World::new();
        let def = wordcount();
        let src = world.run_captured(&def, &staged_corpus(CORPUS));
        let dest = world.repeat(src);
        let container = world.db.run(dest).unwrap().output_container.clone();
        let originals: Vec<Vec<u8>> = EXPECTED_FILES
            .iter()
            .map(|name| world.cloud.get_file(&container, name).unwrap().into_content())
            .collect();

        let mut rng = StdRng::seed_from_u64(0x7a3b_91c5);
        for case in 0..100 {
            let slot = rng.gen_range(0..EXPECTED_FILES.len());
            let name = EXPECTED_FILES[slot];
            let mut damaged = originals[slot].clone();
            let pos = rng.gen_range(0..damaged.len());
            let replacement = loop {
                let byte: u8 = rng.gen();
                if byte != damaged[pos] {
                    break byte;
                }
            };
            damaged[pos] = replacement;
            world.cloud.put_file(&container, name, &damaged).unwrap();

            let cmp = compare_workflow_outputs(&world.db, &world.cloud, src, dest).unwrap();
            assert!(!cmp.equal, "case {case}: mutation of {name} must be caught");
            let flagged: Vec<&str> = cmp
                .per_file
                .iter()
                .filter(|f| !f.matched)
                .map(|f| f.filename.as_str())
                .collect();
            assert_eq!(flagged, vec![name], "case {case} must name the mutated file");

            world.cloud.put_file(&container, name, &originals[slot]).unwrap();
        }
    });
}

#[test]
fn a5_join_oracle() {
    criterion("join-oracle", Duration::from_secs(30), || {
        let mut rng = StdRng::seed_from_u64(0x0e55_11d2);
        for round in 0..50 {
            let mut cloud = SimCloud::in_memory();
            let mut db = ExecutionDb::in_memory();

            let node_count = rng.gen_range(1..=3);
            let mut vms = Vec::new();
            for index in 0..node_count {
                let flavor_id = rng.gen_range(1..=3);
                vms.push(
                    cloud
                        .provision_vm(flavor_id, DEFAULT_IMAGE_ID, &format!("host{index}"))
                        .unwrap(),
                );
            }

            let job_count = rng.gen_range(2..=6);
            let mut jobs: Vec<JobDefinition> = (0..job_count)
                .map(|i| JobDefinition {
                    name: format!("job{i}"),
                    kind: JobKind::Memhog,
                    required_ram_mb: 64,
                    inputs: vec![],
                    outputs: vec![],
                    depends_on: vec![],
                })
                .collect();
            for i in 0..job_count {
                for job in jobs.iter_mut().skip(i + 1) {
                    if rng.gen_bool(0.5) {
                        job.depends_on.push(format!("job{i}"));
                    }
                }
            }
            let def = WorkflowDefinition {
                name: format!("load{round}"),
                jobs,
            };

            let run = submit_on_vms(&mut db, &mut cloud, &def, &vms, None).unwrap();
            let rows = map_jobs_to_vms(&db, &cloud, run.wf_id).unwrap();
            assert_eq!(rows.len(), def.jobs.len(), "round {round}: one row per job");
            let names: BTreeSet<&str> = rows.iter().map(|r| r.job_name.as_str()).collect();
            assert_eq!(names.len(), def.jobs.len(), "round {round}: no job repeated");

            let jobs: Vec<OracleJob> = run
                .job_records
                .iter()
                .map(|r| OracleJob {
                    name: r.job_name.clone(),
                    host_ip: r.host_ip.clone(),
                })
                .collect();
            let oracle_vms: Vec<OracleVm> = cloud
                .all_instances()
                .iter()
                .map(|vm| OracleVm {
                    ip: vm.ip.clone(),
                    nodename: vm.nodename.clone(),
                    flavor_id: vm.flavor_id,
                    image_id: vm.image_id.clone(),
                })
                .collect();
            let oracle_flavors: Vec<OracleFlavor> = cloud
                .flavors()
                .iter()
                .map(|f| OracleFlavor {
                    flavor_id: f.flavor_id,
                    ram_mb: f.ram_mb,
                    disk_gb: f.disk_gb,
                    vcpus: f.vcpus,
                })
                .collect();
            let oracle_images: Vec<OracleImage> = cloud
                .images()
                .iter()
                .map(|i| OracleImage {
                    image_id: i.image_id.clone(),
                    image_name: i.name.clone(),
                })
                .collect();
            let expected =
                nested_loop_join(&jobs, &oracle_vms, &oracle_flavors, &oracle_images).unwrap();
            let actual: Vec<OracleRow> = rows
                .iter()
                .map(|m| OracleRow {
                    job_name: m.job_name.clone(),
                    host_ip: m.host_ip.clone(),
                    nodename: m.nodename.clone(),
                    flavor_id: m.flavor_id,
                    min_ram_mb: m.min_ram_mb,
                    min_hd_gb: m.min_hd_gb,
                    vcpus: m.vcpus,
                    image_name: m.image_name.clone(),
                    image_id: m.image_id.clone(),
                })
                .collect();
            assert_eq!(actual, expected, "round {round}");
        }
    });
}

#[test]
fn a6_property_suites() {
    criterion("property-suites", Duration::from_secs(60), || {
        let mut rng = StdRng::seed_from_u64(0xbead_5eed);

        // Scheduling agrees with a permutation-enumeration oracle.
        let pool = [
            "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
        ];
        for _ in 0..120 {
            let n = rng.gen_range(1..=6);
            let mut picks: Vec<&str> = pool.to_vec();
            picks.shuffle(&mut rng);
            let names: Vec<String> = picks[..n].iter().map(|s| s.to_string()).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);

            let mut jobs: Vec<JobDefinition> = names
                .iter()
                .map(|name| JobDefinition {
                    name: name.clone(),
                    kind: JobKind::Memhog,
                    required_ram_mb: 64,
                    inputs: vec![],
                    outputs: vec![],
                    depends_on: vec![],
                })
                .collect();
            let mut edges = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.gen_bool(0.4) {
                        let before = order[i];
                        let after = order[j];
                        jobs[after].depends_on.push(names[before].clone());
                        edges.push((names[before].clone(), names[after].clone()));
                    }
                }
            }
            let def = WorkflowDefinition {
                name: "dag".to_string(),
                jobs,
            };
            let expected = smallest_topo_order(&names, &edges).unwrap();
            assert_eq!(schedule_order(&def), expected);
        }

        // Store/fetch identity and digest agreement with the reference MD5,
        // including the empty-input vector.
        let mut cloud = SimCloud::in_memory();
        let empty = cloud.put_file("probe", "empty", b"").unwrap();
        assert_eq!(empty.md5_hex(), "d41d8cd98f00b204e9800998ecf8427e");
        assert_eq!(md5_hex(b""), "d41d8cd98f00b204e9800998ecf8427e");
        for case in 0..150 {
            let len = rng.gen_range(0..1024);
            let content: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let name = format!("blob{case}");
            cloud.put_file("probe", &name, &content).unwrap();
            let fetched = cloud.get_file("probe", &name).unwrap();
            assert_eq!(fetched.content(), &content[..]);
            assert_eq!(fetched.md5_hex(), md5_hex(&content));
        }

        // Replaying a submission in a fresh world reproduces records and
        // digests exactly.
        let def = wordcount();
        for _ in 0..100 {
            let len = rng.gen_range(1..160);
            let corpus: String = (0..len)
                .map(|_| *[' ', 'a', 'b', 'c', '\n'].choose(&mut rng).unwrap())
                .collect();
            let staged = staged_corpus(&corpus);
            let mut runs = Vec::new();
            for _ in 0..2 {
                let mut cloud = SimCloud::in_memory();
                let mut db = ExecutionDb::in_memory();
                let run = submit_workflow(
                    &mut db,
                    &mut cloud,
                    &def,
                    &ClusterSpec::homogeneous(2, 2),
                    &staged,
                )
                .unwrap();
                let digests: Vec<String> = run
                    .job_records
                    .iter()
                    .flat_map(|r| r.outputs.iter())
                    .map(|f| {
                        cloud
                            .get_file(&f.container, &f.filename)
                            .unwrap()
                            .md5_hex()
                            .to_string()
                    })
                    .collect();
                runs.push((run, digests));
            }
            assert_eq!(runs[0].0.job_records, runs[1].0.job_records);
            assert_eq!(runs[0].1, runs[1].1);
        }

        // Counter law: the comparison counter never exceeds the file
        // counter and equality of the two is exactly the verdict.
        for _ in 0..100 {
            let mut world = World::new();
            let src = world.run_captured(&def, &staged_corpus(CORPUS));
            let dest = world.repeat(src);
            let container = world.db.run(dest).unwrap().output_container.clone();
            let mask: u32 = rng.gen_range(0..32);
            for (slot, name) in EXPECTED_FILES.iter().enumerate() {
                if mask & (1 << slot) != 0 {
                    let mut content =
                        world.cloud.get_file(&container, name).unwrap().into_content();
                    content.push(b'!');
                    world.cloud.put_file(&container, name, &content).unwrap();
                }
            }
            let cmp = compare_workflow_outputs(&world.db, &world.cloud, src, dest).unwrap();
            assert!(cmp.comparison_counter <= cmp.file_counter);
            assert_eq!(cmp.comparison_counter == cmp.file_counter, cmp.equal);
            assert_eq!(cmp.file_counter, 5);
            assert_eq!(cmp.comparison_counter, 5 - mask.count_ones());
        }
    });
}
