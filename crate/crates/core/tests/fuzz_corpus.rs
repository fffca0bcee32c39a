//! Runs the checked-in fuzz corpus, plus mutated copies of every seed,
//! through the same entry points the fuzz targets exercise.

use std::path::{Path, PathBuf};

use picpq::container::{decode_dataset, decode_state, decode_weights, encode_dataset, encode_state, encode_weights};
use picpq::cost::{baseline_bops, model_cost};
use picpq::data::{synthetic, SyntheticConfig};
use picpq::evosearch::{history_from_jsonl, history_to_jsonl, HistoryRecord};
use picpq::model::init_model;
use picpq::picplan::{default_floors, derive_masks, importance, AbVector, CompressionPlan, Currency};
use picpq::pipeline::PipelineConfig;
use picpq::quantize::default_schedule;
use picpq::rankfp::FilterPropertyTable;
use picpq::spec::{desk_network, NetworkSpec};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TARGETS: [&str; 8] = [
    "decode_weights",
    "decode_dataset",
    "network_spec",
    "compression_plan",
    "filter_properties",
    "ab_vector",
    "search_history",
    "pipeline_config",
];

fn corpus_dir(target: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target)
}

fn desk_fp() -> FilterPropertyTable {
    let spec = desk_network(3);
    FilterPropertyTable {
        values: spec
            .prunable_ids()
            .into_iter()
            .map(|id| (id, (0..spec.layer(id).unwrap().out_units().unwrap()).map(|i| (i % 7) as f64).collect()))
            .collect(),
        sample_count: 1,
        tolerance: 1e-6,
    }
}

/// Mirror of each fuzz target body.
fn exercise(target: &str, data: &[u8]) {
    let text = std::str::from_utf8(data).ok();
    let spec = desk_network(3);
    match target {
        "decode_weights" => {
            if let Ok(entries) = decode_weights(data) {
                assert_eq!(encode_weights(&entries).unwrap(), data);
            }
            let _ = decode_state(data);
        }
        "decode_dataset" => {
            if let Ok(ds) = decode_dataset(data) {
                assert_eq!(encode_dataset(&ds).unwrap(), data);
            }
        }
        "network_spec" => {
            if let Some(Ok(s)) = text.map(NetworkSpec::from_json) {
                if s.validate().is_ok() {
                    let _ = s.topology();
                    let _ = baseline_bops(&s);
                    let _ = CompressionPlan::identity(&s);
                }
            }
        }
        "compression_plan" => {
            if let Some(Ok(plan)) = text.map(|t| CompressionPlan::from_json(t, &spec)) {
                let _ = model_cost(&spec, &plan);
                assert_eq!(CompressionPlan::from_json(&plan.to_json(), &spec).unwrap(), plan);
            }
        }
        "filter_properties" => {
            if let Some(Ok(table)) = text.map(FilterPropertyTable::from_json) {
                if table.check(&spec).is_ok() {
                    let _ = table.range();
                    let _ = importance(&table, &AbVector::identity(&spec));
                }
            }
        }
        "ab_vector" => {
            if let Some(Ok(ab)) = text.map(AbVector::from_json) {
                if ab.check(&spec).is_ok() {
                    if let Ok(imp) = importance(&desk_fp(), &ab) {
                        let schedule = default_schedule(&spec, 8, 2).unwrap();
                        let _ = derive_masks(&imp, &spec, &schedule, 10.0, &default_floors(&spec), Currency::Joint);
                    }
                }
            }
        }
        "search_history" => {
            if let Some(Ok(records)) = text.map(history_from_jsonl) {
                assert_eq!(history_from_jsonl(&history_to_jsonl(&records)).unwrap().len(), records.len());
            }
        }
        "pipeline_config" => {
            if let Some(Ok(config)) = text.map(|t| PipelineConfig::from_json(t, Path::new("/fuzz"))) {
                let _ = config.validate();
                let _ = config.effective_search();
            }
        }
        other => panic!("unknown target {other}"),
    }
}

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(corpus_dir(target))
        .unwrap_or_else(|e| panic!("corpus for {target}: {e}"))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

fn mutate(seed: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut out = seed.to_vec();
    match rng.random_range(0..4u8) {
        0 if !out.is_empty() => {
            let i = rng.random_range(0..out.len());
            out[i] ^= 1 << rng.random_range(0..8u32);
        }
        1 if !out.is_empty() => out.truncate(rng.random_range(0..out.len())),
        2 if !out.is_empty() => {
            let i = rng.random_range(0..out.len());
            out[i] = rng.random();
        }
        _ => {
            let i = rng.random_range(0..=out.len());
            out.insert(i, rng.random());
        }
    }
    out
}

#[test]
fn corpus_seeds_and_mutants_do_not_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for target in TARGETS {
        let seeds = seeds(target);
        assert!(!seeds.is_empty(), "{target} has no seeds");
        for seed in &seeds {
            exercise(target, seed);
            for _ in 0..200 {
                exercise(target, &mutate(seed, &mut rng));
            }
        }
    }
}

#[test]
fn every_target_has_an_accepted_seed() {
    let spec = desk_network(3);
    let ok = |target: &str, data: &[u8]| -> bool {
        let text = std::str::from_utf8(data).unwrap_or("");
        match target {
            "decode_weights" => decode_weights(data).is_ok(),
            "decode_dataset" => decode_dataset(data).is_ok(),
            "network_spec" => NetworkSpec::from_json(text).is_ok_and(|s| s.validate().is_ok()),
            "compression_plan" => CompressionPlan::from_json(text, &spec).is_ok(),
            "filter_properties" => FilterPropertyTable::from_json(text).is_ok_and(|t| t.check(&spec).is_ok()),
            "ab_vector" => AbVector::from_json(text).is_ok_and(|a| a.check(&spec).is_ok()),
            "search_history" => history_from_jsonl(text).is_ok_and(|h| !h.is_empty()),
            "pipeline_config" => PipelineConfig::from_json(text, Path::new("/fuzz")).is_ok(),
            _ => false,
        }
    };
    for target in TARGETS {
        assert!(seeds(target).iter().any(|s| ok(target, s)), "{target}: no seed parses");
    }
}

/// Regenerates the seeds: `cargo test --test fuzz_corpus -- --ignored`.
#[test]
#[ignore]
fn write_corpus_seeds() {
    let spec = desk_network(3);
    let write = |target: &str, name: &str, bytes: &[u8]| {
        let dir = corpus_dir(target);
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join(name), bytes).unwrap();
    };
    let mut small = init_model(&spec, 1).unwrap();
    small.act_max = [(3u32, 1.5f32)].into_iter().collect();
    write("decode_weights", "desk.picw", &encode_state(&small).unwrap());
    let tiny = vec![("1.weight".to_string(), picpq::tensor::Tensor::new(vec![2, 1], vec![0.5, -1.0]).unwrap())];
    write("decode_weights", "tiny.picw", &encode_weights(&tiny).unwrap());
    write("decode_weights", "empty.picw", &encode_weights(&[]).unwrap());

    let (train, _) = synthetic(&SyntheticConfig { train: 3, test: 1, size: 4, ..Default::default() }).unwrap();
    write("decode_dataset", "small.picd", &encode_dataset(&train).unwrap());

    write("network_spec", "desk.json", spec.to_json().as_bytes());
    write("network_spec", "residual.json", br#"{"name":"res","input_shape":[2,6,6],"layers":[{"id":1,"kind":{"conv":{"in_channels":2,"out_channels":4,"kernel":3,"padding":1}}},{"id":2,"kind":"relu"},{"id":3,"kind":{"conv":{"in_channels":4,"out_channels":4,"kernel":3,"padding":1}}},{"id":4,"kind":{"residual_add":{"from":2}}},{"id":5,"kind":"flatten"},{"id":6,"kind":{"fc":{"in_features":144,"out_features":2}}}],"residual_groups":[[1,3]]}"#);

    let schedule = default_schedule(&spec, 8, 2).unwrap();
    let imp = importance(&desk_fp(), &AbVector::identity(&spec)).unwrap();
    let plan = derive_masks(&imp, &spec, &schedule, 30.0, &default_floors(&spec), Currency::Joint).unwrap();
    write("compression_plan", "desk-30x.json", plan.to_json().as_bytes());
    write("compression_plan", "identity.json", CompressionPlan::identity(&spec).unwrap().to_json().as_bytes());

    write("filter_properties", "desk.json", desk_fp().to_json().as_bytes());
    write("ab_vector", "identity.json", AbVector::identity(&spec).to_json().as_bytes());

    let record = HistoryRecord {
        iter: 0,
        birth_index: 0,
        ab: AbVector::identity(&spec),
        score: 0.75,
        achieved_ratio: 30.2,
        feasible: true,
    };
    let infeasible =
        HistoryRecord { iter: 1, birth_index: 1, score: 0.0, achieved_ratio: 12.5, feasible: false, ..record.clone() };
    write("search_history", "two.jsonl", history_to_jsonl(&[record, infeasible]).as_bytes());

    write("pipeline_config", "empty.json", b"{}");
    write(
        "pipeline_config",
        "full.json",
        br#"{"data":{"synthetic":{"train":240,"test":90,"noise":0.5,"seed":3}},"budget_ratio":20,"search":{"population_size":4,"sample_size":2,"iterations":3},"baseline":{"steps":100,"learning_rate":0.02,"lr_schedule":[[0.5,0.2]]},"rank":{"batches":2},"seed":7}"#,
    );
    write(
        "pipeline_config",
        "files.json",
        br#"{"data":{"files":{"train":"train.picd","test":"test.picd"}},"prune_only":true,"budget_ratio":3}"#,
    );
}
