mod common;

use std::collections::BTreeMap;

use crystal_infomax::data::{split_train_test, BondTensor, ElementPropertyTable, FeatureScaler};
use crystal_infomax::downstream::benchmark::{
    run_benchmark, BenchmarkConfig, BenchmarkInputs, Method, Task,
};
use crystal_infomax::downstream::probe::{MlpProbeConfig, ProbeKind};
use crystal_infomax::downstream::synthetic::toy_corpus;
use crystal_infomax::downstream::transfer::{
    fine_tune, FineTuneConfig, SupervisedModel, TransferInit,
};
use crystal_infomax::downstream::{extract_trained, extract_untrained, RepresentationSource};
use crystal_infomax::pretrain::{featurize, pretrain, Checkpoint, PretrainConfig, PretrainOutputs};
use crystal_infomax::Error;

use common::small_encoder;

struct Fixture {
    task: Task,
    config: PretrainConfig,
    checkpoint: Checkpoint,
}

fn fixture() -> Fixture {
    let table = ElementPropertyTable::bundled();
    let corpus = toy_corpus(90, 11, table).unwrap();
    let mut config = PretrainConfig {
        encoder: small_encoder(),
        ..Default::default()
    };
    config.dim.upscale_net = vec![8, 16];
    config.train.site_cap = 8;
    config.train.max_epochs = 2;
    config.train.batch_budget = 120;
    let tensors = featurize(&corpus, 8, table).unwrap();
    let ids: Vec<String> = corpus.iter().map(|s| s.id.clone()).collect();
    let (train_ids, _) = split_train_test(&ids, 0);
    let index: BTreeMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let train_tensors: Vec<BondTensor> = train_ids
        .iter()
        .map(|id| tensors[index[id.as_str()]].clone())
        .collect();
    let outcome = pretrain(
        &train_ids,
        &train_tensors,
        &config,
        table,
        &PretrainOutputs::default(),
    )
    .unwrap();
    Fixture {
        task: Task {
            name: "toy".into(),
            labels: corpus.iter().map(|s| s.label.unwrap()).collect(),
            ids,
            tensors,
        },
        config,
        checkpoint: outcome.checkpoint,
    }
}

fn bench_config() -> BenchmarkConfig {
    BenchmarkConfig {
        n_labels: vec![50, 60, 1000],
        methods: vec![
            Method::Probe(ProbeKind::Linear, RepresentationSource::TrainedDim),
            Method::Probe(ProbeKind::Linear, RepresentationSource::UntrainedDim),
            Method::Probe(ProbeKind::Mlp64, RepresentationSource::TrainedDim),
            Method::Transfer(TransferInit::Random),
            Method::Transfer(TransferInit::DimCheckpoint),
        ],
        probe_seeds: 3,
        transfer_seeds: 2,
        probe: MlpProbeConfig {
            max_epochs: 50,
            ..Default::default()
        },
        fine_tune: FineTuneConfig {
            max_epochs: 1,
            batch_budget: 200,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn benchmark_protocol_caching_and_hygiene() {
    let f = fixture();
    let inputs = BenchmarkInputs {
        dim_checkpoint: Some(f.checkpoint.clone()),
        model_config: f.config.clone(),
        ..Default::default()
    };
    let config = bench_config();
    let dir = tempfile::tempdir().unwrap();
    let report = run_benchmark(&f.task, &config, &inputs, Some(dir.path()), false).unwrap();

    assert_eq!(report.skipped_n_labels, vec![1000]);
    assert_eq!(report.results.len(), 2 * (3 * 3 + 2 * 2));
    assert_eq!(report.test_ids.len(), 18);
    assert!(report
        .results
        .iter()
        .all(|r| r.test_mae >= 0.0 && r.test_mae.is_finite()));
    assert!(report
        .training_ids
        .iter()
        .all(|id| !report.test_ids.contains(id)));

    let mut subsets: BTreeMap<(usize, u64), &Vec<String>> = BTreeMap::new();
    for rec in &report.records {
        let key = (rec.result.n_labels, rec.result.seed);
        let seen = subsets.entry(key).or_insert(&rec.visible_ids);
        assert_eq!(*seen, &rec.visible_ids, "methods saw different labels");
        assert_eq!(rec.visible_ids.len(), rec.result.n_labels);
    }

    let table = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(table.starts_with("task,n_labels,method,seed,test_mae\n"));
    assert_eq!(table.lines().count(), report.results.len() + 1);
    for n in [50, 60] {
        assert!(
            std::fs::metadata(dir.path().join(format!("toy_n{n}.png")))
                .unwrap()
                .len()
                > 0
        );
    }

    let again = run_benchmark(&f.task, &config, &inputs, Some(dir.path()), true).unwrap();
    assert_eq!(again.computed, 0);
    assert_eq!(again.cached, report.results.len());
    assert_eq!(again.results, report.results);

    let fresh = run_benchmark(&f.task, &config, &inputs, None, false).unwrap();
    assert_eq!(fresh.results, report.results);
}

#[test]
fn leaked_checkpoint_is_refused() {
    let f = fixture();
    let (_, test_ids) = split_train_test(&f.task.ids, 0);
    let mut leaky = f.checkpoint.clone();
    leaky.trained_on.push(test_ids[0].clone());
    let inputs = BenchmarkInputs {
        dim_checkpoint: Some(leaky),
        model_config: f.config.clone(),
        ..Default::default()
    };
    let err = run_benchmark(&f.task, &bench_config(), &inputs, None, false).unwrap_err();
    assert!(matches!(err, Error::TestLeak(_)), "{err}");
}

#[test]
fn missing_checkpoint_is_a_configuration_error() {
    let f = fixture();
    let inputs = BenchmarkInputs {
        model_config: f.config.clone(),
        ..Default::default()
    };
    let err = run_benchmark(&f.task, &bench_config(), &inputs, None, false).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn trained_and_untrained_representations() {
    let f = fixture();
    let refs: Vec<&BondTensor> = f.task.tensors.iter().collect();
    let a = extract_trained(&f.checkpoint, &f.task.ids, &refs, 500).unwrap();
    let b = extract_trained(&f.checkpoint, &f.task.ids, &refs, 97).unwrap();
    assert_eq!(a.x.dim(), (90, f.config.encoder.global_dim()));
    for (p, q) in a.x.iter().zip(b.x.iter()) {
        assert!((p - q).abs() < 1e-12);
    }
    assert!(!a.normalized);
    let u = extract_untrained(&f.config, 5, &f.checkpoint.scaler, &f.task.ids, &refs, 500).unwrap();
    assert!(u.normalized);
    assert_eq!(u.x.dim(), a.x.dim());
    assert_ne!(u.x, a.x);
    for col in u.x.columns() {
        assert!(col.mean().unwrap().abs() < 1e-9);
    }
}

#[test]
fn zero_step_transfer_keeps_the_pretrained_encoder() {
    let f = fixture();
    let mut model = SupervisedModel::initialize(
        TransferInit::DimCheckpoint,
        &f.config.encoder,
        Some(&f.checkpoint),
        FeatureScaler::identity(),
        3,
    )
    .unwrap();
    let refs: Vec<&BondTensor> = f.task.tensors.iter().take(20).collect();
    let labels = &f.task.labels[..20];
    let config = FineTuneConfig {
        max_epochs: 0,
        ..Default::default()
    };
    fine_tune(&mut model, &refs, labels, &config, 3).unwrap();
    let records = model.params.to_records();
    for (name, rec) in &f.checkpoint.params {
        if name.starts_with("dim.") {
            continue;
        }
        assert_eq!(&records[name], rec, "{name} changed");
    }
    assert!(records.keys().any(|k| k.starts_with("head.")));

    let donor = model.checkpoint(&f.config, 3, &f.task.ids[..20]);
    let from_donor = SupervisedModel::initialize(
        TransferInit::DonorSupervised,
        &f.config.encoder,
        Some(&donor),
        FeatureScaler::identity(),
        4,
    )
    .unwrap();
    let wrong = SupervisedModel::initialize(
        TransferInit::DonorSupervised,
        &f.config.encoder,
        Some(&f.checkpoint),
        FeatureScaler::identity(),
        4,
    );
    assert!(matches!(wrong, Err(Error::Config(_))));
    let r = from_donor.params.to_records();
    assert!(r
        .iter()
        .filter(|(k, _)| !k.starts_with("head."))
        .all(|(k, v)| &records[k] == v));
}
