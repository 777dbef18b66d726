//! Acceptance suite: one pass/fail line per criterion.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crystal_infomax::data::structure::{composition_of, element_fractions};
use crystal_infomax::data::{
    build_bond_tensor, build_supercell, split_train_test, BondTensor, CrystalStructure,
    ElementPropertyTable, FeatureScaler, LABEL_AVAILABILITIES,
};
use crystal_infomax::downstream::benchmark::{
    run_benchmark, BenchmarkConfig, BenchmarkInputs, BenchmarkReport, Method, Task,
};
use crystal_infomax::downstream::probe::{MlpProbeConfig, ProbeKind};
use crystal_infomax::downstream::synthetic::toy_corpus;
use crystal_infomax::downstream::transfer::{FineTuneConfig, TransferInit};
use crystal_infomax::downstream::RepresentationSource;
use crystal_infomax::encoder::{Encoder, EncoderConfig, EncoderInput, LOCAL_PREFIXES};
use crystal_infomax::infomax::{
    build_dim_batch, combined_loss, js_loss, kl_loss, make_false_composition,
    make_false_permutation, make_false_polymorph, sample_other_crystal, DimConfig, DimHead,
    FalseSource, Level, ScorePlanBuilder,
};
use crystal_infomax::nn::{Mat, Params, Tape};
use crystal_infomax::pretrain::{
    featurize, init_dim_model, pretrain, validate_model, PretrainConfig, PretrainOutputs,
};
use crystal_infomax::viz::{contains_halogen_and_metal, default_perplexity, median};

use common::{random_crystal, small_encoder, tensor};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global()
        .expect("thread pool");
    let criteria: [Criterion; 10] = [
        ("analytic loss values", analytic_loss_values),
        ("permutation invariance", permutation_invariance),
        ("gradient correctness", gradient_correctness),
        ("gradient isolation", gradient_isolation),
        ("false-sample contracts", false_sample_contracts),
        ("learning signal", learning_signal),
        ("representation value-added", representation_value_added),
        ("harness protocol fidelity", harness_protocol),
        ("determinism", determinism),
        ("visualization", visualization),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(k + 1)) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name} ({secs:.1}s): {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} ({secs:.1}s): {detail}", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn analytic_loss_values() -> Outcome {
    let js = js_loss(0.0, 0.0);
    let kl = kl_loss(&[0.0; 128], &[1.0; 128]).map_err(|e| e.to_string())?;
    let combined = combined_loss(
        &[0.0; 5],
        &vec![vec![0.0; 3]; 5],
        &[0.0; 128],
        &[1.0; 128],
        1.0,
        0.1,
    )
    .map_err(|e| e.to_string())?;

    // Zeroed upscalers give zero dot products through the full graph.
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let head = DimHead::new(&mut params, Level::Global, 128, 64, &[64, 128], &mut rng);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        params.value_mut(id).fill(0.0);
    }
    let mut tape = Tape::new();
    let z = tape.constant(Mat::zeros((2, 128)));
    let c = tape.constant(Mat::from_shape_fn((6, 64), |(i, j)| (i * j) as f64 * 0.01));
    let mut plan = ScorePlanBuilder::default();
    plan.push(
        &[0, 1, 2],
        &[
            vec![(FalseSource::InBatch, 3)],
            vec![(FalseSource::InBatch, 4)],
            vec![(FalseSource::InBatch, 5)],
        ],
    );
    plan.push(
        &[3, 4, 5],
        &[
            vec![(FalseSource::InBatch, 0)],
            vec![(FalseSource::InBatch, 1)],
            vec![(FalseSource::InBatch, 2)],
        ],
    );
    let plan = plan.finish();
    let noise = Mat::from_shape_fn((2, 128), |_| rng.random_range(-1.0..1.0));
    let config = DimConfig::default();
    let loss = head.loss(&mut tape, &params, z, &noise, c, &plan, &config);
    let graph_js = tape.scalar(loss.js);
    let graph_total = tape.scalar(loss.total);

    let two_ln2 = 2.0 * 2f64.ln();
    check(
        (js - 1.38629).abs() < 1e-5
            && (kl - 1.0).abs() < 1e-7
            && (combined - 1.48629).abs() < 1e-5
            && (graph_js - two_ln2).abs() < 1e-12
            && (graph_total - (two_ln2 + 0.1)).abs() < 1e-12,
        format!(
            "js {js:.6}, kl {kl:.8}, combined {combined:.6}, graph js {graph_js:.6}, graph total {graph_total:.6}"
        ),
    )
}

fn permuted_structure(s: &CrystalStructure, perm: &[usize]) -> CrystalStructure {
    CrystalStructure::new(
        s.id.clone(),
        s.lattice,
        perm.iter().map(|&p| s.frac_coords[p]).collect(),
        perm.iter().map(|&p| s.species[p].clone()).collect(),
    )
}

fn permutation_invariance() -> Outcome {
    let table = ElementPropertyTable::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = Params::new();
    let enc = Encoder::new(&mut params, &EncoderConfig::default(), &mut rng)
        .map_err(|e| e.to_string())?;
    let mut worst_global: f64 = 0.0;
    let mut worst_local: f64 = 0.0;
    for c in 0..50 {
        let n = rng.random_range(1..=20);
        let s = random_crystal(&format!("c{c}"), n, &mut rng);
        let base = build_bond_tensor(&build_supercell(&s, 50, table).map_err(|e| e.to_string())?);
        let scaler = FeatureScaler::fit(std::slice::from_ref(&base));
        let run = |t: &BondTensor| {
            let input = EncoderInput::new(&[t], &scaler).expect("valid input");
            let mut tape = Tape::new();
            let out = enc.forward(&mut tape, &params, &input, false);
            (
                tape.value(out.local).clone(),
                tape.value(out.global).clone(),
            )
        };
        let (local, global) = run(&base);
        let norm = global.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let moved = permuted_structure(&s, &perm);
            let t =
                build_bond_tensor(&build_supercell(&moved, 50, table).map_err(|e| e.to_string())?);
            let (l2, g2) = run(&t);
            let dev = global
                .iter()
                .zip(g2.iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                / norm;
            worst_global = worst_global.max(dev);
            // Supercell site m is primitive site m % n of image m / n.
            for m in 0..t.num_sites() {
                let source = (m / n) * n + perm[m % n];
                for f in 0..l2.ncols() {
                    worst_local = worst_local.max((l2[[m, f]] - local[[source, f]]).abs());
                }
            }
        }
    }
    check(
        worst_global < 1e-5 && worst_local < 1e-9,
        format!("max relative global deviation {worst_global:.2e}, max local row deviation {worst_local:.2e} over 250 permutations"),
    )
}

/// Worst relative disagreement between analytic and central-difference
/// gradients over every scalar parameter with |grad| > 1e-6.
fn finite_difference_check(
    params: &mut Params,
    f: &dyn Fn(&Params) -> (f64, Vec<Mat>),
) -> (f64, usize) {
    let (_, grads) = f(params);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let shape = params.value(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let g = grads[id.index()][[r, c]];
                if g.abs() <= 1e-6 {
                    continue;
                }
                let orig = params.value(id)[[r, c]];
                params.value_mut(id)[[r, c]] = orig + h;
                let up = f(params).0;
                params.value_mut(id)[[r, c]] = orig - h;
                let down = f(params).0;
                params.value_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                worst = worst.max((numeric - g).abs() / g.abs().max(numeric.abs()));
                checked += 1;
            }
        }
    }
    (worst, checked)
}

fn gradient_correctness() -> Outcome {
    // A 4-dimensional toy of the combined loss with trainable inputs.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = Params::new();
    let head = DimHead::new(&mut params, Level::Global, 4, 4, &[6, 5], &mut rng);
    let z = params.add(
        "toy.z",
        Mat::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0)),
    );
    let cons = params.add(
        "toy.c",
        Mat::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0)),
    );
    let log_sigma = params.id("dim.global.log_sigma").expect("present");
    params
        .value_mut(log_sigma)
        .mapv_inplace(|_| rng.random_range(-0.5..0.5));
    for id in params.ids().collect::<Vec<_>>() {
        if params.name(id).ends_with(".weight") {
            params.value_mut(id).mapv_inplace(|v| v * 10.0);
        }
    }
    let noise = Mat::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
    let mut builder = ScorePlanBuilder::default();
    builder.push(
        &[0, 1],
        &[
            vec![
                (FalseSource::InBatch, 2),
                (FalseSource::FalseComposition, 4),
            ],
            vec![
                (FalseSource::InBatch, 3),
                (FalseSource::FalseComposition, 4),
            ],
        ],
    );
    builder.push(
        &[2, 3, 4],
        &[
            vec![
                (FalseSource::InBatch, 0),
                (FalseSource::FalseComposition, 1),
            ],
            vec![
                (FalseSource::InBatch, 1),
                (FalseSource::FalseComposition, 0),
            ],
            vec![
                (FalseSource::InBatch, 0),
                (FalseSource::FalseComposition, 1),
            ],
        ],
    );
    let plan = builder.finish();
    let config = DimConfig::default();
    let toy = |p: &Params| {
        let mut tape = Tape::new();
        let zv = tape.param(p, z);
        let cv = tape.param(p, cons);
        let loss = head.loss(&mut tape, p, zv, &noise, cv, &plan, &config);
        let g = tape.backward(loss.total);
        (tape.scalar(loss.total), tape.param_grads(p, &g))
    };
    let (toy_worst, toy_checked) = finite_difference_check(&mut params, &toy);

    // The scalar ⟨G, w⟩ of a 3-site crystal.
    let table = ElementPropertyTable::bundled();
    let s = CrystalStructure::new(
        "fd",
        [[3.9, 0.0, 0.0], [0.4, 4.2, 0.0], [0.3, -0.2, 4.6]],
        vec![[0.0, 0.0, 0.0], [0.5, 0.45, 0.1], [0.2, 0.7, 0.6]],
        vec!["Ba".into(), "Ti".into(), "O".into()],
    );
    let t = build_bond_tensor(&build_supercell(&s, 3, table).map_err(|e| e.to_string())?);
    let scaler = FeatureScaler::fit(std::slice::from_ref(&t));
    let input = EncoderInput::new(&[&t], &scaler).map_err(|e| e.to_string())?;
    let mut params = Params::new();
    let enc = Encoder::new(&mut params, &EncoderConfig::default(), &mut rng)
        .map_err(|e| e.to_string())?;
    let w = Mat::from_shape_fn((1, 128), |_| rng.random_range(-1.0..1.0));
    let scalar = |p: &Params| {
        let mut tape = Tape::new();
        let out = enc.forward(&mut tape, p, &input, false);
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out.global, wv);
        let y = tape.sum_all(prod);
        let g = tape.backward(y);
        (tape.scalar(y), tape.param_grads(p, &g))
    };
    let (enc_worst, enc_checked) = finite_difference_check(&mut params, &scalar);
    check(
        toy_worst < 1e-3 && enc_worst < 1e-3 && toy_checked > 0 && enc_checked > 0,
        format!(
            "toy loss: {toy_checked} gradients, worst relative error {toy_worst:.2e}; encoder scalar: {enc_checked} gradients, worst {enc_worst:.2e}"
        ),
    )
}

fn gradient_isolation() -> Outcome {
    let table = ElementPropertyTable::bundled();
    let config = PretrainConfig::default();
    let (params, model) = init_dim_model(&config, 4).map_err(|e| e.to_string())?;
    let corpus = toy_corpus(6, 4, table).map_err(|e| e.to_string())?;
    let tensors = featurize(&corpus, 12, table).map_err(|e| e.to_string())?;
    let refs: Vec<&BondTensor> = tensors.iter().collect();
    let scaler = FeatureScaler::fit(&tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch =
        build_dim_batch(&refs, &config.dim, &scaler, table, &mut rng).map_err(|e| e.to_string())?;
    let mut noise = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let losses = model
        .losses(
            &mut tape,
            &params,
            &batch,
            &config.dim,
            &mut noise,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
    let global = tape.param_grads(&params, &tape.backward(losses.global.total));
    let local = tape.param_grads(&params, &tape.backward(losses.local.total));

    let mut local_params = 0;
    let mut leaked = Vec::new();
    let mut local_signal = 0.0f64;
    let mut prepool_signal = 0.0f64;
    for (id, name, _) in params.iter() {
        if LOCAL_PREFIXES.iter().any(|p| name.starts_with(p)) {
            local_params += 1;
            if global[id.index()].iter().any(|v| *v != 0.0) {
                leaked.push(name.to_owned());
            }
            local_signal =
                local_signal.max(local[id.index()].iter().fold(0.0, |m, v| m.max(v.abs())));
        }
        if name.starts_with("prepool.") {
            prepool_signal =
                prepool_signal.max(global[id.index()].iter().fold(0.0, |m, v| m.max(v.abs())));
        }
    }
    check(
        leaked.is_empty() && local_signal > 0.0 && prepool_signal > 0.0,
        format!(
            "{local_params} attention and embedding tensors, {} with nonzero global gradient {leaked:?}; local loss reaches them (max |g| {local_signal:.2e}); global loss reaches pre-pooling (max |g| {prepool_signal:.2e})",
            leaked.len()
        ),
    )
}

fn histogram(species: &[String]) -> BTreeMap<String, usize> {
    composition_of(species)
}

fn false_sample_contracts() -> Outcome {
    let table = ElementPropertyTable::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut problems = Vec::new();
    let mut permutations = 0;
    for k in 0..100 {
        let a_sites = rng.random_range(1..=6);
        let b_sites = rng.random_range(1..=6);
        let mut sa = random_crystal(&format!("a{k}"), a_sites, &mut rng);
        if a_sites > 1 {
            sa.species[0] = if sa.species[1] == "O" {
                "Na".into()
            } else {
                "O".into()
            };
        }
        let sb = random_crystal(&format!("b{k}"), b_sites, &mut rng);
        let a = tensor(&sa, 24);
        let b = tensor(&sb, 24);

        let poly = make_false_polymorph(&a, &b, table).map_err(|e| e.to_string())?;
        let want = element_fractions(&a.species);
        let got = element_fractions(&poly.species);
        let tol = 1.0 / b.num_sites() as f64 + 1e-12;
        let keys: BTreeSet<&String> = want.keys().chain(got.keys()).collect();
        if keys.iter().any(|s| {
            (want.get(*s).copied().unwrap_or(0.0) - got.get(*s).copied().unwrap_or(0.0)).abs() > tol
        }) {
            problems.push(format!("polymorph fractions of pair {k}"));
        }

        let comp = make_false_composition(&a, &b, table).map_err(|e| e.to_string())?;
        let mut da: Vec<u64> = a.distances.iter().map(|v| v.to_bits()).collect();
        let mut dc: Vec<u64> = comp.distances.iter().map(|v| v.to_bits()).collect();
        da.sort_unstable();
        dc.sort_unstable();
        if da != dc {
            problems.push(format!("composition distances of pair {k}"));
        }

        match make_false_permutation(&a, table, &mut rng).map_err(|e| e.to_string())? {
            Some(p) => {
                permutations += 1;
                if histogram(&p.species) != histogram(&a.species) || p.species == a.species {
                    problems.push(format!("permutation of pair {k}"));
                }
            }
            None if histogram(&a.species).len() > 1 => {
                problems.push(format!("missing permutation for pair {k}"))
            }
            None => {}
        }
    }

    let n = 10;
    let owner = 3;
    let draws = 10_000;
    let mut counts = vec![0usize; n];
    for _ in 0..draws {
        counts[sample_other_crystal(n, owner, &mut rng).map_err(|e| e.to_string())?] += 1;
    }
    let expected = draws as f64 / (n - 1) as f64;
    let chi2: f64 = counts
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != owner)
        .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dof = (n - 2) as f64;
    let chi2_limit = dof + 3.0 * (2.0 * dof).sqrt();
    let p = 1.0 / (n - 1) as f64;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    let worst_z = counts
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != owner)
        .map(|(_, &c)| (c as f64 - expected).abs() / sd)
        .fold(0.0, f64::max);
    if counts[owner] != 0 {
        problems.push("in-batch drew the true crystal".into());
    }
    check(
        problems.is_empty() && chi2 < chi2_limit && worst_z < 3.0 && permutations >= 50,
        format!(
            "100 pairs, {permutations} permutations, problems {problems:?}; in-batch chi-square {chi2:.2} (limit {chi2_limit:.2}), worst count {worst_z:.2} sd"
        ),
    )
}

fn task_from(name: &str, corpus: &[CrystalStructure], site_cap: usize) -> Result<Task, String> {
    let table = ElementPropertyTable::bundled();
    Ok(Task {
        name: name.into(),
        ids: corpus.iter().map(|s| s.id.clone()).collect(),
        labels: corpus.iter().map(|s| s.label.expect("labeled")).collect(),
        tensors: featurize(corpus, site_cap, table).map_err(|e| e.to_string())?,
    })
}

fn select(task: &Task, ids: &[String]) -> Vec<BondTensor> {
    let index: BTreeMap<&str, usize> = task
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    ids.iter()
        .map(|id| task.tensors[index[id.as_str()]].clone())
        .collect()
}

const TOY_SITE_CAP: usize = 16;

fn learning_signal() -> Outcome {
    let table = ElementPropertyTable::bundled();
    let corpus = toy_corpus(100, 6, table).map_err(|e| e.to_string())?;
    let task = task_from("signal", &corpus, TOY_SITE_CAP)?;
    let mut config = PretrainConfig::default();
    config.train.site_cap = TOY_SITE_CAP;
    config.train.batch_budget = 400;
    config.train.max_epochs = 50;
    config.train.patience = 50;
    config.train.seed = 6;
    let outcome = pretrain(
        &task.ids,
        &task.tensors,
        &config,
        table,
        &PretrainOutputs::default(),
    )
    .map_err(|e| e.to_string())?;
    let curves = &outcome.curves.records;
    let best_local = curves
        .iter()
        .map(|r| r.local_dim)
        .fold(f64::INFINITY, f64::min);
    let best_global = curves
        .iter()
        .map(|r| r.global_dim)
        .fold(f64::INFINITY, f64::min);
    let (params, model) = outcome.checkpoint.dim_model().map_err(|e| e.to_string())?;
    let val = select(&task, &outcome.validation_ids);
    let refs: Vec<&BondTensor> = val.iter().collect();
    let (local, global) = validate_model(
        &model,
        &params,
        &config,
        &outcome.checkpoint.scaler,
        table,
        &refs,
    )
    .map_err(|e| e.to_string())?;
    let threshold = 1.3863;
    check(
        best_local < threshold
            && best_global < threshold
            && local.in_batch_accuracy() >= 0.9
            && global.in_batch_accuracy() >= 0.9,
        format!(
            "{} epochs on {} validation crystals; best validation loss local {best_local:.4} global {best_global:.4}; in-batch ranking accuracy local {:.3} ({} triples) global {:.3} ({} triples)",
            curves.len(),
            outcome.validation_ids.len(),
            local.in_batch_accuracy(),
            local.in_batch_ranked.1,
            global.in_batch_accuracy(),
            global.in_batch_ranked.1
        ),
    )
}

fn representation_value_added() -> Outcome {
    let table = ElementPropertyTable::bundled();
    let corpus = toy_corpus(1000, 0, table).map_err(|e| e.to_string())?;
    let task = task_from("synthetic", &corpus, TOY_SITE_CAP)?;
    let (train_ids, test_ids) = split_train_test(&task.ids, 0);
    let mut config = PretrainConfig::default();
    config.train.site_cap = TOY_SITE_CAP;
    config.train.batch_budget = 400;
    config.train.max_epochs = 20;
    let outcome = pretrain(
        &train_ids,
        &select(&task, &train_ids),
        &config,
        table,
        &PretrainOutputs::default(),
    )
    .map_err(|e| e.to_string())?;
    let trained = Method::Probe(ProbeKind::Linear, RepresentationSource::TrainedDim);
    let untrained = Method::Probe(ProbeKind::Linear, RepresentationSource::UntrainedDim);
    let bench = BenchmarkConfig {
        n_labels: vec![50],
        methods: vec![trained, untrained],
        probe_seeds: 20,
        ..Default::default()
    };
    let inputs = BenchmarkInputs {
        dim_checkpoint: Some(outcome.checkpoint),
        model_config: config,
        ..Default::default()
    };
    let report = run_benchmark(&task, &bench, &inputs, None, false).map_err(|e| e.to_string())?;
    if report.test_ids != test_ids {
        return Err("benchmark used a different test split".into());
    }
    let a = median(&report.maes(50, trained));
    let b = median(&report.maes(50, untrained));
    check(
        a < b,
        format!("median test MAE over 20 seeds at 50 labels: trained {a:.4}, untrained {b:.4} (best epoch {})", outcome.best_epoch),
    )
}

fn small_model() -> PretrainConfig {
    let mut config = PretrainConfig {
        encoder: small_encoder(),
        ..Default::default()
    };
    config.dim.upscale_net = vec![8, 16];
    config.train.site_cap = 8;
    config.train.batch_budget = 120;
    config.train.max_epochs = 1;
    config
}

fn small_benchmark(
    task: &Task,
    model: &PretrainConfig,
) -> Result<(BenchmarkReport, BenchmarkInputs), String> {
    let table = ElementPropertyTable::bundled();
    let (train_ids, _) = split_train_test(&task.ids, 0);
    let outcome = pretrain(
        &train_ids,
        &select(task, &train_ids),
        model,
        table,
        &PretrainOutputs::default(),
    )
    .map_err(|e| e.to_string())?;
    let inputs = BenchmarkInputs {
        dim_checkpoint: Some(outcome.checkpoint),
        model_config: model.clone(),
        ..Default::default()
    };
    let config = BenchmarkConfig {
        n_labels: vec![50, 60],
        methods: vec![
            Method::Probe(ProbeKind::Linear, RepresentationSource::TrainedDim),
            Method::Probe(ProbeKind::Mlp64, RepresentationSource::UntrainedDim),
            Method::Transfer(TransferInit::Random),
            Method::Transfer(TransferInit::DimCheckpoint),
        ],
        probe_seeds: 4,
        transfer_seeds: 2,
        probe: MlpProbeConfig {
            max_epochs: 100,
            ..Default::default()
        },
        fine_tune: FineTuneConfig {
            max_epochs: 1,
            batch_budget: 200,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = run_benchmark(task, &config, &inputs, None, false).map_err(|e| e.to_string())?;
    Ok((report, inputs))
}

fn harness_protocol() -> Outcome {
    let table = ElementPropertyTable::bundled();
    let ids: Vec<String> = (0..1000).map(|i| format!("x{i}")).collect();
    let (train, test) = split_train_test(&ids, 0);
    let defaults = BenchmarkConfig::default();

    let corpus = toy_corpus(90, 8, table).map_err(|e| e.to_string())?;
    let task = task_from("protocol", &corpus, 8)?;
    let (report, inputs) = small_benchmark(&task, &small_model())?;
    let mut paired = true;
    let mut subsets: BTreeMap<(usize, u64), &Vec<String>> = BTreeMap::new();
    for rec in &report.records {
        let seen = subsets
            .entry((rec.result.n_labels, rec.result.seed))
            .or_insert(&rec.visible_ids);
        paired &= *seen == &rec.visible_ids;
    }
    let test_set: BTreeSet<&String> = report.test_ids.iter().collect();
    let clean = report.training_ids.iter().all(|id| !test_set.contains(id))
        && inputs
            .dim_checkpoint
            .as_ref()
            .is_some_and(|ck| ck.trained_on.iter().all(|id| !test_set.contains(id)));

    let mut leaky = inputs.clone();
    if let Some(ck) = leaky.dim_checkpoint.as_mut() {
        ck.trained_on.push(report.test_ids[0].clone());
    }
    let refused = matches!(
        run_benchmark(
            &task,
            &BenchmarkConfig {
                n_labels: vec![50],
                probe_seeds: 1,
                transfer_seeds: 1,
                ..Default::default()
            },
            &leaky,
            None,
            false
        ),
        Err(crystal_infomax::Error::TestLeak(_))
    );
    let custom_seeds = BenchmarkConfig {
        probe_seeds: 100,
        ..Default::default()
    }
    .validate()
    .is_ok();
    check(
        train.len() == 800
            && test.len() == 200
            && LABEL_AVAILABILITIES == [50, 100, 250, 1000]
            && defaults.n_labels == LABEL_AVAILABILITIES
            && defaults.transfer_seeds == 12
            && defaults.probe_seeds == 100
            && custom_seeds
            && paired
            && clean
            && refused,
        format!(
            "split {}/{}; label counts {:?}; seeds transfer {} probe {}; {} cells seed-paired {paired}; test ids absent from training {clean}; leaked checkpoint refused {refused}",
            train.len(),
            test.len(),
            defaults.n_labels,
            defaults.transfer_seeds,
            defaults.probe_seeds,
            report.records.len()
        ),
    )
}

fn determinism() -> Outcome {
    let table = ElementPropertyTable::bundled();
    let corpus = toy_corpus(90, 9, table).map_err(|e| e.to_string())?;
    let task = task_from("determinism", &corpus, 8)?;
    let mut config = small_model();
    config.train.seed = 9;
    let run = || {
        pretrain(
            &task.ids,
            &task.tensors,
            &config,
            table,
            &PretrainOutputs::default(),
        )
        .map(|o| serde_json::to_vec(&o.checkpoint).expect("serializes"))
        .map_err(|e| e.to_string())
    };
    let a = run()?;
    let b = run()?;
    let (ra, _) = small_benchmark(&task, &config)?;
    let (rb, _) = small_benchmark(&task, &config)?;
    check(
        a == b && ra.to_csv() == rb.to_csv(),
        format!(
            "one-epoch checkpoints identical {} ({} bytes); benchmark tables identical {} ({} rows)",
            a == b,
            a.len(),
            ra.to_csv() == rb.to_csv(),
            ra.results.len()
        ),
    )
}

fn visualization() -> Outcome {
    let table = ElementPropertyTable::bundled();
    let labeled: [(&[&str], bool); 20] = [
        (&["Na", "Cl"], true),
        (&["Si", "O"], false),
        (&["Li", "F"], true),
        (&["K", "Br"], true),
        (&["Ca", "F"], true),
        (&["Fe", "O"], false),
        (&["Cu", "Cl"], true),
        (&["N", "H", "Cl"], false),
        (&["C", "Cl"], false),
        (&["S", "F"], false),
        (&["Cu"], false),
        (&["Cl"], false),
        (&["Mg", "O"], false),
        (&["Ga", "N"], false),
        (&["Al", "F"], true),
        (&["Ti", "Cl"], true),
        (&["Ba", "Ti", "O"], false),
        (&["I", "Cl"], false),
        (&["Cs", "Pb", "Br"], true),
        (&["La", "O", "F"], true),
    ];
    let wrong: Vec<String> = labeled
        .iter()
        .filter(|(species, want)| {
            let s: Vec<String> = species.iter().map(|x| x.to_string()).collect();
            contains_halogen_and_metal(&s, table) != *want
        })
        .map(|(species, _)| species.concat())
        .collect();
    let p2000 = default_perplexity(2000);
    let p400 = default_perplexity(400);
    check(
        p2000 == 100.0 && p400 == 20.0 && wrong.is_empty(),
        format!("default perplexity n=2000 -> {p2000}, n=400 -> {p400}; halogen-metal mismatches {wrong:?} of 20"),
    )
}
