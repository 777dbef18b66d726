use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crystal_infomax::config::RunConfig;
use crystal_infomax::data::structure::write_jsonl;
use crystal_infomax::data::{
    load_structures, mask_labels, split_train_test, BondTensor, CorpusFormat, CrystalStructure,
    ElementPropertyTable, FeatureScaler,
};
use crystal_infomax::downstream::benchmark::{
    mask_seed, run_benchmark, BenchmarkInputs, Method, Task, RESULTS_HEADER,
};
use crystal_infomax::downstream::probe::{fit_and_score, mean_absolute_error, ProbeKind};
use crystal_infomax::downstream::synthetic::toy_corpus;
use crystal_infomax::downstream::transfer::{fine_tune, SupervisedModel, TransferInit};
use crystal_infomax::downstream::{
    ensure_disjoint, extract_trained, extract_untrained, RepresentationMatrix, RepresentationSource,
};
use crystal_infomax::pretrain::{featurize, pretrain, Checkpoint, PretrainOutputs};
use crystal_infomax::viz::{overlay_halogen_metal, plot_embedding, tsne_embed, Overlay};
use crystal_infomax::{Error, Result};

#[derive(Parser)]
#[command(
    name = "crystal-infomax",
    version,
    about = "Self-supervised InfoMax pretraining and evaluation of crystal encoders"
)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the command's stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 is the reproducible mode, 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CorpusArgs {
    /// A line-delimited JSON corpus or a directory of CIF files.
    #[arg(long)]
    input: PathBuf,
    /// Inferred from the path when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Largest primitive cell kept, and the supercell site target.
    #[arg(long)]
    site_cap: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    CifDir,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeArg {
    Linear,
    Mlp64,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    DimCheckpoint,
    DonorSupervised,
}

#[derive(Clone, Copy, ValueEnum)]
enum OverlayArg {
    HalogenMetal,
    Property,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a labeled toy corpus of ten structure families.
    ToyCorpus {
        /// Number of crystals.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Output JSON lines file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Builds supercells and bond tensors and writes them as JSON lines.
    Featurize {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Output JSON lines file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the InfoMax model on the training split; `--seed` sets the training seed.
    Pretrain {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Directory for the checkpoint, logs, curves and split.
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the configured epoch limit.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Writes one representation per crystal; `--seed` sets the untrained model seed.
    Extract {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// InfoMax checkpoint; omit for an untrained model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output CSV with header `id,x0,x1,...`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fits a probe on frozen representations and reports the test MAE.
    Probe {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Representation CSV written by `extract`.
        #[arg(long)]
        representations: PathBuf,
        #[arg(long, value_enum, default_value = "linear")]
        kind: ProbeArg,
        /// Visible training labels.
        #[arg(long, default_value_t = 50)]
        n_labels: usize,
    },
    /// Fine-tunes a supervised encoder and reports the test MAE.
    Transfer {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_enum, default_value = "random")]
        init: InitArg,
        /// InfoMax checkpoint or donor checkpoint, matching `--init`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Visible training labels.
        #[arg(long, default_value_t = 50)]
        n_labels: usize,
        /// Saves the fine-tuned model, usable as a donor checkpoint.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Runs the full benchmark matrix; `--seed` sets the split seed.
    Benchmark {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// InfoMax checkpoint for the trained-representation and transfer methods.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Supervised donor checkpoint for `transfer_donor`.
        #[arg(long)]
        donor: Option<PathBuf>,
        /// External id-to-vector feature file.
        #[arg(long)]
        external: Option<PathBuf>,
        /// Directory for results.csv, box plots and the cell cache.
        #[arg(long)]
        out_dir: PathBuf,
        /// Reuses cached cells.
        #[arg(long)]
        resume: bool,
        /// Task name; defaults to the corpus file stem.
        #[arg(long)]
        task: Option<String>,
    },
    /// Embeds representations in two dimensions and plots an overlay.
    Tsne {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Representation CSV written by `extract`.
        #[arg(long)]
        representations: PathBuf,
        /// Defaults to min(100, 5% of the points).
        #[arg(long)]
        perplexity: Option<f64>,
        #[arg(long, value_enum, default_value = "halogen-metal")]
        overlay: OverlayArg,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
        /// Also writes the coordinates as `id,x,y`.
        #[arg(long)]
        coords: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(match e {
                Error::Parameter(_) | Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let table = ElementPropertyTable::bundled();
    match cli.command {
        Command::ToyCorpus { n, out } => {
            let corpus = toy_corpus(n, cli.seed.unwrap_or(0), table)?;
            write_jsonl(&out, &corpus)
        }
        Command::Featurize { corpus, out } => {
            let cap = site_cap(&corpus, &config);
            let structures = load(&corpus, cap, table)?;
            let tensors = featurize(&structures, cap, table)?;
            let mut w = std::io::BufWriter::new(fs::File::create(&out)?);
            for t in &tensors {
                serde_json::to_writer(&mut w, t)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            println!("featurized {} structures", tensors.len());
            Ok(())
        }
        Command::Pretrain {
            corpus,
            out_dir,
            max_epochs,
        } => {
            if let Some(seed) = cli.seed {
                config.model.train.seed = seed;
            }
            if let Some(e) = max_epochs {
                config.model.train.max_epochs = e;
            }
            config.model.train.site_cap = site_cap(&corpus, &config);
            config.model.validate()?;
            let structures = load(&corpus, config.model.train.site_cap, table)?;
            let ids = ids_of(&structures);
            let (train_ids, test_ids) = split_train_test(&ids, config.split_seed);
            let train: Vec<CrystalStructure> = select(&structures, &train_ids);
            let tensors = featurize(&train, config.model.train.site_cap, table)?;
            fs::create_dir_all(&out_dir)?;
            let outputs = PretrainOutputs {
                checkpoint: Some(out_dir.join("checkpoint.json")),
                log: Some(out_dir.join("training_log.jsonl")),
                curves_csv: Some(out_dir.join("curves.csv")),
                curves_png: Some(out_dir.join("curves.png")),
            };
            let outcome = pretrain(&train_ids, &tensors, &config.model, table, &outputs)?;
            ensure_disjoint(&outcome.checkpoint.trained_on, &test_ids, "pretraining")?;
            fs::write(
                out_dir.join("split.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "split_seed": config.split_seed,
                    "train_ids": train_ids,
                    "test_ids": test_ids,
                }))?,
            )?;
            fs::write(out_dir.join("config.toml"), config.to_toml())?;
            println!(
                "checkpoint {} after {} epochs (best {}), sha256 {}",
                out_dir.join("checkpoint.json").display(),
                outcome.checkpoint.epochs_completed,
                outcome.best_epoch,
                outcome.checkpoint.digest()
            );
            Ok(())
        }
        Command::Extract {
            corpus,
            checkpoint,
            out,
        } => {
            let checkpoint = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            if let Some(ck) = &checkpoint {
                config.model = ck.config.clone();
            }
            let cap = site_cap(&corpus, &config);
            let structures = load(&corpus, cap, table)?;
            let ids = ids_of(&structures);
            let tensors = featurize(&structures, cap, table)?;
            let refs: Vec<&BondTensor> = tensors.iter().collect();
            let budget = config.benchmark.extract_budget;
            let reps = match &checkpoint {
                Some(ck) => extract_trained(ck, &ids, &refs, budget)?,
                None => {
                    let (train_ids, _) = split_train_test(&ids, config.split_seed);
                    let train: Vec<BondTensor> = select_tensors(&ids, &tensors, &train_ids);
                    let seed = cli.seed.unwrap_or(config.benchmark.untrained_seed);
                    extract_untrained(
                        &config.model,
                        seed,
                        &FeatureScaler::fit(&train),
                        &ids,
                        &refs,
                        budget,
                    )?
                }
            };
            reps.write_csv(&out)?;
            println!(
                "wrote {} {} representations",
                reps.ids.len(),
                reps.source.name()
            );
            Ok(())
        }
        Command::Probe {
            corpus,
            representations,
            kind,
            n_labels,
        } => {
            let cap = site_cap(&corpus, &config);
            let structures = load(&corpus, cap, table)?;
            let (ids, labels) = labels_of(&structures)?;
            let reps = RepresentationMatrix::read_csv(
                &representations,
                RepresentationSource::ExternalBaseline,
                false,
            )?;
            let seed = cli.seed.unwrap_or(0);
            let (train_ids, test_ids) = split_train_test(&ids, config.split_seed);
            let visible = mask_labels(
                &train_ids,
                n_labels,
                mask_seed(config.split_seed, n_labels, seed),
            )?
            .visible_label_ids;
            ensure_disjoint(&visible, &test_ids, "probe")?;
            let kind = match kind {
                ProbeArg::Linear => ProbeKind::Linear,
                ProbeArg::Mlp64 => ProbeKind::Mlp64,
            };
            let (mae, rank_deficient) = fit_and_score(
                kind,
                &reps.rows(&visible)?,
                &pick_labels(&labels, &visible),
                &reps.rows(&test_ids)?,
                &pick_labels(&labels, &test_ids),
                &config.benchmark.probe,
                seed,
            )?;
            if rank_deficient {
                log::warn!("linear fit was rank deficient; the minimum-norm solution was used");
            }
            println!("{RESULTS_HEADER}");
            let method = match kind {
                ProbeKind::Linear => "linear",
                ProbeKind::Mlp64 => "mlp64",
            };
            println!(
                "{},{n_labels},{method},{seed},{mae:?}",
                task_name(&corpus, &structures, None)
            );
            Ok(())
        }
        Command::Transfer {
            corpus,
            init,
            checkpoint,
            n_labels,
            save,
        } => {
            let init = match init {
                InitArg::Random => TransferInit::Random,
                InitArg::DimCheckpoint => TransferInit::DimCheckpoint,
                InitArg::DonorSupervised => TransferInit::DonorSupervised,
            };
            let checkpoint = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            if let Some(ck) = &checkpoint {
                config.model = ck.config.clone();
            }
            let cap = site_cap(&corpus, &config);
            let structures = load(&corpus, cap, table)?;
            let (ids, labels) = labels_of(&structures)?;
            let tensors = featurize(&structures, cap, table)?;
            let seed = cli.seed.unwrap_or(0);
            let (train_ids, test_ids) = split_train_test(&ids, config.split_seed);
            if let Some(ck) = &checkpoint {
                ensure_disjoint(&ck.trained_on, &test_ids, "checkpoint")?;
            }
            let visible = mask_labels(
                &train_ids,
                n_labels,
                mask_seed(config.split_seed, n_labels, seed),
            )?
            .visible_label_ids;
            ensure_disjoint(&visible, &test_ids, "transfer")?;
            let fallback = FeatureScaler::fit(&select_tensors(&ids, &tensors, &train_ids));
            let mut model = SupervisedModel::initialize(
                init,
                &config.model.encoder,
                checkpoint.as_ref(),
                fallback,
                seed,
            )?;
            let fit = select_tensors(&ids, &tensors, &visible);
            let fit_refs: Vec<&BondTensor> = fit.iter().collect();
            fine_tune(
                &mut model,
                &fit_refs,
                &pick_labels(&labels, &visible),
                &config.benchmark.fine_tune,
                seed,
            )?;
            let test = select_tensors(&ids, &tensors, &test_ids);
            let test_refs: Vec<&BondTensor> = test.iter().collect();
            let pred = model.predict(&test_refs, config.benchmark.fine_tune.batch_budget)?;
            let mae = mean_absolute_error(&pred, &pick_labels(&labels, &test_ids));
            if let Some(path) = save {
                model
                    .checkpoint(&config.model, seed, &visible)
                    .save(&path)?;
            }
            println!("{RESULTS_HEADER}");
            println!(
                "{},{n_labels},{},{seed},{mae:?}",
                task_name(&corpus, &structures, None),
                Method::Transfer(init)
            );
            Ok(())
        }
        Command::Benchmark {
            corpus,
            checkpoint,
            donor,
            external,
            out_dir,
            resume,
            task,
        } => {
            if let Some(seed) = cli.seed {
                config.split_seed = seed;
            }
            config.benchmark.split_seed = config.split_seed;
            let dim_checkpoint = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let donor_checkpoint = donor.as_deref().map(load_checkpoint).transpose()?;
            if let Some(ck) = &dim_checkpoint {
                config.model = ck.config.clone();
            }
            let external = external
                .as_deref()
                .map(|p| {
                    RepresentationMatrix::read_csv(p, RepresentationSource::ExternalBaseline, false)
                })
                .transpose()?;
            let cap = site_cap(&corpus, &config);
            let structures = load(&corpus, cap, table)?;
            let (ids, labels) = labels_of(&structures)?;
            let tensors = featurize(&structures, cap, table)?;
            let task = Task {
                name: task_name(&corpus, &structures, task),
                labels: ids.iter().map(|id| labels[id]).collect(),
                ids,
                tensors,
            };
            let inputs = BenchmarkInputs {
                dim_checkpoint,
                donor_checkpoint,
                external,
                model_config: config.model.clone(),
            };
            let report = run_benchmark(&task, &config.benchmark, &inputs, Some(&out_dir), resume)?;
            println!(
                "{} cells ({} computed, {} cached); results in {}",
                report.results.len(),
                report.computed,
                report.cached,
                out_dir.join("results.csv").display()
            );
            Ok(())
        }
        Command::Tsne {
            corpus,
            representations,
            perplexity,
            overlay,
            out,
            coords,
        } => {
            if let Some(seed) = cli.seed {
                config.tsne.seed = seed;
            }
            if perplexity.is_some() {
                config.tsne.perplexity = perplexity;
            }
            let cap = site_cap(&corpus, &config);
            let structures = load(&corpus, cap, table)?;
            let reps = RepresentationMatrix::read_csv(
                &representations,
                RepresentationSource::ExternalBaseline,
                false,
            )?;
            let by_id: BTreeMap<&str, &CrystalStructure> =
                structures.iter().map(|s| (s.id.as_str(), s)).collect();
            let ordered: Vec<&CrystalStructure> = reps
                .ids
                .iter()
                .map(|id| {
                    by_id.get(id.as_str()).copied().ok_or_else(|| {
                        Error::Config(format!("no structure for representation {id}"))
                    })
                })
                .collect::<Result<_>>()?;
            let overlay = match overlay {
                OverlayArg::HalogenMetal => {
                    let species: Vec<Vec<String>> =
                        ordered.iter().map(|s| s.species.clone()).collect();
                    Overlay::HalogenMetal(overlay_halogen_metal(&species, table))
                }
                OverlayArg::Property => Overlay::Property(
                    ordered
                        .iter()
                        .map(|s| {
                            s.label.ok_or_else(|| {
                                Error::Config(format!("structure {} has no label", s.id))
                            })
                        })
                        .collect::<Result<_>>()?,
                ),
            };
            let emb = tsne_embed(&reps.ids, &reps.x, &config.tsne)?;
            plot_embedding(&emb, &overlay, &out)?;
            if let Some(path) = coords {
                let mut w = std::io::BufWriter::new(fs::File::create(path)?);
                writeln!(w, "id,x,y")?;
                for (id, c) in emb.ids.iter().zip(&emb.coords) {
                    writeln!(w, "{id},{:?},{:?}", c[0], c[1])?;
                }
                w.flush()?;
            }
            println!(
                "embedded {} points at perplexity {}",
                emb.ids.len(),
                emb.perplexity
            );
            Ok(())
        }
    }
}

fn site_cap(corpus: &CorpusArgs, config: &RunConfig) -> usize {
    corpus.site_cap.unwrap_or(config.model.train.site_cap)
}

fn load(
    corpus: &CorpusArgs,
    site_cap: usize,
    table: &ElementPropertyTable,
) -> Result<Vec<CrystalStructure>> {
    let format = match corpus.format {
        Some(FormatArg::Jsonl) => CorpusFormat::Jsonl,
        Some(FormatArg::CifDir) => CorpusFormat::CifDir,
        None if corpus.input.is_dir() => CorpusFormat::CifDir,
        None => CorpusFormat::Jsonl,
    };
    let loaded = load_structures(&corpus.input, format, site_cap, table)?;
    if loaded.structures.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no usable structures",
            corpus.input.display()
        )));
    }
    Ok(loaded.structures)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

fn ids_of(structures: &[CrystalStructure]) -> Vec<String> {
    structures.iter().map(|s| s.id.clone()).collect()
}

fn select(structures: &[CrystalStructure], ids: &[String]) -> Vec<CrystalStructure> {
    let by_id: BTreeMap<&str, &CrystalStructure> =
        structures.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter().map(|id| by_id[id.as_str()].clone()).collect()
}

fn select_tensors(ids: &[String], tensors: &[BondTensor], wanted: &[String]) -> Vec<BondTensor> {
    let index: BTreeMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    wanted
        .iter()
        .map(|id| tensors[index[id.as_str()]].clone())
        .collect()
}

fn labels_of(structures: &[CrystalStructure]) -> Result<(Vec<String>, BTreeMap<String, f64>)> {
    let mut labels = BTreeMap::new();
    for s in structures {
        let y = s
            .label
            .ok_or_else(|| Error::Config(format!("structure {} has no label", s.id)))?;
        if labels.insert(s.id.clone(), y).is_some() {
            return Err(Error::Config(format!("duplicate structure id {}", s.id)));
        }
    }
    Ok((ids_of(structures), labels))
}

fn pick_labels(labels: &BTreeMap<String, f64>, ids: &[String]) -> Vec<f64> {
    ids.iter().map(|id| labels[id]).collect()
}

fn task_name(
    corpus: &CorpusArgs,
    structures: &[CrystalStructure],
    given: Option<String>,
) -> String {
    given
        .or_else(|| structures.first().and_then(|s| s.label_name.clone()))
        .or_else(|| {
            corpus
                .input
                .file_stem()
                .and_then(|s| s.to_str())
                .map(str::to_owned)
        })
        .unwrap_or_else(|| "task".into())
}
