//! `lcm`: command-line front end for training, parsing, evaluation and the
//! experiment pipelines.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (unreadable input, bad checkpoint, version mismatch), 3 numeric error.

mod config;

/// `println!` that stays quiet when stdout is a closed pipe (`lcm ... | head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}


use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser as ClapParser, Subcommand};
use lcm_core::autodiff::checkpoint;
use lcm_core::conllu::{gen_synthetic, read_conllu_file, validate_tree, write_conllu_file, Grammar, Treebank};
use lcm_core::eval::{per_relation, report, uas_las, Metrics, NamedScore, PunctPolicy};
use lcm_core::model_io;
use lcm_core::nn::read_word_vectors;
use lcm_core::parser::{ParseTree, Parser};
use lcm_core::pipelines::{grad_check_model, run_pipeline, run_size_ablation, train_parser, CheckModel, PipelineData, PipelineSpec};
use lcm_core::tagger::{self, evaluate_hier, evaluate_tagger, train_hier_morph_tagger, train_tagger_with, HierMorphTagger, Tagger};
use lcm_core::tagschemes::{
    derive_treebank_tags_with, parse_tag_tsv, tagged_sentences, write_tag_tsv, SchemeOptions, TagScheme, TaggedSentence,
};
use lcm_core::{Error, Result};

use config::{PipelineFlags, TrainFlags};

/// Environment variable naming the default parent directory for runs.
const RUN_DIR_ENV: &str = "LCM_RUN_DIR";

#[derive(ClapParser, Debug)]
#[command(name = "lcm", version, about = "Dependency parsing with auxiliary-task pretrained encoders")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config; explicit flags take precedence over its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an auxiliary tag dataset (TSV) derived from a treebank.
    DeriveTags {
        #[arg(long)]
        scheme: TagScheme,
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long)]
        cap_depth: Option<usize>,
        #[arg(long)]
        cap_children: Option<usize>,
    },
    /// Train a sequence tagger for one scheme, or the hierarchical
    /// morphological tagger with `--hier`.
    TrainTagger {
        /// Scheme to learn (ignored with --hier).
        #[arg(long, required_unless_present = "hier")]
        scheme: Option<TagScheme>,
        #[arg(long)]
        hier: bool,
        /// CoNLL-U treebank, or a TSV tag dataset when the name ends in .tsv.
        #[arg(long, value_name = "FILE")]
        train: PathBuf,
        #[arg(long, value_name = "FILE")]
        dev: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long)]
        min_freq: Option<usize>,
        #[command(flatten)]
        train_flags: TrainFlags,
    },
    /// Train the base biaffine parser.
    TrainParser {
        #[arg(long, value_name = "FILE")]
        train: PathBuf,
        #[arg(long, value_name = "FILE")]
        dev: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Pretrained word vectors in text format.
        #[arg(long, value_name = "FILE")]
        vectors: Option<PathBuf>,
        #[command(flatten)]
        train_flags: TrainFlags,
    },
    /// Parse a CoNLL-U file with a trained parser.
    Parse {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Score predicted trees against gold trees.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        gold: PathBuf,
        #[arg(long, value_name = "FILE")]
        pred: PathBuf,
        #[arg(long, default_value = "include")]
        punct: PunctPolicy,
        /// Per-relation table, and scores under both punctuation policies.
        #[arg(long)]
        verbose: bool,
        /// Write the result rows as JSON.
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
    /// Run one experiment variant end to end.
    Pipeline {
        #[command(flatten)]
        pipeline: PipelineFlags,
        #[command(flatten)]
        train_flags: TrainFlags,
        /// Run directory (default: $LCM_RUN_DIR/<variant>-seed<seed>, or runs/...).
        #[arg(long, value_name = "DIR")]
        run_dir: Option<PathBuf>,
    },
    /// One pipeline run per training-set size, on prefixes of the training data.
    SizeAblation {
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[command(flatten)]
        pipeline: PipelineFlags,
        #[command(flatten)]
        train_flags: TrainFlags,
        #[arg(long, value_name = "DIR")]
        run_dir: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of a full model loss.
    GradCheck {
        #[arg(long, default_value = "biaff")]
        model: CheckModel,
        #[arg(long, default_value = "desk")]
        profile: lcm_core::train::Profile,
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write a synthetic case-marked treebank.
    GenSynthetic {
        #[arg(long)]
        n: usize,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Grammar JSON (default: the bundled grammar).
        #[arg(long, value_name = "FILE")]
        grammar: Option<PathBuf>,
    },
    /// Print the kind, format version and parameter table of a checkpoint.
    InspectCheckpoint {
        path: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

/// `<out>.config.json`, next to a trained model.
fn snapshot_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// Tagging data from a treebank or, for `.tsv` files, as-is.
fn tag_data(path: &Path, scheme: TagScheme) -> Result<Vec<TaggedSentence>> {
    if path.extension().is_some_and(|e| e == "tsv") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        return parse_tag_tsv(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())));
    }
    let tb = read_conllu_file(path)?;
    Ok(tagged_sentences(&tb, &lcm_core::tagschemes::derive_treebank_tags(&tb, scheme)?))
}

fn read_optional(path: &Option<PathBuf>) -> Result<Treebank> {
    match path {
        Some(p) => read_conllu_file(p),
        None => Ok(Treebank::default()),
    }
}

fn default_run_dir(name: &str, seed: u64) -> PathBuf {
    let parent = std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    parent.join(format!("{name}-seed{seed}"))
}

fn run(cli: Cli) -> Result<()> {
    let file = config::load(cli.config.as_deref())?;
    match cli.command {
        Command::DeriveTags {
            scheme,
            input,
            out,
            cap_depth,
            cap_children,
        } => {
            let mut opts = SchemeOptions::default();
            opts.cap_depth = cap_depth.unwrap_or(opts.cap_depth);
            opts.cap_children = cap_children.unwrap_or(opts.cap_children);
            let tb = read_conllu_file(&input)?;
            let tags = derive_treebank_tags_with(&tb, scheme, &opts)?;
            write_text(&out, &write_tag_tsv(&tagged_sentences(&tb, &tags)))?;
            log::info!("{} sentences tagged with {scheme}", tb.len());
        }
        Command::TrainTagger {
            scheme,
            hier,
            train,
            dev,
            out,
            min_freq,
            train_flags,
        } => {
            let cfg = config::train_config(&file, &train_flags, cli.seed)?;
            if hier {
                let tb = read_conllu_file(&train)?;
                let dev_tb = read_optional(&dev)?;
                let (model, store, report) = train_hier_morph_tagger(&tb, &dev_tb, &cfg)?;
                model.save(&store, &out)?;
                let acc = evaluate_hier(&model, &store, if dev_tb.is_empty() { &tb } else { &dev_tb })?;
                log::info!("best epoch {}; accuracy NT {:.4} GT {:.4} CT {:.4}", report.best_epoch, acc[0], acc[1], acc[2]);
            } else {
                let scheme = scheme.expect("clap requires --scheme without --hier");
                let data = tag_data(&train, scheme)?;
                let dev_data = match &dev {
                    Some(p) => tag_data(p, scheme)?,
                    None => Vec::new(),
                };
                let mf = min_freq.unwrap_or(scheme.default_min_freq());
                let (model, store, report) = train_tagger_with(&data, &dev_data, scheme, &cfg, mf)?;
                model.save(&store, &out)?;
                let eval_on = if dev_data.is_empty() { &data } else { &dev_data };
                let m = evaluate_tagger(&model, &store, eval_on)?;
                log::info!("best epoch {}; accuracy {:.4}, macro-F1 {:.4}", report.best_epoch, m.accuracy, m.macro_f1);
            }
            write_json(&snapshot_path(&out), &serde_json::json!({ "train": cfg }))?;
        }
        Command::TrainParser {
            train,
            dev,
            out,
            vectors,
            train_flags,
        } => {
            let cfg = config::train_config(&file, &train_flags, cli.seed)?;
            let tb = read_conllu_file(&train)?;
            let dev_tb = read_optional(&dev)?;
            let vectors = vectors.as_ref().map(read_word_vectors).transpose()?;
            let (parser, store, report) = train_parser(&tb, &dev_tb, &cfg, vectors.as_ref(), PunctPolicy::Include)?;
            parser.save(&store, &out)?;
            write_json(&snapshot_path(&out), &serde_json::json!({ "train": cfg }))?;
            log::info!("best dev LAS {:.2} at epoch {}", report.best_score, report.best_epoch);
        }
        Command::Parse { model, input, out } => {
            let (parser, store) = Parser::load(&model)?;
            let tb = read_conllu_file(&input)?;
            let mut parsed = tb.clone();
            for (i, s) in parsed.sentences.iter_mut().enumerate() {
                *s = parser.predict(&store, s)?.apply_to(s);
                validate_tree(s).map_err(|e| Error::Contract(format!("{}: {e}", s.label(i))))?;
            }
            write_conllu_file(&out, &parsed)?;
            log::info!("parsed {} sentences", parsed.len());
        }
        Command::Evaluate {
            gold,
            pred,
            punct,
            verbose,
            json,
        } => {
            let gold_tb = read_conllu_file(&gold)?;
            let pred_tb = read_conllu_file(&pred)?;
            let trees: Vec<ParseTree> = pred_tb
                .sentences
                .iter()
                .map(|s| ParseTree {
                    heads: s.heads(),
                    labels: s.deprels().iter().map(|l| l.to_string()).collect(),
                })
                .collect();
            let mut rows = vec![NamedScore {
                name: format!("punct={}", policy_name(punct)),
                score: uas_las(&gold_tb, &trees, punct)?,
            }];
            let breakdown = if verbose {
                let other = match punct {
                    PunctPolicy::Include => PunctPolicy::Exclude,
                    PunctPolicy::Exclude => PunctPolicy::Include,
                };
                rows.push(NamedScore {
                    name: format!("punct={}", policy_name(other)),
                    score: uas_las(&gold_tb, &trees, other)?,
                });
                Some(per_relation(&gold_tb, &trees, punct)?)
            } else {
                None
            };
            let rep = report(&rows, breakdown.as_ref())?;
            out!("{}", rep.text.trim_end_matches('\n'));
            if let Some(p) = json {
                write_text(&p, &(rep.json + "\n"))?;
            }
        }
        Command::Pipeline {
            pipeline,
            train_flags,
            run_dir,
        } => {
            let cfg = config::train_config(&file, &train_flags, cli.seed)?;
            let spec = config::pipeline_spec(&file, &pipeline)?;
            let data = PipelineData::load(&spec)?;
            let dir = run_dir.unwrap_or_else(|| default_run_dir(spec.variant.name(), cfg.seed));
            let o = run_pipeline(&spec, &data, &cfg, Some(&dir))?;
            print_metrics(&o.metrics);
            log::info!("run directory {}", dir.display());
        }
        Command::SizeAblation {
            sizes,
            pipeline,
            train_flags,
            run_dir,
        } => {
            let cfg = config::train_config(&file, &train_flags, cli.seed)?;
            let spec: PipelineSpec = config::pipeline_spec(&file, &pipeline)?;
            let data = PipelineData::load(&spec)?;
            let dir = run_dir.unwrap_or_else(|| default_run_dir(&format!("size-{}", spec.variant.name()), cfg.seed));
            let rows = run_size_ablation(&spec, &data, &cfg, &sizes, Some(&dir))?;
            for r in rows {
                out!("{:>6}  {:.2} / {:.2}", r.size, r.score.uas, r.score.las);
            }
        }
        Command::GradCheck {
            model,
            profile,
            coords,
            tolerance,
        } => {
            let mut cfg = lcm_core::train::TrainConfig::for_profile(profile);
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            let r = grad_check_model(model, &cfg, coords)?;
            out!("max relative error {:.3e} over {} coordinates", r.max_rel_error, r.coords_checked);
            if let Some((name, i)) = &r.worst {
                out!("worst coordinate {name}[{i}]");
            }
            if !(r.max_rel_error < tolerance) {
                return Err(Error::Numeric(format!(
                    "gradient check failed: {:.3e} ≥ {tolerance:e}",
                    r.max_rel_error
                )));
            }
        }
        Command::GenSynthetic { n, out, grammar } => {
            let g = match grammar {
                Some(p) => Grammar::from_file(p)?,
                None => Grammar::default(),
            };
            let tb = gen_synthetic(cli.seed.unwrap_or(1), n, &g)?;
            write_conllu_file(&out, &tb)?;
        }
        Command::InspectCheckpoint { path } => inspect(&path)?,
    }
    Ok(())
}

fn policy_name(p: PunctPolicy) -> &'static str {
    match p {
        PunctPolicy::Include => "include",
        PunctPolicy::Exclude => "exclude",
    }
}

fn print_metrics(m: &Metrics) {
    out!("{}  UAS {:.2}  LAS {:.2}", m.run_name, m.uas, m.las);
    for (k, v) in &m.extra {
        out!("  {k}: {v}");
    }
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let version = checkpoint::peek_version(&bytes)?;
    let kind = model_io::kind_of(path).unwrap_or_else(|_| "unknown (no sidecar)".to_string());
    out!("kind: {kind}");
    out!("format version: {version}");
    let records = checkpoint::decode::<f64>(&bytes)?;
    let total: usize = records.iter().map(|(_, t)| t.len()).sum();
    for (name, t) in &records {
        out!("  {name:<40} {:?}", t.shape());
    }
    out!("{} tensors, {total} scalars, checksum ok", records.len());
    if kind == tagger::HIER_MODEL_KIND {
        let (m, _) = HierMorphTagger::load(path)?;
        out!("tasks: {:?}", m.spec.tags.iter().map(|v| v.len()).collect::<Vec<_>>());
    } else if kind == tagger::MODEL_KIND {
        let (t, _) = Tagger::load(path)?;
        out!("scheme: {}, {} tags", t.spec.scheme, t.spec.tags.len());
    }
    Ok(())
}
