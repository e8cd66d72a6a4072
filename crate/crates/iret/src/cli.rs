//! Command-line surface. One binary, eleven subcommands, a shared TOML
//! config file with flag overrides (flags win). Exit codes: 0 success,
//! 1 usage error, 2 data error. Failures print a single machine-parseable
//! line `error:<code>:<message>` to stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::aggregate::{AggregatorKind, Descriptor};
use crate::config::RunConfig;
use crate::data::{load_dataset, parse_ground_truth, synth_generate, SynthSpec};
use crate::encoder::{
    finetune_ap, gradcheck_encoder, read_checkpoint, train_contrastive, write_checkpoint,
    EncoderParams, HeadParams, LossKind, DESC_DIM,
};
use crate::error::{Error, Result};
use crate::eval::{format_report, GroundTruth, RankedList};
use crate::losses::gradcheck_embeddings;
use crate::pipeline::{extract_descriptors, holdout_map, split_holdout};
use crate::retrieval::{build_db, format_ranked_tsv, query_named, DescriptorDB};
use crate::rng;
use crate::whiten::{fit_whitener, postprocess};

#[derive(Parser)]
#[command(
    name = "iret",
    about = "Instance-level image retrieval: train, extract, whiten, search, evaluate",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Knobs shared by most subcommands; every flag overrides the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML config file (flags override its values)
    #[arg(short, long, global = false)]
    config: Option<PathBuf>,
    /// Root random seed
    #[arg(long)]
    seed: Option<u64>,
    /// Aggregator: mac | spoc | gem | rmac | crow
    #[arg(long)]
    aggregator: Option<String>,
    /// GeM exponent p
    #[arg(long)]
    gem_p: Option<f64>,
    /// R-MAC pyramid levels
    #[arg(long)]
    rmac_levels: Option<usize>,
    /// R-MAC region overlap fraction
    #[arg(long)]
    rmac_overlap: Option<f64>,
    /// Whitening output dimension
    #[arg(long)]
    out_dim: Option<usize>,
    /// NT-Xent temperature
    #[arg(long)]
    temperature: Option<f64>,
    /// Quantized AP histogram bins
    #[arg(long)]
    ap_bins: Option<usize>,
    /// Training batch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training steps
    #[arg(long)]
    steps: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            };
        }
        take!(seed);
        take!(aggregator);
        take!(gem_p);
        take!(rmac_levels);
        take!(rmac_overlap);
        take!(out_dim);
        take!(temperature);
        take!(ap_bins);
        take!(batch_size);
        take!(steps);
        take!(lr);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic instance dataset (PPM files + manifest)
    Synth {
        #[command(flatten)]
        common: Overrides,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of instances
        #[arg(long)]
        instances: Option<usize>,
        /// Views per instance
        #[arg(long)]
        views: Option<usize>,
    },
    /// Encode a dataset into a descriptor database
    Extract {
        #[command(flatten)]
        common: Overrides,
        /// Dataset directory (containing manifest.tsv)
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint; omitted = seeded random initialization
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output descriptor database file
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a PCA whitener on a descriptor database, optionally applying it
    Whiten {
        #[command(flatten)]
        common: Overrides,
        /// Input descriptor database
        #[arg(long)]
        desc: PathBuf,
        /// Output whitener file (fit mode)
        #[arg(long, required_unless_present = "use_whitener")]
        out: Option<PathBuf>,
        /// Also write whitened descriptors to this database file
        #[arg(long)]
        apply: Option<PathBuf>,
        /// Apply this existing whitener instead of fitting a new one
        #[arg(long, conflicts_with = "out")]
        use_whitener: Option<PathBuf>,
    },
    /// Validate a descriptor database and rewrite it in canonical id order
    Index {
        /// Input descriptor database
        #[arg(long)]
        desc: PathBuf,
        /// Output descriptor database
        #[arg(long)]
        out: PathBuf,
    },
    /// Run exhaustive cosine retrieval for a set of query descriptors
    Query {
        /// Corpus descriptor database
        #[arg(long)]
        db: PathBuf,
        /// Query descriptor database
        #[arg(long)]
        queries: PathBuf,
        /// Keep only the top k results per query
        #[arg(long)]
        k: Option<usize>,
        /// Output TSV path; omitted = stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score ranked lists against ground truth and print per-query AP + mAP
    Eval {
        /// Ranked-list TSV (query_id, rank, image_id, score)
        #[arg(long)]
        ranked: PathBuf,
        /// Ground-truth directory ({query}_query/_good/_ok/_junk.txt)
        #[arg(long)]
        gt: PathBuf,
    },
    /// Contrastive (NT-Xent) pre-training from a random initialization
    Train {
        #[command(flatten)]
        common: Overrides,
        /// Dataset directory (containing manifest.tsv)
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint file
        #[arg(long)]
        out: PathBuf,
        /// Optional per-step loss trace TSV
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint with the quantized AP loss
    Finetune {
        #[command(flatten)]
        common: Overrides,
        /// Dataset directory (containing manifest.tsv)
        #[arg(long)]
        data: PathBuf,
        /// Input checkpoint
        #[arg(long)]
        model: PathBuf,
        /// Output checkpoint file
        #[arg(long)]
        out: PathBuf,
        /// Optional per-step loss trace TSV
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Finite-difference verification of loss and encoder gradients
    Gradcheck {
        #[command(flatten)]
        common: Overrides,
        /// Embedding-level trials per loss
        #[arg(long, default_value_t = 20)]
        trials: u64,
    },
    /// Sweep all five aggregators on a held-out retrieval split
    AblateAgg {
        #[command(flatten)]
        common: Overrides,
        /// Dataset directory (containing manifest.tsv)
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint; omitted = seeded random initialization
        #[arg(long)]
        model: Option<PathBuf>,
        /// Held-out query views per instance
        #[arg(long, default_value_t = 2)]
        holdout: usize,
    },
    /// Sweep the whitening output dimension on a held-out retrieval split
    AblateDim {
        #[command(flatten)]
        common: Overrides,
        /// Dataset directory (containing manifest.tsv)
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint; omitted = seeded random initialization
        #[arg(long)]
        model: Option<PathBuf>,
        /// Held-out query views per instance
        #[arg(long, default_value_t = 2)]
        holdout: usize,
        /// Comma-separated dimensions to sweep (default: powers of two up
        /// to the descriptor dimension)
        #[arg(long)]
        dims: Option<String>,
    },
}

/// Parse argv and run. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            // clap's rendering lists the valid flags; keep the parseable
            // line first
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("bad arguments");
            eprintln!("error:arg:{first}");
            eprintln!("{e}");
            return 1;
        }
    };
    if let Err(e) = check_threads_env() {
        eprintln!("error:{}:{}", e.code(), e);
        return e.exit_code();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error:{}:{}", e.code(), e);
            e.exit_code()
        }
    }
}

/// `IRET_THREADS` must be a positive integer when set. Execution is
/// sequential; the variable is an upper bound, so any valid value is
/// accepted.
fn check_threads_env() -> Result<()> {
    match std::env::var("IRET_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Error::InvalidArgument(format!(
                "IRET_THREADS must be a positive integer, got '{v}'"
            ))),
        },
        Err(_) => Ok(()),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            common,
            out,
            instances,
            views,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(k) = instances {
                cfg.instances = k;
            }
            if let Some(v) = views {
                cfg.views = v;
            }
            cfg.validate()?;
            let spec = SynthSpec {
                instances: cfg.instances,
                views: cfg.views,
                seed: cfg.seed,
                ..Default::default()
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let manifest = synth_generate(&spec, &out)?;
            println!("wrote {} images to {}", manifest.len(), out.display());
            Ok(())
        }
        Command::Extract {
            common,
            data,
            model,
            out,
        } => {
            let cfg = common.resolve()?;
            let agg = cfg.aggregator_config()?;
            let (params, _) = load_params(model.as_deref(), cfg.seed)?;
            let dataset = load_dataset(&data)?;
            let entries = extract_descriptors(&params, &agg, &dataset)?;
            let db = build_db(&entries)?;
            db.write(&out)?;
            println!("wrote {} descriptors of dim {}", db.len(), db.dim);
            Ok(())
        }
        Command::Whiten {
            common,
            desc,
            out,
            apply,
            use_whitener,
        } => {
            let cfg = common.resolve()?;
            let db = DescriptorDB::read(&desc)?;
            let descriptors: Vec<Descriptor> = (0..db.len())
                .map(|i| Descriptor {
                    values: db.row(i).to_vec(),
                    normalized: true,
                })
                .collect();
            let w = match use_whitener {
                Some(path) => {
                    let w = crate::whiten::Whitener::read(&path)?;
                    println!("loaded whitener {} -> {}", w.in_dim, w.out_dim);
                    w
                }
                None => {
                    let w = fit_whitener(&descriptors, cfg.out_dim)?;
                    let out = out.expect("clap enforces --out in fit mode");
                    w.write(&out)?;
                    println!("fit whitener {} -> {}", w.in_dim, w.out_dim);
                    w
                }
            };
            if let Some(apply_path) = apply {
                let entries: Vec<(String, Descriptor)> = db
                    .ids
                    .iter()
                    .zip(&descriptors)
                    .map(|(id, d)| Ok((id.clone(), postprocess(&w, d)?)))
                    .collect::<Result<_>>()?;
                let white_db = build_db(&entries)?;
                white_db.write(&apply_path)?;
                println!("wrote {} whitened descriptors", white_db.len());
            }
            Ok(())
        }
        Command::Index { desc, out } => {
            let db = DescriptorDB::read(&desc)?;
            let mut entries: Vec<(String, Descriptor)> = db
                .ids
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    (
                        id.clone(),
                        Descriptor {
                            values: db.row(i).to_vec(),
                            normalized: true,
                        },
                    )
                })
                .collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let indexed = build_db(&entries)?;
            indexed.write(&out)?;
            println!("indexed {} descriptors", indexed.len());
            Ok(())
        }
        Command::Query {
            db,
            queries,
            k,
            out,
        } => {
            let corpus = DescriptorDB::read(&db)?;
            let qdb = DescriptorDB::read(&queries)?;
            let mut lists = Vec::with_capacity(qdb.len());
            for i in 0..qdb.len() {
                let q = Descriptor {
                    values: qdb.row(i).to_vec(),
                    normalized: true,
                };
                lists.push(query_named(&corpus, &q, k, &qdb.ids[i])?);
            }
            let tsv = format_ranked_tsv(&lists);
            match out {
                Some(path) => std::fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?,
                None => print!("{tsv}"),
            }
            Ok(())
        }
        Command::Eval { ranked, gt } => {
            let lists = read_ranked_tsv(&ranked)?;
            let mut pairs: Vec<(RankedList, GroundTruth)> = Vec::with_capacity(lists.len());
            for list in lists {
                let (truth, _stem) = parse_ground_truth(&gt, &list.query_id)?;
                pairs.push((list, truth));
            }
            print!("{}", format_report(&pairs)?);
            Ok(())
        }
        Command::Train {
            common,
            data,
            out,
            trace,
        } => {
            let cfg = common.resolve()?;
            let train_cfg = cfg.train_config()?;
            let dataset = load_dataset(&data)?;
            let (params, head, losses) = train_contrastive(&train_cfg, &dataset)?;
            write_checkpoint(&out, &params, &head)?;
            if let Some(tpath) = trace {
                write_trace(&tpath, &losses)?;
            }
            println!(
                "trained {} steps, final loss {:.6}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Finetune {
            common,
            data,
            model,
            out,
            trace,
        } => {
            let cfg = common.resolve()?;
            let train_cfg = cfg.train_config()?;
            let dataset = load_dataset(&data)?;
            let (params, head) = read_checkpoint(&model)?;
            let (params, losses) = finetune_ap(&train_cfg, &dataset, &params)?;
            write_checkpoint(&out, &params, &head)?;
            if let Some(tpath) = trace {
                write_trace(&tpath, &losses)?;
            }
            println!(
                "fine-tuned {} steps, final loss {:.6}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Gradcheck { common, trials } => {
            let cfg = common.resolve()?;
            let mut max_err = 0.0f64;
            for t in 0..trials {
                let s = cfg.seed.wrapping_add(t);
                max_err = max_err.max(gradcheck_embeddings(s, false, cfg.ap_bins, cfg.temperature)?);
                max_err = max_err.max(gradcheck_embeddings(s, true, cfg.ap_bins, cfg.temperature)?);
            }
            max_err = max_err.max(gradcheck_encoder(
                cfg.seed,
                LossKind::NtXent {
                    temperature: cfg.temperature,
                },
            )?);
            max_err = max_err.max(gradcheck_encoder(
                cfg.seed.wrapping_add(1),
                LossKind::QuantizedAp { bins: cfg.ap_bins },
            )?);
            println!("max_rel_err\t{max_err:.3e}");
            if max_err > 1e-3 {
                return Err(Error::Degenerate(format!(
                    "gradient check failed: max relative error {max_err:.3e}"
                )));
            }
            Ok(())
        }
        Command::AblateAgg {
            common,
            data,
            model,
            holdout,
        } => {
            let cfg = common.resolve()?;
            let (params, _) = load_params(model.as_deref(), cfg.seed)?;
            let dataset = load_dataset(&data)?;
            let split = split_holdout(&dataset, holdout)?;
            println!("aggregator\tmAP");
            for kind in AggregatorKind::ALL {
                let mut agg = cfg.aggregator_config()?;
                agg.kind = kind;
                let m = holdout_map(&params, &agg, &split, cfg.out_dim)?;
                println!("{}\t{m:.6}", kind.name());
            }
            Ok(())
        }
        Command::AblateDim {
            common,
            data,
            model,
            holdout,
            dims,
        } => {
            let cfg = common.resolve()?;
            let agg = cfg.aggregator_config()?;
            let (params, _) = load_params(model.as_deref(), cfg.seed)?;
            let dataset = load_dataset(&data)?;
            let split = split_holdout(&dataset, holdout)?;
            let sweep = resolve_dims(dims.as_deref(), DESC_DIM)?;
            println!("out_dim\tmAP");
            for d in sweep {
                let m = holdout_map(&params, &agg, &split, d)?;
                println!("{d}\t{m:.6}");
            }
            Ok(())
        }
    }
}

/// Read a checkpoint, or initialize fresh parameters from the seed's
/// "init" stream when no checkpoint is given.
fn load_params(model: Option<&Path>, seed: u64) -> Result<(EncoderParams, HeadParams)> {
    match model {
        Some(path) => read_checkpoint(path),
        None => {
            let mut r = rng::stream(seed, "init");
            Ok((EncoderParams::init(&mut r), HeadParams::init(&mut r)))
        }
    }
}

/// The classical dimension sweep targets 128..4096; dimensions above the
/// descriptor size are dropped, and if none survive the sweep falls back
/// to powers of two up to the descriptor dimension.
fn resolve_dims(dims: Option<&str>, max_dim: usize) -> Result<Vec<usize>> {
    if let Some(text) = dims {
        let mut out = Vec::new();
        for part in text.split(',') {
            let d: usize = part
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad dimension '{part}'")))?;
            if d == 0 || d > max_dim {
                return Err(Error::InvalidArgument(format!(
                    "dimension {d} outside 1..={max_dim}"
                )));
            }
            out.push(d);
        }
        if out.is_empty() {
            return Err(Error::InvalidArgument("empty dimension list".into()));
        }
        return Ok(out);
    }
    let classical: Vec<usize> = [128, 256, 512, 1024, 2048, 4096]
        .into_iter()
        .filter(|d| *d <= max_dim)
        .collect();
    if !classical.is_empty() {
        return Ok(classical);
    }
    let mut out = Vec::new();
    let mut d = 2;
    while d <= max_dim {
        out.push(d);
        d *= 2;
    }
    Ok(out)
}

fn write_trace(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{}\t{l:.6}\n", i + 1));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parse a ranked-list TSV back into per-query lists. Rows for one query
/// must be contiguous and rank-ordered from 1.
fn read_ranked_tsv(path: &Path) -> Result<Vec<RankedList>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lists: Vec<RankedList> = Vec::new();
    let mut current: Option<(String, Vec<(String, f64)>)> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::malformed(
                path,
                format!("line {}: expected 4 tab-separated fields", lineno + 1),
            ));
        }
        let qid = fields[0];
        let rank: usize = fields[1]
            .parse()
            .map_err(|_| Error::malformed(path, format!("line {}: bad rank", lineno + 1)))?;
        let score: f64 = fields[3]
            .parse()
            .map_err(|_| Error::malformed(path, format!("line {}: bad score", lineno + 1)))?;
        match &mut current {
            Some((id, entries)) if id == qid => {
                if rank != entries.len() + 1 {
                    return Err(Error::malformed(
                        path,
                        format!("line {}: rank {} out of sequence", lineno + 1, rank),
                    ));
                }
                entries.push((fields[2].to_string(), score));
            }
            _ => {
                if let Some((id, entries)) = current.take() {
                    lists.push(RankedList::parsed(id, entries)?);
                }
                if rank != 1 {
                    return Err(Error::malformed(
                        path,
                        format!("line {}: query must start at rank 1", lineno + 1),
                    ));
                }
                current = Some((qid.to_string(), vec![(fields[2].to_string(), score)]));
            }
        }
    }
    if let Some((id, entries)) = current.take() {
        lists.push(RankedList::parsed(id, entries)?);
    }
    if lists.is_empty() {
        return Err(Error::malformed(path, "no ranked entries"));
    }
    Ok(lists)
}
