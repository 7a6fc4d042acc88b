//! Command-line front end for the `mposhare` library.
//!
//! Every subcommand writes its artifacts under an output directory (the
//! `--out` flag, else `$MPOSHARE_OUT_DIR`, else the working directory) and
//! prints its tabular or JSON result on stdout. Diagnostics go to stderr.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mposhare::init::{init_from_donor, scaled_xavier_init, Extension};
use mposhare::model::{ModelConfig, ToyTransformer};
use mposhare::mpo::{balanced_plan, mpo_decompose, mpo_reconstruct, param_report};
use mposhare::persist::{
    load_donor, load_matrix, load_model, load_mpo, loss_curve_csv, report_csv, save_donor, save_matrix,
    save_model, save_mpo, sweep_csv, write_atomic, ReportRow,
};
use mposhare::shared::SharingMode;
use mposhare::tensor::FactorPlan;
use mposhare::stability::{depth_sweep, transformer_depth_sweep, ScalarSweepConfig, Scheme, TransformerSweepConfig};
use mposhare::train::{
    convergence_compare, donor_config, make_toy_corpus, train, train_donor, ToyCorpus, TrainConfig,
};
use mposhare::{Error, Result};

pub const OUT_DIR_ENV: &str = "MPOSHARE_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "mposhare", version, about = "MPO weight sharing experiments on toy transformers")]
struct Cli {
    /// Output directory; defaults to $MPOSHARE_OUT_DIR or the working directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Decompose a stored matrix into an MPO and print its parameter report.
    Decompose {
        matrix: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        bond_cap: Option<usize>,
        /// Explicit row factors (big-endian); the balanced plan is used when absent.
        #[arg(long, value_delimiter = ',', requires = "col_factors")]
        row_factors: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', requires = "row_factors")]
        col_factors: Option<Vec<usize>>,
    },
    /// Contract an MPO back into a matrix, optionally comparing to a reference.
    Reconstruct {
        mpo: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Parameter breakdown of a model checkpoint under a sharing mode.
    Report {
        checkpoint: PathBuf,
        #[arg(long, default_value = "shared", value_parser = parse_mode)]
        sharing_mode: SharingMode,
    },
    /// Train a fully shared dense donor model.
    TrainDonor {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 2)]
        donor_depth: usize,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Initialize a model from a donor or from scaled Xavier.
    Init {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, conflicts_with = "scratch", required_unless_present = "scratch")]
        from_donor: Option<PathBuf>,
        #[arg(long)]
        scratch: bool,
        #[arg(long, default_value = "scaled-donor", value_parser = parse_extension)]
        extend: Extension,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Continue training a model checkpoint.
    Train {
        checkpoint: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train from scratch and from a donor on identical batches.
    CompareInit {
        #[command(flatten)]
        model: ModelArgs,
        /// Donor checkpoint; trained on the fly when absent.
        #[arg(long)]
        from_donor: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        donor_depth: usize,
        #[arg(long, default_value = "scaled-donor", value_parser = parse_extension)]
        extend: Extension,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Depth sweep of the one-step output change.
    Sweep {
        #[arg(long, conflicts_with = "transformer", required_unless_present = "transformer")]
        scalar: bool,
        #[arg(long)]
        transformer: bool,
        #[arg(long, value_delimiter = ',', required = true)]
        depths: Vec<usize>,
        #[arg(long, value_parser = parse_scheme)]
        scheme: Scheme,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the full model and ablated variants; report final loss and size.
    Ablate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        no_adapter: bool,
        #[arg(long)]
        no_sharing: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 5)]
    mpo_order: usize,
    #[arg(long, default_value_t = 8)]
    adapter_rank: usize,
    #[arg(long, default_value_t = 1)]
    groups: usize,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::toy(self.layers, self.hidden, self.heads, self.vocab, self.max_seq_len);
        c.mpo_order = self.mpo_order;
        c.adapter_rank = self.adapter_rank;
        c.num_groups = self.groups;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 4)]
    seq_len: usize,
    #[arg(long, default_value_t = 0.8)]
    lr: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    #[arg(long, default_value_t = 0.5)]
    clip: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    corpus_sequences: usize,
    #[arg(long, default_value_t = 64)]
    corpus_len: usize,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            lr: self.lr,
            seed: self.seed,
            clip: (self.clip > 0.0).then_some(self.clip),
        }
    }

    fn corpus(&self, vocab: usize) -> Result<ToyCorpus> {
        make_toy_corpus(self.seed, self.corpus_sequences, self.corpus_len, vocab)
    }
}

fn parse_mode(s: &str) -> std::result::Result<SharingMode, String> {
    SharingMode::parse(s).ok_or_else(|| format!("expected shared, unshared or all-shared, got {s:?}"))
}

fn parse_extension(s: &str) -> std::result::Result<Extension, String> {
    Extension::parse(s).ok_or_else(|| format!("expected scaled-donor or scaled-random, got {s:?}"))
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    Scheme::parse(s).ok_or_else(|| format!("expected unit or scaled, got {s:?}"))
}

// ── dispatch ───────────────────────────────────────────────────────

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn out_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn json(value: impl serde::Serialize) -> Result<String> {
    serde_json::to_string_pretty(&value).map_err(|e| Error::InvalidConfig(format!("serializing output: {e}")))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())?;
    if !text.ends_with('\n') {
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn row(experiment: &str, key: &str, value: f64, units: &str) -> ReportRow {
    ReportRow {
        experiment: experiment.into(),
        key: key.into(),
        value,
        units: units.into(),
    }
}

fn crossing(c: Option<usize>) -> f64 {
    c.map_or(-1.0, |s| s as f64)
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let dir = out_dir(cli.out)?;
    match cli.command {
        Command::Decompose { matrix, n, bond_cap, row_factors, col_factors } => {
            let w = load_matrix(&matrix)?;
            let plan = match (row_factors, col_factors) {
                (Some(r), Some(c)) => {
                    if r.len() != n || c.len() != n {
                        return Err(Error::InvalidConfig(format!("factor lists {r:?} / {c:?} for n = {n}")));
                    }
                    FactorPlan::new(r, c)?
                }
                _ => balanced_plan(w.rows(), w.cols(), n),
            };
            let set = mpo_decompose(&w, &plan, bond_cap)?;
            save_mpo(&set, &dir.join("mpo"))?;
            emit(out, &json(param_report(&set))?)
        }
        Command::Reconstruct { mpo, reference } => {
            let w = mpo_reconstruct(&load_mpo(&mpo)?)?;
            save_matrix(&w, &dir.join("matrix"))?;
            let mut summary = serde_json::json!({ "rows": w.rows(), "cols": w.cols() });
            if let Some(r) = reference {
                let r = load_matrix(&r)?;
                let diff = w.sub(&r)?.frobenius_norm();
                summary["abs_error"] = diff.into();
                summary["rel_error"] = (diff / r.frobenius_norm()).into();
            }
            emit(out, &json(summary)?)
        }
        Command::Report { checkpoint, sharing_mode } => {
            let model = load_model(&checkpoint)?;
            let breakdown = model.param_breakdown();
            let summary = serde_json::json!({
                "mode": sharing_mode,
                "total": breakdown.total(sharing_mode),
                "breakdown": breakdown,
            });
            emit(out, &json(summary)?)
        }
        Command::TrainDonor { model, donor_depth, train: t } => {
            let target = model.config()?;
            let corpus = t.corpus(target.vocab_size)?;
            let (donor, curve) = train_donor(donor_config(&target, donor_depth), &corpus, &t.config(), t.seed)?;
            save_donor(&donor, &dir.join("donor"))?;
            emit(out, &loss_curve_csv(&curve))
        }
        Command::Init { model, from_donor, extend, seed, .. } => {
            let config = model.config()?;
            let m = match from_donor {
                Some(path) => init_from_donor(&load_donor(&path)?, config, extend, seed)?,
                None => scaled_xavier_init(config, seed, false)?,
            };
            save_model(&m, &dir.join("model"))?;
            emit(out, &format!("{} parameters written to {}", m.num_params(), dir.join("model").display()))
        }
        Command::Train { checkpoint, train: t } => {
            let mut model = load_model(&checkpoint)?;
            let corpus = t.corpus(model.config().vocab_size)?;
            let curve = train(&mut model, &corpus, &t.config())?;
            save_model(&model, &dir.join("trained"))?;
            emit(out, &loss_curve_csv(&curve))
        }
        Command::CompareInit { model, from_donor, donor_depth, extend, train: t } => {
            let target = model.config()?;
            let corpus = t.corpus(target.vocab_size)?;
            let tcfg = t.config();
            let donor = match from_donor {
                Some(p) => load_donor(&p)?,
                None => {
                    let donor_cfg = TrainConfig { seed: t.seed + 100, ..tcfg.clone() };
                    train_donor(donor_config(&target, donor_depth), &corpus, &donor_cfg, t.seed + 7)?.0
                }
            };
            let cmp = convergence_compare(&target, &donor, extend, &corpus, &tcfg, t.seed)?;
            write_atomic(&dir.join("scratch_loss.csv"), &loss_curve_csv(&cmp.scratch))?;
            write_atomic(&dir.join("donor_loss.csv"), &loss_curve_csv(&cmp.donor))?;
            let rows = [
                row("compare-init", "threshold", cmp.threshold, "nats"),
                row("compare-init", "scratch_crossing", crossing(cmp.scratch_crossing), "step"),
                row("compare-init", "donor_crossing", crossing(cmp.donor_crossing), "step"),
                row("compare-init", "donor_not_slower", f64::from(u8::from(cmp.donor_not_slower())), "bool"),
            ];
            emit(out, &report_csv(&rows)?)
        }
        Command::Sweep { scalar, depths, scheme, lr, seed, .. } => {
            let result = if scalar {
                depth_sweep(&depths, scheme, &ScalarSweepConfig { lr, ..ScalarSweepConfig::default() })?
            } else {
                let cfg = TransformerSweepConfig { lr, seed, ..TransformerSweepConfig::default() };
                transformer_depth_sweep(&depths, scheme, &cfg)?
            };
            let csv = sweep_csv(&result);
            write_atomic(&dir.join("sweep.csv"), &csv)?;
            emit(out, &csv)
        }
        Command::Ablate { model, no_adapter, no_sharing, train: t } => {
            let base = model.config()?;
            let mut variants = vec![("full", base.clone())];
            // with no flag given, run every variant
            let all = !no_adapter && !no_sharing;
            if no_adapter || all {
                variants.push(("no-adapter", ModelConfig { use_adapters: false, ..base.clone() }));
            }
            if no_sharing || all {
                variants.push(("no-sharing", ModelConfig { use_sharing: false, ..base.clone() }));
            }
            let corpus = t.corpus(base.vocab_size)?;
            let mut rows = Vec::new();
            for (name, config) in variants {
                let mut m: ToyTransformer = scaled_xavier_init(config, t.seed, false)?;
                let curve = train(&mut m, &corpus, &t.config())?;
                write_atomic(&dir.join(format!("ablate_{name}.csv")), &loss_curve_csv(&curve))?;
                rows.push(row(name, "final_loss", curve.mean_last(20), "nats"));
                rows.push(row(name, "params", m.num_params() as f64, "count"));
            }
            emit(out, &report_csv(&rows)?)
        }
    }
}
