//! Command-line interface: `synth`, `train`, `eval`, `gradcheck`,
//! `attn-dump` and `sweep`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_dataset, Split};
use crate::diagnostics::{attention_dump, model_gradcheck, GradCheckOptions, Precision};
use crate::error::{Error, Result};
use crate::numeric::Stencil;
use crate::retrieval::ScoringMode;
use crate::train::{train, Embedded, RunDir};

#[derive(Debug, Parser)]
#[command(name = "safa", version, about = "Part-aligned text-to-image person retrieval")]
pub struct Cli {
    #[command(flatten)]
    pub shared: Shared,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Shared {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory: the dataset for `synth`, the run for the others.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    Synth,
    /// Train a model and evaluate it on the held-out split.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Rank-1/5/10 of a trained run.
    Eval {
        /// Run directory; defaults to `out`.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        mode: Option<ScoringMode>,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Finite-difference check of the full objective on a tiny model.
    Gradcheck {
        /// Run in 64-bit with the stricter threshold.
        #[arg(long)]
        f64: bool,
        /// Flip the sign of one gradient entry; the check must then fail.
        #[arg(long)]
        corrupt: bool,
        #[arg(long, default_value_t = 1e-3)]
        h: f64,
        #[arg(long, value_enum, default_value_t = StencilArg::Central4)]
        stencil: StencilArg,
    },
    /// Write the SAFA attention traces of one manifest entry.
    AttnDump {
        /// Zero-based manifest line.
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Destination; defaults to `<run>/attn/entry<sample>`.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Train and evaluate once per value of K or lambda.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StencilArg {
    Central2,
    Central4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    #[value(name = "K")]
    K,
    #[value(name = "lambda")]
    Lambda,
}

impl clap::ValueEnum for ScoringMode {
    fn value_variants<'a>() -> &'a [Self] {
        &ScoringMode::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

impl clap::ValueEnum for Split {
    fn value_variants<'a>() -> &'a [Self] {
        &[Split::Train, Split::Val, Split::Test]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

impl Shared {
    /// Defaults, then the config file, then `--set`, then `--seed`/`--out`.
    pub fn resolve(&self) -> Result<RunConfig> {
        self.resolve_onto(RunConfig::default())
    }

    /// Same order as [`Shared::resolve`] with `base` in place of the defaults.
    pub fn resolve_onto(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        cfg.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to `out`. Usage errors map to [`Error::Config`].
pub fn run_from<I, S>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run(&cli, out)
}

fn emit(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = cli.shared.resolve()?;
    match &cli.command {
        Command::Synth => {
            let dir = match &cli.shared.out {
                Some(o) => o.clone(),
                None => cfg.data.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
            };
            let manifest = generate_synthetic(&cfg.synth_spec(), &dir)?;
            emit(out, &manifest.path.display().to_string())
        }
        Command::Train { data, resume } => {
            if let Some(d) = data {
                cfg.data = d.clone();
            }
            cfg.validate()?;
            let dataset = load_dataset(&cfg.data, cfg.max_len)?;
            eprintln!(
                "{} images, {} captions, {} identities, vocabulary {}, {} OOV rate {:.4}",
                dataset.images.len(),
                dataset.pairs.len(),
                dataset.num_identities(),
                dataset.vocab.len(),
                cfg.eval_split,
                dataset.oov_rate(cfg.eval_split)
            );
            let dir = RunDir::new(&cfg.out);
            let start = Instant::now();
            let mut sink = Ok(());
            let outcome = train(&cfg, &dataset, Some(&dir), *resume, |line| {
                if sink.is_ok() {
                    sink = emit(out, line);
                }
            })?;
            sink?;
            eprintln!(
                "trained {} epochs, {} steps in {:.1}s",
                outcome.epochs,
                outcome.steps,
                start.elapsed().as_secs_f64()
            );
            let metrics = Embedded::new(&outcome.model, &dataset, cfg.eval_split)?.metrics(cfg.mode)?;
            let json = metrics.to_json();
            fs::write(dir.metrics(cfg.mode), format!("{json}\n")).map_err(|e| Error::io(dir.metrics(cfg.mode), e))?;
            emit(out, &json)
        }
        Command::Eval { run, data, mode, split } => {
            let dir = RunDir::new(run.clone().unwrap_or(cfg.out.clone()));
            let (stored, model, dataset) = dir.open(data.as_deref())?;
            let resolved = cli.shared.resolve_onto(stored.clone())?;
            check_architecture(&resolved, &stored)?;
            let mode = mode.unwrap_or(resolved.mode);
            let split = split.unwrap_or(resolved.eval_split);
            let metrics = Embedded::new(&model, &dataset, split)?.metrics(mode)?;
            let json = metrics.to_json();
            fs::write(dir.metrics(mode), format!("{json}\n")).map_err(|e| Error::io(dir.metrics(mode), e))?;
            emit(out, &json)
        }
        Command::Gradcheck { f64, corrupt, h, stencil } => {
            let precision = if *f64 { Precision::F64 } else { Precision::F32 };
            let mut opts = GradCheckOptions::new(precision, cfg.seed);
            opts.h = *h;
            opts.corrupt = *corrupt;
            opts.stencil = match stencil {
                StencilArg::Central2 => Stencil::Central2,
                StencilArg::Central4 => Stencil::Central4,
            };
            let start = Instant::now();
            let r = model_gradcheck(&opts)?;
            for p in &r.report.params {
                let (i, a, n) = p.worst;
                emit(out, &format!("{:<24} {:.3e} at [{i}] analytic {a:.6e} numeric {n:.6e}", p.name, p.max_rel_error))?;
            }
            let verdict = if r.passed() { "PASS" } else { "FAIL" };
            emit(
                out,
                &format!(
                    "{verdict} max_rel_error={:.3e} threshold={:.0e} precision={} h={} stencil={:?} values={} L={:.6} Lg={:.6} Lp={:.6} Ldiv={:.6} seconds={:.1}",
                    r.report.max_rel_error,
                    r.threshold,
                    if *f64 { "f64" } else { "f32" },
                    opts.h,
                    opts.stencil,
                    r.num_values,
                    r.loss,
                    r.global,
                    r.part,
                    r.diversity,
                    start.elapsed().as_secs_f64()
                ),
            )?;
            if r.passed() {
                Ok(())
            } else {
                Err(Error::Numeric(format!(
                    "gradient check failed: max relative error {:.3e} >= {:.0e}",
                    r.report.max_rel_error, r.threshold
                )))
            }
        }
        Command::AttnDump { sample, run, data, dest } => {
            let dir = RunDir::new(run.clone().unwrap_or(cfg.out.clone()));
            let (_, model, dataset) = dir.open(data.as_deref())?;
            let dump = attention_dump(&model, &dataset, *sample)?;
            let dest = dest.clone().unwrap_or_else(|| dir.root.join("attn").join(format!("entry{sample}")));
            for p in dump.write(&dest)? {
                emit(out, &p.display().to_string())?;
            }
            Ok(())
        }
        Command::Sweep { param, values, data } => {
            if let Some(d) = data {
                cfg.data = d.clone();
            }
            let runs = sweep_configs(&cfg, *param, values)?;
            let dataset = load_dataset(&cfg.data, cfg.max_len)?;
            let mut csv = String::from("value,rank1,rank5,rank10\n");
            emit(out, csv.trim_end())?;
            for (value, run_cfg) in runs {
                let dir = RunDir::new(&run_cfg.out);
                let outcome = train(&run_cfg, &dataset, Some(&dir), false, |_| {})?;
                let emb = Embedded::new(&outcome.model, &dataset, run_cfg.eval_split)?;
                let m = emb.metrics(run_cfg.mode)?;
                let (img_cos, txt_cos) = emb.head_cosine();
                eprintln!("{value}: head cosine image {img_cos:.4} text {txt_cos:.4}");
                let row = format!("{value},{},{},{}", m.rank1, m.rank5, m.rank10);
                emit(out, &row)?;
                csv.push_str(&row);
                csv.push('\n');
            }
            let path = cfg.out.join(format!("sweep_{}.csv", param.as_str()));
            fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
            fs::write(&path, csv).map_err(|e| Error::io(&path, e))
        }
    }
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::K => "K",
            SweepParam::Lambda => "lambda",
        }
    }
}

/// One validated configuration per sweep value, each with its own run
/// directory under `out`. Every value is checked before any training.
pub fn sweep_configs(base: &RunConfig, param: SweepParam, values: &[String]) -> Result<Vec<(String, RunConfig)>> {
    values
        .iter()
        .map(|raw| {
            let v = raw.trim();
            let mut c = base.clone();
            c.set(param.as_str(), v)?;
            c.out = base.out.join(format!("{}_{v}", param.as_str()));
            c.validate()?;
            Ok((v.to_string(), c))
        })
        .collect()
}

/// Keys that shape the checkpoint must not change between training and eval.
fn check_architecture(cli_cfg: &RunConfig, stored: &RunConfig) -> Result<()> {
    let pairs = [
        ("d", cli_cfg.d, stored.d),
        ("K", cli_cfg.k, stored.k),
        ("layers", cli_cfg.layers, stored.layers),
        ("attn_heads", cli_cfg.attn_heads, stored.attn_heads),
        ("patch_size", cli_cfg.patch_size, stored.patch_size),
        ("max_len", cli_cfg.max_len, stored.max_len),
    ];
    for (key, given, trained) in pairs {
        if given != trained {
            return Err(Error::Config(format!(
                "{key} = {given} does not match the checkpoint ({key} = {trained})"
            )));
        }
    }
    Ok(())
}
