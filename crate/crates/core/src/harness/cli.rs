use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use super::*;
use crate::decoder::{segmented_inference, IdentitySeparator};
use crate::dsp::{read_wav, write_wav};
use crate::embedding::{build_condition, interpolate, EmbeddingBackend, QueryEmbedding};
use crate::toyclap::load_corpus;

type Real = f32;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Toy,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlanScope {
    /// The benchmark plan file.
    All,
    /// Benchmark clips of the classes seen in zero-shot training.
    Seen,
    /// Benchmark clips of the held-out classes.
    Unseen,
}

#[derive(Parser, Debug)]
#[command(name = "querysep", version, about = "Query-conditioned target sound extraction")]
struct Cli {
    /// Root for relative paths (defaults to $QUERYSEP_WORKSPACE, then `.`).
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    /// TOML run configuration; defaults to the chosen profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    /// Configuration override `section.field=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise the labelled corpus and its benchmark plan.
    SynthData {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pretraining of the query backend.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prompt embeddings of every corpus class.
    CacheEmbeddings {
        #[arg(long)]
        backend: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters and decoder.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backend: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training history.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Store adapters and decoder only.
        #[arg(long)]
        adapters_only: bool,
        /// Leave the held-out classes out of training.
        #[arg(long)]
        zero_shot: bool,
    },
    /// Extract the queried sound from a recording of any length.
    Separate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        backend: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        query_audio: Option<PathBuf>,
        #[arg(long)]
        negative_text: Option<String>,
        #[arg(long)]
        negative_audio: Option<PathBuf>,
        /// Cross-fade between segments, in seconds.
        #[arg(long, default_value_t = 0.25)]
        overlap: f64,
    },
    /// Metrics over the benchmark mixtures.
    Evaluate {
        /// Engine checkpoint; omitted means the identity baseline.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        backend: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Plan file (defaults to the data directory's benchmark).
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        scope: PlanScope,
        /// Polarity list, for example `P,N,PN,PN-gen`.
        #[arg(long)]
        modes: Option<String>,
        /// Modality list, for example `text,audio,text+audio`.
        #[arg(long)]
        modalities: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Directory for separated audio.
        #[arg(long)]
        audio_out: Option<PathBuf>,
    },
    /// Spectrograms of one or more recordings, stacked into one PNG.
    PlotSpec {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the command line and returns the process exit status.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli, ws: &Workspace) -> Result<RunConfig> {
    let base = match (&cli.config, cli.profile) {
        (Some(p), _) => RunConfig::load(&ws.path(p))?,
        (None, Some(ProfileArg::Paper)) => RunConfig::paper(),
        (None, _) => RunConfig::toy(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.reseed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}

fn query_side(
    backend: &ToyClap<Real>,
    text: Option<&str>,
    audio: Option<&Path>,
    alpha: f64,
) -> Result<Option<QueryEmbedding<Real>>> {
    let t = text.map(|t| backend.text_query(t)).transpose()?;
    let a = audio.map(|p| read_wav::<Real>(p).and_then(|w| backend.audio_query(&w))).transpose()?;
    Ok(match (a, t) {
        (Some(a), Some(t)) => Some(interpolate(&a, &t, alpha)?),
        (a, t) => a.or(t),
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    let ws = Workspace::resolve(cli.workspace.as_deref());
    let mut cfg = load_config(&cli, &ws)?;
    match cli.command {
        Command::SynthData { classes, per_class, out } => {
            if let Some(n) = classes {
                let all = crate::toyclap::default_classes();
                if n < 2 || n > all.len() {
                    return Err(Error::config(format!("--classes must lie in 2..={}", all.len())));
                }
                cfg.corpus.classes = all.into_iter().take(n).map(|c| c.name).collect();
            }
            if let Some(k) = per_class {
                cfg.corpus.per_class = k;
            }
            let corpus = synth_data::<Real>(&cfg, &ws.path(&out))?;
            log::info!("wrote {} clips to {}", corpus.manifest.len(), out.display());
        }
        Command::Pretrain { data, out } => {
            let corpus = load_corpus::<Real>(&ws.path(&data))?;
            let (backend, report) = pretrain_backend(&cfg, &corpus)?;
            let labels = corpus.manifest.labels();
            let acc = crate::toyclap::zero_shot_accuracy(&backend, &corpus.split("test"), &labels)?;
            log::info!("final contrastive loss {:.4}, zero-shot accuracy {:.3}", report.losses.last().copied().unwrap_or(f64::NAN), acc);
            backend_checkpoint(&backend)?.save(&ws.path(&out))?;
        }
        Command::CacheEmbeddings { backend, data, out } => {
            let backend = load_backend::<Real>(&ws.path(&backend))?;
            let manifest = Manifest::load(&ws.path(&data).join("manifest.json"))?;
            let out = ws.path(&out);
            ensure_parent(&out)?;
            class_cache(&backend, &manifest)?.save(&out)?;
        }
        Command::Train { data, backend, out, history, adapters_only, zero_shot } => {
            let corpus = load_corpus::<Real>(&ws.path(&data))?;
            let backend = load_backend::<Real>(&ws.path(&backend))?;
            let mut sink = match history {
                Some(h) => {
                    let h = ws.path(&h);
                    ensure_parent(&h)?;
                    Some(std::fs::File::create(h)?)
                }
                None => None,
            };
            let mut io_err = None;
            let (engine, report) = train_engine(&cfg, &corpus, &backend, zero_shot, &mut |r| {
                if let Some(f) = sink.as_mut() {
                    let line = serde_json::to_string(r).expect("record serialises");
                    if let Err(e) = writeln!(f, "{line}") {
                        io_err.get_or_insert(e);
                    }
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            let ckpt = if adapters_only { adapters_checkpoint(&engine, Some(&report))? } else { engine_checkpoint(&engine, Some(&report))? };
            ckpt.save(&ws.path(&out))?;
        }
        Command::Separate { ckpt, backend, input, out, text, query_audio, negative_text, negative_audio, overlap } => {
            let backend = load_backend::<Real>(&ws.path(&backend))?;
            let engine = load_engine(&ws.path(&ckpt), Some(&backend.params))?;
            let alpha = cfg.evaluation.text_audio_alpha;
            let qa = query_audio.map(|p| ws.path(&p));
            let na = negative_audio.map(|p| ws.path(&p));
            let pos = query_side(&backend, text.as_deref(), qa.as_deref(), alpha)?;
            let neg = query_side(&backend, negative_text.as_deref(), na.as_deref(), alpha)?;
            let cond = build_condition(pos.as_ref(), neg.as_ref())?;
            let mixture = read_wav::<Real>(&ws.path(&input))?;
            let y = segmented_inference(&engine, &mixture, &cond, engine.cfg.segment_s, overlap)?;
            let out = ws.path(&out);
            ensure_parent(&out)?;
            write_wav(&out, &y)?;
        }
        Command::Evaluate { ckpt, backend, data, plan, scope, modes, modalities, out, csv, audio_out } => {
            if let Some(m) = modes {
                cfg.evaluation.polarities = m;
            }
            if let Some(m) = modalities {
                cfg.evaluation.modalities = m;
            }
            let data = ws.path(&data);
            let corpus = load_corpus::<Real>(&data)?;
            let backend = load_backend::<Real>(&ws.path(&backend))?;
            let plan = match scope {
                PlanScope::All => load_plan(&plan.map(|p| ws.path(&p)).unwrap_or_else(|| data.join(BENCHMARK_FILE)))?,
                PlanScope::Seen => zero_shot_plans(&corpus.manifest, &cfg)?.0,
                PlanScope::Unseen => zero_shot_plans(&corpus.manifest, &cfg)?.1,
            };
            let engine = ckpt.map(|c| load_engine(&ws.path(&c), Some(&backend.params))).transpose()?;
            let identity = IdentitySeparator { sample_rate: cfg.engine.sample_rate, segment_samples: cfg.engine.segment_samples() };
            let separator: &dyn Separator<Real> = match &engine {
                Some(e) => e,
                None => &identity,
            };
            let modes = configured_modes(&cfg)?;
            let (report, audio) = evaluate_specs(&cfg, &corpus, &backend, separator, &plan.specs, &modes, "toy")?;
            let out = ws.path(&out);
            ensure_parent(&out)?;
            std::fs::write(&out, report.to_json()?)?;
            if let Some(c) = csv {
                let c = ws.path(&c);
                ensure_parent(&c)?;
                std::fs::write(c, report.to_csv())?;
            }
            if let Some(dir) = audio_out {
                let dir = ws.path(&dir);
                std::fs::create_dir_all(&dir)?;
                for (key, w) in &audio {
                    let name: String = key.chars().map(|c| if c.is_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect();
                    write_wav(&dir.join(format!("{name}.wav")), w)?;
                }
            }
            print!("{}", report.to_csv());
        }
        Command::PlotSpec { input, out } => {
            let waves = input.iter().map(|p| read_wav::<Real>(&ws.path(p))).collect::<Result<Vec<_>>>()?;
            let out = ws.path(&out);
            ensure_parent(&out)?;
            plot_spectrograms(&waves, &cfg.engine.stft, &out)?;
        }
    }
    Ok(())
}
