//! Configuration, checkpoints, end-to-end pipeline steps and the
//! command-line front-end.

mod checkpoint;
mod cli;
mod config;
mod plot;

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind, HistoryDigest, TensorEntry, MAGIC, VERSION};
pub use cli::run;
pub use config::{EvalConfig, Profile, RunConfig, Workspace, WORKSPACE_ENV};
pub use plot::{plot_spectrograms, spectrogram_image};

use crate::decoder::{EngineConfig, SeparationEngine, Separator, ENCODER_PREFIX};
use crate::dsp::Waveform;
use crate::embedding::{build_cache, EmbeddingCache};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::evaluation::{build_eval_mixtures, evaluate_detailed, zero_shot_split, EvalContext, EvalMixtureSpec, EvalMode, EvalPlan, Manifest, MetricsReport};
use crate::scalar::Scalar;
use crate::tape::ParamStore;
use crate::toyclap::{contrastive_pretrain, generate_corpus, PretrainReport, ToyClap, ToyCorpus, TowerState, AUDIO_ENCODER_PREFIX};
use crate::training::{fit, EpochRecord, FitReport};

pub const BENCHMARK_FILE: &str = "benchmark.json";

/// Clips the benchmark draws from: the test and query splits.
pub fn benchmark_manifest(manifest: &Manifest) -> Manifest {
    manifest.filter(|e| e.split == "test" || e.split == "query")
}

fn plan_for(manifest: &Manifest, cfg: &RunConfig) -> Result<EvalPlan> {
    let e = &cfg.evaluation;
    build_eval_mixtures(manifest, e.n_interferers, e.shots, e.snr_db, e.seed)
}

pub fn benchmark_plan(manifest: &Manifest, cfg: &RunConfig) -> Result<EvalPlan> {
    plan_for(&benchmark_manifest(manifest), cfg)
}

fn held_out(cfg: &RunConfig) -> BTreeSet<String> {
    cfg.evaluation.held_out.iter().cloned().collect()
}

/// Benchmark plans restricted to seen and to held-out classes.
pub fn zero_shot_plans(manifest: &Manifest, cfg: &RunConfig) -> Result<(EvalPlan, EvalPlan)> {
    let (seen, unseen) = zero_shot_split(&benchmark_manifest(manifest), &held_out(cfg))?;
    Ok((plan_for(&seen, cfg)?, plan_for(&unseen, cfg)?))
}

pub fn make_corpus<T: Scalar>(cfg: &RunConfig) -> Result<ToyCorpus<T>> {
    generate_corpus(&cfg.corpus)
}

/// Generates the corpus, writes it with its benchmark plan.
pub fn synth_data<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<ToyCorpus<T>> {
    let corpus = make_corpus::<T>(cfg)?;
    corpus.write(out)?;
    let plan = benchmark_plan(&corpus.manifest, cfg)?;
    std::fs::write(out.join(BENCHMARK_FILE), serde_json::to_string_pretty(&plan)? + "\n")?;
    Ok(corpus)
}

pub fn load_plan(path: &Path) -> Result<EvalPlan> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn pretrain_backend<T: Scalar>(cfg: &RunConfig, corpus: &ToyCorpus<T>) -> Result<(ToyClap<T>, PretrainReport)> {
    contrastive_pretrain(&corpus.split("train"), cfg.backend.clone(), &cfg.pretrain)
}

pub fn backend_checkpoint<T: Scalar>(b: &ToyClap<T>) -> Result<Checkpoint<T>> {
    Ok(Checkpoint::new(CheckpointKind::Backend, serde_json::to_value(&b.state)?, b.params.clone()))
}

pub fn backend_from_checkpoint<T: Scalar>(c: Checkpoint<T>) -> Result<ToyClap<T>> {
    c.expect_kind(CheckpointKind::Backend)?;
    let state: TowerState = c.config()?;
    ToyClap::from_params(state, c.params)
}

pub fn load_backend<T: Scalar>(path: &Path) -> Result<ToyClap<T>> {
    backend_from_checkpoint(Checkpoint::load(path)?)
}

/// Engine initialised from the backend's audio tower and trained on the
/// corpus train split; the zero-shot variant drops the held-out classes.
pub fn train_engine<T: Scalar>(
    cfg: &RunConfig,
    corpus: &ToyCorpus<T>,
    backend: &ToyClap<T>,
    zero_shot: bool,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(SeparationEngine<T>, FitReport)> {
    let held = held_out(cfg);
    let keep = |split: &str| -> Vec<_> {
        corpus.split(split).into_iter().filter(|c| !zero_shot || !held.contains(&c.label)).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.engine_init_seed());
    let mut engine = SeparationEngine::from_pretrained_encoder(cfg.engine.clone(), &backend.params, AUDIO_ENCODER_PREFIX, &mut rng)?;
    let report = fit(&mut engine, backend, &keep("train"), &keep("val"), &cfg.training, on_epoch)?;
    Ok((engine, report))
}

pub fn engine_checkpoint<T: Scalar>(e: &SeparationEngine<T>, history: Option<&FitReport>) -> Result<Checkpoint<T>> {
    let mut c = Checkpoint::new(CheckpointKind::Engine, serde_json::to_value(&e.cfg)?, e.params.clone());
    c.header.history = history.map(HistoryDigest::from);
    Ok(c)
}

/// Adapter and decoder tensors only.
pub fn adapters_checkpoint<T: Scalar>(e: &SeparationEngine<T>, history: Option<&FitReport>) -> Result<Checkpoint<T>> {
    let mut params = ParamStore::new();
    for (name, v) in e.params.iter() {
        if !name.starts_with(ENCODER_PREFIX) || Encoder::is_lora_tensor(name) {
            params.insert(name, v.clone(), true);
        }
    }
    let mut c = Checkpoint::new(CheckpointKind::Adapters, serde_json::to_value(&e.cfg)?, params);
    c.header.history = history.map(HistoryDigest::from);
    c.header.base_prefix = Some(AUDIO_ENCODER_PREFIX.to_string());
    Ok(c)
}

/// Rebuilds an engine; adapters-only checkpoints take their encoder base
/// from the backend tensors.
pub fn engine_from_checkpoint<T: Scalar>(c: Checkpoint<T>, base: Option<&ParamStore<T>>) -> Result<SeparationEngine<T>> {
    let cfg: EngineConfig = c.config()?;
    let mut params = c.params;
    match c.header.kind {
        CheckpointKind::Engine => {}
        CheckpointKind::Adapters => {
            let base = base.ok_or_else(|| Error::config("adapters-only checkpoint needs the backend checkpoint as its base"))?;
            let prefix = c.header.base_prefix.clone().unwrap_or_else(|| AUDIO_ENCODER_PREFIX.to_string());
            for (name, v) in base.iter() {
                if let Some(rest) = name.strip_prefix(prefix.as_str()) {
                    params.insert(&format!("{ENCODER_PREFIX}{rest}"), v.clone(), false);
                }
            }
        }
        CheckpointKind::Backend => return Err(Error::config("expected an engine checkpoint, found a backend checkpoint")),
    }
    let mut e = SeparationEngine::from_params(cfg, params)?;
    e.apply_freeze_policy();
    Ok(e)
}

pub fn load_engine<T: Scalar>(path: &Path, base: Option<&ParamStore<T>>) -> Result<SeparationEngine<T>> {
    engine_from_checkpoint(Checkpoint::load(path)?, base)
}

pub fn class_cache<T: Scalar>(backend: &ToyClap<T>, manifest: &Manifest) -> Result<EmbeddingCache<T>> {
    build_cache(backend, &manifest.labels())
}

/// Runs the modes configured in `cfg.evaluation` over `specs`.
pub fn evaluate_specs<T: Scalar>(
    cfg: &RunConfig,
    corpus: &ToyCorpus<T>,
    backend: &ToyClap<T>,
    separator: &dyn Separator<T>,
    specs: &[EvalMixtureSpec],
    modes: &[EvalMode],
    dataset: &str,
) -> Result<(MetricsReport, Vec<(String, Waveform<T>)>)> {
    let cache = class_cache(backend, &corpus.manifest)?;
    let ctx = EvalContext {
        separator,
        backend,
        clips: &corpus.clips,
        cache: Some(&cache),
        text_audio_alpha: cfg.evaluation.text_audio_alpha,
        batch_size: cfg.evaluation.batch_size,
        dataset: dataset.to_string(),
    };
    evaluate_detailed(&ctx, specs, modes)
}

pub fn configured_modes(cfg: &RunConfig) -> Result<Vec<EvalMode>> {
    EvalMode::grid(&cfg.evaluation.polarities, &cfg.evaluation.modalities, cfg.evaluation.gen_k)
}
