use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{delta_clapscore_embedding, clapscore_embedding, sdri, sisdri, EvalMixtureSpec};
use crate::decoder::Separator;
use crate::dsp::Waveform;
use crate::embedding::{
    average_shots, build_condition, generate_negative_embedding, interpolate, ConditionalEmbedding, EmbeddingBackend,
    EmbeddingCache, QueryEmbedding, QueryPolarityMode,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::training::{mix_at_snr, Clip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryModality {
    Text,
    Audio,
    TextAudio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// The interferer's own queries.
    Query,
    /// Generated from the positive query and the mixture with top-`k`
    /// cached class embeddings.
    Generated { k: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalMode {
    pub polarity: QueryPolarityMode,
    pub modality: QueryModality,
    pub negatives: NegativeSource,
}

impl EvalMode {
    pub fn new(polarity: QueryPolarityMode, modality: QueryModality) -> Self {
        EvalMode { polarity, modality, negatives: NegativeSource::Query }
    }

    pub fn generated(polarity: QueryPolarityMode, modality: QueryModality, k: usize) -> Self {
        EvalMode { polarity, modality, negatives: NegativeSource::Generated { k } }
    }

    /// Every combination of the comma-separated polarity list (`P`, `N`,
    /// `PN`, `PN-gen`) and modality list (`text`, `audio`, `text+audio`).
    pub fn grid(polarities: &str, modalities: &str, gen_k: usize) -> Result<Vec<EvalMode>> {
        let mut out = Vec::new();
        for p in polarities.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            for m in modalities.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let name = match p.strip_suffix("-gen") {
                    Some(base) => format!("{base}-genk{gen_k}-{m}"),
                    None => format!("{p}-{m}"),
                };
                out.push(name.parse()?);
            }
        }
        if out.is_empty() {
            return Err(Error::config("no evaluation modes selected"));
        }
        Ok(out)
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.polarity {
            QueryPolarityMode::PositiveOnly => "P",
            QueryPolarityMode::NegativeOnly => "N",
            QueryPolarityMode::Both => "PN",
        };
        let m = match self.modality {
            QueryModality::Text => "text",
            QueryModality::Audio => "audio",
            QueryModality::TextAudio => "text+audio",
        };
        match self.negatives {
            NegativeSource::Query => write!(f, "{p}-{m}"),
            NegativeSource::Generated { k } => write!(f, "{p}-genk{k}-{m}"),
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("unrecognised evaluation mode `{s}`"));
        let (p, rest) = s.split_once('-').ok_or_else(bad)?;
        let polarity = match p {
            "P" => QueryPolarityMode::PositiveOnly,
            "N" => QueryPolarityMode::NegativeOnly,
            "PN" => QueryPolarityMode::Both,
            _ => return Err(bad()),
        };
        let (negatives, m) = match rest.strip_prefix("genk") {
            Some(r) => {
                let (k, m) = r.split_once('-').ok_or_else(bad)?;
                (NegativeSource::Generated { k: k.parse().map_err(|_| bad())? }, m)
            }
            None => (NegativeSource::Query, rest),
        };
        let modality = match m {
            "text" => QueryModality::Text,
            "audio" => QueryModality::Audio,
            "text+audio" => QueryModality::TextAudio,
            _ => return Err(bad()),
        };
        if negatives != NegativeSource::Query && polarity == QueryPolarityMode::PositiveOnly {
            return Err(Error::config(format!("mode `{s}` generates negatives but uses none")));
        }
        Ok(EvalMode { polarity, modality, negatives })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub spec_id: String,
    pub mode: String,
    pub sdri: Option<f64>,
    pub sisdri: Option<f64>,
    pub clapscore: Option<f64>,
    pub delta_clapscore: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation over rows.
    pub std: f64,
    pub median: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let h = s.len() / 2;
        let median = if s.len() % 2 == 1 { s[h] } else { 0.5 * (s[h - 1] + s[h]) };
        Some(Stat { mean, std, median })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeAggregate {
    pub mode: String,
    pub dataset: String,
    /// Rows that entered the aggregates.
    pub count: usize,
    pub excluded: usize,
    pub sdri: Option<Stat>,
    pub sisdri: Option<Stat>,
    pub clapscore: Option<Stat>,
    pub delta_clapscore: Option<Stat>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<ModeAggregate>,
}

impl MetricsReport {
    pub fn aggregate(&self, mode: &str) -> Option<&ModeAggregate> {
        self.aggregates.iter().find(|a| a.mode == mode)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One line per mode with `mean±std` cells.
    pub fn to_csv(&self) -> String {
        let cell = |s: &Option<Stat>| s.map(|s| format!("{:.2}±{:.2}", s.mean, s.std)).unwrap_or_else(|| "n/a".into());
        let mut out = String::from("mode,dataset,n,SDRi,SISDRi,CLAPScore,dCLAPScore\n");
        for a in &self.aggregates {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                a.mode,
                a.dataset,
                a.count,
                cell(&a.sdri),
                cell(&a.sisdri),
                cell(&a.clapscore),
                cell(&a.delta_clapscore)
            ));
        }
        out
    }

    /// Recomputes aggregates of `rows`, mode by mode in first-seen order.
    pub fn from_rows(rows: Vec<EvalRow>, dataset: &str) -> Self {
        let mut order: Vec<String> = Vec::new();
        for r in &rows {
            if !order.contains(&r.mode) {
                order.push(r.mode.clone());
            }
        }
        let aggregates = order
            .into_iter()
            .map(|mode| {
                let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.mode == mode && r.error.is_none()).collect();
                let excluded = rows.iter().filter(|r| r.mode == mode && r.error.is_some()).count();
                let col = |f: fn(&EvalRow) -> Option<f64>| Stat::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
                ModeAggregate {
                    mode,
                    dataset: dataset.to_string(),
                    count: ok.len(),
                    excluded,
                    sdri: col(|r| r.sdri),
                    sisdri: col(|r| r.sisdri),
                    clapscore: col(|r| r.clapscore),
                    delta_clapscore: col(|r| r.delta_clapscore),
                }
            })
            .collect();
        MetricsReport { rows, aggregates }
    }
}

/// Everything `evaluate` needs besides the specs.
pub struct EvalContext<'a, T: Scalar> {
    pub separator: &'a dyn Separator<T>,
    pub backend: &'a dyn EmbeddingBackend<T>,
    pub clips: &'a BTreeMap<String, Clip<T>>,
    /// Class embeddings for generated negatives.
    pub cache: Option<&'a EmbeddingCache<T>>,
    /// Audio weight of text+audio queries.
    pub text_audio_alpha: f64,
    pub batch_size: usize,
    pub dataset: String,
}

struct Prepared<T: Scalar> {
    mixture: Waveform<T>,
    target: Waveform<T>,
    pos_text: QueryEmbedding<T>,
    neg_text: QueryEmbedding<T>,
    pos_audio: Option<QueryEmbedding<T>>,
    neg_audio: Option<QueryEmbedding<T>>,
}

impl<'a, T: Scalar> EvalContext<'a, T> {
    fn clip(&self, id: &str) -> Result<&Clip<T>> {
        self.clips.get(id).ok_or_else(|| Error::domain(format!("clip `{id}` not available")))
    }

    fn shots(&self, ids: &[String], memo: &mut HashMap<Vec<String>, QueryEmbedding<T>>) -> Result<Option<QueryEmbedding<T>>> {
        if ids.is_empty() {
            return Ok(None);
        }
        if let Some(e) = memo.get(ids) {
            return Ok(Some(e.clone()));
        }
        let ws = ids.iter().map(|i| self.clip(i).map(|c| c.audio.clone())).collect::<Result<Vec<_>>>()?;
        let es = self.backend.encode_audio_batch(&ws)?;
        let qs = es.into_iter().map(|e| QueryEmbedding::unit(e, crate::embedding::Modality::Audio)).collect::<Result<Vec<_>>>()?;
        let avg = average_shots(&qs)?;
        memo.insert(ids.to_vec(), avg.clone());
        Ok(Some(avg))
    }

    fn prepare(
        &self,
        spec: &EvalMixtureSpec,
        text: &mut HashMap<String, QueryEmbedding<T>>,
        audio: &mut HashMap<Vec<String>, QueryEmbedding<T>>,
    ) -> Result<Prepared<T>> {
        let target = self.clip(&spec.target_id)?.audio.clone();
        let mut noise = Waveform::zeros(target.len(), target.sample_rate());
        for id in &spec.interferer_ids {
            noise = noise.add(&self.clip(id)?.audio.fit_length(target.len()))?;
        }
        let (mixture, _) = mix_at_snr(&target, &noise, spec.snr_db)?;
        let mut embed_text = |s: &str| -> Result<QueryEmbedding<T>> {
            if let Some(e) = text.get(s) {
                return Ok(e.clone());
            }
            let e = self.backend.text_query(s)?;
            text.insert(s.to_string(), e.clone());
            Ok(e)
        };
        let pos_text = embed_text(&spec.queries.pos_text)?;
        let neg_text = embed_text(&spec.queries.neg_text)?;
        Ok(Prepared {
            pos_audio: self.shots(&spec.queries.pos_audio, audio)?,
            neg_audio: self.shots(&spec.queries.neg_audio, audio)?,
            mixture,
            target,
            pos_text,
            neg_text,
        })
    }

    fn side(&self, modality: QueryModality, text: &QueryEmbedding<T>, audio: &Option<QueryEmbedding<T>>) -> Result<QueryEmbedding<T>> {
        let need_audio = || audio.as_ref().ok_or_else(|| Error::domain("no query audio shots for this class"));
        match modality {
            QueryModality::Text => Ok(text.clone()),
            QueryModality::Audio => Ok(need_audio()?.clone()),
            QueryModality::TextAudio => interpolate(need_audio()?, text, self.text_audio_alpha),
        }
    }

    fn condition(&self, mode: &EvalMode, p: &Prepared<T>) -> Result<ConditionalEmbedding<T>> {
        let pos = self.side(mode.modality, &p.pos_text, &p.pos_audio)?;
        let neg = match mode.negatives {
            NegativeSource::Query => self.side(mode.modality, &p.neg_text, &p.neg_audio)?,
            NegativeSource::Generated { k } => {
                let cache = self.cache.ok_or_else(|| Error::domain("generated negatives need an embedding cache"))?;
                generate_negative_embedding(&pos, &p.mixture, cache, k, self.separator, self.backend)?
            }
        };
        let pos = mode.polarity.uses_positive().then_some(pos);
        let neg = mode.polarity.uses_negative().then_some(neg);
        build_condition(pos.as_ref(), neg.as_ref())
    }
}

fn scores<T: Scalar>(est: &Waveform<T>, e_est: &Array1<T>, p: &Prepared<T>) -> Result<[f64; 4]> {
    Ok([
        sdri(est, &p.mixture, &p.target)?,
        sisdri(est, &p.mixture, &p.target)?,
        clapscore_embedding(e_est, &p.pos_text.vector)?,
        delta_clapscore_embedding(e_est, &p.pos_text.vector, &p.neg_text.vector)?,
    ])
}

/// Metrics of every spec under every mode, plus the separated audio keyed
/// by `"{mode}/{spec_id}"`.
pub fn evaluate_detailed<T: Scalar>(
    ctx: &EvalContext<T>,
    specs: &[EvalMixtureSpec],
    modes: &[EvalMode],
) -> Result<(MetricsReport, Vec<(String, Waveform<T>)>)> {
    if ctx.batch_size == 0 {
        return Err(Error::config("evaluation batch size must be positive"));
    }
    let mut text = HashMap::new();
    let mut audio = HashMap::new();
    let prepared: Vec<Result<Prepared<T>>> = specs.iter().map(|s| ctx.prepare(s, &mut text, &mut audio)).collect();
    let mut rows = Vec::with_capacity(specs.len() * modes.len());
    let mut outputs = Vec::new();
    for mode in modes {
        let name = mode.to_string();
        let mut slots: Vec<Result<(usize, ConditionalEmbedding<T>)>> = Vec::with_capacity(specs.len());
        for (i, p) in prepared.iter().enumerate() {
            slots.push(match p {
                Ok(p) => ctx.condition(mode, p).map(|c| (i, c)),
                Err(e) => Err(Error::domain(e.to_string())),
            });
        }
        let mut results: Vec<Option<Result<[f64; 4]>>> = (0..specs.len()).map(|_| None).collect();
        let ready: Vec<&(usize, ConditionalEmbedding<T>)> = slots.iter().filter_map(|s| s.as_ref().ok()).collect();
        for chunk in ready.chunks(ctx.batch_size) {
            let mixes: Vec<_> = chunk.iter().map(|(i, _)| prepared[*i].as_ref().unwrap().mixture.clone()).collect();
            let conds: Vec<_> = chunk.iter().map(|(_, c)| c.clone()).collect();
            let ests = ctx.separator.separate_many(&mixes, &conds)?;
            let embs = ctx.backend.encode_audio_batch(&ests)?;
            for ((&(i, _), est), e) in chunk.iter().zip(ests).zip(embs) {
                results[*i] = Some(scores(&est, &e, prepared[*i].as_ref().unwrap()));
                outputs.push((format!("{name}/{}", specs[*i].id), est));
            }
        }
        for (i, spec) in specs.iter().enumerate() {
            let outcome = match (&slots[i], results[i].take()) {
                (Err(e), _) => Err(e.to_string()),
                (Ok(_), Some(Ok(v))) => Ok(v),
                (Ok(_), Some(Err(e))) => Err(e.to_string()),
                (Ok(_), None) => Err("not evaluated".to_string()),
            };
            rows.push(match outcome {
                Ok([a, b, c, d]) => EvalRow {
                    spec_id: spec.id.clone(),
                    mode: name.clone(),
                    sdri: Some(a),
                    sisdri: Some(b),
                    clapscore: Some(c),
                    delta_clapscore: Some(d),
                    error: None,
                },
                Err(e) => {
                    log::warn!("{name} {}: {e}", spec.id);
                    EvalRow {
                        spec_id: spec.id.clone(),
                        mode: name.clone(),
                        sdri: None,
                        sisdri: None,
                        clapscore: None,
                        delta_clapscore: None,
                        error: Some(e),
                    }
                }
            });
        }
    }
    Ok((MetricsReport::from_rows(rows, &ctx.dataset), outputs))
}

pub fn evaluate<T: Scalar>(ctx: &EvalContext<T>, specs: &[EvalMixtureSpec], modes: &[EvalMode]) -> Result<MetricsReport> {
    Ok(evaluate_detailed(ctx, specs, modes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        let modes = EvalMode::grid("P,N,PN,PN-gen", "text,audio,text+audio", 2).unwrap();
        assert_eq!(modes.len(), 12);
        for m in &modes {
            assert_eq!(&m.to_string().parse::<EvalMode>().unwrap(), m);
        }
        assert_eq!(modes[9].to_string(), "PN-genk2-text");
        assert!("P-genk2-text".parse::<EvalMode>().is_err());
        assert!("Q-text".parse::<EvalMode>().is_err());
    }

    #[test]
    fn stats_and_exclusions() {
        let row = |mode: &str, v: Option<f64>| EvalRow {
            spec_id: "s".into(),
            mode: mode.into(),
            sdri: v,
            sisdri: v,
            clapscore: v,
            delta_clapscore: v,
            error: v.is_none().then(|| "missing".into()),
        };
        let r = MetricsReport::from_rows(vec![row("a", Some(1.0)), row("a", Some(3.0)), row("a", None), row("b", Some(2.0))], "toy");
        let a = r.aggregate("a").unwrap();
        assert_eq!((a.count, a.excluded), (2, 1));
        let s = a.sdri.unwrap();
        assert_eq!((s.mean, s.std, s.median), (2.0, 1.0, 2.0));
        assert_eq!(r.aggregate("b").unwrap().sdri.unwrap().std, 0.0);
        assert!(r.to_csv().contains("a,toy,2,2.00±1.00"));
    }
}
