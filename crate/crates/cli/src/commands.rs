//! Subcommand bodies. Every command writes into `global.output_dir`, never
//! over one of its inputs, and leaves a resolved-config snapshot there.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use scenflow::agents::annotate::annotate as render_prompt;
use scenflow::agents::judge::{judge as judge_series, mjas, JudgeVerdict};
use scenflow::agents::probe::{linear_probe, Labels};
use scenflow::agents::scenario::{read_dataset, write_dataset, Metadata, Scenario};
use scenflow::agents::stats::stat_report;
use scenflow::agents::synth::synth_dataset;
use scenflow::checkpoint::{Checkpoint, EncoderInfo};
use scenflow::denoiser::{NetConfig, VelocityNet};
use scenflow::flow::{sample_batch, Trainer};
use scenflow::metrics::{evaluate, MetricReport};
use scenflow::objective::LossReport;
use scenflow::seed::sample_seed;
use scenflow::text::{
    export_embeddings, import_embeddings, mean_pool, EmbeddingSource, ReferenceEncoder,
    TextEmbedding, Vocabulary, REFERENCE_DIM,
};

use crate::config::{required, RunConfig};

pub const DATASET_FILE: &str = "dataset.ndjson";
pub const LABELS_FILE: &str = "labels.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.ndjson";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const GENERATED_FILE: &str = "generated.ndjson";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const PROBE_FILE: &str = "probe.csv";
pub const VERDICTS_FILE: &str = "verdicts.ndjson";
pub const JUDGE_SUMMARY: &str = "judge_summary.json";

/// Samples integrated together in one network call.
const SAMPLE_CHUNK: usize = 64;

/// One generated series, keyed by the prompt it answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub id: String,
    pub prompt_id: String,
    pub sample_index: usize,
    pub steps: usize,
    pub seed: u64,
    pub series: Vec<f64>,
}

/// Creates the output directory and resolves output file paths, refusing
/// any that would overwrite an input.
struct Output {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
}

impl Output {
    fn new(cfg: &RunConfig, inputs: &[&Path]) -> Result<Self> {
        let dir = cfg.global.output_dir.clone();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let inputs = inputs
            .iter()
            .filter_map(|p| p.canonicalize().ok())
            .collect();
        Ok(Self { dir, inputs })
    }

    fn file(&self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Ok(canon) = path.canonicalize() {
            if self.inputs.contains(&canon) {
                bail!("output {} would overwrite an input", path.display());
            }
        }
        Ok(path)
    }

    fn finish(&self, cfg: &RunConfig) -> Result<()> {
        self.file(crate::config::SNAPSHOT_NAME)?;
        cfg.write_snapshot(&self.dir)?;
        Ok(())
    }
}

fn label_row(s: &Scenario) -> Vec<String> {
    let m = &s.metadata;
    let opt = |v: Option<String>| v.unwrap_or_default();
    vec![
        s.id.clone(),
        s.kind.to_string(),
        opt(m.weather.map(|w| w.to_string())),
        m.peak.to_string(),
        m.peak_time_index.to_string(),
        m.volatility.to_string(),
        m.shape.to_string(),
        opt(m.user_type.map(|u| u.to_string())),
        opt(m.event.map(|e| e.dip_at.to_string())),
    ]
}

fn write_labels(path: &Path, data: &[Scenario]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "id",
        "kind",
        "weather",
        "peak",
        "peak_time_index",
        "volatility",
        "shape",
        "user_type",
        "event_dip_at",
    ])?;
    for s in data {
        w.write_record(label_row(s))?;
    }
    w.flush()?;
    Ok(())
}

fn reference_encoder(seed: u64) -> Result<ReferenceEncoder> {
    Ok(ReferenceEncoder::new(
        Vocabulary::template_lexicon(),
        REFERENCE_DIM,
        seed,
    )?)
}

pub fn synth_data(cfg: &RunConfig) -> Result<()> {
    let c = &cfg.synth_data;
    let levels = cfg.train.net.as_ref().map_or(4, NetConfig::levels);
    let factor = 1usize << (levels - 1);
    if c.len % factor != 0 {
        warn!(
            "series length {} is not divisible by {factor}, which the configured \
             {levels}-level network requires",
            c.len
        );
    }
    if c.len % 4 != 0 {
        warn!(
            "series length {} is not a multiple of 4; prompts are left empty",
            c.len
        );
    }
    let data = synth_dataset(c.kind, c.n, c.len, cfg.global.seed)?;
    let out = Output::new(cfg, &[])?;
    write_dataset(&out.file(DATASET_FILE)?, &data)?;
    write_labels(&out.file(LABELS_FILE)?, &data)?;
    out.finish(cfg)?;
    info!(
        "wrote {} {} scenarios of length {}",
        data.len(),
        c.kind,
        c.len
    );
    Ok(())
}

pub fn annotate(cfg: &RunConfig) -> Result<()> {
    let input = required(&cfg.annotate.input, "annotate.input")?;
    let mut data = read_dataset(input)?;
    let encoder = reference_encoder(cfg.global.seed)?;
    let mut embeddings = Vec::with_capacity(data.len());
    for s in &mut data {
        let report = stat_report(&s.series).with_context(|| format!("scenario {}", s.id))?;
        let prompt = render_prompt(s, &report);
        embeddings.push(encoder.encode_prompt(&prompt)?);
        s.prompt = Some(prompt);
    }
    let out = Output::new(cfg, &[input])?;
    write_dataset(&out.file(DATASET_FILE)?, &data)?;
    write_labels(&out.file(LABELS_FILE)?, &data)?;
    export_embeddings(
        &out.file(EMBEDDINGS_FILE)?,
        data.iter().map(|s| s.id.as_str()).zip(&embeddings),
    )?;
    out.finish(cfg)?;
    info!("annotated {} scenarios", data.len());
    Ok(())
}

/// Per-scenario embeddings and the encoder description stored with the model.
fn training_embeddings(
    cfg: &RunConfig,
    data: &[Scenario],
) -> Result<(Vec<TextEmbedding>, EncoderInfo)> {
    match &cfg.train.embeddings {
        Some(path) => {
            let mut map = import_embeddings(path)?;
            let embs = data
                .iter()
                .map(|s| {
                    map.remove(&s.id)
                        .with_context(|| format!("no embedding for scenario {}", s.id))
                })
                .collect::<Result<Vec<_>>>()?;
            let dim = embs.first().map_or(0, |e| e.dim);
            let info = EncoderInfo {
                source: EmbeddingSource::Imported,
                dim,
                seed: cfg.global.seed,
                vocabulary: None,
            };
            Ok((embs, info))
        }
        None => {
            let enc = reference_encoder(cfg.global.seed)?;
            let embs = data
                .iter()
                .map(|s| {
                    let prompt = s.prompt.as_deref().with_context(|| {
                        format!("scenario {} has no prompt; run annotate first", s.id)
                    })?;
                    Ok(enc.encode_prompt(prompt)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((embs, EncoderInfo::reference(&enc)))
        }
    }
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let dataset = required(&cfg.train.dataset, "train.dataset")?;
    let data = read_dataset(dataset)?;
    if data.is_empty() {
        bail!("dataset {} is empty", dataset.display());
    }
    let len = data[0].series.len();
    if let Some(s) = data.iter().find(|s| s.series.len() != len) {
        bail!(
            "scenario {} has length {} but the first has {len}",
            s.id,
            s.series.len()
        );
    }
    let (embeddings, encoder) = training_embeddings(cfg, &data)?;
    let params = cfg.train.params.clone();

    let (net, step, opt) = match &cfg.train.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.encoder.as_ref().is_some_and(|e| e.dim != encoder.dim) {
                bail!("checkpoint embedding width differs from the training embeddings");
            }
            info!("resuming from step {}", ck.step);
            (ck.net, ck.step, ck.optimizer.unwrap_or_default())
        }
        None => {
            let net_cfg = cfg.train.net.clone().unwrap_or_else(|| NetConfig {
                seq_len: len,
                ..NetConfig::desk_scale(encoder.dim)
            });
            (
                VelocityNet::new(net_cfg, cfg.global.seed)?,
                0,
                Default::default(),
            )
        }
    };

    let pairs: Vec<(&[f64], &TextEmbedding)> = data
        .iter()
        .zip(&embeddings)
        .map(|(s, e)| (s.series.as_slice(), e))
        .collect();
    let mut inputs: Vec<&Path> = vec![dataset];
    inputs.extend(cfg.train.embeddings.as_deref());
    inputs.extend(cfg.train.resume.as_deref());
    let out = Output::new(cfg, &inputs)?;
    let mut trainer = Trainer::resume(net, params.clone(), &pairs, step, opt)?;
    let mut loss = BufWriter::new(File::create(out.file(LOSS_FILE)?)?);
    writeln!(loss, "{}", LossReport::CSV_HEADER)?;
    let total = trainer.total_steps();
    let mut outcome = Ok(());
    while !trainer.is_finished() {
        match trainer.step() {
            Ok(o) => {
                writeln!(loss, "{}", o.report.to_csv_row())?;
                let s = o.report.step + 1;
                if s % 100 == 0 || s == total {
                    info!(
                        "step {s}/{total} l_time {:.5} l_freq {:.5}",
                        o.report.l_time, o.report.l_freq
                    );
                }
            }
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
    }
    loss.flush()?;
    outcome?;
    let (net, step, opt) = trainer.into_parts();
    let checkpoint = Checkpoint {
        net,
        step,
        seed: cfg.global.seed,
        encoder: Some(encoder),
        train: Some(params),
        optimizer: (!opt.m.is_empty()).then_some(opt),
    };
    checkpoint.save(&out.file(CHECKPOINT_FILE)?)?;
    out.finish(cfg)?;
    info!("trained to step {step}");
    Ok(())
}

pub fn sample(cfg: &RunConfig) -> Result<()> {
    let c = &cfg.sample;
    let ck_path = required(&c.checkpoint, "sample.checkpoint")?;
    let prompts_path = required(&c.prompts, "sample.prompts")?;
    if c.samples_per_prompt == 0 {
        bail!("samples_per_prompt must be positive");
    }
    let ck = Checkpoint::load(ck_path)?;
    let prompts = read_dataset(prompts_path)?;
    let embeddings: Vec<TextEmbedding> = match &c.embeddings {
        Some(path) => {
            let mut map = import_embeddings(path)?;
            prompts
                .iter()
                .map(|s| {
                    map.remove(&s.id)
                        .with_context(|| format!("no embedding for prompt id {}", s.id))
                })
                .collect::<Result<_>>()?
        }
        None => {
            let enc = ck
                .encoder
                .as_ref()
                .map(EncoderInfo::reference_encoder)
                .transpose()?
                .flatten()
                .context("the model was trained on imported embeddings; pass --embeddings")?;
            prompts
                .iter()
                .map(|s| {
                    let p = s
                        .prompt
                        .as_deref()
                        .with_context(|| format!("prompt id {} has no prompt text", s.id))?;
                    Ok(enc.encode_prompt(p)?)
                })
                .collect::<Result<_>>()?
        }
    };

    let k = c.samples_per_prompt;
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..k).map(move |j| (p, j)))
        .collect();
    let mut records = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(SAMPLE_CHUNK) {
        let seeds: Vec<u64> = chunk
            .iter()
            .map(|&(p, j)| sample_seed(cfg.global.seed, (p * k + j) as u64))
            .collect();
        let embs: Vec<&TextEmbedding> = chunk.iter().map(|&(p, _)| &embeddings[p]).collect();
        let series = sample_batch(&ck.net, &embs, c.steps, &seeds)?;
        for ((&(p, j), seed), x) in chunk.iter().zip(seeds).zip(series) {
            let id = &prompts[p].id;
            records.push(GeneratedRecord {
                id: format!("{id}-s{j:03}"),
                prompt_id: id.clone(),
                sample_index: j,
                steps: c.steps,
                seed,
                series: x.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            });
        }
    }

    let mut inputs: Vec<&Path> = vec![ck_path, prompts_path];
    inputs.extend(c.embeddings.as_deref());
    let out = Output::new(cfg, &inputs)?;
    let mut w = BufWriter::new(File::create(out.file(GENERATED_FILE)?)?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    out.finish(cfg)?;
    info!(
        "generated {} series with {} Euler steps",
        records.len(),
        c.steps
    );
    Ok(())
}

/// Each line's `series` field, from dataset or generated records.
fn read_series(path: &Path) -> Result<Vec<Vec<f64>>> {
    #[derive(Deserialize)]
    struct Row {
        series: Vec<f64>,
    }
    let reader =
        BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}", path.display(), n + 1))?;
        out.push(row.series);
    }
    Ok(out)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let real_path = required(&cfg.eval.real, "eval.real")?;
    let gen_path = required(&cfg.eval.generated, "eval.generated")?;
    let real = read_series(real_path)?;
    let gen = read_series(gen_path)?;
    let report = evaluate(&real, &gen, &cfg.eval.metrics)?;
    let out = Output::new(cfg, &[real_path, gen_path])?;
    std::fs::write(
        out.file(METRICS_CSV)?,
        format!("{}\n{}\n", MetricReport::CSV_HEADER, report.to_csv_row()),
    )?;
    std::fs::write(
        out.file(METRICS_JSON)?,
        serde_json::to_string_pretty(&report)?,
    )?;
    out.finish(cfg)?;
    info!("{}", report.to_csv_row());
    Ok(())
}

/// Label columns probed as regressions; others are regressions only when
/// every value parses as a number.
const CONTINUOUS: &[&str] = &["peak", "peak_time_index"];

pub fn probe(cfg: &RunConfig) -> Result<()> {
    let emb_path = required(&cfg.probe.embeddings, "probe.embeddings")?;
    let labels_path = required(&cfg.probe.labels, "probe.labels")?;
    let embeddings = import_embeddings(emb_path)?;
    let mut reader = csv::Reader::from_path(labels_path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let id_col = header
        .iter()
        .position(|h| h == "id")
        .context("label file has no `id` column")?;
    let rows: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;

    let explicit = !cfg.probe.attributes.is_empty();
    let attributes: Vec<String> = if explicit {
        cfg.probe.attributes.clone()
    } else {
        header.iter().filter(|h| *h != "id").cloned().collect()
    };
    let mut pooled: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (id, e) in &embeddings {
        pooled.insert(id, mean_pool(e)?);
    }

    let mut results = Vec::new();
    for attr in &attributes {
        let col = header
            .iter()
            .position(|h| h == attr)
            .with_context(|| format!("label file has no `{attr}` column"))?;
        let mut x = Vec::new();
        let mut values = Vec::new();
        for r in &rows {
            let value = &r[col];
            if value.is_empty() {
                continue;
            }
            let id = &r[id_col];
            let e = pooled
                .get(id)
                .with_context(|| format!("no embedding for labelled id {id}"))?;
            x.push(e.clone());
            values.push(value.to_string());
        }
        let numeric: Option<Vec<f64>> = values.iter().map(|v| v.parse().ok()).collect();
        let labels = match numeric {
            Some(y) if CONTINUOUS.contains(&attr.as_str()) => Labels::Continuous(y),
            _ => Labels::Categorical(values),
        };
        match linear_probe(attr, &x, &labels, cfg.global.seed) {
            Ok(r) => results.push(r),
            Err(e @ scenflow::Error::Argument(_)) if !explicit => {
                warn!("skipping attribute `{attr}`: {e}");
            }
            Err(e) => return Err(e).with_context(|| format!("probing `{attr}`")),
        }
    }

    let out = Output::new(cfg, &[emb_path, labels_path])?;
    let mut w = csv::Writer::from_path(out.file(PROBE_FILE)?)?;
    w.write_record(["attribute", "task", "score"])?;
    for r in &results {
        let task = serde_json::to_value(r.task)?;
        w.write_record([
            r.attribute.as_str(),
            task.as_str().unwrap_or_default(),
            &r.score.to_string(),
        ])?;
    }
    w.flush()?;
    out.finish(cfg)?;
    info!("probed {} attributes", results.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct VerdictRecord<'a> {
    id: &'a str,
    prompt_id: &'a str,
    #[serde(flatten)]
    verdict: &'a JudgeVerdict,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub mjas: f64,
    pub count: usize,
}

pub fn judge(cfg: &RunConfig) -> Result<()> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        series: Vec<f64>,
        #[serde(default)]
        prompt_id: Option<String>,
        #[serde(default)]
        metadata: Option<Metadata>,
    }
    let gen_path = required(&cfg.judge.generated, "judge.generated")?;
    let targets: BTreeMap<String, Metadata> = match &cfg.judge.dataset {
        Some(p) => read_dataset(p)?
            .into_iter()
            .map(|s| (s.id, s.metadata))
            .collect(),
        None => BTreeMap::new(),
    };
    let reader = BufReader::new(
        File::open(gen_path).with_context(|| format!("opening {}", gen_path.display()))?,
    );
    let mut judged = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}", gen_path.display(), n + 1))?;
        let prompt_id = row.prompt_id.clone().unwrap_or_else(|| row.id.clone());
        let meta = match (&row.prompt_id, &row.metadata) {
            (Some(pid), _) => targets.get(pid),
            (None, Some(m)) => Some(m),
            (None, None) => None,
        };
        let verdict = judge_series(&row.series, meta)
            .with_context(|| format!("judging {} (prompt {prompt_id})", row.id))?;
        judged.push((row.id, prompt_id, verdict));
    }
    let verdicts: Vec<JudgeVerdict> = judged.iter().map(|j| j.2.clone()).collect();
    let summary = JudgeSummary {
        mjas: mjas(&verdicts)?,
        count: verdicts.len(),
    };

    let mut inputs: Vec<&Path> = vec![gen_path];
    inputs.extend(cfg.judge.dataset.as_deref());
    let out = Output::new(cfg, &inputs)?;
    let mut w = BufWriter::new(File::create(out.file(VERDICTS_FILE)?)?);
    for (id, prompt_id, verdict) in &judged {
        serde_json::to_writer(
            &mut w,
            &VerdictRecord {
                id,
                prompt_id,
                verdict,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    std::fs::write(
        out.file(JUDGE_SUMMARY)?,
        serde_json::to_string_pretty(&summary)?,
    )?;
    out.finish(cfg)?;
    info!("MJAS {:.4} over {} series", summary.mjas, summary.count);
    Ok(())
}
