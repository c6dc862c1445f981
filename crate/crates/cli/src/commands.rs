use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use imcot_core::datagen::{run_pipeline, Generator, HttpGenerator, OpenQA, ScriptedGenerator, TemplateGenerator};
use imcot_core::eval::{
    evaluate_drivelmm, evaluate_surds, CannedJudge, DriveLmmRecord, Judge, RemoteJudge, ScoreCard, SurdsRecord,
};
use imcot_core::grpo::GroupReport;
use imcot_core::http::{HttpTransport, RetryPolicy};
use imcot_core::reward::{score, RewardReport, SimSource};
use imcot_core::rollout::policies::{
    AnswerImmediately, Answering, Garbage, Grounded, Hallucinating, RandomBox, ToolSpammer,
};
use imcot_core::rollout::{mix_seed, run_group, scenes, trajectory_record, Policy, Question, RewardContext, Roster};
use imcot_core::{
    EmbeddingProvider, ImageId, ImageRecord, ImageStore, MockEmbedder, RemoteEmbedder, Stage, TrajectoryRecord,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{manifest_path, EmbedderKind, GeneratorKind, JudgeKind, Manifest, RunConfig};
use crate::error::CliError;

/// Output of one subcommand: the main file plus optional sidecars.
pub struct Output {
    pub main: Vec<u8>,
    pub sidecars: Vec<(PathBuf, Vec<u8>)>,
    pub summary: Option<Value>,
}

impl Output {
    fn main(main: Vec<u8>) -> Self {
        Output { main, sidecars: Vec::new(), summary: None }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("records serialize");
        out.push(b'\n');
    }
    out
}

fn json_line<T: Serialize>(item: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec(item).expect("reports serialize");
    out.push(b'\n');
    out
}

/// Writes outputs and, for file outputs, the manifest beside the main file.
pub fn emit(command: &str, cfg: &RunConfig, out: Output) -> Result<(), CliError> {
    let write = |path: &Path, bytes: &[u8]| {
        fs::write(path, bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    };
    for (path, bytes) in &out.sidecars {
        write(path, bytes)?;
    }
    match &cfg.output {
        Some(path) => {
            write(path, &out.main)?;
            let manifest = Manifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                config: cfg.clone(),
                summary: out.summary,
            };
            let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
            bytes.push(b'\n');
            write(&manifest_path(path), &bytes)
        }
        None => std::io::stdout().write_all(&out.main).map_err(CliError::input),
    }
}

fn retry(cfg: &RunConfig) -> RetryPolicy {
    RetryPolicy { attempts: cfg.retries.max(1), ..RetryPolicy::default() }
}

fn transport(cfg: &RunConfig, url: &str) -> HttpTransport {
    HttpTransport::new(url, Duration::from_millis(cfg.timeout_ms))
}

fn embedder(cfg: &RunConfig) -> Result<Box<dyn EmbeddingProvider>, CliError> {
    match cfg.embedder {
        EmbedderKind::Mock => {
            if cfg.mock_dim == 0 || cfg.mock_noise.is_nan() || cfg.mock_noise < 0.0 {
                return Err(CliError::input("mock embedder needs a positive dim and a non-negative noise"));
            }
            Ok(Box::new(MockEmbedder::new(cfg.mock_seed).with_dim(cfg.mock_dim).with_noise(cfg.mock_noise)))
        }
        EmbedderKind::Http => {
            let url = cfg
                .embed_endpoint
                .as_deref()
                .ok_or_else(|| CliError::input("--embedder http needs --embed-endpoint or IMCOT_EMBED_ENDPOINT"))?;
            Ok(Box::new(RemoteEmbedder::connect(Box::new(transport(cfg, url)), retry(cfg))?))
        }
    }
}

/// Loads images by id, relative to `--images` when given.
struct ImageLoader {
    dir: Option<PathBuf>,
    cache: HashMap<String, Arc<ImageRecord>>,
}

impl ImageLoader {
    fn new(cfg: &RunConfig) -> Self {
        ImageLoader { dir: cfg.images.clone(), cache: HashMap::new() }
    }

    fn load(&mut self, id: &str) -> Result<Arc<ImageRecord>, CliError> {
        if let Some(img) = self.cache.get(id) {
            return Ok(img.clone());
        }
        let path = match &self.dir {
            Some(d) => d.join(id),
            None => PathBuf::from(id),
        };
        let img = Arc::new(
            ImageRecord::load(ImageId::new(id), &path)
                .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?,
        );
        self.cache.insert(id.to_string(), img.clone());
        Ok(img)
    }
}

#[derive(Serialize)]
struct ParseLine<'a> {
    id: &'a str,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    terminated: Option<imcot_core::Termination>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tool_calls: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    segments: Option<&'a [imcot_core::Segment]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<Value>,
}

pub fn parse(cfg: &RunConfig) -> Result<Output, CliError> {
    let records: Vec<TrajectoryRecord> = read_jsonl(cfg.input()?)?;
    let pc = cfg.rollout().parse_config();
    let parsed: Vec<_> = records.iter().map(|r| r.parse(&pc)).collect();
    let mut out = Vec::new();
    let mut bad = 0;
    for (r, p) in records.iter().zip(&parsed) {
        let line = match p {
            Ok(t) => ParseLine {
                id: &r.id,
                ok: true,
                terminated: Some(t.terminated),
                tool_calls: Some(t.tool_call_count()),
                segments: Some(&t.segments),
                error: None,
            },
            Err(e) => {
                bad += 1;
                ParseLine {
                    id: &r.id,
                    ok: false,
                    terminated: None,
                    tool_calls: None,
                    segments: None,
                    error: Some(json!({"code": e.code(), "message": e.to_string()})),
                }
            }
        };
        out.extend(json_line(&line));
    }
    Ok(Output { main: out, sidecars: Vec::new(), summary: Some(json!({"records": records.len(), "malformed": bad})) })
}

pub fn score_cmd(cfg: &RunConfig) -> Result<Output, CliError> {
    let records: Vec<TrajectoryRecord> = read_jsonl(cfg.input()?)?;
    let w = cfg.weights()?;
    let pc = cfg.rollout().parse_config();
    let needs_replay = cfg.stage == Stage::Stage1 && records.iter().any(|r| r.sims.is_none());
    let provider = if needs_replay { Some(embedder(cfg)?) } else { None };
    let mut loader = ImageLoader::new(cfg);
    let mut reports = Vec::with_capacity(records.len());
    for r in &records {
        let key = r.answer.ok_or_else(|| CliError::input(format!("record {} has no answer key", r.id)))?;
        let parsed = r.parse(&pc);
        let b = match (&r.sims, &provider) {
            (Some(s), _) => score(&parsed, &key, cfg.stage, &w, SimSource::Given(s)),
            (None, None) => score(&parsed, &key, cfg.stage, &w, SimSource::Given(&[])),
            (None, Some(p)) => {
                let store = ImageStore::new();
                if parsed.as_ref().is_ok_and(|t| !t.successful_tool_calls().is_empty()) {
                    let img = loader.load(r.original_image.id.as_str())?;
                    if (img.width(), img.height()) != (r.original_image.width, r.original_image.height) {
                        return Err(CliError::input(format!(
                            "record {}: image {} is {}x{}, record says {}x{}",
                            r.id,
                            r.original_image.id,
                            img.width(),
                            img.height(),
                            r.original_image.width,
                            r.original_image.height
                        )));
                    }
                    store.insert((*img).clone());
                }
                score(&parsed, &key, cfg.stage, &w, SimSource::Replay { store: &store, provider: p.as_ref() })
            }
        }?;
        reports.push(RewardReport::new(r.id.clone(), r.question_id.clone(), &b));
    }
    Ok(Output::main(jsonl(&reports)))
}

fn policy_named(name: &str) -> Result<Arc<dyn Policy>, CliError> {
    Ok(match name.trim() {
        "grounded" => Arc::new(Grounded),
        "hallucinating" => Arc::new(Hallucinating),
        "random" => Arc::new(RandomBox),
        "spam" => Arc::new(ToolSpammer { yields_at_cap: false }),
        "spam-yield" => Arc::new(ToolSpammer { yields_at_cap: true }),
        "immediate" => Arc::new(AnswerImmediately(Answering::Correct)),
        "immediate-wrong" => Arc::new(AnswerImmediately(Answering::Wrong)),
        "immediate-random" => Arc::new(AnswerImmediately(Answering::Random)),
        "garbage" => Arc::new(Garbage),
        other => return Err(CliError::input(format!("unknown policy {other:?}"))),
    })
}

pub fn rollout(cfg: &RunConfig) -> Result<Output, CliError> {
    let roster = Roster::new(cfg.policy.split(',').map(policy_named).collect::<Result<_, _>>()?);
    let items: Vec<(Question, ImageRecord)> = match cfg.synthetic {
        Some(n) => (0..n).map(|i| scenes::synthetic_scene(cfg.seed, i)).collect(),
        None => {
            let questions: Vec<Question> = read_jsonl(cfg.input()?)?;
            let mut loader = ImageLoader::new(cfg);
            questions
                .into_iter()
                .map(|q| {
                    let img = loader.load(&q.image)?;
                    Ok((q, (*img).clone()))
                })
                .collect::<Result<_, CliError>>()?
        }
    };
    let provider = embedder(cfg)?;
    let rewards = RewardContext { weights: cfg.weights()?, provider: provider.as_ref(), epsilon: cfg.epsilon };
    let (mut trajectories, mut groups, mut reports) = (Vec::new(), Vec::new(), Vec::new());
    let mut failed = 0;
    for (qi, (q, image)) in items.iter().enumerate() {
        let store = ImageStore::with_min_side(imcot_core::zoom::DEFAULT_MIN_SIDE);
        store.insert(image.clone());
        // each question gets its own stream; rollout i of it then uses mix_seed(stream, i)
        let rc = imcot_core::rollout::RolloutConfig { seed: mix_seed(cfg.seed, qi as u64), ..cfg.rollout() };
        let out = run_group(&roster, q, &store, &rc, &rewards)?;
        if let Some(f) = out.failures.iter().find(|f| f.error.is_environment()) {
            return Err(CliError::environment(&f.error));
        }
        for f in &out.failures {
            eprintln!(
                "{}",
                json!({"warning": "rollout failed and scores 0", "question_id": q.id, "index": f.index, "message": f.error.to_string()})
            );
        }
        failed += out.failures.len();
        for (t, b) in out.group.trajectories.iter().zip(&out.breakdowns) {
            trajectories.push(trajectory_record(t, q, image));
            reports.push(RewardReport::new(t.id.clone(), Some(q.id.clone()), b));
        }
        groups.push(out.group.report());
    }
    let mut sidecars = Vec::new();
    if let Some(p) = &cfg.groups_out {
        sidecars.push((p.clone(), jsonl(&groups)));
    }
    if let Some(p) = &cfg.rewards_out {
        sidecars.push((p.clone(), jsonl(&reports)));
    }
    let summary = json!({"questions": items.len(), "trajectories": trajectories.len(), "failed": failed});
    Ok(Output { main: jsonl(&trajectories), sidecars, summary: Some(summary) })
}

/// An advantages input line: a ready group, or one reward report.
#[derive(Deserialize)]
#[serde(untagged)]
enum AdvantageInput {
    Group { question_id: String, rewards: Vec<f64> },
    Report { id: String, question_id: Option<String>, r_total: f64 },
}

pub fn advantages(cfg: &RunConfig) -> Result<Output, CliError> {
    let lines: Vec<AdvantageInput> = read_jsonl(cfg.input()?)?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<f64>> = HashMap::new();
    for line in lines {
        let (qid, rewards) = match line {
            AdvantageInput::Group { question_id, rewards } => (question_id, rewards),
            AdvantageInput::Report { id, question_id, r_total } => {
                let qid = question_id.ok_or_else(|| CliError::input(format!("report {id} has no question_id")))?;
                (qid, vec![r_total])
            }
        };
        if !groups.contains_key(&qid) {
            order.push(qid.clone());
        }
        groups.entry(qid).or_default().extend(rewards);
    }
    let reports: Vec<GroupReport> = order
        .into_iter()
        .map(|q| {
            let rewards = groups.remove(&q).unwrap_or_default();
            GroupReport::from_rewards(q.clone(), rewards, cfg.epsilon)
                .map_err(|e| CliError::input(format!("group {q}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    Ok(Output::main(jsonl(&reports)))
}

pub fn datagen(cfg: &RunConfig) -> Result<Output, CliError> {
    let sources: Vec<OpenQA> = read_jsonl(cfg.input()?)?;
    let generator: Box<dyn Generator> = match cfg.generator {
        GeneratorKind::Template => Box::new(TemplateGenerator { seed: cfg.seed }),
        GeneratorKind::Scripted => {
            let path = cfg
                .generator_script
                .as_deref()
                .ok_or_else(|| CliError::input("--generator scripted needs --generator-script"))?;
            let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            let g: ScriptedGenerator =
                serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            Box::new(g)
        }
        GeneratorKind::Http => {
            let url = cfg
                .generator_endpoint
                .as_deref()
                .ok_or_else(|| CliError::input("--generator http needs --generator-endpoint"))?;
            Box::new(HttpGenerator::new(url, Box::new(transport(cfg, url)), retry(cfg)))
        }
    };
    let out = run_pipeline(&sources, generator.as_ref(), &cfg.datagen())?;
    let summary = serde_json::to_value(out.stats).expect("stats serialize");
    Ok(Output { main: jsonl(&out.items), sidecars: Vec::new(), summary: Some(summary) })
}

pub fn eval_surds(cfg: &RunConfig) -> Result<Output, CliError> {
    let records: Vec<SurdsRecord> = read_jsonl(cfg.input()?)?;
    Ok(Output::main(json_line(&evaluate_surds(&records)?)))
}

pub fn eval_drivelmm(cfg: &RunConfig) -> Result<Output, CliError> {
    let records: Vec<DriveLmmRecord> = read_jsonl(cfg.input()?)?;
    let judge: Box<dyn Judge> = match cfg.judge {
        JudgeKind::Canned => Box::new(CannedJudge(ScoreCard::uniform(cfg.judge_score))),
        JudgeKind::Http => {
            let url =
                cfg.judge_endpoint.as_deref().ok_or_else(|| CliError::input("--judge http needs --judge-endpoint"))?;
            Box::new(RemoteJudge::new(Box::new(transport(cfg, url)), retry(cfg)))
        }
    };
    Ok(Output::main(json_line(&evaluate_drivelmm(&records, judge.as_ref())?)))
}
