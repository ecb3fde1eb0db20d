use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use lmx_core::checkpoint::{self, ConfigEcho};
use lmx_core::debugger::{classify_reliability, parse_debug_response, render_debug_prompt, DebugExport};
use lmx_core::element::ElementGraphExport;
use lmx_core::embed::{EmbeddingProvider, ProviderConfig, ENV_API_KEY};
use lmx_core::eval::{evaluate, EvalInputs, EvalRecord};
use lmx_core::explain::{generate_explanations, key_components, BundleMeta, ExplainInput, ExplanationBundle};
use lmx_core::gat::GatConfig;
use lmx_core::kg::KnowledgeGraph;
use lmx_core::llm::{ChatClient, ClientConfig, TextGenerator};
use lmx_core::pipeline::{GraphPipeline, GraphSettings};
use lmx_core::reasoner::{load_dataset, prepare_items, train, write_metrics, QaItem, Reasoner, ReasonerConfig, TrainingConfig};
use lmx_core::synthetic::{self, SyntheticConfig};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::exit::{self, Failure};
use crate::{
    BuildGraphArgs, Command, DebugArgs, EmbedArgs, EvalArgs, ExplainArgs, GenSyntheticArgs, GraphArgs, InferArgs,
    LlmArgs, TrainArgs,
};

/// Timestamp written into bundles when no live call is made.
pub const FIXED_TS: &str = "1970-01-01T00:00:00Z";

/// Echo keys that must agree between `train` and later commands.
const GRAPH_KEYS: [&str; 8] = [
    "hops",
    "budget",
    "score-mode",
    "scorer-seed",
    "embed-backend",
    "embed-dim",
    "embed-seed",
    "pooling",
];

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::BuildGraph(a) => build_graph(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => infer(a),
        Command::Explain(a) => explain(a),
        Command::Debug(a) => debug(a),
        Command::Eval(a) => eval(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
    }
}

fn require_file(flag: &str, path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("--{flag}: no such file: {}", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::new(exit::INTERNAL, format!("cannot write {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => write_text(p, text),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::new(exit::INTERNAL, format!("stdout: {e}"))),
    }
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("export types serialize") + "\n")
        .collect()
}

fn read_jsonl<T: DeserializeOwned>(flag: &str, path: &Path) -> Result<Vec<T>, Failure> {
    require_file(flag, path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("--{flag}: {e}")))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Failure::data(format!("{}: line {}: {e}", path.display(), n + 1)))
        })
        .collect()
}

fn load_items(flag: &str, path: &Path) -> Result<Vec<QaItem>, Failure> {
    require_file(flag, path)?;
    Ok(load_dataset(path)?)
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Failure::new(exit::INTERNAL, format!("worker pool: {e}")))
}

fn load_kg(g: &GraphArgs) -> Result<Arc<KnowledgeGraph>, Failure> {
    require_file("kg", &g.kg)?;
    let relations = g.relations.clone().unwrap_or_else(|| g.kg.with_file_name("relations.txt"));
    require_file("relations", &relations)?;
    Ok(Arc::new(KnowledgeGraph::load(&g.kg, &relations)?))
}

fn provider(e: &EmbedArgs) -> Result<Arc<dyn EmbeddingProvider>, Failure> {
    if let Some(t) = &e.embed_table {
        require_file("embed-table", t)?;
    }
    let config = ProviderConfig {
        backend: e.embed_backend.parse().map_err(Failure::usage)?,
        dim: e.embed_dim,
        pooling: e.pooling.parse().map_err(Failure::usage)?,
        seed: e.embed_seed,
        table: e.embed_table.clone(),
        endpoint: e.embed_url.clone(),
        api_key: std::env::var(ENV_API_KEY).ok(),
        model: e.embed_model.clone(),
    };
    Ok(config.build()?)
}

fn pipeline(g: &GraphArgs, e: &EmbedArgs) -> Result<GraphPipeline, Failure> {
    let settings = GraphSettings {
        hops: g.hops,
        budget: g.budget,
        score_mode: g.score_mode.parse().map_err(Failure::usage)?,
        scorer_seed: g.scorer_seed,
    };
    Ok(GraphPipeline::new(load_kg(g)?, provider(e)?, settings)?)
}

fn graph_echo(g: &GraphArgs, e: &EmbedArgs) -> ConfigEcho {
    let values = [
        g.hops.to_string(),
        g.budget.to_string(),
        g.score_mode.clone(),
        g.scorer_seed.to_string(),
        e.embed_backend.clone(),
        e.embed_dim.to_string(),
        e.embed_seed.to_string(),
        e.pooling.clone(),
    ];
    GRAPH_KEYS.iter().map(|k| k.to_string()).zip(values).collect()
}

/// Loads a checkpoint and checks it fits the graph and embedding settings.
fn load_reasoner(path: &Path, g: &GraphArgs, e: &EmbedArgs, pipeline: &GraphPipeline) -> Result<Reasoner, Failure> {
    require_file("checkpoint", path)?;
    let (reasoner, echo) = checkpoint::load(path)?;
    let dim = pipeline.provider.dim();
    let config = &reasoner.config;
    if config.gat.input_dim != dim || config.lm_dim != dim {
        return Err(Failure::model(format!(
            "checkpoint expects embedding dimension {}, provider gives {dim}",
            config.gat.input_dim
        )));
    }
    if config.gat.num_relations != pipeline.kg.relation_count() {
        return Err(Failure::model(format!(
            "checkpoint was trained with {} relations, the knowledge graph has {}",
            config.gat.num_relations,
            pipeline.kg.relation_count()
        )));
    }
    for (key, now) in graph_echo(g, e) {
        if let Some((_, then)) = echo.iter().find(|(k, _)| *k == key) {
            if *then != now {
                eprintln!("warning: --{key} is {now} but the checkpoint was trained with {then}");
            }
        }
    }
    Ok(reasoner)
}

#[derive(Serialize)]
struct CandidateGraph<'a> {
    choice: usize,
    text: &'a str,
    graph: ElementGraphExport,
}

#[derive(Serialize)]
struct ItemGraphs<'a> {
    id: &'a str,
    question: &'a str,
    candidates: Vec<CandidateGraph<'a>>,
}

fn build_graph(a: BuildGraphArgs) -> Result<(), Failure> {
    let items = load_items("dataset", &a.dataset)?;
    let pipeline = pipeline(&a.graph, &a.embed)?;
    let item = match &a.item {
        Some(id) => items
            .iter()
            .find(|i| &i.id == id)
            .ok_or_else(|| Failure::usage(format!("--item: no item `{id}` in {}", a.dataset.display())))?,
        None => items
            .first()
            .ok_or_else(|| Failure::data(format!("{} is empty", a.dataset.display())))?,
    };
    let grounded = pipeline.ground(&item.question, &item.choices)?;
    let candidates = item
        .choices
        .iter()
        .enumerate()
        .map(|(c, text)| {
            Ok(CandidateGraph {
                choice: c,
                text,
                graph: pipeline.element_graph(&grounded, c)?.export(&pipeline.kg),
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let doc = ItemGraphs {
        id: &item.id,
        question: &item.question,
        candidates,
    };
    let text = serde_json::to_string_pretty(&doc).expect("export serializes") + "\n";
    emit(a.out.as_deref(), &text)
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let train_items = load_items("train", &a.train)?;
    let dev_items = a.dev.as_deref().map(|p| load_items("dev", p)).transpose()?;
    let pipeline = pipeline(&a.graph, &a.embed)?;
    let dim = pipeline.provider.dim();
    let mut gat = GatConfig::new(dim, a.hidden, a.layers, pipeline.kg.relation_count());
    gat.dropout = a.dropout;
    gat.seed = a.seed;
    let mut rc = ReasonerConfig::new(gat, dim);
    if let Some(h) = a.head_hidden {
        rc.head_hidden = h;
    }
    let config = TrainingConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr_gnn: a.lr_gnn,
        lr_lm: a.lr_lm,
        weight_decay: a.weight_decay,
        seed: a.seed,
        max_steps: a.max_steps,
    };
    config.validate()?;
    let mut reasoner = Reasoner::new(rc)?;

    let rows = worker_pool(a.workers)?.install(|| {
        let train_set = prepare_items(&pipeline, &train_items)?;
        let dev_set = dev_items.as_deref().map(|d| prepare_items(&pipeline, d)).transpose()?;
        train(&mut reasoner, &train_set, dev_set.as_deref(), &config, |row| {
            if let Some(dev) = row.dev_acc {
                eprintln!(
                    "epoch {} step {} loss {:.4} train_acc {:.3} dev_acc {dev:.3}",
                    row.epoch, row.step, row.loss, row.train_acc
                );
            }
        })
    })?;

    let mut csv = Vec::new();
    write_metrics(&rows, &mut csv).map_err(|e| Failure::new(exit::INTERNAL, format!("metrics: {e}")))?;
    write_text(&a.metrics, &String::from_utf8(csv).expect("csv is utf-8"))?;

    let mut echo = graph_echo(&a.graph, &a.embed);
    for (k, v) in [
        ("hidden", a.hidden.to_string()),
        ("layers", a.layers.to_string()),
        ("dropout", a.dropout.to_string()),
        ("epochs", a.epochs.to_string()),
        ("batch-size", a.batch_size.to_string()),
        ("lr-gnn", a.lr_gnn.to_string()),
        ("lr-lm", a.lr_lm.to_string()),
        ("weight-decay", a.weight_decay.to_string()),
        ("seed", a.seed.to_string()),
    ] {
        echo.push((k.to_string(), v));
    }
    checkpoint::save(&a.checkpoint, &reasoner, &echo)?;
    if let Some(last) = rows.last() {
        eprintln!("trained {} steps, final loss {:.4}", rows.len(), last.loss);
    }
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    id: String,
    prediction: usize,
    probabilities: Vec<f64>,
    logits: Vec<f64>,
}

fn infer(a: InferArgs) -> Result<(), Failure> {
    let items = load_items("dataset", &a.dataset)?;
    let pipeline = pipeline(&a.graph, &a.embed)?;
    let reasoner = load_reasoner(&a.checkpoint, &a.graph, &a.embed, &pipeline)?;
    let rows = worker_pool(a.workers)?.install(|| {
        items
            .par_iter()
            .map(|item| {
                let candidates = pipeline.candidates(&item.question, &item.choices)?;
                let out = reasoner.predict(&candidates)?;
                Ok(Prediction {
                    id: item.id.clone(),
                    prediction: out.predicted,
                    probabilities: out.probabilities,
                    logits: out.logits,
                })
            })
            .collect::<Result<Vec<_>, Failure>>()
    })?;
    write_text(&a.out, &jsonl(&rows))
}

fn client(l: &LlmArgs) -> Result<ChatClient, Failure> {
    if !(l.timeout_secs.is_finite() && l.timeout_secs > 0.0) {
        return Err(Failure::usage("--timeout-secs must be a positive number"));
    }
    if let Some(p) = &l.mock_fixtures {
        require_file("mock-fixtures", p)?;
    }
    let mode = l.llm_mode.parse().map_err(Failure::usage)?;
    let config = ClientConfig {
        endpoint: l.llm_url.clone(),
        api_key: std::env::var(ENV_API_KEY).ok(),
        model: l.llm_model.clone(),
        timeout: Duration::from_secs_f64(l.timeout_secs),
        max_retries: l.max_retries,
        max_in_flight: l.max_in_flight,
        requests_per_second: l.rps,
        mode,
        cassette: l.cassette.clone(),
        mock_fixtures: l.mock_fixtures.clone(),
        temperature: l.temperature,
        max_tokens: l.max_tokens,
    };
    if config.mode == lmx_core::llm::ClientMode::RecordReplay && config.endpoint.is_none() {
        match &config.cassette {
            Some(p) => require_file("cassette", p)?,
            None => return Err(Failure::usage("--cassette is required in record-replay mode")),
        }
    }
    Ok(ChatClient::new(config)?)
}

/// Collapses per-item failures: none → ok, some → partial, all → the first cause.
fn settle(failures: &[(String, Failure)], total: usize) -> Result<(), Failure> {
    for (id, f) in failures {
        eprintln!("item {id}: {f}");
    }
    match failures.first() {
        None => Ok(()),
        Some((_, first)) if failures.len() == total => Err(first.clone()),
        Some(_) => Err(Failure::new(
            exit::PARTIAL,
            format!("{} of {total} items failed", failures.len()),
        )),
    }
}

fn explain(a: ExplainArgs) -> Result<(), Failure> {
    let mut items = load_items("dataset", &a.dataset)?;
    if let Some(n) = a.limit {
        items.truncate(n);
    }
    if a.top_w == 0 {
        return Err(Failure::usage("--top-w must be >= 1"));
    }
    let pipeline = pipeline(&a.graph, &a.embed)?;
    let reasoner = load_reasoner(&a.checkpoint, &a.graph, &a.embed, &pipeline)?;
    let generator = client(&a.llm)?;
    let ts = match &a.timestamp {
        Some(t) => t.clone(),
        None if a.llm.llm_mode == "live" => chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        None => FIXED_TS.to_string(),
    };

    let results = worker_pool(a.workers)?.install(|| {
        items
            .par_iter()
            .map(|item| {
                let candidates = pipeline.candidates(&item.question, &item.choices)?;
                let out = reasoner.predict(&candidates)?;
                // an empty predicted graph leaves no reasons; generation then reports it
                let reasons = key_components(&out, &candidates, a.top_w).map(|k| k.reasons).unwrap_or_default();
                let input = ExplainInput {
                    task_type: &a.task_type,
                    question: &item.question,
                    choices: &item.choices,
                    prediction: Some(out.predicted),
                    reasons: &reasons,
                };
                let meta = BundleMeta {
                    id: item.id.clone(),
                    probabilities: out.probabilities.clone(),
                    ts: ts.clone(),
                };
                Ok(match generate_explanations(&input, meta, &generator) {
                    Ok(bundle) => (bundle, None),
                    Err(incomplete) => (incomplete.bundle, Some(Failure::from(incomplete.error))),
                })
            })
            .collect::<Result<Vec<(ExplanationBundle, Option<Failure>)>, Failure>>()
    })?;

    let bundles: Vec<&ExplanationBundle> = results.iter().map(|(b, _)| b).collect();
    write_text(&a.out, &jsonl(&bundles))?;
    let failures: Vec<(String, Failure)> = results
        .iter()
        .filter_map(|(b, f)| f.clone().map(|f| (b.id.clone(), f)))
        .collect();
    settle(&failures, results.len())
}

fn debug(a: DebugArgs) -> Result<(), Failure> {
    let bundles: Vec<ExplanationBundle> = read_jsonl("bundles", &a.bundles)?;
    if !(1..=5).contains(&a.threshold) {
        return Err(Failure::usage("--threshold must be within 1..=5"));
    }
    let generator = client(&a.llm)?;
    let results: Vec<Result<DebugExport, Failure>> = worker_pool(a.workers)?.install(|| {
        bundles
            .par_iter()
            .map(|bundle| {
                let prompt = render_debug_prompt(&a.target_model, bundle)?;
                let completion = generator.complete(&generator.request(&prompt))?;
                let report = parse_debug_response(&completion.text)?;
                let verdict = classify_reliability(&report, a.threshold);
                Ok(DebugExport::new(&bundle.id, &report, &verdict))
            })
            .collect()
    });
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (bundle, r) in bundles.iter().zip(results) {
        match r {
            Ok(report) => reports.push(report),
            Err(f) => failures.push((bundle.id.clone(), f)),
        }
    }
    write_text(&a.out, &jsonl(&reports))?;
    settle(&failures, bundles.len())
}

fn read_likert(path: &Path) -> Result<Vec<i64>, Failure> {
    require_file("likert", path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("--likert: {e}")))?;
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(str::split_whitespace)
        .map(|t| {
            t.parse::<i64>()
                .map_err(|_| Failure::data(format!("{}: `{t}` is not an integer", path.display())))
        })
        .collect()
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let dataset = load_items("dataset", &a.dataset)?;
    let records: Vec<EvalRecord> = read_jsonl("predictions", &a.predictions)?;
    let planted = match &a.planted {
        Some(p) => {
            require_file("planted", p)?;
            Some(synthetic::load_planted(p).map_err(|e| Failure::data(e.to_string()))?)
        }
        None => None,
    };
    let debug: Option<Vec<DebugExport>> = a.debug_reports.as_deref().map(|p| read_jsonl("debug-reports", p)).transpose()?;
    let likert = a.likert.as_deref().map(read_likert).transpose()?;
    let report = evaluate(&EvalInputs {
        records: &records,
        dataset: &dataset,
        planted: planted.as_deref(),
        debug: debug.as_deref(),
        likert: likert.as_deref(),
        top_w: a.top_w,
    })?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    emit(a.out.as_deref(), &text)
}

fn gen_synthetic(a: GenSyntheticArgs) -> Result<(), Failure> {
    let config = SyntheticConfig {
        seed: a.seed,
        train_size: a.size,
        test_size: a.test_size,
        distractors: a.distractors,
        noise_degree: a.noise_degree,
    };
    let data = synthetic::generate(&config)?;
    synthetic::verify(&data)?;
    synthetic::write_files(&data, &a.out_dir)?;
    eprintln!(
        "wrote {} train / {} test items and {} edges to {}",
        data.train.len(),
        data.test.len(),
        data.edges.len(),
        PathBuf::from(&a.out_dir).display()
    );
    Ok(())
}
