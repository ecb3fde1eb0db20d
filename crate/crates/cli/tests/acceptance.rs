//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use lmx_core::debugger::{classify_reliability, parse_debug_response, render_debug_prompt, DEFAULT_THRESHOLD};
use lmx_core::element::{build_element_graph, CandidateContext, RelevanceScorer, ScoreMode};
use lmx_core::embed::{EmbeddingProvider, Pooling, SyntheticHashProvider};
use lmx_core::eval::likert_normalize;
use lmx_core::explain::{render_stage1, render_stage2, ExplainInput, ExplanationBundle, ReasonElement};
use lmx_core::gat::{ForwardMode, GatConfig, GatNetwork, Upstream};
use lmx_core::kg::{GroundedInput, NodeId};
use lmx_core::nn::{dot, Parameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use support::{bfs_oracle, finite_difference, random_element_graph, random_kg, relative_error, sort_and_cut_oracle};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lmx(args: &[&str]) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lmx"));
    for (k, _) in std::env::vars() {
        if k.starts_with("LMX_") {
            cmd.env_remove(k);
        }
    }
    let out = cmd.args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`lmx {}` exited with {:?}: {}",
            args.first().unwrap_or(&""),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn core_fixture(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name);
    fs::read_to_string(path).expect("core fixture")
}

fn cli_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn read_jsonl(path: &Path) -> Result<Vec<Value>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines().map(|l| serde_json::from_str(l).map_err(|e| e.to_string())).collect()
}

fn gat_config(hidden: usize, layers: usize, relations: usize, seed: u64) -> GatConfig {
    let mut c = GatConfig::new(6, hidden, layers, relations);
    c.seed = seed;
    c.dropout = 0.0;
    c
}

fn attention_normalization() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut out_of_range = 0usize;
    let graphs = 120;
    for g in 0..graphs {
        let n = rng.random_range(5..=50);
        let m = rng.random_range(0..=3 * n);
        let graph = random_element_graph(&mut rng, n, m, 6, 4);
        let layers = rng.random_range(1..=3);
        let net = GatNetwork::new(gat_config(8, layers, 4, g)).map_err(|e| e.to_string())?;
        let fwd = net.forward(&graph, ForwardMode::Eval).map_err(|e| e.to_string())?;
        for layer in 0..layers {
            for i in 0..graph.len() {
                let alphas: Vec<f64> = fwd.attention.neighborhood(layer, i).map(|(_, _, a)| a).collect();
                worst = worst.max((alphas.iter().sum::<f64>() - 1.0).abs());
                out_of_range += alphas.iter().filter(|a| !(0.0..=1.0).contains(*a)).count();
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        worst <= 1e-6 && out_of_range == 0 && elapsed < Duration::from_secs(10),
        format!("{graphs} graphs, max |Σα − 1| = {worst:.1e}, {out_of_range} α outside [0,1], {elapsed:.2?}"),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut tensors = 0;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let graph = random_element_graph(&mut rng, 5, 8, 6, 3);
        let net = GatNetwork::new(gat_config(8, 2, 3, seed)).map_err(|e| e.to_string())?;
        let fwd = net.forward(&graph, ForwardMode::Eval).map_err(|e| e.to_string())?;
        let mut up = Upstream::zeros(&fwd);
        for row in &mut up.features {
            row.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        up.attention.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let objective = |p: &GatNetwork| {
            let f = p.forward(&graph, ForwardMode::Eval).unwrap();
            let mut l = dot(f.attention.last(), &up.attention);
            for (h, c) in f.output().iter().zip(&up.features) {
                l += dot(h, c);
            }
            l
        };
        let analytic = net.backward(&fwd, &up).params;
        let numeric = finite_difference(&net, 1e-5, objective);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for ((name, a), n) in net.tensor_names().iter().zip(analytic.tensors()).zip(&numeric) {
            tensors += 1;
            // a bias shared by every logit of one softmax has true gradient 0
            if norm(a) < 1e-8 && norm(n) < 1e-8 {
                continue;
            }
            let err = relative_error(a, n);
            if err >= 1e-4 {
                return Err(format!("seed {seed}, tensor {name}: relative error {err:.2e}"));
            }
            worst = worst.max(err);
        }
    }
    let elapsed = start.elapsed();
    check(
        elapsed < Duration::from_secs(60),
        format!("{tensors} tensors, worst relative error {worst:.1e}, {elapsed:.2?}"),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let n = rng.random_range(1..=200);
        let m = rng.random_range(0..3 * n);
        let kg = random_kg(&mut rng, n, m, 4);
        let k = rng.random_range(1..=3.min(n));
        let seeds: BTreeSet<NodeId> = (0..k).map(|_| rng.random_range(0..n) as NodeId).collect();
        let hops = rng.random_range(0..=3);
        let sub = kg.khop_neighborhood(&seeds, hops).map_err(|e| e.to_string())?;
        if sub.nodes != bfs_oracle(&kg, &seeds, hops) {
            return Err(format!("khop case {case} differs from BFS"));
        }
    }
    let provider = SyntheticHashProvider::new(6, 3, Pooling::Mean).map_err(|e| e.to_string())?;
    for case in 0..200u64 {
        let n = rng.random_range(1..=300);
        let m = rng.random_range(0..3 * n);
        let kg = random_kg(&mut rng, n, m, 3);
        let k = rng.random_range(1..=3.min(n));
        let seeds: BTreeSet<NodeId> = (0..k).map(|_| rng.random_range(0..n) as NodeId).collect();
        let sub = kg.khop_neighborhood(&seeds, 2).map_err(|e| e.to_string())?;
        let mode = if case % 2 == 0 { ScoreMode::Cosine } else { ScoreMode::Mlp };
        let scorer = RelevanceScorer::new(mode, 6, case);
        let z: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grounded = GroundedInput {
            tokens: vec!["x".into()],
            context: BTreeSet::new(),
            question: seeds.clone(),
            choices: vec![BTreeSet::new(), BTreeSet::new()],
        };
        let budget = rng.random_range(1..=40);
        let ctx = CandidateContext {
            kg: &kg,
            grounded: &grounded,
            choice: 0,
            input_embedding: &z,
        };
        let graph = build_element_graph(&ctx, &sub, budget, &provider, &scorer).map_err(|e| e.to_string())?;
        let mut scores = Vec::new();
        for &id in &sub.nodes {
            let v = provider.embed_node(kg.label(id).unwrap()).map_err(|e| e.to_string())?;
            scores.push((id, scorer.score(&z, &v).map_err(|e| e.to_string())?));
        }
        let kept: BTreeSet<NodeId> = graph.nodes.iter().map(|n| n.id).collect();
        if kept != sort_and_cut_oracle(&scores, &seeds, budget) {
            return Err(format!("element-graph case {case} differs from sort-and-cut"));
        }
    }
    Ok("200 k-hop and 200 element-graph instances match exactly".into())
}

fn residual_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let n = rng.random_range(2..=30);
        let graph = random_element_graph(&mut rng, n, 2 * n, 6, 2);
        let mut net = GatNetwork::new(gat_config(8, 3, 2, seed)).map_err(|e| e.to_string())?;
        net.zero_output_transforms();
        let projected = net.project_inputs(&graph);
        let fwd = net.forward(&graph, ForwardMode::Eval).map_err(|e| e.to_string())?;
        for (a, b) in fwd.output().iter().zip(&projected) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    check(worst == 0.0, format!("20 graphs, 3 layers, max abs deviation {worst:e}"))
}

fn metrics_losses(path: &Path) -> Result<Vec<f64>, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty metrics")?.split(',').collect();
    let col = header.iter().position(|h| *h == "loss").ok_or("no loss column")?;
    lines
        .map(|l| l.split(',').nth(col).ok_or("short row")?.parse::<f64>().map_err(|e| e.to_string()))
        .collect()
}

fn overfit_one(dir: &Path) -> Outcome {
    let d = dir.join("one");
    lmx(&["gen-synthetic", "--out-dir", s(&d), "--seed", "4", "--size", "1", "--test-size", "1", "--noise-degree", "2"])?;
    let metrics = d.join("metrics.csv");
    lmx(&[
        "train",
        "--kg",
        s(&d.join("kg.tsv")),
        "--train",
        s(&d.join("train.jsonl")),
        "--checkpoint",
        s(&d.join("model.ckpt")),
        "--metrics",
        s(&metrics),
        "--embed-dim",
        "16",
        "--budget",
        "30",
        "--hidden",
        "16",
        "--layers",
        "2",
        "--batch-size",
        "1",
        "--epochs",
        "200",
        "--max-steps",
        "200",
        "--seed",
        "2",
    ])?;
    let losses = metrics_losses(&metrics)?;
    let first = losses.iter().position(|&l| l < 0.01);
    check(
        losses.len() <= 200 && first.is_some(),
        match first {
            Some(step) => format!("cross-entropy {:.1e} < 0.01 at step {}", losses[step], step + 1),
            None => format!("best cross-entropy {:.3e} after {} steps", losses.iter().cloned().fold(f64::MAX, f64::min), losses.len()),
        },
    )
}

fn synthetic_benchmark(dir: &Path) -> Outcome {
    let d = dir.join("bench");
    let start = Instant::now();
    lmx(&["gen-synthetic", "--out-dir", s(&d), "--seed", "1", "--size", "500", "--test-size", "100"])?;
    let kg = d.join("kg.tsv");
    let train_set = d.join("train.jsonl");
    let metrics = d.join("metrics.csv");
    let test_set = d.join("test.jsonl");
    let planted = d.join("planted.jsonl");
    let graph = ["--kg", s(&kg), "--embed-dim", "32", "--budget", "50"];
    let ckpt = d.join("model.ckpt");
    let mut train = vec!["train"];
    train.extend(graph);
    train.extend([
        "--train",
        s(&train_set),
        "--checkpoint",
        s(&ckpt),
        "--metrics",
        s(&metrics),
        "--hidden",
        "64",
        "--layers",
        "3",
        "--epochs",
        "6",
        "--seed",
        "1",
    ]);
    lmx(&train)?;
    let trained = start.elapsed();
    let bundles = d.join("bundles.jsonl");
    let mut explain = vec!["explain"];
    explain.extend(graph);
    explain.extend(["--checkpoint", s(&ckpt), "--dataset", s(&test_set), "--out", s(&bundles)]);
    lmx(&explain)?;
    let report = d.join("report.json");
    lmx(&[
        "eval",
        "--dataset",
        s(&test_set),
        "--predictions",
        s(&bundles),
        "--planted",
        s(&planted),
        "--out",
        s(&report),
    ])?;
    let elapsed = start.elapsed();
    let r = read_json(&report)?;
    let accuracy = r["accuracy"].as_f64().ok_or("no accuracy")?;
    let recall = r["recall"].as_f64().ok_or("no recall")?;
    check(
        accuracy >= 0.90 && recall >= 0.60 && elapsed < Duration::from_secs(300),
        format!(
            "accuracy {accuracy:.3}, top-5 planted-path recall {recall:.3} over {} correct items, train {trained:.1?}, total {elapsed:.1?}",
            r["recall_items"]
        ),
    )
}

fn trim(s: String) -> String {
    s.strip_suffix('\n').map(str::to_string).unwrap_or(s)
}

fn worked_examples(dir: &Path) -> Outcome {
    let reading = parse_debug_response(&core_fixture("reading_debugger.md")).map_err(|e| e.to_string())?;
    let clean = parse_debug_response(&core_fixture("clean_room_debugger.md")).map_err(|e| e.to_string())?;
    let tuple = |r: &lmx_core::debugger::DebugReport| {
        let s = r.scores;
        (s.faithfulness, s.completeness, s.minimality, s.accuracy)
    };
    let lib_ok = tuple(&reading) == (4, 4, 4, 4)
        && tuple(&clean) == (1, 2, 1, 1)
        && classify_reliability(&reading, DEFAULT_THRESHOLD).reliable
        && !classify_reliability(&clean, DEFAULT_THRESHOLD).reliable;
    if !lib_ok {
        return Err(format!("parsed {:?} and {:?}", tuple(&reading), tuple(&clean)));
    }

    // same verdicts through `debug` replaying the recorded cassette, then `eval`
    let reports = dir.join("worked_reports.jsonl");
    let cassette = dir.join("worked_cassette.jsonl");
    fs::copy(cli_fixture("worked_debug_cassette.jsonl"), &cassette).map_err(|e| e.to_string())?;
    lmx(&[
        "debug",
        "--bundles",
        s(&cli_fixture("worked_bundles.jsonl")),
        "--out",
        s(&reports),
        "--llm-mode",
        "record-replay",
        "--cassette",
        s(&cassette),
        "--target-model",
        "roberta-large",
    ])?;
    let rows = read_jsonl(&reports)?;
    let verdicts: Vec<(String, bool)> = rows
        .iter()
        .map(|r| (r["id"].as_str().unwrap_or("").to_string(), r["reliable"] == Value::Bool(true)))
        .collect();
    let eval_out = dir.join("worked_eval.json");
    lmx(&[
        "eval",
        "--dataset",
        s(&cli_fixture("worked_dataset.jsonl")),
        "--predictions",
        s(&cli_fixture("worked_bundles.jsonl")),
        "--debug-reports",
        s(&reports),
        "--out",
        s(&eval_out),
    ])?;
    let agreement = read_json(&eval_out)?["reliability_agreement"].as_f64();
    check(
        verdicts == [("reading".to_string(), true), ("clean_room".to_string(), false)] && agreement == Some(1.0),
        format!("scores (4,4,4,4) reliable and (1,2,1,1) unreliable; CLI verdicts {verdicts:?}, agreement {agreement:?}"),
    )
}

fn prompt_fidelity() -> Outcome {
    let question = "What is someone doing if he or she is sitting quietly and his or her eyes are moving?";
    let choices: Vec<String> = ["Reading", "Meditate", "Fall Asleep", "Bunk", "Think"].map(String::from).to_vec();
    let labels = ["quiet_chattering_mind", "not_making_sound", "mind_focuses", "glasses_for_people_with_poor_eyesight", "war"];
    let reasons: Vec<ReasonElement> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| ReasonElement {
            id: i as NodeId,
            label: l.to_string(),
            mass: 1.0 - i as f64 * 0.1,
            rank: i + 1,
        })
        .collect();
    let input = ExplainInput {
        task_type: "multiple-choice question answering",
        question,
        choices: &choices,
        prediction: Some(0),
        reasons: &reasons,
    };
    let e0 = trim(core_fixture("reading_e0.md"));
    let stage1 = render_stage1(&input).map_err(|e| e.to_string())?;
    let stage2 = render_stage2(&e0, &choices, 0).map_err(|e| e.to_string())?;
    let bundle: ExplanationBundle = serde_json::from_str(
        fs::read_to_string(cli_fixture("worked_bundles.jsonl")).map_err(|e| e.to_string())?.lines().next().ok_or("no bundle")?,
    )
    .map_err(|e| e.to_string())?;
    let debugger = render_debug_prompt("roberta-large", &bundle).map_err(|e| e.to_string())?;

    let goldens = [
        ("stage 1", &stage1, "reading_stage1_prompt.txt"),
        ("stage 2", &stage2, "reading_stage2_prompt.txt"),
        ("debugger", &debugger, "reading_debugger_prompt.txt"),
    ];
    for (name, got, file) in goldens {
        if *got != core_fixture(file) {
            return Err(format!("{name} render differs from {file}"));
        }
    }
    let slot_values = [
        (&stage1, question.to_string()),
        (&stage1, "A. Reading, B. Meditate, C. Fall Asleep, D. Bunk, E. Think".to_string()),
        (&stage1, "A. Reading".to_string()),
        (&stage1, "1. Quiet chattering mind, 2. Not making sound".to_string()),
        (&stage2, e0.clone()),
        (&stage2, "B. Meditate, C. Fall Asleep, D. Bunk, E. Think".to_string()),
        (&debugger, bundle.explanation()),
        (&debugger, "roberta-large".to_string()),
    ];
    let missing = slot_values.iter().filter(|(p, v)| !p.contains(v.as_str())).count();
    check(missing == 0, format!("3 golden files byte-identical, {} slot values verbatim", slot_values.len() - missing))
}

fn determinism(dir: &Path) -> Outcome {
    let d = dir.join("det");
    lmx(&["gen-synthetic", "--out-dir", s(&d), "--seed", "9", "--size", "16", "--test-size", "6", "--noise-degree", "2"])?;
    let kg = d.join("kg.tsv");
    let train_set = d.join("train.jsonl");
    let metrics = d.join("metrics.csv");
    let test_set = d.join("test.jsonl");
    let graph = ["--kg", s(&kg), "--embed-dim", "8", "--budget", "20"];
    let ckpt = d.join("model.ckpt");
    let mut train = vec!["train"];
    train.extend(graph);
    train.extend([
        "--train",
        s(&train_set),
        "--checkpoint",
        s(&ckpt),
        "--metrics",
        s(&metrics),
        "--hidden",
        "8",
        "--layers",
        "2",
        "--epochs",
        "1",
        "--seed",
        "5",
    ]);
    lmx(&train)?;
    let mut runs = Vec::new();
    for (i, workers) in ["1", "3"].iter().enumerate() {
        let out = d.join(format!("bundles{i}.jsonl"));
        let mut explain = vec!["explain"];
        explain.extend(graph);
        explain.extend([
            "--checkpoint",
            s(&ckpt),
            "--dataset",
            s(&test_set),
            "--out",
            s(&out),
            "--workers",
            workers,
        ]);
        lmx(&explain)?;
        runs.push(fs::read(&out).map_err(|e| e.to_string())?);
    }
    check(
        runs[0] == runs[1] && !runs[0].is_empty(),
        format!("two mock explain runs (1 and 3 workers): {} bytes each, identical = {}", runs[0].len(), runs[0] == runs[1]),
    )
}

fn likert(dir: &Path) -> Outcome {
    let lib: Vec<f64> = [1, 2, 3].iter().map(|&s| likert_normalize(s).unwrap_or(f64::NAN)).collect();
    let ratings = dir.join("likert.txt");
    fs::write(&ratings, "1\n2\n3\n").map_err(|e| e.to_string())?;
    let out = dir.join("likert_eval.json");
    lmx(&[
        "eval",
        "--dataset",
        s(&cli_fixture("worked_dataset.jsonl")),
        "--predictions",
        s(&cli_fixture("worked_bundles.jsonl")),
        "--likert",
        s(&ratings),
        "--out",
        s(&out),
    ])?;
    let cli: Vec<f64> = read_json(&out)?["likert"]["normalized"]
        .as_array()
        .ok_or("no likert block")?
        .iter()
        .filter_map(Value::as_f64)
        .collect();
    check(
        lib == [0.0, 0.5, 1.0] && cli == [0.0, 0.5, 1.0],
        format!("library {lib:?}, eval command {cli:?}"),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let d = dir.path();
    let criteria: [(&str, Box<dyn Fn() -> Outcome>); 10] = [
        ("attention normalization", Box::new(attention_normalization)),
        ("gradient correctness", Box::new(gradient_correctness)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("residual identity", Box::new(residual_identity)),
        ("overfit one item", Box::new(|| overfit_one(d))),
        ("synthetic benchmark", Box::new(|| synthetic_benchmark(d))),
        ("debugger fixtures", Box::new(|| worked_examples(d))),
        ("prompt fidelity", Box::new(prompt_fidelity)),
        ("explain determinism", Box::new(|| determinism(d))),
        ("likert normalization", Box::new(|| likert(d))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
