//! Planted-path benchmark generator.
//!
//! Every item owns a private knowledge-graph component. Two question
//! concepts reach the gold answer through planted two-hop paths
//! `q_k → m_k → a*`; each distractor sits in its own component with only
//! noise neighbors. Every concept gets a few leaf noise neighbors so the
//! retrieved neighborhoods are not trivially small.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{GraphBuilder, KnowledgeGraph, RelationId};
use crate::reasoner::QaItem;

pub const RELATIONS: [&str; 10] = [
    "antonym",
    "at_location",
    "capable_of",
    "causes",
    "desires",
    "has_property",
    "is_a",
    "part_of",
    "related_to",
    "used_for",
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("verification failed for item {item}: {reason}")]
    Verification { item: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub distractors: usize,
    /// Leaf neighbors attached to every item concept.
    pub noise_degree: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            train_size: 500,
            test_size: 100,
            distractors: 3,
            noise_degree: 3,
        }
    }
}

/// Concepts on the planted paths of one item: `[q1, m1, q2, m2, a*]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedPath {
    pub id: String,
    pub concepts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub edges: Vec<(String, String, String)>,
    pub train: Vec<QaItem>,
    pub test: Vec<QaItem>,
    pub planted: Vec<PlantedPath>,
}

struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn next(&mut self) -> String {
        loop {
            let syllables = self.rng.random_range(3..=4);
            let mut w = String::with_capacity(syllables * 2);
            for _ in 0..syllables {
                w.push(CONSONANTS[self.rng.random_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[self.rng.random_range(0..VOWELS.len())] as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticData, SyntheticError> {
    if config.train_size == 0 {
        return Err(SyntheticError::Argument("size must be >= 1".into()));
    }
    if config.distractors == 0 {
        return Err(SyntheticError::Argument("need at least one distractor".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed)),
        used: HashSet::new(),
    };
    let mut edges = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut planted = Vec::new();

    let rel = |rng: &mut ChaCha8Rng| RELATIONS[rng.random_range(0..RELATIONS.len())].to_string();
    for n in 0..config.train_size + config.test_size {
        let (split, idx) = if n < config.train_size {
            ("train", n)
        } else {
            ("test", n - config.train_size)
        };
        let id = format!("{split}-{idx:04}");
        let [q1, m1, q2, m2, gold] = std::array::from_fn(|_| words.next());
        // planted links are stored in both directions, as KGs usually keep inverses
        for (a, b) in [(&q1, &m1), (&m1, &gold), (&q2, &m2), (&m2, &gold)] {
            edges.push((a.clone(), rel(&mut rng), b.clone()));
            edges.push((b.clone(), rel(&mut rng), a.clone()));
        }
        let distractors: Vec<String> = (0..config.distractors).map(|_| words.next()).collect();
        for concept in [&q1, &m1, &q2, &m2, &gold].into_iter().chain(&distractors) {
            for _ in 0..config.noise_degree {
                let leaf = words.next();
                let r = rel(&mut rng);
                if rng.random_bool(0.5) {
                    edges.push((concept.clone(), r, leaf));
                } else {
                    edges.push((leaf, r, concept.clone()));
                }
            }
        }
        let mut choices: Vec<String> = distractors.clone();
        choices.push(gold.clone());
        choices.shuffle(&mut rng);
        let answer = choices.iter().position(|c| *c == gold).expect("gold is a choice");
        let item = QaItem {
            id: id.clone(),
            question: format!("Which concept do {q1} and {q2} lead to?"),
            choices,
            answer: Some(answer),
        };
        if split == "train" {
            train.push(item);
        } else {
            test.push(item);
        }
        planted.push(PlantedPath {
            id,
            concepts: vec![q1, m1, q2, m2, gold],
        });
    }
    let data = SyntheticData {
        edges,
        train,
        test,
        planted,
    };
    verify(&data)?;
    Ok(data)
}

pub fn build_graph(data: &SyntheticData) -> KnowledgeGraph {
    let mut b = GraphBuilder::new(RELATIONS.iter().map(|r| r.to_string()).collect());
    for (h, r, t) in &data.edges {
        let rid = RELATIONS.iter().position(|x| x == r).expect("known relation") as RelationId;
        b.add_edge(h, rid, t);
    }
    b.build()
}

/// Gold within two hops of every question concept; distractors at three or more.
pub fn verify(data: &SyntheticData) -> Result<(), SyntheticError> {
    let kg = build_graph(data);
    let fail = |item: &str, reason: String| SyntheticError::Verification {
        item: item.to_string(),
        reason,
    };
    for (item, path) in data.train.iter().chain(&data.test).zip(&data.planted) {
        let id = |label: &str| {
            kg.node_id(label)
                .ok_or_else(|| fail(&item.id, format!("concept `{label}` missing from graph")))
        };
        let grounded = kg.ground(&item.question, &item.choices);
        let q: BTreeSet<_> = [id(&path.concepts[0])?, id(&path.concepts[2])?].into();
        if grounded.question != q {
            return Err(fail(&item.id, "question grounding differs from the planted concepts".into()));
        }
        for &seed in &q {
            let reach = kg
                .khop_neighborhood(&BTreeSet::from([seed]), 2)
                .map_err(|e| fail(&item.id, e.to_string()))?
                .nodes;
            for (c, choice) in item.choices.iter().enumerate() {
                let near = reach.contains(&id(choice)?);
                if Some(c) == item.answer && !near {
                    return Err(fail(&item.id, format!("gold `{choice}` farther than 2 hops")));
                }
                if Some(c) != item.answer && near {
                    return Err(fail(&item.id, format!("distractor `{choice}` within 2 hops")));
                }
            }
        }
    }
    Ok(())
}

/// Writes `kg.tsv`, `relations.txt`, `train.jsonl`, `test.jsonl` and `planted.jsonl`.
pub fn write_files(data: &SyntheticData, dir: &Path) -> Result<(), SyntheticError> {
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|source| SyntheticError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    fs::create_dir_all(dir).map_err(|source| SyntheticError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write("relations.txt", RELATIONS.iter().map(|r| format!("{r}\n")).collect())?;
    write(
        "kg.tsv",
        data.edges.iter().map(|(h, r, t)| format!("{h}\t{r}\t{t}\n")).collect(),
    )?;
    write("train.jsonl", jsonl(&data.train))?;
    write("test.jsonl", jsonl(&data.test))?;
    write("planted.jsonl", jsonl(&data.planted))?;
    Ok(())
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("plain data serializes") + "\n")
        .collect()
}

pub fn load_planted(path: &Path) -> Result<Vec<PlantedPath>, SyntheticError> {
    let text = fs::read_to_string(path).map_err(|source| SyntheticError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| SyntheticError::Argument(format!("{}: line {}: {e}", path.display(), n + 1)))
        })
        .collect()
}
