//! Turns one multiple-choice question into per-candidate element-graphs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::element::{build_element_graph, CandidateContext, ElementError, ElementGraph, RelevanceScorer, ScoreMode};
use crate::embed::{pool, EmbedError, EmbeddingProvider, LmRepresentation};
use crate::kg::{GroundedInput, KgError, KnowledgeGraph};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Element(#[from] ElementError),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSettings {
    /// Retrieval radius `L`.
    pub hops: usize,
    /// Pruning budget `K`.
    pub budget: usize,
    pub score_mode: ScoreMode,
    pub scorer_seed: u64,
}

impl Default for GraphSettings {
    fn default() -> Self {
        Self {
            hops: 2,
            budget: 200,
            score_mode: ScoreMode::Mlp,
            scorer_seed: 0,
        }
    }
}

/// One answer choice with everything the reasoner needs.
#[derive(Debug, Clone)]
pub struct AnswerCandidate {
    pub choice: String,
    pub graph: ElementGraph,
    pub lm: LmRepresentation,
}

pub struct GraphPipeline {
    pub kg: Arc<KnowledgeGraph>,
    pub provider: Arc<dyn EmbeddingProvider>,
    pub scorer: RelevanceScorer,
    pub settings: GraphSettings,
}

impl GraphPipeline {
    pub fn new(
        kg: Arc<KnowledgeGraph>,
        provider: Arc<dyn EmbeddingProvider>,
        settings: GraphSettings,
    ) -> Result<Self, PipelineError> {
        if settings.budget == 0 {
            return Err(PipelineError::Argument("budget must be >= 1".into()));
        }
        let scorer = RelevanceScorer::new(settings.score_mode, provider.dim(), settings.scorer_seed);
        Ok(Self {
            kg,
            provider,
            scorer,
            settings,
        })
    }

    pub fn ground(&self, question: &str, choices: &[String]) -> Result<GroundedInput, PipelineError> {
        if question.trim().is_empty() {
            return Err(PipelineError::Argument("question is empty".into()));
        }
        if choices.len() < 2 {
            return Err(PipelineError::Argument(format!(
                "need at least 2 choices, got {}",
                choices.len()
            )));
        }
        Ok(self.kg.ground(question, choices))
    }

    /// Element-graph for one choice of an already grounded input.
    pub fn element_graph(&self, grounded: &GroundedInput, choice: usize) -> Result<ElementGraph, PipelineError> {
        let seeds = grounded.seeds_for(choice);
        let neighborhood = self.kg.khop_neighborhood(&seeds, self.settings.hops)?;
        if neighborhood.is_empty() {
            return Ok(ElementGraph {
                nodes: Vec::new(),
                edges: Vec::new(),
                budget: self.settings.budget,
            });
        }
        let token_vectors = self.provider.embed_tokens(&grounded.tokens)?;
        let input = pool(&token_vectors, self.provider.pooling())?;
        let ctx = CandidateContext {
            kg: &self.kg,
            grounded,
            choice,
            input_embedding: &input,
        };
        Ok(build_element_graph(
            &ctx,
            &neighborhood,
            self.settings.budget,
            self.provider.as_ref(),
            &self.scorer,
        )?)
    }

    pub fn candidates(&self, question: &str, choices: &[String]) -> Result<Vec<AnswerCandidate>, PipelineError> {
        let grounded = self.ground(question, choices)?;
        choices
            .iter()
            .enumerate()
            .map(|(c, choice)| {
                Ok(AnswerCandidate {
                    choice: choice.clone(),
                    graph: self.element_graph(&grounded, c)?,
                    lm: self.provider.lm_representation(question, choice)?,
                })
            })
            .collect()
    }
}
