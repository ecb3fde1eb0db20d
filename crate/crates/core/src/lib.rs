//! Knowledge-graph grounded explanations for multiple-choice predictions.
//!
//! The pipeline grounds a question and its answer choices in a knowledge
//! graph, prunes the retrieved neighborhood to an element-graph, reasons
//! over it with a typed graph attention network, and turns the final-layer
//! attention into ranked reason-elements that drive a two-stage
//! explanation prompt and a four-dimension debugger verdict.

pub mod checkpoint;
pub mod debugger;
pub mod element;
pub mod embed;
pub mod eval;
pub mod explain;
pub mod gat;
pub mod kg;
pub mod llm;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod reasoner;
pub mod synthetic;
pub mod template;
