//! Differentiable fuzzy first-order logic over per-cell type scores.
//!
//! Type predicates read detector channels; learnable predicates are small
//! networks trained so that a theory's axioms hold on sampled cells.

mod formula;
mod grounding;
mod parser;

pub use formula::{fuzzy, Formula, Theory};
pub use grounding::{
    derive_fact_maps, eval_formula, satisfaction, train_groundings, Grounding, Groundings,
    RenderedCells, SampleSource, TrainConfig, Trained, FACT_PREDICATES, GROUNDING_LAYERS,
};
pub use parser::parse_theory;

use thiserror::Error;

use crate::numcore::NumError;
use crate::perception::PREDICATE_NAMES;

/// Predicates grounded directly in detector channels.
pub const KNOWN_PREDICATES: [&str; 4] = PREDICATE_NAMES;

/// One-based source position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LtnError {
    #[error("syntax error at {line}:{col}: {message}")]
    Syntax {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("undeclared predicate `{name}` at {line}:{col}")]
    UndeclaredPredicate { name: String, line: usize, col: usize },
    #[error("predicate `{name}` declared twice or shadows a type predicate at {line}:{col}")]
    DuplicatePredicate { name: String, line: usize, col: usize },
    #[error("variable `{found}` at {line}:{col}, but the theory quantifies over `{expected}`")]
    MultipleVariables {
        expected: String,
        found: String,
        line: usize,
        col: usize,
    },
    #[error("theory has no axioms")]
    NoAxioms,
    #[error("theory has no learnable predicates")]
    NoLearnable,
    #[error("sample set is empty")]
    EmptySamples,
    #[error("predicate `{0}` has no grounding")]
    Ungrounded(String),
    #[error("groundings have not been trained")]
    Untrained,
    #[error("sample has {0} values, expected 4")]
    SampleWidth(usize),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Shipped theory files for scenarios 1–4.
pub fn scenario_theory_text(n: u8) -> Option<&'static str> {
    match n {
        1 => Some(include_str!("../../theories/scenario1.ltn")),
        2 => Some(include_str!("../../theories/scenario2.ltn")),
        3 => Some(include_str!("../../theories/scenario3.ltn")),
        4 => Some(include_str!("../../theories/scenario4.ltn")),
        _ => None,
    }
}

pub fn scenario_theory(n: u8) -> Option<Theory> {
    scenario_theory_text(n).map(|t| parse_theory(t).expect("shipped theories parse"))
}
