//! Experiment assembly: conjoint inputs per condition, phase schedules,
//! evaluation with normalized reward, CSV and SVG output.

mod config;
mod plan;
mod report;
mod run;

pub use config::{apply_config, parse_config};
pub use plan::{Experiment, ExperimentPlan, Phase, DESK_EVAL_EVERY, DESK_PHASE_EPOCHS, DESK_PHASE_STEPS};
pub use report::{emit_csv, emit_svg, parse_csv, read_csv, render_svg, write_csv, EvalRecord, CSV_HEADER};
pub use run::{
    evaluate, run_experiment, run_seed, AgentPolicy, EvalSummary, OraclePolicy, Policy, RandomPolicy, RunReport,
    SeedRun, EVAL_EPSILON,
};

use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentError, InputEncoding};
use crate::gridworld::{render, GridError, GridState, Observation, Setting, CELL, GRID, IMAGE};
use crate::ltn::{derive_fact_maps, Groundings, LtnError, FACT_PREDICATES};
use crate::numcore::{NumError, Tensor};
use crate::perception::{build_object_maps, upsample_maps, ChannelGrid, PerceptionError, PREDICATES};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("condition `{0}` needs {1} maps")]
    MissingMaps(Condition, &'static str),
    #[error("{name} maps have shape {rows}x{cols}x{channels}, expected {GRID}x{GRID}x{expected}")]
    MapShape {
        name: &'static str,
        rows: usize,
        cols: usize,
        channels: usize,
        expected: usize,
    },
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("no records")]
    NoRecords,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Ltn(#[from] LtnError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Which priors are stacked onto the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    None,
    Types,
    TypesFacts,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::None, Condition::Types, Condition::TypesFacts];

    pub fn name(self) -> &'static str {
        match self {
            Condition::None => "none",
            Condition::Types => "types",
            Condition::TypesFacts => "types_facts",
        }
    }

    pub fn uses_types(self) -> bool {
        self != Condition::None
    }

    pub fn uses_facts(self) -> bool {
        self == Condition::TypesFacts
    }

    /// Channels after the image: object maps, then fact maps.
    pub fn prior_channels(self) -> usize {
        match self {
            Condition::None => 0,
            Condition::Types => PREDICATES,
            Condition::TypesFacts => PREDICATES + FACT_PREDICATES.len(),
        }
    }

    pub fn in_channels(self) -> usize {
        Observation::CHANNELS + self.prior_channels()
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| HarnessError::Plan(format!("unknown condition `{s}`")))
    }
}

fn check_grid(name: &'static str, maps: &ChannelGrid, expected: usize) -> Result<()> {
    if maps.rows() != GRID || maps.cols() != GRID || maps.channels() != expected {
        return Err(HarnessError::MapShape {
            name,
            rows: maps.rows(),
            cols: maps.cols(),
            channels: maps.channels(),
            expected,
        });
    }
    Ok(())
}

/// Per-cell prior values for a condition, `[object maps | fact maps]` in
/// every cell.
pub fn cell_priors(
    condition: Condition,
    object_maps: Option<&ChannelGrid>,
    fact_maps: Option<&ChannelGrid>,
) -> Result<ChannelGrid> {
    let k = condition.prior_channels();
    let mut out = ChannelGrid::zeros(GRID, GRID, k);
    if condition.uses_types() {
        let obj = object_maps.ok_or(HarnessError::MissingMaps(condition, "object"))?;
        check_grid("object", obj, PREDICATES)?;
        for r in 0..GRID {
            for c in 0..GRID {
                for (ch, &v) in obj.cell(r, c).iter().enumerate() {
                    out.set(r, c, ch, v);
                }
            }
        }
    }
    if condition.uses_facts() {
        let facts = fact_maps.ok_or(HarnessError::MissingMaps(condition, "fact"))?;
        check_grid("fact", facts, FACT_PREDICATES.len())?;
        for r in 0..GRID {
            for c in 0..GRID {
                for (ch, &v) in facts.cell(r, c).iter().enumerate() {
                    out.set(r, c, PREDICATES + ch, v);
                }
            }
        }
    }
    Ok(out)
}

/// Stacks `[image | upsampled object maps | upsampled fact maps]` into a
/// `50×50×C_in` tensor.
pub fn build_input(
    obs: &Observation,
    condition: Condition,
    object_maps: Option<&ChannelGrid>,
    fact_maps: Option<&ChannelGrid>,
) -> Result<Tensor> {
    let priors = cell_priors(condition, object_maps, fact_maps)?;
    let c_in = condition.in_channels();
    let mut data = Vec::with_capacity(IMAGE * IMAGE * c_in);
    if priors.channels() == 0 {
        data.extend_from_slice(obs.data());
    } else {
        let up = upsample_maps(&priors, IMAGE, IMAGE)?;
        for (px, prior) in obs
            .data()
            .chunks_exact(Observation::CHANNELS)
            .zip(up.data().chunks_exact(priors.channels()))
        {
            data.extend_from_slice(px);
            data.extend_from_slice(prior);
        }
    }
    Ok(Tensor::new(vec![IMAGE, IMAGE, c_in], data)?)
}

/// Network input kept as the grid state plus per-cell priors; the image is
/// re-rendered when the input is written.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactInput {
    pub state: GridState,
    pub setting: Setting,
    /// `GRID×GRID×K` priors, channels-last.
    pub priors: Vec<f64>,
    channels: usize,
}

impl CompactInput {
    pub fn new(state: GridState, setting: Setting, priors: ChannelGrid) -> Result<Self> {
        check_grid("prior", &priors, priors.channels())?;
        let channels = priors.channels();
        Ok(Self {
            state,
            setting,
            priors: priors.data().to_vec(),
            channels,
        })
    }

    /// Renders the state and computes the priors the condition asks for.
    pub fn encode(
        state: GridState,
        setting: Setting,
        condition: Condition,
        groundings: Option<&Groundings>,
    ) -> Result<Self> {
        if !condition.uses_types() {
            return Self::new(state, setting, ChannelGrid::zeros(GRID, GRID, 0));
        }
        let obs = render(&state, &setting);
        let objects = build_object_maps(&obs);
        let facts = if condition.uses_facts() {
            let g = groundings.ok_or(HarnessError::MissingMaps(condition, "fact"))?;
            Some(derive_fact_maps(&objects, g)?)
        } else {
            None
        };
        let priors = cell_priors(condition, Some(&objects), facts.as_ref())?;
        Self::new(state, setting, priors)
    }

    /// The full tensor `build_input` would give for the same state.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let mut data = vec![0.0; IMAGE * IMAGE * (Observation::CHANNELS + self.channels)];
        let mut image = vec![0.0; Observation::LEN];
        self.write_image(&mut image);
        let c_in = Observation::CHANNELS + self.channels;
        for (i, px) in image.chunks_exact(Observation::CHANNELS).enumerate() {
            let (y, x) = (i / IMAGE, i % IMAGE);
            let out = &mut data[i * c_in..(i + 1) * c_in];
            out[..Observation::CHANNELS].copy_from_slice(px);
            let cell = ((y / CELL) * GRID + x / CELL) * self.channels;
            out[Observation::CHANNELS..].copy_from_slice(&self.priors[cell..cell + self.channels]);
        }
        Ok(Tensor::new(vec![IMAGE, IMAGE, c_in], data)?)
    }
}

impl InputEncoding for CompactInput {
    fn image_channels(&self) -> usize {
        Observation::CHANNELS
    }

    fn cell_channels(&self) -> usize {
        self.channels
    }

    fn write_image(&self, out: &mut [f64]) {
        out.copy_from_slice(render(&self.state, &self.setting).data());
    }

    fn write_cells(&self, out: &mut [f64]) {
        out.copy_from_slice(&self.priors);
    }
}
