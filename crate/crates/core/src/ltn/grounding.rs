use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use rand::Rng;

use super::formula::{Formula, Theory};
use super::{LtnError, KNOWN_PREDICATES};
use crate::gridworld::{render, GridState, Scenario, Setting};
use crate::numcore::{forward_stack, init_stack, io as tio, Adam, AdamConfig, Graph, LayerSpec, Tensor, Var};
use crate::perception::{build_object_maps, ChannelGrid, PREDICATES};

type Result<T> = std::result::Result<T, LtnError>;

/// Network used for every learnable predicate.
pub const GROUNDING_LAYERS: [LayerSpec; 4] = [
    LayerSpec::Dense {
        input: PREDICATES,
        output: 16,
    },
    LayerSpec::Tanh,
    LayerSpec::Dense { input: 16, output: 1 },
    LayerSpec::Sigmoid,
];
const PARAMS_PER_NET: usize = 4;

/// Fact-map channel order.
pub const FACT_PREDICATES: [&str; 2] = ["goto", "avoid"];

const FILE_MAGIC: &[u8; 8] = b"LTNRLGND";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy)]
pub enum Grounding {
    /// Reads a detector channel.
    Known(usize),
    /// Index of a network in [`Groundings::params`].
    Learnable(usize),
    /// Fixed function of the 4-score vector.
    Function(fn(&[f64]) -> f64),
}

/// Predicate name → grounding, plus the parameters of all learnable
/// networks laid out back to back.
#[derive(Debug, Clone)]
pub struct Groundings {
    map: BTreeMap<String, Grounding>,
    learnable: Vec<String>,
    params: Vec<Tensor>,
    trained: bool,
}

impl Groundings {
    fn with_known() -> BTreeMap<String, Grounding> {
        KNOWN_PREDICATES
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), Grounding::Known(i)))
            .collect()
    }

    fn from_nets(learnable: Vec<String>, params: Vec<Tensor>, trained: bool) -> Self {
        let mut map = Self::with_known();
        for (i, name) in learnable.iter().enumerate() {
            map.insert(name.clone(), Grounding::Learnable(i));
        }
        Self {
            map,
            learnable,
            params,
            trained,
        }
    }

    /// Type predicates plus a freshly initialized network for each of the
    /// theory's learnable predicates.
    pub fn new<R: Rng + ?Sized>(theory: &Theory, rng: &mut R) -> Result<Self> {
        let mut params = Vec::new();
        for _ in &theory.learnable {
            params.extend(init_stack(&GROUNDING_LAYERS, rng)?);
        }
        Ok(Self::from_nets(theory.learnable.clone(), params, false))
    }

    /// Only the type predicates.
    pub fn known_only() -> Self {
        Self::from_nets(Vec::new(), Vec::new(), false)
    }

    pub fn set(&mut self, name: &str, g: Grounding) {
        self.map.insert(name.to_string(), g);
    }

    pub fn get(&self, name: &str) -> Option<Grounding> {
        self.map.get(name).copied()
    }

    pub fn learnable(&self) -> &[String] {
        &self.learnable
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Truth values of one predicate on a batch of samples.
    pub fn truth(&self, name: &str, samples: &[[f64; PREDICATES]]) -> Result<Vec<f64>> {
        let f = Formula::atom(name, "x");
        eval_batch(&f, self, samples)
    }

    pub fn save<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(FILE_MAGIC)?;
        w.write_all(&FILE_VERSION.to_le_bytes())?;
        for (i, name) in self.learnable.iter().enumerate() {
            for j in 0..PARAMS_PER_NET {
                tio::write_tensor(w, &format!("{name}.{j}"), &self.params[i * PARAMS_PER_NET + j])?;
            }
        }
        Ok(())
    }

    /// Reads groundings written by [`Groundings::save`]; they count as trained.
    pub fn load<R: Read>(r: &mut R) -> io::Result<Self> {
        let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
        let mut magic = [0; 8];
        r.read_exact(&mut magic)?;
        if &magic != FILE_MAGIC {
            return Err(bad("not a groundings file".into()));
        }
        let mut v = [0; 4];
        r.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != FILE_VERSION {
            return Err(bad(format!("unsupported groundings version {version}")));
        }
        let records = tio::read_all(r)?;
        if records.len() % PARAMS_PER_NET != 0 {
            return Err(bad(format!("{} tensors do not form whole networks", records.len())));
        }
        let expected: Vec<Vec<usize>> = GROUNDING_LAYERS.iter().flat_map(|l| l.param_shapes()).collect();
        let mut learnable = Vec::new();
        let mut params = Vec::new();
        for chunk in records.chunks(PARAMS_PER_NET) {
            let name = chunk[0].0.split('.').next().unwrap_or("").to_string();
            for (j, (rec_name, t)) in chunk.iter().enumerate() {
                if *rec_name != format!("{name}.{j}") || t.shape() != expected[j].as_slice() {
                    return Err(bad(format!("unexpected tensor `{rec_name}` {:?}", t.shape())));
                }
                params.push(t.clone());
            }
            learnable.push(name);
        }
        Ok(Self::from_nets(learnable, params, true))
    }
}

fn check_grounded(f: &Formula, g: &Groundings) -> Result<()> {
    let mut missing = None;
    f.visit_atoms(&mut |p, _| {
        if missing.is_none() && g.get(p).is_none() {
            missing = Some(p.to_string());
        }
    });
    missing.map_or(Ok(()), |p| Err(LtnError::Ungrounded(p)))
}

fn sample_tensor(samples: &[[f64; PREDICATES]]) -> Tensor {
    let data = samples.iter().flatten().copied().collect();
    Tensor::new(vec![samples.len(), PREDICATES], data).expect("shape matches data")
}

/// Records a formula over a batch `x: [N, 4]`, giving truths `[N]`.
fn formula_var(
    g: &mut Graph<'_>,
    f: &Formula,
    groundings: &Groundings,
    x: Var,
    samples: &[[f64; PREDICATES]],
) -> Result<Var> {
    let v = match f {
        Formula::Atom { predicate, .. } => {
            match groundings.get(predicate).ok_or_else(|| LtnError::Ungrounded(predicate.clone()))? {
                Grounding::Known(ch) => g.column(x, ch)?,
                Grounding::Learnable(k) => {
                    let (out, _) = forward_stack(g, &GROUNDING_LAYERS, k * PARAMS_PER_NET, x)?;
                    g.reshape(out, vec![samples.len()])?
                }
                Grounding::Function(func) => {
                    g.input(Tensor::from_vec(samples.iter().map(|s| func(s)).collect()))
                }
            }
        }
        Formula::Not(a) => {
            let a = formula_var(g, a, groundings, x, samples)?;
            g.affine(a, -1.0, 1.0)?
        }
        Formula::And(a, b) => {
            let (a, b) = pair(g, a, b, groundings, x, samples)?;
            // max(0, a + b − 1)
            let s = g.add(a, b)?;
            let s = g.affine(s, 1.0, -1.0)?;
            g.relu(s)?
        }
        Formula::Or(a, b) => {
            let (a, b) = pair(g, a, b, groundings, x, samples)?;
            // min(1, a + b) = 1 − relu(1 − a − b)
            let s = g.add(a, b)?;
            let s = g.affine(s, -1.0, 1.0)?;
            let s = g.relu(s)?;
            g.affine(s, -1.0, 1.0)?
        }
        Formula::Implies(a, b) => {
            let (a, b) = pair(g, a, b, groundings, x, samples)?;
            implies_var(g, a, b)?
        }
        Formula::Iff(a, b) => {
            let (a, b) = pair(g, a, b, groundings, x, samples)?;
            let ab = implies_var(g, a, b)?;
            let ba = implies_var(g, b, a)?;
            g.minimum(ab, ba)?
        }
    };
    Ok(v)
}

fn pair(
    g: &mut Graph<'_>,
    a: &Formula,
    b: &Formula,
    groundings: &Groundings,
    x: Var,
    samples: &[[f64; PREDICATES]],
) -> Result<(Var, Var)> {
    Ok((
        formula_var(g, a, groundings, x, samples)?,
        formula_var(g, b, groundings, x, samples)?,
    ))
}

/// min(1, 1 − a + b) = 1 − relu(a − b)
fn implies_var(g: &mut Graph<'_>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.relu(d)?;
    Ok(g.affine(d, -1.0, 1.0)?)
}

fn satisfaction_var(
    g: &mut Graph<'_>,
    theory: &Theory,
    groundings: &Groundings,
    samples: &[[f64; PREDICATES]],
) -> Result<Var> {
    if samples.is_empty() {
        return Err(LtnError::EmptySamples);
    }
    if theory.axioms.is_empty() {
        return Err(LtnError::NoAxioms);
    }
    let x = g.input(sample_tensor(samples));
    let mut total: Option<Var> = None;
    for axiom in &theory.axioms {
        let t = formula_var(g, axiom, groundings, x, samples)?;
        let m = g.mean(t)?;
        total = Some(match total {
            Some(acc) => g.add(acc, m)?,
            None => m,
        });
    }
    let total = total.expect("at least one axiom");
    Ok(g.affine(total, 1.0 / theory.axioms.len() as f64, 0.0)?)
}

fn eval_batch(f: &Formula, groundings: &Groundings, samples: &[[f64; PREDICATES]]) -> Result<Vec<f64>> {
    check_grounded(f, groundings)?;
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new(&groundings.params);
    let x = g.input(sample_tensor(samples));
    let v = formula_var(&mut g, f, groundings, x, samples)?;
    Ok(g.value(v).to_vec())
}

/// Truth of `f` for one domain element.
pub fn eval_formula(f: &Formula, groundings: &Groundings, x: &[f64]) -> Result<f64> {
    let sample: [f64; PREDICATES] = x.try_into().map_err(|_| LtnError::SampleWidth(x.len()))?;
    Ok(eval_batch(f, groundings, &[sample])?[0])
}

/// Mean over axioms of the mean truth over samples.
pub fn satisfaction(theory: &Theory, groundings: &Groundings, samples: &[[f64; PREDICATES]]) -> Result<f64> {
    for axiom in &theory.axioms {
        check_grounded(axiom, groundings)?;
    }
    let mut g = Graph::new(&groundings.params);
    let s = satisfaction_var(&mut g, theory, groundings, samples)?;
    Ok(g.value(s)[0])
}

/// Supplies a training batch of domain elements per iteration.
pub trait SampleSource {
    fn batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<[f64; PREDICATES]>;
}

/// The 25 cells of a freshly reset and rendered state, plus the four
/// one-hot vectors and the zero vector.
#[derive(Debug, Clone, Copy)]
pub struct RenderedCells {
    pub scenario: Scenario,
    pub setting: Setting,
}

impl RenderedCells {
    pub const CANONICAL: [[f64; PREDICATES]; 5] = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, 0.0],
    ];
}

impl SampleSource for RenderedCells {
    fn batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<[f64; PREDICATES]> {
        let state = GridState::reset(rng, &self.scenario);
        let maps = build_object_maps(&render(&state, &self.setting));
        let mut out: Vec<[f64; PREDICATES]> = maps
            .data()
            .chunks_exact(PREDICATES)
            .map(|c| c.try_into().expect("chunk width"))
            .collect();
        out.extend_from_slice(&Self::CANONICAL);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub groundings: Groundings,
    /// Satisfaction of each iteration's batch before its update.
    pub trace: Vec<f64>,
}

impl Trained {
    pub fn best_satisfaction(&self) -> f64 {
        self.trace.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Fits fresh networks for the theory's learnable predicates by minimizing
/// `1 − satisfaction`.
pub fn train_groundings<S, R>(theory: &Theory, source: &mut S, config: &TrainConfig, rng: &mut R) -> Result<Trained>
where
    S: SampleSource,
    R: Rng + ?Sized,
{
    if theory.learnable.is_empty() {
        return Err(LtnError::NoLearnable);
    }
    let mut groundings = Groundings::new(theory, rng)?;
    let mut adam = Adam::new(config.optimizer, &groundings.params)?;
    let mut trace = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let samples = source.batch(rng);
        let grads = {
            let mut g = Graph::new(&groundings.params);
            let sat = satisfaction_var(&mut g, theory, &groundings, &samples)?;
            trace.push(g.value(sat)[0]);
            let loss = g.affine(sat, -1.0, 1.0)?;
            g.backward(loss)?
        };
        for p in &mut groundings.params {
            p.zero_grad();
        }
        grads.accumulate_into(&mut groundings.params)?;
        adam.step(&mut groundings.params)?;
    }
    groundings.trained = true;
    Ok(Trained { groundings, trace })
}

/// Applies the trained `goto` and `avoid` groundings to every cell of the
/// object maps, giving a grid with channels (goto, avoid).
pub fn derive_fact_maps(object_maps: &ChannelGrid, groundings: &Groundings) -> Result<ChannelGrid> {
    if !groundings.trained {
        return Err(LtnError::Untrained);
    }
    if object_maps.channels() != PREDICATES {
        return Err(LtnError::SampleWidth(object_maps.channels()));
    }
    let samples: Vec<[f64; PREDICATES]> = object_maps
        .data()
        .chunks_exact(PREDICATES)
        .map(|c| c.try_into().expect("chunk width"))
        .collect();
    let (rows, cols) = (object_maps.rows(), object_maps.cols());
    let mut out = ChannelGrid::zeros(rows, cols, FACT_PREDICATES.len());
    for (ch, name) in FACT_PREDICATES.iter().enumerate() {
        let truth = groundings.truth(name, &samples)?;
        for (i, v) in truth.into_iter().enumerate() {
            out.set(i / cols, i % cols, ch, v);
        }
    }
    Ok(out)
}
