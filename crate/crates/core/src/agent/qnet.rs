use std::io::{self, Read, Write};

use rand::Rng;

use super::{AgentError, Result};
use crate::gridworld::{Action, CELL, IMAGE};
use crate::numcore::{forward_stack, init_stack, io as tio, Graph, LayerSpec, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 8] = b"LTNRLQNT";
const CHECKPOINT_VERSION: u32 = 1;

/// Sizes of a dueling Q-network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QNetConfig {
    pub in_channels: usize,
    /// Trailing input channels that are constant over every 10×10 cell.
    /// They may be supplied once per cell instead of per pixel.
    pub cell_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Filters of the cell-aligned first convolution.
    pub conv1: usize,
    /// Filters of the 3×3 second convolution.
    pub conv2: usize,
    pub hidden: usize,
}

impl QNetConfig {
    /// Full-size network over a 50×50 input.
    pub fn standard(in_channels: usize) -> Self {
        Self {
            in_channels,
            cell_channels: in_channels.saturating_sub(3),
            height: IMAGE,
            width: IMAGE,
            conv1: 16,
            conv2: 32,
            hidden: 128,
        }
    }

    fn cells(&self) -> (usize, usize) {
        (self.height / CELL, self.width / CELL)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels > self.cell_channels
            && self.height >= CELL
            && self.width >= CELL
            && self.height % CELL == 0
            && self.width % CELL == 0
            && self.conv1 > 0
            && self.conv2 > 0
            && self.hidden > 0;
        if ok {
            Ok(())
        } else {
            Err(AgentError::Config(format!("invalid network sizes {self:?}")))
        }
    }

    pub fn input_len(&self) -> usize {
        self.height * self.width * self.in_channels
    }

    pub fn image_channels(&self) -> usize {
        self.in_channels - self.cell_channels
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.image_channels()
    }

    pub fn cells_len(&self) -> usize {
        let (gh, gw) = self.cells();
        gh * gw * self.cell_channels
    }

    fn trunk(&self) -> Vec<LayerSpec> {
        let (gh, gw) = self.cells();
        vec![
            LayerSpec::Conv2d {
                in_channels: self.in_channels,
                out_channels: self.conv1,
                kernel_h: CELL,
                kernel_w: CELL,
                stride: CELL,
                pad: false,
            },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                in_channels: self.conv1,
                out_channels: self.conv2,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                pad: true,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                input: gh * gw * self.conv2,
                output: self.hidden,
            },
            LayerSpec::Relu,
        ]
    }

    fn value_head(&self) -> [LayerSpec; 1] {
        [LayerSpec::Dense {
            input: self.hidden,
            output: 1,
        }]
    }

    fn advantage_head(&self) -> [LayerSpec; 1] {
        [LayerSpec::Dense {
            input: self.hidden,
            output: Action::COUNT,
        }]
    }

    fn param_names(&self) -> Vec<String> {
        ["conv1", "conv2", "fc", "value", "advantage"]
            .iter()
            .flat_map(|l| [format!("{l}.weight"), format!("{l}.bias")])
            .collect()
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.trunk()
            .iter()
            .chain(&self.value_head())
            .chain(&self.advantage_head())
            .flat_map(|l| l.param_shapes())
            .collect()
    }
}

/// Outputs of one forward pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct QOutputs {
    pub q: Var,
    pub value: Var,
    pub advantage: Var,
}

/// Dueling Q-network: Q = V + A − mean(A).
#[derive(Debug, Clone)]
pub struct QNetwork {
    config: QNetConfig,
    params: Vec<Tensor>,
}

/// Equal configuration and bit-equal weights; gradient buffers are ignored.
impl PartialEq for QNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.shape() == b.shape() && a.data() == b.data())
    }
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(config: QNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = init_stack(&config.trunk(), rng)?;
        params.extend(init_stack(&config.value_head(), rng)?);
        params.extend(init_stack(&config.advantage_head(), rng)?);
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &QNetConfig {
        &self.config
    }

    pub fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Overwrites every weight with `other`'s.
    pub fn copy_from(&mut self, other: &QNetwork) -> Result<()> {
        if self.config != other.config {
            return Err(AgentError::Config(format!(
                "cannot copy {:?} into {:?}",
                other.config, self.config
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Records the network on `g`, whose parameter slice must be this
    /// network's parameters. `x` is `[N, H, W, C]`. Image channels are
    /// centered on their per-sample mean before the first conv.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<QOutputs> {
        let x = g.center_channels(x, self.config.image_channels())?;
        let (h, next) = forward_stack(g, &self.config.trunk(), 0, x)?;
        self.heads(g, h, next)
    }

    /// Same network with the input split into full-resolution image
    /// channels `[N, H, W, C_img]` and per-cell channels `[N, H/10, W/10, K]`.
    pub fn forward_blocks(&self, g: &mut Graph<'_>, image: Var, cells: Option<Var>) -> Result<QOutputs> {
        let image = g.center_channels(image, self.config.image_channels())?;
        let (w, b) = (g.param(0)?, g.param(1)?);
        let h = g.conv2d_blocks(image, cells, w, b)?;
        let (h, next) = forward_stack(g, &self.config.trunk()[1..], 2, h)?;
        self.heads(g, h, next)
    }

    fn heads(&self, g: &mut Graph<'_>, h: Var, next: usize) -> Result<QOutputs> {
        let (value, next) = forward_stack(g, &self.config.value_head(), next, h)?;
        let (advantage, _) = forward_stack(g, &self.config.advantage_head(), next, h)?;
        let q = g.dueling(value, advantage)?;
        Ok(QOutputs { q, value, advantage })
    }

    fn check_batch(&self, inputs: &[f64], n: usize) -> Result<()> {
        let want = n * self.config.input_len();
        if n == 0 || inputs.len() != want {
            return Err(AgentError::InputShape {
                expected: self.config.input_len(),
                channels: self.config.in_channels,
                got: inputs.len(),
                batch: n,
            });
        }
        Ok(())
    }

    /// Q-values for `n` stacked channels-last inputs.
    pub fn q_batch(&self, inputs: &[f64], n: usize) -> Result<Vec<[f64; Action::COUNT]>> {
        Ok(self.forward_values(inputs, n)?.0)
    }

    /// Q-values together with the value and advantage heads.
    pub fn forward_values(&self, inputs: &[f64], n: usize) -> Result<(Vec<[f64; Action::COUNT]>, Vec<f64>, Vec<[f64; Action::COUNT]>)> {
        self.check_batch(inputs, n)?;
        let c = &self.config;
        let mut g = Graph::new(&self.params);
        let x = g.input(Tensor::new(vec![n, c.height, c.width, c.in_channels], inputs.to_vec())?);
        let out = self.forward(&mut g, x)?;
        let rows = |v: Var, g: &Graph<'_>| -> Vec<[f64; Action::COUNT]> {
            g.value(v)
                .chunks_exact(Action::COUNT)
                .map(|r| r.try_into().expect("row width"))
                .collect()
        };
        Ok((rows(out.q, &g), g.value(out.value).to_vec(), rows(out.advantage, &g)))
    }

    /// Records the block-split input of `n` samples on `g`.
    pub fn block_inputs(&self, g: &mut Graph<'_>, image: Vec<f64>, cells: Vec<f64>, n: usize) -> Result<(Var, Option<Var>)> {
        let c = &self.config;
        if n == 0 || image.len() != n * c.image_len() || cells.len() != n * c.cells_len() {
            return Err(AgentError::InputShape {
                expected: c.input_len(),
                channels: c.in_channels,
                got: (image.len() + cells.len() * CELL * CELL) / n.max(1),
                batch: n,
            });
        }
        let img = g.input(Tensor::new(vec![n, c.height, c.width, c.image_channels()], image)?);
        let cells = if c.cell_channels > 0 {
            let (gh, gw) = c.cells();
            Some(g.input(Tensor::new(vec![n, gh, gw, c.cell_channels], cells)?))
        } else {
            None
        };
        Ok((img, cells))
    }

    /// Q-values for `n` block-split inputs.
    pub fn q_batch_blocks(&self, image: Vec<f64>, cells: Vec<f64>, n: usize) -> Result<Vec<[f64; Action::COUNT]>> {
        let mut g = Graph::new(&self.params);
        let (img, cells) = self.block_inputs(&mut g, image, cells, n)?;
        let out = self.forward_blocks(&mut g, img, cells)?;
        Ok(g.value(out.q)
            .chunks_exact(Action::COUNT)
            .map(|r| r.try_into().expect("row width"))
            .collect())
    }

    /// Q-values of one input.
    pub fn q_values(&self, input: &[f64]) -> Result<[f64; Action::COUNT]> {
        Ok(self.q_batch(input, 1)?[0])
    }

    /// Writes the checkpoint: magic, version, input channels, then every
    /// parameter as a named tensor.
    pub fn save<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.config.in_channels as u32).to_le_bytes())?;
        for (name, p) in self.config.param_names().iter().zip(&self.params) {
            tio::write_tensor(w, name, p)?;
        }
        Ok(())
    }

    /// Reads a full-size network checkpoint written by [`QNetwork::save`].
    pub fn load<R: Read>(r: &mut R) -> io::Result<Self> {
        let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
        let mut magic = [0; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a Q-network checkpoint".into()));
        }
        let mut b = [0; 4];
        r.read_exact(&mut b)?;
        let version = u32::from_le_bytes(b);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut b)?;
        let config = QNetConfig::standard(u32::from_le_bytes(b) as usize);
        config.validate().map_err(|e| bad(e.to_string()))?;
        let records = tio::read_all(r)?;
        let (names, shapes) = (config.param_names(), config.param_shapes());
        if records.len() != names.len() {
            return Err(bad(format!("expected {} tensors, found {}", names.len(), records.len())));
        }
        let mut params = Vec::with_capacity(records.len());
        for ((name, t), (want_name, want_shape)) in records.into_iter().zip(names.iter().zip(&shapes)) {
            if name != *want_name || t.shape() != want_shape.as_slice() {
                return Err(bad(format!(
                    "tensor `{name}` {:?}, expected `{want_name}` {want_shape:?}",
                    t.shape()
                )));
            }
            params.push(t);
        }
        Ok(Self { config, params })
    }
}
