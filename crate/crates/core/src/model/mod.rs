//! Residual network whose blocks carry a micro-attention unit.
//!
//! Each block computes three feature maps from its input `x`:
//!
//! ```text
//! L1 = conv1x1(x)                 shortcut projection, stride s
//! L2 = relu(conv3x3(x))           stride s
//! L3 = conv3x3(L2)
//! T  = L1 + L3
//! M  = mean_over_channels(conv1x1_star(concat(L1, L2, L3)))
//! O  = relu(T * (1 + M))
//! ```
//!
//! `M` has one channel and is broadcast over the channels of `T`. The
//! attention kernel has no bias, so a zero kernel gives `M = 0` and the block
//! reduces exactly to the plain residual block `relu(T)`.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadMode, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Channel layout of a single residual attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub cin: usize,
    /// Output channels of the 1×1 shortcut conv.
    pub c1: usize,
    /// Output channels of the first 3×3 conv.
    pub c2: usize,
    /// Output channels of the second 3×3 conv; must equal `c1`.
    pub c3: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub fn new(cin: usize, width: usize, stride: usize) -> Self {
        BlockSpec { cin, c1: width, c2: width, c3: width, stride }
    }

    /// Channels of the concatenated multi-scale features, `c1 + c2 + c3`.
    pub fn concat_channels(&self) -> usize {
        self.c1 + self.c2 + self.c3
    }

    pub fn validate(&self) -> Result<()> {
        if self.cin == 0 || self.c1 == 0 || self.c2 == 0 || self.c3 == 0 {
            return Err(Error::config(format!("block {self:?} has a zero channel count")));
        }
        if self.c1 != self.c3 {
            return Err(Error::config(format!(
                "block needs c1 == c3 to sum the shortcut and conv paths, got {} and {}",
                self.c1, self.c3
            )));
        }
        if self.stride == 0 {
            return Err(Error::config("block stride must be positive"));
        }
        Ok(())
    }

    /// Spatial size after this block, or an error when the stride does not
    /// divide evenly.
    pub fn output_size(&self, size: usize) -> Result<usize> {
        if size == 0 || !(size - 1).is_multiple_of(self.stride) {
            return Err(Error::config(format!(
                "spatial size {size} is incompatible with stride {}: (size - 1) must be divisible by the stride",
                self.stride
            )));
        }
        Ok((size - 1) / self.stride + 1)
    }

    fn residual_params(&self) -> usize {
        let Self { cin, c1, c2, c3, .. } = *self;
        cin * c1 + c1 + 9 * cin * c2 + c2 + 9 * c2 * c3 + c3
    }

    fn attention_params(&self) -> usize {
        self.concat_channels() * self.concat_channels()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Architecture of the whole network: optional mean-pool stem, a chain of
/// residual blocks, then global average pooling and one linear layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    /// Non-overlapping average-pool factor applied to the input; 1 disables it.
    pub stem_pool: usize,
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
    /// Whether blocks carry the attention kernel. Plain networks are the
    /// pre-training form that gets upgraded before fine-tuning.
    pub attention: bool,
}

pub const DEFAULT_DEPTH: usize = 10;

impl Default for NetworkSpec {
    /// Ten width-8 blocks on 3×32×32 input with five classes.
    fn default() -> Self {
        NetworkSpec::uniform(InputShape { channels: 3, height: 32, width: 32 }, 1, DEFAULT_DEPTH, 8, 5)
    }
}

impl NetworkSpec {
    /// `depth` stride-1 blocks of equal width.
    pub fn uniform(input: InputShape, stem_pool: usize, depth: usize, width: usize, num_classes: usize) -> Self {
        let blocks = (0..depth)
            .map(|i| BlockSpec::new(if i == 0 { input.channels } else { width }, width, 1))
            .collect();
        NetworkSpec { input, stem_pool, blocks, num_classes, attention: true }
    }

    pub fn plain(&self) -> Self {
        NetworkSpec { attention: false, ..self.clone() }
    }

    pub fn with_attention(&self) -> Self {
        NetworkSpec { attention: true, ..self.clone() }
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(self.input.channels, |b| b.c1)
    }

    /// Spatial `(height, width)` after the stem and after each block.
    pub fn spatial_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let InputShape { height, width, .. } = self.input;
        let k = self.stem_pool;
        if k == 0 || height % k != 0 || width % k != 0 {
            return Err(Error::config(format!("stem pool {k} does not divide input {height}x{width}")));
        }
        let mut size = (height / k, width / k);
        let mut sizes = vec![size];
        for b in &self.blocks {
            size = (b.output_size(size.0)?, b.output_size(size.1)?);
            sizes.push(size);
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        let InputShape { channels, height, width } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::config(format!("invalid input shape {:?}", self.input)));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        let mut cin = channels;
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.cin != cin {
                return Err(Error::config(format!("block {i} expects {} input channels, previous stage gives {cin}", b.cin)));
            }
            cin = b.c1;
        }
        self.spatial_sizes()?;
        Ok(())
    }
}

/// Learnable tensors of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub shortcut_w: Tensor,
    pub shortcut_b: Tensor,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    /// `[c', c', 1, 1]` attention embedding; absent in plain networks.
    pub attention_w: Option<Tensor>,
}

/// Tape handles for one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub shortcut_w: Var,
    pub shortcut_b: Var,
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub attention_w: Option<Var>,
}

/// Values recorded by one block's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub output: Var,
    /// `T * (1 + M)`, or `T` for a plain block.
    pub pre_activation: Var,
    pub residual: Var,
    pub map: Option<Var>,
}

/// `M = mean_c(conv1x1(concat(l1, l2, l3), w_star))`.
pub fn attention_map(tape: &mut Tape, l1: Var, l2: Var, l3: Var, w_star: Var) -> Result<Var> {
    let concat = tape.channel_concat(&[l1, l2, l3])?;
    let channels = tape.value(concat).shape()[1];
    if tape.value(w_star).shape() != [channels, channels, 1, 1] {
        return Err(Error::config(format!(
            "attention kernel shape {:?} does not match {channels} concatenated channels",
            tape.value(w_star).shape()
        )));
    }
    let embedded = tape.conv2d(concat, w_star, None, 1, 0)?;
    tape.channel_mean(embedded)
}

/// `T * (1 + M)` with `M` broadcast over channels.
pub fn apply_attention(tape: &mut Tape, residual: Var, map: Var) -> Result<Var> {
    let gate = tape.add_scalar(map, 1.0);
    tape.mul(residual, gate)
}

pub fn block_forward(tape: &mut Tape, x: Var, p: &BlockVars, stride: usize) -> Result<BlockOutput> {
    let l1 = tape.conv2d(x, p.shortcut_w, Some(p.shortcut_b), stride, 0)?;
    let c1 = tape.conv2d(x, p.conv1_w, Some(p.conv1_b), stride, 1)?;
    let l2 = tape.relu(c1);
    let l3 = tape.conv2d(l2, p.conv2_w, Some(p.conv2_b), 1, 1)?;
    let residual = tape.add(l1, l3)?;
    let (pre_activation, map) = match p.attention_w {
        Some(w_star) => {
            let map = attention_map(tape, l1, l2, l3, w_star)?;
            (apply_attention(tape, residual, map)?, Some(map))
        }
        None => (residual, None),
    };
    Ok(BlockOutput { output: tape.relu(pre_activation), pre_activation, residual, map })
}

/// Parameter totals split by role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub residual: usize,
    pub attention: usize,
    pub head: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.residual + self.attention + self.head
    }
}

/// Everything captured from one forward pass.
#[derive(Clone, Debug)]
pub struct Readout {
    pub logits: Tensor,
    /// One single-channel map per block.
    pub maps: Vec<Tensor>,
    /// Output feature map of the last block (the stem output when there are no blocks).
    pub features: Tensor,
}

/// Tape handles produced by [`Model::forward_on`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub maps: Vec<Option<Var>>,
    pub features: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: NetworkSpec,
    blocks: Vec<BlockParams>,
    head_w: Tensor,
    head_b: Tensor,
}

fn uniform_init(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let bound = (gain / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    ///
    /// Kernels are uniform in `±sqrt(g / fan_in)`: `g = 6` for the conv that
    /// feeds a ReLU, `g = 3` for the shortcut, the second conv and the
    /// classifier, so that `T = L1 + L3` keeps roughly the input's second
    /// moment. Biases and attention kernels start at zero.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for b in &spec.blocks {
            let c = b.concat_channels();
            blocks.push(BlockParams {
                shortcut_w: uniform_init(&[b.c1, b.cin, 1, 1], b.cin, 3.0, &mut rng)?,
                shortcut_b: Tensor::zeros(&[b.c1])?,
                conv1_w: uniform_init(&[b.c2, b.cin, 3, 3], 9 * b.cin, 6.0, &mut rng)?,
                conv1_b: Tensor::zeros(&[b.c2])?,
                conv2_w: uniform_init(&[b.c3, b.c2, 3, 3], 9 * b.c2, 3.0, &mut rng)?,
                conv2_b: Tensor::zeros(&[b.c3])?,
                attention_w: if spec.attention { Some(Tensor::zeros(&[c, c, 1, 1])?) } else { None },
            });
        }
        let d = spec.feature_dim();
        let head_w = uniform_init(&[spec.num_classes, d], d, 3.0, &mut rng)?;
        let head_b = Tensor::zeros(&[spec.num_classes])?;
        Ok(Model { spec: spec.clone(), blocks, head_w, head_b })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [BlockParams] {
        &mut self.blocks
    }

    /// Named parameters in declaration order (the checkpoint order).
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.shortcut.weight"), &b.shortcut_w));
            out.push((format!("block{i}.shortcut.bias"), &b.shortcut_b));
            out.push((format!("block{i}.conv1.weight"), &b.conv1_w));
            out.push((format!("block{i}.conv1.bias"), &b.conv1_b));
            out.push((format!("block{i}.conv2.weight"), &b.conv2_w));
            out.push((format!("block{i}.conv2.bias"), &b.conv2_b));
            if let Some(w) = &b.attention_w {
                out.push((format!("block{i}.attention.weight"), w));
            }
        }
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([
                &mut b.shortcut_w,
                &mut b.shortcut_b,
                &mut b.conv1_w,
                &mut b.conv1_b,
                &mut b.conv2_w,
                &mut b.conv2_b,
            ]);
            if let Some(w) = &mut b.attention_w {
                out.push(w);
            }
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn count_params(&self) -> ParamCount {
        let mut count = ParamCount { head: self.head_w.len() + self.head_b.len(), ..Default::default() };
        for b in &self.blocks {
            count.residual += [&b.shortcut_w, &b.shortcut_b, &b.conv1_w, &b.conv1_b, &b.conv2_w, &b.conv2_b]
                .iter()
                .map(|t| t.len())
                .sum::<usize>();
            count.attention += b.attention_w.as_ref().map_or(0, Tensor::len);
        }
        count
    }

    /// Closed-form parameter count for a spec, without building it.
    pub fn expected_params(spec: &NetworkSpec) -> ParamCount {
        ParamCount {
            residual: spec.blocks.iter().map(BlockSpec::residual_params).sum(),
            attention: if spec.attention { spec.blocks.iter().map(BlockSpec::attention_params).sum() } else { 0 },
            head: spec.feature_dim() * spec.num_classes + spec.num_classes,
        }
    }

    /// Replaces every attention kernel with uniform noise in `±scale`.
    pub fn randomize_attention<R: Rng>(&mut self, scale: f64, rng: &mut R) -> Result<()> {
        for b in &mut self.blocks {
            if let Some(w) = &mut b.attention_w {
                *w = Tensor::uniform(w.shape(), -scale, scale, rng)?;
            }
        }
        Ok(())
    }

    /// Records all parameters as tape leaves, in [`Model::params`] order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect()
    }

    fn block_vars(&self, bound: &[Var]) -> Vec<BlockVars> {
        let mut it = bound.iter().copied();
        let mut next = || it.next().expect("bound vars follow params order");
        self.blocks
            .iter()
            .map(|b| BlockVars {
                shortcut_w: next(),
                shortcut_b: next(),
                conv1_w: next(),
                conv1_b: next(),
                conv2_w: next(),
                conv2_b: next(),
                attention_w: b.attention_w.as_ref().map(|_| next()),
            })
            .collect()
    }

    /// Forward pass over parameters already bound with [`Model::bind`].
    pub fn forward_on(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<ForwardVars> {
        if bound.len() != self.params().len() {
            return Err(Error::input("bound parameter list does not match the model"));
        }
        let InputShape { channels, height, width } = self.spec.input;
        let [_, c, h, w] = tape.value(x).dims4()?;
        if (c, h, w) != (channels, height, width) {
            return Err(Error::input(format!(
                "input is {c}x{h}x{w}, network expects {channels}x{height}x{width}"
            )));
        }
        let mut cur = if self.spec.stem_pool > 1 { tape.avg_pool(x, self.spec.stem_pool)? } else { x };
        let mut maps = Vec::with_capacity(self.blocks.len());
        for (vars, spec) in self.block_vars(bound).iter().zip(&self.spec.blocks) {
            let out = block_forward(tape, cur, vars, spec.stride)?;
            maps.push(out.map);
            cur = out.output;
        }
        let pooled = tape.global_avg_pool(cur)?;
        let n = bound.len();
        let logits = tape.linear(pooled, bound[n - 2], bound[n - 1])?;
        Ok(ForwardVars { logits, maps, features: cur })
    }

    /// Logits, attention maps and last feature map from a single pass.
    pub fn readout(&self, x: &Tensor) -> Result<Readout> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let fwd = self.forward_on(&mut tape, &bound, xv)?;
        let sizes = self.spec.spatial_sizes()?;
        let n = x.shape()[0];
        let mut maps = Vec::with_capacity(fwd.maps.len());
        for (m, &(h, w)) in fwd.maps.iter().zip(&sizes[1..]) {
            maps.push(match m {
                Some(v) => tape.value(*v).clone(),
                // plain blocks behave as M = 0
                None => Tensor::zeros(&[n, 1, h, w])?,
            });
        }
        Ok(Readout {
            logits: tape.value(fwd.logits).clone(),
            maps,
            features: tape.value(fwd.features).clone(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.readout(x)?.logits)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.forward(x)?.argmax_rows()
    }

    /// Copies every residual and head parameter from a plain model of the
    /// same architecture and zeroes the attention kernels.
    pub fn upgraded_from(plain: &Model) -> Result<Model> {
        if plain.spec.attention {
            return Err(Error::SpecMismatch("source model already has attention units".into()));
        }
        let spec = plain.spec.with_attention();
        let mut blocks = plain.blocks.clone();
        for (b, s) in blocks.iter_mut().zip(&spec.blocks) {
            let c = s.concat_channels();
            b.attention_w = Some(Tensor::zeros(&[c, c, 1, 1])?);
        }
        Ok(Model { spec, blocks, head_w: plain.head_w.clone(), head_b: plain.head_b.clone() })
    }

    pub(crate) fn from_parts(spec: NetworkSpec, mut tensors: Vec<Tensor>) -> Result<Model> {
        let template = Model::build(&spec, 0)?;
        let expected: Vec<Vec<usize>> = template.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        if tensors.len() != expected.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} tensors stored, architecture needs {}",
                tensors.len(),
                expected.len()
            )));
        }
        for (i, (t, shape)) in tensors.iter().zip(&expected).enumerate() {
            if t.shape() != shape.as_slice() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {i} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut model = template;
        for (dst, src) in model.params_mut().into_iter().zip(tensors.drain(..)) {
            *dst = src;
        }
        Ok(model)
    }
}


/// Per-parameter comparison of the analytic gradient of the mean
/// cross-entropy with central differences, in [`Model::params`] order.
/// `fault` negates the backward rule of one op kind.
pub fn param_grad_check(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    fault: Option<crate::tensor::OpKind>,
) -> Result<Vec<(String, crate::tensor::GradCheck)>> {
    let params = model.params();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let inputs: Vec<Tensor> = params.into_iter().map(|(_, t)| t.clone()).collect();
    let checks = crate::tensor::grad_check_many(
        |tape, vars| {
            if let Some(kind) = fault {
                tape.inject_fault(kind);
            }
            let xv = tape.leaf(x.clone());
            let fwd = model.forward_on(tape, vars, xv)?;
            tape.softmax_cross_entropy(fwd.logits, labels)
        },
        &inputs,
        eps,
    )?;
    Ok(names.into_iter().zip(checks).collect())
}
