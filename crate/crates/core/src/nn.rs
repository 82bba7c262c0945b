//! The multi-stage depth prediction network.
//!
//! Each stage is a U-shaped encoder-decoder: a truncated ResNet-18 encoder
//! (stem + four layers of two basic blocks) and a four-block up-projection
//! decoder with a 3x3 head. Stages n >= 2 aggregate the previous stage's
//! encoder/decoder features into their encoder block inputs; the three
//! aggregation modes differ in whether prior features are added at all and
//! whether they pass through learnable 1x1 convolutions first.

use thiserror::Error;

use crate::autodiff::{Graph, ParamId, Var};
use crate::encoding::InputMode;
use crate::rng::{normal, rng_from};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch-norm stabilizer.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics update rate.
pub const BN_MOMENTUM: f64 = 0.1;

/// Base channel widths of the four encoder layers before width scaling.
const LAYER_WIDTHS: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Error)]
pub enum NnError {
    #[error("stages must be >= 1, got {0}")]
    BadStages(usize),
    #[error("input {height}x{width} must be divisible by 32")]
    BadExtent { height: usize, width: usize },
    #[error("width_mult {0} does not scale {{64,128,256,512}} to integers")]
    BadWidth(f64),
    #[error("input_channels {got} does not match input mode {mode} (wants {want})")]
    BadChannels {
        got: usize,
        want: usize,
        mode: &'static str,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsfaMode {
    None,
    Connect,
    Full,
}

impl CsfaMode {
    pub fn name(self) -> &'static str {
        match self {
            CsfaMode::None => "none",
            CsfaMode::Connect => "connect",
            CsfaMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(CsfaMode::None),
            "connect" => Some(CsfaMode::Connect),
            "full" => Some(CsfaMode::Full),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NetworkConfig {
    pub stages: usize,
    pub width_mult: f64,
    pub input_channels: usize,
    pub csfa_mode: CsfaMode,
    pub input_mode: InputMode,
    pub height: usize,
    pub width: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.stages < 1 {
            return Err(NnError::BadStages(self.stages));
        }
        if self.height % 32 != 0 || self.width % 32 != 0 || self.height == 0 || self.width == 0 {
            return Err(NnError::BadExtent {
                height: self.height,
                width: self.width,
            });
        }
        for base in LAYER_WIDTHS {
            let scaled = self.width_mult * base as f64;
            if scaled < 1.0 || (scaled - scaled.round()).abs() > 1e-9 {
                return Err(NnError::BadWidth(self.width_mult));
            }
        }
        let want = self.input_mode.channels();
        if self.input_channels != want {
            return Err(NnError::BadChannels {
                got: self.input_channels,
                want,
                mode: self.input_mode.name(),
            });
        }
        Ok(())
    }

    /// `base` channels scaled by the width multiplier.
    fn ch(&self, base: usize) -> usize {
        (self.width_mult * base as f64).round() as usize
    }
}

/// A learnable tensor with its checkpoint name.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

// Layer descriptions hold indices into the parameter/buffer stores rather
// than tensors, so the model can hand parameter values to a fresh graph on
// every forward pass.

#[derive(Clone, Copy)]
struct ConvDesc {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy)]
struct BnDesc {
    gamma: ParamId,
    beta: ParamId,
    /// Index of the running-mean buffer; running variance is the next one.
    rmean: usize,
}

#[derive(Clone, Copy)]
struct ConvBn {
    conv: ConvDesc,
    bn: BnDesc,
}

#[derive(Clone, Copy)]
struct BasicBlockDesc {
    cb1: ConvBn,
    cb2: ConvBn,
    down: Option<ConvBn>,
}

#[derive(Clone, Copy)]
struct UpProjDesc {
    /// 5x5 into the main branch.
    a: ConvBn,
    /// 3x3 finishing the main branch.
    b: ConvBn,
    /// 5x5 shortcut branch.
    c: ConvBn,
}

#[derive(Clone, Copy)]
struct CsfaPairDesc {
    phi: ConvDesc,
    psi: ConvDesc,
}

#[derive(Clone)]
struct StageDesc {
    stem: ConvBn,
    layers: [[BasicBlockDesc; 2]; 4],
    ups: [UpProjDesc; 4],
    head: ConvDesc,
    /// phi/psi pairs for block inputs k = 2..4; present on stages n >= 2
    /// in full mode only.
    csfa: Option<[CsfaPairDesc; 3]>,
}

pub struct Model<T: Scalar> {
    config: NetworkConfig,
    params: Vec<Parameter<T>>,
    /// Batch-norm running statistics, stored pairwise:
    /// [mean, var, mean, var, ...] in creation order.
    buffers: Vec<Parameter<T>>,
    stages: Vec<StageDesc>,
}

/// Tap points of one stage, exposed for aggregation and inspection.
///
/// `x[i]` is the input feature of encoder layer k = i + 2 (after
/// aggregation); `y[i]` is the decoder output with the same shape.
pub struct StageFeatures {
    pub x: [Var; 3],
    pub y: [Var; 3],
    pub bottleneck: Var,
    /// Raw head output of this stage, 1 channel at full resolution.
    pub head: Var,
}

pub struct ForwardResult {
    /// Final depth node: last head output, plus the reference image in
    /// ref-d mode. Not clamped; see [`Model::predict`].
    pub depth: Var,
    /// Last stage's raw head output.
    pub head: Var,
    pub stages: Vec<StageFeatures>,
}

/// Builder that owns the parameter store while layers register themselves.
struct Builder<T: Scalar> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Parameter<T>>,
    rng: rand_chacha::ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn he_conv(&mut self, name: &str, o: usize, c: usize, k: usize) -> ParamId {
        let std = (2.0 / (c * k * k) as f64).sqrt();
        let n = o * c * k * k;
        let data: Vec<T> = (0..n).map(|_| T::of(normal(&mut self.rng) * std)).collect();
        self.push_param(name, Tensor::from_vec(&[o, c, k, k], data))
    }

    fn zero_conv(&mut self, name: &str, o: usize, c: usize, k: usize) -> ParamId {
        self.push_param(name, Tensor::zeros(&[o, c, k, k]))
    }

    fn push_param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter {
            name: name.to_string(),
            value,
        });
        self.params.len() - 1
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnDesc {
        let gamma = self.push_param(&format!("{prefix}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.push_param(&format!("{prefix}.beta"), Tensor::zeros(&[c]));
        let rmean = self.buffers.len();
        self.buffers.push(Parameter {
            name: format!("{prefix}.running_mean"),
            value: Tensor::zeros(&[c]),
        });
        self.buffers.push(Parameter {
            name: format!("{prefix}.running_var"),
            value: Tensor::full(&[c], T::one()),
        });
        BnDesc { gamma, beta, rmean }
    }

    fn conv_bn(&mut self, prefix: &str, o: usize, c: usize, k: usize, stride: usize) -> ConvBn {
        let w = self.he_conv(&format!("{prefix}.conv.weight"), o, c, k);
        ConvBn {
            conv: ConvDesc {
                w,
                b: None,
                stride,
                pad: k / 2,
            },
            bn: self.bn(&format!("{prefix}.bn"), o),
        }
    }

    fn basic_block(&mut self, prefix: &str, c_in: usize, c_out: usize, stride: usize) -> BasicBlockDesc {
        let cb1 = self.conv_bn(&format!("{prefix}.1"), c_out, c_in, 3, stride);
        let cb2 = self.conv_bn(&format!("{prefix}.2"), c_out, c_out, 3, 1);
        let down = (stride != 1 || c_in != c_out)
            .then(|| self.conv_bn(&format!("{prefix}.down"), c_out, c_in, 1, stride));
        BasicBlockDesc { cb1, cb2, down }
    }

    fn up_proj(&mut self, prefix: &str, c_in: usize, c_out: usize) -> UpProjDesc {
        UpProjDesc {
            a: self.conv_bn(&format!("{prefix}.a"), c_out, c_in, 5, 1),
            b: self.conv_bn(&format!("{prefix}.b"), c_out, c_out, 3, 1),
            c: self.conv_bn(&format!("{prefix}.c"), c_out, c_in, 5, 1),
        }
    }
}

/// Builds the network with He-normal conv weights drawn from `seed`,
/// batch-norm gamma = 1 / beta = 0, and zero-initialized aggregation convs.
pub fn build_msdpn<T: Scalar>(config: NetworkConfig, seed: u64) -> Result<Model<T>, NnError> {
    config.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        buffers: Vec::new(),
        rng: rng_from(seed),
    };
    let w = |base: usize| config.ch(base);
    let mut stages = Vec::with_capacity(config.stages);
    for n in 0..config.stages {
        let p = format!("stage{n}");
        let stem = b.conv_bn(&format!("{p}.stem"), w(64), config.input_channels, 7, 2);
        let mut layers: Vec<[BasicBlockDesc; 2]> = Vec::with_capacity(4);
        let mut c_in = w(64);
        for (li, base) in LAYER_WIDTHS.iter().enumerate() {
            let c_out = w(*base);
            let stride = if li == 0 { 1 } else { 2 };
            let b0 = b.basic_block(&format!("{p}.layer{}.0", li + 1), c_in, c_out, stride);
            let b1 = b.basic_block(&format!("{p}.layer{}.1", li + 1), c_out, c_out, 1);
            layers.push([b0, b1]);
            c_in = c_out;
        }
        // Blocks 1..3 concatenate the same-resolution encoder feature with
        // the decoder path before up-projecting; block 4 has no matching
        // encoder resolution left and up-projects alone.
        let ups = [
            b.up_proj(&format!("{p}.dec1"), w(512) * 2, w(256)),
            b.up_proj(&format!("{p}.dec2"), w(256) * 2, w(128)),
            b.up_proj(&format!("{p}.dec3"), w(128) * 2, w(64)),
            b.up_proj(&format!("{p}.dec4"), w(64), w(64)),
        ];
        let head_w = b.he_conv(&format!("{p}.head.weight"), 1, w(64), 3);
        let head_b = b.push_param(&format!("{p}.head.bias"), Tensor::zeros(&[1]));
        let head = ConvDesc {
            w: head_w,
            b: Some(head_b),
            stride: 1,
            pad: 1,
        };
        let csfa = (n >= 1 && config.csfa_mode == CsfaMode::Full).then(|| {
            let mut pairs = Vec::with_capacity(3);
            for (i, base) in [64usize, 128, 256].iter().enumerate() {
                let c = w(*base);
                let k = i + 2;
                let phi_w = b.zero_conv(&format!("{p}.csfa{k}.phi.weight"), c, c, 1);
                let phi_b = b.push_param(&format!("{p}.csfa{k}.phi.bias"), Tensor::zeros(&[c]));
                let psi_w = b.zero_conv(&format!("{p}.csfa{k}.psi.weight"), c, c, 1);
                let psi_b = b.push_param(&format!("{p}.csfa{k}.psi.bias"), Tensor::zeros(&[c]));
                pairs.push(CsfaPairDesc {
                    phi: ConvDesc {
                        w: phi_w,
                        b: Some(phi_b),
                        stride: 1,
                        pad: 0,
                    },
                    psi: ConvDesc {
                        w: psi_w,
                        b: Some(psi_b),
                        stride: 1,
                        pad: 0,
                    },
                });
            }
            let arr: [CsfaPairDesc; 3] = pairs.try_into().ok().unwrap();
            arr
        });
        stages.push(StageDesc {
            stem,
            layers: layers.try_into().ok().unwrap(),
            ups,
            head,
            csfa,
        });
    }
    Ok(Model {
        config,
        params: b.params,
        buffers: b.buffers,
        stages,
    })
}

/// One forward pass in flight: pushes parameter values into the graph and
/// collects batch-norm statistics for the post-pass running update.
struct Runner<'m, T: Scalar> {
    model: &'m Model<T>,
    train: bool,
    bn_updates: Vec<(usize, crate::autodiff::kernels::BnStats)>,
}

impl<'m, T: Scalar> Runner<'m, T> {
    fn param(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(id, self.model.params[id].value.clone())
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, d: &ConvDesc) -> Var {
        let w = self.param(g, d.w);
        let b = d.b.map(|id| self.param(g, id));
        g.conv2d(x, w, b, d.stride, d.pad)
    }

    fn bn(&mut self, g: &mut Graph<T>, x: Var, d: &BnDesc) -> Var {
        let gamma = self.param(g, d.gamma);
        let beta = self.param(g, d.beta);
        if self.train {
            let (out, stats) = g.batchnorm_train(x, gamma, beta, BN_EPS);
            self.bn_updates.push((d.rmean, stats));
            out
        } else {
            let rm: Vec<f64> = self.model.buffers[d.rmean].value.data().iter().map(|v| v.f64()).collect();
            let rv: Vec<f64> = self.model.buffers[d.rmean + 1].value.data().iter().map(|v| v.f64()).collect();
            g.batchnorm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
        }
    }

    fn conv_bn(&mut self, g: &mut Graph<T>, x: Var, d: &ConvBn) -> Var {
        let c = self.conv(g, x, &d.conv);
        self.bn(g, c, &d.bn)
    }

    fn basic_block(&mut self, g: &mut Graph<T>, x: Var, d: &BasicBlockDesc) -> Var {
        let c1 = self.conv_bn(g, x, &d.cb1);
        let r1 = g.relu(c1);
        let c2 = self.conv_bn(g, r1, &d.cb2);
        let skip = match &d.down {
            Some(down) => self.conv_bn(g, x, down),
            None => x,
        };
        let s = g.add(c2, skip);
        g.relu(s)
    }

    fn up_proj(&mut self, g: &mut Graph<T>, x: Var, d: &UpProjDesc) -> Var {
        let up = g.unpool_zero_x2(x);
        let a = self.conv_bn(g, up, &d.a);
        let a = g.relu(a);
        let main = self.conv_bn(g, a, &d.b);
        let branch = self.conv_bn(g, up, &d.c);
        let s = g.add(main, branch);
        g.relu(s)
    }

    /// Aggregated input for encoder layer k of a stage n >= 2.
    fn csfa_aggregate(
        &self,
        g: &mut Graph<T>,
        x_cur: Var,
        x_prev: Var,
        y_prev: Var,
        pair: Option<&CsfaPairDesc>,
    ) -> Var {
        match self.model.config.csfa_mode {
            CsfaMode::None => x_cur,
            CsfaMode::Connect => {
                let s = g.add(x_prev, y_prev);
                g.add(x_cur, s)
            }
            CsfaMode::Full => {
                let pair = pair.expect("full mode stage without aggregation convs");
                let px = self.conv(g, x_prev, &pair.phi);
                let py = self.conv(g, y_prev, &pair.psi);
                let s = g.add(px, py);
                g.add(x_cur, s)
            }
        }
    }

    fn stage(
        &mut self,
        g: &mut Graph<T>,
        input: Var,
        desc: &StageDesc,
        prev: Option<&StageFeatures>,
    ) -> StageFeatures {
        let stem = self.conv_bn(g, input, &desc.stem);
        let stem = g.relu(stem);
        let mut cur = g.maxpool(stem, 3, 2, 1);
        let mut x_taps = [cur; 3];
        let mut enc_outs = [cur; 4];
        for li in 0..4 {
            if li >= 1 {
                // Layer input tap k = li + 1 (k = 2..4), aggregated with the
                // previous stage's same-shape features.
                cur = match prev {
                    Some(p) => self.csfa_aggregate(
                        g,
                        cur,
                        p.x[li - 1],
                        p.y[li - 1],
                        desc.csfa.as_ref().map(|c| &c[li - 1]),
                    ),
                    None => cur,
                };
                x_taps[li - 1] = cur;
            }
            for blk in &desc.layers[li] {
                cur = self.basic_block(g, cur, blk);
            }
            enc_outs[li] = cur;
        }
        let bottleneck = cur;
        // Decoder: blocks 1..3 concatenate the encoder output at their own
        // resolution (the bottleneck itself for block 1), block 4 runs plain.
        let cat1 = g.concat_channels(bottleneck, enc_outs[3]);
        let y4 = self.up_proj(g, cat1, &desc.ups[0]);
        let cat2 = g.concat_channels(y4, enc_outs[2]);
        let y3 = self.up_proj(g, cat2, &desc.ups[1]);
        let cat3 = g.concat_channels(y3, enc_outs[1]);
        let y2 = self.up_proj(g, cat3, &desc.ups[2]);
        let top = self.up_proj(g, y2, &desc.ups[3]);
        let head = self.conv(g, top, &desc.head);
        let head = g.upsample_bilinear_x2(head);
        StageFeatures {
            x: x_taps,
            y: [y2, y3, y4],
            bottleneck,
            head,
        }
    }
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Parameter<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.buffers
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Replaces a parameter or buffer value; shape must match.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) {
        let slot = self
            .params
            .iter_mut()
            .chain(self.buffers.iter_mut())
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("model has no tensor named {name}"));
        assert_eq!(
            slot.value.shape(),
            value.shape(),
            "value for {name} has shape {:?}, expected {:?}",
            value.shape(),
            slot.value.shape()
        );
        slot.value = value;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Converts every parameter and buffer to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |ps: &[Parameter<T>]| {
            ps.iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast::<U>(),
                })
                .collect()
        };
        Model {
            config: self.config.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            stages: self.stages.clone(),
        }
    }

    fn check_input(&self, input: &Tensor<T>, ref_d: Option<&Tensor<T>>) {
        let (n, c, h, w) = input.dims4();
        assert_eq!(
            (c, h, w),
            (self.config.input_channels, self.config.height, self.config.width),
            "input shape {:?} does not match configured {}x{}x{}",
            input.shape(),
            self.config.input_channels,
            self.config.height,
            self.config.width
        );
        match (self.config.input_mode, ref_d) {
            (InputMode::RefD, None) => panic!("ref-d mode forward requires the reference image"),
            (InputMode::RefD, Some(r)) => assert_eq!(
                r.shape(),
                &[n, 1, h, w],
                "reference batch shape {:?} does not match input batch",
                r.shape()
            ),
            (_, Some(_)) => panic!("reference image passed outside ref-d mode"),
            (_, None) => {}
        }
    }

    fn run(
        &self,
        g: &mut Graph<T>,
        input: &Tensor<T>,
        ref_d: Option<&Tensor<T>>,
        train: bool,
    ) -> (ForwardResult, Vec<(usize, crate::autodiff::kernels::BnStats)>) {
        self.check_input(input, ref_d);
        let mut runner = Runner {
            model: self,
            train,
            bn_updates: Vec::new(),
        };
        let input = g.leaf(input.clone());
        let mut stages: Vec<StageFeatures> = Vec::with_capacity(self.stages.len());
        for desc in &self.stages {
            let feats = runner.stage(g, input, desc, stages.last());
            stages.push(feats);
        }
        let head = stages.last().expect("at least one stage").head;
        let depth = match ref_d {
            Some(r) => {
                let r = g.leaf(r.clone());
                g.add(head, r)
            }
            None => head,
        };
        (
            ForwardResult {
                depth,
                head,
                stages,
            },
            runner.bn_updates,
        )
    }

    /// Training-mode forward: batch-norm uses batch statistics and the
    /// model's running buffers absorb them before this returns.
    pub fn forward_train(
        &mut self,
        g: &mut Graph<T>,
        input: &Tensor<T>,
        ref_d: Option<&Tensor<T>>,
    ) -> ForwardResult {
        let (result, updates) = self.run(g, input, ref_d, true);
        for (rmean, stats) in updates {
            let unbiased = if stats.m > 1 {
                stats.m as f64 / (stats.m - 1) as f64
            } else {
                1.0
            };
            for (slot, est) in [(rmean, &stats.mean), (rmean + 1, &stats.var)] {
                let correction = if slot == rmean { 1.0 } else { unbiased };
                let buf = self.buffers[slot].value.data_mut();
                for (b, &s) in buf.iter_mut().zip(est) {
                    *b = T::of((1.0 - BN_MOMENTUM) * b.f64() + BN_MOMENTUM * s * correction);
                }
            }
        }
        result
    }

    /// Inference-mode forward: batch-norm normalizes by running statistics.
    /// Still differentiable, and mutates nothing.
    pub fn forward_eval(
        &self,
        g: &mut Graph<T>,
        input: &Tensor<T>,
        ref_d: Option<&Tensor<T>>,
    ) -> ForwardResult {
        self.run(g, input, ref_d, false).0
    }

    /// Convenience inference: returns the final depth map, clamped below at
    /// zero in ref-d mode (negative residual depths are unphysical).
    pub fn predict(&self, input: &Tensor<T>, ref_d: Option<&Tensor<T>>) -> Tensor<T> {
        let mut g = Graph::new();
        let result = self.forward_eval(&mut g, input, ref_d);
        let out = g.value(result.depth).clone();
        match self.config.input_mode {
            InputMode::RefD => out.map(|v| if v > T::zero() { v } else { T::zero() }),
            _ => out,
        }
    }
}
