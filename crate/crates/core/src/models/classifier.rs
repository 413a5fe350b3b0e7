use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, global_avg_pool, global_avg_pool_backward, prefixed, sigmoid, split_channels,
    ConvBnRelu, Linear, MaxPool2, Mode, Param, Parameterized, Real,
};
use crate::wavelet;

/// Downsampling used at every pooling site of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    MaxPool,
    /// Haar low-pass band in place of pooling.
    WaveletLl,
    /// Haar low-pass pooling, plus the input image's Haar detail bands
    /// concatenated onto every block at the matching resolution.
    WaveletMultiresolution,
}

impl PoolingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoolingMode::MaxPool => "max_pool",
            PoolingMode::WaveletLl => "wavelet_ll",
            PoolingMode::WaveletMultiresolution => "wavelet_multiresolution",
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_pool" => Ok(PoolingMode::MaxPool),
            "wavelet_ll" => Ok(PoolingMode::WaveletLl),
            "wavelet_multiresolution" => Ok(PoolingMode::WaveletMultiresolution),
            other => Err(Error::Config(format!("unknown pooling mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClsModelConfig {
    pub block_widths: Vec<usize>,
    pub convs_per_block: usize,
    pub pooling_mode: PoolingMode,
    pub fuse_encoder_features: bool,
    /// Channel count of the fused encoder features.
    pub encoder_feature_width: usize,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl Default for ClsModelConfig {
    fn default() -> Self {
        Self {
            block_widths: vec![16, 32, 64, 128],
            convs_per_block: 2,
            pooling_mode: PoolingMode::WaveletMultiresolution,
            fuse_encoder_features: true,
            encoder_feature_width: 128,
            num_classes: 4,
            input_channels: 1,
        }
    }
}

impl ClsModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_widths.is_empty() || self.block_widths.contains(&0) {
            return Err(Error::Config(
                "classifier needs at least one block of positive width".into(),
            ));
        }
        if self.convs_per_block == 0 || self.num_classes == 0 || self.input_channels == 0 {
            return Err(Error::Config(
                "convs_per_block, num_classes and input_channels must be positive".into(),
            ));
        }
        if self.fuse_encoder_features && self.encoder_feature_width == 0 {
            return Err(Error::Config(
                "encoder_feature_width must be positive when fusing".into(),
            ));
        }
        Ok(())
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.block_widths.len()
    }

    pub fn head_inputs(&self) -> usize {
        self.block_widths.last().copied().unwrap_or(0)
            + if self.fuse_encoder_features {
                self.encoder_feature_width
            } else {
                0
            }
    }
}

#[derive(Debug, Clone)]
struct Trace<F> {
    final_hw: (usize, usize),
    activations: Vec<(String, Array4<F>)>,
}

/// VGG-style multi-label classifier whose pooling sites are configurable
/// and whose head can fuse globally pooled encoder features.
#[derive(Debug, Clone)]
pub struct WaveletCnn<F> {
    cfg: ClsModelConfig,
    blocks: Vec<Vec<ConvBnRelu<F>>>,
    pools: Vec<MaxPool2>,
    head: Linear<F>,
    trace: Option<Trace<F>>,
}

impl<F: Real> WaveletCnn<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &ClsModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let detail_ch = 3 * cfg.input_channels;
        let mut blocks = Vec::with_capacity(cfg.block_widths.len());
        let mut prev = cfg.input_channels;
        for (b, &width) in cfg.block_widths.iter().enumerate() {
            let mut in_ch = prev;
            if b > 0 && cfg.pooling_mode == PoolingMode::WaveletMultiresolution {
                in_ch += detail_ch;
            }
            let mut convs = Vec::with_capacity(cfg.convs_per_block);
            for j in 0..cfg.convs_per_block {
                convs.push(ConvBnRelu::new(
                    if j == 0 { in_ch } else { width },
                    width,
                    1,
                    rng,
                ));
            }
            blocks.push(convs);
            prev = width;
        }
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            pools: vec![MaxPool2::new(); cfg.block_widths.len()],
            head: Linear::new(cfg.head_inputs(), cfg.num_classes, rng),
            trace: None,
        })
    }

    pub fn config(&self) -> &ClsModelConfig {
        &self.cfg
    }

    pub fn head_in_features(&self) -> usize {
        self.head.in_features()
    }

    /// Names of every convolutional activation, in forward order.
    pub fn layer_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(b, convs)| (0..convs.len()).map(move |j| format!("block{b}.conv{j}")))
            .collect()
    }

    /// Last convolutional activation before global pooling.
    pub fn default_layer(&self) -> String {
        self.layer_names().pop().expect("at least one block")
    }

    fn check_inputs(&self, x: &Array4<F>, enc: Option<&Array4<F>>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        let m = self.cfg.size_multiple();
        if c != self.cfg.input_channels {
            return Err(Error::shape(format!(
                "classifier expects {} input channels, got {c}",
                self.cfg.input_channels
            )));
        }
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "classifier input {h}x{w} is not a multiple of {m}"
            )));
        }
        match (self.cfg.fuse_encoder_features, enc) {
            (true, None) => Err(Error::Config(
                "encoder feature fusion is enabled but no encoder features were supplied".into(),
            )),
            (true, Some(e)) if e.dim().0 != n || e.dim().1 != self.cfg.encoder_feature_width => {
                Err(Error::shape(format!(
                    "encoder features {:?} do not match batch {n} x width {}",
                    e.dim(),
                    self.cfg.encoder_feature_width
                )))
            }
            _ => Ok(()),
        }
    }

    /// Per-class logits, `N x num_classes`.
    pub fn forward(
        &mut self,
        x: &Array4<F>,
        enc: Option<&Array4<F>>,
        mode: Mode,
    ) -> Result<Array2<F>> {
        self.check_inputs(x, enc)?;
        let nb = self.blocks.len();
        let multires = self.cfg.pooling_mode == PoolingMode::WaveletMultiresolution;
        let details = if multires {
            wavelet::detail_pyramid(x.view(), nb - 1)?
        } else {
            Vec::new()
        };
        let record = mode == Mode::EvalTrace;
        let mut activations = Vec::new();
        let mut h = x.clone();
        for b in 0..nb {
            if multires && b > 0 {
                h = concat_channels(&[h.view(), details[b - 1].view()]);
            }
            for (j, conv) in self.blocks[b].iter_mut().enumerate() {
                h = conv.forward(&h, mode);
                if record {
                    activations.push((format!("block{b}.conv{j}"), h.clone()));
                }
            }
            h = match self.cfg.pooling_mode {
                PoolingMode::MaxPool => self.pools[b].forward(&h, mode),
                PoolingMode::WaveletLl | PoolingMode::WaveletMultiresolution => {
                    wavelet::ll_batch(h.view())?
                }
            };
        }
        let (_, _, fh, fw) = h.dim();
        let mut feat = global_avg_pool(&h);
        if self.cfg.fuse_encoder_features {
            let e = global_avg_pool(enc.expect("checked"));
            feat = ndarray::concatenate(ndarray::Axis(1), &[feat.view(), e.view()])
                .expect("same batch size");
        }
        let logits = self.head.forward(&feat, mode);
        self.trace = mode.caches().then_some(Trace {
            final_hw: (fh, fw),
            activations,
        });
        Ok(logits)
    }

    pub fn predict(&mut self, x: &Array4<F>, enc: Option<&Array4<F>>) -> Result<Array2<F>> {
        Ok(self.forward(x, enc, Mode::Eval)?.mapv_into(sigmoid))
    }

    /// Accumulates parameter gradients for the last cached forward pass.
    pub fn backward(&mut self, grad_logits: &Array2<F>) {
        self.backward_capture(grad_logits, None);
    }

    /// Backward pass that also returns the gradient with respect to the
    /// named activation, and that activation's value (recorded only by
    /// [`Mode::EvalTrace`] forwards).
    pub fn backward_capture(
        &mut self,
        grad_logits: &Array2<F>,
        layer: Option<&str>,
    ) -> Option<(Array4<F>, Option<Array4<F>>)> {
        let trace = self
            .trace
            .take()
            .expect("classifier backward without cached forward");
        let gfeat = self.head.backward(grad_logits);
        let own = *self.cfg.block_widths.last().unwrap();
        let gown = gfeat.slice(s![.., ..own]).to_owned();
        let (fh, fw) = trace.final_hw;
        let mut g = global_avg_pool_backward(&gown, fh, fw);
        let multires = self.cfg.pooling_mode == PoolingMode::WaveletMultiresolution;
        let mut captured = None;
        for b in (0..self.blocks.len()).rev() {
            g = match self.cfg.pooling_mode {
                PoolingMode::MaxPool => self.pools[b].backward(&g),
                _ => wavelet::ll_backward(g.view()),
            };
            for j in (0..self.blocks[b].len()).rev() {
                let name = format!("block{b}.conv{j}");
                if layer == Some(name.as_str()) {
                    let act = trace
                        .activations
                        .iter()
                        .find(|(n, _)| *n == name)
                        .map(|(_, a)| a.clone());
                    captured = Some((g.clone(), act));
                }
                g = self.blocks[b][j].backward(&g);
            }
            if multires && b > 0 {
                let prev = self.cfg.block_widths[b - 1];
                g = split_channels(&g, &[prev, g.dim().1 - prev]).swap_remove(0);
            }
        }
        captured
    }
}

impl<F: Real> Parameterized<F> for WaveletCnn<F> {
    fn params(&self) -> Vec<(String, &Param<F>)> {
        let mut v = Vec::new();
        for (b, convs) in self.blocks.iter().enumerate() {
            for (j, c) in convs.iter().enumerate() {
                v.extend(prefixed(&format!("block{b}.conv{j}"), c.params()));
            }
        }
        v.extend(prefixed("head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut v = Vec::new();
        for (b, convs) in self.blocks.iter_mut().enumerate() {
            for (j, c) in convs.iter_mut().enumerate() {
                v.extend(prefixed(&format!("block{b}.conv{j}"), c.params_mut()));
            }
        }
        v.extend(prefixed("head", self.head.params_mut()));
        v
    }
}
