use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, prefixed, sigmoid, split_channels, Conv2d, ConvBnRelu, ConvTranspose2x2, Mode,
    Param, Parameterized, Real,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegModelConfig {
    /// Channel width of each encoder stage; the decoder mirrors it.
    pub encoder_widths: Vec<usize>,
    pub input_channels: usize,
    pub skip_connections: bool,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![16, 32, 64, 128],
            input_channels: 1,
            skip_connections: true,
        }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.len() < 3 {
            return Err(Error::Config(
                "segmenter needs at least 3 encoder stages".into(),
            ));
        }
        if self.encoder_widths.contains(&0) || self.input_channels == 0 {
            return Err(Error::Config("segmenter widths must be positive".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.encoder_widths.len()
    }

    /// Input edges must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.stages() - 1)
    }

    pub fn bottleneck_width(&self) -> usize {
        *self.encoder_widths.last().expect("validated")
    }
}

/// Encoder/decoder segmenter with skip connections. Stage 0 keeps the input
/// resolution; every further stage halves it with a stride-2 convolution.
#[derive(Debug, Clone)]
pub struct UNet<F> {
    cfg: SegModelConfig,
    enc: Vec<[ConvBnRelu<F>; 2]>,
    ups: Vec<ConvTranspose2x2<F>>,
    dec: Vec<ConvBnRelu<F>>,
    head: Conv2d<F>,
}

impl<F: Real> UNet<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &SegModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.encoder_widths;
        let mut enc = Vec::with_capacity(w.len());
        let mut prev = cfg.input_channels;
        for (i, &width) in w.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            enc.push([
                ConvBnRelu::new(prev, width, stride, rng),
                ConvBnRelu::new(width, width, 1, rng),
            ]);
            prev = width;
        }
        let mut ups = Vec::with_capacity(w.len() - 1);
        let mut dec = Vec::with_capacity(w.len() - 1);
        for i in 0..w.len() - 1 {
            ups.push(ConvTranspose2x2::new(w[i + 1], w[i], rng));
            let dec_in = if cfg.skip_connections { 2 * w[i] } else { w[i] };
            dec.push(ConvBnRelu::new(dec_in, w[i], 1, rng));
        }
        Ok(Self {
            cfg: cfg.clone(),
            enc,
            ups,
            dec,
            head: Conv2d::new(w[0], 1, 1, 1, true, rng),
        })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.cfg
    }

    pub fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let m = self.cfg.size_multiple();
        if c != self.cfg.input_channels {
            return Err(Error::shape(format!(
                "segmenter expects {} input channels, got {c}",
                self.cfg.input_channels
            )));
        }
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "segmenter input {h}x{w} is not a multiple of {m}; pad the image"
            )));
        }
        Ok(())
    }

    fn encode(&mut self, x: &Array4<F>, mode: Mode) -> Vec<Array4<F>> {
        let mut acts = Vec::with_capacity(self.enc.len());
        let mut h = x.clone();
        for [a, b] in &mut self.enc {
            h = a.forward(&h, mode);
            h = b.forward(&h, mode);
            acts.push(h.clone());
        }
        acts
    }

    /// Per-pixel logits, `N x 1 x H x W`.
    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        self.check_input(x)?;
        let skips = self.encode(x, mode);
        let mut d = skips.last().expect("at least 3 stages").clone();
        for i in (0..self.dec.len()).rev() {
            let up = self.ups[i].forward(&d, mode);
            let input = if self.cfg.skip_connections {
                concat_channels(&[up.view(), skips[i].view()])
            } else {
                up
            };
            d = self.dec[i].forward(&input, mode);
        }
        Ok(self.head.forward(&d, mode))
    }

    /// Probability map in `(0, 1)`, evaluated with running statistics.
    pub fn predict(&mut self, x: &Array4<F>) -> Result<Array4<F>> {
        Ok(self.forward(x, Mode::Eval)?.mapv_into(sigmoid))
    }

    /// Deepest encoder activation, `N x last_width x H/2^(s-1) x W/2^(s-1)`.
    pub fn encoder_features(&mut self, x: &Array4<F>) -> Result<Array4<F>> {
        self.check_input(x)?;
        Ok(self.encode(x, Mode::Eval).pop().expect("at least 3 stages"))
    }

    /// Accumulates parameter gradients from the logit gradient of the last
    /// [`UNet::forward`] call.
    pub fn backward(&mut self, grad_logits: &Array4<F>) {
        let w = self.cfg.encoder_widths.clone();
        let mut g = self.head.backward(grad_logits);
        let mut skip_grads: Vec<Option<Array4<F>>> = vec![None; w.len()];
        for i in 0..self.dec.len() {
            let gin = self.dec[i].backward(&g);
            let gup = if self.cfg.skip_connections {
                let mut parts = split_channels(&gin, &[w[i], w[i]]);
                skip_grads[i] = parts.pop();
                parts.pop().unwrap()
            } else {
                gin
            };
            g = self.ups[i].backward(&gup);
        }
        for i in (0..self.enc.len()).rev() {
            if let Some(sg) = skip_grads[i].take() {
                g += &sg;
            }
            g = self.enc[i][1].backward(&g);
            g = self.enc[i][0].backward(&g);
        }
    }
}

impl<F: Real> Parameterized<F> for UNet<F> {
    fn params(&self) -> Vec<(String, &Param<F>)> {
        let mut v = Vec::new();
        for (i, [a, b]) in self.enc.iter().enumerate() {
            v.extend(prefixed(&format!("enc{i}.0"), a.params()));
            v.extend(prefixed(&format!("enc{i}.1"), b.params()));
        }
        for (i, (u, d)) in self.ups.iter().zip(&self.dec).enumerate() {
            v.extend(prefixed(&format!("up{i}"), u.params()));
            v.extend(prefixed(&format!("dec{i}"), d.params()));
        }
        v.extend(prefixed("head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut v = Vec::new();
        for (i, [a, b]) in self.enc.iter_mut().enumerate() {
            v.extend(prefixed(&format!("enc{i}.0"), a.params_mut()));
            v.extend(prefixed(&format!("enc{i}.1"), b.params_mut()));
        }
        for (i, (u, d)) in self.ups.iter_mut().zip(self.dec.iter_mut()).enumerate() {
            v.extend(prefixed(&format!("up{i}"), u.params_mut()));
            v.extend(prefixed(&format!("dec{i}"), d.params_mut()));
        }
        v.extend(prefixed("head", self.head.params_mut()));
        v
    }
}
