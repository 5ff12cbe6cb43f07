use serde::{Deserialize, Serialize};

use super::loss::LabelTargets;
use super::SegError;
use crate::autodiff::{Checkpoint, GradTargets, Graph, Mode, NodeId, Tensor};
use crate::rng::{purpose, Stream};

/// Fixed LeakyReLU negative slope.
pub const LEAKY_SLOPE: f64 = 0.01;

pub const INPUT_IMAGE: &str = "image";
pub const INPUT_TARGET: &str = "target";
pub const INPUT_MASK: &str = "mask";
pub const INPUT_CLASS_WEIGHTS: &str = "class_weights";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of 2x downsampling steps.
    pub depth: usize,
    pub base_channels: usize,
    pub dropout_p: f64,
    /// Blocks followed by dropout: `enc{l}`, `bottleneck`, `dec{l}`.
    pub dropout_sites: Vec<String>,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::new(1, 14, 2, 4, 0.1)
    }
}

impl UNetConfig {
    /// Config with dropout after every encoder, bottleneck and decoder block.
    pub fn new(in_channels: usize, num_classes: usize, depth: usize, base_channels: usize, dropout_p: f64) -> Self {
        Self {
            in_channels,
            num_classes,
            depth,
            base_channels,
            dropout_p,
            dropout_sites: Self::all_sites(depth),
        }
    }

    pub fn all_sites(depth: usize) -> Vec<String> {
        let mut v: Vec<String> = (0..depth).map(|l| format!("enc{l}")).collect();
        v.push("bottleneck".into());
        v.extend((0..depth).rev().map(|l| format!("dec{l}")));
        v
    }

    pub fn validate(&self) -> Result<(), SegError> {
        let fail = |m: String| Err(SegError::Config(m));
        if self.depth < 1 {
            return fail("depth must be at least 1".into());
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return fail("channel counts must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes {} < 2", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout p {} outside [0, 1)", self.dropout_p));
        }
        let valid = Self::all_sites(self.depth);
        if let Some(s) = self.dropout_sites.iter().find(|s| !valid.contains(s)) {
            return fail(format!("unknown dropout site {s:?}"));
        }
        Ok(())
    }

    /// Spatial sizes must halve cleanly `depth` times.
    pub fn check_spatial(&self, dims: [usize; 3]) -> Result<(), SegError> {
        let f = 1usize << self.depth;
        if let Some(a) = (0..3).find(|&a| dims[a] == 0 || !dims[a].is_multiple_of(f)) {
            return Err(SegError::Shape(format!(
                "spatial axis {a} has size {}, not divisible by 2^depth = {f}",
                dims[a]
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count of the layout built by [`build_unet`].
    pub fn param_count(&self) -> usize {
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k * k + co;
        let block = |ci: usize, co: usize| conv(ci, co, 3) + 2 * co + conv(co, co, 3) + 2 * co;
        let ch = |l: usize| self.base_channels << l;
        let mut total = 0;
        let mut cin = self.in_channels;
        for l in 0..self.depth {
            total += block(cin, ch(l));
            cin = ch(l);
        }
        total += block(cin, ch(self.depth));
        for l in (0..self.depth).rev() {
            total += ch(l + 1) * ch(l) * 8 + ch(l);
            total += block(2 * ch(l), ch(l));
        }
        total + conv(ch(0), self.num_classes, 1)
    }
}

/// A U-Net graph with its loss head and parameters.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: UNetConfig,
    graph: Graph,
    probs: NodeId,
    loss: NodeId,
}

struct Builder<'a> {
    g: &'a mut Graph,
    seed: u64,
    dropout_p: f64,
    sites: &'a [String],
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: [usize; 5], std: f64, fill: f64) -> NodeId {
        let idx = self.g.params().len() as u64;
        let t = if std > 0.0 {
            Tensor::randn(shape, std, &mut Stream::new(self.seed, purpose::WEIGHT_INIT, idx))
        } else {
            Tensor::full(shape, fill)
        };
        self.g.param(&name, t)
    }

    /// Kaiming normal for LeakyReLU: `std = sqrt(2 / ((1 + a^2) fan_in))`.
    fn kaiming(fan_in: usize) -> f64 {
        (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt()
    }

    fn conv(&mut self, x: NodeId, ci: usize, co: usize, k: usize, name: &str) -> NodeId {
        let w = self.param(
            format!("{name}.w"),
            [co, ci, k, k, k],
            Self::kaiming(ci * k * k * k),
            0.0,
        );
        let b = self.param(format!("{name}.b"), [1, co, 1, 1, 1], 0.0, 0.0);
        self.g.conv3d(x, w, b)
    }

    fn conv_norm_act(&mut self, x: NodeId, ci: usize, co: usize, name: &str) -> NodeId {
        let c = self.conv(x, ci, co, 3, &format!("{name}.conv"));
        let gamma = self.param(format!("{name}.norm.g"), [1, co, 1, 1, 1], 0.0, 1.0);
        let beta = self.param(format!("{name}.norm.b"), [1, co, 1, 1, 1], 0.0, 0.0);
        let n = self.g.instance_norm(c, gamma, beta);
        self.g.leaky_relu(n, LEAKY_SLOPE)
    }

    fn block(&mut self, x: NodeId, ci: usize, co: usize, site: &str) -> NodeId {
        let a = self.conv_norm_act(x, ci, co, &format!("{site}.1"));
        let b = self.conv_norm_act(a, co, co, &format!("{site}.2"));
        if self.sites.iter().any(|s| s == site) {
            self.g.dropout(b, self.dropout_p)
        } else {
            b
        }
    }

    fn up(&mut self, x: NodeId, ci: usize, co: usize, name: &str) -> NodeId {
        // Each output voxel of a stride-2 kernel-2 transpose sees one tap per input channel.
        let w = self.param(format!("{name}.w"), [ci, co, 2, 2, 2], Self::kaiming(ci), 0.0);
        let b = self.param(format!("{name}.b"), [1, co, 1, 1, 1], 0.0, 0.0);
        self.g.transposed_conv3d(x, w, b)
    }
}

/// Encoder levels `0..depth` with `base * 2^l` channels, each two
/// conv-norm-LeakyReLU units followed by 2x max pooling; a bottleneck block;
/// decoder levels that upsample by transposed convolution, concatenate the
/// skip connection and apply another block; a final 1x1x1 convolution and
/// channel softmax. Dropout follows each block listed in `dropout_sites`.
pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<SegModel, SegError> {
    cfg.validate()?;
    let mut g = Graph::new();
    let image = g.input(INPUT_IMAGE);
    let mut b = Builder {
        g: &mut g,
        seed,
        dropout_p: cfg.dropout_p,
        sites: &cfg.dropout_sites,
    };
    let ch = |l: usize| cfg.base_channels << l;
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = image;
    let mut cin = cfg.in_channels;
    for l in 0..cfg.depth {
        let e = b.block(x, cin, ch(l), &format!("enc{l}"));
        skips.push(e);
        x = b.g.max_pool3d(e);
        cin = ch(l);
    }
    x = b.block(x, cin, ch(cfg.depth), "bottleneck");
    for l in (0..cfg.depth).rev() {
        let u = b.up(x, ch(l + 1), ch(l), &format!("up{l}"));
        let cat = b.g.concat(&[skips[l], u]);
        x = b.block(cat, 2 * ch(l), ch(l), &format!("dec{l}"));
    }
    let logits = b.conv(x, ch(0), cfg.num_classes, 1, "head");
    let probs = g.softmax(logits);

    // Loss head: 1 - sum_c w_c dice_c, with w_c = 1 / #present on present classes.
    let target = g.input(INPUT_TARGET);
    let mask = g.input(INPUT_MASK);
    let weights = g.input(INPUT_CLASS_WEIGHTS);
    let dice = g.dice_terms(probs, target, mask);
    let mean = g.reduce_sum(dice, Some(weights));
    let neg = g.scale(mean, -1.0);
    let one = g.constant(Tensor::scalar(1.0));
    let loss = g.add(one, neg);
    Ok(SegModel {
        config: cfg.clone(),
        graph: g,
        probs,
        loss,
    })
}

impl SegModel {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn probs_node(&self) -> NodeId {
        self.probs
    }

    pub fn loss_node(&self) -> NodeId {
        self.loss
    }

    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    pub fn params(&self) -> &[Tensor] {
        self.graph.params()
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<(), SegError> {
        let cur = self.graph.params_mut();
        if cur.len() != params.len() {
            return Err(SegError::Shape(format!(
                "{} parameter tensors, expected {}",
                params.len(),
                cur.len()
            )));
        }
        for (i, (c, p)) in cur.iter().zip(params).enumerate() {
            if c.shape() != p.shape() {
                return Err(SegError::Shape(format!(
                    "parameter {i}: {:?} vs {:?}",
                    p.shape(),
                    c.shape()
                )));
            }
        }
        cur.clone_from_slice(params);
        Ok(())
    }

    /// Changes the dropout rate at every configured site.
    pub fn set_dropout_p(&mut self, p: f64) -> Result<(), SegError> {
        if !(0.0..1.0).contains(&p) {
            return Err(SegError::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        self.config.dropout_p = p;
        self.graph.set_dropout_rate(p);
        Ok(())
    }

    pub fn check_image(&self, image: &Tensor) -> Result<(), SegError> {
        let s = image.shape();
        if s[0] != 1 {
            return Err(SegError::Shape(format!("batch size {} (axis 0), expected 1", s[0])));
        }
        if s[1] != self.config.in_channels {
            return Err(SegError::Shape(format!(
                "image has {} channels (axis 1), model expects {}",
                s[1], self.config.in_channels
            )));
        }
        self.config.check_spatial([s[2], s[3], s[4]])
    }

    /// Class probabilities `[1, classes, D, H, W]`.
    pub fn forward_probs(&mut self, image: &Tensor, mode: Mode, key: u64) -> Result<&Tensor, SegError> {
        self.check_image(image)?;
        self.graph.forward_to(&[(INPUT_IMAGE, image)], self.probs, mode, key)?;
        Ok(self.graph.value(self.probs)?)
    }

    fn loss_inputs<'a>(image: &'a Tensor, t: &'a LabelTargets) -> [(&'static str, &'a Tensor); 4] {
        [
            (INPUT_IMAGE, image),
            (INPUT_TARGET, &t.target),
            (INPUT_MASK, &t.mask),
            (INPUT_CLASS_WEIGHTS, &t.class_weights),
        ]
    }

    pub fn loss(&mut self, image: &Tensor, targets: &LabelTargets, mode: Mode, key: u64) -> Result<f64, SegError> {
        self.check_image(image)?;
        self.graph
            .forward_to(&Self::loss_inputs(image, targets), self.loss, mode, key)?;
        Ok(self.graph.value(self.loss)?.data()[0])
    }

    /// Loss and parameter gradients for one training step.
    pub fn loss_and_grads(
        &mut self,
        image: &Tensor,
        targets: &LabelTargets,
        mode: Mode,
        key: u64,
    ) -> Result<(f64, Vec<Tensor>), SegError> {
        let loss = self.loss(image, targets, mode, key)?;
        let grads = self
            .graph
            .backward(self.loss, &Tensor::scalar(1.0), GradTargets::Params)?;
        let params = grads
            .params
            .into_iter()
            .zip(self.graph.params())
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((loss, params))
    }

    /// FNV-1a over parameter names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in self.graph.param_names().iter().zip(self.graph.params()) {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Checkpoint whose metadata is `{"unet": config, "extra": extra}`.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({ "unet": self.config, "extra": extra });
        Checkpoint {
            meta: meta.to_string(),
            tensors: self
                .graph
                .param_names()
                .iter()
                .cloned()
                .zip(self.graph.params().iter().cloned())
                .collect(),
        }
    }

    /// Rebuilds the architecture from metadata and loads parameters by name.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, serde_json::Value), SegError> {
        let meta: serde_json::Value =
            serde_json::from_str(&ckpt.meta).map_err(|e| SegError::Config(format!("checkpoint metadata: {e}")))?;
        let cfg: UNetConfig = serde_json::from_value(meta["unet"].clone())
            .map_err(|e| SegError::Config(format!("checkpoint architecture: {e}")))?;
        let mut model = build_unet(&cfg, 0)?;
        let mut params = Vec::with_capacity(model.params().len());
        for name in model.graph.param_names() {
            let t = ckpt
                .get(name)
                .ok_or_else(|| SegError::Config(format!("checkpoint lacks parameter {name}")))?;
            params.push(t.clone());
        }
        if ckpt.tensors.len() != params.len() {
            return Err(SegError::Config(format!(
                "checkpoint has {} tensors, architecture needs {}",
                ckpt.tensors.len(),
                params.len()
            )));
        }
        model.set_params(&params)?;
        Ok((model, meta["extra"].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_param_count_by_hand() {
        // depth 1, base 2, one input channel, two classes:
        //   enc0   conv 1->2 (54 + 2), norm (4), conv 2->2 (108 + 2), norm (4)  = 174
        //   bottom conv 2->4 (216 + 4), norm (8), conv 4->4 (432 + 4), norm (8) = 672
        //   up0    transpose 4->2 (64 + 2)                                      =  66
        //   dec0   conv 4->2 (216 + 2), norm (4), conv 2->2 (108 + 2), norm (4) = 336
        //   head   conv 2->2 1x1x1 (4 + 2)                                      =   6
        let cfg = UNetConfig::new(1, 2, 1, 2, 0.1);
        let m = build_unet(&cfg, 0).unwrap();
        assert_eq!(m.param_count(), 1254);
        assert_eq!(cfg.param_count(), 1254);
        let cfg = UNetConfig::new(4, 14, 2, 4, 0.1);
        assert_eq!(build_unet(&cfg, 0).unwrap().param_count(), cfg.param_count());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = UNetConfig::new(2, 3, 1, 2, 0.1);
        let a = build_unet(&cfg, 5).unwrap();
        let b = build_unet(&cfg, 5).unwrap();
        let c = build_unet(&cfg, 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn output_keeps_spatial_shape() {
        let cfg = UNetConfig::new(2, 5, 2, 2, 0.1);
        let mut m = build_unet(&cfg, 0).unwrap();
        let x = Tensor::randn([1, 2, 8, 4, 12], 1.0, &mut Stream::new(0, purpose::TEST_DATA, 0));
        let p = m.forward_probs(&x, Mode::Eval, 0).unwrap();
        assert_eq!(p.shape(), [1, 5, 8, 4, 12]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = UNetConfig::new(2, 5, 2, 2, 0.1);
        let mut m = build_unet(&cfg, 0).unwrap();
        let odd = Tensor::zeros([1, 2, 8, 6, 8]);
        assert!(m
            .forward_probs(&odd, Mode::Eval, 0)
            .unwrap_err()
            .to_string()
            .contains("spatial axis 1"));
        let wrong = Tensor::zeros([1, 3, 8, 8, 8]);
        assert!(m.forward_probs(&wrong, Mode::Eval, 0).is_err());
        let mut bad = cfg.clone();
        bad.dropout_sites.push("enc7".into());
        assert!(build_unet(&bad, 0).is_err());
        assert!(build_unet(&UNetConfig::new(1, 1, 1, 1, 0.0), 0).is_err());
    }

    #[test]
    fn checkpoint_restores_model() {
        let cfg = UNetConfig::new(1, 3, 1, 2, 0.2);
        let m = build_unet(&cfg, 3).unwrap();
        let ck = m.to_checkpoint(serde_json::json!({"preset": "t1"}));
        let (back, extra) = SegModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.params(), m.params());
        assert_eq!(extra["preset"], "t1");
    }
}
