//! The tiny encoder-decoder segmentation network and its dual/EMA variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, config_err, dim_err, Result};
use crate::guard::AccessCounter;
use crate::tensor::{Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channel width of each encoder stage.
    pub widths: Vec<usize>,
    pub depth: usize,
    pub seed: u64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 5,
            widths: vec![16, 32],
            depth: 2,
            seed: 0,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.in_channels == 0 {
            return Err(config_err!("in_channels must be positive"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(config_err!(
                "widths must be non-empty and positive, got {:?}",
                self.widths
            ));
        }
        if self.depth != self.widths.len() {
            return Err(config_err!(
                "depth {} does not match {} encoder widths",
                self.depth,
                self.widths.len()
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// Spatial sizes must be divisible by this.
    pub fn stride_multiple(&self) -> usize {
        1 << self.depth
    }

    fn layers(&self) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut cur = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            layers.push(Layer::block(format!("enc.{i}"), cur, w));
            cur = w;
        }
        for j in 0..self.depth {
            let out = if j + 2 <= self.depth {
                self.widths[self.depth - 2 - j]
            } else {
                self.widths[0]
            };
            layers.push(Layer::block(format!("dec.{j}"), cur, out));
            cur = out;
        }
        layers.push(Layer {
            name: "head".into(),
            cin: cur,
            cout: self.num_classes,
            k: 1,
            norm: false,
        });
        layers
    }
}

struct Layer {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
    norm: bool,
}

impl Layer {
    fn block(name: String, cin: usize, cout: usize) -> Self {
        Self {
            name,
            cin,
            cout,
            k: 3,
            norm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Encoder: `depth` stride-2 `conv3x3 → norm → relu` stages. Decoder: one
/// `conv3x3 → norm → relu → upsample×2` per stage. Head: `conv1x1` to logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    config: SegNetConfig,
    params: Vec<Param>,
}

impl SegNet {
    pub fn new(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        for layer in config.layers() {
            let fan_in = layer.cin * layer.k * layer.k;
            // Kaiming fan-in: variance 2 / fan_in
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let weight: Vec<f64> = (0..layer.cout * fan_in)
                .map(|_| normal.sample(&mut rng))
                .collect();
            params.push(Param {
                name: format!("{}.conv.weight", layer.name),
                value: Tensor::new(&[layer.cout, layer.cin, layer.k, layer.k], weight)?,
            });
            params.push(Param {
                name: format!("{}.conv.bias", layer.name),
                value: Tensor::zeros(&[layer.cout]),
            });
            if layer.norm {
                params.push(Param {
                    name: format!("{}.norm.gain", layer.name),
                    value: Tensor::full(&[layer.cout], 1.0),
                });
                params.push(Param {
                    name: format!("{}.norm.shift", layer.name),
                    value: Tensor::zeros(&[layer.cout]),
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    /// Zeroes the 1×1 head.
    pub fn zero_head(&mut self) {
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with("head."))
        {
            p.value.data_mut().fill(0.0);
        }
    }

    /// Records every parameter as a leaf; the returned vars follow [`Self::params`].
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    /// Logits `[B, K, H, W]` for `images` `[B, Cin, H, W]`, using parameter vars from [`Self::bind`].
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], images: Var) -> Result<Var> {
        if bound.len() != self.params.len() {
            return Err(dim_err!(
                "forward: {} bound vars for {} parameters",
                bound.len(),
                self.params.len()
            ));
        }
        let [_, c, h, w] = tape.value(images).dims4()?;
        if c != self.config.in_channels {
            return Err(dim_err!(
                "forward: images have {c} channels (axis 1), network expects {}",
                self.config.in_channels
            ));
        }
        let m = self.config.stride_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(arg_err!(
                "forward: spatial size {h}x{w} not divisible by {m}"
            ));
        }
        let mut p = bound.iter().copied();
        let mut next = || p.next().expect("parameter layout matches layer list");
        let mut x = images;
        for _ in 0..self.config.depth {
            let (wt, b, g, s) = (next(), next(), next(), next());
            x = tape.conv2d(x, wt, b, 2, 1)?;
            x = tape.channel_norm(x, g, s, NORM_EPS)?;
            x = tape.relu(x);
        }
        for _ in 0..self.config.depth {
            let (wt, b, g, s) = (next(), next(), next(), next());
            x = tape.conv2d(x, wt, b, 1, 1)?;
            x = tape.channel_norm(x, g, s, NORM_EPS)?;
            x = tape.relu(x);
            x = tape.bilinear_upsample(x, 2)?;
        }
        let (wt, b) = (next(), next());
        tape.conv2d(x, wt, b, 1, 0)
    }

    /// Gradient-free logits.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(images.clone());
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    fn check_compatible(&self, other: &SegNet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(dim_err!(
                "networks have {} and {} parameter tensors",
                self.params.len(),
                other.params.len()
            ));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.value.shape() != b.value.shape() {
                return Err(dim_err!(
                    "parameter {}: shape {:?} vs {:?}",
                    a.name,
                    a.value.shape(),
                    b.value.shape()
                ));
            }
        }
        Ok(())
    }

    /// Replaces parameter values (same layout) from another network.
    pub fn copy_from(&mut self, other: &SegNet) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value.data_mut().copy_from_slice(b.value.data());
        }
        Ok(())
    }
}

pub fn build_segnet(config: SegNetConfig) -> Result<SegNet> {
    SegNet::new(config)
}

/// `teacher ← alpha·teacher + (1 − alpha)·student`, parameter-wise.
pub fn ema_update(teacher: &mut SegNet, student: &SegNet, alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(arg_err!("ema_update: alpha must be in [0, 1), got {alpha}"));
    }
    teacher.check_compatible(student)?;
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        for (tv, sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}

/// Two identically shaped, independently initialized networks. Reads of
/// the second network are counted so evaluation can prove it never used it.
#[derive(Debug)]
pub struct DualNetworks {
    net1: SegNet,
    net2: SegNet,
    net2_reads: AccessCounter,
}

impl DualNetworks {
    pub fn new(net1: SegNet, net2: SegNet) -> Result<Self> {
        net1.check_compatible(&net2)?;
        Ok(Self {
            net1,
            net2,
            net2_reads: AccessCounter::default(),
        })
    }

    pub fn net1(&self) -> &SegNet {
        &self.net1
    }

    pub fn net2(&self) -> &SegNet {
        self.net2_reads.hit();
        &self.net2
    }

    pub fn both_mut(&mut self) -> (&mut SegNet, &mut SegNet) {
        self.net2_reads.hit();
        (&mut self.net1, &mut self.net2)
    }

    pub fn net2_reads(&self) -> usize {
        self.net2_reads.count()
    }

    pub fn into_parts(self) -> (SegNet, SegNet) {
        (self.net1, self.net2)
    }
}

pub fn init_dual(config: &SegNetConfig, seed1: u64, seed2: u64) -> Result<DualNetworks> {
    if seed1 == seed2 {
        return Err(arg_err!(
            "init_dual: seeds must differ (got {seed1} twice); equal nets collapse to single-network pseudo supervision"
        ));
    }
    DualNetworks::new(
        SegNet::new(config.with_seed(seed1))?,
        SegNet::new(config.with_seed(seed2))?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> SegNetConfig {
        SegNetConfig {
            in_channels: 3,
            num_classes: 4,
            widths: vec![8, 16],
            depth: 2,
            seed: 1,
        }
    }

    #[test]
    fn deterministic_build() {
        let a = SegNet::new(small()).unwrap();
        let b = SegNet::new(small()).unwrap();
        assert_eq!(a, b);
        let bits = |n: &SegNet| -> Vec<u64> {
            n.params()
                .iter()
                .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn parameter_count_closed_form() {
        // conv: cout*cin*k*k + cout, norm: 2*cout
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let expected = conv(3, 8, 3) + 16 + conv(8, 16, 3) + 32 // encoder
            + conv(16, 8, 3) + 16 + conv(8, 8, 3) + 16 // decoder
            + conv(8, 4, 1); // head
        assert_eq!(expected, 3252);
        assert_eq!(SegNet::new(small()).unwrap().param_count(), expected);
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = SegNetConfig {
            num_classes: 5,
            ..SegNetConfig::default()
        };
        let net = SegNet::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(
            &[2, 3, 32, 32],
            (0..2 * 3 * 32 * 32).map(|_| rng.random()).collect(),
        )
        .unwrap();
        let y = net.predict(&x).unwrap();
        assert_eq!(y.shape(), &[2, 5, 32, 32]);
        assert_eq!(y, net.predict(&x).unwrap());
        assert!(net.predict(&Tensor::zeros(&[1, 3, 30, 32])).is_err());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut net = SegNet::new(small()).unwrap();
        net.zero_head();
        let y = net.predict(&Tensor::zeros(&[1, 3, 8, 8])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_configs() {
        let mut c = small();
        c.num_classes = 1;
        assert!(SegNet::new(c).is_err());
        let mut c = small();
        c.widths = vec![];
        c.depth = 0;
        assert!(SegNet::new(c).is_err());
        let mut c = small();
        c.depth = 3;
        assert!(SegNet::new(c).is_err());
    }

    #[test]
    fn dual_init() {
        let d = init_dual(&small(), 7, 8).unwrap();
        for (a, b) in d.net1().params().iter().zip(d.net2().params()) {
            assert_eq!(a.value.shape(), b.value.shape());
        }
        assert_ne!(d.net1(), d.net2());
        assert!(init_dual(&small(), 7, 7).is_err());
    }

    #[test]
    fn every_layer_differs_across_seed_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let s1: u64 = rng.random();
            let s2 = s1.wrapping_add(rng.random_range(1..u64::MAX));
            let d = init_dual(&small(), s1, s2).unwrap();
            for (a, b) in d.net1().params().iter().zip(d.net2().params()) {
                if a.name.ends_with("weight") {
                    let max_diff = a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f64::max);
                    assert!(max_diff > 0.0, "{} identical for seeds {s1}, {s2}", a.name);
                }
            }
        }
    }

    #[test]
    fn ema_cases() {
        let student = SegNet::new(small()).unwrap();
        let mut teacher = SegNet::new(small().with_seed(2)).unwrap();
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher.params(), student.params());

        let mut same = student.clone();
        ema_update(&mut same, &student, 0.7).unwrap();
        for (a, b) in same.params().iter().zip(student.params()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }

        let s1 = SegNet::new(small().with_seed(3)).unwrap();
        let s2 = SegNet::new(small().with_seed(4)).unwrap();
        let s3 = SegNet::new(small().with_seed(5)).unwrap();
        let t0 = SegNet::new(small().with_seed(6)).unwrap();
        let mut t = t0.clone();
        for s in [&s1, &s2, &s3] {
            ema_update(&mut t, s, 0.99).unwrap();
        }
        let i = 17;
        let pick = |n: &SegNet| n.params()[0].value.data()[i];
        let mut hand = pick(&t0);
        for s in [&s1, &s2, &s3] {
            hand = 0.99 * hand + (1.0 - 0.99) * pick(s);
        }
        assert_eq!(pick(&t), hand);

        let other = SegNet::new(SegNetConfig {
            widths: vec![4, 8],
            ..small()
        })
        .unwrap();
        assert!(ema_update(&mut t, &other, 0.5).is_err());
        assert!(ema_update(&mut t, &s1, 1.0).is_err());
    }

    #[test]
    fn ema_is_linear() {
        let s = SegNet::new(small()).unwrap();
        let t = SegNet::new(small().with_seed(9)).unwrap();
        let scale = |n: &SegNet, c: f64| {
            let mut n = n.clone();
            n.params_mut()
                .iter_mut()
                .for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v *= c));
            n
        };
        let mut a = t.clone();
        ema_update(&mut a, &s, 0.9).unwrap();
        let mut b = scale(&t, 3.0);
        ema_update(&mut b, &scale(&s, 3.0), 0.9).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            for (u, v) in x.value.data().iter().zip(y.value.data()) {
                assert!((3.0 * u - v).abs() < 1e-12);
            }
        }
    }
}
