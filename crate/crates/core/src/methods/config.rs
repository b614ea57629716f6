use std::fmt::Write as _;

use super::MethodKind;
use crate::config::{parse_bool, parse_kv, parse_list, parse_value};
use crate::data::{GeneratorParams, Ratio};
use crate::error::{config_err, Result};
use crate::eval::OverlapRegion;
use crate::losses::check_lambda;
use crate::model::SegNetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub partition: u64,
    pub net1: u64,
    pub net2: u64,
    pub aug: u64,
}

impl Seeds {
    /// Seeds of replicate `run`: the dataset stays fixed, everything else
    /// moves with the replicate.
    pub fn for_run(data: u64, run: u64) -> Self {
        Self {
            data,
            partition: run,
            net1: 2 * run + 1,
            net2: 2 * run + 2,
            aug: run,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub n_val: usize,
    pub ratio: Ratio,
    pub generator: GeneratorParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 256,
            height: 64,
            width: 64,
            num_classes: 5,
            n_val: 64,
            ratio: Ratio { num: 1, den: 8 },
            generator: GeneratorParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: MethodKind,
    pub lambda: f64,
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seeds: Seeds,
    pub ohem: bool,
    pub ema_alpha: f64,
    pub cps_on_labeled: bool,
    pub multi_scale: bool,
    /// Self-training drops pseudo labels whose confidence is below this.
    pub pseudo_threshold: Option<f64>,
    pub overlap_region: OverlapRegion,
    pub widths: Vec<usize>,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: MethodKind::Cps,
            lambda: 0.5,
            epochs: 30,
            base_lr: 0.05,
            batch_labeled: 2,
            batch_unlabeled: 2,
            seeds: Seeds::for_run(0, 0),
            ohem: false,
            ema_alpha: 0.99,
            cps_on_labeled: true,
            multi_scale: false,
            pseudo_threshold: None,
            overlap_region: OverlapRegion::GroundTruth,
            widths: vec![16, 32],
            data: DataConfig::default(),
        }
    }
}

pub const CONFIG_KEYS: [&str; 30] = [
    "method",
    "lambda",
    "epochs",
    "base_lr",
    "batch_labeled",
    "batch_unlabeled",
    "seed_data",
    "seed_partition",
    "seed_net1",
    "seed_net2",
    "seed_aug",
    "ohem",
    "ema_alpha",
    "cps_on_labeled",
    "multi_scale",
    "pseudo_threshold",
    "overlap_region",
    "widths",
    "n",
    "height",
    "width",
    "num_classes",
    "n_val",
    "ratio",
    "pixel_noise",
    "color_jitter",
    "class_offset",
    "texture",
    "max_shapes",
    "shape_size",
];

impl TrainConfig {
    pub fn model_config(&self, seed: u64) -> SegNetConfig {
        SegNetConfig {
            in_channels: crate::data::CHANNELS,
            num_classes: self.data.num_classes,
            widths: self.widths.clone(),
            depth: self.widths.len(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !self.lambda.is_finite() {
            return Err(config_err!("lambda must be finite"));
        }
        if self.epochs == 0 {
            return Err(config_err!("epochs must be >= 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(config_err!(
                "base_lr must be positive, got {}",
                self.base_lr
            ));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(config_err!("batch sizes must be >= 1"));
        }
        if self.method.uses_cutmix() && self.batch_unlabeled % 2 != 0 {
            return Err(config_err!(
                "{} pairs unlabeled images; batch_unlabeled {} is odd",
                self.method,
                self.batch_unlabeled
            ));
        }
        if self.method.is_dual() && self.seeds.net1 == self.seeds.net2 {
            return Err(config_err!(
                "{} needs different seeds for the two networks",
                self.method
            ));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(config_err!(
                "ema_alpha must be in [0, 1), got {}",
                self.ema_alpha
            ));
        }
        if let Some(t) = self.pseudo_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(config_err!("pseudo_threshold must be in [0, 1], got {t}"));
            }
        }
        let d = &self.data;
        if d.n == 0 || d.n_val == 0 {
            return Err(config_err!("dataset sizes must be >= 1"));
        }
        if !(2..=255).contains(&d.num_classes) {
            return Err(config_err!(
                "num_classes must be in 2..=255, got {}",
                d.num_classes
            ));
        }
        d.generator.validate().map_err(|e| config_err!("{e}"))?;
        let model = self.model_config(0);
        model.validate()?;
        let m = model.stride_multiple();
        if d.height % m != 0 || d.width % m != 0 || d.height < 16 || d.width < 16 {
            return Err(config_err!(
                "image size {}x{} must be >= 16 and divisible by {m}",
                d.height,
                d.width
            ));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "method" => self.method = v.parse().map_err(|_| config_err!("unknown method {v:?}"))?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "base_lr" => self.base_lr = parse_value(key, v)?,
            "batch_labeled" => self.batch_labeled = parse_value(key, v)?,
            "batch_unlabeled" => self.batch_unlabeled = parse_value(key, v)?,
            "seed" => self.seeds = Seeds::for_run(self.seeds.data, parse_value(key, v)?),
            "seed_data" => self.seeds.data = parse_value(key, v)?,
            "seed_partition" => self.seeds.partition = parse_value(key, v)?,
            "seed_net1" => self.seeds.net1 = parse_value(key, v)?,
            "seed_net2" => self.seeds.net2 = parse_value(key, v)?,
            "seed_aug" => self.seeds.aug = parse_value(key, v)?,
            "ohem" => self.ohem = parse_bool(key, v)?,
            "ema_alpha" => self.ema_alpha = parse_value(key, v)?,
            "cps_on_labeled" => self.cps_on_labeled = parse_bool(key, v)?,
            "multi_scale" => self.multi_scale = parse_bool(key, v)?,
            "pseudo_threshold" => {
                self.pseudo_threshold = match v {
                    "" | "none" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "overlap_region" => {
                self.overlap_region = match v {
                    "gt" => OverlapRegion::GroundTruth,
                    "gt+pred" => OverlapRegion::GroundTruthAndPredictions,
                    _ => {
                        return Err(config_err!(
                            "overlap_region must be gt or gt+pred, got {v:?}"
                        ))
                    }
                }
            }
            "widths" => self.widths = parse_list(key, v)?,
            "n" => self.data.n = parse_value(key, v)?,
            "height" => self.data.height = parse_value(key, v)?,
            "width" => self.data.width = parse_value(key, v)?,
            "num_classes" => self.data.num_classes = parse_value(key, v)?,
            "n_val" => self.data.n_val = parse_value(key, v)?,
            "ratio" => self.data.ratio = v.parse().map_err(|e| config_err!("ratio: {e}"))?,
            "pixel_noise" => self.data.generator.pixel_noise = parse_value(key, v)?,
            "color_jitter" => self.data.generator.color_jitter = parse_value(key, v)?,
            "class_offset" => self.data.generator.class_offset = parse_value(key, v)?,
            "texture" => self.data.generator.texture = parse_value(key, v)?,
            "max_shapes" => self.data.generator.max_shapes = parse_value(key, v)?,
            "shape_size" => match parse_list::<f64>(key, v)?[..] {
                [lo, hi] => self.data.generator.shape_size = (lo, hi),
                _ => return Err(config_err!("shape_size: expected `min, max`")),
            },
            other => return Err(config_err!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Applies every `key = value` line of a config text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Snapshot in the same `key = value` format, keys in a fixed order.
    pub fn to_text(&self) -> String {
        let s = &self.seeds;
        let d = &self.data;
        let region = match self.overlap_region {
            OverlapRegion::GroundTruth => "gt",
            OverlapRegion::GroundTruthAndPredictions => "gt+pred",
        };
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let values: [String; 30] = [
            self.method.to_string(),
            self.lambda.to_string(),
            self.epochs.to_string(),
            self.base_lr.to_string(),
            self.batch_labeled.to_string(),
            self.batch_unlabeled.to_string(),
            s.data.to_string(),
            s.partition.to_string(),
            s.net1.to_string(),
            s.net2.to_string(),
            s.aug.to_string(),
            self.ohem.to_string(),
            self.ema_alpha.to_string(),
            self.cps_on_labeled.to_string(),
            self.multi_scale.to_string(),
            self.pseudo_threshold
                .map_or("none".into(), |t| t.to_string()),
            region.to_string(),
            widths.join(","),
            d.n.to_string(),
            d.height.to_string(),
            d.width.to_string(),
            d.num_classes.to_string(),
            d.n_val.to_string(),
            d.ratio.to_string(),
            d.generator.pixel_noise.to_string(),
            d.generator.color_jitter.to_string(),
            d.generator.class_offset.to_string(),
            d.generator.texture.to_string(),
            d.generator.max_shapes.to_string(),
            format!("{},{}", d.generator.shape_size.0, d.generator.shape_size.1),
        ];
        let mut out = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.method = MethodKind::SpsCutMix;
        cfg.lambda = 0.25;
        cfg.pseudo_threshold = Some(0.9);
        cfg.overlap_region = OverlapRegion::GroundTruthAndPredictions;
        cfg.data.ratio = Ratio::new(1, 16).unwrap();
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_errors() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        let bad = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = ok.clone();
            f(&mut c);
            assert!(
                matches!(c.validate(), Err(crate::Error::Config(_))),
                "{c:?}"
            );
        };
        bad(&|c| c.lambda = -1.0);
        bad(&|c| c.epochs = 0);
        bad(&|c| c.seeds.net2 = c.seeds.net1);
        bad(&|c| {
            c.method = MethodKind::CpsCutMix;
            c.batch_unlabeled = 3
        });
        bad(&|c| c.ema_alpha = 1.0);
        bad(&|c| c.data.height = 30);
        // single-network methods may share seeds
        let mut c = ok.clone();
        c.method = MethodKind::Sps;
        c.seeds.net2 = c.seeds.net1;
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_values() {
        assert!(TrainConfig::from_text("colour = red").is_err());
        assert!(TrainConfig::from_text("method = gan").is_err());
        assert!(TrainConfig::from_text("ratio = 3").is_err());
        let c = TrainConfig::from_text("# comment\nseed = 2\n\nmethod = CPS_CutMix").unwrap();
        assert_eq!(c.method, MethodKind::CpsCutMix);
        assert_eq!(c.seeds, Seeds::for_run(0, 2));
    }
}
