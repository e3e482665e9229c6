//! The flat run configuration. Every tunable constant has a key and a
//! default; unknown keys are rejected. Files are TOML, overrides are
//! `key=value` strings parsed as TOML values (bare words become strings).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{AnchorSpec, LossWeights, RoiSettings, SgdConfig, TrainOptions};
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, Interpolation};
use crate::meanteacher::{AdaptConfig, Curriculum, CurriculumStep};
use crate::synthdata::{AugmentationParams, DomainConfig, DomainTag, ProposalParams, SizeModel};
use crate::training::SourceTrainConfig;
use crate::uncertainty::AuEncoding;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream.
    pub seed: u64,
    /// Worker threads for the parallel read-only sections (0: all cores).
    pub threads: usize,

    pub sim_frames: usize,
    pub real_train_frames: usize,
    pub real_test_frames: usize,

    pub sim_size_catalog: Vec<[f64; 3]>,
    pub sim_base_point_density: f64,
    pub sim_density_falloff: f64,
    pub sim_point_noise_std: f64,
    pub sim_dropout_rate: f64,

    pub real_size_mean: [f64; 3],
    pub real_size_std: [f64; 3],
    pub real_base_point_density: f64,
    pub real_density_falloff: f64,
    pub real_point_noise_std: f64,
    pub real_dropout_rate: f64,

    pub objects_min: usize,
    pub objects_max: usize,
    pub distance_min: f64,
    pub distance_max: f64,
    pub sensor_height: f64,
    pub ground_point_density: f64,

    pub anchor_l: f64,
    pub anchor_w: f64,
    pub anchor_h: f64,
    pub crop_margin: f64,
    pub max_points: usize,
    pub nms_iou: f64,

    pub proposal_center_jitter: f64,
    pub proposal_yaw_jitter: f64,
    pub proposal_fp_rate: f64,

    pub aug_scale_min: f64,
    pub aug_scale_max: f64,
    pub aug_translate_max: f64,
    pub aug_rotate_max: f64,
    pub aug_flip_prob: f64,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap (0 disables clipping).
    pub grad_clip: f64,
    pub loss_weight_reg: f64,
    pub loss_weight_cls: f64,
    pub loss_weight_nll: f64,
    /// Whether soft weights also scale the classification loss.
    pub weight_classification: bool,
    pub au_encoding: AuEncoding,

    pub source_epochs: usize,
    pub source_batch_size: usize,
    pub val_fraction: f64,

    pub adapt_epochs: usize,
    pub adapt_batch_size: usize,
    pub ema_beta: f64,
    pub confidence_threshold: f64,
    pub validity_threshold: f64,
    pub u_min: f64,
    pub frame_level: bool,
    pub object_level: bool,
    /// "schedule" or "doubling".
    pub curriculum_mode: String,
    pub curriculum_epochs: Vec<usize>,
    pub curriculum_fractions: Vec<f64>,
    pub doubling_initial_fraction: f64,
    pub doubling_every: usize,
    pub eval_every: usize,

    pub eval_iou_threshold: f64,
    /// 40 or 11 recall points.
    pub eval_recall_points: u32,
    /// 3D IoU a detection needs to enter the AU diagnostics.
    pub diag_match_iou: f64,
    pub emit_svg: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = DomainConfig::default_sim();
        let real = DomainConfig::default_real();
        let SizeModel::Catalog { sizes } = sim.size_model else { unreachable!("sim default is a catalog") };
        let SizeModel::Gaussian { mean, std } = real.size_model else { unreachable!("real default is gaussian") };
        let anchor = AnchorSpec::default();
        let roi = RoiSettings::default();
        let prop = ProposalParams::default();
        let aug = AugmentationParams::default();
        let sgd = SgdConfig::default();
        let source = SourceTrainConfig::default();
        let adapt = AdaptConfig::default();
        let Curriculum::Schedule { steps } = Curriculum::default() else { unreachable!("default is a schedule") };
        Self {
            seed: 42,
            threads: 0,
            sim_frames: 400,
            real_train_frames: 400,
            real_test_frames: 200,
            sim_size_catalog: sizes,
            sim_base_point_density: sim.base_point_density,
            sim_density_falloff: sim.density_falloff,
            sim_point_noise_std: sim.point_noise_std,
            sim_dropout_rate: sim.dropout_rate,
            real_size_mean: mean,
            real_size_std: std,
            real_base_point_density: real.base_point_density,
            real_density_falloff: real.density_falloff,
            real_point_noise_std: real.point_noise_std,
            real_dropout_rate: real.dropout_rate,
            objects_min: sim.objects_per_frame.0,
            objects_max: sim.objects_per_frame.1,
            distance_min: sim.distance_range.0,
            distance_max: sim.distance_range.1,
            sensor_height: sim.sensor_height,
            ground_point_density: sim.ground_point_density,
            anchor_l: anchor.l,
            anchor_w: anchor.w,
            anchor_h: anchor.h,
            crop_margin: roi.crop_margin,
            max_points: roi.max_points,
            nms_iou: roi.nms_iou,
            proposal_center_jitter: prop.center_jitter_std,
            proposal_yaw_jitter: prop.yaw_jitter_std,
            proposal_fp_rate: prop.fp_rate,
            aug_scale_min: aug.scale_range.0,
            aug_scale_max: aug.scale_range.1,
            aug_translate_max: aug.translate_max,
            aug_rotate_max: aug.rotate_max,
            aug_flip_prob: aug.flip_prob,
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            grad_clip: sgd.grad_clip.unwrap_or(0.0),
            loss_weight_reg: 1.0,
            loss_weight_cls: 1.0,
            loss_weight_nll: 1.0,
            weight_classification: true,
            au_encoding: AuEncoding::Corner,
            source_epochs: source.epochs,
            source_batch_size: source.batch_size,
            val_fraction: source.val_fraction,
            adapt_epochs: adapt.epochs,
            adapt_batch_size: adapt.batch_size,
            ema_beta: adapt.beta,
            confidence_threshold: adapt.confidence_threshold,
            validity_threshold: adapt.validity_threshold,
            u_min: adapt.u_min,
            frame_level: true,
            object_level: true,
            curriculum_mode: "schedule".into(),
            curriculum_epochs: steps.iter().map(|s| s.epoch).collect(),
            curriculum_fractions: steps.iter().map(|s| s.fraction).collect(),
            doubling_initial_fraction: 0.125,
            doubling_every: 10,
            eval_every: 0,
            eval_iou_threshold: 0.7,
            eval_recall_points: 40,
            diag_match_iou: 0.3,
            emit_svg: true,
        }
    }
}

fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not of the form key=value")))?;
    let key = key.trim().to_string();
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key, parsed))
}

impl RunConfig {
    /// Defaults, then the file (if any), then each `key=value` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for raw in overrides {
            let (key, value) = parse_override(raw)?;
            table.insert(key, value);
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.domain(DomainTag::Sim).validate()?;
        self.domain(DomainTag::Real).validate()?;
        self.anchor()?;
        self.source_train()?;
        self.adapt()?.validate()?;
        if !(0.0..=1.0).contains(&self.eval_iou_threshold) || !(0.0..=1.0).contains(&self.diag_match_iou) {
            return Err(Error::Config("IoU thresholds must lie in [0, 1]".into()));
        }
        self.interpolation()?;
        Ok(())
    }

    pub fn domain(&self, tag: DomainTag) -> DomainConfig {
        let common = |size_model, density, falloff, noise, dropout| DomainConfig {
            domain: tag,
            size_model,
            base_point_density: density,
            density_falloff: falloff,
            point_noise_std: noise,
            dropout_rate: dropout,
            objects_per_frame: (self.objects_min, self.objects_max),
            distance_range: (self.distance_min, self.distance_max),
            sensor_height: self.sensor_height,
            ground_point_density: self.ground_point_density,
        };
        match tag {
            DomainTag::Sim => common(
                SizeModel::Catalog { sizes: self.sim_size_catalog.clone() },
                self.sim_base_point_density,
                self.sim_density_falloff,
                self.sim_point_noise_std,
                self.sim_dropout_rate,
            ),
            DomainTag::Real => common(
                SizeModel::Gaussian { mean: self.real_size_mean, std: self.real_size_std },
                self.real_base_point_density,
                self.real_density_falloff,
                self.real_point_noise_std,
                self.real_dropout_rate,
            ),
        }
    }

    pub fn anchor(&self) -> Result<AnchorSpec> {
        AnchorSpec::new(self.anchor_l, self.anchor_w, self.anchor_h)
    }

    pub fn roi(&self) -> Result<RoiSettings> {
        let roi = RoiSettings {
            anchor: self.anchor()?,
            crop_margin: self.crop_margin,
            max_points: self.max_points,
            nms_iou: self.nms_iou,
        };
        roi.validate()?;
        Ok(roi)
    }

    pub fn proposals(&self) -> ProposalParams {
        ProposalParams {
            center_jitter_std: self.proposal_center_jitter,
            yaw_jitter_std: self.proposal_yaw_jitter,
            fp_rate: self.proposal_fp_rate,
        }
    }

    pub fn augmentation(&self) -> AugmentationParams {
        AugmentationParams {
            scale_range: (self.aug_scale_min, self.aug_scale_max),
            translate_max: self.aug_translate_max,
            rotate_max: self.aug_rotate_max,
            flip_prob: self.aug_flip_prob,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        let loss_weights = LossWeights {
            reg: self.loss_weight_reg,
            cls: self.loss_weight_cls,
            nll: self.loss_weight_nll,
        };
        if [loss_weights.reg, loss_weights.cls, loss_weights.nll].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(TrainOptions {
            anchor: self.anchor()?,
            loss_weights,
            weight_classification: self.weight_classification,
        })
    }

    pub fn interpolation(&self) -> Result<Interpolation> {
        match self.eval_recall_points {
            40 => Ok(Interpolation::Points40),
            11 => Ok(Interpolation::Points11),
            n => Err(Error::Config(format!("eval_recall_points must be 40 or 11, got {n}"))),
        }
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        Ok(EvalOptions {
            iou_threshold: self.eval_iou_threshold,
            interpolation: self.interpolation()?,
        })
    }

    pub fn curriculum(&self) -> Result<Curriculum> {
        let c = match self.curriculum_mode.as_str() {
            "schedule" => {
                if self.curriculum_epochs.len() != self.curriculum_fractions.len() {
                    return Err(Error::Config("curriculum_epochs and curriculum_fractions differ in length".into()));
                }
                Curriculum::Schedule {
                    steps: self
                        .curriculum_epochs
                        .iter()
                        .zip(&self.curriculum_fractions)
                        .map(|(&epoch, &fraction)| CurriculumStep { epoch, fraction })
                        .collect(),
                }
            }
            "doubling" => Curriculum::Doubling {
                initial_fraction: self.doubling_initial_fraction,
                every: self.doubling_every,
            },
            other => return Err(Error::Config(format!("curriculum_mode must be schedule or doubling, got {other:?}"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn source_train(&self) -> Result<SourceTrainConfig> {
        Ok(SourceTrainConfig {
            encoding: self.au_encoding,
            epochs: self.source_epochs,
            batch_size: self.source_batch_size,
            val_fraction: self.val_fraction,
            roi: self.roi()?,
            proposals: self.proposals(),
            augmentation: self.augmentation(),
            sgd: self.sgd(),
            train: self.train_options()?,
            eval: self.eval_options()?,
            seed: self.seed,
        })
    }

    pub fn adapt(&self) -> Result<AdaptConfig> {
        Ok(AdaptConfig {
            epochs: self.adapt_epochs,
            batch_size: self.adapt_batch_size,
            beta: self.ema_beta,
            confidence_threshold: self.confidence_threshold,
            validity_threshold: self.validity_threshold,
            u_min: self.u_min,
            frame_level: self.frame_level,
            object_level: self.object_level,
            curriculum: self.curriculum()?,
            roi: self.roi()?,
            proposals: self.proposals(),
            augmentation: self.augmentation(),
            sgd: self.sgd(),
            train: self.train_options()?,
            eval: self.eval_options()?,
            eval_every: self.eval_every,
            max_steps: None,
            seed: self.seed,
        })
    }
}
