//! Run configuration shared by training, inference and the ablation harness.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSpec;
use crate::backbone::NetConfig;
use crate::dataset::read_json;
use crate::detect::HeadConfig;
use crate::error::{CoreError, Result};
use crate::phantom::PhantomSpec;
use crate::preprocess::{AugmentSpec, WindowSpec, SLAB_DEPTH};
use crate::relation::RelationSpec;
use crate::rpn::ProposalConfig;
use crate::volume::Phase;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub fusion_channels: usize,
    /// Top-down pathway of the pyramid fusion; laterals only when false.
    pub top_down: bool,
    /// Relates every phase to the reference phase before fusion.
    pub multi_modal: bool,
    /// Input phase of single-phase models.
    pub phase: Phase,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fusion_channels: 64,
            top_down: true,
            multi_modal: true,
            phase: Phase::Arterial,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub enabled: bool,
    /// Proposals below this abnormality confidence are dropped.
    pub threshold: f64,
    pub loss_weight: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            threshold: 0.1,
            loss_weight: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub eval_iou: f64,
    /// Class-wise NMS on final detections.
    pub detect_nms: f64,
    /// Detections scoring below this are not reported.
    pub min_score: f64,
    /// ROI labelling during training: foreground at or above, background below.
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub per_lesion: bool,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            eval_iou: 0.3,
            detect_nms: 0.3,
            min_score: 0.0,
            fg_iou: 0.4,
            bg_iou: 0.2,
            per_lesion: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Gradients are rescaled to at most this global norm.
    pub clip_norm: f64,
    /// Lesion-free slices added per lesion slice.
    pub negative_fraction: f64,
    pub rois_per_image: usize,
    /// Linear learning-rate ramp at the start of training.
    pub warmup_steps: usize,
    /// Learning rate multiplier for the final third of training.
    pub final_lr_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 6,
            batch_size: 4,
            clip_norm: 5.0,
            negative_fraction: 0.15,
            rois_per_image: 24,
            warmup_steps: 20,
            final_lr_factor: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub slab_size: usize,
    /// Ground-truth boxes with a shorter side are not used as training targets.
    pub min_box_side: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_subjects: 20,
            test_subjects: 5,
            slab_size: 64,
            min_box_side: 3.0,
        }
    }
}

impl DataConfig {
    pub fn total(&self) -> usize {
        self.train_subjects + self.test_subjects
    }

    pub fn train_fraction(&self) -> f64 {
        self.train_subjects as f64 / self.total().max(1) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub net: NetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub anchors: AnchorSpec,
    #[serde(default)]
    pub proposal: ProposalConfig,
    #[serde(default)]
    pub relation: RelationSpec,
    #[serde(default)]
    pub window: WindowSpec,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub augment: AugmentSpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub paths: Paths,
}

impl RunConfig {
    /// Desk-scale defaults: 64x64 slabs, width 1/8, 20 + 5 phantom subjects.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            net: NetConfig {
                depth: 50,
                width_scale: 0.125,
                input_depth: SLAB_DEPTH,
                input_size: 64,
                conv1_depth: 4,
                concat_head: false,
            },
            model: ModelConfig::default(),
            anchors: AnchorSpec {
                scales: vec![6.0, 10.0, 16.0],
                ratios: vec![0.5, 1.0, 2.0],
                strides: vec![4, 8, 16, 32],
            },
            proposal: ProposalConfig::default(),
            relation: RelationSpec {
                window: Some(2),
                ..RelationSpec::default()
            },
            window: WindowSpec { width: 250.0, level: 60.0 },
            head: HeadConfig::default(),
            gate: GateConfig::default(),
            thresholds: Thresholds::default(),
            optimizer: OptimConfig {
                lr: 0.02,
                epochs: 30,
                ..OptimConfig::default()
            },
            augment: AugmentSpec::default(),
            data: DataConfig::default(),
            phantom: PhantomSpec::default(),
            paths: Paths::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Phases fed to the backbone, in stacking order.
    pub fn phases(&self) -> Vec<Phase> {
        if self.model.multi_modal {
            Phase::ALL.to_vec()
        } else {
            vec![self.model.phase]
        }
    }

    /// Phase whose slab drives the texture gate and overlays.
    pub fn reference_phase(&self) -> Phase {
        if self.model.multi_modal {
            self.relation.reference
        } else {
            self.model.phase
        }
    }

    /// Pyramid level extents for the configured input.
    pub fn level_sizes(&self) -> Vec<(usize, usize)> {
        let mut s = self.net.input_size.div_ceil(2).div_ceil(2);
        let mut out = vec![(s, s)];
        for _ in 0..3 {
            s = s.div_ceil(2);
            out.push((s, s));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.anchors.validate()?;
        self.relation.validate()?;
        self.window.validate()?;
        self.head.validate()?;
        if self.net.input_depth != 1 && self.net.input_depth != SLAB_DEPTH {
            return Err(CoreError::Config(format!(
                "input_depth must be 1 (single slice) or {SLAB_DEPTH} (slab), got {}",
                self.net.input_depth
            )));
        }
        if self.data.slab_size != self.net.input_size {
            return Err(CoreError::Config(format!(
                "slab size {} differs from network input {}",
                self.data.slab_size, self.net.input_size
            )));
        }
        let sizes = self.level_sizes();
        self.anchors.check_levels(&sizes, (self.net.input_size, self.net.input_size))?;
        if self.head.level >= sizes.len() {
            return Err(CoreError::Config(format!("head level {} out of range", self.head.level)));
        }
        if self.model.fusion_channels == 0 {
            return Err(CoreError::Config("fusion_channels must be >= 1".into()));
        }
        if self.model.multi_modal && !self.phases().contains(&self.relation.reference) {
            return Err(CoreError::Config("relation reference phase is not an input phase".into()));
        }
        let t = &self.thresholds;
        for (name, v) in [("eval_iou", t.eval_iou), ("detect_nms", t.detect_nms), ("proposal nms", self.proposal.nms_iou)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(CoreError::Config(format!("{name} threshold {v} must be in (0, 1]")));
            }
        }
        if !(t.bg_iou <= t.fg_iou) {
            return Err(CoreError::Config("bg_iou must not exceed fg_iou".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || o.batch_size == 0 || !(0.0..1.0).contains(&o.momentum) {
            return Err(CoreError::Config("optimizer needs lr > 0, batch_size >= 1, momentum in [0, 1)".into()));
        }
        self.phantom.validate()?;
        for (what, p) in [("dataset", &self.paths.dataset), ("out", &self.paths.out)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CoreError::Config(format!("{what} path {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}
