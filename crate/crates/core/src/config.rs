//! Configuration types shared between the library and the CLI.
//!
//! All configs deserialize from JSON with unknown keys rejected; every
//! field has a documented default (see the repo README).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel counts of the 5 view conv stages.
    pub filters: Vec<usize>,
    /// Kernel sizes (kT, kH, kW) of the 5 view conv stages.
    pub kernels: Vec<[usize; 3]>,
    /// Size of the view representation v and of the keyframe feature K.
    pub feature_dim: usize,
    /// Channel widths of the 6 keyframe blocks.
    pub keyframe_channels: Vec<usize>,
    /// Dilation rates of the 6 keyframe blocks.
    pub keyframe_dilations: Vec<usize>,
    /// Width of the first regression layer.
    pub hidden_units: usize,
    /// LeakyReLU negative slope.
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale defaults (64x64 inputs, small channel counts).
    pub fn desk() -> Self {
        Self {
            filters: vec![8, 16, 32, 64, 64],
            kernels: vec![[3, 3, 3]; 5],
            feature_dim: 64,
            keyframe_channels: vec![8, 8, 16, 16, 32, 32],
            keyframe_dilations: vec![1, 1, 2, 2, 4, 4],
            hidden_units: 64,
            leaky_slope: 0.2,
        }
    }

    /// Full-scale defaults (256x256 inputs).
    pub fn full_scale() -> Self {
        Self {
            filters: vec![16, 32, 64, 128, 256],
            kernels: vec![[3, 3, 3]; 5],
            feature_dim: 128,
            keyframe_channels: vec![16, 16, 32, 32, 64, 64],
            keyframe_dilations: vec![1, 1, 2, 2, 4, 4],
            hidden_units: 512,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.len() != 5 {
            return Err(Error::Config("filters must list exactly 5 stages".into()));
        }
        if self.kernels.len() != 5 {
            return Err(Error::Config("kernels must list exactly 5 stages".into()));
        }
        if self.keyframe_channels.len() != 6 || self.keyframe_dilations.len() != 6 {
            return Err(Error::Config(
                "keyframe_channels and keyframe_dilations must list exactly 6 blocks".into(),
            ));
        }
        if self.keyframe_dilations.iter().any(|&d| d < 1) {
            return Err(Error::Config("dilation rates must be >= 1".into()));
        }
        if self.feature_dim == 0 || self.hidden_units == 0 {
            return Err(Error::Config("feature_dim and hidden_units must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which branches and attention mechanisms are active.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub use_main: bool,
    pub use_support: bool,
    pub use_keyframe: bool,
    pub use_self_attention: bool,
    pub use_context_attention: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::full()
    }
}

pub const ABLATION_NAMES: &[&str] = &[
    "Ours",
    "Sup+Key",
    "Main+Key",
    "Key",
    "Main",
    "Main-ConAtt",
    "Ours-SelfAtt",
];

impl AblationConfig {
    pub fn full() -> Self {
        Self {
            use_main: true,
            use_support: true,
            use_keyframe: true,
            use_self_attention: true,
            use_context_attention: true,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        let mut a = Self::full();
        match name {
            "Ours" => {}
            "Sup+Key" => {
                a.use_main = false;
            }
            "Main+Key" => {
                a.use_support = false;
            }
            "Key" => {
                a.use_main = false;
                a.use_support = false;
            }
            "Main" => {
                a.use_support = false;
                a.use_keyframe = false;
            }
            "Main-ConAtt" => {
                a.use_support = false;
                a.use_keyframe = false;
                a.use_context_attention = false;
            }
            "Ours-SelfAtt" => {
                a.use_self_attention = false;
            }
            _ => {
                return Err(Error::Argument(format!(
                    "unknown ablation {name:?}; valid names: {}",
                    ABLATION_NAMES.join(", ")
                )))
            }
        }
        Ok(a)
    }

    pub fn branch_count(&self) -> usize {
        [self.use_main, self.use_support, self.use_keyframe]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.branch_count() == 0 {
            return Err(Error::Config("at least one branch must be enabled".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Exponential decay factor applied per epoch.
    pub lr_decay: f64,
    /// l2 regularization strength on multiplicative weights.
    pub lambda_qca: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Train on z-scored labels (statistics from the training fold);
    /// predictions are mapped back to millimeters before any metric.
    pub normalize_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 2e-4,
            lr_decay: 0.97,
            lambda_qca: 1e-6,
            epochs: 20,
            batch_size: 4,
            seed: 0,
            normalize_labels: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_lr <= 0.0 {
            return Err(Error::Config("initial_lr must be > 0".into()));
        }
        if self.lambda_qca < 0.0 {
            return Err(Error::Config("lambda_qca must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Index sampling ranges for the synthetic dataset, in millimeters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct IndexRanges {
    pub rvd_min: f64,
    pub rvd_max: f64,
    /// MLD is drawn as a fraction of min(RVD1, RVD2).
    pub mld_frac_min: f64,
    pub mld_frac_max: f64,
    pub ll_min: f64,
    pub ll_max: f64,
}

impl Default for IndexRanges {
    fn default() -> Self {
        Self {
            rvd_min: 2.0,
            rvd_max: 4.5,
            mld_frac_min: 0.5,
            mld_frac_max: 0.9,
            ll_min: 2.0,
            ll_max: 12.0,
        }
    }
}

impl IndexRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rvd_min > 0.0
            && self.rvd_max >= self.rvd_min
            && self.mld_frac_min > 0.0
            && self.mld_frac_max >= self.mld_frac_min
            && self.mld_frac_max < 1.0
            && self.ll_min > 0.0
            && self.ll_max >= self.ll_min;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid index ranges: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub mm_per_pixel: f64,
    /// Gaussian pixel noise sigma.
    pub noise: f64,
    /// Frame index at (and after) which the vessel is fully opacified.
    pub contrast_arrival_frame: usize,
    pub ranges: IndexRanges,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PhantomConfig {
    pub fn desk() -> Self {
        Self {
            frames: 4,
            height: 64,
            width: 64,
            mm_per_pixel: 0.5,
            noise: 0.02,
            contrast_arrival_frame: 2,
            ranges: IndexRanges::default(),
        }
    }

    pub fn full_scale() -> Self {
        Self {
            frames: 10,
            height: 256,
            width: 256,
            mm_per_pixel: 0.125,
            noise: 0.02,
            contrast_arrival_frame: 5,
            ranges: IndexRanges::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("frames must be >= 1".into()));
        }
        if self.height < 64 || self.width < 64 {
            return Err(Error::Config("height and width must be >= 64".into()));
        }
        if self.mm_per_pixel <= 0.0 || self.noise < 0.0 {
            return Err(Error::Config("invalid mm_per_pixel or noise".into()));
        }
        self.ranges.validate()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_folds: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_folds: 10,
            seed: 0,
        }
    }
}

/// Top-level CLI config file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: String,
    pub phantom: PhantomConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Configurations evaluated by `crossval`, one report row each.
    pub ablations: Vec<String>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.k_folds < 2 {
            return Err(Error::Config("k_folds must be >= 2".into()));
        }
        let names = if self.ablations.is_empty() {
            vec!["Ours".to_string()]
        } else {
            self.ablations.clone()
        };
        for n in &names {
            AblationConfig::from_name(n)?.validate()?;
        }
        Ok(())
    }

    pub fn ablation_names(&self) -> Vec<String> {
        if self.ablations.is_empty() {
            vec!["Ours".to_string()]
        } else {
            self.ablations.clone()
        }
    }
}
