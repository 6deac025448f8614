use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::align::TranslatorKind;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::segnet::{AugmentConfig, NetworkConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SupervisedOnly,
    JointTraining,
    GanBaseline,
    PseudoLabelBaseline,
    MeanTeacher,
    NoInterTeacher,
    NoIntraTeacher,
    DualTeacher,
}

/// Which version of the source images the student trains on directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceView {
    Raw,
    Translated,
}

pub const TABLE1_SUITE: [Method; 4] = [
    Method::SupervisedOnly,
    Method::JointTraining,
    Method::MeanTeacher,
    Method::DualTeacher,
];

pub const TABLE2_SUITE: [Method; 5] = [
    Method::PseudoLabelBaseline,
    Method::GanBaseline,
    Method::NoInterTeacher,
    Method::NoIntraTeacher,
    Method::DualTeacher,
];

impl Method {
    pub const ALL: [Method; 8] = [
        Method::SupervisedOnly,
        Method::JointTraining,
        Method::GanBaseline,
        Method::PseudoLabelBaseline,
        Method::MeanTeacher,
        Method::NoInterTeacher,
        Method::NoIntraTeacher,
        Method::DualTeacher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SupervisedOnly => "supervised_only",
            Method::JointTraining => "joint_training",
            Method::GanBaseline => "gan_baseline",
            Method::PseudoLabelBaseline => "pseudo_label_baseline",
            Method::MeanTeacher => "mean_teacher",
            Method::NoInterTeacher => "no_inter_teacher",
            Method::NoIntraTeacher => "no_intra_teacher",
            Method::DualTeacher => "dual_teacher",
        }
    }

    pub fn has_inter_teacher(self) -> bool {
        matches!(self, Method::NoIntraTeacher | Method::DualTeacher)
    }

    pub fn has_intra_teacher(self) -> bool {
        matches!(self, Method::MeanTeacher | Method::NoInterTeacher | Method::DualTeacher)
    }

    pub fn uses_translator(self) -> bool {
        matches!(
            self,
            Method::GanBaseline | Method::NoInterTeacher | Method::NoIntraTeacher | Method::DualTeacher
        )
    }

    pub fn uses_pseudo_labels(self) -> bool {
        matches!(self, Method::GanBaseline | Method::PseudoLabelBaseline | Method::NoIntraTeacher)
    }

    pub fn student_source(self) -> Option<SourceView> {
        match self {
            Method::JointTraining | Method::PseudoLabelBaseline => Some(SourceView::Raw),
            Method::GanBaseline | Method::NoInterTeacher => Some(SourceView::Translated),
            _ => None,
        }
    }

    pub fn uses_source(self) -> bool {
        self.student_source().is_some() || self.has_inter_teacher()
    }

    pub fn uses_unlabeled(self) -> bool {
        self.has_intra_teacher() || self.uses_pseudo_labels()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!("unknown method `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// Also the ramp-up horizon: must equal `loss_weights.t_max`.
    pub epochs: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub batch_unlabeled: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub loss_weights: LossWeights,
    /// Std-dev of the Gaussian input noise in the consistency term.
    pub noise_sigma: f64,
    pub ema_alpha: f64,
    pub pseudo_label_threshold: f64,
    /// Epochs of training before pseudo labels are used; `None` means `epochs / 2`.
    pub warmup_epochs: Option<usize>,
    pub seed: u64,
    pub ema_after_student: bool,
    pub augment: AugmentConfig,
    /// Architecture. Its `seed` is ignored in favour of [`TrainConfig::seed`].
    pub network: NetworkConfig,
    pub translator: TranslatorKind,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        TrainConfig {
            method,
            epochs: 50,
            batch_source: 4,
            batch_target: 4,
            batch_unlabeled: 4,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            loss_weights: LossWeights::default(),
            noise_sigma: 0.1,
            ema_alpha: 0.99,
            pseudo_label_threshold: 0.0,
            warmup_epochs: None,
            seed,
            ema_after_student: false,
            augment: AugmentConfig::default(),
            network: NetworkConfig::default(),
            translator: TranslatorKind::HistogramMatch,
        }
    }

    /// Sets the epoch count and the ramp-up horizon together.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self.loss_weights.t_max = epochs;
        self
    }

    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.epochs / 2)
    }

    pub fn student_network(&self) -> NetworkConfig {
        NetworkConfig {
            seed: self.seed,
            ..self.network.clone()
        }
    }

    pub fn inter_teacher_network(&self) -> NetworkConfig {
        NetworkConfig {
            seed: self.seed ^ 0x1D7E_AC4E_5EED_0001,
            ..self.network.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        self.loss_weights.validate()?;
        if self.loss_weights.t_max != self.epochs {
            return Err(Error::config(format!(
                "t_max ({}) must equal the number of epochs ({})",
                self.loss_weights.t_max, self.epochs
            )));
        }
        for (name, b) in [
            ("batch_source", self.batch_source),
            ("batch_target", self.batch_target),
            ("batch_unlabeled", self.batch_unlabeled),
        ] {
            if b == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!("noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(Error::config(format!("EMA decay must lie in [0, 1), got {}", self.ema_alpha)));
        }
        if !(0.0..=1.0).contains(&self.pseudo_label_threshold) {
            return Err(Error::config(format!(
                "pseudo_label_threshold must lie in [0, 1], got {}",
                self.pseudo_label_threshold
            )));
        }
        if self.augment.min_scale <= 0.0 || self.augment.min_scale > self.augment.max_scale {
            return Err(Error::config("augmentation scale range is empty or non-positive"));
        }
        self.network.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("finetune".parse::<Method>().is_err());
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::new(Method::DualTeacher, 0).validate().unwrap();
        let mut c = TrainConfig::new(Method::DualTeacher, 0);
        c.epochs = 10;
        assert!(c.validate().is_err());
        TrainConfig::new(Method::DualTeacher, 0).with_epochs(10).validate().unwrap();
    }
}
