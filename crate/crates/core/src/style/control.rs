use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which mechanism injects the style keys/values into self-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ControlMode {
    /// Plain self-attention; style statistics are ignored.
    None,
    /// Content queries attend to style keys/values only.
    DirectReplace,
    /// `λ·A(Q_c, K_s, V_s) + A(Q_c, K_c, V_c)` with two separate softmaxes.
    DirectAdd,
    /// Joint softmax over `[λ·Q_c K_sᵀ, Q_c K_cᵀ] / √d`.
    Msa,
    /// AdaIN of content features to the style moments, then [`ControlMode::Msa`].
    Nmsa,
}

impl ControlMode {
    pub const ALL: [ControlMode; 5] = [
        ControlMode::None,
        ControlMode::DirectReplace,
        ControlMode::DirectAdd,
        ControlMode::Msa,
        ControlMode::Nmsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControlMode::None => "none",
            ControlMode::DirectReplace => "direct_replace",
            ControlMode::DirectAdd => "direct_add",
            ControlMode::Msa => "msa",
            ControlMode::Nmsa => "nmsa",
        }
    }

    pub fn needs_style(self) -> bool {
        self != ControlMode::None
    }

    pub fn uses_lambda(self) -> bool {
        matches!(self, ControlMode::DirectAdd | ControlMode::Msa | ControlMode::Nmsa)
    }
}

impl fmt::Display for ControlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(ControlMode::None),
            "direct_replace" | "replace" => Ok(ControlMode::DirectReplace),
            "direct_add" | "add" => Ok(ControlMode::DirectAdd),
            "msa" => Ok(ControlMode::Msa),
            "nmsa" => Ok(ControlMode::Nmsa),
            _ => Err(Error::OutOfRange {
                what: "control",
                value: s.to_string(),
                range: "none|direct_replace|direct_add|msa|nmsa".into(),
            }),
        }
    }
}

/// A control mode together with its weight λ ∈ [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionControl {
    mode: ControlMode,
    lambda: f32,
}

impl AttentionControl {
    pub fn new(mode: ControlMode, lambda: f32) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self { mode, lambda })
    }

    pub fn none() -> Self {
        Self {
            mode: ControlMode::None,
            lambda: 1.0,
        }
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }
}

impl Default for AttentionControl {
    /// NMSA with λ = 1.
    fn default() -> Self {
        Self {
            mode: ControlMode::Nmsa,
            lambda: 1.0,
        }
    }
}

pub(crate) fn check_lambda(lambda: f32) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            what: "lambda",
            value: lambda.to_string(),
            range: "[0, 1]".into(),
        })
    }
}
