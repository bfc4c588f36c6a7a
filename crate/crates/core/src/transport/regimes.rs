use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contiguous lower / middle / upper thirds of the block index range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRegimes {
    pub lower: Range<usize>,
    pub middle: Range<usize>,
    pub upper: Range<usize>,
}

impl LayerRegimes {
    pub fn get(&self, regime: Regime) -> Range<usize> {
        match regime {
            Regime::Lower => self.lower.clone(),
            Regime::Middle => self.middle.clone(),
            Regime::Upper => self.upper.clone(),
        }
    }
}

/// Splits `depth` blocks into three near-equal contiguous groups. When
/// `depth` is not divisible by three the extra blocks go to the upper
/// groups: 25 blocks split as 0–7, 8–15, 16–24.
pub fn layer_regimes(depth: usize) -> Result<LayerRegimes> {
    if depth < 3 {
        return Err(Error::Range(format!("need at least 3 layers for three regimes, got {depth}")));
    }
    let base = depth / 3;
    let rem = depth % 3;
    let sizes = [base, base + usize::from(rem >= 2), base + usize::from(rem >= 1)];
    let lower = 0..sizes[0];
    let middle = lower.end..lower.end + sizes[1];
    let upper = middle.end..depth;
    Ok(LayerRegimes { lower, middle, upper })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Lower,
    Middle,
    Upper,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Lower => "lower",
            Regime::Middle => "middle",
            Regime::Upper => "upper",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum NamedLayers {
    All,
    Lower,
    Middle,
    Upper,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LayerSetRepr {
    Named(NamedLayers),
    List(Vec<usize>),
}

/// A set of block indices: everything, one regime, or an explicit list.
///
/// Serializes as `"all"`, `"lower"`, `"middle"`, `"upper"` or a list of
/// indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "LayerSetRepr", into = "LayerSetRepr")]
pub enum LayerSet {
    #[default]
    All,
    Regime(Regime),
    Explicit(Vec<usize>),
}

impl From<LayerSetRepr> for LayerSet {
    fn from(r: LayerSetRepr) -> Self {
        match r {
            LayerSetRepr::Named(NamedLayers::All) => LayerSet::All,
            LayerSetRepr::Named(NamedLayers::Lower) => LayerSet::Regime(Regime::Lower),
            LayerSetRepr::Named(NamedLayers::Middle) => LayerSet::Regime(Regime::Middle),
            LayerSetRepr::Named(NamedLayers::Upper) => LayerSet::Regime(Regime::Upper),
            LayerSetRepr::List(v) => LayerSet::Explicit(v),
        }
    }
}

impl From<LayerSet> for LayerSetRepr {
    fn from(s: LayerSet) -> Self {
        match s {
            LayerSet::All => LayerSetRepr::Named(NamedLayers::All),
            LayerSet::Regime(Regime::Lower) => LayerSetRepr::Named(NamedLayers::Lower),
            LayerSet::Regime(Regime::Middle) => LayerSetRepr::Named(NamedLayers::Middle),
            LayerSet::Regime(Regime::Upper) => LayerSetRepr::Named(NamedLayers::Upper),
            LayerSet::Explicit(v) => LayerSetRepr::List(v),
        }
    }
}

impl LayerSet {
    /// Sorted, deduplicated layer indices for an engine of `depth` blocks.
    pub fn resolve(&self, depth: usize) -> Result<Vec<usize>> {
        let mut layers: Vec<usize> = match self {
            LayerSet::All => (0..depth).collect(),
            LayerSet::Regime(r) => layer_regimes(depth)?.get(*r).collect(),
            LayerSet::Explicit(v) => v.clone(),
        };
        layers.sort_unstable();
        layers.dedup();
        if let Some(&bad) = layers.iter().find(|&&l| l >= depth) {
            return Err(Error::Range(format!("layer {bad} out of range for depth {depth}")));
        }
        Ok(layers)
    }
}

impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSet::All => f.write_str("all"),
            LayerSet::Regime(r) => r.fmt(f),
            LayerSet::Explicit(v) => {
                let parts: Vec<String> = v.iter().map(ToString::to_string).collect();
                f.write_str(&parts.join(";"))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AllSteps {
    All,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StepSetRepr {
    Named(AllSteps),
    List(Vec<usize>),
}

/// Denoising steps at which an intervention applies: `"all"` or a list.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "StepSetRepr", into = "StepSetRepr")]
pub enum StepSet {
    #[default]
    All,
    Explicit(Vec<usize>),
}

impl From<StepSetRepr> for StepSet {
    fn from(r: StepSetRepr) -> Self {
        match r {
            StepSetRepr::Named(AllSteps::All) => StepSet::All,
            StepSetRepr::List(v) => StepSet::Explicit(v),
        }
    }
}

impl From<StepSet> for StepSetRepr {
    fn from(s: StepSet) -> Self {
        match s {
            StepSet::All => StepSetRepr::Named(AllSteps::All),
            StepSet::Explicit(v) => StepSetRepr::List(v),
        }
    }
}

impl StepSet {
    pub fn resolve(&self, steps: usize) -> Result<Vec<usize>> {
        let mut out: Vec<usize> = match self {
            StepSet::All => (0..steps).collect(),
            StepSet::Explicit(v) => v.clone(),
        };
        out.sort_unstable();
        out.dedup();
        if let Some(&bad) = out.iter().find(|&&t| t >= steps) {
            return Err(Error::Range(format!("timestep {bad} out of range for {steps} steps")));
        }
        Ok(out)
    }
}

impl fmt::Display for StepSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepSet::All => f.write_str("all"),
            StepSet::Explicit(v) => {
                let parts: Vec<String> = v.iter().map(ToString::to_string).collect();
                f.write_str(&parts.join(";"))
            }
        }
    }
}
