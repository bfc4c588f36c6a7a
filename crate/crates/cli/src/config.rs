//! Run configuration: a TOML file, optionally layered over a named preset.
//!
//! ```toml
//! preset = "paper-default-mask"    # optional
//! prompt = [1, 2, 3, 4]            # defaults to 0, 1, 2, ... mod vocab
//!
//! [engine]
//! depth = 6
//! width = 32
//! heads = 4
//! latent_h = 8
//! latent_w = 8
//! encoder_len = 4
//! steps = 4
//! seed = 7
//! vocab = 64
//!
//! [segment]
//! layers = "all"
//! ```
//!
//! Relative paths inside the file resolve against the file's directory.

use std::path::{Path, PathBuf};

use massact::disrupt::StreamTarget;
use massact::engine::{EngineConfig, PlantSpec};
use massact::spatial::{MaskCriterion, DEFAULT_BAND_RADIUS, DEFAULT_MASK_K, DEFAULT_MAX_ITERS};
use massact::stats::ChannelCriterion;
use massact::transport::{LayerSet, StepSet, TransportGrid, TransportPlan};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

pub const PRESETS: &[(&str, &str)] = &[
    ("paper-default-mask", "[segment]\nk = 12\n"),
    (
        "paper-default-transport",
        "[transport]\nlayers = \"middle\"\nimage_k = 1024\nencoder_k = 0\n",
    ),
    ("sana-transport", "[transport]\nimage_k = 512\n"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    pub engine: EngineConfig,
    #[serde(default)]
    pub prompt: Option<Vec<u32>>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub plant: Option<PlantSection>,
    #[serde(default)]
    pub disrupt: Option<DisruptSection>,
    #[serde(default)]
    pub segment: Option<SegmentSection>,
    #[serde(default)]
    pub transport: Option<TransportSection>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    /// Layers whose activations are captured (every timestep, both streams).
    pub capture: LayerSet,
}

/// Planted ground truth; `generate` then writes a synthetic trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub foreground: Vec<usize>,
    pub channels: Vec<usize>,
    pub amplitude: f32,
    #[serde(default)]
    pub noise: f32,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisruptSection {
    #[serde(default)]
    pub stream: StreamTarget,
    pub criterion: ChannelCriterion,
    /// One report per value.
    pub k: Vec<usize>,
    #[serde(default)]
    pub layers: LayerSet,
    #[serde(default)]
    pub timesteps: StepSet,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentSection {
    /// MADF trajectory to read; the engine (or plant) is run when absent.
    pub dump: Option<PathBuf>,
    /// P2 ground-truth mask; taken from the plant when absent.
    pub ground_truth: Option<PathBuf>,
    pub layers: LayerSet,
    /// Timestep the mask is read at; the last denoising step when absent.
    pub timestep: Option<usize>,
    pub k: usize,
    pub channel_criteria: Vec<ChannelCriterion>,
    pub mask_criteria: Vec<MaskCriterion>,
    pub band: usize,
    pub seed: u64,
    pub cluster_on_normalized: bool,
    pub max_iters: usize,
}

impl Default for SegmentSection {
    fn default() -> Self {
        Self {
            dump: None,
            ground_truth: None,
            layers: LayerSet::All,
            timestep: None,
            k: DEFAULT_MASK_K,
            channel_criteria: vec![ChannelCriterion::Top],
            mask_criteria: vec![MaskCriterion::Max],
            band: DEFAULT_BAND_RADIUS,
            seed: 0,
            cluster_on_normalized: false,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

/// Prompts plus the plan fields, which sit directly in `[transport]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Table")]
pub struct TransportSection {
    pub source_prompt: Vec<u32>,
    pub target_prompt: Vec<u32>,
    #[serde(flatten)]
    pub plan: TransportPlan,
    pub sweep: Option<TransportGrid>,
}

impl TryFrom<Table> for TransportSection {
    type Error = String;

    fn try_from(mut t: Table) -> Result<Self, String> {
        fn take<T: serde::de::DeserializeOwned>(t: &mut Table, key: &str) -> Result<Option<T>, String> {
            t.remove(key)
                .map(|v| v.try_into().map_err(|e: toml::de::Error| format!("{key}: {}", one_line(&e.to_string()))))
                .transpose()
        }
        let source_prompt = take(&mut t, "source_prompt")?.ok_or("missing field `source_prompt`")?;
        let target_prompt = take(&mut t, "target_prompt")?.ok_or("missing field `target_prompt`")?;
        let sweep = take(&mut t, "sweep")?;
        let plan = Value::Table(t).try_into().map_err(|e: toml::de::Error| one_line(&e.to_string()))?;
        Ok(Self {
            source_prompt,
            target_prompt,
            plan,
            sweep,
        })
    }
}

/// Recursively overlays `top` on `base`; tables merge, everything else is replaced.
fn merge(base: &mut Table, top: Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn preset_table(name: &str) -> Result<Table, CliError> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            CliError::config(format!("preset: unknown preset {name:?} (known: {})", known.join(", ")))
        })?;
    Ok(text.parse::<Table>().expect("built-in presets parse"))
}

impl RunConfig {
    /// Parses `text`, expands the preset named in the file or by
    /// `preset_override`, then validates.
    pub fn parse(text: &str, preset_override: Option<&str>, base_dir: &Path) -> Result<Self, CliError> {
        let user: Table = text.parse().map_err(|e: toml::de::Error| CliError::config(one_line(&e.to_string())))?;
        let preset = preset_override
            .map(str::to_string)
            .or_else(|| user.get("preset").and_then(Value::as_str).map(str::to_string));
        let mut table = match &preset {
            Some(name) => preset_table(name)?,
            None => Table::new(),
        };
        merge(&mut table, user);
        if let Some(name) = preset {
            table.insert("preset".into(), Value::String(name));
        }
        let mut cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(one_line(&e.to_string())))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<&str>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, preset_override, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let Some(seg) = &mut self.segment {
            fix(&mut seg.dump);
            fix(&mut seg.ground_truth);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let e = &self.engine;
        e.validate().map_err(|err| CliError::config(format!("engine: {err}")))?;
        if let Some(prompt) = &self.prompt {
            if prompt.len() != e.encoder_len {
                return Err(CliError::config(format!(
                    "prompt: has {} tokens but engine.encoder_len is {}",
                    prompt.len(),
                    e.encoder_len
                )));
            }
            if let Some(t) = prompt.iter().find(|&&t| t as usize >= e.vocab) {
                return Err(CliError::config(format!("prompt: token {t} is not below engine.vocab = {}", e.vocab)));
            }
        }
        self.generate
            .capture
            .resolve(e.depth)
            .map_err(|err| CliError::config(format!("generate.capture: {err}")))?;
        if self.plant.is_some() {
            self.plant_spec()?.validate().map_err(|err| CliError::config(format!("plant: {err}")))?;
        }
        if let Some(d) = &self.disrupt {
            d.layers.resolve(e.depth).map_err(|err| CliError::config(format!("disrupt.layers: {err}")))?;
            d.timesteps.resolve(e.steps).map_err(|err| CliError::config(format!("disrupt.timesteps: {err}")))?;
            if let Some(k) = d.k.iter().find(|&&k| k > e.width) {
                return Err(CliError::config(format!("disrupt.k: {k} exceeds engine.width = {}", e.width)));
            }
        }
        if let Some(s) = &self.segment {
            s.layers.resolve(e.depth).map_err(|err| CliError::config(format!("segment.layers: {err}")))?;
            if s.k == 0 || s.k > e.width {
                return Err(CliError::config(format!("segment.k: must be in 1..={}, got {}", e.width, s.k)));
            }
            if let Some(t) = s.timestep {
                if t >= e.steps {
                    return Err(CliError::config(format!("segment.timestep: {t} must be below engine.steps = {}", e.steps)));
                }
            }
        }
        if let Some(t) = &self.transport {
            for (key, p) in [("transport.source_prompt", &t.source_prompt), ("transport.target_prompt", &t.target_prompt)] {
                if p.len() != e.encoder_len || p.iter().any(|&tok| tok as usize >= e.vocab) {
                    return Err(CliError::config(format!(
                        "{key}: needs {} tokens below engine.vocab = {}",
                        e.encoder_len, e.vocab
                    )));
                }
            }
            t.plan.resolve(e.depth, e.width).map_err(|err| CliError::config(format!("transport.layers: {err}")))?;
            if let Some(sweep) = &t.sweep {
                for l in &sweep.layers {
                    l.resolve(e.depth).map_err(|err| CliError::config(format!("transport.sweep.layers: {err}")))?;
                }
            }
        }
        Ok(())
    }

    pub fn prompt(&self) -> Vec<u32> {
        self.prompt.clone().unwrap_or_else(|| {
            (0..self.engine.encoder_len).map(|i| (i % self.engine.vocab) as u32).collect()
        })
    }

    pub fn plant_spec(&self) -> Result<PlantSpec, CliError> {
        let p = self.plant.as_ref().ok_or_else(|| CliError::config("plant: section missing".to_string()))?;
        Ok(PlantSpec {
            config: self.engine.clone(),
            foreground: p.foreground.clone(),
            channels: p.channels.clone(),
            amplitude: p.amplitude,
            noise: p.noise,
            seed: p.seed,
        })
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
