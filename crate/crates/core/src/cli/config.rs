use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderMode, TextConfig, VisionConfig};
use crate::error::{Error, Result};
use crate::generator::{DecoderConfig, Strategy, PROMPT};
use crate::pretrain::TrainConfig;

/// Environment variable that overrides `out_dir`.
pub const OUT_ENV: &str = "RADGEN_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub image_size: usize,
    /// existing corpus directory; generated from `n` and the seed when absent
    pub path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n: 1000,
            image_size: 32,
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub state: usize,
    pub embed_dim: usize,
    pub text_width: usize,
    pub text_depth: usize,
    pub text_max_len: usize,
    pub dec_width: usize,
    pub dec_layers: usize,
    pub dec_state: usize,
    pub max_length: usize,
    pub prompt: String,
    /// traversal of the vision encoder in stages 2 and 3
    pub directions: EncoderMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            patch: 8,
            width: 32,
            depth: 2,
            state: 8,
            embed_dim: 64,
            text_width: 64,
            text_depth: 2,
            text_max_len: 128,
            dec_width: 64,
            dec_layers: 2,
            dec_state: 8,
            max_length: 80,
            prompt: PROMPT.to_string(),
            directions: EncoderMode::MultiDir,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub epochs: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
}

impl StageSection {
    fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            ..Self::default()
        }
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

impl Default for StageSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch: t.batch,
            base_lr: t.base_lr,
            warmup_epochs: t.warmup_epochs,
            weight_decay: t.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeSection {
    #[serde(flatten)]
    pub stage: StageSection,
    pub mask_ratio: f64,
}

impl Default for MaeSection {
    fn default() -> Self {
        Self {
            stage: StageSection::with_epochs(6),
            mask_ratio: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    #[serde(flatten)]
    pub stage: StageSection,
    /// epochs with the decoder trainable before the frozen phase
    pub warm_epochs: usize,
    /// vision encoder trainable in the warm phase too
    pub warm_vision: bool,
    pub freeze_decoder: bool,
}

impl Default for SftSection {
    fn default() -> Self {
        Self {
            stage: StageSection {
                batch: 4,
                base_lr: 0.32,
                ..StageSection::with_epochs(4)
            },
            warm_epochs: 40,
            warm_vision: false,
            freeze_decoder: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    /// `greedy` or `beam`
    pub strategy: String,
    pub beam_width: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            strategy: "greedy".into(),
            beam_width: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointSection {
    pub stage1: Option<PathBuf>,
    pub stage2: Option<PathBuf>,
    pub sft: Option<PathBuf>,
}

/// Every knob of a run. Precedence: command line, then file, then these defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub stage1: StageSection,
    pub mae: MaeSection,
    pub stage2: StageSection,
    pub sft: SftSection,
    pub generate: GenerateSection,
    pub checkpoints: CheckpointSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            out_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            model: ModelSection::default(),
            stage1: StageSection::with_epochs(6),
            mae: MaeSection::default(),
            stage2: StageSection::with_epochs(4),
            sft: SftSection::default(),
            generate: GenerateSection::default(),
            checkpoints: CheckpointSection::default(),
        }
    }
}

impl RunConfig {
    /// The published model scale and schedule.
    pub fn reference() -> Self {
        let v = VisionConfig::reference();
        let stage = |batch| StageSection {
            epochs: 100,
            batch,
            base_lr: 1.5e-4,
            warmup_epochs: 5,
            weight_decay: 0.05,
        };
        Self {
            data: DataSection {
                image_size: v.image_size,
                ..DataSection::default()
            },
            model: ModelSection {
                patch: v.patch,
                width: v.width,
                depth: v.depth,
                state: v.state,
                embed_dim: v.embed_dim,
                max_length: 100,
                ..ModelSection::default()
            },
            stage1: stage(256),
            mae: MaeSection {
                stage: stage(256),
                mask_ratio: 0.75,
            },
            stage2: stage(128),
            sft: SftSection {
                stage: stage(128),
                ..SftSection::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies `key = value` overrides, where `key` is a dotted path such as `stage1.epochs`
    /// and `value` is a TOML literal (bare words are taken as strings).
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            let mut parts: Vec<&str> = key.split('.').collect();
            let leaf = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| unknown(key))?;
            let mut table = &mut root;
            for p in parts {
                table = table.get_mut(p).and_then(toml::Value::as_table_mut).ok_or_else(|| unknown(key))?;
            }
            // optional fields that are unset do not appear in the serialized table
            let optional = matches!(key.as_str(), "data.path" | "checkpoints.stage1" | "checkpoints.stage2" | "checkpoints.sft");
            if !table.contains_key(leaf) && !optional {
                return Err(unknown(key));
            }
            table.insert(leaf.to_string(), parse_value(raw));
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data.image_size % self.model.patch != 0 {
            return bad(format!(
                "image size {} is not a multiple of patch {}",
                self.data.image_size, self.model.patch
            ));
        }
        if self.model.max_length < 2 {
            return bad(format!("max_length {} < 2", self.model.max_length));
        }
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2), ("sft", &self.sft.stage), ("mae", &self.mae.stage)] {
            if s.batch == 0 {
                return bad(format!("{name}.batch must be positive"));
            }
            if !(s.base_lr >= 0.0) || !(s.weight_decay >= 0.0) {
                return bad(format!("{name}: learning rate and weight decay must be non-negative"));
            }
        }
        if !(self.mae.mask_ratio > 0.0 && self.mae.mask_ratio < 1.0) {
            return bad(format!("mae.mask_ratio {} outside (0, 1)", self.mae.mask_ratio));
        }
        self.strategy()?;
        Ok(())
    }

    pub fn strategy(&self) -> Result<Strategy> {
        match self.generate.strategy.as_str() {
            "greedy" => Ok(Strategy::Greedy),
            "beam" if self.generate.beam_width > 0 => Ok(Strategy::Beam(self.generate.beam_width)),
            "beam" => Err(Error::Config("beam_width must be at least 1".into())),
            s => Err(Error::Config(format!("unknown strategy `{s}`"))),
        }
    }

    /// `out_dir`, unless the environment overrides it.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| self.out_dir.clone())
    }

    pub fn vision(&self) -> VisionConfig {
        let m = &self.model;
        VisionConfig {
            image_size: self.data.image_size,
            patch: m.patch,
            width: m.width,
            depth: m.depth,
            state: m.state,
            embed_dim: m.embed_dim,
        }
    }

    pub fn text(&self, vocab_size: usize) -> TextConfig {
        let m = &self.model;
        TextConfig {
            vocab_size,
            width: m.text_width,
            depth: m.text_depth,
            state: m.state,
            max_len: m.text_max_len,
            embed_dim: m.embed_dim,
        }
    }

    pub fn decoder(&self, vocab_size: usize) -> DecoderConfig {
        let m = &self.model;
        DecoderConfig {
            vocab_size,
            width: m.dec_width,
            layers: m.dec_layers,
            state: m.dec_state,
            max_length: m.max_length,
            prompt: m.prompt.clone(),
            freeze_decoder: self.sft.freeze_decoder,
            vision_width: m.width,
        }
    }
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown key `{key}`"))
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
