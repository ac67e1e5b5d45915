//! Run configuration: named presets, JSON overlays and flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use dipa_core::backbone::{BackboneConfig, InitScheme};
use dipa_core::episodes::{DomainShift, GaussianTaskSpec, SamplerConfig};
use dipa_core::trainer::FinetuneConfig;
use dipa_core::{DType, Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Everything a `run` needs. The resolved form has every field spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub finetune: FinetuneConfig,
    /// Episode sampling from `pool`.
    pub sampler: SamplerConfig,
    /// Task generator used when there is no pool.
    pub synthetic: GaussianTaskSpec,
    /// DIPAW1 backbone; random weights from `weight_seed` and `init` when absent.
    pub weights: Option<PathBuf>,
    pub weight_seed: u64,
    pub init: InitScheme,
    pub pool: Option<PathBuf>,
    pub episodes: usize,
    pub seed: u64,
    pub workers: usize,
    pub precision: DType,
    pub record_timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// ViT-small, d_t = 7, unshifted synthetic tasks.
    Seen,
    /// ViT-small, d_t = 9, shifted synthetic tasks.
    Unseen,
    /// Four-block width-16 ViT on shifted 8x8 tasks; runs in seconds.
    Desk,
}

/// Backbone of the desk preset.
pub fn desk_backbone() -> BackboneConfig {
    BackboneConfig { image_size: 8, patch_size: 4, embed_dim: 16, depth: 4, heads: 2, ..BackboneConfig::tiny() }
}

/// Domain shift of the `unseen` and `desk` presets.
pub const SHIFT: DomainShift = DomainShift::RandomLinear { strength: 1.0, seed: 5 };

impl Preset {
    pub fn config(self) -> RunConfig {
        let vit = BackboneConfig::vit_small();
        let vit_tasks = GaussianTaskSpec { image_size: vit.image_size, ..GaussianTaskSpec::default() };
        let base = RunConfig {
            backbone: vit,
            finetune: FinetuneConfig::default(),
            sampler: SamplerConfig::default(),
            synthetic: vit_tasks,
            weights: None,
            weight_seed: 0,
            init: InitScheme::default(),
            pool: None,
            episodes: 600,
            seed: 0,
            workers: 0,
            precision: DType::F32,
            record_timing: false,
        };
        match self {
            Preset::Seen => base,
            Preset::Unseen => RunConfig {
                finetune: FinetuneConfig { d_t: 9, ..base.finetune },
                synthetic: GaussianTaskSpec { shift: SHIFT, ..base.synthetic },
                ..base
            },
            Preset::Desk => RunConfig {
                backbone: desk_backbone(),
                finetune: FinetuneConfig { d_t: 3, d_f: 4, ..base.finetune },
                synthetic: GaussianTaskSpec {
                    image_size: 8,
                    noise_std: 0.7,
                    shift: SHIFT,
                    ..GaussianTaskSpec::default()
                },
                init: InitScheme::TruncNormal { std: 0.2 },
                episodes: 50,
                precision: DType::F64,
                ..base
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.finetune.validate(self.backbone.depth)?;
        self.sampler.validate()?;
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be >= 1".into()));
        }
        if self.pool.is_none() {
            self.synthetic.validate()?;
            let (s, b) = (&self.synthetic, &self.backbone);
            if s.image_size != b.image_size || s.in_chans != b.in_chans {
                return Err(Error::Config(format!(
                    "synthetic tasks are {}x{}x{} but the backbone takes {}x{}x{}",
                    s.in_chans, s.image_size, s.image_size, b.in_chans, b.image_size, b.image_size
                )));
            }
        }
        Ok(())
    }
}

/// Recursive object merge; an object whose `kind` differs from the base
/// replaces it whole.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            let kind_changes = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changes {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// `preset` overlaid with the JSON file at `path`, if any.
pub fn load_run_config(preset: Preset, path: Option<&Path>) -> Result<RunConfig> {
    let mut value = serde_json::to_value(preset.config())?;
    if let Some(p) = path {
        merge(&mut value, read_json(p)?);
    }
    serde_json::from_value(value).map_err(|e| match path {
        Some(p) => Error::Config(format!("{}: {e}", p.display())),
        None => Error::Config(e.to_string()),
    })
}

/// A backbone named `vit-small`, `tiny` or `desk`, or a JSON file.
pub fn backbone_from_arg(arg: &str) -> Result<BackboneConfig> {
    let cfg = match arg {
        "vit-small" | "vit_small" => BackboneConfig::vit_small(),
        "tiny" => BackboneConfig::tiny(),
        "desk" => desk_backbone(),
        path => {
            let p = Path::new(path);
            serde_json::from_value(read_json(p)?).map_err(|e| Error::Config(format!("{path}: {e}")))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_are_valid() {
        for p in [Preset::Seen, Preset::Unseen, Preset::Desk] {
            p.config().validate().unwrap();
        }
        assert_eq!(Preset::Seen.config().finetune.d_t, 7);
        assert_eq!(Preset::Unseen.config().finetune.d_t, 9);
    }

    #[test]
    fn merge_is_deep() {
        let mut base = json!({"a": {"b": 1, "c": 2}, "d": 3});
        merge(&mut base, json!({"a": {"c": 5}, "e": 6}));
        assert_eq!(base, json!({"a": {"b": 1, "c": 5}, "d": 3, "e": 6}));
    }

    #[test]
    fn tagged_objects_switch_variant() {
        let mut base = json!({"shift": {"kind": "random_linear", "strength": 1.0, "seed": 5}});
        merge(&mut base, json!({"shift": {"kind": "none"}}));
        assert_eq!(base, json!({"shift": {"kind": "none"}}));
    }

    #[test]
    fn overlay_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"finetune": {"iterations": 3}, "synthetic": {"shift": {"kind": "none"}}}"#).unwrap();
        let c = load_run_config(Preset::Desk, Some(&p)).unwrap();
        assert_eq!(c.finetune.iterations, 3);
        assert_eq!(c.finetune.d_t, 3);
        assert_eq!(c.synthetic.shift, DomainShift::None);
        fs::write(&p, r#"{"finetune": {"iteratons": 3}}"#).unwrap();
        assert!(matches!(load_run_config(Preset::Desk, Some(&p)), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_task_size_is_rejected() {
        let mut c = Preset::Desk.config();
        c.synthetic.image_size = 16;
        assert!(c.validate().is_err());
    }
}
