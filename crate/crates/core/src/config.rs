//! Run configuration: every hyperparameter, loadable from JSON and
//! overridable with dotted `key=value` pairs.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::losses::{Stage1Weights, Stage2Weights};
use crate::mc::Strategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    /// Linear RGB behind the object.
    pub background: [f64; 3],
    pub render: RenderConfig,
    pub light: LightConfig,
    pub init: InitConfig,
    pub adam: AdamConfig,
    pub divergence: DivergenceConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub speccomp: SpecCompConfig,
    pub relight: RelightConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            threads: 0,
            background: [0.0; 3],
            render: RenderConfig::default(),
            light: LightConfig::default(),
            init: InitConfig::default(),
            adam: AdamConfig::default(),
            divergence: DivergenceConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            speccomp: SpecCompConfig::default(),
            relight: RelightConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub lowpass: bool,
    pub diffuse_fresnel: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { lowpass: true, diffuse_fresnel: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LightConfig {
    /// Cube face resolution of the learned environment.
    pub size: usize,
    /// Initial constant radiance of the learned environment.
    pub init_gray: f64,
    pub lut_size: usize,
    pub lut_samples: u32,
    pub prefilter_tail: f64,
    pub irradiance_size: usize,
}

impl Default for LightConfig {
    fn default() -> Self {
        LightConfig { size: 128, init_gray: 0.5, lut_size: 64, lut_samples: 4096, prefilter_tail: 8.0, irradiance_size: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Scene JSON to start from; a Fibonacci sphere is used when absent.
    pub scene: Option<String>,
    pub surfels: usize,
    pub center: [f64; 3],
    pub radius: f64,
    pub opacity: f64,
    pub albedo: f64,
    pub metallic: f64,
    pub roughness: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            scene: None,
            surfels: 4000,
            center: [0.0; 3],
            radius: 1.0,
            opacity: 0.5,
            albedo: 0.5,
            metallic: 0.0,
            roughness: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivergenceConfig {
    /// Abort when the loss exceeds `factor` times its initial value ...
    pub factor: f64,
    /// ... for this many consecutive iterations.
    pub patience: usize,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        DivergenceConfig { factor: 10.0, patience: 500 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryRates {
    /// Scaled by the scene extent.
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub albedo: f64,
    pub metallic: f64,
    pub roughness: f64,
    pub light: f64,
}

impl Default for GeometryRates {
    fn default() -> Self {
        GeometryRates {
            position: 1.6e-4,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 0.05,
            albedo: 0.0075,
            metallic: 0.005,
            roughness: 0.005,
            light: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub iterations: usize,
    pub weights: Stage1Weights,
    pub lr: GeometryRates,
    /// Disables both foundation-model prior losses.
    pub priors: bool,
    pub depth_distortion: bool,
    pub prune_every: usize,
    pub prune_threshold: f64,
    /// Rebuild the pre-filtered light every this many iterations.
    pub refilter_every: usize,
    pub log_every: usize,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            iterations: 50_000,
            weights: Stage1Weights::default(),
            lr: GeometryRates::default(),
            priors: true,
            depth_distortion: true,
            prune_every: 1000,
            prune_threshold: 0.005,
            refilter_every: 32,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialRates {
    pub albedo: f64,
    pub metallic: f64,
    pub roughness: f64,
    pub light: f64,
}

impl Default for MaterialRates {
    fn default() -> Self {
        MaterialRates { albedo: 0.0075, metallic: 0.005, roughness: 0.005, light: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub iterations: usize,
    pub weights: Stage2Weights,
    pub lr: MaterialRates,
    /// Ray budget per iteration; `floor(n_rays / n_r)` pixels are shaded.
    pub n_rays: usize,
    /// Samples per shaded pixel, split evenly between the two strategies.
    pub n_r: usize,
    pub strategy: Strategy,
    /// Trace secondary rays for visibility; otherwise the light is unoccluded.
    pub visibility: bool,
    /// Add one-bounce indirect light from traced hits.
    pub indirect: bool,
    pub freeze_light: bool,
    pub refilter_every: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            iterations: 20_000,
            weights: Stage2Weights::default(),
            lr: MaterialRates::default(),
            n_rays: 1 << 18,
            n_r: 32,
            strategy: Strategy::Mis,
            visibility: true,
            indirect: true,
            freeze_light: false,
            refilter_every: 32,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecCompConfig {
    pub enabled: bool,
    pub iterations: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub grid_levels: usize,
    pub lr_grid: f64,
    pub lr_mlp: f64,
    /// Foreground pixels per iteration.
    pub pixels: usize,
    /// Samples per pixel for the (frozen) physically based term.
    pub n_r: usize,
    pub log_every: usize,
}

impl Default for SpecCompConfig {
    fn default() -> Self {
        SpecCompConfig {
            enabled: true,
            iterations: 80_000,
            grid_width: 512,
            grid_height: 512,
            grid_levels: 8,
            lr_grid: 0.01,
            lr_mlp: 1e-3,
            pixels: 1024,
            n_r: 64,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelightConfig {
    pub n_d: usize,
    pub n_s: usize,
}

impl Default for RelightConfig {
    fn default() -> Self {
        RelightConfig { n_d: 1024, n_s: 1024 }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides in order; later ones win. Values are
    /// parsed as JSON when possible and taken as strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Config> {
        let mut root = serde_json::to_value(self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
            let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
            }
            info!("override {key} = {raw}");
            *slot = value;
        }
        serde_json::from_value(root).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = Config::default();
        assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.stage2.lr.albedo, 0.0075);
        assert_eq!(c.stage1.weights.n, 0.05);
        assert_eq!(c.speccomp.grid_levels, 8);
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = Config::default()
            .with_overrides(&["stage1.iterations=10".into(), "stage1.iterations=20".into(), "stage2.strategy=uniform".into()])
            .unwrap();
        assert_eq!(c.stage1.iterations, 20);
        assert_eq!(c.stage2.strategy, Strategy::Uniform);
        let c = Config::default().with_overrides(&["init.scene=a/b.json".into()]).unwrap();
        assert_eq!(c.init.scene.as_deref(), Some("a/b.json"));
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(Config::default().with_overrides(&["stage1.nope=1".into()]).is_err());
        assert!(Config::default().with_overrides(&["stage1.iterations=abc".into()]).is_err());
        assert!(Config::default().with_overrides(&["seed".into()]).is_err());
        let err = Config::from_json("{\n  \"seed\": 1,\n  \"bogus\": 2\n}").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(Config::from_json("{\"stage1\": {\"iterations\": -1}}").is_err());
    }
}
