//! Model-inference feature backend over ONNX files (`onnx` cargo feature).
//!
//! The image is resized to a square input, scaled to `[0, 1]`, normalized
//! with per-channel mean/std and fed as NCHW `f32`. The requested layer is
//! an output node name, optionally aliased through [`OnnxConfig::layers`].
//! One optimized plan is built per layer on first use; plans are immutable
//! and each call runs on its own state, so the backend is freely shareable.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use tract_onnx::prelude::*;

use crate::features::{FeatureBackend, FeatureError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OnnxConfig {
    pub id: String,
    pub model: PathBuf,
    #[serde(default = "default_input_size")]
    pub input_size: u32,
    #[serde(default = "default_mean")]
    pub mean: [f32; 3],
    #[serde(default = "default_std")]
    pub std: [f32; 3],
    /// Layer id → output node name, e.g. `fc7` → `fc7_1`.
    #[serde(default)]
    pub layers: BTreeMap<String, String>,
}

fn default_input_size() -> u32 {
    224
}

// ImageNet statistics
fn default_mean() -> [f32; 3] {
    [0.485, 0.456, 0.406]
}

fn default_std() -> [f32; 3] {
    [0.229, 0.224, 0.225]
}

type Plan = Arc<TypedRunnableModel>;

pub struct OnnxBackend {
    config: OnnxConfig,
    plans: Mutex<HashMap<String, Plan>>,
}

impl OnnxBackend {
    /// Checks that the model file exists; graphs are compiled lazily per layer.
    pub fn new(config: OnnxConfig) -> Result<Self, FeatureError> {
        if !config.model.is_file() {
            return Err(FeatureError::BackendFailure {
                backend: config.id.clone(),
                reason: format!("model file {} not found", config.model.display()),
            });
        }
        Ok(Self { config, plans: Mutex::default() })
    }

    fn failure(&self, reason: impl ToString) -> FeatureError {
        FeatureError::BackendFailure { backend: self.config.id.clone(), reason: reason.to_string() }
    }

    fn plan(&self, layer: &str) -> Result<Plan, FeatureError> {
        let mut plans = self.plans.lock().expect("plan cache poisoned");
        if let Some(p) = plans.get(layer) {
            return Ok(p.clone());
        }
        let node = self.config.layers.get(layer).map(String::as_str).unwrap_or(layer);
        let s = self.config.input_size as usize;
        let plan = tract_onnx::onnx()
            .model_for_path(&self.config.model)
            .and_then(|m| m.with_input_fact(0, f32::fact([1, 3, s, s]).into()))
            .and_then(|m| m.with_outputs_by_name([node]))
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(|e| self.failure(format!("layer `{layer}`: {e}")))?;
        plans.insert(layer.to_string(), plan.clone());
        Ok(plan)
    }

    fn input(&self, image: &RgbImage) -> Tensor {
        let s = self.config.input_size;
        let resized = image::imageops::resize(image, s, s, image::imageops::FilterType::Triangle);
        let (mean, std) = (self.config.mean, self.config.std);
        tract_ndarray::Array4::from_shape_fn((1, 3, s as usize, s as usize), |(_, c, y, x)| {
            let v = resized.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0;
            (v - mean[c]) / std[c]
        })
        .into()
    }
}

impl FeatureBackend for OnnxBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn extract(&self, image: &RgbImage, layer: &str) -> Result<Vec<f64>, FeatureError> {
        let plan = self.plan(layer)?;
        let outputs = plan.run(tvec!(self.input(image).into())).map_err(|e| self.failure(e))?;
        let view = outputs[0].to_plain_array_view::<f32>().map_err(|e| self.failure(e))?;
        Ok(view.iter().map(|v| *v as f64).collect())
    }
}
