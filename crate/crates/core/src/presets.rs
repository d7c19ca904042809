//! Bundled model presets (`data/presets.json`).
//!
//! Weight sizes come from parameter counts at FP16 (2 bytes per parameter);
//! `w_other` covers embeddings and the output head. The 70B preset's split is
//! calibrated so its one-layer fingerprint holds 2.40% of the full weights.

use std::sync::OnceLock;

use serde::Deserialize;

use crate::catalog::ModelArchitecture;

const PRESETS_JSON: &str = include_str!("../data/presets.json");

#[derive(Deserialize)]
struct PresetFile {
    models: Vec<ModelArchitecture>,
}

fn presets() -> &'static [ModelArchitecture] {
    static PRESETS: OnceLock<Vec<ModelArchitecture>> = OnceLock::new();
    PRESETS.get_or_init(|| {
        let file: PresetFile =
            serde_json::from_str(PRESETS_JSON).expect("bundled presets.json is valid");
        file.models
    })
}

pub fn all() -> Vec<ModelArchitecture> {
    presets().to_vec()
}

pub fn names() -> Vec<&'static str> {
    presets().iter().map(|m| m.model_id.as_str()).collect()
}

pub fn preset(name: &str) -> Option<ModelArchitecture> {
    presets().iter().find(|m| m.model_id == name).cloned()
}
