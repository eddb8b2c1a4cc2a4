//! Model files: a JSON document with a versioned header and a parameter
//! body.
//!
//! ```text
//! {
//!   "format": "plugperf-meta-model",
//!   "version": 1,
//!   "header": { "spec": {...}, "kinds": [...], "dims": 100,
//!               "standardization": {"mean": [...], "std": [...]}, "seed": 7 },
//!   "body": { "kind": "random_forest", ... }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, ModelSpec, Standardizer, TrainedMetaModel};
use crate::error::{Error, Result};
use crate::features::FeatureKind;

pub const MODEL_FORMAT: &str = "plugperf-meta-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    kinds: Vec<FeatureKind>,
    dims: usize,
    standardization: Standardizer,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    header: Header,
    body: ModelParams,
}

#[derive(Deserialize)]
struct Preamble {
    format: String,
    version: u32,
}

pub fn model_to_string(model: &TrainedMetaModel) -> String {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        header: Header {
            spec: model.spec.clone(),
            kinds: model.kinds.clone(),
            dims: model.dims,
            standardization: model.standardization.clone(),
            seed: model.seed,
        },
        body: model.params.clone(),
    };
    serde_json::to_string(&file).expect("models always serialize")
}

pub fn model_from_str(text: &str) -> Result<TrainedMetaModel> {
    let pre: Preamble = serde_json::from_str(text)
        .map_err(|e| Error::Incompatible(format!("unreadable model header: {e}")))?;
    if pre.format != MODEL_FORMAT {
        return Err(Error::Incompatible(format!(
            "expected format `{MODEL_FORMAT}`, found `{}`",
            pre.format
        )));
    }
    if pre.version != MODEL_VERSION {
        return Err(Error::Incompatible(format!(
            "model file version {} is not supported (expected {MODEL_VERSION})",
            pre.version
        )));
    }
    let file: ModelFile = serde_json::from_str(text)
        .map_err(|e| Error::Incompatible(format!("malformed model body: {e}")))?;
    let model = TrainedMetaModel {
        spec: file.header.spec,
        kinds: file.header.kinds,
        dims: file.header.dims,
        standardization: file.header.standardization,
        seed: file.header.seed,
        params: file.body,
    };
    let width = model.kinds.len() * model.dims;
    if model.standardization.mean.len() != width || model.standardization.std.len() != width {
        return Err(Error::Incompatible(
            "standardization statistics do not match the profile width".into(),
        ));
    }
    Ok(model)
}

pub fn save_model(model: &TrainedMetaModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_string(model) + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedMetaModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_rows;
    use super::super::{predict, train, ModelKind};
    use super::*;

    fn small(kind: ModelKind) -> ModelSpec {
        match kind {
            ModelKind::Knn => ModelSpec::knn(3),
            ModelKind::Mlp => ModelSpec::mlp(6, 0.05, 100),
            ModelKind::RandomForest => ModelSpec::random_forest(5, 10, 0.8),
            ModelKind::Gbt => ModelSpec::gbt(3, 20, 0.1, 0.8),
        }
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let rows = random_rows(40, 5, 3);
        let probes = random_rows(100, 5, 4);
        for kind in ModelKind::ALL {
            let m = train(&small(kind), &rows, 9).unwrap();
            let path = dir.path().join(format!("{kind}.json"));
            save_model(&m, &path).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back, m);
            for p in &probes {
                let a = predict(&m, &p.profile).unwrap();
                let b = predict(&back, &p.profile).unwrap();
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn truncated_and_foreign_files_are_incompatible() {
        let m = train(&small(ModelKind::Gbt), &random_rows(20, 3, 1), 0).unwrap();
        let text = model_to_string(&m);
        let cut = &text[..text.len() / 2];
        assert!(matches!(model_from_str(cut), Err(Error::Incompatible(_))));
        let newer = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(model_from_str(&newer), Err(Error::Incompatible(_))));
        assert!(matches!(model_from_str("{}"), Err(Error::Incompatible(_))));
    }

    #[test]
    fn empty_path_is_io_error() {
        assert!(matches!(load_model(""), Err(Error::Io { .. })));
        let m = train(&small(ModelKind::Knn), &random_rows(5, 2, 1), 0).unwrap();
        assert!(matches!(save_model(&m, ""), Err(Error::Io { .. })));
    }
}
