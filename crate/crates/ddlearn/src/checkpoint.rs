//! Model checkpoints: a versioned JSON container with the architecture
//! and every parameter's name, shape, and row-major values.

use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, DDLearnModel};
use crate::tape::Parameter;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: &str = "ddlearn.checkpoint.v1";

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: String,
    arch: ArchitectureSpec,
    params: Vec<NamedTensor>,
}

pub fn save(model: &DDLearnModel, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION.to_string(),
        arch: model.spec().clone(),
        params: model
            .parameters()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().to_vec(),
            })
            .collect(),
    };
    let out = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(out), &file)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DDLearnModel> {
    let file = std::fs::File::open(path)?;
    let ckpt: CheckpointFile = serde_json::from_reader(std::io::BufReader::new(file))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!(
            "checkpoint version `{}` unsupported (expected `{CHECKPOINT_VERSION}`)",
            ckpt.version
        )));
    }
    let params: Vec<Parameter> = ckpt
        .params
        .into_iter()
        .map(|nt| Ok(Parameter::new(nt.name, Tensor::new(nt.shape, nt.values)?)))
        .collect::<Result<_>>()?;
    DDLearnModel::from_parts(ckpt.arch, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchitectureSpec, ConvLayerSpec};
    use crate::rng;

    fn tiny_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            input_channels: 3,
            input_width: 16,
            conv_layers: vec![ConvLayerSpec { out_channels: 2, kernel_width: 3 }],
            fc_feature_dim: 5,
            n_activity_classes: 4,
            projection_head: false,
        }
    }

    #[test]
    fn round_trip_preserves_every_parameter_bit() {
        let model = DDLearnModel::build(tiny_spec(), &mut rng::stream(7, &[])).unwrap();
        let dir = std::env::temp_dir().join(format!("ddlearn-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.spec(), model.spec());
        for (a, b) in model.parameters().iter().zip(loaded.parameters()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn version_and_shape_mismatches_are_rejected() {
        let model = DDLearnModel::build(tiny_spec(), &mut rng::stream(7, &[])).unwrap();
        let dir = std::env::temp_dir().join(format!("ddlearn-ckpt2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        save(&model, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let wrong_version = text.replace(CHECKPOINT_VERSION, "ddlearn.checkpoint.v0");
        let bad = dir.join("bad.json");
        std::fs::write(&bad, wrong_version).unwrap();
        assert!(matches!(load(&bad), Err(Error::Schema(_))));

        let renamed = text.replace("conv0.kernel", "conv9.kernel");
        std::fs::write(&bad, renamed).unwrap();
        assert!(matches!(load(&bad), Err(Error::Schema(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
