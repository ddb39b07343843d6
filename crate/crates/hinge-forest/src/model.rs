//! Model persistence: a little-endian binary container with a versioned
//! magic header, a TOML manifest describing the architecture, raw parameter
//! tensors (including running statistics and feature indices), and an
//! optional optimizer-state section for resumption.
//!
//! Round-trips are bitwise: tensors are written as raw little-endian
//! element bytes and read back unchanged.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::builder::build_graph;
use crate::config::Architecture;
use crate::error::{Error, Result};
use crate::graph::{Graph, Param};
use crate::opt::Optimizer;
use crate::real::Real;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"HFMD";
const VERSION: u32 = 1;

/// Text manifest embedded in every model file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelManifest {
    pub precision: String,
    pub example_shape: Vec<usize>,
    pub outputs: usize,
    pub seed: u64,
    pub architecture: Architecture,
    #[serde(default)]
    pub class_names: Vec<String>,
}

/// Optimizer state captured alongside the parameters.
pub struct OptimizerState<R: Real> {
    pub name: String,
    pub step: u64,
    pub entries: Vec<(String, Vec<Vec<R>>)>,
}

impl<R: Real> OptimizerState<R> {
    pub fn capture(optimizer: &Optimizer<R>) -> Self {
        let (step, entries) = optimizer.state_entries();
        OptimizerState {
            name: optimizer.name().to_string(),
            step,
            entries,
        }
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<Rd: Read>(r: &mut Rd) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Data("invalid UTF-8 in model file".into()))
}

fn write_elements<W: Write, R: Real>(w: &mut W, data: &[R]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * R::BYTES);
    for v in data {
        v.write_le(&mut bytes);
    }
    w.write_u64::<LittleEndian>(data.len() as u64)?;
    w.write_all(&bytes)?;
    Ok(())
}

fn read_elements<Rd: Read, R: Real>(r: &mut Rd) -> Result<Vec<R>> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut bytes = vec![0u8; len * R::BYTES];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Data(format!("truncated model file: {e}")))?;
    Ok(bytes.chunks_exact(R::BYTES).map(R::read_le).collect())
}

/// Writes a trained graph with its manifest and optional optimizer state.
pub fn save_model<R: Real>(
    path: &Path,
    graph: &Graph<R>,
    manifest: &ModelManifest,
    optimizer: Option<&OptimizerState<R>>,
) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    write_str(&mut w, R::DTYPE)?;
    let manifest_text =
        toml::to_string(manifest).map_err(|e| Error::Config(format!("manifest: {e}")))?;
    w.write_u64::<LittleEndian>(manifest_text.len() as u64)?;
    w.write_all(manifest_text.as_bytes())?;

    let nodes = graph.nodes_with_params();
    w.write_u32::<LittleEndian>(nodes.len() as u32)?;
    for (name, params) in nodes {
        write_str(&mut w, name)?;
        w.write_u32::<LittleEndian>(params.len() as u32)?;
        for p in params {
            write_str(&mut w, &p.name)?;
            w.write_u8(u8::from(p.learnable))?;
            w.write_u32::<LittleEndian>(p.value.shape().len() as u32)?;
            for &d in p.value.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            write_elements(&mut w, p.value.data())?;
        }
    }

    match optimizer {
        None => w.write_u8(0)?,
        Some(state) => {
            w.write_u8(1)?;
            write_str(&mut w, &state.name)?;
            w.write_u64::<LittleEndian>(state.step)?;
            w.write_u32::<LittleEndian>(state.entries.len() as u32)?;
            for (key, tensors) in &state.entries {
                write_str(&mut w, key)?;
                w.write_u32::<LittleEndian>(tensors.len() as u32)?;
                for t in tensors {
                    write_elements(&mut w, t)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a model file back into a graph. The architecture is rebuilt from
/// the manifest, then every stored tensor replaces the fresh one bitwise.
pub fn load_model<R: Real>(
    path: &Path,
) -> Result<(Graph<R>, ModelManifest, Option<OptimizerState<R>>)> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open '{}': {e}", path.display())))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Data(format!("truncated model file: {e}")))?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "'{}' is not a model file (bad magic)",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported model version {version}, expected {VERSION}"
        )));
    }
    let dtype = read_str(&mut r)?;
    if dtype != R::DTYPE {
        return Err(Error::Data(format!(
            "model stores {dtype} parameters, expected {}",
            R::DTYPE
        )));
    }
    let manifest_len = r.read_u64::<LittleEndian>()? as usize;
    let mut manifest_buf = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_buf)
        .map_err(|e| Error::Data(format!("truncated model file: {e}")))?;
    let manifest: ModelManifest = toml::from_str(
        std::str::from_utf8(&manifest_buf)
            .map_err(|_| Error::Data("invalid UTF-8 in manifest".into()))?,
    )
    .map_err(|e| Error::Data(format!("bad manifest: {e}")))?;

    let mut graph: Graph<R> = build_graph(
        &manifest.architecture,
        &manifest.example_shape,
        manifest.outputs,
        manifest.seed,
    )?;

    let node_count = r.read_u32::<LittleEndian>()? as usize;
    for _ in 0..node_count {
        let node_name = read_str(&mut r)?;
        let param_count = r.read_u32::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(param_count);
        for _ in 0..param_count {
            let param_name = read_str(&mut r)?;
            let learnable = r.read_u8()? != 0;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let data = read_elements::<_, R>(&mut r)?;
            params.push(Param {
                name: param_name,
                value: Tensor::from_vec(&shape, data)?,
                grad: Tensor::zeros(&shape),
                learnable,
            });
        }
        graph.load_params(&node_name, params)?;
    }

    let optimizer = if r.read_u8()? == 1 {
        let name = read_str(&mut r)?;
        let step = r.read_u64::<LittleEndian>()?;
        let entry_count = r.read_u32::<LittleEndian>()? as usize;
        let mut entries = Vec::with_capacity(entry_count);
        for _ in 0..entry_count {
            let key = read_str(&mut r)?;
            let tensor_count = r.read_u32::<LittleEndian>()? as usize;
            let mut tensors = Vec::with_capacity(tensor_count);
            for _ in 0..tensor_count {
                tensors.push(read_elements::<_, R>(&mut r)?);
            }
            entries.push((key, tensors));
        }
        Some(OptimizerState { name, step, entries })
    } else {
        None
    };

    Ok((graph, manifest, optimizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        Architecture, FeatureConfig, FeatureKind, ForestConfig, ForestKindSpec, Task,
    };
    use crate::opt::{Optimizer, OptimizerSettings};
    use crate::tensor::Tensor;

    fn manifest() -> ModelManifest {
        ModelManifest {
            precision: "f32".into(),
            example_shape: vec![6],
            outputs: 3,
            seed: 9,
            architecture: Architecture {
                features: FeatureConfig {
                    kind: FeatureKind::InnerProduct,
                    count: 10,
                    ..FeatureConfig::default()
                },
                forest: ForestConfig {
                    kind: ForestKindSpec::Fern,
                    trees: 3,
                    depth: 2,
                    aggregation: Default::default(),
                },
                task: Task::Classification,
            },
            class_names: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    #[test]
    fn round_trip_preserves_forward_outputs_bitwise() {
        let m = manifest();
        let mut graph: Graph<f32> =
            build_graph(&m.architecture, &m.example_shape, m.outputs, m.seed).unwrap();
        let batch = Tensor::from_vec(&[2, 6], (0..12).map(|i| i as f32 * 0.1).collect()).unwrap();
        let labels = Tensor::from_vec(&[2], vec![0.0, 2.0]).unwrap();
        // Develop running stats so non-learnable state is exercised too.
        graph.set_training(true);
        let _ = graph.run_forward(&batch, &labels).unwrap();
        graph.set_training(false);
        let expected = graph.run_forward(&batch, &labels).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hfm");
        let mut optimizer = Optimizer::<f32>::adam(OptimizerSettings::default());
        graph.set_training(true);
        graph.run_forward(&batch, &labels).unwrap();
        graph.run_backward().unwrap();
        optimizer.step(&mut graph);
        graph.set_training(false);
        let after_step = graph.run_forward(&batch, &labels).unwrap();
        save_model(
            &path,
            &graph,
            &m,
            Some(&OptimizerState::capture(&optimizer)),
        )
        .unwrap();

        let (mut loaded, loaded_manifest, opt_state) = load_model::<f32>(&path).unwrap();
        loaded.set_training(false);
        let reloaded = loaded.run_forward(&batch, &labels).unwrap();
        assert_eq!(after_step.to_bits(), reloaded.to_bits());
        assert_ne!(expected.to_bits(), after_step.to_bits());
        assert_eq!(loaded_manifest.outputs, 3);
        let opt_state = opt_state.unwrap();
        assert_eq!(opt_state.name, "adam");
        assert_eq!(opt_state.step, 1);
    }

    #[test]
    fn truncated_file_fails_closed() {
        let m = manifest();
        let graph: Graph<f32> =
            build_graph(&m.architecture, &m.example_shape, m.outputs, m.seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hfm");
        save_model(&path, &graph, &m, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_model::<f32>(&path).is_err());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nonsense.hfm");
        std::fs::write(&path, b"not a model at all").unwrap();
        let err = match load_model::<f32>(&path) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("bad magic must fail"),
        };
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let m = manifest();
        let graph: Graph<f32> =
            build_graph(&m.architecture, &m.example_shape, m.outputs, m.seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hfm");
        save_model(&path, &graph, &m, None).unwrap();
        let err = match load_model::<f64>(&path) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("precision mismatch must fail"),
        };
        assert!(err.contains("f32"), "{err}");
    }
}
