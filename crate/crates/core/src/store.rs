//! On-disk artifacts: a directory holding `manifest.json` and one raw
//! array file per tensor.
//!
//! Array files contain the tensor's elements in row-major order as
//! little-endian IEEE-754 `f32`, with no header; the shape lives in the
//! manifest. Masks use the same layout with entries 0.0 and 1.0. Round
//! trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, GateScope, Gates, LayerId};
use crate::ella::EllaState;
use crate::error::{Error, Result};
use crate::metrics::SupportMask;
use crate::model::{build_model, ModelConfig, TinyTransformer};
use crate::tensor::Tensor;

pub const FORMAT: &str = "jumplora-raw/1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Adapters,
    Model,
    Masks,
    EllaState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub layer_id: LayerId,
    pub d_in: usize,
    pub d_out: usize,
    pub r: usize,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scope: Option<GateScope>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub task: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: ArtifactKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adapters: Vec<AdapterEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    pub arrays: Vec<ArrayEntry>,
}

impl Manifest {
    fn new(kind: ArtifactKind) -> Self {
        Manifest {
            format: FORMAT.into(),
            kind,
            adapters: Vec::new(),
            model: None,
            arrays: Vec::new(),
        }
    }

    fn array(&self, name: &str) -> Result<&ArrayEntry> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format {
                what: "manifest".into(),
                message: format!("array {name:?} not listed"),
            })
    }
}

fn file_name(name: &str) -> String {
    format!("{}.f32", name.replace('/', "_"))
}

fn write_array(dir: &Path, name: &str, t: &Tensor<f32>) -> Result<ArrayEntry> {
    let file = file_name(name);
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join(&file);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(ArrayEntry {
        name: name.into(),
        file,
        shape: t.shape().to_vec(),
    })
}

fn read_array(dir: &Path, entry: &ArrayEntry) -> Result<Tensor<f32>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let n: usize = entry.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format {
            what: entry.file.clone(),
            message: format!(
                "expected {} bytes for shape {:?}, found {}",
                n * 4,
                entry.shape,
                bytes.len()
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::Format {
        what: "manifest".into(),
        message: e.to_string(),
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: path.display().to_string(),
        message: e.to_string(),
    })?;
    if m.format != FORMAT {
        return Err(Error::Format {
            what: path.display().to_string(),
            message: format!("unsupported format {:?}", m.format),
        });
    }
    Ok(m)
}

fn prepare(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn expect_kind(m: &Manifest, kind: ArtifactKind) -> Result<()> {
    if m.kind != kind {
        return Err(Error::Format {
            what: "manifest".into(),
            message: format!("expected a {kind:?} artifact, found {:?}", m.kind),
        });
    }
    Ok(())
}

/// Writes adapters with their thresholds. Arrays are `{layer}.A`,
/// `{layer}.B` and, when given, `{layer}.mask`.
pub fn save_adapters(
    dir: &Path,
    adapters: &[Adapter<f32>],
    gates: Option<&Gates<f32>>,
    task: Option<usize>,
    masks: Option<&[SupportMask]>,
) -> Result<()> {
    prepare(dir)?;
    let mut m = Manifest::new(ArtifactKind::Adapters);
    for ad in adapters {
        let gate = gates.map(|g| g.gate_for(ad.layer));
        m.adapters.push(AdapterEntry {
            layer_id: ad.layer,
            d_in: ad.d_in(),
            d_out: ad.d_out(),
            r: ad.rank,
            alpha: ad.alpha as f64,
            tau: gate.filter(|g| g.initialized).map(|g| g.tau as f64),
            scope: gates.map(|g| g.scope),
            task,
        });
        m.arrays.push(write_array(dir, &format!("{}.A", ad.layer), &ad.a)?);
        m.arrays.push(write_array(dir, &format!("{}.B", ad.layer), &ad.b)?);
    }
    for mask in masks.unwrap_or(&[]) {
        m.arrays
            .push(write_array(dir, &format!("{}.mask", mask.layer), &mask.to_tensor())?);
    }
    write_manifest(dir, &m)
}

/// Adapters and their recorded thresholds, in manifest order.
pub fn load_adapters(dir: &Path) -> Result<Vec<(Adapter<f32>, Option<f64>)>> {
    let m = read_manifest(dir)?;
    expect_kind(&m, ArtifactKind::Adapters)?;
    m.adapters
        .iter()
        .map(|e| {
            let a = read_array(dir, m.array(&format!("{}.A", e.layer_id))?)?;
            let b = read_array(dir, m.array(&format!("{}.B", e.layer_id))?)?;
            if a.shape() != [e.d_in, e.r] || b.shape() != [e.r, e.d_out] {
                return Err(Error::Format {
                    what: "manifest".into(),
                    message: format!("factor shapes of {} disagree with the manifest", e.layer_id),
                });
            }
            let alpha = e.alpha as f32;
            Ok((
                Adapter {
                    layer: e.layer_id,
                    a,
                    b,
                    rank: e.r,
                    alpha,
                    beta: alpha / e.r as f32,
                },
                e.tau,
            ))
        })
        .collect()
}

pub fn save_model(dir: &Path, model: &TinyTransformer<f32>) -> Result<()> {
    prepare(dir)?;
    let mut m = Manifest::new(ArtifactKind::Model);
    m.model = Some(model.config.clone());
    for (name, t) in model.named_weights() {
        m.arrays.push(write_array(dir, &name, t)?);
    }
    write_manifest(dir, &m)
}

pub fn load_model(dir: &Path) -> Result<TinyTransformer<f32>> {
    let m = read_manifest(dir)?;
    expect_kind(&m, ArtifactKind::Model)?;
    let cfg = m.model.clone().ok_or_else(|| Error::Format {
        what: "manifest".into(),
        message: "model artifact without a model config".into(),
    })?;
    let mut model = build_model::<f32>(&cfg, 0)?;
    for (name, slot) in model.named_weights_mut() {
        let t = read_array(dir, m.array(&name)?)?;
        if t.shape() != slot.shape() {
            return Err(Error::Format {
                what: name,
                message: format!("shape {:?} does not fit {:?}", t.shape(), slot.shape()),
            });
        }
        *slot = t;
    }
    Ok(model)
}

/// One array per (task, layer), named `task{t}.{layer}` with one-based `t`.
pub fn save_masks(dir: &Path, masks: &[SupportMask]) -> Result<()> {
    prepare(dir)?;
    let mut m = Manifest::new(ArtifactKind::Masks);
    for mask in masks {
        m.arrays.push(write_array(
            dir,
            &format!("task{}.{}", mask.task + 1, mask.layer),
            &mask.to_tensor(),
        )?);
    }
    write_manifest(dir, &m)
}

pub fn load_masks(dir: &Path) -> Result<Vec<SupportMask>> {
    let m = read_manifest(dir)?;
    expect_kind(&m, ArtifactKind::Masks)?;
    m.arrays
        .iter()
        .map(|e| {
            let bad = || Error::Format {
                what: "manifest".into(),
                message: format!("mask name {:?} is not task<N>.<layer>", e.name),
            };
            let (task, layer) = e.name.split_once('.').ok_or_else(bad)?;
            let task: usize = task
                .strip_prefix("task")
                .and_then(|t| t.parse().ok())
                .filter(|&t| t >= 1)
                .ok_or_else(bad)?;
            let layer: LayerId = layer.parse().map_err(|_| bad())?;
            SupportMask::from_tensor(layer, task - 1, &read_array(dir, e)?)
        })
        .collect()
}

pub fn save_ella_state(dir: &Path, state: &EllaState<f32>) -> Result<()> {
    prepare(dir)?;
    let mut m = Manifest::new(ArtifactKind::EllaState);
    for (layer, past) in state.layers() {
        m.arrays.push(write_array(dir, &layer.to_string(), past)?);
    }
    write_manifest(dir, &m)
}

pub fn load_ella_state(dir: &Path) -> Result<EllaState<f32>> {
    let m = read_manifest(dir)?;
    expect_kind(&m, ArtifactKind::EllaState)?;
    let mut past = BTreeMap::new();
    for e in &m.arrays {
        let layer: LayerId = e.name.parse().map_err(|_| Error::Format {
            what: "manifest".into(),
            message: format!("bad layer id {:?}", e.name),
        })?;
        past.insert(layer, read_array(dir, e)?);
    }
    Ok(EllaState::from_parts(past))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::init_adapter;

    fn bits(t: &Tensor<f32>) -> Vec<u32> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn adapters_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ad = init_adapter::<f32>(LayerId::value(2), 6, 5, 2, 8.0, 3).unwrap();
        ad.b = Tensor::new(vec![2, 5], (0..10).map(|i| (i as f32).sin() * 1e-3).collect()).unwrap();
        // Values whose bit patterns a text format could alter.
        ad.b.data_mut()[0] = -0.0;
        ad.b.data_mut()[1] = f32::MIN_POSITIVE / 2.0;
        let mut gates = Gates::new(GateScope::PerBlock, 3, 1e-3, 1e-8).unwrap();
        gates.units[2].tau = 0.0123;
        gates.units[2].initialized = true;
        let mask = SupportMask::new(LayerId::value(2), 0, vec![6, 5], (0..30).map(|i| i % 3 == 0).collect()).unwrap();
        save_adapters(dir.path(), &[ad.clone()], Some(&gates), Some(4), Some(&[mask])).unwrap();
        let back = load_adapters(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(bits(&back[0].0.a), bits(&ad.a));
        assert_eq!(bits(&back[0].0.b), bits(&ad.b));
        assert_eq!(back[0].0.beta, 4.0);
        assert_eq!(back[0].1, Some(0.0123f32 as f64));
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.adapters[0].scope, Some(GateScope::PerBlock));
        assert_eq!(m.adapters[0].task, Some(4));
        assert!(m.arrays.iter().any(|a| a.name == "block2.v.mask"));
    }

    #[test]
    fn array_files_are_raw_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![1, 2], vec![1.0f32, -2.5]).unwrap();
        let e = write_array(dir.path(), "x", &t).unwrap();
        let raw = fs::read(dir.path().join(&e.file)).unwrap();
        assert_eq!(raw, [1.0f32.to_le_bytes(), (-2.5f32).to_le_bytes()].concat());
    }

    #[test]
    fn model_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            d_ff: 8,
            vocab_size: 10,
            max_seq_len: 4,
            num_classes: 3,
        };
        let model = build_model::<f32>(&cfg, 77).unwrap();
        save_model(dir.path(), &model).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.config, cfg);
        for ((n1, a), (n2, b)) in model.named_weights().into_iter().zip(back.named_weights()) {
            assert_eq!(n1, n2);
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn masks_and_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let masks = vec![
            SupportMask::new(LayerId::query(0), 0, vec![2, 2], vec![true, false, false, true]).unwrap(),
            SupportMask::new(LayerId::value(1), 2, vec![1, 3], vec![false, false, true]).unwrap(),
        ];
        save_masks(&dir.path().join("m"), &masks).unwrap();
        assert_eq!(load_masks(&dir.path().join("m")).unwrap(), masks);

        let mut st = EllaState::<f32>::new([(LayerId::query(0), vec![2, 2])]);
        st.update_past(
            LayerId::query(0),
            &Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.0, 3.0]).unwrap(),
        )
        .unwrap();
        save_ella_state(&dir.path().join("s"), &st).unwrap();
        assert_eq!(load_ella_state(&dir.path().join("s")).unwrap(), st);
    }

    #[test]
    fn wrong_kind_and_truncated_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let masks = vec![SupportMask::new(LayerId::query(0), 0, vec![2], vec![true, false]).unwrap()];
        save_masks(dir.path(), &masks).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Format { .. })));
        fs::write(dir.path().join("task1.block0.q.f32"), [0u8; 3]).unwrap();
        assert!(matches!(load_masks(dir.path()), Err(Error::Format { .. })));
        assert!(matches!(load_masks(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
