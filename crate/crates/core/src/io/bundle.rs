//! Layer bundles: a directory with `manifest.json` and one tensor file per weight.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "kind": "mla",
//!   "dtype": "f64",
//!   "config": { "hidden": 64, "heads": 8, "head_dim": 8, "d_rope": 8, "r_kv": 16, ... },
//!   "tensors": { "wdkv": "wdkv.mlaf", ... }
//! }
//! ```
//! RoPE frequencies are stored as the `rope_thetas` tensor (`1 × d/2`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor_file::{load_tensor, save_tensor};
use crate::attention::{GqaLayer, MlaLayer, QueryProjection, RopeSchedule};
use crate::error::{Error, Result};
use crate::layer::AnyLayer;
use crate::rewrite::{MergedGqaLayer, MlaFactorizedLayer};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Matrix;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub hidden: usize,
    pub heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
    pub head_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_rope: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_kv: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_q: Option<usize>,
    /// Informational; the stored thetas are authoritative.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rope_base: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub dtype: Dtype,
    pub config: LayerConfig,
    pub tensors: BTreeMap<String, String>,
}

fn thetas_tensor<T: Scalar>(rope: &RopeSchedule<T>) -> Matrix<T> {
    Matrix::new(1, rope.thetas().len(), rope.thetas().to_vec()).expect("finite thetas")
}

fn parts<T: Scalar>(layer: &AnyLayer<T>) -> (LayerConfig, Vec<(&'static str, Matrix<T>)>) {
    match layer {
        AnyLayer::Gqa(l) => (
            LayerConfig {
                hidden: l.hidden,
                heads: l.heads,
                groups: Some(l.groups),
                head_dim: l.head_dim,
                ..Default::default()
            },
            vec![
                ("wq", l.wq.clone()),
                ("wk", l.wk.clone()),
                ("wv", l.wv.clone()),
                ("wo", l.wo.clone()),
                ("rope_thetas", thetas_tensor(&l.rope)),
            ],
        ),
        AnyLayer::MergedGqa(l) => (
            LayerConfig {
                hidden: l.hidden,
                heads: l.heads,
                groups: Some(l.groups),
                head_dim: l.head_dim,
                ..Default::default()
            },
            vec![
                ("wq", l.wq.clone()),
                ("wk", l.wk.clone()),
                ("wv", l.wv.clone()),
                ("wuk", l.wuk.clone()),
                ("wuv", l.wuv.clone()),
                ("wo", l.wo.clone()),
                ("rope_thetas", thetas_tensor(&l.rope)),
            ],
        ),
        AnyLayer::MlaFactorized(l) => (
            LayerConfig {
                hidden: l.hidden,
                heads: l.heads,
                groups: Some(l.groups),
                head_dim: l.head_dim,
                ..Default::default()
            },
            vec![
                ("wdkv", l.wdkv.clone()),
                ("wuk", l.wuk.clone()),
                ("wuv", l.wuv.clone()),
                ("wq", l.wq.clone()),
                ("wo", l.wo.clone()),
            ],
        ),
        AnyLayer::Mla(l) => {
            let mut t = vec![
                ("wdkv", l.wdkv.clone()),
                ("wuk", l.wuk.clone()),
                ("wuv", l.wuv.clone()),
                ("wkr", l.wkr.clone()),
                ("wo", l.wo.clone()),
                ("rope_thetas", thetas_tensor(&l.rope)),
            ];
            match &l.query {
                QueryProjection::Full { wq_nope, wq_rope } => {
                    t.push(("wq_nope", wq_nope.clone()));
                    t.push(("wq_rope", wq_rope.clone()));
                }
                QueryProjection::LowRank { wdq, wuq } => {
                    t.push(("wdq", wdq.clone()));
                    t.push(("wuq", wuq.clone()));
                }
            }
            if let Some(b) = &l.out_bias {
                t.push(("out_bias", Matrix::new(1, b.len(), b.clone()).expect("finite bias")));
            }
            (
                LayerConfig {
                    hidden: l.hidden,
                    heads: l.heads,
                    head_dim: l.d_nope,
                    d_rope: Some(l.d_rope),
                    r_kv: Some(l.r_kv),
                    r_q: l.query.rank(),
                    ..Default::default()
                },
                t,
            )
        }
    }
}

/// Writes `layer` into `dir`, creating it if needed.
pub fn save_bundle<T: Scalar>(dir: impl AsRef<Path>, layer: &AnyLayer<T>, rope_base: Option<f64>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (mut config, tensors) = parts(layer);
    config.rope_base = rope_base;
    let mut names = BTreeMap::new();
    for (name, m) in &tensors {
        let file = format!("{name}.mlaf");
        save_tensor(dir.join(&file), m)?;
        names.insert(name.to_string(), file);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: layer.kind().to_string(),
        dtype: T::DTYPE,
        config,
        tensors: names,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(dir.as_ref().join(MANIFEST))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported bundle version {}",
            m.format_version
        )));
    }
    Ok(m)
}

struct Loader<'a> {
    dir: &'a Path,
    manifest: &'a Manifest,
}

impl Loader<'_> {
    fn get<T: Scalar>(&self, name: &str) -> Result<Matrix<T>> {
        let file = self
            .manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("manifest lacks tensor `{name}`")))?;
        if file.contains('/') || file.contains('\\') || file.starts_with("..") {
            return Err(Error::Format(format!("tensor path `{file}` leaves the bundle")));
        }
        load_tensor(self.dir.join(file))
    }

    fn has(&self, name: &str) -> bool {
        self.manifest.tensors.contains_key(name)
    }

    fn rope<T: Scalar>(&self) -> Result<RopeSchedule<T>> {
        let m = self.get::<T>("rope_thetas")?;
        RopeSchedule::from_thetas(m.into_data())
    }
}

fn mismatch(what: &str) -> Error {
    Error::Format(format!("manifest {what} disagrees with tensors"))
}

/// Loads a bundle, converting stored tensors to `T`.
pub fn load_bundle<T: Scalar>(dir: impl AsRef<Path>) -> Result<AnyLayer<T>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let ld = Loader {
        dir,
        manifest: &manifest,
    };
    let cfg = &manifest.config;
    let groups = || {
        cfg.groups
            .ok_or_else(|| Error::Format("manifest lacks `groups`".into()))
    };
    let as_format = |e: Error| match e {
        Error::Shape(s) | Error::InvalidConfig(s) => Error::Format(s),
        other => other,
    };
    let layer = match manifest.kind.as_str() {
        "gqa" => AnyLayer::Gqa(
            GqaLayer::new(
                cfg.heads,
                groups()?,
                ld.get("wq")?,
                ld.get("wk")?,
                ld.get("wv")?,
                ld.get("wo")?,
                ld.rope()?,
            )
            .map_err(as_format)?,
        ),
        "merged_gqa" => {
            let l = MergedGqaLayer {
                hidden: cfg.hidden,
                heads: cfg.heads,
                groups: groups()?,
                head_dim: cfg.head_dim,
                wq: ld.get("wq")?,
                wk: ld.get("wk")?,
                wv: ld.get("wv")?,
                wuk: ld.get("wuk")?,
                wuv: ld.get("wuv")?,
                wo: ld.get("wo")?,
                rope: ld.rope()?,
            };
            l.validate().map_err(as_format)?;
            AnyLayer::MergedGqa(l)
        }
        "mla_factorized" => AnyLayer::MlaFactorized(
            MlaFactorizedLayer::new(
                cfg.heads,
                groups()?,
                cfg.head_dim,
                ld.get("wdkv")?,
                ld.get("wuk")?,
                ld.get("wuv")?,
                ld.get("wq")?,
                ld.get("wo")?,
            )
            .map_err(as_format)?,
        ),
        "mla" => {
            let query = if ld.has("wdq") {
                QueryProjection::LowRank {
                    wdq: ld.get("wdq")?,
                    wuq: ld.get("wuq")?,
                }
            } else {
                QueryProjection::Full {
                    wq_nope: ld.get("wq_nope")?,
                    wq_rope: ld.get("wq_rope")?,
                }
            };
            let out_bias = if ld.has("out_bias") {
                Some(ld.get::<T>("out_bias")?.into_data())
            } else {
                None
            };
            let l = MlaLayer::new(
                cfg.heads,
                cfg.head_dim,
                ld.get("wdkv")?,
                ld.get("wuk")?,
                ld.get("wuv")?,
                ld.get("wkr")?,
                query,
                ld.get("wo")?,
                ld.rope()?,
                out_bias,
            )
            .map_err(as_format)?;
            if Some(l.d_rope) != cfg.d_rope || Some(l.r_kv) != cfg.r_kv || l.query.rank() != cfg.r_q {
                return Err(mismatch("d_rope/r_kv/r_q"));
            }
            AnyLayer::Mla(l)
        }
        other => return Err(Error::Format(format!("unknown layer kind `{other}`"))),
    };
    let (actual, _) = parts(&layer);
    if (actual.hidden, actual.heads, actual.head_dim, actual.groups)
        != (cfg.hidden, cfg.heads, cfg.head_dim, cfg.groups)
    {
        return Err(mismatch("shape"));
    }
    Ok(layer)
}
