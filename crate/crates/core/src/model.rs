//! Model file serialization.
//!
//! The on-disk format is JSON with a canonical form: object keys in sorted
//! order, floats printed in scientific notation with 17 significant digits
//! (which round-trips f64 exactly), layer values as nested arrays matching the
//! layer shape. `save` always writes the canonical form, and the model digest
//! is the SHA-256 of the canonical bytes, so equal parameters imply equal
//! digests byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{NetConfig, Network};
use crate::tensor::Tensor;

pub const MODEL_FORMAT_VERSION: u64 = 1;

struct LayerSpec {
    name: String,
    shape: Vec<usize>,
}

fn layer_specs(config: &NetConfig) -> Vec<LayerSpec> {
    let mut specs = vec![
        LayerSpec {
            name: "c2.weights".into(),
            shape: vec![
                config.c2_maps,
                config.input_maps,
                config.c2_kernel,
                config.c2_kernel,
            ],
        },
        LayerSpec {
            name: "c2.bias".into(),
            shape: vec![config.c2_maps],
        },
        LayerSpec {
            name: "s3.beta".into(),
            shape: vec![config.c2_maps],
        },
        LayerSpec {
            name: "s3.bias".into(),
            shape: vec![config.c2_maps],
        },
    ];
    for (i, e) in config.c4_bank.iter().enumerate() {
        specs.push(LayerSpec {
            name: format!("c4.{i}.weights"),
            shape: vec![e.count, config.c2_maps, e.kh, e.kw],
        });
        specs.push(LayerSpec {
            name: format!("c4.{i}.bias"),
            shape: vec![e.count],
        });
    }
    specs.push(LayerSpec {
        name: "fc.weights".into(),
        shape: vec![config.fc_inputs()],
    });
    specs.push(LayerSpec {
        name: "fc.bias".into(),
        shape: vec![1],
    });
    specs
}

fn layer_data<'a>(net: &'a Network, name: &str, fc_bias_slot: &'a [f64; 1]) -> &'a [f64] {
    match name {
        "c2.weights" => net.c2_weights.data(),
        "c2.bias" => net.c2_bias.data(),
        "s3.beta" => net.s3_beta.data(),
        "s3.bias" => net.s3_bias.data(),
        "fc.weights" => net.fc_weights.data(),
        "fc.bias" => fc_bias_slot,
        other => {
            let idx: usize = other
                .strip_prefix("c4.")
                .and_then(|s| s.split('.').next())
                .and_then(|s| s.parse().ok())
                .expect("known layer name");
            if other.ends_with(".weights") {
                net.c4_weights[idx].data()
            } else {
                net.c4_bias[idx].data()
            }
        }
    }
}

fn write_float(out: &mut String, v: f64) {
    // 17 significant digits: exact f64 round trip.
    write!(out, "{v:.16e}").unwrap();
}

fn write_values(out: &mut String, shape: &[usize], data: &[f64]) {
    if shape.len() == 1 {
        out.push('[');
        for (i, &v) in data.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write_float(out, v);
        }
        out.push(']');
        return;
    }
    let stride: usize = shape[1..].iter().product();
    out.push('[');
    for i in 0..shape[0] {
        if i > 0 {
            out.push(',');
        }
        write_values(out, &shape[1..], &data[i * stride..(i + 1) * stride]);
    }
    out.push(']');
}

/// Canonical serialization of a network.
pub fn canonical_json(net: &Network) -> String {
    let cfg = &net.config;
    let mut out = String::with_capacity(net.config.param_counts().total() * 26 + 1024);
    out.push_str("{\"config\":{");
    write!(
        out,
        "\"c2_kernel\":{},\"c2_maps\":{},\"c4_bank\":[",
        cfg.c2_kernel, cfg.c2_maps
    )
    .unwrap();
    for (i, e) in cfg.c4_bank.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(
            out,
            "{{\"count\":{},\"kh\":{},\"kw\":{}}}",
            e.count, e.kh, e.kw
        )
        .unwrap();
    }
    write!(
        out,
        "],\"fc_out\":{},\"input_maps\":{},\"pool\":{},\"window\":[{},{}]}},",
        cfg.fc_out, cfg.input_maps, cfg.pool, cfg.window.0, cfg.window.1
    )
    .unwrap();
    write!(out, "\"format_version\":{MODEL_FORMAT_VERSION},\"layers\":[").unwrap();
    let fc_bias_slot = [net.fc_bias];
    for (i, spec) in layer_specs(cfg).iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{{\"name\":\"{}\",\"shape\":[", spec.name).unwrap();
        for (j, d) in spec.shape.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{d}").unwrap();
        }
        out.push_str("],\"values\":");
        write_values(
            &mut out,
            &spec.shape,
            layer_data(net, &spec.name, &fc_bias_slot),
        );
        out.push_str("}\n");
    }
    out.push_str("]}\n");
    out
}

/// SHA-256 hex digest of the canonical serialization.
pub fn digest(net: &Network) -> String {
    let mut hasher = Sha256::new();
    hasher.update(canonical_json(net).as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn flatten_values(v: &Value, shape: &[usize], layer: &str, out: &mut Vec<f64>) -> Result<()> {
    let arr = v.as_array().ok_or_else(|| Error::ModelShape {
        layer: layer.to_string(),
        expected: shape.to_vec(),
        found: vec![],
    })?;
    if arr.len() != shape[0] {
        return Err(Error::ModelShape {
            layer: layer.to_string(),
            expected: shape.to_vec(),
            found: vec![arr.len()],
        });
    }
    for item in arr {
        if shape.len() == 1 {
            let x = item.as_f64().ok_or_else(|| {
                Error::ModelFormat(format!("layer {layer}: non-numeric value"))
            })?;
            if !x.is_finite() {
                return Err(Error::ModelFormat(format!(
                    "layer {layer}: non-finite value"
                )));
            }
            out.push(x);
        } else {
            flatten_values(item, &shape[1..], layer, out)?;
        }
    }
    Ok(())
}

impl Network {
    /// Write the canonical model file.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, canonical_json(self)).map_err(|e| Error::io(path, e))
    }

    /// Load a model file; accepts any JSON whitespace but validates version,
    /// config, layer set, and every layer shape against the embedded config.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text)
            .map_err(|e| Error::ModelFormat(format!("invalid JSON: {e}")))?;
        let obj = root
            .as_object()
            .ok_or_else(|| Error::ModelFormat("top level must be an object".into()))?;
        let version = obj
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::ModelFormat("missing format_version".into()))?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelVersion {
                found: version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let config: NetConfig = serde_json::from_value(
            obj.get("config")
                .cloned()
                .ok_or_else(|| Error::ModelFormat("missing config".into()))?,
        )
        .map_err(|e| Error::ModelFormat(format!("bad config: {e}")))?;
        config.validate()?;

        let layers = obj
            .get("layers")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::ModelFormat("missing layers array".into()))?;
        let specs = layer_specs(&config);
        if layers.len() != specs.len() {
            return Err(Error::ModelFormat(format!(
                "expected {} layers, found {}",
                specs.len(),
                layers.len()
            )));
        }

        let mut tensors: Vec<Tensor> = Vec::with_capacity(specs.len());
        for (layer, spec) in layers.iter().zip(&specs) {
            let name = layer
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::ModelFormat("layer missing name".into()))?;
            if name != spec.name {
                return Err(Error::ModelFormat(format!(
                    "expected layer {} at this position, found {name}",
                    spec.name
                )));
            }
            let shape: Vec<usize> = layer
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::ModelFormat(format!("layer {name} missing shape")))?
                .iter()
                .map(|v| v.as_u64().map(|x| x as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::ModelFormat(format!("layer {name}: bad shape entry")))?;
            if shape != spec.shape {
                return Err(Error::ModelShape {
                    layer: name.to_string(),
                    expected: spec.shape.clone(),
                    found: shape,
                });
            }
            let values = layer
                .get("values")
                .ok_or_else(|| Error::ModelFormat(format!("layer {name} missing values")))?;
            let mut data = Vec::with_capacity(spec.shape.iter().product());
            flatten_values(values, &spec.shape, name, &mut data)?;
            tensors.push(Tensor::new(spec.shape.clone(), data)?);
        }

        // layer order: c2.w, c2.b, s3.beta, s3.bias, per-entry c4 pairs, fc.w, fc.b
        let mut it = tensors.into_iter();
        let c2_weights = it.next().unwrap();
        let c2_bias = it.next().unwrap();
        let s3_beta = it.next().unwrap();
        let s3_bias = it.next().unwrap();
        let mut c4_weights = Vec::new();
        let mut c4_bias = Vec::new();
        for _ in 0..config.c4_bank.len() {
            c4_weights.push(it.next().unwrap());
            c4_bias.push(it.next().unwrap());
        }
        let fc_weights = it.next().unwrap();
        let fc_bias = it.next().unwrap().data()[0];

        Ok(Network {
            config,
            c2_weights,
            c2_bias,
            s3_beta,
            s3_bias,
            c4_weights,
            c4_bias,
            fc_weights,
            fc_bias,
        })
    }
}
