use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{NodeId, Result, Tape, Tensor, TensorError};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PAYLOAD_FILE: &str = "params.bin";
const FORMAT: &str = "vlnfaith-params";
const VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters of one model, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].tensor)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Places every parameter on `tape` (as differentiable leaves when
    /// `trainable` and `with_grad`), returning node ids in insertion order.
    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if with_grad && p.trainable {
                    tape.leaf(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect()
    }
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(vec![]);
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| TensorError::Checkpoint(format!("bad shape '{s}'"))))
        .collect()
}

/// Writes `manifest.txt` and the little-endian `params.bin` payload into `dir`.
/// `meta` entries are stored as `meta.<key> = <value>` manifest lines.
pub fn save_params(dir: &Path, params: &ParamSet, meta: &BTreeMap<String, String>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("format = {FORMAT}\nversion = {VERSION}\n");
    for (k, v) in meta {
        manifest.push_str(&format!("meta.{k} = {v}\n"));
    }
    let mut payload = Vec::with_capacity(params.scalar_count() * 8);
    for p in params.iter() {
        manifest.push_str(&format!(
            "param = {} {} {} {}\n",
            p.name,
            shape_str(p.tensor.shape()),
            payload.len(),
            u8::from(p.trainable)
        ));
        for v in p.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.push_str(&format!("payload_bytes = {}\n", payload.len()));
    fs::write(dir.join(PAYLOAD_FILE), payload)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_params`], returning the parameters and
/// the `meta.*` entries.
pub fn load_params(dir: &Path) -> Result<(ParamSet, BTreeMap<String, String>)> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let payload = fs::read(dir.join(PAYLOAD_FILE))?;
    let bad = |m: String| TensorError::Checkpoint(m);

    let mut meta = BTreeMap::new();
    let mut entries = Vec::new();
    let mut declared_bytes = None;
    let mut format_ok = false;
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line.split_once(" = ").ok_or_else(|| bad(format!("malformed line '{line}'")))?;
        match key {
            "format" => format_ok = value == FORMAT,
            "version" if value != VERSION => return Err(bad(format!("unsupported version {value}"))),
            "version" => {}
            "payload_bytes" => {
                declared_bytes = Some(value.parse::<usize>().map_err(|_| bad("bad payload_bytes".into()))?)
            }
            "param" => {
                let f: Vec<&str> = value.split(' ').collect();
                if f.len() != 4 {
                    return Err(bad(format!("malformed param entry '{value}'")));
                }
                let offset: usize = f[2].parse().map_err(|_| bad(format!("bad offset '{}'", f[2])))?;
                entries.push((f[0].to_string(), parse_shape(f[1])?, offset, f[3] == "1"));
            }
            k if k.starts_with("meta.") => {
                meta.insert(k["meta.".len()..].to_string(), value.to_string());
            }
            _ => return Err(bad(format!("unknown key '{key}'"))),
        }
    }
    if !format_ok {
        return Err(bad("not a parameter manifest".into()));
    }
    let declared = declared_bytes.ok_or_else(|| bad("missing payload_bytes".into()))?;
    if declared != payload.len() {
        return Err(bad(format!("payload is {} bytes, manifest declares {declared}", payload.len())));
    }

    let mut params = ParamSet::new();
    let mut expected_offset = 0;
    for (name, shape, offset, trainable) in entries {
        let n: usize = shape.iter().product();
        if offset != expected_offset || offset + n * 8 > payload.len() {
            return Err(bad(format!("parameter '{name}' does not match payload layout")));
        }
        let data = payload[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?, trainable)?;
        expected_offset = offset + n * 8;
    }
    if expected_offset != payload.len() {
        return Err(bad("trailing bytes in payload".into()));
    }
    Ok((params, meta))
}
