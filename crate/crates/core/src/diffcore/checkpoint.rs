use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::ModelState;
use crate::error::{Error, Result};

const MAGIC: &str = "fdrec-checkpoint 1";

/// Text dump of a model: metadata, id vocabularies, and (name, shape, values)
/// for every tensor in creation order. Values use shortest round-trip
/// exponent notation, so identical states serialize to identical bytes.
///
/// ```text
/// fdrec-checkpoint 1
/// model reprec
/// meta dim 64
/// vocab users 2
/// u1
/// u2
/// tensor store 500x64
/// 1.5e-1 -3.2e-2 ...
/// end
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub meta: BTreeMap<String, String>,
    pub vocabs: BTreeMap<String, Vec<String>>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_state(model: &str, state: &ModelState) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), state.seed().to_string());
        meta.insert("step".to_string(), state.step().to_string());
        Checkpoint {
            model: model.to_string(),
            meta,
            vocabs: BTreeMap::new(),
            tensors: state
                .tensors()
                .iter()
                .map(|t| (t.name.clone(), t.shape().to_vec(), t.values.clone()))
                .collect(),
        }
    }

    /// Copy stored values into a freshly built state of the same architecture.
    pub fn apply_to(&self, state: &mut ModelState) -> Result<()> {
        if self.tensors.len() != state.tensors().len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model has {}",
                self.tensors.len(),
                state.tensors().len()
            )));
        }
        for (i, (name, shape, values)) in self.tensors.iter().enumerate() {
            let t = &mut state.tensors[i];
            if &t.name != name || t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is {name} {shape:?}, model expects {} {:?}",
                    t.name,
                    t.shape()
                )));
            }
            t.values.copy_from_slice(values);
        }
        if let Some(step) = self.meta.get("step") {
            state.step = step
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad step {step}")))?;
        }
        state.check_finite()
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta {key}")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("meta {key} has bad value {raw}")))
    }

    pub fn vocab(&self, name: &str) -> Result<&[String]> {
        self.vocabs
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Checkpoint(format!("missing vocab {name}")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "model {}", self.model);
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k} {v}");
        }
        for (name, ids) in &self.vocabs {
            let _ = writeln!(s, "vocab {name} {}", ids.len());
            for id in ids {
                let _ = writeln!(s, "{id}");
            }
        }
        for (name, shape, values) in &self.tensors {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "tensor {name} {}", dims.join("x"));
            let mut first = true;
            for v in values {
                if !first {
                    s.push(' ');
                }
                first = false;
                let _ = write!(s, "{v:e}");
            }
            s.push('\n');
        }
        s.push_str("end\n");
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Checkpoint(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(bad(1, "not an fdrec checkpoint")),
        }
        let model = match lines.next() {
            Some((_, l)) if l.starts_with("model ") => l["model ".len()..].to_string(),
            _ => return Err(bad(2, "missing model line")),
        };
        let mut ck = Checkpoint {
            model,
            meta: BTreeMap::new(),
            vocabs: BTreeMap::new(),
            tensors: Vec::new(),
        };
        loop {
            let (n, line) = lines.next().ok_or_else(|| bad(0, "truncated, missing end"))?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(3, ' ');
            let kind = parts.next().unwrap_or("");
            let name = parts.next().ok_or_else(|| bad(n, "missing name"))?.to_string();
            let rest = parts.next().unwrap_or("");
            match kind {
                "meta" => {
                    ck.meta.insert(name, rest.to_string());
                }
                "vocab" => {
                    let len: usize = rest.parse().map_err(|_| bad(n, "bad vocab length"))?;
                    let mut ids = Vec::with_capacity(len);
                    for _ in 0..len {
                        let (_, id) = lines.next().ok_or_else(|| bad(n, "truncated vocab"))?;
                        ids.push(id.to_string());
                    }
                    ck.vocabs.insert(name, ids);
                }
                "tensor" => {
                    let shape = rest
                        .split('x')
                        .map(str::parse)
                        .collect::<Result<Vec<usize>, _>>()
                        .map_err(|_| bad(n, "bad shape"))?;
                    let (vn, vals) = lines.next().ok_or_else(|| bad(n, "missing tensor values"))?;
                    let values = vals
                        .split(' ')
                        .filter(|v| !v.is_empty())
                        .map(str::parse)
                        .collect::<Result<Vec<f64>, _>>()
                        .map_err(|_| bad(vn, "bad value"))?;
                    if values.len() != shape.iter().product::<usize>() {
                        return Err(bad(vn, "value count does not match shape"));
                    }
                    ck.tensors.push((name, shape, values));
                }
                _ => return Err(bad(n, "unknown record")),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
