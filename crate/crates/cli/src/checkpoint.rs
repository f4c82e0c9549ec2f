//! Binary checkpoint format (little-endian throughout).
//!
//! ```text
//! magic "MHKDCKPT" | version u8
//! json block                     architecture, task, role, epoch, accuracy
//! tensor list                    parameters
//! tensor list                    batchnorm running statistics
//! [ 'H' json block, tensor list, tensor list ]   aux heads (teacher, student)
//! [ 'S' json block, u32 groups, (str, tensor list)* ]  optimizer velocities
//! 'E'
//!
//! json block  = u32 length, UTF-8 JSON
//! tensor list = u32 count, (str name, u8 ndim, u32 dims.., f32 values..)*
//! str         = u16 length, UTF-8 bytes
//! ```
//!
//! Deployment consumers read only the backbone; the head and state sections
//! exist for resuming and inspection.

use std::path::Path;

use mhkd::distill::{AuxHeadSpec, AuxHeads};
use mhkd::nn::{Network, NetworkSpec, Parameterized, Source, TaskSpec};
use mhkd::tensor::Tensor;
use mhkd::train::{RunSeeds, Sgd};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"MHKDCKPT";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u8, expected: u8 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match the architecture: {0}")]
    Mismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

impl From<Role> for Source {
    fn from(r: Role) -> Self {
        match r {
            Role::Teacher => Source::Teacher,
            Role::Student => Source::Student,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub role: Role,
    /// Run label, e.g. "teacher", "MHKD", "KD".
    pub label: String,
    pub spec: NetworkSpec,
    pub task: TaskSpec,
    pub epochs_done: usize,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    fn of(name: &str, t: &Tensor<f32>) -> Self {
        Self { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub spec: AuxHeadSpec,
    pub units: Vec<usize>,
    pub teacher_channels: Vec<usize>,
    pub student_channels: Vec<usize>,
    pub num_classes: usize,
}

/// Teacher heads, then student heads.
pub type HeadPair = (AuxHeads<f32>, AuxHeads<f32>);

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSection {
    pub meta: HeadMeta,
    pub teacher: Vec<NamedTensor>,
    pub student: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMeta {
    pub seeds: RunSeeds,
    pub epochs_done: usize,
    pub steps_done: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateSection {
    pub meta: StateMeta,
    /// Velocity buffers per parameter group, flattened.
    pub optimizers: Vec<(String, Vec<NamedTensor>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
    pub heads: Option<HeadSection>,
    pub state: Option<StateSection>,
}

fn collect<M: Parameterized<f32>>(m: &M) -> Vec<NamedTensor> {
    m.params().into_iter().chain(m.buffers()).map(|(n, t)| NamedTensor::of(&n, t)).collect()
}

/// Copies stored tensors into `m`, matching names and shapes in order.
fn restore<M: Parameterized<f32>>(
    m: &mut M,
    params: &[NamedTensor],
    buffers: &[NamedTensor],
) -> Result<(), CheckpointError> {
    assign(m.params_mut(), params)?;
    assign(m.buffers_mut(), buffers)
}

fn assign(targets: Vec<(String, &mut Tensor<f32>)>, stored: &[NamedTensor]) -> Result<(), CheckpointError> {
    if targets.len() != stored.len() {
        return Err(CheckpointError::Mismatch(format!(
            "architecture has {} tensors, checkpoint has {}",
            targets.len(),
            stored.len()
        )));
    }
    for ((name, t), s) in targets.into_iter().zip(stored) {
        if name != s.name || t.shape() != s.shape.as_slice() {
            return Err(CheckpointError::Mismatch(format!(
                "expected {name} {:?}, found {} {:?}",
                t.shape(),
                s.name,
                s.shape
            )));
        }
        t.data_mut().copy_from_slice(&s.data);
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, role: Role, label: &str, epochs_done: usize, test_acc: f64) -> Self {
        Self {
            meta: CheckpointMeta {
                role,
                label: label.to_string(),
                spec: net.spec.clone(),
                task: net.task,
                epochs_done,
                test_acc,
            },
            params: net.params().into_iter().map(|(n, t)| NamedTensor::of(&n, t)).collect(),
            buffers: net.buffers().into_iter().map(|(n, t)| NamedTensor::of(&n, t)).collect(),
            heads: None,
            state: None,
        }
    }

    pub fn with_heads(
        mut self,
        spec: &AuxHeadSpec,
        teacher_spec: &NetworkSpec,
        teacher: &AuxHeads<f32>,
        student: &AuxHeads<f32>,
    ) -> Self {
        let channels = |s: &NetworkSpec| teacher.units.iter().map(|&u| s.unit_channels(u).unwrap_or(0)).collect();
        self.heads = Some(HeadSection {
            meta: HeadMeta {
                spec: spec.clone(),
                units: teacher.units.clone(),
                teacher_channels: channels(teacher_spec),
                student_channels: channels(&self.meta.spec),
                num_classes: self.meta.task.num_classes,
            },
            teacher: collect(teacher),
            student: collect(student),
        });
        self
    }

    pub fn with_state(mut self, meta: StateMeta, optimizers: &[(&str, &Sgd<f32>)]) -> Self {
        let optimizers = optimizers
            .iter()
            .map(|(group, sgd)| {
                let v = sgd
                    .velocities
                    .iter()
                    .map(|(n, v)| NamedTensor { name: n.clone(), shape: vec![v.len()], data: v.clone() })
                    .collect();
                (group.to_string(), v)
            })
            .collect();
        self.state = Some(StateSection { meta, optimizers });
        self
    }

    /// The backbone alone, as deployed.
    pub fn without_extras(&self) -> Self {
        Self { heads: None, state: None, ..self.clone() }
    }

    pub fn to_network(&self) -> Result<Network<f32>, CheckpointError> {
        let m = &self.meta;
        let mut net =
            Network::build(&m.spec, &m.task, m.role.into(), 0).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        let n_params = net.params().len();
        if n_params != self.params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} parameter tensors stored, architecture has {n_params}",
                self.params.len()
            )));
        }
        restore(&mut net, &self.params, &self.buffers)?;
        Ok(net)
    }

    /// Rebuilds `(teacher heads, student heads)` if the section is present.
    pub fn aux_heads(&self) -> Result<Option<HeadPair>, CheckpointError> {
        let Some(h) = &self.heads else { return Ok(None) };
        let build = |channels: &[usize], stored: &[NamedTensor]| -> Result<AuxHeads<f32>, CheckpointError> {
            let lookup = |u: usize| h.meta.units.iter().position(|&x| x == u).map(|i| channels[i]);
            let mut heads = AuxHeads::build(&h.meta.spec, &h.meta.units, lookup, h.meta.num_classes, 0)
                .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
            let n = heads.params().len();
            if stored.len() < n {
                return Err(CheckpointError::Mismatch("head tensors missing".into()));
            }
            restore(&mut heads, &stored[..n], &stored[n..])?;
            Ok(heads)
        };
        Ok(Some((build(&h.meta.teacher_channels, &h.teacher)?, build(&h.meta.student_channels, &h.student)?)))
    }

    /// Velocity buffers of one optimizer group.
    pub fn optimizer(&self, group: &str) -> Option<Sgd<f32>> {
        let (_, tensors) = self.state.as_ref()?.optimizers.iter().find(|(g, _)| g == group)?;
        Some(Sgd { velocities: tensors.iter().map(|t| (t.name.clone(), t.data.clone())).collect() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.push(VERSION);
        put_json(&mut w, &self.meta);
        put_tensors(&mut w, &self.params);
        put_tensors(&mut w, &self.buffers);
        if let Some(h) = &self.heads {
            w.push(b'H');
            put_json(&mut w, &h.meta);
            put_tensors(&mut w, &h.teacher);
            put_tensors(&mut w, &h.student);
        }
        if let Some(s) = &self.state {
            w.push(b'S');
            put_json(&mut w, &s.meta);
            w.extend_from_slice(&(s.optimizers.len() as u32).to_le_bytes());
            for (group, tensors) in &s.optimizers {
                put_str(&mut w, group);
                put_tensors(&mut w, tensors);
            }
        }
        w.push(b'E');
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION });
        }
        let meta = r.json("metadata")?;
        let params = r.tensors()?;
        let buffers = r.tensors()?;
        let mut ckpt = Checkpoint { meta, params, buffers, heads: None, state: None };
        loop {
            match r.u8("section tag")? {
                b'H' if ckpt.heads.is_none() && ckpt.state.is_none() => {
                    let meta = r.json("head metadata")?;
                    ckpt.heads = Some(HeadSection { meta, teacher: r.tensors()?, student: r.tensors()? });
                }
                b'S' if ckpt.state.is_none() => {
                    let meta = r.json("state metadata")?;
                    let groups = r.u32("optimizer groups")?;
                    let optimizers =
                        (0..groups)
                            .map(|_| Ok((r.str("group name")?, r.tensors()?)))
                            .collect::<Result<_, CheckpointError>>()?;
                    ckpt.state = Some(StateSection { meta, optimizers });
                }
                b'E' => break,
                t => {
                    return Err(CheckpointError::Format(format!(
                        "unexpected section tag {t:#04x} at byte {}",
                        r.pos - 1
                    )))
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes =
            std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u16).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_json<S: Serialize>(w: &mut Vec<u8>, v: &S) {
    let json = serde_json::to_vec(v).expect("metadata serializes");
    w.extend_from_slice(&(json.len() as u32).to_le_bytes());
    w.extend_from_slice(&json);
}

fn put_tensors(w: &mut Vec<u8>, ts: &[NamedTensor]) {
    w.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for t in ts {
        put_str(w, &t.name);
        w.push(t.shape.len() as u8);
        t.shape.iter().for_each(|&d| w.extend_from_slice(&(d as u32).to_le_bytes()));
        t.data.iter().for_each(|v| w.extend_from_slice(&v.to_le_bytes()));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn str(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u16(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|e| CheckpointError::Format(e.to_string()))
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self, what: &'static str) -> Result<T, CheckpointError> {
        let n = self.u32(what)? as usize;
        serde_json::from_slice(self.take(n, what)?).map_err(|e| CheckpointError::Format(format!("{what}: {e}")))
    }

    fn tensors(&mut self) -> Result<Vec<NamedTensor>, CheckpointError> {
        let count = self.u32("tensor count")?;
        (0..count)
            .map(|_| {
                let name = self.str("tensor name")?;
                let ndim = self.u8("tensor rank")? as usize;
                let shape =
                    (0..ndim).map(|_| self.u32("tensor shape").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
                let n: usize = shape.iter().product();
                let raw =
                    self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("tensor data"))?, "tensor data")?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                Ok(NamedTensor { name, shape, data })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mhkd::nn::presets;

    fn student() -> Network<f32> {
        Network::build(&presets::tiny_student(3), &TaskSpec::new(10, (3, 32, 32)), Source::Student, 5).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let net = student();
        let ckpt = Checkpoint::from_network(&net, Role::Student, "MHKD", 3, 0.625);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.to_network().unwrap().bit_eq(&net));
    }

    #[test]
    fn version_mismatch_and_truncation_rejected() {
        let mut bytes = Checkpoint::from_network(&student(), Role::Student, "x", 0, 0.0).to_bytes();
        let full = bytes.clone();
        bytes[8] = VERSION + 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Version { found: 2, expected: 1 })));
        assert!(matches!(Checkpoint::from_bytes(&full[..full.len() / 2]), Err(CheckpointError::Truncated(_))));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT\x01"), Err(CheckpointError::BadMagic)));
    }
}
