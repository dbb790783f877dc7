//! Binary checkpoints of parameter groups plus optional optimizer velocity.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "FSCK"
//! version    u8       1
//! arch       3 x u32  in_channels, hidden, classes
//! groups     section  parameters
//! velocity   section  optimizer momentum buffer (may hold zero groups)
//!
//! section := count u8, then per group:
//!   name_len u8, name (ASCII), tensors u8,
//!   per tensor: ndim u8, dims ndim x u32,
//!   values u32, payload values x f64
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Architecture, Group, ParamSet, ParamSlice};

pub const MAGIC: &[u8; 4] = b"FSCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub params: BTreeMap<Group, Vec<f64>>,
    pub velocity: BTreeMap<Group, Vec<f64>>,
}

impl Checkpoint {
    pub fn from_params(params: &ParamSet) -> Self {
        Self {
            arch: params.arch(),
            params: Group::ALL.into_iter().map(|g| (g, params.group(g).to_vec())).collect(),
            velocity: BTreeMap::new(),
        }
    }

    pub fn from_slice(slice: &ParamSlice) -> Self {
        Self { arch: slice.arch(), params: slice.groups().clone(), velocity: BTreeMap::new() }
    }

    pub fn with_velocity(mut self, velocity: &ParamSet) -> Self {
        self.velocity = Group::ALL.into_iter().map(|g| (g, velocity.group(g).to_vec())).collect();
        self
    }

    pub fn to_param_set(&self) -> Result<ParamSet> {
        let get = |g: Group| {
            self.params
                .get(&g)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks group {g}")))
        };
        ParamSet::from_groups(self.arch, get(Group::Backbone)?, get(Group::Norm)?, get(Group::Classifier)?)
    }

    pub fn to_slice(&self) -> Result<ParamSlice> {
        ParamSlice::new(self.arch, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for v in [self.arch.in_channels, self.arch.hidden, self.arch.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        write_section(&mut out, self.arch, &self.params);
        write_section(&mut out, self.arch, &self.velocity);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let arch = Architecture::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize)?;
        let params = read_section(&mut r, arch)?;
        let velocity = read_section(&mut r, arch)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { arch, params, velocity })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_section(out: &mut Vec<u8>, arch: Architecture, groups: &BTreeMap<Group, Vec<f64>>) {
    out.push(groups.len() as u8);
    for (g, values) in groups {
        let name = g.name().as_bytes();
        out.push(name.len() as u8);
        out.extend_from_slice(name);
        let shapes = arch.group_shapes(*g);
        out.push(shapes.len() as u8);
        for shape in shapes {
            out.push(shape.len() as u8);
            for d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_section(r: &mut Reader<'_>, arch: Architecture) -> Result<BTreeMap<Group, Vec<f64>>> {
    let count = r.u8()?;
    let mut groups = BTreeMap::new();
    for _ in 0..count {
        let len = r.u8()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("group name is not UTF-8".into()))?;
        let group: Group = name.parse()?;
        let tensors = r.u8()? as usize;
        let mut shapes = Vec::with_capacity(tensors);
        for _ in 0..tensors {
            let ndim = r.u8()? as usize;
            shapes.push((0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?);
        }
        if shapes != arch.group_shapes(group) {
            return Err(Error::Format(format!("group {group} has shapes {shapes:?}")));
        }
        let n = r.u32()? as usize;
        if n != arch.group_len(group) {
            return Err(Error::Format(format!("group {group} declares {n} values")));
        }
        let payload = r.take(8 * n)?;
        let values = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if groups.insert(group, values).is_some() {
            return Err(Error::Format(format!("group {group} appears twice")));
        }
    }
    Ok(groups)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
