use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MeshError {
    #[error("malformed mesh literal `{0}`, expected e.g. {{B:4, M:2}}")]
    Malformed(String),
    #[error("duplicate mesh axis `{0}`")]
    DuplicateAxis(String),
    #[error("mesh axis `{0}` must have size >= 2")]
    AxisTooSmall(String),
    #[error("mesh has no axes")]
    Empty,
}

/// An ordered list of named axes. Devices are addressed row-major, first axis
/// most significant.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mesh {
    axes: Vec<(String, usize)>,
}

/// One coordinate per mesh axis, in mesh order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeviceCoord(pub Vec<usize>);

impl Mesh {
    pub fn new(axes: Vec<(String, usize)>) -> Result<Self, MeshError> {
        if axes.is_empty() {
            return Err(MeshError::Empty);
        }
        for (i, (name, size)) in axes.iter().enumerate() {
            if name.is_empty() || name.contains(|c: char| !(c.is_alphanumeric() || c == '_')) {
                return Err(MeshError::Malformed(name.clone()));
            }
            if *size < 2 {
                return Err(MeshError::AxisTooSmall(name.clone()));
            }
            if axes[..i].iter().any(|(n, _)| n == name) {
                return Err(MeshError::DuplicateAxis(name.clone()));
            }
        }
        Ok(Self { axes })
    }

    pub fn axes(&self) -> &[(String, usize)] {
        &self.axes
    }

    pub fn axis_names(&self) -> impl Iterator<Item = &str> {
        self.axes.iter().map(|(n, _)| n.as_str())
    }

    pub fn size(&self, axis: &str) -> Option<usize> {
        self.axes.iter().find(|(n, _)| n == axis).map(|(_, s)| *s)
    }

    pub fn index_of(&self, axis: &str) -> Option<usize> {
        self.axes.iter().position(|(n, _)| n == axis)
    }

    pub fn contains(&self, axis: &str) -> bool {
        self.index_of(axis).is_some()
    }

    pub fn device_count(&self) -> usize {
        self.axes.iter().map(|(_, s)| s).product()
    }

    /// Product of the sizes of `axes`; unknown axes count as 1.
    pub fn group_size<S: AsRef<str>>(&self, axes: &[S]) -> usize {
        axes.iter()
            .map(|a| self.size(a.as_ref()).unwrap_or(1))
            .product()
    }

    /// All device coordinates in row-major order.
    pub fn devices(&self) -> Vec<DeviceCoord> {
        let mut out = Vec::with_capacity(self.device_count());
        let mut cur = vec![0; self.axes.len()];
        loop {
            out.push(DeviceCoord(cur.clone()));
            let mut i = self.axes.len();
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                cur[i] += 1;
                if cur[i] < self.axes[i].1 {
                    break;
                }
                cur[i] = 0;
            }
        }
    }

    pub fn linear_index(&self, c: &DeviceCoord) -> usize {
        self.axes
            .iter()
            .zip(&c.0)
            .fold(0, |acc, ((_, s), i)| acc * s + i)
    }

    pub fn coord_along(&self, c: &DeviceCoord, axis: &str) -> Option<usize> {
        self.index_of(axis).map(|i| c.0[i])
    }

    /// Mixed-radix chunk index of device `c` over `axes`, first axis major.
    pub fn chunk_index<S: AsRef<str>>(&self, c: &DeviceCoord, axes: &[S]) -> usize {
        axes.iter().fold(0, |acc, a| {
            let i = self.index_of(a.as_ref()).expect("axis in mesh");
            acc * self.axes[i].1 + c.0[i]
        })
    }
}

impl FromStr for Mesh {
    type Err = MeshError;

    /// Accepts `{B:4, M:2}` or the bare form `B:4,M:2`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let inner = t
            .strip_prefix('{')
            .and_then(|r| r.strip_suffix('}'))
            .unwrap_or(t);
        let mut axes = Vec::new();
        for part in inner.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (name, size) = part
                .split_once(':')
                .ok_or_else(|| MeshError::Malformed(s.to_string()))?;
            let size: usize = size
                .trim()
                .parse()
                .map_err(|_| MeshError::Malformed(s.to_string()))?;
            axes.push((name.trim().to_string(), size));
        }
        Mesh::new(axes)
    }
}

impl fmt::Display for Mesh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (n, s)) in self.axes.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{n}:{s}")?;
        }
        f.write_str("}")
    }
}
