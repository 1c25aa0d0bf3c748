//! Parameter sweep axes and constants.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// An opaque sweep value; components only ever see its text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(serde_json::Number),
    Text(String),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Number(n) => write!(f, "{n}"),
            SweepValue::Text(s) => f.write_str(s),
        }
    }
}

impl From<i64> for SweepValue {
    fn from(v: i64) -> Self {
        SweepValue::Number(v.into())
    }
}

impl From<&str> for SweepValue {
    fn from(v: &str) -> Self {
        SweepValue::Text(v.into())
    }
}

/// Sweep axes in declaration order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Axes(pub Vec<(String, Vec<SweepValue>)>);

impl Axes {
    pub fn get(&self, name: &str) -> Option<&[SweepValue]> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(n, _)| n.as_str())
    }

    /// Number of sweep points (1 when there are no axes).
    pub fn points(&self) -> usize {
        self.0.iter().map(|(_, v)| v.len()).product()
    }
}

impl Serialize for Axes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (name, values) in &self.0 {
            map.serialize_entry(name, values)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Axes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct AxesVisitor;
        impl<'de> Visitor<'de> for AxesVisitor {
            type Value = Axes;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of axis name to value list")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Axes, A::Error> {
                let mut axes = Vec::new();
                while let Some((name, values)) = access.next_entry::<String, Vec<SweepValue>>()? {
                    if axes.iter().any(|(n, _): &(String, _)| *n == name) {
                        return Err(serde::de::Error::custom(alloc::format!("duplicate axis {name}")));
                    }
                    axes.push((name, values));
                }
                Ok(Axes(axes))
            }
        }
        d.deserialize_map(AxesVisitor)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(default)]
    pub axes: Axes,
    #[serde(default)]
    pub constants: BTreeMap<String, SweepValue>,
}

impl SweepSpec {
    pub fn axis(mut self, name: &str, values: impl IntoIterator<Item = SweepValue>) -> Self {
        self.axes.0.push((name.into(), values.into_iter().collect()));
        self
    }

    pub fn constant(mut self, name: &str, value: impl Into<SweepValue>) -> Self {
        self.constants.insert(name.into(), value.into());
        self
    }

    pub fn declares(&self, name: &str) -> bool {
        self.axes.get(name).is_some() || self.constants.contains_key(name)
    }

    /// Cartesian product of the axes, last axis varying fastest. Each point
    /// lists `(axis, value)` pairs in axis order.
    pub fn points(&self) -> Vec<Vec<(String, String)>> {
        let axes: Vec<(&str, Vec<String>)> =
            self.axes.0.iter().map(|(n, v)| (n.as_str(), v.iter().map(ToString::to_string).collect())).collect();
        if axes.iter().any(|(_, v)| v.is_empty()) {
            return Vec::new();
        }
        let total = self.axes.points();
        let mut out = Vec::with_capacity(total);
        let mut index = alloc::vec![0usize; axes.len()];
        for _ in 0..total {
            out.push(axes.iter().zip(&index).map(|((n, v), &i)| ((*n).into(), v[i].clone())).collect());
            for k in (0..axes.len()).rev() {
                index[k] += 1;
                if index[k] < axes[k].1.len() {
                    break;
                }
                index[k] = 0;
            }
        }
        out
    }
}
