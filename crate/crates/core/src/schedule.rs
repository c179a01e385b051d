//! Scalar schedules such as the guidance weight `lambda(tau)` or SGLD step sizes.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A scalar function of time or iteration. Configs serialize the constant
/// case as a bare number; custom closures are code-only.
#[derive(Clone)]
pub enum Schedule {
    Constant(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Schedule {
    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Schedule::Custom(Arc::new(f))
    }

    pub fn at(&self, t: f64) -> f64 {
        match self {
            Schedule::Constant(c) => *c,
            Schedule::Custom(f) => f(t),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Schedule::Constant(c) => Some(*c),
            Schedule::Custom(_) => None,
        }
    }
}

impl From<f64> for Schedule {
    fn from(c: f64) -> Self {
        Schedule::Constant(c)
    }
}

impl fmt::Debug for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant(c) => write!(f, "Constant({c})"),
            Schedule::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl PartialEq for Schedule {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Schedule::Constant(a), Schedule::Constant(b)) => a == b,
            (Schedule::Custom(a), Schedule::Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl Serialize for Schedule {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Schedule::Constant(c) => s.serialize_f64(*c),
            Schedule::Custom(_) => Err(serde::ser::Error::custom("custom schedules cannot be serialized")),
        }
    }
}

impl<'de> Deserialize<'de> for Schedule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        f64::deserialize(d).map(Schedule::Constant)
    }
}
