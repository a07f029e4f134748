//! Closed-form function descriptors used for sources, boundary data and
//! reference solutions.
//!
//! Expressions are parsed by `meval` and may use the coordinates `x1`, `x2`,
//! `x3` (aliases `x`, `y`, `z`, and `t` for `x1`), the usual elementary
//! functions (`abs`, `sqrt`, `exp`, `ln`, `sin`, ..., `max`, `min`) and `^`
//! for powers. Coordinates beyond the grid dimension evaluate to 0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

const VARS: [&str; 7] = ["x1", "x2", "x3", "x", "y", "z", "t"];

#[derive(Clone)]
pub struct Expr {
    source: String,
    parsed: meval::Expr,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let parsed = meval::Expr::from_str(source).map_err(|e| Error::Expression {
            expr: source.to_string(),
            msg: e.to_string(),
        })?;
        let expr = Expr {
            source: source.to_string(),
            parsed,
        };
        // Reject unknown variables and arity errors up front.
        let _ = expr.compile()?;
        Ok(expr)
    }

    pub fn constant(value: f64) -> Self {
        // `{:?}` keeps full precision and always prints a decimal point.
        Self::parse(&format!("{value:?}")).expect("constant expression")
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Returns an evaluator taking a point of dimension 1 to 3.
    ///
    /// The closure is not `Send`: evaluate on the thread that compiled it.
    pub fn compile(&self) -> Result<impl Fn(&[f64]) -> f64 + '_> {
        let f = self
            .parsed
            .clone()
            .bindn(&VARS)
            .map_err(|e| Error::Expression {
                expr: self.source.clone(),
                msg: e.to_string(),
            })?;
        Ok(move |x: &[f64]| {
            let mut c = [0.0; 3];
            c[..x.len().min(3)].copy_from_slice(&x[..x.len().min(3)]);
            f(&[c[0], c[1], c[2], c[0], c[1], c[2], c[0]])
        })
    }

    /// One-off evaluation. Use [`Expr::compile`] in loops.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let f = self.compile().expect("validated at parse time");
        f(x)
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl FromStr for Expr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Expr::parse(s)
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Expr::parse(&s).map_err(serde::de::Error::custom)
    }
}
