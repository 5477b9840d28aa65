//! Uniformly weighted particle ensembles and the vector fields that move them.
//!
//! An ensemble of `n` particles in `R^d` stands for the empirical measure
//! `(1/n) Σ δ_{x_j}`. Fields are sampled at the particle positions and are
//! positionally paired with them; the `L²(μ)` geometry is a plain mean over
//! particles. Both types store their entries row-major (`n × d`), which fixes
//! the particle-major stacking order used by the Hessian operator.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

fn check_shape(n: usize, d: usize, len: usize) -> Result<()> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "ensemble needs n >= 1 and d >= 1 (got n={n}, d={d})"
        )));
    }
    if len != n * d {
        return Err(Error::DimensionMismatch {
            expected: n * d,
            got: len,
            context: "row-major n*d storage",
        });
    }
    Ok(())
}

/// `N` particles in `R^d` with implicit weights `1/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    n: usize,
    d: usize,
    positions: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn new(n: usize, d: usize, positions: Vec<f64>) -> Result<Self> {
        check_shape(n, d, positions.len())?;
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("particle positions"));
        }
        Ok(Self { n, d, positions })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("particle rows have differing lengths".into()));
        }
        Self::new(n, d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.d..(i + 1) * self.d]
    }

    pub fn particles(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.positions.chunks_exact(self.d)
    }

    /// Row-major `n × d` view.
    pub fn as_slice(&self) -> &[f64] {
        &self.positions
    }

    /// Ensemble mean `∫ x μ(dx)`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for p in self.particles() {
            for (mi, xi) in m.iter_mut().zip(p) {
                *mi += xi;
            }
        }
        let inv = 1.0 / self.n as f64;
        m.iter_mut().for_each(|v| *v *= inv);
        m
    }

    /// `(Id + step·field)#μ`: every particle moves by `step · field_j`.
    pub fn pushforward(&self, field: &StackedField, step: f64) -> Result<Self> {
        self.check_field(field)?;
        if !step.is_finite() {
            return Err(Error::NonFinite("pushforward step"));
        }
        let positions: Vec<f64> = self
            .positions
            .iter()
            .zip(&field.values)
            .map(|(x, v)| x + step * v)
            .collect();
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("pushed-forward positions"));
        }
        Ok(Self {
            n: self.n,
            d: self.d,
            positions,
        })
    }

    /// Copy with particle `i`, coordinate `a` shifted by `h`.
    pub fn with_shifted(&self, i: usize, a: usize, h: f64) -> Self {
        let mut out = self.clone();
        out.positions[i * self.d + a] += h;
        out
    }

    pub fn check_field(&self, field: &StackedField) -> Result<()> {
        if field.n != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: field.n,
                context: "field particle count",
            });
        }
        if field.d != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: field.d,
                context: "field dimension",
            });
        }
        Ok(())
    }

    /// Reads the `particle,coord_0,...,coord_{d-1}` CSV format.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("particle") {
            return Err(Error::Parse("ensemble CSV must start with a 'particle' column".into()));
        }
        let d = headers.len() - 1;
        for (a, h) in headers.iter().skip(1).enumerate() {
            if h != format!("coord_{a}") {
                return Err(Error::Parse(format!(
                    "unexpected ensemble CSV column '{h}', expected 'coord_{a}'"
                )));
            }
        }
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let idx: usize = rec[0]
                .parse()
                .map_err(|_| Error::Parse(format!("bad particle index on row {}", line + 1)))?;
            if idx != line {
                return Err(Error::Parse(format!(
                    "particle index {idx} out of order on row {}",
                    line + 1
                )));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad coordinate '{s}' on row {}", line + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != d {
                return Err(Error::Parse(format!("row {} has wrong arity", line + 1)));
            }
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["particle".to_string()];
        header.extend((0..self.d).map(|a| format!("coord_{a}")));
        w.write_record(&header)?;
        for (i, p) in self.particles().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(p.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// A vector field sampled at the particles of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedField {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl StackedField {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        check_shape(n, d, values.len())?;
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("field values"));
        }
        Ok(Self { n, d, values })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            values: vec![0.0; n * d],
        }
    }

    /// Same value at every particle.
    pub fn constant(n: usize, v: &[f64]) -> Self {
        Self {
            n,
            d: v.len(),
            values: v.repeat(n),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("field rows have differing lengths".into()));
        }
        Self::new(n, d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.values.chunks_exact(self.d)
    }

    /// Stacked `n·d` vector, particle-major.
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            n: self.n,
            d: self.d,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// `self + s·other`.
    pub fn axpy(&self, s: f64, other: &StackedField) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            n: self.n,
            d: self.d,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + s * b).collect(),
        })
    }

    /// `‖v‖_{L²(μ)} = sqrt((1/N) Σ_j ‖v_j‖²)`.
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() / self.n as f64).sqrt()
    }

    /// `⟨a, b⟩_{L²(μ)} = (1/N) Σ_j a_j·b_j`.
    pub fn l2_inner(&self, other: &StackedField) -> Result<f64> {
        self.check_same(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>() / self.n as f64)
    }

    fn check_same(&self, other: &StackedField) -> Result<()> {
        if self.n != other.n || self.d != other.d {
            return Err(Error::DimensionMismatch {
                expected: self.n * self.d,
                got: other.n * other.d,
                context: "paired fields",
            });
        }
        Ok(())
    }
}

/// Free-function form of [`ParticleEnsemble::pushforward`].
pub fn pushforward(ens: &ParticleEnsemble, field: &StackedField, step: f64) -> Result<ParticleEnsemble> {
    ens.pushforward(field, step)
}

pub fn l2_norm(field: &StackedField) -> f64 {
    field.l2_norm()
}

pub fn l2_inner(a: &StackedField, b: &StackedField) -> Result<f64> {
    a.l2_inner(b)
}
