//! Reconstruction quality metrics and comma-separated reports.

use std::fmt;

use crate::error::{Error, Result};
use crate::event::Planar;

/// Peak signal-to-noise ratio in dB. Identical inputs give `+inf`.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    let mse = mse(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// [`psnr`] over two planar tensors with peak 1.
pub fn psnr_planar(a: &Planar, b: &Planar) -> Result<f64> {
    same_shape(a, b)?;
    let (x, y) = (to_f64(a), to_f64(b));
    psnr(&x, &y, 1.0)
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Mean squared difference of two event tensors.
pub fn event_mse(a: &Planar, b: &Planar) -> Result<f64> {
    same_shape(a, b)?;
    mse(&to_f64(a), &to_f64(b))
}

fn same_shape(a: &Planar, b: &Planar) -> Result<()> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(Error::shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    Ok(())
}

fn to_f64(p: &Planar) -> Vec<f64> {
    p.data.iter().map(|&v| v as f64).collect()
}

/// Formats a dB value, writing `inf` for a perfect match.
pub fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.3}")
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// A comma-separated table with a one-line header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

impl fmt::Display for CsvTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.header.join(","))?;
        for r in &self.rows {
            writeln!(f, "{}", r.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = vec![0.5; 10];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert!(psnr(&a, &b[..3], 1.0).is_err());
        assert_eq!(fmt_db(f64::INFINITY), "inf");
    }

    #[test]
    fn event_mse_examples() {
        let z = Planar::new(2, 1, 2, vec![0.0; 4]).unwrap();
        let o = Planar::new(2, 1, 2, vec![1.0; 4]).unwrap();
        assert_eq!(event_mse(&z, &z).unwrap(), 0.0);
        assert_eq!(event_mse(&z, &o).unwrap(), 1.0);
        assert!(event_mse(&z, &Planar::new(1, 2, 2, vec![0.0; 4]).unwrap()).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn csv_has_header_line() {
        let mut t = CsvTable::new(&["id", "rho"]);
        t.push(vec!["a".into(), "0.1".into()]);
        assert_eq!(t.to_string(), "id,rho\na,0.1\n");
    }
}
