//! Plain-text QP exchange format.
//!
//! Whitespace-separated tokens; `#` starts a comment that runs to the end of
//! the line. In order:
//!
//! ```text
//! n m nnz_h nnz_a
//! nnz_h lines   i j value     (upper triangle of H, i <= j)
//! n values      g
//! nnz_a lines   i j value     (A, row i, column j)
//! m lines       lower upper   (inf / -inf for missing bounds)
//! ```
//!
//! Indices are zero-based.

use std::fmt::Write as _;

use thiserror::Error;

use super::{is_infinite, CscMatrix, QpError, QpProblem, INFINITY};

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("invalid problem: {0}")]
    Problem(#[from] QpError),
}

pub fn write_qp(qp: &QpProblem) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# n m nnz_h nnz_a");
    let _ = writeln!(s, "{} {} {} {}", qp.n(), qp.m(), qp.hessian.nnz(), qp.a.nnz());
    let _ = writeln!(s, "# hessian (upper triangle)");
    for (i, j, v) in qp.hessian.triplets() {
        let _ = writeln!(s, "{i} {j} {v:e}");
    }
    let _ = writeln!(s, "# gradient");
    for v in &qp.grad {
        let _ = writeln!(s, "{v:e}");
    }
    let _ = writeln!(s, "# constraint matrix");
    for (i, j, v) in qp.a.triplets() {
        let _ = writeln!(s, "{i} {j} {v:e}");
    }
    let _ = writeln!(s, "# bounds");
    let bound = |v: f64| {
        if is_infinite(v) {
            if v > 0.0 { "inf".to_string() } else { "-inf".to_string() }
        } else {
            format!("{v:e}")
        }
    };
    for (l, u) in qp.lower.iter().zip(&qp.upper) {
        let _ = writeln!(s, "{} {}", bound(*l), bound(*u));
    }
    s
}

struct Tokens<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        let bytes = self.src.as_bytes();
        loop {
            while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < bytes.len() && bytes[self.pos] == b'#' {
                while self.pos < bytes.len() && bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < bytes.len() && !bytes[self.pos].is_ascii_whitespace() && bytes[self.pos] != b'#' {
            self.pos += 1;
        }
        Some((start, &self.src[start..self.pos]))
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str), ParseError> {
        self.next().ok_or_else(|| ParseError::Syntax {
            offset: self.src.len(),
            message: format!("unexpected end of input, expected {what}"),
        })
    }

    fn usize(&mut self, what: &str) -> Result<(usize, usize), ParseError> {
        let (off, tok) = self.expect(what)?;
        tok.parse().map(|v| (off, v)).map_err(|_| ParseError::Syntax {
            offset: off,
            message: format!("expected {what}, found '{tok}'"),
        })
    }

    fn f64(&mut self, what: &str) -> Result<f64, ParseError> {
        let (off, tok) = self.expect(what)?;
        match tok {
            "inf" | "+inf" => return Ok(INFINITY),
            "-inf" => return Ok(-INFINITY),
            _ => {}
        }
        match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(ParseError::Syntax {
                offset: off,
                message: format!("expected {what}, found '{tok}'"),
            }),
        }
    }
}

fn index(t: &mut Tokens<'_>, what: &str, limit: usize) -> Result<usize, ParseError> {
    let (off, v) = t.usize(what)?;
    if v >= limit {
        return Err(ParseError::Syntax {
            offset: off,
            message: format!("{what} {v} out of range (< {limit})"),
        });
    }
    Ok(v)
}

pub fn parse_qp(src: &str) -> Result<QpProblem, ParseError> {
    let mut t = Tokens { src, pos: 0 };
    let (_, n) = t.usize("variable count n")?;
    let (_, m) = t.usize("constraint count m")?;
    let (_, nnz_h) = t.usize("hessian nonzero count")?;
    let (_, nnz_a) = t.usize("constraint nonzero count")?;
    let mut h = Vec::with_capacity(nnz_h);
    for _ in 0..nnz_h {
        let at = t.pos;
        let i = index(&mut t, "hessian row", n)?;
        let j = index(&mut t, "hessian column", n)?;
        if i > j {
            return Err(ParseError::Syntax {
                offset: at,
                message: format!("hessian entry ({i}, {j}) below the diagonal"),
            });
        }
        h.push((i, j, t.f64("hessian value")?));
    }
    let mut g = Vec::with_capacity(n);
    for _ in 0..n {
        g.push(t.f64("gradient value")?);
    }
    let mut a = Vec::with_capacity(nnz_a);
    for _ in 0..nnz_a {
        let i = index(&mut t, "constraint row", m)?;
        let j = index(&mut t, "constraint column", n)?;
        a.push((i, j, t.f64("constraint value")?));
    }
    let mut lower = Vec::with_capacity(m);
    let mut upper = Vec::with_capacity(m);
    for _ in 0..m {
        lower.push(t.f64("lower bound")?);
        upper.push(t.f64("upper bound")?);
    }
    if let Some((off, tok)) = t.next() {
        return Err(ParseError::Syntax {
            offset: off,
            message: format!("trailing token '{tok}'"),
        });
    }
    Ok(QpProblem::new(
        CscMatrix::from_triplets(n, n, &h),
        g,
        CscMatrix::from_triplets(m, n, &a),
        lower,
        upper,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn roundtrip() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0 / 3.0]);
        let qp = QpProblem::from_dense(&h, &[0.1, -0.2], &a, &[1.0, -INFINITY], &[1.0, 0.7]).unwrap();
        assert_eq!(parse_qp(&write_qp(&qp)).unwrap(), qp);
    }

    #[test]
    fn reports_byte_offsets() {
        let err = parse_qp("2 0 x 0").unwrap_err();
        assert_eq!(
            err,
            ParseError::Syntax {
                offset: 4,
                message: "expected hessian nonzero count, found 'x'".into()
            }
        );
        let err = parse_qp("# header\n1 0 1 0\n0 0 1.0\n").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { offset: 25, .. }), "{err}");
        let err = parse_qp("1 0 1 0\n0 3 1.0\n0.0\n").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { offset: 10, .. }), "{err}");
    }
}
