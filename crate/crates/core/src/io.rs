//! CSV formats for designs, boxes, curves, parameters, patterns and reports.
//!
//! Numbers are written in Rust's shortest round-trip form, so reading back an
//! exported file reproduces the in-memory values exactly.

use nalgebra::DMatrix;

use crate::doe::{DesignMatrix, InputBox};
use crate::emulator::{CrossplotPoint, CurvePrediction, ValidationReport};
use crate::error::{Error, Result};
use crate::simreg::{CurveSet, TransformParams};

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_num(x: f64) -> String {
    format!("{x:?}")
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Non-blank lines split on commas, with their 1-based line numbers.
fn records(text: &str) -> Vec<(usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split(',').map(str::trim).collect()))
        .collect()
}

fn parse_num(cell: &str, line: usize) -> Result<f64> {
    cell.parse::<f64>()
        .map_err(|_| parse_err(line, format!("`{cell}` is not a number")))
}

fn parse_row(cells: &[&str], line: usize, width: usize) -> Result<Vec<f64>> {
    if cells.len() != width {
        return Err(parse_err(line, format!("expected {width} fields, found {}", cells.len())));
    }
    cells.iter().map(|c| parse_num(c, line)).collect()
}

fn join(cells: impl IntoIterator<Item = String>) -> String {
    cells.into_iter().collect::<Vec<_>>().join(",")
}

/// Header row of column names, then one row per design point.
pub fn write_design(design: &DesignMatrix, names: &[String]) -> String {
    let mut out = String::new();
    let header: Vec<String> = if names.len() == design.dims() {
        names.to_vec()
    } else {
        (1..=design.dims()).map(|j| format!("x{j}")).collect()
    };
    out.push_str(&header.join(","));
    out.push('\n');
    for row in design.rows() {
        out.push_str(&join(row.into_iter().map(fmt_num)));
        out.push('\n');
    }
    out
}

/// Reads a design with a header row. A header-only file yields zero points.
pub fn read_design(text: &str) -> Result<(Vec<String>, DesignMatrix)> {
    let recs = records(text);
    let Some(((_, header), body)) = recs.split_first() else {
        return Err(parse_err(1, "empty design file (a header row is required)"));
    };
    let names: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    let d = names.len();
    let rows = body
        .iter()
        .map(|(line, cells)| parse_row(cells, *line, d))
        .collect::<Result<Vec<_>>>()?;
    let points = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    Ok((
        names,
        DesignMatrix {
            points,
            normalized: false,
        },
    ))
}

pub fn write_box(b: &InputBox) -> String {
    let mut out = String::from("name,min,max\n");
    for j in 0..b.dims() {
        out.push_str(&format!("{},{},{}\n", b.names[j], fmt_num(b.lower[j]), fmt_num(b.upper[j])));
    }
    out
}

/// `name,min,max` rows; a header row with those labels is optional.
pub fn read_box(text: &str) -> Result<InputBox> {
    let mut names = Vec::new();
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for (idx, (line, cells)) in records(text).into_iter().enumerate() {
        if idx == 0 && cells.len() == 3 && cells[0].eq_ignore_ascii_case("name") {
            continue;
        }
        if cells.len() != 3 {
            return Err(parse_err(line, format!("expected `name,min,max`, found {} fields", cells.len())));
        }
        if cells[0].is_empty() {
            return Err(parse_err(line, "empty parameter name"));
        }
        let (lo, hi) = (parse_num(cells[1], line)?, parse_num(cells[2], line)?);
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(parse_err(line, format!("min {lo} must be below max {hi}")));
        }
        names.push(cells[0].to_string());
        lower.push(lo);
        upper.push(hi);
    }
    if names.is_empty() {
        return Err(parse_err(1, "box file has no parameter rows"));
    }
    InputBox::with_names(names, lower, upper)
}

fn curves_header(t: &[f64]) -> String {
    join(t.iter().map(|v| format!("t={}", fmt_num(*v))))
}

/// Rows are curves, columns time steps, header `t=<value>` per column.
pub fn write_curves(curves: &CurveSet) -> String {
    let mut out = curves_header(&curves.t_grid());
    out.push('\n');
    for row in curves.rows() {
        out.push_str(&join(row.into_iter().map(fmt_num)));
        out.push('\n');
    }
    out
}

/// Time grid implied by equispaced sample times: `(start, period)`.
pub fn grid_from_times(times: &[f64]) -> Result<(f64, f64)> {
    if times.len() < 2 {
        return Err(Error::invalid("need at least two sample times"));
    }
    let step = times[1] - times[0];
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::invalid("sample times must increase"));
    }
    for (m, t) in times.iter().enumerate() {
        let expect = times[0] + m as f64 * step;
        if (t - expect).abs() > 1e-6 * step.max(expect.abs() * 1e-3) {
            return Err(Error::invalid(format!("sample times are not equispaced at step {}", m + 1)));
        }
    }
    Ok((times[0], step * times.len() as f64))
}

/// Reads a curves file. Sample times come from `t=<value>` headers unless
/// given explicitly; `period` alone places the grid at `0, period/J, ...`.
pub fn read_curves(text: &str, times: Option<&[f64]>, period: Option<f64>) -> Result<CurveSet> {
    let recs = records(text);
    let Some(((hline, header), body)) = recs.split_first() else {
        return Err(parse_err(1, "empty curves file (a header row is required)"));
    };
    let j = header.len();
    let header_times: Option<Vec<f64>> = header
        .iter()
        .map(|h| h.strip_prefix("t=").and_then(|v| v.parse::<f64>().ok()))
        .collect();
    let rows = body
        .iter()
        .map(|(line, cells)| parse_row(cells, *line, j))
        .collect::<Result<Vec<_>>>()?;
    let (start, period) = match (times, period) {
        (Some(t), _) => {
            if t.len() != j {
                return Err(Error::invalid(format!("{} sample times for {j} columns", t.len())));
            }
            grid_from_times(t)?
        }
        (None, Some(p)) => (0.0, p),
        (None, None) => match header_times {
            Some(t) => grid_from_times(&t).map_err(|e| parse_err(*hline, e.to_string()))?,
            None => {
                return Err(parse_err(
                    *hline,
                    "header is not `t=<value>` columns; supply sample times or a period",
                ))
            }
        },
    };
    let values = DMatrix::from_fn(rows.len(), j, |i, m| rows[i][m]);
    CurveSet::new(values, start, period)
}

/// One value per non-blank line; an optional non-numeric header is skipped.
pub fn read_column(text: &str) -> Result<Vec<f64>> {
    let recs = records(text);
    let mut out = Vec::with_capacity(recs.len());
    for (idx, (line, cells)) in recs.iter().enumerate() {
        if cells.len() != 1 {
            return Err(parse_err(*line, "expected one value per line"));
        }
        match cells[0].parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if idx == 0 => continue,
            Err(_) => return Err(parse_err(*line, format!("`{}` is not a number", cells[0]))),
        }
    }
    Ok(out)
}

/// `curve,alpha,theta,v` with 1-based curve index.
pub fn write_params(p: &TransformParams) -> String {
    let mut out = String::from("curve,alpha,theta,v\n");
    for k in 0..p.n() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            k + 1,
            fmt_num(p.alpha[k]),
            fmt_num(p.theta[k]),
            fmt_num(p.v[k])
        ));
    }
    out
}

pub fn read_params(text: &str) -> Result<TransformParams> {
    let recs = records(text);
    let mut p = TransformParams {
        alpha: vec![],
        theta: vec![],
        v: vec![],
    };
    for (line, cells) in recs.iter().skip(1) {
        let row = parse_row(cells, *line, 4)?;
        if row[0] as usize != p.n() + 1 {
            return Err(parse_err(*line, "curve indices must run 1, 2, 3, ..."));
        }
        p.alpha.push(row[1]);
        p.theta.push(row[2]);
        p.v.push(row[3]);
    }
    Ok(p)
}

/// `t,f` rows.
pub fn write_pattern(t: &[f64], values: &[f64]) -> String {
    let mut out = String::from("t,f\n");
    for (a, b) in t.iter().zip(values) {
        out.push_str(&format!("{},{}\n", fmt_num(*a), fmt_num(*b)));
    }
    out
}

pub fn read_pattern(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut t = Vec::new();
    let mut f = Vec::new();
    for (line, cells) in records(text).iter().skip(1) {
        let row = parse_row(cells, *line, 2)?;
        t.push(row[0]);
        f.push(row[1]);
    }
    Ok((t, f))
}

/// `step,t,rmse,q2,flag` with 1-based steps; `flag` is 1 at degenerate steps.
pub fn write_report(r: &ValidationReport) -> String {
    let mut out = String::from("step,t,rmse,q2,flag\n");
    for m in 0..r.t.len() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m + 1,
            fmt_num(r.t[m]),
            fmt_num(r.per_step_rmse[m]),
            fmt_num(r.per_step_q2[m]),
            u8::from(r.flags[m])
        ));
    }
    out
}

/// `true,predicted,method,step` with 1-based steps.
pub fn write_crossplot(points: &[CrossplotPoint]) -> String {
    let mut out = String::from("true,predicted,method,step\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_num(p.truth),
            fmt_num(p.predicted),
            p.method,
            p.step + 1
        ));
    }
    out
}

/// Predicted curves with a trailing `out_of_box` column (0/1).
pub fn write_predictions(t: &[f64], preds: &[CurvePrediction]) -> String {
    let mut out = curves_header(t);
    out.push_str(",out_of_box\n");
    for p in preds {
        out.push_str(&join(p.values.iter().map(|v| fmt_num(*v))));
        out.push_str(&format!(",{}\n", u8::from(p.out_of_box)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_row_format() {
        let text = write_params(&TransformParams::identity(2));
        assert_eq!(text, "curve,alpha,theta,v\n1,1.0,0.0,0.0\n2,1.0,0.0,0.0\n");
    }

    #[test]
    fn table1_box() {
        let b = read_box("PORO,0.15,0.35\nKSAND,100,1000\nKRSAND,2,5\n").unwrap();
        assert_eq!(b.names, vec!["PORO", "KSAND", "KRSAND"]);
        assert_eq!(b.upper, vec![0.35, 1000.0, 5.0]);
        assert_eq!(read_box(&write_box(&b)).unwrap(), b);
    }

    #[test]
    fn box_errors_carry_line_numbers() {
        for (text, line) in [
            ("name,min,max\nA,0,1\nB,2\n", 3),
            ("A,0,1\n\nB,x,3\n", 3),
            ("A,5,1\n", 1),
        ] {
            match read_box(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(read_box("").is_err());
    }

    #[test]
    fn header_only_design_is_empty() {
        let (names, d) = read_design("a,b\n").unwrap();
        assert_eq!(names.len(), 2);
        assert_eq!((d.n(), d.dims()), (0, 2));
    }

    #[test]
    fn ragged_design_rejected() {
        assert!(matches!(read_design("a,b\n1,2\n3\n"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn curves_need_a_grid() {
        assert!(read_curves("c1,c2,c3\n1,2,3\n", None, None).is_err());
        let c = read_curves("c1,c2,c3\n1,2,3\n", None, Some(6.0)).unwrap();
        assert_eq!(c.t_grid(), vec![0.0, 2.0, 4.0]);
        let c = read_curves("a,b,c\n1,2,3\n", Some(&[10.0, 11.0, 12.0]), None).unwrap();
        assert_eq!((c.start, c.period), (10.0, 3.0));
    }

    #[test]
    fn column_with_header() {
        assert_eq!(read_column("t\n0\n0.5\n1\n").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(read_column("0\nx\n").is_err());
    }

    proptest! {
        #[test]
        fn curves_round_trip(rows in proptest::collection::vec(proptest::collection::vec(-1e6f64..1e6, 5), 1..6), start in -10.0f64..10.0, step in 0.01f64..3.0) {
            let c = CurveSet::from_rows(&rows, start, 5.0 * step).unwrap();
            let back = read_curves(&write_curves(&c), None, None).unwrap();
            prop_assert_eq!(&back.values, &c.values);
            prop_assert!((back.start - c.start).abs() <= 1e-12 * c.start.abs().max(1.0));
            prop_assert!((back.period - c.period).abs() <= 1e-12 * c.period.abs().max(1.0));
        }

        #[test]
        fn params_and_design_round_trip(vals in proptest::collection::vec(-1e3f64..1e3, 12)) {
            let p = TransformParams {
                alpha: std::iter::once(1.0).chain(vals[0..3].iter().map(|v| v.abs() + 0.1)).collect(),
                theta: std::iter::once(0.0).chain(vals[3..6].iter().copied()).collect(),
                v: std::iter::once(0.0).chain(vals[6..9].iter().copied()).collect(),
            };
            prop_assert_eq!(read_params(&write_params(&p)).unwrap(), p);
            let d = DesignMatrix::from_rows(&[vals[0..3].to_vec(), vals[9..12].to_vec()], false).unwrap();
            prop_assert_eq!(read_design(&write_design(&d, &[])).unwrap().1, d);
        }
    }
}
