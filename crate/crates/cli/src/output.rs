//! Plain-text and image writers for exported fields.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use pcgp::physics::ScalarField;
use pcgp::trainer::Histogram;

/// One CSV line per grid row, starting at `y = 0`.
pub fn field_csv(f: &ScalarField) -> String {
    let mut out = String::new();
    for i in 0..f.ny() {
        let row: Vec<String> = (0..f.nx()).map(|j| format!("{:.16e}", f.at(i, j))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parses a grid written by [`field_csv`] (any float formatting). Returns `(nx, ny, values)`.
pub fn parse_grid_csv(text: &str) -> Result<(usize, usize, Vec<f64>), String> {
    let mut values = Vec::new();
    let mut nx = None;
    let mut ny = 0;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| format!("line {}: bad number {v:?}", n + 1)))
            .collect::<Result<_, _>>()?;
        match nx {
            None => nx = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(format!("line {}: expected {w} values, found {}", n + 1, row.len()))
            }
            _ => {}
        }
        values.extend(row);
        ny += 1;
    }
    let nx = nx.ok_or("grid file is empty")?;
    Ok((nx, ny, values))
}

/// 8-bit binary PGM, top image row = largest `y`, scaled linearly from `lo` to `hi`.
pub fn field_pgm(f: &ScalarField, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", f.nx(), f.ny()).into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    for i in (0..f.ny()).rev() {
        for j in 0..f.nx() {
            let t = ((f.at(i, j) - lo) / span).clamp(0.0, 1.0);
            out.push((t * 255.0).round() as u8);
        }
    }
    out
}

fn min_max(f: &ScalarField) -> (f64, f64) {
    f.values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
}

/// Writes `<stem>.csv`, `<stem>.pgm` and `<stem>.range.txt` into `dir`.
pub fn write_field(dir: &Path, stem: &str, f: &ScalarField) -> io::Result<()> {
    let (lo, hi) = min_max(f);
    fs::write(dir.join(format!("{stem}.csv")), field_csv(f))?;
    fs::write(dir.join(format!("{stem}.pgm")), field_pgm(f, lo, hi))?;
    fs::write(dir.join(format!("{stem}.range.txt")), format!("min={lo:.16e}\nmax={hi:.16e}\n"))
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,predicted,reference\n");
    for b in 0..h.predicted.len() {
        let _ = writeln!(
            out,
            "{:.16e},{:.16e},{},{}",
            h.edges[b],
            h.edges[b + 1],
            h.predicted[b],
            h.reference[b]
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let f = ScalarField::from_fn(4, 3, |x, y| (x * 7.3 + y).sin() / 3.0).unwrap();
        let (nx, ny, v) = parse_grid_csv(&field_csv(&f)).unwrap();
        assert_eq!((nx, ny), (4, 3));
        assert_eq!(v, f.values());
    }

    #[test]
    fn ragged_csv_is_rejected() {
        assert!(parse_grid_csv("1,2\n3\n").is_err());
        assert!(parse_grid_csv("").is_err());
        assert!(parse_grid_csv("1,x\n").is_err());
    }

    #[test]
    fn pgm_puts_top_row_first() {
        let f = ScalarField::from_fn(3, 3, |_, y| y).unwrap();
        let img = field_pgm(&f, 0.0, 1.0);
        let header = b"P5\n3 3\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(&img[header.len()..], &[255, 255, 255, 128, 128, 128, 0, 0, 0]);
    }
}
