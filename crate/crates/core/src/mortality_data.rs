//! Historical mortality surfaces: loading, validation, the `q <-> mu`
//! mapping and closure of tables up to a terminal age.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Cell, Error, Result};

/// Default age at which closed tables force certain death.
pub const DEFAULT_TERMINAL_AGE: i32 = 120;

/// Number of trailing observed ages used to estimate the closure slope.
const CLOSURE_FIT_AGES: usize = 10;

/// Hazard rate from an annual death probability, assuming the hazard is
/// constant over each unit square of the Lexis diagram.
pub fn q_to_mu(q: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::domain(format!(
            "death probability {q} outside [0, 1)"
        )));
    }
    Ok(-(-q).ln_1p())
}

/// Annual death probability from a hazard rate.
pub fn mu_to_q(mu: f64) -> Result<f64> {
    if mu.is_nan() || mu < 0.0 {
        return Err(Error::domain(format!("hazard rate {mu} is negative")));
    }
    Ok(-(-mu).exp_m1())
}

/// Dense grid of annual death probabilities `q(age, year)`.
///
/// Rows are ages `age_min..=age_max`, columns years `year_min..=year_max`.
/// Every cell lies strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MortalitySurface {
    age_min: i32,
    year_min: i32,
    q: Array2<f64>,
}

impl MortalitySurface {
    pub fn new(age_min: i32, year_min: i32, q: Array2<f64>) -> Result<Self> {
        if q.nrows() == 0 || q.ncols() == 0 {
            return Err(Error::arg("mortality surface must have at least one cell"));
        }
        for ((i, j), &v) in q.indexed_iter() {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::RateOutOfRange {
                    cell: Cell {
                        age: age_min + i as i32,
                        year: year_min + j as i32,
                    },
                    value: v,
                });
            }
        }
        Ok(Self {
            age_min,
            year_min,
            q,
        })
    }

    pub fn age_min(&self) -> i32 {
        self.age_min
    }

    pub fn age_max(&self) -> i32 {
        self.age_min + self.q.nrows() as i32 - 1
    }

    pub fn year_min(&self) -> i32 {
        self.year_min
    }

    pub fn year_max(&self) -> i32 {
        self.year_min + self.q.ncols() as i32 - 1
    }

    pub fn n_ages(&self) -> usize {
        self.q.nrows()
    }

    pub fn n_years(&self) -> usize {
        self.q.ncols()
    }

    pub fn ages(&self) -> impl Iterator<Item = i32> {
        self.age_min..=self.age_max()
    }

    pub fn years(&self) -> impl Iterator<Item = i32> {
        self.year_min..=self.year_max()
    }

    /// Probabilities indexed `[age - age_min, year - year_min]`.
    pub fn rates(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn q(&self, age: i32, year: i32) -> Option<f64> {
        let i = usize::try_from(age - self.age_min).ok()?;
        let j = usize::try_from(year - self.year_min).ok()?;
        self.q.get((i, j)).copied()
    }

    /// Log-hazard matrix `ln mu(x, t)`.
    pub fn log_hazard(&self) -> Array2<f64> {
        self.q.mapv(|q| (-(-q).ln_1p()).ln())
    }

    /// Sub-surface over the inclusive age range.
    pub fn restrict_ages(&self, from: i32, to: i32) -> Result<Self> {
        if from > to || from < self.age_min || to > self.age_max() {
            return Err(Error::arg(format!(
                "age range {from}-{to} not within {}-{}",
                self.age_min,
                self.age_max()
            )));
        }
        let lo = (from - self.age_min) as usize;
        let hi = (to - self.age_min) as usize;
        Ok(Self {
            age_min: from,
            year_min: self.year_min,
            q: self.q.slice(ndarray::s![lo..=hi, ..]).to_owned(),
        })
    }

    /// Sub-surface over the inclusive year range.
    pub fn restrict_years(&self, from: i32, to: i32) -> Result<Self> {
        if from > to || from < self.year_min || to > self.year_max() {
            return Err(Error::arg(format!(
                "year range {from}-{to} not within {}-{}",
                self.year_min,
                self.year_max()
            )));
        }
        let lo = (from - self.year_min) as usize;
        let hi = (to - self.year_min) as usize;
        Ok(Self {
            age_min: self.age_min,
            year_min: from,
            q: self.q.slice(ndarray::s![.., lo..=hi]).to_owned(),
        })
    }

    pub fn write_csv<W: Write>(&self, out: W, format: &CsvFormat) -> std::io::Result<()> {
        write_grid_csv(out, format, self.age_min, self.year_min, &self.q)
    }
}

/// Column layout of a mortality CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvFormat {
    pub age_column: String,
    pub year_column: String,
    pub rate_column: String,
    pub delimiter: u8,
}

impl Default for CsvFormat {
    fn default() -> Self {
        Self {
            age_column: "age".into(),
            year_column: "year".into(),
            rate_column: "qx".into(),
            delimiter: b',',
        }
    }
}

fn write_grid_csv<W: Write>(
    mut out: W,
    format: &CsvFormat,
    age_min: i32,
    year_min: i32,
    q: &Array2<f64>,
) -> std::io::Result<()> {
    let d = format.delimiter as char;
    writeln!(
        out,
        "{}{d}{}{d}{}",
        format.age_column, format.year_column, format.rate_column
    )?;
    for ((i, j), v) in q.indexed_iter() {
        writeln!(
            out,
            "{}{d}{}{d}{}",
            age_min + i as i32,
            year_min + j as i32,
            v
        )?;
    }
    Ok(())
}

/// Load a dense surface from `(age, year, q)` rows.
pub fn load_mortality_csv(path: impl AsRef<Path>, format: &CsvFormat) -> Result<MortalitySurface> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_mortality_csv(file, format, path)
}

/// Same as [`load_mortality_csv`] over any reader; `origin` labels errors.
pub fn read_mortality_csv<R: Read>(
    reader: R,
    format: &CsvFormat,
    origin: impl AsRef<Path>,
) -> Result<MortalitySurface> {
    let origin = origin.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);

    let parse_err = |line: u64, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };

    let headers = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let (ia, iy, iq) = (
        column(&format.age_column)?,
        column(&format.year_column)?,
        column(&format.rate_column)?,
    );

    let mut cells: BTreeMap<(i32, i32), f64> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| {
            record
                .get(i)
                .ok_or_else(|| parse_err(line, format!("missing field {}", i + 1)))
        };
        let age: i32 = field(ia)?
            .parse()
            .map_err(|e| parse_err(line, format!("age: {e}")))?;
        let year: i32 = field(iy)?
            .parse()
            .map_err(|e| parse_err(line, format!("year: {e}")))?;
        let q: f64 = field(iq)?
            .parse()
            .map_err(|e| parse_err(line, format!("rate: {e}")))?;
        let cell = Cell { age, year };
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::RateOutOfRange { cell, value: q });
        }
        if cells.insert((age, year), q).is_some() {
            return Err(Error::DuplicateCell { cell });
        }
    }
    if cells.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }

    let age_min = cells.keys().map(|k| k.0).min().unwrap();
    let age_max = cells.keys().map(|k| k.0).max().unwrap();
    let year_min = cells.keys().map(|k| k.1).min().unwrap();
    let year_max = cells.keys().map(|k| k.1).max().unwrap();
    let n_ages = (age_max - age_min + 1) as usize;
    let n_years = (year_max - year_min + 1) as usize;

    let mut missing = Vec::new();
    let mut q = Array2::zeros((n_ages, n_years));
    for age in age_min..=age_max {
        for year in year_min..=year_max {
            match cells.get(&(age, year)) {
                Some(&v) => q[[(age - age_min) as usize, (year - year_min) as usize]] = v,
                None => missing.push(Cell { age, year }),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCells { missing });
    }
    MortalitySurface::new(age_min, year_min, q)
}

/// How ages beyond the last observed one are filled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosureMethod {
    /// Linear extrapolation of `logit q` in age, blended linearly towards
    /// `q = 1` at the terminal age.
    #[default]
    LogisticCap,
}

/// A surface extended to a terminal age at which `q = 1`.
///
/// The rate grid covers ages `age_min..=terminal_age`. Rates in a closed
/// table may be any value in `[0, 1]`; tables built from a
/// [`MortalitySurface`] keep the observed rates strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedTable {
    age_min: i32,
    year_min: i32,
    observed_age_max: i32,
    terminal_age: i32,
    closure_method: ClosureMethod,
    q: Array2<f64>,
}

/// JSON sidecar written next to a closed table's CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedTableMeta {
    pub closure_method: ClosureMethod,
    pub terminal_age: i32,
    pub observed_age_max: i32,
}

impl ClosedTable {
    /// Closed table from an explicit grid whose last row is the terminal age.
    ///
    /// Used for hand-built tables; every rate must lie in `[0, 1]` and the
    /// last row must equal 1.
    pub fn from_rates(age_min: i32, year_min: i32, q: Array2<f64>) -> Result<Self> {
        if q.nrows() == 0 || q.ncols() == 0 {
            return Err(Error::arg("closed table must have at least one cell"));
        }
        for ((i, j), &v) in q.indexed_iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::RateOutOfRange {
                    cell: Cell {
                        age: age_min + i as i32,
                        year: year_min + j as i32,
                    },
                    value: v,
                });
            }
        }
        let last = q.nrows() - 1;
        if q.row(last).iter().any(|&v| v != 1.0) {
            return Err(Error::arg("terminal age row of a closed table must be 1"));
        }
        let terminal_age = age_min + last as i32;
        Ok(Self {
            age_min,
            year_min,
            observed_age_max: terminal_age,
            terminal_age,
            closure_method: ClosureMethod::LogisticCap,
            q,
        })
    }

    pub fn age_min(&self) -> i32 {
        self.age_min
    }

    pub fn terminal_age(&self) -> i32 {
        self.terminal_age
    }

    /// Last age taken from the underlying surface.
    pub fn observed_age_max(&self) -> i32 {
        self.observed_age_max
    }

    pub fn year_min(&self) -> i32 {
        self.year_min
    }

    pub fn year_max(&self) -> i32 {
        self.year_min + self.q.ncols() as i32 - 1
    }

    pub fn closure_method(&self) -> ClosureMethod {
        self.closure_method
    }

    pub fn rates(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn q(&self, age: i32, year: i32) -> Option<f64> {
        let i = usize::try_from(age - self.age_min).ok()?;
        let j = usize::try_from(year - self.year_min).ok()?;
        self.q.get((i, j)).copied()
    }

    /// Rates met by a life aged `age` in `start_year`, following its cohort
    /// diagonal `q(age + s, start_year + s)` up to the terminal age. `None`
    /// when the diagonal leaves the table.
    pub fn diagonal(&self, age: i32, start_year: i32) -> Option<Vec<f64>> {
        if age < self.age_min || age > self.terminal_age {
            return None;
        }
        let steps = (self.terminal_age - age) as usize + 1;
        let i0 = (age - self.age_min) as usize;
        let j0 = usize::try_from(start_year - self.year_min).ok()?;
        if j0 + steps > self.q.ncols() {
            return None;
        }
        Some((0..steps).map(|s| self.q[[i0 + s, j0 + s]]).collect())
    }

    pub fn meta(&self) -> ClosedTableMeta {
        ClosedTableMeta {
            closure_method: self.closure_method,
            terminal_age: self.terminal_age,
            observed_age_max: self.observed_age_max,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W, format: &CsvFormat) -> std::io::Result<()> {
        write_grid_csv(out, format, self.age_min, self.year_min, &self.q)
    }
}

/// Extend `surface` to `terminal_age` with the default closure.
pub fn close_table(surface: &MortalitySurface, terminal_age: i32) -> Result<ClosedTable> {
    close_table_with(surface, terminal_age, ClosureMethod::default())
}

pub fn close_table_with(
    surface: &MortalitySurface,
    terminal_age: i32,
    method: ClosureMethod,
) -> Result<ClosedTable> {
    let age_max = surface.age_max();
    if terminal_age <= age_max {
        return Err(Error::arg(format!(
            "terminal age {terminal_age} must exceed last observed age {age_max}"
        )));
    }
    let n_obs = surface.n_ages();
    let n_total = (terminal_age - surface.age_min()) as usize + 1;
    let mut q = Array2::zeros((n_total, surface.n_years()));
    q.slice_mut(ndarray::s![..n_obs, ..])
        .assign(surface.rates());

    match method {
        ClosureMethod::LogisticCap => {
            let span = f64::from(terminal_age - age_max);
            for (j, column) in surface.rates().columns().into_iter().enumerate() {
                let fit_from = n_obs.saturating_sub(CLOSURE_FIT_AGES);
                let tail = column.slice(ndarray::s![fit_from..]);
                let slope = logit_slope(&tail.to_vec()).max(0.0);
                let anchor = logit(column[n_obs - 1]);
                for step in 1..=(terminal_age - age_max) {
                    let w = f64::from(step) / span;
                    let extrapolated = logistic(anchor + slope * f64::from(step));
                    q[[n_obs - 1 + step as usize, j]] = (1.0 - w) * extrapolated + w;
                }
            }
        }
    }

    Ok(ClosedTable {
        age_min: surface.age_min(),
        year_min: surface.year_min(),
        observed_age_max: age_max,
        terminal_age,
        closure_method: method,
        q,
    })
}

fn logit(q: f64) -> f64 {
    (q / (1.0 - q)).ln()
}

fn logistic(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

/// OLS slope of `logit q` against consecutive ages.
fn logit_slope(q: &[f64]) -> f64 {
    let n = q.len();
    if n < 2 {
        return 0.0;
    }
    let xbar = (n as f64 - 1.0) / 2.0;
    let ys: Vec<f64> = q.iter().copied().map(logit).collect();
    let ybar = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - xbar;
        sxy += dx * (y - ybar);
        sxx += dx * dx;
    }
    sxy / sxx
}
