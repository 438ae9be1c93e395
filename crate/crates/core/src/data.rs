//! Portfolios: feature blocks, sensitive attributes and targets.
//!
//! A [`Portfolio`] keeps the policy, geographic and car feature blocks apart
//! from the sensitive columns, so no model can read `S` by accident. Data
//! comes from the synthetic generators or from CSV files described by a
//! [`SchemaConfig`] and encoded by a train-fitted [`TableEncoder`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Task;
use crate::numkit::{Matrix, Rng};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockNames {
    pub policy: Vec<String>,
    pub geo: Vec<String>,
    pub car: Vec<String>,
    pub sensitive: Vec<String>,
    pub ignored: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub task: Task,
    pub x_p: Matrix,
    pub x_g: Matrix,
    pub x_c: Matrix,
    pub s: Matrix,
    pub y: Vec<f64>,
    pub exposure: Option<Vec<f64>>,
    /// Columns carried along but never used as features.
    pub ignored: Matrix,
    pub names: BlockNames,
    /// Columns of `x_g` used as coordinates for neighbor smoothing.
    pub geo_coords: Vec<usize>,
}

impl Portfolio {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    /// Checks row counts, target support and that no sensitive column
    /// name appears inside a feature block.
    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        for (name, m) in [("x_p", &self.x_p), ("x_g", &self.x_g), ("x_c", &self.x_c), ("s", &self.s), ("ignored", &self.ignored)] {
            if m.rows() != n {
                return Err(Error::dims(name_static(name), n, m.rows()));
            }
        }
        if let Some(e) = &self.exposure {
            if e.len() != n {
                return Err(Error::dims("exposure", n, e.len()));
            }
            if e.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::invalid("exposure must be positive"));
            }
        }
        if self.s.cols() == 0 {
            return Err(Error::invalid("a portfolio needs at least one sensitive column"));
        }
        let blocks = [&self.names.policy, &self.names.geo, &self.names.car];
        for s in &self.names.sensitive {
            if blocks.iter().any(|b| b.contains(s)) {
                return Err(Error::invalid(format!("sensitive column `{s}` appears in a feature block")));
            }
        }
        if let Some(&c) = self.geo_coords.iter().find(|&&c| c >= self.x_g.cols()) {
            return Err(Error::invalid(format!("geo coordinate column {c} is outside the geographic block")));
        }
        self.task.check_targets(&self.y)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Portfolio {
        Portfolio {
            task: self.task,
            x_p: self.x_p.select_rows(idx),
            x_g: self.x_g.select_rows(idx),
            x_c: self.x_c.select_rows(idx),
            s: self.s.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            exposure: self.exposure.as_ref().map(|e| idx.iter().map(|&i| e[i]).collect()),
            ignored: self.ignored.select_rows(idx),
            names: self.names.clone(),
            geo_coords: self.geo_coords.clone(),
        }
    }

    /// First sensitive column.
    pub fn s_primary(&self) -> Vec<f64> {
        self.s.column(0)
    }

    /// Schema describing the layout written by [`write_csv`].
    pub fn schema(&self) -> SchemaConfig {
        let mut columns = Vec::new();
        let mut push = |names: &[String], role: Role| columns.extend(names.iter().map(|n| (n.clone(), role)));
        push(&self.names.policy, Role::Policy);
        push(&self.names.geo, Role::Geo);
        push(&self.names.car, Role::Car);
        push(&self.names.sensitive, Role::Sensitive);
        push(&self.names.ignored, Role::Ignore);
        columns.push((TARGET_COLUMN.to_string(), Role::Target));
        if self.exposure.is_some() {
            columns.push((EXPOSURE_COLUMN.to_string(), Role::Exposure));
        }
        SchemaConfig {
            version: SCHEMA_VERSION,
            task: self.task,
            columns,
            categorical: Vec::new(),
            geo_coords: self.geo_coords.iter().map(|&i| self.names.geo[i].clone()).collect(),
            standardize: false,
        }
    }
}

fn name_static(name: &str) -> &'static str {
    match name {
        "x_p" => "portfolio x_p",
        "x_g" => "portfolio x_g",
        "x_c" => "portfolio x_c",
        "s" => "portfolio s",
        _ => "portfolio ignored",
    }
}

pub const TARGET_COLUMN: &str = "y";
pub const EXPOSURE_COLUMN: &str = "exposure";

/// Uniform shuffle by `seed`, then the first `round(train_frac·n)` rows train.
pub fn split(portfolio: &Portfolio, train_frac: f64, seed: u64) -> Result<(Portfolio, Portfolio)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::invalid("train_frac must lie in (0, 1)"));
    }
    let (train, test) = split_indices(portfolio.rows(), train_frac, seed);
    Ok((portfolio.select_rows(&train), portfolio.select_rows(&test)))
}

pub fn split_indices(n: usize, train_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let order = Rng::new(seed).permutation(n);
    let cut = ((train_frac * n as f64).round() as usize).min(n);
    (order[..cut].to_vec(), order[cut..].to_vec())
}

pub const SYNTHETIC_MIN_ROWS: usize = 100;
pub const PARIS_LAT: f64 = 48.8601267;
pub const PARIS_LON: f64 = 2.3482669;

struct SyntheticRow {
    s: f64,
    latent_risk: f64,
    age: f64,
    aggressiveness: f64,
    color: f64,
    speed: f64,
    lat: f64,
    lon: f64,
    salary: f64,
}

fn synthetic_row(rng: &mut Rng) -> SyntheticRow {
    let s = f64::from(rng.bernoulli(0.5));
    // (I, age) with covariance [[1, 4], [4, 20]]
    let z1 = rng.normal();
    let z2 = rng.normal();
    let latent_risk = z1;
    let age = 40.0 + 4.0 * z1 + 2.0 * z2;
    let aggressiveness = rng.normal();
    let color = f64::from(1.5 * s + aggressiveness > 1.0);
    let speed = 150.0 + 20.0 * s + 15.0 * aggressiveness + rng.normal_with(0.0, 5.0);
    let lat = rng.normal_with(PARIS_LAT, 0.07);
    let lon = rng.normal_with(PARIS_LON, 0.17);
    let mut salary = 1246.0 + 50000.0 * (0.2 * (lon - PARIS_LON).powi(2) + (lat - PARIS_LAT).powi(2));
    if s == 0.0 {
        salary = 1.0851 * salary - 185.112;
    }
    SyntheticRow {
        s,
        latent_risk,
        age,
        aggressiveness,
        color,
        speed,
        lat,
        lon,
        salary,
    }
}

fn synthetic_portfolio(task: Task, rows: &[SyntheticRow], y: Vec<f64>, exposure: Option<Vec<f64>>) -> Portfolio {
    let col = |f: fn(&SyntheticRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
    Portfolio {
        task,
        x_p: Matrix::column_vector(&col(|r| r.age)),
        x_g: Matrix::column_vector(&col(|r| r.salary)),
        x_c: Matrix::from_columns(&[col(|r| r.color), col(|r| r.speed)]).expect("equal lengths"),
        s: Matrix::column_vector(&col(|r| r.s)),
        y,
        exposure,
        ignored: Matrix::from_columns(&[col(|r| r.lat), col(|r| r.lon)]).expect("equal lengths"),
        names: BlockNames {
            policy: names(&["age"]),
            geo: names(&["salary"]),
            car: names(&["color", "speed"]),
            sensitive: names(&["gender"]),
            ignored: names(&["lat", "long"]),
        },
        geo_coords: vec![0],
    }
}

/// The binary-claim synthetic scenario.
///
/// Gender `s` drives car color and speed; a latent risk drives age and the
/// claim; aggressiveness drives color, speed and the claim. The label is
/// independent of `s`, so any dependence of predictions on `s` comes from
/// the car proxies.
pub fn generate_synthetic(n: usize, seed: u64) -> Result<Portfolio> {
    if n < SYNTHETIC_MIN_ROWS {
        return Err(Error::invalid(format!("generate_synthetic needs n ≥ {SYNTHETIC_MIN_ROWS}, got {n}")));
    }
    let mut rng = Rng::new(seed);
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let r = synthetic_row(&mut rng);
        let noise = rng.normal_with(0.0, 0.1);
        y.push(f64::from(r.aggressiveness + r.latent_risk + noise > 0.0));
        rows.push(r);
    }
    Ok(synthetic_portfolio(Task::Binary, &rows, y, None))
}

/// Claim-count variant with exposure: counts are Poisson with rate
/// `exposure·exp(−1 + s + 0.2·A + 0.2·I)`, so claim frequency differs by
/// gender and every count class carries gender-dependent car features.
pub fn generate_synthetic_frequency(n: usize, seed: u64) -> Result<Portfolio> {
    if n < SYNTHETIC_MIN_ROWS {
        return Err(Error::invalid(format!("generate_synthetic_frequency needs n ≥ {SYNTHETIC_MIN_ROWS}, got {n}")));
    }
    let mut rng = Rng::new(seed);
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut exposure = Vec::with_capacity(n);
    for _ in 0..n {
        let r = synthetic_row(&mut rng);
        let e = rng.uniform_range(0.5, 1.0);
        let rate = (-1.0 + r.s + 0.2 * r.aggressiveness + 0.2 * r.latent_risk).exp();
        y.push(rng.poisson(e * rate) as f64);
        exposure.push(e);
        rows.push(r);
    }
    Ok(synthetic_portfolio(Task::Frequency, &rows, y, Some(exposure)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Policy,
    Geo,
    Car,
    Sensitive,
    Target,
    Exposure,
    Ignore,
}

pub const SCHEMA_VERSION: u32 = 1;

/// Column-role map for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub version: u32,
    pub task: Task,
    /// `(column, role)` pairs; every CSV column must be listed.
    pub columns: Vec<(String, Role)>,
    /// Feature columns one-hot encoded instead of parsed as numbers.
    #[serde(default)]
    pub categorical: Vec<String>,
    /// Geographic columns used as neighbor-smoothing coordinates; empty means all.
    #[serde(default)]
    pub geo_coords: Vec<String>,
    /// Standardize numeric features with train statistics.
    #[serde(default)]
    pub standardize: bool,
}

impl SchemaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Format(format!("schema version {} is not supported", self.version)));
        }
        let count = |r: Role| self.columns.iter().filter(|(_, role)| *role == r).count();
        if count(Role::Target) != 1 {
            return Err(Error::invalid("the schema needs exactly one target column"));
        }
        if count(Role::Sensitive) == 0 {
            return Err(Error::invalid("the schema needs at least one sensitive column"));
        }
        if count(Role::Exposure) > 1 {
            return Err(Error::invalid("the schema allows at most one exposure column"));
        }
        let mut seen = BTreeSet::new();
        for (name, _) in &self.columns {
            if !seen.insert(name) {
                return Err(Error::invalid(format!("column `{name}` is listed twice")));
            }
        }
        for name in self.categorical.iter().chain(&self.geo_coords) {
            if !seen.contains(name) {
                return Err(Error::UnknownColumn(name.clone()));
            }
        }
        for name in &self.geo_coords {
            if self.role(name) != Some(Role::Geo) || self.categorical.contains(name) {
                return Err(Error::invalid(format!("geo coordinate `{name}` must be a numeric geo column")));
            }
        }
        Ok(())
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, r)| *r)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: SchemaConfig = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }
}

/// Unparsed CSV cells in schema-resolved column order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            rows.push(record?.iter().map(str::to_string).collect());
        }
        Ok(RawTable { header, rows })
    }

    pub fn select_rows(&self, idx: &[usize]) -> RawTable {
        RawTable {
            header: self.header.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// Parses a numeric column; empty and `NA` cells are `None`.
    fn numeric(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let c = self.column_index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let cell = row[c].trim();
                if is_missing(cell) {
                    return Ok(None);
                }
                cell.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some).ok_or_else(|| Error::Parse {
                    row: r + 2,
                    column: name.to_string(),
                    value: cell.to_string(),
                })
            })
            .collect()
    }

    /// Parses a numeric column in which every cell must be present.
    pub fn numeric_column(&self, name: &str) -> Result<Vec<f64>> {
        self.numeric(name)?
            .into_iter()
            .enumerate()
            .map(|(r, v)| {
                v.ok_or_else(|| Error::Parse {
                    row: r + 2,
                    column: name.to_string(),
                    value: String::new(),
                })
            })
            .collect()
    }
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "NA"
}

const MISSING_CATEGORY: &str = "(missing)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnEncoding {
    Numeric {
        median: f64,
        mean: f64,
        std: f64,
        missing_indicator: bool,
    },
    Categorical {
        categories: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedColumn {
    pub name: String,
    pub role: Role,
    pub encoding: ColumnEncoding,
}

/// Feature statistics fitted on one table and reused on others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEncoder {
    pub schema: SchemaConfig,
    pub columns: Vec<EncodedColumn>,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

impl TableEncoder {
    pub fn fit(table: &RawTable, schema: &SchemaConfig) -> Result<Self> {
        schema.validate()?;
        for h in &table.header {
            if schema.role(h).is_none() {
                return Err(Error::UnknownColumn(format!("{h} (present in the file but not in the schema)")));
            }
        }
        let mut columns = Vec::new();
        for (name, role) in &schema.columns {
            table.column_index(name)?;
            if !matches!(role, Role::Policy | Role::Geo | Role::Car) {
                continue;
            }
            let encoding = if schema.categorical.contains(name) {
                let c = table.column_index(name)?;
                let categories: BTreeSet<String> = table
                    .rows
                    .iter()
                    .map(|r| {
                        let cell = r[c].trim();
                        if is_missing(cell) { MISSING_CATEGORY.to_string() } else { cell.to_string() }
                    })
                    .collect();
                ColumnEncoding::Categorical {
                    categories: categories.into_iter().collect(),
                }
            } else {
                let parsed = table.numeric(name)?;
                let mut present: Vec<f64> = parsed.iter().flatten().copied().collect();
                let missing_indicator = present.len() < parsed.len();
                let med = median(&mut present);
                let filled: Vec<f64> = parsed.iter().map(|v| v.unwrap_or(med)).collect();
                let (_, mean, std) = crate::numkit::standardize(&filled);
                ColumnEncoding::Numeric {
                    median: med,
                    mean,
                    std,
                    missing_indicator,
                }
            };
            columns.push(EncodedColumn {
                name: name.clone(),
                role: *role,
                encoding,
            });
        }
        Ok(TableEncoder {
            schema: schema.clone(),
            columns,
        })
    }

    /// Encodes a table; warnings list unseen categories and missing cells
    /// in columns that had no missing values at fit time.
    pub fn encode(&self, table: &RawTable) -> Result<(Portfolio, Vec<String>)> {
        let n = table.rows.len();
        let mut warnings = Vec::new();
        let mut blocks: BTreeMap<&'static str, (Vec<Vec<f64>>, Vec<String>)> = BTreeMap::new();
        for col in &self.columns {
            let key = match col.role {
                Role::Policy => "policy",
                Role::Geo => "geo",
                _ => "car",
            };
            let entry = blocks.entry(key).or_default();
            match &col.encoding {
                ColumnEncoding::Numeric {
                    median,
                    mean,
                    std,
                    missing_indicator,
                } => {
                    let parsed = table.numeric(&col.name)?;
                    let unexpected = parsed.iter().filter(|v| v.is_none()).count();
                    if unexpected > 0 && !missing_indicator {
                        warnings.push(format!("{unexpected} missing values in `{}` filled with the median", col.name));
                    }
                    let values = parsed.iter().map(|v| {
                        let x = v.unwrap_or(*median);
                        if self.schema.standardize { (x - mean) / std } else { x }
                    });
                    entry.0.push(values.collect());
                    entry.1.push(col.name.clone());
                    if *missing_indicator {
                        entry.0.push(parsed.iter().map(|v| f64::from(v.is_none())).collect());
                        entry.1.push(format!("{}_missing", col.name));
                    }
                }
                ColumnEncoding::Categorical { categories } => {
                    let c = table.column_index(&col.name)?;
                    let cells: Vec<String> = table
                        .rows
                        .iter()
                        .map(|r| {
                            let cell = r[c].trim();
                            if is_missing(cell) { MISSING_CATEGORY.to_string() } else { cell.to_string() }
                        })
                        .collect();
                    let unseen: BTreeSet<&String> = cells.iter().filter(|v| !categories.contains(v)).collect();
                    if !unseen.is_empty() {
                        let list: Vec<&str> = unseen.iter().map(|s| s.as_str()).collect();
                        warnings.push(format!("unseen categories in `{}` encoded as all zeros: {}", col.name, list.join(", ")));
                    }
                    for cat in categories {
                        entry.0.push(cells.iter().map(|v| f64::from(v == cat)).collect());
                        entry.1.push(format!("{}={cat}", col.name));
                    }
                }
            }
        }
        let mut take = |key: &str| -> Result<(Matrix, Vec<String>)> {
            match blocks.remove(key) {
                Some((cols, names)) => Ok((Matrix::from_columns(&cols)?, names)),
                None => Ok((Matrix::zeros(n, 0), Vec::new())),
            }
        };
        let (x_p, policy) = take("policy")?;
        let (x_g, geo) = take("geo")?;
        let (x_c, car) = take("car")?;

        let by_role = |role: Role| -> Vec<String> {
            self.schema.columns.iter().filter(|(_, r)| *r == role).map(|(n, _)| n.clone()).collect()
        };
        let sensitive = by_role(Role::Sensitive);
        let s_cols = sensitive.iter().map(|name| table.numeric_column(name)).collect::<Result<Vec<_>>>()?;
        let ignored = by_role(Role::Ignore);
        let ignored_cols = ignored
            .iter()
            .map(|name| Ok(table.numeric(name)?.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect()))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let y = table.numeric_column(&by_role(Role::Target)[0])?;
        let exposure = by_role(Role::Exposure).first().map(|name| table.numeric_column(name)).transpose()?;
        let geo_coords = if self.schema.geo_coords.is_empty() {
            (0..geo.len()).collect()
        } else {
            self.schema
                .geo_coords
                .iter()
                .map(|name| geo.iter().position(|g| g == name).ok_or_else(|| Error::UnknownColumn(name.clone())))
                .collect::<Result<Vec<_>>>()?
        };
        let portfolio = Portfolio {
            task: self.schema.task,
            x_p,
            x_g,
            x_c,
            s: if s_cols.is_empty() { Matrix::zeros(n, 0) } else { Matrix::from_columns(&s_cols)? },
            y,
            exposure,
            ignored: if ignored_cols.is_empty() { Matrix::zeros(n, 0) } else { Matrix::from_columns(&ignored_cols)? },
            names: BlockNames {
                policy,
                geo,
                car,
                sensitive,
                ignored,
            },
            geo_coords,
        };
        portfolio.validate()?;
        Ok((portfolio, warnings))
    }
}

/// Reads a CSV and encodes it with statistics fitted on the same file.
pub fn load_csv(path: &Path, schema: &SchemaConfig) -> Result<(Portfolio, TableEncoder)> {
    let table = RawTable::read(path)?;
    let encoder = TableEncoder::fit(&table, schema)?;
    let (portfolio, _) = encoder.encode(&table)?;
    Ok((portfolio, encoder))
}

/// Writes the layout described by [`Portfolio::schema`]; floats use the
/// shortest representation that parses back to the same value.
pub fn write_csv<W: std::io::Write>(portfolio: &Portfolio, out: W) -> Result<()> {
    let schema = portfolio.schema();
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(schema.columns.iter().map(|(n, _)| n.as_str()))?;
    let blocks = [&portfolio.x_p, &portfolio.x_g, &portfolio.x_c, &portfolio.s, &portfolio.ignored];
    for r in 0..portfolio.rows() {
        let mut record: Vec<String> = blocks.iter().flat_map(|b| b.row(r).iter().map(|v| v.to_string())).collect();
        record.push(portfolio.y[r].to_string());
        if let Some(e) = &portfolio.exposure {
            record.push(e[r].to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
