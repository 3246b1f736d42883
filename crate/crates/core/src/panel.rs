//! Panel data model, validation, and CSV ingestion shared by all estimators.

use nalgebra::DMatrix;
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("io error reading panel: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing or non-finite cell for unit '{unit}' at time {time}")]
    MissingCell { unit: String, time: String },
    #[error("duplicate observation for unit '{unit}' at time {time}")]
    DuplicateCell { unit: String, time: String },
    #[error("unparseable value '{value}' for unit '{unit}' at time {time}")]
    BadValue {
        unit: String,
        time: String,
        value: String,
    },
    #[error("non-monotone treatment flag for unit '{unit}'")]
    NonMonotoneTreatment { unit: String },
    #[error("no treated unit")]
    NoTreatedUnit,
    #[error("unknown unit label '{0}'")]
    UnknownUnit(String),
    #[error("treated units do not share a single adoption period")]
    StaggeredAdoption,
    #[error("wide format needs an explicit treatment start period")]
    MissingTreatmentStart,
    #[error("need at least 2 control units, got {0}")]
    TooFewControls(usize),
    #[error("need at least 4 time periods, got {0}")]
    TooFewPeriods(usize),
    #[error("treatment start {start} leaves an empty regime (T = {t})")]
    BadTreatmentStart { start: usize, t: usize },
    #[error("treated unit index {0} out of range")]
    TreatedIndexOutOfRange(usize),
    #[error("covariate matrix has {got} periods, panel has {t}")]
    CovariatePeriodMismatch { got: usize, t: usize },
}

/// Binary treatment path for one treated unit: 0 through period `t0`, 1 after.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreatmentIndicator {
    d: Vec<u8>,
}

impl TreatmentIndicator {
    /// Build the indicator from the first treated period (1-based).
    pub fn from_start(treatment_start: usize, t: usize) -> Self {
        Self {
            d: (1..=t).map(|s| u8::from(s >= treatment_start)).collect(),
        }
    }

    /// Validate a raw flag series: single absorbing adoption.
    pub fn from_flags(flags: &[u8], unit: &str) -> Result<Self, PanelError> {
        if flags.windows(2).any(|w| w[0] > w[1]) {
            return Err(PanelError::NonMonotoneTreatment {
                unit: unit.to_string(),
            });
        }
        Ok(Self { d: flags.to_vec() })
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.d
    }

    /// First treated period (1-based), if the unit is ever treated.
    pub fn start(&self) -> Option<usize> {
        self.d.iter().position(|&x| x == 1).map(|i| i + 1)
    }
}

/// A balanced outcome panel with one or more treated units sharing a single
/// adoption period. Immutable after construction; indices in the public
/// interface are 1-based.
#[derive(Debug, Clone)]
pub struct PanelData {
    /// Outcomes, units in rows, time in columns.
    outcomes: DMatrix<f64>,
    unit_labels: Vec<String>,
    /// 1-based row indices of the treated units, in panel order.
    treated_unit_ids: Vec<usize>,
    /// First treated period, 1-based (T0 + 1).
    treatment_start: usize,
    /// Optional covariate series (K x T) appended as pseudo-control rows in
    /// the first stage.
    covariates: Option<DMatrix<f64>>,
}

impl PanelData {
    pub fn new(
        outcomes: DMatrix<f64>,
        unit_labels: Vec<String>,
        treated_unit_ids: Vec<usize>,
        treatment_start: usize,
    ) -> Result<Self, PanelError> {
        let (units, t) = outcomes.shape();
        if t < 4 {
            return Err(PanelError::TooFewPeriods(t));
        }
        if treated_unit_ids.is_empty() {
            return Err(PanelError::NoTreatedUnit);
        }
        let mut treated = treated_unit_ids.clone();
        treated.sort_unstable();
        treated.dedup();
        if treated.len() != treated_unit_ids.len() {
            return Err(PanelError::TreatedIndexOutOfRange(0));
        }
        for &id in &treated_unit_ids {
            if id == 0 || id > units {
                return Err(PanelError::TreatedIndexOutOfRange(id));
            }
        }
        let n_controls = units - treated_unit_ids.len();
        if n_controls < 2 {
            return Err(PanelError::TooFewControls(n_controls));
        }
        // Both regimes non-empty: 1 <= T0 < T.
        if treatment_start < 2 || treatment_start > t {
            return Err(PanelError::BadTreatmentStart {
                start: treatment_start,
                t,
            });
        }
        for i in 0..units {
            for s in 0..t {
                if !outcomes[(i, s)].is_finite() {
                    return Err(PanelError::MissingCell {
                        unit: unit_labels
                            .get(i)
                            .cloned()
                            .unwrap_or_else(|| (i + 1).to_string()),
                        time: (s + 1).to_string(),
                    });
                }
            }
        }
        Ok(Self {
            outcomes,
            unit_labels,
            treated_unit_ids,
            treatment_start,
            covariates: None,
        })
    }

    pub fn with_covariates(mut self, covariates: DMatrix<f64>) -> Result<Self, PanelError> {
        if covariates.ncols() != self.n_periods() {
            return Err(PanelError::CovariatePeriodMismatch {
                got: covariates.ncols(),
                t: self.n_periods(),
            });
        }
        self.covariates = Some(covariates);
        Ok(self)
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn treated_unit_ids(&self) -> &[usize] {
        &self.treated_unit_ids
    }

    /// First treated period, 1-based.
    pub fn treatment_start(&self) -> usize {
        self.treatment_start
    }

    /// Number of pre-treatment periods T0.
    pub fn t0(&self) -> usize {
        self.treatment_start - 1
    }

    /// Number of treated periods T1 = T - T0.
    pub fn t1(&self) -> usize {
        self.n_periods() - self.t0()
    }

    pub fn n_periods(&self) -> usize {
        self.outcomes.ncols()
    }

    /// Number of control units N.
    pub fn n_controls(&self) -> usize {
        self.outcomes.nrows() - self.treated_unit_ids.len()
    }

    pub fn covariates(&self) -> Option<&DMatrix<f64>> {
        self.covariates.as_ref()
    }

    /// Treatment indicator for the shared adoption period.
    pub fn treatment_indicator(&self) -> TreatmentIndicator {
        TreatmentIndicator::from_start(self.treatment_start, self.n_periods())
    }

    /// 1-based ids of the control units, in panel order.
    pub fn control_unit_ids(&self) -> Vec<usize> {
        (1..=self.outcomes.nrows())
            .filter(|id| !self.treated_unit_ids.contains(id))
            .collect()
    }

    /// Partition the outcome matrix into the control block (N x T) and the
    /// treated block (m x T), preserving row order within each block.
    pub fn split_control_treated(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let t = self.n_periods();
        let control_ids = self.control_unit_ids();
        let mut controls = DMatrix::zeros(control_ids.len(), t);
        for (row, &id) in control_ids.iter().enumerate() {
            controls.row_mut(row).copy_from(&self.outcomes.row(id - 1));
        }
        let mut treated = DMatrix::zeros(self.treated_unit_ids.len(), t);
        for (row, &id) in self.treated_unit_ids.iter().enumerate() {
            treated.row_mut(row).copy_from(&self.outcomes.row(id - 1));
        }
        (controls, treated)
    }

    /// Control block with covariate series appended as pseudo-control rows,
    /// the input to first-stage factor estimation.
    pub fn first_stage_block(&self) -> DMatrix<f64> {
        let (controls, _) = self.split_control_treated();
        match &self.covariates {
            None => controls,
            Some(x) => {
                let mut block = DMatrix::zeros(controls.nrows() + x.nrows(), controls.ncols());
                block
                    .rows_mut(0, controls.nrows())
                    .copy_from(&controls);
                block
                    .rows_mut(controls.nrows(), x.nrows())
                    .copy_from(x);
                block
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PanelFormat {
    WideCsv,
    LongCsv,
}

/// Column mapping for [`load_panel`]. Wide files carry no treatment flag, so
/// the treated labels and the first treated period come from here; long files
/// carry a `treated` flag column and the schema fields are optional checks.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct PanelSchema {
    /// Labels of treated units (required for wide files).
    pub treated_units: Vec<String>,
    /// First treated period, 1-based (required for wide files).
    pub treatment_start: Option<usize>,
}

/// Load and validate a panel from CSV.
pub fn load_panel(
    path: &Path,
    format: PanelFormat,
    schema: &PanelSchema,
) -> Result<PanelData, PanelError> {
    match format {
        PanelFormat::WideCsv => load_wide(path, schema),
        PanelFormat::LongCsv => load_long(path, schema),
    }
}

fn load_wide(path: &Path, schema: &PanelSchema) -> Result<PanelData, PanelError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let unit_labels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut times: Vec<String> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let time = record.get(0).unwrap_or("").to_string();
        let mut row = Vec::with_capacity(unit_labels.len());
        for (j, label) in unit_labels.iter().enumerate() {
            let raw = record.get(j + 1).unwrap_or("").trim();
            if raw.is_empty() {
                return Err(PanelError::MissingCell {
                    unit: label.clone(),
                    time: time.clone(),
                });
            }
            let value: f64 = raw.parse().map_err(|_| PanelError::BadValue {
                unit: label.clone(),
                time: time.clone(),
                value: raw.to_string(),
            })?;
            row.push(value);
        }
        times.push(time);
        rows.push(row);
    }

    let t = rows.len();
    let units = unit_labels.len();
    let outcomes = DMatrix::from_fn(units, t, |i, s| rows[s][i]);

    if schema.treated_units.is_empty() {
        return Err(PanelError::NoTreatedUnit);
    }
    let mut treated_ids = Vec::new();
    for label in &schema.treated_units {
        match unit_labels.iter().position(|l| l == label) {
            Some(idx) => treated_ids.push(idx + 1),
            None => return Err(PanelError::UnknownUnit(label.clone())),
        }
    }
    let start = schema
        .treatment_start
        .ok_or(PanelError::MissingTreatmentStart)?;
    PanelData::new(outcomes, unit_labels, treated_ids, start)
}

fn load_long(path: &Path, schema: &PanelSchema) -> Result<PanelData, PanelError> {
    #[derive(serde::Deserialize)]
    struct LongRow {
        unit: String,
        time: String,
        value: String,
        treated: u8,
    }

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut unit_order: Vec<String> = Vec::new();
    let mut cells: HashMap<(String, String), (f64, u8)> = HashMap::new();
    let mut time_keys: Vec<String> = Vec::new();

    for record in reader.deserialize() {
        let row: LongRow = record?;
        let raw = row.value.trim();
        if raw.is_empty() {
            return Err(PanelError::MissingCell {
                unit: row.unit,
                time: row.time,
            });
        }
        let value: f64 = raw.parse().map_err(|_| PanelError::BadValue {
            unit: row.unit.clone(),
            time: row.time.clone(),
            value: raw.to_string(),
        })?;
        if !unit_order.contains(&row.unit) {
            unit_order.push(row.unit.clone());
        }
        if !time_keys.contains(&row.time) {
            time_keys.push(row.time.clone());
        }
        let key = (row.unit.clone(), row.time.clone());
        if cells.insert(key, (value, row.treated)).is_some() {
            return Err(PanelError::DuplicateCell {
                unit: row.unit,
                time: row.time,
            });
        }
    }

    // Sort time labels numerically when possible, lexically otherwise.
    let mut times = time_keys.clone();
    if times.iter().all(|t| t.trim().parse::<f64>().is_ok()) {
        times.sort_by(|a, b| {
            a.trim()
                .parse::<f64>()
                .unwrap()
                .partial_cmp(&b.trim().parse::<f64>().unwrap())
                .unwrap()
        });
    } else {
        times.sort();
    }

    let units = unit_order.len();
    let t = times.len();
    let mut outcomes = DMatrix::zeros(units, t);
    let mut treated_ids = Vec::new();
    let mut start: Option<usize> = None;

    for (i, unit) in unit_order.iter().enumerate() {
        let mut flags = Vec::with_capacity(t);
        for (s, time) in times.iter().enumerate() {
            match cells.get(&(unit.clone(), time.clone())) {
                Some(&(value, flag)) => {
                    outcomes[(i, s)] = value;
                    flags.push(flag);
                }
                None => {
                    return Err(PanelError::MissingCell {
                        unit: unit.clone(),
                        time: time.clone(),
                    })
                }
            }
        }
        let indicator = TreatmentIndicator::from_flags(&flags, unit)?;
        if let Some(unit_start) = indicator.start() {
            treated_ids.push(i + 1);
            match start {
                None => start = Some(unit_start),
                Some(existing) if existing != unit_start => {
                    return Err(PanelError::StaggeredAdoption)
                }
                Some(_) => {}
            }
        }
    }

    if treated_ids.is_empty() {
        return Err(PanelError::NoTreatedUnit);
    }
    let start = start.expect("treated unit implies a start period");
    if let Some(expected) = schema.treatment_start {
        if expected != start {
            return Err(PanelError::BadTreatmentStart {
                start: expected,
                t,
            });
        }
    }
    PanelData::new(outcomes, unit_order, treated_ids, start)
}
