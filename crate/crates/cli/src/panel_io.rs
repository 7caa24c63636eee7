//! Panel files: long-format CSV with a `#`-prefixed header block, or JSON.
//!
//! CSV layout:
//!
//! ```text
//! # space: wasserstein
//! # grid: 100
//! # t0: 9
//! # treated: unit-a
//! # covariates: gdp,pop
//! # covariate: unit-a,1.5,0.2
//! unit_id,period,coord_index,value
//! unit-a,1,0,-1.2
//! ```
//!
//! Periods run 1..T, coordinates 0..n-1 (row-major for matrices). Values
//! are native coordinates: quantiles, matrix entries, composition parts.

use std::collections::BTreeMap;
use std::path::Path;

use fsc_core::weights::Panel;
use fsc_core::{HilbertElement, MetricObject, SpaceAdapter};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::canonical::{fmt_f64, to_csv, to_json};
use crate::error::{AtStage, CliError, CliResult, Stage};
use crate::space::{
    build_adapter, coordinate_count, object_coords, object_from, GridSpec, SpaceSpec,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    pub space: SpaceSpec,
    pub grid: GridSpec,
    pub t0: usize,
    /// Unit ids; the treated unit comes first.
    pub unit_ids: Vec<String>,
    /// `coords[unit][period][coordinate]`, periods 0-based here.
    pub coords: Vec<Vec<Vec<f64>>>,
    pub covariate_names: Vec<String>,
    /// `covariates[unit]`, present iff `covariate_names` is non-empty.
    pub covariates: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelFormat {
    Csv,
    Json,
}

impl PanelFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => PanelFormat::Json,
            _ => PanelFormat::Csv,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::validation(Stage::Load, msg)
}

impl PanelData {
    pub fn n_periods(&self) -> usize {
        self.coords.first().map_or(0, Vec::len)
    }

    pub fn treated(&self) -> &str {
        &self.unit_ids[0]
    }

    pub fn adapter(&self) -> CliResult<SpaceAdapter> {
        build_adapter(self.space, self.grid).at(Stage::Load)
    }

    /// Builds a panel from metric objects; `objects[unit][period]`, treated first.
    pub fn from_objects(
        space: SpaceSpec,
        grid: GridSpec,
        t0: usize,
        unit_ids: Vec<String>,
        objects: &[Vec<MetricObject>],
    ) -> Self {
        Self {
            space,
            grid,
            t0,
            unit_ids,
            coords: objects
                .iter()
                .map(|u| u.iter().map(object_coords).collect())
                .collect(),
            covariate_names: Vec::new(),
            covariates: None,
        }
    }

    /// Validates every record group, embeds it and assembles the core panel.
    pub fn build(&self) -> CliResult<(Panel, SpaceAdapter)> {
        let adapter = self.adapter()?;
        let t = self.n_periods();
        if self.t0 < 1 || self.t0 >= t {
            return Err(invalid(format!(
                "t0 must satisfy 1 <= t0 < T, got t0={} with T={t}",
                self.t0
            )));
        }
        let mut outcomes: Vec<Vec<HilbertElement>> = Vec::with_capacity(self.unit_ids.len());
        for (id, unit) in self.unit_ids.iter().zip(&self.coords) {
            let row = unit
                .iter()
                .enumerate()
                .map(|(s, c)| {
                    let obj = object_from(&adapter, c.clone());
                    adapter
                        .embed(&obj)
                        .map_err(|e| invalid(format!("unit '{id}', period {}: {e}", s + 1)))
                })
                .collect::<CliResult<Vec<_>>>()?;
            outcomes.push(row);
        }
        let mut panel = Panel::new(outcomes, self.t0).at(Stage::Load)?;
        if let Some(z) = &self.covariates {
            let p = self.covariate_names.len();
            let m = DMatrix::from_fn(z.len(), p, |i, j| z[i][j]);
            panel = panel.with_covariates(m).at(Stage::Load)?;
        }
        Ok((panel, adapter))
    }
}

// ------------------------------------------------------------------ CSV

#[derive(Default)]
struct Header {
    space: Option<SpaceSpec>,
    grid: Option<GridSpec>,
    t0: Option<usize>,
    treated: Option<String>,
    covariate_names: Option<Vec<String>>,
    covariates: Vec<(usize, String, Vec<f64>)>,
}

fn parse_header_line(h: &mut Header, line: &str, lineno: usize) -> CliResult<()> {
    let body = line.trim_start_matches('#').trim();
    if body.is_empty() {
        return Ok(());
    }
    let (key, value) = body
        .split_once(':')
        .ok_or_else(|| invalid(format!("row {lineno}: header line must be '# key: value'")))?;
    let value = value.trim();
    let at = |m: String| invalid(format!("row {lineno}: {m}"));
    let once = |set: bool| {
        if set {
            Err(at(format!("duplicate header key '{key}'")))
        } else {
            Ok(())
        }
    };
    match key.trim() {
        "space" => {
            once(h.space.is_some())?;
            h.space = Some(value.parse().map_err(at)?);
        }
        "grid" => {
            once(h.grid.is_some())?;
            h.grid = Some(value.parse().map_err(at)?);
        }
        "t0" => {
            once(h.t0.is_some())?;
            h.t0 = Some(
                value
                    .parse()
                    .map_err(|_| at(format!("t0 '{value}' is not a count")))?,
            );
        }
        "treated" => {
            once(h.treated.is_some())?;
            if value.is_empty() {
                return Err(at("treated unit id is empty".into()));
            }
            h.treated = Some(value.to_string());
        }
        "covariates" => {
            once(h.covariate_names.is_some())?;
            let names: Vec<String> = value.split(',').map(|s| s.trim().to_string()).collect();
            if names.iter().any(String::is_empty) {
                return Err(at("empty covariate name".into()));
            }
            h.covariate_names = Some(names);
        }
        "covariate" => {
            let mut parts = value.split(',').map(str::trim);
            let unit = parts.next().unwrap_or_default().to_string();
            let vals = parts
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| at(format!("covariate value '{v}' is not a number")))
                })
                .collect::<CliResult<Vec<f64>>>()?;
            h.covariates.push((lineno, unit, vals));
        }
        other => return Err(at(format!("unknown header key '{other}'"))),
    }
    Ok(())
}

pub fn parse_csv(text: &str) -> CliResult<PanelData> {
    let mut header = Header::default();
    let mut offset = 0;
    for line in text.lines() {
        if line.starts_with('#') {
            offset += 1;
            parse_header_line(&mut header, line, offset)?;
        } else if line.trim().is_empty() && header.space.is_none() {
            offset += 1;
        } else {
            break;
        }
    }
    let body: String = text
        .lines()
        .skip(offset)
        .map(|l| format!("{l}\n"))
        .collect();
    let space = header
        .space
        .ok_or_else(|| invalid("header is missing 'space'"))?;
    let grid = header
        .grid
        .ok_or_else(|| invalid("header is missing 'grid'"))?;
    let t0 = header.t0.ok_or_else(|| invalid("header is missing 't0'"))?;
    let treated = header
        .treated
        .ok_or_else(|| invalid("header is missing 'treated'"))?;
    let adapter = build_adapter(space, grid).at(Stage::Load)?;
    let ncoord = coordinate_count(&adapter);

    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let cols = rdr
        .headers()
        .map_err(|e| invalid(format!("row {}: {e}", offset + 1)))?
        .clone();
    let expected = ["unit_id", "period", "coord_index", "value"];
    if cols.iter().collect::<Vec<_>>() != expected {
        return Err(invalid(format!(
            "row {}: column header must be unit_id,period,coord_index,value",
            offset + 1
        )));
    }
    let mut order: Vec<String> = Vec::new();
    // unit -> period -> coordinate -> value
    let mut data: BTreeMap<String, BTreeMap<usize, BTreeMap<usize, f64>>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| invalid(format!("malformed CSV: {e}")))?;
        let row = offset + rec.position().map_or(0, |p| p.line() as usize);
        let at = |m: String| invalid(format!("row {row}: {m}"));
        let unit = rec.get(0).unwrap_or_default().to_string();
        if unit.is_empty() {
            return Err(at("empty unit_id".into()));
        }
        let period: usize = rec
            .get(1)
            .and_then(|v| v.parse().ok())
            .filter(|p| *p >= 1)
            .ok_or_else(|| {
                at(format!(
                    "period '{}' is not a positive integer",
                    rec.get(1).unwrap_or_default()
                ))
            })?;
        let coord: usize = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(|| {
            at(format!(
                "coord_index '{}' is not a non-negative integer",
                rec.get(2).unwrap_or_default()
            ))
        })?;
        if coord >= ncoord {
            return Err(at(format!("coord_index {coord} out of range: {space} with grid {grid} has {ncoord} coordinates")));
        }
        let value: f64 = rec
            .get(3)
            .and_then(|v| v.parse().ok())
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| {
                at(format!(
                    "value '{}' is not a finite number",
                    rec.get(3).unwrap_or_default()
                ))
            })?;
        if !data.contains_key(&unit) {
            order.push(unit.clone());
        }
        let slot = data
            .entry(unit.clone())
            .or_default()
            .entry(period)
            .or_default();
        if slot.insert(coord, value).is_some() {
            return Err(at(format!(
                "duplicate record for unit '{unit}', period {period}, coordinate {coord}"
            )));
        }
    }
    if !data.contains_key(&treated) {
        return Err(invalid(format!("treated unit '{treated}' has no records")));
    }
    let t = data
        .values()
        .filter_map(|p| p.keys().next_back())
        .copied()
        .max()
        .unwrap_or(0);
    let mut unit_ids = vec![treated.clone()];
    unit_ids.extend(order.into_iter().filter(|u| *u != treated));
    let mut coords = Vec::with_capacity(unit_ids.len());
    for id in &unit_ids {
        let periods = &data[id];
        let mut rows = Vec::with_capacity(t);
        for p in 1..=t {
            let c = periods.get(&p).ok_or_else(|| {
                invalid(format!(
                    "unit '{id}' is missing period {p} (periods must run 1..{t})"
                ))
            })?;
            if let Some(j) = (0..ncoord).find(|j| !c.contains_key(j)) {
                return Err(invalid(format!(
                    "unit '{id}', period {p}: missing coordinate {j}"
                )));
            }
            rows.push(c.values().copied().collect());
        }
        coords.push(rows);
    }
    let (covariate_names, covariates) =
        attach_covariates(header.covariate_names, header.covariates, &unit_ids)?;
    Ok(PanelData {
        space,
        grid,
        t0,
        unit_ids,
        coords,
        covariate_names,
        covariates,
    })
}

fn attach_covariates(
    names: Option<Vec<String>>,
    rows: Vec<(usize, String, Vec<f64>)>,
    unit_ids: &[String],
) -> CliResult<(Vec<String>, Option<Vec<Vec<f64>>>)> {
    let Some(names) = names else {
        if let Some((line, _, _)) = rows.first() {
            return Err(invalid(format!(
                "row {line}: covariate row without a 'covariates' header"
            )));
        }
        return Ok((Vec::new(), None));
    };
    let mut table: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (line, unit, vals) in &rows {
        if vals.len() != names.len() {
            return Err(invalid(format!(
                "row {line}: unit '{unit}' has {} covariates, expected {}",
                vals.len(),
                names.len()
            )));
        }
        if !unit_ids.contains(unit) {
            return Err(invalid(format!(
                "row {line}: covariates for unknown unit '{unit}'"
            )));
        }
        if table.insert(unit, vals.clone()).is_some() {
            return Err(invalid(format!(
                "row {line}: duplicate covariates for unit '{unit}'"
            )));
        }
    }
    let z = unit_ids
        .iter()
        .map(|u| {
            table
                .get(u.as_str())
                .cloned()
                .ok_or_else(|| invalid(format!("unit '{u}' has no covariate row")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((names, Some(z)))
}

pub fn to_csv_string(data: &PanelData) -> String {
    let mut out = String::new();
    out.push_str(&format!("# space: {}\n", data.space));
    out.push_str(&format!("# grid: {}\n", data.grid));
    out.push_str(&format!("# t0: {}\n", data.t0));
    out.push_str(&format!("# treated: {}\n", data.treated()));
    if let Some(z) = &data.covariates {
        out.push_str(&format!(
            "# covariates: {}\n",
            data.covariate_names.join(",")
        ));
        for (id, row) in data.unit_ids.iter().zip(z) {
            let vals: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
            out.push_str(&format!("# covariate: {id},{}\n", vals.join(",")));
        }
    }
    let mut rows = Vec::new();
    for (id, unit) in data.unit_ids.iter().zip(&data.coords) {
        for (s, c) in unit.iter().enumerate() {
            for (j, v) in c.iter().enumerate() {
                rows.push(vec![
                    id.clone(),
                    (s + 1).to_string(),
                    j.to_string(),
                    fmt_f64(*v),
                ]);
            }
        }
    }
    out.push_str(
        &to_csv(&["unit_id", "period", "coord_index", "value"], &rows).expect("in-memory CSV"),
    );
    out
}

// ----------------------------------------------------------------- JSON

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PanelJson {
    space: String,
    grid: String,
    t0: usize,
    treated: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    covariate_names: Vec<String>,
    units: Vec<UnitJson>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UnitJson {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    covariates: Option<Vec<f64>>,
    /// Period 1 first.
    periods: Vec<Vec<f64>>,
}

pub fn parse_json(text: &str) -> CliResult<PanelData> {
    let raw: PanelJson =
        serde_json::from_str(text).map_err(|e| invalid(format!("panel JSON: {e}")))?;
    let space: SpaceSpec = raw.space.parse().map_err(invalid)?;
    let grid: GridSpec = raw.grid.parse().map_err(invalid)?;
    let adapter = build_adapter(space, grid).at(Stage::Load)?;
    let ncoord = coordinate_count(&adapter);
    let pos = raw
        .units
        .iter()
        .position(|u| u.id == raw.treated)
        .ok_or_else(|| {
            invalid(format!(
                "treated unit '{}' is not among the units",
                raw.treated
            ))
        })?;
    let t = raw.units.iter().map(|u| u.periods.len()).max().unwrap_or(0);
    let mut order: Vec<usize> = vec![pos];
    order.extend((0..raw.units.len()).filter(|&i| i != pos));
    let mut seen = std::collections::BTreeSet::new();
    let mut unit_ids = Vec::new();
    let mut coords = Vec::new();
    let mut cov_rows = Vec::new();
    for &i in &order {
        let u = &raw.units[i];
        if !seen.insert(u.id.clone()) {
            return Err(invalid(format!("duplicate unit '{}'", u.id)));
        }
        if u.periods.len() < t {
            return Err(invalid(format!(
                "unit '{}' is missing period {} (periods must run 1..{t})",
                u.id,
                u.periods.len() + 1
            )));
        }
        for (s, c) in u.periods.iter().enumerate() {
            if c.len() != ncoord {
                return Err(invalid(format!(
                    "unit '{}', period {}: expected {ncoord} coordinates, found {}",
                    u.id,
                    s + 1,
                    c.len()
                )));
            }
        }
        if let Some(z) = &u.covariates {
            cov_rows.push((0, u.id.clone(), z.clone()));
        }
        unit_ids.push(u.id.clone());
        coords.push(u.periods.clone());
    }
    let names = (!raw.covariate_names.is_empty()).then_some(raw.covariate_names);
    let (covariate_names, covariates) = attach_covariates(names, cov_rows, &unit_ids)
        .map_err(|e| invalid(e.message.replace("row 0: ", "")))?;
    Ok(PanelData {
        space,
        grid,
        t0: raw.t0,
        unit_ids,
        coords,
        covariate_names,
        covariates,
    })
}

pub fn to_json_string(data: &PanelData) -> String {
    let raw = PanelJson {
        space: data.space.to_string(),
        grid: data.grid.to_string(),
        t0: data.t0,
        treated: data.treated().to_string(),
        covariate_names: data.covariate_names.clone(),
        units: data
            .unit_ids
            .iter()
            .enumerate()
            .map(|(i, id)| UnitJson {
                id: id.clone(),
                covariates: data.covariates.as_ref().map(|z| z[i].clone()),
                periods: data.coords[i].clone(),
            })
            .collect(),
    };
    to_json(&raw).expect("panel serializes")
}

pub fn load(path: &Path, format: Option<PanelFormat>) -> CliResult<PanelData> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| invalid(format!("cannot read panel file {}: {e}", path.display())))?;
    match format.unwrap_or_else(|| PanelFormat::from_path(path)) {
        PanelFormat::Csv => parse_csv(&text),
        PanelFormat::Json => parse_json(&text),
    }
}

pub fn save(path: &Path, data: &PanelData, format: Option<PanelFormat>) -> CliResult<()> {
    let text = match format.unwrap_or_else(|| PanelFormat::from_path(path)) {
        PanelFormat::Csv => to_csv_string(data),
        PanelFormat::Json => to_json_string(data),
    };
    std::fs::write(path, text).map_err(|e| {
        CliError::validation(
            Stage::Write,
            format!("cannot write {}: {e}", path.display()),
        )
    })
}
