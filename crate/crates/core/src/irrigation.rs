//! Water-balance irrigation: requirement, run-time planning, simulated valve
//! actuation and water-saving accounting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::format_time;
use crate::ingest::Timestamp;
use crate::rainfall::DailyRainfall;

pub const LITERS_PER_GALLON: f64 = 3.785411784;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtRecord {
    pub date: NaiveDate,
    pub et_loss_mm: f64,
    pub station_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EtSource {
    File(PathBuf),
    Http(String),
}

impl EtSource {
    /// `http://` and `https://` strings are endpoints, anything else a path.
    pub fn parse(s: &str) -> EtSource {
        if s.starts_with("http://") || s.starts_with("https://") {
            EtSource::Http(s.to_string())
        } else {
            EtSource::File(PathBuf::from(s))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtSeries {
    pub records: Vec<EtRecord>,
    /// Dates inside the requested range with no record.
    pub missing: Vec<NaiveDate>,
}

impl EtSeries {
    pub fn get(&self, date: NaiveDate) -> Option<&EtRecord> {
        self.records
            .binary_search_by_key(&date, |r| r.date)
            .ok()
            .map(|i| &self.records[i])
    }
}

pub fn parse_et(json: &str) -> Result<Vec<EtRecord>> {
    let mut records: Vec<EtRecord> = serde_json::from_str(json).map_err(|e| Error::json("ET payload", e))?;
    for r in &records {
        if !r.et_loss_mm.is_finite() || r.et_loss_mm < 0.0 {
            return Err(Error::InvalidEt(format!(
                "{} has et_loss_mm = {}",
                r.date, r.et_loss_mm
            )));
        }
    }
    records.sort_by_key(|r| r.date);
    if let Some(w) = records.windows(2).find(|w| w[0].date == w[1].date) {
        return Err(Error::InvalidEt(format!("duplicate date {}", w[0].date)));
    }
    Ok(records)
}

/// Reads ET records, keeping those inside the inclusive `range` when given.
pub fn fetch_et(source: &EtSource, range: Option<(NaiveDate, NaiveDate)>) -> Result<EtSeries> {
    let body = match source {
        EtSource::File(path) => std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::EtUnreachable(path.display().to_string()),
            _ => Error::io(path, e),
        })?,
        EtSource::Http(url) => ureq::get(url)
            .call()
            .and_then(|mut resp| resp.body_mut().read_to_string())
            .map_err(|e| Error::EtUnreachable(format!("{url}: {e}")))?,
    };
    let mut records = parse_et(&body)?;
    let mut missing = Vec::new();
    if let Some((from, to)) = range {
        if from > to {
            return Err(Error::InvalidConfig(format!("ET range {from}..{to} is reversed")));
        }
        records.retain(|r| (from..=to).contains(&r.date));
        let have: BTreeSet<NaiveDate> = records.iter().map(|r| r.date).collect();
        missing = from
            .iter_days()
            .take_while(|d| *d <= to)
            .filter(|d| !have.contains(d))
            .collect();
        if !missing.is_empty() {
            log::warn!(
                "ET source has no record for {} date(s), first {}",
                missing.len(),
                missing[0]
            );
        }
    }
    Ok(EtSeries { records, missing })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantType {
    Turf,
    Shrubs,
    Trees,
    Flowers,
    Vegetables,
    Groundcover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoilType {
    Sand,
    Loam,
    Clay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropCoefficient {
    pub plant: PlantType,
    pub soil: SoilType,
    pub coefficient: f64,
}

/// Per-(plant, soil) multipliers on ET loss. Pairs not listed use 1.0; the
/// shipped table is empty and meant to be filled from local guidance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CropTable(pub Vec<CropCoefficient>);

impl CropTable {
    pub fn coefficient(&self, plant: PlantType, soil: SoilType) -> f64 {
        self.0
            .iter()
            .find(|c| c.plant == plant && c.soil == soil)
            .map_or(1.0, |c| c.coefficient)
    }

    pub fn validate(&self) -> Result<()> {
        match self
            .0
            .iter()
            .find(|c| !c.coefficient.is_finite() || c.coefficient < 0.0)
        {
            Some(c) => Err(Error::InvalidConfig(format!(
                "crop coefficient {} for {:?}/{:?}",
                c.coefficient, c.plant, c.soil
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneConfig {
    pub zone_id: String,
    pub plant_type: PlantType,
    pub soil_type: SoilType,
    /// Sprinkler output, mm/hour.
    pub precipitation_rate: f64,
    pub max_runtime_min: f64,
    /// Irrigated area, used only for water accounting.
    #[serde(default)]
    pub area_m2: f64,
}

impl ZoneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.precipitation_rate > 0.0) || !self.precipitation_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "zone {}: precipitation_rate must be positive",
                self.zone_id
            )));
        }
        if !(self.max_runtime_min > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "zone {}: max_runtime_min must be positive",
                self.zone_id
            )));
        }
        if !(self.area_m2 >= 0.0) {
            return Err(Error::InvalidConfig(format!("zone {}: negative area", self.zone_id)));
        }
        Ok(())
    }
}

/// Zone file layout: `{"zones": [...], "crop_coefficients": [...], ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrrigationConfig {
    pub zones: Vec<ZoneConfig>,
    #[serde(default)]
    pub crop_coefficients: CropTable,
    /// Credit surplus rain against later days (capped at one day's ET).
    #[serde(default)]
    pub carryover: bool,
    /// Time of day (UTC) at which each daily cycle starts.
    #[serde(default = "default_start")]
    pub cycle_start: NaiveTime,
}

fn default_start() -> NaiveTime {
    NaiveTime::from_hms_opt(5, 0, 0).expect("valid time")
}

impl IrrigationConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: IrrigationConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.zones.is_empty() {
            return Err(Error::InvalidConfig("no irrigation zones".into()));
        }
        let mut ids = BTreeSet::new();
        for z in &self.zones {
            z.validate()?;
            if !ids.insert(&z.zone_id) {
                return Err(Error::InvalidConfig(format!("duplicate zone {}", z.zone_id)));
            }
        }
        self.crop_coefficients.validate()
    }
}

/// `max(0, kc * ET - rain)`.
pub fn irrigation_requirement(et: &EtRecord, rain: &DailyRainfall, zone: &ZoneConfig, table: &CropTable) -> f64 {
    let kc = table.coefficient(zone.plant_type, zone.soil_type);
    (kc * et.et_loss_mm - rain.total_mm).max(0.0)
}

/// Soil-reservoir credit for the optional carryover mode.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WaterBalance {
    pub credit_mm: f64,
}

impl WaterBalance {
    /// Requirement for one day given crop-scaled ET; surplus rain is banked
    /// up to that day's ET and drawn down on dry days.
    pub fn step(&mut self, scaled_et_mm: f64, rain_mm: f64) -> f64 {
        let demand = scaled_et_mm - rain_mm;
        if demand <= 0.0 {
            self.credit_mm = (self.credit_mm - demand).min(scaled_et_mm);
            0.0
        } else {
            let used = self.credit_mm.min(demand);
            self.credit_mm -= used;
            demand - used
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanStatus {
    Planned,
    Executed,
    Skipped,
}

impl PlanStatus {
    fn as_str(self) -> &'static str {
        match self {
            PlanStatus::Planned => "planned",
            PlanStatus::Executed => "executed",
            PlanStatus::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrrigationPlan {
    pub zone_id: String,
    pub date: NaiveDate,
    /// Water asked of this cycle, including any deferred from before.
    pub ir_mm: f64,
    pub runtime_min: f64,
    /// Run-time beyond the cap, pushed to the next cycle.
    pub deferred_min: f64,
    pub status: PlanStatus,
    pub precipitation_rate: f64,
}

impl IrrigationPlan {
    /// Depth the valve delivers if it runs the full planned time.
    pub fn planned_mm(&self) -> f64 {
        self.runtime_min * self.precipitation_rate / 60.0
    }

    pub fn deferred_mm(&self) -> f64 {
        self.deferred_min * self.precipitation_rate / 60.0
    }
}

/// Run-time for `ir_mm` on `zone`, capped at `max_runtime_min`.
pub fn schedule(ir_mm: f64, zone: &ZoneConfig, date: NaiveDate) -> IrrigationPlan {
    let ir_mm = ir_mm.max(0.0);
    let full = 60.0 * ir_mm / zone.precipitation_rate;
    let runtime_min = full.min(zone.max_runtime_min);
    IrrigationPlan {
        zone_id: zone.zone_id.clone(),
        date,
        ir_mm,
        runtime_min,
        deferred_min: full - runtime_min,
        status: if runtime_min > 0.0 {
            PlanStatus::Planned
        } else {
            PlanStatus::Skipped
        },
        precipitation_rate: zone.precipitation_rate,
    }
}

/// Water requirement of one zone on one day, before runtime capping.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyRequirement {
    pub zone_id: String,
    pub date: NaiveDate,
    pub ir_mm: f64,
}

/// Requirements for every zone over the dates present in `et`, zone by zone
/// in date order. Days without a rainfall entry count as dry.
pub fn daily_requirements(et: &EtSeries, rain: &[DailyRainfall], cfg: &IrrigationConfig) -> Vec<DailyRequirement> {
    let rain: HashMap<NaiveDate, f64> = rain.iter().map(|d| (d.date, d.total_mm)).collect();
    let mut out = Vec::new();
    for zone in &cfg.zones {
        let kc = cfg.crop_coefficients.coefficient(zone.plant_type, zone.soil_type);
        let mut balance = WaterBalance::default();
        for rec in &et.records {
            let r = rain.get(&rec.date).copied().unwrap_or(0.0);
            let ir_mm = if cfg.carryover {
                balance.step(kc * rec.et_loss_mm, r)
            } else {
                (kc * rec.et_loss_mm - r).max(0.0)
            };
            out.push(DailyRequirement {
                zone_id: zone.zone_id.clone(),
                date: rec.date,
                ir_mm,
            });
        }
    }
    out
}

/// Daily plans for every zone; capped remainders roll into the next day.
pub fn plan_days(et: &EtSeries, rain: &[DailyRainfall], cfg: &IrrigationConfig) -> Vec<IrrigationPlan> {
    let requirements = daily_requirements(et, rain, cfg);
    let mut plans = Vec::new();
    for zone in &cfg.zones {
        let mut carried_mm = 0.0;
        for req in requirements.iter().filter(|r| r.zone_id == zone.zone_id) {
            let plan = schedule(req.ir_mm + carried_mm, zone, req.date);
            carried_mm = plan.deferred_mm();
            plans.push(plan);
        }
    }
    plans
}

pub fn write_plans<W: std::io::Write>(out: W, plans: &[IrrigationPlan]) -> Result<()> {
    let ctx = "plan csv";
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["zone_id", "date", "ir_mm", "runtime_min", "deferred_min", "status"])
        .map_err(|e| Error::csv(ctx, e))?;
    for p in plans {
        w.write_record([
            p.zone_id.clone(),
            p.date.to_string(),
            p.ir_mm.to_string(),
            p.runtime_min.to_string(),
            p.deferred_min.to_string(),
            p.status.as_str().to_string(),
        ])
        .map_err(|e| Error::csv(ctx, e))?;
    }
    w.flush().map_err(|e| Error::io(ctx, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValveAction {
    Open,
    Close,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValveEvent {
    pub t: Timestamp,
    pub zone_id: String,
    pub action: ValveAction,
    /// On close: water delivered by the run.
    pub delivered_mm: f64,
    /// On close: planned water not delivered because of a stop.
    pub deficit_mm: f64,
}

/// Manual stop for a zone at an absolute time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopOverride {
    pub zone_id: String,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActuationLog {
    pub events: Vec<ValveEvent>,
    pub plans: Vec<IrrigationPlan>,
}

/// Simulates the valves. Each plan asks to start at `cycle_start` on its
/// date; runs on one zone are serialized, so a plan that would overlap a
/// previous run waits for it to close. A stop override inside a run closes
/// the valve early and pro-rates the delivered water.
pub fn actuate(plans: &[IrrigationPlan], cycle_start: NaiveTime, overrides: &[StopOverride]) -> ActuationLog {
    let mut order: Vec<usize> = (0..plans.len()).collect();
    order.sort_by(|&a, &b| (plans[a].date, &plans[a].zone_id).cmp(&(plans[b].date, &plans[b].zone_id)));
    let mut busy_until: BTreeMap<&str, Timestamp> = BTreeMap::new();
    let mut events = Vec::new();
    let mut out = plans.to_vec();
    for i in order {
        let plan = &plans[i];
        if plan.status == PlanStatus::Skipped || plan.runtime_min <= 0.0 {
            out[i].status = PlanStatus::Skipped;
            continue;
        }
        let requested = plan.date.and_time(cycle_start).and_utc();
        let open = busy_until
            .get(plan.zone_id.as_str())
            .map_or(requested, |&b| b.max(requested));
        let full = Duration::nanoseconds((plan.runtime_min * 60e9).round() as i64);
        let scheduled_close = open + full;
        let stop = overrides
            .iter()
            .filter(|o| o.zone_id == plan.zone_id && o.at >= open && o.at < scheduled_close)
            .map(|o| o.at)
            .min();
        let close = stop.unwrap_or(scheduled_close);
        let planned = plan.planned_mm();
        let delivered = match stop {
            Some(at) => {
                let ran = (at - open).num_nanoseconds().unwrap_or(0) as f64 / 60e9;
                planned * ran / plan.runtime_min
            }
            None => planned,
        };
        let deficit = planned - delivered;
        if deficit > 0.0 {
            log::warn!(
                "zone {} stopped early on {}: {:.3} mm not delivered",
                plan.zone_id,
                plan.date,
                deficit
            );
        }
        events.push(ValveEvent {
            t: open,
            zone_id: plan.zone_id.clone(),
            action: ValveAction::Open,
            delivered_mm: 0.0,
            deficit_mm: 0.0,
        });
        events.push(ValveEvent {
            t: close,
            zone_id: plan.zone_id.clone(),
            action: ValveAction::Close,
            delivered_mm: delivered,
            deficit_mm: deficit,
        });
        busy_until.insert(plan.zone_id.as_str(), close);
        out[i].status = PlanStatus::Executed;
    }
    events.sort_by(|a, b| {
        (a.t, a.action == ValveAction::Open, &a.zone_id).cmp(&(b.t, b.action == ValveAction::Open, &b.zone_id))
    });
    ActuationLog { events, plans: out }
}

const HISTORY_HEADER: [&str; 5] = ["t_utc", "zone_id", "action", "delivered_mm", "deficit_mm"];

/// Appends events to a history CSV, writing the header when the file is new.
/// Each event is flushed as one complete line.
pub fn append_history(path: impl AsRef<Path>, events: &[ValveEvent]) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(HISTORY_HEADER).map_err(|e| Error::csv(&ctx, e))?;
    }
    for e in events {
        let action = match e.action {
            ValveAction::Open => "open",
            ValveAction::Close => "close",
        };
        w.write_record([
            format_time(e.t),
            e.zone_id.clone(),
            action.to_string(),
            e.delivered_mm.to_string(),
            e.deficit_mm.to_string(),
        ])
        .map_err(|e| Error::csv(&ctx, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaterSaving {
    pub liters: f64,
    pub gallons: f64,
}

/// `sum |a - b|` over dates, times the area (1 mm over 1 m² is 1 L). Both
/// series must cover the same dates.
pub fn water_saving(ir_a: &[(NaiveDate, f64)], ir_b: &[(NaiveDate, f64)], area_m2: f64) -> Result<WaterSaving> {
    if !(area_m2 >= 0.0) {
        return Err(Error::InvalidConfig(format!("area {area_m2} m²")));
    }
    let a: BTreeMap<NaiveDate, f64> = ir_a.iter().copied().collect();
    let b: BTreeMap<NaiveDate, f64> = ir_b.iter().copied().collect();
    if a.len() != ir_a.len() || b.len() != ir_b.len() || !a.keys().eq(b.keys()) {
        return Err(Error::InvalidMetricInput(
            "irrigation series must cover the same unique dates".into(),
        ));
    }
    let mm: f64 = a.iter().map(|(d, x)| (x - b[d]).abs()).sum();
    let liters = mm * area_m2;
    Ok(WaterSaving {
        liters,
        gallons: liters / LITERS_PER_GALLON,
    })
}
