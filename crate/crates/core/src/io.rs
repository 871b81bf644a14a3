//! File formats: network JSON, CSV tables and JSON reports.
//!
//! Times in every CSV are step indices `t = 0..T`; the physical step length
//! is carried separately (`dt`, seconds).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{ObservationSeries, ProximalOutcome, TransportPlan, TraceRow};
use crate::observability::ObservabilityReport;
use crate::prior::{
    FlowSeries, MarkovPrior, NetworkModel, Node, PipeSpec, DEFAULT_BALANCE_TOL,
    DEFAULT_SEGMENT_CAP_L,
};
use crate::sim::{Injection, NoiseSpec};
use crate::tensor::{NonNegMatrix, NonNegVector};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{path}: no reading for sensor {sensor} at t={t}")]
    MissingObservation {
        path: PathBuf,
        t: usize,
        sensor: String,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn schema(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Schema {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads every record of a headed CSV file, keeping the line each came from.
fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<(u64, T)>, IoError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.deserialize::<T>() {
        match rec {
            Ok(r) => out.push((0, r)),
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                let message = match e.kind() {
                    csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                    _ => e.to_string(),
                };
                return Err(IoError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message,
                });
            }
        }
    }
    // header is line 1
    for (i, r) in out.iter_mut().enumerate() {
        r.0 = i as u64 + 2;
    }
    Ok(out)
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| schema(path, e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    writeln!(w).and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Network description as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    #[serde(default = "default_cap")]
    pub segment_volume_cap: f64,
    pub nodes: Vec<Node>,
    pub pipes: Vec<PipeSpec>,
    /// State ids carrying a sensor, in sensor order.
    #[serde(default)]
    pub sensors: Vec<String>,
}

fn default_cap() -> f64 {
    DEFAULT_SEGMENT_CAP_L
}

impl NetworkFile {
    pub fn from_model(net: &NetworkModel) -> Self {
        Self {
            segment_volume_cap: net.segment_volume_cap(),
            nodes: net.nodes().to_vec(),
            pipes: net.pipes().to_vec(),
            sensors: net.sensor_ids(),
        }
    }

    pub fn into_model(self, path: &Path) -> Result<NetworkModel, IoError> {
        NetworkModel::new(self.nodes, self.pipes, self.segment_volume_cap, self.sensors)
            .map_err(|e| schema(path, e.to_string()))
    }
}

pub fn read_network(path: &Path) -> Result<NetworkModel, IoError> {
    read_json::<NetworkFile>(path)?.into_model(path)
}

pub fn write_network(path: &Path, net: &NetworkModel) -> Result<(), IoError> {
    write_json(path, &NetworkFile::from_model(net))
}

#[derive(Debug, Serialize, Deserialize)]
struct FlowRow {
    time: usize,
    pipe_id: String,
    flow_lps: f64,
}

/// Reads `time,pipe_id,flow_lps`; every pipe needs a row at every step.
pub fn read_flows(path: &Path, net: &NetworkModel, dt: f64) -> Result<FlowSeries, IoError> {
    let rows = read_records::<FlowRow>(path)?;
    if rows.is_empty() {
        return Err(schema(path, "no flow rows"));
    }
    let mut seen = BTreeMap::new();
    for (line, r) in &rows {
        if net.pipe(&r.pipe_id).is_none() {
            return Err(parse_err(path, *line, format!("unknown pipe {:?}", r.pipe_id)));
        }
        if let Some(first) = seen.insert((r.time, r.pipe_id.clone()), *line) {
            return Err(parse_err(
                path,
                *line,
                format!("duplicate of line {first} ({} at t={})", r.pipe_id, r.time),
            ));
        }
    }
    let horizon = rows.iter().map(|(_, r)| r.time).max().unwrap_or(0) + 1;
    for t in 0..horizon {
        for p in net.pipes() {
            if !seen.contains_key(&(t, p.id.clone())) {
                return Err(schema(path, format!("no flow for pipe {} at t={t}", p.id)));
            }
        }
    }
    let records: Vec<_> = rows
        .into_iter()
        .map(|(_, r)| (r.time, r.pipe_id, r.flow_lps))
        .collect();
    FlowSeries::from_records(net, dt, &records, DEFAULT_BALANCE_TOL)
        .map_err(|e| schema(path, e.to_string()))
}

pub fn write_flows(path: &Path, net: &NetworkModel, flows: &FlowSeries) -> Result<(), IoError> {
    let rows = (0..flows.horizon()).flat_map(|t| {
        net.pipes().iter().enumerate().map(move |(p, spec)| FlowRow {
            time: t,
            pipe_id: spec.id.clone(),
            flow_lps: flows.flow(t, p),
        })
    });
    write_csv(path, rows)
}

#[derive(Debug, Serialize, Deserialize)]
struct PriorRow {
    t: usize,
    i: usize,
    j: usize,
    p: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateRow {
    index: usize,
    state_id: String,
}

pub const PRIOR_FILE: &str = "prior.csv";
pub const STATES_FILE: &str = "states.csv";

/// Writes `prior.csv` (`t,i,j,p`) and `states.csv` (`index,state_id`) into `dir`.
pub fn write_prior(dir: &Path, prior: &MarkovPrior, state_ids: &[String]) -> Result<(), IoError> {
    let rows = prior.steps().iter().enumerate().flat_map(|(t, a)| {
        a.triplets().map(move |(i, j, p)| PriorRow { t, i, j, p })
    });
    write_csv(&dir.join(PRIOR_FILE), rows)?;
    write_states(&dir.join(STATES_FILE), state_ids)
}

pub fn write_states(path: &Path, state_ids: &[String]) -> Result<(), IoError> {
    write_csv(
        path,
        state_ids.iter().enumerate().map(|(index, id)| StateRow {
            index,
            state_id: id.clone(),
        }),
    )
}

pub fn read_states(path: &Path) -> Result<Vec<String>, IoError> {
    let rows = read_records::<StateRow>(path)?;
    let mut ids = Vec::with_capacity(rows.len());
    for (line, r) in rows {
        if r.index != ids.len() {
            return Err(parse_err(path, line, format!("expected index {}, got {}", ids.len(), r.index)));
        }
        if ids.contains(&r.state_id) {
            return Err(parse_err(path, line, format!("duplicate state id {:?}", r.state_id)));
        }
        ids.push(r.state_id);
    }
    if ids.is_empty() {
        return Err(schema(path, "no states"));
    }
    Ok(ids)
}

/// Reads an archive written by [`write_prior`]. The horizon is one more
/// than the largest `t`; `horizon` overrides it when steps at the end are
/// all zero.
pub fn read_prior(dir: &Path, horizon: Option<usize>) -> Result<(MarkovPrior, Vec<String>), IoError> {
    let ids = read_states(&dir.join(STATES_FILE))?;
    let path = dir.join(PRIOR_FILE);
    let rows = read_records::<PriorRow>(&path)?;
    let n = ids.len();
    let horizon = horizon.unwrap_or_else(|| rows.iter().map(|(_, r)| r.t + 1).max().unwrap_or(0));
    let mut triplets = vec![Vec::new(); horizon];
    for (line, r) in rows {
        if r.t >= horizon || r.i >= n || r.j >= n {
            return Err(parse_err(&path, line, format!("entry ({}, {}, {}) out of range", r.t, r.i, r.j)));
        }
        triplets[r.t].push((r.i, r.j, r.p));
    }
    let steps = triplets
        .into_iter()
        .map(|tr| NonNegMatrix::from_triplets(n, n, tr))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| schema(&path, e.to_string()))?;
    let prior = MarkovPrior::new(n, steps).map_err(|e| schema(&path, e.to_string()))?;
    Ok((prior, ids))
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservationRow {
    time: usize,
    sensor_id: String,
    mass_g: f64,
}

/// Reads `time,sensor_id,mass_g`. Sensors are ordered by first appearance
/// unless `sensors` fixes the order; every sensor needs a row at every
/// `t = 0..=max time` (or `0..=horizon` when given).
pub fn read_observations(
    path: &Path,
    sensors: Option<&[String]>,
    horizon: Option<usize>,
) -> Result<(Vec<String>, ObservationSeries), IoError> {
    let rows = read_records::<ObservationRow>(path)?;
    if rows.is_empty() {
        return Err(schema(path, "no observation rows"));
    }
    let mut order: Vec<String> = sensors.map(<[String]>::to_vec).unwrap_or_default();
    let mut table = BTreeMap::new();
    for (line, r) in &rows {
        if !(r.mass_g.is_finite() && r.mass_g >= 0.0) {
            return Err(parse_err(path, *line, format!("mass {} must be finite and >= 0", r.mass_g)));
        }
        if !order.contains(&r.sensor_id) {
            if sensors.is_some() {
                return Err(parse_err(path, *line, format!("unknown sensor {:?}", r.sensor_id)));
            }
            order.push(r.sensor_id.clone());
        }
        if table.insert((r.time, r.sensor_id.clone()), r.mass_g).is_some() {
            return Err(parse_err(
                path,
                *line,
                format!("second reading for {} at t={}", r.sensor_id, r.time),
            ));
        }
    }
    let last = match horizon {
        Some(h) => h,
        None => rows.iter().map(|(_, r)| r.time).max().unwrap_or(0),
    };
    if let Some((line, r)) = rows.iter().find(|(_, r)| r.time > last) {
        return Err(parse_err(path, *line, format!("t={} beyond horizon {last}", r.time)));
    }
    let mut series = Vec::with_capacity(last + 1);
    for t in 0..=last {
        let mut row = Vec::with_capacity(order.len());
        for s in &order {
            match table.get(&(t, s.clone())) {
                Some(v) => row.push(*v),
                None => {
                    return Err(IoError::MissingObservation {
                        path: path.to_path_buf(),
                        t,
                        sensor: s.clone(),
                    })
                }
            }
        }
        series.push(row);
    }
    let rho = ObservationSeries::from_rows(series).map_err(|e| schema(path, e.to_string()))?;
    Ok((order, rho))
}

pub fn write_observations(
    path: &Path,
    sensors: &[String],
    rho: &ObservationSeries,
) -> Result<(), IoError> {
    let rows = rho.iter().enumerate().flat_map(|(t, r)| {
        sensors.iter().zip(r).map(move |(s, v)| ObservationRow {
            time: t,
            sensor_id: s.clone(),
            mass_g: *v,
        })
    });
    write_csv(path, rows)
}

#[derive(Debug, Deserialize)]
struct StateValueRow {
    state_id: String,
    mass_g: f64,
}

/// Reads `state_id,mass_g` and returns the values for `ids` in order.
/// Every id needs exactly one row; other states are rejected.
pub fn read_state_values(path: &Path, ids: &[String]) -> Result<Vec<f64>, IoError> {
    let mut values: Vec<Option<f64>> = vec![None; ids.len()];
    for (line, r) in read_records::<StateValueRow>(path)? {
        let Some(slot) = ids.iter().position(|id| *id == r.state_id) else {
            return Err(parse_err(path, line, format!("unexpected state {:?}", r.state_id)));
        };
        if values[slot].replace(r.mass_g).is_some() {
            return Err(parse_err(path, line, format!("second value for {:?}", r.state_id)));
        }
    }
    values
        .into_iter()
        .zip(ids)
        .map(|(v, id)| v.ok_or_else(|| schema(path, format!("no value for state {id:?}"))))
        .collect()
}

#[derive(Debug, Serialize)]
struct MarginalRow<'a> {
    time: usize,
    state_id: &'a str,
    mass_g: f64,
}

/// `time,state_id,mass_g` for every state at every time.
pub fn write_marginals(
    path: &Path,
    marginals: &[NonNegVector],
    state_ids: &[String],
) -> Result<(), IoError> {
    let rows = marginals.iter().enumerate().flat_map(|(t, mu)| {
        state_ids.iter().zip(mu.iter()).map(move |(s, v)| MarginalRow {
            time: t,
            state_id: s,
            mass_g: *v,
        })
    });
    write_csv(path, rows)
}

#[derive(Debug, Serialize)]
struct PlanRow<'a> {
    t: usize,
    from: &'a str,
    to: &'a str,
    mass_g: f64,
}

/// Nonzero plan entries as `t,from,to,mass_g`.
pub fn write_plan(path: &Path, plan: &TransportPlan, state_ids: &[String]) -> Result<(), IoError> {
    let rows = plan.steps().iter().enumerate().flat_map(|(t, m)| {
        m.triplets().filter(|e| e.2 > 0.0).map(move |(i, j, v)| PlanRow {
            t,
            from: &state_ids[i],
            to: &state_ids[j],
            mass_g: v,
        })
    });
    write_csv(path, rows)
}

/// `iter,eta_change,primal_obj,dual_obj,residual`.
pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<(), IoError> {
    write_csv(path, trace)
}

/// Key figures of a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub total_initial_mass_g: f64,
    pub objective: f64,
    pub residual: f64,
    pub iterations: usize,
    pub inner_sweeps: usize,
    pub is_unique: bool,
    pub unique_up_to_downstream: bool,
    /// States that can hold any amount of undetected mass at `t = 0`.
    pub unobservable_downstream_set: Vec<String>,
    pub canonicalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl Summary {
    pub fn new(
        out: &ProximalOutcome,
        plan: &TransportPlan,
        report: &ObservabilityReport,
        state_ids: &[String],
    ) -> Self {
        Self {
            total_initial_mass_g: plan.total_mass(),
            objective: out.objective,
            residual: out.residual,
            iterations: out.iterations(),
            inner_sweeps: out.total_sweeps,
            is_unique: report.is_unique,
            unique_up_to_downstream: report.unique_up_to_downstream,
            unobservable_downstream_set: report
                .unobservable_downstream_set
                .iter()
                .map(|s| state_ids[*s].clone())
                .collect(),
            canonicalized: false,
            warning: None,
        }
    }
}

/// Observability report with state ids next to indices.
#[derive(Debug, Clone, Serialize)]
pub struct NamedReport<'a> {
    #[serde(flatten)]
    pub report: &'a ObservabilityReport,
    pub state_ids: &'a [String],
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Contents of a scenario bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub network: String,
    pub flows: String,
    pub observations: String,
    pub ground_truth: String,
    pub dt: f64,
    pub horizon: usize,
    pub sensors: Vec<String>,
    pub injection: Injection,
    pub injected_total_g: f64,
    pub noise: Option<NoiseSpec>,
}

/// Writes a full scenario bundle into `dir` and returns its manifest.
pub fn write_bundle(
    dir: &Path,
    net: &NetworkModel,
    flows: &FlowSeries,
    injection: &Injection,
    marginals: &[NonNegVector],
    rho: &ObservationSeries,
    noise: Option<NoiseSpec>,
) -> Result<Manifest, IoError> {
    let manifest = Manifest {
        network: "network.json".into(),
        flows: "flows.csv".into(),
        observations: "observations.csv".into(),
        ground_truth: "ground_truth.csv".into(),
        dt: flows.dt(),
        horizon: flows.horizon(),
        sensors: net.sensor_ids(),
        injection: injection.clone(),
        injected_total_g: marginals.first().map_or(0.0, NonNegVector::sum),
        noise,
    };
    write_network(&dir.join(&manifest.network), net)?;
    write_flows(&dir.join(&manifest.flows), net, flows)?;
    write_observations(&dir.join(&manifest.observations), &manifest.sensors, rho)?;
    write_marginals(&dir.join(&manifest.ground_truth), marginals, net.state_ids())?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::build_prior;

    fn line_net() -> NetworkModel {
        NetworkModel::new(
            vec![Node::tank("P", 3.0), Node::junction("J"), Node::consumer("C")],
            vec![
                PipeSpec::new("a", "P", "J", 1.0, NetworkModel::diameter_for_volume(2.0, 1.0)),
                PipeSpec::new("b", "J", "C", 1.0, NetworkModel::diameter_for_volume(1.0, 1.0)),
            ],
            1.5,
            vec!["b#0".into()],
        )
        .unwrap()
    }

    #[test]
    fn network_and_flows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = line_net();
        let flows = FlowSeries::constant(&net, &[0.5, 0.5], 1.0, 3).unwrap();
        write_network(&dir.path().join("n.json"), &net).unwrap();
        write_flows(&dir.path().join("f.csv"), &net, &flows).unwrap();
        let net2 = read_network(&dir.path().join("n.json")).unwrap();
        assert_eq!(net2, net);
        let flows2 = read_flows(&dir.path().join("f.csv"), &net2, 1.0).unwrap();
        assert_eq!(flows2, flows);
    }

    #[test]
    fn prior_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = line_net();
        let flows = FlowSeries::constant(&net, &[0.5, 0.5], 1.0, 4).unwrap();
        let prior = build_prior(&net, &flows).unwrap();
        write_prior(dir.path(), &prior, net.state_ids()).unwrap();
        let (back, ids) = read_prior(dir.path(), None).unwrap();
        assert_eq!(back, prior);
        assert_eq!(ids, net.state_ids());
    }

    #[test]
    fn flow_parse_error_has_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        std::fs::write(&p, "time,pipe_id,flow_lps\n0,a,0.5\n0,b,fast\n").unwrap();
        match read_flows(&p, &line_net(), 1.0) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "time,pipe_id,flow_lps\n").unwrap();
        assert!(matches!(read_flows(&p, &line_net(), 1.0), Err(IoError::Schema { .. })));
    }

    #[test]
    fn missing_observation_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.csv");
        std::fs::write(
            &p,
            "time,sensor_id,mass_g\n0,x,1\n0,y,2\n1,x,1\n2,x,0.5\n2,y,0\n",
        )
        .unwrap();
        match read_observations(&p, None, None) {
            Err(IoError::MissingObservation { t, sensor, .. }) => {
                assert_eq!((t, sensor.as_str()), (1, "y"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn observations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.csv");
        let rho = ObservationSeries::from_rows(vec![vec![1.0, 0.25], vec![0.0, 3.5]]).unwrap();
        let ids = vec!["s1".to_string(), "s0".to_string()];
        write_observations(&p, &ids, &rho).unwrap();
        let (order, back) = read_observations(&p, None, None).unwrap();
        assert_eq!(order, ids);
        assert_eq!(back, rho);
    }
}
