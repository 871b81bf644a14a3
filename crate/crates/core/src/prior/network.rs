use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{normalized_speed, PriorError};

pub const DEFAULT_SEGMENT_CAP_L: f64 = 1.5;
pub const DEFAULT_BALANCE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipeSpec {
    pub id: String,
    pub from_node: String,
    pub to_node: String,
    /// Metres.
    pub length: f64,
    /// Millimetres.
    pub diameter: f64,
}

impl PipeSpec {
    pub fn new(id: &str, from: &str, to: &str, length_m: f64, diameter_mm: f64) -> Self {
        Self {
            id: id.into(),
            from_node: from.into(),
            to_node: to.into(),
            length: length_m,
            diameter: diameter_mm,
        }
    }

    /// Volume in litres.
    pub fn volume_l(&self) -> f64 {
        let r = self.diameter / 2000.0;
        PI * r * r * self.length * 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Source,
    Junction,
    Consumer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    /// A source with a tank gets its own state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tank_volume_l: Option<f64>,
}

impl Node {
    pub fn source(id: &str) -> Self {
        Self {
            id: id.into(),
            kind: NodeKind::Source,
            tank_volume_l: None,
        }
    }

    pub fn tank(id: &str, volume_l: f64) -> Self {
        Self {
            tank_volume_l: Some(volume_l),
            ..Self::source(id)
        }
    }

    pub fn junction(id: &str) -> Self {
        Self {
            id: id.into(),
            kind: NodeKind::Junction,
            tank_volume_l: None,
        }
    }

    pub fn consumer(id: &str) -> Self {
        Self {
            id: id.into(),
            kind: NodeKind::Consumer,
            tank_volume_l: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    Segment { pipe: usize, index: usize },
    Tank { node: usize },
    Exit,
}

/// A validated network together with its state layout: pipe segments in
/// pipe order (inlet first), then tank states in node order, then `EXIT`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    nodes: Vec<Node>,
    pipes: Vec<PipeSpec>,
    segment_volume_cap: f64,
    sensors: Vec<usize>,
    states: Vec<StateKind>,
    state_ids: Vec<String>,
    state_index: HashMap<String, usize>,
    node_index: HashMap<String, usize>,
    pipe_index: HashMap<String, usize>,
    /// First state of each pipe and its segment count.
    pipe_states: Vec<(usize, usize)>,
    tank_state: Vec<Option<usize>>,
    outgoing: Vec<Vec<usize>>,
    incoming: Vec<Vec<usize>>,
}

impl NetworkModel {
    /// `sensors` are state identifiers.
    pub fn new(
        nodes: Vec<Node>,
        pipes: Vec<PipeSpec>,
        segment_volume_cap: f64,
        sensors: Vec<String>,
    ) -> Result<Self, PriorError> {
        let bad = |m: String| PriorError::InvalidNetwork(m);
        if !(segment_volume_cap > 0.0 && segment_volume_cap.is_finite()) {
            return Err(bad(format!("segment_volume_cap must be > 0, got {segment_volume_cap}")));
        }
        let mut node_index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if node_index.insert(n.id.clone(), i).is_some() {
                return Err(bad(format!("duplicate node id {}", n.id)));
            }
            if let Some(v) = n.tank_volume_l {
                if n.kind != NodeKind::Source {
                    return Err(bad(format!("node {} has a tank but is not a source", n.id)));
                }
                if !(v > 0.0 && v.is_finite()) {
                    return Err(PriorError::InvalidVolume(v));
                }
            }
        }
        let mut pipe_index = HashMap::new();
        let mut outgoing = vec![Vec::new(); nodes.len()];
        let mut incoming = vec![Vec::new(); nodes.len()];
        for (p, spec) in pipes.iter().enumerate() {
            if pipe_index.insert(spec.id.clone(), p).is_some() {
                return Err(bad(format!("duplicate pipe id {}", spec.id)));
            }
            if spec.id.contains('#') || spec.id.contains(':') || spec.id == "EXIT" {
                return Err(bad(format!("pipe id {:?} clashes with state id syntax", spec.id)));
            }
            if !(spec.length > 0.0 && spec.length.is_finite()) {
                return Err(bad(format!("pipe {} has length {}", spec.id, spec.length)));
            }
            if !(spec.diameter > 0.0 && spec.diameter.is_finite()) {
                return Err(bad(format!("pipe {} has diameter {}", spec.id, spec.diameter)));
            }
            let lookup = |id: &str| {
                node_index
                    .get(id)
                    .copied()
                    .ok_or_else(|| bad(format!("pipe {} references unknown node {id}", spec.id)))
            };
            let (a, b) = (lookup(&spec.from_node)?, lookup(&spec.to_node)?);
            if a == b {
                return Err(bad(format!("pipe {} is a self-loop", spec.id)));
            }
            if nodes[a].kind == NodeKind::Consumer {
                return Err(bad(format!("pipe {} leaves consumer {}", spec.id, nodes[a].id)));
            }
            outgoing[a].push(p);
            incoming[b].push(p);
        }

        let mut states = Vec::new();
        let mut state_ids = Vec::new();
        let mut pipe_states = Vec::with_capacity(pipes.len());
        for (p, spec) in pipes.iter().enumerate() {
            let count = ((spec.volume_l() / segment_volume_cap) - 1e-9).ceil().max(1.0) as usize;
            pipe_states.push((states.len(), count));
            for k in 0..count {
                states.push(StateKind::Segment { pipe: p, index: k });
                state_ids.push(format!("{}#{k}", spec.id));
            }
        }
        let mut tank_state = vec![None; nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            if n.tank_volume_l.is_some() {
                tank_state[i] = Some(states.len());
                states.push(StateKind::Tank { node: i });
                state_ids.push(format!("tank:{}", n.id));
            }
        }
        states.push(StateKind::Exit);
        state_ids.push("EXIT".into());
        let state_index: HashMap<String, usize> =
            state_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();

        let mut sensor_idx = Vec::with_capacity(sensors.len());
        for s in &sensors {
            let i = *state_index
                .get(s)
                .ok_or_else(|| bad(format!("unknown sensor state {s}")))?;
            if sensor_idx.contains(&i) {
                return Err(bad(format!("duplicate sensor {s}")));
            }
            sensor_idx.push(i);
        }

        Ok(Self {
            nodes,
            pipes,
            segment_volume_cap,
            sensors: sensor_idx,
            states,
            state_ids,
            state_index,
            node_index,
            pipe_index,
            pipe_states,
            tank_state,
            outgoing,
            incoming,
        })
    }

    /// Diameter in millimetres giving a pipe of `volume_l` litres.
    pub fn diameter_for_volume(volume_l: f64, length_m: f64) -> f64 {
        2000.0 * (volume_l / 1000.0 / (PI * length_m)).sqrt()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn pipes(&self) -> &[PipeSpec] {
        &self.pipes
    }

    pub fn segment_volume_cap(&self) -> f64 {
        self.segment_volume_cap
    }

    pub fn sensors(&self) -> &[usize] {
        &self.sensors
    }

    pub fn sensor_ids(&self) -> Vec<String> {
        self.sensors.iter().map(|&i| self.state_ids[i].clone()).collect()
    }

    pub fn with_sensors(mut self, sensors: &[String]) -> Result<Self, PriorError> {
        let idx = sensors
            .iter()
            .map(|s| {
                self.state(s)
                    .ok_or_else(|| PriorError::InvalidNetwork(format!("unknown sensor state {s}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.sensors = idx;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_segments(&self) -> usize {
        self.pipe_states.iter().map(|(_, c)| c).sum()
    }

    pub fn exit_state(&self) -> usize {
        self.states.len() - 1
    }

    pub fn state_kind(&self, state: usize) -> StateKind {
        self.states[state]
    }

    pub fn state_id(&self, state: usize) -> &str {
        &self.state_ids[state]
    }

    pub fn state_ids(&self) -> &[String] {
        &self.state_ids
    }

    pub fn state(&self, id: &str) -> Option<usize> {
        self.state_index.get(id).copied()
    }

    pub fn node(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn pipe(&self, id: &str) -> Option<usize> {
        self.pipe_index.get(id).copied()
    }

    /// States of pipe `p`, inlet first.
    pub fn pipe_segments(&self, p: usize) -> std::ops::Range<usize> {
        let (start, count) = self.pipe_states[p];
        start..start + count
    }

    pub fn tank_state(&self, node: usize) -> Option<usize> {
        self.tank_state[node]
    }

    /// Volume of a state in litres; `None` for the exit.
    pub fn state_volume_l(&self, state: usize) -> Option<f64> {
        match self.states[state] {
            StateKind::Segment { pipe, .. } => {
                Some(self.pipes[pipe].volume_l() / self.pipe_states[pipe].1 as f64)
            }
            StateKind::Tank { node } => self.nodes[node].tank_volume_l,
            StateKind::Exit => None,
        }
    }

    fn node_outflow(&self, flows: &FlowSeries, t: usize, node: usize) -> f64 {
        self.outgoing[node].iter().map(|&p| flows.flow(t, p)).sum()
    }

    /// Normalized speed of a state at time `t`. A tank empties the fraction
    /// `total outflow · Δt / V_tank` of its content per step.
    pub fn speed(&self, flows: &FlowSeries, t: usize, state: usize) -> Result<f64, PriorError> {
        let dt = flows.dt();
        match self.states[state] {
            StateKind::Segment { pipe, .. } => {
                normalized_speed(flows.flow(t, pipe), dt, self.state_volume_l(state).unwrap_or(0.0))
            }
            StateKind::Tank { node } => normalized_speed(
                self.node_outflow(flows, t, node),
                dt,
                self.nodes[node].tank_volume_l.unwrap_or(0.0),
            ),
            StateKind::Exit => Ok(0.0),
        }
    }

    /// States that directly receive water leaving `state`, with the fraction
    /// of the outflow going to each.
    pub fn successors(
        &self,
        flows: &FlowSeries,
        t: usize,
        state: usize,
    ) -> Result<Vec<(usize, f64)>, PriorError> {
        let node = match self.states[state] {
            StateKind::Exit => return Ok(vec![]),
            StateKind::Segment { pipe, index } => {
                if index + 1 < self.pipe_states[pipe].1 {
                    return Ok(vec![(state + 1, 1.0)]);
                }
                self.node_index[&self.pipes[pipe].to_node]
            }
            StateKind::Tank { node } => {
                return Ok(self.split(flows, t, node));
            }
        };
        if self.nodes[node].kind == NodeKind::Consumer {
            return Ok(vec![(self.exit_state(), 1.0)]);
        }
        if let Some(s) = self.tank_state[node] {
            return Ok(vec![(s, 1.0)]);
        }
        Ok(self.split(flows, t, node))
    }

    fn split(&self, flows: &FlowSeries, t: usize, node: usize) -> Vec<(usize, f64)> {
        let total = self.node_outflow(flows, t, node);
        if total <= 0.0 {
            return vec![];
        }
        self.outgoing[node]
            .iter()
            .map(|&p| (self.pipe_states[p].0, flows.flow(t, p) / total))
            .collect()
    }

    fn check_balance(&self, flows: &[Vec<f64>], tol: f64) -> Result<(), PriorError> {
        for (t, f) in flows.iter().enumerate() {
            for (i, n) in self.nodes.iter().enumerate() {
                if n.kind != NodeKind::Junction {
                    continue;
                }
                let inflow: f64 = self.incoming[i].iter().map(|&p| f[p]).sum();
                let outflow: f64 = self.outgoing[i].iter().map(|&p| f[p]).sum();
                if (inflow - outflow).abs() > tol * inflow.max(outflow) {
                    return Err(PriorError::FlowImbalance {
                        node: n.id.clone(),
                        t,
                        inflow,
                        outflow,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Per-pipe flow rates `F_p(t)` in litres per second for `t = 0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSeries {
    dt: f64,
    n_pipes: usize,
    flows: Vec<Vec<f64>>,
}

impl FlowSeries {
    /// `flows[t][p]` is indexed by pipe position in the network.
    pub fn new(network: &NetworkModel, dt: f64, flows: Vec<Vec<f64>>) -> Result<Self, PriorError> {
        Self::with_balance_tol(network, dt, flows, DEFAULT_BALANCE_TOL)
    }

    pub fn with_balance_tol(
        network: &NetworkModel,
        dt: f64,
        flows: Vec<Vec<f64>>,
        tol: f64,
    ) -> Result<Self, PriorError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(PriorError::InvalidTimeStep(dt));
        }
        if !(tol >= 0.0) {
            return Err(PriorError::InvalidFlows(format!("balance tolerance {tol}")));
        }
        let np = network.pipes().len();
        for (t, row) in flows.iter().enumerate() {
            if row.len() != np {
                return Err(PriorError::InvalidFlows(format!(
                    "t={t}: {} flows for {np} pipes",
                    row.len()
                )));
            }
            if let Some(&f) = row.iter().find(|f| !(f.is_finite() && **f >= 0.0)) {
                return Err(PriorError::InvalidFlow(f));
            }
        }
        network.check_balance(&flows, tol)?;
        Ok(Self {
            dt,
            n_pipes: np,
            flows,
        })
    }

    pub fn constant(
        network: &NetworkModel,
        per_pipe: &[f64],
        dt: f64,
        horizon: usize,
    ) -> Result<Self, PriorError> {
        Self::new(network, dt, vec![per_pipe.to_vec(); horizon])
    }

    /// Builds from `(t, pipe_id, flow)` records; every pipe needs a value at
    /// every `t` in `0..=max t`.
    pub fn from_records(
        network: &NetworkModel,
        dt: f64,
        records: &[(usize, String, f64)],
        tol: f64,
    ) -> Result<Self, PriorError> {
        if records.is_empty() {
            return Err(PriorError::InvalidFlows("no flow records".into()));
        }
        let np = network.pipes().len();
        let horizon = records.iter().map(|r| r.0).max().unwrap_or(0) + 1;
        let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (t, id, f) in records {
            let p = network
                .pipe(id)
                .ok_or_else(|| PriorError::InvalidFlows(format!("unknown pipe {id} at t={t}")))?;
            if table.insert((*t, p), *f).is_some() {
                return Err(PriorError::InvalidFlows(format!("duplicate flow for {id} at t={t}")));
            }
        }
        let mut flows = vec![vec![0.0; np]; horizon];
        for (t, row) in flows.iter_mut().enumerate() {
            for (p, slot) in row.iter_mut().enumerate() {
                *slot = *table.get(&(t, p)).ok_or_else(|| {
                    PriorError::InvalidFlows(format!(
                        "missing flow for pipe {} at t={t}",
                        network.pipes()[p].id
                    ))
                })?;
            }
        }
        Self::with_balance_tol(network, dt, flows, tol)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> usize {
        self.flows.len()
    }

    pub fn n_pipes(&self) -> usize {
        self.n_pipes
    }

    pub fn flow(&self, t: usize, pipe: usize) -> f64 {
        self.flows[t][pipe]
    }

    pub fn at(&self, t: usize) -> &[f64] {
        &self.flows[t]
    }
}
