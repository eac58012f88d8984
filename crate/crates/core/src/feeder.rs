//! Radial feeder model and the branch-flow voltage equations.
//!
//! Buses are numbered `0..=N` with bus 0 the slack (transformer secondary).
//! Every per-bus vector in this module is indexed by `bus - 1`, and every
//! time series is stored time-major (`series[t][bus - 1]`).
//!
//! Two voltage evaluations are provided:
//!
//! * [`linear_voltages`]: the lossless linearisation `V² = R·P + X·Q + v0²·1`,
//!   affine in the bus injections and therefore usable as optimisation rows.
//! * [`sweep_power_flow`]: the full DistFlow equations (with the
//!   `ℓ = (P² + Q²)/V²` loss terms) solved by a backward/forward sweep. It is
//!   the validation oracle for the linear model.

use std::collections::{HashSet, VecDeque};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeederError {
    #[error("feeder has no edges")]
    Empty,
    #[error("cycle detected at bus {bus}: every non-root bus needs exactly one parent")]
    CycleDetected { bus: usize },
    #[error("bus {bus} is not connected to the root")]
    DisconnectedBus { bus: usize },
    #[error("duplicate edge ({from}, {to})")]
    DuplicateEdge { from: usize, to: usize },
    #[error(
        "per-unit bases must be positive (v_base_kv = {v_base_kv}, s_base_kva = {s_base_kva})"
    )]
    NonPositiveBase { v_base_kv: f64, s_base_kva: f64 },
    #[error("edge ({from}, {to}) has a negative or non-finite impedance or rating")]
    InvalidImpedance { from: usize, to: usize },
    #[error("voltage limits must satisfy v_min < v0 < v_max (got {v_min} < {v0} < {v_max})")]
    InvalidLimits { v_min: f64, v0: f64, v_max: f64 },
    #[error("dimension mismatch: expected {expected} buses, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("power flow did not converge at t = {t} (residual {residual:.3e} after {iterations} iterations)")]
    NoConvergence {
        t: usize,
        residual: f64,
        iterations: usize,
    },
    #[error("feeder csv: {0}")]
    Csv(String),
    #[error("feeder csv: {0}")]
    Io(String),
}

/// One line of the feeder as it appears in the input file (ohms, kVA).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: usize,
    pub to: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
    pub s_kva: f64,
}

/// Everything needed to build a [`FeederModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederSpec {
    pub edges: Vec<EdgeSpec>,
    pub v0_pu: f64,
    pub v_base_kv: f64,
    pub s_base_kva: f64,
    pub v_min_pu: f64,
    pub v_max_pu: f64,
}

/// A validated line, in per-unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub parent: usize,
    pub child: usize,
    pub r_pu: f64,
    pub x_pu: f64,
    pub s_max_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederModel {
    bus_count: usize,
    /// `lines[j - 1]` is the unique line feeding bus `j`.
    lines: Vec<Line>,
    /// Non-root buses in breadth-first order from the root.
    order: Vec<usize>,
    children: Vec<Vec<usize>>,
    pub v0_pu: f64,
    pub v_base_kv: f64,
    pub s_base_kva: f64,
    pub v_min_pu: f64,
    pub v_max_pu: f64,
}

/// Ohms to per-unit on the given bases.
pub fn ohm_to_pu(z_ohm: f64, v_base_kv: f64, s_base_kva: f64) -> f64 {
    z_ohm * s_base_kva / (1000.0 * v_base_kv * v_base_kv)
}

/// Validate a feeder description and convert it to per-unit.
pub fn build_feeder(spec: &FeederSpec) -> Result<FeederModel, FeederError> {
    if spec.edges.is_empty() {
        return Err(FeederError::Empty);
    }
    if !(spec.v_base_kv > 0.0 && spec.s_base_kva > 0.0) {
        return Err(FeederError::NonPositiveBase {
            v_base_kv: spec.v_base_kv,
            s_base_kva: spec.s_base_kva,
        });
    }
    if !(spec.v_min_pu < spec.v0_pu && spec.v0_pu < spec.v_max_pu && spec.v_min_pu > 0.0) {
        return Err(FeederError::InvalidLimits {
            v_min: spec.v_min_pu,
            v0: spec.v0_pu,
            v_max: spec.v_max_pu,
        });
    }

    let mut seen = HashSet::new();
    for e in &spec.edges {
        if !seen.insert((e.from, e.to)) {
            return Err(FeederError::DuplicateEdge {
                from: e.from,
                to: e.to,
            });
        }
        let ok = [e.r_ohm, e.x_ohm, e.s_kva]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !ok {
            return Err(FeederError::InvalidImpedance {
                from: e.from,
                to: e.to,
            });
        }
    }

    let max_bus = spec
        .edges
        .iter()
        .map(|e| e.from.max(e.to))
        .max()
        .unwrap_or(0);
    let n = max_bus;
    let mut parent: Vec<Option<usize>> = vec![None; n + 1];
    let mut edge_of: Vec<Option<EdgeSpec>> = vec![None; n + 1];
    for e in &spec.edges {
        if e.to == 0 || e.from == e.to || parent[e.to].is_some() {
            return Err(FeederError::CycleDetected { bus: e.to });
        }
        parent[e.to] = Some(e.from);
        edge_of[e.to] = Some(*e);
    }

    let mut children = vec![Vec::new(); n + 1];
    for (bus, p) in parent.iter().enumerate().skip(1) {
        match p {
            Some(p) => children[*p].push(bus),
            None => return Err(FeederError::DisconnectedBus { bus }),
        }
    }

    // Breadth-first from the root; anything unreached sits on a cycle that
    // never touches bus 0.
    let mut order = Vec::with_capacity(n);
    let mut frontier = VecDeque::from([0usize]);
    let mut reached = vec![false; n + 1];
    reached[0] = true;
    while let Some(bus) = frontier.pop_front() {
        for &c in &children[bus] {
            if !reached[c] {
                reached[c] = true;
                order.push(c);
                frontier.push_back(c);
            }
        }
    }
    if let Some(bus) = (1..=n).find(|&b| !reached[b]) {
        return Err(FeederError::CycleDetected { bus });
    }

    let z = |ohm: f64| ohm_to_pu(ohm, spec.v_base_kv, spec.s_base_kva);
    let lines = (1..=n)
        .map(|j| {
            let e = edge_of[j].expect("every non-root bus has an edge");
            Line {
                parent: e.from,
                child: j,
                r_pu: z(e.r_ohm),
                x_pu: z(e.x_ohm),
                s_max_pu: e.s_kva / spec.s_base_kva,
            }
        })
        .collect();

    Ok(FeederModel {
        bus_count: n,
        lines,
        order,
        children,
        v0_pu: spec.v0_pu,
        v_base_kv: spec.v_base_kv,
        s_base_kva: spec.s_base_kva,
        v_min_pu: spec.v_min_pu,
        v_max_pu: spec.v_max_pu,
    })
}

impl FeederModel {
    /// Number of non-root buses.
    pub fn bus_count(&self) -> usize {
        self.bus_count
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// The line feeding `bus` (1-based).
    pub fn line_into(&self, bus: usize) -> &Line {
        &self.lines[bus - 1]
    }

    pub fn parent(&self, bus: usize) -> usize {
        self.lines[bus - 1].parent
    }

    pub fn children(&self, bus: usize) -> &[usize] {
        &self.children[bus]
    }

    /// Non-root buses, parents before children.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn has_bus(&self, bus: usize) -> bool {
        bus >= 1 && bus <= self.bus_count
    }

    /// Buses on the path from the root to `bus`, excluding the root.
    pub fn path_to_root(&self, bus: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut b = bus;
        while b != 0 {
            path.push(b);
            b = self.parent(b);
        }
        path
    }

    pub fn v_min_sq(&self) -> f64 {
        self.v_min_pu * self.v_min_pu
    }

    pub fn v_max_sq(&self) -> f64 {
        self.v_max_pu * self.v_max_pu
    }

    /// kW to per-unit active power.
    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw / self.s_base_kva
    }
}

/// Sensitivities of squared bus voltages to bus consumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPair {
    pub r: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
}

/// `R_ij = -2 Σ r_hk` over the lines shared by the root paths of `i` and `j`
/// (and likewise for `X`).
pub fn sensitivity_matrices(model: &FeederModel) -> SensitivityPair {
    let n = model.bus_count();
    let mut cum_r = vec![0.0; n + 1];
    let mut cum_x = vec![0.0; n + 1];
    let mut depth = vec![0usize; n + 1];
    for &bus in model.topological_order() {
        let line = model.line_into(bus);
        cum_r[bus] = cum_r[line.parent] + line.r_pu;
        cum_x[bus] = cum_x[line.parent] + line.x_pu;
        depth[bus] = depth[line.parent] + 1;
    }

    let lca = |mut a: usize, mut b: usize| {
        while depth[a] > depth[b] {
            a = model.parent(a);
        }
        while depth[b] > depth[a] {
            b = model.parent(b);
        }
        while a != b {
            a = model.parent(a);
            b = model.parent(b);
        }
        a
    };

    let mut r = vec![vec![0.0; n]; n];
    let mut x = vec![vec![0.0; n]; n];
    for i in 1..=n {
        for j in i..=n {
            let k = lca(i, j);
            let (rv, xv) = (-2.0 * cum_r[k], -2.0 * cum_x[k]);
            r[i - 1][j - 1] = rv;
            r[j - 1][i - 1] = rv;
            x[i - 1][j - 1] = xv;
            x[j - 1][i - 1] = xv;
        }
    }
    SensitivityPair { r, x }
}

/// Per-bus consumption (per-unit, consumption positive), time-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusInjectionSeries {
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

impl BusInjectionSeries {
    pub fn zeros(bus_count: usize, horizon: usize) -> Self {
        BusInjectionSeries {
            p: vec![vec![0.0; bus_count]; horizon],
            q: vec![vec![0.0; bus_count]; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.p.len()
    }

    fn check(&self, bus_count: usize) -> Result<(), FeederError> {
        if self.q.len() != self.p.len() {
            return Err(FeederError::DimensionMismatch {
                expected: self.p.len(),
                got: self.q.len(),
            });
        }
        for row in self.p.iter().chain(self.q.iter()) {
            if row.len() != bus_count {
                return Err(FeederError::DimensionMismatch {
                    expected: bus_count,
                    got: row.len(),
                });
            }
        }
        Ok(())
    }
}

/// Squared voltages (per-unit²) from the linearised branch flow model.
pub fn linear_voltages(
    pair: &SensitivityPair,
    inj: &BusInjectionSeries,
    v0: f64,
) -> Result<Vec<Vec<f64>>, FeederError> {
    let n = pair.r.len();
    inj.check(n)?;
    let base = v0 * v0;
    Ok(inj
        .p
        .iter()
        .zip(&inj.q)
        .map(|(p, q)| {
            (0..n)
                .map(|i| {
                    let rp: f64 = pair.r[i].iter().zip(p).map(|(a, b)| a * b).sum();
                    let xq: f64 = pair.x[i].iter().zip(q).map(|(a, b)| a * b).sum();
                    rp + xq + base
                })
                .collect()
        })
        .collect())
}

/// Lossless line flows: each line carries the total consumption downstream.
/// Returned as `(P, Q)` time-major, indexed by the child bus.
pub fn linear_flows(
    model: &FeederModel,
    inj: &BusInjectionSeries,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let acc = |series: &Vec<Vec<f64>>| {
        series
            .iter()
            .map(|row| {
                let mut flow = row.clone();
                for &bus in model.topological_order().iter().rev() {
                    let parent = model.parent(bus);
                    if parent != 0 {
                        flow[parent - 1] += flow[bus - 1];
                    }
                }
                flow
            })
            .collect()
    };
    (acc(&inj.p), acc(&inj.q))
}

/// Exact branch-flow solution for every time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSolution {
    /// Squared voltage magnitudes, per-unit².
    pub vsq: Vec<Vec<f64>>,
    /// Sending-end active flow on the line into each bus, per-unit.
    pub p_flow: Vec<Vec<f64>>,
    pub q_flow: Vec<Vec<f64>>,
    /// Largest residual of the branch-flow equations over all steps.
    pub residual: f64,
    pub iterations: usize,
}

impl SweepSolution {
    pub fn magnitudes(&self) -> Vec<Vec<f64>> {
        self.vsq
            .iter()
            .map(|row| row.iter().map(|v| v.max(0.0).sqrt()).collect())
            .collect()
    }
}

struct StepFlow {
    vsq: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
}

/// Solve the full DistFlow equations with a fixed-point backward/forward
/// sweep from a flat start. Iterates until the largest change in voltage
/// magnitude is below `tol`.
pub fn sweep_power_flow(
    model: &FeederModel,
    inj: &BusInjectionSeries,
    tol: f64,
    max_iter: usize,
) -> Result<SweepSolution, FeederError> {
    let n = model.bus_count();
    inj.check(n)?;
    let mut out = SweepSolution {
        vsq: Vec::with_capacity(inj.horizon()),
        p_flow: Vec::with_capacity(inj.horizon()),
        q_flow: Vec::with_capacity(inj.horizon()),
        residual: 0.0,
        iterations: 0,
    };
    for t in 0..inj.horizon() {
        let (step, iters) = sweep_step(model, &inj.p[t], &inj.q[t], tol, max_iter).map_err(
            |(residual, iterations)| FeederError::NoConvergence {
                t,
                residual,
                iterations,
            },
        )?;
        let res = distflow_residual(model, &inj.p[t], &inj.q[t], &step.vsq, &step.p, &step.q);
        out.residual = out.residual.max(res);
        out.iterations = out.iterations.max(iters);
        out.vsq.push(step.vsq);
        out.p_flow.push(step.p);
        out.q_flow.push(step.q);
    }
    Ok(out)
}

fn sweep_step(
    model: &FeederModel,
    p_load: &[f64],
    q_load: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(StepFlow, usize), (f64, usize)> {
    let n = model.bus_count();
    let v0sq = model.v0_pu * model.v0_pu;
    let mut vsq = vec![v0sq; n + 1];
    let mut p = vec![0.0; n + 1];
    let mut q = vec![0.0; n + 1];
    let mut loss = vec![0.0; n + 1];
    let mut change = f64::INFINITY;

    for iter in 1..=max_iter {
        // Backward: accumulate downstream consumption plus line losses.
        for &j in model.topological_order().iter().rev() {
            let line = model.line_into(j);
            let mut pj = p_load[j - 1] + line.r_pu * loss[j];
            let mut qj = q_load[j - 1] + line.x_pu * loss[j];
            for &k in model.children(j) {
                pj += p[k];
                qj += q[k];
            }
            p[j] = pj;
            q[j] = qj;
        }
        // Forward: voltages from the root outwards, refreshing losses.
        change = 0.0;
        for &j in model.topological_order() {
            let line = model.line_into(j);
            let vi = vsq[line.parent];
            if !(vi > 0.0) || !vi.is_finite() {
                return Err((f64::INFINITY, iter));
            }
            loss[j] = (p[j] * p[j] + q[j] * q[j]) / vi;
            let z2 = line.r_pu * line.r_pu + line.x_pu * line.x_pu;
            let vj = vi - 2.0 * (line.r_pu * p[j] + line.x_pu * q[j]) + z2 * loss[j];
            if !(vj > 0.0) || !vj.is_finite() {
                return Err((f64::INFINITY, iter));
            }
            change = f64::max(change, (vj.sqrt() - vsq[j].sqrt()).abs());
            vsq[j] = vj;
        }
        if change < tol {
            return Ok((
                StepFlow {
                    vsq: vsq[1..].to_vec(),
                    p: p[1..].to_vec(),
                    q: q[1..].to_vec(),
                },
                iter,
            ));
        }
    }
    Err((change, max_iter))
}

/// Largest absolute residual of the DistFlow equations for one step, given
/// consumption, squared voltages and sending-end flows (all indexed by bus - 1).
pub fn distflow_residual(
    model: &FeederModel,
    p_load: &[f64],
    q_load: &[f64],
    vsq: &[f64],
    p_flow: &[f64],
    q_flow: &[f64],
) -> f64 {
    let v0sq = model.v0_pu * model.v0_pu;
    let mut worst: f64 = 0.0;
    for j in 1..=model.bus_count() {
        let line = model.line_into(j);
        let vi = if line.parent == 0 {
            v0sq
        } else {
            vsq[line.parent - 1]
        };
        let (pij, qij) = (p_flow[j - 1], q_flow[j - 1]);
        let l = (pij * pij + qij * qij) / vi;
        let down_p: f64 = model.children(j).iter().map(|&k| p_flow[k - 1]).sum();
        let down_q: f64 = model.children(j).iter().map(|&k| q_flow[k - 1]).sum();
        let rp = pij - (p_load[j - 1] + down_p + line.r_pu * l);
        let rq = qij - (q_load[j - 1] + down_q + line.x_pu * l);
        let z2 = line.r_pu * line.r_pu + line.x_pu * line.x_pu;
        let rv = vsq[j - 1] - (vi - 2.0 * (line.r_pu * pij + line.x_pu * qij) + z2 * l);
        worst = worst.max(rp.abs()).max(rq.abs()).max(rv.abs());
    }
    worst
}

/// One bus/time pair outside the voltage band. Magnitudes in per-unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageViolation {
    pub bus: usize,
    /// 1-based interval index.
    pub t: usize,
    pub value: f64,
    pub limit: f64,
}

impl VoltageViolation {
    pub fn is_under(&self) -> bool {
        self.value < self.limit
    }
}

/// Every (bus, t) whose squared voltage lies outside `[v_min², v_max²]`.
pub fn check_voltage_limits(vsq: &[Vec<f64>], model: &FeederModel) -> Vec<VoltageViolation> {
    let (lo, hi) = (model.v_min_sq(), model.v_max_sq());
    let mut out = Vec::new();
    for (t, row) in vsq.iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            if v < lo {
                out.push(VoltageViolation {
                    bus: i + 1,
                    t: t + 1,
                    value: v.max(0.0).sqrt(),
                    limit: model.v_min_pu,
                });
            } else if v > hi {
                out.push(VoltageViolation {
                    bus: i + 1,
                    t: t + 1,
                    value: v.sqrt(),
                    limit: model.v_max_pu,
                });
            }
        }
    }
    out
}

/// A line whose apparent power flow exceeds its rating. Values in kVA.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalViolation {
    pub from: usize,
    pub to: usize,
    pub t: usize,
    pub value: f64,
    pub limit: f64,
}

/// Flags `(i, j, t)` with `P_ij² + Q_ij² > S_ij,max²`; the boundary is compliant.
pub fn check_thermal(
    model: &FeederModel,
    p_flow: &[Vec<f64>],
    q_flow: &[Vec<f64>],
) -> Vec<ThermalViolation> {
    let mut out = Vec::new();
    for (t, (prow, qrow)) in p_flow.iter().zip(q_flow).enumerate() {
        for (line, (&p, &q)) in model.lines().iter().zip(prow.iter().zip(qrow)) {
            let s2 = p * p + q * q;
            if s2 > line.s_max_pu * line.s_max_pu {
                out.push(ThermalViolation {
                    from: line.parent,
                    to: line.child,
                    t: t + 1,
                    value: s2.sqrt() * model.s_base_kva,
                    limit: line.s_max_pu * model.s_base_kva,
                });
            }
        }
    }
    out
}

/// Parse the `from,to,r_ohm,x_ohm,s_kva` edge list.
pub fn read_edges<R: Read>(reader: R) -> Result<Vec<EdgeSpec>, FeederError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut edges = Vec::new();
    for rec in rdr.deserialize::<EdgeSpec>() {
        edges.push(rec.map_err(|e| FeederError::Csv(e.to_string()))?);
    }
    Ok(edges)
}

pub fn read_edges_file(path: &Path) -> Result<Vec<EdgeSpec>, FeederError> {
    let f = std::fs::File::open(path)
        .map_err(|e| FeederError::Io(format!("{}: {e}", path.display())))?;
    read_edges(f)
}

pub fn write_violations_json(v: &[VoltageViolation]) -> serde_json::Result<String> {
    serde_json::to_string_pretty(v)
}
