//! Radial feeder topology and the lossless (simplified) DistFlow model.
//!
//! Nodes are numbered `1..=N`; the substation root is node `0` and is not
//! part of any matrix. Matrix row/column `k - 1` belongs to node `k`, and
//! column `j` of the node-aggregator matrix belongs to `aggregator_nodes[j]`.
//!
//! With `A` the node-aggregator matrix, `D` the descendant matrix and `U` the
//! ancestor matrix:
//!
//! ```text
//! P  = D A p
//! Q  = D A (θ ∘ p)
//! ΔV = (r ∘ P + x ∘ Q) / V0
//! V  = V0 1 - U ΔV = V0 1 - M p
//! ```

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// One line segment `(parent, node)`; its data is indexed by the child node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub node: usize,
    pub parent: usize,
    pub r_pu: f64,
    pub x_pu: f64,
    pub mva_limit_pu: f64,
    /// Feeder bus name of `node`, informational only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialNetwork {
    pub v0_pu: f64,
    /// Substation transformer apparent power limit.
    pub s0_limit_pu: f64,
    pub aggregator_nodes: Vec<usize>,
    pub lines: Vec<Line>,
}

impl RadialNetwork {
    /// Number of non-root nodes.
    pub fn node_count(&self) -> usize {
        self.lines.len()
    }

    pub fn aggregator_count(&self) -> usize {
        self.aggregator_nodes.len()
    }

    /// Lines re-ordered so that entry `k - 1` is the line entering node `k`.
    fn lines_by_node(&self) -> Result<Vec<&Line>> {
        let n = self.node_count();
        let mut slots: Vec<Option<&Line>> = vec![None; n];
        for line in &self.lines {
            if line.node == 0 || line.node > n {
                return Err(Error::Topology(format!(
                    "line node {} outside 1..={n}",
                    line.node
                )));
            }
            let slot = &mut slots[line.node - 1];
            if slot.is_some() {
                return Err(Error::Topology(format!(
                    "node {} has more than one incoming line",
                    line.node
                )));
            }
            *slot = Some(line);
        }
        Ok(slots.into_iter().map(|s| s.expect("every slot filled")).collect())
    }

    /// Parent of each node, indexed by `node - 1`.
    pub fn parents(&self) -> Result<Vec<usize>> {
        Ok(self.lines_by_node()?.iter().map(|l| l.parent).collect())
    }

    pub fn resistance(&self) -> Result<DVector<f64>> {
        let lines = self.lines_by_node()?;
        Ok(DVector::from_iterator(lines.len(), lines.iter().map(|l| l.r_pu)))
    }

    pub fn reactance(&self) -> Result<DVector<f64>> {
        let lines = self.lines_by_node()?;
        Ok(DVector::from_iterator(lines.len(), lines.iter().map(|l| l.x_pu)))
    }

    pub fn line_limits(&self) -> Result<DVector<f64>> {
        let lines = self.lines_by_node()?;
        Ok(DVector::from_iterator(
            lines.len(),
            lines.iter().map(|l| l.mva_limit_pu),
        ))
    }

    /// Checks every structural and numeric invariant of the feeder.
    pub fn validate(&self) -> Result<()> {
        let n = self.node_count();
        if n == 0 {
            return Err(Error::Topology("network has no lines".into()));
        }
        let lines = self.lines_by_node()?;
        for line in &lines {
            if line.parent > n {
                return Err(Error::Topology(format!(
                    "node {} has unknown parent {}",
                    line.node, line.parent
                )));
            }
            if line.parent == line.node {
                return Err(Error::Topology(format!("node {} is its own parent", line.node)));
            }
            if !(line.r_pu >= 0.0 && line.x_pu >= 0.0) {
                return Err(Error::Validation(format!(
                    "line into node {} has negative impedance",
                    line.node
                )));
            }
            if !(line.mva_limit_pu > 0.0) {
                return Err(Error::Validation(format!(
                    "line into node {} has non-positive MVA limit",
                    line.node
                )));
            }
        }
        // Every ancestor chain must reach the root within n steps.
        for line in &lines {
            let mut cur = line.node;
            let mut steps = 0;
            while cur != 0 {
                cur = lines[cur - 1].parent;
                steps += 1;
                if steps > n {
                    return Err(Error::Topology(format!(
                        "cycle through node {} in parent relation",
                        line.node
                    )));
                }
            }
        }
        if !(self.v0_pu > 0.0) {
            return Err(Error::Validation("root voltage must be positive".into()));
        }
        if !(self.s0_limit_pu > 0.0) {
            return Err(Error::Validation(
                "transformer limit must be positive".into(),
            ));
        }
        if self.aggregator_nodes.is_empty() {
            return Err(Error::Validation("aggregator node list is empty".into()));
        }
        let mut seen = HashSet::new();
        for &k in &self.aggregator_nodes {
            if k == 0 || k > n {
                return Err(Error::Validation(format!(
                    "aggregator node {k} is not a network node"
                )));
            }
            if !seen.insert(k) {
                return Err(Error::Validation(format!(
                    "aggregator node {k} listed twice"
                )));
            }
        }
        Ok(())
    }
}

/// Structure matrices of a radial feeder.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyMatrices {
    /// N×A node-aggregator incidence.
    pub a: DMatrix<f64>,
    /// N×N descendant matrix (diagonal included).
    pub d: DMatrix<f64>,
    /// N×N ancestor matrix (diagonal included).
    pub u: DMatrix<f64>,
    /// `D A`, cached: row `k` lists the aggregators fed through line `k`.
    pub da: DMatrix<f64>,
}

impl TopologyMatrices {
    pub fn node_count(&self) -> usize {
        self.d.nrows()
    }

    pub fn aggregator_count(&self) -> usize {
        self.a.ncols()
    }
}

pub fn build_topology(network: &RadialNetwork) -> Result<TopologyMatrices> {
    network.validate()?;
    let n = network.node_count();
    let parents = network.parents()?;

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for (idx, &parent) in parents.iter().enumerate() {
        children[parent].push(idx + 1);
    }

    // D from downward traversal, U from upward walks; they are built
    // independently so that D = Uᵀ is a real check.
    let mut d = DMatrix::zeros(n, n);
    for k in 1..=n {
        let mut stack = vec![k];
        while let Some(l) = stack.pop() {
            d[(k - 1, l - 1)] = 1.0;
            stack.extend(children[l].iter().copied());
        }
    }
    let mut u = DMatrix::zeros(n, n);
    for k in 1..=n {
        let mut cur = k;
        while cur != 0 {
            u[(k - 1, cur - 1)] = 1.0;
            cur = parents[cur - 1];
        }
    }
    if children[0].is_empty() {
        return Err(Error::Topology("no line leaves the root".into()));
    }

    let agg = network.aggregator_count();
    let mut a = DMatrix::zeros(n, agg);
    for (col, &node) in network.aggregator_nodes.iter().enumerate() {
        a[(node - 1, col)] = 1.0;
    }
    let da = &d * &a;
    Ok(TopologyMatrices { a, d, u, da })
}

/// Real and reactive branch flows `(P, Q)`.
pub fn branch_flows(
    topo: &TopologyMatrices,
    p: &DVector<f64>,
    theta: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_len("branch_flows p", topo.aggregator_count(), p.len())?;
    check_len("branch_flows theta", topo.aggregator_count(), theta.len())?;
    let flows = &topo.da * p;
    let reactive = &topo.da * theta.component_mul(p);
    Ok((flows, reactive))
}

/// Node voltages and per-line voltage drops `(V, ΔV)`.
pub fn node_voltages(
    topo: &TopologyMatrices,
    net: &RadialNetwork,
    p: &DVector<f64>,
    theta: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_len("node_voltages network", topo.node_count(), net.node_count())?;
    let (flows, reactive) = branch_flows(topo, p, theta)?;
    let r = net.resistance()?;
    let x = net.reactance()?;
    let drop = (r.component_mul(&flows) + x.component_mul(&reactive)) / net.v0_pu;
    let v = DVector::from_element(topo.node_count(), net.v0_pu) - &topo.u * &drop;
    Ok((v, drop))
}

/// Voltage sensitivity `M = M_P + M_Q diag(θ)` so that `U ΔV(p) = M p`.
pub fn voltage_sensitivity(
    topo: &TopologyMatrices,
    net: &RadialNetwork,
    theta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_len("voltage_sensitivity theta", topo.aggregator_count(), theta.len())?;
    let r = net.resistance()?;
    let x = net.reactance()?;
    let scaled_p = DMatrix::from_diagonal(&r) * &topo.da;
    let scaled_q = DMatrix::from_diagonal(&x) * &topo.da * DMatrix::from_diagonal(theta);
    Ok((&topo.u * (scaled_p + scaled_q)) / net.v0_pu)
}

/// A solved operating point of the grid for one injection vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridState {
    pub p: Vec<f64>,
    pub theta: Vec<f64>,
    pub real_flow: Vec<f64>,
    pub reactive_flow: Vec<f64>,
    pub voltage: Vec<f64>,
    pub voltage_drop: Vec<f64>,
}

impl GridState {
    pub fn solve(
        topo: &TopologyMatrices,
        net: &RadialNetwork,
        p: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> Result<Self> {
        let (flows, reactive) = branch_flows(topo, p, theta)?;
        let (v, drop) = node_voltages(topo, net, p, theta)?;
        Ok(Self {
            p: p.as_slice().to_vec(),
            theta: theta.as_slice().to_vec(),
            real_flow: flows.as_slice().to_vec(),
            reactive_flow: reactive.as_slice().to_vec(),
            voltage: v.as_slice().to_vec(),
            voltage_drop: drop.as_slice().to_vec(),
        })
    }

    /// Apparent power through each line.
    pub fn apparent_flow(&self) -> Vec<f64> {
        self.real_flow
            .iter()
            .zip(&self.reactive_flow)
            .map(|(p, q)| p.hypot(*q))
            .collect()
    }
}
