//! The DSO's feasible allocation set: transformer and line apparent-power
//! limits, node voltage limits and the weak budget balance constraint, all
//! expressed in the aggregator injection vector `p`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::barrier::{self, BarrierOptions, Constraint, Equality, KktResidual, Objective};
use crate::error::{check_len, Error, Result};
use crate::grid::{voltage_sensitivity, RadialNetwork, TopologyMatrices};

/// Residual tolerance for declaring a point feasible.
pub const FEASIBILITY_TOL: f64 = 1e-8;
/// Residual magnitude below which a constraint is reported active.
pub const ACTIVITY_TOL: f64 = 1e-6;
/// Required KKT certificate quality of a projection.
pub const PROJECTION_KKT_TOL: f64 = 1e-6;

/// `Z0 = 1 1ᵀ + θ θᵀ`.
pub fn transformer_matrix(theta: &DVector<f64>) -> DMatrix<f64> {
    let ones = DVector::from_element(theta.len(), 1.0);
    &ones * ones.transpose() + theta * theta.transpose()
}

/// `Z_k = AᵀDᵀE_kDA + diag(θ) AᵀDᵀE_kDA diag(θ)` for line `k` (1-based node).
pub fn line_matrix(k: usize, topo: &TopologyMatrices, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    if k == 0 || k > topo.node_count() {
        return Err(Error::InvalidNode(k));
    }
    check_len("line_matrix theta", topo.aggregator_count(), theta.len())?;
    let row = topo.da.row(k - 1).transpose();
    let weighted = theta.component_mul(&row);
    Ok(&row * row.transpose() + &weighted * weighted.transpose())
}

/// Bounds on `M p` equivalent to `1 - δ ≤ V ≤ 1 + δ` when `V = V0 - M p`.
pub fn voltage_bounds(net: &RadialNetwork, delta: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Validation(format!("voltage deviation {delta} outside (0, 1)")));
    }
    let n = net.node_count();
    Ok((
        DVector::from_element(n, net.v0_pu - 1.0 - delta),
        DVector::from_element(n, net.v0_pu - 1.0 + delta),
    ))
}

/// Substation price `c0 = c0b + β0 Σp`.
pub fn wholesale_price(base_price: f64, elasticity: f64, p: &[f64]) -> f64 {
    base_price + elasticity * p.iter().sum::<f64>()
}

/// `c0b 1ᵀp - cᵀp + β0 (1ᵀp)²`; non-positive means the DSO collects at
/// least what it pays the wholesale market.
pub fn budget_residual(p: &[f64], prices: &[f64], base_price: f64, elasticity: f64) -> f64 {
    let total: f64 = p.iter().sum();
    let revenue: f64 = p.iter().zip(prices).map(|(a, b)| a * b).sum();
    base_price * total - revenue + elasticity * total * total
}

/// Market parameters that enter the feasible set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceModel {
    pub base_price: f64,
    pub elasticity: f64,
}

#[derive(Debug, Clone)]
pub struct FeasibleRegion {
    pub z0: DMatrix<f64>,
    pub z_lines: Vec<DMatrix<f64>>,
    pub m: DMatrix<f64>,
    pub v_lower: DVector<f64>,
    pub v_upper: DVector<f64>,
    pub s0_limit: f64,
    pub line_limits: DVector<f64>,
    pub price_model: PriceModel,
    /// Aggregator prices `ĉ` at the anchor allotment.
    pub prices: DVector<f64>,
    /// Local price response `c_k(p) ≈ ĉ_k - σ_k (p_k - p̂_k)`, `σ ≥ 0`.
    /// Zero freezes the prices.
    pub price_slopes: DVector<f64>,
    /// Anchor allotment `p̂` of the price response.
    pub anchor: DVector<f64>,
    pub theta: DVector<f64>,
    pub delta: f64,
    /// Rows of `D A` (cached for the low-rank constraint form).
    da: DMatrix<f64>,
}

impl FeasibleRegion {
    pub fn new(
        topo: &TopologyMatrices,
        net: &RadialNetwork,
        theta: &DVector<f64>,
        prices: &DVector<f64>,
        price_model: PriceModel,
        delta: f64,
    ) -> Result<Self> {
        let agg = topo.aggregator_count();
        check_len("region theta", agg, theta.len())?;
        check_len("region prices", agg, prices.len())?;
        let (v_lower, v_upper) = voltage_bounds(net, delta)?;
        let z_lines = (1..=topo.node_count())
            .map(|k| line_matrix(k, topo, theta))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            z0: transformer_matrix(theta),
            z_lines,
            m: voltage_sensitivity(topo, net, theta)?,
            v_lower,
            v_upper,
            s0_limit: net.s0_limit_pu,
            line_limits: net.line_limits()?,
            price_model,
            prices: prices.clone(),
            price_slopes: DVector::zeros(agg),
            anchor: DVector::zeros(agg),
            theta: theta.clone(),
            delta,
            da: topo.da.clone(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.theta.len()
    }

    /// Rebuilds the price-dependent part after new aggregator reports.
    pub fn with_prices(&self, prices: &DVector<f64>) -> Self {
        Self {
            prices: prices.clone(),
            price_slopes: DVector::zeros(self.dimension()),
            anchor: DVector::zeros(self.dimension()),
            ..self.clone()
        }
    }

    /// Replaces frozen prices in the budget by a linear price response around
    /// `anchor`. Negative slopes are clipped to zero.
    pub fn with_price_response(&self, slopes: &DVector<f64>, anchor: &DVector<f64>) -> Result<Self> {
        check_len("price response slopes", self.dimension(), slopes.len())?;
        check_len("price response anchor", self.dimension(), anchor.len())?;
        Ok(Self {
            price_slopes: slopes.map(|v| if v.is_finite() { v.max(0.0) } else { 0.0 }),
            anchor: anchor.clone(),
            ..self.clone()
        })
    }

    /// `c0b 1ᵀp - c(p)ᵀp + β0 (1ᵀp)²` under the region's price model.
    pub fn budget(&self, p: &DVector<f64>) -> f64 {
        let frozen = budget_residual(
            p.as_slice(),
            self.prices.as_slice(),
            self.price_model.base_price,
            self.price_model.elasticity,
        );
        let response: f64 = (0..p.len())
            .map(|k| self.price_slopes[k] * (p[k] - self.anchor[k]) * p[k])
            .sum();
        frozen + response
    }

    /// Constraints in low-rank form plus any equality forced by a degenerate
    /// budget constraint.
    pub(crate) fn solver_constraints(&self) -> (Vec<Constraint>, Vec<Equality>) {
        self.solver_constraints_with(true)
    }

    pub(crate) fn solver_constraints_with(&self, include_budget: bool) -> (Vec<Constraint>, Vec<Equality>) {
        let a = self.dimension();
        let ones = DVector::from_element(a, 1.0);
        let mut constraints = vec![Constraint {
            factors: vec![ones.clone(), self.theta.clone()],
            linear: DVector::zeros(a),
            bound: self.s0_limit.powi(2),
        }];
        for k in 0..self.da.nrows() {
            let row = self.da.row(k).transpose();
            if row.iter().all(|v| *v == 0.0) {
                continue;
            }
            let weighted = self.theta.component_mul(&row);
            constraints.push(Constraint {
                factors: vec![row, weighted],
                linear: DVector::zeros(a),
                bound: self.line_limits[k].powi(2),
            });
        }
        for k in 0..self.m.nrows() {
            let row = self.m.row(k).transpose();
            if row.iter().all(|v| *v == 0.0) {
                continue;
            }
            constraints.push(Constraint::linear(row.clone(), self.v_upper[k]));
            constraints.push(Constraint::linear(-row, -self.v_lower[k]));
        }
        let mut equalities = Vec::new();
        if !include_budget {
            return (constraints, equalities);
        }
        let linear = &ones * self.price_model.base_price - &self.prices - self.price_slopes.component_mul(&self.anchor);
        let mut budget_factors = Vec::new();
        if self.price_model.elasticity > 0.0 {
            budget_factors.push(&ones * self.price_model.elasticity.sqrt());
        }
        for k in 0..a {
            if self.price_slopes[k] > 0.0 {
                let mut f = DVector::zeros(a);
                f[k] = self.price_slopes[k].sqrt();
                budget_factors.push(f);
            }
        }
        if linear.iter().all(|v| *v == 0.0) {
            // Σ (fᵀp)² ≤ 0 pins every factor to zero; with none it is vacuous.
            equalities.extend(budget_factors.into_iter().map(|row| Equality { row, rhs: 0.0 }));
        } else {
            constraints.push(Constraint {
                factors: budget_factors,
                linear,
                bound: 0.0,
            });
        }
        (constraints, equalities)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "node", rename_all = "snake_case")]
pub enum ConstraintId {
    Transformer,
    Line(usize),
    VoltageLower(usize),
    VoltageUpper(usize),
    Budget,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstraintReport {
    /// `pᵀZ0p - S0²`.
    pub transformer: f64,
    /// `pᵀZ_kp - S_k²`, indexed by `node - 1`.
    pub lines: Vec<f64>,
    /// `v_lower - M p`.
    pub voltage_lower: Vec<f64>,
    /// `M p - v_upper`.
    pub voltage_upper: Vec<f64>,
    pub budget: f64,
    pub worst_violation: f64,
    pub feasible: bool,
    pub active: Vec<ConstraintId>,
}

impl ConstraintReport {
    fn residuals(&self) -> impl Iterator<Item = (ConstraintId, f64)> + '_ {
        std::iter::once((ConstraintId::Transformer, self.transformer))
            .chain(self.lines.iter().enumerate().map(|(k, r)| (ConstraintId::Line(k + 1), *r)))
            .chain(
                self.voltage_lower
                    .iter()
                    .enumerate()
                    .map(|(k, r)| (ConstraintId::VoltageLower(k + 1), *r)),
            )
            .chain(
                self.voltage_upper
                    .iter()
                    .enumerate()
                    .map(|(k, r)| (ConstraintId::VoltageUpper(k + 1), *r)),
            )
            .chain(std::iter::once((ConstraintId::Budget, self.budget)))
    }

    pub fn active_lines(&self) -> Vec<usize> {
        self.active
            .iter()
            .filter_map(|c| match c {
                ConstraintId::Line(k) => Some(*k),
                _ => None,
            })
            .collect()
    }
}

pub fn evaluate_constraints(p: &DVector<f64>, region: &FeasibleRegion) -> Result<ConstraintReport> {
    check_len("evaluate_constraints p", region.dimension(), p.len())?;
    let transformer = p.dot(&(&region.z0 * p)) - region.s0_limit.powi(2);
    let lines: Vec<f64> = region
        .z_lines
        .iter()
        .zip(region.line_limits.iter())
        .map(|(z, limit)| p.dot(&(z * p)) - limit * limit)
        .collect();
    let mp = &region.m * p;
    let voltage_lower: Vec<f64> = (&region.v_lower - &mp).iter().copied().collect();
    let voltage_upper: Vec<f64> = (&mp - &region.v_upper).iter().copied().collect();
    let budget = region.budget(p);
    let mut report = ConstraintReport {
        transformer,
        lines,
        voltage_lower,
        voltage_upper,
        budget,
        worst_violation: 0.0,
        feasible: false,
        active: Vec::new(),
    };
    let worst = report.residuals().map(|(_, r)| r).fold(f64::NEG_INFINITY, f64::max);
    report.worst_violation = worst.max(0.0);
    report.feasible = worst <= FEASIBILITY_TOL;
    report.active = report
        .residuals()
        .filter(|(_, r)| r.abs() <= ACTIVITY_TOL)
        .map(|(id, _)| id)
        .collect();
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub p: DVector<f64>,
    pub distance: f64,
    pub kkt: KktResidual,
    pub newton_steps: usize,
}

struct SquaredDistance<'a>(&'a DVector<f64>);

impl Objective for SquaredDistance<'_> {
    fn value(&self, x: &DVector<f64>) -> Option<f64> {
        Some(0.5 * (x - self.0).norm_squared())
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        x - self.0
    }
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(x.len(), x.len())
    }
}

/// Euclidean projection of `target` onto the region.
///
/// `warm_start` is used as the interior starting point when it is strictly
/// feasible; otherwise the solver searches from the origin.
pub fn project(
    target: &DVector<f64>,
    region: &FeasibleRegion,
    warm_start: Option<&DVector<f64>>,
) -> Result<Projection> {
    let a = region.dimension();
    check_len("project target", a, target.len())?;
    let origin = DVector::zeros(a);
    let at_origin = evaluate_constraints(&origin, region)?;
    if !at_origin.feasible {
        return Err(Error::InfeasibleRegion(format!(
            "origin violates the feasible set by {:.3e}",
            at_origin.worst_violation
        )));
    }
    if evaluate_constraints(target, region)?.feasible {
        return Ok(Projection {
            p: target.clone(),
            distance: 0.0,
            kkt: KktResidual {
                stationarity: 0.0,
                complementarity: 0.0,
                primal: 0.0,
            },
            newton_steps: 0,
        });
    }

    let (constraints, equalities) = region.solver_constraints();
    let satisfies_equalities =
        |x: &DVector<f64>| equalities.iter().all(|e| (e.row.dot(x) - e.rhs).abs() <= 1e-12);
    let start = match warm_start {
        Some(w)
            if w.len() == a
                && satisfies_equalities(w)
                && constraints.iter().all(|c| c.eval(w) < 0.0) =>
        {
            w.clone()
        }
        _ => barrier::find_interior_point(&constraints, &equalities, &origin)?,
    };
    let options = BarrierOptions {
        complementarity_tol: 1e-8,
        ..BarrierOptions::default()
    };
    let objective = SquaredDistance(target);
    let solution = barrier::minimize(&objective, &constraints, &equalities, start, &options)?;
    if solution.kkt.max() > PROJECTION_KKT_TOL {
        return Err(Error::NonConvergence {
            iterations: solution.newton_steps,
            reason: "projection KKT certificate above tolerance".into(),
            residual: solution.kkt.max(),
            last_iterate: solution.x.as_slice().to_vec(),
        });
    }
    Ok(Projection {
        distance: (&solution.x - target).norm(),
        p: solution.x,
        kkt: solution.kkt,
        newton_steps: solution.newton_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_topology;
    use crate::grid::tests::chain;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn transformer_matrix_examples() {
        let z = transformer_matrix(&dv(&[0.0, 0.0]));
        assert_eq!(z, DMatrix::from_element(2, 2, 1.0));
        let p = dv(&[3.0, 4.0]);
        assert_eq!(p.dot(&(&z * &p)), 49.0);
        let z = transformer_matrix(&dv(&[1.0, 1.0]));
        let p = dv(&[1.0, 1.0]);
        assert_eq!(p.dot(&(&z * &p)), 8.0);
    }

    #[test]
    fn line_matrix_examples() {
        let topo = build_topology(&chain(1, vec![1])).unwrap();
        let z = line_matrix(1, &topo, &dv(&[0.5])).unwrap();
        assert_eq!(z[(0, 0)], 1.25);
        let p = dv(&[2.0]);
        assert_eq!(p.dot(&(&z * &p)), 5.0);
        assert!(matches!(line_matrix(2, &topo, &dv(&[0.5])), Err(Error::InvalidNode(2))));
        assert!(matches!(line_matrix(0, &topo, &dv(&[0.5])), Err(Error::InvalidNode(0))));
    }

    #[test]
    fn voltage_bound_examples() {
        let mut net = chain(2, vec![1]);
        let (lo, hi) = voltage_bounds(&net, 0.05).unwrap();
        assert!(lo.iter().all(|v| (v + 0.05).abs() < 1e-15));
        assert!(hi.iter().all(|v| (v - 0.05).abs() < 1e-15));
        net.v0_pu = 1.02;
        let (lo, hi) = voltage_bounds(&net, 0.05).unwrap();
        assert!((lo[0] + 0.03).abs() < 1e-12 && (hi[0] - 0.07).abs() < 1e-12);
        assert!(voltage_bounds(&net, 0.0).is_err());
        assert!(voltage_bounds(&net, 1.0).is_err());
    }

    #[test]
    fn price_and_budget_arithmetic() {
        assert!((wholesale_price(800.0, 40.0, &[1.72]) - 868.8).abs() < 1e-9);
        assert!((wholesale_price(200.0, 10.0, &[21.87]) - 418.7).abs() < 1e-9);
        assert_eq!(wholesale_price(200.0, 0.0, &[5.0, 7.0]), 200.0);
        assert_eq!(budget_residual(&[1.0], &[500.0], 200.0, 10.0), -290.0);
        assert_eq!(budget_residual(&[0.0, 0.0], &[500.0, 1.0], 200.0, 10.0), 0.0);
    }

    fn single_region(theta: f64, s0: f64, price: f64) -> FeasibleRegion {
        let mut net = chain(1, vec![1]);
        net.s0_limit_pu = s0;
        let topo = build_topology(&net).unwrap();
        FeasibleRegion::new(
            &topo,
            &net,
            &dv(&[theta]),
            &dv(&[price]),
            PriceModel {
                base_price: 100.0,
                elasticity: 0.0,
            },
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn origin_feasible_and_overloaded_transformer() {
        let region = single_region(0.0, 2.0, 500.0);
        let r = evaluate_constraints(&dv(&[0.0]), &region).unwrap();
        assert!(r.feasible);
        assert!(r.active.contains(&ConstraintId::Budget));
        let r = evaluate_constraints(&dv(&[3.0]), &region).unwrap();
        assert_eq!(r.transformer, 5.0);
        assert!(!r.feasible);
    }

    #[test]
    fn projection_of_member_is_identity() {
        let region = single_region(0.0, 2.0, 500.0);
        let p = dv(&[1.0]);
        assert_eq!(project(&p, &region, None).unwrap().p, p);
    }

    #[test]
    fn projection_onto_transformer_limit() {
        let region = single_region(0.0, 2.0, 500.0);
        let proj = project(&dv(&[3.0]), &region, None).unwrap();
        assert!((proj.p[0] - 2.0).abs() < 1e-7, "{}", proj.p[0]);
        assert!(evaluate_constraints(&proj.p, &region).unwrap().feasible);
    }

    #[test]
    fn infeasible_origin_is_a_configuration_error() {
        let mut net = chain(1, vec![1]);
        net.v0_pu = 1.2;
        let topo = build_topology(&net).unwrap();
        let region = FeasibleRegion::new(
            &topo,
            &net,
            &dv(&[0.0]),
            &dv(&[300.0]),
            PriceModel {
                base_price: 100.0,
                elasticity: 0.0,
            },
            0.05,
        )
        .unwrap();
        assert!(matches!(
            project(&dv(&[5.0]), &region, None),
            Err(Error::InfeasibleRegion(_))
        ));
    }

    #[test]
    fn degenerate_budget_becomes_equality() {
        let net = chain(2, vec![1, 2]);
        let topo = build_topology(&net).unwrap();
        let region = FeasibleRegion::new(
            &topo,
            &net,
            &dv(&[0.0, 0.0]),
            &dv(&[100.0, 100.0]),
            PriceModel {
                base_price: 100.0,
                elasticity: 5.0,
            },
            0.05,
        )
        .unwrap();
        let proj = project(&dv(&[1.0, 3.0]), &region, None).unwrap();
        assert!((proj.p[0] + 1.0).abs() < 1e-7 && (proj.p[1] - 1.0).abs() < 1e-7, "{}", proj.p);
    }

    #[test]
    fn price_response_tightens_budget_towards_base_price() {
        // c(p) = 0.5 - 0.1 (p - 1), c0b = 0.4: budget binds where c(p) = 0.4.
        let mut region = single_region(0.0, 10.0, 0.5);
        region.price_model.base_price = 0.4;
        let region = region.with_price_response(&dv(&[0.1]), &dv(&[1.0])).unwrap();
        assert!((region.budget(&dv(&[2.0]))).abs() < 1e-12);
        let proj = project(&dv(&[5.0]), &region, None).unwrap();
        assert!((proj.p[0] - 2.0).abs() < 1e-7, "{}", proj.p[0]);
        // At the anchor the model agrees with frozen prices.
        let frozen = budget_residual(&[1.0], &[0.5], 0.4, 0.0);
        assert!((region.budget(&dv(&[1.0])) - frozen).abs() < 1e-15);
    }
}
