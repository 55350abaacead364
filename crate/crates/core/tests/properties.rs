use bilevel_market_core::feasible::{
    evaluate_constraints, line_matrix, project, transformer_matrix, FeasibleRegion, PriceModel,
};
use bilevel_market_core::grid::{
    branch_flows, build_topology, node_voltages, voltage_sensitivity, Line, RadialNetwork,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

/// A random tree on `parents.len()` nodes; node `i + 1` hangs off `parents[i] ≤ i`.
fn tree(parents: &[usize], impedances: &[(f64, f64)], aggregators: &[bool]) -> RadialNetwork {
    let lines = parents
        .iter()
        .zip(impedances)
        .enumerate()
        .map(|(i, (&parent, &(r, x)))| Line {
            node: i + 1,
            parent: parent % (i + 1),
            r_pu: r,
            x_pu: x,
            mva_limit_pu: 2.0,
            label: None,
        })
        .collect();
    let mut aggregator_nodes: Vec<usize> = aggregators
        .iter()
        .enumerate()
        .filter(|(_, a)| **a)
        .map(|(i, _)| i + 1)
        .collect();
    if aggregator_nodes.is_empty() {
        aggregator_nodes.push(parents.len());
    }
    RadialNetwork {
        v0_pu: 1.0,
        s0_limit_pu: 3.0,
        aggregator_nodes,
        lines,
    }
}

fn network() -> impl Strategy<Value = RadialNetwork> {
    (2usize..9).prop_flat_map(|n| {
        (
            proptest::collection::vec(0usize..100, n),
            proptest::collection::vec((0.001f64..0.02, 0.001f64..0.02), n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(parents, z, aggs)| tree(&parents, &z, &aggs))
    })
}

fn injections(net: &RadialNetwork, seed: &[f64]) -> DVector<f64> {
    let n = net.aggregator_nodes.len();
    DVector::from_iterator(n, seed.iter().cycle().take(n).copied())
}

fn children_sum(net: &RadialNetwork, flows: &DVector<f64>, k: usize) -> f64 {
    net.lines.iter().filter(|l| l.parent == k).map(|l| flows[l.node - 1]).sum()
}

fn region(net: &RadialNetwork, theta: &DVector<f64>, prices: &DVector<f64>) -> FeasibleRegion {
    FeasibleRegion::new(
        &build_topology(net).unwrap(),
        net,
        theta,
        prices,
        PriceModel {
            base_price: 150.0,
            elasticity: 20.0,
        },
        0.05,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn descendant_matrix_is_ancestor_transpose(net in network()) {
        let topo = build_topology(&net).unwrap();
        prop_assert_eq!(&topo.d, &topo.u.transpose());
    }

    #[test]
    fn flows_are_conserved_at_every_node(
        net in network(),
        p in proptest::collection::vec(-3.0f64..3.0, 8),
        t in proptest::collection::vec(0.0f64..0.6, 8),
    ) {
        let topo = build_topology(&net).unwrap();
        let p = injections(&net, &p);
        let theta = injections(&net, &t);
        let (real, reactive) = branch_flows(&topo, &p, &theta).unwrap();
        for k in 1..=net.lines.len() {
            let own = net.aggregator_nodes.iter().position(|n| *n == k);
            let (pk, qk) = own.map_or((0.0, 0.0), |i| (p[i], theta[i] * p[i]));
            prop_assert!((real[k - 1] - pk - children_sum(&net, &real, k)).abs() < 1e-12);
            prop_assert!((reactive[k - 1] - qk - children_sum(&net, &reactive, k)).abs() < 1e-12);
        }
    }

    #[test]
    fn flows_and_drops_superpose(
        net in network(),
        a in proptest::collection::vec(-3.0f64..3.0, 8),
        b in proptest::collection::vec(-3.0f64..3.0, 8),
        t in proptest::collection::vec(0.0f64..0.6, 8),
    ) {
        let topo = build_topology(&net).unwrap();
        let (pa, pb) = (injections(&net, &a), injections(&net, &b));
        let theta = injections(&net, &t);
        let sum = &pa + &pb;
        let (fa, _) = branch_flows(&topo, &pa, &theta).unwrap();
        let (fb, _) = branch_flows(&topo, &pb, &theta).unwrap();
        let (fs, _) = branch_flows(&topo, &sum, &theta).unwrap();
        prop_assert!((fs - fa - fb).amax() < 1e-12);
        let v0 = DVector::from_element(net.lines.len(), net.v0_pu);
        let (va, _) = node_voltages(&topo, &net, &pa, &theta).unwrap();
        let (vb, _) = node_voltages(&topo, &net, &pb, &theta).unwrap();
        let (vs, _) = node_voltages(&topo, &net, &sum, &theta).unwrap();
        prop_assert!(((&v0 - vs) - (&v0 - va) - (&v0 - vb)).amax() < 1e-12);
    }

    #[test]
    fn sensitivity_reproduces_drops(
        net in network(),
        p in proptest::collection::vec(-3.0f64..3.0, 8),
        t in proptest::collection::vec(0.0f64..0.6, 8),
    ) {
        let topo = build_topology(&net).unwrap();
        let p = injections(&net, &p);
        let theta = injections(&net, &t);
        let (_, drop) = node_voltages(&topo, &net, &p, &theta).unwrap();
        let m = voltage_sensitivity(&topo, &net, &theta).unwrap();
        prop_assert!((&m * &p - &topo.u * drop).amax() < 1e-13);
    }

    #[test]
    fn quadratic_forms_are_psd_and_match_flows(
        net in network(),
        p in proptest::collection::vec(-3.0f64..3.0, 8),
        t in proptest::collection::vec(0.0f64..0.6, 8),
    ) {
        let topo = build_topology(&net).unwrap();
        let p = injections(&net, &p);
        let theta = injections(&net, &t);
        let (real, reactive) = branch_flows(&topo, &p, &theta).unwrap();
        let min_eigen = |z: DMatrix<f64>| SymmetricEigen::new(z).eigenvalues.min();
        prop_assert!(min_eigen(transformer_matrix(&theta)) >= -1e-12);
        for k in 1..=net.lines.len() {
            let z = line_matrix(k, &topo, &theta).unwrap();
            prop_assert!((p.dot(&(&z * &p)) - real[k - 1].powi(2) - reactive[k - 1].powi(2)).abs() < 1e-12);
            prop_assert!(min_eigen(z) >= -1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_is_a_feasible_idempotent_contraction(
        net in network(),
        a in proptest::collection::vec(-4.0f64..4.0, 8),
        b in proptest::collection::vec(-4.0f64..4.0, 8),
        t in proptest::collection::vec(0.0f64..0.6, 8),
        c in proptest::collection::vec(100.0f64..600.0, 8),
    ) {
        let theta = injections(&net, &t);
        let prices = injections(&net, &c);
        let region = region(&net, &theta, &prices);
        let (x, y) = (injections(&net, &a), injections(&net, &b));
        let px = project(&x, &region, None).unwrap().p;
        let py = project(&y, &region, None).unwrap().p;
        prop_assert!(evaluate_constraints(&px, &region).unwrap().feasible);
        let again = project(&px, &region, Some(&px)).unwrap().p;
        prop_assert!((&again - &px).norm() <= 2e-8);
        prop_assert!((&px - &py).norm() <= (&x - &y).norm() + 1e-9);
    }
}
