use nasf::search::{decode, Chromosome};
use nasf::{compile, Descriptor, LayerKind, Network64};
use proptest::prelude::*;

/// Transitive closure by Floyd-Warshall: `closure[i][j]` iff a path of
/// length at least one leads from `i` to `j`.
fn closure(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut r = vec![vec![false; n]; n];
    for &(a, b) in edges {
        r[a][b] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if r[i][k] && r[k][j] {
                    r[i][j] = true;
                }
            }
        }
    }
    r
}

/// Brute-force validity: acyclic, one source, one sink, and every node lies
/// on a source-to-sink path.
fn oracle_valid(n: usize, edges: &[(usize, usize)]) -> bool {
    let r = closure(n, edges);
    if (0..n).any(|i| r[i][i]) {
        return false;
    }
    let sources: Vec<usize> = (0..n)
        .filter(|&j| !edges.iter().any(|&(_, b)| b == j))
        .collect();
    let sinks: Vec<usize> = (0..n)
        .filter(|&i| !edges.iter().any(|&(a, _)| a == i))
        .collect();
    if sources.len() != 1 || sinks.len() != 1 {
        return false;
    }
    let (s, t) = (sources[0], sinks[0]);
    (0..n).all(|i| (i == s || r[s][i]) && (i == t || r[i][t]))
}

fn graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1usize..=8).prop_flat_map(|n| {
        let pairs = proptest::collection::vec((0..n, 0..n), 0..=(n * 2));
        (Just(n), pairs).prop_map(|(n, raw)| {
            let mut edges: Vec<(usize, usize)> = Vec::new();
            for e in raw {
                if !edges.contains(&e) {
                    edges.push(e);
                }
            }
            (n, edges)
        })
    })
}

fn build(n: usize, edges: &[(usize, usize)]) -> Descriptor {
    let mut d = Descriptor::new();
    for i in 0..n {
        d.add_layer(LayerKind::ReLU, format!("n{i}")).unwrap();
    }
    for &(a, b) in edges {
        d.connect(&format!("n{a}"), &format!("n{b}")).unwrap();
    }
    d
}

fn chromosome() -> impl Strategy<Value = Chromosome> {
    proptest::array::uniform4(1u32..=50).prop_map(|g| Chromosome::new(g).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn validate_agrees_with_brute_force((n, edges) in graph()) {
        let report = build(n, &edges).validate();
        prop_assert_eq!(report.is_valid(), oracle_valid(n, &edges), "{:?}", report.summary());
        if let Some(order) = report.topological_order {
            let pos = |i: usize| order.iter().position(|name| *name == format!("n{i}")).unwrap();
            prop_assert_eq!(order.len(), n);
            for &(a, b) in &edges {
                prop_assert!(pos(a) < pos(b));
            }
        }
        let cyclic = { let r = closure(n, &edges); (0..n).any(|i| r[i][i]) };
        prop_assert_eq!(build(n, &edges).validate().has_cycle(), cyclic);
    }

    #[test]
    fn serialization_round_trip((n, edges) in graph()) {
        let d = build(n, &edges);
        let back = Descriptor::from_json(&d.to_json()).unwrap();
        prop_assert_eq!(back.to_json(), d.to_json());
        prop_assert_eq!(back.connections(), d.connections());
    }

    #[test]
    fn sequential_adds_form_a_path(n in 1usize..20) {
        let mut d = Descriptor::new();
        let names: Vec<String> = (0..n).map(|_| d.add_layer_sequential(LayerKind::ReLU).unwrap()).collect();
        prop_assert_eq!(d.connections().len(), n - 1);
        for (i, (a, b)) in d.connections().iter().enumerate() {
            prop_assert_eq!(a, &names[i]);
            prop_assert_eq!(b, &names[i + 1]);
        }
        prop_assert_eq!(d.validate().topological_order, Some(names));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn parameter_count_matches_compiled_elements(c in chromosome()) {
        let shape = [3, 32, 32];
        let d = decode(&c, shape, 10);
        let net: Network64 = compile(&d, shape, 0).unwrap();
        let enumerated: usize = net.states().map(|s| s.weights.data().len() + s.biases.data().len()).sum();
        let counted = d.count_parameters(shape).unwrap();
        prop_assert_eq!(counted, enumerated);
        let [k1, f1, k2, f2] = c.genes().map(|g| g as usize);
        let closed = f1 * (3 * k1 * k1 + 1) + f2 * (f1 * k2 * k2 + 1) + 10 * (f2 * 1024 + 1);
        prop_assert_eq!(counted, closed);
    }
}

#[test]
fn worked_parameter_count() {
    let shape = [3, 32, 32];
    let d = decode(&Chromosome::new([5, 10, 5, 10]).unwrap(), shape, 10);
    let net: Network64 = compile(&d, shape, 0).unwrap();
    let enumerated: usize = net.states().map(|s| s.weights.len() + s.biases.len()).sum();
    assert_eq!(enumerated, 105_680);
    assert_eq!(d.count_parameters(shape).unwrap(), 105_680);
}

#[test]
fn same_padding_keeps_32_by_32_for_every_kernel() {
    for k in 1..=50 {
        let mut d = Descriptor::new();
        d.add_layer_sequential(LayerKind::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: k,
        })
        .unwrap();
        let shapes = d.infer_shapes([1, 32, 32]).unwrap();
        assert_eq!(shapes[0].1, vec![1, 32, 32], "kernel {k}");
        let mut net: Network64 = compile(&d, [1, 32, 32], k as u64).unwrap();
        let out = net
            .forward(&nasf::Tensor64::filled(&[1, 1, 32, 32], 0.5).unwrap())
            .unwrap();
        assert_eq!(out.shape(), [1, 1, 32, 32], "kernel {k}");
    }
}
