use std::collections::BTreeMap;

use genius_core::interface::{EvaluatedParameter, ProtocolTemplate};
use genius_core::kg::{DataType, KgNode, KnowledgeGraph, NodeKind};
use genius_core::materials::{Structure, StructureSource};
use genius_core::protocol::{build_document, parse_input, render_document, KPoints, Value};
use proptest::prelude::*;

fn parameter_nodes() -> Vec<KgNode> {
    KnowledgeGraph::shipped()
        .nodes()
        .iter()
        .filter(|n| n.kind == NodeKind::NamelistParameter && n.namelist.is_some())
        .cloned()
        .collect()
}

fn value_for(ty: DataType) -> BoxedStrategy<Value> {
    match ty {
        DataType::Character | DataType::Composite => "[A-Za-z0-9 _.,!'/=-]{0,16}".prop_map(Value::Character).boxed(),
        DataType::Real => prop_oneof![
            prop::num::f64::NORMAL | prop::num::f64::ZERO,
            (-1000i32..1000).prop_map(|i| i as f64 / 8.0),
        ]
        .prop_map(Value::Real)
        .boxed(),
        DataType::Integer => any::<i64>().prop_map(Value::Integer).boxed(),
        DataType::Logical => any::<bool>().prop_map(Value::Logical).boxed(),
    }
}

fn template() -> impl Strategy<Value = ProtocolTemplate> {
    let nodes = parameter_nodes();
    let picked = prop::sample::subsequence(nodes, 0..25);
    let kpoints = prop_oneof![
        Just(KPoints::Gamma),
        ([1u32..20, 1..20, 1..20], [0u32..2, 0..2, 0..2]).prop_map(|(mesh, shift)| KPoints::Automatic { mesh, shift }),
    ];
    (picked, kpoints).prop_flat_map(|(nodes, kpoints)| {
        let values: Vec<_> = nodes.iter().map(|n| prop::option::weighted(0.9, value_for(n.data_type))).collect();
        (Just(nodes), values, Just(kpoints)).prop_map(|(nodes, values, kpoints)| ProtocolTemplate {
            parameters: nodes
                .into_iter()
                .zip(values)
                .map(|(n, value)| EvaluatedParameter {
                    node_name: n.name,
                    namelist: n.namelist,
                    data_type: n.data_type,
                    value,
                    rationale: String::new(),
                })
                .collect(),
            kpoints: Some(kpoints),
            ..ProtocolTemplate::default()
        })
    })
}

fn structure() -> impl Strategy<Value = Structure> {
    let atom = (prop::sample::select(vec!["Si", "O", "Fe", "Cu", "Mo", "S"]), [0.0f64..1.0, 0.0..1.0, 0.0..1.0]);
    (prop::collection::vec(atom, 1..5), 2.0f64..8.0).prop_map(|(atoms, a)| Structure {
        formula: "X".into(),
        source: StructureSource::Fixture,
        pseudopotentials: atoms.iter().map(|(s, _)| (s.to_string(), format!("{s}.upf"))).collect::<BTreeMap<_, _>>(),
        species: atoms.iter().map(|(s, _)| s.to_string()).collect(),
        positions: atoms.iter().map(|(_, p)| *p).collect(),
        cell: [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]],
        metadata: BTreeMap::new(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn parse_inverts_render(t in template(), s in structure()) {
        let doc = build_document(&t, &s).unwrap();
        let text = render_document(&doc);
        let back = parse_input(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(back, doc);
    }
}
