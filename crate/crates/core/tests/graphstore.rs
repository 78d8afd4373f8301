mod common;

use common::CODEC;
use proptest::prelude::*;
use sgnn::graphstore::{
    convert_pubmed_streams, encrypt_graph, load_content_cites, pad, pad_with, parse_content_cites, read_canonical,
    reconstruct_graph, synthetic, write_canonical, Dataset, GraphShare, PlainGraph, SyntheticSpec,
};
use sgnn::prims::reconstruct_index;
use sgnn::Error;

const CONTENT: &str = "\
p3 1 0 1 b
p1 0 1 0 a
p2 1 1 0 a
p4 0 0 1 b
";

const CITES: &str = "\
p1 p2
p2 p1
p2 p3
p3 p3
p9 p1
p4 p2
";

fn toy() -> PlainGraph {
    parse_content_cites(CONTENT.as_bytes(), "toy.content", CITES.as_bytes(), "toy.cites").unwrap()
}

#[test]
fn content_and_cites_load_into_a_sorted_symmetric_graph() {
    let g = toy();
    assert_eq!(g.names, ["p1", "p2", "p3", "p4"]);
    assert_eq!(g.label_names, ["a", "b"]);
    assert_eq!(g.labels, [0, 0, 1, 1]);
    assert_eq!(g.feature_row(2), [1.0, 0.0, 1.0]);
    // p1-p2 appears twice and p3-p3 is a self-citation; p9 is unknown.
    assert_eq!(g.edge_count(), 3);
    assert_eq!(g.dropped_edges, 1);
    assert_eq!(g.adj[1], [(0, 1.0), (2, 1.0), (3, 1.0)]);
    assert_eq!(g.d_max(), 3);
    assert_eq!(g.sw(), [2.0, 4.0, 2.0, 2.0]);
    g.validate().unwrap();
}

#[test]
fn format_errors_carry_line_numbers() {
    let bad = "p1 0 1 a\np2 0 1 1 a\n";
    let err = parse_content_cites(bad.as_bytes(), "x.content", "".as_bytes(), "x.cites").unwrap_err();
    assert!(
        matches!(err, Error::Format { ref path, line: 2, .. } if path == "x.content"),
        "{err}"
    );
    let err = parse_content_cites(CONTENT.as_bytes(), "x.content", "p1 p2 p3\n".as_bytes(), "x.cites").unwrap_err();
    assert!(matches!(err, Error::Format { line: 1, .. }), "{err}");
    let err = parse_content_cites("p1 zero a\n".as_bytes(), "x.content", "".as_bytes(), "x.cites").unwrap_err();
    assert!(err.to_string().contains("x.content:1"), "{err}");
}

#[test]
fn missing_files_are_named() {
    let err = load_content_cites("/no/such/cora.content".as_ref(), "/no/such/cora.cites".as_ref()).unwrap_err();
    assert!(err.to_string().contains("/no/such/cora.content"), "{err}");
    let err = Dataset::Cora.load("/no/such".as_ref()).unwrap_err();
    assert!(err.to_string().contains("cora.content"), "{err}");
}

#[test]
fn pubmed_tab_files_convert() {
    let nodes = "NODE\tpaper\n\
cat=1,2,3:label\tnumeric:w-rat:0.0\tnumeric:w-insulin:0.0\tstring:summary\n\
12\tlabel=1\tw-rat=0.5\tsummary=w-rat\n\
7\tlabel=3\tw-insulin=0.25\tw-rat=0.1\tsummary=w-insulin,w-rat\n";
    let cites = "DIRECTED\tcites\nNO_FEATURES\n\
33\tpaper:7\t|\tpaper:12\n";
    let (mut content, mut edges) = (Vec::new(), Vec::new());
    convert_pubmed_streams(
        nodes.as_bytes(),
        "nodes.tab",
        cites.as_bytes(),
        &mut content,
        &mut edges,
    )
    .unwrap();
    let g = parse_content_cites(content.as_slice(), "c", edges.as_slice(), "e").unwrap();
    assert_eq!(g.names, ["12", "7"]);
    assert_eq!(g.features, [0.5, 0.0, 0.1, 0.25]);
    assert_eq!(g.labels, [0, 1]);
    assert_eq!(g.edge_count(), 1);
}

#[test]
fn padding_fills_every_row_to_the_max_degree() {
    let g = toy();
    let p = pad(&g);
    assert_eq!(p.d_max, 3);
    assert_eq!(p.ne.len(), 12);
    // p1 has one neighbor; its two dummies point at itself with weight 0.
    assert_eq!(&p.ne[0..3], &[2, 1, 1]);
    assert_eq!(&p.w[0..3], &[1.0, 0.0, 0.0]);
}

#[test]
fn encrypted_graph_reconstructs() {
    let mut g = toy();
    g.select_labeled(1, 3);
    let p = pad(&g);
    let shares = encrypt_graph(&g, &p, CODEC, 5).unwrap();
    assert_ne!(shares[0].features, shares[1].features);
    let back = reconstruct_graph(&shares);
    assert_eq!(back.ne, p.ne);
    assert_eq!(back.w, p.w);
    assert_eq!(back.sw, g.sw());
    assert_eq!(back.features, g.features);
    assert_eq!(back.labels, g.label_matrix());
    assert_eq!(shares[0].summary, g.summary());
}

#[test]
fn neighbor_ids_are_shared_modulo_n() {
    let g = toy();
    let p = pad(&g);
    let shares = encrypt_graph(&g, &p, CODEC, 6).unwrap();
    for (i, &id) in p.ne.iter().enumerate() {
        assert_eq!(reconstruct_index(shares[0].ne[i], shares[1].ne[i], 4), id);
    }
}

#[test]
fn structure_size_depends_only_on_n_and_d_max() {
    let star = parse_content_cites(
        "a 1 x\nb 1 x\nc 1 x\nd 1 x\n".as_bytes(),
        "s",
        "a b\na c\na d\n".as_bytes(),
        "s",
    )
    .unwrap();
    let dense = parse_content_cites(
        "a 1 x\nb 1 x\nc 1 x\nd 1 x\n".as_bytes(),
        "s",
        "a b\na c\na d\nb c\nb d\nc d\n".as_bytes(),
        "s",
    )
    .unwrap();
    assert_eq!(star.d_max(), dense.d_max());
    let s = encrypt_graph(&star, &pad(&star), CODEC, 1).unwrap();
    let d = encrypt_graph(&dense, &pad(&dense), CODEC, 1).unwrap();
    assert_eq!(s[0].structure_words(), d[0].structure_words());
    assert_eq!(s[0].structure_words(), 4 * (2 * 3 + 1));
}

#[test]
fn labeled_selection_takes_per_class_counts() {
    let mut g = synthetic(&SyntheticSpec {
        nodes: 60,
        ..Default::default()
    });
    g.select_labeled(5, 9);
    assert_eq!(g.labeled.len(), 15);
    for c in 0..3 {
        assert_eq!(g.labeled.iter().filter(|&&v| g.labels[v] == c).count(), 5);
    }
    assert_eq!(g.label_matrix().len(), 45);
}

#[test]
fn canonical_and_share_files_round_trip() {
    let mut g = synthetic(&SyntheticSpec {
        weighted: true,
        ..Default::default()
    });
    g.select_labeled(2, 1);
    let mut buf = Vec::new();
    write_canonical(&g, &mut buf).unwrap();
    assert_eq!(&buf[..4], b"SGRF");
    let back = read_canonical(&mut buf.as_slice()).unwrap();
    assert_eq!(back.features, g.features);
    assert_eq!(back.adj, g.adj);
    assert_eq!(back.labels, g.labels);

    let shares = encrypt_graph(&g, &pad(&g), CODEC, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p2.share");
    shares[1].save(&path).unwrap();
    assert_eq!(GraphShare::load(&path).unwrap(), shares[1]);
    let err = read_canonical(&mut &b"SGRX\0\0"[..]).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
}

#[test]
fn shares_are_deterministic_per_seed() {
    let g = toy();
    let a = encrypt_graph(&g, &pad(&g), CODEC, 11).unwrap();
    let b = encrypt_graph(&g, &pad(&g), CODEC, 11).unwrap();
    let c = encrypt_graph(&g, &pad(&g), CODEC, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].ne, c[0].ne);
}

#[test]
fn reference_statistics_are_recorded() {
    let cora = Dataset::Cora.expected();
    assert_eq!(
        (cora.nodes, cora.features, cora.classes, cora.d_max),
        (2708, 1433, 7, 169)
    );
    let pubmed = Dataset::Pubmed.expected();
    assert_eq!(
        (pubmed.nodes, pubmed.features, pubmed.classes, pubmed.d_max),
        (19717, 500, 3, 171)
    );
    assert_eq!(Dataset::parse("citeseer"), Some(Dataset::Citeseer));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_graphs_are_valid_and_symmetric(nodes in 2usize..40, seed: u64, weighted: bool) {
        let g = synthetic(&SyntheticSpec { nodes, weighted, seed, ..Default::default() });
        prop_assert!(g.validate().is_ok());
        for v in 0..nodes {
            for &(u, w) in &g.adj[v] {
                prop_assert!(g.adj[u].contains(&(v, w)));
            }
        }
    }

    #[test]
    fn dummy_choice_does_not_change_weights(seed: u64, shift in 1usize..5) {
        let g = synthetic(&SyntheticSpec { nodes: 10, seed, ..Default::default() });
        let a = pad(&g);
        let b = pad_with(&g, |v| ((v + shift) % 10 + 1) as u64);
        prop_assert_eq!(&a.w, &b.w);
        for (i, (&x, &y)) in a.ne.iter().zip(&b.ne).enumerate() {
            prop_assert!(x == y || a.w[i] == 0.0);
        }
    }
}
