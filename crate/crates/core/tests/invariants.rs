//! Property-based invariants that should hold for arbitrary inputs, not
//! just the hand-picked fixtures in the unit tests.

use std::collections::BTreeSet;

use proptest::prelude::*;
use stareal_core::autocorr::{morans_i_global, morans_i_local};
use stareal_core::fusion::{
    aggregate_points, average_weekly_income, build_panel, impute_missing_counts, CovariateTable,
    EeCount, IncomeBracket, OffsetSource, PointRecord, Provenance, RegionIncome, ServiceCategory,
};
use stareal_core::lattice::{build_adjacency, AdjacencyGraph, ContiguityRule, Region};
use stareal_core::synth::{generate, OffsetModel, SyntheticScenario};

/// Unit grid cell (x, y) as a square region with exact integer corners, so
/// neighbouring cells share vertices bit for bit.
fn grid_region(x: u8, y: u8) -> Region {
    let (x0, y0) = (x as f64, y as f64);
    let ring = vec![
        [x0, y0],
        [x0 + 1.0, y0],
        [x0 + 1.0, y0 + 1.0],
        [x0, y0 + 1.0],
        [x0, y0],
    ];
    Region::new(format!("c{x}_{y}"), vec![ring], 100).unwrap()
}

fn grid_regions(cells: &BTreeSet<(u8, u8)>) -> Vec<Region> {
    cells.iter().map(|&(x, y)| grid_region(x, y)).collect()
}

fn grid_cells() -> impl Strategy<Value = BTreeSet<(u8, u8)>> {
    prop::collection::btree_set((0u8..6, 0u8..6), 2..20)
}

/// Undirected edges as sorted id pairs, for order-free comparison.
fn edge_ids(graph: &AdjacencyGraph) -> BTreeSet<(String, String)> {
    graph
        .edges()
        .into_iter()
        .map(|(i, j)| {
            let a = graph.region_ids()[i].clone();
            let b = graph.region_ids()[j].clone();
            if a <= b {
                (a, b)
            } else {
                (b, a)
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn adjacency_does_not_depend_on_region_order(
        (cells, perm) in grid_cells().prop_flat_map(|cells| {
            let n = cells.len();
            (Just(cells), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
        }),
        queen in any::<bool>(),
    ) {
        let rule = if queen { ContiguityRule::Queen } else { ContiguityRule::Rook };
        let regions = grid_regions(&cells);
        let base = build_adjacency(&regions, rule, 0.0).unwrap();
        let shuffled: Vec<Region> = perm.iter().map(|&k| regions[k].clone()).collect();
        let reordered = build_adjacency(&shuffled, rule, 0.0).unwrap();
        prop_assert_eq!(edge_ids(&base), edge_ids(&reordered));
    }

    #[test]
    fn grid_contiguity_matches_the_combinatorial_definition(cells in grid_cells()) {
        let cell_list: Vec<(u8, u8)> = cells.iter().copied().collect();
        let regions = grid_regions(&cells);
        let queen = build_adjacency(&regions, ContiguityRule::Queen, 0.0).unwrap();
        let rook = build_adjacency(&regions, ContiguityRule::Rook, 0.0).unwrap();

        // Symmetric, irreflexive neighbour lists.
        for graph in [&queen, &rook] {
            for i in 0..graph.n_regions() {
                let neighbors = graph.neighbors(i).unwrap();
                prop_assert!(!neighbors.contains(&i));
                for &j in neighbors {
                    prop_assert!(graph.neighbors(j).unwrap().contains(&i));
                }
            }
        }

        // On a unit grid the rules have exact combinatorial counterparts:
        // rook = cells at L1 distance 1, queen = Chebyshev distance 1.
        let expected = |chebyshev: bool| -> BTreeSet<(usize, usize)> {
            let mut out = BTreeSet::new();
            for i in 0..cell_list.len() {
                for j in (i + 1)..cell_list.len() {
                    let dx = (cell_list[i].0 as i32 - cell_list[j].0 as i32).abs();
                    let dy = (cell_list[i].1 as i32 - cell_list[j].1 as i32).abs();
                    let touches = if chebyshev {
                        dx.max(dy) == 1
                    } else {
                        dx + dy == 1
                    };
                    if touches {
                        out.insert((i, j));
                    }
                }
            }
            out
        };
        let queen_edges: BTreeSet<(usize, usize)> = queen.edges().into_iter().collect();
        let rook_edges: BTreeSet<(usize, usize)> = rook.edges().into_iter().collect();
        prop_assert_eq!(&queen_edges, &expected(true));
        prop_assert_eq!(&rook_edges, &expected(false));
        prop_assert!(rook_edges.is_subset(&queen_edges));
    }

    #[test]
    fn morans_i_ignores_region_labels(
        (cells, perm, values) in grid_cells().prop_flat_map(|cells| {
            let n = cells.len();
            (
                Just(cells),
                Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
                prop::collection::vec(-50.0f64..50.0, n),
            )
        })
    ) {
        let regions = grid_regions(&cells);
        let graph = build_adjacency(&regions, ContiguityRule::Queen, 0.0).unwrap();
        prop_assume!(graph.w_total() > 0);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        prop_assume!(ss > 1e-9);

        // Move region k to position perm[k] everywhere.
        let n = values.len();
        let mut ids2 = vec![String::new(); n];
        let mut values2 = vec![0.0; n];
        for k in 0..n {
            ids2[perm[k]] = graph.region_ids()[k].clone();
            values2[perm[k]] = values[k];
        }
        let edges2: Vec<(usize, usize)> = graph
            .edges()
            .into_iter()
            .map(|(i, j)| (perm[i], perm[j]))
            .collect();
        let graph2 = AdjacencyGraph::from_edges(ids2, &edges2).unwrap();

        let a = morans_i_global(&values, &graph).unwrap();
        let b = morans_i_global(&values2, &graph2).unwrap();
        prop_assert!(
            (a - b).abs() <= 1e-12 * a.abs().max(1.0),
            "I changed under relabelling: {a} vs {b}"
        );
    }

    #[test]
    fn local_moran_sums_to_the_global_statistic(
        (cells, values) in grid_cells().prop_flat_map(|cells| {
            let n = cells.len();
            (Just(cells), prop::collection::vec(-50.0f64..50.0, n))
        })
    ) {
        let regions = grid_regions(&cells);
        let graph = build_adjacency(&regions, ContiguityRule::Queen, 0.0).unwrap();
        prop_assume!(graph.w_total() > 0);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        prop_assume!(ss > 1e-9);

        let global = morans_i_global(&values, &graph).unwrap();
        let locals = morans_i_local(&values, &graph).unwrap();
        let lhs: f64 = locals.iter().sum();
        let rhs = global * graph.w_total() as f64;
        prop_assert!(
            (lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0),
            "sum of local I {lhs} != global x weight total {rhs}"
        );
    }

    #[test]
    fn point_aggregation_conserves_every_category(
        pts in prop::collection::vec((-0.5f64..2.5, -0.5f64..1.5, 0usize..5), 0..120)
    ) {
        let regions = vec![grid_region(0, 0), grid_region(1, 0)];
        let points: Vec<PointRecord> = pts
            .iter()
            .enumerate()
            .map(|(k, &(x, y, c))| {
                PointRecord::new(x, y, ServiceCategory::ALL[c], format!("p{k}")).unwrap()
            })
            .collect();
        let aggregate = aggregate_points(&points, &regions).unwrap();

        for category in ServiceCategory::ALL {
            let supplied = points.iter().filter(|p| p.category == category).count() as u64;
            prop_assert_eq!(aggregate.category_total(category), supplied);
        }
        let assigned: u64 = ServiceCategory::ALL
            .iter()
            .map(|&c| aggregate.counts_for(c).iter().sum::<u64>())
            .sum();
        prop_assert_eq!(assigned + aggregate.unassigned_total(), points.len() as u64);

        // Reruns are bit-identical.
        prop_assert_eq!(&aggregate, &aggregate_points(&points, &regions).unwrap());
    }

    #[test]
    fn imputation_never_touches_observed_cells(
        (cells, populations) in (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::option::of(0u64..500), n),
                prop::collection::vec(1u64..10_000, n),
            )
        })
    ) {
        prop_assume!(cells.iter().any(Option::is_some));
        let first = impute_missing_counts(&cells, &populations).unwrap();
        let second = impute_missing_counts(&cells, &populations).unwrap();
        prop_assert_eq!(&first, &second);

        prop_assert_eq!(first.counts.len(), cells.len());
        for (k, cell) in cells.iter().enumerate() {
            match *cell {
                Some(v) => {
                    prop_assert_eq!(first.counts[k], v);
                    prop_assert_eq!(first.provenance[k], Provenance::Observed);
                }
                None => prop_assert!(first.provenance[k] != Provenance::Observed),
            }
        }
        if cells.iter().all(Option::is_some) {
            prop_assert!(first.method.is_none());
        } else {
            prop_assert!(first.method.is_some());
        }
    }

    #[test]
    fn income_average_ignores_frequency_scale(
        freqs in prop::collection::vec(0u64..500, 6),
        scale in 2u64..10,
    ) {
        let bounds: [(f64, Option<f64>); 6] = [
            (0.0, Some(149.0)),
            (150.0, Some(299.0)),
            (300.0, Some(599.0)),
            (600.0, Some(999.0)),
            (1000.0, Some(1499.0)),
            (1500.0, None),
        ];
        let make = |mult: u64| {
            RegionIncome::new(
                bounds
                    .iter()
                    .zip(&freqs)
                    .map(|(&(lower, upper), &frequency)| IncomeBracket {
                        lower,
                        upper,
                        frequency: frequency * mult,
                    })
                    .collect(),
                3 * mult,
                5 * mult,
                7 * mult,
            )
            .unwrap()
        };
        let base = average_weekly_income(&make(1), 1.5).unwrap();
        let scaled = average_weekly_income(&make(scale), 1.5).unwrap();
        match (base, scaled) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
                // Bounded by the smallest and largest bracket midpoints.
                prop_assert!((74.5..=2250.0).contains(&x));
            }
            _ => prop_assert!(false, "scaling frequencies changed definedness"),
        }
    }

    #[test]
    fn panels_are_dense_grids_that_conserve_counts(
        (n_regions, span, events) in (2usize..6, 1i32..5).prop_flat_map(|(r, span)| {
            (
                Just(r),
                Just(span),
                prop::collection::vec((0..r, 0..span, 0u64..50), 0..30),
            )
        })
    ) {
        let regions: Vec<Region> = (0..n_regions).map(|i| grid_region(i as u8, 0)).collect();
        let table =
            CovariateTable::new(regions.iter().map(|r| r.id.clone()).collect()).unwrap();
        let ee: Vec<EeCount> = events
            .iter()
            .map(|&(i, offset, count)| EeCount {
                region_id: regions[i].id.clone(),
                year: 2000 + offset,
                count,
            })
            .collect();
        let years = 2000..=(2000 + span - 1);
        let panel = build_panel(&ee, &table, &regions, years, OffsetSource::Population).unwrap();

        prop_assert_eq!(panel.n_rows(), n_regions * span as usize);
        let supplied: u64 = events.iter().map(|e| e.2).sum();
        let kept: u64 = panel.rows.iter().map(|row| row.count).sum();
        prop_assert_eq!(supplied, kept);
        let mut seen = BTreeSet::new();
        for row in &panel.rows {
            prop_assert!(seen.insert((row.region_index, row.year_index)));
            prop_assert!(row.region_index < n_regions);
            prop_assert!(row.year_index < span as usize);
        }
    }

    #[test]
    fn synthetic_lattices_are_exactly_recoverable(seed in any::<u64>(), n in 5usize..35) {
        let mut scenario = SyntheticScenario::new(n, 1, -5.0, vec![], 1.0, 1.0, 10.0, seed);
        scenario.offsets = OffsetModel::Constant(500.0);
        let bundle = generate(&scenario).unwrap();
        let rebuilt = build_adjacency(&bundle.regions, ContiguityRule::Queen, 0.0).unwrap();
        prop_assert_eq!(&rebuilt, &bundle.graph);
    }
}
