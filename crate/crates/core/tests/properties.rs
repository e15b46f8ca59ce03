use std::collections::BTreeMap;

use ngdb_core::bench::{Mixture, Workload};
use ngdb_core::eval::filtered_rank;
use ngdb_core::query::{add_gradient_nodes, Dag, DagOptions, QueryInstance, QueryPattern};
use ngdb_core::sampler::{apply_floor, N_PATTERNS};
use proptest::prelude::*;

fn instance(p: usize, seed: u32) -> QueryInstance {
    let pattern = QueryPattern::ALL[p];
    let a = pattern.arity();
    QueryInstance::new(pattern, (0..a.anchors as u32).map(|i| (seed + i) % 50).collect(), (0..a.relations as u32).map(|i| (seed * 3 + i) % 7).collect())
}

proptest! {
    #[test]
    fn fused_dag_is_sum_of_parts(ps in prop::collection::vec((0..14usize, 0..1000u32), 1..40), semantic in any::<bool>()) {
        let qs: Vec<_> = ps.iter().map(|&(p, s)| instance(p, s)).collect();
        let opts = DagOptions { semantic };
        let fused = Dag::from_queries(&qs, opts).unwrap();
        let parts: usize = qs.iter().map(|q| Dag::from_queries(std::slice::from_ref(q), opts).unwrap().len()).sum();
        prop_assert_eq!(fused.len(), parts);
        prop_assert_eq!(fused.n_queries(), qs.len());
        let order = fused.topo_order().unwrap();
        prop_assert_eq!(order.len(), fused.len());
        let train = add_gradient_nodes(&fused).unwrap();
        prop_assert_eq!(train.len(), 2 * fused.len());
        prop_assert!(train.topo_order().is_ok());
    }

    #[test]
    fn floor_keeps_a_distribution(raw in prop::array::uniform14(0.0f64..10.0), floor in 0.0f64..0.1) {
        let s: f64 = raw.iter().sum::<f64>() + 1e-9;
        let w: [f64; N_PATTERNS] = raw.map(|x| (x + 1e-9 / 14.0) / s);
        let out = apply_floor(w, floor);
        let f = floor.min(1.0 / N_PATTERNS as f64);
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(out.iter().all(|&x| x >= f - 1e-12));
    }

    #[test]
    fn apportionment_sums_to_total(ws in prop::collection::btree_map(0..14usize, 0.01f64..5.0, 1..14), total in 1usize..5000) {
        let m: BTreeMap<QueryPattern, f64> = ws.iter().map(|(&p, &w)| (QueryPattern::ALL[p], w)).collect();
        let sum: f64 = m.values().sum();
        let wl = Workload::new(&Mixture::Custom(m.clone()), total, 0).unwrap();
        prop_assert_eq!(wl.counts.values().sum::<usize>(), total);
        for (p, &c) in &wl.counts {
            let quota = m[p] / sum * total as f64;
            prop_assert!((c as f64 - quota).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn filtering_never_worsens_rank(scores in prop::collection::vec(-5.0f64..5.0, 2..60), t in 0usize..60, mask in prop::collection::vec(any::<bool>(), 60)) {
        let target = (t % scores.len()) as u32;
        let filter: Vec<u32> = (0..scores.len() as u32).filter(|&i| i != target && mask[i as usize]).collect();
        let open = filtered_rank(&scores, target, &[]).unwrap();
        let closed = filtered_rank(&scores, target, &filter).unwrap();
        prop_assert!(closed <= open && closed >= 1);
    }
}
