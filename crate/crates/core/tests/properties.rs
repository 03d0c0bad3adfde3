use proptest::prelude::*;

use upa_core::analysis::{jsd, mjsd, AttentionMap};
use upa_core::geometry::{farthest_point_sample, farthest_point_sample_brute, knn_brute, KdTree, Point};
use upa_core::tensor::Tape;

fn points(max: usize) -> impl Strategy<Value = Vec<Point>> {
    // coarse lattice so that exact distance ties actually happen
    prop::collection::vec(prop::array::uniform3((-8i32..8).prop_map(|v| v as f64 * 0.25)), 1..max)
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_map(|v| {
        let s: f64 = v.iter().sum::<f64>() + 1e-3;
        let mut p: Vec<f64> = v.iter().map(|x| (x + 1e-3 / v.len() as f64) / s).collect();
        let t: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= t);
        p
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kd_tree_matches_brute_force(pts in points(200), q in points(20), k in 1usize..12) {
        let k = k.min(pts.len());
        let tree = KdTree::build(&pts).knn(&q, k).unwrap();
        let brute = knn_brute(&pts, &q, k).unwrap();
        prop_assert_eq!(tree, brute);
    }

    #[test]
    fn fps_matches_brute_force(pts in points(120), m in 1usize..40, start in 0usize..1000) {
        let m = m.min(pts.len());
        let start = start % pts.len();
        let a = farthest_point_sample(&pts, m, start).unwrap();
        let b = farthest_point_sample_brute(&pts, m, start).unwrap();
        prop_assert_eq!(&a, &b);
        let mut seen = a.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), m);
    }

    #[test]
    fn jsd_is_symmetric_and_bounded(pq in (1usize..16).prop_flat_map(|n| (distribution(n), distribution(n)))) {
        let (p, q) = pq;
        let a = jsd(&p, &q).unwrap();
        let b = jsd(&q, &p).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(jsd(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mjsd_ignores_key_order(
        rows in (1usize..6, 2usize..8).prop_flat_map(|(n, k)| prop::collection::vec(distribution(k), n)),
        seed in any::<u64>(),
    ) {
        let n = rows.len();
        let k = rows[0].len();
        let mut perm: Vec<usize> = (0..k).collect();
        let mut s = seed;
        for i in (1..k).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let flat: Vec<f64> = rows.concat();
        let shuffled: Vec<f64> = rows.iter().flat_map(|r| perm.iter().map(|&j| r[j]).collect::<Vec<_>>()).collect();
        let a = mjsd(&AttentionMap::dense(1, 1, n, k, flat).unwrap()).unwrap();
        let b = mjsd(&AttentionMap::dense(1, 1, n, k, shuffled).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..500.0, seed in any::<u32>()) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| ((i as f64 + seed as f64) * 0.618).sin() * scale)
            .collect();
        let mut t = Tape::new();
        let x = t.constant(vec![rows, cols], data).unwrap();
        let y = t.softmax_lastdim(x).unwrap();
        for r in t.value(y).chunks_exact(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}
