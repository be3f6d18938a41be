use geoloss::camera::{fundamental_matrix, reproject, se3_exp, se3_log, so3_exp, Intrinsics, Pose, Twist};
use geoloss::crossloss::task_weights;
use geoloss::grid::{FlowField, ImageGrid, ScalarMap};
use geoloss::occlusion::range_map;
use geoloss::photometric::direction_weights;
use geoloss::sampler::{sample_bilinear, sample_bilinear_grad};
use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;

fn twist() -> impl Strategy<Value = Twist> {
    (prop::array::uniform3(-1.0f64..1.0), prop::array::uniform3(-2.0f64..2.0)).prop_map(|(w, v)| Twist::new(w, v))
}

fn map(w: usize, h: usize, lo: f64, hi: f64) -> impl Strategy<Value = ScalarMap> {
    prop::collection::vec(lo..hi, w * h).prop_map(move |d| ScalarMap::new(w, h, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn se3_log_inverts_exp(xi in twist()) {
        let back = se3_log(&se3_exp(&xi)).unwrap();
        for (a, b) in xi.0.iter().zip(back.0.iter()) {
            prop_assert!((a - b).abs() < 1e-9, "{xi:?} -> {back:?}");
        }
    }

    #[test]
    fn rotations_stay_orthonormal(w in prop::array::uniform3(-3.0f64..3.0)) {
        let r = so3_exp(&Vector3::from(w));
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).norm() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reprojected_points_satisfy_epipolar_constraint(
        xi in twist(),
        x in 0.0f64..64.0,
        y in 0.0f64..48.0,
        depth in 0.5f64..20.0,
    ) {
        let pose = se3_exp(&xi.scaled(0.2));
        prop_assume!(pose.translation().norm() > 1e-3);
        let k = Intrinsics::new(60.0, 60.0, 32.0, 24.0).unwrap();
        let r = reproject(Vector2::new(x, y), depth, &pose, &k);
        prop_assume!(r.in_front);
        let f = fundamental_matrix(&pose, &k);
        prop_assert!((f.matrix().norm() - 1.0).abs() < 1e-12);
        let res = f.residual(Vector2::new(x, y), r.pixel);
        // algebraic residual scales with pixel coordinates
        prop_assert!(res.abs() < 1e-9 * (1.0 + r.pixel.norm()), "{res}");
    }

    #[test]
    fn direction_weights_multiply_to_one(a in map(6, 5, -30.0, 30.0), b in map(6, 5, -30.0, 30.0)) {
        let (w_bo, w_fo) = direction_weights(&a, &b).unwrap();
        let (v_fo, v_bo) = direction_weights(&b, &a).unwrap();
        for i in 0..a.len() {
            let (p, q) = (w_bo.data()[i], w_fo.data()[i]);
            prop_assert!((p * q - 1.0).abs() < 1e-12);
            prop_assert!(p >= (-0.5f64).exp() && p <= 0.5f64.exp());
            // the smaller error gets the larger weight
            if a.data()[i] < b.data()[i] {
                prop_assert!(p >= q);
            }
            prop_assert_eq!(p, v_bo.data()[i]);
            prop_assert_eq!(q, v_fo.data()[i]);
        }
    }

    #[test]
    fn task_weights_never_both_zero(a in map(6, 5, 0.0, 5.0), b in map(6, 5, 0.0, 5.0), threshold in 0.01f64..0.5) {
        let (w_o, w_d) = task_weights(&a, &b, threshold).unwrap();
        for i in 0..a.len() {
            let (o, d) = (w_o.data()[i], w_d.data()[i]);
            prop_assert!(o == 0.0 || o == 1.0);
            prop_assert!(o + d >= 1.0);
        }
    }

    #[test]
    fn task_weights_ignore_common_shifts(a in map(4, 4, 0.0, 3.0), b in map(4, 4, 0.0, 3.0), shift in -4.0f64..4.0) {
        // shifts by exact binary fractions keep the differences exact
        let shift = (shift * 8.0).round() / 8.0;
        let (w_o, w_d) = task_weights(&a, &b, 0.28).unwrap();
        let (s_o, s_d) = task_weights(&a.map(|v| v + shift), &b.map(|v| v + shift), 0.28).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() < 1e-9;
        for i in 0..a.len() {
            let gap = a.data()[i] - b.data()[i];
            let margin = (0.72f64 / 0.28).ln();
            if close(gap, margin) || close(-gap, margin) {
                continue;
            }
            prop_assert_eq!(w_o.data()[i], s_o.data()[i]);
            prop_assert_eq!(w_d.data()[i], s_d.data()[i]);
        }
    }

    #[test]
    fn range_map_conserves_in_view_mass(u in -0.49f64..0.49, v in -0.49f64..0.49, w in 3usize..12, h in 3usize..12) {
        // a sub-pixel uniform shift keeps every splat inside the grid except at the far borders
        let flow = FlowField::constant(w, h, u, v).unwrap();
        let r = range_map(&flow, w, h);
        let kept_x = w as f64 - u.abs();
        let kept_y = h as f64 - v.abs();
        prop_assert!((r.sum() - kept_x * kept_y).abs() < 1e-9);
        prop_assert!(r.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn sampler_gradient_matches_differences(
        data in prop::collection::vec(-1.0f64..1.0, 5 * 4 * 2),
        x in 0.05f64..3.95,
        y in 0.05f64..2.95,
    ) {
        let grid = ImageGrid::new(5, 4, 2, data).unwrap();
        prop_assume!((x - x.round()).abs() > 1e-3 && (y - y.round()).abs() > 1e-3);
        let g = sample_bilinear_grad(&grid, x, y);
        prop_assert!(g.valid);
        let h = 1e-6;
        for c in 0..2 {
            let fx = (sample_bilinear(&grid, x + h, y).0[c] - sample_bilinear(&grid, x - h, y).0[c]) / (2.0 * h);
            let fy = (sample_bilinear(&grid, x, y + h).0[c] - sample_bilinear(&grid, x, y - h).0[c]) / (2.0 * h);
            prop_assert!((fx - g.dx[c]).abs() < 1e-7, "dx {fx} vs {}", g.dx[c]);
            prop_assert!((fy - g.dy[c]).abs() < 1e-7, "dy {fy} vs {}", g.dy[c]);
        }
        let total: f64 = g.corner_weights.iter().map(|c| c.1).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pose_inverse_composes_to_identity(xi in twist()) {
        let p = se3_exp(&xi);
        let id = p.compose(&p.inverse());
        prop_assert!(id.rotation_angle() < 1e-9);
        prop_assert!(id.translation().norm() < 1e-9);
        let q: Pose = Pose::identity();
        let same = q.compose(&p);
        prop_assert_eq!(same.translation(), p.translation());
    }
}
