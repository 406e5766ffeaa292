//! Randomized invariants of the linear operators, projections and file formats.

use kdeq_core::fixed_point::project_dc;
use kdeq_core::hankel::{conv_adjoint, conv_forward, hankel_adjoint, hankel_lift, FilterBank, Window};
use kdeq_core::io::{self, Dtype};
use kdeq_core::rng::{self, seeded_grid};
use kdeq_core::synth::{gen_mask, MaskKind, MaskSpec};
use kdeq_core::Dims;
use proptest::prelude::*;

fn bank(w: Window, coils: usize, count: usize, seed: u64) -> FilterBank {
    let mut r = rng::rng(seed);
    let coeffs = (0..w.taps() * coils * count).map(|_| rng::complex_normal(&mut r)).collect();
    FilterBank::new(w, coils, count, coeffs).unwrap()
}

fn shape() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    (4usize..12, 1usize..10, 1usize..4).prop_flat_map(|(n1, n2, nc)| (Just(n1), Just(n2), Just(nc), 1..=n1.min(4), 1..=n2.min(4)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_adjoint_matches_inner_product((n1, n2, nc, d1, d2) in shape(), count in 1usize..4, seed in any::<u64>()) {
        let dims = Dims::new(n1, n2, nc).unwrap();
        let s = bank(Window::new(d1, d2).unwrap(), nc, count, seed);
        let x = seeded_grid(dims, seed ^ 1);
        let u = seeded_grid(Dims::new(n1, n2, count).unwrap(), seed ^ 2);
        let lhs = conv_forward(&x, &s).unwrap().dot(&u);
        let rhs = x.dot(&conv_adjoint(&u, &s).unwrap());
        prop_assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + lhs.norm()), "{lhs} vs {rhs}");
    }

    #[test]
    fn lift_then_adjoint_counts_each_entry_taps_times((n1, n2, nc, d1, d2) in shape(), seed in any::<u64>()) {
        let w = Window::new(d1, d2).unwrap();
        let x = seeded_grid(Dims::new(n1, n2, nc).unwrap(), seed);
        let back = hankel_adjoint(&hankel_lift(&x, w).unwrap(), x.dims(), w).unwrap();
        prop_assert!(back.distance(&x.scaled(w.taps() as f64)) <= 1e-12 * x.norm() * w.taps() as f64);
    }

    #[test]
    fn dc_projection_is_idempotent_and_exact((n1, n2, nc, _, _) in shape(), accel in 1.0f64..4.0, seed in any::<u64>()) {
        let dims = Dims::new(n1, n2, nc).unwrap();
        let m = gen_mask(&MaskSpec::new(MaskKind::Random2d, accel, 1, 1, seed), n1, n2).unwrap();
        let y = m.apply(&seeded_grid(dims, seed ^ 3)).unwrap();
        let x = seeded_grid(dims, seed ^ 4);
        let p = project_dc(&x, &m, &y).unwrap();
        prop_assert!(project_dc(&p, &m, &y).unwrap().bitwise_eq(&p));
        prop_assert!(m.apply(&p).unwrap().bitwise_eq(&y));
        prop_assert!(m.apply_complement(&p).unwrap().bitwise_eq(&m.apply_complement(&x).unwrap()));
    }

    #[test]
    fn grid_encoding_roundtrips((n1, n2, nc, _, _) in shape(), seed in any::<u64>()) {
        let g = seeded_grid(Dims::new(n1, n2, nc).unwrap(), seed);
        let back = io::read_grid(&io::encode_grid(&g, Dtype::F64).unwrap()[..]).unwrap();
        prop_assert!(back.bitwise_eq(&g));
    }

    #[test]
    fn mask_encoding_roundtrips(n1 in 4usize..40, n2 in 1usize..40, accel in 1.0f64..6.0, seed in any::<u64>()) {
        let kind = if n2 == 1 { MaskKind::Random1d } else { MaskKind::Random2d };
        let m = gen_mask(&MaskSpec::new(kind, accel, 1, 1, seed), n1, n2).unwrap();
        prop_assert_eq!(io::read_mask(&io::encode_mask(&m).unwrap()[..]).unwrap(), m);
    }
}
