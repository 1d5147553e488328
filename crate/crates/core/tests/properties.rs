use pignn::autodiff::Tensor;
use pignn::eval::{armse, FieldSeries};
use pignn::loss::{apply_bc, Discretization};
use pignn::mesh::{generate_mesh, DomainRect, TriMesh};
use pignn::pde::{PdeKind, PdeSpec};
use pignn::stencil::{apply_gradient, apply_laplacian, DegreePolicy};
use proptest::prelude::*;

fn disc(density: usize, jitter: f64, seed: u64) -> Discretization {
    let mesh = generate_mesh(&DomainRect::unit_square(density, jitter, seed)).unwrap();
    Discretization::new(&mesh, DegreePolicy::Auto).unwrap()
}

fn kind() -> impl Strategy<Value = PdeKind> {
    prop_oneof![Just(PdeKind::Heat), Just(PdeKind::Burgers), Just(PdeKind::FitzHughNagumo), Just(PdeKind::HeatInverse)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mesh_text_roundtrip(density in 2usize..12, jitter in 0.0f64..0.3, seed in any::<u64>()) {
        let mesh = generate_mesh(&DomainRect::unit_square(density, jitter, seed)).unwrap();
        let back = TriMesh::from_text(&mesh.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), mesh.to_text());
        prop_assert_eq!(back.nodes.len(), (density + 1) * (density + 1));
    }

    #[test]
    fn boundary_enforcement_is_idempotent(k in kind(), seed in 0u64..50, t in 0.0f64..1.0, fill in -3.0f64..3.0) {
        let d = disc(5, 0.2, seed);
        let spec = PdeSpec::default_for(k);
        let u = Tensor::filled(d.node_count(), spec.components(), fill);
        let once = apply_bc(&u, &spec, t, &d);
        prop_assert_eq!(apply_bc(&once, &spec, t, &d), once.clone());
        for &i in d.interior.iter() {
            prop_assert_eq!(once.row(i), u.row(i));
        }
    }

    #[test]
    fn gradient_exact_on_affine_fields(seed in 0u64..200, a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0) {
        let d = disc(6, 0.25, seed);
        let field: Vec<f64> = d.coords.iter().map(|p| a + b * p[0] + c * p[1]).collect();
        for g in apply_gradient(&d.gradient, &field).unwrap() {
            prop_assert!((g[0] - b).abs() < 1e-10 && (g[1] - c).abs() < 1e-10, "{g:?} vs ({b}, {c})");
        }
        // The difference form maps constants to exactly zero.
        let constant = vec![a; d.node_count()];
        prop_assert!(apply_laplacian(&d.laplacian, &constant).unwrap().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn armse_matches_direct_sum(nodes in 1usize..20, comps in 1usize..3, steps in 1usize..12, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut series = || FieldSeries {
            t0: 0.0,
            dt: 1.0,
            fields: (0..=steps).map(|_| Tensor::from_fn(nodes, comps, |_, _| rng.random_range(-1.0..1.0))).collect(),
        };
        let (p, q) = (series(), series());
        let curve = armse(&p, &q, steps).unwrap();
        let direct: f64 = (1..=steps)
            .flat_map(|s| p.fields[s].data().iter().zip(q.fields[s].data()).map(|(x, y)| (x - y) * (x - y)).collect::<Vec<_>>())
            .sum();
        prop_assert!((curve[steps - 1] - (direct / (nodes * steps) as f64).sqrt()).abs() < 1e-12);
        prop_assert!(armse(&p, &p, steps).unwrap().iter().all(|&e| e == 0.0));
    }
}
