mod common;

use common::{cluster, random_rotation, rotate, small_config};
use molekit::graph::build_graph;
use molekit::mole::GlobalEmbedding;
use molekit::potential::REFERENCE_KAPPA_EQUIVARIANT;
use molekit::systems::{AtomicSystem, SystemHeader};
use molekit::{merge_model, PotentialModel};
use proptest::prelude::*;

fn energy(m: &PotentialModel, s: &AtomicSystem) -> f64 {
    m.forward_energy(s, &build_graph(s, m.config.cutoff, None).unwrap()).unwrap().energy
}

fn forces(m: &PotentialModel, s: &AtomicSystem) -> Vec<[f64; 3]> {
    m.energy_and_forces(s, &build_graph(s, m.config.cutoff, None).unwrap()).unwrap().1
}

#[test]
fn isolated_atom_is_finite_and_extensive() {
    let m = PotentialModel::new(small_config(4), 1).unwrap();
    let one = AtomicSystem::molecule(vec![[0.0; 3]], vec![6], "lj-a");
    let e1 = energy(&m, &one);
    assert!(e1.is_finite());
    assert_eq!(forces(&m, &one), vec![[0.0; 3]]);
    let mut far = AtomicSystem::molecule(vec![[0.0; 3], [0.0, 0.0, 10.0]], vec![6, 6], "lj-a");
    // Beyond the cutoff the energy does not depend on the separation.
    let e2 = energy(&m, &far);
    far.positions[1] = [0.0, 20.0, 0.0];
    assert!((energy(&m, &far) - e2).abs() < 1e-12);
    assert!(forces(&m, &far).iter().all(|f| f.iter().all(|x| *x == 0.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn energy_invariances(seed in 0u64..1000, k in prop::sample::select(vec![1usize, 4])) {
        let m = PotentialModel::new(small_config(k), seed).unwrap();
        let s = cluster("lj-b", 10, seed);
        let e = energy(&m, &s);

        let mut perm: Vec<usize> = (0..s.len()).collect();
        perm.rotate_left((seed % 9 + 1) as usize);
        perm.swap(0, 3);
        let mut p = s.clone();
        p.positions = perm.iter().map(|&i| s.positions[i]).collect();
        p.species = perm.iter().map(|&i| s.species[i]).collect();
        prop_assert!((energy(&m, &p) - e).abs() <= 1e-12 * (1.0 + e.abs()));

        let mut t = s.clone();
        t.positions.iter_mut().for_each(|x| { x[0] += 3.7; x[1] -= 11.0; x[2] += 0.25; });
        prop_assert!((energy(&m, &t) - e).abs() <= 1e-9 * (1.0 + e.abs()));

        let r = random_rotation(seed + 1);
        let mut rs = s.clone();
        rs.positions = s.positions.iter().map(|x| rotate(&r, x)).collect();
        prop_assert!((energy(&m, &rs) - e).abs() <= 1e-9 * (1.0 + e.abs()));

        // Forces rotate with the frame, both conservative and direct.
        let f = forces(&m, &s);
        let fr = forces(&m, &rs);
        for (a, b) in f.iter().zip(&fr) {
            let ra = rotate(&r, a);
            for c in 0..3 { prop_assert!((ra[c] - b[c]).abs() <= 1e-9 * (1.0 + a[c].abs())); }
        }
        let g = build_graph(&s, 3.0, None).unwrap();
        let gr = build_graph(&rs, 3.0, None).unwrap();
        let d = m.forces_direct(&s, &g).unwrap();
        let dr = m.forces_direct(&rs, &gr).unwrap();
        for (a, b) in d.iter().zip(&dr) {
            let ra = rotate(&r, a);
            for c in 0..3 { prop_assert!((ra[c] - b[c]).abs() <= 1e-9 * (1.0 + a[c].abs())); }
        }
    }

    #[test]
    fn net_force_vanishes(seed in 0u64..1000) {
        let m = PotentialModel::new(small_config(4), seed).unwrap();
        let s = cluster("morse", 14, seed);
        let f = forces(&m, &s);
        let total: f64 = f.iter().map(|x| (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()).sum();
        for c in 0..3 {
            let net: f64 = f.iter().map(|x| x[c]).sum();
            prop_assert!(net.abs() <= 1e-9 * total, "net {net} vs {total}");
        }
    }

    #[test]
    fn router_outputs_lie_on_simplex(seed in any::<u64>(), charge in -8i32..=8, spin in 0u32..=8, n in 1usize..30) {
        let m = PotentialModel::new(small_config(8), seed % 64).unwrap();
        let species: Vec<u8> = (0..n).map(|i| 1 + ((seed >> (i % 60)) % 20) as u8).collect();
        let a = m.route(&SystemHeader::new(&species, charge, spin, "lj-b")).unwrap();
        prop_assert!((a.alpha().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(a.alpha().iter().all(|x| *x >= 0.0));
    }
}

#[test]
fn random_embeddings_route_onto_simplex() {
    use rand::{Rng, SeedableRng};
    let m = PotentialModel::new(small_config(8), 9).unwrap();
    let dim = m.global_embedding(&SystemHeader::new(&[1], 0, 0, "lj-a")).unwrap().0.len();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let e = GlobalEmbedding((0..dim).map(|_| rng.random_range(-5.0..5.0)).collect());
        let a = m.route_embedding(&e).unwrap();
        assert!((a.alpha().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn zero_router_is_uniform() {
    let mut m = PotentialModel::new(small_config(5), 2).unwrap();
    m.zero_router();
    let a = m.route(&SystemHeader::new(&[1, 6, 6], 1, 2, "morse")).unwrap();
    assert!(a.alpha().iter().all(|x| (x - 0.2).abs() < 1e-15));
}

#[test]
fn conservative_forces_match_finite_differences() {
    let m = PotentialModel::new(small_config(4), 3).unwrap();
    let s = cluster("lj-a", 8, 3);
    let g = build_graph(&s, 3.0, None).unwrap();
    let f = m.energy_and_forces(&s, &g).unwrap().1;
    let h = 1e-4;
    for i in 0..s.len() {
        for c in 0..3 {
            let mut p = s.clone();
            p.positions[i][c] += h;
            let mut q = s.clone();
            q.positions[i][c] -= h;
            // Same edge set on both sides; the envelope makes it smooth.
            let mut gp = g.clone();
            gp.update_vectors(&p);
            let mut gq = g.clone();
            gq.update_vectors(&q);
            let fd = -(m.forward_energy(&p, &gp).unwrap().energy - m.forward_energy(&q, &gq).unwrap().energy) / (2.0 * h);
            let err = (fd - f[i][c]).abs() / f[i][c].abs().max(1e-3);
            assert!(err <= 1e-4, "atom {i} comp {c}: fd {fd} vs {}", f[i][c]);
        }
    }
}

#[test]
fn energy_is_c1_across_cutoff() {
    let m = PotentialModel::new(small_config(4), 5).unwrap();
    let rc = m.config.cutoff;
    let at = |r: f64| {
        let s = AtomicSystem::molecule(vec![[0.0; 3], [0.0, 1.2, 0.0], [r, 0.0, 0.0]], vec![1, 2, 3], "lj-a");
        energy(&m, &s)
    };
    let (inside, outside) = (at(rc - 1e-6), at(rc + 1e-6));
    assert!((inside - outside).abs() <= 1e-8, "{inside} vs {outside}");
}

#[test]
fn direct_and_conservative_heads_differ() {
    let m = PotentialModel::new(small_config(4), 6).unwrap();
    let s = cluster("lj-a", 10, 6);
    let g = build_graph(&s, 3.0, None).unwrap();
    let d = m.forces_direct(&s, &g).unwrap();
    let c = m.forces_conservative(&s, &g).unwrap();
    let gap: f64 = d.iter().zip(&c).map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).abs()).sum::<f64>()).sum();
    assert!(gap > 1e-6);
    assert!(m.without_direct_head().unwrap().forces_direct(&s, &g).is_err());
}

#[test]
fn merged_census_equals_active_params() {
    for k in [1, 3, 8] {
        let m = PotentialModel::new(small_config(k), 7).unwrap();
        let merged = merge_model(&m, &SystemHeader::new(&[1, 2], 0, 0, "lj-a")).unwrap();
        let c = merged.model().census();
        assert_eq!(c.total_params, m.census().active_params);
        assert_eq!(c.active_params, m.census().active_params);
        let dense = PotentialModel::new(small_config(1), 7).unwrap();
        assert_eq!(dense.census().active_params, m.census().active_params);
    }
}

#[test]
fn k1_merge_is_identity() {
    let m = PotentialModel::new(small_config(1), 8).unwrap();
    let s = cluster("lj-a", 9, 8);
    let merged = merge_model(&m, &s.header()).unwrap();
    assert_eq!(merged.model().params, m.params);
}

#[test]
fn merged_flops_equal_dense_flops() {
    let moe = PotentialModel::new(small_config(8), 1).unwrap();
    let dense = PotentialModel::new(small_config(1), 1).unwrap();
    let s = cluster("lj-a", 16, 1);
    let g = build_graph(&s, 3.0, None).unwrap();
    assert_eq!(moe.count_flops(&s, &g).unwrap().flops_per_call, dense.count_flops(&s, &g).unwrap().flops_per_call);
}

fn lattice(n: usize, a: f64) -> AtomicSystem {
    let mut pos = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                pos.push([i as f64 * a, j as f64 * a, k as f64 * a]);
            }
        }
    }
    let mut s = AtomicSystem::molecule(pos, vec![1; n * n * n], "lj-a");
    let l = n as f64 * a;
    s.cell = Some([[l, 0.0, 0.0], [0.0, l, 0.0], [0.0, 0.0, l]]);
    s.pbc = [true; 3];
    s
}

#[test]
fn kappa_model() {
    let cfg = molekit::ModelConfig { direct_head: false, ..Default::default() };
    let m = PotentialModel::new(cfg, 2).unwrap();
    for seed in 0..2 {
        let s = cluster("lj-a", 48, 100 + seed);
        let g = build_graph(&s, 3.0, None).unwrap();
        let r = m.count_flops(&s, &g).unwrap();
        assert!(common::rel_err(r.kappa, r.kappa_analytic) <= 0.05, "{r:?}");
    }
    // Equal edge density: simple cubic lattices, 32 neighbors each.
    let ks: Vec<f64> = [4, 5]
        .iter()
        .map(|&n| {
            let s = lattice(n, 1.4);
            let g = build_graph(&s, 3.0, None).unwrap();
            assert_eq!(g.n_edges(), 32 * s.len());
            m.count_flops(&s, &g).unwrap().kappa
        })
        .collect();
    assert!(common::rel_err(ks[0], ks[1]) <= 0.01, "{ks:?}");
    assert!(REFERENCE_KAPPA_EQUIVARIANT > ks[0]);
}
