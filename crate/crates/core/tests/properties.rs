use fedsim::data::{self, PartitionParams, Scheme};
use fedsim::diagnostics;
use fedsim::fedreg;
use fedsim::fl::{self, ClientUpdate};
use fedsim::privacy::{self, DpConfig};
use fedsim::rng::{self, Purpose};
use fedsim::ParamVector;
use proptest::prelude::*;
use rand::SeedableRng;

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_norm_never_exceeds_bound(v in vector(12), c in 1e-3f64..10.0) {
        let g = ParamVector::from_vec(v.clone());
        let clipped = privacy::clip(&g, c);
        prop_assert!(clipped.norm() <= c);
        if g.norm() <= c {
            prop_assert_eq!(clipped.as_slice(), g.as_slice());
        } else {
            let cos = clipped.dot(&g).unwrap() / (clipped.norm() * g.norm());
            prop_assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dp_noise_is_reproducible(v in vector(6), seed in any::<u64>()) {
        let g = ParamVector::from_vec(v);
        let dp = DpConfig { clip_bound: 1.0, noise_scale: 0.5 };
        let a = privacy::clip_and_noise(&g, &dp, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = privacy::clip_and_noise(&g, &dp, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn modified_gradient_is_orthogonal(g in vector(9), h in vector(9)) {
        let (g, h) = (ParamVector::from_vec(g), ParamVector::from_vec(h));
        prop_assume!(h.norm() > 1e-3);
        let mg = fedreg::modified_gradient(&g, &h).unwrap();
        prop_assert!(mg.dot(&h).unwrap().abs() <= 1e-12 * (1.0 + g.norm() * h.norm()));
    }

    #[test]
    fn projection_satisfies_both_half_spaces(
        local in vector(5), anchor in vector(5), gs in vector(5), gp in vector(5)
    ) {
        let pv = ParamVector::from_vec;
        let (local, anchor, g_s, g_p) = (pv(local), pv(anchor), pv(gs), pv(gp));
        let (w_s, w_p) = fedreg::project_weights(&local, &anchor, &g_s, &g_p).unwrap();
        prop_assert!(w_s >= 0.0 && w_p >= 0.0);
        let after_s = local.axpy(-w_s, &g_s).unwrap();
        let slack = anchor.sub(&after_s).unwrap().dot(&g_s).unwrap();
        prop_assert!(slack >= -1e-9 * (1.0 + g_s.norm().powi(2) * local.norm()));
        let after_p = after_s.axpy(-w_p, &g_p).unwrap();
        let slack = anchor.sub(&after_p).unwrap().dot(&g_p).unwrap();
        prop_assert!(slack >= -1e-9 * (1.0 + g_p.norm().powi(2) * local.norm()));
    }

    #[test]
    fn averaging_stays_within_coordinate_bounds(rows in prop::collection::vec(vector(4), 1..6)) {
        let updates: Vec<ClientUpdate> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut u = ClientUpdate::new(i, ParamVector::from_vec(r.clone()));
                u.n_examples = i + 1;
                u
            })
            .collect();
        for avg in [fl::aggregate_average(&updates).unwrap(), fl::aggregate_weighted(&updates).unwrap()] {
            for j in 0..4 {
                let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(avg[j] >= lo - 1e-9 && avg[j] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn partitions_are_disjoint_and_nonempty(
        seed in 0u64..1000,
        n_clients in 1usize..12,
        scheme in prop_oneof![Just(Scheme::UniformRandom), Just(Scheme::PowerLawOneClass), Just(Scheme::OneClass)],
    ) {
        let ds = data::synth_blobs(4, 3, 25, 0.2, seed).unwrap();
        match data::partition(&ds, scheme, n_clients, seed, &PartitionParams::default()) {
            Ok(p) => {
                prop_assert_eq!(p.n_clients(), n_clients);
                prop_assert!(p.validate(&ds).is_ok());
                if scheme == Scheme::UniformRandom {
                    prop_assert_eq!(p.sizes().iter().sum::<usize>(), ds.len() / n_clients * n_clients);
                }
                if scheme == Scheme::OneClass && n_clients > 1 {
                    for c in 0..n_clients {
                        prop_assert_eq!(p.client_labels(&ds, c).len(), 1);
                    }
                }
                let again = data::partition(&ds, scheme, n_clients, seed, &PartitionParams::default()).unwrap();
                prop_assert_eq!(p, again);
            }
            Err(e) => prop_assert!(matches!(e, fedsim::Error::Infeasible(_)), "{}", e),
        }
    }

    #[test]
    fn client_sampling_is_sorted_and_distinct(seed in any::<u64>(), n in 1usize..50, k_frac in 0.0f64..1.0) {
        let k = ((n as f64 * k_frac) as usize).max(1);
        let s = fl::sample_clients(n, k, &mut rng::stream(seed, Purpose::Sampling, 1, 0)).unwrap();
        prop_assert_eq!(s.len(), k);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&c| c < n));
    }

    #[test]
    fn derived_seeds_separate_purposes(master in any::<u64>(), round in 0u64..1000, client in 0u64..1000) {
        let a = rng::derive_seed(master, Purpose::LocalShuffle, round, client);
        prop_assert_ne!(a, rng::derive_seed(master, Purpose::DpNoise, round, client));
        prop_assert_ne!(a, rng::derive_seed(master, Purpose::LocalShuffle, round + 1, client));
        prop_assert_ne!(a, rng::derive_seed(master, Purpose::LocalShuffle, round, client + 1));
        prop_assert_eq!(a, rng::derive_seed(master, Purpose::LocalShuffle, round, client));
    }

    #[test]
    fn rounds_to_fraction_sentinel(acc in prop::collection::vec(0.0f64..1.0, 1..30), reference in 0.05f64..1.0, a in 0.1f64..1.0) {
        let got = diagnostics::rounds_to_fraction(&acc, reference, a);
        let best = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(got.is_none(), best < a * reference);
        if let Some(r) = got {
            prop_assert!(acc[r - 1] >= a * reference);
            prop_assert!(acc[..r - 1].iter().all(|&v| v < a * reference));
        }
    }

    #[test]
    fn psnr_is_symmetric_and_decreasing(x in prop::collection::vec(0.0f64..1.0, 16), noise in 0.01f64..0.2) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { noise } else { -noise }).collect();
        let z: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 2.0 * noise } else { -2.0 * noise }).collect();
        let a = privacy::psnr(&y, &x, 1.0).unwrap();
        prop_assert!((a - privacy::psnr(&x, &y, 1.0).unwrap()).abs() < 1e-12);
        prop_assert!(privacy::psnr(&z, &x, 1.0).unwrap() < a);
    }
}
