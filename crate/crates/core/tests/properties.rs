mod common;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crystal_infomax::data::structure::element_fractions;
use crystal_infomax::data::supercell::minimum_image_distances;
use crystal_infomax::data::{
    build_supercell, mask_labels, split_train_test, BondTensor, ElementPropertyTable, FeatureScaler,
};
use crystal_infomax::encoder::{Encoder, EncoderInput};
use crystal_infomax::infomax::{
    js_loss, kl_loss, make_false_composition, make_false_permutation, make_false_polymorph,
    sample_in_batch,
};
use crystal_infomax::nn::{Params, Tape};

use common::{random_crystal, small_encoder, tensor};

fn permuted(t: &BondTensor, perm: &[usize]) -> BondTensor {
    let n = perm.len();
    BondTensor {
        crystal_id: t.crystal_id.clone(),
        species: perm.iter().map(|&p| t.species[p].clone()).collect(),
        site_features: Array2::from_shape_fn(t.site_features.dim(), |(i, f)| {
            t.site_features[[perm[i], f]]
        }),
        distances: Array2::from_shape_fn((n, n), |(i, j)| t.distances[[perm[i], perm[j]]]),
    }
}

fn histogram(species: &[String]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for s in species {
        *h.entry(s.clone()).or_insert(0) += 1;
    }
    h
}

fn sorted_distances(t: &BondTensor) -> Vec<u64> {
    let mut d: Vec<u64> = t.distances.iter().map(|v| v.to_bits()).collect();
    d.sort_unstable();
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_is_invariant_to_site_order(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = tensor(&random_crystal("p", n, &mut rng), 10);
        let mut perm: Vec<usize> = (0..t.num_sites()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let p = permuted(&t, &perm);

        let mut params = Params::new();
        let enc = Encoder::new(&mut params, &small_encoder(), &mut rng).unwrap();
        let scaler = FeatureScaler::fit(std::slice::from_ref(&t));
        let run = |x: &BondTensor| {
            let input = EncoderInput::new(&[x], &scaler).unwrap();
            let mut tape = Tape::new();
            let out = enc.forward(&mut tape, &params, &input, false);
            (tape.value(out.local).clone(), tape.value(out.global).clone())
        };
        let (la, ga) = run(&t);
        let (lb, gb) = run(&p);
        let scale = ga.iter().map(|v| v.abs()).fold(1e-12, f64::max);
        for (a, b) in ga.iter().zip(gb.iter()) {
            prop_assert!((a - b).abs() / scale < 1e-9);
        }
        for (i, &pi) in perm.iter().enumerate() {
            for f in 0..la.ncols() {
                prop_assert!((lb[[i, f]] - la[[pi, f]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn minimum_image_distances_are_a_symmetric_periodic_metric(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_crystal("m", n, &mut rng);
        let table = ElementPropertyTable::bundled();
        let sc = build_supercell(&s, 12, table).unwrap();
        prop_assert!(sc.num_sites() <= 12);
        prop_assert_eq!(sc.num_sites() % n, 0);
        let d = minimum_image_distances(&sc);
        let m = d.nrows();
        for i in 0..m {
            prop_assert_eq!(d[[i, i]], 0.0);
            for j in 0..m {
                prop_assert!((d[[i, j]] - d[[j, i]]).abs() < 1e-12);
                prop_assert!(d[[i, j]] >= 0.0);
                for k in 0..m {
                    prop_assert!(d[[i, k]] <= d[[i, j]] + d[[j, k]] + 1e-9);
                }
            }
        }

        let mut shifted = s.clone();
        shifted.frac_coords[0][0] += 1.0;
        let d2 = minimum_image_distances(&build_supercell(&shifted.wrapped(), 12, table).unwrap());
        for (a, b) in d.iter().zip(d2.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn js_loss_rewards_separation(t in -20.0f64..20.0, f in -20.0f64..20.0, step in 0.01f64..5.0) {
        let base = js_loss(t, f);
        prop_assert!(base > 0.0);
        prop_assert!(js_loss(t + step, f) < base);
        prop_assert!(js_loss(t, f - step) < base);
    }

    #[test]
    fn kl_is_minimal_at_the_prior(z in proptest::collection::vec(-3.0f64..3.0, 1..16), ls in -2.0f64..2.0) {
        let sigma = vec![ls.exp(); z.len()];
        let kl = kl_loss(&z, &sigma).unwrap();
        prop_assert!(kl >= kl_loss(&vec![0.0; z.len()], &vec![1.0; z.len()]).unwrap() - 1e-12);
    }

    #[test]
    fn false_samples_keep_their_contracts(seed in any::<u64>(), n in 1usize..5, m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = ElementPropertyTable::bundled();
        let a = tensor(&random_crystal("a", n, &mut rng), 12);
        let b = tensor(&random_crystal("b", m, &mut rng), 12);

        let poly = make_false_polymorph(&a, &b, table).unwrap();
        prop_assert_eq!(&poly.distances, &b.distances);
        let want = element_fractions(&a.species);
        let got = element_fractions(&poly.species);
        let tol = 1.0 / b.num_sites() as f64 + 1e-12;
        for (sym, fa) in &want {
            prop_assert!((got.get(sym).copied().unwrap_or(0.0) - fa).abs() <= tol);
        }
        prop_assert!(got.keys().all(|k| want.contains_key(k)));

        let comp = make_false_composition(&a, &b, table).unwrap();
        prop_assert_eq!(sorted_distances(&comp), sorted_distances(&a));
        let donor = element_fractions(&b.species);
        prop_assert!(element_fractions(&comp.species).keys().all(|k| donor.contains_key(k)));

        match make_false_permutation(&a, table, &mut rng).unwrap() {
            Some(p) => {
                prop_assert_eq!(histogram(&p.species), histogram(&a.species));
                prop_assert!(p.species != a.species);
                prop_assert_eq!(&p.distances, &a.distances);
            }
            None => prop_assert_eq!(histogram(&a.species).len(), 1),
        }
    }

    #[test]
    fn in_batch_draws_never_hit_the_owner(seed in any::<u64>(), counts in proptest::collection::vec(1usize..30, 2..8)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for owner in 0..counts.len() {
            for _ in 0..20 {
                let (k, c) = sample_in_batch(&counts, owner, &mut rng).unwrap();
                prop_assert!(k != owner);
                prop_assert!(c < counts[k]);
            }
        }
    }

    #[test]
    fn split_and_mask_are_seeded_partitions(n in 5usize..300, seed in any::<u64>(), frac in 0.0f64..1.0) {
        let ids: Vec<String> = (0..n).map(|i| format!("c{i:04}")).collect();
        let (train, test) = split_train_test(&ids, seed);
        prop_assert_eq!((train.clone(), test.clone()), split_train_test(&ids, seed));
        prop_assert_eq!(test.len(), (n as f64 * 0.2).round() as usize);
        let all: BTreeSet<&String> = train.iter().chain(&test).collect();
        prop_assert_eq!(all.len(), n);

        let k = ((train.len() as f64) * frac) as usize;
        let masked = mask_labels(&train, k, seed).unwrap();
        prop_assert_eq!(masked.visible_label_ids.len(), k);
        let train_set: BTreeSet<&String> = train.iter().collect();
        prop_assert!(masked.visible_label_ids.iter().all(|id| train_set.contains(id)));
        prop_assert!(masked.visible_label_ids.iter().all(|id| !test.contains(id)));
        prop_assert_eq!(masked, mask_labels(&train, k, seed).unwrap());
        prop_assert!(mask_labels(&train, train.len() + 1, seed).is_err());
    }
}
