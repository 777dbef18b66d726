#![allow(dead_code)]

use crystal_infomax::data::structure::lattice_from_parameters;
use crystal_infomax::data::{
    build_bond_tensor, build_supercell, BondTensor, CrystalStructure, ElementPropertyTable,
};
use crystal_infomax::encoder::EncoderConfig;
use rand::seq::IndexedRandom;
use rand::Rng;

pub const SYMBOLS: [&str; 14] = [
    "H", "Li", "C", "N", "O", "F", "Na", "Mg", "Si", "Cl", "Ti", "Fe", "Cu", "Ba",
];

/// A crystal with random lattice, `n` random sites and up to four species.
pub fn random_crystal(id: &str, n: usize, rng: &mut impl Rng) -> CrystalStructure {
    let a = rng.random_range(3.0..6.0);
    let b = rng.random_range(3.0..6.0);
    let c = rng.random_range(3.0..6.0);
    let alpha = rng.random_range(75.0..105.0);
    let beta = rng.random_range(75.0..105.0);
    let gamma = rng.random_range(75.0..105.0);
    let lattice = lattice_from_parameters(a, b, c, alpha, beta, gamma);
    let k = rng.random_range(1..=4);
    let palette: Vec<&str> = SYMBOLS.choose_multiple(rng, k).copied().collect();
    let coords: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ]
        })
        .collect();
    let species = (0..n)
        .map(|_| palette.choose(rng).expect("non-empty").to_string())
        .collect();
    CrystalStructure::new(id, lattice, coords, species)
}

pub fn tensor(s: &CrystalStructure, cap: usize) -> BondTensor {
    build_bond_tensor(&build_supercell(s, cap, ElementPropertyTable::bundled()).unwrap())
}

pub fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        site_embed_dim: 8,
        interaction_embed_dim: 8,
        attention_weights_net: vec![8],
        local_env_dim: 8,
        pre_pooling_net: vec![8, 16],
        post_pooling_net: vec![8],
        head_hidden: 8,
        ..Default::default()
    }
}
