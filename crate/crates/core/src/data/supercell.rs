//! Near-cubic supercells and the pairwise bond tensor built on them.

use nalgebra::{Matrix3, RowVector3};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::elements::{ElementPropertyTable, DESCRIPTOR_COUNT};
use super::structure::CrystalStructure;
use crate::error::{Error, Result};

/// Default cap on supercell sites.
pub const DEFAULT_SITE_CAP: usize = 50;

/// Replicated cell with Cartesian coordinates and per-site descriptors.
///
/// Sites are stored image-major: site `m` is primitive site `m % N` of image
/// `m / N`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupercellPointSet {
    pub crystal_id: String,
    pub supercell_lattice: [[f64; 3]; 3],
    pub cart_coords: Vec<[f64; 3]>,
    pub species: Vec<String>,
    pub site_features: Array2<f64>,
    pub replication: [usize; 3],
}

impl SupercellPointSet {
    pub fn num_sites(&self) -> usize {
        self.species.len()
    }

    pub fn lattice_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.supercell_lattice[r][c])
    }

    /// Same geometry with a new species assignment; features are re-read
    /// from `table`.
    pub fn with_species(&self, species: Vec<String>, table: &ElementPropertyTable) -> Result<Self> {
        assert_eq!(species.len(), self.num_sites());
        let site_features = site_feature_matrix(&species, table, &self.crystal_id)?;
        Ok(SupercellPointSet {
            species,
            site_features,
            ..self.clone()
        })
    }
}

pub fn site_feature_matrix(
    species: &[String],
    table: &ElementPropertyTable,
    source: &str,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((species.len(), DESCRIPTOR_COUNT));
    for (m, s) in species.iter().enumerate() {
        let e = table.lookup(s, source)?;
        for (f, v) in e.descriptors.iter().enumerate() {
            out[[m, f]] = *v;
        }
    }
    Ok(out)
}

fn edge_lengths(lattice: &Matrix3<f64>) -> [f64; 3] {
    [0, 1, 2].map(|r| lattice.row(r).norm())
}

/// Replication `(a, b, c)` maximizing `n·a·b·c ≤ target`, then minimizing
/// the ratio of the longest to the shortest supercell edge, then the
/// lexicographically smallest triple.
pub fn choose_replication(
    n_sites: usize,
    lattice: &Matrix3<f64>,
    target: usize,
) -> Result<[usize; 3]> {
    if n_sites == 0 {
        return Err(Error::Capacity("empty cell cannot be replicated".into()));
    }
    if n_sites > target {
        return Err(Error::Capacity(format!(
            "{n_sites} primitive sites exceed the supercell target of {target}"
        )));
    }
    let edges = edge_lengths(lattice);
    let max_factor = target / n_sites;
    let mut best: Option<([usize; 3], usize, f64)> = None;
    for a in 1..=max_factor {
        for b in 1..=max_factor / a {
            for c in 1..=max_factor / (a * b) {
                let m = n_sites * a * b * c;
                let lens = [
                    a as f64 * edges[0],
                    b as f64 * edges[1],
                    c as f64 * edges[2],
                ];
                let hi = lens.iter().cloned().fold(f64::MIN, f64::max);
                let lo = lens.iter().cloned().fold(f64::MAX, f64::min);
                let aspect = hi / lo;
                let better = match &best {
                    None => true,
                    Some((_, bm, ba)) => m > *bm || (m == *bm && aspect < *ba * (1.0 - 1e-12)),
                };
                // iteration order is lexicographic, so ties keep the first triple
                if better {
                    best = Some(([a, b, c], m, aspect));
                }
            }
        }
    }
    Ok(best.expect("at least (1,1,1) fits").0)
}

/// Expands `crystal` into its near-cubic supercell with at most
/// `target_sites` sites.
pub fn build_supercell(
    crystal: &CrystalStructure,
    target_sites: usize,
    table: &ElementPropertyTable,
) -> Result<SupercellPointSet> {
    let lattice = crystal.lattice_matrix();
    let rep = choose_replication(crystal.num_sites(), &lattice, target_sites)?;
    let mut cart_coords = Vec::with_capacity(crystal.num_sites() * rep.iter().product::<usize>());
    let mut species = Vec::with_capacity(cart_coords.capacity());
    for ia in 0..rep[0] {
        for ib in 0..rep[1] {
            for ic in 0..rep[2] {
                for (f, s) in crystal.frac_coords.iter().zip(&crystal.species) {
                    let shifted =
                        RowVector3::new(f[0] + ia as f64, f[1] + ib as f64, f[2] + ic as f64);
                    let c = shifted * lattice;
                    cart_coords.push([c[0], c[1], c[2]]);
                    species.push(s.clone());
                }
            }
        }
    }
    let mut supercell_lattice = crystal.lattice;
    for (r, row) in supercell_lattice.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v *= rep[r] as f64;
        }
    }
    let site_features = site_feature_matrix(&species, table, &crystal.id)?;
    Ok(SupercellPointSet {
        crystal_id: crystal.id.clone(),
        supercell_lattice,
        cart_coords,
        species,
        site_features,
        replication: rep,
    })
}

/// Minimum-image distance matrix under the supercell lattice. After wrapping
/// the fractional separation into [-0.5, 0.5) the 27 neighbouring images are
/// searched.
pub fn minimum_image_distances(sc: &SupercellPointSet) -> Array2<f64> {
    let lattice = sc.lattice_matrix();
    let inv = lattice
        .try_inverse()
        .expect("supercell lattice is invertible");
    let frac: Vec<RowVector3<f64>> = sc
        .cart_coords
        .iter()
        .map(|c| RowVector3::new(c[0], c[1], c[2]) * inv)
        .collect();
    let m = frac.len();
    let mut images = Vec::with_capacity(27);
    for i in -1..=1 {
        for j in -1..=1 {
            for k in -1..=1 {
                images.push(RowVector3::new(i as f64, j as f64, k as f64));
            }
        }
    }
    let mut d = Array2::zeros((m, m));
    for a in 0..m {
        for b in (a + 1)..m {
            let mut df = frac[b] - frac[a];
            df.iter_mut().for_each(|v| *v -= v.round());
            let best = images
                .iter()
                .map(|shift| ((df + shift) * lattice).norm())
                .fold(f64::INFINITY, f64::min);
            d[[a, b]] = best;
            d[[b, a]] = best;
        }
    }
    d
}

/// Number of interaction features per pair.
pub const INTERACTION_FEATURES: usize = 1;
/// Width of one bond-tensor slot: site i, site j, distance.
pub const BOND_FEATURES: usize = 2 * DESCRIPTOR_COUNT + INTERACTION_FEATURES;

/// The pairwise tensor `B[i, j, :] = (features_i, features_j, d_ij)`, held
/// in factored form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BondTensor {
    pub crystal_id: String,
    pub species: Vec<String>,
    pub site_features: Array2<f64>,
    pub distances: Array2<f64>,
}

impl BondTensor {
    pub fn num_sites(&self) -> usize {
        self.site_features.nrows()
    }

    pub fn get(&self, i: usize, j: usize, f: usize) -> f64 {
        if f < DESCRIPTOR_COUNT {
            self.site_features[[i, f]]
        } else if f < 2 * DESCRIPTOR_COUNT {
            self.site_features[[j, f - DESCRIPTOR_COUNT]]
        } else {
            self.distances[[i, j]]
        }
    }

    /// Row `i` of the tensor: the local environment of site `i`.
    pub fn local_environment(&self, i: usize) -> Array2<f64> {
        let m = self.num_sites();
        Array2::from_shape_fn((m, BOND_FEATURES), |(j, f)| self.get(i, j, f))
    }

    /// Same distances with a new species assignment.
    pub fn with_species(
        &self,
        crystal_id: String,
        species: Vec<String>,
        table: &ElementPropertyTable,
    ) -> Result<Self> {
        assert_eq!(species.len(), self.num_sites());
        let site_features = site_feature_matrix(&species, table, &crystal_id)?;
        Ok(BondTensor {
            crystal_id,
            species,
            site_features,
            distances: self.distances.clone(),
        })
    }

    pub fn to_dense(&self) -> Array3<f64> {
        let m = self.num_sites();
        Array3::from_shape_fn((m, m, BOND_FEATURES), |(i, j, f)| self.get(i, j, f))
    }
}

pub fn build_bond_tensor(sc: &SupercellPointSet) -> BondTensor {
    BondTensor {
        crystal_id: sc.crystal_id.clone(),
        species: sc.species.clone(),
        site_features: sc.site_features.clone(),
        distances: minimum_image_distances(sc),
    }
}
