//! A structure-sensitive property with an exact oracle, and a generator for
//! toy corpora of visibly distinct structure families.

use nalgebra::{Matrix3, RowVector3};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::structure::lattice_from_parameters;
use crate::data::{CrystalStructure, ElementPropertyTable};
use crate::error::Result;

pub const SYNTHETIC_LABEL: &str = "nn_electronegativity_contrast";

/// Relative tolerance for ties in nearest-neighbour distance.
const NN_TOLERANCE: f64 = 1e-6;

/// Nearest-neighbour distance of every site and the electronegativity
/// contrast averaged over its nearest neighbours, searched over every
/// periodic image that can lie within the shortest lattice vector.
fn nearest_neighbours(
    s: &CrystalStructure,
    table: &ElementPropertyTable,
) -> Result<Vec<(f64, f64)>> {
    let l: Matrix3<f64> = s.lattice_matrix();
    let rows = [
        l.row(0).transpose(),
        l.row(1).transpose(),
        l.row(2).transpose(),
    ];
    let volume = l.determinant().abs();
    let shortest = rows.iter().map(|r| r.norm()).fold(f64::INFINITY, f64::min);
    let reach: Vec<i64> = (0..3)
        .map(|k| {
            let cross = rows[(k + 1) % 3].cross(&rows[(k + 2) % 3]).norm();
            let height = volume / cross;
            (shortest / height).ceil() as i64 + 1
        })
        .collect();
    let chi: Vec<f64> = s
        .species
        .iter()
        .map(|sp| table.lookup(sp, &s.id).map(|e| e.electronegativity()))
        .collect::<Result<_>>()?;
    let frac: Vec<RowVector3<f64>> = s
        .frac_coords
        .iter()
        .map(|f| RowVector3::new(f[0], f[1], f[2]))
        .collect();
    let mut out = Vec::with_capacity(frac.len());
    for i in 0..frac.len() {
        let mut found: Vec<(f64, usize)> = Vec::new();
        for j in 0..frac.len() {
            for a in -reach[0]..=reach[0] {
                for b in -reach[1]..=reach[1] {
                    for c in -reach[2]..=reach[2] {
                        if i == j && a == 0 && b == 0 && c == 0 {
                            continue;
                        }
                        let shift = RowVector3::new(a as f64, b as f64, c as f64);
                        let d = ((frac[j] + shift - frac[i]) * l).norm();
                        found.push((d, j));
                    }
                }
            }
        }
        let d_nn = found.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
        let shell: Vec<usize> = found
            .iter()
            .filter(|x| x.0 <= d_nn * (1.0 + NN_TOLERANCE))
            .map(|x| x.1)
            .collect();
        let contrast =
            shell.iter().map(|&j| (chi[i] - chi[j]).abs()).sum::<f64>() / shell.len() as f64;
        out.push((d_nn, contrast));
    }
    Ok(out)
}

/// `mean_i d_nn(i) · mean_{j ∈ NN(i)} |χ_i − χ_j|` in Å, with χ the
/// Pauling electronegativity.
pub fn structure_sensitive_property(
    s: &CrystalStructure,
    table: &ElementPropertyTable,
) -> Result<f64> {
    let nn = nearest_neighbours(s, table)?;
    Ok(nn.iter().map(|(d, c)| d * c).sum::<f64>() / nn.len() as f64)
}

/// Structure families of the toy corpus.
pub const FAMILIES: [&str; 10] = [
    "rocksalt",
    "cscl",
    "zincblende",
    "fluorite",
    "perovskite",
    "wurtzite",
    "rutile",
    "bcc",
    "fcc",
    "cdi2",
];

const CATIONS: [&str; 16] = [
    "Li", "Na", "K", "Rb", "Mg", "Ca", "Sr", "Ba", "Zn", "Cd", "Ti", "Mn", "Fe", "Co", "Ni", "Cu",
];
const ANIONS: [&str; 9] = ["O", "S", "Se", "F", "Cl", "Br", "I", "N", "P"];
const METALS: [&str; 12] = [
    "Al", "Cu", "Ag", "Au", "Ni", "Pd", "Pt", "Fe", "Cr", "Mo", "W", "V",
];

fn fcc_primitive(a: f64) -> [[f64; 3]; 3] {
    let h = a / 2.0;
    [[0.0, h, h], [h, 0.0, h], [h, h, 0.0]]
}

fn cubic(a: f64) -> [[f64; 3]; 3] {
    [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]]
}

fn bcc_primitive(a: f64) -> [[f64; 3]; 3] {
    let h = a / 2.0;
    [[-h, h, h], [h, -h, h], [h, h, -h]]
}

fn pick(list: &[&str], rng: &mut impl Rng) -> String {
    list.choose(rng).expect("non-empty").to_string()
}

/// One crystal of family `family` with random elements and jittered
/// lattice parameters.
pub fn toy_crystal(family: usize, id: String, rng: &mut impl Rng) -> CrystalStructure {
    let cation = pick(&CATIONS, rng);
    let anion = pick(&ANIONS, rng);
    let (lattice, coords, species): ([[f64; 3]; 3], Vec<[f64; 3]>, Vec<String>) = match family {
        0 => (
            fcc_primitive(rng.random_range(4.0..6.0)),
            vec![[0.0; 3], [0.5; 3]],
            vec![cation, anion],
        ),
        1 => (
            cubic(rng.random_range(3.0..4.5)),
            vec![[0.0; 3], [0.5; 3]],
            vec![cation, anion],
        ),
        2 => (
            fcc_primitive(rng.random_range(5.0..6.5)),
            vec![[0.0; 3], [0.25; 3]],
            vec![cation, anion],
        ),
        3 => (
            fcc_primitive(rng.random_range(5.0..6.0)),
            vec![[0.0; 3], [0.25; 3], [0.75; 3]],
            vec![cation, anion.clone(), anion],
        ),
        4 => {
            let b = pick(&["Ti", "Zr", "Nb", "Ta", "Sn", "Mn"], rng);
            let x = pick(&["O", "F"], rng);
            (
                cubic(rng.random_range(3.7..4.3)),
                vec![
                    [0.0; 3],
                    [0.5; 3],
                    [0.5, 0.5, 0.0],
                    [0.5, 0.0, 0.5],
                    [0.0, 0.5, 0.5],
                ],
                vec![cation, b, x.clone(), x.clone(), x],
            )
        }
        5 => {
            let a = rng.random_range(3.0..4.0);
            let u = 0.375 + rng.random_range(-0.01..0.01);
            (
                lattice_from_parameters(a, a, a * rng.random_range(1.58..1.66), 90.0, 90.0, 120.0),
                vec![
                    [1.0 / 3.0, 2.0 / 3.0, 0.0],
                    [2.0 / 3.0, 1.0 / 3.0, 0.5],
                    [1.0 / 3.0, 2.0 / 3.0, u],
                    [2.0 / 3.0, 1.0 / 3.0, 0.5 + u],
                ],
                vec![cation.clone(), cation, anion.clone(), anion],
            )
        }
        6 => {
            let a = rng.random_range(4.4..4.8);
            let u = rng.random_range(0.29..0.31);
            (
                lattice_from_parameters(a, a, a * rng.random_range(0.62..0.68), 90.0, 90.0, 90.0),
                vec![
                    [0.0; 3],
                    [0.5; 3],
                    [u, u, 0.0],
                    [1.0 - u, 1.0 - u, 0.0],
                    [0.5 + u, 0.5 - u, 0.5],
                    [0.5 - u, 0.5 + u, 0.5],
                ],
                vec![
                    cation.clone(),
                    cation,
                    anion.clone(),
                    anion.clone(),
                    anion.clone(),
                    anion,
                ],
            )
        }
        7 => (
            bcc_primitive(rng.random_range(2.8..3.6)),
            vec![[0.0; 3]],
            vec![pick(&METALS, rng)],
        ),
        8 => (
            fcc_primitive(rng.random_range(3.5..4.2)),
            vec![[0.0; 3]],
            vec![pick(&METALS, rng)],
        ),
        _ => {
            let a = rng.random_range(3.5..4.3);
            let z = rng.random_range(0.23..0.27);
            (
                lattice_from_parameters(a, a, a * rng.random_range(1.5..1.7), 90.0, 90.0, 120.0),
                vec![
                    [0.0; 3],
                    [1.0 / 3.0, 2.0 / 3.0, z],
                    [2.0 / 3.0, 1.0 / 3.0, 1.0 - z],
                ],
                vec![cation, anion.clone(), anion],
            )
        }
    };
    CrystalStructure::new(id, lattice, coords, species)
}

/// `n` crystals cycling through the ten families, labeled with
/// [`structure_sensitive_property`].
pub fn toy_corpus(
    n: usize,
    seed: u64,
    table: &ElementPropertyTable,
) -> Result<Vec<CrystalStructure>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let family = k % FAMILIES.len();
            let s = toy_crystal(family, format!("toy-{}-{k:05}", FAMILIES[family]), &mut rng);
            let y = structure_sensitive_property(&s, table)?;
            Ok(s.with_label(SYNTHETIC_LABEL, y))
        })
        .collect()
}
