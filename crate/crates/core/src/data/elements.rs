//! Elemental site descriptors.
//!
//! The bundled table covers Z = 1..94 and carries, per element, the nine
//! descriptors used as site features: atomic number, atomic weight, row,
//! column, first ionization energy (eV), Pauling electronegativity, atomic
//! radius (Å), density of the solid (g/cm³) and the first common oxidation
//! state. Values that are absent from the source tabulation are stored as
//! zero and listed in [`Element::imputed`].

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const DESCRIPTOR_COUNT: usize = 9;

pub const DESCRIPTOR_NAMES: [&str; DESCRIPTOR_COUNT] = [
    "atomic_number",
    "atomic_weight",
    "row",
    "column",
    "first_ionization_energy",
    "electronegativity",
    "atomic_radius",
    "density",
    "oxidation_state",
];

const ELECTRONEGATIVITY: usize = 5;

static BUNDLED_CSV: &str = include_str!("../../data/elements.csv");

#[derive(Clone, Debug, PartialEq)]
pub struct Element {
    pub symbol: String,
    pub z: u32,
    pub descriptors: [f64; DESCRIPTOR_COUNT],
    pub is_metal: bool,
    pub is_halogen: bool,
    /// Names of descriptors that were missing and imputed with zero.
    pub imputed: Vec<String>,
}

impl Element {
    pub fn electronegativity(&self) -> f64 {
        self.descriptors[ELECTRONEGATIVITY]
    }
}

#[derive(Clone, Debug)]
pub struct ElementPropertyTable {
    elements: Vec<Element>,
    by_symbol: HashMap<String, usize>,
}

impl ElementPropertyTable {
    /// The table compiled into the crate.
    pub fn bundled() -> &'static ElementPropertyTable {
        static TABLE: OnceLock<ElementPropertyTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            ElementPropertyTable::from_csv(BUNDLED_CSV).expect("bundled element table is valid")
        })
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad =
            |line: usize, msg: &str| Error::Config(format!("element table line {line}: {msg}"));
        let mut elements = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 13 {
                return Err(bad(n + 1, "expected 13 columns"));
            }
            let num = |i: usize| -> Result<f64> {
                cols[i]
                    .parse::<f64>()
                    .map_err(|_| bad(n + 1, &format!("column {i} is not a number")))
            };
            let mut descriptors = [0.0; DESCRIPTOR_COUNT];
            descriptors[0] = num(1)?;
            for (k, d) in descriptors.iter_mut().enumerate().skip(1) {
                *d = num(k + 1)?;
            }
            if descriptors.iter().any(|v| !v.is_finite()) {
                return Err(bad(n + 1, "descriptor is not finite"));
            }
            elements.push(Element {
                symbol: cols[0].to_owned(),
                z: descriptors[0] as u32,
                descriptors,
                is_metal: cols[10] == "1",
                is_halogen: cols[11] == "1",
                imputed: cols[12]
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(str::to_owned)
                    .collect(),
            });
        }
        let by_symbol = elements
            .iter()
            .enumerate()
            .map(|(i, e)| (e.symbol.clone(), i))
            .collect();
        Ok(ElementPropertyTable {
            elements,
            by_symbol,
        })
    }

    pub fn get(&self, symbol: &str) -> Option<&Element> {
        self.by_symbol.get(symbol).map(|&i| &self.elements[i])
    }

    pub fn lookup(&self, symbol: &str, source_name: &str) -> Result<&Element> {
        self.get(symbol).ok_or_else(|| Error::UnknownElement {
            symbol: symbol.to_owned(),
            source_name: source_name.to_owned(),
        })
    }

    pub fn by_z(&self, z: u32) -> Option<&Element> {
        self.elements.iter().find(|e| e.z == z)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Element> {
        self.elements.iter()
    }
}
