use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, RowVector3};
use serde::{Deserialize, Serialize};

use super::cif;
use super::elements::ElementPropertyTable;
use crate::error::{Error, Result};

/// A periodic crystal: lattice rows are the lattice vectors in Å and sites
/// are given in fractional coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrystalStructure {
    pub id: String,
    pub lattice: [[f64; 3]; 3],
    pub frac_coords: Vec<[f64; 3]>,
    pub species: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_name: Option<String>,
}

impl CrystalStructure {
    pub fn new(
        id: impl Into<String>,
        lattice: [[f64; 3]; 3],
        frac_coords: Vec<[f64; 3]>,
        species: Vec<String>,
    ) -> Self {
        CrystalStructure {
            id: id.into(),
            lattice,
            frac_coords,
            species,
            label: None,
            label_name: None,
        }
    }

    pub fn with_label(mut self, name: impl Into<String>, value: f64) -> Self {
        self.label = Some(value);
        self.label_name = Some(name.into());
        self
    }

    pub fn num_sites(&self) -> usize {
        self.species.len()
    }

    pub fn lattice_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.lattice[r][c])
    }

    pub fn volume(&self) -> f64 {
        self.lattice_matrix().determinant().abs()
    }

    pub fn cart_coords(&self) -> Vec<[f64; 3]> {
        let l = self.lattice_matrix();
        self.frac_coords
            .iter()
            .map(|f| {
                let c = RowVector3::new(f[0], f[1], f[2]) * l;
                [c[0], c[1], c[2]]
            })
            .collect()
    }

    /// Checks the structural invariants against `table`.
    pub fn validate(&self, table: &ElementPropertyTable) -> Result<()> {
        let invalid = |reason: String| Error::InvalidStructure {
            id: self.id.clone(),
            reason,
        };
        if self.species.is_empty() {
            return Err(invalid("no sites".into()));
        }
        if self.frac_coords.len() != self.species.len() {
            return Err(invalid(format!(
                "{} coordinates for {} species",
                self.frac_coords.len(),
                self.species.len()
            )));
        }
        if self.lattice.iter().flatten().any(|v| !v.is_finite())
            || self.frac_coords.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::Numeric {
                id: self.id.clone(),
                message: "lattice or coordinates".into(),
            });
        }
        let det = self.lattice_matrix().determinant();
        if det.abs() <= 1e-8 {
            return Err(invalid(format!("singular lattice (det = {det:e})")));
        }
        for s in &self.species {
            table.lookup(s, &self.id)?;
        }
        Ok(())
    }

    /// Wraps fractional coordinates into [0, 1).
    pub fn wrapped(mut self) -> Self {
        for f in &mut self.frac_coords {
            for v in f.iter_mut() {
                *v = wrap_unit(*v);
            }
        }
        self
    }

    /// Element counts keyed by symbol.
    pub fn composition(&self) -> BTreeMap<String, usize> {
        composition_of(&self.species)
    }
}

pub fn composition_of(species: &[String]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in species {
        *out.entry(s.clone()).or_insert(0) += 1;
    }
    out
}

/// Element fractions keyed by symbol.
pub fn element_fractions(species: &[String]) -> BTreeMap<String, f64> {
    let n = species.len() as f64;
    composition_of(species)
        .into_iter()
        .map(|(k, c)| (k, c as f64 / n))
        .collect()
}

pub fn wrap_unit(v: f64) -> f64 {
    let w = v - v.floor();
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Lattice rows from cell lengths (Å) and angles (degrees), with `a` along
/// x and `b` in the xy plane.
pub fn lattice_from_parameters(
    a: f64,
    b: f64,
    c: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> [[f64; 3]; 3] {
    let (ca, cb, cg) = (
        alpha.to_radians().cos(),
        beta.to_radians().cos(),
        gamma.to_radians().cos(),
    );
    let sg = gamma.to_radians().sin();
    let cy = (ca - cb * cg) / sg;
    let cz = (1.0 - cb * cb - cy * cy).max(0.0).sqrt();
    [
        [a, 0.0, 0.0],
        [b * cg, b * sg, 0.0],
        [c * cb, c * cy, c * cz],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    CifDir,
    Jsonl,
}

/// Result of [`load_structures`].
#[derive(Clone, Debug, Default)]
pub struct LoadedCorpus {
    pub structures: Vec<CrystalStructure>,
    /// Structures dropped because their primitive cell exceeds the site cap.
    pub skipped_oversized: usize,
}

/// Reads a corpus, dropping structures with more than `site_cap` sites.
pub fn load_structures(
    path: &Path,
    format: CorpusFormat,
    site_cap: usize,
    table: &ElementPropertyTable,
) -> Result<LoadedCorpus> {
    let ingestion = |message: String| Error::Ingestion {
        path: path.to_owned(),
        message,
    };
    let mut raw = Vec::new();
    match format {
        CorpusFormat::CifDir => {
            let mut files: Vec<_> = fs::read_dir(path)
                .map_err(|e| ingestion(e.to_string()))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| e.eq_ignore_ascii_case("cif"))
                })
                .collect();
            files.sort();
            for file in files {
                let text = fs::read_to_string(&file).map_err(|e| Error::Ingestion {
                    path: file.clone(),
                    message: e.to_string(),
                })?;
                let stem = file
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("structure");
                let parsed = cif::parse_cif(&text, stem).map_err(|message| Error::Ingestion {
                    path: file.clone(),
                    message,
                })?;
                for s in parsed {
                    check_with_source(&s, table, &file.display().to_string())?;
                    raw.push(s);
                }
            }
        }
        CorpusFormat::Jsonl => {
            let file = fs::File::open(path).map_err(|e| ingestion(e.to_string()))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| ingestion(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let s: CrystalStructure = serde_json::from_str(&line)
                    .map_err(|e| ingestion(format!("line {}: {e}", n + 1)))?;
                check_with_source(&s, table, &path.display().to_string())?;
                raw.push(s.wrapped());
            }
        }
    }
    let before = raw.len();
    let structures: Vec<_> = raw
        .into_iter()
        .filter(|s| s.num_sites() <= site_cap)
        .collect();
    let skipped_oversized = before - structures.len();
    if skipped_oversized > 0 {
        log::info!(
            "skipped {skipped_oversized} structures with more than {site_cap} sites in {}",
            path.display()
        );
    }
    Ok(LoadedCorpus {
        structures,
        skipped_oversized,
    })
}

fn check_with_source(
    s: &CrystalStructure,
    table: &ElementPropertyTable,
    source: &str,
) -> Result<()> {
    for sym in &s.species {
        if table.get(sym).is_none() {
            return Err(Error::UnknownElement {
                symbol: sym.clone(),
                source_name: source.to_owned(),
            });
        }
    }
    s.validate(table)
}

/// Writes structures in the canonical line-delimited corpus format.
pub fn write_jsonl(path: &Path, structures: &[CrystalStructure]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for s in structures {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
