//! Read-only subset of the Crystallographic Information File format: cell
//! parameters, fractional atom sites and, when present, the symmetry
//! operations needed to expand the asymmetric unit.

use std::collections::HashMap;

use super::structure::{lattice_from_parameters, wrap_unit, CrystalStructure};

#[derive(Debug, Default)]
struct Block {
    name: String,
    items: HashMap<String, String>,
    loops: Vec<(Vec<String>, Vec<String>)>,
}

impl Block {
    fn loop_with(&self, tag: &str) -> Option<(&[String], &[String])> {
        self.loops
            .iter()
            .find(|(tags, _)| tags.iter().any(|t| t == tag))
            .map(|(t, v)| (t.as_slice(), v.as_slice()))
    }
}

fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut lines = text.lines().peekable();
    while let Some(line) = lines.next() {
        if let Some(rest) = line.strip_prefix(';') {
            let mut field = rest.to_owned();
            for next in lines.by_ref() {
                if next.starts_with(';') {
                    break;
                }
                field.push('\n');
                field.push_str(next);
            }
            tokens.push(field.trim().to_owned());
            continue;
        }
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if c == '#' {
                break;
            } else if c == '\'' || c == '"' {
                let mut j = i + 1;
                while j < chars.len() {
                    if chars[j] == c && (j + 1 == chars.len() || chars[j + 1].is_whitespace()) {
                        break;
                    }
                    j += 1;
                }
                tokens.push(chars[i + 1..j.min(chars.len())].iter().collect());
                i = j + 1;
            } else {
                let mut j = i;
                while j < chars.len() && !chars[j].is_whitespace() {
                    j += 1;
                }
                tokens.push(chars[i..j].iter().collect());
                i = j;
            }
        }
    }
    tokens
}

fn is_keyword(tok: &str) -> bool {
    let lower = tok.to_ascii_lowercase();
    tok.starts_with('_') || lower == "loop_" || lower.starts_with("data_")
}

fn parse_blocks(text: &str) -> Vec<Block> {
    let tokens = tokenize(text);
    let mut blocks: Vec<Block> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        let lower = tok.to_ascii_lowercase();
        if lower.starts_with("data_") {
            blocks.push(Block {
                name: tok[5..].to_owned(),
                ..Block::default()
            });
            i += 1;
        } else if lower == "loop_" {
            i += 1;
            let mut tags = Vec::new();
            while i < tokens.len() && tokens[i].starts_with('_') {
                tags.push(tokens[i].to_ascii_lowercase());
                i += 1;
            }
            let mut values = Vec::new();
            while i < tokens.len() && !is_keyword(&tokens[i]) {
                values.push(tokens[i].clone());
                i += 1;
            }
            if blocks.is_empty() {
                blocks.push(Block::default());
            }
            blocks.last_mut().unwrap().loops.push((tags, values));
        } else if tok.starts_with('_') {
            let value = tokens.get(i + 1).cloned().unwrap_or_default();
            if blocks.is_empty() {
                blocks.push(Block::default());
            }
            blocks.last_mut().unwrap().items.insert(lower, value);
            i += 2;
        } else {
            i += 1;
        }
    }
    blocks
}

/// Parses a CIF number, dropping a trailing standard uncertainty such as
/// `5.640(2)`.
fn cif_number(s: &str) -> Option<f64> {
    let core = s.split('(').next()?.trim();
    if core.is_empty() || core == "." || core == "?" {
        return None;
    }
    core.parse().ok()
}

/// Element symbol from a type symbol or site label (`Li1+`, `O2-`, `CL3`).
fn element_symbol(raw: &str) -> Option<String> {
    let mut chars = raw.chars().skip_while(|c| !c.is_ascii_alphabetic());
    let first = chars.next()?.to_ascii_uppercase();
    let mut sym = first.to_string();
    if let Some(second) = chars.next() {
        if second.is_ascii_alphabetic() {
            sym.push(second.to_ascii_lowercase());
        }
    }
    Some(sym)
}

/// One affine operation `x' = R x + t` in fractional coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SymOp {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl SymOp {
    pub fn apply(&self, f: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.rotation[r][0] * f[0]
                + self.rotation[r][1] * f[1]
                + self.rotation[r][2] * f[2]
                + self.translation[r];
        }
        out
    }
}

/// Parses an operation written as `-x+1/2, y, z-x`.
pub fn parse_symop(text: &str) -> Option<SymOp> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return None;
    }
    let mut op = SymOp {
        rotation: [[0.0; 3]; 3],
        translation: [0.0; 3],
    };
    for (r, part) in parts.iter().enumerate() {
        let expr: String = part.chars().filter(|c| !c.is_whitespace()).collect();
        let expr = expr.to_ascii_lowercase();
        if expr.is_empty() {
            return None;
        }
        let mut terms = Vec::new();
        let mut current = String::new();
        for c in expr.chars() {
            if (c == '+' || c == '-') && !current.is_empty() {
                terms.push(std::mem::take(&mut current));
            }
            current.push(c);
        }
        terms.push(current);
        for term in terms {
            let (sign, body) = match term.strip_prefix('-') {
                Some(b) => (-1.0, b),
                None => (1.0, term.strip_prefix('+').unwrap_or(&term)),
            };
            let var = body.chars().last().filter(|c| matches!(c, 'x' | 'y' | 'z'));
            let coeff_text = match var {
                Some(_) => &body[..body.len() - 1],
                None => body,
            };
            let coeff_text = coeff_text.trim_end_matches('*');
            let coeff = if coeff_text.is_empty() {
                1.0
            } else if let Some((n, d)) = coeff_text.split_once('/') {
                n.parse::<f64>().ok()? / d.parse::<f64>().ok()?
            } else {
                coeff_text.parse::<f64>().ok()?
            };
            match var {
                Some('x') => op.rotation[r][0] += sign * coeff,
                Some('y') => op.rotation[r][1] += sign * coeff,
                Some('z') => op.rotation[r][2] += sign * coeff,
                _ => op.translation[r] += sign * coeff,
            }
        }
    }
    Some(op)
}

fn periodic_close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| {
        let d = x - y;
        (d - d.round()).abs() < tol
    })
}

const SYMOP_TAGS: [&str; 2] = [
    "_symmetry_equiv_pos_as_xyz",
    "_space_group_symop_operation_xyz",
];

/// Parses every data block of `text`. Block ids are `stem` for a single
/// block and `stem_blockname` otherwise.
pub fn parse_cif(text: &str, stem: &str) -> Result<Vec<CrystalStructure>, String> {
    let blocks = parse_blocks(text);
    let multi = blocks.len() > 1;
    let mut out = Vec::new();
    for block in &blocks {
        let id = if multi {
            format!("{stem}_{}", block.name)
        } else {
            stem.to_owned()
        };
        out.push(block_to_structure(block, id)?);
    }
    Ok(out)
}

fn block_to_structure(block: &Block, id: String) -> Result<CrystalStructure, String> {
    let cell = |tag: &str| -> Result<f64, String> {
        block
            .items
            .get(tag)
            .and_then(|v| cif_number(v))
            .ok_or_else(|| format!("block {:?}: missing or invalid {tag}", block.name))
    };
    let lattice = lattice_from_parameters(
        cell("_cell_length_a")?,
        cell("_cell_length_b")?,
        cell("_cell_length_c")?,
        cell("_cell_angle_alpha")?,
        cell("_cell_angle_beta")?,
        cell("_cell_angle_gamma")?,
    );

    let (tags, values) = block
        .loop_with("_atom_site_fract_x")
        .ok_or_else(|| format!("block {:?}: no _atom_site_fract_x loop", block.name))?;
    let col = |tag: &str| tags.iter().position(|t| t == tag);
    let (cx, cy, cz) = match (
        col("_atom_site_fract_x"),
        col("_atom_site_fract_y"),
        col("_atom_site_fract_z"),
    ) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err("atom site loop lacks fractional coordinates".into()),
    };
    let species_col = col("_atom_site_type_symbol")
        .or_else(|| col("_atom_site_label"))
        .ok_or("atom site loop lacks a type symbol or label")?;
    if values.len() % tags.len() != 0 {
        return Err("atom site loop has a ragged final row".into());
    }

    let ops: Vec<SymOp> = SYMOP_TAGS
        .iter()
        .find_map(|tag| {
            let (t, v) = block.loop_with(tag)?;
            let c = t.iter().position(|x| x == tag)?;
            Some(
                v.chunks(t.len())
                    .filter_map(|row| parse_symop(&row[c]))
                    .collect::<Vec<_>>(),
            )
        })
        .filter(|ops| !ops.is_empty())
        .unwrap_or_else(|| vec![parse_symop("x,y,z").unwrap()]);

    let mut frac_coords: Vec<[f64; 3]> = Vec::new();
    let mut species = Vec::new();
    for row in values.chunks(tags.len()) {
        let f = [
            cif_number(&row[cx]).ok_or_else(|| format!("bad coordinate {:?}", row[cx]))?,
            cif_number(&row[cy]).ok_or_else(|| format!("bad coordinate {:?}", row[cy]))?,
            cif_number(&row[cz]).ok_or_else(|| format!("bad coordinate {:?}", row[cz]))?,
        ];
        let sym = element_symbol(&row[species_col])
            .ok_or_else(|| format!("cannot read element from {:?}", row[species_col]))?;
        for op in &ops {
            let g = op.apply(f).map(wrap_unit);
            if !frac_coords.iter().any(|&h| periodic_close(g, h, 1e-3)) {
                frac_coords.push(g);
                species.push(sym.clone());
            }
        }
    }
    Ok(CrystalStructure::new(id, lattice, frac_coords, species))
}
