//! Crystal ingestion, supercells, bond tensors and label masking.

pub mod cif;
pub mod dataset;
pub mod elements;
pub mod structure;
pub mod supercell;

pub use dataset::{
    mask_labels, split_train_test, FeatureScaler, MaskedDataset, LABEL_AVAILABILITIES,
    TEST_FRACTION,
};
pub use elements::{Element, ElementPropertyTable, DESCRIPTOR_COUNT};
pub use structure::{load_structures, CorpusFormat, CrystalStructure, LoadedCorpus};
pub use supercell::{build_bond_tensor, build_supercell, BondTensor, SupercellPointSet};
