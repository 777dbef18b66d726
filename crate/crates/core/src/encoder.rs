//! Two-stage permutation-invariant set encoder: pairwise bonds are pooled by
//! attention into local-environment features, which are pooled by a mean
//! into one global vector per crystal.

use std::ops::Range;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BondTensor, FeatureScaler, DESCRIPTOR_COUNT};
use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, LayerNorm, Mat, Mlp, MlpStyle, Params, Segments, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub site_embed_dim: usize,
    pub interaction_embed_dim: usize,
    pub attention_blocks: usize,
    pub attention_heads: usize,
    pub attention_weights_net: Vec<usize>,
    /// Width of the value projection, and so of each local-environment row.
    pub local_env_dim: usize,
    pub pre_pooling_net: Vec<usize>,
    pub post_pooling_net: Vec<usize>,
    pub head_hidden: usize,
    pub activation: Activation,
    pub layer_norm: bool,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            site_embed_dim: 64,
            interaction_embed_dim: 64,
            attention_blocks: 1,
            attention_heads: 1,
            attention_weights_net: vec![64],
            local_env_dim: 64,
            pre_pooling_net: vec![64, 128],
            post_pooling_net: vec![64],
            head_hidden: 64,
            activation: Activation::Mish,
            layer_norm: true,
            pooling: Pooling::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attention_blocks != 1 || self.attention_heads != 1 {
            return Err(Error::Config(
                "only a single attention block with a single head is supported".into(),
            ));
        }
        let widths = [
            self.site_embed_dim,
            self.interaction_embed_dim,
            self.local_env_dim,
            self.head_hidden,
        ];
        let lists = [
            &self.attention_weights_net,
            &self.pre_pooling_net,
            &self.post_pooling_net,
        ];
        if widths.contains(&0) || lists.iter().any(|l| l.is_empty() || l.contains(&0)) {
            return Err(Error::Config("every layer width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn pair_width(&self) -> usize {
        2 * self.site_embed_dim + self.interaction_embed_dim
    }

    pub fn global_dim(&self) -> usize {
        *self.pre_pooling_net.last().expect("validated")
    }

    fn hidden_style(&self) -> MlpStyle {
        MlpStyle {
            activation: self.activation,
            layer_norm: self.layer_norm,
            activate_last: true,
            last_gain: 1.0,
        }
    }

    fn projection_style(&self) -> MlpStyle {
        MlpStyle {
            activate_last: false,
            ..self.hidden_style()
        }
    }
}

/// A batch of bond tensors flattened into site rows and pair rows.
///
/// Pair row `pair_offset[k] + a·M_k + b` holds the bond from site `a` to site
/// `b` of crystal `k`, where `M_k` counts padding sites.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    pub crystal_ids: Vec<String>,
    pub site_features: Mat,
    pub site_z: Vec<u32>,
    pub site_valid: Vec<bool>,
    pub site_ranges: Vec<Range<usize>>,
    pub pair_offsets: Vec<usize>,
    pub pair_distance: Mat,
    pub raw_distance: Vec<f64>,
    pub pair_i: Rc<Vec<usize>>,
    pub pair_j: Rc<Vec<usize>>,
    pub pair_segments: Rc<Segments>,
    pub pair_mask: Option<Rc<Vec<bool>>>,
    pub valid_sites: Rc<Vec<usize>>,
    pub valid_segments: Rc<Segments>,
}

impl EncoderInput {
    pub fn new(tensors: &[&BondTensor], scaler: &FeatureScaler) -> Result<Self> {
        Self::padded(tensors, scaler, None)
    }

    /// Like [`EncoderInput::new`] with every crystal padded to `pad_to`
    /// sites. Padding never contributes to attention or pooling.
    pub fn padded(
        tensors: &[&BondTensor],
        scaler: &FeatureScaler,
        pad_to: Option<usize>,
    ) -> Result<Self> {
        let mut sizes = Vec::with_capacity(tensors.len());
        for t in tensors {
            let m = t.num_sites();
            let padded = pad_to.unwrap_or(m);
            if padded < m {
                return Err(Error::Capacity(format!(
                    "{}: {m} sites do not fit padding of {padded}",
                    t.crystal_id
                )));
            }
            if t.site_features
                .iter()
                .chain(t.distances.iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::Numeric {
                    id: t.crystal_id.clone(),
                    message: "non-finite bond tensor entry".into(),
                });
            }
            sizes.push(padded);
        }
        let n_sites: usize = sizes.iter().sum();
        let n_pairs: usize = sizes.iter().map(|m| m * m).sum();
        let mut site_features = Mat::zeros((n_sites, DESCRIPTOR_COUNT));
        let mut site_z = vec![0; n_sites];
        let mut site_valid = vec![false; n_sites];
        let mut site_ranges = Vec::with_capacity(tensors.len());
        let mut pair_offsets = Vec::with_capacity(tensors.len());
        let mut pair_distance = Mat::zeros((n_pairs, 1));
        let mut raw_distance = vec![0.0; n_pairs];
        let mut pair_i = Vec::with_capacity(n_pairs);
        let mut pair_j = Vec::with_capacity(n_pairs);
        let mut mask = Vec::with_capacity(n_pairs);
        let mut valid_sites = Vec::new();
        let mut valid_counts = Vec::with_capacity(tensors.len());
        let (mut s0, mut p0) = (0, 0);
        for (t, &m) in tensors.iter().zip(&sizes) {
            let real = t.num_sites();
            let scaled = scaler.transform_sites(&t.site_features);
            for a in 0..real {
                site_features.row_mut(s0 + a).assign(&scaled.row(a));
                site_z[s0 + a] = t.site_features[[a, 0]].round() as u32;
                site_valid[s0 + a] = true;
                valid_sites.push(s0 + a);
            }
            for a in 0..m {
                for b in 0..m {
                    let row = p0 + a * m + b;
                    pair_i.push(s0 + a);
                    pair_j.push(s0 + b);
                    let inside = a < real && b < real;
                    mask.push(b < real);
                    if inside {
                        let d = t.distances[[a, b]];
                        raw_distance[row] = d;
                        pair_distance[[row, 0]] = scaler.transform_distance(d);
                    }
                }
            }
            site_ranges.push(s0..s0 + m);
            pair_offsets.push(p0);
            valid_counts.push(real);
            s0 += m;
            p0 += m * m;
        }
        let any_padding =
            pad_to.is_some() && sizes.iter().zip(tensors).any(|(m, t)| *m > t.num_sites());
        Ok(EncoderInput {
            crystal_ids: tensors.iter().map(|t| t.crystal_id.clone()).collect(),
            site_features,
            site_z,
            site_valid,
            site_ranges,
            pair_offsets,
            pair_distance,
            raw_distance,
            pair_i: Rc::new(pair_i),
            pair_j: Rc::new(pair_j),
            pair_segments: Rc::new(Segments::from_lengths(
                sizes.iter().flat_map(|&m| std::iter::repeat_n(m, m)),
            )),
            pair_mask: any_padding.then(|| Rc::new(mask)),
            valid_sites: Rc::new(valid_sites),
            valid_segments: Rc::new(Segments::from_lengths(valid_counts)),
        })
    }

    pub fn num_crystals(&self) -> usize {
        self.site_ranges.len()
    }

    /// Stored (possibly padded) site count of crystal `k`.
    pub fn stored_sites(&self, k: usize) -> usize {
        self.site_ranges[k].len()
    }

    /// Real site count of crystal `k`.
    pub fn real_sites(&self, k: usize) -> usize {
        self.valid_segments.range(k).len()
    }

    pub fn site_row(&self, k: usize, a: usize) -> usize {
        self.site_ranges[k].start + a
    }

    pub fn pair_row(&self, k: usize, a: usize, b: usize) -> usize {
        self.pair_offsets[k] + a * self.stored_sites(k) + b
    }
}

/// Tape handles produced by [`Encoder::forward`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Embedded bonds, one row per pair.
    pub pairs: Var,
    /// Local-environment features S′, one row per stored site.
    pub local: Var,
    /// Global representations, one row per crystal.
    pub global: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    site_embed: Mlp,
    interaction_embed: Mlp,
    attention_weights: Mlp,
    value: Dense,
    attention_norm: LayerNorm,
    pre_pooling: Mlp,
}

/// Parameter-name prefixes of the local submodel.
pub const LOCAL_PREFIXES: [&str; 2] = ["embed.", "attention."];

impl Encoder {
    pub fn new(params: &mut Params, config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let hidden = config.hidden_style();
        let site_embed = Mlp::new(
            params,
            "embed.site",
            DESCRIPTOR_COUNT,
            &[config.site_embed_dim],
            hidden,
            rng,
        );
        let interaction_embed = Mlp::new(
            params,
            "embed.interaction",
            1,
            &[config.interaction_embed_dim],
            hidden,
            rng,
        );
        let mut score_widths = config.attention_weights_net.clone();
        score_widths.push(1);
        let attention_weights = Mlp::new(
            params,
            "attention.weights",
            config.pair_width(),
            &score_widths,
            config.projection_style(),
            rng,
        );
        let value = Dense::new(
            params,
            "attention.value",
            config.pair_width(),
            config.local_env_dim,
            1.0,
            rng,
        );
        let attention_norm = LayerNorm::new(params, "attention.norm", config.local_env_dim);
        let pre_pooling = Mlp::new(
            params,
            "prepool",
            config.local_env_dim,
            &config.pre_pooling_net,
            config.projection_style(),
            rng,
        );
        Ok(Encoder {
            config: config.clone(),
            site_embed,
            interaction_embed,
            attention_weights,
            value,
            attention_norm,
            pre_pooling,
        })
    }

    /// Embeds every bond: `(site_i, site_j, interaction)` with width 192 by
    /// default.
    pub fn embed_bonds(&self, tape: &mut Tape, params: &Params, input: &EncoderInput) -> Var {
        let sites = tape.constant(input.site_features.clone());
        let site_embedded = self.site_embed.forward(tape, params, sites);
        let dist = tape.constant(input.pair_distance.clone());
        let interaction = self.interaction_embed.forward(tape, params, dist);
        let ei = tape.gather(site_embedded, input.pair_i.clone());
        let ej = tape.gather(site_embedded, input.pair_j.clone());
        tape.concat_cols(&[ei, ej, interaction])
    }

    /// Softmax-weighted sum of value projections over each site's bonds,
    /// followed by layer normalization.
    pub fn attention_pool(
        &self,
        tape: &mut Tape,
        params: &Params,
        input: &EncoderInput,
        pairs: Var,
    ) -> Var {
        let scores = self.attention_weights.forward(tape, params, pairs);
        let weights =
            tape.segment_softmax(scores, input.pair_segments.clone(), input.pair_mask.clone());
        let values = self.value.forward(tape, params, pairs);
        let weighted = tape.mul_col(values, weights);
        let pooled = tape.segment_sum(weighted, input.pair_segments.clone());
        self.attention_norm.forward(tape, params, pooled)
    }

    /// Pre-pooling network on every local environment, then the mean over
    /// the real sites of each crystal.
    pub fn global_pool(
        &self,
        tape: &mut Tape,
        params: &Params,
        input: &EncoderInput,
        local: Var,
    ) -> Var {
        let h = self.pre_pooling.forward(tape, params, local);
        let real = tape.gather(h, input.valid_sites.clone());
        tape.segment_mean(real, input.valid_segments.clone())
    }

    /// Full forward pass. With `isolate_global` the global branch reads S′
    /// as a constant, so no gradient from it reaches the local submodel.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        input: &EncoderInput,
        isolate_global: bool,
    ) -> EncoderOutput {
        let pairs = self.embed_bonds(tape, params, input);
        let local = self.attention_pool(tape, params, input, pairs);
        let source = if isolate_global {
            tape.detach(local)
        } else {
            local
        };
        let global = self.global_pool(tape, params, input, source);
        EncoderOutput {
            pairs,
            local,
            global,
        }
    }

    /// Global representations without noise, one row per crystal.
    pub fn represent(&self, params: &Params, input: &EncoderInput) -> Array2<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, params, input, true);
        tape.value(out.global).clone()
    }
}

/// The post-pooling network plus the two appended prediction layers.
#[derive(Clone, Debug)]
pub struct SupervisedHead {
    post_pooling: Mlp,
    head: Mlp,
}

/// Parameter-name prefix of the appended prediction layers.
pub const HEAD_PREFIX: &str = "head.";

impl SupervisedHead {
    pub fn new(params: &mut Params, config: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let post_pooling = Mlp::new(
            params,
            "post",
            config.global_dim(),
            &config.post_pooling_net,
            config.hidden_style(),
            rng,
        );
        let head_style = MlpStyle {
            activation: config.activation,
            layer_norm: false,
            activate_last: false,
            last_gain: 1.0,
        };
        let head = Mlp::new(
            params,
            "head",
            post_pooling.output_width(),
            &[config.head_hidden, 1],
            head_style,
            rng,
        );
        SupervisedHead { post_pooling, head }
    }

    /// One scalar prediction per row of `global`.
    pub fn forward(&self, tape: &mut Tape, params: &Params, global: Var) -> Var {
        let h = self.post_pooling.forward(tape, params, global);
        self.head.forward(tape, params, h)
    }
}
