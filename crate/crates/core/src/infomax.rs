//! Deep InfoMax objective: upscaling networks, the Jensen-Shannon classifier
//! with reparameterized noise, the KL regularizer and the false-sample
//! generators.

use std::collections::{BTreeMap, HashSet};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{BondTensor, ElementPropertyTable, FeatureScaler};
use crate::encoder::{Encoder, EncoderInput, EncoderOutput};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mat, Mlp, MlpStyle, ParamId, Params, Tape, Var};

pub use crate::nn::tape::softplus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FalseSource {
    InBatch,
    FalsePolymorph,
    FalseComposition,
    FalsePermutation,
}

impl FalseSource {
    pub fn name(self) -> &'static str {
        match self {
            FalseSource::InBatch => "in_batch",
            FalseSource::FalsePolymorph => "false_polymorph",
            FalseSource::FalseComposition => "false_composition",
            FalseSource::FalsePermutation => "false_permutation",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Local,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimConfig {
    pub alpha: f64,
    pub beta: f64,
    pub upscale_net: Vec<usize>,
    pub local_sources: Vec<FalseSource>,
    pub global_sources: Vec<FalseSource>,
}

impl Default for DimConfig {
    fn default() -> Self {
        DimConfig {
            alpha: 1.0,
            beta: 0.1,
            upscale_net: vec![64, 128],
            local_sources: vec![
                FalseSource::InBatch,
                FalseSource::FalsePolymorph,
                FalseSource::FalseComposition,
            ],
            global_sources: vec![
                FalseSource::InBatch,
                FalseSource::FalsePolymorph,
                FalseSource::FalseComposition,
                FalseSource::FalsePermutation,
            ],
        }
    }
}

impl DimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite()
            && self.beta.is_finite()
            && self.alpha >= 0.0
            && self.beta >= 0.0)
        {
            return Err(Error::Config(
                "alpha and beta must be finite and non-negative".into(),
            ));
        }
        if self.upscale_net.is_empty() || self.upscale_net.contains(&0) {
            return Err(Error::Config(
                "upscale_net widths must be at least 1".into(),
            ));
        }
        for (level, sources) in [
            ("local", &self.local_sources),
            ("global", &self.global_sources),
        ] {
            if !sources.contains(&FalseSource::InBatch) {
                return Err(Error::Config(format!(
                    "{level} false sources must include in_batch"
                )));
            }
        }
        if self.local_sources.contains(&FalseSource::FalsePermutation) {
            return Err(Error::Config(
                "false_permutation is only permitted at the global level".into(),
            ));
        }
        Ok(())
    }

    pub fn sources(&self, level: Level) -> &[FalseSource] {
        match level {
            Level::Local => &self.local_sources,
            Level::Global => &self.global_sources,
        }
    }

    fn uses(&self, source: FalseSource) -> bool {
        self.local_sources.contains(&source) || self.global_sources.contains(&source)
    }
}

/// `softplus(−t) + softplus(f)` for true score `t` and false score `f`.
pub fn js_loss(true_score: f64, false_score: f64) -> f64 {
    softplus(-true_score) + softplus(false_score)
}

/// `mean(z² + σ − ln σ)` over dimensions.
pub fn kl_loss(z: &[f64], sigma: &[f64]) -> Result<f64> {
    assert_eq!(z.len(), sigma.len());
    if let Some(s) = sigma.iter().find(|s| s.is_nan() || **s <= 0.0) {
        return Err(Error::Domain(format!(
            "noise scale must be positive, got {s}"
        )));
    }
    let total: f64 = z.iter().zip(sigma).map(|(z, s)| z * z + s - s.ln()).sum();
    Ok(total / z.len() as f64)
}

/// Per-representation loss from precomputed scores. `false_scores[i][j]`
/// is the score of the false constituent from source `j` aligned with true
/// constituent `i`.
pub fn combined_loss(
    true_scores: &[f64],
    false_scores: &[Vec<f64>],
    z: &[f64],
    sigma: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    assert_eq!(true_scores.len(), false_scores.len());
    let i_count = true_scores.len() as f64;
    let mut js = 0.0;
    for (t, fs) in true_scores.iter().zip(false_scores) {
        let j_count = fs.len() as f64;
        for f in fs {
            js += alpha / (i_count * j_count) * js_loss(*t, *f);
        }
    }
    Ok(js + beta * kl_loss(z, sigma)?)
}

/// The pair of upscaling networks for one level plus its log noise scale.
#[derive(Clone, Debug)]
pub struct DimHead {
    pub level: Level,
    pub representation_net: Mlp,
    pub constituent_net: Mlp,
    pub log_sigma: ParamId,
}

impl DimHead {
    /// Final upscaling layers start with gain 0.1 so initial scores sit near
    /// zero.
    pub fn new(
        params: &mut Params,
        level: Level,
        representation_dim: usize,
        constituent_dim: usize,
        widths: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let prefix = match level {
            Level::Local => "dim.local",
            Level::Global => "dim.global",
        };
        let style = MlpStyle {
            activation: Activation::Mish,
            layer_norm: false,
            activate_last: false,
            last_gain: 0.1,
        };
        let representation_net = Mlp::new(
            params,
            &format!("{prefix}.z"),
            representation_dim,
            widths,
            style,
            rng,
        );
        let constituent_net = Mlp::new(
            params,
            &format!("{prefix}.c"),
            constituent_dim,
            widths,
            style,
            rng,
        );
        let log_sigma = params.add(
            format!("{prefix}.log_sigma"),
            Mat::zeros((1, representation_dim)),
        );
        DimHead {
            level,
            representation_net,
            constituent_net,
            log_sigma,
        }
    }

    pub fn sigma(&self, params: &Params) -> Vec<f64> {
        params
            .value(self.log_sigma)
            .iter()
            .map(|v| v.exp())
            .collect()
    }

    pub fn representation_dim(&self, params: &Params) -> usize {
        params.value(self.log_sigma).ncols()
    }

    pub fn upscale_representation(&self, tape: &mut Tape, params: &Params, v: Var) -> Var {
        self.representation_net.forward(tape, params, v)
    }

    pub fn upscale_constituent(&self, tape: &mut Tape, params: &Params, v: Var) -> Var {
        self.constituent_net.forward(tape, params, v)
    }

    /// Builds the combined loss for every representation row of `z`.
    /// `noise` holds one standard-normal row per representation.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape,
        params: &Params,
        z: Var,
        noise: &Mat,
        constituents: Var,
        plan: &ScorePlan,
        config: &DimConfig,
    ) -> DimLoss {
        assert_eq!(tape.value(z).nrows(), plan.n_reps);
        let log_sigma = tape.param(params, self.log_sigma);
        let sigma = tape.exp(log_sigma);
        let y = tape.constant(noise.clone());
        let scaled = tape.mul_row(y, sigma);
        let perturbed = tape.add(z, scaled);
        let uz = self.upscale_representation(tape, params, perturbed);
        let uc = self.upscale_constituent(tape, params, constituents);

        let true_scores = tape.indexed_dot(uz, plan.true_rep.clone(), uc, plan.true_con.clone());
        let false_scores = tape.indexed_dot(uz, plan.false_rep.clone(), uc, plan.false_con.clone());
        let neg_true = tape.neg(true_scores);
        let sp_true = tape.softplus(neg_true);
        let sp_false = tape.softplus(false_scores);
        let js_true = tape.weighted_sum(sp_true, plan.true_weight.clone());
        let js_false = tape.weighted_sum(sp_false, plan.false_weight.clone());
        let js = tape.add(js_true, js_false);

        let z_sq = tape.square(z);
        let z_term = tape.mean_all(z_sq);
        let sigma_gap = tape.sub(sigma, log_sigma);
        let sigma_term = tape.mean_all(sigma_gap);
        let kl = tape.add(z_term, sigma_term);

        let weighted_js = tape.scale(js, config.alpha);
        let weighted_kl = tape.scale(kl, config.beta);
        let total = tape.add(weighted_js, weighted_kl);
        DimLoss {
            js,
            kl,
            total,
            true_scores,
            false_scores,
        }
    }
}

/// Tape handles of one level's loss. `js` excludes the α weight.
#[derive(Clone, Copy, Debug)]
pub struct DimLoss {
    pub js: Var,
    pub kl: Var,
    pub total: Var,
    pub true_scores: Var,
    pub false_scores: Var,
}

/// Index plan pairing representations with true and false constituents.
#[derive(Clone, Debug, Default)]
pub struct ScorePlan {
    pub n_reps: usize,
    pub true_rep: Rc<Vec<usize>>,
    pub true_con: Rc<Vec<usize>>,
    pub true_weight: Rc<Vec<f64>>,
    pub false_rep: Rc<Vec<usize>>,
    pub false_con: Rc<Vec<usize>>,
    pub false_weight: Rc<Vec<f64>>,
    /// Source of each false term.
    pub false_source: Vec<FalseSource>,
    /// Index of the true term each false term is aligned with.
    pub false_partner: Vec<usize>,
}

/// Accumulates a [`ScorePlan`] one representation at a time.
#[derive(Default)]
pub struct ScorePlanBuilder {
    n_reps: usize,
    true_rep: Vec<usize>,
    true_con: Vec<usize>,
    true_weight: Vec<f64>,
    false_rep: Vec<usize>,
    false_con: Vec<usize>,
    false_weight: Vec<f64>,
    false_source: Vec<FalseSource>,
    false_partner: Vec<usize>,
}

impl ScorePlanBuilder {
    /// Adds one representation. `falses[i]` lists the false constituents
    /// aligned with `true_constituents[i]`; every list must have the same
    /// length J ≥ 1.
    pub fn push(&mut self, true_constituents: &[usize], falses: &[Vec<(FalseSource, usize)>]) {
        assert_eq!(true_constituents.len(), falses.len());
        assert!(!true_constituents.is_empty());
        let rep = self.n_reps;
        self.n_reps += 1;
        let i_count = true_constituents.len() as f64;
        let j_count = falses[0].len();
        assert!(j_count >= 1);
        for (&c, fs) in true_constituents.iter().zip(falses) {
            assert_eq!(
                fs.len(),
                j_count,
                "every constituent needs the same sources"
            );
            let partner = self.true_rep.len();
            self.true_rep.push(rep);
            self.true_con.push(c);
            self.true_weight.push(1.0 / i_count);
            for &(source, f) in fs {
                self.false_rep.push(rep);
                self.false_con.push(f);
                self.false_weight.push(1.0 / (i_count * j_count as f64));
                self.false_source.push(source);
                self.false_partner.push(partner);
            }
        }
    }

    /// Divides every weight by the representation count so the loss is the
    /// mean over representations.
    pub fn finish(self) -> ScorePlan {
        let r = self.n_reps.max(1) as f64;
        let scale = |w: Vec<f64>| Rc::new(w.into_iter().map(|v| v / r).collect::<Vec<_>>());
        ScorePlan {
            n_reps: self.n_reps,
            true_rep: Rc::new(self.true_rep),
            true_con: Rc::new(self.true_con),
            true_weight: scale(self.true_weight),
            false_rep: Rc::new(self.false_rep),
            false_con: Rc::new(self.false_con),
            false_weight: scale(self.false_weight),
            false_source: self.false_source,
            false_partner: self.false_partner,
        }
    }
}

/// Species counts for `m` sites in the proportions of `reference`, by the
/// largest-remainder rule with ties broken by symbol order.
fn apportion(reference: &[String], m: usize) -> BTreeMap<String, usize> {
    let comp = crate::data::structure::composition_of(reference);
    let n = reference.len() as f64;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut remainders = Vec::new();
    let mut assigned = 0;
    for (s, c) in &comp {
        let exact = *c as f64 * m as f64 / n;
        let floor = exact.floor() as usize;
        counts.insert(s.clone(), floor);
        assigned += floor;
        remainders.push((exact - floor as f64, s.clone()));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    for (_, s) in remainders.into_iter().take(m - assigned) {
        *counts.get_mut(&s).expect("present") += 1;
    }
    counts
}

/// Assigns `counts` to `m` positions. Position `k` takes `preferred(k)` when
/// that species still has quota, otherwise the next species with quota in
/// symbol order.
fn assign(
    m: usize,
    mut counts: BTreeMap<String, usize>,
    preferred: impl Fn(usize) -> String,
) -> Vec<String> {
    let order: Vec<String> = counts.keys().cloned().collect();
    let mut cursor = 0;
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let want = preferred(k);
        let pick = if counts.get(&want).copied().unwrap_or(0) > 0 {
            want
        } else {
            loop {
                let s = &order[cursor % order.len()];
                cursor += 1;
                if counts[s] > 0 {
                    break s.clone();
                }
            }
        };
        *counts.get_mut(&pick).expect("present") -= 1;
        out.push(pick);
    }
    out
}

/// Donor geometry populated in the true crystal's proportions.
pub fn make_false_polymorph(
    true_set: &BondTensor,
    donor: &BondTensor,
    table: &ElementPropertyTable,
) -> Result<BondTensor> {
    let m = donor.num_sites();
    let counts = apportion(&true_set.species, m);
    let mt = true_set.num_sites();
    let species = assign(m, counts, |k| true_set.species[k % mt].clone());
    donor.with_species(
        format!("{}~polymorph~{}", true_set.crystal_id, donor.crystal_id),
        species,
        table,
    )
}

/// True geometry populated in the donor's proportions.
pub fn make_false_composition(
    true_set: &BondTensor,
    donor: &BondTensor,
    table: &ElementPropertyTable,
) -> Result<BondTensor> {
    let m = true_set.num_sites();
    let counts = apportion(&donor.species, m);
    let md = donor.num_sites();
    let species = assign(m, counts, |k| donor.species[k % md].clone());
    true_set.with_species(
        format!("{}~composition~{}", true_set.crystal_id, donor.crystal_id),
        species,
        table,
    )
}

/// True geometry with species shuffled over the sites. `None` for
/// single-species crystals, where every permutation is the identity.
pub fn make_false_permutation(
    true_set: &BondTensor,
    table: &ElementPropertyTable,
    rng: &mut impl Rng,
) -> Result<Option<BondTensor>> {
    let distinct: HashSet<&String> = true_set.species.iter().collect();
    if distinct.len() < 2 {
        return Ok(None);
    }
    let mut species = true_set.species.clone();
    loop {
        species.shuffle(rng);
        if species != true_set.species {
            break;
        }
    }
    true_set
        .with_species(
            format!("{}~permutation", true_set.crystal_id),
            species,
            table,
        )
        .map(Some)
}

/// Picks a crystal other than `owner` uniformly from `n` crystals.
pub fn sample_other_crystal(n: usize, owner: usize, rng: &mut impl Rng) -> Result<usize> {
    if n < 2 {
        return Err(Error::Sampling(
            "in-batch false samples need at least two crystals in the batch".into(),
        ));
    }
    let k = rng.random_range(0..n - 1);
    Ok(if k >= owner { k + 1 } else { k })
}

/// Draws an in-batch false constituent for `owner`: a crystal other than
/// the owner uniformly, then one of its constituents uniformly. Returns
/// `(crystal, constituent)`.
pub fn sample_in_batch(
    constituent_counts: &[usize],
    owner: usize,
    rng: &mut impl Rng,
) -> Result<(usize, usize)> {
    let k = sample_other_crystal(constituent_counts.len(), owner, rng)?;
    Ok((k, rng.random_range(0..constituent_counts[k])))
}

/// Synthetic crystals appended to a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticEntry {
    pub source: FalseSource,
    pub owner: usize,
    pub index: usize,
}

/// A batch of real crystals followed by their synthetic false samples.
#[derive(Clone, Debug)]
pub struct DimBatch {
    pub input: EncoderInput,
    pub n_real: usize,
    pub synthetic: Vec<SyntheticEntry>,
}

impl DimBatch {
    pub fn synthetic_for(&self, owner: usize, source: FalseSource) -> Option<usize> {
        self.synthetic
            .iter()
            .find(|e| e.owner == owner && e.source == source)
            .map(|e| e.index)
    }
}

pub fn build_dim_batch(
    tensors: &[&BondTensor],
    config: &DimConfig,
    scaler: &FeatureScaler,
    table: &ElementPropertyTable,
    rng: &mut impl Rng,
) -> Result<DimBatch> {
    let n = tensors.len();
    if n < 2 {
        return Err(Error::Sampling(
            "in-batch false samples need at least two crystals in the batch".into(),
        ));
    }
    let mut extra: Vec<BondTensor> = Vec::new();
    let mut synthetic = Vec::new();
    for (owner, t) in tensors.iter().enumerate() {
        let mut push = |source, set: BondTensor, extra: &mut Vec<BondTensor>| {
            synthetic.push(SyntheticEntry {
                source,
                owner,
                index: n + extra.len(),
            });
            extra.push(set);
        };
        if config.uses(FalseSource::FalsePolymorph) {
            let donor = tensors[sample_other_crystal(n, owner, rng)?];
            push(
                FalseSource::FalsePolymorph,
                make_false_polymorph(t, donor, table)?,
                &mut extra,
            );
        }
        if config.uses(FalseSource::FalseComposition) {
            let donor = tensors[sample_other_crystal(n, owner, rng)?];
            push(
                FalseSource::FalseComposition,
                make_false_composition(t, donor, table)?,
                &mut extra,
            );
        }
        if config.uses(FalseSource::FalsePermutation) {
            if let Some(p) = make_false_permutation(t, table, rng)? {
                push(FalseSource::FalsePermutation, p, &mut extra);
            }
        }
    }
    let all: Vec<&BondTensor> = tensors.iter().copied().chain(extra.iter()).collect();
    Ok(DimBatch {
        input: EncoderInput::new(&all, scaler)?,
        n_real: n,
        synthetic,
    })
}

/// Encoder plus the local and global InfoMax heads.
#[derive(Clone, Debug)]
pub struct DimModel {
    pub encoder: Encoder,
    pub local: DimHead,
    pub global: DimHead,
}

impl DimModel {
    pub fn new(
        params: &mut Params,
        encoder: Encoder,
        config: &DimConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let ec = &encoder.config;
        let local = DimHead::new(
            params,
            Level::Local,
            ec.local_env_dim,
            ec.pair_width(),
            &config.upscale_net,
            rng,
        );
        let global = DimHead::new(
            params,
            Level::Global,
            ec.global_dim(),
            ec.local_env_dim,
            &config.upscale_net,
            rng,
        );
        Ok(DimModel {
            encoder,
            local,
            global,
        })
    }

    /// Builds both levels' losses for `batch`. Noise is drawn from
    /// `noise_rng` and false constituents from `sample_rng`.
    pub fn losses(
        &self,
        tape: &mut Tape,
        params: &Params,
        batch: &DimBatch,
        config: &DimConfig,
        noise_rng: &mut impl Rng,
        sample_rng: &mut impl Rng,
    ) -> Result<BatchLosses> {
        let input = &batch.input;
        let out: EncoderOutput = self.encoder.forward(tape, params, input, true);

        let local_plan = local_plan(batch, config, sample_rng)?;
        let rep_rows: Vec<usize> = (0..batch.n_real)
            .flat_map(|k| (0..input.real_sites(k)).map(move |a| (k, a)))
            .map(|(k, a)| input.site_row(k, a))
            .collect();
        let local_z = tape.gather(out.local, Rc::new(rep_rows));
        let local_noise = standard_normal(
            noise_rng,
            local_plan.n_reps,
            self.local.representation_dim(params),
        );
        let local = self.local.loss(
            tape,
            params,
            local_z,
            &local_noise,
            out.pairs,
            &local_plan,
            config,
        );

        let global_plan = global_plan(batch, config, sample_rng)?;
        let global_z = tape.gather(out.global, Rc::new((0..batch.n_real).collect()));
        let global_noise = standard_normal(
            noise_rng,
            batch.n_real,
            self.global.representation_dim(params),
        );
        let local_constants = tape.detach(out.local);
        let global = self.global.loss(
            tape,
            params,
            global_z,
            &global_noise,
            local_constants,
            &global_plan,
            config,
        );

        let total = tape.add(local.total, global.total);
        let true_keys: Vec<HashSet<PairKey>> = constituents_by_rep(&local_plan)
            .into_iter()
            .map(|cs| cs.into_iter().map(|c| local_key(input, c)).collect())
            .collect();
        let local_stats = level_stats(tape, &local, &local_plan, |rep, con| {
            true_keys[rep].contains(&local_key(input, con))
        });
        let s_prime = tape.value(out.local);
        let true_rows = constituents_by_rep(&global_plan);
        let global_stats = level_stats(tape, &global, &global_plan, |rep, con| {
            true_rows[rep].iter().any(|&c| rows_close(s_prime, c, con))
        });
        Ok(BatchLosses {
            local,
            global,
            total,
            local_stats,
            global_stats,
        })
    }
}

fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

type PairKey = (u32, u32, i64);

fn local_key(input: &EncoderInput, pair: usize) -> PairKey {
    (
        input.site_z[input.pair_i[pair]],
        input.site_z[input.pair_j[pair]],
        (input.raw_distance[pair] * 1e6).round() as i64,
    )
}

fn constituents_by_rep(plan: &ScorePlan) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); plan.n_reps];
    for (&r, &c) in plan.true_rep.iter().zip(plan.true_con.iter()) {
        out[r].push(c);
    }
    out
}

fn rows_close(m: &Mat, a: usize, b: usize) -> bool {
    m.row(a)
        .iter()
        .zip(m.row(b).iter())
        .all(|(x, y)| (x - y).abs() <= 1e-9)
}

/// Summary numbers for one level of one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub js: f64,
    pub kl: f64,
    pub total: f64,
    pub representations: usize,
    /// Mean `softplus(false score)` per source.
    pub source_loss: BTreeMap<String, f64>,
    /// `(collisions, draws)` per source.
    pub collisions: BTreeMap<String, (usize, usize)>,
    /// `(true score > in-batch false score, comparisons)`.
    pub in_batch_ranked: (usize, usize),
}

impl LevelStats {
    pub fn collision_rate(&self, source: FalseSource) -> Option<f64> {
        self.collisions
            .get(source.name())
            .filter(|(_, n)| *n > 0)
            .map(|(c, n)| *c as f64 / *n as f64)
    }

    pub fn in_batch_accuracy(&self) -> f64 {
        let (c, n) = self.in_batch_ranked;
        if n == 0 {
            0.0
        } else {
            c as f64 / n as f64
        }
    }

    /// Accumulates `other` into `self`, weighting means by representation count.
    pub fn merge(&mut self, other: &LevelStats) {
        let (a, b) = (self.representations as f64, other.representations as f64);
        let mix = |x: f64, y: f64| {
            if a + b > 0.0 {
                (x * a + y * b) / (a + b)
            } else {
                0.0
            }
        };
        self.js = mix(self.js, other.js);
        self.kl = mix(self.kl, other.kl);
        self.total = mix(self.total, other.total);
        for (k, v) in &other.source_loss {
            let e = self.source_loss.entry(k.clone()).or_insert(*v);
            if a > 0.0 {
                *e = mix(*e, *v);
            }
        }
        for (k, (c, n)) in &other.collisions {
            let e = self.collisions.entry(k.clone()).or_insert((0, 0));
            e.0 += c;
            e.1 += n;
        }
        self.in_batch_ranked.0 += other.in_batch_ranked.0;
        self.in_batch_ranked.1 += other.in_batch_ranked.1;
        self.representations += other.representations;
    }
}

/// Tape handles and statistics of both levels.
#[derive(Clone, Debug)]
pub struct BatchLosses {
    pub local: DimLoss,
    pub global: DimLoss,
    pub total: Var,
    pub local_stats: LevelStats,
    pub global_stats: LevelStats,
}

/// Per-source losses, collision counts and in-batch ranking. A false
/// sample collides when it equals any true constituent of its
/// representation, as decided by `collides(rep, constituent)`.
fn level_stats(
    tape: &Tape,
    loss: &DimLoss,
    plan: &ScorePlan,
    collides: impl Fn(usize, usize) -> bool,
) -> LevelStats {
    let t = tape.value(loss.true_scores);
    let f = tape.value(loss.false_scores);
    let mut stats = LevelStats {
        js: tape.scalar(loss.js),
        kl: tape.scalar(loss.kl),
        total: tape.scalar(loss.total),
        representations: plan.n_reps,
        ..Default::default()
    };
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (k, &source) in plan.false_source.iter().enumerate() {
        let name = source.name().to_owned();
        let e = sums.entry(name.clone()).or_insert((0.0, 0));
        e.0 += softplus(f[[k, 0]]);
        e.1 += 1;
        let hit = collides(plan.false_rep[k], plan.false_con[k]);
        let c = stats.collisions.entry(name).or_insert((0, 0));
        c.0 += hit as usize;
        c.1 += 1;
        if source == FalseSource::InBatch {
            stats.in_batch_ranked.1 += 1;
            if t[[plan.false_partner[k], 0]] > f[[k, 0]] {
                stats.in_batch_ranked.0 += 1;
            }
        }
    }
    stats.source_loss = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect();
    stats
}

fn local_plan(batch: &DimBatch, config: &DimConfig, rng: &mut impl Rng) -> Result<ScorePlan> {
    let input = &batch.input;
    let real_counts: Vec<usize> = (0..batch.n_real).map(|k| input.real_sites(k)).collect();
    let mut builder = ScorePlanBuilder::default();
    for k in 0..batch.n_real {
        let m = real_counts[k];
        for a in 0..m {
            let trues: Vec<usize> = (0..m).map(|b| input.pair_row(k, a, b)).collect();
            let mut falses = Vec::with_capacity(m);
            for b in 0..m {
                let mut fs = Vec::with_capacity(config.local_sources.len());
                for &source in &config.local_sources {
                    let row = match source {
                        FalseSource::InBatch => {
                            let other = sample_other_crystal(batch.n_real, k, rng)?;
                            let mo = real_counts[other];
                            input.pair_row(other, rng.random_range(0..mo), rng.random_range(0..mo))
                        }
                        FalseSource::FalsePolymorph => {
                            let s = batch.synthetic_for(k, source).expect("generated");
                            let ms = input.real_sites(s);
                            input.pair_row(s, rng.random_range(0..ms), rng.random_range(0..ms))
                        }
                        FalseSource::FalseComposition => {
                            let s = batch.synthetic_for(k, source).expect("generated");
                            input.pair_row(s, a, b)
                        }
                        FalseSource::FalsePermutation => unreachable!("rejected by validation"),
                    };
                    fs.push((source, row));
                }
                falses.push(fs);
            }
            builder.push(&trues, &falses);
        }
    }
    Ok(builder.finish())
}

fn global_plan(batch: &DimBatch, config: &DimConfig, rng: &mut impl Rng) -> Result<ScorePlan> {
    let input = &batch.input;
    let mut builder = ScorePlanBuilder::default();
    for k in 0..batch.n_real {
        let m = input.real_sites(k);
        let trues: Vec<usize> = (0..m).map(|a| input.site_row(k, a)).collect();
        let mut falses = Vec::with_capacity(m);
        for a in 0..m {
            let mut fs = Vec::with_capacity(config.global_sources.len());
            for &source in &config.global_sources {
                let row = match source {
                    FalseSource::InBatch => {
                        let other = sample_other_crystal(batch.n_real, k, rng)?;
                        input.site_row(other, rng.random_range(0..input.real_sites(other)))
                    }
                    FalseSource::FalsePolymorph => {
                        let s = batch.synthetic_for(k, source).expect("generated");
                        input.site_row(s, rng.random_range(0..input.real_sites(s)))
                    }
                    FalseSource::FalseComposition => {
                        let s = batch.synthetic_for(k, source).expect("generated");
                        input.site_row(s, a)
                    }
                    FalseSource::FalsePermutation => match batch.synthetic_for(k, source) {
                        Some(s) => input.site_row(s, a),
                        None => continue,
                    },
                };
                fs.push((source, row));
            }
            falses.push(fs);
        }
        builder.push(&trues, &falses);
    }
    Ok(builder.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::structure::element_fractions;
    use crate::data::{build_bond_tensor, build_supercell, CrystalStructure};
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(id: &str, species: &[&str], coords: Vec<[f64; 3]>, a: f64, cap: usize) -> BondTensor {
        let s = CrystalStructure::new(
            id,
            [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]],
            coords,
            species.iter().map(|s| s.to_string()).collect(),
        );
        build_bond_tensor(&build_supercell(&s, cap, ElementPropertyTable::bundled()).unwrap())
    }

    fn li2o() -> BondTensor {
        set(
            "li2o",
            &["O", "Li", "Li"],
            vec![[0.0; 3], [0.25, 0.25, 0.25], [0.75, 0.75, 0.75]],
            4.6,
            12,
        )
    }

    fn nacl() -> BondTensor {
        set(
            "nacl",
            &["Na", "Cl"],
            vec![[0.0; 3], [0.5, 0.5, 0.5]],
            3.2,
            16,
        )
    }

    #[test]
    fn analytic_values() {
        assert!((js_loss(0.0, 0.0) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((js_loss(-5.0, 5.0) - 2.0 * (1.0 + 5f64.exp()).ln()).abs() < 1e-12);
        assert!(js_loss(50.0, -50.0) < 1e-20);
        assert_eq!(kl_loss(&[0.0; 4], &[1.0; 4]).unwrap(), 1.0);
        assert_eq!(kl_loss(&[1.0; 4], &[1.0; 4]).unwrap(), 2.0);
        let e = std::f64::consts::E;
        assert!((kl_loss(&[0.0], &[e]).unwrap() - (e - 1.0)).abs() < 1e-12);
        assert!(matches!(kl_loss(&[0.0], &[0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn combined_loss_normalizes_by_constituents() {
        let one = combined_loss(&[0.3], &[vec![-0.2, 0.1]], &[0.0], &[1.0], 1.0, 0.1).unwrap();
        let two = combined_loss(
            &[0.3, 0.3],
            &[vec![-0.2, 0.1], vec![-0.2, 0.1]],
            &[0.0],
            &[1.0],
            1.0,
            0.1,
        )
        .unwrap();
        assert!((one - two).abs() < 1e-12);
        let kl_only = combined_loss(&[3.0], &[vec![1.0]], &[0.5], &[2.0], 0.0, 0.1).unwrap();
        assert!((kl_only - 0.1 * kl_loss(&[0.5], &[2.0]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn config_rules() {
        DimConfig::default().validate().unwrap();
        let mut c = DimConfig::default();
        c.local_sources.push(FalseSource::FalsePermutation);
        assert!(c.validate().is_err());
        let mut c = DimConfig::default();
        c.global_sources.retain(|s| *s != FalseSource::InBatch);
        assert!(c.validate().is_err());
    }

    #[test]
    fn polymorph_of_li2o_on_rock_salt_geometry() {
        let table = ElementPropertyTable::bundled();
        let (t, d) = (li2o(), nacl());
        let p = make_false_polymorph(&t, &d, table).unwrap();
        assert_eq!(p.distances, d.distances);
        let frac = element_fractions(&p.species);
        let want = element_fractions(&t.species);
        let m = p.num_sites() as f64;
        for (s, f) in &want {
            assert!((frac.get(s).copied().unwrap_or(0.0) - f).abs() < 1.0 / m);
        }
        let same = make_false_polymorph(&t, &t, table).unwrap();
        assert_eq!(same.species, t.species);
        assert_eq!(same.site_features, t.site_features);
    }

    #[test]
    fn composition_keeps_geometry() {
        let table = ElementPropertyTable::bundled();
        let (t, d) = (li2o(), nacl());
        let c = make_false_composition(&t, &d, table).unwrap();
        assert_eq!(c.distances, t.distances);
        assert!(c.species.iter().all(|s| s == "Na" || s == "Cl"));
        let cu = set("cu", &["Cu"], vec![[0.0; 3]], 2.5, 4);
        let mono = make_false_composition(&t, &cu, table).unwrap();
        assert!(mono.species.iter().all(|s| s == "Cu"));
    }

    #[test]
    fn permutation_moves_a_species_and_skips_elements() {
        let table = ElementPropertyTable::bundled();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = li2o();
        let p = make_false_permutation(&t, table, &mut rng)
            .unwrap()
            .unwrap();
        assert_ne!(p.species, t.species);
        let mut a = p.species.clone();
        let mut b = t.species.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        let cu = set("cu", &["Cu"], vec![[0.0; 3]], 2.5, 4);
        assert!(make_false_permutation(&cu, table, &mut rng)
            .unwrap()
            .is_none());
    }

    #[test]
    fn in_batch_never_returns_owner() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let (k, c) = sample_in_batch(&[3, 4], 0, &mut rng).unwrap();
            assert_eq!(k, 1);
            assert!(c < 4);
        }
        assert!(matches!(
            sample_in_batch(&[3], 0, &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn initial_losses_sit_near_zero_score_baseline() {
        let table = ElementPropertyTable::bundled();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&mut params, &EncoderConfig::default(), &mut rng).unwrap();
        let cfg = DimConfig::default();
        let model = DimModel::new(&mut params, enc, &cfg, &mut rng).unwrap();
        let (a, b) = (li2o(), nacl());
        let scaler = FeatureScaler::fit(&[a.clone(), b.clone()]);
        let batch = build_dim_batch(&[&a, &b], &cfg, &scaler, table, &mut rng).unwrap();
        let mut tape = Tape::new();
        let l = model
            .losses(&mut tape, &params, &batch, &cfg, &mut rng.clone(), &mut rng)
            .unwrap();
        for js in [l.local_stats.js, l.global_stats.js] {
            assert!((js - 2.0 * std::f64::consts::LN_2).abs() < 0.05, "{js}");
        }
        let grads = tape.backward(l.total);
        assert!(tape
            .param_grads(&params, &grads)
            .iter()
            .all(|g| g.iter().all(|v| v.is_finite())));
    }
}
