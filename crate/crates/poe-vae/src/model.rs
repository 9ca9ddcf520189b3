//! Model graphs: the encoder/decoder network sets of each model kind and
//! the posterior for any observed subset of modalities.
//!
//! The four kinds differ only in how they realize `q(z | observed subset)`:
//!
//! * **SVAE** — n² single-input encoders `q_j^i(z|x_i)` (reading modality i,
//!   acting as the expert for modality j). Posteriors are products of
//!   experts: all modalities observed fuses the n diagonal experts
//!   `q_i^i(x_i)`; a single observed modality fuses its full column,
//!   replacement experts included. For n=3, a pair (i, j) exposes two
//!   fusions (see [`ModelGraph::pair_posteriors_t`]).
//! * **VAEVAE / VAEVAE\*** — one dedicated encoder per non-empty modality
//!   subset (3 for n=2, 7 for n=3); the prior is the empty subset's member.
//! * **MMVAE** — one encoder per modality and no fused posterior; the
//!   per-modality experts feed mixture sampling.
//!
//! Decoders are per-modality and shared in structure across kinds.

use std::collections::BTreeMap;

use ndarray::{Array2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::DiagGaussian;
use crate::nn::{
    Decoder, HeadSpec, NetworkSpec, ParamBinder, ParamStore, Phase, SubsetEncoder,
};
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Svae,
    Vaevae,
    VaevaeStar,
    Mmvae,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "svae" => Ok(ModelKind::Svae),
            "vaevae" => Ok(ModelKind::Vaevae),
            "vaevae-star" => Ok(ModelKind::VaevaeStar),
            "mmvae" => Ok(ModelKind::Mmvae),
            other => Err(Error::config(format!(
                "unknown model kind '{other}' (expected svae | vaevae | vaevae-star | mmvae)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Svae => "svae",
            ModelKind::Vaevae => "vaevae",
            ModelKind::VaevaeStar => "vaevae-star",
            ModelKind::Mmvae => "mmvae",
        }
    }

    /// Model kinds with dedicated subset encoder networks.
    pub fn has_subset_encoders(&self) -> bool {
        matches!(self, ModelKind::Vaevae | ModelKind::VaevaeStar)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_modalities: usize,
    pub latent: usize,
    /// Per-modality encoder spec (GaussParams head). SVAE replacement
    /// experts reuse the spec of the modality they read; subset encoders
    /// assemble the per-modality specs through the subset template.
    pub encoders: Vec<NetworkSpec>,
    /// Per-modality decoder spec (Logits head).
    pub decoders: Vec<NetworkSpec>,
    /// Importance-sample count for the MMVAE bound; ignored by PoE kinds.
    #[serde(default)]
    pub iwae_samples: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.n_modalities) {
            return Err(Error::config("n_modalities must be 2 or 3"));
        }
        if self.latent == 0 {
            return Err(Error::config("latent dimension must be positive"));
        }
        if self.encoders.len() != self.n_modalities || self.decoders.len() != self.n_modalities {
            return Err(Error::config(
                "one encoder and one decoder spec per modality required",
            ));
        }
        for (i, e) in self.encoders.iter().enumerate() {
            if !matches!(e.head, HeadSpec::GaussParams { .. }) {
                return Err(Error::config(format!(
                    "encoder {i} must end in a GaussParams head"
                )));
            }
        }
        for (i, d) in self.decoders.iter().enumerate() {
            if !matches!(d.head, HeadSpec::Logits { .. }) {
                return Err(Error::config(format!("decoder {i} must end in a Logits head")));
            }
            if d.input_shape != [self.latent] {
                return Err(Error::config(format!(
                    "decoder {i} input {:?} inconsistent with latent {}",
                    d.input_shape, self.latent
                )));
            }
        }
        match self.kind {
            ModelKind::Mmvae => {
                let k = self
                    .iwae_samples
                    .ok_or_else(|| Error::config("mmvae requires iwae_samples"))?;
                if k < 1 {
                    return Err(Error::config("iwae_samples must be >= 1"));
                }
                if self.n_modalities != 2 {
                    return Err(Error::config("the mmvae baseline is bi-modal"));
                }
            }
            _ => {
                if self.iwae_samples.is_some() {
                    return Err(Error::config("iwae_samples applies to mmvae only"));
                }
            }
        }
        Ok(())
    }

    /// Modality shape expected by decoder `m`.
    pub fn modality_shape(&self, m: usize) -> &[usize] {
        match &self.decoders[m].head {
            HeadSpec::Logits { shape } => shape,
            _ => unreachable!("validated decoder head"),
        }
    }
}

enum EncoderSet {
    /// `nets[i][j]` reads modality `i` and plays the expert role for
    /// modality `j` (so `nets[i][i]` is the plain encoder and `nets[i][j]`,
    /// j≠i, the replacement expert `q*_j(z|x_i)`).
    Svae { nets: Vec<Vec<SubsetEncoder>> },
    /// Keyed by modality-subset bitmask.
    Subsets { nets: BTreeMap<u8, SubsetEncoder> },
    /// One expert per modality.
    PerModality { nets: Vec<SubsetEncoder> },
}

pub struct ModelGraph {
    pub config: ModelConfig,
    pub init_seed: u64,
    params: ParamStore,
    encoders: EncoderSet,
    decoders: Vec<Decoder>,
}

pub(crate) fn subset_mask(modalities: &[usize]) -> u8 {
    modalities.iter().fold(0u8, |m, &i| m | (1 << i))
}

/// Builds a model graph with all weights initialized deterministically from
/// `init_seed` (fan-in-scaled uniform).
pub fn build_model(config: ModelConfig, init_seed: u64) -> Result<ModelGraph> {
    config.validate()?;
    let mut store = ParamStore::new();
    // one RNG stream per network keeps initialization independent of the
    // order networks are enumerated in
    let mut net_ordinal = 0u64;
    let mut next_rng = |seed: u64| {
        net_ordinal += 1;
        ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(net_ordinal)))
    };
    let n = config.n_modalities;
    let encoders = match config.kind {
        ModelKind::Svae => {
            let mut nets = Vec::with_capacity(n);
            for i in 0..n {
                let mut column = Vec::with_capacity(n);
                for j in 0..n {
                    let name = format!("enc_m{j}_from_m{i}");
                    let mut rng = next_rng(init_seed);
                    column.push(SubsetEncoder::build(
                        name,
                        vec![i],
                        &[&config.encoders[i]],
                        config.latent,
                        &mut store,
                        &mut rng,
                    )?);
                }
                nets.push(column);
            }
            EncoderSet::Svae { nets }
        }
        ModelKind::Vaevae | ModelKind::VaevaeStar => {
            let mut nets = BTreeMap::new();
            for mask in 1u8..(1 << n) {
                let modalities: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
                let name = format!(
                    "enc_s{}",
                    modalities
                        .iter()
                        .map(|m| m.to_string())
                        .collect::<String>()
                );
                let specs: Vec<&NetworkSpec> =
                    modalities.iter().map(|&m| &config.encoders[m]).collect();
                let mut rng = next_rng(init_seed);
                nets.insert(
                    mask,
                    SubsetEncoder::build(
                        name,
                        modalities,
                        &specs,
                        config.latent,
                        &mut store,
                        &mut rng,
                    )?,
                );
            }
            EncoderSet::Subsets { nets }
        }
        ModelKind::Mmvae => {
            let mut nets = Vec::with_capacity(n);
            for i in 0..n {
                let mut rng = next_rng(init_seed);
                nets.push(SubsetEncoder::build(
                    format!("enc_m{i}"),
                    vec![i],
                    &[&config.encoders[i]],
                    config.latent,
                    &mut store,
                    &mut rng,
                )?);
            }
            EncoderSet::PerModality { nets }
        }
    };
    let mut decoders = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = next_rng(init_seed);
        decoders.push(Decoder::build(
            format!("dec_m{i}"),
            &config.decoders[i],
            config.latent,
            &mut store,
            &mut rng,
        )?);
    }
    Ok(ModelGraph {
        config,
        init_seed,
        params: store,
        encoders,
        decoders,
    })
}

/// Trainable-parameter counts per network and in aggregate.
#[derive(Debug, Clone)]
pub struct ParamCounts {
    pub networks: Vec<(String, usize)>,
    pub encoder_total: usize,
    pub decoder_total: usize,
    pub total: usize,
}

impl ModelGraph {
    pub fn n_modalities(&self) -> usize {
        self.config.n_modalities
    }

    pub fn latent(&self) -> usize {
        self.config.latent
    }

    pub fn store(&self) -> &ParamStore {
        &self.params
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn binder(&self, phase: Phase) -> ParamBinder {
        ParamBinder::new(&self.params, phase)
    }

    fn observed(inputs: &[Option<Var>]) -> Vec<usize> {
        inputs
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|_| i))
            .collect()
    }

    /// Gaussian parameters `[B, 2L]` of `q(z | observed subset)` on the
    /// tape. SVAE fuses its experts (fusion clamps log-variances); subset
    /// networks are clamped explicitly, so the result always parameterizes
    /// a valid Gaussian.
    pub fn posterior_t(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        inputs: &[Option<Var>],
    ) -> Result<Var> {
        if inputs.len() != self.n_modalities() {
            return Err(Error::dim("one input slot per modality required"));
        }
        let observed = Self::observed(inputs);
        if observed.is_empty() {
            return Err(Error::contract(
                "posterior requires at least one observed modality (the prior is exposed separately)",
            ));
        }
        match &self.encoders {
            EncoderSet::Svae { nets } => {
                let n = self.n_modalities();
                let experts: Vec<Var> = if observed.len() == n {
                    observed
                        .iter()
                        .map(|&i| {
                            nets[i][i].forward(tape, binder, &self.params, &[inputs[i].unwrap()])
                        })
                        .collect()
                } else if observed.len() == 1 {
                    let i = observed[0];
                    (0..n)
                        .map(|j| {
                            nets[i][j].forward(tape, binder, &self.params, &[inputs[i].unwrap()])
                        })
                        .collect()
                } else {
                    return Err(Error::contract(
                        "SVAE pair subsets expose two posteriors; use pair_posteriors_t",
                    ));
                };
                Ok(tape.poe_fuse(&experts))
            }
            EncoderSet::Subsets { nets } => {
                let mask = subset_mask(&observed);
                let net = nets.get(&mask).expect("all non-empty subsets built");
                let ins: Vec<Var> = observed.iter().map(|&i| inputs[i].unwrap()).collect();
                let raw = net.forward(tape, binder, &self.params, &ins);
                Ok(tape.clamp_log_var(raw))
            }
            EncoderSet::PerModality { nets } => {
                if observed.len() != 1 {
                    return Err(Error::contract(
                        "mmvae has no fused posterior; use experts_t for mixture sampling",
                    ));
                }
                let i = observed[0];
                let raw = nets[i].forward(tape, binder, &self.params, &[inputs[i].unwrap()]);
                Ok(tape.clamp_log_var(raw))
            }
        }
    }

    /// The two SVAE pair fusions for n=3:
    /// `q^i(z|x_i,x_j) = PoE[q_i^i(x_i), q_j^j(x_j), q_k^i(x_i)]` and
    /// `q^j(z|x_i,x_j) = PoE[q_i^i(x_i), q_j^j(x_j), q_k^j(x_j)]`.
    pub fn pair_posteriors_t(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        i: usize,
        j: usize,
        x_i: Var,
        x_j: Var,
    ) -> Result<(Var, Var)> {
        let EncoderSet::Svae { nets } = &self.encoders else {
            return Err(Error::contract("pair_posteriors is defined for SVAE only"));
        };
        if self.n_modalities() != 3 {
            return Err(Error::contract("pair_posteriors requires n = 3"));
        }
        if i == j || i >= 3 || j >= 3 {
            return Err(Error::contract("pair indices must be distinct and in range"));
        }
        let k = 3 - i - j;
        let e_ii = nets[i][i].forward(tape, binder, &self.params, &[x_i]);
        let e_jj = nets[j][j].forward(tape, binder, &self.params, &[x_j]);
        let e_ki = nets[i][k].forward(tape, binder, &self.params, &[x_i]);
        let e_kj = nets[j][k].forward(tape, binder, &self.params, &[x_j]);
        let side_i = tape.poe_fuse(&[e_ii, e_jj, e_ki]);
        let side_j = tape.poe_fuse(&[e_ii, e_jj, e_kj]);
        Ok((side_i, side_j))
    }

    /// Per-modality experts (clamped) for mixture sampling; MMVAE only.
    pub fn experts_t(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        inputs: &[Var],
    ) -> Result<Vec<Var>> {
        let EncoderSet::PerModality { nets } = &self.encoders else {
            return Err(Error::contract("experts_t applies to mmvae graphs"));
        };
        if inputs.len() != nets.len() {
            return Err(Error::dim("one input per modality required"));
        }
        Ok(nets
            .iter()
            .zip(inputs)
            .map(|(net, &x)| {
                let raw = net.forward(tape, binder, &self.params, &[x]);
                tape.clamp_log_var(raw)
            })
            .collect())
    }

    /// Standard-normal prior as `[B, 2L]` parameters.
    pub fn prior_t(&self, tape: &mut Tape, batch: usize) -> Var {
        tape.leaf(Tensor::zeros(IxDyn(&[batch, 2 * self.latent()])))
    }

    /// Decoder logits for modality `m` given latent codes `[B, L]`.
    pub fn decode_t(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        m: usize,
        z: Var,
    ) -> Result<Var> {
        let dec = self
            .decoders
            .get(m)
            .ok_or_else(|| Error::dim(format!("modality index {m} out of range")))?;
        Ok(dec.forward(tape, binder, &self.params, z))
    }

    /// Evaluation-mode posterior parameters for a batch of raw inputs.
    pub fn posterior_params(&self, inputs: &[Option<Tensor>]) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let mut binder = self.binder(Phase::Eval);
        let vars: Vec<Option<Var>> = inputs
            .iter()
            .map(|o| o.as_ref().map(|t| tape.leaf(t.clone())))
            .collect();
        let q = self.posterior_t(&mut tape, &mut binder, &vars)?;
        Ok(tape
            .value(q)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned())
    }

    /// Evaluation-mode per-modality experts (MMVAE).
    pub fn expert_params(&self, inputs: &[Tensor]) -> Result<Vec<Array2<f64>>> {
        let mut tape = Tape::new();
        let mut binder = self.binder(Phase::Eval);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let experts = self.experts_t(&mut tape, &mut binder, &vars)?;
        Ok(experts
            .into_iter()
            .map(|e| {
                tape.value(e)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned()
            })
            .collect())
    }

    /// Evaluation-mode decoding to Bernoulli means (sigmoid of logits).
    pub fn decode_probs(&self, m: usize, z: &Array2<f64>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = self.binder(Phase::Eval);
        let zv = tape.leaf(z.clone().into_dyn());
        let logits = self.decode_t(&mut tape, &mut binder, m, zv)?;
        let probs = tape.sigmoid(logits);
        Ok(tape.value(probs).clone())
    }

    /// Evaluation-mode decoder logits.
    pub fn decode_logits(&self, m: usize, z: &Array2<f64>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = self.binder(Phase::Eval);
        let zv = tape.leaf(z.clone().into_dyn());
        let logits = self.decode_t(&mut tape, &mut binder, m, zv)?;
        Ok(tape.value(logits).clone())
    }

    /// Exact trainable-scalar counts per network and in aggregate.
    pub fn count_parameters(&self) -> ParamCounts {
        let mut networks = Vec::new();
        let mut encoder_total = 0;
        let mut each = |enc: &SubsetEncoder| {
            let c = enc.parameter_count(&self.params);
            encoder_total += c;
            (enc.name.clone(), c)
        };
        match &self.encoders {
            EncoderSet::Svae { nets } => {
                for column in nets {
                    for net in column {
                        networks.push(each(net));
                    }
                }
            }
            EncoderSet::Subsets { nets } => {
                for net in nets.values() {
                    networks.push(each(net));
                }
            }
            EncoderSet::PerModality { nets } => {
                for net in nets {
                    networks.push(each(net));
                }
            }
        }
        let mut decoder_total = 0;
        for dec in &self.decoders {
            let c = dec.parameter_count(&self.params);
            decoder_total += c;
            networks.push((dec.name.clone(), c));
        }
        ParamCounts {
            networks,
            encoder_total,
            decoder_total,
            total: encoder_total + decoder_total,
        }
    }

    pub fn encoder_names(&self) -> Vec<String> {
        match &self.encoders {
            EncoderSet::Svae { nets } => nets
                .iter()
                .flat_map(|c| c.iter().map(|n| n.name.clone()))
                .collect(),
            EncoderSet::Subsets { nets } => nets.values().map(|n| n.name.clone()).collect(),
            EncoderSet::PerModality { nets } => nets.iter().map(|n| n.name.clone()).collect(),
        }
    }

    /// Extracts row `row` of an evaluation-mode `[B, 2L]` parameter matrix
    /// as a [`DiagGaussian`].
    pub fn params_to_gaussian(params: &Array2<f64>, row: usize) -> DiagGaussian {
        let l = params.ncols() / 2;
        let mean = (0..l).map(|d| params[(row, d)]).collect();
        let log_var = (0..l).map(|d| params[(row, l + d)]).collect();
        DiagGaussian::new(mean, log_var).expect("network emitted non-finite parameters")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};
    use crate::stub;

    pub(crate) fn toy_config(kind: ModelKind, n: usize) -> ModelConfig {
        let latent = 2;
        let enc = NetworkSpec::encoder(vec![4], vec![LayerSpec::fc(3, Activation::Elu)], 3);
        let dec = NetworkSpec::decoder(latent, vec![LayerSpec::fc(3, Activation::Elu)], vec![4]);
        ModelConfig {
            kind,
            n_modalities: n,
            latent,
            encoders: vec![enc; n],
            decoders: vec![dec; n],
            iwae_samples: (kind == ModelKind::Mmvae).then_some(4),
        }
    }

    #[test]
    fn network_inventories_per_kind() {
        let svae = build_model(toy_config(ModelKind::Svae, 2), 0).unwrap();
        assert_eq!(svae.encoder_names().len(), 4);
        let vaevae = build_model(toy_config(ModelKind::Vaevae, 2), 0).unwrap();
        assert_eq!(vaevae.encoder_names().len(), 3);
        let svae3 = build_model(toy_config(ModelKind::Svae, 3), 0).unwrap();
        assert_eq!(svae3.encoder_names().len(), 9);
        let vaevae3 = build_model(toy_config(ModelKind::Vaevae, 3), 0).unwrap();
        assert_eq!(vaevae3.encoder_names().len(), 7);
        let mmvae = build_model(toy_config(ModelKind::Mmvae, 2), 0).unwrap();
        assert_eq!(mmvae.encoder_names().len(), 2);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model(toy_config(ModelKind::Svae, 2), 7).unwrap();
        let b = build_model(toy_config(ModelKind::Svae, 2), 7).unwrap();
        for ((_, ea), (_, eb)) in a.store().iter().zip(b.store().iter()) {
            assert_eq!(ea.value, eb.value, "{} differs", ea.name);
        }
        let c = build_model(toy_config(ModelKind::Svae, 2), 8).unwrap();
        let differs = a
            .store()
            .iter()
            .zip(c.store().iter())
            .any(|((_, ea), (_, ec))| ea.value != ec.value);
        assert!(differs);
    }

    #[test]
    fn parameter_formulas() {
        // shared per-encoder spec of k parameters: SVAE n^2 k, VAEVAE n 2^(n-1) k
        for n in [2usize, 3] {
            let svae = build_model(toy_config(ModelKind::Svae, n), 0).unwrap();
            let vaevae = build_model(toy_config(ModelKind::Vaevae, n), 0).unwrap();
            let k = svae.count_parameters().networks[0].1;
            assert_eq!(svae.count_parameters().encoder_total, k * n * n);
            assert_eq!(
                vaevae.count_parameters().encoder_total,
                k * n * (1 << (n - 1))
            );
            if n == 2 {
                assert_eq!(
                    svae.count_parameters().encoder_total,
                    vaevae.count_parameters().encoder_total
                );
            }
        }
    }

    #[test]
    fn svae_single_modality_posterior_is_poe_of_stubs() {
        let mut graph = build_model(toy_config(ModelKind::Svae, 2), 0).unwrap();
        // q_0^0(x_0) -> N(0,1), q*_1(x_0) -> N(2,1): posterior(x_0) = N(1, 0.5)
        stub::force_encoder_output(&mut graph, "enc_m0_from_m0", &[0.0, 0.0], &[0.0, 0.0]);
        stub::force_encoder_output(&mut graph, "enc_m1_from_m0", &[2.0, 2.0], &[0.0, 0.0]);
        let x0 = Tensor::zeros(IxDyn(&[1, 4]));
        let params = graph.posterior_params(&[Some(x0), None]).unwrap();
        let g = ModelGraph::params_to_gaussian(&params, 0);
        for d in 0..2 {
            assert!((g.mean()[d] - 1.0).abs() < 1e-9);
            assert!((g.var()[d] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn svae_joint_posterior_fuses_diagonal_experts() {
        let mut graph = build_model(toy_config(ModelKind::Svae, 2), 0).unwrap();
        stub::force_encoder_output(&mut graph, "enc_m0_from_m0", &[0.0, 0.0], &[0.0, 0.0]);
        stub::force_encoder_output(&mut graph, "enc_m1_from_m1", &[0.0, 0.0], &[0.0, 0.0]);
        let x0 = Tensor::zeros(IxDyn(&[1, 4]));
        let x1 = Tensor::zeros(IxDyn(&[1, 4]));
        let params = graph.posterior_params(&[Some(x0), Some(x1)]).unwrap();
        let g = ModelGraph::params_to_gaussian(&params, 0);
        for d in 0..2 {
            assert!(g.mean()[d].abs() < 1e-9);
            assert!((g.var()[d] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn svae_posterior_matches_grid_product_of_stub_densities() {
        use crate::gauss::{poe_fuse, DiagGaussian, ExpertList};
        let mut graph = build_model(toy_config(ModelKind::Svae, 2), 0).unwrap();
        stub::force_encoder_output(&mut graph, "enc_m0_from_m0", &[0.3, 0.3], &[-1.0, -1.0]);
        stub::force_encoder_output(&mut graph, "enc_m1_from_m0", &[-0.7, -0.7], &[1.2, 1.2]);
        let x0 = Tensor::zeros(IxDyn(&[1, 4]));
        let params = graph.posterior_params(&[Some(x0), None]).unwrap();
        let fused = ModelGraph::params_to_gaussian(&params, 0);
        // independent route through the pure algebra
        let a = DiagGaussian::new(vec![0.3], vec![-1.0]).unwrap();
        let b = DiagGaussian::new(vec![-0.7], vec![1.2]).unwrap();
        let pure = poe_fuse(&ExpertList::new(vec![a.clone(), b.clone()]).unwrap()).unwrap();
        assert!((fused.mean()[0] - pure.mean()[0]).abs() < 1e-12);
        assert!((fused.log_var()[0] - pure.log_var()[0]).abs() < 1e-12);
        // and the 1-D grid comparison against the normalized product
        let n = 8001;
        let h = 20.0 / (n - 1) as f64;
        let prod: Vec<f64> = (0..n)
            .map(|i| {
                let x = -10.0 + i as f64 * h;
                (a.log_pdf(&[x]).unwrap() + b.log_pdf(&[x]).unwrap()).exp()
            })
            .collect();
        let z: f64 = h * (0.5 * prod[0] + 0.5 * prod[n - 1] + prod[1..n - 1].iter().sum::<f64>());
        let mut max_err: f64 = 0.0;
        let marginal = DiagGaussian::new(vec![fused.mean()[0]], vec![fused.log_var()[0]]).unwrap();
        for i in 0..n {
            let x = -10.0 + i as f64 * h;
            let pdf = marginal.log_pdf(&[x]).unwrap().exp();
            max_err = max_err.max((pdf - prod[i] / z).abs());
        }
        assert!(max_err < 1e-6, "grid error {max_err}");
    }

    #[test]
    fn pair_posteriors_trivial_and_derived() {
        let mut graph = build_model(toy_config(ModelKind::Svae, 3), 0).unwrap();
        for name in [
            "enc_m0_from_m0",
            "enc_m1_from_m1",
            "enc_m2_from_m0",
            "enc_m2_from_m1",
        ] {
            stub::force_encoder_output(&mut graph, name, &[0.0, 0.0], &[0.0, 0.0]);
        }
        let mut tape = Tape::new();
        let mut binder = graph.binder(Phase::Eval);
        let x0 = tape.leaf(Tensor::zeros(IxDyn(&[1, 4])));
        let x1 = tape.leaf(Tensor::zeros(IxDyn(&[1, 4])));
        let (qi, qj) = graph
            .pair_posteriors_t(&mut tape, &mut binder, 0, 1, x0, x1)
            .unwrap();
        // three unit-precision experts each: N(0, 1/3)
        for side in [qi, qj] {
            let v = tape.value(side);
            assert!(v[[0, 0]].abs() < 1e-12);
            assert!((v[[0, 2]] - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }

        // hand-applied precision-weighted means
        stub::force_encoder_output(&mut graph, "enc_m0_from_m0", &[1.0, 1.0], &[0.0, 0.0]);
        stub::force_encoder_output(&mut graph, "enc_m1_from_m1", &[-1.0, -1.0], &[0.0, 0.0]);
        stub::force_encoder_output(&mut graph, "enc_m2_from_m0", &[1.0, 1.0], &[0.0, 0.0]);
        stub::force_encoder_output(&mut graph, "enc_m2_from_m1", &[-1.0, -1.0], &[0.0, 0.0]);
        let mut tape = Tape::new();
        let mut binder = graph.binder(Phase::Eval);
        let x0 = tape.leaf(Tensor::zeros(IxDyn(&[1, 4])));
        let x1 = tape.leaf(Tensor::zeros(IxDyn(&[1, 4])));
        let (qi, qj) = graph
            .pair_posteriors_t(&mut tape, &mut binder, 0, 1, x0, x1)
            .unwrap();
        assert!((tape.value(qi)[[0, 0]] - 1.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(qj)[[0, 0]] + 1.0 / 3.0).abs() < 1e-12);
        // outputs differ unless the replacement experts agree
        assert!((tape.value(qi)[[0, 0]] - tape.value(qj)[[0, 0]]).abs() > 0.1);
    }

    #[test]
    fn decode_contracts() {
        let mut graph = build_model(toy_config(ModelKind::Vaevae, 2), 3).unwrap();
        let z = Array2::<f64>::zeros((2, 2));
        let a = graph.decode_logits(0, &z).unwrap();
        let b = graph.decode_logits(0, &z).unwrap();
        assert_eq!(a, b, "decoding is deterministic");
        assert_eq!(a.shape(), &[2, 4]);
        assert!(graph.decode_logits(5, &z).is_err());
        // zero-weight decoder emits its bias
        stub::zero_decoder(&mut graph, "dec_m0");
        let bias = 0.37;
        let store = graph.store_mut();
        let id = store.find("dec_m0/head_b").unwrap();
        let shape = store.value(id).shape().to_vec();
        store
            .set_value(id, Tensor::from_elem(IxDyn(&shape), bias))
            .unwrap();
        let logits = graph.decode_logits(0, &z).unwrap();
        assert!(logits.iter().all(|&v| (v - bias).abs() < 1e-12));
    }

    #[test]
    fn mmvae_contracts() {
        let graph = build_model(toy_config(ModelKind::Mmvae, 2), 0).unwrap();
        let x0 = Tensor::zeros(IxDyn(&[1, 4]));
        let x1 = Tensor::zeros(IxDyn(&[1, 4]));
        // no fused posterior with both observed
        assert!(graph
            .posterior_params(&[Some(x0.clone()), Some(x1.clone())])
            .is_err());
        assert!(graph.posterior_params(&[Some(x0.clone()), None]).is_ok());
        assert_eq!(graph.expert_params(&[x0, x1]).unwrap().len(), 2);
    }

    #[test]
    fn posterior_rejects_empty_observed() {
        let graph = build_model(toy_config(ModelKind::Svae, 2), 0).unwrap();
        assert!(graph.posterior_params(&[None, None]).is_err());
    }

    #[test]
    fn replacement_experts_share_architecture() {
        // the nets reading the same modality have identical parameter shapes
        let graph = build_model(toy_config(ModelKind::Svae, 2), 0).unwrap();
        let shapes = |prefix: &str| -> Vec<Vec<usize>> {
            graph
                .store()
                .iter()
                .filter(|(_, e)| e.name.starts_with(prefix))
                .map(|(_, e)| e.value.shape().to_vec())
                .collect()
        };
        assert_eq!(shapes("enc_m0_from_m0"), shapes("enc_m1_from_m0"));
        assert_eq!(shapes("enc_m1_from_m1"), shapes("enc_m0_from_m1"));
    }
}
