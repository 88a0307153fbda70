//! Output heads: plain emissions, common-specific decomposition (CSD) of the
//! emission layer, and joint domain learning (JDL) with an auxiliary
//! sentence-level domain classifier.
//!
//! Every head predicts through the shared emission layer and the CRF.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::linalg::{dot, matvec_add, matvec_t_add, outer_add};
use crate::network::{crf_loss_and_grad, DropoutRng, Network, TokenFeatures};
use crate::numerics::{ParamId, ParameterStore};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum HeadConfig {
    #[default]
    Plain,
    Csd {
        #[serde(default = "default_rank")]
        rank: usize,
        #[serde(default = "default_alpha")]
        alpha_spec: f64,
        #[serde(default = "default_lambda")]
        lambda_orth: f64,
    },
    Jdl {
        #[serde(default = "default_rho")]
        rho: f64,
    },
}

fn default_rank() -> usize {
    1
}
fn default_alpha() -> f64 {
    0.5
}
fn default_lambda() -> f64 {
    0.25
}
fn default_rho() -> f64 {
    0.85
}

impl HeadConfig {
    pub fn csd() -> Self {
        HeadConfig::Csd { rank: default_rank(), alpha_spec: default_alpha(), lambda_orth: default_lambda() }
    }

    pub fn jdl() -> Self {
        HeadConfig::Jdl { rho: default_rho() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadConfig::Plain => "plain",
            HeadConfig::Csd { .. } => "csd",
            HeadConfig::Jdl { .. } => "jdl",
        }
    }

    pub fn needs_domains(&self) -> bool {
        !matches!(self, HeadConfig::Plain)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            HeadConfig::Plain => Ok(()),
            HeadConfig::Csd { rank, alpha_spec, lambda_orth } => {
                if rank == 0 {
                    return Err(Error::InvalidConfig("csd rank must be at least 1".into()));
                }
                if !(0.0..=1.0).contains(&alpha_spec) || !(lambda_orth >= 0.0 && lambda_orth.is_finite()) {
                    return Err(Error::InvalidConfig("csd weights out of range".into()));
                }
                Ok(())
            }
            HeadConfig::Jdl { rho } => {
                if !(rho > 0.0 && rho <= 1.0) {
                    return Err(Error::InvalidConfig(format!("jdl rho must be in (0, 1], got {rho}")));
                }
                Ok(())
            }
        }
    }
}

/// Head-specific parameters inside the store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum HeadParams {
    Plain,
    Csd {
        /// `[rank, tags, hidden]`
        specific: ParamId,
        /// `[n_domains, rank]`
        gamma: ParamId,
        rank: usize,
        alpha_spec: f64,
        lambda_orth: f64,
    },
    Jdl {
        /// `[n_domains, hidden]`
        v: ParamId,
        c: ParamId,
        rho: f64,
    },
}

/// Output head bound to a network layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Architecture {
    pub network: Network,
    pub head: HeadParams,
    pub n_domains: usize,
}

impl Architecture {
    pub fn init(
        store: &mut ParameterStore,
        network: Network,
        config: &HeadConfig,
        n_domains: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if config.needs_domains() && n_domains < 2 {
            return Err(Error::InvalidPlan(format!(
                "{} head requires at least two domains, found {n_domains}",
                config.name()
            )));
        }
        let n = network.num_tags();
        let hd = network.hidden_dim();
        let head = match *config {
            HeadConfig::Plain => HeadParams::Plain,
            HeadConfig::Csd { rank, alpha_spec, lambda_orth } => {
                let common = store.get(network.emission_w).values.clone();
                let specific = orthogonal_components(&common, rank, n, hd, rng)?;
                let specific = store.add("csd.specific", &[rank, n, hd], specific)?;
                let gamma = store.glorot("csd.gamma", n_domains, rank, rng)?;
                HeadParams::Csd { specific, gamma, rank, alpha_spec, lambda_orth }
            }
            HeadConfig::Jdl { rho } => {
                let v = store.glorot("jdl.v", n_domains, hd, rng)?;
                let c = store.zeros("jdl.c", &[n_domains])?;
                HeadParams::Jdl { v, c, rho }
            }
        };
        Ok(Architecture { network, head, n_domains })
    }

    /// Training loss for one sentence; gradients are added to `store`.
    pub fn loss_and_grad(
        &self,
        store: &mut ParameterStore,
        tokens: &[TokenFeatures],
        tags: &[usize],
        domain_id: usize,
        rng: DropoutRng<'_>,
    ) -> Result<f64> {
        let net = &self.network;
        let n = net.num_tags();
        if tags.len() != tokens.len() {
            return Err(Error::LengthMismatch { what: "tags", got: tags.len(), expected: tokens.len() });
        }
        if self.head_uses_domain() && domain_id >= self.n_domains {
            return Err(Error::InvalidDomain { domain_id, n_domains: self.n_domains });
        }
        let trace = net.forward(store, tokens, rng);
        let hidden = &trace.hidden;
        let common_w = store.get(net.emission_w).values.clone();
        let em = net.emissions(store, hidden);
        let (nll, d_em, d_tr) = crf_loss_and_grad(&em, tags, net.transitions(store), n)?;
        let mut d_hidden = vec![vec![0.0; net.hidden_dim()]; hidden.len()];

        let loss = match self.head {
            HeadParams::Plain => {
                apply_emission_grads(store, net, &common_w, hidden, &d_em, &d_tr, 1.0, &mut d_hidden);
                nll
            }
            HeadParams::Jdl { v, c, rho } => {
                apply_emission_grads(store, net, &common_w, hidden, &d_em, &d_tr, rho, &mut d_hidden);
                let pooled = mean_pool(hidden);
                let logits = jdl_domain_logits(store, v, c, &pooled);
                let (domain_loss, d_logits) = softmax_cross_entropy(&logits, domain_id);
                let scale = 1.0 - rho;
                let d_logits: Vec<f64> = d_logits.iter().map(|g| scale * g).collect();
                let hd = pooled.len();
                outer_add(&mut store.get_mut(v).grad, self.n_domains, hd, &d_logits, &pooled);
                store.get_mut(c).grad.iter_mut().zip(&d_logits).for_each(|(g, d)| *g += d);
                let mut d_pool = vec![0.0; hd];
                matvec_t_add(&store.get(v).values, self.n_domains, hd, &d_logits, &mut d_pool);
                let inv = 1.0 / hidden.len() as f64;
                for dh in &mut d_hidden {
                    dh.iter_mut().zip(&d_pool).for_each(|(g, d)| *g += inv * d);
                }
                jdl_combined_loss(nll, domain_loss, rho)
            }
            HeadParams::Csd { specific, gamma, rank, alpha_spec, lambda_orth } => {
                let hd = net.hidden_dim();
                let size = n * hd;
                let w_d = csd_specific_weights(store, net, specific, gamma, rank, domain_id);
                let em_d = net.affine_emissions(store, &w_d, hidden);
                let (nll_d, d_em_d, d_tr_d) = crf_loss_and_grad(&em_d, tags, net.transitions(store), n)?;
                let alpha = alpha_spec;
                apply_emission_grads(store, net, &common_w, hidden, &d_em, &d_tr, 1.0 - alpha, &mut d_hidden);
                // W_d = W_c + Σ Γ[d,r]·S_r, so W_c also receives the specific-path gradient.
                let g_d = net.emission_outer(hidden, &d_em_d);
                net.add_bias_grad(store, &d_em_d, alpha);
                net.add_transition_grad(store, &d_tr_d, alpha);
                net.add_hidden_grad(&w_d, &d_em_d, alpha, &mut d_hidden);
                store.get_mut(net.emission_w).grad.iter_mut().zip(&g_d).for_each(|(g, v)| *g += alpha * v);
                let spec_vals = store.get(specific).values.clone();
                let gam = store.get(gamma).values.clone();
                for r in 0..rank {
                    let coeff = gam[domain_id * rank + r];
                    let s_r = &spec_vals[r * size..(r + 1) * size];
                    store.get_mut(gamma).grad[domain_id * rank + r] += alpha * dot(&g_d, s_r);
                    let gs = &mut store.get_mut(specific).grad[r * size..(r + 1) * size];
                    gs.iter_mut().zip(&g_d).for_each(|(g, v)| *g += alpha * coeff * v);
                }
                let mut columns: Vec<&[f64]> = vec![&common_w];
                columns.extend((0..rank).map(|r| &spec_vals[r * size..(r + 1) * size]));
                let (penalty, d_cols) = csd_orth_penalty_grad(&columns)?;
                if lambda_orth != 0.0 {
                    let gw = &mut store.get_mut(net.emission_w).grad;
                    gw.iter_mut().zip(&d_cols[0]).for_each(|(g, v)| *g += lambda_orth * v);
                    for r in 0..rank {
                        let gs = &mut store.get_mut(specific).grad[r * size..(r + 1) * size];
                        gs.iter_mut().zip(&d_cols[r + 1]).for_each(|(g, v)| *g += lambda_orth * v);
                    }
                }
                csd_loss(nll, nll_d, penalty, alpha, lambda_orth)
            }
        };
        net.backward(store, tokens, &trace, &d_hidden);
        Ok(loss)
    }

    fn head_uses_domain(&self) -> bool {
        !matches!(self.head, HeadParams::Plain)
    }

    /// Tags for one sentence. The domain never enters the prediction path.
    pub fn predict(&self, store: &ParameterStore, tokens: &[TokenFeatures]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        self.network.predict(store, tokens)
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_emission_grads(
    store: &mut ParameterStore,
    net: &Network,
    w: &[f64],
    hidden: &[Vec<f64>],
    d_em: &[Vec<f64>],
    d_tr: &[f64],
    scale: f64,
    d_hidden: &mut [Vec<f64>],
) {
    let g = net.emission_outer(hidden, d_em);
    store.get_mut(net.emission_w).grad.iter_mut().zip(&g).for_each(|(acc, v)| *acc += scale * v);
    net.add_bias_grad(store, d_em, scale);
    net.add_transition_grad(store, d_tr, scale);
    net.add_hidden_grad(w, d_em, scale, d_hidden);
}

/// Random components orthogonal to `common` and to each other, each with
/// the norm of a Glorot draw.
fn orthogonal_components(common: &[f64], rank: usize, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let size = rows * cols;
    let mut basis: Vec<Vec<f64>> = vec![normalized(common).ok_or(Error::ZeroNormColumn(0))?];
    let mut out = Vec::with_capacity(rank * size);
    for r in 0..rank {
        let mut v: Vec<f64> = (0..size).map(|_| rng.gen_range(-limit..=limit)).collect();
        let target = norm(&v);
        // twice for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let u = normalized(&v).ok_or(Error::ZeroNormColumn(r + 1))?;
        out.extend(u.iter().map(|x| x * target));
        basis.push(u);
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

/// `W_d = W_common + Σ_r Γ[d,r]·W_spec[r]`
pub fn csd_specific_weights(
    store: &ParameterStore,
    net: &Network,
    specific: ParamId,
    gamma: ParamId,
    rank: usize,
    domain_id: usize,
) -> Vec<f64> {
    let mut w = store.get(net.emission_w).values.clone();
    let size = w.len();
    let spec = &store.get(specific).values;
    let gam = &store.get(gamma).values;
    for r in 0..rank {
        let coeff = gam[domain_id * rank + r];
        w.iter_mut().zip(&spec[r * size..(r + 1) * size]).for_each(|(a, s)| *a += coeff * s);
    }
    w
}

/// Emissions under the CSD head. Prediction uses the common weights only
/// and ignores `domain_id`; training uses the domain's combined weights.
pub fn csd_emissions(
    store: &ParameterStore,
    arch: &Architecture,
    hidden: &[Vec<f64>],
    domain_id: usize,
    training: bool,
) -> Result<Vec<Vec<f64>>> {
    let net = &arch.network;
    match arch.head {
        HeadParams::Csd { specific, gamma, rank, .. } if training => {
            if domain_id >= arch.n_domains {
                return Err(Error::InvalidDomain { domain_id, n_domains: arch.n_domains });
            }
            let w = csd_specific_weights(store, net, specific, gamma, rank, domain_id);
            Ok(net.affine_emissions(store, &w, hidden))
        }
        _ => Ok(net.emissions(store, hidden)),
    }
}

/// `‖KᵀK − I‖²_F` over unit-normalized flattened columns.
pub fn csd_orth_penalty(columns: &[&[f64]]) -> Result<f64> {
    Ok(csd_orth_penalty_grad(columns)?.0)
}

/// Penalty and its gradient w.r.t. each unnormalized column.
pub fn csd_orth_penalty_grad(columns: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
    let norms: Vec<f64> = columns.iter().map(|c| norm(c)).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNormColumn(i));
    }
    let units: Vec<Vec<f64>> = columns.iter().zip(&norms).map(|(c, n)| c.iter().map(|x| x / n).collect()).collect();
    let m = units.len();
    let mut resid = vec![vec![0.0; m]; m];
    let mut penalty = 0.0;
    for i in 0..m {
        for j in 0..m {
            let g = dot(&units[i], &units[j]) - if i == j { 1.0 } else { 0.0 };
            resid[i][j] = g;
            penalty += g * g;
        }
    }
    let mut grads = Vec::with_capacity(m);
    for i in 0..m {
        let mut du = vec![0.0; units[i].len()];
        for j in 0..m {
            let s = 4.0 * resid[i][j];
            du.iter_mut().zip(&units[j]).for_each(|(a, u)| *a += s * u);
        }
        let proj = dot(&units[i], &du);
        let dw = du.iter().zip(&units[i]).map(|(g, u)| (g - u * proj) / norms[i]).collect();
        grads.push(dw);
    }
    Ok((penalty, grads))
}

/// `(1−α)·common + α·specific + λ·penalty`
pub fn csd_loss(common_nll: f64, specific_nll: f64, penalty: f64, alpha_spec: f64, lambda_orth: f64) -> f64 {
    (1.0 - alpha_spec) * common_nll + alpha_spec * specific_nll + lambda_orth * penalty
}

pub fn mean_pool(hidden: &[Vec<f64>]) -> Vec<f64> {
    let mut p = vec![0.0; hidden[0].len()];
    for h in hidden {
        p.iter_mut().zip(h).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / hidden.len() as f64;
    p.iter_mut().for_each(|a| *a *= inv);
    p
}

/// `V·pool + c`
pub fn jdl_domain_logits(store: &ParameterStore, v: ParamId, c: ParamId, pooled: &[f64]) -> Vec<f64> {
    let mut logits = store.get(c).values.clone();
    let rows = logits.len();
    matvec_add(&store.get(v).values, rows, pooled.len(), pooled, &mut logits);
    logits
}

/// Loss `−log softmax(logits)[target]` and its gradient.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - logits[target];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

/// `ρ·label + (1−ρ)·domain`
pub fn jdl_combined_loss(label_loss: f64, domain_loss: f64, rho: f64) -> f64 {
    rho * label_loss + (1.0 - rho) * domain_loss
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_loss_arithmetic() {
        assert_eq!(jdl_combined_loss(1.0, 1.0, 0.85), 1.0);
        assert_eq!(jdl_combined_loss(2.0, 0.0, 0.85), 1.7);
        assert_eq!(jdl_combined_loss(3.25, 9.0, 1.0), 3.25);
    }

    #[test]
    fn csd_loss_arithmetic() {
        assert_eq!(csd_loss(1.3, 1.3, 5.0, 0.5, 0.0), 1.3);
        assert_eq!(csd_loss(0.0, 0.0, 2.0, 0.5, 0.25), 0.5);
    }

    #[test]
    fn penalty_cases() {
        let a = [1.0, 0.0, 0.0, 0.0];
        let b = [0.0, 3.0, 0.0, 0.0];
        assert_eq!(csd_orth_penalty(&[&a, &b]).unwrap(), 0.0);
        let w = [0.3, -1.2, 0.5, 2.0];
        assert!((csd_orth_penalty(&[&w, &w]).unwrap() - 2.0).abs() < 1e-12);
        let z = [0.0; 4];
        assert!(matches!(csd_orth_penalty(&[&w, &z]), Err(Error::ZeroNormColumn(1))));
    }

    #[test]
    fn penalty_gradient_matches_differences() {
        let a = vec![0.3, -1.2, 0.5, 2.0, 0.1, 0.0];
        let b = vec![1.0, 0.4, -0.2, 0.3, 0.9, -0.6];
        let c = vec![-0.5, 0.2, 0.7, 0.1, 0.0, 1.1];
        let cols = vec![a, b, c];
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let (_, grads) = csd_orth_penalty_grad(&refs).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            for k in 0..6 {
                let mut plus = cols.clone();
                plus[i][k] += eps;
                let mut minus = cols.clone();
                minus[i][k] -= eps;
                let f = |cs: &Vec<Vec<f64>>| csd_orth_penalty(&cs.iter().map(|c| c.as_slice()).collect::<Vec<_>>()).unwrap();
                let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
                assert!((numeric - grads[i][k]).abs() < 1e-6, "col {i} entry {k}");
            }
        }
    }

    #[test]
    fn gram_schmidt_init_is_orthogonal() {
        let mut rng = crate::numerics::derive_rng(5, 0);
        let common: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
        let spec = orthogonal_components(&common, 2, 4, 6, &mut rng).unwrap();
        let cols: Vec<&[f64]> = vec![&common, &spec[..24], &spec[24..]];
        assert!(csd_orth_penalty(&cols).unwrap() < 1e-6);
    }

    #[test]
    fn uniform_logits_give_log_n() {
        let (loss, grad) = softmax_cross_entropy(&[0.0; 4], 2);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert_eq!(grad, vec![0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn head_config_toml() {
        let h: HeadConfig = toml::from_str("kind = \"csd\"\nrank = 2").unwrap();
        assert_eq!(h, HeadConfig::Csd { rank: 2, alpha_spec: 0.5, lambda_orth: 0.25 });
        let h: HeadConfig = toml::from_str("kind = \"jdl\"").unwrap();
        assert_eq!(h, HeadConfig::Jdl { rho: 0.85 });
        assert!(toml::from_str::<HeadConfig>("kind = \"jdl\"\nrank = 2").is_err());
    }
}
