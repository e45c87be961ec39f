//! Forward passes of the encoders, decoder and transition prior.
//!
//! The `*_nodes` functions record onto a caller-owned tape so the objective can
//! differentiate through them; the plain functions wrap them for inference.

use serde::{Deserialize, Serialize};

use super::gaussian::{GaussianDiag, GaussianNodes};
use super::params::{BoundParams, MlpNodes, ModelParams};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, NodeId, Tape};

/// Latent state split into its invariant and responsive blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z_iota: Vec<f64>,
    pub z_nu: Vec<f64>,
}

impl LatentState {
    pub fn new(z_iota: Vec<f64>, z_nu: Vec<f64>) -> Self {
        LatentState { z_iota, z_nu }
    }

    /// Splits a full latent vector ordered (z_ι, z_ν).
    pub fn split(z: &[f64], d_iota: usize) -> Self {
        LatentState {
            z_iota: z[..d_iota].to_vec(),
            z_nu: z[d_iota..].to_vec(),
        }
    }

    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.z_iota.clone();
        v.extend_from_slice(&self.z_nu);
        v
    }
}

/// Condition-specific lagged adjacency among responsive coordinates.
/// Row `j` holds the weights of the parents of coordinate `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyW {
    pub w: Matrix<f64>,
}

impl AdjacencyW {
    pub fn is_strictly_lower(&self) -> bool {
        let n = self.w.rows();
        (0..n).all(|i| (i..n).all(|j| self.w.get(i, j) == 0.0))
    }

    pub fn l1(&self) -> f64 {
        self.w.as_slice().iter().map(|v| v.abs()).sum()
    }
}

/// `tanh(x W1 + b1) → tanh(· W2 + b2) → · W3 + b3`
pub fn mlp_nodes(tape: &mut Tape<f64>, net: &MlpNodes, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for k in 0..3 {
        let lin = tape.matmul(h, net.w[k])?;
        let lin = tape.add(lin, net.b[k])?;
        h = if k < 2 { tape.tanh(lin)? } else { lin };
    }
    Ok(h)
}

fn split_gaussian(tape: &mut Tape<f64>, out: NodeId, d: usize) -> Result<GaussianNodes> {
    let mean = tape.slice_cols(out, 0..d)?;
    let logvar = tape.slice_cols(out, d..2 * d)?;
    Ok(GaussianNodes { mean, logvar })
}

fn check_cols(tape: &Tape<f64>, x: NodeId, want: usize, what: &str) -> Result<()> {
    let got = tape.value(x).cols();
    if got != want {
        return Err(Error::Dimension(format!("{what} has {got} columns, expected {want}")));
    }
    Ok(())
}

/// `q(z_ι | x)`: the invariant encoder sees expression only.
pub fn encode_invariant_nodes(
    tape: &mut Tape<f64>,
    params: &ModelParams,
    bound: &BoundParams,
    x: NodeId,
) -> Result<GaussianNodes> {
    check_cols(tape, x, params.config.p, "expression")?;
    let out = mlp_nodes(tape, &bound.inv_enc, x)?;
    split_gaussian(tape, out, params.config.d_iota)
}

/// Embedding row of a condition as a 1×d_u node.
pub fn condition_embedding_node(
    tape: &mut Tape<f64>,
    params: &ModelParams,
    bound: &BoundParams,
    condition: usize,
) -> Result<NodeId> {
    let n = params.config.conditions.len();
    if condition >= n {
        return Err(Error::UnknownCondition(format!("#{condition}")));
    }
    tape.slice(bound.cond_emb, condition..condition + 1, 0..params.config.d_u)
}

/// `q(z_ν | x, u)` with the time code t/T appended to the input.
pub fn encode_responsive_nodes(
    tape: &mut Tape<f64>,
    params: &ModelParams,
    bound: &BoundParams,
    x: NodeId,
    condition: usize,
    time: usize,
) -> Result<GaussianNodes> {
    let cfg = &params.config;
    check_cols(tape, x, cfg.p, "expression")?;
    if time > cfg.horizon {
        return Err(Error::InvalidArgument(format!(
            "time index {time} beyond horizon {}",
            cfg.horizon
        )));
    }
    let rows = tape.value(x).rows();
    let e = condition_embedding_node(tape, params, bound, condition)?;
    let e_rep = tape.repeat_rows(e, rows)?;
    let code = time as f64 / cfg.horizon as f64;
    let t_col = tape.constant(Matrix::filled(rows, 1, code))?;
    let input = tape.concat(&[x, e_rep, t_col])?;
    let out = mlp_nodes(tape, &bound.resp_enc, input)?;
    split_gaussian(tape, out, cfg.d_nu)
}

/// Decoder mean `g(z)` for rows of z ordered (z_ι, z_ν).
pub fn decode_nodes(
    tape: &mut Tape<f64>,
    params: &ModelParams,
    bound: &BoundParams,
    z: NodeId,
) -> Result<NodeId> {
    check_cols(tape, z, params.config.d_latent(), "latent")?;
    mlp_nodes(tape, &bound.dec, z)
}

/// Row-major strictly-lower mask of a d×d matrix, as a 1×d² constant.
fn strict_lower_mask(d: usize) -> Matrix<f64> {
    let mut m = Matrix::zeros(1, d * d);
    for i in 0..d {
        for j in 0..i {
            m.set(0, i * d + j, 1.0);
        }
    }
    m
}

/// `W(u) = StrictLower ⊙ tanh(A₀ + e(u)·M)`, flattened row-major as 1×d_ν².
pub fn adjacency_nodes(
    tape: &mut Tape<f64>,
    params: &ModelParams,
    bound: &BoundParams,
    condition: usize,
) -> Result<NodeId> {
    let e = condition_embedding_node(tape, params, bound, condition)?;
    let modulation = tape.matmul(e, bound.adj_mod)?;
    let pre = tape.add(bound.adj_base, modulation)?;
    let squashed = tape.tanh(pre)?;
    let mask = tape.constant(strict_lower_mask(params.config.d_nu))?;
    tape.mul(squashed, mask)
}

/// Transition prior heads evaluated at a batch of previous states.
#[derive(Clone, Copy, Debug)]
pub struct PriorNodes {
    pub iota: GaussianNodes,
    pub nu: GaussianNodes,
    /// flattened adjacency used by the responsive head
    pub adjacency: NodeId,
}

/// `p(z_ι^t | z_ι^{t−1}) · Π_j p(z_{ν,j}^t | W(u)_j ⊙ z_ν^{t−1}, z_ι^{t−1}, u)`.
///
/// The invariant head reads only the z_ι block. Target `j` of the responsive
/// head sees z_ν^{t−1} through row `j` of the strictly-lower adjacency, so
/// its responsive parents are coordinates `< j`.
pub fn transition_prior_nodes(
    tape: &mut Tape<f64>,
    params: &ModelParams,
    bound: &BoundParams,
    z_prev: NodeId,
    condition: usize,
) -> Result<PriorNodes> {
    let cfg = &params.config;
    let (di, dn) = (cfg.d_iota, cfg.d_nu);
    check_cols(tape, z_prev, cfg.d_latent(), "previous latent")?;
    let rows = tape.value(z_prev).rows();
    let z_iota = tape.slice_cols(z_prev, 0..di)?;
    let z_nu = tape.slice_cols(z_prev, di..di + dn)?;

    let inv_out = mlp_nodes(tape, &bound.inv_trans, z_iota)?;
    let iota = split_gaussian(tape, inv_out, di)?;

    let adjacency = adjacency_nodes(tape, params, bound, condition)?;
    let e = condition_embedding_node(tape, params, bound, condition)?;
    let e_rep = tape.repeat_rows(e, rows)?;
    let mut means = Vec::with_capacity(dn);
    let mut logvars = Vec::with_capacity(dn);
    for j in 0..dn {
        let w_row = tape.slice_cols(adjacency, j * dn..(j + 1) * dn)?;
        let gated = tape.mul(z_nu, w_row)?;
        let tgt = tape.slice(bound.target_emb, j..j + 1, 0..cfg.d_u)?;
        let tgt_rep = tape.repeat_rows(tgt, rows)?;
        let v = tape.concat(&[gated, z_iota, e_rep, tgt_rep])?;
        let out = mlp_nodes(tape, &bound.resp_trans, v)?;
        means.push(tape.slice_cols(out, 0..1)?);
        logvars.push(tape.slice_cols(out, 1..2)?);
    }
    let nu = GaussianNodes {
        mean: tape.concat(&means)?,
        logvar: tape.concat(&logvars)?,
    };
    Ok(PriorNodes {
        iota,
        nu,
        adjacency,
    })
}

fn gaussian_rows(tape: &Tape<f64>, g: GaussianNodes) -> (Matrix<f64>, Matrix<f64>) {
    (tape.value(g.mean).clone(), tape.value(g.logvar).clone())
}

fn first_row(tape: &Tape<f64>, g: GaussianNodes) -> GaussianDiag<f64> {
    GaussianDiag {
        mean: tape.value(g.mean).row(0).to_vec(),
        logvar: tape.value(g.logvar).row(0).to_vec(),
    }
}

fn check_len(x: &[f64], want: usize, what: &str) -> Result<()> {
    if x.len() != want {
        return Err(Error::Dimension(format!("{what} has length {}, expected {want}", x.len())));
    }
    Ok(())
}

pub fn encode_invariant(params: &ModelParams, x: &[f64]) -> Result<GaussianDiag<f64>> {
    check_len(x, params.config.p, "expression")?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let xn = tape.constant(Matrix::row_vector(x))?;
    let q = encode_invariant_nodes(&mut tape, params, &bound, xn)?;
    Ok(first_row(&tape, q))
}

pub fn encode_responsive(
    params: &ModelParams,
    x: &[f64],
    condition: &str,
    time: usize,
) -> Result<GaussianDiag<f64>> {
    check_len(x, params.config.p, "expression")?;
    let c = params.config.condition_index(condition)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let xn = tape.constant(Matrix::row_vector(x))?;
    let q = encode_responsive_nodes(&mut tape, params, &bound, xn, c, time)?;
    Ok(first_row(&tape, q))
}

pub fn decode(params: &ModelParams, z: &LatentState) -> Result<Vec<f64>> {
    check_len(&z.z_iota, params.config.d_iota, "z_iota")?;
    check_len(&z.z_nu, params.config.d_nu, "z_nu")?;
    let out = decode_batch(params, &Matrix::row_vector(&z.concat()))?;
    Ok(out.row(0).to_vec())
}

pub fn build_condition_adjacency(params: &ModelParams, condition: &str) -> Result<AdjacencyW> {
    let c = params.config.condition_index(condition)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let flat = adjacency_nodes(&mut tape, params, &bound, c)?;
    let d = params.config.d_nu;
    Ok(AdjacencyW {
        w: Matrix::from_vec(d, d, tape.value(flat).as_slice().to_vec())?,
    })
}

pub fn transition_prior(
    params: &ModelParams,
    z_prev: &LatentState,
    condition: &str,
) -> Result<(GaussianDiag<f64>, GaussianDiag<f64>)> {
    check_len(&z_prev.z_iota, params.config.d_iota, "z_iota")?;
    check_len(&z_prev.z_nu, params.config.d_nu, "z_nu")?;
    let c = params.config.condition_index(condition)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let z = tape.constant(Matrix::row_vector(&z_prev.concat()))?;
    let prior = transition_prior_nodes(&mut tape, params, &bound, z, c)?;
    Ok((first_row(&tape, prior.iota), first_row(&tape, prior.nu)))
}

/// Batched posterior parameters for rows of `x` observed under one condition and time.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub iota_mean: Matrix<f64>,
    pub iota_logvar: Matrix<f64>,
    pub nu_mean: Matrix<f64>,
    pub nu_logvar: Matrix<f64>,
}

impl EncodedBatch {
    /// Posterior means concatenated as (z_ι, z_ν).
    pub fn mean(&self) -> Matrix<f64> {
        Matrix::hcat(&[&self.iota_mean, &self.nu_mean]).expect("row counts agree")
    }
}

const CHUNK: usize = 2048;

fn chunked(
    x: &Matrix<f64>,
    mut f: impl FnMut(&Matrix<f64>) -> Result<Vec<Matrix<f64>>>,
) -> Result<Vec<Matrix<f64>>> {
    let mut parts: Vec<Vec<Matrix<f64>>> = Vec::new();
    let mut start = 0;
    while start < x.rows() || (start == 0 && x.rows() == 0) {
        let end = (start + CHUNK).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        parts.push(f(&x.select_rows(&idx))?);
        if end == start {
            break;
        }
        start = end;
    }
    let k = parts.first().map_or(0, Vec::len);
    (0..k)
        .map(|i| {
            let refs: Vec<&Matrix<f64>> = parts.iter().map(|p| &p[i]).collect();
            Matrix::vcat(&refs)
        })
        .collect()
}

pub fn encode_batch(
    params: &ModelParams,
    x: &Matrix<f64>,
    condition: usize,
    time: usize,
) -> Result<EncodedBatch> {
    let mut out = chunked(x, |chunk| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false)?;
        let xn = tape.constant(chunk.clone())?;
        let qi = encode_invariant_nodes(&mut tape, params, &bound, xn)?;
        let qn = encode_responsive_nodes(&mut tape, params, &bound, xn, condition, time)?;
        let (im, il) = gaussian_rows(&tape, qi);
        let (nm, nl) = gaussian_rows(&tape, qn);
        Ok(vec![im, il, nm, nl])
    })?
    .into_iter();
    Ok(EncodedBatch {
        iota_mean: out.next().unwrap(),
        iota_logvar: out.next().unwrap(),
        nu_mean: out.next().unwrap(),
        nu_logvar: out.next().unwrap(),
    })
}

pub fn decode_batch(params: &ModelParams, z: &Matrix<f64>) -> Result<Matrix<f64>> {
    let mut out = chunked(z, |chunk| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false)?;
        let zn = tape.constant(chunk.clone())?;
        let x = decode_nodes(&mut tape, params, &bound, zn)?;
        Ok(vec![tape.value(x).clone()])
    })?;
    Ok(out.remove(0))
}

/// Full-latent prior mean and log-variance for every row of `z_prev`.
pub fn prior_batch(
    params: &ModelParams,
    z_prev: &Matrix<f64>,
    condition: usize,
) -> Result<(Matrix<f64>, Matrix<f64>)> {
    let mut out = chunked(z_prev, |chunk| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false)?;
        let zn = tape.constant(chunk.clone())?;
        let p = transition_prior_nodes(&mut tape, params, &bound, zn, condition)?;
        let mean = Matrix::hcat(&[tape.value(p.iota.mean), tape.value(p.nu.mean)])?;
        let logvar = Matrix::hcat(&[tape.value(p.iota.logvar), tape.value(p.nu.logvar)])?;
        Ok(vec![mean, logvar])
    })?
    .into_iter();
    Ok((out.next().unwrap(), out.next().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genmodel::{transition_score_diff, ModelConfig};
    use crate::numcore::finite_diff_check;

    fn config() -> ModelConfig {
        ModelConfig {
            d_iota: 2,
            d_nu: 3,
            p: 6,
            d_u: 3,
            hidden: 5,
            horizon: 4,
            conditions: vec!["ctrl".into(), "a".into(), "b".into()],
        }
    }

    fn x() -> Vec<f64> {
        vec![0.3, -1.2, 0.8, 0.05, -0.4, 1.1]
    }

    #[test]
    fn zero_params_give_standard_posteriors_and_zero_decode() {
        let p = ModelParams::zeros(config()).unwrap();
        let qi = encode_invariant(&p, &x()).unwrap();
        assert_eq!(qi.mean, vec![0.0; 2]);
        assert_eq!(qi.logvar, vec![0.0; 2]);
        for c in ["ctrl", "b"] {
            let qn = encode_responsive(&p, &x(), c, 3).unwrap();
            assert_eq!(qn.mean, vec![0.0; 3]);
            assert_eq!(qn.logvar, vec![0.0; 3]);
        }
        let z = LatentState::new(vec![1.0, 2.0], vec![3.0, 4.0, 5.0]);
        assert_eq!(decode(&p, &z).unwrap(), vec![0.0; 6]);
        let w = build_condition_adjacency(&p, "a").unwrap();
        assert_eq!(w.w.as_slice(), &[0.0; 9]);
    }

    #[test]
    fn shape_and_id_errors() {
        let p = ModelParams::init(config(), 1).unwrap();
        assert!(matches!(encode_invariant(&p, &[1.0]), Err(Error::Dimension(_))));
        assert!(matches!(
            encode_responsive(&p, &x(), "nope", 0),
            Err(Error::UnknownCondition(_))
        ));
        assert!(encode_responsive(&p, &x(), "a", 5).is_err());
        let bad = LatentState::new(vec![1.0], vec![0.0; 3]);
        assert!(decode(&p, &bad).is_err());
        assert!(transition_prior(&p, &bad, "a").is_err());
        assert!(build_condition_adjacency(&p, "zz").is_err());
    }

    #[test]
    fn encoders_are_deterministic_and_embedding_driven() {
        let mut p = ModelParams::init(config(), 2).unwrap();
        assert_eq!(encode_invariant(&p, &x()).unwrap(), encode_invariant(&p, &x()).unwrap());
        let emb = p.get_mut("cond_emb").unwrap();
        let row: Vec<f64> = emb.row(1).to_vec();
        emb.row_mut(2).copy_from_slice(&row);
        assert_eq!(
            encode_responsive(&p, &x(), "a", 2).unwrap(),
            encode_responsive(&p, &x(), "b", 2).unwrap()
        );
        assert_ne!(
            encode_responsive(&p, &x(), "a", 2).unwrap(),
            encode_responsive(&p, &x(), "ctrl", 2).unwrap()
        );
    }

    #[test]
    fn adjacency_is_strictly_lower_for_every_condition() {
        let mut p = ModelParams::init(config(), 3).unwrap();
        p.get_mut("adj.base")
            .unwrap()
            .as_mut_slice()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 0.7 * i as f64 - 2.0);
        for c in &p.config.conditions.clone() {
            let w = build_condition_adjacency(&p, c).unwrap();
            assert!(w.is_strictly_lower());
            assert!(w.w.as_slice().iter().all(|v| v.abs() < 1.0));
            assert!(w.l1() > 0.0);
        }
        let mut cfg = config();
        cfg.d_nu = 1;
        let p1 = ModelParams::init(cfg, 3).unwrap();
        let w = build_condition_adjacency(&p1, "a").unwrap();
        assert_eq!(w.w.shape(), (1, 1));
        assert_eq!(w.w.get(0, 0), 0.0);
    }

    #[test]
    fn zero_adjacency_gates_responsive_parents() {
        let mut p = ModelParams::init(config(), 4).unwrap();
        p.get_mut("adj.base").unwrap().as_mut_slice().fill(0.0);
        p.get_mut("adj.mod").unwrap().as_mut_slice().fill(0.0);
        let a = LatentState::new(vec![0.2, -0.1], vec![1.0, 2.0, 3.0]);
        let b = LatentState::new(vec![0.2, -0.1], vec![-5.0, 0.5, 9.0]);
        let (_, na) = transition_prior(&p, &a, "a").unwrap();
        let (_, nb) = transition_prior(&p, &b, "a").unwrap();
        assert_eq!(na, nb);
    }

    #[test]
    fn responsive_target_ignores_later_coordinates() {
        let mut p = ModelParams::init(config(), 5).unwrap();
        p.get_mut("adj.base").unwrap().as_mut_slice().fill(1.5);
        let a = LatentState::new(vec![0.2, -0.1], vec![1.0, 2.0, 3.0]);
        let b = LatentState::new(vec![0.2, -0.1], vec![1.0, 2.0, -7.0]);
        let (_, na) = transition_prior(&p, &a, "a").unwrap();
        let (_, nb) = transition_prior(&p, &b, "a").unwrap();
        // z_nu[2] is a parent of nothing
        assert_eq!(na, nb);
        let c = LatentState::new(vec![0.2, -0.1], vec![-4.0, 2.0, 3.0]);
        let (_, nc) = transition_prior(&p, &c, "a").unwrap();
        assert_eq!(na.mean[0], nc.mean[0]);
        assert_ne!(na.mean[1], nc.mean[1]);
    }

    #[test]
    fn invariant_head_ignores_condition_and_responsive_block() {
        let p = ModelParams::init(config(), 6).unwrap();
        let a = LatentState::new(vec![0.4, 0.9], vec![1.0, 2.0, 3.0]);
        let b = LatentState::new(vec![0.4, 0.9], vec![-1.0, 0.0, 8.0]);
        let (ia, _) = transition_prior(&p, &a, "ctrl").unwrap();
        for c in ["a", "b"] {
            assert_eq!(transition_prior(&p, &b, c).unwrap().0, ia);
        }
    }

    #[test]
    fn score_diff_vanishes_against_itself() {
        let p = ModelParams::init(config(), 7).unwrap();
        let zp = LatentState::new(vec![0.4, 0.9], vec![1.0, 2.0, 3.0]);
        let zt = LatentState::new(vec![-0.3, 0.1], vec![0.5, 0.2, -1.0]);
        let s = transition_score_diff(&p, &zt, &zp, "b", "b").unwrap();
        assert_eq!(s.iota, vec![0.0; 2]);
        assert_eq!(s.nu, vec![0.0; 3]);
        // the learned invariant head has no u input, so its block is exactly 0 too
        let s = transition_score_diff(&p, &zt, &zp, "b", "ctrl").unwrap();
        assert_eq!(s.iota, vec![0.0; 2]);
        assert!(s.nu_norm() > 0.0);
        assert!(transition_score_diff(&p, &zt, &zp, "b", "q").is_err());
    }

    #[test]
    fn serialization_round_trips_bits() {
        let p = ModelParams::init(config(), 8).unwrap();
        let back = ModelParams::from_json(&p.to_json().unwrap()).unwrap();
        let a: Vec<u64> = p.flatten().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(p.config, back.config);
    }

    #[test]
    fn batch_helpers_agree_with_single_vector_calls() {
        let p = ModelParams::init(config(), 9).unwrap();
        let xs = Matrix::from_rows(&[x(), x().iter().map(|v| -v).collect()]).unwrap();
        let enc = encode_batch(&p, &xs, 1, 2).unwrap();
        let q = encode_responsive(&p, xs.row(1), "a", 2).unwrap();
        assert_eq!(enc.nu_mean.row(1), &q.mean[..]);
        assert_eq!(enc.iota_logvar.row(1), &encode_invariant(&p, xs.row(1)).unwrap().logvar[..]);
        let z = enc.mean();
        let dec = decode_batch(&p, &z).unwrap();
        let single = decode(&p, &LatentState::split(z.row(0), 2)).unwrap();
        assert_eq!(dec.row(0), &single[..]);
        let (m, l) = prior_batch(&p, &z, 2).unwrap();
        let (pi, pn) = transition_prior(&p, &LatentState::split(z.row(1), 2), "b").unwrap();
        assert_eq!(&m.row(1)[..2], &pi.mean[..]);
        assert_eq!(&l.row(1)[2..], &pn.logvar[..]);
    }

    /// Loss = Σ of every head output, differentiated w.r.t. parameters and inputs.
    fn heads_loss(params: &ModelParams, flat: &[f64], x: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut p = params.clone();
        p.assign(flat)?;
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true)?;
        let xn = tape.input(Matrix::from_vec(2, 6, x.to_vec())?)?;
        let zn = tape.input(Matrix::from_vec(2, 5, z.to_vec())?)?;
        let qi = encode_invariant_nodes(&mut tape, &p, &b, xn)?;
        let qn = encode_responsive_nodes(&mut tape, &p, &b, xn, 1, 3)?;
        let xr = decode_nodes(&mut tape, &p, &b, zn)?;
        let pr = transition_prior_nodes(&mut tape, &p, &b, zn, 2)?;
        let mut terms = Vec::new();
        for n in [qi.mean, qi.logvar, qn.mean, qn.logvar, xr, pr.iota.mean, pr.iota.logvar, pr.nu.mean, pr.nu.logvar] {
            let sq = tape.tanh(n)?;
            terms.push(tape.sum(sq)?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        let v = tape.scalar(total);
        Ok((v, tape.backward(total)?))
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut p = ModelParams::init(config(), 10).unwrap();
        p.get_mut("adj.base").unwrap().as_mut_slice().fill(0.4);
        let flat = p.flatten();
        let xs: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let zs: Vec<f64> = (0..10).map(|i| (i as f64 * 0.61).cos()).collect();
        let n = flat.len();
        let mut all = flat.clone();
        all.extend(&xs);
        all.extend(&zs);
        let (_, g) = heads_loss(&p, &flat, &xs, &zs).unwrap();
        let r = finite_diff_check(
            |v: &[f64]| Ok(heads_loss(&p, &v[..n], &v[n..n + 12], &v[n + 12..])?.0),
            &all,
            &g,
            1e-6,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }
}
