//! Prototype-based prompt generation.
//!
//! An instance prototype `p = GAP(e) + GMP(e)` is rewritten through a
//! learnable memory bank by cosine-softmax addressing, `p_hat = sum_j w_j m_j`,
//! then expanded into an activation map and concatenated with the embedding
//! to synthesize a dense prompt via a 1x1 convolution.
//!
//! Two APIs exist side by side: strict functions that reject zero-norm
//! vectors (no silent epsilon substitution), and the graph path used in
//! training, which guards cosine denominators with `max(norm, 1e-12)`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::fmt::sig;
use crate::graph::{Graph, NodeId};
use crate::params::ParameterStore;
use crate::rng;
use crate::tensor::Tensor;

/// Denominator guard used on the training path only.
pub const NORM_GUARD: f64 = 1e-12;

/// Create the memory bank `(N, C)` and the 1x1 prompt convolution
/// `(2C+1, C)` in the store.
pub fn init_prompt_params(
    store: &mut ParameterStore,
    bank_size: usize,
    channels: usize,
    seed: u64,
) -> Result<()> {
    if bank_size == 0 {
        return Err(Error::Config("bank_size must be positive".into()));
    }
    let mut r = rng::stream(seed, "prompt.bank", 0);
    let std = 1.0 / (channels as f64).sqrt();
    let bank = Tensor::new(
        vec![bank_size, channels],
        rng::normal_vec(&mut r, bank_size * channels, std),
    )?;
    for row in 0..bank_size {
        let norm: f64 = bank.data()[row * channels..(row + 1) * channels]
            .iter()
            .map(|v| v * v)
            .sum();
        if norm == 0.0 {
            return Err(Error::DegenerateSimilarity(format!(
                "memory bank row {row} initialized to the zero vector"
            )));
        }
    }
    store.insert("prompt.bank", bank)?;

    let mut rc = rng::stream(seed, "prompt.conv", 0);
    let in_ch = 2 * channels + 1;
    store.insert(
        "prompt.conv.weight",
        Tensor::new(vec![in_ch, channels], rng::normal_vec(&mut rc, in_ch * channels, 0.02))?,
    )?;
    store.insert("prompt.conv.bias", Tensor::zeros(&[channels]))?;
    Ok(())
}

fn spatial_axes(rank: usize) -> Vec<usize> {
    (1..rank - 1).collect()
}

/// Instance prototype `GAP(e) + GMP(e)` per batch entry: `(B, h, w, C)
/// -> (B, C)`.
pub fn extract_prototype(e: &Tensor) -> Result<Tensor> {
    let s = e.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!(
            "extract_prototype expects (B, h, w, C), got {:?}",
            s
        )));
    }
    if !e.is_finite() {
        return Err(Error::NumericFailure("embedding not finite".into()));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let mut out = Tensor::zeros(&[b, c]);
    for bi in 0..b {
        for ci in 0..c {
            let mut sum = 0.0;
            let mut max = f64::NEG_INFINITY;
            for pos in 0..hw {
                let v = e.data()[(bi * hw + pos) * c + ci];
                sum += v;
                if v > max {
                    max = v;
                }
            }
            out.data_mut()[bi * c + ci] = sum / hw as f64 + max;
        }
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn softmax_inplace(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Strict cosine-softmax addressing weights for one prototype.
/// Zero-norm `p` or bank rows are rejected.
pub fn memory_weights(p: &[f64], bank: &Tensor) -> Result<Vec<f64>> {
    let (n, c) = bank_dims(bank)?;
    if p.len() != c {
        return Err(Error::invalid(format!(
            "prototype length {} does not match bank channel count {c}",
            p.len()
        )));
    }
    let pn = norm(p);
    if pn == 0.0 {
        return Err(Error::DegenerateSimilarity("prototype has zero norm".into()));
    }
    let mut sims = Vec::with_capacity(n);
    for j in 0..n {
        let row = &bank.data()[j * c..(j + 1) * c];
        let rn = norm(row);
        if rn == 0.0 {
            return Err(Error::DegenerateSimilarity(format!(
                "memory bank row {j} has zero norm"
            )));
        }
        let dot: f64 = p.iter().zip(row).map(|(a, b)| a * b).sum();
        sims.push(dot / (pn * rn));
    }
    softmax_inplace(&mut sims);
    Ok(sims)
}

/// Strict domain-adaptive prototype `p_hat = sum_j w_j m_j`.
pub fn adapt_prototype(p: &[f64], bank: &Tensor) -> Result<Vec<f64>> {
    let (n, c) = bank_dims(bank)?;
    let w = memory_weights(p, bank)?;
    let mut out = vec![0.0; c];
    for j in 0..n {
        let row = &bank.data()[j * c..(j + 1) * c];
        for (o, r) in out.iter_mut().zip(row) {
            *o += w[j] * r;
        }
    }
    Ok(out)
}

/// Strict activation map: per-position cosine similarity between the
/// broadcast `p_hat` and the embedding. Zero `p_hat` or a zero embedding
/// vector at any position is rejected.
pub fn activation_map(p_hat: &[f64], e: &Tensor) -> Result<Tensor> {
    let s = e.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!(
            "activation_map expects (B, h, w, C), got {:?}",
            s
        )));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if p_hat.len() != c {
        return Err(Error::invalid(format!(
            "p_hat length {} does not match channel count {c}",
            p_hat.len()
        )));
    }
    let pn = norm(p_hat);
    if pn == 0.0 {
        return Err(Error::DegenerateSimilarity("p_hat has zero norm".into()));
    }
    let mut out = Tensor::zeros(&[b, h, w]);
    for pos in 0..b * h * w {
        let v = &e.data()[pos * c..(pos + 1) * c];
        let vn = norm(v);
        if vn == 0.0 {
            return Err(Error::DegenerateSimilarity(format!(
                "embedding vector at flat position {pos} has zero norm"
            )));
        }
        let dot: f64 = p_hat.iter().zip(v).map(|(a, b)| a * b).sum();
        out.data_mut()[pos] = dot / (pn * vn);
    }
    Ok(out)
}

fn bank_dims(bank: &Tensor) -> Result<(usize, usize)> {
    let s = bank.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::Inventory(format!(
            "memory bank must be a nonempty (N, C) matrix, got {:?}",
            s
        )));
    }
    Ok((s[0], s[1]))
}

/// Graph nodes produced by the prompt generator, kept for inspection.
pub struct PromptOutputs {
    pub prototype: NodeId,      // (B, C)
    pub weights: NodeId,        // (B, N)
    pub adapted: NodeId,        // (B, C)
    pub activation: NodeId,     // (B, h, w, 1)
    pub prompt: NodeId,         // (B, h, w, C)
}

/// Guarded graph-path prototype extraction.
pub fn prototype_node(g: &mut Graph, e: NodeId) -> NodeId {
    let rank = g.shape(e).len();
    let axes = spatial_axes(rank);
    let gap = g.mean_axes(e, &axes, false);
    let gmp = g.max_axes(e, &axes, false);
    g.add(gap, gmp)
}

fn guarded_row_norms(g: &mut Graph, m: NodeId) -> NodeId {
    // (R, C) -> (R, 1)
    let sq = g.mul(m, m);
    let sum = g.sum_axes(sq, &[1], true);
    let n = g.sqrt(sum);
    g.max_scalar(n, NORM_GUARD)
}

/// Guarded cosine-softmax weights `(B, N)` for prototypes `(B, C)`.
pub fn memory_weights_node(g: &mut Graph, p: NodeId, bank: NodeId) -> NodeId {
    let b = g.shape(p)[0];
    let n = g.shape(bank)[0];
    let bank_t = g.permute(bank, vec![1, 0]); // (C, N)
    let dots = g.matmul(p, bank_t); // (B, N)
    let pn = guarded_row_norms(g, p); // (B, 1)
    let mn = guarded_row_norms(g, bank); // (N, 1)
    let mn_row = g.reshape(mn, vec![1, n]);
    let pn_b = g.broadcast(pn, &[b, n]);
    let mn_b = g.broadcast(mn_row, &[b, n]);
    let denom = g.mul(pn_b, mn_b);
    let cos = g.div(dots, denom);
    g.softmax_last(cos)
}

/// Full guarded prompt generator over the graph.
pub fn prompt_forward(
    g: &mut Graph,
    e: NodeId,
    bank: NodeId,
    conv_weight: NodeId,
    conv_bias: NodeId,
) -> Result<PromptOutputs> {
    let shape = g.shape(e).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid(format!(
            "prompt_forward expects (B, h, w, C), got {:?}",
            shape
        )));
    }
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let conv_in = g.shape(conv_weight)[0];
    if conv_in != 2 * c + 1 {
        return Err(Error::invalid(format!(
            "prompt conv expects {} input channels, got {conv_in}",
            2 * c + 1
        )));
    }

    let prototype = prototype_node(g, e); // (B, C)
    let weights = memory_weights_node(g, prototype, bank); // (B, N)
    let adapted = g.matmul(weights, bank); // (B, C)

    // activation map: cosine(p_hat, e) per position
    let p_spread = g.reshape(adapted, vec![b, 1, 1, c]);
    let p_b = g.broadcast(p_spread, &shape);
    let prod = g.mul(p_b, e);
    let dots = g.sum_axes(prod, &[3], true); // (B, h, w, 1)

    let e_sq = g.mul(e, e);
    let e_norm_sq = g.sum_axes(e_sq, &[3], true);
    let e_norm = g.sqrt(e_norm_sq);
    let e_norm = g.max_scalar(e_norm, NORM_GUARD);

    let p_sq = g.mul(adapted, adapted);
    let p_norm_sq = g.sum_axes(p_sq, &[1], true); // (B, 1)
    let p_norm = g.sqrt(p_norm_sq);
    let p_norm = g.max_scalar(p_norm, NORM_GUARD);
    let p_norm = g.reshape(p_norm, vec![b, 1, 1, 1]);
    let p_norm_b = g.broadcast(p_norm, &[b, h, w, 1]);

    let denom = g.mul(e_norm, p_norm_b);
    let activation = g.div(dots, denom); // (B, h, w, 1)

    // concat [p_hat, A, e] along channels, then 1x1 conv
    let cat = g.concat_last(&[p_b, activation, e]); // (B, h, w, 2C+1)
    let flat = g.reshape(cat, vec![b * h * w, 2 * c + 1]);
    let conv = g.linear(flat, conv_weight, conv_bias);
    let prompt = g.reshape(conv, vec![b, h, w, c]);

    Ok(PromptOutputs {
        prototype,
        weights,
        adapted,
        activation,
        prompt,
    })
}

/// Dump the bank plus optional raw/adapted prototypes as CSV:
/// header `kind,index,c0..c{C-1}`, 9 significant digits.
pub fn export_prototypes(
    bank: &Tensor,
    embeddings: &[Tensor],
    out: &mut impl Write,
) -> Result<()> {
    let (n, c) = bank_dims(bank)?;
    let mut header = String::from("kind,index");
    for ci in 0..c {
        header.push_str(&format!(",c{ci}"));
    }
    writeln!(out, "{header}")?;

    let write_row = |out: &mut dyn Write, kind: &str, index: usize, v: &[f64]| -> Result<()> {
        let mut line = format!("{kind},{index}");
        for x in v {
            line.push(',');
            line.push_str(&sig(*x, 9));
        }
        writeln!(out, "{line}")?;
        Ok(())
    };

    for j in 0..n {
        write_row(out, "bank", j, &bank.data()[j * c..(j + 1) * c])?;
    }

    let mut raw = Vec::new();
    let mut adapted = Vec::new();
    for e in embeddings {
        let p = extract_prototype(e)?;
        let b = p.shape()[0];
        for bi in 0..b {
            let pv = p.data()[bi * c..(bi + 1) * c].to_vec();
            let ad = adapt_prototype_guarded(&pv, bank);
            raw.push(pv);
            adapted.push(ad);
        }
    }
    for (i, v) in raw.iter().enumerate() {
        write_row(out, "raw", i, v)?;
    }
    for (i, v) in adapted.iter().enumerate() {
        write_row(out, "adapted", i, v)?;
    }
    Ok(())
}

/// Guarded variant of [`adapt_prototype`] matching the training path.
pub fn adapt_prototype_guarded(p: &[f64], bank: &Tensor) -> Vec<f64> {
    let n = bank.shape()[0];
    let c = bank.shape()[1];
    let pn = norm(p).max(NORM_GUARD);
    let mut sims = Vec::with_capacity(n);
    for j in 0..n {
        let row = &bank.data()[j * c..(j + 1) * c];
        let rn = norm(row).max(NORM_GUARD);
        let dot: f64 = p.iter().zip(row).map(|(a, b)| a * b).sum();
        sims.push(dot / (pn * rn));
    }
    softmax_inplace(&mut sims);
    let mut out = vec![0.0; c];
    for j in 0..n {
        let row = &bank.data()[j * c..(j + 1) * c];
        for (o, r) in out.iter_mut().zip(row) {
            *o += sims[j] * r;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank2() -> Tensor {
        Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn prototype_constant_embedding_doubles() {
        let e = Tensor::full(&[1, 2, 2, 3], 0.7);
        let p = extract_prototype(&e).unwrap();
        assert_eq!(p.shape(), &[1, 3]);
        for &v in p.data() {
            assert!((v - 1.4).abs() < 1e-15);
        }
    }

    #[test]
    fn prototype_hand_case_gap_plus_gmp() {
        // one channel over a 2x2 grid with values (0,0,0,4): GAP=1, GMP=4 -> 5
        let e = Tensor::new(vec![1, 2, 2, 1], vec![0.0, 0.0, 0.0, 4.0]).unwrap();
        let p = extract_prototype(&e).unwrap();
        assert_eq!(p.data(), &[5.0]);
    }

    #[test]
    fn prototype_shape_from_toy_embedding() {
        let e = Tensor::zeros(&[1, 8, 8, 16]);
        assert_eq!(extract_prototype(&e).unwrap().shape(), &[1, 16]);
    }

    #[test]
    fn single_row_bank_gives_unit_weight() {
        let bank = Tensor::new(vec![1, 2], vec![0.3, -0.4]).unwrap();
        let w = memory_weights(&[1.0, 1.0], &bank).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn hand_softmax_of_orthogonal_rows() {
        // p=(1,0): cosines (1,0) -> softmax = (e/(e+1), 1/(e+1))
        let w = memory_weights(&[1.0, 0.0], &bank2()).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((w[0] - 0.7310585786300049).abs() < 1e-10);

        let p_hat = adapt_prototype(&[1.0, 0.0], &bank2()).unwrap();
        assert!((p_hat[0] - 0.7310585786300049).abs() < 1e-10);
        assert!((p_hat[1] - 0.2689414213699951).abs() < 1e-10);
    }

    #[test]
    fn weights_are_scale_invariant() {
        let w1 = memory_weights(&[0.2, -0.7], &bank2()).unwrap();
        let w3 = memory_weights(&[0.6, -2.1], &bank2()).unwrap();
        assert_eq!(w1, w3);
    }

    #[test]
    fn strict_api_rejects_zero_norms() {
        assert!(matches!(
            memory_weights(&[0.0, 0.0], &bank2()),
            Err(Error::DegenerateSimilarity(_))
        ));
        let bad_bank = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            memory_weights(&[1.0, 0.0], &bad_bank),
            Err(Error::DegenerateSimilarity(_))
        ));
    }

    #[test]
    fn identical_rows_adapt_to_that_row() {
        let bank = Tensor::new(vec![3, 2], vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        let p_hat = adapt_prototype(&[2.0, 3.0], &bank).unwrap();
        assert!((p_hat[0] - 0.5).abs() < 1e-12);
        assert!((p_hat[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn row_permutation_leaves_adapted_prototype_unchanged() {
        let bank = Tensor::new(vec![3, 2], vec![1.0, 0.2, -0.5, 0.9, 0.3, 0.3]).unwrap();
        let perm = Tensor::new(vec![3, 2], vec![0.3, 0.3, 1.0, 0.2, -0.5, 0.9]).unwrap();
        let a = adapt_prototype(&[0.7, -0.1], &bank).unwrap();
        let b = adapt_prototype(&[0.7, -0.1], &perm).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn activation_map_hand_cases() {
        // e equal to broadcast p_hat -> 1 everywhere
        let mut e = Tensor::zeros(&[1, 1, 2, 2]);
        e.data_mut().copy_from_slice(&[0.6, -0.8, 0.6, -0.8]);
        let a = activation_map(&[0.6, -0.8], &e).unwrap();
        for &v in a.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        // orthogonal position -> 0; 45-degree position -> 1/sqrt(2)
        let e = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        let a = activation_map(&[1.0, 0.0], &e).unwrap();
        assert!(a.data()[0].abs() < 1e-12);
        assert!((a.data()[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn activation_map_strict_errors() {
        let e = Tensor::full(&[1, 1, 1, 2], 1.0);
        assert!(matches!(
            activation_map(&[0.0, 0.0], &e),
            Err(Error::DegenerateSimilarity(_))
        ));
        let e0 = Tensor::zeros(&[1, 1, 1, 2]);
        assert!(matches!(
            activation_map(&[1.0, 0.0], &e0),
            Err(Error::DegenerateSimilarity(_))
        ));
    }

    #[test]
    fn graph_path_matches_strict_path_on_generic_input() {
        let mut r = rng::stream(3, "prompt-match", 0);
        let e = Tensor::new(vec![2, 2, 2, 3], rng::normal_vec(&mut r, 24, 1.0)).unwrap();
        let bank = Tensor::new(vec![4, 3], rng::normal_vec(&mut r, 12, 1.0)).unwrap();

        let mut g = Graph::new();
        let en = g.constant(e.clone());
        let bn = g.constant(bank.clone());
        let proto = prototype_node(&mut g, en);
        let weights = memory_weights_node(&mut g, proto, bn);

        let p_eager = extract_prototype(&e).unwrap();
        assert!(g.value(proto).max_abs_diff(&p_eager) < 1e-12);
        for bi in 0..2 {
            let w_eager = memory_weights(&p_eager.data()[bi * 3..(bi + 1) * 3], &bank).unwrap();
            for (j, wj) in w_eager.iter().enumerate() {
                assert!((g.value(weights).data()[bi * 4 + j] - wj).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prompt_shapes_and_zero_conv_bias_case() {
        let mut r = rng::stream(5, "prompt-shape", 0);
        let c = 16;
        let e = Tensor::new(vec![1, 8, 8, c], rng::normal_vec(&mut r, 64 * c, 1.0)).unwrap();
        let bank = Tensor::new(vec![8, c], rng::normal_vec(&mut r, 8 * c, 0.25)).unwrap();

        let mut g = Graph::new();
        let en = g.constant(e);
        let bn = g.constant(bank);
        // zero conv weight: prompt should be the broadcast bias
        let cw = g.constant(Tensor::zeros(&[2 * c + 1, c]));
        let bias_vals: Vec<f64> = (0..c).map(|i| i as f64 * 0.1).collect();
        let cb = g.constant(Tensor::new(vec![c], bias_vals.clone()).unwrap());
        let out = prompt_forward(&mut g, en, bn, cw, cb).unwrap();
        assert_eq!(g.shape(out.prompt), &[1, 8, 8, c]);
        for pos in 0..64 {
            for ci in 0..c {
                assert_eq!(g.value(out.prompt).data()[pos * c + ci], bias_vals[ci]);
            }
        }
        // concat width is 2C+1
        assert_eq!(g.shape(cw), &[33, 16]);
        // activation map stays in [-1, 1]
        for &v in g.value(out.activation).data() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn export_counts_and_roundtrip() {
        let mut r = rng::stream(7, "export", 0);
        let bank = Tensor::new(vec![5, 3], rng::normal_vec(&mut r, 15, 0.5)).unwrap();
        let e1 = Tensor::new(vec![1, 2, 2, 3], rng::normal_vec(&mut r, 12, 1.0)).unwrap();
        let e2 = Tensor::new(vec![1, 2, 2, 3], rng::normal_vec(&mut r, 12, 1.0)).unwrap();

        let mut buf = Vec::new();
        export_prototypes(&bank, &[e1, e2], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "kind,index,c0,c1,c2");
        assert_eq!(lines.len(), 1 + 5 + 2 + 2);

        // bank rows round-trip within 1e-6
        for (j, line) in lines[1..6].iter().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[0], "bank");
            assert_eq!(fields[1], j.to_string());
            for ci in 0..3 {
                let parsed: f64 = fields[2 + ci].parse().unwrap();
                assert!((parsed - bank.data()[j * 3 + ci]).abs() < 1e-6);
            }
        }

        let empty = Tensor::zeros(&[0, 3]);
        let mut sink = Vec::new();
        assert!(export_prototypes(&empty, &[], &mut sink).is_err());
    }
}
