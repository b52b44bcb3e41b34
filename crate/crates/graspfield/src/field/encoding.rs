//! Sinusoidal positional encoding at geometrically spaced frequencies.
//!
//! Layout is component-major: for each input component, frequencies
//! k = 0..M-1 contribute (sin(2^k pi p), cos(2^k pi p)) in order. The tape
//! builder below produces the identical layout so graphs and precomputed
//! encodings interoperate.

use crate::error::Result;
use crate::tensor::{NodeId, Tape, Tensor};

/// Encodes one vector; output length is `2 * m * p.len()`.
pub fn positional_encode(p: &[f32], m: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(2 * m * p.len());
    for &v in p {
        for k in 0..m {
            let arg = (1u32 << k) as f32 * std::f32::consts::PI * v;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

/// Encodes `rows` points of dimension `dim` stored row-major.
pub(crate) fn positional_encode_rows(values: &[f32], dim: usize, m: usize) -> Tensor {
    let rows = values.len() / dim;
    let mut out = Vec::with_capacity(rows * 2 * m * dim);
    for row in values.chunks(dim) {
        out.extend(positional_encode(row, m));
    }
    Tensor::new(vec![rows, 2 * m * dim], out).expect("encoding size")
}

/// Encoded direction as a `[1, 2*m*3]` row, for broadcasting over bundles.
pub(crate) fn encode_direction_row(d: [f64; 3], m: usize) -> Tensor {
    let d32 = [d[0] as f32, d[1] as f32, d[2] as f32];
    Tensor::row(positional_encode(&d32, m))
}

/// Tape version: `x` is `[n, dim]`, output `[n, 2*m*dim]` with the same
/// column layout as [`positional_encode`]. Differentiable in `x`.
pub(crate) fn posenc_node(tape: &mut Tape, x: NodeId, m: usize) -> Result<NodeId> {
    let dim = tape.value(x).cols();
    let mut parts = Vec::with_capacity(2 * m * dim);
    let mut comps = Vec::with_capacity(dim);
    for c in 0..dim {
        comps.push(tape.slice_cols(x, c, 1)?);
    }
    for &comp in &comps {
        for k in 0..m {
            let scaled = tape.scale(comp, (1u32 << k) as f32 * std::f32::consts::PI)?;
            parts.push(tape.sin(scaled)?);
            parts.push(tape.cos(scaled)?);
        }
    }
    tape.concat_cols(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_encodes_to_alternating_zero_one() {
        assert_eq!(positional_encode(&[0.0], 2), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn half_hits_the_quarter_turns() {
        let e = positional_encode(&[0.5], 2);
        let want = [1.0f32, 0.0, 0.0, -1.0];
        for (a, b) in e.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6, "{e:?}");
        }
    }

    #[test]
    fn three_vector_m6_has_length_36() {
        assert_eq!(positional_encode(&[0.1, 0.2, 0.3], 6).len(), 36);
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        for i in 0..200 {
            let p = [(i as f32 - 100.0) * 0.013, i as f32 * 0.007, -0.3];
            for v in positional_encode(&p, 8) {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn tape_builder_matches_the_plain_encoder() {
        let vals = [0.12f32, -0.3, 0.71, 0.05, 0.0, -0.99];
        let plain = positional_encode_rows(&vals, 3, 5);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vals.to_vec()).unwrap());
        let enc = posenc_node(&mut tape, x, 5).unwrap();
        assert_eq!(tape.value(enc).shape(), plain.shape());
        for (a, b) in tape.value(enc).data().iter().zip(plain.data()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }
}
