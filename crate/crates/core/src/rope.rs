//! Rotary positional encoding, 1D and axial 2D.
//!
//! The 1D scheme rotates coordinate pairs (2i, 2i+1) of a query/key
//! vector by `pos * theta_i`, which makes attention logits depend only
//! on relative offsets. The 2D scheme splits the head dimension in
//! half: the first half rotates by a token's horizontal index, the
//! second by its vertical index, each using a frequency table of half
//! the head dimension. Text tokens sit on the diagonal (t, t) so
//! text-text offsets behave exactly like 1D RoPE on each half.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{ops, Result as NumResult, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum RopeError {
    #[error("head_dim must be even and >= 2, got {0}")]
    OddHeadDim(usize),
    #[error("2D rotary encoding needs head_dim divisible by 4, got {0}")]
    NotDivisibleBy4(usize),
    #[error("base must be > 1, got {0}")]
    BadBase(f64),
    #[error("vector length {got} does not match head_dim {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("frequency table of dim {table} cannot rotate half of a {vec}-vector")]
    TableMismatch { table: usize, vec: usize },
}

/// Positional-encoding scheme under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PeScheme {
    #[serde(rename = "rope1d")]
    Rope1D,
    #[serde(rename = "rope2d")]
    Rope2D,
}

impl PeScheme {
    pub fn label(&self) -> &'static str {
        match self {
            PeScheme::Rope1D => "rope1d",
            PeScheme::Rope2D => "rope2d",
        }
    }
}

impl std::str::FromStr for PeScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rope1d" => Ok(PeScheme::Rope1D),
            "rope2d" => Ok(PeScheme::Rope2D),
            other => Err(format!("unknown positional scheme '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Image,
}

/// Per-token position: horizontal and vertical indices plus modality.
/// Under both schemes text tokens satisfy x == y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosIndex {
    pub x: usize,
    pub y: usize,
    pub modality: Modality,
}

impl PosIndex {
    pub fn text(t: usize) -> Self {
        Self {
            x: t,
            y: t,
            modality: Modality::Text,
        }
    }

    pub fn image(x: usize, y: usize) -> Self {
        Self {
            x,
            y,
            modality: Modality::Image,
        }
    }

    pub fn shifted(&self, dx: usize, dy: usize) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            modality: self.modality,
        }
    }
}

/// Angular frequencies theta_i = base^(-2i/d) for i in 0..d/2.
#[derive(Debug, Clone)]
pub struct FreqTable {
    pub head_dim: usize,
    pub base: f64,
    pub thetas: Vec<f64>,
}

pub fn make_freqs(head_dim: usize, base: f64) -> Result<FreqTable, RopeError> {
    if head_dim < 2 || head_dim % 2 != 0 {
        return Err(RopeError::OddHeadDim(head_dim));
    }
    if base <= 1.0 {
        return Err(RopeError::BadBase(base));
    }
    let thetas = (0..head_dim / 2)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    Ok(FreqTable {
        head_dim,
        base,
        thetas,
    })
}

/// Rotates pairs (v[2i], v[2i+1]) by `pos * theta_i`. Norm-preserving.
pub fn apply_rope_1d(v: &[f64], pos: i64, f: &FreqTable) -> Result<Vec<f64>, RopeError> {
    if v.len() != f.head_dim {
        return Err(RopeError::LengthMismatch {
            expected: f.head_dim,
            got: v.len(),
        });
    }
    let mut out = vec![0.0; v.len()];
    rotate_into(v, pos as f64, &f.thetas, &mut out);
    Ok(out)
}

/// Axial 2D rotation: the first half of `v` rotates by `pos.x`, the
/// second half by `pos.y`, each treated as a 1D rotation with the
/// supplied half-dimension frequency table.
pub fn apply_rope_2d(v: &[f64], pos: &PosIndex, f: &FreqTable) -> Result<Vec<f64>, RopeError> {
    let d = v.len();
    if d % 4 != 0 {
        return Err(RopeError::NotDivisibleBy4(d));
    }
    if f.head_dim != d / 2 {
        return Err(RopeError::TableMismatch {
            table: f.head_dim,
            vec: d,
        });
    }
    let half = d / 2;
    let mut out = vec![0.0; d];
    rotate_into(&v[..half], pos.x as f64, &f.thetas, &mut out[..half]);
    rotate_into(&v[half..], pos.y as f64, &f.thetas, &mut out[half..]);
    Ok(out)
}

fn rotate_into(v: &[f64], pos: f64, thetas: &[f64], out: &mut [f64]) {
    for (i, &theta) in thetas.iter().enumerate() {
        let angle = pos * theta;
        let (s, c) = angle.sin_cos();
        let (x0, x1) = (v[2 * i], v[2 * i + 1]);
        out[2 * i] = x0 * c - x1 * s;
        out[2 * i + 1] = x0 * s + x1 * c;
    }
}

/// Maps a mixed text/image token stream to positions, text first.
///
/// Rope1D: token t of the text gets (t, t); the patch with flattened
/// row-major index p gets (text_len + p, text_len + p).
///
/// Rope2D: token t of the text gets (t, t); the patch at (row r, col c)
/// gets (text_len + c, text_len + r). Offsetting by `text_len` on both
/// axes keeps image patches positionally disjoint from text tokens.
pub fn assign_positions(
    text_len: usize,
    grid: (usize, usize),
    scheme: PeScheme,
) -> Vec<PosIndex> {
    let (rows, cols) = grid;
    let mut out = Vec::with_capacity(text_len + rows * cols);
    for t in 0..text_len {
        out.push(PosIndex::text(t));
    }
    for r in 0..rows {
        for c in 0..cols {
            match scheme {
                PeScheme::Rope1D => {
                    let t = text_len + r * cols + c;
                    out.push(PosIndex {
                        x: t,
                        y: t,
                        modality: Modality::Image,
                    });
                }
                PeScheme::Rope2D => {
                    out.push(PosIndex::image(text_len + c, text_len + r));
                }
            }
        }
    }
    out
}

/// First diagonal position available after the image block, for text
/// that continues a sequence (generated answer tokens). Under 1D the
/// image occupies `rows*cols` positions; under 2D it occupies a
/// `rows x cols` box whose diagonal extent is `max(rows, cols)`.
pub fn text_continuation_start(text_len: usize, grid: (usize, usize), scheme: PeScheme) -> usize {
    let (rows, cols) = grid;
    match scheme {
        PeScheme::Rope1D => text_len + rows * cols,
        PeScheme::Rope2D => text_len + rows.max(cols),
    }
}

/// Rotary application over tensor rows for one attention head.
#[derive(Debug, Clone)]
pub struct RotaryEncoder {
    scheme: PeScheme,
    head_dim: usize,
    /// Full-dimension table (1D scheme).
    table_full: FreqTable,
    /// Half-dimension table shared by both axes (2D scheme).
    table_axis: FreqTable,
}

impl RotaryEncoder {
    pub fn new(scheme: PeScheme, head_dim: usize, base: f64) -> Result<Self, RopeError> {
        if scheme == PeScheme::Rope2D && head_dim % 4 != 0 {
            return Err(RopeError::NotDivisibleBy4(head_dim));
        }
        let table_full = make_freqs(head_dim, base)?;
        let table_axis = make_freqs(head_dim.max(4) / 2, base)?;
        Ok(Self {
            scheme,
            head_dim,
            table_full,
            table_axis,
        })
    }

    pub fn scheme(&self) -> PeScheme {
        self.scheme
    }

    /// Rotation angles per (row, pair), row-major, as consumed by
    /// `ops::rotate_pairs`.
    pub fn angles(&self, positions: &[PosIndex]) -> Vec<f64> {
        let half = self.head_dim / 2;
        let mut out = Vec::with_capacity(positions.len() * half);
        match self.scheme {
            PeScheme::Rope1D => {
                for p in positions {
                    for &theta in &self.table_full.thetas {
                        out.push(p.x as f64 * theta);
                    }
                }
            }
            PeScheme::Rope2D => {
                for p in positions {
                    for &theta in &self.table_axis.thetas {
                        out.push(p.x as f64 * theta);
                    }
                    for &theta in &self.table_axis.thetas {
                        out.push(p.y as f64 * theta);
                    }
                }
            }
        }
        out
    }

    /// Precomputes the (cos, sin) table for a position list, shared by
    /// every query/key rotation over the same sequence.
    pub fn plan<T: Scalar>(&self, positions: &[PosIndex]) -> RopePlan<T> {
        let angles = self.angles(positions);
        let mut cos_sin = Vec::with_capacity(angles.len() * 2);
        for a in angles {
            let (s, c) = a.sin_cos();
            cos_sin.push(T::from_f64(c));
            cos_sin.push(T::from_f64(s));
        }
        RopePlan {
            cos_sin: std::rc::Rc::new(cos_sin),
        }
    }

    /// Applies the rotation to every row of `x` (one position per row).
    /// Differentiable; the backward pass is the inverse rotation.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>, positions: &[PosIndex]) -> NumResult<Tensor<T>> {
        debug_assert!(x
            .dims2("rope_apply")
            .map(|(m, _)| m == positions.len())
            .unwrap_or(false));
        self.apply_planned(x, &self.plan(positions))
    }

    /// `apply` against a precomputed plan.
    pub fn apply_planned<T: Scalar>(
        &self,
        x: &Tensor<T>,
        plan: &RopePlan<T>,
    ) -> NumResult<Tensor<T>> {
        ops::rotate_pairs_planned(x, &plan.cos_sin)
    }
}

/// Cached rotation table for one position list.
#[derive(Clone)]
pub struct RopePlan<T: Scalar> {
    cos_sin: std::rc::Rc<Vec<T>>,
}

impl<T: Scalar> RopePlan<T> {
    pub fn table(&self) -> &std::rc::Rc<Vec<T>> {
        &self.cos_sin
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn randv(d: usize, rng: &mut RngStream) -> Vec<f64> {
        (0..d).map(|_| rng.normal()).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn make_freqs_first_theta_is_one() {
        let f = make_freqs(8, 10000.0).unwrap();
        assert_eq!(f.thetas[0], 1.0);
    }

    #[test]
    fn make_freqs_d4_analytic() {
        let f = make_freqs(4, 10000.0).unwrap();
        assert!((f.thetas[1] - 0.01).abs() < 1e-15, "10000^(-1/2) = 0.01");
    }

    #[test]
    fn make_freqs_strictly_decreasing() {
        let f = make_freqs(8, 10000.0).unwrap();
        assert_eq!(f.thetas.len(), 4);
        for w in f.thetas.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn make_freqs_rejects_odd_dim() {
        assert!(matches!(make_freqs(7, 10000.0), Err(RopeError::OddHeadDim(7))));
        assert!(matches!(make_freqs(8, 1.0), Err(RopeError::BadBase(_))));
    }

    #[test]
    fn rope_1d_zero_position_is_identity() {
        let f = make_freqs(8, 10000.0).unwrap();
        let v: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        assert_eq!(apply_rope_1d(&v, 0, &f).unwrap(), v);
    }

    #[test]
    fn rope_1d_single_pair_analytic() {
        let f = make_freqs(2, 10000.0).unwrap();
        let out = apply_rope_1d(&[1.0, 0.0], 1, &f).unwrap();
        assert!((out[0] - 1.0f64.cos()).abs() < 1e-15);
        assert!((out[1] - 1.0f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn rope_1d_rejects_length_mismatch() {
        let f = make_freqs(8, 10000.0).unwrap();
        assert!(matches!(
            apply_rope_1d(&[0.0; 6], 1, &f),
            Err(RopeError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn rope_1d_relative_position_identity() {
        // <R(m)q, R(n)k> == <R(m-n)q, k>
        let f = make_freqs(16, 10000.0).unwrap();
        let mut rng = RngStream::new(21, 0);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let q = randv(16, &mut rng);
            let k = randv(16, &mut rng);
            let m = rng.below(256) as i64;
            let n = rng.below(256) as i64;
            let lhs = dot(
                &apply_rope_1d(&q, m, &f).unwrap(),
                &apply_rope_1d(&k, n, &f).unwrap(),
            );
            let rhs = dot(&apply_rope_1d(&q, m - n, &f).unwrap(), &k);
            worst = worst.max((lhs - rhs).abs());
        }
        assert!(worst <= 1e-10, "max deviation {worst}");
    }

    #[test]
    fn rope_2d_zero_position_is_identity() {
        let f = make_freqs(8, 10000.0).unwrap();
        let v: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let out = apply_rope_2d(&v, &PosIndex::image(0, 0), &f).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn rope_2d_rejects_bad_dims() {
        let f = make_freqs(8, 10000.0).unwrap();
        assert!(matches!(
            apply_rope_2d(&[0.0; 14], &PosIndex::image(0, 0), &f),
            Err(RopeError::NotDivisibleBy4(14))
        ));
        // Table must be half the vector dimension.
        assert!(matches!(
            apply_rope_2d(&[0.0; 12], &PosIndex::image(0, 0), &f),
            Err(RopeError::TableMismatch { .. })
        ));
    }

    #[test]
    fn rope_2d_translation_invariance() {
        let f = make_freqs(8, 10000.0).unwrap();
        let mut rng = RngStream::new(22, 0);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let q = randv(16, &mut rng);
            let k = randv(16, &mut rng);
            let pq = PosIndex::image(rng.below(32), rng.below(32));
            let pk = PosIndex::image(rng.below(32), rng.below(32));
            let (dx, dy) = (rng.below(64), rng.below(64));
            let base = dot(
                &apply_rope_2d(&q, &pq, &f).unwrap(),
                &apply_rope_2d(&k, &pk, &f).unwrap(),
            );
            let shifted = dot(
                &apply_rope_2d(&q, &pq.shifted(dx, dy), &f).unwrap(),
                &apply_rope_2d(&k, &pk.shifted(dx, dy), &f).unwrap(),
            );
            worst = worst.max((base - shifted).abs());
        }
        assert!(worst <= 1e-10, "max deviation {worst}");
    }

    #[test]
    fn rope_2d_shared_y_equals_y_zero() {
        let f = make_freqs(8, 10000.0).unwrap();
        let mut rng = RngStream::new(23, 0);
        for _ in 0..50 {
            let q = randv(16, &mut rng);
            let k = randv(16, &mut rng);
            let (qx, kx, y) = (rng.below(16), rng.below(16), rng.below(16));
            let with_y = dot(
                &apply_rope_2d(&q, &PosIndex::image(qx, y), &f).unwrap(),
                &apply_rope_2d(&k, &PosIndex::image(kx, y), &f).unwrap(),
            );
            let y_zero = dot(
                &apply_rope_2d(&q, &PosIndex::image(qx, 0), &f).unwrap(),
                &apply_rope_2d(&k, &PosIndex::image(kx, 0), &f).unwrap(),
            );
            assert!((with_y - y_zero).abs() <= 1e-10);
        }
    }

    #[test]
    fn rope_2d_reduces_to_1d_on_single_row_grid() {
        // grid 1xN with text_len=0: y is constant, so full 2D logits
        // equal 1D logits on the x-half plus the raw dot of the y-half.
        let d = 16;
        let f_axis = make_freqs(d / 2, 10000.0).unwrap();
        let mut rng = RngStream::new(24, 0);
        let positions = assign_positions(0, (1, 8), PeScheme::Rope2D);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let q = randv(d, &mut rng);
            let k = randv(d, &mut rng);
            let pq = positions[rng.below(8)];
            let pk = positions[rng.below(8)];
            let full_2d = dot(
                &apply_rope_2d(&q, &pq, &f_axis).unwrap(),
                &apply_rope_2d(&k, &pk, &f_axis).unwrap(),
            );
            let x_half = dot(
                &apply_rope_1d(&q[..d / 2], pq.x as i64, &f_axis).unwrap(),
                &apply_rope_1d(&k[..d / 2], pk.x as i64, &f_axis).unwrap(),
            );
            let y_half = dot(&q[d / 2..], &k[d / 2..]);
            worst = worst.max((full_2d - (x_half + y_half)).abs());
        }
        assert!(worst <= 1e-10, "max deviation {worst}");
    }

    #[test]
    fn norm_preserved_by_both_schemes() {
        let f1 = make_freqs(16, 10000.0).unwrap();
        let f2 = make_freqs(8, 10000.0).unwrap();
        let mut rng = RngStream::new(25, 0);
        for _ in 0..50 {
            let v = randv(16, &mut rng);
            let norm: f64 = dot(&v, &v).sqrt();
            let r1 = apply_rope_1d(&v, rng.below(100) as i64, &f1).unwrap();
            let r2 =
                apply_rope_2d(&v, &PosIndex::image(rng.below(32), rng.below(32)), &f2).unwrap();
            assert!((dot(&r1, &r1).sqrt() - norm).abs() < 1e-12);
            assert!((dot(&r2, &r2).sqrt() - norm).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_is_linear() {
        let f = make_freqs(8, 10000.0).unwrap();
        let mut rng = RngStream::new(26, 0);
        for _ in 0..20 {
            let u = randv(8, &mut rng);
            let w = randv(8, &mut rng);
            let (a, b) = (rng.normal(), rng.normal());
            let combined: Vec<f64> = u.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
            let lhs = apply_rope_1d(&combined, 7, &f).unwrap();
            let ru = apply_rope_1d(&u, 7, &f).unwrap();
            let rw = apply_rope_1d(&w, 7, &f).unwrap();
            for i in 0..8 {
                assert!((lhs[i] - (a * ru[i] + b * rw[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn assign_positions_1d_is_sequential() {
        let ps = assign_positions(3, (2, 2), PeScheme::Rope1D);
        let xs: Vec<usize> = ps.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0, 1, 2, 3, 4, 5, 6]);
        assert!(ps.iter().all(|p| p.x == p.y));
        assert_eq!(ps[3].modality, Modality::Image);
        assert_eq!(ps[2].modality, Modality::Text);
    }

    #[test]
    fn assign_positions_2d_matches_documented_rule() {
        let ps = assign_positions(3, (2, 2), PeScheme::Rope2D);
        let expected = [
            (0, 0),
            (1, 1),
            (2, 2),
            (3, 3), // patch (r=0, c=0)
            (4, 3), // patch (r=0, c=1)
            (3, 4), // patch (r=1, c=0)
            (4, 4), // patch (r=1, c=1)
        ];
        let got: Vec<(usize, usize)> = ps.iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn text_tokens_sit_on_the_diagonal() {
        for scheme in [PeScheme::Rope1D, PeScheme::Rope2D] {
            let ps = assign_positions(5, (2, 3), scheme);
            for p in ps.iter().filter(|p| p.modality == Modality::Text) {
                assert_eq!(p.x, p.y);
            }
        }
    }

    #[test]
    fn continuation_starts_after_image_block() {
        assert_eq!(text_continuation_start(3, (2, 2), PeScheme::Rope1D), 7);
        assert_eq!(text_continuation_start(3, (2, 2), PeScheme::Rope2D), 5);
        assert_eq!(text_continuation_start(6, (8, 8), PeScheme::Rope2D), 14);
    }

    #[test]
    fn encoder_apply_matches_pure_functions() {
        let mut rng = RngStream::new(27, 0);
        let d = 16;
        let positions = assign_positions(2, (2, 2), PeScheme::Rope2D);
        let data: Vec<f64> = (0..positions.len() * d).map(|_| rng.normal()).collect();
        let x = Tensor::from_vec(vec![positions.len(), d], data.clone()).unwrap();
        let enc = RotaryEncoder::new(PeScheme::Rope2D, d, 10000.0).unwrap();
        let out = enc.apply(&x, &positions).unwrap();
        let f_axis = make_freqs(d / 2, 10000.0).unwrap();
        for (r, pos) in positions.iter().enumerate() {
            let row = &data[r * d..(r + 1) * d];
            let expected = apply_rope_2d(row, pos, &f_axis).unwrap();
            for (a, e) in out.data()[r * d..(r + 1) * d].iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_apply_gradients_check_out() {
        use crate::numerics::{grad_check, ops, Tape};
        let positions = assign_positions(1, (2, 2), PeScheme::Rope2D);
        let enc = RotaryEncoder::new(PeScheme::Rope2D, 8, 10000.0).unwrap();
        let mut rng = RngStream::new(28, 0);
        let x = Tensor::randn(vec![5 * 8], 1.0, &mut rng);
        let c: Tensor<f64> = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        let f = move |_: &Tape<f64>, x: &Tensor<f64>| {
            let rotated = enc.apply(&x.reshape(vec![5, 8])?, &positions)?;
            Ok(ops::sum_all(&ops::mul(&rotated, &c)?))
        };
        let report = grad_check(&f, &x, 1e-5, 1e-6).unwrap();
        assert!(report.pass, "{report}");
    }
}
